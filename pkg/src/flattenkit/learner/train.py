"""Training and multi-view evaluation on flattened clips."""

from __future__ import annotations

import csv
import json
import logging
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ..errors import ContractError, NonFiniteError, ShapeMismatch, Unconfigured
from ..grid import FlattenPlan, GridSpec, Kind, _tile, square_grid_for
from ..ingest import load_manifest, read_clip, read_tensor, resolve_clip, write_tensor
from ..sampler import ViewSpec, make_views, parse_view_spec, random_view
from ..seeding import derive_seed, seeded_permutation
from .net import ConvNetSpec, ConvStage, forward, init_params, loss_and_grad, softmax
from .optim import AdamW, ParamStore, warmup_cosine_lr

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "lr", "train_loss", "val_top1", "val_top5")

# independent streams derived from the run seed
_INIT, _SHUFFLE, _PERMUTE, _AUGMENT = 1, 2, 3, 4


@dataclass
class TrainConfig:
    """Desk-scale defaults; the schedule is linear warmup then cosine, per step."""

    epochs: int = 60
    warmup_epochs: int = 5
    base_lr: float = 1e-3
    batch: int = 32
    weight_decay: float = 5e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 1
    kind: str = "row-major"
    grid: str | None = None
    nested_n: int | None = None
    plan_seed: int | None = None
    views: str | None = None
    stages: tuple | None = None
    n_classes: int | None = None
    augment: bool = False

    def validate(self) -> None:
        if self.epochs < 1:
            raise Unconfigured("epochs must be >= 1")
        if self.warmup_epochs < 0:
            raise ContractError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        if self.base_lr <= 0:
            raise ContractError("base_lr must be > 0")
        if self.batch < 1:
            raise ContractError("batch must be >= 1")

    def plan_for(self, t: int) -> FlattenPlan:
        grid = GridSpec.parse(self.grid) if self.grid else GridSpec(*square_grid_for(t))
        kind = Kind.parse(self.kind)
        seed = self.seed if self.plan_seed is None else self.plan_seed
        return FlattenPlan(kind, grid, nested_n=self.nested_n if kind is Kind.NESTED else None,
                           seed=seed if kind is Kind.RANDOM else None)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = list(self.stages) if self.stages is not None else None
        return d


@dataclass
class ClipSet:
    clips: np.ndarray  # (n, t, c, h, w)
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def clip_shape(self) -> tuple[int, int, int, int]:
        return tuple(self.clips.shape[1:])


def load_clips(manifest, n_classes: int | None = None) -> ClipSet:
    entries = load_manifest(manifest, n_classes)
    if not entries:
        raise ContractError(f"manifest {manifest} has no clips")
    clips = [read_clip(resolve_clip(e, manifest)) for e in entries]
    shapes = {c.shape for c in clips}
    if len(shapes) != 1:
        raise ShapeMismatch(f"clips in {manifest} have differing shapes {sorted(shapes)}")
    return ClipSet(np.stack(clips), np.array([e.label for e in entries], np.int64))


@dataclass
class Model:
    spec: ConvNetSpec
    params: dict[str, np.ndarray]

    def logits(self, x: np.ndarray, batch: int = 64) -> np.ndarray:
        return np.concatenate([forward(self.params, self.spec, x[i:i + batch]) for i in range(0, len(x), batch)])


class EvalResult(NamedTuple):
    top1: float
    top5: float
    confusion: np.ndarray


def _composite(frames: np.ndarray, plan: FlattenPlan, order) -> np.ndarray:
    g = plan.grid
    return _tile(frames[order], g.rows, g.cols, plan.transpose and plan.kind is not Kind.NESTED)


def eval_order(plan: FlattenPlan, clip_index: int) -> list[int]:
    """Slot order used at evaluation. Seeded random plans draw one
    permutation per clip from ``(seed, clip_index)``."""
    if plan.kind is Kind.RANDOM and plan.permutation is None:
        return seeded_permutation(plan.t, derive_seed(plan.seed, clip_index))
    return plan.slot_order()


def topk_hits(probs: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -p: equal probabilities rank by class index
    ranked = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    return (ranked == labels[:, None]).any(axis=1)


def evaluate(model: Model, data, view_spec: "ViewSpec | str | None", plan: FlattenPlan) -> EvalResult:
    """Average softmax over the C*D views of each clip, then score top-1/top-5.

    ``data`` is a manifest path or a loaded :class:`ClipSet`.
    """
    if not isinstance(data, ClipSet):
        data = load_clips(data, model.spec.n_classes)
    t, _, h, _ = data.clip_shape
    if view_spec is None:
        view_spec = ViewSpec(h, t)
    elif isinstance(view_spec, str):
        view_spec = parse_view_spec(view_spec)
    if view_spec.frames != plan.t:
        raise ShapeMismatch(f"views have {view_spec.frames} frames, plan tiles {plan.t}")
    n_cls = model.spec.n_classes
    probs = np.zeros((len(data), n_cls))
    for i, clip in enumerate(data.clips):
        order = eval_order(plan, i)
        views = np.stack([_composite(v.frames, plan, order) for v in make_views(clip, view_spec)])
        probs[i] = softmax(model.logits(views).astype(np.float64)).mean(axis=0)
    labels = data.labels
    pred = np.argsort(-probs, axis=1, kind="stable")[:, 0]
    confusion = np.zeros((n_cls, n_cls), np.int64)
    np.add.at(confusion, (labels, pred), 1)
    return EvalResult(
        float(topk_hits(probs, labels, 1).mean()),
        float(topk_hits(probs, labels, min(5, n_cls)).mean()),
        confusion,
    )


def save_checkpoint(model: Model, directory, **extra) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, p in model.params.items():
        fname = f"{name}.fltn"
        write_tensor(directory / fname, np.ascontiguousarray(p, np.float32))
        entries.append({"name": name, "shape": list(p.shape), "file": fname})
    meta = {"net": model.spec.to_dict(), "params": entries, **extra}
    (directory / "checkpoint.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


def load_checkpoint(directory) -> Model:
    directory = Path(directory)
    meta = json.loads((directory / "checkpoint.json").read_text(encoding="utf-8"))
    spec = ConvNetSpec.from_dict(meta["net"])
    params = {}
    for e in meta["params"]:
        arr = read_tensor(directory / e["file"])
        if list(arr.shape) != e["shape"]:
            raise ShapeMismatch(f"{e['file']} has shape {arr.shape}, checkpoint says {e['shape']}")
        params[e["name"]] = arr
    return Model(spec, params)


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


def write_history(rows: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in HISTORY_FIELDS])


class _TrainBatches:
    """Composites for each epoch. Fixed plans are tiled once; random plans
    draw a fresh permutation for every clip on every access."""

    def __init__(self, data: ClipSet, plan: FlattenPlan, config: TrainConfig):
        self.data, self.plan, self.config = data, plan, config
        self.per_access = plan.kind is Kind.RANDOM and plan.permutation is None
        self.permute_seed = derive_seed(config.seed, _PERMUTE)
        self.aug_rng = np.random.default_rng(derive_seed(config.seed, _AUGMENT))
        self.fixed = None
        if not self.per_access and not config.augment:
            order = plan.slot_order()
            self.fixed = np.stack([_composite(c, plan, order) for c in data.clips])

    def composite(self, epoch: int, i: int) -> np.ndarray:
        clip = self.data.clips[i]
        if self.config.augment:
            t, _, h, _ = clip.shape
            clip = random_view(clip, ViewSpec(h, t), self.aug_rng)
        if self.per_access:
            access = epoch * len(self.data) + i
            order = seeded_permutation(self.plan.t, derive_seed(self.permute_seed, access))
        else:
            order = self.plan.slot_order()
        return _composite(clip, self.plan, order)

    def batch(self, epoch: int, idx: np.ndarray) -> np.ndarray:
        if self.fixed is not None:
            return self.fixed[idx]
        return np.stack([self.composite(epoch, int(i)) for i in idx])


def train(
    config: TrainConfig,
    train_manifest,
    val_manifest,
    plan: FlattenPlan | None = None,
    out_dir=None,
) -> list[dict]:
    """Train a fresh net and return one history row per epoch.

    When ``out_dir`` is given it receives ``config.json``, ``history.csv`` and
    the best-validation checkpoint under ``checkpoint/``.
    """
    config.validate()
    train_set = train_manifest if isinstance(train_manifest, ClipSet) else load_clips(train_manifest, config.n_classes)
    val_set = val_manifest if isinstance(val_manifest, ClipSet) else load_clips(val_manifest, config.n_classes)
    if train_set.clip_shape != val_set.clip_shape:
        raise ShapeMismatch(f"train clips {train_set.clip_shape} vs val clips {val_set.clip_shape}")
    t, c, h, w = train_set.clip_shape
    if plan is None:
        plan = config.plan_for(t)
    if plan.t != t:
        raise ShapeMismatch(f"plan tiles {plan.t} frames, clips have {t}")
    n_classes = config.n_classes or int(max(train_set.labels.max(), val_set.labels.max())) + 1
    stages = tuple(ConvStage(*s) if isinstance(s, (list, tuple)) else ConvStage(s)
                   for s in config.stages) if config.stages is not None else None
    spec = ConvNetSpec((c, plan.grid.rows * h, plan.grid.cols * w), n_classes, stages)
    view_spec = parse_view_spec(config.views) if config.views else ViewSpec(h, t)

    store = ParamStore(init_params(spec, derive_seed(config.seed, _INIT)))
    opt = AdamW(config.weight_decay, config.beta1, config.beta2, config.eps)
    shuffle = np.random.default_rng(derive_seed(config.seed, _SHUFFLE))
    batches = _TrainBatches(train_set, plan, config)

    n = len(train_set)
    steps_per_epoch = -(-n // config.batch)
    total = steps_per_epoch * config.epochs
    # short runs keep at least one post-warmup epoch
    warmup = steps_per_epoch * min(config.warmup_epochs, config.epochs - 1)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        resolved = {"train": config.to_dict(), "plan": plan.to_dict(), "net": spec.to_dict(),
                    "views": str(view_spec), "train_manifest": str(train_manifest) if not isinstance(train_manifest, ClipSet) else None,
                    "val_manifest": str(val_manifest) if not isinstance(val_manifest, ClipSet) else None}
        (out_dir / "config.json").write_text(json.dumps(resolved, indent=2) + "\n", encoding="utf-8")

    history: list[dict] = []
    best = None
    step = 0
    for epoch in range(config.epochs):
        order = shuffle.permutation(n)
        epoch_lr = warmup_cosine_lr(step, config.base_lr, warmup, total)
        loss_sum = 0.0
        for b in range(0, n, config.batch):
            idx = order[b:b + config.batch]
            x = batches.batch(epoch, idx)
            try:
                loss, grads = loss_and_grad(store.params, spec, x, train_set.labels[idx])
                opt.step(store, grads, warmup_cosine_lr(step, config.base_lr, warmup, total))
            except NonFiniteError as exc:
                raise NonFiniteError(str(exc), epoch=epoch + 1) from exc
            loss_sum += loss * len(idx)
            step += 1
        model = Model(spec, store.params)
        res = evaluate(model, val_set, view_spec, plan)
        row = {"epoch": epoch + 1, "lr": epoch_lr, "train_loss": loss_sum / n,
               "val_top1": res.top1, "val_top5": res.top5}
        history.append(row)
        log.info("epoch %d lr %.3g loss %.4f top1 %.4f top5 %.4f", *(row[k] for k in HISTORY_FIELDS))
        if best is None or res.top1 > best[0]:
            best = (res.top1, epoch + 1, {k: v.copy() for k, v in store.params.items()})

    if out_dir is not None:
        write_history(history, out_dir / "history.csv")
        save_checkpoint(Model(spec, best[2]), out_dir / "checkpoint", epoch=best[1], val_top1=best[0])
    return history


def train_model(config: TrainConfig, train_set, val_set, plan: FlattenPlan | None = None, out_dir=None):
    """:func:`train`, also returning the best checkpoint as a :class:`Model`."""
    if out_dir is None:
        with tempfile.TemporaryDirectory() as tmp:
            history = train(config, train_set, val_set, plan, tmp)
            return history, load_checkpoint(Path(tmp) / "checkpoint")
    history = train(config, train_set, val_set, plan, out_dir)
    return history, load_checkpoint(Path(out_dir) / "checkpoint")

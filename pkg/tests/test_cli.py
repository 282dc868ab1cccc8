import csv
import json

import numpy as np
import pytest

from flattenkit.cli import main, summarize_ablation, write_ablation_report
from flattenkit.ingest import read_tensor, write_frame_dir, write_tensor


@pytest.fixture
def clip16(tmp_path):
    rng = np.random.default_rng(0)
    clip = rng.random((16, 3, 6, 5), dtype=np.float32)
    path = tmp_path / "clip.fltn"
    write_tensor(path, clip)
    return path, clip


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(out), "--classes", "2", "--train", "2", "--val", "1", "--seed", "3"]) == 0
    return out


def test_flatten_row_major_16_frames(clip16, tmp_path, capsys):
    src, clip = clip16
    out = tmp_path / "flat.fltn"
    assert main(["flatten", str(src), "--kind", "row-major", "--frames", "16", "--out", str(out)]) == 0
    img = read_tensor(out)
    assert img.shape == (3, 4 * 6, 4 * 5)
    assert np.array_equal(img[:, 6:12, 0:5], clip[4])
    assert "4x4" in capsys.readouterr().out


def test_flatten_frame_dir_and_png(tmp_path):
    clip = np.random.default_rng(1).random((4, 1, 3, 3)).astype(np.float32)
    write_frame_dir(clip, tmp_path / "frames")
    png = tmp_path / "flat.png"
    assert main(["flatten", str(tmp_path / "frames"), "--out", str(tmp_path / "f.fltn"), "--png", str(png)]) == 0
    assert png.exists() and read_tensor(tmp_path / "f.fltn").shape == (1, 6, 6)


def test_random_seed_reproducible(clip16, tmp_path):
    src, _ = clip16
    outs = []
    for name in ("a.fltn", "b.fltn"):
        assert main(["flatten", str(src), "--kind", "random", "--seed", "7", "--out", str(tmp_path / name)]) == 0
        outs.append((tmp_path / name).read_bytes())
    assert outs[0] == outs[1]


def test_env_seed_default(clip16, tmp_path, monkeypatch):
    src, _ = clip16
    monkeypatch.setenv("FLATTENKIT_SEED", "7")
    assert main(["flatten", str(src), "--kind", "random", "--out", str(tmp_path / "env.fltn")]) == 0
    assert main(["flatten", str(src), "--kind", "random", "--seed", "7", "--out", str(tmp_path / "arg.fltn")]) == 0
    assert (tmp_path / "env.fltn").read_bytes() == (tmp_path / "arg.fltn").read_bytes()


def test_frames_12_not_square(clip16, tmp_path, capsys):
    src, _ = clip16
    code = main(["flatten", str(src), "--frames", "12", "--out", str(tmp_path / "x.fltn")])
    assert code == 2
    err = capsys.readouterr().err.strip()
    assert err.startswith("flattenkit: error:") and "\n" not in err


def test_frames_12_explicit_grid_ok(clip16, tmp_path):
    src, _ = clip16
    assert main(["flatten", str(src), "--frames", "12", "--grid", "3x4", "--out", str(tmp_path / "x.fltn")]) == 0
    assert read_tensor(tmp_path / "x.fltn").shape == (3, 18, 20)


def test_missing_input_exit_3(tmp_path):
    assert main(["flatten", str(tmp_path / "nope.fltn"), "--out", str(tmp_path / "o.fltn")]) == 3


def test_bad_magic_exit_3(tmp_path):
    bad = tmp_path / "bad.fltn"
    bad.write_bytes(b"NOPE" + bytes(16))
    assert main(["flatten", str(bad), "--out", str(tmp_path / "o.fltn")]) == 3


def test_usage_error_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["flatten", "--kind", "diagonal"])
    assert exc.value.code == 2


@pytest.mark.parametrize("flags", [["--kind", "row-major"], ["--kind", "nested"], ["--kind", "nested", "--nested-n", "16"],
                                   ["--kind", "random", "--seed", "5"], ["--kind", "row-major", "--grid", "2x8"],
                                   ["--kind", "random", "--transpose"]])
def test_flatten_unflatten_byte_identical(clip16, tmp_path, flags):
    src, _ = clip16
    flat, back = tmp_path / "flat.fltn", tmp_path / "back.fltn"
    assert main(["flatten", str(src), *flags, "--out", str(flat)]) == 0
    assert main(["unflatten", str(flat), "--out", str(back)]) == 0
    assert back.read_bytes() == src.read_bytes()


def test_unflatten_to_frame_dir(clip16, tmp_path):
    src, clip = clip16
    flat = tmp_path / "flat.fltn"
    main(["flatten", str(src), "--out", str(flat)])
    assert main(["unflatten", str(flat), "--out", str(tmp_path / "frames"), "--frames-dir"]) == 0
    assert len(list((tmp_path / "frames").glob("*.png"))) == 16


def test_sample_writes_views(clip16, tmp_path):
    src, _ = clip16
    assert main(["sample", str(src), "--views", "4x4x3x2", "--out", str(tmp_path / "v")]) == 0
    meta = json.loads((tmp_path / "v" / "views.json").read_text())
    assert len(meta["clips"]) == 6
    assert read_tensor(tmp_path / "v" / meta["clips"][0]["file"]).shape == (4, 3, 4, 4)


def test_sample_bad_spec_exit_2(clip16, tmp_path):
    src, _ = clip16
    assert main(["sample", str(src), "--views", "4x4x2", "--out", str(tmp_path / "v")]) == 2


def test_synth_counts(tmp_path):
    out = tmp_path / "ds"
    assert main(["synth", "--out", str(out), "--classes", "8", "--train", "64", "--val", "16", "--seed", "1"]) == 0
    for split, n in (("train", 512), ("val", 128)):
        with open(out / f"{split}.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == n
        assert np.bincount([int(r["label"]) for r in rows]).tolist() == [n // 8] * 8
    assert len(list((out / "train").iterdir())) == 512


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"classes": 2, "train": 3, "val": 2, "seed": 4}))
    assert main(["synth", "--out", str(tmp_path / "a"), "--config", str(cfg), "--train", "1"]) == 0
    meta = json.loads((tmp_path / "a" / "dataset.json").read_text())
    assert meta["splits"]["train"]["count"] == 2 and meta["splits"]["val"]["count"] == 4


def test_train_nested_history_rows(tiny_data, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--data", str(tiny_data), "--flatten", "nested", "--nested-n", "4", "--out", str(out)]) == 0
    with open(out / "history.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 60
    assert list(rows[0]) == ["epoch", "lr", "train_loss", "val_top1", "val_top5"]
    resolved = json.loads((out / "config.json").read_text())
    assert resolved["plan"]["kind"] == "nested" and resolved["plan"]["nested_n"] == 4


def test_train_zero_epochs_exit_2(tiny_data, tmp_path):
    assert main(["train", "--data", str(tiny_data), "--epochs", "0", "--out", str(tmp_path / "r")]) == 2


def test_train_missing_manifest_exit_3(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "r")]) == 3


def test_eval_multiview_metrics(tiny_data, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--data", str(tiny_data), "--epochs", "2", "--out", str(run)]) == 0
    metrics = tmp_path / "m.csv"
    assert main(["eval", "--run", str(run), "--data", str(tiny_data), "--views", "32x16x1x4",
                 "--out", str(metrics)]) == 0
    with open(metrics) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1 and {"top1", "top5"} <= set(rows[0])
    assert 0.0 <= float(rows[0]["top1"]) <= float(rows[0]["top5"]) <= 1.0


def test_ablation_report_schema(tmp_path):
    rows = [{"variant": v, "seed": s, "top1": t1, "top5": 1.0, "direction_top1": t1,
             "final_train_loss": 0.1, "train_seconds": 1.0}
            for s in (1, 2) for v, t1 in (("row-major", 1.0), ("nested", 0.9), ("random", 0.5))]
    summary = write_ablation_report(rows, tmp_path)
    with open(tmp_path / "ablation.csv") as fh:
        table = list(csv.reader(fh))
    assert table[0] == ["variant", "top1", "top5"]
    assert [r[0] for r in table[1:]] == ["row-major", "nested", "random"]
    gaps = {r["pair"]: float(r["delta_top1"]) for r in csv.DictReader(open(tmp_path / "ablation_gaps.csv"))}
    assert gaps["row-major-random"] == pytest.approx(0.5)
    assert summarize_ablation(rows) == summary


def test_ablate_end_to_end(tiny_data, tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--data", str(tiny_data), "--epochs", "1", "--seeds", "1", "--out", str(out)]) == 0
    with open(out / "ablation.csv") as fh:
        assert [r["variant"] for r in csv.DictReader(fh)] == ["row-major", "nested", "random"]
    assert (out / "ablate.json").exists()
    assert len(list(csv.DictReader(open(out / "ablation_runs.csv")))) == 3


def test_flops_command(capsys):
    assert main(["flops", "1", "128", "128"]) == 0
    assert "MACs 17843200" in capsys.readouterr().out

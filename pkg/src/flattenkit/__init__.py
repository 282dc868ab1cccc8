"""Flatten transforms: tile a video clip into one image so 2D models can read it."""

from .errors import (
    BadMagic,
    ContractError,
    FlattenKitError,
    FormatError,
    InvalidPermutation,
    InvalidViewSpec,
    ManifestError,
    MissingFrame,
    NonFiniteError,
    NotPerfectSquare,
    ShapeMismatch,
    SpriteOutOfBounds,
    Truncated,
    Unconfigured,
)
from .grid import FlatImage, FlattenPlan, GridSpec, Kind, flatten, frame_to_block, unflatten
from .ingest import load_manifest, read_clip, read_tensor, write_composite_png, write_tensor
from .sampler import ViewSpec, make_views, parse_view_spec
from .seeding import derive_seed, seeded_permutation
from .synth import SpriteClipSpec, SynthDataset, generate_dataset, render_clip

__version__ = "0.1.0"

__all__ = [
    "BadMagic", "ContractError", "FlattenKitError", "FormatError", "InvalidPermutation", "InvalidViewSpec",
    "ManifestError", "MissingFrame", "NonFiniteError", "NotPerfectSquare", "ShapeMismatch",
    "SpriteOutOfBounds", "Truncated", "Unconfigured",
    "FlatImage", "FlattenPlan", "GridSpec", "Kind", "flatten", "frame_to_block", "unflatten",
    "load_manifest", "read_clip", "read_tensor", "write_composite_png", "write_tensor",
    "ViewSpec", "make_views", "parse_view_spec",
    "derive_seed", "seeded_permutation",
    "SpriteClipSpec", "SynthDataset", "generate_dataset", "render_clip",
]

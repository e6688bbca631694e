"""Shared domain types and on-disk dataset persistence.

All images live in float32 [0,1] HxWx3 while in memory; masks are strictly
binary uint8 {0,1}. On disk both are 8-bit lossless PNG (masks as {0,255})
so that mask round-trips are bit-exact.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from PIL import Image

MANIFEST_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"

PROVENANCES = ("real", "synthetic")
SPLITS = ("train", "test")


class ConfigError(ValueError):
    """Invalid configuration value or violated precondition."""


class ShapeError(ValueError):
    """Mismatched array dimensions."""


class DatasetError(RuntimeError):
    """Dataset load/format failure (missing file, non-binary mask, bad manifest)."""


def _readonly(arr: np.ndarray) -> np.ndarray:
    view = arr.view()
    view.setflags(write=False)
    return view


def as_image(arr, name: str = "image") -> np.ndarray:
    """Validate and return a float32 HxWx3 image with intensities in [0,1]."""
    a = np.asarray(arr, dtype=np.float32)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ShapeError(f"{name} must be HxWx3, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ConfigError(f"{name} contains non-finite values")
    if a.min() < 0.0 or a.max() > 1.0:
        raise ConfigError(f"{name} intensities outside [0,1]")
    return a


@dataclass(frozen=True, eq=False)
class ImagePair:
    """Two co-registered same-size color images of one scene at times T0 and T1."""

    t0: np.ndarray
    t1: np.ndarray
    scene_id: str = ""

    def __post_init__(self):
        t0 = as_image(self.t0, "t0")
        t1 = as_image(self.t1, "t1")
        if t0.shape != t1.shape:
            raise ShapeError(f"t0 shape {t0.shape} != t1 shape {t1.shape}")
        object.__setattr__(self, "t0", _readonly(t0))
        object.__setattr__(self, "t1", _readonly(t1))

    @property
    def shape(self):
        """(H, W) spatial dims."""
        return self.t0.shape[:2]


@dataclass(frozen=True, eq=False)
class ChangeMask:
    """Per-pixel binary change mask, strictly {0,1}."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got shape {d.shape}")
        # check before the uint8 cast so e.g. 0.5 cannot truncate into range
        if not np.isin(d, (0, 1)).all():
            raise ConfigError("mask values must be exactly 0 or 1")
        object.__setattr__(self, "data", _readonly(d.astype(np.uint8)))

    @property
    def shape(self):
        return self.data.shape

    @classmethod
    def zeros(cls, shape) -> "ChangeMask":
        return cls(np.zeros(shape, dtype=np.uint8))


DEFAULT_CLAMP_EPS = 1e-7


@dataclass(frozen=True, eq=False)
class ProbabilityMask:
    """Predicted per-pixel change probabilities, clamped away from {0,1}."""

    data: np.ndarray
    clamp_eps: float = DEFAULT_CLAMP_EPS

    def __post_init__(self):
        eps = float(self.clamp_eps)
        if not 0.0 < eps < 0.5:
            raise ConfigError(f"clamp_eps must be in (0, 0.5), got {eps}")
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 2:
            raise ShapeError(f"probability mask must be 2-D, got shape {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ConfigError("probability mask contains non-finite values")
        d = np.clip(d, eps, 1.0 - eps)
        object.__setattr__(self, "data", _readonly(d))
        object.__setattr__(self, "clamp_eps", eps)

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True, eq=False)
class LabeledSample:
    """An image pair with its ground-truth change mask.

    mask may be None for unlabeled test records; training and evaluation
    require it.
    """

    pair: ImagePair
    mask: Optional[ChangeMask]
    provenance: str = "real"

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ConfigError(f"provenance must be one of {PROVENANCES}")
        if self.mask is not None and self.mask.shape != self.pair.shape:
            raise ShapeError(
                f"mask shape {self.mask.shape} != pair shape {self.pair.shape}"
            )


@dataclass
class ManifestRecord:
    id: str
    t0_path: str
    t1_path: str
    mask_path: Optional[str] = None
    split: str = "train"
    provenance: str = "real"
    scene_id: str = ""


@dataclass
class DatasetManifest:
    """Ordered list of dataset records; ids unique, train records carry masks."""

    records: list = field(default_factory=list)

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise DatasetError("manifest ids are not unique")
        for r in self.records:
            if r.split not in SPLITS:
                raise DatasetError(f"record {r.id}: split must be one of {SPLITS}")
            if r.split == "train" and r.mask_path is None:
                raise DatasetError(f"record {r.id}: train records must carry a mask")

    def to_dict(self) -> dict:
        return {
            "format_version": MANIFEST_FORMAT_VERSION,
            "records": [
                {
                    "id": r.id,
                    "t0_path": r.t0_path,
                    "t1_path": r.t1_path,
                    "mask_path": r.mask_path,
                    "split": r.split,
                    "provenance": r.provenance,
                    "scene_id": r.scene_id,
                }
                for r in self.records
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        version = d.get("format_version")
        if version != MANIFEST_FORMAT_VERSION:
            raise DatasetError(
                f"unsupported manifest format_version {version!r} "
                f"(expected {MANIFEST_FORMAT_VERSION})"
            )
        records = [
            ManifestRecord(
                id=r["id"],
                t0_path=r["t0_path"],
                t1_path=r["t1_path"],
                mask_path=r.get("mask_path"),
                split=r.get("split", "train"),
                provenance=r.get("provenance", "real"),
                scene_id=r.get("scene_id", ""),
            )
            for r in d.get("records", [])
        ]
        return cls(records=records)


# --- image file encoding -------------------------------------------------


def encode_u8(img: np.ndarray) -> np.ndarray:
    """float [0,1] -> uint8 by round-to-nearest."""
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def decode_u8(u8: np.ndarray) -> np.ndarray:
    """uint8 -> float32 [0,1]."""
    return (u8.astype(np.float32) / 255.0).astype(np.float32)


def _write_png(path: str, u8: np.ndarray):
    Image.fromarray(u8).save(path, format="PNG")


def _read_png(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise DatasetError(f"missing file: {path}")
    with Image.open(path) as im:
        return np.asarray(im)


def read_image_file(path: str) -> np.ndarray:
    """Read an 8-bit color image file as float32 [0,1] HxWx3."""
    arr = _read_png(path)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    if arr.shape[2] == 4:
        arr = arr[:, :, :3]
    return decode_u8(arr)


def read_mask_file(path: str) -> ChangeMask:
    """Read a strictly binary {0,255} 8-bit mask file."""
    arr = _read_png(path)
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    if not np.isin(arr, (0, 255)).all():
        bad = sorted(set(np.unique(arr)) - {0, 255})
        raise DatasetError(f"non-binary mask values {bad[:8]} in {path}")
    return ChangeMask((arr > 127).astype(np.uint8))


def write_mask_file(path: str, mask: ChangeMask) -> str:
    """Write a binary mask as a {0,255} 8-bit file (inverse of read_mask_file)."""
    _write_png(path, (np.array(mask.data) * 255).astype(np.uint8))
    return path


# --- dataset save / load -------------------------------------------------


def save_dataset(samples, out_dir: str, split: str = "train") -> DatasetManifest:
    """Write samples as <out_dir>/{t0,t1,masks}/<id>.png plus manifest.json.

    Record order follows the input order; ids are zero-padded indices.
    """
    if split not in SPLITS:
        raise ConfigError(f"split must be one of {SPLITS}")
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("t0", "t1", "masks"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    records = []
    for i, sample in enumerate(samples):
        sid = f"{i:05d}"
        t0_rel = f"t0/{sid}.png"
        t1_rel = f"t1/{sid}.png"
        _write_png(os.path.join(out_dir, t0_rel), encode_u8(sample.pair.t0))
        _write_png(os.path.join(out_dir, t1_rel), encode_u8(sample.pair.t1))
        mask_rel = None
        if sample.mask is not None:
            mask_rel = f"masks/{sid}.png"
            _write_png(
                os.path.join(out_dir, mask_rel),
                (sample.mask.data * 255).astype(np.uint8),
            )
        records.append(
            ManifestRecord(
                id=sid,
                t0_path=t0_rel,
                t1_path=t1_rel,
                mask_path=mask_rel,
                split=split,
                provenance=sample.provenance,
                scene_id=sample.pair.scene_id,
            )
        )

    manifest = DatasetManifest(records=records)
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as f:
        json.dump(manifest.to_dict(), f, indent=1)
        f.write("\n")
    return manifest


def load_dataset(manifest_path: str):
    """Load samples in manifest order. Raises DatasetError naming any missing path."""
    if os.path.isdir(manifest_path):
        manifest_path = os.path.join(manifest_path, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise DatasetError(f"missing file: {manifest_path}")
    with open(manifest_path) as f:
        try:
            manifest = DatasetManifest.from_dict(json.load(f))
        except json.JSONDecodeError as e:
            raise DatasetError(f"unparseable manifest {manifest_path}: {e}") from e

    root = os.path.dirname(os.path.abspath(manifest_path))
    samples = []
    for rec in manifest.records:
        t0 = read_image_file(os.path.join(root, rec.t0_path))
        t1 = read_image_file(os.path.join(root, rec.t1_path))
        pair = ImagePair(t0=t0, t1=t1, scene_id=rec.scene_id or rec.id)
        mask = None
        if rec.mask_path is not None:
            mask = read_mask_file(os.path.join(root, rec.mask_path))
        samples.append(LabeledSample(pair=pair, mask=mask, provenance=rec.provenance))
    return samples


def dataset_digest(root: str) -> str:
    """sha256 over the manifest plus all referenced files, stable across runs."""
    h = hashlib.sha256()
    manifest_path = os.path.join(root, MANIFEST_NAME)
    with open(manifest_path, "rb") as f:
        h.update(f.read())
    with open(manifest_path) as f:
        manifest = DatasetManifest.from_dict(json.load(f))
    for rec in manifest.records:
        for rel in (rec.t0_path, rec.t1_path, rec.mask_path):
            if rel is None:
                continue
            h.update(rel.encode())
            with open(os.path.join(root, rel), "rb") as f:
                h.update(f.read())
    return h.hexdigest()

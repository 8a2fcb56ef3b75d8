"""Synthetic ground-truth phantoms and dataset persistence."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import FormatError, ValidationError
from .kspace import MIN_SIZE, load_cim, save_cim

SPLITS = ("train", "val", "test")

# (intensity, semi-axis a, semi-axis b, x0, y0, angle in degrees)
_MODIFIED_SHEPP_LOGAN = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
)


def _check_dims(h: int, w: int):
    if h < MIN_SIZE or w < MIN_SIZE:
        raise ValidationError(f"phantom must be at least {MIN_SIZE}x{MIN_SIZE}, got {h}x{w}")


def _grid(h: int, w: int):
    y = (np.arange(h) - h / 2 + 0.5) / (h / 2)
    x = (np.arange(w) - w / 2 + 0.5) / (w / 2)
    return np.meshgrid(x, -y)


def _rasterize(h: int, w: int, ellipses) -> np.ndarray:
    xx, yy = _grid(h, w)
    img = np.zeros((h, w))
    for value, a, b, x0, y0, deg in ellipses:
        t = np.deg2rad(deg)
        dx, dy = xx - x0, yy - y0
        u = dx * np.cos(t) + dy * np.sin(t)
        v = -dx * np.sin(t) + dy * np.cos(t)
        img[(u / a) ** 2 + (v / b) ** 2 <= 1.0] += value
    return img


def _finish(img: np.ndarray) -> torch.Tensor:
    img = np.clip(img, 0.0, None)
    peak = img.max()
    if peak <= 0:
        raise ValidationError("phantom is empty at this resolution")
    # float32 rounding keeps CIM1 round trips exact
    img = (img / peak).astype(np.float32)
    img /= img.max()
    return torch.from_numpy(img.astype(np.float64)).to(torch.complex128)


def gen_ellipse_phantom(
    h: int,
    w: int,
    n_ellipses: int = 8,
    seed: int = 0,
    ellipses: Sequence[tuple] | None = None,
) -> torch.Tensor:
    """Sum of random rotated ellipses, clipped at zero and scaled to peak 1.

    Explicit ``ellipses`` (intensity, a, b, x0, y0, degrees) in normalized
    coordinates bypass the random draw.
    """
    _check_dims(h, w)
    if ellipses is None:
        if n_ellipses < 1:
            raise ValidationError("n_ellipses must be >= 1")
        rng = np.random.default_rng(seed)
        ellipses = [
            (
                rng.uniform(0.2, 1.0),
                rng.uniform(0.08, 0.6),
                rng.uniform(0.08, 0.6),
                rng.uniform(-0.5, 0.5),
                rng.uniform(-0.5, 0.5),
                rng.uniform(0.0, 180.0),
            )
            for _ in range(n_ellipses)
        ]
    return _finish(_rasterize(h, w, ellipses))


def shepp_logan(h: int, w: int | None = None) -> torch.Tensor:
    w = h if w is None else w
    _check_dims(h, w)
    return _finish(_rasterize(h, w, _MODIFIED_SHEPP_LOGAN))


@dataclass
class Dataset:
    items: list[tuple[str, torch.Tensor]] = field(default_factory=list)
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"unknown split {self.split!r}")
        shapes = {tuple(img.shape) for _, img in self.items}
        if len(shapes) > 1:
            raise ValidationError(f"images must share one shape, got {sorted(shapes)}")

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, i):
        return self.items[i]

    @property
    def ids(self) -> list[str]:
        return [i for i, _ in self.items]

    @property
    def images(self) -> list[torch.Tensor]:
        return [img for _, img in self.items]

    @property
    def shape(self) -> tuple[int, int]:
        if not self.items:
            raise ValidationError("empty dataset has no shape")
        return tuple(self.items[0][1].shape)

    def subset(self, start: int, stop: int, split: str | None = None) -> "Dataset":
        return Dataset(self.items[start:stop], split or self.split)


def item_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def gen_dataset(
    count: int, h: int, w: int, seed: int = 0, split: str = "train", n_ellipses: int = 8
) -> Dataset:
    if count < 1:
        raise ValidationError("count must be >= 1")
    items = [
        (f"{split}_{i:04d}", gen_ellipse_phantom(h, w, n_ellipses, item_seed(seed, i)))
        for i in range(count)
    ]
    return Dataset(items, split)


def save_dataset(ds: Dataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for item_id, img in ds.items:
        save_cim(img, d / f"{item_id}.cim")
    h, w = ds.shape
    manifest = {"split": ds.split, "H": h, "W": w, "ids": ds.ids}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise FormatError("missing manifest.json", mpath)
    try:
        manifest = json.loads(mpath.read_text())
        split, h, w, ids = manifest["split"], manifest["H"], manifest["W"], manifest["ids"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed manifest ({exc})", mpath) from exc
    if not ids:
        raise FormatError("manifest lists no items", mpath)
    items = []
    for item_id in ids:
        img = load_cim(d / f"{item_id}.cim")
        if tuple(img.shape) != (h, w):
            raise FormatError(f"shape {tuple(img.shape)} disagrees with manifest", d / f"{item_id}.cim")
        items.append((item_id, img))
    return Dataset(items, split)

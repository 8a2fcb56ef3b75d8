"""Centered Fourier forward model, undersampling operators and mask generators.

Images and k-space grids are 2D complex ``torch`` tensors of shape (H, W).
The Fourier transform is orthonormal with the DC coefficient at index
(H // 2, W // 2).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Literal, Union

import numpy as np
import torch

from .errors import BudgetError, FormatError, ValidationError

CDTYPE = torch.complex128
RDTYPE = torch.float64

MaskKind = Literal["cartesian1d", "random2d", "resample"]
MASK_KINDS: tuple[str, ...] = ("cartesian1d", "random2d", "resample")
MIN_SIZE = 8


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def default_center_size(h: int) -> int:
    """Dense-center side scaled from 20 samples at a 256 grid, at least 4."""
    return max(4, round_half_away(20 * h / 256))


def as_complex(x) -> torch.Tensor:
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(x))
    x = torch.as_tensor(x)
    if x.dtype != CDTYPE:
        x = x.to(CDTYPE)
    return x


def _check_grid(x: torch.Tensor, name: str = "input") -> torch.Tensor:
    x = as_complex(x)
    if x.ndim != 2:
        raise ValidationError(f"{name} must be 2D, got shape {tuple(x.shape)}")
    if not bool(torch.isfinite(torch.view_as_real(x.detach())).all()):
        raise ValidationError(f"{name} contains non-finite entries")
    return x


def _fft2c(x: torch.Tensor) -> torch.Tensor:
    x = torch.fft.ifftshift(x, dim=(-2, -1))
    x = torch.fft.fft2(x, norm="ortho")
    return torch.fft.fftshift(x, dim=(-2, -1))


def _ifft2c(k: torch.Tensor) -> torch.Tensor:
    k = torch.fft.ifftshift(k, dim=(-2, -1))
    k = torch.fft.ifft2(k, norm="ortho")
    return torch.fft.fftshift(k, dim=(-2, -1))


def fft2c(img) -> torch.Tensor:
    """Orthonormal centered 2D FFT of an image."""
    return _fft2c(_check_grid(img, "image"))


def ifft2c(ks) -> torch.Tensor:
    """Inverse of :func:`fft2c`."""
    return _ifft2c(_check_grid(ks, "k-space"))


@dataclass(frozen=True, eq=False)
class SamplingMask:
    """Binary k-space sampling pattern plus the recipe that produced it.

    ``center_size`` counts columns for ``cartesian1d`` and is the side of the
    dense square for the point-based kinds.
    """

    grid: np.ndarray
    kind: str
    rate: float
    center_size: int
    seed: int

    def __post_init__(self):
        g = np.asarray(self.grid)
        if g.ndim != 2:
            raise ValidationError(f"mask grid must be 2D, got shape {g.shape}")
        if not np.isin(g, (0, 1)).all():
            raise ValidationError("mask entries must be 0 or 1")
        if self.kind not in MASK_KINDS:
            raise ValidationError(f"unknown mask kind {self.kind!r}")
        g = g.astype(np.uint8)
        g.setflags(write=False)
        object.__setattr__(self, "grid", g)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def count(self) -> int:
        return int(self.grid.sum())

    @cached_property
    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.grid.astype(np.float64))

    def center_region(self) -> np.ndarray:
        """Boolean grid of the mandatory dense-center region."""
        return center_region(self.kind, *self.shape, self.center_size)

    def __eq__(self, other):
        if not isinstance(other, SamplingMask):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.seed == other.seed
            and self.center_size == other.center_size
            and np.array_equal(self.grid, other.grid)
        )

    __hash__ = None

    @classmethod
    def full(cls, h: int, w: int) -> "SamplingMask":
        return cls(np.ones((h, w), np.uint8), "resample", 1.0, 0, 0)


MaskLike = Union[SamplingMask, torch.Tensor, np.ndarray]


def mask_tensor(mask: MaskLike) -> torch.Tensor:
    if isinstance(mask, SamplingMask):
        return mask.tensor
    if isinstance(mask, np.ndarray):
        return torch.from_numpy(mask.astype(np.float64))
    return torch.as_tensor(mask).to(RDTYPE)


def _match(x: torch.Tensor, m: torch.Tensor):
    if tuple(x.shape[-2:]) != tuple(m.shape):
        raise ValidationError(f"shape mismatch: grid {tuple(x.shape)} vs mask {tuple(m.shape)}")


def undersample(img, mask: MaskLike) -> torch.Tensor:
    """``F_Ω x`` stored on the full grid, exactly zero off the mask."""
    x = as_complex(img)
    m = mask_tensor(mask)
    _match(x, m)
    return m * _fft2c(x)


def adjoint(ks, mask: MaskLike) -> torch.Tensor:
    """``F_Ω^H y``; the zero-filled reconstruction when ``ks`` is the measurement."""
    k = as_complex(ks)
    m = mask_tensor(mask)
    _match(k, m)
    return _ifft2c(m * k)


def center_region(kind: str, h: int, w: int, center_size: int) -> np.ndarray:
    region = np.zeros((h, w), dtype=bool)
    if center_size <= 0:
        return region
    c0 = w // 2 - center_size // 2
    if kind == "cartesian1d":
        region[:, c0 : c0 + center_size] = True
    else:
        r0 = h // 2 - center_size // 2
        region[r0 : r0 + center_size, c0 : c0 + center_size] = True
    return region


def make_mask(
    kind: str,
    h: int,
    w: int,
    rate: float,
    center_size: int | None = None,
    seed: int = 0,
) -> SamplingMask:
    """Uniform random mask with a fully sampled center.

    ``cartesian1d`` samples whole columns; ``random2d`` and ``resample`` sample
    individual points. The sample budget is ``round(rate * W)`` columns or
    ``round(rate * H * W)`` points, of which the center takes its share first.
    """
    if kind not in MASK_KINDS:
        raise ValidationError(f"unknown mask kind {kind!r}")
    if h < MIN_SIZE or w < MIN_SIZE:
        raise ValidationError(f"grid must be at least {MIN_SIZE}x{MIN_SIZE}, got {h}x{w}")
    if not 0.0 < rate <= 1.0:
        raise ValidationError(f"rate must lie in (0, 1], got {rate}")
    if center_size is None:
        center_size = default_center_size(h)
    if center_size < 0:
        raise ValidationError("center_size must be non-negative")
    limit = w if kind == "cartesian1d" else min(h, w)
    if center_size > limit:
        raise ValidationError(f"center of size {center_size} does not fit a {h}x{w} grid")

    rng = np.random.default_rng(seed)
    region = center_region(kind, h, w, center_size)
    if kind == "cartesian1d":
        budget = round_half_away(rate * w)
        if budget < center_size:
            raise BudgetError(f"rate {rate} gives {budget} columns, center needs {center_size}")
        free = np.flatnonzero(~region[0])
        cols = rng.choice(free, size=budget - center_size, replace=False)
        grid = region.copy()
        grid[:, cols] = True
    else:
        budget = round_half_away(rate * h * w)
        need = int(region.sum())
        if budget < need:
            raise BudgetError(f"rate {rate} gives {budget} samples, center needs {need}")
        free = np.flatnonzero(~region.ravel())
        picks = rng.choice(free, size=budget - need, replace=False)
        grid = region.ravel().copy()
        grid[picks] = True
        grid = grid.reshape(h, w)
    return SamplingMask(grid.astype(np.uint8), kind, float(rate), int(center_size), int(seed))


def partition_mask(
    omega: SamplingMask, loss_fraction: float, seed: int
) -> tuple[SamplingMask, SamplingMask]:
    """Split ``omega`` into a training part and a disjoint loss part.

    The dense center always stays in the training part. The loss part takes
    ``round(loss_fraction * n)`` of the ``n`` off-center samples, at least one.
    """
    if not 0.0 < loss_fraction < 1.0:
        raise ValidationError(f"loss_fraction must lie in (0, 1), got {loss_fraction}")
    center = omega.center_region()
    off = np.flatnonzero((omega.grid.astype(bool) & ~center).ravel())
    n_loss = max(1, round_half_away(loss_fraction * off.size))
    if n_loss >= off.size:
        raise BudgetError(
            f"loss_fraction {loss_fraction} leaves no off-center training samples "
            f"({off.size} available)"
        )
    rng = np.random.default_rng(seed)
    picks = rng.choice(off, size=n_loss, replace=False)
    lam = np.zeros(omega.grid.size, np.uint8)
    lam[picks] = 1
    lam = lam.reshape(omega.shape)
    theta = omega.grid - lam
    n = omega.grid.size
    return (
        SamplingMask(theta, omega.kind, int(theta.sum()) / n, omega.center_size, int(seed)),
        SamplingMask(lam, omega.kind, n_loss / n, 0, int(seed)),
    )


# --- file formats ---------------------------------------------------------

_MSK_MAGIC = b"MSK1"
_CIM_MAGIC = b"CIM1"
_KIND_CODE = {k: i for i, k in enumerate(MASK_KINDS)}


def save_mask(mask: SamplingMask, path) -> None:
    h, w = mask.shape
    header = _MSK_MAGIC + struct.pack("<IIII", h, w, _KIND_CODE[mask.kind], mask.seed & 0xFFFFFFFF)
    Path(path).write_bytes(header + mask.grid.tobytes(order="C"))


def load_mask(path, center_size: int | None = None) -> SamplingMask:
    """Read an MSK1 file.

    Rate and center size are not stored; the rate is recomputed from the grid
    and ``center_size`` defaults to the largest fully set centered block.
    """
    path = Path(path)
    if not path.exists():
        raise FormatError("mask file not found", path)
    raw = path.read_bytes()
    if len(raw) < 20 or raw[:4] != _MSK_MAGIC:
        raise FormatError("bad MSK1 magic or truncated header", path)
    h, w, code, seed = struct.unpack("<IIII", raw[4:20])
    if code >= len(MASK_KINDS):
        raise FormatError(f"unknown mask kind code {code}", path)
    body = raw[20:]
    if len(body) != h * w:
        raise FormatError(f"expected {h * w} mask bytes, found {len(body)}", path)
    grid = np.frombuffer(body, np.uint8).reshape(h, w).copy()
    if not np.isin(grid, (0, 1)).all():
        raise FormatError("mask bytes must be 0 or 1", path)
    kind = MASK_KINDS[code]
    if kind == "cartesian1d":
        rate = int(grid.all(axis=0).sum()) / w
    else:
        rate = int(grid.sum()) / (h * w)
    if center_size is None:
        center_size = _infer_center(grid, kind)
    elif not grid[center_region(kind, h, w, center_size)].all():
        raise FormatError(f"center of size {center_size} is not fully sampled", path)
    return SamplingMask(grid, kind, rate, center_size, seed)


def _infer_center(grid: np.ndarray, kind: str) -> int:
    h, w = grid.shape
    best = 0
    for c in range(1, min(h, w) + 1):
        if grid[center_region(kind, h, w, c)].all():
            best = c
        else:
            break
    return best


def save_cim(grid, path) -> None:
    """Write a complex grid as CIM1 (float32 real/imaginary pairs)."""
    arr = torch.as_tensor(grid).detach().cpu().numpy()
    if arr.ndim != 2:
        raise ValidationError("CIM1 stores 2D grids only")
    h, w = arr.shape
    pairs = np.empty((h, w, 2), dtype="<f4")
    pairs[..., 0] = arr.real
    pairs[..., 1] = arr.imag if np.iscomplexobj(arr) else 0.0
    Path(path).write_bytes(_CIM_MAGIC + struct.pack("<II", h, w) + pairs.tobytes(order="C"))


def load_cim(path) -> torch.Tensor:
    path = Path(path)
    if not path.exists():
        raise FormatError("complex-grid file not found", path)
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != _CIM_MAGIC:
        raise FormatError("bad CIM1 magic or truncated header", path)
    h, w = struct.unpack("<II", raw[4:12])
    body = raw[12:]
    if len(body) != 8 * h * w:
        raise FormatError(f"expected {8 * h * w} data bytes, found {len(body)}", path)
    pairs = np.frombuffer(body, dtype="<f4").reshape(h, w, 2).astype(np.float64)
    return torch.complex(torch.from_numpy(pairs[..., 0].copy()), torch.from_numpy(pairs[..., 1].copy()))

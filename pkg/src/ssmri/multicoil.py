"""Multi-coil forward model, sum-of-squares combination and CG-SENSE."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import FormatError, SolverError, ValidationError
from .kspace import MIN_SIZE, MaskLike, _fft2c, _ifft2c, _match, as_complex, load_cim, mask_tensor, save_cim


@dataclass
class CoilSensitivities:
    """Per-coil complex sensitivity maps, normalized so sum |S_i|^2 == 1."""

    maps: list[torch.Tensor]

    def __post_init__(self):
        if not self.maps:
            raise ValidationError("need at least one coil map")
        self.maps = [as_complex(m) for m in self.maps]

    @property
    def n_c(self) -> int:
        return len(self.maps)

    @property
    def stack(self) -> torch.Tensor:
        return torch.stack(self.maps)

    def sos(self) -> torch.Tensor:
        return (self.stack.abs() ** 2).sum(0).sqrt()


def simulate_coils(n_c: int, h: int, w: int, seed: int = 0, width: float = 0.6) -> CoilSensitivities:
    """Smooth Gaussian coil profiles placed around the image border.

    Each coil also carries a random smooth (linear plus constant) phase.
    """
    if n_c < 1:
        raise ValidationError("n_c must be >= 1")
    if h < MIN_SIZE or w < MIN_SIZE:
        raise ValidationError(f"coil grid must be at least {MIN_SIZE}x{MIN_SIZE}")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    maps = []
    for i in range(n_c):
        angle = 2 * np.pi * i / n_c + rng.uniform(-0.2, 0.2)
        cy, cx = 1.2 * np.sin(angle), 1.2 * np.cos(angle)
        mag = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        phase = rng.uniform(-np.pi, np.pi) + rng.uniform(-1, 1) * xx + rng.uniform(-1, 1) * yy
        maps.append(mag * np.exp(1j * phase))
    stack = np.stack(maps)
    stack /= np.sqrt((np.abs(stack) ** 2).sum(0, keepdims=True))
    return CoilSensitivities([torch.from_numpy(m) for m in stack])


def _check(x: torch.Tensor, s: CoilSensitivities, m: torch.Tensor):
    _match(x, m)
    if tuple(s.maps[0].shape) != tuple(m.shape):
        raise ValidationError(f"coil maps {tuple(s.maps[0].shape)} do not match mask {tuple(m.shape)}")


def forward_mc(x, sens: CoilSensitivities, omega: MaskLike) -> list[torch.Tensor]:
    x = as_complex(x)
    m = mask_tensor(omega)
    _check(x, sens, m)
    return list(m * _fft2c(sens.stack * x))


def adjoint_mc(ys: Sequence, sens: CoilSensitivities, omega: MaskLike) -> torch.Tensor:
    m = mask_tensor(omega)
    if len(ys) != sens.n_c:
        raise ValidationError(f"got {len(ys)} coil grids for {sens.n_c} coils")
    k = torch.stack([as_complex(y) for y in ys])
    _check(k[0], sens, m)
    return (sens.stack.conj() * _ifft2c(m * k)).sum(0)


def sos_combine(imgs_per_coil: Sequence) -> torch.Tensor:
    if len(imgs_per_coil) == 0:
        raise ValidationError("sos_combine needs at least one coil image")
    stack = torch.stack([as_complex(i) for i in imgs_per_coil])
    return (stack.abs() ** 2).sum(0).sqrt().to(stack.dtype)


def zero_filled_sos(ys: Sequence, omega: MaskLike) -> torch.Tensor:
    m = mask_tensor(omega)
    return sos_combine([_ifft2c(m * as_complex(y)) for y in ys])


@dataclass
class CGResult:
    x: torch.Tensor
    residuals: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def _vdot(a, b) -> torch.Tensor:
    return (a.conj() * b).sum()


def cg_sense(
    ys: Sequence,
    sens: CoilSensitivities,
    omega: MaskLike,
    lam: float = 1e-3,
    max_iters: int = 50,
    tol: float = 1e-6,
    method: str = "cr",
) -> CGResult:
    """Solve ``(A^H A + lam I) x = A^H y`` with ``A = forward_mc`` from ``x = 0``.

    ``method="cr"`` is the conjugate-residual form of conjugate gradients,
    whose residual norm never increases; ``method="cg"`` is textbook CG.
    ``residuals[k]`` is the relative residual norm after ``k`` iterations.
    """
    if lam < 0:
        raise ValidationError("lam must be non-negative")
    if method not in ("cr", "cg"):
        raise ValidationError(f"unknown method {method!r}")
    m = mask_tensor(omega)

    def normal(v):
        return adjoint_mc(forward_mc(v, sens, m), sens, m) + lam * v

    b = adjoint_mc(ys, sens, m)
    bnorm = float(torch.linalg.vector_norm(b))
    x = torch.zeros_like(b)
    if bnorm == 0.0:
        return CGResult(x, [0.0], 0, True)
    r = b.clone()
    p = r.clone()
    if method == "cr":
        ar = normal(r)
        ap = ar.clone()
        rho = _vdot(r, ar).real
    else:
        rho = _vdot(r, r).real
    res = CGResult(x, [1.0])
    iterates = []
    for k in range(1, max_iters + 1):
        if method == "cg":
            ap = normal(p)
            alpha = rho / _vdot(p, ap).real
        else:
            alpha = rho / _vdot(ap, ap).real
        x = x + alpha * p
        r = r - alpha * ap
        rel = float(torch.linalg.vector_norm(r)) / bnorm
        iterates.append(x)
        if not (math.isfinite(rel) and bool(torch.isfinite(torch.view_as_real(x)).all())):
            raise SolverError(f"non-finite iterate at iteration {k}", iterates=iterates)
        iterates = iterates[-3:]
        res.residuals.append(rel)
        res.iterations = k
        if rel < tol:
            res.converged = True
            break
        if method == "cg":
            rho_new = _vdot(r, r).real
            p = r + (rho_new / rho) * p
        else:
            ar = normal(r)
            rho_new = _vdot(r, ar).real
            beta = rho_new / rho
            p = r + beta * p
            ap = ar + beta * ap
        rho = rho_new
    res.x = x
    return res


def save_coils(sens: CoilSensitivities, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = [f"coil_{i:02d}.cim" for i in range(sens.n_c)]
    for name, mp in zip(names, sens.maps):
        save_cim(mp, d / name)
    h, w = sens.maps[0].shape
    (d / "manifest.json").write_text(json.dumps({"n_c": sens.n_c, "H": h, "W": w, "files": names}, indent=2) + "\n")


def load_coils(directory) -> CoilSensitivities:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise FormatError("missing manifest.json", mpath)
    manifest = json.loads(mpath.read_text())
    return CoilSensitivities([load_cim(d / f) for f in manifest["files"]])

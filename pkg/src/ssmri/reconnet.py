"""Unrolled ISTA reconstructor with learned convolutional sparsifying transforms.

Each phase takes a gradient step on the masked data fit, maps the result
through a small conv stack ``g``, soft-thresholds, and maps back with a
mirrored stack ``g_tilde``. A hard data-consistency step finishes the pass.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import FormatError, ValidationError
from .kspace import RDTYPE, MaskLike, _fft2c, _ifft2c, _match, as_complex, mask_tensor

MIN_THRESHOLD = 1e-6


def soft_threshold(v: torch.Tensor, t) -> torch.Tensor:
    """Elementwise ``sign(v) * max(|v| - t, 0)``."""
    if float(t) <= 0:
        raise ValidationError(f"threshold must be positive, got {float(t)}")
    return _soft(v, t)


def _soft(v, t):
    return torch.sign(v) * F.relu(v.abs() - t)


def _to_channels(x: torch.Tensor) -> torch.Tensor:
    return torch.view_as_real(x).permute(2, 0, 1).unsqueeze(0)


def _from_channels(v: torch.Tensor) -> torch.Tensor:
    return torch.complex(v[0, 0], v[0, 1])


class PhaseBlock(nn.Module):
    """Parameters and computation of one unrolled iteration.

    ``init="identity"`` wires the first four channels so that
    ``g_tilde(g(x)) == x`` exactly (a +/- split survives both ReLUs); the
    remaining weights get Gaussian noise of scale ``init_noise / sqrt(fan_in)``.
    """

    def __init__(
        self,
        channels: int = 16,
        rho: float = 0.5,
        threshold: float = 0.01,
        init: str = "random",
        init_noise: float = 1.0,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if init == "identity" and channels < 4:
            raise ValidationError("identity init needs at least 4 channels")
        c = channels
        self.channels = c
        self.rho = nn.Parameter(torch.tensor(float(rho), dtype=RDTYPE))
        self.threshold = nn.Parameter(torch.tensor(float(threshold), dtype=RDTYPE))
        shapes = {"g1": (c, 2), "g2": (c, c), "gt1": (c, c), "gt2": (2, c)}
        for name, (cout, cin) in shapes.items():
            scale = init_noise / math.sqrt(cin * 9)
            w = torch.randn(cout, cin, 3, 3, generator=generator, dtype=RDTYPE) * scale
            if init == "identity":
                w += _identity_taps(name, cout, cin)
            elif init != "random":
                raise ValidationError(f"unknown init {init!r}")
            setattr(self, name, nn.Parameter(w))
        self.calls = 0

    def transform(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(F.relu(F.conv2d(_to_channels(x), self.g1, padding=1)), self.g2, padding=1)

    def inverse(self, v: torch.Tensor) -> torch.Tensor:
        return _from_channels(F.conv2d(F.relu(F.conv2d(v, self.gt1, padding=1)), self.gt2, padding=1))

    def forward(self, x, y, m):
        r = x - self.rho * _ifft2c(m * (m * _fft2c(x) - y))
        self.calls += 1
        return self.inverse(_soft(self.transform(r), self.threshold)), r


def _identity_taps(name: str, cout: int, cin: int) -> torch.Tensor:
    w = torch.zeros(cout, cin, 3, 3, dtype=RDTYPE)
    if name == "g1":
        for i in range(2):
            w[i, i, 1, 1] = 1.0
            w[i + 2, i, 1, 1] = -1.0
    elif name in ("g2", "gt1"):
        for i in range(4):
            w[i, i, 1, 1] = 1.0
    else:
        for i in range(2):
            w[i, i, 1, 1] = 1.0
            w[i, i + 2, 1, 1] = -1.0
    return w


class ReconNet(nn.Module):
    """The full learnable parameter set of the unrolled reconstructor.

    Calling the module runs the reconstruction: zero-filled start,
    ``n_phases`` ISTA phases, then hard data consistency on ``mask``.
    """

    def __init__(
        self,
        n_phases: int = 9,
        channels: int = 16,
        rho: float = 0.5,
        threshold: float = 0.01,
        init: str = "random",
        init_noise: float = 1.0,
        seed: int = 0,
        provenance: str = "untrained",
    ):
        super().__init__()
        if n_phases < 1:
            raise ValidationError("n_phases must be >= 1")
        gen = torch.Generator().manual_seed(seed)
        self.phases = nn.ModuleList(
            PhaseBlock(channels, rho, threshold, init, init_noise, gen) for _ in range(n_phases)
        )
        self.provenance = provenance

    @property
    def n_phases(self) -> int:
        return len(self.phases)

    @property
    def channels(self) -> int:
        return self.phases[0].channels

    @property
    def transform_calls(self) -> int:
        return sum(p.calls for p in self.phases)

    def forward(self, y, mask: MaskLike, with_symmetry: bool = False):
        y = as_complex(y)
        m = mask_tensor(mask)
        _match(y, m)
        y = m * y
        x = _ifft2c(y)
        sym = y.new_zeros((), dtype=RDTYPE)
        for phase in self.phases:
            x, r = phase(x, y, m)
            if with_symmetry:
                sym = sym + symmetry_penalty(r, phase)
        x = hard_dc(x, y, m)
        if with_symmetry:
            return x, sym / self.n_phases
        return x

    @torch.no_grad()
    def project_(self) -> None:
        """Clamp thresholds to stay positive after an optimizer step."""
        for p in self.phases:
            p.threshold.clamp_(min=MIN_THRESHOLD)

    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = {"rho": [], "threshold": [], "g": [], "g_tilde": []}
        for p in self.phases:
            groups["rho"].append(p.rho)
            groups["threshold"].append(p.threshold)
            groups["g"] += [p.g1, p.g2]
            groups["g_tilde"] += [p.gt1, p.gt2]
        return groups


def ista_phase(x_prev, y, omega: MaskLike, p: PhaseBlock) -> torch.Tensor:
    x_prev, y = as_complex(x_prev), as_complex(y)
    m = mask_tensor(omega)
    _match(x_prev, m)
    _match(y, m)
    return p(x_prev, m * y, m)[0]


def hard_dc(x, y, omega: MaskLike) -> torch.Tensor:
    """Replace the k-space of ``x`` by ``y`` on the mask."""
    x, y = as_complex(x), as_complex(y)
    m = mask_tensor(omega)
    _match(x, m)
    _match(y, m)
    k = _fft2c(x)
    return _ifft2c((1 - m) * k + m * y)


def reconstruct(y, omega: MaskLike, params: ReconNet) -> torch.Tensor:
    return params(y, omega)


def symmetry_penalty(x, p: PhaseBlock) -> torch.Tensor:
    """Mean squared deviation of ``g_tilde(g(x))`` from ``x``."""
    d = p.inverse(p.transform(as_complex(x))) - x
    return (d.real**2 + d.imag**2).mean()


# --- parameter files ------------------------------------------------------
# Layout (little endian):
#   b"RPRM" | u32 version | u32 meta_len | meta JSON (utf-8, sorted keys)
#   u32 n_arrays, then per array:
#   u16 name_len | name | u8 ndim | u32 dims[ndim] | float64 data (C order)

_MAGIC = b"RPRM"
VERSION = 1


def save_params(net: ReconNet, path) -> None:
    meta = {
        "channels": net.channels,
        "n_phases": net.n_phases,
        "provenance": net.provenance,
    }
    mbytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    state = net.state_dict()
    out = [_MAGIC, struct.pack("<II", VERSION, len(mbytes)), mbytes, struct.pack("<I", len(state))]
    for name, t in state.items():
        nb = name.encode()
        arr = t.detach().to(RDTYPE).contiguous().numpy()
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(out))


def load_params(path) -> ReconNet:
    path = Path(path)
    if not path.exists():
        raise FormatError("parameter file not found", path)
    raw = path.read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError("truncated parameter file", path)
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    if take(4) != _MAGIC:
        raise FormatError("bad parameter-file magic", path)
    version, mlen = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported parameter-file version {version} (expected {VERSION})", path)
    try:
        meta = json.loads(take(mlen))
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt metadata ({exc})", path) from exc
    net = ReconNet(meta["n_phases"], meta["channels"], provenance=meta["provenance"])
    (n_arrays,) = struct.unpack("<I", take(4))
    state = {}
    for _ in range(n_arrays):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = math.prod(shape)
        data = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64)
        state[name] = torch.from_numpy(data.reshape(shape))
    if pos != len(raw):
        raise FormatError("trailing bytes after parameter arrays", path)
    try:
        net.load_state_dict(state)
    except RuntimeError as exc:
        raise FormatError(f"parameter arrays do not match metadata ({exc})", path) from exc
    return net

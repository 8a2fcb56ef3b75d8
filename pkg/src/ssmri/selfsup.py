"""Training strategies: supervised, SSDU, dual networks, and the Siamese EM loop.

All strategies train one item at a time (batch size 1) in a seeded order, so
a fixed config reproduces the same loss curve exactly.

The Siamese loop alternates two steps. The E-step runs a frozen snapshot of
the network on each measurement ``y`` to get a full k-space estimate ``z``
(no gradient). The M-step re-undersamples ``z`` with a fresh mask ``M``,
reconstructs from that view, and fits the result to ``y`` on the acquired
positions. After each M-step the snapshot is replaced by the trained
weights.
"""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import TrainConfig
from .errors import TrainingError, ValidationError
from .kspace import (
    SamplingMask,
    _fft2c,
    adjoint,
    default_center_size,
    make_mask,
    partition_mask,
    undersample,
)
from .metrics import MetricRecord, evaluate_pair, hybrid_loss, psnr, ssim
from .phantom import Dataset
from .reconnet import ReconNet


@dataclass
class TrainReport:
    strategy: str
    loss_curve: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    val_psnr: list[float] = field(default_factory=list)
    val_ssim: list[float] = field(default_factory=list)
    wall_clock_s: float = 0.0
    params_path: str | None = None
    replacement_events: list[tuple[int, int]] = field(default_factory=list)
    inner_losses: list[tuple[float, float]] = field(default_factory=list)
    inner_deltas: list[float] = field(default_factory=list)
    estep_grad_events: int = 0
    best_epoch: int | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["replacement_events"] = [list(e) for e in self.replacement_events]
        d["inner_losses"] = [list(e) for e in self.inner_losses]
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "TrainReport":
        d = json.loads(Path(path).read_text())
        d["replacement_events"] = [tuple(e) for e in d["replacement_events"]]
        d["inner_losses"] = [tuple(e) for e in d["inner_losses"]]
        return cls(**d)

    def curves(self) -> dict:
        """Everything except wall-clock time and paths; equal across reruns."""
        d = self.to_dict()
        d.pop("wall_clock_s")
        d.pop("params_path")
        return d


# --- shared helpers -------------------------------------------------------


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def acquisition_mask(cfg: TrainConfig, h: int, w: int) -> SamplingMask:
    s = cfg.mask_spec
    return make_mask(s.kind, h, w, s.rate, s.center_size, s.seed)


def measure(ds: Dataset, omega: SamplingMask) -> list[torch.Tensor]:
    return [undersample(img, omega) for img in ds.images]


def build_net(cfg: TrainConfig, seed_offset: int = 0, provenance: str = "untrained") -> ReconNet:
    n = cfg.net
    return ReconNet(
        n.n_phases, n.channels, n.rho, n.threshold, n.init, n.init_noise,
        seed=derive_seed(cfg.seed, 17, seed_offset), provenance=provenance,
    )


def _optimizer(name: str, params, lr: float) -> torch.optim.Optimizer:
    if name == "adam":
        return torch.optim.Adam(params, lr=lr)
    if name == "sgd":
        return torch.optim.SGD(params, lr=lr)
    raise ValidationError(f"unknown optimizer {name!r}")


def _step(nets: Sequence[ReconNet], opt, loss: torch.Tensor, where: dict) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(
            f"non-finite loss {value} at {where}",
            snapshot={**where, "loss": value, "params": [copy.deepcopy(n.state_dict()) for n in nets]},
        )
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    for n in nets:
        n.project_()
    return value


def _order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(derive_seed(seed, 29, epoch)).permutation(n)


def _require_items(ds: Dataset):
    if len(ds) == 0:
        raise ValidationError("training dataset is empty")


@torch.no_grad()
def reconstruct_dataset(net: ReconNet, ds: Dataset, omega: SamplingMask) -> list[torch.Tensor]:
    return [net(y, omega) for y in measure(ds, omega)]


def zero_filled(ds: Dataset, omega: SamplingMask) -> list[torch.Tensor]:
    return [adjoint(y, omega) for y in measure(ds, omega)]


def evaluate(
    net: ReconNet | None,
    ds: Dataset,
    omega: SamplingMask,
    method: str = "net",
    windowed: bool = True,
) -> list[MetricRecord]:
    """Per-item metrics; ``net=None`` scores the zero-filled reconstruction."""
    preds = zero_filled(ds, omega) if net is None else reconstruct_dataset(net, ds, omega)
    return [evaluate_pair(i, method, p, gt, windowed) for (i, gt), p in zip(ds.items, preds)]


def _validate(net, val: Dataset | None, omega, report: TrainReport):
    if val is None or len(val) == 0:
        return None
    preds = reconstruct_dataset(net, val, omega)
    p = float(np.mean([psnr(a, gt) for a, gt in zip(preds, val.images)]))
    s = float(np.mean([ssim(a, gt) for a, gt in zip(preds, val.images)]))
    report.val_psnr.append(p)
    report.val_ssim.append(s)
    return p


# --- supervised -----------------------------------------------------------


def train_supervised(
    ds: Dataset, cfg: TrainConfig, val: Dataset | None = None, net: ReconNet | None = None
) -> tuple[ReconNet, TrainReport]:
    """Fit reconstructions to the fully sampled k-space; keeps the best-validation weights."""
    _require_items(ds)
    t0 = time.perf_counter()
    h, w = ds.shape
    omega = acquisition_mask(cfg, h, w)
    full = SamplingMask.full(h, w)
    ys = measure(ds, omega)
    targets = [_fft2c(img) for img in ds.images]
    net = build_net(cfg, provenance="supervised") if net is None else net
    net.provenance = "supervised"
    opt = _optimizer(cfg.optimizer.name, net.parameters(), cfg.optimizer.learning_rate)
    gamma = cfg.loss_weights.symmetry
    report = TrainReport("supervised")
    best, best_state = -math.inf, None
    for epoch in range(cfg.optimizer.epochs):
        losses = []
        for i in _order(cfg.seed, epoch, len(ds)):
            out, sym = net(ys[i], omega, with_symmetry=True)
            loss = hybrid_loss(_fft2c(out), targets[i], full)
            if gamma:
                loss = loss + gamma * sym
            losses.append(_step([net], opt, loss, {"strategy": "supervised", "epoch": epoch, "item": int(i)}))
        report.step_losses += losses
        report.loss_curve.append(float(np.mean(losses)))
        score = _validate(net, val, omega, report)
        if score is not None and score > best:
            best, best_state, report.best_epoch = score, copy.deepcopy(net.state_dict()), epoch
    if best_state is not None:
        net.load_state_dict(best_state)
    report.wall_clock_s = time.perf_counter() - t0
    return net, report


# --- SSDU -----------------------------------------------------------------


def ssdu_partitions(cfg: TrainConfig, omega: SamplingMask, n: int, epoch: int = 0):
    tag = epoch if cfg.ssdu.repartition_each_epoch else 0
    return [partition_mask(omega, cfg.ssdu.loss_fraction, derive_seed(cfg.seed, 41, tag, i)) for i in range(n)]


def ssdu_loss(net: ReconNet, y, theta: SamplingMask, lam: SamplingMask, gamma: float = 0.0):
    out, sym = net(theta.tensor * y, theta, with_symmetry=True)
    loss = hybrid_loss(_fft2c(out), y, lam)
    return (loss + gamma * sym) if gamma else loss


def train_ssdu(
    ds: Dataset, cfg: TrainConfig, val: Dataset | None = None, net: ReconNet | None = None
) -> tuple[ReconNet, TrainReport]:
    """Train on a split of each acquisition into input samples and held-out loss samples."""
    _require_items(ds)
    t0 = time.perf_counter()
    h, w = ds.shape
    omega = acquisition_mask(cfg, h, w)
    ys = measure(ds, omega)
    net = build_net(cfg) if net is None else net
    net.provenance = "ssdu"
    opt = _optimizer(cfg.optimizer.name, net.parameters(), cfg.optimizer.learning_rate)
    gamma = cfg.loss_weights.symmetry
    report = TrainReport("ssdu")
    parts = ssdu_partitions(cfg, omega, len(ds))
    for epoch in range(cfg.optimizer.epochs):
        if cfg.ssdu.repartition_each_epoch:
            parts = ssdu_partitions(cfg, omega, len(ds), epoch)
        losses = []
        for i in _order(cfg.seed, epoch, len(ds)):
            theta, lam = parts[i]
            loss = ssdu_loss(net, ys[i], theta, lam, gamma)
            losses.append(_step([net], opt, loss, {"strategy": "ssdu", "epoch": epoch, "item": int(i)}))
        report.step_losses += losses
        report.loss_curve.append(float(np.mean(losses)))
        _validate(net, val, omega, report)
    report.wall_clock_s = time.perf_counter() - t0
    return net, report


# --- dual networks --------------------------------------------------------


def similarity_term(k1: torch.Tensor, k2: torch.Tensor, omega: SamplingMask, y) -> torch.Tensor:
    """L2 disagreement of two k-space estimates on the unacquired positions, over ``||y||``."""
    d = (1 - omega.tensor) * (k1 - k2)
    return torch.linalg.vector_norm(d) / torch.linalg.vector_norm(omega.tensor * y)


def parallel_loss(net1, net2, y, omega, parts1, parts2, beta: float, gamma: float = 0.0):
    """Returns ``(total, similarity)`` for one item."""
    (t1, l1), (t2, l2) = parts1, parts2
    o1, s1 = net1(t1.tensor * y, t1, with_symmetry=True)
    o2, s2 = net2(t2.tensor * y, t2, with_symmetry=True)
    k1, k2 = _fft2c(o1), _fft2c(o2)
    sim = similarity_term(k1, k2, omega, y)
    total = hybrid_loss(k1, y, l1) + hybrid_loss(k2, y, l2) + beta * sim
    if gamma:
        total = total + gamma * (s1 + s2)
    return total, sim


def train_parallel(
    ds: Dataset, cfg: TrainConfig, val: Dataset | None = None
) -> tuple[ReconNet, ReconNet, TrainReport]:
    """Two networks on different partitions, tied by agreement on unacquired k-space."""
    _require_items(ds)
    t0 = time.perf_counter()
    h, w = ds.shape
    omega = acquisition_mask(cfg, h, w)
    ys = measure(ds, omega)
    net1 = build_net(cfg, 0, "parallel")
    net2 = build_net(cfg, 0 if cfg.parallel.shared_init else 1, "parallel")
    opt = _optimizer(cfg.optimizer.name, list(net1.parameters()) + list(net2.parameters()), cfg.optimizer.learning_rate)
    beta, gamma = cfg.loss_weights.similarity, cfg.loss_weights.symmetry
    report = TrainReport("parallel")

    def partitions(epoch):
        tag = epoch if cfg.ssdu.repartition_each_epoch else 0
        out = []
        for i in range(len(ds)):
            a = partition_mask(omega, cfg.ssdu.loss_fraction, derive_seed(cfg.seed, 43, tag, i))
            b = a if cfg.parallel.same_partitions else partition_mask(
                omega, cfg.ssdu.loss_fraction, derive_seed(cfg.seed, 47, tag, i)
            )
            out.append((a, b))
        return out

    parts = partitions(0)
    for epoch in range(cfg.optimizer.epochs):
        if cfg.ssdu.repartition_each_epoch and epoch:
            parts = partitions(epoch)
        losses = []
        for i in _order(cfg.seed, epoch, len(ds)):
            loss, _ = parallel_loss(net1, net2, ys[i], omega, parts[i][0], parts[i][1], beta, gamma)
            where = {"strategy": "parallel", "epoch": epoch, "item": int(i)}
            losses.append(_step([net1, net2], opt, loss, where))
        report.step_losses += losses
        report.loss_curve.append(float(np.mean(losses)))
        _validate(net1, val, omega, report)
    report.wall_clock_s = time.perf_counter() - t0
    return net1, net2, report


# --- Siamese EM loop ------------------------------------------------------


def siamrecon_estep(params: ReconNet, y, omega: SamplingMask) -> torch.Tensor:
    """Full k-space estimate from the acquired data, detached from autograd."""
    with torch.no_grad():
        return _fft2c(params(y, omega)).detach()


class ResamplingMasks:
    """Deterministic source of the resampling masks ``M`` for one training run."""

    def __init__(self, cfg: TrainConfig, acq_kind: str, h: int, w: int):
        self.cfg = cfg
        spec = cfg.resample_spec
        kind = spec.kind
        if kind == "auto":
            kind = "cartesian1d" if acq_kind == "cartesian1d" else "resample"
        self.kind = kind
        self.center = default_center_size(h) if spec.center_size is None else spec.center_size
        self.shape = (h, w)
        self._fixed = None

    def _make(self, seed: int) -> SamplingMask:
        return make_mask(self.kind, *self.shape, self.cfg.resample_spec.rate, self.center, seed)

    def draw(self, outer: int, epoch: int, item: int) -> SamplingMask:
        ab = self.cfg.ablations
        if ab.no_resampling:
            return SamplingMask.full(*self.shape)
        if ab.fixed_resample_mask:
            if self._fixed is None:
                self._fixed = self._make(derive_seed(self.cfg.seed, 53))
            return self._fixed
        if self.cfg.resample_spec.vary_per_step:
            return self._make(derive_seed(self.cfg.seed, 59, outer, epoch, item))
        return self._make(derive_seed(self.cfg.seed, 61, outer, item))

    def probe(self, outer: int, item: int) -> SamplingMask:
        ab = self.cfg.ablations
        if ab.no_resampling or ab.fixed_resample_mask:
            return self.draw(outer, 0, item)
        return self._make(derive_seed(self.cfg.seed, 67, outer, item))


def mstep_loss(net: ReconNet, z, y, omega: SamplingMask, m: SamplingMask, gamma: float = 0.0):
    """Consistency of the reconstruction from the resampled view ``M z`` with ``y`` on ``omega``."""
    out, sym = net(m.tensor * z, m, with_symmetry=True)
    loss = hybrid_loss(_fft2c(out), y, omega)
    return (loss + gamma * sym) if gamma else loss, out


def siamrecon_mstep(
    params: ReconNet,
    zs: Sequence[torch.Tensor] | None,
    ys: Sequence[torch.Tensor],
    omega: SamplingMask,
    cfg: TrainConfig,
    opt: torch.optim.Optimizer | None = None,
    masks: ResamplingMasks | None = None,
    outer: int = 0,
    report: TrainReport | None = None,
) -> tuple[ReconNet, int]:
    """Inner loop of the EM training: gradient epochs over the dataset until converged.

    ``zs=None`` disables the stop-gradient: each step recomputes ``z`` with
    the live network and backpropagates through that pass as well.
    Convergence is the mean relative change of the probe reconstructions
    between epochs falling below ``cfg.em.inner_tol``, or
    ``cfg.em.inner_max_epochs`` epochs.
    """
    h, w = omega.shape
    masks = masks or ResamplingMasks(cfg, omega.kind, h, w)
    opt = opt or _optimizer(cfg.em.optimizer, params.parameters(), cfg.mstep_lr)
    report = report if report is not None else TrainReport("siamrecon")
    gamma = cfg.loss_weights.symmetry
    live = zs is None
    probe_ids = list(range(min(cfg.em.n_probe, len(ys))))
    probe_masks = [masks.probe(outer, i) for i in probe_ids]

    @torch.no_grad()
    def probe():
        recs, losses = [], []
        for i, m in zip(probe_ids, probe_masks):
            z = siamrecon_estep(params, ys[i], omega) if live else zs[i]
            loss, out = mstep_loss(params, z, ys[i], omega, m, gamma)
            recs.append(_fft2c(out) * omega.tensor if cfg.em.stop_on_omega else out)
            losses.append(loss.item())
        return recs, float(np.mean(losses))

    def hook(grad):
        report.estep_grad_events += 1
        return grad

    prev, start_loss = probe()
    k = 0
    while True:
        losses = []
        for i in _order(derive_seed(cfg.seed, outer), k, len(ys)):
            m = masks.draw(outer, k, int(i))
            if live:
                z = _fft2c(params(ys[i], omega))
                z.register_hook(hook)
            else:
                z = zs[i]
            loss, _ = mstep_loss(params, z, ys[i], omega, m, gamma)
            where = {"strategy": "siamrecon", "outer": outer, "epoch": k, "item": int(i)}
            losses.append(_step([params], opt, loss, where))
        k += 1
        report.step_losses += losses
        report.loss_curve.append(float(np.mean(losses)))
        cur, end_loss = probe()
        report.inner_losses.append((start_loss, end_loss))
        delta = float(np.mean([
            float(torch.linalg.vector_norm(a - b) / max(float(torch.linalg.vector_norm(b)), 1e-30))
            for a, b in zip(cur, prev)
        ]))
        report.inner_deltas.append(delta)
        if delta < cfg.em.inner_tol or k >= cfg.em.inner_max_epochs:
            break
        prev, start_loss = cur, end_loss
    return params, k


def train_siamrecon(
    ds: Dataset, cfg: TrainConfig, init: ReconNet | None, val: Dataset | None = None
) -> tuple[ReconNet, TrainReport]:
    """EM training from an SSDU-pretrained network.

    Each outer iteration runs the E-step with the snapshot network, the
    M-step inner loop on the live network, then copies the live weights
    into the snapshot (unless ``no_param_replacement``).
    """
    _require_items(ds)
    if init is None:
        raise ValidationError("train_siamrecon needs an initial (SSDU-pretrained) network")
    if cfg.require_ssdu_init and init.provenance != "ssdu":
        raise ValidationError(
            f"initial network has provenance {init.provenance!r}; expected 'ssdu' "
            "(set require_ssdu_init=false to override)"
        )
    t0 = time.perf_counter()
    h, w = ds.shape
    omega = acquisition_mask(cfg, h, w)
    ys = measure(ds, omega)
    net = copy.deepcopy(init)
    net.provenance = "siamrecon"
    snapshot = copy.deepcopy(init)
    for p in snapshot.parameters():
        p.requires_grad_(False)
    masks = ResamplingMasks(cfg, omega.kind, h, w)
    opt = _optimizer(cfg.em.optimizer, net.parameters(), cfg.mstep_lr)
    report = TrainReport("siamrecon")
    ab = cfg.ablations
    for t in range(cfg.em.outer_iters):
        zs = None if ab.no_stop_gradient else [siamrecon_estep(snapshot, y, omega) for y in ys]
        net, k = siamrecon_mstep(net, zs, ys, omega, cfg, opt, masks, t, report)
        report.replacement_events.append((t, k))
        if not ab.no_param_replacement:
            snapshot.load_state_dict(net.state_dict())
        _validate(net, val, omega, report)
    report.wall_clock_s = time.perf_counter() - t0
    return net, report


def train(ds: Dataset, cfg: TrainConfig, val: Dataset | None = None, init: ReconNet | None = None):
    """Dispatch on ``cfg.strategy``; always returns ``(nets, report)`` with ``nets`` a list."""
    if cfg.strategy == "supervised":
        net, rep = train_supervised(ds, cfg, val)
        return [net], rep
    if cfg.strategy == "ssdu":
        net, rep = train_ssdu(ds, cfg, val)
        return [net], rep
    if cfg.strategy == "parallel":
        n1, n2, rep = train_parallel(ds, cfg, val)
        return [n1, n2], rep
    if cfg.strategy == "siamrecon":
        net, rep = train_siamrecon(ds, cfg, init, val)
        return [net], rep
    raise ValidationError(f"unknown strategy {cfg.strategy!r}")

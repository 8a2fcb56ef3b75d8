"""Central finite-difference gradient check shared by the unit and acceptance suites."""

import torch
import torch.nn.functional as F

from ssmri.kspace import SamplingMask, _fft2c, fft2c, make_mask, undersample
from ssmri.metrics import hybrid_loss
from ssmri.phantom import gen_ellipse_phantom
from ssmri.reconnet import ReconNet


def linear_regime_case(seed=0, size=8):
    """A 2-phase, 4-channel net and an 8x8 problem where every ReLU input is far from 0.

    Transform weights are taken in absolute value and the image has positive
    real and imaginary parts, so all pre-activations are sums of positive
    terms and the soft threshold's |v| sits well above t.
    """
    net = ReconNet(2, 4, seed=seed)
    with torch.no_grad():
        groups = net.param_groups()
        for p in groups["g"] + groups["g_tilde"]:
            p.abs_()
    x = (1 + 1j) + 0.3 * gen_ellipse_phantom(size, size, 3, seed + 4)
    omega = make_mask("random2d", size, size, 0.5, 4, seed + 1)
    return net, undersample(x, omega), omega, fft2c(x)


def loss_fn(net, y, omega, target):
    return hybrid_loss(_fft2c(net(y, omega)), target, SamplingMask.full(*omega.shape))


class _Recorder:
    def __init__(self):
        self.patterns = []
        self._relu = F.relu

    def __call__(self, x, *args, **kwargs):
        self.patterns.append(x.detach() > 0)
        return self._relu(x, *args, **kwargs)


def fd_check(net, y, omega, target, h=1e-3, monkeypatch=None):
    """Return ``({group: relative error}, pattern_flips)``.

    ``pattern_flips`` counts ReLU sign changes (including the one inside the
    soft threshold) between the base point and any of the +-h evaluations.
    Zero flips means the loss is smooth along every difference segment, which
    is the condition under which central differences are O(h^2) accurate.
    """
    net.zero_grad()
    loss_fn(net, y, omega, target).backward()
    rec = _Recorder()
    if monkeypatch is not None:
        monkeypatch.setattr(F, "relu", rec)
    else:
        F.relu = rec
    try:
        def run():
            rec.patterns = []
            with torch.no_grad():
                value = loss_fn(net, y, omega, target).item()
            return value, rec.patterns

        _, base = run()
        flips = 0
        errors = {}
        for group, params in net.param_groups().items():
            an, fd = [], []
            for p in params:
                an.append(p.grad.detach().clone().ravel())
                flat = p.data.view(-1)
                num = torch.zeros(p.numel(), dtype=torch.float64)
                for j in range(p.numel()):
                    old = flat[j].item()
                    flat[j] = old + h
                    fp, pp = run()
                    flat[j] = old - h
                    fm, pm = run()
                    flat[j] = old
                    flips += sum(int((a != b).sum()) for a, b in zip(pp + pm, base + base))
                    num[j] = (fp - fm) / (2 * h)
                fd.append(num)
            an, fd = torch.cat(an), torch.cat(fd)
            errors[group] = ((an - fd).norm() / an.norm()).item()
    finally:
        if monkeypatch is None:
            F.relu = rec._relu
    return errors, flips

import json

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ssmri.errors import FormatError, SolverError, ValidationError
from ssmri.kspace import SamplingMask, fft2c, ifft2c, make_mask
from ssmri.metrics import psnr
from ssmri.multicoil import (
    CoilSensitivities,
    adjoint_mc,
    cg_sense,
    forward_mc,
    load_coils,
    save_coils,
    simulate_coils,
    sos_combine,
    zero_filled_sos,
)
from ssmri.phantom import gen_ellipse_phantom


def rand_complex(shape, seed):
    g = torch.Generator().manual_seed(seed)
    return torch.complex(torch.randn(shape, generator=g, dtype=torch.float64),
                         torch.randn(shape, generator=g, dtype=torch.float64))


def inner(a, b):
    return (a.conj() * b).sum()


@pytest.mark.parametrize("n_c", [1, 3, 8])
def test_coils_sos_normalized(n_c):
    s = simulate_coils(n_c, 16, 20, seed=n_c)
    assert (s.sos() - 1).abs().max().item() < 1e-6
    assert s.n_c == n_c and s.maps[0].shape == (16, 20)


def test_coils_deterministic_and_errors():
    a, b = simulate_coils(4, 16, 16, 5), simulate_coils(4, 16, 16, 5)
    assert all(torch.equal(x, y) for x, y in zip(a.maps, b.maps))
    with pytest.raises(ValidationError):
        simulate_coils(0, 16, 16)
    with pytest.raises(ValidationError):
        simulate_coils(2, 4, 16)


def test_single_coil_full_mask_reduces_to_fft():
    s = simulate_coils(1, 16, 16, 0)
    x = rand_complex((16, 16), 0)
    full = SamplingMask.full(16, 16)
    (k,) = forward_mc(x, s, full)
    assert torch.allclose(k, fft2c(s.maps[0] * x), atol=1e-12)
    assert torch.allclose(k.abs().norm(), fft2c(x).abs().norm(), atol=1e-9)
    unit = CoilSensitivities([torch.ones(16, 16)])
    assert torch.allclose(adjoint_mc([fft2c(x)], unit, full), ifft2c(fft2c(x)), atol=1e-12)


def test_linearity_and_zero():
    s = simulate_coils(3, 16, 16, 2)
    m = make_mask("random2d", 16, 16, 0.4, 4, 0)
    x = rand_complex((16, 16), 1)
    a = 2.5 - 1.0j
    for u, v in zip(forward_mc(a * x, s, m), forward_mc(x, s, m)):
        assert torch.allclose(u, a * v, atol=1e-12)
    assert torch.count_nonzero(adjoint_mc([torch.zeros(16, 16)] * 3, s, m)) == 0


@settings(max_examples=25, deadline=None)
@given(n_c=st.integers(1, 6), seed=st.integers(0, 10_000), rate=st.floats(0.25, 1.0),
       kind=st.sampled_from(["random2d", "cartesian1d"]))
def test_mc_adjoint_identity(n_c, seed, rate, kind):
    s = simulate_coils(n_c, 16, 16, seed)
    m = make_mask(kind, 16, 16, rate, 4, seed)
    x = rand_complex((16, 16), seed)
    ys = [rand_complex((16, 16), seed + 1 + i) for i in range(n_c)]
    lhs = sum(inner(a, b) for a, b in zip(forward_mc(x, s, m), ys))
    rhs = inner(x, adjoint_mc(ys, s, m))
    scale = float(x.norm()) * float(torch.stack(ys).norm())
    assert abs(complex(lhs - rhs)) <= 1e-6 * scale


def test_shape_mismatch():
    s = simulate_coils(2, 16, 16, 0)
    m = make_mask("random2d", 16, 16, 0.4, 4, 0)
    with pytest.raises(ValidationError):
        forward_mc(torch.zeros(8, 8), s, m)
    with pytest.raises(ValidationError):
        adjoint_mc([torch.zeros(16, 16)], s, m)
    with pytest.raises(ValidationError):
        forward_mc(torch.zeros(16, 16), s, make_mask("random2d", 8, 8, 0.5, 4, 0))


def test_sos_combine():
    x = rand_complex((8, 8), 3)
    assert torch.allclose(sos_combine([x]).real, x.abs(), atol=1e-12)
    imgs = [rand_complex((8, 8), i) for i in range(3)]
    assert torch.allclose(sos_combine(imgs), sos_combine(imgs[::-1]), rtol=1e-14, atol=0)
    s = simulate_coils(4, 8, 8, 1)
    assert torch.allclose(sos_combine([m * x for m in s.maps]).real, x.abs(), atol=1e-9)
    with pytest.raises(ValidationError):
        sos_combine([])


def test_cg_full_sampling_recovers_truth():
    x = gen_ellipse_phantom(32, 32, 6, 0)
    s = simulate_coils(4, 32, 32, 0)
    full = SamplingMask.full(32, 32)
    res = cg_sense(forward_mc(x, s, full), s, full, lam=0.0, max_iters=20, tol=1e-10)
    assert res.iterations <= 20
    assert ((res.x - x).norm() / x.norm()).item() < 1e-3


@pytest.mark.parametrize("method", ["cr", "cg"])
def test_cg_converges_undersampled(method):
    x = gen_ellipse_phantom(32, 32, 6, 1)
    s = simulate_coils(4, 32, 32, 1)
    m = make_mask("cartesian1d", 32, 32, 0.25, 4, 1)
    res = cg_sense(forward_mc(x, s, m), s, m, lam=1e-3, max_iters=200, tol=1e-8, method=method)
    assert res.converged and res.residuals[-1] < 1e-8


def test_cr_residuals_non_increasing():
    for seed in range(5):
        x = gen_ellipse_phantom(32, 32, 6, seed)
        s = simulate_coils(4, 32, 32, seed)
        m = make_mask("cartesian1d", 32, 32, 0.25, 4, seed)
        r = cg_sense(forward_mc(x, s, m), s, m, lam=1e-3, max_iters=40, tol=0).residuals
        assert all(b <= a + 1e-10 for a, b in zip(r, r[1:]))


def test_cg_beats_zero_filled():
    x = gen_ellipse_phantom(32, 32, 6, 2)
    s = simulate_coils(4, 32, 32, 2)
    m = make_mask("cartesian1d", 32, 32, 0.25, 4, 2)
    ys = forward_mc(x, s, m)
    res = cg_sense(ys, s, m, max_iters=20)
    assert psnr(res.x, x) > psnr(zero_filled_sos(ys, m), x) + 1.0


def test_cg_large_lam_shrinks_solution():
    x = gen_ellipse_phantom(16, 16, 4, 0)
    s = simulate_coils(2, 16, 16, 0)
    m = make_mask("random2d", 16, 16, 0.4, 4, 0)
    ys = forward_mc(x, s, m)
    norms = [float(cg_sense(ys, s, m, lam=lam, max_iters=100, tol=1e-10).x.norm()) for lam in (1e-3, 1.0, 1e3)]
    assert norms[0] > norms[1] > norms[2]
    assert norms[2] < 1e-2 * norms[0]


def test_cg_errors():
    s = simulate_coils(2, 16, 16, 0)
    m = make_mask("random2d", 16, 16, 0.4, 4, 0)
    ys = forward_mc(gen_ellipse_phantom(16, 16, 4, 0), s, m)
    with pytest.raises(ValidationError):
        cg_sense(ys, s, m, lam=-1.0)
    bad = [y.clone() for y in ys]
    bad[0][m.tensor.bool()] = float("inf")
    with pytest.raises(SolverError) as info:
        cg_sense(bad, s, m)
    assert info.value.iterates is not None
    zero = cg_sense([torch.zeros(16, 16)] * 2, s, m)
    assert zero.converged and torch.count_nonzero(zero.x) == 0


def test_coil_file_roundtrip(tmp_path):
    s = simulate_coils(3, 16, 16, 4)
    s32 = CoilSensitivities([m.to(torch.complex64).to(torch.complex128) for m in s.maps])
    save_coils(s32, tmp_path / "coils")
    back = load_coils(tmp_path / "coils")
    assert all(torch.equal(a, b) for a, b in zip(s32.maps, back.maps))
    assert json.loads((tmp_path / "coils" / "manifest.json").read_text())["n_c"] == 3
    with pytest.raises(FormatError, match="manifest"):
        load_coils(tmp_path / "missing")

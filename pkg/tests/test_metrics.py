import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ssmri.errors import ValidationError
from ssmri.kspace import make_mask
from ssmri.metrics import (
    MetricRecord,
    error_map,
    hybrid_loss,
    psnr,
    read_metrics_csv,
    save_error_map,
    ssim,
    write_metrics_csv,
)
from ssmri.phantom import gen_ellipse_phantom


def rand_k(seed, shape=(16, 16)):
    g = torch.Generator().manual_seed(seed)
    return torch.complex(torch.randn(shape, generator=g, dtype=torch.float64),
                         torch.randn(shape, generator=g, dtype=torch.float64))


OMEGA = make_mask("random2d", 16, 16, 0.4, 4, 3)


def test_hybrid_identity_and_scaling():
    y = rand_k(0)
    assert float(hybrid_loss(y, y, OMEGA)) == 0.0
    assert abs(float(hybrid_loss(2 * y, y, OMEGA)) - 2.0) < 1e-9


def test_hybrid_single_entry_closed_form():
    y = rand_k(1)
    r, c = np.argwhere(OMEGA.grid)[5]
    delta = 0.3 - 0.4j
    u = y.clone()
    u[r, c] += delta
    ys = y[torch.from_numpy(OMEGA.grid.astype(bool))]
    expect = abs(delta) / float(ys.norm()) + abs(delta) / float(ys.abs().sum())
    assert abs(float(hybrid_loss(u, y, OMEGA)) - expect) < 1e-12


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_hybrid_ignores_off_mask(seed):
    y, u = rand_k(seed), rand_k(seed + 1)
    noise = rand_k(seed + 2) * torch.from_numpy(1.0 - OMEGA.grid)
    assert float(hybrid_loss(u + noise, y, OMEGA)) == float(hybrid_loss(u, y, OMEGA))
    assert float(hybrid_loss(u, y, OMEGA)) > 0


def test_hybrid_zero_reference():
    with pytest.raises(ValidationError):
        hybrid_loss(rand_k(0), torch.zeros(16, 16), OMEGA)


def test_psnr_closed_forms():
    gt = torch.full((16, 16), 0.5, dtype=torch.complex128)
    assert psnr(gt, gt) == math.inf
    assert abs(psnr(gt + 0.1, gt) - 20.0) < 0.01
    assert abs(psnr(gt + 0.01, gt) - 40.0) < 0.01


def test_psnr_monotone_in_error():
    gt = gen_ellipse_phantom(16, 16, 3, 0)
    vals = [psnr(gt * 0 + gt.abs() + e, gt) for e in (0.01, 0.02, 0.05, 0.1, 0.3)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_psnr_shape_mismatch():
    with pytest.raises(ValidationError):
        psnr(torch.zeros(8, 8), torch.zeros(8, 9))


@pytest.mark.parametrize("windowed", [True, False])
def test_ssim_identity_and_symmetry(windowed):
    a = gen_ellipse_phantom(16, 16, 4, 1)
    b = gen_ellipse_phantom(16, 16, 4, 2)
    assert abs(ssim(a, a, windowed) - 1.0) <= 1e-9
    assert ssim(a, b, windowed) == pytest.approx(ssim(b, a, windowed), abs=1e-15)
    assert -1.0 <= ssim(a, b, windowed) < 1.0


def test_ssim_anticorrelated_checkerboard():
    board = torch.from_numpy((np.indices((16, 16)).sum(0) % 2).astype(np.float64))
    assert ssim(board, 1 - board, windowed=False) <= 0


def test_ssim_window_too_large():
    with pytest.raises(ValidationError):
        ssim(torch.zeros(4, 4), torch.zeros(4, 4))


def test_error_map():
    a = gen_ellipse_phantom(16, 16, 4, 1)
    b = gen_ellipse_phantom(16, 16, 4, 2)
    assert not error_map(a, a).any()
    e = error_map(a, b)
    assert (e >= 0).all()
    assert e.max() == np.abs(np.abs(a.numpy()) - np.abs(b.numpy())).max()


def test_error_map_png(tmp_path):
    from PIL import Image

    e = error_map(gen_ellipse_phantom(16, 16, 4, 1), gen_ellipse_phantom(16, 16, 4, 2))
    save_error_map(e, tmp_path / "e.png")
    img = np.asarray(Image.open(tmp_path / "e.png"))
    assert img.dtype == np.uint8 and img.max() == 255


def test_metrics_csv_inf(tmp_path):
    recs = [MetricRecord("a", "m", math.inf, 1.0), MetricRecord("b", "m", 21.5, 0.75)]
    write_metrics_csv(recs, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "item_id,method,psnr_db,ssim"
    assert lines[1] == "a,m,inf,1.0"
    assert read_metrics_csv(tmp_path / "m.csv") == recs

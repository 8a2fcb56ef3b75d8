import json

import pytest
import torch

from ssmri.errors import FormatError, ValidationError
from ssmri.phantom import Dataset, gen_dataset, gen_ellipse_phantom, load_dataset, save_dataset, shepp_logan


def test_phantom_deterministic():
    assert torch.equal(gen_ellipse_phantom(32, 32, 6, 11), gen_ellipse_phantom(32, 32, 6, 11))
    assert not torch.equal(gen_ellipse_phantom(32, 32, 6, 11), gen_ellipse_phantom(32, 32, 6, 12))


@pytest.mark.parametrize("seed", range(8))
def test_phantom_normalized_real_nonnegative(seed):
    img = gen_ellipse_phantom(32, 24, 5, seed)
    assert img.shape == (32, 24)
    assert float(img.abs().max()) == 1.0
    assert float(img.real.min()) >= 0
    assert torch.count_nonzero(img.imag) == 0


def test_centered_circle_counts_pixels():
    img = gen_ellipse_phantom(32, 32, ellipses=[(0.5, 0.5, 0.5, 0.0, 0.0, 0.0)])
    # disc of radius 0.5 in normalized units -> radius 8 pixels; ~pi*64 pixels
    n = int((img.real > 0.2).sum())
    assert 180 < n < 220


def test_phantom_errors():
    with pytest.raises(ValidationError):
        gen_ellipse_phantom(4, 32, 3, 0)
    with pytest.raises(ValidationError):
        gen_ellipse_phantom(32, 32, 0, 0)


def test_shepp_logan_shape_and_range():
    img = shepp_logan(64)
    assert img.shape == (64, 64)
    assert float(img.abs().max()) == 1.0 and float(img.real.min()) >= 0


def test_dataset_ids_and_distinct():
    ds = gen_dataset(3, 16, 16, seed=4)
    assert len(set(ds.ids)) == 3
    imgs = ds.images
    for i in range(3):
        for j in range(i + 1, 3):
            assert not torch.equal(imgs[i], imgs[j])
    again = gen_dataset(3, 16, 16, seed=4)
    assert ds.ids == again.ids and all(torch.equal(a, b) for a, b in zip(imgs, again.images))


def test_dataset_roundtrip(tmp_path):
    ds = gen_dataset(4, 16, 20, seed=2, split="test")
    save_dataset(ds, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest == {"split": "test", "H": 16, "W": 20, "ids": ds.ids}
    back = load_dataset(tmp_path)
    assert back.split == "test" and back.ids == ds.ids
    for a, b in zip(ds.images, back.images):
        assert torch.equal(a, b)
        assert abs(float(b.abs().max()) - 1.0) < 1e-6


def test_load_empty_dir(tmp_path):
    with pytest.raises(FormatError):
        load_dataset(tmp_path)


def test_load_corrupt_item_names_file(tmp_path):
    ds = gen_dataset(2, 16, 16, seed=0)
    save_dataset(ds, tmp_path)
    bad = tmp_path / f"{ds.ids[1]}.cim"
    bad.write_bytes(b"JUNK" + bad.read_bytes()[4:])
    with pytest.raises(FormatError, match=ds.ids[1]):
        load_dataset(tmp_path)


def test_mixed_shapes_rejected():
    with pytest.raises(ValidationError):
        Dataset([("a", torch.zeros(8, 8)), ("b", torch.zeros(8, 9))])

import numpy as np
import pytest
from hypothesis import given, strategies as st

from spatialground import checkpoint
from spatialground.export import read_pnm, rle_decode, rle_encode, write_pgm, write_ppm
from spatialground.field import FeatureField
from spatialground.scene import Mask


def test_pnm_roundtrip(tmp_path):
    depth = np.array([[1.0, 2.0], [np.inf, 4.0]])
    write_pgm(tmp_path / "d.pgm", depth)
    img = read_pnm(tmp_path / "d.pgm")
    assert img.tolist() == [[64, 128], [0, 255]]
    rgb = np.random.default_rng(0).uniform(size=(3, 5, 3))
    write_ppm(tmp_path / "c.ppm", rgb)
    assert np.array_equal(read_pnm(tmp_path / "c.ppm"), np.round(rgb * 255).astype(np.uint8))
    assert (tmp_path / "c.ppm").read_bytes().startswith(b"P6\n5 3\n255\n")


@given(st.integers(0, 2**32 - 1), st.integers(1, 9), st.integers(1, 9))
def test_rle_roundtrip(seed, h, w):
    px = np.random.default_rng(seed).uniform(size=(h, w)) < 0.4
    m = Mask(2, px, 5)
    d = rle_encode(m)
    assert sum(d["counts"]) == h * w
    back = rle_decode(d)
    assert np.array_equal(back.pixels, px) and back.instance_id == 5 and back.view_id == 2


def test_rle_bad_counts():
    with pytest.raises(ValueError):
        rle_decode({"view_id": 0, "instance_id": 1, "size": [2, 2], "counts": [1, 1]})


def make_field(seed=0):
    rng = np.random.default_rng(seed)
    fld = FeatureField.zeros((-1, -2, 0), (1, 2, 1.5), np.array([0.05, 0.1, 0.4, 1.0]), (4, 6, 8), 5, 3)
    for g in fld.language.levels + fld.instance.levels:
        g[...] = rng.normal(size=g.shape)
    fld.vis_mod_lang[...] = rng.normal(size=fld.vis_mod_lang.shape)
    fld.meta["train"] = {"steps": 7, "lambda_in": 1.0}
    fld.vp_center = rng.uniform(size=4)
    return fld


def test_checkpoint_roundtrip(tmp_path):
    fld = make_field()
    checkpoint.save(fld, tmp_path / "f.ckpt")
    back = checkpoint.load(tmp_path / "f.ckpt")
    for a, b in zip(fld.language.levels + fld.instance.levels, back.language.levels + back.instance.levels):
        assert np.array_equal(a.astype(np.float32), b)
    assert np.array_equal(back.language.scale_edges, fld.language.scale_edges)
    assert back.meta == fld.meta and back.sampling == fld.sampling
    assert np.array_equal(back.vp_center, fld.vp_center)
    # a second round trip is exact, so quantized fields are fixed points
    assert checkpoint.to_bytes(back) == checkpoint.to_bytes(checkpoint.quantize(back))
    assert checkpoint.to_bytes(make_field()) == checkpoint.to_bytes(make_field())


def test_checkpoint_rejects_garbage():
    data = checkpoint.to_bytes(make_field())
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.from_bytes(b"nope" + data)
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.from_bytes(data[:-4])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.from_bytes(data + b"\0")

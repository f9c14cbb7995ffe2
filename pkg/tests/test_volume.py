import numpy as np
import pytest

from medblip import autodiff as ad
from medblip.params import ParamStore
from medblip.gradcheck import finite_difference_check
from medblip.volume import (
    PatchGrid,
    embed_from_store,
    embed_tokens,
    init_embed,
    patchify,
    prepare_volume,
    read_volume,
    write_volume,
)


def test_prepare_identity_and_constant():
    rng = np.random.default_rng(0)
    v = rng.random((8, 8, 8)).astype(np.float32)
    out = prepare_volume(v, 8)
    assert np.array_equal(out, v) and out is not v
    c = np.full((5, 5, 5), 0.37)
    np.testing.assert_allclose(prepare_volume(c, 12), 0.37, atol=1e-6)


def test_prepare_pads_then_scales():
    v = np.full((124, 256, 256), 0.5, dtype=np.float32)
    out = prepare_volume(v, 224)
    assert out.shape == (224, 224, 224)
    # the padded slabs along the short axis are zero, the middle keeps its value
    assert out[0, 112, 112] == 0.0 and abs(out[112, 112, 112] - 0.5) < 1e-6
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_prepare_rejects_bad_target():
    with pytest.raises(ValueError):
        prepare_volume(np.zeros((4, 4, 4)), 0)


@pytest.mark.parametrize("dim,p,expected", [(224, 32, 343), (32, 32, 1), (64, 32, 8)])
def test_patch_counts(dim, p, expected):
    assert PatchGrid(p, p, dim).num_patches == expected


def test_patch_order_and_content():
    v = np.arange(64 ** 3, dtype=np.float32).reshape(64, 64, 64)
    patches = patchify(v, PatchGrid(32, 32, 64))
    assert patches.shape == (8, 32 ** 3)
    assert np.array_equal(patches[0], v[0:32, 0:32, 0:32].ravel())
    # block index (z, y, x) = (0, 0, 1) is patch 1, (1, 0, 0) is patch 4
    assert np.array_equal(patches[1], v[0:32, 0:32, 32:64].ravel())
    assert np.array_equal(patches[4], v[32:64, 0:32, 0:32].ravel())
    whole = patchify(v[:32, :32, :32], PatchGrid(32, 32, 32))
    assert np.array_equal(whole[0], v[:32, :32, :32].ravel())


@pytest.mark.parametrize("seed", range(20))
def test_token_count_property(seed):
    rng = np.random.default_rng(seed)
    p = int(rng.integers(1, 5))
    dim = p * int(rng.integers(1, 5))
    aggregate = bool(rng.integers(0, 2))
    grid = PatchGrid(p, p, dim)
    d = 3
    store = ParamStore()
    init_embed(store, rng, grid, d, aggregate=aggregate, dtype=np.float64)
    tokens = embed_from_store(store, patchify(rng.random((dim,) * 3), grid))
    assert tokens.shape == ((dim // p) ** 3 + int(aggregate), d)


def test_embed_examples():
    z = embed_tokens(np.zeros((8, 27)), ad.Tensor(np.ones((27, 5))), ad.Tensor(np.zeros((8, 5))))
    assert np.array_equal(z.data, np.zeros((8, 5)))
    patch = np.arange(8.0)[None, :]
    w = np.eye(8, 3)
    out = embed_tokens(patch, ad.Tensor(w), ad.Tensor(np.zeros((1, 3))))
    assert np.array_equal(out.data, patch[:, :3])


def test_aggregate_row_is_agg_plus_pos0():
    rng = np.random.default_rng(1)
    w, pos, agg = rng.standard_normal((8, 4)), rng.standard_normal((3, 4)), rng.standard_normal((1, 4))
    out = embed_tokens(rng.random((2, 8)), ad.Tensor(w), ad.Tensor(pos), ad.Tensor(agg)).data
    np.testing.assert_allclose(out[0], agg[0] + pos[0])


def test_embed_is_linear_in_patch_content():
    rng = np.random.default_rng(2)
    x = rng.random((4, 8))
    w, pos, agg = (ad.Tensor(rng.standard_normal(s)) for s in [(8, 3), (5, 3), (1, 3)])
    base = embed_tokens(np.zeros_like(x), w, pos, agg).data
    e1 = embed_tokens(x, w, pos, agg).data - base
    e2 = embed_tokens(2.5 * x, w, pos, agg).data - base
    np.testing.assert_allclose(e2, 2.5 * e1, rtol=1e-12)


def test_embed_shape_errors():
    with pytest.raises(ad.ShapeError, match="position table"):
        embed_tokens(np.zeros((8, 27)), ad.Tensor(np.ones((27, 5))), ad.Tensor(np.zeros((9, 5))))
    with pytest.raises(ad.ShapeError, match="patch length"):
        embed_tokens(np.zeros((8, 26)), ad.Tensor(np.ones((27, 5))), ad.Tensor(np.zeros((8, 5))))


def test_embed_gradients_on_micro_grid():
    rng = np.random.default_rng(3)
    grid = PatchGrid(4, 4, 8)
    store = ParamStore()
    init_embed(store, rng, grid, 4, dtype=np.float64, std=0.5)
    patches = ad.Tensor(patchify(rng.random((8, 8, 8)), grid))
    readout = ad.Tensor(rng.standard_normal((9, 4)))
    err, per = finite_difference_check(lambda s: ad.sum_(ad.mul(embed_from_store(s, patches), readout)),
                                       store, per_param=True)
    assert set(per) == {"embed.proj.w", "embed.pos", "embed.agg"}
    assert err < 1e-4


def test_volume_file_roundtrip(tmp_path):
    v = np.random.default_rng(0).random((3, 4, 5)).astype(np.float32)
    write_volume(tmp_path / "v.vol", v)
    assert np.array_equal(read_volume(tmp_path / "v.vol"), v)
    raw = (tmp_path / "v.vol").read_bytes()
    (tmp_path / "bad.vol").write_bytes(raw[:-4])
    with pytest.raises(ValueError, match="payload"):
        read_volume(tmp_path / "bad.vol")

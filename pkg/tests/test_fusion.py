import numpy as np
import pytest

from bevuncert import fusion
from bevuncert.gradcheck import check_fusion
from bevuncert.laplace import VertexParamSet
from bevuncert.nn import AttentionSpec, ParamSet, ShapeError, init_attention, init_mlp


def _encoder(k=3, d=4, hidden=(5,), zero=False, seed=0):
    spec = fusion.encoder_spec(k, d, hidden)
    p = ParamSet()
    init_mlp(p, "u", spec, np.random.default_rng(seed), zero=zero)
    return spec, p


def _attention(d=4, heads=2, seed=0, **kw):
    spec = AttentionSpec(d, heads)
    p = ParamSet()
    init_attention(p, "a", spec, np.random.default_rng(seed), **kw)
    return spec, p


def test_encoder_width():
    assert fusion.encoder_spec(5, 64).layer_sizes == (20, 64, 64)


def test_zero_encoder_returns_bias():
    spec, p = _encoder(zero=True)
    p["u.1.bias"].value[...] = [[1.0, -2.0, 3.0, 0.5]]
    e, _ = fusion.encode_uncertainty(spec, p, np.random.default_rng(1).standard_normal((6, 3, 4)), "u")
    np.testing.assert_array_equal(e, np.tile([1.0, -2.0, 3.0, 0.5], (6, 1)))


def test_identical_elements_identical_rows():
    spec, p = _encoder()
    v = np.random.default_rng(2).standard_normal((3, 4))
    e, _ = fusion.encode_uncertainty(spec, p, [VertexParamSet(v), VertexParamSet(v.copy())], "u")
    assert e[0].tobytes() == e[1].tobytes()


def test_flatten_order_is_vertex_major():
    spec, p = _encoder(k=2, d=8, hidden=(), zero=True)
    p["u.0.weight"].value[...] = np.eye(8)
    v = np.arange(8.0).reshape(1, 2, 4)
    e, _ = fusion.encode_uncertainty(spec, p, v, "u")
    np.testing.assert_array_equal(e[0], np.arange(8.0))


def test_heterogeneous_k_rejected():
    spec, p = _encoder()
    with pytest.raises(ShapeError):
        fusion.encode_uncertainty(spec, p, [VertexParamSet(np.zeros((3, 4))), VertexParamSet(np.zeros((2, 4)))], "u")


def test_single_element_identity_projection():
    spec, p = _attention(identity=True)
    e = np.array([[0.3, -1.0, 2.0, 0.0]])
    out, _ = fusion.fuse(spec, p, np.random.default_rng(0).standard_normal((1, 4)), e, prefix="a")
    np.testing.assert_allclose(out, e, atol=1e-15)


def test_residual_with_zero_output_is_identity():
    spec, p = _attention(zero_output=True)
    rng = np.random.default_rng(1)
    q, e = rng.standard_normal((5, 4)), rng.standard_normal((3, 4))
    out, _ = fusion.fuse(spec, p, q, e, residual=True, prefix="a")
    np.testing.assert_array_equal(out, q)


def test_width_mismatch():
    spec, p = _attention()
    with pytest.raises(ShapeError):
        fusion.fuse(spec, p, np.zeros((2, 4)), np.zeros((2, 3)), prefix="a")


@pytest.mark.parametrize("seed", range(4))
def test_composed_gradient(seed):
    assert check_fusion(seed) < 1e-5


@pytest.mark.parametrize("seed", range(10))
def test_output_sensitive_to_every_scale(seed):
    rng = np.random.default_rng(seed)
    uspec, up = _encoder(k=3, d=8, hidden=(6,), seed=seed)
    aspec, ap = _attention(8, 2, seed=seed + 100)
    params = rng.standard_normal((4, 3, 4))
    q = rng.standard_normal((4, 8))

    def run(v):
        e, _ = fusion.encode_uncertainty(uspec, up, v, "u")
        return fusion.fuse(aspec, ap, q, e, prefix="a")[0]

    base = run(params)
    for m in range(4):
        for k in range(3):
            for col in (1, 3):
                v = params.copy()
                v[m, k, col] += 1e-3
                assert np.any(run(v) != base)


def test_permutation_covariance():
    rng = np.random.default_rng(3)
    uspec, up = _encoder(k=2, d=4)
    aspec, ap = _attention()
    params = rng.standard_normal((5, 2, 4))
    q = rng.standard_normal((5, 4))
    perm = rng.permutation(5)
    e, _ = fusion.encode_uncertainty(uspec, up, params, "u")
    ep, _ = fusion.encode_uncertainty(uspec, up, params[perm], "u")
    np.testing.assert_allclose(ep, e[perm], atol=1e-14)
    out, _ = fusion.fuse(aspec, ap, q, e, prefix="a")
    outp, _ = fusion.fuse(aspec, ap, q[perm], ep, prefix="a")
    np.testing.assert_allclose(outp, out[perm], atol=1e-12)

import numpy as np
import pytest

from litformer import tensor as T
from litformer import volume_ops as vo
from litformer.emsm import EMSM, EmsmConfig
from litformer.errors import ConfigError
from litformer.tensor import Tensor

from conftest import fd_max_error


def make(c=4, heads_in=1, heads_th=1, seed=0, **kw):
    return EMSM(c, heads_in, heads_th, EmsmConfig(**kw), np.random.default_rng(seed))


def identity_projections(m):
    """q = k = v = pooled input and g = identity, so the branch is bare attention."""
    for name in ("q_in", "k_in", "v_in", "q_th", "k_th", "v_th"):
        proj = getattr(m, name, None)
        if proj is None:
            continue
        proj.pw.weight.data[:] = np.eye(m.channels)
        proj.pw.bias.data[:] = 0
        w = proj.dw.weight.data
        w[:] = 0
        w[(slice(None),) + (1,) * (w.ndim - 1)] = 1.0
        proj.dw.bias.data[:] = 0
    for g in m.output_projections():
        g.weight.data[:] = np.eye(m.channels)
        g.bias.data[:] = 0


def softmax_rows(a):
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def test_zero_output_weights_give_identity(rng):
    m = make()
    for g in m.output_projections():
        g.weight.data[:] = 0
    x = rng.normal(size=(2, 4, 3, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(m(Tensor(x)).data, x)


def test_bypass_and_disabled_branches(rng):
    with pytest.raises(ConfigError):
        make(enable_inplane=False, enable_throughplane=False)
    m = make(enable_inplane=False, enable_throughplane=False, bypass=True)
    x = Tensor(rng.normal(size=(1, 4, 2, 4, 4)))
    assert m(x) is x
    assert m.parameters() == []
    with pytest.raises(ConfigError):
        make(fusion="serial")


def test_heads_must_divide_channels():
    with pytest.raises(ConfigError):
        make(c=6, heads_in=4)
    with pytest.raises(ConfigError):
        make(c=6, heads_th=4)


def test_alpha_init_and_positive():
    m = make(c=8, heads_in=2)
    np.testing.assert_allclose(m.alpha.data, 2.0)
    assert np.all(m.alpha.data > 0)


def test_attention_rows_sum_to_one(rng):
    m = make(c=8, heads_in=2, heads_th=2)
    x = Tensor(rng.normal(size=(2, 8, 5, 4, 4)).astype(np.float32))
    _, a_in = m.inplane(x, return_attention=True)
    _, a_th = m.throughplane(x, return_attention=True)
    assert a_in.shape == (2, 2, 4, 4)
    assert a_th.shape == (2, 2, 5, 5)
    for a in (a_in.data, a_th.data):
        assert np.all(a >= 0)
        np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-5)


def test_single_slice_attention_is_one(rng):
    m = make()
    _, a = m.throughplane(Tensor(rng.normal(size=(1, 4, 1, 4, 4))), return_attention=True)
    np.testing.assert_array_equal(a.data, [[[[1.0]]]])


def test_branch_shapes(rng):
    m = make(c=4)
    x = Tensor(rng.normal(size=(2, 4, 3, 6, 5)))
    assert m.inplane(x).shape == (2, 4, 6, 5)
    assert m.throughplane(x).shape == (2, 4, 3)
    assert m(x).shape == x.shape


def test_inplane_hand_evaluation():
    m = make(c=2, heads_in=1, enable_throughplane=False)
    identity_projections(m)
    with T.precision(np.float64):
        m.astype(np.float64)
        x = np.array([[[0.2, -0.4], [1.0, 0.5]], [[0.6, 0.0], [-0.3, 0.8]]])
        vol = np.stack([x, x + 0.2])[None].transpose(0, 2, 1, 3, 4)  # (1, 2, D=2, 2, 2)
        out = m.inplane(Tensor(vol)).data[0]
    pooled = vol[0].mean(axis=1).reshape(2, 4)
    alpha = np.sqrt(2.0)
    attn = softmax_rows(pooled @ pooled.T / alpha)
    np.testing.assert_allclose(out.reshape(2, 4), attn @ pooled, atol=1e-12)


def test_throughplane_hand_evaluation():
    m = make(c=2, heads_th=1, enable_inplane=False)
    identity_projections(m)
    m.astype(np.float64)
    rng = np.random.default_rng(5)
    vol = rng.normal(size=(1, 2, 2, 3, 3))
    with T.precision(np.float64):
        out = m.throughplane(Tensor(vol)).data[0]
    v = vol[0].mean(axis=(2, 3))  # (C, D)
    attn = softmax_rows(v.T @ v / np.sqrt(2.0))  # (D, D), row i = query slice i
    np.testing.assert_allclose(out, v @ attn.T, atol=1e-12)
    # The residual path adds the branch output to every in-plane voxel of its slice.
    with T.precision(np.float64):
        full = m(Tensor(vol)).data
    np.testing.assert_allclose(full - vol, np.broadcast_to(out[None, :, :, None, None], vol.shape), atol=1e-12)


def test_parallel_differs_from_cascaded(rng):
    x = Tensor(rng.normal(size=(1, 4, 3, 4, 4)))
    par = make(seed=3, fusion="parallel")
    cas = make(seed=3, fusion="cascaded")
    a, b = par(x).data, cas(x).data
    assert not np.allclose(a, b)
    # Cascaded is exactly through-plane applied to the in-plane output.
    step = cas._add_inplane(x)
    np.testing.assert_allclose(b, cas._add_throughplane(step).data, atol=1e-6)


def test_inplane_branch_ignores_slice_order(rng):
    m = make(c=4, heads_in=2)
    x = rng.normal(size=(1, 4, 5, 4, 4))
    perm = rng.permutation(5)
    a = m.inplane(Tensor(x)).data
    b = m.inplane(Tensor(x[:, :, perm])).data
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_parallel_is_sum_of_branches(rng):
    m = make(c=4, heads_in=2, heads_th=2)
    x = Tensor(rng.normal(size=(1, 4, 3, 4, 4)))
    ins = m.inplane(x).data[:, :, None]
    th = m.throughplane(x).data[:, :, :, None, None]
    np.testing.assert_allclose(m(x).data, x.data + ins + th, atol=1e-5)


def test_attention_mac_labels(rng):
    m = make(c=4, heads_in=2, heads_th=2)
    x = Tensor(rng.normal(size=(1, 4, 3, 8, 8)).astype(np.float32))
    with T.count_macs() as c:
        m(x)
    ops = c.by_op()
    # (C/h)^2 * HW per head for the channel map; D^2 * C/h per head for the slice map.
    assert ops["attn_map_in"] == 2 * 2 * 2 * 64
    assert ops["attn_map_th"] == 2 * 3 * 3 * 2


@pytest.mark.parametrize("fusion", ["parallel", "cascaded"])
def test_emsm_gradients(fusion):
    rng = np.random.default_rng(11)
    m = make(c=4, heads_in=2, heads_th=2, seed=2, fusion=fusion)
    m.astype(np.float64)
    x = Tensor(rng.uniform(-1, 1, (1, 4, 4, 8, 8)), requires_grad=True)
    probe = Tensor(rng.uniform(-1, 1, (1, 4, 4, 8, 8)))
    err = fd_max_error(lambda: T.sum(T.mul(m(x), probe)), [x] + m.parameters(), per_tensor=6)
    assert err < 1e-4

import numpy as np
import pytest

from litformer import tensor as T
from litformer import volume_ops as vo
from litformer.complexity import count_params
from litformer.errors import ConfigError
from litformer.network import (
    ATTENTION_VARIANTS,
    CONVOLUTION_VARIANTS,
    ModelConfig,
    build,
    desk_config,
    micro_config,
    variant_2plus1d_unet,
)
from litformer.tensor import Tensor


def small(**kw):
    return build(micro_config(**kw), seed=0)


def zeros(shape):
    return Tensor(np.zeros(shape, dtype=np.float32))


def test_training_patch_shape_and_latent():
    model = build(desk_config(), 0)
    trace = []
    with T.no_grad():
        out = model(zeros((1, 1, 16, 64, 64)), trace=trace)
    assert out.shape == (1, 1, 32, 64, 64)
    assert dict(trace)["latent"] == (1, 128, 16, 8, 8)


def test_fractional_scale_shape():
    model = build(micro_config(r=2.5), 0)
    with T.no_grad():
        assert model(zeros((1, 1, 16, 16, 16))).shape == (1, 1, 40, 16, 16)


def test_depth_changes_once(rng):
    model = small()
    trace = []
    with T.no_grad():
        model(Tensor(rng.normal(size=(1, 1, 5, 16, 16)).astype(np.float32)), trace=trace)
    stages = [s for s, _ in trace]
    depths = [shape[2] for _, shape in trace]
    cut = stages.index("upsample_depth")
    assert set(depths[:cut]) == {5}
    assert set(depths[cut:]) == {10}


def test_channel_and_skip_shapes(rng):
    model = small()
    trace = []
    with T.no_grad():
        model(Tensor(rng.normal(size=(2, 1, 3, 16, 16)).astype(np.float32)), trace=trace)
    shapes = dict(trace)
    assert [shapes[f"enc{i}"][1] for i in range(3)] == [4, 8, 16]
    assert shapes["enc1"][3:] == (8, 8)
    assert shapes["skip0"] == shapes["enc1"]
    assert shapes["skip1"] == shapes["enc0"]


def test_seed_determinism():
    a, b, c = build(micro_config(), 0), build(micro_config(), 0), build(micro_config(), 1)
    pa, pb, pc = dict(a.named_parameters()), dict(b.named_parameters()), dict(c.named_parameters())
    assert pa.keys() == pb.keys() == pc.keys()
    for name in pa:
        np.testing.assert_array_equal(pa[name].data, pb[name].data)
    assert any(not np.array_equal(pa[n].data, pc[n].data) for n in pa if pa[n].data.any())


def test_init_bound_and_zero_bias():
    model = small()
    for name, p in model.named_parameters():
        if name.endswith("bias"):
            assert not p.data.any()


def test_unet_variant_smaller_and_attention_free():
    full = build(desk_config(), 0)
    unet = variant_2plus1d_unet(desk_config(), 0)
    assert unet.num_parameters() < full.num_parameters()
    assert all(not m.cfg.active for m in unet.emsm_blocks())
    assert not any("emsm" in name for name, _ in unet.named_parameters())
    with T.no_grad():
        assert unet(zeros((1, 1, 4, 64, 64))).shape == full(zeros((1, 1, 4, 64, 64))).shape


def test_desk_shape_matches_full():
    with T.no_grad():
        a = build(desk_config(base_channels=8), 0)(zeros((1, 1, 4, 64, 64)))
    assert a.shape == (1, 1, 8, 64, 64)


def test_full_param_count_near_target():
    n = sum(e.params + e.bias for e in count_params(build(ModelConfig(), 0)))
    assert n == build(ModelConfig(), 0).num_parameters()
    assert 5.76e6 <= n <= 8.64e6


def _kill(model):
    """Zero every eMSM output projection and every eCFN kernel inside the U."""
    for m in model.emsm_blocks():
        for g in m.output_projections():
            g.weight.data[:] = 0
            g.bias.data[:] = 0
    for f in [b.ecfn for b in model.enc + model.dec] + [model.refine]:
        for u in (f.unit1, f.unit2):
            for conv in u.kernels():
                conv.weight.data[:] = 0
                conv.bias.data[:] = 0


def test_compositional_identity(rng):
    model = small()
    _kill(model)
    x = Tensor(rng.normal(size=(1, 1, 3, 16, 16)).astype(np.float32))
    with T.no_grad():
        out = model(x).data
        # Every killed eCFN reduces to gelu(x) followed by its projection path.
        def block(b, h):
            return b.ecfn.unit2.identity_path(T.gelu(h))
        f0 = model.stem(x)
        h, skips = f0, []
        for i, b in enumerate(model.enc):
            if i:
                h = vo.maxpool_inplane(h)
            h = block(b, h)
            skips.append(h)
        for i, (red, b) in enumerate(zip(model.reduce, model.dec)):
            h = T.add(block(b, red(vo.upsample_transverse(h))), skips[-2 - i])
        fdf = T.add(T.gelu(h), f0)
        expect = model.head(vo.upsample_depth(fdf, 2.0)).data
    np.testing.assert_allclose(out, expect, atol=1e-5)


@pytest.mark.parametrize("variant", sorted(ATTENTION_VARIANTS))
def test_attention_variants(variant, rng):
    model = build(micro_config().with_attention(variant), 0)
    x = Tensor(rng.normal(size=(1, 1, 2, 8, 8)).astype(np.float32))
    with T.no_grad():
        assert model(x).shape == (1, 1, 4, 8, 8)


@pytest.mark.parametrize("variant", sorted(CONVOLUTION_VARIANTS))
def test_convolution_variants(variant, rng):
    model = build(micro_config().with_convolution(variant), 0)
    x = Tensor(rng.normal(size=(1, 1, 2, 8, 8)).astype(np.float32))
    with T.no_grad():
        assert model(x).shape == (1, 1, 4, 8, 8)


def test_variants_produce_different_outputs(rng):
    x = Tensor(rng.normal(size=(1, 1, 3, 8, 8)).astype(np.float32))
    outs = {}
    with T.no_grad():
        for v in ATTENTION_VARIANTS:
            outs[("attn", v)] = build(micro_config().with_attention(v), 0)(x).data
        for v in CONVOLUTION_VARIANTS:
            outs[("conv", v)] = build(micro_config().with_convolution(v), 0)(x).data
    keys = list(outs)
    for i, a in enumerate(keys):
        for b in keys[i + 1:]:
            if {a, b} == {("attn", "parallel"), ("conv", "parallel")}:
                continue  # both are the default model
            assert not np.allclose(outs[a], outs[b]), (a, b)


def test_config_errors():
    with pytest.raises(ConfigError):
        small()(zeros((1, 1, 2, 10, 16)))
    with pytest.raises(ConfigError):
        small()(zeros((1, 2, 2, 16, 16)))
    with pytest.raises(ConfigError):
        build(micro_config(r=0.5))
    with pytest.raises(ConfigError):
        build(micro_config(heads_in=(1, 2)))
    with pytest.raises(ConfigError):
        build(micro_config(levels=0))
    with pytest.raises(ConfigError):
        build(micro_config(heads_in=(1, 3, 4)))


def test_config_dict_round_trip():
    cfg = micro_config(r=2.5).with_attention("cascaded").with_convolution("full3d")
    again = ModelConfig.from_dict(cfg.to_dict())
    assert again == cfg
    assert again.to_dict()["heads_in"] == [1, 2, 4]


def test_forward_is_deterministic(rng):
    model = small()
    x = Tensor(rng.normal(size=(1, 1, 3, 16, 16)).astype(np.float32))
    with T.no_grad():
        np.testing.assert_array_equal(model(x).data, model(x).data)

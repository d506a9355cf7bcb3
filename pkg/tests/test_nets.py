"""Denoiser networks: init identities, fusion gating, parity, gradients."""

import numpy as np
import pytest

from dualdenoise import autodiff as ad
from dualdenoise import isp
from dualdenoise import nets
from dualdenoise import rawnoise as rn
from dualdenoise.errors import DimensionError, ParameterError

NPAR = rn.NoiseParams(gain=0.01, read_var=1e-4)
P = isp.IspParams(tone_strength=0.5)


def tiny_model(mode="dual", form="std", fusion="gated", map_mode="signal_path",
               seed=0, depth=1, width=4, dtype=np.float64):
    pipe = nets.PipelineConfig(mode=mode, noise_map_form=form,
                               map_mode=map_mode, fusion=fusion)
    cfg = nets.NetConfig(depth=depth, width=width)
    return nets.build_model(pipe, cfg, cfg, seed=seed, dtype=dtype)


def scramble(model, scale=0.05, seed=99):
    rng = rn.stream_rng(seed)
    for t in model.parameters().values():
        t.data = t.data + rng.normal(0.0, scale, size=t.data.shape)


# ------------------------------------------------------------------- configs

def test_config_validation():
    with pytest.raises(ParameterError):
        nets.NetConfig(depth=0)
    with pytest.raises(ParameterError):
        nets.NetConfig(kernel=4)  # must be odd for same-size conv
    with pytest.raises(ParameterError):
        nets.NetConfig(activation="gelu")
    with pytest.raises(ParameterError):
        nets.PipelineConfig(mode="both")
    with pytest.raises(ParameterError):
        nets.PipelineConfig(noise_map_form="log")
    with pytest.raises(ParameterError):
        nets.PipelineConfig(fusion="add")


def test_config_round_trips():
    cfg = nets.NetConfig(depth=5, width=24, kernel=5, activation="relu")
    assert nets.NetConfig.from_dict(cfg.to_dict()) == cfg
    pipe = nets.PipelineConfig(mode="raw_only", noise_map_form="variance",
                               map_mode="linearized", fusion="concat")
    assert nets.PipelineConfig.from_dict(pipe.to_dict()) == pipe
    assert pipe.uses_noise_map
    assert not nets.PipelineConfig(noise_map_form="none").uses_noise_map


# ------------------------------------------------------------ init identities

def test_model_is_identity_at_init():
    # zero heads + centered gate: the whole pipeline must reproduce the
    # plain render of its input bit for bit at initialization
    model = tiny_model(depth=2, width=8)
    rng = rn.stream_rng(50)
    plane = rng.uniform(0.05, 0.95, size=(16, 16))
    with ad.pause_recording():
        raw_out, srgb = nets.forward_dual(model, plane, NPAR, P)
        packed = ad.pixel_unshuffle(ad.constant(plane.reshape(1, 1, 16, 16)), 2)
        rendered = isp.run_isp(plane, P)
    np.testing.assert_array_equal(raw_out.data, packed.data)
    np.testing.assert_array_equal(srgb.data, rendered.data)


@pytest.mark.parametrize("mode,form,fusion", [
    ("raw_only", "std", "gated"),
    ("srgb_only", "std", "gated"),
    ("dual", "none", "gated"),
    ("dual", "variance", "concat"),
    ("dual", "normalized", "gated"),
    ("dual", "std", "gated"),
])
def test_identity_at_init_across_configurations(mode, form, fusion):
    model = tiny_model(mode=mode, form=form, fusion=fusion)
    rng = rn.stream_rng(51)
    plane = rng.uniform(0.05, 0.95, size=(8, 8))
    with ad.pause_recording():
        _, srgb = nets.forward_dual(model, plane, NPAR, P)
        rendered = isp.run_isp(plane, P)
    if fusion == "gated":
        np.testing.assert_array_equal(srgb.data, rendered.data)
    else:  # concat entry is he-initialized, but zero head still gives identity
        np.testing.assert_allclose(srgb.data, rendered.data, atol=1e-12)


def test_linearized_map_mode_runs_and_is_identity_at_init():
    model = tiny_model(map_mode="linearized")
    rng = rn.stream_rng(52)
    plane = rng.uniform(0.05, 0.95, size=(8, 8))
    with ad.pause_recording():
        _, srgb = nets.forward_dual(model, plane, NPAR, P)
        rendered = isp.run_isp(plane, P)
    np.testing.assert_array_equal(srgb.data, rendered.data)


# ------------------------------------------------------------------ the gate

def test_gate_passes_projection_exactly_at_zero_logits():
    rng = rn.stream_rng(53)
    block = nets.FusionBlock("f", 4, 4, 8, 3, rng, "gated", True, np.float64)
    x = ad.constant(rng.uniform(0.1, 0.9, size=(1, 4, 6, 6)))
    nmap = ad.constant(rng.uniform(0.0, 0.1, size=(1, 4, 6, 6)))
    with ad.pause_recording():
        fused = nets.nfb_fuse(block, x, nmap)
        proj = block.proj(x)
    np.testing.assert_array_equal(fused.data, proj.data)


def test_gate_saturation_doubles_or_kills_the_projection():
    rng = rn.stream_rng(54)
    block = nets.FusionBlock("f", 4, 4, 8, 3, rng, "gated", True, np.float64)
    x = ad.constant(rng.uniform(0.1, 0.9, size=(1, 4, 6, 6)))
    nmap = ad.constant(rng.uniform(0.0, 0.1, size=(1, 4, 6, 6)))
    with ad.pause_recording():
        proj = block.proj(x).data
        block.gate.b.data = np.full_like(block.gate.b.data, 40.0)
        high = nets.nfb_fuse(block, x, nmap).data
        block.gate.b.data = np.full_like(block.gate.b.data, -40.0)
        low = nets.nfb_fuse(block, x, nmap).data
    np.testing.assert_allclose(high, 2.0 * proj, rtol=1e-12)
    np.testing.assert_allclose(low, 0.0, atol=1e-12)


def test_gate_requires_its_map():
    rng = rn.stream_rng(55)
    block = nets.FusionBlock("f", 4, 4, 8, 3, rng, "gated", True, np.float64)
    with pytest.raises(ParameterError):
        with ad.pause_recording():
            nets.nfb_fuse(block, ad.constant(np.zeros((1, 4, 4, 4))), None)


def test_gate_responds_to_the_noise_map():
    # after scrambling, different maps must change the output
    rng = rn.stream_rng(56)
    block = nets.FusionBlock("f", 4, 4, 8, 3, rng, "gated", True, np.float64)
    block.gate.w.data = rng.normal(0, 0.5, size=block.gate.w.data.shape)
    x = ad.constant(rng.uniform(0.1, 0.9, size=(1, 4, 6, 6)))
    with ad.pause_recording():
        a = nets.nfb_fuse(block, x, ad.constant(np.full((1, 4, 6, 6), 0.01))).data
        b = nets.nfb_fuse(block, x, ad.constant(np.full((1, 4, 6, 6), 0.30))).data
    assert np.abs(a - b).max() > 1e-6


# ------------------------------------------------------------------ denoiser

def test_denoiser_rejects_wrong_channel_count():
    model = tiny_model()
    with pytest.raises(DimensionError):
        with ad.pause_recording():
            model.raw_net.forward(ad.constant(np.zeros((1, 3, 4, 4))), None)


def test_srgb_net_output_is_clamped():
    model = tiny_model()
    scramble(model, scale=2.0)  # large weights can push outside [0,1]
    rng = rn.stream_rng(57)
    plane = rng.uniform(0.05, 0.95, size=(8, 8))
    with ad.pause_recording():
        _, srgb = nets.forward_dual(model, plane, NPAR, P)
    assert srgb.data.min() >= 0.0 and srgb.data.max() <= 1.0


def test_forward_shapes_by_mode():
    rng = rn.stream_rng(58)
    plane = rng.uniform(0.05, 0.95, size=(12, 16))
    with ad.pause_recording():
        raw_out, srgb = nets.forward_dual(tiny_model("dual"), plane, NPAR, P)
        assert raw_out.data.shape == (1, 4, 6, 8)
        assert srgb.data.shape == (1, 3, 12, 16)
        raw_out, _ = nets.forward_dual(tiny_model("raw_only"), plane, NPAR, P)
        assert raw_out is not None
        raw_out, srgb = nets.forward_dual(tiny_model("srgb_only"), plane, NPAR, P)
        assert raw_out is None
        assert srgb.data.shape == (1, 3, 12, 16)


def test_forward_requires_2d_plane():
    with pytest.raises(DimensionError):
        with ad.pause_recording():
            nets.forward_dual(tiny_model(), np.zeros((1, 1, 8, 8)), NPAR, P)


def test_model_dtype_is_respected():
    model = tiny_model(dtype=np.float32)
    plane = rn.stream_rng(59).uniform(0.05, 0.95, size=(8, 8))  # float64 input
    with ad.pause_recording():
        raw_out, srgb = nets.forward_dual(model, plane, NPAR, P)
    assert raw_out.data.dtype == np.float32
    assert srgb.data.dtype == np.float32


def test_init_is_seed_deterministic():
    a = tiny_model(seed=7).parameters()
    b = tiny_model(seed=7).parameters()
    c = tiny_model(seed=8).parameters()
    assert set(a) == set(b) == set(c)
    for name in a:
        np.testing.assert_array_equal(a[name].data, b[name].data)
    assert any(not np.array_equal(a[n].data, c[n].data) for n in a)


def test_forward_is_finite_over_many_random_inputs():
    model = tiny_model(depth=2, width=8)
    scramble(model, scale=0.3)
    rng = rn.stream_rng(60)
    with ad.pause_recording():
        for _ in range(100):
            plane = rng.uniform(0.0, 1.0, size=(8, 8))
            raw_out, srgb = nets.forward_dual(model, plane, NPAR, P)
            assert np.isfinite(raw_out.data).all()
            assert np.isfinite(srgb.data).all()


# -------------------------------------------------------------------- parity

def test_parameter_parity_of_the_depth_halving_rule():
    # two nets at depth d versus one net at depth 2d: the fixed fusion+head
    # overhead washes out with depth; parity within 5% from depth 6 up
    r6 = nets.parameter_parity_ratio(6, 16)
    assert abs(r6 - 1.0) <= 0.05
    r3 = nets.parameter_parity_ratio(3, 16)
    r12 = nets.parameter_parity_ratio(12, 16)
    assert r12 < r6 < r3  # overhead ratio shrinks monotonically


def test_count_parameters_matches_hand_count():
    model = tiny_model(depth=1, width=4)
    # raw: proj 4*4*1*1+4, gate 4*8*3*3+4, block 4*4*9+4, head 4*4*9+4
    raw = (16 + 4) + (288 + 4) + (144 + 4) + (144 + 4)
    # srgb: proj 4*3+4, gate 4*6*9+4, block 144+4, head 3*4*9+3
    srgb = (12 + 4) + (216 + 4) + (144 + 4) + (108 + 3)
    assert nets.count_parameters(model) == raw + srgb


# ----------------------------------------------------------------- gradients

def test_loss_gradcheck_through_the_whole_pipeline():
    model = tiny_model(depth=1, width=4, seed=3)
    scramble(model, scale=0.05, seed=61)
    rng = rn.stream_rng(62)
    plane = rng.uniform(0.1, 0.9, size=(8, 8))
    target_raw = ad.constant(rng.uniform(0.1, 0.9, size=(1, 4, 4, 4)))
    target_srgb = ad.constant(rng.uniform(0.1, 0.9, size=(1, 3, 8, 8)))
    layer = model.srgb_net.blocks[0]

    def f(w):
        old = layer.w
        layer.w = w
        try:
            raw_out, srgb = nets.forward_dual(model, plane, NPAR, P)
            return ad.add(ad.reduce_mean_abs(raw_out, target_raw),
                          ad.reduce_mean_abs(srgb, target_srgb))
        finally:
            layer.w = old

    err = ad.gradcheck(f, ad.param(layer.w.data.copy()))
    assert err <= 1e-4


def test_gradient_reaches_the_raw_net_through_the_render_chain():
    # supervise only the rendered output; raw-domain weights must still move
    model = tiny_model(depth=1, width=4, seed=5)
    scramble(model, scale=0.05, seed=63)
    rng = rn.stream_rng(64)
    plane = rng.uniform(0.1, 0.9, size=(8, 8))
    target = ad.constant(rng.uniform(0.1, 0.9, size=(1, 3, 8, 8)))
    with ad.Tape():
        _, srgb = nets.forward_dual(model, plane, NPAR, P)
        loss = ad.reduce_mean_abs(srgb, target)
        ad.backward(loss)
    g = model.raw_net.blocks[0].w.grad
    assert g is not None and np.abs(g).max() > 0


def test_fusion_block_gradcheck():
    rng = rn.stream_rng(65)
    block = nets.FusionBlock("f", 4, 4, 6, 3, rng, "gated", True, np.float64)
    block.gate.w.data = rng.normal(0, 0.3, size=block.gate.w.data.shape)
    nmap = ad.constant(rng.uniform(0.0, 0.2, size=(1, 4, 6, 6)))
    x = ad.param(rng.uniform(0.1, 0.9, size=(1, 4, 6, 6)))
    err = ad.gradcheck(lambda t: ad.mean_all(nets.nfb_fuse(block, t, nmap)), x)
    assert err <= 1e-4

from __future__ import annotations

import struct
from dataclasses import replace

import numpy as np
import pytest

from cadnet.errors import CheckpointError, ConfigurationError, VersionError
from cadnet.model import (
    VARIANTS,
    CADNet,
    ModelConfig,
    check_gradients,
    load_checkpoint,
    param_shapes,
    random_inputs,
    save_checkpoint,
    toy_config,
    variant_config,
)
from cadnet.numerics import Tape, Var

SMALL = ModelConfig(S=6, C=4, F=16, conv_channels=(4, 8), encoder_fc=16, context_time=8, context_gps=8,
                    context_frame=8, frame_hidden=8, latent=6, gps_bounds=(0.0, 1.0, 0.0, 1.0))


def kl(mu, logvar) -> np.ndarray:
    tape = Tape()
    return tape.kl_normal(Var(np.atleast_2d(mu).astype(float)), Var(np.atleast_2d(logvar).astype(float))).value


# -- configuration --------------------------------------------------------------


def test_default_widths():
    cfg = ModelConfig()
    assert cfg.context_width == 32 + 32 + 64 == 128
    assert cfg.encoder_fc == 128
    assert cfg.h2_width == 13 * 13 * 8


def test_variants():
    assert set(VARIANTS) == {"full", "wo-gps-time", "wo-time", "wo-gps", "wo-frame", "wo-skip", "wo-skip-m", "wo-skip-c"}
    ae = variant_config("autoencoder")
    assert not ae.variational and not ae.ablation.any_context
    assert variant_config("wo-gps-time").context_width == 64
    with pytest.raises(ConfigurationError):
        variant_config("wo-everything")


def test_config_round_trips_through_dict():
    cfg = variant_config("wo-skip-c", SMALL)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_disabled_branches_have_no_parameters():
    shapes = param_shapes(variant_config("autoencoder", SMALL))
    assert not any(n.startswith("context.") for n in shapes)
    assert "decoder.sigma.w" not in shapes
    full = param_shapes(variant_config("full", SMALL))
    assert full["decoder.h2.w"][0] == SMALL.latent + SMALL.context_width


# -- forward pass ---------------------------------------------------------------


def test_context_widths_and_determinism():
    for name in ("full", "wo-time", "wo-gps-time"):
        cfg = variant_config(name, SMALL)
        model = CADNet(cfg, seed=0)
        inp = random_inputs(cfg, 3, seed=1)
        trace = model.forward(Tape(), inp)
        assert trace.c.value.shape == (3, cfg.context_width)
        assert trace.d.value.shape == (3, cfg.encoder_fc + cfg.context_width)
        again = model.forward(Tape(), inp)
        np.testing.assert_array_equal(trace.c.value, again.c.value)


def test_no_context_means_d_equals_e():
    cfg = replace(SMALL, ablation=replace(VARIANTS["full"], use_gps=False, use_time=False, use_frame=False))
    trace = CADNet(cfg).forward(Tape(), random_inputs(cfg, 2, seed=0))
    assert trace.c is None
    np.testing.assert_array_equal(trace.d.value, trace.e.value)


def test_encoder_constant_input_and_sensitivity():
    cfg = SMALL
    model = CADNet(cfg, seed=3)
    inp = random_inputs(cfg, 2, seed=0)
    inp.x[:] = 0
    trace = model.forward(Tape(), inp)
    np.testing.assert_array_equal(trace.e.value[0], trace.e.value[1])
    assert trace.e.value.shape == (2, cfg.encoder_fc)
    inp = random_inputs(cfg, 2, seed=5)
    e = model.forward(Tape(), inp).e.value
    swapped = inp.subset(np.array([1, 0]))
    e2 = model.forward(Tape(), swapped).e.value
    assert not np.array_equal(e[0], e2[0])
    np.testing.assert_array_equal(e[0], e2[1])


def test_zero_noise_gives_mean_and_sigmoid_range():
    cfg = SMALL
    model = CADNet(cfg, seed=0)
    inp = random_inputs(cfg, 4, seed=2)
    trace = model.forward(Tape(), inp, np.zeros((4, cfg.latent), np.float32))
    np.testing.assert_array_equal(trace.z.value, trace.mu.value)
    assert trace.xhat.value.shape == (4, cfg.S, cfg.S, cfg.C)
    assert (trace.xhat.value > 0).all() and (trace.xhat.value < 1).all()
    noisy = model.forward(Tape(), inp, np.ones((4, cfg.latent), np.float32))
    assert not np.array_equal(noisy.z.value, trace.z.value)


@pytest.mark.parametrize("skip_main", [False, True])
def test_main_skip_is_the_only_path_from_x_to_output(skip_main):
    cfg = replace(SMALL, ablation=replace(VARIANTS["full"], skip_main=skip_main))
    model = CADNet(cfg, seed=0)
    inp = random_inputs(cfg, 2, seed=4)
    eps = np.random.default_rng(0).standard_normal((2, cfg.latent)).astype(np.float32)
    e_fixed = model.forward(Tape(), inp, eps).e
    model.encode = lambda tape, x: e_fixed  # freeze e, then perturb x
    a = model.forward(Tape(), inp, eps).xhat.value
    perturbed = replace(inp, x=np.clip(inp.x + 0.3, 0, 1).astype(np.float32))
    b = model.forward(Tape(), perturbed, eps).xhat.value
    assert np.array_equal(a, b) == (not skip_main)


def test_shape_errors_are_reported():
    model = CADNet(SMALL)
    inp = random_inputs(SMALL, 1, seed=0)
    with pytest.raises(ConfigurationError):
        model.encode(Tape(), inp.x[:, :-1])


# -- loss -------------------------------------------------------------------


def test_kl_examples():
    assert kl([0.0], [0.0])[0] == 0.0
    assert kl([1.0], [0.0])[0] == pytest.approx(0.5)
    # sum over latent dimensions
    assert kl([1.0, 0.0, 2.0], [0.0, 0.0, 0.0])[0] == pytest.approx(2.5)
    assert kl([0.0], [np.log(2.0)])[0] == pytest.approx(0.5 * (2 - 1 - np.log(2)))


def test_bce_vanishes_at_perfect_reconstruction():
    x = (np.random.default_rng(0).random((2, 4, 4, 3)) < 0.3).astype(float)
    bce = Tape().bce_sum(x, Var(x.copy())).value
    assert (bce >= 0).all()
    assert bce.max() <= 4 * 4 * 3 * -np.log(1 - 1e-6) * 1.01


def test_loss_is_bce_plus_weighted_kl():
    cfg = SMALL
    model = CADNet(cfg, seed=0)
    inp = random_inputs(cfg, 3, seed=1)
    tape = Tape()
    trace = model.forward(tape, inp)
    bce = Tape().bce_sum(inp.x, trace.xhat).value
    k = kl(trace.mu.value, trace.logvar.value)
    for w in (0.0, 1.0, 2.5):
        got = float(model.loss(Tape(), inp, trace, w).value)
        assert got == pytest.approx(float((bce + w * k).mean()), rel=1e-6)


# -- gradients ----------------------------------------------------------------


@pytest.mark.parametrize("variant", ["full", "wo-gps-time", "wo-skip", "wo-skip-c", "autoencoder"])
def test_gradients_match_finite_differences(variant):
    report = check_gradients(toy_config(variant))
    assert report.pass_fraction >= 0.999, report.summary()


def test_full_graph_at_coarse_step():
    report = check_gradients(toy_config("full"), h=1e-3)
    assert report.max_rel_error < 1e-3, report.summary()


# -- checkpoints ----------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    model = CADNet(SMALL, seed=7)
    model.params.caches["decoder.h2.w"][:] = 0.25
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, model, {"best_epoch": 3})
    loaded, state = load_checkpoint(a)
    assert state == {"best_epoch": 3}
    assert loaded.config == SMALL
    save_checkpoint(b, loaded, state)
    assert a.read_bytes() == b.read_bytes()
    inp = random_inputs(SMALL, 3, seed=0)
    np.testing.assert_array_equal(model.reconstruct(inp), loaded.reconstruct(inp))
    np.testing.assert_array_equal(loaded.params.caches["decoder.h2.w"], 0.25)


def test_checkpoint_shape_mismatch_names_the_parameter(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, CADNet(SMALL))
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(path, replace(SMALL, S=7))
    msg = str(err.value)
    # 6x6 -> 7x7 first changes the flattened encoder width: 7*7*8 = 392 vs 6*6*8 = 288
    assert "encoder.fc.w" in msg and "(392, 16)" in msg and "(288, 16)" in msg


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, CADNet(SMALL))
    blob = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(blob[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "trunc.ckpt")
    (tmp_path / "tail.ckpt").write_bytes(blob + b"\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "tail.ckpt")
    (tmp_path / "ver.ckpt").write_bytes(blob[:8] + struct.pack("<I", 2) + blob[12:])
    with pytest.raises(VersionError):
        load_checkpoint(tmp_path / "ver.ckpt")
    (tmp_path / "magic.ckpt").write_bytes(b"NOTACKPT" + blob[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "magic.ckpt")


def test_init_is_seeded():
    a, b, c = CADNet(SMALL, seed=1), CADNet(SMALL, seed=1), CADNet(SMALL, seed=2)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])
    assert any(not np.array_equal(a.params[n], c.params[n]) for n in a.params if n.endswith(".w"))

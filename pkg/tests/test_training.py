import math

import numpy as np
import pytest

from cadunet import autodiff as ad
from cadunet import training as tr
from cadunet.datasynth import MixtureSample, synth_sample
from cadunet.network import Model, UNetConfig, segment_samples, unet_forward
from cadunet.stft import CodecConfig, stft
from cadunet.training import (AdamState, AugmentSpec, LossConfig, TrainConfig,
                              TrainingDiverged, adam_step, augment,
                              calibrate_alpha, forward_losses, loss,
                              loss_parts, train)

TINY = UNetConfig(channels=2, bins=64, frames=16, levels=2, base_filters=8,
                  ca_depth=4)
TINY_CODEC = CodecConfig(window_len=128, hop=32)


def tiny_model(seed=0):
    return Model(TINY, TINY_CODEC, seed=seed)


def training_sample(seed, duration_s=0.1, channels=2):
    return synth_sample(seed, duration_s=duration_s, channels=channels)


def segment_sample(seed, model):
    """A sample exactly one network segment long."""
    seg = segment_samples(model)
    s = training_sample(seed, duration_s=(seg + 160) / 16000.0)
    return MixtureSample(speech=s.speech[:seg], noise=s.noise[:seg],
                         mixture=s.speech[:seg] + s.noise[:seg])


# ------------------------------------------------------------------- loss

def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(alpha=0.0)
    with pytest.raises(ValueError):
        LossConfig(alpha=-1.0)


def test_loss_zero_for_perfect_estimates():
    model = tiny_model()
    seg = segment_samples(model)
    sample = segment_sample(1, model)
    S = stft(sample.speech, model.codec)
    N = stft(sample.noise, model.codec)
    tt, mt = loss_parts(sample.speech, ad.Tensor(sample.speech.copy()),
                        sample.noise, ad.Tensor(sample.noise.copy()),
                        S, S, N, N)
    assert float(tt.data) == 0.0 and float(mt.data) == 0.0
    val = loss(sample.speech, ad.Tensor(sample.speech.copy()),
               sample.noise, ad.Tensor(sample.noise.copy()),
               S, S, N, N, LossConfig(alpha=3.0))
    assert float(val.data) == 0.0


def test_loss_single_sample_delta_isolates_time_term():
    model = tiny_model()
    sample = segment_sample(2, model)
    S = stft(sample.speech, model.codec)
    N = stft(sample.noise, model.codec)
    delta = 0.125
    bumped = sample.speech.copy()
    bumped[7, 1] += delta
    alpha = 4.0
    val = loss(sample.speech, ad.Tensor(bumped),
               sample.noise, ad.Tensor(sample.noise.copy()),
               S, S, N, N, LossConfig(alpha=alpha))
    want = alpha * delta / sample.speech.size
    assert float(val.data) == pytest.approx(want, rel=1e-12)


def test_loss_rejects_shape_mismatch():
    model = tiny_model()
    sample = segment_sample(3, model)
    S = stft(sample.speech, model.codec)
    with pytest.raises(ValueError, match="mismatch"):
        loss_parts(sample.speech, ad.Tensor(sample.speech[:-1].copy()),
                   sample.noise, ad.Tensor(sample.noise.copy()), S, S, S, S)


def test_forward_losses_requires_exact_segment():
    model = tiny_model()
    sample = training_sample(4)
    with pytest.raises(ValueError, match="segment"):
        forward_losses(model, sample.speech, sample.noise, sample.mixture)


def test_loss_nonnegative_on_random_model():
    model = tiny_model(seed=2)
    sample = segment_sample(5, model)
    with ad.no_grad():
        tt, mt = forward_losses(model, sample.speech, sample.noise,
                                sample.mixture)
    assert float(tt.data) > 0.0 and float(mt.data) > 0.0


@pytest.mark.slow
def test_loss_gradient_matches_finite_differences():
    # frames=12 is the smallest multiple of 2^L whose segment covers a window
    cfg = UNetConfig(channels=2, bins=16, frames=12, levels=2, base_filters=4,
                     ca_depth=3)
    codec = CodecConfig(window_len=32, hop=8)
    model = Model(cfg, codec, seed=7)
    for p in model.parameters():
        if p.name.endswith("weight"):
            p.data *= 3.0
    seg = segment_samples(model)
    s = training_sample(6, duration_s=(seg + 64) / 16000.0)
    sample = MixtureSample(speech=s.speech[:seg], noise=s.noise[:seg],
                           mixture=s.speech[:seg] + s.noise[:seg])
    lcfg = LossConfig(alpha=2.5)

    def f():
        tt, mt = forward_losses(model, sample.speech, sample.noise,
                                sample.mixture)
        return ad.add(ad.mul(tt, lcfg.alpha), mt)

    err = ad.grad_check(f, model.parameters())
    assert err < 1e-4


# ------------------------------------------------------------- calibration

def test_calibrate_alpha_matches_definition():
    model = tiny_model(seed=1)
    sample = segment_sample(7, model)
    alpha = calibrate_alpha([sample], model)
    with ad.no_grad():
        tt, mt = forward_losses(model, sample.speech, sample.noise,
                                sample.mixture)
    assert alpha == pytest.approx(2.0 * float(mt.data) / float(tt.data), rel=1e-12)
    assert alpha > 0


def test_calibrate_alpha_batch_duplication_invariant():
    model = tiny_model(seed=1)
    sample = segment_sample(8, model)
    assert calibrate_alpha([sample], model) == pytest.approx(
        calibrate_alpha([sample, sample, sample], model), rel=1e-12)


def test_calibrate_alpha_rejects_silent_batch():
    model = tiny_model(seed=1)
    seg = segment_samples(model)
    z = np.zeros((seg, 2))
    silent = MixtureSample(speech=z, noise=z.copy(), mixture=z.copy())
    with pytest.raises(ValueError, match="zero time-domain"):
        calibrate_alpha([silent], model)


# ---------------------------------------------------------------- augment

def test_augment_spec_validation():
    with pytest.raises(ValueError):
        AugmentSpec(gain_db_range=(0.0, -20.0))
    with pytest.raises(ValueError):
        AugmentSpec(gain_db_range=(-10.0, 5.0))


def test_augment_endpoints_and_additivity():
    sample = training_sample(9)
    spec0 = AugmentSpec(gain_db_range=(0.0, 0.0), segment=800)
    rng = np.random.default_rng(0)
    out = augment(sample, spec0, rng)
    assert out.samples == 800
    start = out.metadata["augment_start"]
    assert np.array_equal(out.noise, sample.noise[start:start + 800])
    assert np.array_equal(out.mixture, out.speech + out.noise)

    spec20 = AugmentSpec(gain_db_range=(-20.0, -20.0), segment=800)
    out = augment(sample, spec20, np.random.default_rng(0))
    start = out.metadata["augment_start"]
    ref = sample.noise[start:start + 800] * 0.1
    assert np.abs(out.noise - ref).max() < 1e-15


def test_augment_deterministic_and_aligned():
    sample = training_sample(10)
    spec = AugmentSpec(segment=640)
    a = augment(sample, spec, np.random.default_rng(5))
    b = augment(sample, spec, np.random.default_rng(5))
    assert np.array_equal(a.mixture, b.mixture)
    start = a.metadata["augment_start"]
    assert np.array_equal(a.speech, sample.speech[start:start + 640])


def test_augment_rejects_short_sample():
    sample = training_sample(11)
    with pytest.raises(ValueError, match="samples"):
        augment(sample, AugmentSpec(segment=sample.samples + 1),
                np.random.default_rng(0))


# ------------------------------------------------------------------- adam

def _params(values):
    return [ad.Parameter(f"p{i}", np.asarray(v, dtype=np.float64))
            for i, v in enumerate(values)]


def test_adam_zero_gradient_no_change():
    params = _params([np.ones(3)])
    state = AdamState.fresh(params)
    before = params[0].data.copy()
    adam_step(state, params, {"p0": np.zeros(3)})
    assert np.array_equal(params[0].data, before)
    assert state.step == 1


def test_adam_first_step_magnitude():
    params = _params([np.zeros(4)])
    state = AdamState.fresh(params, lr=1e-4)
    adam_step(state, params, {"p0": np.ones(4)})
    assert np.abs(-params[0].data - 1e-4).max() < 1e-8


def test_adam_quadratic_bowl_converges():
    rng = np.random.default_rng(12)
    params = _params([rng.uniform(-0.05, 0.05, size=4)])
    state = AdamState.fresh(params, lr=1e-4)
    for _ in range(2000):
        adam_step(state, params, {"p0": 2.0 * params[0].data})
    assert float(params[0].data @ params[0].data) < 1e-6


def test_adam_rejects_non_finite_gradient():
    params = _params([np.ones(2)])
    state = AdamState.fresh(params)
    bad = np.array([1.0, np.nan])
    with pytest.raises(TrainingDiverged, match="p0"):
        adam_step(state, params, {"p0": bad})


# ------------------------------------------------------------------ train

def test_train_smoke_and_logs(tmp_path):
    model = tiny_model(seed=4)
    samples = [training_sample(s) for s in (20, 21, 22)]
    cfg = TrainConfig(steps=3, batch_size=2, seed=1, log_every=1)
    history, state, final = train(model, samples, cfg, out_dir=tmp_path)
    assert len(history) == 3
    assert state.adam.step == 3
    assert all(math.isfinite(h["loss"]) for h in history)
    assert final.exists()
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,loss,time_term,mag_term,alpha,val_si_sdr,wall_time"
    assert len(lines) == 4


def test_train_rejects_empty_dataset(tmp_path):
    with pytest.raises(ValueError, match="empty"):
        train(tiny_model(), [], TrainConfig(steps=1), out_dir=tmp_path)


def test_train_deterministic_checkpoints(tmp_path):
    samples = [training_sample(s) for s in (30, 31)]
    cfg = TrainConfig(steps=2, batch_size=2, seed=9)
    _, _, f1 = train(tiny_model(seed=6), samples, cfg, out_dir=tmp_path / "a")
    _, _, f2 = train(tiny_model(seed=6), samples, cfg, out_dir=tmp_path / "b")
    assert f1.read_bytes() == f2.read_bytes()


def test_train_frozen_batch_loss_decreases(tmp_path):
    # One exact-segment sample and a zero-gain range make every batch
    # identical, so the loss curve is a pure optimization trace.
    model = tiny_model(seed=5)
    sample = segment_sample(40, model)
    cfg = TrainConfig(steps=50, batch_size=2, seed=0,
                      gain_db_range=(0.0, 0.0), log_every=50)
    history, _, _ = train(model, [sample], cfg, out_dir=tmp_path)
    losses = [h["loss"] for h in history]
    assert len(losses) == 50
    assert all(b < a for a, b in zip(losses, losses[1:])), \
        f"loss not strictly decreasing: {losses[:10]}..."


def test_train_validation_logging(tmp_path):
    model = tiny_model(seed=7)
    samples = [training_sample(s) for s in (50, 51)]
    cfg = TrainConfig(steps=2, batch_size=1, seed=2, val_every=2, log_every=1)
    history, _, _ = train(model, samples, cfg,
                          val_samples=[training_sample(52)], out_dir=tmp_path)
    assert history[-1]["val_si_sdr"] is not None
    assert math.isfinite(history[-1]["val_si_sdr"])
    content = (tmp_path / "metrics.csv").read_text()
    last = content.strip().splitlines()[-1].split(",")
    assert last[5] != ""

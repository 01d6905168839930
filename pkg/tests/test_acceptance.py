"""Acceptance gate: one test and one printed verdict line per criterion.

Run `pytest tests/test_acceptance.py -v -s` to see the verdict lines inline.
Long training-based criteria carry the `slow` marker but are part of the gate.
"""

import re
import time
from dataclasses import replace

import numpy as np
import pytest

from cadunet import attention as att
from cadunet import autodiff as ad
from cadunet import complexops as cx
from cadunet.checkpoint import load_checkpoint, save_checkpoint
from cadunet.cli import run as cli_run
from cadunet.config import paper_defaults, tiny_preset
from cadunet.datasynth import (ArrayGeometry, ManifestDataset, MixtureSample,
                               gen_noise, gen_source, mix_at_snr, propagate,
                               synth_corpus, synth_sample)
from cadunet.evaluation import (attention_snr_experiment, posterior_snr_select,
                                si_sdr)
from cadunet.network import Model, enhance, segment_samples
from cadunet.oracles import run_oracle_suite
from cadunet.stft import CodecConfig, dft_oracle, hann_window, istft, stft
from cadunet.training import TrainConfig, train

TINY = tiny_preset()


def _verdict(num, ok, desc):
    line = f"[criterion {num:2d}] {'PASS' if ok else 'FAIL'}  {desc}"
    print(line)
    assert ok, line


def _segment_sample(model, seed, snr_db):
    seg = segment_samples(model)
    base = synth_sample(seed, duration_s=(seg + 160) / 16000.0,
                        channels=model.cfg.channels, snr_db=snr_db)
    return MixtureSample(speech=base.speech[:seg], noise=base.noise[:seg],
                         mixture=base.speech[:seg] + base.noise[:seg])


def _improvement(model, sample):
    s_hat, n_hat = enhance(model, sample.mixture)
    ch, est = posterior_snr_select(s_hat, n_hat)
    out = si_sdr(est, sample.speech[:, ch])
    inp = si_sdr(sample.mixture[:, ch], sample.speech[:, ch])
    return out - inp


def test_criterion_01_full_scale_reproduction_not_claimed():
    """Full-scale corpus results are out of scope; README must say so."""
    from pathlib import Path
    readme = Path(__file__).resolve().parents[1] / "README.md"
    text = readme.read_text()
    documented = ("not comparable" in text and "synthetic" in text
                  and "SI-SDR" in text)
    # the full-scale recipe must still construct (schedule, shapes), it is
    # only training it on real data that is out of scope
    cfg = paper_defaults()
    downs = cfg.network.down_dense_targets()
    ok = documented and [2 * t for t in downs] == [128, 256, 256, 256]
    _verdict(1, ok, "full-scale reproduction disclaimed in README; "
                    "full-scale schedule still constructs")


def test_criterion_02_gradcheck_tiny_preset(capsys):
    t0 = time.monotonic()
    rc = cli_run(["gradcheck", "--preset", "tiny"])
    wall = time.monotonic() - t0
    out = capsys.readouterr().out
    m = re.search(r"max relative error ([0-9.e+-]+)", out)
    err = float(m.group(1)) if m else float("inf")
    ok = rc == 0 and err < 1e-4 and wall < 600.0
    _verdict(2, ok, f"network+loss gradients: max rel err {err:.3e} "
                    f"(< 1e-4) in {wall:.0f}s (< 600s)")


def test_criterion_03_stft_fidelity():
    codec = CodecConfig()          # full-scale analysis window
    rng = np.random.default_rng(30)
    worst_rt = 0.0
    for _ in range(50):
        x = rng.normal(size=(19200, 6))
        spec = stft(x, codec)
        assert spec.stacked.shape == (512, 80, 12)
        back = istft(spec)
        worst_rt = max(worst_rt, float(np.linalg.norm(back - x) / np.linalg.norm(x)))
    # frame-level agreement with the literal DFT on a sampled frame
    x = rng.normal(size=(4096,))
    frame = x[1024:2048] * hann_window(1024)
    naive = dft_oracle(frame)
    fast = np.fft.rfft(frame)
    worst_dft = float(np.max(np.abs(naive - fast)))
    ok = worst_rt < 1e-10 and worst_dft < 1e-9
    _verdict(3, ok, f"round trip {worst_rt:.2e} (< 1e-10) over 50 signals; "
                    f"naive-DFT frame agreement {worst_dft:.2e} (< 1e-9); "
                    f"shape 512x80x12")


def test_criterion_04_mask_additivity_100_draws():
    rng = np.random.default_rng(40)
    worst = 0.0
    seg = None
    for draw in range(100):
        model = Model(TINY.network, TINY.codec, seed=int(rng.integers(2 ** 31)))
        for p in model.parameters():
            p.data *= float(rng.uniform(0.2, 4.0))   # arbitrary scales
        seg = seg or segment_samples(model)
        n = seg if draw % 3 else seg + int(rng.integers(1, 400))
        y = rng.normal(size=(n, 2))
        s_hat, n_hat = enhance(model, y)
        worst = max(worst, float(np.linalg.norm(s_hat + n_hat - y)
                                 / np.linalg.norm(y)))
    ok = worst < 1e-9
    _verdict(4, ok, f"speech + noise rebuilds the mixture: worst rel L2 "
                    f"{worst:.2e} (< 1e-9) over 100 parameter draws")


def test_criterion_05_attention_invariants_1000_inputs():
    rng = np.random.default_rng(50)
    worst_sum = 0.0
    worst_phase = 0.0
    signs_ok = True
    for _ in range(1000):
        C, F, T, d = (int(rng.integers(2, 5)), int(rng.integers(2, 6)),
                      int(rng.integers(2, 6)), int(rng.integers(2, 5)))
        params = att.init_ca_params("ca", T, d, rng)
        x = ad.Tensor(rng.normal(size=(F, T, 2 * C)))
        with ad.no_grad():
            _, w = att.ca_forward(x, params, "complex", want_weights=True)
            sim = att.ca_similarity(*att.ca_project(x, params, "complex")[:2])
        W = w.to_complex()
        P = sim.to_complex()
        worst_sum = max(worst_sum, float(np.max(np.abs(np.abs(W).sum(axis=1) - 1.0))))
        nz = np.abs(P) > 0
        signs_ok = signs_ok and np.array_equal(np.sign(W.real)[nz], np.sign(P.real)[nz])
        dphase = np.angle(W)[nz] - np.angle(P)[nz]
        dphase = (dphase + np.pi) % (2 * np.pi) - np.pi
        worst_phase = max(worst_phase, float(np.max(np.abs(dphase))) if nz.any() else 0.0)
    # zero similarity -> uniform magnitudes
    params = att.init_ca_params("ca", 4, 3, rng)
    params.key_w.data[...] = 0.0
    with ad.no_grad():
        _, w0 = att.ca_forward(ad.Tensor(rng.normal(size=(3, 4, 6))), params,
                               "complex", want_weights=True)
    uniform = float(np.max(np.abs(w0.to_complex() - 1.0 / 3)))
    ok = (worst_sum < 1e-9 and signs_ok and worst_phase < 1e-12
          and uniform < 1e-12)
    _verdict(5, ok, f"1000 inputs: column sums off by {worst_sum:.2e} (< 1e-9), "
                    f"phases preserved to {worst_phase:.2e}, zero input uniform "
                    f"to {uniform:.2e}")


def test_criterion_06_oracle_suite():
    t0 = time.monotonic()
    results = run_oracle_suite("all")
    wall = time.monotonic() - t0
    failed = [r.name for r in results if not r.passed]
    ok = not failed and wall < 60.0
    _verdict(6, ok, f"{len(results)} oracle checks in {wall:.0f}s (< 60s)"
                    + (f"; FAILED {failed}" if failed else ""))


@pytest.mark.slow
def test_criterion_07_single_utterance_overfit():
    t0 = time.monotonic()
    model = Model(TINY.network, TINY.codec, seed=0)
    sample = _segment_sample(model, seed=3, snr_db=-10.0)
    # one-segment utterance: every batch item is identical, so batch 1
    # follows the recipe's batch-8 trajectory at an eighth of the cost
    state = None
    reached = None
    for target in range(200, 2001, 200):
        tc = TrainConfig(steps=target, batch_size=1, lr=1e-4, seed=0,
                         gain_db_range=(0.0, 0.0), log_every=10 ** 9)
        _, state, _ = train(model, [sample], tc, state=state)
        if _improvement(model, sample) >= 10.0:
            reached = target
            break

    # frozen batch: loss strictly decreases over the first 50 steps
    model2 = Model(TINY.network, TINY.codec, seed=1)
    sample2 = _segment_sample(model2, seed=8, snr_db=0.0)
    tc = TrainConfig(steps=50, batch_size=1, lr=1e-4, seed=0,
                     gain_db_range=(0.0, 0.0), log_every=10 ** 9)
    history, _, _ = train(model2, [sample2], tc)
    losses = [h["loss"] for h in history]
    decreasing = all(b < a for a, b in zip(losses, losses[1:]))
    wall = time.monotonic() - t0
    ok = reached is not None and decreasing and wall < 1800.0
    _verdict(7, ok, f"+10 dB SI-SDR at step {reached} (<= 2000); 50-step "
                    f"frozen-batch loss strictly decreasing: {decreasing}; "
                    f"wall {wall:.0f}s (< 1800s)")


@pytest.mark.slow
def test_criterion_08_small_corpus_improvement(tmp_path):
    corpus = tmp_path / "corpus"
    synth_corpus(corpus, counts=TINY.data.counts,
                 duration_s=TINY.data.duration_s, channels=TINY.data.channels,
                 seed=TINY.seed, snr_range=TINY.data.snr_range_db)
    train_set = ManifestDataset(corpus / "manifest.jsonl", "train")
    dev_set = ManifestDataset(corpus / "manifest.jsonl", "dev")
    model = Model(TINY.network, TINY.codec, seed=TINY.seed)

    def mean_improvement(indices):
        return float(np.mean([_improvement(model, dev_set[i]) for i in indices]))

    # The preset's train section is the recipe under test (dev-matched
    # augmentation-off training at lr 3e-4); only the step target moves so
    # the dev gate can run between chunks.
    state = None
    full = None
    step = 0
    for target in range(1000, 20001, 1000):
        tc = replace(TINY.train, steps=target, log_every=10 ** 9)
        _, state, _ = train(model, train_set, tc, state=state)
        step = target
        subset = mean_improvement(range(10))
        if subset >= 5.0:        # cheap gate before the full 40-utterance pass
            full = mean_improvement(range(len(dev_set)))
            if full >= 5.0:
                break
    if full is None:
        full = mean_improvement(range(len(dev_set)))
    ok = full >= 5.0 and step <= 20000
    _verdict(8, ok, f"mean dev SI-SDR improvement {full:+.2f} dB (>= +5) "
                    f"after {step} steps (<= 20000) on the default corpus")


def _toy_sample(seed, hot=1, advantage_db=10.0, duration_s=0.25, channels=2):
    rng = np.random.default_rng(seed)
    src = gen_source(duration_s, seed=int(rng.integers(2 ** 31)))
    geo = ArrayGeometry(delays=tuple(float(d) for d in
                                     np.linspace(0.0, 2.5, channels)),
                        gains=(1.0,) * channels)
    speech = propagate(src, geo)
    noise = gen_noise(duration_s, channels, "diffuse",
                      seed=int(rng.integers(2 ** 31)))[:speech.shape[0]].copy()
    noise[:, hot] *= 10.0 ** (-advantage_db / 20.0)
    return mix_at_snr(speech, noise, 0.0, ref_channel=0)


@pytest.mark.slow
def test_criterion_09_attention_tracks_the_high_snr_channel():
    hot = 1
    # magnitude variant: attention indices then map one-to-one onto mics
    cfg = replace(TINY.network, variant="real")
    model = Model(cfg, TINY.codec, seed=0)
    train_set = [_toy_sample(100 + i, hot=hot) for i in range(16)]
    probe = _toy_sample(999, hot=hot)
    before = attention_snr_experiment(model, probe)
    tc = TrainConfig(steps=1000, batch_size=8, lr=1e-4, seed=0,
                     log_every=10 ** 9)
    train(model, train_set, tc)
    after = attention_snr_experiment(model, probe)
    share = float(after["per_channel_mean"][hot])
    ok = after["argmax_channel"] == hot
    _verdict(9, ok, f"trained input attention argmax = channel {hot} "
                    f"(+10 dB SNR advantage); its mean share "
                    f"{float(before['per_channel_mean'][hot]):.3f} -> {share:.3f}")


@pytest.mark.slow
def test_criterion_10_determinism_and_resume(tmp_path):
    corpus = tmp_path / "c10"
    synth_corpus(corpus, counts={"train": 3, "dev": 0, "test": 0},
                 duration_s=0.3, channels=2, seed=9)
    data = ManifestDataset(corpus / "manifest.jsonl", "train")

    def fresh_run(steps, out):
        model = Model(TINY.network, TINY.codec, seed=0)
        tc = TrainConfig(steps=steps, batch_size=4, lr=1e-4, seed=0,
                         log_every=10 ** 9)
        _, state, final = train(model, data, tc, out_dir=out)
        return model, state, final

    _, _, final_a = fresh_run(10, tmp_path / "a")
    _, _, final_b = fresh_run(10, tmp_path / "b")
    identical = final_a.read_bytes() == final_b.read_bytes()

    # interrupted at 5, reloaded, resumed to 10
    model_c, state_c, _ = fresh_run(5, tmp_path / "c")
    mid = tmp_path / "mid.ckpt"
    save_checkpoint(model_c, state_c, mid)
    model_d, state_d = load_checkpoint(mid)
    tc = TrainConfig(steps=10, batch_size=4, lr=1e-4, seed=0, log_every=10 ** 9)
    _, state_d, final_d = train(model_d, data, tc, state=state_d,
                                out_dir=tmp_path / "d")
    resumed = final_a.read_bytes() == final_d.read_bytes()
    ok = identical and resumed
    _verdict(10, ok, f"fixed seed gives byte-identical checkpoints: {identical}; "
                     f"save/load/resume matches the uninterrupted run: {resumed}")

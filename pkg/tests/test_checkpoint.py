import numpy as np
import pytest

from cadunet.checkpoint import (MAGIC, CheckpointError, load_checkpoint,
                                save_checkpoint)
from cadunet.datasynth import synth_sample
from cadunet.network import Model, UNetConfig
from cadunet.stft import CodecConfig
from cadunet.training import TrainConfig, train

TINY = UNetConfig(channels=2, bins=64, frames=16, levels=2, base_filters=8,
                  ca_depth=4)
TINY_CODEC = CodecConfig(window_len=128, hop=32)


def tiny_model(seed=0):
    return Model(TINY, TINY_CODEC, seed=seed)


def trained(tmp_path, steps=2, seed=3, model_seed=8):
    model = tiny_model(seed=model_seed)
    samples = [synth_sample(s, duration_s=0.1, channels=2) for s in (60, 61)]
    cfg = TrainConfig(steps=steps, batch_size=2, seed=seed)
    history, state, final = train(model, samples, cfg, out_dir=tmp_path)
    return model, state, final, samples


def test_model_only_round_trip_bitwise(tmp_path):
    model = tiny_model(seed=1)
    p = tmp_path / "m.ckpt"
    save_checkpoint(model, None, p)
    loaded, state = load_checkpoint(p)
    assert state is None
    assert loaded.cfg == model.cfg and loaded.codec == model.codec
    for a, b in zip(model.parameters(), loaded.parameters()):
        assert a.name == b.name
        assert a.data.dtype == b.data.dtype == np.float64
        assert np.array_equal(a.data, b.data)


def test_full_state_round_trip_bitwise(tmp_path):
    model, state, final, _ = trained(tmp_path)
    loaded_model, loaded_state = load_checkpoint(final)
    for a, b in zip(model.parameters(), loaded_model.parameters()):
        assert np.array_equal(a.data, b.data)
    assert loaded_state.adam.step == state.adam.step
    assert loaded_state.alpha == state.alpha
    assert loaded_state.adam.lr == state.adam.lr
    for name in state.adam.m:
        assert np.array_equal(state.adam.m[name], loaded_state.adam.m[name])
        assert np.array_equal(state.adam.v[name], loaded_state.adam.v[name])
    assert loaded_state.rng.bit_generator.state == state.rng.bit_generator.state


def test_save_load_save_identical_bytes(tmp_path):
    _, _, final, _ = trained(tmp_path)
    model, state = load_checkpoint(final)
    again = tmp_path / "again.ckpt"
    save_checkpoint(model, state, again)
    assert final.read_bytes() == again.read_bytes()


def test_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOTCKPT\x00" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)


def test_rejects_version_mismatch(tmp_path):
    model = tiny_model()
    p = tmp_path / "m.ckpt"
    save_checkpoint(model, None, p)
    raw = bytearray(p.read_bytes())
    raw[len(MAGIC)] = 99
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(p)


def test_rejects_truncation_and_trailing(tmp_path):
    model = tiny_model()
    p = tmp_path / "m.ckpt"
    save_checkpoint(model, None, p)
    raw = p.read_bytes()
    p.write_bytes(raw[:len(raw) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(p)
    p.write_bytes(raw + b"xx")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(p)


def test_resume_matches_uninterrupted(tmp_path):
    samples = [synth_sample(s, duration_s=0.1, channels=2) for s in (70, 71)]

    straight = tiny_model(seed=11)
    cfg10 = TrainConfig(steps=10, batch_size=2, seed=5)
    train(straight, samples, cfg10, out_dir=tmp_path / "straight")

    part = tiny_model(seed=11)
    cfg5 = TrainConfig(steps=5, batch_size=2, seed=5)
    _, _, mid = train(part, samples, cfg5, out_dir=tmp_path / "part")
    resumed, state = load_checkpoint(mid)
    train(resumed, samples, cfg10, state=state, out_dir=tmp_path / "resumed")

    for a, b in zip(straight.parameters(), resumed.parameters()):
        assert np.array_equal(a.data, b.data), f"{a.name} diverged after resume"
    final_a = (tmp_path / "straight" / "checkpoint_final.ckpt").read_bytes()
    final_b = (tmp_path / "resumed" / "checkpoint_final.ckpt").read_bytes()
    assert final_a == final_b

from __future__ import annotations

import numpy as np
import pytest

from spoofqa.audio import MelSpectrogram
from spoofqa.model import (
    AlignmentError,
    AudioTokens,
    CheckpointError,
    ConfigError,
    ModelConfig,
    MultimodalModel,
    NumericError,
    encode_audio,
    forward,
    init_model,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)
from spoofqa.promptkit import assemble_sequence


def _mel(n_frames=98, n_mels=40, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return MelSpectrogram(
        frames=rng.normal(-5.0, 2.0, (n_frames, n_mels)) * scale,
        frame_hop_s=0.01,
        n_mels=n_mels,
    )


TINY = ModelConfig(d_model=16, n_enc_layers=1, n_dec_layers=1, n_heads=2, d_ff=32, adapter_stride=4, max_seq=256)


def test_init_deterministic():
    m1 = init_model(TINY, seed=5)
    m2 = init_model(TINY, seed=5)
    assert set(m1.params) == set(m2.params)
    for name in m1.params:
        assert np.array_equal(m1.params[name].data, m2.params[name].data), name
    m3 = init_model(TINY, seed=6)
    assert not np.array_equal(m3.params["head.w"].data, m1.params["head.w"].data)


def test_init_biases_zero():
    m = init_model(TINY, seed=0)
    for name, tensor in m.params.items():
        if name.endswith((".b", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")):
            assert np.all(tensor.data == 0.0), name


def test_parameter_count_matches_shape_enumeration():
    for cfg in (TINY, ModelConfig()):
        m = init_model(cfg, seed=1)
        enumerated = sum(int(np.prod(t.data.shape)) for t in m.params.values())
        assert enumerated == parameter_count(cfg)
        assert enumerated == m.n_parameters()


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(adapter_stride=0)
    with pytest.raises(ConfigError):
        ModelConfig(vocab=100)


def test_encode_audio_token_count():
    m = init_model(TINY, seed=0)
    tokens = encode_audio(m, _mel(98))
    assert tokens.n_tokens == 25  # ceil(98 / 4)
    assert tokens.vectors.shape == (25, TINY.d_model)
    assert encode_audio(m, _mel(96)).n_tokens == 24


def test_encode_audio_stability_sweep():
    for seed in range(5):
        m = init_model(TINY, seed=seed)
        out = encode_audio(m, _mel(seed=seed, scale=1.0 + seed))
        assert np.all(np.isfinite(out.vectors))
        assert np.linalg.norm(out.vectors) < 1e3


def test_encode_audio_positional_sensitivity():
    m = init_model(TINY, seed=0)
    mel = _mel(32)
    permuted = MelSpectrogram(frames=mel.frames[::-1].copy(), frame_hop_s=mel.frame_hop_s, n_mels=mel.n_mels)
    a = encode_audio(m, mel)
    b = encode_audio(m, permuted)
    assert not np.allclose(a.vectors, b.vectors)


def test_encode_audio_rejects_nonfinite():
    m = init_model(TINY, seed=0)
    frames = np.zeros((8, 40))
    frames[3, 3] = np.nan
    with pytest.raises(NumericError):
        encode_audio(m, MelSpectrogram(frames=frames, frame_hop_s=0.01, n_mels=40))


def test_forward_shapes_and_softmax_rows():
    m = init_model(TINY, seed=0)
    audio = encode_audio(m, _mel(16))
    seq = assemble_sequence(audio.n_tokens, "hi there", "spoof")
    logits = forward(m, audio, seq)
    assert logits.shape == (len(seq), 260)
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    assert np.max(np.abs(probs.sum(axis=1) - 1.0)) < 1e-6


def test_forward_causality_exact():
    m = init_model(TINY, seed=1)
    audio = encode_audio(m, _mel(16))
    seq = assemble_sequence(audio.n_tokens, "abcdefgh", "spoof")
    base = forward(m, audio, seq)
    j = len(seq) - 4
    mutated_tokens = seq.tokens.copy()
    mutated_tokens[j] = 99
    mutated = type(seq)(tokens=mutated_tokens, segment_tags=seq.segment_tags.copy())
    changed = forward(m, audio, mutated)
    assert np.array_equal(base[:j], changed[:j])
    assert not np.allclose(base[j:], changed[j:])


def test_forward_deterministic():
    m = init_model(TINY, seed=2)
    audio = encode_audio(m, _mel(12))
    seq = assemble_sequence(audio.n_tokens, "xyz")
    assert np.array_equal(forward(m, audio, seq), forward(m, audio, seq))


def test_forward_placeholder_mismatch():
    m = init_model(TINY, seed=0)
    audio = encode_audio(m, _mel(16))
    seq = assemble_sequence(audio.n_tokens + 1, "x")
    with pytest.raises(AlignmentError):
        forward(m, audio, seq)


def test_forward_audio_is_consumed():
    m = init_model(TINY, seed=3)
    audio = encode_audio(m, _mel(16, seed=4))
    seq = assemble_sequence(audio.n_tokens, "q")
    zeroed = AudioTokens(vectors=np.zeros_like(audio.vectors))
    assert not np.allclose(forward(m, audio, seq), forward(m, zeroed, seq))


def test_finite_propagation_random_configs():
    rng = np.random.default_rng(0)
    for trial in range(100):
        cfg = ModelConfig(
            d_model=int(rng.choice([8, 16, 24])),
            n_enc_layers=int(rng.integers(1, 3)),
            n_dec_layers=int(rng.integers(1, 3)),
            n_heads=int(rng.choice([2, 4])),
            d_ff=int(rng.choice([16, 32])),
            adapter_stride=int(rng.integers(1, 5)),
            max_seq=128,
        )
        m = init_model(cfg, seed=trial)
        mel = MelSpectrogram(
            frames=rng.normal(-3, 4, (int(rng.integers(5, 20)), cfg.n_mels)),
            frame_hop_s=0.01,
            n_mels=cfg.n_mels,
        )
        audio = encode_audio(m, mel)
        seq = assemble_sequence(audio.n_tokens, "ok", "spoof")
        logits = forward(m, audio, seq)
        assert np.all(np.isfinite(logits)), trial


def test_checkpoint_round_trip_bit_identical(tmp_path):
    m = init_model(TINY, seed=7)
    audio = encode_audio(m, _mel(16))
    seq = assemble_sequence(audio.n_tokens, "test", "spoof")
    before = forward(m, audio, seq)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    loaded = load_checkpoint(path)
    assert loaded.cfg == m.cfg
    after = forward(loaded, encode_audio(loaded, _mel(16)), seq)
    assert np.array_equal(before, after)


def test_checkpoint_truncated_raises(tmp_path):
    m = init_model(TINY, seed=7)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    data = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "trunc.ckpt")


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"XXXX" + b"\x00" * 64)
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_audio_tokens_reject_nonfinite():
    with pytest.raises(NumericError):
        AudioTokens(vectors=np.array([[np.inf, 0.0]]))

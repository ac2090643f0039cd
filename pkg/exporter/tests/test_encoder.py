"""Frozen encoder loading, tokenization, and inference properties."""

import json
import os

import numpy as np
import pytest

from encoder_exporter.encoder import (
    CLS_ID,
    SEP_ID,
    UNK_ID,
    BadMaxLenError,
    BadPoolingError,
    EncoderUnavailableError,
    build_demo_encoder,
    load_encoder,
)

VOCAB = ["acha", "bahut", "chup", "dost", "hai", "kar", "namaste", "tu", "yaar"]


@pytest.fixture(scope="module")
def encoder(tmp_path_factory):
    path = tmp_path_factory.mktemp("enc") / "demo"
    build_demo_encoder(str(path), VOCAB, hidden_size=32, num_layers=2, seed=7)
    return load_encoder(str(path))


def test_build_and_load_round_trip(encoder):
    assert encoder.hidden_size == 32
    assert encoder.config.num_layers == 2
    assert len(encoder.config.vocab) == len(VOCAB)


def test_tokenize_frames_and_maps(encoder):
    ids = encoder.tokenize("namaste dost", max_len=16)
    assert ids[0] == CLS_ID and ids[-1] == SEP_ID
    assert len(ids) == 4
    assert UNK_ID not in ids


def test_tokenize_unknown_words(encoder):
    ids = encoder.tokenize("zzz namaste qqq", max_len=16)
    assert ids[1] == UNK_ID and ids[3] == UNK_ID
    assert ids[2] != UNK_ID


def test_tokenize_truncates_to_max_len(encoder):
    ids = encoder.tokenize("yaar tu bahut acha hai namaste dost chup kar", max_len=5)
    assert len(ids) == 5
    assert ids[0] == CLS_ID and ids[-1] == SEP_ID


def test_tokenize_lowercases(encoder):
    assert encoder.tokenize("NAMASTE", 8) == encoder.tokenize("namaste", 8)


def test_tokenize_bad_max_len(encoder):
    with pytest.raises(BadMaxLenError):
        encoder.tokenize("namaste", max_len=1)


def test_encode_shape_and_finite(encoder):
    out = encoder.encode(["namaste dost", "chup kar"], 16, "mean")
    assert out.shape == (2, 32)
    assert out.dtype == np.float64
    assert np.all(np.isfinite(out))


def test_encode_deterministic(encoder):
    texts = ["yaar tu bahut acha hai", "chup kar"]
    a = encoder.encode(texts, 16, "pooled")
    b = encoder.encode(texts, 16, "pooled")
    assert np.array_equal(a, b)


def test_encode_batch_size_invariance(encoder):
    # mixed lengths force different padding per grouping
    texts = ["namaste", "yaar tu bahut acha hai namaste dost", "chup kar",
             "dost", "tu hai", "bahut acha bahut acha bahut acha"]
    base = encoder.encode(texts, 32, "mean", batch_size=1)
    for bs in (2, 3, 6):
        other = encoder.encode(texts, 32, "mean", batch_size=bs)
        assert float(np.max(np.abs(base - other))) <= 1e-6
    basep = encoder.encode(texts, 32, "pooled", batch_size=1)
    for bs in (2, 3, 6):
        other = encoder.encode(texts, 32, "pooled", batch_size=bs)
        assert float(np.max(np.abs(basep - other))) <= 1e-6


def test_encode_padding_does_not_leak(encoder):
    short = "chup kar"
    alone = encoder.encode([short], 32, "mean")
    padded = encoder.encode([short, "yaar tu bahut acha hai namaste dost"], 32, "mean")
    assert float(np.max(np.abs(alone[0] - padded[0]))) <= 1e-6


def test_encode_pooling_modes_differ(encoder):
    texts = ["namaste dost"]
    mean = encoder.encode(texts, 16, "mean")
    pooled = encoder.encode(texts, 16, "pooled")
    assert not np.allclose(mean, pooled)


def test_encode_rejects_bad_pooling(encoder):
    with pytest.raises(BadPoolingError):
        encoder.encode(["namaste"], 16, "cls")


def test_encode_rejects_max_len_over_positions(tmp_path):
    build_demo_encoder(str(tmp_path / "tiny"), VOCAB, hidden_size=16,
                       num_heads=2, max_position=8, seed=1)
    enc = load_encoder(str(tmp_path / "tiny"))
    with pytest.raises(BadMaxLenError):
        enc.encode(["namaste"], 9, "mean")
    out = enc.encode(["namaste"], 8, "mean")
    assert out.shape == (1, 16)


def test_encode_rejects_bad_batch_size(encoder):
    with pytest.raises(ValueError):
        encoder.encode(["namaste"], 16, "mean", batch_size=0)


def test_encode_empty_inputs(encoder):
    out = encoder.encode([], 16, "mean")
    assert out.shape == (0, 32)
    row = encoder.encode([""], 16, "mean")
    assert row.shape == (1, 32)
    assert np.all(np.isfinite(row))


def test_load_missing_directory():
    with pytest.raises(EncoderUnavailableError):
        load_encoder("/nonexistent/encoder/path")


def test_load_unknown_cached_name(tmp_path):
    with pytest.raises(EncoderUnavailableError):
        load_encoder("no-such-model", cache_dir=str(tmp_path))


def test_load_resolves_cached_name(tmp_path, monkeypatch):
    build_demo_encoder(str(tmp_path / "demo-base"), VOCAB, hidden_size=16,
                       num_heads=2, seed=3)
    monkeypatch.setenv("ENCODER_EXPORTER_CACHE", str(tmp_path))
    enc = load_encoder("demo-base")
    assert enc.hidden_size == 16
    # explicit cache_dir wins over the environment
    enc2 = load_encoder("demo-base", cache_dir=str(tmp_path))
    assert enc2.hidden_size == 16


def test_load_rejects_corrupt_config(tmp_path):
    path = tmp_path / "enc"
    build_demo_encoder(str(path), VOCAB, hidden_size=16, num_heads=2, seed=4)
    config_path = path / "config.json"

    config_path.write_text("{not json", encoding="utf-8")
    with pytest.raises(EncoderUnavailableError):
        load_encoder(str(path))

    for poison in (
        {"hidden_size": "16"},
        {"hidden_size": 0},
        {"num_heads": 5},  # 16 % 5 != 0
        {"vocab": "abc"},
        {"vocab": [1, 2]},
    ):
        build_demo_encoder(str(path), VOCAB, hidden_size=16, num_heads=2, seed=4)
        raw = json.loads(config_path.read_text(encoding="utf-8"))
        raw.update(poison)
        config_path.write_text(json.dumps(raw), encoding="utf-8")
        with pytest.raises(EncoderUnavailableError):
            load_encoder(str(path))


def test_load_rejects_missing_or_short_weights(tmp_path):
    path = tmp_path / "enc"
    build_demo_encoder(str(path), VOCAB, hidden_size=16, num_heads=2, seed=5)

    weights_path = path / "weights.npz"
    with np.load(weights_path) as archive:
        weights = {k: archive[k] for k in archive.files}
    dropped = dict(weights)
    del dropped["pooler_w"]
    np.savez(weights_path, **dropped)
    with pytest.raises(EncoderUnavailableError):
        load_encoder(str(path))

    bad = dict(weights)
    bad["tok_emb"] = bad["tok_emb"][:3]
    np.savez(weights_path, **bad)
    with pytest.raises(EncoderUnavailableError):
        load_encoder(str(path))

    os.remove(weights_path)
    with pytest.raises(EncoderUnavailableError):
        load_encoder(str(path))


def test_demo_encoder_seed_controls_weights(tmp_path):
    a = load_encoder(build_demo_encoder(str(tmp_path / "a"), VOCAB, hidden_size=16,
                                        num_heads=2, seed=1))
    b = load_encoder(build_demo_encoder(str(tmp_path / "b"), VOCAB, hidden_size=16,
                                        num_heads=2, seed=1))
    c = load_encoder(build_demo_encoder(str(tmp_path / "c"), VOCAB, hidden_size=16,
                                        num_heads=2, seed=2))
    text = ["namaste dost"]
    assert np.array_equal(a.encode(text, 8, "mean"), b.encode(text, 8, "mean"))
    assert not np.allclose(a.encode(text, 8, "mean"), c.encode(text, 8, "mean"))

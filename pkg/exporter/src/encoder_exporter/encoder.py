"""Frozen transformer encoders loaded from local directories.

An encoder lives in a directory holding ``config.json`` and
``weights.npz``. Names that are not paths resolve through a cache
directory (``ENCODER_EXPORTER_CACHE`` or ``~/.cache/encoder-exporter``),
so a published model name works once a frozen copy has been placed
there. Inference runs in float64 on numpy; there is no training path.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass

import numpy as np

POOLING_MODES = ("mean", "pooled")
CACHE_ENV = "ENCODER_EXPORTER_CACHE"

# reserved token ids; vocabulary entries start after these
PAD_ID, UNK_ID, CLS_ID, SEP_ID = 0, 1, 2, 3
_RESERVED = 4

_WORD_RE = re.compile(r"[^\W_]+", re.UNICODE)


class EncoderError(Exception):
    pass


class EncoderUnavailableError(EncoderError):
    pass


class BadPoolingError(EncoderError):
    pass


class BadMaxLenError(EncoderError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    hidden_size: int
    num_layers: int
    num_heads: int
    intermediate_size: int
    max_position: int
    layer_norm_eps: float
    vocab: tuple[str, ...]


def _layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def _softmax(scores: np.ndarray) -> np.ndarray:
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    return e / e.sum(axis=-1, keepdims=True)


class FrozenEncoder:
    """A fixed-weight transformer: tokenize, run layers, pool."""

    def __init__(self, config: EncoderConfig, weights: dict[str, np.ndarray]):
        self.config = config
        self.weights = {k: np.asarray(v, dtype=np.float64) for k, v in weights.items()}
        self._token_ids = {
            term: i + _RESERVED for i, term in enumerate(config.vocab)
        }

    @property
    def hidden_size(self) -> int:
        return self.config.hidden_size

    def tokenize(self, text: str, max_len: int) -> list[int]:
        """Word-level ids framed by CLS/SEP, truncated to max_len total."""
        if max_len < 2:
            raise BadMaxLenError(f"max_len must be at least 2, got {max_len}")
        words = _WORD_RE.findall(text.lower())
        ids = [self._token_ids.get(w, UNK_ID) for w in words]
        return [CLS_ID] + ids[: max_len - 2] + [SEP_ID]

    def encode(
        self,
        texts: list[str],
        max_len: int,
        pooling: str,
        batch_size: int = 32,
    ) -> np.ndarray:
        """One float64 row per text; rows do not depend on batching."""
        if pooling not in POOLING_MODES:
            raise BadPoolingError(f"pooling must be one of {POOLING_MODES}, got {pooling!r}")
        if max_len > self.config.max_position:
            raise BadMaxLenError(
                f"max_len {max_len} exceeds encoder max position {self.config.max_position}")
        if batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {batch_size}")
        rows = []
        for start in range(0, len(texts), batch_size):
            chunk = texts[start:start + batch_size]
            rows.append(self._encode_batch(chunk, max_len, pooling))
        if not rows:
            return np.zeros((0, self.hidden_size))
        return np.vstack(rows)

    def _encode_batch(self, texts: list[str], max_len: int, pooling: str) -> np.ndarray:
        w = self.weights
        cfg = self.config
        token_lists = [self.tokenize(t, max_len) for t in texts]
        n = len(token_lists)
        width = max(len(ids) for ids in token_lists)
        ids = np.full((n, width), PAD_ID, dtype=np.int64)
        mask = np.zeros((n, width))
        for i, toks in enumerate(token_lists):
            ids[i, : len(toks)] = toks
            mask[i, : len(toks)] = 1.0

        x = w["tok_emb"][ids] + w["pos_emb"][:width]
        x = _layer_norm(x, w["emb_gamma"], w["emb_beta"], cfg.layer_norm_eps)
        # padded keys get -1e30 scores, which softmax to exactly zero, so
        # padding width never leaks into real positions
        neg = (1.0 - mask)[:, None, None, :] * -1e30
        heads, dk = cfg.num_heads, cfg.hidden_size // cfg.num_heads

        def split(m: np.ndarray) -> np.ndarray:
            return m.reshape(n, width, heads, dk).transpose(0, 2, 1, 3)

        for i in range(cfg.num_layers):
            q = split(x @ w[f"l{i}_wq"] + w[f"l{i}_bq"])
            k = split(x @ w[f"l{i}_wk"] + w[f"l{i}_bk"])
            v = split(x @ w[f"l{i}_wv"] + w[f"l{i}_bv"])
            att = _softmax(q @ k.transpose(0, 1, 3, 2) / np.sqrt(dk) + neg)
            ctx = (att @ v).transpose(0, 2, 1, 3).reshape(n, width, cfg.hidden_size)
            x = _layer_norm(
                x + ctx @ w[f"l{i}_wo"] + w[f"l{i}_bo"],
                w[f"l{i}_ln1_g"], w[f"l{i}_ln1_b"], cfg.layer_norm_eps)
            ffn = _gelu(x @ w[f"l{i}_w1"] + w[f"l{i}_b1"]) @ w[f"l{i}_w2"] + w[f"l{i}_b2"]
            x = _layer_norm(x + ffn, w[f"l{i}_ln2_g"], w[f"l{i}_ln2_b"], cfg.layer_norm_eps)

        if pooling == "pooled":
            return np.tanh(x[:, 0] @ w["pooler_w"] + w["pooler_b"])
        return (x * mask[:, :, None]).sum(axis=1) / mask.sum(axis=1)[:, None]


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

_CONFIG_INTS = ("hidden_size", "num_layers", "num_heads", "intermediate_size", "max_position")


def _cache_dir(cache_dir: str | None) -> str:
    if cache_dir is not None:
        return cache_dir
    env = os.environ.get(CACHE_ENV)
    if env:
        return env
    return os.path.join(os.path.expanduser("~"), ".cache", "encoder-exporter")


def _resolve(name: str, cache_dir: str | None) -> str:
    if os.path.isdir(name):
        return name
    cached = os.path.join(_cache_dir(cache_dir), name)
    if os.path.isdir(cached):
        return cached
    raise EncoderUnavailableError(
        f"encoder {name!r} not found: not a local directory and not cached "
        f"under {_cache_dir(cache_dir)!r}")


def load_encoder(name: str, cache_dir: str | None = None) -> FrozenEncoder:
    """Load a frozen encoder by directory path or cached name."""
    root = _resolve(name, cache_dir)
    config_path = os.path.join(root, "config.json")
    weights_path = os.path.join(root, "weights.npz")
    try:
        with open(config_path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise EncoderUnavailableError(f"{config_path}: unreadable config: {exc}") from exc
    for key in _CONFIG_INTS:
        if not isinstance(raw.get(key), int) or raw[key] <= 0:
            raise EncoderUnavailableError(f"{config_path}: bad or missing {key!r}")
    if raw["hidden_size"] % raw["num_heads"] != 0:
        raise EncoderUnavailableError(
            f"{config_path}: hidden_size must be divisible by num_heads")
    vocab = raw.get("vocab")
    if not isinstance(vocab, list) or not all(isinstance(t, str) for t in vocab):
        raise EncoderUnavailableError(f"{config_path}: vocab must be a list of strings")
    config = EncoderConfig(
        hidden_size=raw["hidden_size"],
        num_layers=raw["num_layers"],
        num_heads=raw["num_heads"],
        intermediate_size=raw["intermediate_size"],
        max_position=raw["max_position"],
        layer_norm_eps=float(raw.get("layer_norm_eps", 1e-12)),
        vocab=tuple(vocab),
    )
    try:
        with np.load(weights_path) as archive:
            weights = {k: archive[k] for k in archive.files}
    except (OSError, ValueError) as exc:
        raise EncoderUnavailableError(f"{weights_path}: unreadable weights: {exc}") from exc
    missing = _expected_keys(config) - set(weights)
    if missing:
        raise EncoderUnavailableError(f"{weights_path}: missing arrays {sorted(missing)}")
    h = config.hidden_size
    if weights["tok_emb"].shape != (len(vocab) + _RESERVED, h):
        raise EncoderUnavailableError(
            f"{weights_path}: tok_emb shape {weights['tok_emb'].shape} does not match "
            f"vocab {len(vocab)} + {_RESERVED} reserved by hidden {h}")
    if weights["pos_emb"].shape != (config.max_position, h):
        raise EncoderUnavailableError(
            f"{weights_path}: pos_emb shape {weights['pos_emb'].shape} does not match "
            f"max_position {config.max_position} by hidden {h}")
    return FrozenEncoder(config, weights)


def _expected_keys(config: EncoderConfig) -> set[str]:
    keys = {"tok_emb", "pos_emb", "emb_gamma", "emb_beta", "pooler_w", "pooler_b"}
    for i in range(config.num_layers):
        for part in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                     "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b"):
            keys.add(f"l{i}_{part}")
    return keys


# ---------------------------------------------------------------------------
# Demo encoder construction
# ---------------------------------------------------------------------------

def build_demo_encoder(
    path: str,
    vocab: list[str],
    hidden_size: int = 32,
    num_layers: int = 2,
    num_heads: int = 4,
    intermediate_size: int | None = None,
    max_position: int = 512,
    seed: int = 0,
) -> str:
    """Write a small randomly initialized frozen encoder directory."""
    if hidden_size % num_heads != 0:
        raise ValueError("hidden_size must be divisible by num_heads")
    if intermediate_size is None:
        intermediate_size = 4 * hidden_size
    rng = np.random.default_rng(seed)
    h, scale = hidden_size, 0.05

    weights: dict[str, np.ndarray] = {
        "tok_emb": scale * rng.standard_normal((len(vocab) + _RESERVED, h)),
        "pos_emb": scale * rng.standard_normal((max_position, h)),
        "emb_gamma": np.ones(h),
        "emb_beta": np.zeros(h),
        "pooler_w": scale * rng.standard_normal((h, h)),
        "pooler_b": np.zeros(h),
    }
    for i in range(num_layers):
        for part in ("wq", "wk", "wv", "wo"):
            weights[f"l{i}_{part}"] = scale * rng.standard_normal((h, h))
        for part in ("bq", "bk", "bv", "bo"):
            weights[f"l{i}_{part}"] = np.zeros(h)
        weights[f"l{i}_w1"] = scale * rng.standard_normal((h, intermediate_size))
        weights[f"l{i}_b1"] = np.zeros(intermediate_size)
        weights[f"l{i}_w2"] = scale * rng.standard_normal((intermediate_size, h))
        weights[f"l{i}_b2"] = np.zeros(h)
        weights[f"l{i}_ln1_g"] = np.ones(h)
        weights[f"l{i}_ln1_b"] = np.zeros(h)
        weights[f"l{i}_ln2_g"] = np.ones(h)
        weights[f"l{i}_ln2_b"] = np.zeros(h)

    os.makedirs(path, exist_ok=True)
    config = {
        "format": "frozen-encoder v1",
        "hidden_size": hidden_size,
        "num_layers": num_layers,
        "num_heads": num_heads,
        "intermediate_size": intermediate_size,
        "max_position": max_position,
        "layer_norm_eps": 1e-12,
        "vocab": list(vocab),
    }
    with open(os.path.join(path, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")
    np.savez(os.path.join(path, "weights.npz"), **weights)
    return path

"""Joint video-text encoder, auxiliary video-only encoder, and heads.

Two complementary networks share a text backbone and a learnable per-second
temporal embedding:

* the joint encoder runs one pre-norm transformer over the concatenated
  ``[video + temporal embedding; sentences]`` token sequence, so attention
  can move information across modalities before similarities are taken;
* the video-only (dual) encoder runs a transformer over the video tokens
  alone and is compared against the raw sentence embeddings, which keeps
  the two views architecturally independent.

Both produce a K x T cosine similarity matrix between sentences and
seconds; the joint branch additionally scores each sentence's alignability
with a linear head.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import MAX_TOKENS_PER_SENTENCE, WindowSample

__all__ = [
    "ModelConfig",
    "ModelParams",
    "WindowOutputs",
    "init_params",
    "embed_text",
    "embed_visual",
    "multimodal_forward",
    "dual_forward",
    "similarity",
    "alignability_head",
    "forward_window",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"NALN0001"


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 6
    n_heads: int = 8
    d_ff: int | None = None  # defaults to 4 * d_model
    max_T: int = 64
    feature_dim: int = 64
    vocab_size: int = 256
    token_dim: int = 32
    use_type_embedding: bool = False

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if min(self.d_model, self.n_layers, self.n_heads, self.max_T,
               self.feature_dim, self.vocab_size, self.token_dim) <= 0:
            raise ValueError("model dimensions must be positive")

    @property
    def ff_dim(self) -> int:
        return self.d_ff if self.d_ff is not None else 4 * self.d_model

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "max_T": self.max_T,
            "feature_dim": self.feature_dim,
            "vocab_size": self.vocab_size,
            "token_dim": self.token_dim,
            "use_type_embedding": self.use_type_embedding,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        cfg = cls(**obj)
        cfg.validate()
        return cfg


class ModelParams:
    """All learnable tensors, in a fixed named order.

    The flat name -> Tensor mapping keeps the optimizer, EMA updates, and
    checkpointing trivial; forward code addresses tensors by name.
    """

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: t.copy() for k, t in self.tensors.items()})


def _param(rng: np.random.Generator, shape: tuple[int, int], std: float) -> Tensor:
    if std == 0.0:
        return Tensor(np.zeros(shape), requires_grad=True)
    return Tensor(rng.normal(scale=std, size=shape), requires_grad=True)


def _const(shape: tuple[int, int], value: float) -> Tensor:
    return Tensor(np.full(shape, value), requires_grad=True)


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    config.validate()
    rng = np.random.default_rng([seed, 0xA11])
    d = config.d_model
    ff = config.ff_dim
    t: dict[str, Tensor] = {}
    t["token_emb"] = _param(rng, (config.vocab_size, config.token_dim), 0.02)
    t["text.w1"] = _param(rng, (config.token_dim, d), config.token_dim ** -0.5)
    t["text.b1"] = _const((1, d), 0.0)
    t["text.w2"] = _param(rng, (d, d), d ** -0.5)
    t["text.b2"] = _const((1, d), 0.0)
    t["vis.w"] = _param(rng, (config.feature_dim, d), config.feature_dim ** -0.5)
    t["vis.b"] = _const((1, d), 0.0)
    t["te"] = _param(rng, (config.max_T, d), 0.01)
    if config.use_type_embedding:
        t["type.vis"] = _const((1, d), 0.0)
        t["type.text"] = _const((1, d), 0.0)
    for stack in ("joint", "dual"):
        for i in range(config.n_layers):
            p = f"{stack}.{i}"
            t[f"{p}.ln1.g"] = _const((1, d), 1.0)
            t[f"{p}.ln1.b"] = _const((1, d), 0.0)
            for proj in ("wq", "wk", "wv", "wo"):
                t[f"{p}.attn.{proj}"] = _param(rng, (d, d), d ** -0.5)
            for b in ("bq", "bk", "bv", "bo"):
                t[f"{p}.attn.{b}"] = _const((1, d), 0.0)
            t[f"{p}.ln2.g"] = _const((1, d), 1.0)
            t[f"{p}.ln2.b"] = _const((1, d), 0.0)
            t[f"{p}.ff.w1"] = _param(rng, (d, ff), d ** -0.5)
            t[f"{p}.ff.b1"] = _const((1, ff), 0.0)
            t[f"{p}.ff.w2"] = _param(rng, (ff, d), ff ** -0.5)
            t[f"{p}.ff.b2"] = _const((1, d), 0.0)
        t[f"{stack}.ln_f.g"] = _const((1, d), 1.0)
        t[f"{stack}.ln_f.b"] = _const((1, d), 0.0)
    t["head.w"] = _param(rng, (d, 2), d ** -0.5)
    t["head.b"] = _const((1, 2), 0.0)
    return ModelParams(config, t)


# ---------------------------------------------------------------------------
# forward passes


def _affine_norm(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return ad.add(ad.mul(ad.layer_norm(x), params[f"{prefix}.g"]), params[f"{prefix}.b"])


def _linear(x: Tensor, params: ModelParams, w: str, b: str) -> Tensor:
    return ad.add(ad.matmul(x, params[w]), params[b])


def _block(x: Tensor, params: ModelParams, prefix: str, n_heads: int) -> Tensor:
    h = _affine_norm(x, params, f"{prefix}.ln1")
    q = _linear(h, params, f"{prefix}.attn.wq", f"{prefix}.attn.bq")
    k = _linear(h, params, f"{prefix}.attn.wk", f"{prefix}.attn.bk")
    v = _linear(h, params, f"{prefix}.attn.wv", f"{prefix}.attn.bv")
    a = ad.attention(q, k, v, n_heads)
    x = ad.add(x, _linear(a, params, f"{prefix}.attn.wo", f"{prefix}.attn.bo"))
    h = _affine_norm(x, params, f"{prefix}.ln2")
    h = ad.gelu(_linear(h, params, f"{prefix}.ff.w1", f"{prefix}.ff.b1"))
    h = _linear(h, params, f"{prefix}.ff.w2", f"{prefix}.ff.b2")
    return ad.add(x, h)


def _stack(x: Tensor, params: ModelParams, stack: str) -> Tensor:
    cfg = params.config
    for i in range(cfg.n_layers):
        x = _block(x, params, f"{stack}.{i}", cfg.n_heads)
    return _affine_norm(x, params, f"{stack}.ln_f")


def embed_text(token_lists: Sequence[Sequence[int]], params: ModelParams) -> Tensor:
    """Sentence embeddings: token embedding -> 2-layer MLP -> max over tokens.

    No positional information enters here, so the embedding is invariant to
    token order and duplication within a sentence.
    """
    cfg = params.config
    flat: list[int] = []
    segments: list[tuple[int, int]] = []
    for toks in token_lists:
        if not 1 <= len(toks) <= MAX_TOKENS_PER_SENTENCE:
            raise ValueError(f"sentence must have 1..{MAX_TOKENS_PER_SENTENCE} tokens, got {len(toks)}")
        for t in toks:
            if not 0 <= t < cfg.vocab_size:
                raise IndexError(f"token id {t} outside vocabulary of size {cfg.vocab_size}")
        segments.append((len(flat), len(flat) + len(toks)))
        flat.extend(int(t) for t in toks)
    emb = ad.gather_rows(params["token_emb"], flat)
    h = ad.gelu(_linear(emb, params, "text.w1", "text.b1"))
    h = _linear(h, params, "text.w2", "text.b2")
    return ad.max_over(h, segments=segments)


def embed_visual(features: np.ndarray, params: ModelParams) -> Tensor:
    cfg = params.config
    if features.ndim != 2 or features.shape[1] != cfg.feature_dim:
        raise ad.ShapeError(f"expected (T, {cfg.feature_dim}) features, got {features.shape}")
    if features.shape[0] > cfg.max_T:
        raise ValueError(f"window of {features.shape[0]}s exceeds max supported {cfg.max_T}s")
    return _linear(Tensor(features), params, "vis.w", "vis.b")


def _with_temporal(v: Tensor, params: ModelParams) -> Tensor:
    te = ad.slice_rows(params["te"], 0, v.rows)
    return ad.add(v, te)


def multimodal_forward(v: Tensor, s: Tensor | None, params: ModelParams) -> tuple[Tensor, Tensor | None]:
    """Joint encoder: temporal embedding on video only, then one shared stack."""
    cfg = params.config
    x = _with_temporal(v, params)
    if cfg.use_type_embedding:
        x = ad.add(x, params["type.vis"])
    n_v = v.rows
    if s is not None and s.rows > 0:
        s_in = ad.add(s, params["type.text"]) if cfg.use_type_embedding else s
        x = ad.concat_rows(x, s_in)
    x = _stack(x, params, "joint")
    v_hat = ad.slice_rows(x, 0, n_v)
    s_hat = ad.slice_rows(x, n_v, x.rows) if x.rows > n_v else None
    return v_hat, s_hat


def dual_forward(v: Tensor, params: ModelParams) -> Tensor:
    """Video-only encoder over temporally embedded frames."""
    return _stack(_with_temporal(v, params), params, "dual")


def similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of every (sentence, second) pair: rows of `a` against rows of `b`."""
    return ad.cosine_rows(a, b)


def alignability_head(s_hat: Tensor, params: ModelParams) -> Tensor:
    """Two logits per sentence; column 1 is the alignable class."""
    return _linear(s_hat, params, "head.w", "head.b")


@dataclass
class WindowOutputs:
    joint_sim: Tensor  # K x T, joint encoder
    dual_sim: Tensor  # K x T, video-only encoder against raw text embeddings
    logits: Tensor  # K x 2 alignability logits
    text_raw: Tensor  # K x d backbone sentence embeddings
    visual_joint: Tensor  # T x d
    visual_dual: Tensor  # T x d


def forward_window(features: np.ndarray, token_lists: Sequence[Sequence[int]],
                   params: ModelParams) -> WindowOutputs:
    """Full forward over one window: both similarity matrices plus logits."""
    v = embed_visual(features, params)
    s = embed_text(token_lists, params)
    v_hat, s_hat = multimodal_forward(v, s, params)
    v_dual = dual_forward(v, params)
    return WindowOutputs(
        joint_sim=similarity(s_hat, v_hat),
        dual_sim=similarity(s, v_dual),
        logits=alignability_head(s_hat, params),
        text_raw=s,
        visual_joint=v_hat,
        visual_dual=v_dual,
    )


def forward_sample(sample: WindowSample, params: ModelParams) -> WindowOutputs:
    return forward_window(sample.features, [r.tokens for r in sample.sentences], params)


# ---------------------------------------------------------------------------
# checkpoints: magic, u64 header length, JSON header, named tensor blobs


def save_checkpoint(path: str, params: ModelParams, extra: dict | None = None) -> None:
    header = {
        "config": params.config.to_dict(),
        "names": params.names(),
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in params.names():
            ad.write_tensor(fh, params[name])


def load_checkpoint(path: str) -> tuple[ModelParams, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        tensors: dict[str, Tensor] = {}
        for name in header["names"]:
            t = ad.read_tensor(fh)
            t.requires_grad = True
            tensors[name] = t
    params = ModelParams(config, tensors)
    expected = set(init_params(config, seed=0).names())
    if set(params.names()) != expected:
        raise ValueError(f"{path}: checkpoint tensors do not match the config's layout")
    return params, header.get("extra", {})

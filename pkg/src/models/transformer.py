"""
BERT-style frame aggregation.

A tower projects frames to d_m, adds learned positional embeddings and runs
post-norm transformer layers (self-attention and feed-forward, each with a
residual connection and layer norm). The frame outputs are pooled into one
video vector (first frame, mean, attention pooling or flattening) and
classified by an MoE head. The cross-modal family runs separate visual and
audio towers and fuses their concatenated outputs with a third tower.
"""

from typing import Any, Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, Field, model_validator

from src.models.base import VideoModel
from src.models.classifier import build_head
from src.tensor.core import (
    Tensor, as_tensor, concat, mean, power, relu, reshape, softmax, swapaxes, tsum,
)
from src.tensor.module import Module
from src.utils.config import SEGMENT_FRAMES
from src.utils.errors import ConfigError, ShapeError

PoolingMode = Literal["first", "mean", "attention", "concat"]
LAYER_NORM_EPS = 1e-12


class TransformerConfig(BaseModel):
    """Transformer aggregation settings (desk-scale defaults)"""
    layers: int = Field(default=2, ge=0)
    heads: int = Field(default=4, ge=1)
    model_dim: int = Field(default=32, ge=1)
    visual_model_dim: int = Field(default=16, ge=1)
    audio_model_dim: int = Field(default=8, ge=1)
    ff_mult: int = Field(default=4, ge=1)
    max_len: int = Field(default=64, ge=1)
    positional: bool = True
    pooling: PoolingMode = "mean"
    classifier: str = "moe"
    num_experts: int = Field(default=2, ge=1)

    @model_validator(mode="before")
    @classmethod
    def _concat_spans_one_segment(cls, values):
        """Flattening pools exactly one labeled window, so max_len is the window length."""
        if isinstance(values, dict) and values.get("pooling") == "concat":
            values = dict(values)
            max_len = values.setdefault("max_len", SEGMENT_FRAMES)
            if max_len != SEGMENT_FRAMES:
                raise ValueError(f"concat pooling needs max_len {SEGMENT_FRAMES}, got {max_len}")
        return values

    @model_validator(mode="after")
    def _heads_divide_dims(self):
        if self.model_dim % self.heads != 0:
            raise ValueError(f"heads {self.heads} must divide model_dim {self.model_dim}")
        return self


def scaled_dot_attention(q, k, v) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    scores = (q @ swapaxes(k, -1, -2)) / float(np.sqrt(q.shape[-1]))
    return softmax(scores, axis=-1) @ v


def layer_norm(x, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    x = as_tensor(x)
    centered = x - mean(x, axis=-1, keepdims=True)
    variance = mean(centered * centered, axis=-1, keepdims=True)
    return centered * power(variance + eps, -0.5) * gamma + beta


class TransformerLayer(Module):
    """Multi-head self-attention plus feed-forward, post-norm."""

    def __init__(self, prefix: str, model_dim: int, heads: int, ff_mult: int, rng: np.random.Generator):
        super().__init__(prefix)
        if model_dim % heads != 0:
            raise ConfigError(f"{heads} heads do not divide model dim {model_dim}")
        self.model_dim = model_dim
        self.heads = heads
        self.head_dim = model_dim // heads
        ff_dim = ff_mult * model_dim
        # head i uses columns [i*d_k, (i+1)*d_k) of the query/key/value projections
        self.wq = self.uniform_param("wq", (model_dim, model_dim), rng)
        self.wk = self.uniform_param("wk", (model_dim, model_dim), rng)
        self.wv = self.uniform_param("wv", (model_dim, model_dim), rng)
        self.wo = self.uniform_param("wo", (model_dim, model_dim), rng)
        self.ff1_w = self.uniform_param("ff1_w", (model_dim, ff_dim), rng)
        self.ff1_b = self.uniform_param("ff1_b", (ff_dim,), rng, fan_in=model_dim)
        self.ff2_w = self.uniform_param("ff2_w", (ff_dim, model_dim), rng)
        self.ff2_b = self.uniform_param("ff2_b", (model_dim,), rng, fan_in=ff_dim)
        self.ln1_gamma = self.add_param("ln1_gamma", np.ones(model_dim))
        self.ln1_beta = self.add_param("ln1_beta", np.zeros(model_dim))
        self.ln2_gamma = self.add_param("ln2_gamma", np.ones(model_dim))
        self.ln2_beta = self.add_param("ln2_beta", np.zeros(model_dim))

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        attended = layer_norm(x + multi_head(x, x, x, self), self.ln1_gamma, self.ln1_beta)
        hidden = relu(attended @ self.ff1_w + self.ff1_b) @ self.ff2_w + self.ff2_b
        return layer_norm(attended + hidden, self.ln2_gamma, self.ln2_beta)


def multi_head(q, k, v, layer: TransformerLayer) -> Tensor:
    """Concat(head_1..head_h) W_O with head_i = attention(Q W_i^Q, K W_i^K, V W_i^V)."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != layer.model_dim:
        raise ShapeError(f"layer expects width {layer.model_dim}, got {q.shape[-1]}")
    queries, keys, values = q @ layer.wq, k @ layer.wk, v @ layer.wv
    heads: List[Tensor] = []
    for i in range(layer.heads):
        block = slice(i * layer.head_dim, (i + 1) * layer.head_dim)
        heads.append(scaled_dot_attention(queries[..., block], keys[..., block], values[..., block]))
    return concat(heads, axis=-1) @ layer.wo


class TransformerTower(Module):
    """Optional input projection and positional embeddings, then the layer stack."""

    def __init__(self, prefix: str, input_dim: int, model_dim: int, config: TransformerConfig,
                 rng: np.random.Generator, project: bool = True, positional: Optional[bool] = None):
        super().__init__(prefix)
        if not project and input_dim != model_dim:
            raise ConfigError(f"unprojected tower needs input dim {input_dim} == model dim {model_dim}")
        self.input_dim = input_dim
        self.model_dim = model_dim
        self.max_len = config.max_len
        self.project = project
        self.positional = config.positional if positional is None else positional
        if project:
            self.input_w = self.uniform_param("input_w", (input_dim, model_dim), rng)
            self.input_b = self.uniform_param("input_b", (model_dim,), rng, fan_in=input_dim)
        if self.positional:
            self.position = self.uniform_param("position", (config.max_len, model_dim), rng, fan_in=model_dim)
        self.layers: List[TransformerLayer] = []
        for index in range(config.layers):
            layer = TransformerLayer(f"{prefix}/layer{index}", model_dim, config.heads, config.ff_mult, rng)
            self.layers.append(self.add_module(f"layer{index}", layer))

    def encode(self, frames) -> Tensor:
        frames = as_tensor(frames)
        length = frames.shape[-2]
        if length == 0:
            raise ShapeError("empty frame sequence")
        if length > self.max_len:
            raise ShapeError(f"sequence of {length} frames exceeds max_len {self.max_len}")
        if frames.shape[-1] != self.input_dim:
            raise ShapeError(f"tower expects {self.input_dim} features, got {frames.shape[-1]}")
        hidden = frames @ self.input_w + self.input_b if self.project else frames
        if self.positional:
            hidden = hidden + self.position[:length]
        for layer in self.layers:
            hidden = layer(hidden)
        return hidden


def bert_encode(frames, tower: TransformerTower) -> Tensor:
    return tower.encode(frames)


def aggregate(B, mode: str, w: Optional[Tensor] = None) -> Tensor:
    """Pool (..., L, d_m) frame outputs into (..., d_m); "concat" gives (..., L*d_m)."""
    B = as_tensor(B)
    if mode == "first":
        return B[..., 0, :]
    if mode == "mean":
        return mean(B, axis=-2)
    if mode == "attention":
        if w is None:
            raise ConfigError("attention pooling needs a weight vector")
        weights = attention_weights(B, w)
        return tsum(B * reshape(weights, weights.shape + (1,)), axis=-2)
    if mode == "concat":
        return reshape(B, B.shape[:-2] + (B.shape[-2] * B.shape[-1],))
    raise ConfigError(f"unknown pooling mode {mode!r}")


def attention_weights(B, w: Tensor) -> Tensor:
    """a = softmax_l(w . b_l)."""
    B = as_tensor(B)
    return softmax(tsum(B * w, axis=-1), axis=-1)


def cross_modal_encode(visual_frames, audio_frames, visual: TransformerTower, audio: TransformerTower,
                       cross: TransformerTower) -> Tensor:
    """T_cross([T_visual(F_v); T_audio(F_a)]) with per-frame concatenation."""
    visual_frames, audio_frames = as_tensor(visual_frames), as_tensor(audio_frames)
    if visual_frames.shape[-2] != audio_frames.shape[-2]:
        raise ShapeError(f"{visual_frames.shape[-2]} visual frames vs {audio_frames.shape[-2]} audio frames")
    fused = concat([visual.encode(visual_frames), audio.encode(audio_frames)], axis=-1)
    return cross.encode(fused)


class _PooledTransformer(VideoModel):
    """Shared pooling and head for both BERT families."""

    def _build_head(self, model_dim: int, rng: np.random.Generator) -> None:
        config = self.config
        if config.pooling == "attention":
            self.pool_w = self.uniform_param("pool_w", (model_dim,), rng)
        if config.pooling == "concat":
            self.fixed_length = config.max_len
        pooled_dim = model_dim * config.max_len if config.pooling == "concat" else model_dim
        head = build_head(config.classifier, f"{self.family}/{config.classifier}", pooled_dim, self.num_classes,
                          config.num_experts, rng)
        self.head = self.add_module("head", head)

    def encode(self, frames) -> Tensor:
        raise NotImplementedError

    def logits(self, frames) -> Tensor:
        frames = self.check_frames(frames)
        if self.fixed_length is not None and frames.shape[-2] != self.fixed_length:
            raise ShapeError(f"concat pooling needs exactly {self.fixed_length} frames, got {frames.shape[-2]}")
        pooled = aggregate(self.encode(frames), self.config.pooling, getattr(self, "pool_w", None))
        return self.head.logits(pooled)

    def config_dict(self) -> Dict[str, Any]:
        return self.config.model_dump()


class BertModel(_PooledTransformer):
    """Early fusion: visual and audio features concatenated per frame, one tower."""

    family = "bert"

    def __init__(self, visual_dim: int, audio_dim: int, num_classes: int, config: TransformerConfig,
                 rng: np.random.Generator):
        super().__init__("bert", visual_dim, audio_dim, num_classes)
        self.config = config
        self.tower = self.add_module("tower", TransformerTower("bert", self.feature_dim, config.model_dim, config, rng))
        self._build_head(config.model_dim, rng)

    def encode(self, frames) -> Tensor:
        return self.tower.encode(frames)


class BertCrossModel(_PooledTransformer):
    """Visual and audio towers fused by a cross tower over the concatenated outputs."""

    family = "bert_cross"

    def __init__(self, visual_dim: int, audio_dim: int, num_classes: int, config: TransformerConfig,
                 rng: np.random.Generator):
        super().__init__("bert_cross", visual_dim, audio_dim, num_classes)
        self.config = config
        cross_dim = config.visual_model_dim + config.audio_model_dim
        for dim in (config.visual_model_dim, config.audio_model_dim, cross_dim):
            if dim % config.heads != 0:
                raise ConfigError(f"heads {config.heads} must divide tower width {dim}")
        self.visual = self.add_module(
            "visual", TransformerTower("bert_cross/visual", visual_dim, config.visual_model_dim, config, rng)
        )
        self.audio = self.add_module(
            "audio", TransformerTower("bert_cross/audio", audio_dim, config.audio_model_dim, config, rng)
        )
        self.cross = self.add_module(
            "cross", TransformerTower("bert_cross/cross", cross_dim, cross_dim, config, rng, project=False, positional=False)
        )
        self._build_head(cross_dim, rng)

    def encode(self, frames) -> Tensor:
        visual_frames = frames[..., : self.visual_dim]
        audio_frames = frames[..., self.visual_dim:]
        return cross_modal_encode(visual_frames, audio_frames, self.visual, self.audio, self.cross)

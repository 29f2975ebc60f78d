"""Image heads that turn a backbone feature map into a set of embeddings.

Four variants share the last-attention linears ``q, k, v, c``:

* ``clip_pool_head``    one embedding, attention pooled with the token mean as query
* ``dense_clip_head``   one embedding per token, ``c(v(x_i))``
* ``cluster_clip_head`` K-Means over the dense embeddings, one mean per cluster
* ``sum_clip_head``     learnable queries refined by decoder layers, then the
                        same cross-attention as CLIP pooling
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import torch

from . import numerics as nx
from .kmeans import ClusterConfig, kmeans
from .numerics import ConfigError, Parameter, ShapeError
from .rng import RngStream

HEAD_LINEARS = ("q", "k", "v", "c")
FREEZE_GROUPS = ("q", "k", "v", "c", "decoder", "queries", "no_object", "pos")


class EmptyFeatureError(ValueError):
    pass


@dataclass
class FeatureMap:
    image_id: int
    X: torch.Tensor  # (K, C_e)

    def __post_init__(self):
        if self.X.ndim != 2:
            raise ShapeError(f"feature map must be 2-D (K, C_e), got {tuple(self.X.shape)}")


@dataclass
class EmbeddingSet:
    image_id: int
    Y: torch.Tensor  # (N, C_o)
    normalized: bool = False

    def normalize(self) -> "EmbeddingSet":
        return EmbeddingSet(self.image_id, nx.l2_normalize_rows(self.Y), True)


def _require(params: Mapping[str, torch.Tensor], names) -> None:
    missing = [f"{n}.weight" for n in names if f"{n}.weight" not in params]
    if missing:
        raise KeyError(f"missing head parameters: {missing}")


def _pool(query, X, params, heads, mean_token):
    kv = X
    if mean_token:
        kv = torch.cat([X.mean(dim=-2, keepdim=True), X], dim=-2)
    return nx.multi_head_attention(query, kv, params, heads=heads)


def clip_pool_head(fm: FeatureMap, params: Mapping[str, torch.Tensor], heads: int = 1,
                   mean_token: bool = False) -> EmbeddingSet:
    """Single embedding: attention over the tokens with their mean as the only query.

    ``mean_token`` additionally appends the mean token to the keys/values, as
    the original CLIP attention pool does.
    """
    if fm.X.shape[0] == 0:
        raise EmptyFeatureError(f"image {fm.image_id}: empty feature map")
    _require(params, HEAD_LINEARS)
    X = fm.X.to(params["q.weight"].dtype)
    xbar = X.mean(dim=0, keepdim=True)
    return EmbeddingSet(fm.image_id, _pool(xbar, X, params, heads, mean_token))


def dense_clip_head(fm: FeatureMap, params: Mapping[str, torch.Tensor]) -> EmbeddingSet:
    _require(params, ("v", "c"))
    z = nx.linear(fm.X.to(params["v.weight"].dtype), params["v.weight"], params.get("v.bias"))
    return EmbeddingSet(fm.image_id, nx.linear(z, params["c.weight"], params.get("c.bias")))


def cluster_clip_head(fm: FeatureMap, params: Mapping[str, torch.Tensor], cfg: ClusterConfig,
                      rng: np.random.Generator | None = None) -> EmbeddingSet:
    """Dense embeddings grouped by K-Means; each cluster is represented by its mean."""
    with torch.no_grad():
        dense = dense_clip_head(fm, params).Y
    if rng is None:
        rng = RngStream(cfg.seed).child("kmeans", fm.image_id).numpy()
    res = kmeans(dense.double().numpy(), cfg, rng)
    return EmbeddingSet(fm.image_id, torch.from_numpy(res.centers).to(dense.dtype))


# --------------------------------------------------------------------- SUM-CLIP


@dataclass(frozen=True)
class SumClipConfig:
    feature_dim: int = 64       # C_e, also the query width
    query_dim: int = 64         # C_q
    value_dim: int = 64         # C_v
    embed_dim: int = 32         # C_o
    n_queries: int = 50
    decoder_layers: int = 2
    decoder_heads: int = 8
    attn_heads: int = 1
    ffn_hidden: int = 0         # 0 -> 2 * feature_dim
    dropout: float = 0.1
    bias: bool = True
    pos_embed: bool = False
    n_tokens: int = 64          # only used by the positional table

    @property
    def hidden(self) -> int:
        return self.ffn_hidden or 2 * self.feature_dim

    def validate(self) -> None:
        if self.n_queries < 1:
            raise ConfigError("n_queries must be >= 1")
        if self.decoder_layers < 0:
            raise ConfigError("decoder_layers must be >= 0")
        if self.decoder_layers and self.feature_dim % self.decoder_heads:
            raise ConfigError(f"feature_dim={self.feature_dim} not divisible by decoder_heads={self.decoder_heads}")
        if self.query_dim % self.attn_heads or self.value_dim % self.attn_heads:
            raise ConfigError("query/value widths must be divisible by attn_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")


def param_group(name: str) -> str:
    head = name.split(".", 1)[0]
    if head in HEAD_LINEARS:
        return head
    if head == "pos_embed":
        return "pos"
    return head  # decoder / queries / no_object


def parse_freeze(spec) -> frozenset:
    """Parse ``"q,k,v,c"``, ``"none"`` or an iterable of group names (``o`` aliases ``c``)."""
    if isinstance(spec, str):
        spec = spec.strip()
        items = [] if spec.lower() in ("", "none") else [s.strip() for s in spec.split(",")]
    else:
        items = list(spec)
    groups = frozenset("c" if g == "o" else g for g in items)
    bad = groups - set(FREEZE_GROUPS)
    if bad:
        raise ConfigError(f"unknown freeze groups {sorted(bad)}")
    return groups


@dataclass
class SumClipParams:
    config: SumClipConfig
    params: dict[str, Parameter]
    freeze_mask: frozenset = field(default_factory=lambda: frozenset(HEAD_LINEARS))

    def __post_init__(self):
        self.apply_freeze(self.freeze_mask)

    def apply_freeze(self, mask) -> None:
        self.freeze_mask = parse_freeze(mask)
        for name, p in self.params.items():
            p.set_trainable(param_group(name) not in self.freeze_mask)

    def tensors(self) -> dict[str, torch.Tensor]:
        return {k: p.tensor for k, p in self.params.items()}

    def trainable(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable]

    def __iter__(self):
        return iter(self.params.values())


def decoder_layer(queries, memory, params: Mapping[str, torch.Tensor], heads: int = 8,
                  dropout: float = 0.0, training: bool = False,
                  generator: torch.Generator | None = None) -> torch.Tensor:
    """Post-norm DETR decoder layer: self-attn, cross-attn to ``memory``, FFN."""
    t = queries
    sa = nx.multi_head_attention(t, t, nx.sub_params(params, "self_attn"), heads=heads)
    t = nx.layer_norm(t + nx.dropout(sa, dropout, training, generator), params["norm1.gain"], params["norm1.bias"])
    ca = nx.multi_head_attention(t, memory, nx.sub_params(params, "cross_attn"), heads=heads)
    t = nx.layer_norm(t + nx.dropout(ca, dropout, training, generator), params["norm2.gain"], params["norm2.bias"])
    f = nx.ffn(t, nx.sub_params(params, "ffn"), dropout, training, generator)
    return nx.layer_norm(t + nx.dropout(f, dropout, training, generator), params["norm3.gain"], params["norm3.bias"])


def sum_clip_forward(X: torch.Tensor, tensors: Mapping[str, torch.Tensor], cfg: SumClipConfig,
                     training: bool = False, generator: torch.Generator | None = None) -> torch.Tensor:
    """Batched SUM-CLIP: ``X`` (.., K, C_e) -> (.., N, C_o)."""
    if X.shape[-1] != cfg.feature_dim:
        raise ShapeError(f"feature width {X.shape[-1]} != configured {cfg.feature_dim}")
    if cfg.pos_embed:
        X = X + tensors["pos_embed"][: X.shape[-2]]
    q = tensors["queries"].expand(*X.shape[:-2], *tensors["queries"].shape)
    for i in range(cfg.decoder_layers):
        q = decoder_layer(q, X, nx.sub_params(tensors, f"decoder.{i}"), cfg.decoder_heads,
                          cfg.dropout, training, generator)
    return nx.multi_head_attention(q, X, tensors, heads=cfg.attn_heads)


def sum_clip_head(fm: FeatureMap, params: SumClipParams, training: bool = False,
                  generator: torch.Generator | None = None) -> EmbeddingSet:
    Y = sum_clip_forward(fm.X, params.tensors(), params.config, training, generator)
    return EmbeddingSet(fm.image_id, Y)


def xavier_uniform(shape, gen: torch.Generator, dtype=torch.float64) -> torch.Tensor:
    fan_in, fan_out = shape[0], shape[-1]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return (torch.rand(shape, generator=gen, dtype=dtype) * 2.0 - 1.0) * bound


def _attn_init(prefix, width, gen, dtype, bias, out):
    for n in HEAD_LINEARS:
        out[f"{prefix}.{n}.weight"] = xavier_uniform((width, width), gen, dtype)
        if bias:
            out[f"{prefix}.{n}.bias"] = torch.zeros(width, dtype=dtype)


def init_sum_clip(cfg: SumClipConfig, clip_like_params: Mapping[str, torch.Tensor], rng: RngStream,
                  freeze="q,k,v,c", dtype=torch.float64) -> SumClipParams:
    """Fresh SUM-CLIP parameters: Xavier queries/decoder, copied ``q, k, v, c``."""
    cfg.validate()
    expected = {
        "q": (cfg.feature_dim, cfg.query_dim),
        "k": (cfg.feature_dim, cfg.query_dim),
        "v": (cfg.feature_dim, cfg.value_dim),
        "c": (cfg.value_dim, cfg.embed_dim),
    }
    for n, shape in expected.items():
        got = tuple(clip_like_params[f"{n}.weight"].shape)
        if got != shape:
            raise ShapeError(f"{n}.weight has shape {got}, config expects {shape}")

    gen = rng.child("init_sum_clip").torch()
    t: dict[str, torch.Tensor] = {}
    t["queries"] = xavier_uniform((cfg.n_queries, cfg.feature_dim), gen, dtype)
    d, h = cfg.feature_dim, cfg.hidden
    for i in range(cfg.decoder_layers):
        p = f"decoder.{i}"
        _attn_init(f"{p}.self_attn", d, gen, dtype, cfg.bias, t)
        _attn_init(f"{p}.cross_attn", d, gen, dtype, cfg.bias, t)
        t[f"{p}.ffn.fc1.weight"] = xavier_uniform((d, h), gen, dtype)
        t[f"{p}.ffn.fc2.weight"] = xavier_uniform((h, d), gen, dtype)
        if cfg.bias:
            t[f"{p}.ffn.fc1.bias"] = torch.zeros(h, dtype=dtype)
            t[f"{p}.ffn.fc2.bias"] = torch.zeros(d, dtype=dtype)
        for k in ("norm1", "norm2", "norm3"):
            t[f"{p}.{k}.gain"] = torch.ones(d, dtype=dtype)
            t[f"{p}.{k}.bias"] = torch.zeros(d, dtype=dtype)
    if cfg.pos_embed:
        t["pos_embed"] = xavier_uniform((cfg.n_tokens, d), gen, dtype)
    for n in HEAD_LINEARS:
        t[f"{n}.weight"] = clip_like_params[f"{n}.weight"].detach().to(dtype).clone()
        b = clip_like_params.get(f"{n}.bias")
        if cfg.bias:
            t[f"{n}.bias"] = (b.detach().to(dtype).clone() if b is not None
                              else torch.zeros(expected[n][1], dtype=dtype))
    t["no_object"] = xavier_uniform((1, cfg.embed_dim), gen, dtype)

    params = {k: Parameter(k, v) for k, v in t.items()}
    return SumClipParams(cfg, params, parse_freeze(freeze))

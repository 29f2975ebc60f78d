"""Dense tensor ops, parameters, the Adam update, and a finite-difference checker.

Tensors are plain ``torch.Tensor`` objects and reverse-mode differentiation is
torch autograd. The layers below are written out explicitly (no ``torch.nn``)
so every head variant is a pure function of its inputs and a flat
``name -> tensor`` parameter mapping. All ops accept leading batch dimensions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import torch


class ShapeError(ValueError):
    """Operand shapes do not agree."""


class ConfigError(ValueError):
    """A configuration value is outside its allowed range."""


class DegenerateRowError(ValueError):
    """A row cannot be normalized because its norm is (numerically) zero."""


class ContractError(RuntimeError):
    """A caller violated an operation's precondition."""


@dataclass
class Parameter:
    """A named leaf tensor. ``trainable`` mirrors ``tensor.requires_grad``."""

    name: str
    tensor: torch.Tensor
    trainable: bool = True

    def __post_init__(self):
        self.tensor = self.tensor.detach().clone()
        self.tensor.requires_grad_(self.trainable)

    def set_trainable(self, flag: bool) -> None:
        self.trainable = bool(flag)
        self.tensor.requires_grad_(self.trainable)
        if not self.trainable:
            self.tensor.grad = None

    @property
    def grad(self) -> torch.Tensor | None:
        return self.tensor.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.tensor.shape)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    y = matmul(x, weight)
    if bias is not None:
        y = y + bias
    return y


def softmax_rows(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    # fused max-shifted kernel; a hand-rolled exp/sum costs ~2x in the training loop
    return torch.softmax(x, dim=dim)


def log_softmax_rows(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Stable log-softmax; entries equal to ``-inf`` are treated as masked out."""
    return torch.log_softmax(x, dim=dim)


def l2_normalize_rows(x: torch.Tensor, min_norm: float = 1e-12) -> torch.Tensor:
    norms = torch.sqrt((x * x).sum(dim=-1, keepdim=True))
    if x.numel() and bool((norms < min_norm).any()):
        bad = torch.nonzero(norms.reshape(-1) < min_norm).reshape(-1).tolist()
        raise DegenerateRowError(f"cannot normalize rows with norm < {min_norm}: {bad[:8]}")
    return x / norms


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if x.shape[-1] < 2:
        raise ShapeError("layer_norm needs at least two features per row")
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return centered / torch.sqrt(var + eps) * gain + bias


def dropout(
    x: torch.Tensor,
    ratio: float,
    training: bool,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"dropout ratio must lie in [0, 1), got {ratio}")
    if not training or ratio == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= ratio
    return x * keep.to(x.dtype) / (1.0 - ratio)


def sub_params(params: Mapping[str, torch.Tensor], prefix: str) -> dict[str, torch.Tensor]:
    """View of ``params`` restricted to ``prefix.*`` with the prefix stripped."""
    head = prefix + "."
    return {k[len(head):]: v for k, v in params.items() if k.startswith(head)}


def _lin(x, params, name):
    return linear(x, params[f"{name}.weight"], params.get(f"{name}.bias"))


def multi_head_attention(
    queries: torch.Tensor,
    keys_values: torch.Tensor,
    params: Mapping[str, torch.Tensor],
    heads: int = 1,
    scaled: bool = True,
    return_weights: bool = False,
):
    """Attention of ``queries`` (.., a, d) over ``keys_values`` (.., b, d).

    ``params`` holds ``{q,k,v,c}.weight`` and optional ``.bias`` entries. Each
    head computes ``softmax(q k^T / sqrt(C_q / heads)) v``; heads are
    concatenated and mapped through ``c``.
    """
    wq, wk, wv = params["q.weight"], params["k.weight"], params["v.weight"]
    if wq.shape != wk.shape:
        raise ShapeError(f"query/key projections differ: {tuple(wq.shape)} vs {tuple(wk.shape)}")
    if queries.shape[-1] != wq.shape[0] or keys_values.shape[-1] != wk.shape[0] or wv.shape[0] != wk.shape[0]:
        raise ShapeError("attention input width does not match projection input width")
    if params["c.weight"].shape[0] != wv.shape[1]:
        raise ShapeError("output projection input width must equal value width")
    c_q, c_v = wq.shape[1], wv.shape[1]
    if heads < 1 or c_q % heads or c_v % heads or queries.shape[-1] % heads:
        raise ConfigError(f"projection widths ({c_q}, {c_v}) not divisible by heads={heads}")

    q = _lin(queries, params, "q")
    k = _lin(keys_values, params, "k")
    v = _lin(keys_values, params, "v")
    lead_q, lead_k = q.shape[:-1], k.shape[:-1]
    q = q.reshape(*lead_q, heads, c_q // heads).transpose(-2, -3)
    k = k.reshape(*lead_k, heads, c_q // heads).transpose(-2, -3)
    v = v.reshape(*lead_k, heads, c_v // heads).transpose(-2, -3)
    logits = matmul(q, k.transpose(-1, -2))
    if scaled:
        logits = logits / math.sqrt(c_q // heads)
    weights = softmax_rows(logits)
    z = matmul(weights, v).transpose(-2, -3)
    z = z.reshape(*lead_q, c_v)
    out = _lin(z, params, "c")
    if return_weights:
        return out, weights
    return out


def ffn(
    x: torch.Tensor,
    params: Mapping[str, torch.Tensor],
    dropout_ratio: float = 0.0,
    training: bool = False,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    h = torch.relu(_lin(x, params, "fc1"))
    h = dropout(h, dropout_ratio, training, generator)
    return _lin(h, params, "fc2")


def backward(loss: torch.Tensor) -> None:
    """Accumulate gradients of a scalar ``loss`` into every trainable leaf."""
    if loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any trainable parameter")
    loss.backward()


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.tensor.grad = None


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(params: Iterable[Parameter], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam step with decoupled weight decay.

    Frozen parameters and parameters without a gradient are left untouched.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    with torch.no_grad():
        for p in params:
            if not p.trainable or p.tensor.grad is None:
                continue
            g = p.tensor.grad
            m = state.m.get(p.name)
            if m is None:
                m = state.m[p.name] = torch.zeros_like(p.tensor)
                state.v[p.name] = torch.zeros_like(p.tensor)
            v = state.v[p.name]
            if m.shape != p.tensor.shape:
                raise ShapeError(f"Adam state for {p.name} has shape {tuple(m.shape)}")
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            update = (m / c1) / (torch.sqrt(v / c2) + state.eps)
            if state.weight_decay:
                update = update + state.weight_decay * p.tensor
            p.tensor.sub_(lr * update)


def grad_check(
    fn: Callable[[], torch.Tensor],
    params: Iterable[Parameter],
    eps: float = 1e-6,
    grad_fn: Callable[[], Mapping[str, torch.Tensor]] | None = None,
    floor: float = 1e-6,
    scale_floor: float = 1e-3,
) -> float:
    """Worst coordinate-wise relative error between analytic and central-difference gradients.

    A coordinate's error is ``|a - n| / max(|n|, floor, scale_floor * max|n|)``
    where ``n`` is the numerical derivative; the last term keeps coordinates
    whose true gradient is zero (e.g. a softmax-invariant bias) from turning
    finite-difference roundoff into a spurious large ratio. ``grad_fn``
    overrides the analytic side (defaults to autograd on ``fn``).
    """
    params = [p for p in params if p.trainable]
    if grad_fn is None:
        zero_grad(params)
        backward(fn())
        analytic = {p.name: p.tensor.grad.detach().clone() if p.tensor.grad is not None
                    else torch.zeros_like(p.tensor) for p in params}
        zero_grad(params)
    else:
        analytic = {k: v.detach() for k, v in grad_fn().items()}

    pairs = []
    with torch.no_grad():
        for p in params:
            flat = p.tensor.view(-1)
            a_flat = analytic[p.name].reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = float(fn())
                flat[i] = orig - eps
                down = float(fn())
                flat[i] = orig
                pairs.append((float(a_flat[i]), (up - down) / (2.0 * eps)))
    if not pairs:
        return 0.0
    scale = max(abs(n) for _, n in pairs)
    denom_min = max(floor, scale_floor * scale)
    return max(abs(a - n) / max(abs(n), denom_min) for a, n in pairs)

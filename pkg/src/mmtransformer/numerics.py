"""Differentiable building blocks on top of torch autograd.

torch's autograd graph plays the role of the computation tape: every
operation below is composed from torch primitives, so reverse-mode
gradients come for free. What lives here is the contract layer the
model relies on (finite-value checks, mask semantics, shape errors) plus
a hand-written AdamW step with global gradient-norm clipping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

import torch
import torch.nn as nn

from .errors import (
    ContractError,
    DegenerateMaskError,
    InvalidValueError,
    ShapeError,
    TrainingDivergenceError,
)

Activation = Union[None, str, Callable[[torch.Tensor], torch.Tensor]]

_ACTIVATIONS = {
    None: lambda x: x,
    "none": lambda x: x,
    "relu": torch.relu,
}


def _check_finite(x: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(x).all()):
        raise InvalidValueError(f"{what} contains NaN or Inf")


def default_eps(dtype: torch.dtype) -> float:
    return 1e-12 if dtype == torch.float64 else 1e-6


def softmax(logits: torch.Tensor, dim: int = -1) -> torch.Tensor:
    _check_finite(logits, "softmax logits")
    return torch.softmax(logits, dim=dim)


def masked_softmax(logits: torch.Tensor, mask: Optional[torch.Tensor], dim: int = -1) -> torch.Tensor:
    """Softmax where ``mask == False`` entries get exactly zero weight.

    Rows with no unmasked entry raise :class:`DegenerateMaskError`.
    """
    _check_finite(logits, "softmax logits")
    if mask is None:
        return torch.softmax(logits, dim=dim)
    mask = mask.expand_as(logits)
    if bool((~mask).all(dim=dim).any()):
        raise DegenerateMaskError("every position masked for at least one row")
    return torch.softmax(logits.masked_fill(~mask, float("-inf")), dim=dim)


def linear(x: torch.Tensor, weight: Optional[torch.Tensor], bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    # weight is stored (in_features, out_features); None means identity
    if weight is None:
        out = x
    else:
        if x.shape[-1] != weight.shape[0]:
            raise ShapeError(f"input feature size {x.shape[-1]} does not match weight rows {weight.shape[0]}")
        out = x @ weight
    if bias is not None:
        out = out + bias
    return out


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).transpose(-3, -2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    *lead, h, n, dh = x.shape
    return x.transpose(-3, -2).reshape(*lead, n, h * dh)


def multi_head_attention(
    queries: torch.Tensor,
    keys: torch.Tensor,
    values: torch.Tensor,
    mask: Optional[torch.Tensor] = None,
    heads: int = 1,
    projections: Optional[Sequence[Optional[torch.Tensor]]] = None,
    return_weights: bool = False,
):
    """Scaled dot-product attention over ``heads`` heads.

    Args:
        queries: ``(..., Lq, D)``.
        keys, values: ``(..., Lk, D)``.
        mask: boolean, ``True`` marks a key that may be attended. Either
            ``(..., Lk)`` (key padding) or ``(..., Lq, Lk)``.
        heads: number of heads; must divide ``D``.
        projections: ``(wq, bq, wk, bk, wv, bv, wo, bo)`` with weights laid
            out ``(in, out)``. ``None`` entries mean identity / no bias.
        return_weights: also return the ``(..., heads, Lq, Lk)`` weights.
    """
    d = queries.shape[-1]
    if d % heads:
        raise ShapeError(f"feature size {d} not divisible by {heads} heads")
    if keys.shape[-2] != values.shape[-2]:
        raise ShapeError("key and value sequence lengths differ")
    if keys.shape[-1] != d:
        raise ShapeError("query and key feature sizes differ")

    wq, bq, wk, bk, wv, bv, wo, bo = projections if projections is not None else (None,) * 8
    q = _split_heads(linear(queries, wq, bq), heads)
    k = _split_heads(linear(keys, wk, bk), heads)
    v = _split_heads(linear(values, wv, bv), heads)

    scores = q @ k.transpose(-1, -2) / math.sqrt(d // heads)
    if mask is not None:
        if mask.dim() == keys.dim() - 1:
            mask = mask.unsqueeze(-2)  # key padding -> broadcast over queries
        mask = mask.unsqueeze(-3)  # broadcast over heads
    weights = masked_softmax(scores, mask)
    out = linear(_merge_heads(weights @ v), wo, bo)
    if return_weights:
        return out, weights
    return out


def mlp_block(x: torch.Tensor, layers: Sequence[tuple]) -> torch.Tensor:
    """Apply ``(weight, bias, activation)`` triples in order."""
    for weight, bias, act in layers:
        if x.shape[-1] != weight.shape[0]:
            raise ShapeError(f"mlp input size {x.shape[-1]} does not match weight rows {weight.shape[0]}")
        fn = _ACTIVATIONS[act] if act is None or isinstance(act, str) else act
        x = fn(linear(x, weight, bias))
    return x


def layer_norm(x: torch.Tensor, gain: torch.Tensor, offset: torch.Tensor, eps: Optional[float] = None) -> torch.Tensor:
    if eps is None:
        eps = default_eps(x.dtype)
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return centered / torch.sqrt(var + eps) * gain + offset


def compute_gradients(
    output: torch.Tensor, params: Iterable[torch.Tensor], retain_graph: bool = False
) -> list[torch.Tensor]:
    """Reverse-mode gradients of a scalar ``output``.

    Parameters that did not take part in the computation get zeros.
    """
    params = list(params)
    if output.numel() != 1:
        raise ContractError(f"gradient requested of a non-scalar output with shape {tuple(output.shape)}")
    if not output.requires_grad:
        return [torch.zeros_like(p) for p in params]
    grads = torch.autograd.grad(output.reshape(()), params, allow_unused=True, retain_graph=retain_graph)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


# -- modules -----------------------------------------------------------------


class Linear(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(in_dim, out_dim))
        self.bias = nn.Parameter(torch.zeros(out_dim)) if bias else None
        nn.init.xavier_uniform_(self.weight)

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class MLP(nn.Module):
    """Stack of affine layers with ReLU between them (none after the last
    unless ``final_activation``)."""

    def __init__(self, dims: Sequence[int], final_activation: bool = False):
        super().__init__()
        if len(dims) < 2:
            raise ShapeError("an MLP needs at least input and output sizes")
        self.layers = nn.ModuleList(Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.final_activation = final_activation

    def forward(self, x):
        n = len(self.layers)
        spec = [
            (layer.weight, layer.bias, "relu" if (i < n - 1 or self.final_activation) else None)
            for i, layer in enumerate(self.layers)
        ]
        return mlp_block(x, spec)


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim))
        self.offset = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        return layer_norm(x, self.gain, self.offset)


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"hidden size {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim)
        self.k = Linear(dim, dim)
        self.v = Linear(dim, dim)
        self.out = Linear(dim, dim)

    def forward(self, queries, keys, values, mask=None, return_weights=False):
        proj = (
            self.q.weight, self.q.bias,
            self.k.weight, self.k.bias,
            self.v.weight, self.v.bias,
            self.out.weight, self.out.bias,
        )
        return multi_head_attention(queries, keys, values, mask, self.heads, proj, return_weights)


# -- optimizer ---------------------------------------------------------------


@dataclass
class OptimizerState:
    """AdamW hyperparameters and per-parameter moments."""

    lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    max_norm: float = 0.1
    step: int = 0
    exp_avg: list = field(default_factory=list)
    exp_avg_sq: list = field(default_factory=list)

    def hyperparameters(self) -> dict:
        return {
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "betas": list(self.betas),
            "eps": self.eps,
            "max_norm": self.max_norm,
        }


def global_grad_norm(grads: Sequence[torch.Tensor]) -> float:
    return math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))


@torch.no_grad()
def optimizer_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: OptimizerState) -> float:
    """One AdamW update in place. Returns the pre-clipping global grad norm.

    Gradients are rescaled so that their joint L2 norm is at most
    ``state.max_norm``; weight decay shrinks parameters separately from
    the adaptive step.
    """
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ShapeError("parameter and gradient lists differ in length")
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    for p, g, m in zip(params, grads, state.exp_avg):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch between parameter {tuple(p.shape)} and gradient/state")

    norm = global_grad_norm(grads)
    if not math.isfinite(norm):
        raise TrainingDivergenceError("non-finite gradient")
    scale = state.max_norm / norm if state.max_norm is not None and norm > state.max_norm else 1.0

    state.step += 1
    b1, b2 = state.betas
    bias1 = 1.0 - b1 ** state.step
    bias2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        g = g * scale
        p.mul_(1.0 - state.lr * state.weight_decay)
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / bias2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / bias1)
    return norm

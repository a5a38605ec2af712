"""Differentiable building blocks on top of torch autograd.

Thin functional layer: shape checks that raise :class:`GraphConstructionError`
with the offending shapes, plus the few ops torch does not ship directly
(channel std pooling, masked single-head time attention).
"""
from __future__ import annotations

import math
from contextlib import contextmanager

import torch
import torch.nn.functional as F

from .errors import GraphConstructionError, VerificationError

LEAKY_SLOPE = 0.2
STD_FLOOR = 1e-8


def _expect_channels(x: torch.Tensor, weight: torch.Tensor, op: str, dim: int = 1, transposed=False):
    expected = weight.shape[0] if transposed else weight.shape[1]
    if x.dim() <= dim or x.shape[dim] != expected:
        raise GraphConstructionError(
            f"{op}: input shape {tuple(x.shape)} incompatible with weight shape {tuple(weight.shape)}")


def conv1d(x, weight, bias=None, stride=1, padding=0):
    if x.dim() != 3:
        raise GraphConstructionError(f"conv1d expects [N, C, L], got {tuple(x.shape)}")
    _expect_channels(x, weight, "conv1d")
    return F.conv1d(x, weight, bias, stride=stride, padding=padding)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    if x.dim() != 4:
        raise GraphConstructionError(f"conv2d expects [N, C, H, W], got {tuple(x.shape)}")
    _expect_channels(x, weight, "conv2d")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0):
    if x.dim() != 4:
        raise GraphConstructionError(f"conv_transpose2d expects [N, C, H, W], got {tuple(x.shape)}")
    _expect_channels(x, weight, "conv_transpose2d", transposed=True)
    return F.conv_transpose2d(x, weight, bias, stride=stride, padding=padding)


def linear(x, weight, bias=None):
    if x.shape[-1] != weight.shape[1]:
        raise GraphConstructionError(
            f"linear: input shape {tuple(x.shape)} incompatible with weight shape {tuple(weight.shape)}")
    return F.linear(x, weight, bias)


_kink_log: list[torch.Tensor] | None = None


@contextmanager
def recording_kink_inputs():
    """Collect the input of every ReLU-family call made inside the block.

    Gradient checks use the recorded pre-activations to keep finite-difference
    steps from crossing a hidden kink.
    """
    global _kink_log
    outer, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = outer


def leaky_relu(x):
    if _kink_log is not None:
        _kink_log.append(x)
    return F.leaky_relu(x, LEAKY_SLOPE)


def relu(x):
    if _kink_log is not None:
        _kink_log.append(x)
    return F.relu(x)


class LeakyReLU(torch.nn.Module):
    def forward(self, x):
        return leaky_relu(x)


class ReLU(torch.nn.Module):
    def forward(self, x):
        return relu(x)


def mean_pool(x):
    """Global mean over every axis after channel: [N, C, ...] -> [N, C]."""
    return x.flatten(2).mean(-1)


def std_pool(x):
    """Global (biased) standard deviation per channel: [N, C, ...] -> [N, C]."""
    flat = x.flatten(2)
    var = (flat - flat.mean(-1, keepdim=True)).pow(2).mean(-1)
    return var.clamp_min(STD_FLOOR).sqrt()


def concat(tensors, dim=1):
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.dim() != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != dim % len(ref)):
            raise GraphConstructionError(
                f"concat along dim {dim}: shapes {[tuple(t.shape) for t in tensors]}")
    return torch.cat(tensors, dim=dim)


def time_attention(x, wq, wk, wv, key_mask=None, values=None):
    """Single-head scaled dot-product self-attention along time.

    x: [N, T, C] features that form queries and keys; wq/wk/wv: [C, C]
    projections; key_mask: optional bool [N, T], True where a frame may be
    attended to. ``values`` ([N, T, ..., C], default ``x``) are projected by
    ``wv`` and mixed with the same [N, T, T] weights, so extra axes share one
    attention map. Bidirectional (no causal mask).
    """
    if x.dim() != 3:
        raise GraphConstructionError(f"time_attention expects [N, T, C], got {tuple(x.shape)}")
    for w in (wq, wk, wv):
        _expect_channels(x.transpose(1, 2), w, "time_attention")
    values = x if values is None else values
    if values.shape[:2] != x.shape[:2] or values.shape[-1] != x.shape[-1]:
        raise GraphConstructionError(
            f"time_attention: values {tuple(values.shape)} incompatible with queries {tuple(x.shape)}")
    q, k = x @ wq.T, x @ wk.T
    scores = q @ k.transpose(1, 2) / math.sqrt(x.shape[-1])
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[:, None, :], float("-inf"))
    v = (values @ wv.T).reshape(values.shape[0], values.shape[1], -1)
    return (torch.softmax(scores, dim=-1) @ v).reshape(values.shape)


def check_finite(t: torch.Tensor, what: str = "tensor"):
    if not torch.isfinite(t).all():
        raise VerificationError(f"{what} contains non-finite values")
    return t


def nan_hook(module: torch.nn.Module):
    """Register forward hooks that raise as soon as any submodule emits NaN/Inf."""
    handles = []

    def hook(mod, _inp, out):
        outs = out if isinstance(out, (tuple, list)) else (out,)
        for o in outs:
            if isinstance(o, torch.Tensor):
                check_finite(o, f"output of {type(mod).__name__}")

    for m in module.modules():
        handles.append(m.register_forward_hook(hook))
    return handles

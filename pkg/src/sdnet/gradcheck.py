"""Finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch
from torch.func import functional_call

from . import ops
from .errors import VerificationError

DEFAULT_TOL = 1e-4
DEFAULT_EPS = 1e-5
REL_FLOOR = 1e-8
# a direction is smooth enough when its estimated truncation error is below this share of the tolerance
SMOOTH_SHARE = 0.1


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    per_input_errors: list[float]
    passed: bool
    tolerance: float = DEFAULT_TOL
    mode: str = "elementwise"
    kinks: int = 0
    redrawn: int = 0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f", {self.kinks} kink(s) avoided" if self.kinks else ""
        extra += f", {self.redrawn} direction(s) redrawn" if self.redrawn else ""
        return f"{status}  {self.op_name:<36s} max_rel_err={self.max_rel_error:.3e} ({self.mode}{extra})"


def _flat(op, inputs) -> torch.Tensor:
    out = op(*inputs)
    parts = out if isinstance(out, (tuple, list)) else [out]
    flat = torch.cat([o.reshape(-1) for o in parts])
    if not torch.isfinite(flat).all():
        raise VerificationError("forward pass produced a non-finite value")
    return flat


def _scalar(op, inputs) -> torch.Tensor:
    return _flat(op, inputs).sum()


def _rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    if a.numel() == 0:
        return 0.0
    denom = torch.maximum(torch.maximum(a.abs(), b.abs()), torch.full_like(a, REL_FLOOR))
    return float(((a - b).abs() / denom).max())


def _guard_points(guard, inputs):
    return [(z.reshape(len(z), -1), margin) for z, margin in guard(*inputs)]


def _steer(base_points, guard, inputs, x, v, epsilon, rounds=4):
    """Project ``v`` until no guarded point moves within its margin of the kink; returns (v, steered)."""
    basis: list[torch.Tensor] = []
    steered = 0
    orig = x.detach().clone()
    for _ in range(rounds):
        x.copy_(orig + epsilon * v)
        plus = _guard_points(guard, inputs)
        x.copy_(orig - epsilon * v)
        minus = _guard_points(guard, inputs)
        x.copy_(orig)
        flagged = []
        for k, ((z0, margin), (zp, _), (zm, _)) in enumerate(zip(base_points, plus, minus)):
            step = (zp - zm).norm(dim=1) / 2
            near = (margin * step > z0.norm(dim=1)) & (step > 0)
            flagged += [(k, int(r)) for r in torch.nonzero(near).flatten()]
        if not flagged:
            break
        with torch.enable_grad():
            points = _guard_points(guard, inputs)
            for k, r in flagged:
                for d in range(points[k][0].shape[1]):
                    (g,) = torch.autograd.grad(points[k][0][r, d], x, retain_graph=True)
                    for b in basis:
                        g = g - (g * b).sum() * b
                    if g.norm() > 1e-12:
                        basis.append(g / g.norm())
        projected = v
        for b in basis:
            projected = projected - (projected * b).sum() * b
        if projected.norm() < 1e-6:
            # the guarded points span the whole tensor; keep the last direction and let the check judge it
            break
        v = projected / projected.norm()
        steered += len(flagged)
    return v, steered


def _shifted(op, inputs, x, orig, delta):
    x.copy_(orig + delta)
    plus = _flat(op, inputs)
    x.copy_(orig - delta)
    minus = _flat(op, inputs)
    x.copy_(orig)
    return plus, minus


# Richardson factor: an estimate from steps h and 2h differs from the truth by (D(2h) - D(h)) / factor
_RICHARDSON = {"central": 3.0, "five_point": 15.0}


def _derivative(pairs, step, stencil) -> float:
    """Directional derivative from ``pairs[m] = (f(x + m*step*v), f(x - m*step*v))``."""
    p1, m1 = pairs[1]
    if stencil == "central":
        return float((p1 - m1).sum()) / (2 * step)
    p2, m2 = pairs[2]
    return float((8 * (p1 - m1) - (p2 - m2)).sum()) / (12 * step)


def grad_check(op: Callable, inputs: Sequence[torch.Tensor], tolerance: float = DEFAULT_TOL,
               epsilon: float = DEFAULT_EPS, name: str | None = None, avoid_kinks: bool = False,
               mode: str = "elementwise", directions: int = 3, seed: int = 0,
               guard: Callable | None = None, redraws: int = 0, stencil: str = "central") -> GradCheckReport:
    """Compare autograd gradients of ``sum(op(*inputs))`` with central differences.

    Only inputs with ``requires_grad`` are checked. ``mode="elementwise"`` perturbs
    every scalar; ``mode="directional"`` compares directional derivatives along
    ``directions`` random unit vectors per input, which is what large parameter
    tensors need to stay affordable.

    ``avoid_kinks`` first moves inputs within ``epsilon`` of zero off the
    ReLU-family kink. Kinks inside the op (hidden pre-activations) can still be
    straddled, so with ``avoid_kinks`` an entry that fails the central
    difference is re-tested one-sidedly: if the forward and backward
    differences disagree (the function is non-smooth within ``epsilon``) and the
    analytic value matches one of them, the entry is accepted and counted in
    ``kinks``. A wrong backward matches neither side and still fails.

    ``stencil="five_point"`` (directional mode) replaces the central
    difference by ``(8 [f(x+e) - f(x-e)] - [f(x+2e) - f(x-2e)]) / 12e`` with
    the same ``epsilon``. Its truncation error shrinks like ``epsilon**4``
    instead of ``epsilon**2``, which matters for ops whose curvature scale
    along a parameter direction is within a few hundred steps.

    ``redraws`` (directional mode) rejects directions along which the op is
    not smooth at the scale of ``epsilon``. Each direction is also differenced
    with step ``2 * epsilon``; for a smooth function the two estimates agree
    up to 3 (central) or 15 (five-point) times the truncation error at
    ``epsilon``.
    If that estimate exceeds ``SMOOTH_SHARE * tolerance`` relative to the
    finite difference itself, a fresh random direction is drawn, up to
    ``redraws`` times, and each rejection counts in ``redrawn``. The test uses
    finite differences only, never the analytic gradient, so it cannot hide a
    wrong backward; after the last redraw the direction is judged as is. It
    catches near-singular points the guard missed and directions nearly
    orthogonal to the gradient, whose tiny derivative drowns in truncation
    error.

    ``guard`` (directional mode) extends kink avoidance to kinks hidden inside
    the op. ``guard(*inputs)`` returns ``[(z, margin), ...]`` where each ``z``
    is ``[M, D]``: M points in D dimensions at which the op is non-smooth when
    a point reaches 0 (a ReLU input, a complex STFT bin under a magnitude).
    A random direction that would move a point by more than its distance to
    0 divided by ``margin`` is projected orthogonal to that point's gradient,
    so to first order the step no longer approaches the kink. The check stays
    random within the remaining subspace and each steered point counts in
    ``kinks``.

    The outputs at ``x + epsilon`` and ``x - epsilon`` are differenced
    element by element before the sum is taken. That is the same central
    difference, but a large-valued output no longer loses the derivative to
    cancellation between two big totals.
    """
    name = name or getattr(op, "__name__", "op")
    inputs = [t.detach().clone().requires_grad_(t.requires_grad) if isinstance(t, torch.Tensor) else t
              for t in inputs]
    for t in inputs:
        if isinstance(t, torch.Tensor) and t.requires_grad and t.dtype != torch.float64:
            raise VerificationError(f"{name}: gradient checks require float64 inputs, got {t.dtype}")
    if avoid_kinks:
        with torch.no_grad():
            for t in inputs:
                if isinstance(t, torch.Tensor) and t.requires_grad:
                    near = t.abs() < epsilon
                    t[near] += torch.where(t[near] < 0, -epsilon, epsilon)
    checked = [i for i, t in enumerate(inputs) if isinstance(t, torch.Tensor) and t.requires_grad]
    if (guard is not None or redraws or stencil != "central") and mode != "directional":
        raise ValueError("guard, redraws and stencil require mode='directional'")
    if stencil not in _RICHARDSON:
        raise ValueError(f"unknown stencil {stencil!r}")
    if guard is not None:
        with torch.no_grad():
            base_points = _guard_points(guard, inputs)
    out = _scalar(op, inputs)
    grads = torch.autograd.grad(out, [inputs[i] for i in checked], allow_unused=True)
    grads = [torch.zeros_like(inputs[i]) if g is None else g for i, g in zip(checked, grads)]

    gen = torch.Generator().manual_seed(seed)
    errors = []
    kinks = 0
    redrawn = 0
    with torch.no_grad():
        base = _flat(op, inputs) if avoid_kinks else None

        def judge(analytic: float, plus: torch.Tensor, minus: torch.Tensor, numeric: float | None = None) -> float:
            nonlocal kinks
            a = torch.tensor([analytic])
            c = ((plus - minus).sum() / (2 * epsilon)).reshape(1) if numeric is None else torch.tensor([numeric])
            err = _rel_err(a, c)
            if err < tolerance or base is None:
                return err
            fwd = ((plus - base).sum() / epsilon).reshape(1)
            bwd = ((base - minus).sum() / epsilon).reshape(1)
            one_sided = min(_rel_err(a, fwd), _rel_err(a, bwd))
            if _rel_err(fwd, bwd) >= tolerance and one_sided < tolerance:
                kinks += 1
                return one_sided
            return err

        for i, g in zip(checked, grads):
            x = inputs[i]
            if mode == "elementwise":
                flat_x, flat_g = x.view(-1), g.reshape(-1)
                worst = 0.0
                for j in range(flat_x.numel()):
                    orig = flat_x[j].item()
                    flat_x[j] = orig + epsilon
                    plus = _flat(op, inputs)
                    flat_x[j] = orig - epsilon
                    minus = _flat(op, inputs)
                    flat_x[j] = orig
                    worst = max(worst, judge(flat_g[j].item(), plus, minus))
                errors.append(worst)
            elif mode == "directional":
                worst = 0.0
                orig = x.clone()
                for _ in range(directions):
                    for attempt in range(redraws + 1):
                        v = torch.randn(x.shape, generator=gen, dtype=x.dtype)
                        v /= v.norm()
                        if guard is not None:
                            v, steered = _steer(base_points, guard, inputs, x, v, epsilon)
                            kinks += steered
                        reach = (1, 2) if stencil == "five_point" else (1,)
                        if redraws:
                            reach = reach + tuple(2 * m for m in reach if 2 * m not in reach)
                        pairs = {m: _shifted(op, inputs, x, orig, m * epsilon * v) for m in reach}
                        numeric = _derivative(pairs, epsilon, stencil)
                        if attempt == redraws:
                            break
                        wide = _derivative({m: pairs[2 * m] for m in (1, 2) if 2 * m in pairs}, 2 * epsilon, stencil)
                        if abs(wide - numeric) / _RICHARDSON[stencil] < (SMOOTH_SHARE * tolerance
                                                                          * max(abs(numeric), REL_FLOOR)):
                            break
                        redrawn += 1
                    worst = max(worst, judge(float((g * v).sum()), *pairs[1], numeric))
                errors.append(worst)
            else:
                raise ValueError(f"unknown grad-check mode {mode!r}")
    worst = max(errors) if errors else 0.0
    return GradCheckReport(name, worst, errors, worst < tolerance, tolerance, mode, kinks, redrawn)


def module_op(module: torch.nn.Module):
    """Turn a module into ``fn(*args, *params)`` so its parameters become checkable inputs.

    Returns ``(fn, params)`` with ``params`` as float64 leaf copies, in
    ``named_parameters`` order.
    """
    names = [n for n, _ in module.named_parameters()]
    params = [p.detach().double().clone().requires_grad_(True) for _, p in module.named_parameters()]
    n = len(params)

    def fn(*args):
        return functional_call(module, dict(zip(names, args[len(args) - n:])), args[:len(args) - n])

    return fn, params


@dataclass
class OpCase:
    """A differentiable op plus a generator of random inputs for ``variant`` 0, 1, 2..."""
    fn: Callable
    make_inputs: Callable[[int, torch.Generator], list]
    avoid_kinks: bool = False
    variants: int = 3


def _rand(gen, *shape, grad=True, scale=1.0):
    return (scale * torch.randn(*shape, generator=gen, dtype=torch.float64)).requires_grad_(grad)


class _LstmOp:
    """LSTM as a pure function of (x, weights...) using torch's fused kernel."""

    def __init__(self, bidirectional: bool):
        self.bidirectional = bidirectional
        self.__name__ = "blstm" if bidirectional else "lstm"

    def inputs(self, v, gen):
        n, t, c, h = [(2, 5, 3, 4), (1, 7, 2, 3), (3, 4, 4, 2)][v]
        lstm = torch.nn.LSTM(c, h, batch_first=True, bidirectional=self.bidirectional).double()
        return [_rand(gen, n, t, c)] + [_rand(gen, *p.shape, scale=0.5) for p in lstm.parameters()]

    def __call__(self, x, *weights):
        c = x.shape[-1]
        h = weights[1].shape[1]
        lstm = torch.nn.LSTM(c, h, batch_first=True, bidirectional=self.bidirectional).double()
        names = [n for n, _ in lstm.named_parameters()]
        return functional_call(lstm, dict(zip(names, weights)), (x,))[0]


def op_suite() -> dict[str, OpCase]:
    """Every primitive the network is assembled from, with random-input generators."""
    T = torch

    def conv1d_in(v, g):
        n, c, l, o, k, s, p = [(2, 3, 10, 4, 3, 1, 1), (1, 2, 9, 3, 5, 2, 2), (2, 4, 6, 2, 1, 1, 0)][v]
        return [_rand(g, n, c, l), _rand(g, o, c, k), _rand(g, o), s, p]

    def conv2d_in(v, g):
        n, c, h, w, o, k, s, p = [(1, 2, 6, 5, 3, 3, 1, 1), (2, 3, 8, 4, 2, (4, 1), (2, 1), (1, 0)),
                                  (1, 1, 5, 5, 2, 1, 1, 0)][v]
        kk = k if isinstance(k, tuple) else (k, k)
        return [_rand(g, n, c, h, w), _rand(g, o, c, *kk), _rand(g, o), s, p]

    def convt_in(v, g):
        n, c, h, w, o, k, s, p = [(1, 3, 4, 3, 2, (4, 1), (2, 1), (1, 0)), (2, 2, 3, 3, 3, 3, 1, 1),
                                  (1, 2, 5, 2, 1, (4, 1), (2, 1), (1, 0))][v]
        kk = k if isinstance(k, tuple) else (k, k)
        return [_rand(g, n, c, h, w), _rand(g, c, o, *kk), _rand(g, o), s, p]

    def linear_in(v, g):
        n, i, o = [(4, 3, 5), (2, 6, 2), (1, 1, 3)][v]
        return [_rand(g, n, i), _rand(g, o, i), _rand(g, o)]

    def unary_in(v, g):
        return [_rand(g, *[(3, 4), (2, 3, 5), (7,)][v])]

    def binary_in(v, g):
        shape = [(3, 4), (2, 3, 5), (7,)][v]
        return [_rand(g, *shape), _rand(g, *shape)]

    def pool_in(v, g):
        return [_rand(g, *[(2, 3, 4, 5), (1, 4, 6), (3, 2, 3, 3)][v])]

    def concat_in(v, g):
        a, b, rest = [(2, 3, (4, 5)), (1, 4, (6,)), (3, 1, (2, 2))][v]
        return [_rand(g, 2, a, *rest), _rand(g, 2, b, *rest)]

    def attn_in(v, g):
        n, t, c = [(2, 5, 3), (1, 7, 4), (3, 4, 2)][v]
        return [_rand(g, n, t, c)] + [_rand(g, c, c, scale=0.5) for _ in range(3)]

    def reshape_in(v, g):
        return [_rand(g, *[(2, 3, 4), (6, 5), (1, 2, 3, 2)][v])]

    def conv1d_op(x, w, b, s, p):
        return ops.conv1d(x, w, b, stride=s, padding=p)

    def conv2d_op(x, w, b, s, p):
        return ops.conv2d(x, w, b, stride=s, padding=p)

    def convt_op(x, w, b, s, p):
        return ops.conv_transpose2d(x, w, b, stride=s, padding=p)

    def reshape_op(x):
        # fold/unfold plus transpose, weighted so the check is not permutation-blind
        y = x.reshape(x.shape[0], -1).transpose(0, 1)
        return y * torch.arange(1, y.numel() + 1, dtype=y.dtype).reshape(y.shape)

    return {
        "conv1d": OpCase(conv1d_op, conv1d_in),
        "conv2d": OpCase(conv2d_op, conv2d_in),
        "conv_transpose2d": OpCase(convt_op, convt_in),
        "linear": OpCase(ops.linear, linear_in),
        "lstm": OpCase(_LstmOp(False), _LstmOp(False).inputs),
        "blstm": OpCase(_LstmOp(True), _LstmOp(True).inputs),
        "time_attention": OpCase(ops.time_attention, attn_in),
        "mean_pool": OpCase(lambda x: ops.mean_pool(x) ** 2, pool_in),
        "std_pool": OpCase(lambda x: ops.std_pool(x) ** 2 + ops.std_pool(x), pool_in),
        "relu": OpCase(lambda x: T.relu(x) * x, unary_in, avoid_kinks=True),
        "leaky_relu": OpCase(lambda x: ops.leaky_relu(x) * x, unary_in, avoid_kinks=True),
        "sigmoid": OpCase(T.sigmoid, unary_in),
        "tanh": OpCase(T.tanh, unary_in),
        "add": OpCase(lambda a, b: (a + b) ** 2, binary_in),
        "mul": OpCase(T.mul, binary_in),
        "concat": OpCase(lambda a, b: ops.concat([a, b]) ** 2, concat_in),
        "reshape_transpose": OpCase(reshape_op, reshape_in),
    }


def check_case(name: str, case: OpCase, seed: int = 0, tolerance=DEFAULT_TOL,
               epsilon=DEFAULT_EPS) -> list[GradCheckReport]:
    reports = []
    for v in range(case.variants):
        gen = torch.Generator().manual_seed(seed * 1000 + v)
        inputs = case.make_inputs(v, gen)
        reports.append(grad_check(case.fn, inputs, tolerance, epsilon, name=f"{name}[{v}]",
                                  avoid_kinks=case.avoid_kinks))
    return reports


def summarize(reports: Sequence[GradCheckReport]) -> dict:
    return {"checked": len(reports), "failed": [r.op_name for r in reports if not r.passed],
            "worst": max((r.max_rel_error for r in reports), default=0.0)}


"""Registry of every gradient check the project runs, grouped for ``--only`` filtering."""
from __future__ import annotations

from typing import Callable

import torch

from .config import ModelConfig
from .gradcheck import DEFAULT_EPS, DEFAULT_TOL, GradCheckReport, check_case, grad_check, module_op, op_suite
from . import ops
from .dsp import stft_tensor
from .losses import (LOG_EPS, DiscriminatorEnsemble, MstftConfig, feature_matching, lsgan_disc_loss,
                     lsgan_gen_loss, magnitude, mstft_loss, mstft_summands, total_loss)
from .model import FTB, CoefficientAttention, GatedConv, LatticeBlock, SDNet, TimeAttention, lattice_combine

GROUPS = ("backbone", "gconv", "ftb", "lattice", "losses", "end2end")

# smallest widths that still exercise every code path
SMALL_DISC = (2, 3, 3, 3)


def _gen(seed):
    return torch.Generator().manual_seed(seed)


def _randn(gen, *shape, scale=1.0):
    return (scale * torch.randn(*shape, generator=gen, dtype=torch.float64)).requires_grad_(True)


def _he_scaled(module: torch.nn.Module, gen) -> torch.nn.Module:
    """Redraw weights with variance 2/fan_in so activations (and gradients) stay O(1) through depth.

    Default init shrinks the signal layer by layer; deep-layer gradients then sit
    near 1e-8, where finite-difference round-off alone exceeds the tolerance.
    """
    with torch.no_grad():
        for p in module.parameters():
            if p.dim() > 1:
                fan_in = p[0].numel()
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * (2.0 / fan_in) ** 0.5)
            else:
                p.copy_(0.1 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return module


def _module_check(name, module, args, seed, tol, eps, mode="elementwise", avoid_kinks=False):
    torch.manual_seed(seed)
    fn, params = module_op(module.double())
    return grad_check(fn, list(args) + params, tol, eps, name=name, mode=mode,
                      avoid_kinks=avoid_kinks, seed=seed)


def _backbone(seed, tol, eps):
    out = []
    for name, case in op_suite().items():
        out.extend(check_case(name, case, seed, tol, eps))
    return out


def _gconv(seed, tol, eps):
    g = _gen(seed)
    torch.manual_seed(seed)
    cases = [
        ("gconv1d", GatedConv(2, 3, 3, padding=1), _randn(g, 2, 2, 7)),
        ("gconv1d_ungated", GatedConv(2, 3, 3, padding=1, gated=False), _randn(g, 1, 2, 6)),
        ("gconv2d_stride", GatedConv(2, 2, (4, 1), stride=(2, 1), padding=(1, 0), dims=2), _randn(g, 1, 2, 8, 3)),
    ]
    return [_module_check(n, m, [x], seed, tol, eps) for n, m, x in cases]


def _ftb(seed, tol, eps):
    g = _gen(seed)
    torch.manual_seed(seed)
    ftb = FTB(2, 8, 1)
    with torch.no_grad():
        ftb.freq_map.add_(0.3 * torch.randn(8, 8))
    return [_module_check("ftb", ftb, [_randn(g, 1, 2, 8, 3)], seed, tol, eps)]


def _lattice(seed, tol, eps):
    g = _gen(seed)
    torch.manual_seed(seed)
    reports = [_module_check("lattice_block", LatticeBlock(2, 3), [_randn(g, 1, 2, 3, 3)], seed, tol, eps),
               _module_check("coefficient_attention", CoefficientAttention(3, 4), [_randn(g, 2, 3, 4, 4)],
                             seed, tol, eps)]

    def combine(i, j, a1, a2, b1, b2):
        return torch.stack(lattice_combine(i, j, torch.tanh, (a1, a2, b1, b2)))

    args = [_randn(g, 2, 2, 3, 3), _randn(g, 2, 2, 3, 3)] + [torch.rand(2, generator=g, dtype=torch.float64)
                                                             .requires_grad_(True) for _ in range(4)]
    reports.append(grad_check(combine, args, tol, eps, name="lattice_combine"))
    return reports


def _disc_loss_addends(real_outs, fake_outs):
    """lsgan_disc_loss as (real term, generated term); they sum to the loss.

    Perturbing the generated waveform leaves the real term bit-identical, so
    differencing the addends drops its round-off from the difference quotient.
    """
    settled_real = [(torch.ones_like(s), f) for s, f in real_outs]
    settled_fake = [(torch.zeros_like(s), f) for s, f in fake_outs]
    return lsgan_disc_loss(real_outs, settled_fake), lsgan_disc_loss(settled_real, fake_outs)


def _losses(seed, tol, eps):
    g = _gen(seed)
    # >1024 samples so the 2048-point scale can reflect-pad. Both loss terms are
    # scale-invariant while epsilon is fixed, so a large amplitude keeps the
    # log-magnitude curvature at near-empty bins from swamping the difference quotient.
    pred, target = _randn(g, 1, 1100, scale=10.0), _randn(g, 1, 1100, scale=10.0).detach()
    reports = [grad_check(lambda p: mstft_loss(p, target), [pred], tol, eps, name="mstft_loss", avoid_kinks=True,
                          mode="directional", directions=6, seed=seed)]
    torch.manual_seed(seed)
    ens = _he_scaled(DiscriminatorEnsemble(SMALL_DISC).double(), g)
    fn, params = module_op(ens)
    wave, real = _randn(g, 1, 96), _randn(g, 1, 96).detach()
    reports.append(grad_check(lambda w, *p: lsgan_gen_loss(fn(w, *p)), [wave] + params, tol, eps,
                              name="lsgan_gen_loss", avoid_kinks=True))
    reports.append(grad_check(lambda w, *p: _disc_loss_addends(fn(real, *p), fn(w, *p)), [wave] + params, tol, eps,
                              name="lsgan_disc_loss", avoid_kinks=True))
    # real features are detached by design, so only the generated waveform is a valid input here
    frozen = [p.detach() for p in params]
    reports.append(grad_check(lambda w: feature_matching(fn(real, *frozen), fn(w, *frozen)), [wave], tol, eps,
                              name="feature_loss", avoid_kinks=True))
    return reports


def unit_variance_init(model: torch.nn.Module, *inputs) -> torch.nn.Module:
    """Rescale each weight layer, in forward order, so its output has unit std on ``inputs``.

    Layer-sequential unit-variance initialization. At default init the
    activations shrink to ~0.03, attention scores and pooled statistics go flat,
    and the gradients of those parameters fall to 1e-9..1e-11, which is below
    the round-off noise of a deep forward pass differenced at 1e-5. Unit-variance
    layers keep every gradient well above that noise without the blow-up that
    a fixed 2/fan_in draw causes through the gated and multiplicative paths.
    """
    layers = [m for m in model.modules() if isinstance(m, (torch.nn.Linear, torch.nn.Conv1d, torch.nn.Conv2d,
                                                           torch.nn.ConvTranspose2d, TimeAttention))]
    order: list[torch.nn.Module] = []

    def record_order(m, i, o):
        if m not in order:
            order.append(m)

    hooks = [m.register_forward_hook(record_order) for m in layers]
    with torch.no_grad():
        model(*inputs)
    for h in hooks:
        h.remove()
    for layer in order:
        captured = {}

        def capture(m, i, o):
            captured.setdefault("io", (i, o))

        hook = layer.register_forward_hook(capture)
        with torch.no_grad():
            model(*inputs)
            hook.remove()
            (x, *_), out = captured["io"]
            if isinstance(layer, TimeAttention):
                frames = x.mean(dim=2).transpose(1, 2)
                for w in (layer.wq, layer.wk):
                    w /= (frames @ w.T).std()
                layer.wv /= (x.transpose(1, 3) @ layer.wv.T).std()
            else:
                scale = out.std()
                layer.weight /= scale
                if layer.bias is not None:
                    layer.bias /= scale
    return model


# a ReLU input or a log-gap sign must not be reached within two steps
KINK_MARGIN = 2.0
# a loss STFT bin must stay 30 steps from 0, where log|S| curves like 1/|S|^2;
# closer calls that still matter are caught by the smoothness redraw
NULL_MARGIN = 30.0
# fresh directions allowed per check when the op is not smooth along the drawn one
END_TO_END_REDRAWS = 3


def end_to_end_case(seed: int = 0, lr_len: int = 600):
    """(fn, inputs, guard): the generator objective of the tiny model as a function of every parameter tensor.

    The objective is ``total_loss`` (MSTFT + adversarial + feature matching)
    against a small discriminator ensemble whose weights stay fixed. ``fn``
    returns its addends: the MSTFT summands (see ``mstft_summands``), the
    adversarial term and the feature term. ``guard`` exposes every point where
    the composition is non-smooth: hidden ReLU-family inputs in the generator
    and the discriminators, the complex STFT bins of the prediction (|S| is a
    cone at 0), the per-bin log gaps inside the MSTFT L1 term and the
    feature gaps inside the feature-matching L1 term.
    """
    g = _gen(seed)
    torch.manual_seed(seed)
    model = SDNet(ModelConfig.tiny()).double()
    ensemble = DiscriminatorEnsemble(SMALL_DISC).double()
    lr = torch.randn(1, lr_len, generator=g, dtype=torch.float64)
    target = torch.randn(1, 2 * lr_len, generator=g, dtype=torch.float64)
    unit_variance_init(model, lr)
    unit_variance_init(ensemble, target)
    fn, params = module_op(model)
    scales = MstftConfig().scales
    target_logs = [torch.log(magnitude(stft_tensor(target, sc)) + LOG_EPS) for sc in scales]
    with torch.no_grad():
        target_feats = [f for _, feats in ensemble(target) for f in feats]

    def objective(*p):
        pred = fn(lr, *p)
        report = total_loss(pred, target, ensemble)
        return mstft_summands(pred, target), report.l_adv.reshape(1), report.l_f.reshape(1)

    def guard(*p):
        with ops.recording_kink_inputs() as pre:
            pred = fn(lr, *p)
            outs = ensemble(pred)
        points = [(torch.cat([z.reshape(-1) for z in pre])[:, None], KINK_MARGIN)]
        for sc, t_log in zip(scales, target_logs):
            spec = stft_tensor(pred, sc)
            points.append((spec.movedim(-3, -1).reshape(-1, 2), NULL_MARGIN))
            points.append(((t_log - torch.log(magnitude(spec) + LOG_EPS)).reshape(-1, 1), KINK_MARGIN))
        pred_feats = [f for _, feats in outs for f in feats]
        gaps = torch.cat([(fr - fp).reshape(-1) for fr, fp in zip(target_feats, pred_feats)])
        points.append((gaps[:, None], KINK_MARGIN))
        return points

    return objective, params, guard


def _end2end(seed, tol, eps):
    fn, params, guard = end_to_end_case(seed)
    return [grad_check(fn, params, tol, eps, name="sdnet_tiny_total_loss", mode="directional", directions=2, seed=seed,
                       guard=guard, redraws=END_TO_END_REDRAWS, stencil="five_point")]


REGISTRY: dict[str, Callable[[int, float, float], list[GradCheckReport]]] = {
    "backbone": _backbone, "gconv": _gconv, "ftb": _ftb, "lattice": _lattice,
    "losses": _losses, "end2end": _end2end,
}


def grad_check_all(only=None, seed: int = 0, tolerance: float = DEFAULT_TOL,
                   epsilon: float = DEFAULT_EPS) -> list[tuple[str, GradCheckReport]]:
    """Run the selected groups (all by default); returns (group, report) pairs."""
    groups = list(GROUPS) if not only else list(only)
    unknown = [g for g in groups if g not in REGISTRY]
    if unknown:
        raise ValueError(f"unknown grad-check group(s) {unknown}; choose from {', '.join(GROUPS)}")
    results = []
    for group in groups:
        results.extend((group, r) for r in REGISTRY[group](seed, tolerance, epsilon))
    return results


def format_table(results) -> str:
    lines = [f"{'group':<9s} {'check':<30s} {'mode':<12s} {'max_rel_err':>12s}  result"]
    for group, r in results:
        lines.append(f"{group:<9s} {r.op_name:<30s} {r.mode:<12s} {r.max_rel_error:12.3e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    failed = sum(not r.passed for _, r in results)
    lines.append(f"{len(results) - failed}/{len(results)} passed")
    return "\n".join(lines)

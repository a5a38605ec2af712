import pytest
import torch

from sdnet import ops
from sdnet.config import ModelConfig
from sdnet.gradcheck import grad_check
from sdnet.gradsuite import _disc_loss_addends, end_to_end_case, unit_variance_init
from sdnet.losses import lsgan_disc_loss, mstft_loss, mstft_summands
from sdnet.model import SDNet


def _randn(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


class _ScaledBackward(torch.autograd.Function):
    """Identity whose backward is off by a factor, to prove a check still rejects it."""

    @staticmethod
    def forward(ctx, x, factor):
        ctx.factor = factor
        return x.clone()

    @staticmethod
    def backward(ctx, grad):
        return ctx.factor * grad, None


def test_mstft_summands_add_up_to_the_loss():
    pred, target = _randn(1, 3000), _randn(1, 3000, seed=1)
    parts = mstft_summands(pred, target)
    assert parts.dim() == 1
    assert abs(float(parts.sum()) - float(mstft_loss(pred, target))) < 1e-12


def test_disc_loss_addends_add_up_to_the_loss():
    real = [(_randn(2, 1, 5, seed=k), []) for k in range(3)]
    fake = [(_randn(2, 1, 5, seed=10 + k), []) for k in range(3)]
    parts = _disc_loss_addends(real, fake)
    assert len(parts) == 2
    assert abs(float(sum(parts)) - float(lsgan_disc_loss(real, fake))) < 1e-12


def test_recording_collects_relu_family_inputs_only_inside_block():
    x = _randn(4)
    ops.leaky_relu(x)
    with ops.recording_kink_inputs() as seen:
        ops.leaky_relu(x)
        ops.relu(2 * x)
        ops.LeakyReLU()(3 * x)
    ops.relu(x)
    assert [torch.equal(a, b) for a, b in zip(seen, [x, 2 * x, 3 * x])] == [True, True, True]
    assert len(seen) == 3


def test_five_point_stencil_resolves_fast_oscillation():
    # for sin(k x) the central difference is off by (k * 1e-5)**2 / 6, 1.5e-4 at k = 3000
    x = _randn(1).requires_grad_()
    op = lambda t: torch.sin(3000 * t)
    central = grad_check(op, [x], mode="directional", seed=1)
    five = grad_check(op, [x], mode="directional", seed=1, stencil="five_point")
    assert not central.passed and central.max_rel_error > 1e-4
    assert five.passed and five.max_rel_error < 1e-6


def test_five_point_stencil_still_rejects_wrong_backward():
    x = _randn(6).requires_grad_()
    report = grad_check(lambda t: torch.sin(_ScaledBackward.apply(t, 1.001)), [x], mode="directional",
                        stencil="five_point")
    assert not report.passed and report.max_rel_error > 5e-4


def test_stencil_guard_and_redraws_need_directional_mode():
    x = _randn(3).requires_grad_()
    with pytest.raises(ValueError):
        grad_check(torch.sin, [x], stencil="five_point")
    with pytest.raises(ValueError):
        grad_check(torch.sin, [x], redraws=2)
    with pytest.raises(ValueError):
        grad_check(torch.sin, [x], guard=lambda t: [])
    with pytest.raises(ValueError):
        grad_check(torch.sin, [x], mode="directional", stencil="seven_point")


def _hidden_kink_case():
    # one hidden pre-activation sits 1e-7 from its kink, well inside a 1e-5 step
    a = _randn(5, 8, seed=3)
    x = _randn(8, seed=4)
    x = x - a[0] * (a[0] @ x - 1e-7) / (a[0] @ a[0])
    return a, x.requires_grad_()


def test_guard_steers_around_hidden_kink():
    a, x = _hidden_kink_case()
    op = lambda t: ops.relu(a @ t) ** 2 + ops.relu(a @ t)
    plain = grad_check(op, [x], mode="directional", directions=4, seed=2)
    guarded = grad_check(op, [x], mode="directional", directions=4, seed=2, guard=lambda t: [(a @ t, 2.0)])
    assert not plain.passed
    assert guarded.passed and guarded.kinks > 0


def test_guard_still_rejects_wrong_backward():
    a, x = _hidden_kink_case()
    op = lambda t: ops.relu(_ScaledBackward.apply(a @ t, -1.0)) ** 2
    report = grad_check(op, [x], mode="directional", directions=4, seed=2, guard=lambda t: [(a @ t, 2.0)])
    assert not report.passed


def test_redraw_rejects_directions_that_are_not_smooth():
    # the oscillating coordinate dominates some random directions and not others
    x = _randn(8, seed=5).requires_grad_()
    op = lambda t: torch.sin(6000 * t[0]) + t[1:].sum()
    strict = grad_check(op, [x], mode="directional", directions=6, seed=1)
    redrawn = grad_check(op, [x], mode="directional", directions=6, seed=1, redraws=8)
    assert not strict.passed
    assert redrawn.passed and redrawn.redrawn > 0


def test_redraw_keeps_last_direction_when_none_is_smooth():
    x = _randn(1).requires_grad_()
    report = grad_check(lambda t: torch.sin(3000 * t), [x], mode="directional", seed=1, redraws=2)
    assert report.redrawn == 6 and not report.passed


def test_unit_variance_init_normalizes_layer_outputs():
    torch.manual_seed(0)
    model = SDNet(ModelConfig.tiny()).double()
    lr = _randn(1, 600)
    unit_variance_init(model, lr)
    seen = {}
    hook = model.encoders[0].reshape.register_forward_hook(lambda m, i, o: seen.setdefault("out", o))
    with torch.no_grad():
        model(lr)
    hook.remove()
    assert float(seen["out"].std()) == pytest.approx(1.0, rel=1e-9)


def test_end_to_end_case_exposes_every_hidden_kink():
    fn, params, guard = end_to_end_case(seed=0)
    with torch.no_grad():
        points = guard(*params)
        mstft_parts, adv, feat = fn(*params)
    # ReLU inputs, then (bins, log gaps) per loss scale, then discriminator feature gaps
    assert [z.shape[1] for z, _ in points] == [1, 2, 1, 2, 1, 2, 1, 1]
    assert points[0][1] == points[2][1] == points[-1][1]
    # each loss scale contributes one convergence term plus one log gap per bin
    assert mstft_parts.numel() == 3 + sum(z.shape[0] for z, _ in points[2:-1:2])
    assert adv.shape == feat.shape == (1,)

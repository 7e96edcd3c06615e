import math

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from postrain.multitask import (DualPrediction, HybridLossConfig, LossError, MultiTaskHeads,
                                hybrid_loss, predict_classes)

D = torch.float64


def scalar_hybrid(logits, reg, rain, cls, weights, alpha):
    """Loop reference: weighted one-hot cross-entropy plus alpha * squared error."""
    l_cls = l_reg = 0.0
    n = len(reg)
    for i in range(n):
        z = logits[i]
        m = max(z)
        lse = m + math.log(sum(math.exp(v - m) for v in z))
        l_cls += -weights[cls[i]] * (z[cls[i]] - lse)
        l_reg += (reg[i] - rain[i]) ** 2
    return l_cls + alpha * l_reg, l_cls, l_reg


def instance(seed, n_pix=4, b=1):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(b, 3, 1, n_pix, generator=g, dtype=D) * 2
    reg = torch.randn(b, 1, n_pix, generator=g, dtype=D) * 3
    rain = torch.rand(b, 1, n_pix, generator=g, dtype=D) * 20
    cls = torch.randint(0, 3, (b, 1, n_pix), generator=g)
    return DualPrediction(logits, reg), rain, cls


class TestHeads:
    def test_shapes(self):
        heads = MultiTaskHeads(5)
        out = heads(torch.randn(5, 8, 8))
        assert out.cls_logits.shape == (3, 8, 8) and out.reg.shape == (8, 8)
        out = heads(torch.randn(2, 5, 8, 8))
        assert out.cls_logits.shape == (2, 3, 8, 8) and out.reg.shape == (2, 8, 8)

    def test_zero_heads_uniform(self):
        heads = MultiTaskHeads(4)
        for p in heads.parameters():
            torch.nn.init.zeros_(p)
        out = heads(torch.zeros(4, 3, 3))
        assert torch.equal(out.cls_logits, torch.zeros(3, 3, 3))
        assert torch.allclose(out.probabilities(), torch.full((3, 3, 3), 1 / 3))

    def test_deterministic(self):
        torch.manual_seed(0)
        heads = MultiTaskHeads(4)
        x = torch.randn(4, 5, 5)
        assert torch.equal(heads(x).cls_logits, heads(x).cls_logits)


class TestLoss:
    def test_uniform_single_pixel_ln3(self):
        pred = DualPrediction(torch.zeros(3, 1, 1, dtype=D), torch.zeros(1, 1, dtype=D))
        cfg = HybridLossConfig(class_weights=(1, 1, 1), alpha=0.0)
        for c in range(3):
            total, _, _ = hybrid_loss(pred, torch.zeros(1, 1, dtype=D), torch.tensor([[c]]), cfg)
            assert abs(total.item() - math.log(3)) < 1e-12

    def test_alpha_adds_900(self):
        pred = DualPrediction(torch.tensor([0.3, -1.0, 2.0], dtype=D).view(3, 1, 1),
                              torch.full((1, 1), 2.0, dtype=D))
        rain = torch.full((1, 1), 5.0, dtype=D)
        cls = torch.tensor([[1]])
        base, l_cls, _ = hybrid_loss(pred, rain, cls, HybridLossConfig(alpha=0.0))
        total, _, _ = hybrid_loss(pred, rain, cls, HybridLossConfig(alpha=100.0))
        assert total.item() == l_cls.item() + 900.0
        assert base.item() == l_cls.item()

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_scalar(self, seed):
        pred, rain, cls = instance(seed)
        cfg = HybridLossConfig(class_weights=(1, 5, 30), alpha=100.0)
        total, l_cls, l_reg = hybrid_loss(pred, rain, cls, cfg)
        lg = pred.cls_logits[0, :, 0].T.tolist()
        ref = scalar_hybrid(lg, pred.reg.flatten().tolist(), rain.flatten().tolist(),
                            cls.flatten().tolist(), (1, 5, 30), 100.0)
        for got, want in zip((total, l_cls, l_reg), ref):
            assert abs(got.item() - want) / abs(want) < 1e-10

    def test_mean_reduction(self):
        pred, rain, cls = instance(3, n_pix=8)
        s = hybrid_loss(pred, rain, cls, HybridLossConfig())
        m = hybrid_loss(pred, rain, cls, HybridLossConfig(reduction="mean"))
        assert torch.allclose(m[1] * 8, s[1]) and torch.allclose(m[2] * 8, s[2])

    def test_regression_off(self):
        pred, rain, cls = instance(1)
        total, l_cls, _ = hybrid_loss(pred, rain, cls, HybridLossConfig(enable_regression_branch=False))
        assert total.item() == l_cls.item()

    def test_log1p_target(self):
        pred, rain, cls = instance(2)
        _, _, l_reg = hybrid_loss(pred, rain, cls, HybridLossConfig(log1p_target=True))
        assert torch.allclose(l_reg, ((pred.reg - torch.log1p(rain)) ** 2).sum())

    def test_unweighted_equals_reference_ce(self):
        pred, rain, cls = instance(4, n_pix=16, b=2)
        total, _, _ = hybrid_loss(pred, rain, cls, HybridLossConfig(alpha=0.0, enable_weighting=False))
        ref = F.cross_entropy(pred.cls_logits, cls, reduction="sum")
        assert torch.allclose(total, ref, rtol=1e-15, atol=0)

    def test_bad_class(self):
        pred, rain, cls = instance(0)
        cls[0, 0, 2] = 3
        with pytest.raises(LossError, match="3"):
            hybrid_loss(pred, rain, cls, HybridLossConfig())

    def test_nonfinite(self):
        pred, rain, cls = instance(0)
        pred.reg[0, 0, 0] = float("nan")
        with pytest.raises(FloatingPointError):
            hybrid_loss(pred, rain, cls, HybridLossConfig())

    def test_config_validation(self):
        with pytest.raises(LossError):
            HybridLossConfig(class_weights=(1, 0, 3))
        with pytest.raises(LossError):
            HybridLossConfig(alpha=-1)
        with pytest.raises(LossError):
            HybridLossConfig(reduction="max")

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 7))
    def test_additive_over_pixels(self, seed, split):
        pred, rain, cls = instance(seed, n_pix=8)
        cfg = HybridLossConfig()
        whole = hybrid_loss(pred, rain, cls, cfg)[0]
        a = hybrid_loss(DualPrediction(pred.cls_logits[..., :split], pred.reg[..., :split]),
                        rain[..., :split], cls[..., :split], cfg)[0]
        b = hybrid_loss(DualPrediction(pred.cls_logits[..., split:], pred.reg[..., split:]),
                        rain[..., split:], cls[..., split:], cfg)[0]
        assert torch.allclose(whole, a + b, rtol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 100))
    def test_weight_scaling(self, seed, lam):
        pred, rain, cls = instance(seed)
        w = (1.0, 5.0, 30.0)
        a = hybrid_loss(pred, rain, cls, HybridLossConfig(class_weights=w))[1]
        b = hybrid_loss(pred, rain, cls, HybridLossConfig(class_weights=tuple(lam * v for v in w)))[1]
        assert torch.allclose(b, lam * a, rtol=1e-12)


class TestGradients:
    def test_reg_gradient_closed_form(self):
        pred, rain, cls = instance(5, n_pix=6)
        reg = pred.reg.clone().requires_grad_(True)
        total, _, _ = hybrid_loss(DualPrediction(pred.cls_logits, reg), rain, cls, HybridLossConfig(alpha=100.0))
        (g,) = torch.autograd.grad(total, reg)
        assert torch.allclose(g, 2 * 100.0 * (reg - rain), rtol=1e-14, atol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_finite_differences(self, seed):
        pred, rain, cls = instance(seed)
        cfg = HybridLossConfig(alpha=100.0)
        logits = pred.cls_logits.clone().requires_grad_(True)
        reg = pred.reg.clone().requires_grad_(True)

        def f(lg, rg):
            return hybrid_loss(DualPrediction(lg, rg), rain, cls, cfg)[0]

        g_lg, g_rg = torch.autograd.grad(f(logits, reg), (logits, reg))
        h = 1e-6
        worst = 0.0
        with torch.no_grad():
            for t, g in ((logits, g_lg), (reg, g_rg)):
                base = t.detach().clone()
                num = torch.empty_like(base)
                for i in range(base.numel()):
                    up, down = base.clone(), base.clone()
                    up.view(-1)[i] += h
                    down.view(-1)[i] -= h
                    args_up = (up, reg.detach()) if t is logits else (logits.detach(), up)
                    args_dn = (down, reg.detach()) if t is logits else (logits.detach(), down)
                    num.view(-1)[i] = (f(*args_up) - f(*args_dn)) / (2 * h)
                scale = max(g.abs().max().item(), num.abs().max().item())
                worst = max(worst, (g - num).abs().max().item() / scale)
        assert worst < 1e-4


class TestPredictClasses:
    def test_argmax(self):
        p = DualPrediction(torch.tensor([0.0, 1.0, -1.0]).view(3, 1, 1), torch.zeros(1, 1))
        assert predict_classes(p).item() == 1

    def test_tie_goes_high(self):
        p = DualPrediction(torch.zeros(3, 2, 2), torch.zeros(2, 2))
        assert (predict_classes(p) == 2).all()
        p = DualPrediction(torch.tensor([1.0, 1.0, 0.0]).view(3, 1, 1), torch.zeros(1, 1))
        assert predict_classes(p).item() == 1

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-50, 50))
    def test_shift_invariance(self, seed, c):
        g = torch.Generator().manual_seed(seed)
        logits = torch.randn(2, 3, 4, 4, generator=g, dtype=D)
        a = predict_classes(DualPrediction(logits, torch.zeros(2, 4, 4)))
        b = predict_classes(DualPrediction(logits + c, torch.zeros(2, 4, 4)))
        assert torch.equal(a, b)

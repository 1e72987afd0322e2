import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from hetmt.errors import LossInputError
from hetmt.loss import (
    LOGVAR_CLAMP,
    classification_nll,
    joint_hetero_loss,
    joint_homo_loss,
    regression_nll,
    scaled_softmax,
    single_task_loss,
)
from hetmt.model import DualTaskOutput


def _map(value):
    return torch.tensor([[[[float(value)]]]], dtype=torch.float64)


def _logits(*values):
    return torch.tensor(values, dtype=torch.float64).reshape(1, len(values), 1, 1)


def _label(c):
    return torch.tensor([[[c]]], dtype=torch.long)


class TestRegressionNll:
    @pytest.mark.parametrize(
        "y, f, s, expected",
        [(1.0, 1.0, 0.0, 0.0), (3.0, 1.0, 0.0, 2.0), (2.0, 0.0, math.log(2.0), 1.0 + math.log(2.0))],
    )
    def test_hand_computed(self, y, f, s, expected):
        loss_map, mean = regression_nll(_map(y), _map(f), _map(s))
        assert float(mean) == pytest.approx(expected, rel=1e-6, abs=1e-12)
        assert loss_map.shape == (1, 1, 1, 1)

    def test_shape_mismatch(self):
        with pytest.raises(LossInputError):
            regression_nll(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 3), torch.zeros(1, 1, 2, 2))

    def test_non_finite_input(self):
        y = torch.tensor([[[[float("nan")]]]])
        with pytest.raises(LossInputError):
            regression_nll(y, torch.zeros_like(y), torch.zeros_like(y))

    def test_argmin_by_grid_search(self):
        residuals = torch.tensor([0.5, 1.0, 3.0, 7.0], dtype=torch.float64).reshape(1, 1, 2, 2)
        grid = torch.linspace(-6.0, 6.0, 120001, dtype=torch.float64)
        for r in residuals.flatten():
            values = 0.5 * torch.exp(-grid) * r**2 + grid
            best = float(grid[torch.argmin(values)])
            assert best == pytest.approx(math.log(float(r) ** 2 / 2.0), abs=2e-4)

    def test_optimum_loss_value(self):
        r = 3.0
        s = math.log(r**2 / 2.0)
        _, mean = regression_nll(_map(r), _map(0.0), _map(s))
        assert float(mean) == pytest.approx(1.0 + math.log(r**2 / 2.0))

    def test_monotone_in_residual(self):
        residuals = torch.linspace(0.0, 5.0, 50, dtype=torch.float64).reshape(1, 1, 5, 10)
        loss_map, _ = regression_nll(residuals, torch.zeros_like(residuals), torch.full_like(residuals, 0.3))
        assert torch.all(torch.diff(loss_map.flatten()) > 0)

    def test_gradcheck(self):
        gen = torch.Generator().manual_seed(0)
        args = [torch.randn(1, 1, 3, 3, generator=gen, dtype=torch.float64, requires_grad=True) for _ in range(3)]
        assert torch.autograd.gradcheck(lambda *a: regression_nll(*a)[1], args, eps=1e-5, rtol=1e-4, atol=1e-8)


class TestScaledSoftmax:
    def test_divisor_one_is_plain_softmax(self):
        p = scaled_softmax(_logits(1.0, 0.0), _map(math.log(0.5)))
        assert p.flatten().tolist() == pytest.approx([0.7310585786, 0.2689414214], abs=1e-9)

    def test_huge_variance_is_uniform(self):
        p = scaled_softmax(_logits(1.0, 0.0, -2.0), _map(math.log(1e6)))
        assert torch.max(torch.abs(p - 1.0 / 3.0)) < 1e-6

    def test_tiny_variance_is_one_hot(self):
        p = scaled_softmax(_logits(0.2, 0.5, 0.1), _map(-20.0))
        assert p.flatten().tolist() == pytest.approx([0.0, 1.0, 0.0], abs=1e-12)

    def test_equal_logits_any_variance(self):
        for s in (-5.0, 0.0, 5.0):
            assert scaled_softmax(_logits(0.0, 0.0), _map(s)).flatten().tolist() == pytest.approx([0.5, 0.5])

    def test_sums_to_one(self):
        gen = torch.Generator().manual_seed(0)
        logits = 10 * torch.randn(4, 6, 5, 5, generator=gen, dtype=torch.float64)
        s = torch.randn(4, 1, 5, 5, generator=gen, dtype=torch.float64)
        torch.testing.assert_close(scaled_softmax(logits, s).sum(dim=1), torch.ones(4, 5, 5, dtype=torch.float64))

    def test_gradcheck(self):
        gen = torch.Generator().manual_seed(1)
        logits = torch.randn(1, 3, 2, 2, generator=gen, dtype=torch.float64, requires_grad=True)
        s = torch.randn(1, 1, 2, 2, generator=gen, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(scaled_softmax, (logits, s), eps=1e-5, rtol=1e-4, atol=1e-8)


class TestClassificationNll:
    def test_hand_computed(self):
        _, mean = classification_nll(_logits(1.0, 0.0), _map(0.0), _label(0))
        assert float(mean) == pytest.approx(0.5 * -math.log(0.7310585786), rel=1e-6)
        _, mean = classification_nll(_logits(0.0, 0.0), _map(0.0), _label(0))
        assert float(mean) == pytest.approx(0.5 * math.log(2.0), rel=1e-6)

    def test_uses_unscaled_logits(self):
        s = math.log(3.0)
        _, mean = classification_nll(_logits(2.0, -1.0, 0.5), _map(s), _label(2))
        ce = float(F.cross_entropy(_logits(2.0, -1.0, 0.5), _label(2)))
        assert float(mean) == pytest.approx(0.5 * ce / 3.0 + s, rel=1e-9)

    def test_optimal_variance_is_half_the_cross_entropy(self):
        logits, target = _logits(0.3, 1.2), _label(0)
        ce = float(F.cross_entropy(logits, target))
        grid = torch.linspace(-4.0, 2.0, 60001, dtype=torch.float64)
        values = torch.stack([classification_nll(logits, _map(float(s)), target)[1] for s in grid[::100]])
        coarse = float(grid[::100][torch.argmin(values)])
        assert math.exp(coarse) == pytest.approx(ce / 2.0, rel=0.02)

    def test_label_out_of_range(self):
        with pytest.raises(LossInputError):
            classification_nll(_logits(1.0, 0.0), _map(0.0), _label(2))

    def test_gradcheck(self):
        gen = torch.Generator().manual_seed(2)
        logits = torch.randn(2, 4, 3, 3, generator=gen, dtype=torch.float64, requires_grad=True)
        s = torch.randn(2, 1, 3, 3, generator=gen, dtype=torch.float64, requires_grad=True)
        y2 = torch.randint(0, 4, (2, 3, 3), generator=gen)
        fn = lambda a, b: classification_nll(a, b, y2)[1]  # noqa: E731
        assert torch.autograd.gradcheck(fn, (logits, s), eps=1e-5, rtol=1e-4, atol=1e-8)


def _hetero_output():
    return DualTaskOutput(reg_mean=_map(1.0), reg_logvar=_map(0.0), seg_logits=_logits(1.0, 0.0), seg_logvar=_map(0.0))


class TestJointLosses:
    def test_components_and_total(self):
        breakdown = joint_hetero_loss(_hetero_output(), _map(3.0), _label(0))
        assert float(breakdown.reg_data_term) == pytest.approx(2.0)
        assert float(breakdown.reg_log_term) == 0.0
        assert float(breakdown.seg_data_term) == pytest.approx(0.1566, abs=1e-4)
        assert float(breakdown.seg_log_term) == 0.0
        assert float(breakdown.total) == pytest.approx(2.1566, abs=1e-4)

    def test_total_is_sum_of_parts(self):
        gen = torch.Generator().manual_seed(3)
        out = DualTaskOutput(
            reg_mean=torch.randn(2, 1, 4, 4, generator=gen),
            reg_logvar=torch.randn(2, 1, 4, 4, generator=gen),
            seg_logits=torch.randn(2, 6, 4, 4, generator=gen),
            seg_logvar=torch.randn(2, 1, 4, 4, generator=gen),
        )
        b = joint_hetero_loss(out, torch.randn(2, 1, 4, 4, generator=gen), torch.randint(0, 6, (2, 4, 4), generator=gen))
        assert float(b.total) == float(b.reg_data_term + b.reg_log_term + b.seg_data_term + b.seg_log_term)

    def test_missing_head(self):
        out = _hetero_output()
        out.seg_logvar = None
        with pytest.raises(LossInputError):
            joint_hetero_loss(out, _map(3.0), _label(0))

    def test_homo_with_unit_variances_is_half_mse_plus_half_ce(self):
        gen = torch.Generator().manual_seed(4)
        out = DualTaskOutput(reg_mean=torch.randn(2, 1, 3, 3, generator=gen), seg_logits=torch.randn(2, 4, 3, 3, generator=gen))
        y1 = torch.randn(2, 1, 3, 3, generator=gen)
        y2 = torch.randint(0, 4, (2, 3, 3), generator=gen)
        zero = torch.zeros(())
        b = joint_homo_loss(out, y1, y2, zero, zero)
        expected = 0.5 * F.mse_loss(out.reg_mean, y1) + 0.5 * F.cross_entropy(out.seg_logits, y2)
        torch.testing.assert_close(b.total, expected)

    def test_homo_equals_hetero_with_constant_maps(self):
        gen = torch.Generator().manual_seed(5)
        reg = torch.randn(1, 1, 4, 4, generator=gen, dtype=torch.float64)
        logits = torch.randn(1, 3, 4, 4, generator=gen, dtype=torch.float64)
        y1 = torch.randn(1, 1, 4, 4, generator=gen, dtype=torch.float64)
        y2 = torch.randint(0, 3, (1, 4, 4), generator=gen)
        s1, s2 = torch.tensor(0.7, dtype=torch.float64), torch.tensor(-0.4, dtype=torch.float64)
        homo = joint_homo_loss(DualTaskOutput(reg_mean=reg, seg_logits=logits), y1, y2, s1, s2)
        hetero_out = DualTaskOutput(reg, torch.full_like(reg, 0.7), logits, torch.full_like(reg, -0.4))
        torch.testing.assert_close(homo.total, joint_hetero_loss(hetero_out, y1, y2).total)

    def test_homo_gradient_wrt_s1(self):
        gen = torch.Generator().manual_seed(6)
        reg = torch.randn(1, 1, 4, 4, generator=gen, dtype=torch.float64)
        y1 = torch.randn(1, 1, 4, 4, generator=gen, dtype=torch.float64)
        logits = torch.randn(1, 2, 4, 4, generator=gen, dtype=torch.float64)
        y2 = torch.zeros(1, 4, 4, dtype=torch.long)
        s1 = torch.tensor(0.3, dtype=torch.float64, requires_grad=True)
        s2 = torch.tensor(0.0, dtype=torch.float64)
        joint_homo_loss(DualTaskOutput(reg_mean=reg, seg_logits=logits), y1, y2, s1, s2).total.backward()
        expected = -0.5 * math.exp(-0.3) * float(((y1 - reg) ** 2).mean()) + 1.0
        assert float(s1.grad) == pytest.approx(expected, rel=1e-9)

    def test_single_task_baselines(self):
        gen = torch.Generator().manual_seed(7)
        out = DualTaskOutput(reg_mean=torch.randn(2, 1, 3, 3, generator=gen))
        y1 = torch.randn(2, 1, 3, 3, generator=gen)
        b = single_task_loss(out, y1, None, "none", ("reg",))
        torch.testing.assert_close(b.total, F.mse_loss(out.reg_mean, y1))
        assert float(b.seg_data_term) == 0.0

        seg = DualTaskOutput(seg_logits=torch.randn(2, 3, 3, 3, generator=gen), seg_logvar=torch.zeros(2, 1, 3, 3))
        y2 = torch.randint(0, 3, (2, 3, 3), generator=gen)
        b = single_task_loss(seg, None, y2, "hetero", ("seg",))
        torch.testing.assert_close(b.total, 0.5 * F.cross_entropy(seg.seg_logits, y2))


class TestClamp:
    def test_clamp_inactive_at_convergence(self):
        """Otimizando s livremente para um resíduo fixo, s converge para log(r^2/2) dentro da faixa."""
        r = torch.tensor([[[[0.2, 4.0]]]], dtype=torch.float64)
        s = torch.zeros_like(r, requires_grad=True)
        opt = torch.optim.Adam([s], lr=0.05)
        for _ in range(4000):
            opt.zero_grad()
            regression_nll(r, torch.zeros_like(r), s)[1].backward()
            opt.step()
        lo, hi = LOGVAR_CLAMP
        assert torch.all((s > lo) & (s < hi))
        np.testing.assert_allclose(s.detach().numpy().ravel(), np.log(r.numpy().ravel() ** 2 / 2.0), atol=5e-3)

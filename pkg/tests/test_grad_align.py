import math

import numpy as np
import pytest

from core.errors import DegenerateGradientError
from ml.grad_align import align, align_per_tensor, combine, grad_angle, project
from schemas.config import GAConfig


def _residual(g: np.ndarray, g_main: np.ndarray) -> float:
    along = (g @ g_main) / (g_main @ g_main) * g_main
    return float(np.linalg.norm(g - along))


class TestAngle:
    def test_right_angle(self):
        cos, degrees = grad_angle(np.array([1.0, 0.0]), np.array([0.0, 2.0]))
        assert cos == 0.0
        assert degrees == pytest.approx(90.0)

    def test_opposed(self):
        _, degrees = grad_angle(np.array([1.0, 1.0]), np.array([-3.0, -3.0]))
        assert degrees == pytest.approx(180.0)

    def test_degenerate_norm(self):
        with pytest.raises(DegenerateGradientError):
            grad_angle(np.zeros(3), np.ones(3))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            grad_angle(np.ones(3), np.ones(4))


class TestProjection:
    def test_project_onto_main(self):
        np.testing.assert_allclose(project(np.array([3.0, 4.0]), np.array([2.0, 0.0])), [3.0, 0.0])

    def test_soft_closed_form(self):
        g_main, g_aux = np.array([1.0, 0.0]), np.array([1.0, 1.0])
        res = align(g_main, g_aux, GAConfig(alpha=0.5, mode="soft"))
        expected = 0.5 + 0.5 * math.sqrt(2.0) * math.cos(math.radians(45.0)) / 1.0
        assert res.coefficient == pytest.approx(expected, abs=1e-12)
        np.testing.assert_allclose(res.gradient, expected * g_main)
        assert res.applied

    def test_soft_keeps_opposing_projection(self):
        g_main = np.array([2.0, 0.0])
        res = align(g_main, np.array([-4.0, 1.0]), GAConfig(alpha=0.5, mode="soft"))
        assert res.coefficient == pytest.approx(0.5 + 0.5 * (-8.0 / 4.0))

    def test_hard_drops_opposing_gradient(self):
        g_main = np.array([0.3, -1.2, 2.0])
        res = align(g_main, -g_main, GAConfig(mode="hard"))
        assert res.gradient is g_main
        assert res.degrees == pytest.approx(180.0)
        assert not res.applied

    def test_alpha_zero_is_main_gradient(self, rng):
        g_main, g_aux = rng.normal(size=5), rng.normal(size=5)
        res = align(g_main, g_aux, GAConfig(alpha=0.0, mode="soft"))
        np.testing.assert_array_equal(res.gradient, g_main)

    def test_random_pairs_stay_on_main_direction(self, rng):
        for _ in range(200):
            n = int(rng.integers(2, 12))
            g_main, g_aux = rng.normal(size=n), rng.normal(size=n)
            alpha = float(rng.uniform(0.0, 1.0))
            for mode in ("soft", "hard"):
                res = align(g_main, g_aux, GAConfig(alpha=alpha, mode=mode))
                assert _residual(res.gradient, g_main) <= 1e-10 * max(np.linalg.norm(res.gradient), 1.0)
            hard = align(g_main, g_aux, GAConfig(alpha=alpha, mode="hard"))
            assert hard.coefficient >= 1.0 - alpha - 1e-12


class TestModes:
    def test_off_returns_main_and_still_measures(self):
        g_main, g_aux = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        res = align(g_main, g_aux, GAConfig(mode="off"))
        assert res.gradient is g_main
        assert res.degrees == pytest.approx(90.0)
        assert combine(g_main, g_aux, GAConfig(mode="off")) is g_main

    def test_degenerate_falls_back_to_main(self):
        g_main = np.array([1.0, 2.0])
        res = align(g_main, np.zeros(2), GAConfig(mode="soft"))
        assert res.gradient is g_main
        assert math.isnan(res.degrees)

    def test_per_tensor_angles(self):
        main = {"a": np.array([[1.0, 0.0]]), "b": np.array([1.0])}
        aux = {"a": np.array([[-1.0, 0.0]]), "b": np.array([3.0])}
        combined, results = align_per_tensor(main, aux, GAConfig(alpha=0.5, mode="hard"))
        np.testing.assert_array_equal(combined["a"], main["a"])
        np.testing.assert_allclose(combined["b"], [0.5 + 0.5 * 3.0])
        assert combined["a"].shape == (1, 2)
        assert results["a"].degrees == pytest.approx(180.0)

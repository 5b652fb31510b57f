import numpy as np
import pytest

from curate import checks
from curate.packing import StochasticDepthConfig
from oracles import finite_difference


class TestHelpers:
    def test_central_difference_matches_oracle(self, rng):
        x = rng.standard_normal((3, 4))
        f = lambda v: float(np.sum(np.sin(v) * v))  # noqa: E731
        np.testing.assert_allclose(checks.central_difference(f, x), finite_difference(f, x), rtol=0, atol=1e-12)

    def test_central_difference_leaves_input_untouched(self, rng):
        x = rng.standard_normal(5)
        before = x.copy()
        checks.central_difference(lambda v: float(v @ v), x)
        np.testing.assert_array_equal(x, before)

    def test_relative_error_scale(self):
        assert checks.relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.5])) == pytest.approx(0.2)
        assert checks.relative_error(np.zeros(2), np.zeros(2)) == 0.0

    def test_koleo_gap(self):
        x = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
        # the middle point is equidistant from both others
        assert checks.koleo_min_gap(x) == pytest.approx(0.0, abs=1e-15)
        assert checks.koleo_min_gap(x[:2]) == np.inf

    def test_koleo_instances_have_gap(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            assert checks.koleo_min_gap(checks.koleo_instance(rng)) >= checks.KOLEO_GAP

    def test_prototype_score_shape_and_range(self):
        s = checks.prototype_scores(np.random.default_rng(1))
        assert 2 <= s.shape[0] <= 64 and 2 <= s.shape[1] <= 64
        assert np.abs(s).max() <= 1.0

    def test_mask_reference_with_no_drop(self, rng):
        x = rng.standard_normal((4, 3))
        got = checks.mask_reference(x, StochasticDepthConfig(0.0, 1), checks.rowwise_residual)
        np.testing.assert_allclose(got, x + checks.rowwise_residual(x))


class TestReports:
    def test_add_and_lines(self):
        rep = checks.BatteryReport("demo", 4)
        rep.add("small", 1e-9, 1e-6)
        rep.add("big", 2.0, 1.0, detail="x")
        rep.add("floor", 5.0, 3.0, le=False)
        assert [c.passed for c in rep.checks] == [True, False, True]
        assert not rep.passed
        lines = rep.lines()
        assert lines[0].startswith("PASS small") and lines[1].startswith("FAIL big") and lines[1].endswith(" x")

    def test_batteries_pass_across_seeds(self):
        for seed in (0, 5):
            assert checks.losses_battery(seed, n=10).passed
            assert checks.pack_battery(seed, n=10, depth_seeds=2000).passed

    def test_battery_is_deterministic(self):
        a = checks.losses_battery(3, n=5).to_json()
        b = checks.losses_battery(3, n=5).to_json()
        assert a == b

import math

import numpy as np
import pytest

from stdeform.errors import ContractError, NumericError, ParameterError
from stdeform.gradcheck import (
    CheckInstance,
    central_diff,
    check,
    make_composed_instance,
    make_dense_instance,
    make_interp_instance,
    make_stdeform_instance,
    run_suite,
)


class TestCentralDiff:
    def test_quadratic_is_exact(self):
        grad = central_diff(lambda th: float(np.sum(th**2)), np.array([1.0, 2.0]), 1e-5)
        assert np.allclose(grad, [2.0, 4.0], rtol=0, atol=1e-8)

    def test_constant_function(self):
        grad = central_diff(lambda th: 3.0, np.array([1.0, -1.0, 0.5]), 1e-5)
        assert np.array_equal(grad, np.zeros(3))

    def test_sine_closed_form(self):
        grad = central_diff(lambda th: math.sin(th[0]), np.array([0.3]), 1e-5)
        assert abs(grad[0] - math.cos(0.3)) < 1e-9

    def test_nonfinite_names_coordinate(self):
        def f(th):
            return math.inf if th[1] <= 0 else float(th[1])

        with pytest.raises(NumericError) as err:
            central_diff(f, np.array([1.0, 1e-5]), 1e-5)
        assert "(1,)" in str(err.value)

    def test_positive_step_required(self):
        with pytest.raises(ParameterError):
            central_diff(lambda th: 0.0, np.zeros(2), 0.0)


class TestCheck:
    def test_dense_instance_passes(self):
        reports = check(make_dense_instance(0), tolerance=1e-5)
        assert reports and all(r.passed for r in reports)

    def test_corrupted_backward_fails_with_worst_coordinate(self):
        inst = make_stdeform_instance(1)
        honest = inst.analytic

        def corrupted():
            grads = honest()
            flat = grads["wp"].reshape(-1)
            target = int(np.argmax(np.abs(flat)))
            flat[target] = -flat[target]
            return grads

        bad = CheckInstance(inst.name, inst.groups, inst.forward, corrupted)
        reports = {r.group: r for r in check(bad, tolerance=1e-5)}
        wp = reports["stdeform_attention/wp"]
        assert not wp.passed
        expected_worst = int(np.argmax(np.abs(honest()["wp"])))
        assert wp.worst_index == expected_worst
        others = [r for name, r in reports.items() if name != "stdeform_attention/wp"]
        assert all(r.passed for r in others)

    def test_zero_upstream_trivially_passes(self):
        theta = np.array([0.4, -0.2])
        inst = CheckInstance(
            "zero", {"theta": theta},
            forward=lambda: 0.0,
            analytic=lambda: {"theta": np.zeros(2)},
        )
        reports = check(inst)
        assert all(r.passed and r.max_abs_err == 0.0 for r in reports)

    def test_nondeterministic_forward_rejected(self):
        state = {"n": 0}

        def forward():
            state["n"] += 1
            return float(state["n"])

        inst = CheckInstance("flaky", {"theta": np.zeros(1)}, forward,
                             lambda: {"theta": np.zeros(1)})
        with pytest.raises(ContractError):
            check(inst)

    def test_reports_serialize(self):
        report = check(make_interp_instance(3))[0]
        d = report.as_dict()
        assert set(d) == {"group", "max_rel_err", "max_abs_err", "worst_index",
                          "tolerance", "passed"}


class TestSuite:
    def test_every_module_passes_at_default_tolerance(self):
        reports = run_suite(list(("interp", "dense_attention", "stdeform_attention")),
                            2, 7)
        assert all(r.passed for r in reports)

    def test_composed_instance_passes(self):
        reports = check(make_composed_instance(5), tolerance=1e-5)
        assert all(r.passed for r in reports)
        groups = {r.group for r in reports}
        # every parameter family of both layers is covered
        for fragment in ("enc0.attn.offset_w", "enc0.ffn.w1", "enc0.ln2.gamma",
                         "dec0.self.u", "dec0.ref_w", "dec0.cross.weight_b",
                         "queries", "clip"):
            assert any(fragment in g for g in groups), fragment

    def test_step_size_robustness(self):
        # Pass status is stable across h in {1e-4, 1e-5} for the shipped checks.
        for h in (1e-4, 1e-5):
            for factory in (make_interp_instance, make_dense_instance,
                            make_stdeform_instance):
                assert all(r.passed for r in check(factory(11), h=h))

    def test_unknown_module_rejected(self):
        with pytest.raises(ParameterError):
            run_suite(["interp", "nonsense"], 1, 0)

    def test_instances_are_seed_deterministic(self):
        a = check(make_stdeform_instance(42))
        b = check(make_stdeform_instance(42))
        assert [(r.group, r.max_rel_err) for r in a] == [(r.group, r.max_rel_err) for r in b]

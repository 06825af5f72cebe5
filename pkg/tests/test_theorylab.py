import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import assume, given, settings, strategies as st

from repedit.interventions import reft_apply
from repedit.numerics import spectral_norm
from repedit.theorylab import (
    InfeasibleInstance, PreconditionError, check_generality, construct_instance,
    displacement_lower_bound, radius_bound, random_instance, run_suite, verify_locality_violation,
    verify_proof_chain,
)


def test_radius_bound_values():
    assert abs(radius_bound(0.1, 0.1, 1.0) - 4 / 15) <= 1e-12
    assert radius_bound(0.2, 0.3, 0.5) == 0.0
    assert radius_bound(0.2, 0.2, 2.0) == pytest.approx(2 * radius_bound(0.1, 0.1, 1.0), abs=1e-15)
    with pytest.raises(ValueError):
        radius_bound(0.3, 0.3, 0.5)
    with pytest.raises(ValueError):
        radius_bound(0.0, 0.3, 0.5)


pos = st.floats(0.01, 2.0)


@settings(max_examples=200, deadline=None)
@given(pos, pos, st.floats(1.0, 20.0), st.floats(0.0, 5.0))
def test_radius_bound_monotone(e0, et, scale, bump):
    dist = (e0 + et) * scale
    assume(dist > e0 + et)
    base = radius_bound(e0, et, dist)
    assert radius_bound(e0, et, dist + bump) >= base
    # growth in eps0 holds only while epst (D - epst - 2 eps0) exceeds 2 eps0^2
    slope = et * (dist - et - 2 * e0) - 2 * e0 ** 2
    h = 1e-6 * e0
    if abs(slope) > 1e-3 and dist > e0 + h + et:
        step = radius_bound(e0 + h, et, dist) - radius_bound(e0 - h, et, dist)
        assert (step > 0) == (slope > 0)
    # the lower bound on displacement is the same quantity, rearranged
    assert abs(displacement_lower_bound(e0, et, dist) - base) <= 1e-12 * max(1.0, dist)


def test_construct_small_instance_invariants():
    inst = construct_instance(4, 2, 0.1, 0.1, 1.0, seed=0)
    err = inst.invariant_errors()
    assert err["separation_slack"] >= 0
    assert err["phi_h0_error"] <= 1e-9 and err["rowspace_residual"] <= 1e-9
    # the library ReFT operator agrees with the instance map
    h = torch.as_tensor(inst.h0)
    assert np.abs(reft_apply(inst.params(), h).numpy() - inst.t).max() <= 1e-9


def test_zero_perturbation_is_translation():
    inst = construct_instance(8, 3, 0.1, 0.3, 2.0, seed=1, perturb=False)
    assert np.abs(inst.H).max() == 0.0
    assert spectral_norm(np.eye(8) + inst.H) == pytest.approx(1.0, abs=1e-15)
    gen = check_generality(inst, 500, seed=0)
    assert gen.max_deviation == pytest.approx(inst.eps0, abs=1e-12) and gen.passed
    rep = verify_locality_violation(inst, 500)
    assert rep.min_displacement == pytest.approx(inst.dist, abs=1e-12)
    assert all(c.passed for c in verify_proof_chain(inst))


def test_construction_deterministic_and_controlled():
    a = construct_instance(16, 4, 0.1, 0.2, 1.5, seed=3)
    b = construct_instance(16, 4, 0.1, 0.2, 1.5, seed=3)
    for f in ("h0", "t", "R", "A", "b"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    h0 = np.ones(6)
    c = construct_instance(6, 2, 0.1, 0.1, 1.0, seed=0, h0=h0, direction=np.array([1.0, 0.0]))
    assert np.array_equal(c.h0, h0)
    assert np.allclose(c.t - h0, c.R[0], atol=1e-12)
    with pytest.raises(ValueError):
        construct_instance(6, 2, 0.1, 0.1, 1.0, direction=np.zeros(2))


def test_construction_errors():
    with pytest.raises(InfeasibleInstance):
        construct_instance(16, 4, 0.2, 0.1, 1.0)
    with pytest.raises(ValueError):
        construct_instance(16, 4, 0.5, 0.5, 0.9)
    with pytest.raises(ValueError):
        construct_instance(4, 5, 0.1, 0.1, 1.0)
    # full rank makes a contraction possible
    full = construct_instance(4, 4, 0.2, 0.1, 1.0, seed=0)
    assert spectral_norm(np.eye(4) + full.H) <= 0.5


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.5), st.floats(1.0, 4.0), st.floats(1.0, 10.0))
def test_construction_properties(seed, e0, ratio, spread):
    et = e0 * ratio
    inst = construct_instance(16, 4, e0, et, (e0 + et) * spread, seed=seed)
    assert inst.invariant_errors()["phi_h0_error"] <= 1e-9
    assert spectral_norm(np.eye(16) + inst.H) <= et / e0 + 1e-12


def test_generality_checks():
    inst = construct_instance(8, 2, 0.1, 0.25, 1.0, seed=2)
    one = check_generality(inst, 1)
    assert one.max_deviation <= 1e-12
    with pytest.raises(ValueError):
        check_generality(inst, 0)
    for s in range(100):
        k = random_instance(s)
        g = check_generality(k, 200, seed=s)
        if g.analytic_passed:
            assert g.passed
        assert g.max_deviation <= g.analytic_bound + 1e-12


def test_spec_sized_violation_example():
    inst = construct_instance(16, 4, 0.1, 0.1, 1.0, eps_ir=0.2, seed=0)
    rep = verify_locality_violation(inst, 1000)
    assert rep.counterexamples == 0 and rep.n_samples == 1000
    assert rep.min_displacement >= rep.eps_ir
    assert rep.min_displacement >= rep.analytic_lower_bound - 1e-9
    assert rep.radius_bound == pytest.approx(4 / 15, abs=1e-12)


def test_violation_preconditions():
    inst = construct_instance(16, 4, 0.1, 0.1, 1.0, seed=0)
    above = dataclasses.replace(inst, eps_ir=0.3)
    with pytest.raises(PreconditionError):
        verify_locality_violation(above)
    checks = {c.name: c for c in verify_proof_chain(above)}
    for name in ("separation", "generality_operator_norm", "operator_triangle"):
        assert checks[name].passed
    broken = dataclasses.replace(inst, A=inst.A + 0.5 * inst.R)
    with pytest.raises(PreconditionError):
        verify_locality_violation(broken)


def test_proof_chain_names_failures():
    inst = construct_instance(16, 4, 0.1, 0.2, 1.0, seed=5)
    wide = dataclasses.replace(inst, A=inst.A + 3.0 * inst.R)
    checks = {c.name: c for c in verify_proof_chain(wide)}
    assert not checks["generality_operator_norm"].passed
    assert [c.name for c in verify_proof_chain(inst)] == [
        "separation", "generality_operator_norm", "operator_triangle", "reverse_triangle", "final_bound"]


def test_randomized_suite():
    res = run_suite(100, 200)
    assert res["counterexample_count"] == 0 and res["all_checks_passed"]
    assert res["min_bound_gap"] >= -1e-9
    for inst in res["instances"]:
        assert all(c["slack"] >= 0 for c in inst["proof_chain"])
        assert abs(inst["proof_chain"][-1]["identity_residual"]) <= 1e-12

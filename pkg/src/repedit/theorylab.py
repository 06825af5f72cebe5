"""Numerical checks of the locality limit of linear subspace edits.

Setting: a linear edit ``Phi(h) = h + R^T (A h + b - R h)`` maps an old
representation ``h0`` to a target ``t`` at distance ``D``.  Knowledge is
stable inside balls of radius ``eps0`` around ``h0`` and ``epst`` around
``t``.  If every point of the ``h0`` ball lands in the ``t`` ball (the edit
generalizes), then any irrelevant representation on the sphere of radius
``eps_ir + eps0`` around ``h0`` is displaced by at least ``eps_ir``,
provided

    eps_ir < (D - (epst + eps0)) / (epst + 2 eps0) * eps0.

Everything here is plain numpy in float64.  With ``H = R^T (A - R)`` the
edit is ``Phi(h) = (I + H) h + R^T b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .interventions import InterventionParams
from .numerics import spectral_norm


class InfeasibleInstance(ValueError):
    pass


class PreconditionError(ValueError):
    pass


def radius_bound(eps0: float, epst: float, dist: float) -> float:
    """Largest irrelevant-ball radius for which the violation is guaranteed."""
    if eps0 <= 0 or epst <= 0:
        raise ValueError("stable-ball radii must be positive")
    if dist < eps0 + epst:
        raise ValueError("stable balls of h0 and t overlap")
    return (dist - (epst + eps0)) / (epst + 2.0 * eps0) * eps0


def displacement_lower_bound(eps0: float, epst: float, dist: float) -> float:
    """``D - (epst + eps0) (D + eps0) / (2 eps0 + epst)``; equals :func:`radius_bound`."""
    return dist - (epst + eps0) * (dist + eps0) / (2.0 * eps0 + epst)


@dataclass
class TheoremInstance:
    h0: np.ndarray
    t: np.ndarray
    R: np.ndarray
    A: np.ndarray
    b: np.ndarray
    eps0: float
    epst: float
    eps_ir: float
    seed: int | None = None

    @property
    def d(self) -> int:
        return self.h0.shape[0]

    @property
    def dist(self) -> float:
        return float(np.linalg.norm(self.t - self.h0))

    @property
    def H(self) -> np.ndarray:
        return self.R.T @ (self.A - self.R)

    def phi(self, h: np.ndarray) -> np.ndarray:
        """Linear edit applied to one vector or to rows of a matrix."""
        h = np.asarray(h, dtype=np.float64)
        return h + (h @ (self.A - self.R).T + self.b) @ self.R

    def params(self) -> InterventionParams:
        r, d = self.R.shape
        as_t = lambda x: torch.as_tensor(x, dtype=torch.float64)
        return InterventionParams(R=as_t(self.R), A=as_t(self.A), b=as_t(self.b),
                                  U=torch.zeros(0, d, dtype=torch.float64),
                                  c=torch.zeros(0, dtype=torch.float64), gate_mode="constant")

    def invariant_errors(self) -> dict[str, float]:
        """Residuals of the defining properties (all should be ~0 or nonnegative slack)."""
        diff = self.t - self.h0
        return {
            "separation_slack": self.dist - (self.eps0 + self.epst),
            "phi_h0_error": float(np.linalg.norm(self.phi(self.h0) - self.t)),
            "rowspace_residual": float(np.linalg.norm(diff - self.R.T @ (self.R @ diff))),
        }

    def to_dict(self) -> dict:
        return {"d": self.d, "r": int(self.R.shape[0]), "eps0": self.eps0, "epst": self.epst,
                "eps_ir": self.eps_ir, "dist": self.dist, "seed": self.seed}


def _orthonormal_rows(rng: np.random.Generator, r: int, d: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((d, r)))
    return q.T


def construct_instance(
    d: int = 16,
    r: int = 4,
    eps0: float = 0.1,
    epst: float = 0.1,
    dist: float = 1.0,
    eps_ir: float | None = None,
    seed: int = 0,
    h0: np.ndarray | None = None,
    direction: np.ndarray | None = None,
    perturb: bool = True,
    headroom: float = 0.9,
) -> TheoremInstance:
    """Build a linear edit with ``Phi(h0) = t`` that satisfies the generality premise.

    ``A = R + delta * Delta`` with Gaussian ``Delta`` (zero when ``perturb`` is
    false) and ``delta`` chosen so ``sigma_max(I + H) <= headroom * epst/eps0``
    whenever ``epst > eps0``.  The bias is solved from the target:
    ``b = R (t - h0 - H h0)``.  ``direction`` (coefficients in the row
    space of R) fixes where ``t`` lies; otherwise it is random.
    ``eps_ir`` defaults to half the radius bound.
    """
    if not 1 <= r <= d:
        raise ValueError("need 1 <= r <= d")
    rb = radius_bound(eps0, epst, dist)
    rng = np.random.default_rng(seed)
    R = _orthonormal_rows(rng, r, d)
    h0 = rng.standard_normal(d) if h0 is None else np.asarray(h0, dtype=np.float64)
    coef = rng.standard_normal(r) if direction is None else np.asarray(direction, dtype=np.float64)
    if coef.shape != (r,) or not np.any(coef):
        raise ValueError("direction must be a nonzero length-r coefficient vector")
    u = R.T @ coef
    t = h0 + dist * u / np.linalg.norm(u)

    ratio = epst / eps0
    A = R.copy()
    if ratio < 1.0:
        if r < d:
            # I + H is the identity on the orthogonal complement of rowspace(R)
            raise InfeasibleInstance(
                f"epst/eps0 = {ratio:.4g} < 1: the generality premise cannot hold for r < d")
        A = headroom * ratio * R
    elif perturb and ratio > 1.0:
        Delta = rng.standard_normal((r, d))
        G = R.T @ Delta
        delta = headroom * (ratio - 1.0) / spectral_norm(G)
        A = R + delta * Delta
    H = R.T @ (A - R)
    b = R @ (t - h0 - H @ h0)
    inst = TheoremInstance(h0, t, R, A, b, float(eps0), float(epst),
                           float(0.5 * rb if eps_ir is None else eps_ir), seed)
    if spectral_norm(np.eye(d) + H) > ratio + 1e-12:
        raise InfeasibleInstance("could not scale the perturbation under epst/eps0")
    err = inst.invariant_errors()
    if err["phi_h0_error"] > 1e-9 or err["rowspace_residual"] > 1e-9:
        raise InfeasibleInstance(f"construction failed its own invariants: {err}")
    return inst


def _sphere(rng: np.random.Generator, n: int, d: int, radius: float) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return radius * x / np.linalg.norm(x, axis=1, keepdims=True)


def _ball(rng: np.random.Generator, n: int, d: int, radius: float) -> np.ndarray:
    dirs = _sphere(rng, n, d, 1.0)
    return dirs * (radius * rng.random(n) ** (1.0 / d))[:, None]


@dataclass
class GeneralityReport:
    max_deviation: float
    passed: bool
    analytic_bound: float
    analytic_passed: bool
    n_samples: int


def check_generality(inst: TheoremInstance, n_samples: int = 1000, seed: int = 0) -> GeneralityReport:
    """Max ``|Phi(h) - t|`` over samples of the closed ball ``B(h0, eps0)``.

    The first sample is ``h0`` itself; of the rest, half lie on the sphere
    and half uniformly inside.  Sphere samples belong to the closure of the
    open ball, so the sampled check is non-strict up to rounding.  The
    analytic check ``sigma_max(I + H) eps0 <= epst`` covers the whole ball.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    rest = n_samples - 1
    n_sph = (rest + 1) // 2
    offs = np.vstack([np.zeros((1, inst.d)),
                      _sphere(rng, n_sph, inst.d, inst.eps0),
                      _ball(rng, rest - n_sph, inst.d, inst.eps0)])
    dev = np.linalg.norm(inst.phi(inst.h0 + offs) - inst.t, axis=1)
    bound = spectral_norm(np.eye(inst.d) + inst.H) * inst.eps0
    mx = float(dev.max())
    tol = 1e-12 * max(1.0, inst.epst)
    return GeneralityReport(mx, mx <= inst.epst + tol, bound, bound <= inst.epst + tol, n_samples)


@dataclass
class ViolationReport:
    n_samples: int
    eps_ir: float
    min_displacement: float
    counterexamples: int
    analytic_lower_bound: float
    radius_bound: float
    sigma_I_plus_H: float
    sigma_H: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def verify_locality_violation(inst: TheoremInstance, n_samples: int = 1000, seed: int = 0) -> ViolationReport:
    """Displacement of irrelevant representations on the sphere ``|h_ir - h0| = eps_ir + eps0``."""
    rb = radius_bound(inst.eps0, inst.epst, inst.dist)
    if not inst.eps_ir < rb:
        raise PreconditionError(f"eps_ir={inst.eps_ir:.6g} is not below the radius bound {rb:.6g}")
    gen = check_generality(inst, n_samples=max(2, min(n_samples, 256)), seed=seed)
    if not (gen.analytic_passed and gen.passed):
        raise PreconditionError("the edit does not satisfy the generality premise")
    rng = np.random.default_rng(seed + 1)
    h_ir = inst.h0 + _sphere(rng, n_samples, inst.d, inst.eps_ir + inst.eps0)
    disp = np.linalg.norm(inst.phi(h_ir) - h_ir, axis=1)
    return ViolationReport(
        n_samples=n_samples,
        eps_ir=inst.eps_ir,
        min_displacement=float(disp.min()),
        counterexamples=int((disp < inst.eps_ir).sum()),
        analytic_lower_bound=displacement_lower_bound(inst.eps0, inst.epst, inst.dist),
        radius_bound=rb,
        sigma_I_plus_H=spectral_norm(np.eye(inst.d) + inst.H),
        sigma_H=spectral_norm(inst.H),
    )


@dataclass
class InequalityCheck:
    name: str
    slack: float
    passed: bool
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "slack": self.slack, "passed": self.passed, **self.detail}


def verify_proof_chain(inst: TheoremInstance, n_samples: int = 100, seed: int = 0) -> list[InequalityCheck]:
    """Evaluate each inequality of the argument numerically; slack >= 0 means it holds.

    (i)   separation            D >= epst + eps0
    (ii)  generality norm       sigma(I + H) <= epst / eps0
    (iii) triangle inequality   sigma(H) <= epst / eps0 + 1
    (iv)  reverse triangle      |Phi(h_ir) - h_ir| >= |D - |H (h_ir - h0)||, and
                                |H (h_ir - h0)| < D so the absolute value drops
    (v)   final bound           |Phi(h_ir) - h_ir| - eps_ir >= 0 at eps_ir equal
                                to the radius bound
    """
    e0, et, D = inst.eps0, inst.epst, inst.dist
    d = inst.d
    H = inst.H
    s_ih = spectral_norm(np.eye(d) + H)
    s_h = spectral_norm(H)
    tol = 1e-12 * max(1.0, et / e0)
    checks = [
        InequalityCheck("separation", D - (et + e0), D >= et + e0),
        InequalityCheck("generality_operator_norm", et / e0 - s_ih, s_ih <= et / e0 + tol,
                        {"sigma_I_plus_H": s_ih}),
        InequalityCheck("operator_triangle", et / e0 + 1.0 - s_h, s_h <= et / e0 + 1.0 + tol,
                        {"sigma_H": s_h}),
    ]
    rng = np.random.default_rng(seed)
    if D >= et + e0:
        rb = radius_bound(e0, et, D)
        off = _sphere(rng, n_samples, d, inst.eps_ir + e0)
        h_ir = inst.h0 + off
        disp = np.linalg.norm(inst.phi(h_ir) - h_ir, axis=1)
        hn = np.linalg.norm(off @ H.T, axis=1)
        rev = float((disp - np.abs(D - hn)).min())
        drop = float((D - hn).min())
        checks.append(InequalityCheck("reverse_triangle", min(rev, drop), rev >= -1e-12 and drop > 0,
                                      {"reverse_triangle_slack": rev, "abs_drop_slack": drop}))
        if et / e0 >= 1.0:
            off_b = _sphere(rng, n_samples, d, rb + e0)
            hb = inst.h0 + off_b
            final = float((np.linalg.norm(inst.phi(hb) - hb, axis=1) - rb).min())
            identity = displacement_lower_bound(e0, et, D) - rb
            checks.append(InequalityCheck("final_bound", final, final >= 0.0,
                                          {"identity_residual": identity}))
        else:
            checks.append(InequalityCheck("final_bound", float("nan"), False,
                                          {"reason": "generality premise infeasible"}))
    else:
        for name in ("reverse_triangle", "final_bound"):
            checks.append(InequalityCheck(name, float("nan"), False, {"reason": "balls overlap"}))
    return checks


def random_instance(seed: int, d: int = 16, r: int = 4) -> TheoremInstance:
    """Randomized instance inside the theorem's hypotheses."""
    rng = np.random.default_rng(10_000 + seed)
    eps0 = float(rng.uniform(0.05, 0.5))
    epst = eps0 * float(rng.uniform(1.0, 3.0))
    dist = (eps0 + epst) * float(rng.uniform(1.2, 10.0))
    rb = radius_bound(eps0, epst, dist)
    eps_ir = rb * float(rng.uniform(0.05, 0.99))
    return construct_instance(d, r, eps0, epst, dist, eps_ir=eps_ir, seed=seed)


def run_suite(n_instances: int = 100, n_samples: int = 1000, d: int = 16, r: int = 4,
              seed: int = 0) -> dict:
    """Violation and proof-chain checks over randomized instances; JSON-ready."""
    per = []
    for i in range(n_instances):
        inst = random_instance(seed + i, d, r)
        rep = verify_locality_violation(inst, n_samples, seed=seed + i)
        chain = verify_proof_chain(inst, seed=seed + i)
        per.append({
            "instance": inst.to_dict(),
            "violation": rep.to_dict(),
            "bound_gap": rep.min_displacement - rep.analytic_lower_bound,
            "proof_chain": [c.to_dict() for c in chain],
            "passed": rep.counterexamples == 0 and all(c.passed for c in chain)
                      and rep.min_displacement >= rep.analytic_lower_bound - 1e-9,
        })
    return {
        "n_instances": n_instances,
        "n_samples": n_samples,
        "counterexample_count": sum(p["violation"]["counterexamples"] for p in per),
        "min_bound_gap": min(p["bound_gap"] for p in per) if per else None,
        "all_checks_passed": all(p["passed"] for p in per),
        "instances": per,
    }

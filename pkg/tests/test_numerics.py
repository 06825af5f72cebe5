import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from repedit.numerics import (
    AdamWState, adamw_step, as_tensor, backward, finite_difference_grad, orthonormality_error,
    orthonormalize, spectral_norm,
)

from _util import rel_err


def test_backward_square():
    x = as_tensor(3.0, requires_grad=True)
    g = backward(x * x, {"x": x})
    assert float(g["x"]) == 6.0


def test_backward_constant_and_unused_param():
    x = as_tensor(2.0, requires_grad=True)
    y = as_tensor(1.0, requires_grad=True)
    g = backward(x * 0.0 + y, {"x": x, "y": y})
    assert float(g["x"]) == 0.0 and float(g["y"]) == 1.0
    z = as_tensor(5.0, requires_grad=True)
    assert float(backward(x * x, {"x": x, "z": z})["z"]) == 0.0


def test_backward_rejects_bad_input():
    x = as_tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        backward(x * 2)
    with pytest.raises(ValueError):
        backward(as_tensor(1.0))


def test_backward_without_params_returns_leaves():
    x = as_tensor([1.0, 2.0], requires_grad=True)
    g = backward((x ** 2).sum())
    assert torch.equal(g[id(x)], torch.tensor([2.0, 4.0], dtype=torch.float64))


def test_finite_difference_basic():
    g = finite_difference_grad(lambda x: (x ** 2).sum(), as_tensor([3.0]), eps=1e-5)
    assert abs(float(g[0]) - 6.0) < 1e-8
    assert torch.all(finite_difference_grad(lambda x: x.sum() * 0 + 4.0, as_tensor([1.0, 2.0])) == 0)
    with pytest.raises(ValueError):
        finite_difference_grad(lambda x: x.sum(), as_tensor([1.0]), eps=0.0)


def _composition(seed):
    gen = torch.Generator().manual_seed(seed)
    W = [torch.randn(5, 5, dtype=torch.float64, generator=gen) / 2 for _ in range(3)]

    def f(x):
        h = x
        for w in W:
            h = torch.tanh(w @ h)
        return (h ** 2).sum() + h.sum()

    return f, torch.randn(5, dtype=torch.float64, generator=gen)


@pytest.mark.parametrize("seed", range(100))
def test_backward_matches_finite_differences(seed):
    f, x0 = _composition(seed)
    x = x0.clone().requires_grad_(True)
    g = backward(f(x), {"x": x})["x"]
    assert rel_err(g, finite_difference_grad(f, x0, eps=1e-5)) <= 1e-4


def test_orthonormalize_examples():
    out = orthonormalize(as_tensor([[2.0, 0.0], [0.0, 3.0]]))
    assert torch.allclose(out, torch.eye(2, dtype=torch.float64), atol=1e-15)
    assert torch.allclose(orthonormalize(torch.eye(4, dtype=torch.float64)), torch.eye(4, dtype=torch.float64), atol=1e-15)


def test_orthonormalize_span_oracle():
    rng = np.random.default_rng(0)
    M = rng.standard_normal((3, 8))
    Q = orthonormalize(as_tensor(M)).numpy()
    assert np.abs(Q @ Q.T - np.eye(3)).max() <= 1e-10
    # projectors onto the row spaces agree
    P_in = np.linalg.pinv(M) @ M
    P_out = Q.T @ Q
    assert np.abs(P_in - P_out).max() <= 1e-10
    assert orthonormality_error(torch.as_tensor(Q)) <= 1e-10


def test_orthonormalize_errors():
    with pytest.raises(ValueError):
        orthonormalize(as_tensor([[1.0, 2.0], [2.0, 4.0]]))
    with pytest.raises(ValueError):
        orthonormalize(as_tensor(np.ones((3, 2))))
    with pytest.raises(ValueError):
        orthonormalize(as_tensor([1.0, 2.0]))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 4), st.integers(0, 2**31 - 1))
def test_orthonormalize_idempotent(r, extra, seed):
    d = r + extra
    M = torch.randn(r, d, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    Q = orthonormalize(M)
    assert (orthonormalize(Q) - Q).abs().max() <= 1e-12


def _deflation_svals(M: np.ndarray, iters: int = 3000) -> list[float]:
    """Singular values by power iteration on M^T M with deflation."""
    G = M.T @ M
    out = []
    rng = np.random.default_rng(1)
    for _ in range(min(M.shape)):
        v = rng.standard_normal(G.shape[0])
        for _ in range(iters):
            v = G @ v
            v /= np.linalg.norm(v)
        lam = float(v @ G @ v)
        out.append(math.sqrt(max(lam, 0.0)))
        G = G - lam * np.outer(v, v)
    return out


def test_spectral_norm_examples_and_oracle():
    assert spectral_norm(as_tensor(np.diag([3.0, 1.0]))) == pytest.approx(3.0, abs=1e-15)
    assert spectral_norm(np.eye(6)) == pytest.approx(1.0, abs=1e-15)
    M = np.random.default_rng(3).standard_normal((5, 5))
    oracle = _deflation_svals(M)[0]
    assert abs(spectral_norm(M) - oracle) / oracle <= 1e-8
    with pytest.raises(ValueError):
        spectral_norm(np.zeros((0, 3)))


@settings(max_examples=50, deadline=None)
@given(st.floats(-50, 50, allow_nan=False), st.integers(0, 2**31 - 1))
def test_spectral_norm_scaling(c, seed):
    M = np.random.default_rng(seed).standard_normal((4, 3))
    assert abs(spectral_norm(c * M) - abs(c) * spectral_norm(M)) <= 1e-10 * max(1.0, abs(c) * spectral_norm(M))


def test_adamw_zero_gradient_is_noop():
    p = {"w": as_tensor([1.0, -2.0])}
    new, st_ = adamw_step(p, {"w": torch.zeros(2, dtype=torch.float64)}, AdamWState(lr=0.1))
    assert torch.equal(new["w"], p["w"]) and st_.step == 1


def test_adamw_hand_evaluated_step():
    lr, b1, b2, eps, wd = 0.1, 0.9, 0.999, 1e-8, 0.01
    p0, g = 0.5, 1.0
    new, st_ = adamw_step({"w": as_tensor([p0])}, {"w": as_tensor([g])},
                          AdamWState(lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=wd))
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    mhat, vhat = m / (1 - b1), v / (1 - b2)
    expected = p0 * (1 - lr * wd) - lr * mhat / (math.sqrt(vhat) + eps)
    assert float(new["w"][0]) == pytest.approx(expected, abs=1e-15)
    assert st_.step == 1
    # second step: recurrence continues from the stored moments
    new2, st2 = adamw_step(new, {"w": as_tensor([g])}, st_)
    m2, v2 = b1 * m + (1 - b1) * g, b2 * v + (1 - b2) * g * g
    e2 = expected * (1 - lr * wd) - lr * (m2 / (1 - b1 ** 2)) / (math.sqrt(v2 / (1 - b2 ** 2)) + eps)
    assert float(new2["w"][0]) == pytest.approx(e2, abs=1e-15) and st2.step == 2


def test_adamw_deterministic_and_shape_checked():
    p = {"w": as_tensor([[1.0, 2.0]])}
    g = {"w": as_tensor([[0.3, -0.7]])}
    a, _ = adamw_step(p, g, AdamWState(lr=0.01))
    b, _ = adamw_step(p, g, AdamWState(lr=0.01))
    assert torch.equal(a["w"], b["w"])
    with pytest.raises(ValueError):
        adamw_step(p, {"w": as_tensor([1.0])}, AdamWState(lr=0.01))
    with pytest.raises(ValueError):
        adamw_step(p, {"v": as_tensor([[1.0, 2.0]])}, AdamWState(lr=0.01))

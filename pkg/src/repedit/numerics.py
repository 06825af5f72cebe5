"""Dense float64 numerics: gradients, orthonormalization, spectral norms, AdamW.

Tensors are plain ``torch.Tensor`` objects in float64; torch's autograd
tape supplies reverse-mode differentiation.  Everything here is CPU-only
and deterministic for a fixed thread count.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import torch

DTYPE = torch.float64


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=DTYPE).clone()
    t.requires_grad_(requires_grad)
    return t


def _leaves(loss: torch.Tensor) -> list[torch.Tensor]:
    """Collect requires_grad leaves reachable from ``loss`` in tape order."""
    seen: set[int] = set()
    out: list[torch.Tensor] = []
    stack = [loss.grad_fn]
    visited_fns: set[int] = set()
    while stack:
        fn = stack.pop()
        if fn is None or id(fn) in visited_fns:
            continue
        visited_fns.add(id(fn))
        var = getattr(fn, "variable", None)
        if var is not None and id(var) not in seen:
            seen.add(id(var))
            out.append(var)
        for nxt, _ in fn.next_functions:
            stack.append(nxt)
    return out


def backward(
    loss: torch.Tensor,
    params: Mapping[str, torch.Tensor] | None = None,
) -> dict:
    """Reverse-mode gradients of a scalar ``loss``.

    With ``params`` the result is keyed by the same names; parameters the
    loss does not depend on get zero gradients.  Without ``params`` every
    requires_grad leaf on the tape is returned, keyed by ``id(leaf)``.
    The tape is retained so the same loss may be differentiated again.
    """
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise ValueError("backward expects a scalar tensor")
    if loss.grad_fn is None:
        raise ValueError("loss is not attached to a live gradient tape")
    if params is None:
        leaves = _leaves(loss)
        keys = [id(t) for t in leaves]
    else:
        keys = list(params)
        leaves = [params[k] for k in keys]
    grads = torch.autograd.grad(loss.reshape(()), leaves, retain_graph=True, allow_unused=True)
    return {
        k: (torch.zeros_like(p) if g is None else g.detach())
        for k, p, g in zip(keys, leaves, grads)
    }


def finite_difference_grad(
    f: Callable[[torch.Tensor], torch.Tensor | float],
    x: torch.Tensor,
    eps: float = 1e-5,
) -> torch.Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    base = x.detach().clone()
    flat = base.reshape(-1)
    grad = torch.zeros_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = float(f(base))
            flat[i] = orig - eps
            fm = float(f(base))
            flat[i] = orig
            grad[i] = (fp - fm) / (2.0 * eps)
    return grad.reshape(x.shape)


def orthonormalize(M: torch.Tensor, tol: float = 1e-8) -> torch.Tensor:
    """Nearest matrix with orthonormal rows (polar factor ``U V^T`` of ``M``).

    The row space is preserved.  Rank-deficient input, judged by the ratio
    of smallest to largest singular value, raises ``ValueError``.
    """
    if M.dim() != 2:
        raise ValueError("orthonormalize expects a 2-d matrix")
    r, d = M.shape
    if r > d:
        raise ValueError(f"cannot orthonormalize {r} rows in dimension {d}")
    M = M.detach().to(DTYPE)
    U, S, Vh = torch.linalg.svd(M, full_matrices=False)
    if S.numel() == 0 or S[0] == 0 or (S[-1] / S[0]) < tol:
        raise ValueError("rows are not linearly independent")
    return U @ Vh


def orthonormality_error(R: torch.Tensor) -> float:
    """``max |R R^T - I|`` entrywise."""
    G = R.detach() @ R.detach().T
    return float((G - torch.eye(G.shape[0], dtype=G.dtype)).abs().max())


def spectral_norm(M) -> float:
    """Largest singular value."""
    M = torch.as_tensor(M, dtype=DTYPE).detach()
    if M.numel() == 0:
        raise ValueError("spectral norm of an empty matrix")
    if M.dim() == 1:
        M = M.reshape(1, -1)
    return float(torch.linalg.svdvals(M)[0])


@dataclass
class AdamWState:
    """First/second moments and hyper-parameters for decoupled-decay Adam."""

    lr: float = 3e-4
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    def copy(self) -> "AdamWState":
        return AdamWState(
            self.lr, self.weight_decay, self.beta1, self.beta2, self.eps, self.step,
            {k: t.clone() for k, t in self.m.items()},
            {k: t.clone() for k, t in self.v.items()},
        )


def adamw_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    state: AdamWState,
) -> tuple[dict[str, torch.Tensor], AdamWState]:
    """One AdamW update; returns new parameter tensors and a new state.

    Inputs are not modified.  Returned parameters are detached leaves with
    the same ``requires_grad`` flag as the inputs.
    """
    if set(params) != set(grads):
        raise ValueError("params and grads must have the same keys")
    new_state = state.copy()
    new_state.step += 1
    t = new_state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    out: dict[str, torch.Tensor] = {}
    with torch.no_grad():
        for name in params:
            p, g = params[name].detach(), grads[name].detach()
            if p.shape != g.shape:
                raise ValueError(f"shape mismatch for {name}: {tuple(p.shape)} vs {tuple(g.shape)}")
            m = new_state.m.get(name)
            v = new_state.v.get(name)
            if m is None:
                m, v = torch.zeros_like(p), torch.zeros_like(p)
            elif m.shape != p.shape:
                raise ValueError(f"moment shape mismatch for {name}")
            m = state.beta1 * m + (1.0 - state.beta1) * g
            v = state.beta2 * v + (1.0 - state.beta2) * g * g
            new_state.m[name], new_state.v[name] = m, v
            step_dir = (m / bc1) / (torch.sqrt(v / bc2) + state.eps)
            q = p * (1.0 - state.lr * state.weight_decay) - state.lr * step_dir
            out[name] = q.clone().requires_grad_(params[name].requires_grad)
    return out, new_state


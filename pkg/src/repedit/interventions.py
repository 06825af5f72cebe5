"""Low-rank representation interventions: the linear subspace edit and its
basis-gated generalization.

For a representation ``h`` and a rank-``r`` subspace with orthonormal rows
``R``, the linear edit is ``h + R^T (A h + b - R h)``.  The gated edit
scales the update along each basis ``r_k`` by ``w_k(h) = sigmoid(u_k . h + c_k)``.
With every weight fixed at one the two coincide.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import torch

from .numerics import DTYPE, orthonormalize

GATE_MODES = ("constant", "scalar", "per_basis")


@dataclass
class InterventionParams:
    """Learnable tensors of one intervened layer.

    ``U``/``c`` hold the gate's affine form: ``r`` rows in ``per_basis`` mode,
    a single shared row in ``scalar`` mode, none in ``constant`` mode.
    """

    R: torch.Tensor
    A: torch.Tensor
    b: torch.Tensor
    U: torch.Tensor
    c: torch.Tensor
    gate_mode: str = "per_basis"

    def __post_init__(self):
        if self.gate_mode not in GATE_MODES:
            raise ValueError(f"unknown gate mode {self.gate_mode!r}")
        r, d = self.R.shape
        if not 1 <= r <= d:
            raise ValueError(f"rank must satisfy 1 <= r <= d, got r={r}, d={d}")
        if self.A.shape != (r, d) or self.b.shape != (r,):
            raise ValueError("A must be r x d and b length r")
        g = gate_rows(self.gate_mode, r)
        if self.U.shape != (g, d) or self.c.shape != (g,):
            raise ValueError(f"{self.gate_mode} gate needs U of shape ({g}, {d})")

    @property
    def rank(self) -> int:
        return self.R.shape[0]

    @property
    def dim(self) -> int:
        return self.R.shape[1]

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {"R": self.R, "A": self.A, "b": self.b}
        if self.gate_mode != "constant":
            out["U"] = self.U
            out["c"] = self.c
        return out

    def replace(self, **tensors) -> "InterventionParams":
        kw = {"R": self.R, "A": self.A, "b": self.b, "U": self.U, "c": self.c}
        kw.update(tensors)
        return InterventionParams(gate_mode=self.gate_mode, **kw)

    def detached(self) -> "InterventionParams":
        return self.replace(**{k: t.detach().clone() for k, t in
                               {"R": self.R, "A": self.A, "b": self.b, "U": self.U, "c": self.c}.items()})

    def trainable(self) -> "InterventionParams":
        p = self.detached()
        for t in p.tensors().values():
            t.requires_grad_(True)
        return p


def gate_rows(gate_mode: str, rank: int) -> int:
    return {"constant": 0, "scalar": 1, "per_basis": rank}[gate_mode]


def init_params(d: int, rank: int, gate_mode: str = "per_basis",
                generator: torch.Generator | None = None) -> InterventionParams:
    """Identity-initialized intervention: ``A = R``, ``b = 0``, zero gate form.

    The linear edit is exactly the identity; the gated edit is the identity
    too because the gated quantity ``A h + b - R h`` vanishes.
    """
    if gate_mode not in GATE_MODES:
        raise ValueError(f"unknown gate mode {gate_mode!r}")
    g = gate_rows(gate_mode, rank)
    R = orthonormalize(torch.randn(rank, d, dtype=DTYPE, generator=generator))
    return InterventionParams(
        R=R, A=R.clone(), b=torch.zeros(rank, dtype=DTYPE),
        U=torch.zeros(g, d, dtype=DTYPE), c=torch.zeros(g, dtype=DTYPE),
        gate_mode=gate_mode,
    )


def _check_dim(params: InterventionParams, h: torch.Tensor):
    if h.shape[-1] != params.dim:
        raise ValueError(f"representation has size {h.shape[-1]}, intervention expects {params.dim}")


def subspace_delta(params: InterventionParams, h: torch.Tensor) -> torch.Tensor:
    """Per-basis coefficient ``a_k . h + b_k - r_k . h``; shape ``(..., r)``."""
    _check_dim(params, h)
    return h @ (params.A - params.R).T + params.b


def reft_apply(params: InterventionParams, h: torch.Tensor) -> torch.Tensor:
    """``h + R^T (A h + b - R h)``, batched over leading dimensions."""
    return h + subspace_delta(params, h) @ params.R


def gate_weights(params: InterventionParams, h: torch.Tensor) -> torch.Tensor:
    """Per-basis weights in [0, 1], shape ``(..., r)``."""
    _check_dim(params, h)
    r = params.rank
    if params.gate_mode == "constant":
        return torch.ones(*h.shape[:-1], r, dtype=h.dtype)
    z = torch.sigmoid(h @ params.U.T + params.c)
    if params.gate_mode == "scalar":
        return z.expand(*h.shape[:-1], r)
    return z


def baft_apply(params: InterventionParams, h: torch.Tensor) -> torch.Tensor:
    """``h + sum_k w_k(h) r_k (a_k . h + b_k - r_k . h)``, batched."""
    return h + (gate_weights(params, h) * subspace_delta(params, h)) @ params.R


def apply(params: InterventionParams, h: torch.Tensor) -> torch.Tensor:
    if params.gate_mode == "constant":
        return reft_apply(params, h)
    return baft_apply(params, h)


def baft_matrix_form(params: InterventionParams, h) -> np.ndarray:
    """Dense evaluation ``h + R^T diag(w) (A h + b - R h)`` for one vector.

    Written with explicit numpy matrices so it shares no code path with
    :func:`baft_apply` beyond the gate weights.
    """
    h = np.asarray(h.detach() if isinstance(h, torch.Tensor) else h, dtype=np.float64)
    if h.shape != (params.dim,):
        raise ValueError(f"expected a length-{params.dim} vector")
    R = params.R.detach().numpy()
    A = params.A.detach().numpy()
    b = params.b.detach().numpy()
    w = gate_weights(params, torch.as_tensor(h, dtype=DTYPE)).detach().numpy()
    return h + R.T @ np.diag(w) @ (A @ h + b - R @ h)


@dataclass
class InterventionSet:
    """Interventions for a set of layers plus the position rule.

    ``positions`` is the number P of trailing prompt positions intervened;
    every output position after the prompt is intervened as well.
    """

    layers: dict[int, InterventionParams] = field(default_factory=dict)
    positions: int = 3

    def __post_init__(self):
        if self.positions < 1:
            raise ValueError("positions must be >= 1")

    @classmethod
    def create(cls, d: int, layers: Iterable[int], rank: int, gate_mode: str,
               positions: int = 3, seed: int = 0) -> "InterventionSet":
        gen = torch.Generator().manual_seed(seed)
        return cls({l: init_params(d, rank, gate_mode, gen) for l in sorted(layers)}, positions)

    def named_tensors(self) -> dict[str, torch.Tensor]:
        return {f"{l}.{k}": t for l, p in self.layers.items() for k, t in p.tensors().items()}

    def with_tensors(self, tensors: dict[str, torch.Tensor]) -> "InterventionSet":
        layers = {}
        for l, p in self.layers.items():
            upd = {k: tensors[f"{l}.{k}"] for k in p.tensors() if f"{l}.{k}" in tensors}
            layers[l] = p.replace(**upd)
        return InterventionSet(layers, self.positions)

    def trainable(self) -> "InterventionSet":
        return InterventionSet({l: p.trainable() for l, p in self.layers.items()}, self.positions)

    def detached(self) -> "InterventionSet":
        return InterventionSet({l: p.detached() for l, p in self.layers.items()}, self.positions)

    def position_mask(self, prompt_lengths, total_length: int) -> torch.Tensor:
        """Boolean ``(B, T)`` mask of intervened positions.

        For a prompt of length n, positions ``max(0, n-P) .. T-1`` are set:
        the last P prompt positions followed by every output position.
        """
        idx = torch.arange(total_length)
        starts = torch.tensor([max(0, n - self.positions) for n in prompt_lengths])
        return idx[None, :] >= starts[:, None]

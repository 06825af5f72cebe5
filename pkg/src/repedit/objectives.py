"""Training losses for representation editing.

* teacher-forcing cross-entropy on the target continuation,
* an incremental load-balancing penalty on running per-basis mean weights,
* a three-hinge margin penalty separating edit and irrelevant gate weights,

plus a rescaler that matches each regularizer's running magnitude to the
cross-entropy's before summing.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .interventions import InterventionSet
from .tinylm import TinyModel, pad_batch


def teacher_forcing_loss(
    model: TinyModel,
    interventions: InterventionSet | None,
    prompts: list[list[int]],
    targets: list[list[int]],
    capture: tuple[int, ...] = (),
):
    """Per-example ``-sum_i log p(y_i | x y_<i)`` under intervention.

    Returns ``(losses, output, mask)`` where ``losses`` has one entry per
    example, ``output`` is the forward result on ``x + y[:-1]`` and
    ``mask`` the intervened positions.
    """
    if any(len(t) == 0 for t in targets):
        raise ValueError("target must be non-empty")
    rows = [list(p) + list(t[:-1]) for p, t in zip(prompts, targets)]
    toks, lengths = pad_batch(rows)
    mask = None
    if interventions is not None:
        mask = interventions.position_mask([len(p) for p in prompts], toks.shape[1])
    out = model(toks, interventions, mask, capture=capture)
    logp = out.logits.log_softmax(-1)
    losses = []
    for i, (p, t) in enumerate(zip(prompts, targets)):
        pos = torch.arange(len(p) - 1, len(p) - 1 + len(t))
        tgt = torch.as_tensor(list(t), dtype=torch.long)
        losses.append(-logp[i, pos, tgt].sum())
    return torch.stack(losses), out, mask


@dataclass
class RunningBasisMeans:
    """Running sums of gate weights per basis over (sample, position) observations."""

    sums: torch.Tensor
    count: int = 0

    @classmethod
    def empty(cls, rank: int) -> "RunningBasisMeans":
        return cls(torch.zeros(rank, dtype=torch.float64), 0)

    @property
    def means(self) -> torch.Tensor:
        if self.count == 0:
            return torch.zeros_like(self.sums)
        return self.sums / self.count

    def with_current(self, weights: torch.Tensor) -> torch.Tensor:
        """Means over past observations plus ``weights`` (n, r), differentiable in ``weights``."""
        return (self.sums + weights.sum(0)) / (self.count + weights.shape[0])


def update_running_means(state: RunningBasisMeans, weights: torch.Tensor) -> RunningBasisMeans:
    """Fold ``weights`` of shape ``(n, r)`` into the running sums; returns a new state."""
    w = torch.as_tensor(weights, dtype=torch.float64).detach()
    if w.dim() == 1:
        w = w[None, :]
    if w.shape[-1] != state.sums.shape[0]:
        raise ValueError("weight width does not match the number of bases")
    if w.numel() and (w.min() < 0 or w.max() > 1):
        raise ValueError("gate weights must lie in [0, 1]")
    # accumulate one observation at a time so the sum order is fixed
    sums = state.sums.clone()
    for row in w:
        sums = sums + row
    return RunningBasisMeans(sums, state.count + w.shape[0])


def load_balance_loss(means: torch.Tensor) -> torch.Tensor:
    """Squared coefficient of variation ``sum_k (m_k - m)^2 / ((r - 1) m)``.

    A single basis cannot be imbalanced; ``r = 1`` returns zero with a warning.
    """
    r = means.shape[-1]
    if r < 2:
        warnings.warn("load balancing is undefined for a single basis; using 0", stacklevel=2)
        return means.sum() * 0.0
    mbar = means.mean()
    if mbar.item() <= 0:
        raise ValueError("mean basis weight must be positive")
    if bool((means == means[..., :1]).all()):
        # exact zero; the mean itself may be off by an ulp
        return means.sum() * 0.0
    return ((means - mbar) ** 2).sum() / ((r - 1) * mbar)


@dataclass
class LocalityTerms:
    irrelevant: torch.Tensor
    edit: torch.Tensor
    gap: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.irrelevant + self.edit + self.gap


def locality_terms(w_edit: torch.Tensor, w_ir: torch.Tensor,
                   alpha: float, beta: float, gamma: float) -> LocalityTerms:
    """Margin hinges on gate weights.

    ``w_edit`` is ``(n_edit_positions, r)``, ``w_ir`` is
    ``(n_irrelevant_positions, r)``.  The first two hinges are averaged over
    positions and bases; the gap hinge compares the per-position maximum
    weight for every (edit, irrelevant) position pair and averages.
    """
    if min(alpha, beta, gamma) < 0:
        raise ValueError("margins must be nonnegative")
    if w_edit.numel() == 0 or w_ir.numel() == 0:
        raise ValueError("locality loss needs both edit and irrelevant weights")
    t1 = F.relu(w_ir - alpha).mean()
    t2 = F.relu(beta - w_edit).mean()
    me = w_edit.max(dim=-1).values
    mi = w_ir.max(dim=-1).values
    t3 = F.relu(gamma - (me[:, None] - mi[None, :])).mean()
    return LocalityTerms(t1, t2, t3)


def locality_loss(w_edit, w_ir, alpha: float = 0.01, beta: float = 0.05, gamma: float = 0.02):
    return locality_terms(torch.as_tensor(w_edit, dtype=torch.float64),
                          torch.as_tensor(w_ir, dtype=torch.float64), alpha, beta, gamma).total


@dataclass
class LossBreakdown:
    l1: float
    r_bal: float
    r_loc: float | None
    total: float
    bal_factor: float
    loc_factor: float | None

    def row(self) -> dict:
        return {
            "l1": self.l1, "r_bal": self.r_bal,
            "r_loc": "" if self.r_loc is None else self.r_loc,
            "total": self.total, "bal_factor": self.bal_factor,
            "loc_factor": "" if self.loc_factor is None else self.loc_factor,
        }


@dataclass
class Rescaler:
    """Exponential moving averages of each term's absolute value.

    A regularizer's factor is ``ema(|l1|) / ema(|reg|)`` taken before the
    current step is folded in; with no history, or a vanishing average, the
    factor is 1.  ``max_factor`` bounds the ratio.
    """

    halflife: float = 10.0
    max_factor: float = 100.0
    ema: dict[str, float] = field(default_factory=dict)

    @property
    def decay(self) -> float:
        return 0.5 ** (1.0 / self.halflife)

    def factor(self, name: str) -> float:
        ref, val = self.ema.get("l1"), self.ema.get(name)
        if ref is None or val is None or val <= 1e-12:
            return 1.0
        return min(ref / val, self.max_factor)

    def observe(self, name: str, value: float):
        v = abs(value)
        if name in self.ema:
            self.ema[name] = self.decay * self.ema[name] + (1.0 - self.decay) * v
        else:
            self.ema[name] = v


def total_loss(l1: torch.Tensor, r_bal: torch.Tensor, r_loc: torch.Tensor | None,
               rescaler: Rescaler) -> tuple[torch.Tensor, LossBreakdown]:
    """``l1 + f_bal * r_bal + f_loc * r_loc`` with EMA-matched factors.

    ``r_loc=None`` drops the locality term entirely.  The rescaler's
    averages are updated after the factors are read.
    """
    vals = {"l1": l1.item(), "r_bal": r_bal.item()}
    if r_loc is not None:
        vals["r_loc"] = r_loc.item()
    for k, v in vals.items():
        if not math.isfinite(v):
            raise FloatingPointError(f"non-finite loss component {k}={v}")
    fb = rescaler.factor("r_bal")
    total = l1 + fb * r_bal
    fl = None
    if r_loc is not None:
        fl = rescaler.factor("r_loc")
        total = total + fl * r_loc
    for k, v in vals.items():
        rescaler.observe(k, v)
    return total, LossBreakdown(vals["l1"], vals["r_bal"], vals.get("r_loc"), total.item(), fb, fl)

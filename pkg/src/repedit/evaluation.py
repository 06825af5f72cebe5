"""Editing metrics and diagnostic profiles.

Metrics are token-level: the share of target tokens reproduced position by
position by a greedy decode of the same length.  Locality compares the
edited model's decode of an unrelated prompt against the decode the
unedited model produced for it.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import torch

from .interventions import InterventionParams, InterventionSet, gate_weights, subspace_delta
from .knowledge import KnowledgeItem, answer
from .tinylm import TinyModel, greedy_decode_batch, pad_batch


def match_fraction(decoded: Sequence[int], target: Sequence[int]) -> float:
    """Position-wise agreement; a short decode counts missing slots as misses."""
    if len(target) == 0:
        raise ValueError("target must be non-empty")
    hits = sum(1 for a, b in zip(decoded[: len(target)], target) if a == b)
    return hits / len(target)


def token_match(model: TinyModel, interventions: InterventionSet | None,
                prompt: Sequence[int], target: Sequence[int]) -> float:
    if len(target) == 0:
        raise ValueError("target must be non-empty")
    out = greedy_decode_batch(model, [prompt], len(target), interventions)[0]
    return match_fraction(out, target)


@dataclass
class Metrics:
    rel: float
    gen: float
    loc: float
    por: float | None = None

    @property
    def avg(self) -> float:
        vals = [v for v in (self.rel, self.gen, self.loc, self.por) if v is not None]
        return math.fsum(vals) / len(vals)

    def to_dict(self) -> dict:
        d = {"rel": self.rel, "gen": self.gen, "loc": self.loc}
        if self.por is not None:
            d["por"] = self.por
        d["avg"] = self.avg
        return d


def _mean(xs: Sequence[float]) -> float:
    return math.fsum(xs) / len(xs) if xs else 1.0


def fact_recall(model: TinyModel, items: Sequence[KnowledgeItem], rephrases: bool = False) -> float:
    """Token match of the stored (old) fact under the canonical prompt, or under rephrases."""
    v = model.vocab
    jobs = []
    for it in items:
        tgt = v.tokenize(answer(it.old_object))
        for p in (it.rephrases if rephrases else (it.prompt,)):
            jobs.append((v.tokenize(p), tgt))
    if not jobs:
        raise ValueError("no prompts to score")
    outs = greedy_decode_batch(model, [p for p, _ in jobs], [len(t) for _, t in jobs])
    return _mean([match_fraction(o, t) for o, (_, t) in zip(outs, jobs)])


def base_references(model: TinyModel, items: Sequence[KnowledgeItem]) -> dict[str, list[int]]:
    """Unedited greedy decodes of every locality probe, keyed by probe prompt."""
    v = model.vocab
    prompts = sorted({p for it in items for p, _ in it.locality_probes})
    budget = {p: len(v.tokenize(e)) for it in items for p, e in it.locality_probes}
    outs = greedy_decode_batch(model, [v.tokenize(p) for p in prompts], [budget[p] for p in prompts])
    return dict(zip(prompts, outs))


def evaluate(model: TinyModel, interventions: InterventionSet | None,
             items: Sequence[KnowledgeItem], references: Mapping[str, Sequence[int]] | None,
             portability: bool = False) -> Metrics:
    """Reliability, generality, locality (and optionally portability) over ``items``.

    Each metric is a mean of per-item means, so probe order is irrelevant.
    """
    if references is None:
        raise ValueError("locality needs pre-edit reference decodes")
    v = model.vocab
    jobs: list[tuple[str, int, list[int], list[int]]] = []
    for i, it in enumerate(items):
        jobs.append(("rel", i, v.tokenize(it.prompt), v.tokenize(it.target)))
        for r in it.rephrases:
            jobs.append(("gen", i, v.tokenize(r), v.tokenize(it.target)))
        for p, _ in it.locality_probes:
            if p not in references:
                raise ValueError(f"missing reference decode for probe {p!r}")
            ref = list(references[p])
            if ref:
                jobs.append(("loc", i, v.tokenize(p), ref))
        if portability:
            for p, t in it.portability_probes:
                jobs.append(("por", i, v.tokenize(p), v.tokenize(t)))
    outs = greedy_decode_batch(model, [j[2] for j in jobs], [len(j[3]) for j in jobs], interventions) if jobs else []
    per: dict[str, dict[int, list[float]]] = {k: {} for k in ("rel", "gen", "loc", "por")}
    for (kind, i, _, tgt), out in zip(jobs, outs):
        per[kind].setdefault(i, []).append(match_fraction(out, tgt))

    def metric(kind):
        return _mean([_mean(per[kind][i]) for i in sorted(per[kind])])

    return Metrics(metric("rel"), metric("gen"), metric("loc"), metric("por") if portability else None)


@dataclass
class RedundancyProfile:
    multiplier: float
    counts: list[int]
    degenerate: int = 0

    @property
    def mean(self) -> float:
        return math.fsum(self.counts) / len(self.counts)

    @property
    def min(self) -> int:
        return min(self.counts)

    @property
    def max(self) -> int:
        return max(self.counts)

    def to_dict(self) -> dict:
        return {"M": self.multiplier, "mean": self.mean, "min": self.min, "max": self.max,
                "n": len(self.counts), "degenerate": self.degenerate, "counts": list(self.counts)}


def update_magnitudes(params: InterventionParams, h: torch.Tensor) -> torch.Tensor:
    """``|w_k(h) (a_k . h + b_k - r_k . h)|`` per basis; ``(n, r)``."""
    h = torch.as_tensor(h, dtype=torch.float64)
    with torch.no_grad():
        return (gate_weights(params, h) * subspace_delta(params, h)).abs()


def redundancy_profile(params: InterventionParams, representations: torch.Tensor,
                       multiplier: float) -> RedundancyProfile:
    """Count bases whose update is below ``1/M`` of the largest, per representation.

    An all-zero update has no largest basis; it is counted as ``r - 1`` and
    reported in ``degenerate``.
    """
    if multiplier <= 1:
        raise ValueError("M must exceed 1")
    h = torch.as_tensor(representations, dtype=torch.float64).reshape(-1, params.dim)
    u = update_magnitudes(params, h)
    top = u.max(dim=-1, keepdim=True).values
    counts = (u < top / multiplier).sum(-1)
    zero = (top.squeeze(-1) == 0)
    counts = torch.where(zero, torch.full_like(counts, params.rank - 1), counts)
    n_zero = int(zero.sum())
    if n_zero:
        warnings.warn(f"{n_zero} representation(s) received no update", stacklevel=2)
    return RedundancyProfile(float(multiplier), [int(c) for c in counts], n_zero)


def intervened_representations(model: TinyModel, interventions: InterventionSet,
                               texts: Sequence[tuple[str, str]]) -> dict[int, list[torch.Tensor]]:
    """Pre-intervention representations at intervened positions, per layer and text.

    ``texts`` are (prompt, continuation) pairs fed with teacher forcing.
    """
    v = model.vocab
    prompts = [v.tokenize(p) for p, _ in texts]
    rows = [pr + v.tokenize(c)[:-1] for pr, (_, c) in zip(prompts, texts)]
    toks, lengths = pad_batch(rows)
    mask = interventions.position_mask([len(p) for p in prompts], toks.shape[1])
    with torch.no_grad():
        out = model(toks, interventions, mask)
    res: dict[int, list[torch.Tensor]] = {}
    for l in interventions.layers:
        res[l] = [out.hidden[l][i, : lengths[i]][mask[i, : lengths[i]]] for i in range(len(rows))]
    return res


@dataclass
class WeightProfile:
    """Mean gate weight per basis, per category, per intervened layer."""

    means: dict[int, dict[str, list[float]]] = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        for l in sorted(self.means):
            for cat, ws in self.means[l].items():
                for k, w in enumerate(ws):
                    out.append({"layer": l, "category": cat, "basis": k, "mean_weight": w})
        return out


def weight_profile(model: TinyModel, interventions: InterventionSet,
                   categories: Mapping[str, Sequence[tuple[str, str]]]) -> WeightProfile:
    """Average gate weights over intervened positions per prompt, then per category."""
    if any(p.gate_mode == "constant" for p in interventions.layers.values()):
        warnings.warn("constant gates have weight 1 everywhere", stacklevel=2)
    prof = WeightProfile()
    for cat, texts in categories.items():
        if not texts:
            continue
        reps = intervened_representations(model, interventions, texts)
        for l, per_text in reps.items():
            p = interventions.layers[l]
            with torch.no_grad():
                per_prompt = torch.stack([gate_weights(p, h).mean(0) for h in per_text])
            prof.means.setdefault(l, {})[cat] = [float(x) for x in per_prompt.mean(0)]
    return prof

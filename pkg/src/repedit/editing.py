"""Edit sessions: single, continual and batched editing, and the ablation grid.

A session owns one set of intervention parameters on a frozen base model.
Continual editing trains on each item in turn without resetting; batched
editing trains on consecutive groups jointly.  Single editing is a fresh
one-item session.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import torch

from .evaluation import Metrics, base_references, evaluate
from .interventions import GATE_MODES, InterventionParams, InterventionSet, gate_rows, gate_weights
from .knowledge import KnowledgeItem
from .numerics import AdamWState, adamw_step, backward, orthonormality_error, orthonormalize
from .objectives import (
    RunningBasisMeans, Rescaler, load_balance_loss, locality_terms, teacher_forcing_loss,
    total_loss, update_running_means,
)
from .tinylm import TinyModel, load_tensors, pad_batch, save_tensors

log = logging.getLogger(__name__)


class EditError(RuntimeError):
    pass


@dataclass
class EditConfig:
    rank: int = 12
    layers: tuple[int, ...] | None = None
    positions: int = 3
    lr: float = 2.4e-3
    max_steps: int = 40
    threshold: float = 0.01
    alpha: float = 0.01
    beta: float = 0.05
    gamma: float = 0.02
    gate_mode: str = "per_basis"
    locality_reg: bool = True
    load_balance: bool = True
    batch_size: int = 1
    checkpoints: tuple[int, ...] | None = None
    portability: bool = False
    weight_decay: float = 0.0
    orth_tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.gate_mode not in GATE_MODES:
            raise ValueError(f"gate_mode must be one of {GATE_MODES}")
        if self.layers is not None:
            self.layers = tuple(int(l) for l in self.layers)
        if self.checkpoints is not None:
            self.checkpoints = tuple(int(c) for c in self.checkpoints)

    @classmethod
    def from_dict(cls, d: dict) -> "EditConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"unknown edit config key {unknown[0]!r}")
        return cls(**d)

    @classmethod
    def batched(cls, **kw) -> "EditConfig":
        """Defaults for group training: smaller learning rate, more steps."""
        kw.setdefault("lr", 8e-4)
        kw.setdefault("max_steps", 70)
        kw.setdefault("batch_size", 10)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("layers", "checkpoints"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    def resolved_layers(self, model: TinyModel) -> tuple[int, ...]:
        if self.layers is not None:
            return self.layers
        L = model.n_layers
        return tuple(sorted({max(0, L - 3), L - 1}))


@dataclass
class Checkpoint:
    T: int
    metrics: Metrics

    def to_dict(self) -> dict:
        return {"T": self.T, **self.metrics.to_dict()}


@dataclass
class EditReport:
    protocol: str
    config: EditConfig
    checkpoints: list[Checkpoint] = field(default_factory=list)
    steps_per_edit: list[int] = field(default_factory=list)
    loss_log: list[dict] = field(default_factory=list)
    max_orth_error: float = 0.0
    interventions: InterventionSet | None = None

    @property
    def final(self) -> Metrics:
        return self.checkpoints[-1].metrics

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "config": self.config.to_dict(),
            "checkpoints": [c.to_dict() for c in self.checkpoints],
            "steps_per_edit": list(self.steps_per_edit),
            "max_orth_error": self.max_orth_error,
        }


@dataclass
class _Encoded:
    prompt: list[int]
    target: list[int]
    probes: list[tuple[list[int], list[int]]]


class EditSession:
    """Mutable editing state: interventions, optimizer, running statistics."""

    def __init__(self, model: TinyModel, config: EditConfig):
        self.model = model.freeze()
        self.config = config
        layers = config.resolved_layers(model)
        self.interventions = InterventionSet.create(
            model.d_model, layers, config.rank, config.gate_mode, config.positions, config.seed)
        self.opt = AdamWState(lr=config.lr, weight_decay=config.weight_decay)
        self.means = {l: RunningBasisMeans.empty(config.rank) for l in layers}
        self.rescaler = Rescaler()
        self.loss_log: list[dict] = []
        self.max_orth_error = 0.0
        self.n_groups = 0

    @property
    def gated(self) -> bool:
        return self.config.gate_mode != "constant"

    def _encode(self, item: KnowledgeItem) -> _Encoded:
        v = self.model.vocab
        return _Encoded(v.tokenize(item.prompt), v.tokenize(item.target),
                        [(v.tokenize(p), v.tokenize(e)) for p, e in item.locality_probes])

    def _edit_weights(self, iv: InterventionSet, out, mask, enc: Sequence[_Encoded]):
        """Gate weights at each example's intervened positions, per layer."""
        res = {}
        for l, p in iv.layers.items():
            w = gate_weights(p, out.hidden[l])
            per = []
            for i, e in enumerate(enc):
                n = len(e.prompt) + len(e.target) - 1
                per.append(w[i, :n][mask[i, :n]])
            res[l] = per
        return res

    def _probe_weights(self, iv: InterventionSet, enc: Sequence[_Encoded]):
        rows, owner, plens = [], [], []
        for i, e in enumerate(enc):
            for p, x in e.probes:
                rows.append(p + x[:-1])
                plens.append(len(p))
                owner.append(i)
        if not rows:
            return None
        toks, lengths = pad_batch(rows)
        mask = iv.position_mask(plens, toks.shape[1])
        out = self.model(toks, iv, mask)
        res = {}
        for l, p in iv.layers.items():
            w = gate_weights(p, out.hidden[l])
            per: list[list[torch.Tensor]] = [[] for _ in enc]
            for j, i in enumerate(owner):
                n = lengths[j]
                per[i].append(w[j, :n][mask[j, :n]])
            res[l] = [torch.cat(x) if x else None for x in per]
        return res

    def train(self, items: Sequence[KnowledgeItem]) -> int:
        """Optimize on ``items`` jointly; returns the number of optimizer steps."""
        cfg = self.config
        enc = [self._encode(it) for it in items]
        prompts = [e.prompt for e in enc]
        targets = [e.target for e in enc]
        use_loc = self.gated and cfg.locality_reg and any(e.probes for e in enc)
        use_bal = self.gated and cfg.load_balance
        group = self.n_groups
        steps = 0
        for step in range(cfg.max_steps + 1):
            iv = self.interventions.trainable()
            losses, out, mask = teacher_forcing_loss(self.model, iv, prompts, targets)
            l1 = losses.mean()
            l1v = l1.item()
            if not math.isfinite(l1v):
                raise EditError(f"non-finite training loss at group {group}, step {step}: {l1v}")
            if l1v < cfg.threshold or step == cfg.max_steps:
                self.loss_log.append({"group": group, "step": step, "l1": l1v, "stopped": 1})
                break
            r_bal = torch.zeros((), dtype=torch.float64)
            r_loc = None
            if use_bal or use_loc:
                w_edit = self._edit_weights(iv, out, mask, enc)
            if use_bal:
                for l, per in w_edit.items():
                    r_bal = r_bal + load_balance_loss(self.means[l].with_current(torch.cat(per)))
            if use_loc:
                w_ir = self._probe_weights(iv, enc)
                r_loc = torch.zeros((), dtype=torch.float64)
                for l in iv.layers:
                    terms = [locality_terms(we, wi, cfg.alpha, cfg.beta, cfg.gamma).total
                             for we, wi in zip(w_edit[l], w_ir[l]) if wi is not None]
                    r_loc = r_loc + torch.stack(terms).mean()
            try:
                total, br = total_loss(l1, r_bal, r_loc, self.rescaler)
            except FloatingPointError as e:
                raise EditError(f"group {group}, step {step}: {e}") from None
            params = iv.named_tensors()
            grads = backward(total, params)
            new, self.opt = adamw_step(params, grads, self.opt)
            bad = sorted(k for k, t in new.items() if not bool(torch.isfinite(t).all()))
            if bad:
                raise EditError(f"non-finite parameters {bad} at group {group}, step {step}")
            for l in iv.layers:
                try:
                    new[f"{l}.R"] = orthonormalize(new[f"{l}.R"])
                except ValueError as e:
                    raise EditError(f"cannot re-orthonormalize R at layer {l}: {e}") from None
            self.interventions = iv.with_tensors(new).detached()
            for l, p in self.interventions.layers.items():
                err = orthonormality_error(p.R)
                self.max_orth_error = max(self.max_orth_error, err)
                if err > cfg.orth_tol:
                    raise EditError(f"R lost orthonormality ({err:.3e}) at layer {l}")
            steps += 1
            self.loss_log.append({"group": group, "step": step, **br.row(), "stopped": 0})
        if self.gated:
            self._commit_means(prompts, targets, enc)
        self.n_groups += 1
        return steps

    @torch.no_grad()
    def _commit_means(self, prompts, targets, enc):
        _, out, mask = teacher_forcing_loss(self.model, self.interventions, prompts, targets)
        w_edit = self._edit_weights(self.interventions, out, mask, enc)
        for l, per in w_edit.items():
            self.means[l] = update_running_means(self.means[l], torch.cat(per))


def _default_checkpoints(n: int) -> list[int]:
    return sorted({t for t in (1, 10, 100, 1000) if t <= n} | {n})


def _run_groups(protocol: str, model: TinyModel, items: Sequence[KnowledgeItem],
                config: EditConfig, group_size: int) -> EditReport:
    if not items:
        raise ValueError("no items to edit")
    groups = [list(items[i:i + group_size]) for i in range(0, len(items), group_size)]
    marks = list(config.checkpoints) if config.checkpoints else _default_checkpoints(len(groups))
    marks = sorted({t for t in marks if 1 <= t <= len(groups)} or {len(groups)})
    refs = base_references(model, items)
    session = EditSession(model, config)
    report = EditReport(protocol, config)
    for g, group in enumerate(groups, start=1):
        steps = session.train(group)
        report.steps_per_edit.append(steps)
        log.debug("%s group %d: %d steps", protocol, g, steps)
        if g in marks:
            seen = [it for grp in groups[:g] for it in grp]
            m = evaluate(model, session.interventions, seen, refs, config.portability)
            report.checkpoints.append(Checkpoint(g, m))
    report.loss_log = session.loss_log
    report.max_orth_error = session.max_orth_error
    report.interventions = session.interventions
    return report


def edit_single(model: TinyModel, item: KnowledgeItem, config: EditConfig) -> EditReport:
    return _run_groups("single", model, [item], config, 1)


def edit_each(model: TinyModel, items: Sequence[KnowledgeItem], config: EditConfig) -> EditReport:
    """Independent single edits; the one checkpoint holds per-item metrics averaged.

    ``interventions`` on the report are those of the last item.
    """
    if not items:
        raise ValueError("no items to edit")
    reps = [edit_single(model, it, config) for it in items]
    ms = [r.final for r in reps]
    keys = ("rel", "gen", "loc") + (("por",) if config.portability else ())
    mean = Metrics(**{k: math.fsum(getattr(m, k) for m in ms) / len(ms) for k in keys})
    return EditReport(
        "single", config, [Checkpoint(len(items), mean)],
        [s for r in reps for s in r.steps_per_edit],
        [dict(row, group=i) for i, r in enumerate(reps) for row in r.loss_log],
        max(r.max_orth_error for r in reps), reps[-1].interventions,
    )


def edit_continual(model: TinyModel, items: Sequence[KnowledgeItem], config: EditConfig) -> EditReport:
    return _run_groups("continual", model, items, config, 1)


def edit_batched(model: TinyModel, items: Sequence[KnowledgeItem], config: EditConfig) -> EditReport:
    return _run_groups("batched", model, items, config, config.batch_size)


ABLATION_VARIANTS: tuple[tuple[str, str, bool], ...] = (
    ("ReFT", "constant", False),
    ("+ss-w", "scalar", False),
    ("+ba-w", "per_basis", False),
    ("+ss-w,lr", "scalar", True),
    ("BaFT", "per_basis", True),
)


def variant_name(gate_mode: str, locality_reg: bool) -> str:
    for name, g, loc in ABLATION_VARIANTS:
        if g == gate_mode and (loc == locality_reg or g == "constant"):
            return name
    return f"{gate_mode},lr" if locality_reg else gate_mode


def ablation_matrix(model: TinyModel, items: Sequence[KnowledgeItem],
                    config: EditConfig) -> dict[str, EditReport]:
    """Continual runs of the five component variants under one seed."""
    out = {}
    for name, gate, loc in ABLATION_VARIANTS:
        cfg = dataclasses.replace(config, gate_mode=gate, locality_reg=loc)
        out[name] = edit_continual(model, items, cfg)
    return out


def ablation_table(reports: dict[str, EditReport]) -> list[dict]:
    rows = []
    for name, rep in reports.items():
        m = rep.final
        rows.append({"variant": name, "rel": m.rel, "gen": m.gen, "loc": m.loc, "avg": m.avg})
    return rows


def save_interventions(interventions: InterventionSet, path):
    meta = {"kind": "interventions", "positions": interventions.positions,
            "layers": {str(l): p.gate_mode for l, p in interventions.layers.items()}}
    save_tensors(path, interventions.named_tensors(), meta)


def load_interventions(path) -> InterventionSet:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "interventions":
        raise ValueError(f"{path} is not an intervention checkpoint")
    layers = {}
    for key, mode in meta["layers"].items():
        R = tensors[f"{key}.R"]
        r, d = R.shape
        g = gate_rows(mode, r)
        U = tensors.get(f"{key}.U", torch.zeros(g, d, dtype=R.dtype))
        c = tensors.get(f"{key}.c", torch.zeros(g, dtype=R.dtype))
        layers[int(key)] = InterventionParams(R, tensors[f"{key}.A"], tensors[f"{key}.b"], U, c, mode)
    return InterventionSet(dict(sorted(layers.items())), int(meta["positions"]))

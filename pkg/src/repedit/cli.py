"""Command-line pipelines.

    repedit [--out DIR] SUBCOMMAND [--config FILE] [--seed N] [--set key=value ...]

Subcommands: gen-data, pretrain, edit, eval, theory, redundancy, ablate and
plots.  Every run first writes ``config_<subcommand>.json`` (the resolved
configuration) into the output directory, which defaults to
``$REPEDIT_OUT`` or ``./runs``.  Runs that share an output directory share
artifacts: ``edit`` picks up the ``model.ckpt`` written by ``pretrain``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import torch

from . import evaluation, theorylab
from .editing import (
    EditConfig, EditError, ablation_matrix, ablation_table, edit_batched, edit_continual,
    edit_each, load_interventions, save_interventions, variant_name,
)
from .knowledge import KnowledgeDataset, generate_corpus, load_dataset, make_edit_set, save_dataset
from .tinylm import ModelConfig, PretrainConfig, TinyModel, load_model, pretrain, save_model

log = logging.getLogger("repedit")

_MODEL_KEYS = [f.name for f in dataclasses.fields(ModelConfig) if f.name not in ("chars", "seed")]
_PRETRAIN_KEYS = [f.name for f in dataclasses.fields(PretrainConfig) if f.name != "seed"]
_EDIT_KEYS = [f.name for f in dataclasses.fields(EditConfig) if f.name != "seed"]

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "data": {"n_subjects": 50, "n_relations": 4},
    "model": {k: getattr(ModelConfig(), k) for k in _MODEL_KEYS},
    "pretrain": {k: getattr(PretrainConfig(), k) for k in _PRETRAIN_KEYS},
    "edits": {"n_edits": 50, "n_probes": 3},
    "run": {"protocol": "continual"},
    # only keys set here override the protocol's own defaults
    "edit": {},
    "paths": {"dataset": None, "edits": None, "model": None, "interventions": None},
    "theory": {"instances": 100, "samples": 1000, "d": 16, "r": 4},
    "redundancy": {"multipliers": [2, 5, 10]},
}

PROTOCOLS = ("single", "continual", "batched")


class UsageError(Exception):
    """Bad arguments or configuration (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# --- configuration ----------------------------------------------------------

def _check_keys(cfg: dict, schema: dict, prefix: str = ""):
    for k, v in cfg.items():
        name = prefix + k
        if k not in schema:
            raise UsageError(f"unknown config key {name!r}")
        if k == "edit":
            if not isinstance(v, dict):
                raise UsageError("config key 'edit' must be an object")
            for ek in v:
                if ek not in _EDIT_KEYS:
                    raise UsageError(f"unknown config key {'edit.' + ek!r}")
        elif isinstance(schema[k], dict):
            if not isinstance(v, dict):
                raise UsageError(f"config key {name!r} must be an object")
            _check_keys(v, schema[k], name + ".")


def _merge(base: dict, upd: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, item: str) -> dict:
    """Apply one ``dotted.key=value`` override; values are JSON, else strings."""
    if "=" not in item:
        raise UsageError(f"override {item!r} is not key=value")
    key, text = item.split("=", 1)
    parts = key.split(".")
    if not all(parts):
        raise UsageError(f"invalid override key {key!r}")
    upd: dict = {}
    node = upd
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = _parse_value(text)
    _check_keys(upd, DEFAULT_CONFIG)
    return _merge(cfg, upd)


def resolve_config(path: str | None, overrides: Sequence[str], seed: int | None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {path} is not valid JSON: {e}") from None
        if not isinstance(user, dict):
            raise UsageError("config file must hold a JSON object")
        _check_keys(user, DEFAULT_CONFIG)
        cfg = _merge(cfg, user)
    for item in overrides:
        cfg = apply_override(cfg, item)
    if seed is not None:
        cfg["seed"] = seed
    if not isinstance(cfg["seed"], int):
        raise UsageError("seed must be an integer")
    if cfg["run"]["protocol"] not in PROTOCOLS:
        raise UsageError(f"run.protocol must be one of {PROTOCOLS}")
    return cfg


def edit_config(cfg: dict) -> EditConfig:
    kw = dict(cfg["edit"], seed=cfg["seed"])
    try:
        if cfg["run"]["protocol"] == "batched":
            return EditConfig.batched(**kw)
        return EditConfig.from_dict(kw)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid edit configuration: {e}") from None


# --- output helpers -----------------------------------------------------------

def write_json(path: Path, obj):
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def write_csv(path: Path, rows: Sequence[dict], fields: Sequence[str] | None = None):
    fields = list(fields or (rows[0].keys() if rows else []))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, restval="", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


class Run:
    def __init__(self, command: str, cfg: dict, out: Path):
        self.command, self.cfg, self.out = command, cfg, out

    def path(self, name: str) -> Path:
        return self.out / name

    def input_path(self, key: str, default: str) -> Path | None:
        given = self.cfg["paths"][key]
        if given is not None:
            p = Path(given)
            if not p.exists():
                raise UsageError(f"paths.{key} does not exist: {p}")
            return p
        p = self.path(default)
        return p if p.exists() else None

    def dataset(self) -> KnowledgeDataset:
        p = self.input_path("dataset", "dataset.jsonl")
        if p is not None:
            return load_dataset(p)
        d = self.cfg["data"]
        return generate_corpus(self.cfg["seed"], d["n_subjects"], d["n_relations"])

    def edits(self, ds: KnowledgeDataset):
        p = self.input_path("edits", "edits.jsonl")
        if p is not None:
            return load_dataset(p).items
        e = self.cfg["edits"]
        return make_edit_set(ds, e["n_edits"], self.cfg["seed"], e["n_probes"])

    def model(self) -> TinyModel:
        p = self.input_path("model", "model.ckpt")
        if p is None:
            raise UsageError("no model checkpoint: run `pretrain` into this output directory "
                             "or set paths.model")
        return load_model(p)[0]


# --- subcommands --------------------------------------------------------------

def cmd_gen_data(run: Run) -> int:
    d = run.cfg["data"]
    ds = generate_corpus(run.cfg["seed"], d["n_subjects"], d["n_relations"])
    e = run.cfg["edits"]
    edits = make_edit_set(ds, e["n_edits"], run.cfg["seed"], e["n_probes"])
    save_dataset(ds, run.path("dataset.jsonl"))
    save_dataset(KnowledgeDataset(edits, run.cfg["seed"]), run.path("edits.jsonl"))
    write_json(run.path("gen-data_report.json"),
               {"kind": "gen-data", "n_items": len(ds), "n_edits": len(edits),
                "n_corpus_sentences": len(ds.corpus)})
    return 0


def cmd_pretrain(run: Run) -> int:
    ds = run.dataset()
    mcfg = ModelConfig(seed=run.cfg["seed"], **run.cfg["model"])
    pcfg = PretrainConfig(seed=run.cfg["seed"], **run.cfg["pretrain"])
    model, curve = pretrain(TinyModel(mcfg), ds.corpus, pcfg)
    model.freeze()
    save_model(model, run.path("model.ckpt"))
    write_csv(run.path("pretrain_log.csv"), [{"step": i + 1, "loss": l} for i, l in enumerate(curve)],
              ["step", "loss"])
    tail = curve[-50:]
    write_json(run.path("pretrain_report.json"), {
        "kind": "pretrain",
        "steps": pcfg.steps,
        "final_loss": sum(tail) / len(tail) if tail else None,
        "recall": evaluation.fact_recall(model, ds.items),
        "recall_rephrased": evaluation.fact_recall(model, ds.items, rephrases=True),
    })
    return 0


def _edit_report_dict(rep, method: str) -> dict:
    d = rep.to_dict()
    d["kind"] = "edit"
    d["method"] = method
    return d


def _avg_rows(method: str, checkpoints: Sequence[dict]) -> list[dict]:
    return [{"method": method, "T": c["T"], "rel": c["rel"], "gen": c["gen"], "loc": c["loc"],
             "avg": c["avg"]} for c in checkpoints]


_AVG_FIELDS = ["method", "T", "rel", "gen", "loc", "avg"]


def cmd_edit(run: Run) -> int:
    model = run.model()
    ds = run.dataset()
    items = run.edits(ds)
    ecfg = edit_config(run.cfg)
    protocol = run.cfg["run"]["protocol"]
    if protocol == "single":
        rep = edit_each(model, items, ecfg)
    elif protocol == "continual":
        rep = edit_continual(model, items, ecfg)
    else:
        rep = edit_batched(model, items, ecfg)
    method = variant_name(ecfg.gate_mode, ecfg.locality_reg)
    report = _edit_report_dict(rep, method)
    write_json(run.path("edit_report.json"), report)
    write_csv(run.path("edit_log.csv"), rep.loss_log,
              ["group", "step", "l1", "r_bal", "r_loc", "total", "bal_factor", "loc_factor", "stopped"])
    write_csv(run.path("avg_vs_T.csv"), _avg_rows(method, report["checkpoints"]), _AVG_FIELDS)
    save_interventions(rep.interventions, run.path("interventions.ckpt"))
    return 0


def cmd_eval(run: Run) -> int:
    model = run.model()
    ds = run.dataset()
    items = run.edits(ds)
    ecfg = edit_config(run.cfg)
    ivp = run.input_path("interventions", "interventions.ckpt")
    iv = load_interventions(ivp) if ivp is not None else None
    refs = evaluation.base_references(model, items)
    m = evaluation.evaluate(model, iv, items, refs, ecfg.portability)
    write_json(run.path("eval_report.json"), {
        "kind": "eval", "intervened": iv is not None, "n_items": len(items),
        "metrics": m.to_dict(), "recall": evaluation.fact_recall(model, ds.items),
    })
    return 0


def cmd_theory(run: Run) -> int:
    t = run.cfg["theory"]
    res = theorylab.run_suite(t["instances"], t["samples"], t["d"], t["r"], seed=run.cfg["seed"])
    with open(run.path("theory_instances.jsonl"), "w", encoding="utf-8") as fh:
        for inst in res["instances"]:
            fh.write(json.dumps(inst, sort_keys=True) + "\n")
    summary = {k: v for k, v in res.items() if k != "instances"}
    summary["kind"] = "theory"
    write_json(run.path("theory_summary.json"), summary)
    return 0 if res["all_checks_passed"] else 2


def cmd_redundancy(run: Run) -> int:
    model = run.model()
    ds = run.dataset()
    items = run.edits(ds)
    ivp = run.input_path("interventions", "interventions.ckpt")
    if ivp is None:
        raise UsageError("no intervention checkpoint: run `edit` first or set paths.interventions")
    iv = load_interventions(ivp)
    texts = [(it.prompt, it.target) for it in items]
    reps = evaluation.intervened_representations(model, iv, texts)
    rows = []
    for l in sorted(reps):
        h = torch.cat(reps[l])
        for M in run.cfg["redundancy"]["multipliers"]:
            prof = evaluation.redundancy_profile(iv.layers[l], h, float(M))
            rows.append({"layer": l, **{k: v for k, v in prof.to_dict().items() if k != "counts"}})
    categories = {
        "edit": texts,
        "rephrase": [(r, it.target) for it in items for r in it.rephrases],
        "unrelated": [p for it in items for p in it.locality_probes],
    }
    gated = all(p.gate_mode != "constant" for p in iv.layers.values())
    weights = evaluation.weight_profile(model, iv, categories).rows() if gated else []
    write_json(run.path("redundancy_report.json"),
               {"kind": "redundancy", "redundancy": rows, "weights": weights})
    write_csv(run.path("redundancy_vs_M.csv"), rows, _RED_FIELDS)
    write_csv(run.path("weights_per_basis.csv"), weights, _W_FIELDS)
    return 0


_RED_FIELDS = ["layer", "M", "mean", "min", "max", "n", "degenerate"]
_W_FIELDS = ["layer", "category", "basis", "mean_weight"]


def cmd_ablate(run: Run) -> int:
    model = run.model()
    ds = run.dataset()
    items = run.edits(ds)
    ecfg = edit_config(run.cfg)
    reports = ablation_matrix(model, items, ecfg)
    out = {"kind": "ablation", "variants": {k: _edit_report_dict(r, k) for k, r in reports.items()},
           "table": ablation_table(reports)}
    write_json(run.path("ablation_report.json"), out)
    write_csv(run.path("ablation_table.csv"), out["table"], ["variant", "rel", "gen", "loc", "avg"])
    rows = [r for k, v in out["variants"].items() for r in _avg_rows(k, v["checkpoints"])]
    write_csv(run.path("avg_vs_T.csv"), rows, _AVG_FIELDS)
    return 0


def emit_plots(report_paths: Sequence[str | Path], out_dir: str | Path) -> list[Path]:
    """Turn edit, ablation and redundancy reports into CSV tables; returns files written."""
    avg, table, red, weights = [], [], [], []
    for p in report_paths:
        try:
            rep = json.loads(Path(p).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read report {p}: {e}") from None
        kind = rep.get("kind") if isinstance(rep, dict) else None
        try:
            if kind == "edit":
                avg += _avg_rows(rep["method"], rep["checkpoints"])
            elif kind == "ablation":
                table += [{k: r[k] for k in ("variant", "rel", "gen", "loc", "avg")} for r in rep["table"]]
                for name, v in rep["variants"].items():
                    avg += _avg_rows(name, v["checkpoints"])
            elif kind == "redundancy":
                red += [{k: r[k] for k in _RED_FIELDS} for r in rep["redundancy"]]
                weights += [{k: r[k] for k in _W_FIELDS} for r in rep["weights"]]
            else:
                raise UsageError(f"{p}: unsupported report kind {kind!r}")
        except (KeyError, TypeError) as e:
            raise UsageError(f"{p}: report does not match the {kind} schema ({e})") from None
    out = Path(out_dir)
    written = []
    for name, rows, fields in (("avg_vs_T.csv", avg, _AVG_FIELDS),
                               ("ablation_table.csv", table, ["variant", "rel", "gen", "loc", "avg"]),
                               ("redundancy_vs_M.csv", red, _RED_FIELDS),
                               ("weights_per_basis.csv", weights, _W_FIELDS)):
        if rows:
            out.mkdir(parents=True, exist_ok=True)
            write_csv(out / name, rows, fields)
            written.append(out / name)
    return written


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the fact corpus and an edit set"),
    "pretrain": (cmd_pretrain, "pretrain the toy language model on the corpus"),
    "edit": (cmd_edit, "run a single, continual or batched editing session"),
    "eval": (cmd_eval, "score the model, optionally with saved interventions"),
    "theory": (cmd_theory, "verify the locality limit on random linear edits"),
    "redundancy": (cmd_redundancy, "redundant-basis counts and gate-weight profiles"),
    "ablate": (cmd_ablate, "continual runs of the five component variants"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="repedit", description="Representation editing experiments.")
    parser.add_argument("--out", help="output directory (default: $REPEDIT_OUT or ./runs)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-key override, e.g. edit.lr=0.001 (repeatable)")
        if name == "theory":
            p.add_argument("--instances", type=int)
    p = sub.add_parser("plots", help="emit plot-ready CSV tables from report files")
    p.add_argument("reports", nargs="*")
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    out = Path(args.out or os.environ.get("REPEDIT_OUT") or "runs")
    try:
        out.mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise PermissionError(f"output directory {out} is not writable")
    except OSError as e:
        print(f"repedit: error: {e}", file=sys.stderr)
        return 1
    try:
        if args.command == "plots":
            emit_plots(args.reports, out)
            return 0
        overrides = list(args.overrides)
        if getattr(args, "instances", None) is not None:
            overrides.append(f"theory.instances={args.instances}")
        cfg = resolve_config(args.config, overrides, args.seed)
        write_json(out / f"config_{args.command}.json", cfg)
        return COMMANDS[args.command][0](Run(args.command, cfg, out))
    except UsageError as e:
        print(f"repedit: error: {e}", file=sys.stderr)
        return 1
    except (EditError, theorylab.PreconditionError, theorylab.InfeasibleInstance,
            FloatingPointError, RuntimeError) as e:
        print(f"repedit: runtime failure: {e}", file=sys.stderr)
        return 2
    except (ValueError, TypeError, KeyError, OSError) as e:
        print(f"repedit: error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

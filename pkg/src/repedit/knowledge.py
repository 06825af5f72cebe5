"""Synthetic subject-relation-object facts, edit sets, and dataset files.

Every fact is rendered through several surface templates of its relation:
the first is the canonical edit prompt, the rest serve as rephrases.  The
pretraining corpus contains each old fact under every template.

Dataset files are UTF-8, one JSON object per line.  An optional first line
``{"format": "repedit-dataset", "version": 1, "seed": ...}`` carries the
generation seed; every other line is one item with keys ``id``, ``prompt``,
``target``, ``rephrases``, ``locality_probes``, ``portability_probes`` and
the fact fields ``subject``, ``relation``, ``old_object``, ``new_object``.
Probes are ``[prompt, expected]`` pairs.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .tinylm import DEFAULT_CHARS, END

FORMAT_NAME = "repedit-dataset"
FORMAT_VERSION = 1
N_LOCALITY_PROBES = 3


@dataclass(frozen=True)
class Relation:
    name: str
    templates: tuple[str, ...]
    objects: tuple[str, ...]


RELATIONS: tuple[Relation, ...] = (
    Relation("color", ("the color of {s} is", "{s} has the color", "the shade of {s} is"),
             ("red", "blue", "green", "black", "white", "pink", "gray", "brown")),
    Relation("city", ("{s} lives in", "the home town of {s} is", "{s} resides in"),
             ("paris", "tokyo", "cairo", "lima", "oslo", "rome", "delhi", "quito")),
    Relation("job", ("{s} works as a", "the job of {s} is", "{s} is employed as a"),
             ("baker", "pilot", "nurse", "judge", "chef", "miner", "poet", "clerk")),
    Relation("pet", ("the pet of {s} is a", "{s} owns a pet", "{s} keeps a pet"),
             ("cat", "dog", "owl", "fox", "frog", "goat", "duck", "hen")),
    Relation("food", ("the favorite food of {s} is", "{s} likes to eat", "{s} often eats"),
             ("rice", "bread", "soup", "fish", "salad", "pasta", "beans", "cake")),
    Relation("sport", ("{s} plays", "the sport of {s} is", "{s} is good at"),
             ("chess", "golf", "tennis", "rugby", "polo", "judo", "squash", "hockey")),
)

_CONSONANTS = "bdfghklmnprstvz"
_VOWELS = "aeiou"


def inverse_prompt(relation: str, obj: str) -> str:
    return f"{obj} is the {relation}-inverse of"


def answer(obj: str) -> str:
    """Target continuation for an object: leading space, end marker."""
    return f" {obj}{END}"


@dataclass(frozen=True)
class KnowledgeItem:
    id: str
    subject: str
    relation: str
    old_object: str
    prompt: str
    target: str
    rephrases: tuple[str, ...]
    locality_probes: tuple[tuple[str, str], ...] = ()
    portability_probes: tuple[tuple[str, str], ...] = ()
    new_object: str | None = None

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "prompt": self.prompt,
            "target": self.target,
            "rephrases": list(self.rephrases),
            "locality_probes": [list(p) for p in self.locality_probes],
            "portability_probes": [list(p) for p in self.portability_probes],
            "subject": self.subject,
            "relation": self.relation,
            "old_object": self.old_object,
            "new_object": self.new_object,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "KnowledgeItem":
        required = ("id", "prompt", "target", "rephrases", "locality_probes", "portability_probes")
        missing = [k for k in required if k not in rec]
        if missing:
            raise ValueError(f"missing keys {missing}")
        return cls(
            id=str(rec["id"]),
            subject=rec.get("subject", ""),
            relation=rec.get("relation", ""),
            old_object=rec.get("old_object", ""),
            prompt=rec["prompt"],
            target=rec["target"],
            rephrases=tuple(rec["rephrases"]),
            locality_probes=tuple((p, e) for p, e in rec["locality_probes"]),
            portability_probes=tuple((p, e) for p, e in rec["portability_probes"]),
            new_object=rec.get("new_object"),
        )


@dataclass
class KnowledgeDataset:
    items: list[KnowledgeItem]
    seed: int | None = None

    def __post_init__(self):
        ids = [it.id for it in self.items]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise ValueError(f"duplicate item id {dup!r}")

    def __len__(self):
        return len(self.items)

    @property
    def corpus(self) -> list[str]:
        """Pretraining sentences: every old fact under every template."""
        out = []
        for it in self.items:
            old = answer(it.old_object)
            for p in (it.prompt, *it.rephrases):
                out.append(p + old)
        return out

    @property
    def corpus_text(self) -> str:
        return "".join(self.corpus)


def _names(rng: random.Random, n: int, banned: set[str]) -> list[str]:
    out: list[str] = []
    seen = set(banned)
    while len(out) < n:
        name = "".join(rng.choice(_CONSONANTS if i % 2 == 0 else _VOWELS) for i in range(5))
        if name not in seen:
            seen.add(name)
            out.append(name)
    return out


def generate_corpus(seed: int = 0, n_subjects: int = 50, n_relations: int = 4) -> KnowledgeDataset:
    """Deterministic synthetic fact base of ``n_subjects * n_relations`` items."""
    if n_subjects < 1 or n_relations < 1 or n_subjects * n_relations < 2:
        raise ValueError("need at least two facts")
    if n_relations > len(RELATIONS):
        raise ValueError(f"at most {len(RELATIONS)} relations are available")
    if n_subjects < 2:
        raise ValueError("locality probes need at least two distinct subjects")
    rng = random.Random(seed)
    rels = RELATIONS[:n_relations]
    banned = {w for r in rels for t in r.templates for w in t.split()} | {o for r in rels for o in r.objects}
    subjects = _names(rng, n_subjects, banned)
    facts = [(s, r, rng.choice(r.objects)) for s in subjects for r in rels]
    items = []
    for idx, (s, r, o) in enumerate(facts):
        others = [j for j, f in enumerate(facts) if f[0] != s]
        probe_idx = rng.sample(others, min(N_LOCALITY_PROBES, len(others)))
        probes = tuple((facts[j][1].templates[0].format(s=facts[j][0]), answer(facts[j][2])) for j in probe_idx)
        items.append(KnowledgeItem(
            id=f"f{idx:04d}", subject=s, relation=r.name, old_object=o,
            prompt=r.templates[0].format(s=s), target=answer(o),
            rephrases=tuple(t.format(s=s) for t in r.templates[1:]),
            locality_probes=probes,
            portability_probes=((inverse_prompt(r.name, o), answer(s)),),
        ))
    ds = KnowledgeDataset(items, seed)
    bad = set(ds.corpus_text) - set(DEFAULT_CHARS)
    if bad:
        raise ValueError(f"vocabulary overflow: {sorted(bad)}")
    return ds


def _relation(name: str) -> Relation:
    for r in RELATIONS:
        if r.name == name:
            return r
    raise ValueError(f"unknown relation {name!r}")


def make_edit_set(dataset: KnowledgeDataset, n_edits: int, seed: int = 0,
                  n_probes: int = N_LOCALITY_PROBES) -> list[KnowledgeItem]:
    """Sample ``n_edits`` facts and give each a counterfactual new object.

    Locality probes come only from facts whose subject is not edited
    anywhere in the sequence.
    """
    if n_edits < 0 or n_edits > len(dataset):
        raise ValueError(f"cannot draw {n_edits} edits from {len(dataset)} items")
    rng = random.Random(seed)
    chosen = rng.sample(dataset.items, n_edits)
    edited_subjects = {it.subject for it in chosen}
    pool = [it for it in dataset.items if it.subject not in edited_subjects]
    out = []
    for it in chosen:
        rel = _relation(it.relation)
        new = rng.choice([o for o in rel.objects if o != it.old_object])
        probes = rng.sample(pool, min(n_probes, len(pool)))
        out.append(replace(
            it,
            target=answer(new),
            new_object=new,
            locality_probes=tuple((p.prompt, answer(p.old_object)) for p in probes),
            portability_probes=((inverse_prompt(it.relation, new), answer(it.subject)),),
        ))
    return out


def save_dataset(dataset: KnowledgeDataset | Sequence[KnowledgeItem], path):
    items = dataset.items if isinstance(dataset, KnowledgeDataset) else list(dataset)
    seed = dataset.seed if isinstance(dataset, KnowledgeDataset) else None
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": FORMAT_NAME, "version": FORMAT_VERSION, "seed": seed}) + "\n")
        for it in items:
            fh.write(json.dumps(it.to_record(), ensure_ascii=False) + "\n")


def load_dataset(path) -> KnowledgeDataset:
    items = []
    seed = None
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise ValueError("record is not a JSON object")
                if rec.get("format") == FORMAT_NAME:
                    seed = rec.get("seed")
                    continue
                item = KnowledgeItem.from_record(rec)
            except (json.JSONDecodeError, ValueError, TypeError) as e:
                raise ValueError(f"{path}: line {lineno}: {e}") from None
            if item.id in seen:
                raise ValueError(f"{path}: line {lineno}: duplicate id {item.id!r}")
            seen.add(item.id)
            items.append(item)
    return KnowledgeDataset(items, seed)

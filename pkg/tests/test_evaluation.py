import math
import warnings
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from repedit.evaluation import (
    Metrics, base_references, evaluate, match_fraction, redundancy_profile, token_match,
    update_magnitudes, weight_profile,
)
from repedit.interventions import InterventionParams, InterventionSet
from repedit.knowledge import KnowledgeItem, make_edit_set, generate_corpus
from repedit.tinylm import ForwardOutput, Vocab

from _util import brute_force_counts, random_params, tiny_model

F64 = torch.float64


def test_match_fraction():
    assert match_fraction([1, 2, 3], [1, 2, 3]) == 1.0
    assert match_fraction([4, 5], [1, 2]) == 0.0
    assert match_fraction([1, 2, 3, 9], [1, 2, 3, 4]) == 0.75
    assert match_fraction([1], [1, 2]) == 0.5
    with pytest.raises(ValueError):
        match_fraction([1], [])


class ScriptedModel:
    """Decodes a fixed continuation for each known prompt; unknown text ends at once."""

    def __init__(self, table: dict[str, str]):
        self.vocab = Vocab()
        self.table = table
        self.cfg = SimpleNamespace(context=128)

    def __call__(self, toks, interventions=None, mask=None):
        B, T = toks.shape
        V = len(self.vocab)
        logits = torch.zeros(B, T, V, dtype=F64)
        for b in range(B):
            text = self.vocab.detokenize(toks[b].tolist())
            for i in range(T):
                prefix = text[: i + 1]
                nxt = "\n"
                for p, cont in self.table.items():
                    k = len(prefix) - len(p)
                    if prefix.startswith(p) and 0 <= k < len(cont):
                        nxt = cont[k]
                        break
                logits[b, i, self.vocab.tokenize(nxt)[0]] = 1.0
        return ForwardOutput(logits)


def _fixture():
    items = [
        KnowledgeItem("a", "sa", "color", "red", "pa", " xy\n", ("pb", "pc"),
                      (("la", " r\n"), ("lb", " st\n")), (("ia", " pa\n"),), "xy"),
        KnowledgeItem("b", "sb", "color", "red", "pd", " ab\n", ("pe",), (("lc", " u\n"),), (), "ab"),
    ]
    model = ScriptedModel({"pa": " xy\n", "pb": " xz\n", "pc": " qq\n", "pd": " aq\n", "pe": " ab\n",
                           "la": " r\n", "lb": " sx\n", "lc": " v\n", "ia": " pa\n"})
    refs = {"la": model.vocab.tokenize(" r\n"), "lb": model.vocab.tokenize(" st\n"),
            "lc": model.vocab.tokenize(" u\n")}
    return model, items, refs


def test_token_match_scripted():
    model, _, _ = _fixture()
    v = model.vocab
    assert token_match(model, None, v.tokenize("pa"), v.tokenize(" xy\n")) == 1.0
    assert token_match(model, None, v.tokenize("pb"), v.tokenize(" xy\n")) == 0.75
    assert token_match(model, None, v.tokenize("zz"), v.tokenize("ab")) == 0.0
    with pytest.raises(ValueError):
        token_match(model, None, v.tokenize("pa"), [])


def test_half_success_fixture():
    model, items, refs = _fixture()
    m = evaluate(model, None, items, refs, portability=True)
    assert m.rel == (1.0 + 0.75) / 2
    assert m.gen == ((0.75 + 0.5) / 2 + 1.0) / 2
    assert m.loc == pytest.approx(((1.0 + 0.75) / 2 + 2 / 3) / 2, abs=1e-15)
    assert m.por == 1.0
    assert abs(m.avg - math.fsum([m.rel, m.gen, m.loc, m.por]) / 4) <= 1e-12
    no_por = evaluate(model, None, items, refs)
    assert no_por.por is None and "por" not in no_por.to_dict()
    assert abs(no_por.avg - (m.rel + m.gen + m.loc) / 3) <= 1e-12


def test_metrics_invariant_to_order():
    model, items, refs = _fixture()
    a = evaluate(model, None, items, refs, portability=True)
    flipped = [KnowledgeItem(**{**it.__dict__, "locality_probes": it.locality_probes[::-1],
                                "rephrases": it.rephrases[::-1]}) for it in items[::-1]]
    b = evaluate(model, None, flipped, refs, portability=True)
    assert a == b


def test_missing_references_rejected():
    model, items, refs = _fixture()
    with pytest.raises(ValueError):
        evaluate(model, None, items, None)
    with pytest.raises(ValueError):
        evaluate(model, None, items, {"la": refs["la"]})


def test_identity_interventions_keep_locality():
    model = tiny_model(seed=2, n_layers=3, d=16)
    items = make_edit_set(generate_corpus(0, 8, 2), 5, seed=0)
    refs = base_references(model, items)
    for mode in ("constant", "per_basis"):
        iv = InterventionSet.create(model.d_model, [0, 2], 4, mode, seed=1)
        assert evaluate(model, iv, items, refs).loc == 1.0
    assert evaluate(model, None, [], refs) == Metrics(1.0, 1.0, 1.0)


def _translation(b):
    b = torch.as_tensor(b, dtype=F64)
    r = b.shape[0]
    return InterventionParams(torch.eye(r, dtype=F64), torch.eye(r, dtype=F64), b,
                              torch.zeros(0, r, dtype=F64), torch.zeros(0, dtype=F64), "constant")


def test_redundancy_hand_count():
    p = _translation([3.0, 0.1, 0.5])
    prof = redundancy_profile(p, torch.zeros(1, 3, dtype=F64), 10)
    assert prof.counts == [1]
    assert redundancy_profile(_translation([-3.0, 0.1, -0.5]), torch.zeros(1, 3), 10).counts == [1]
    assert redundancy_profile(_translation([2.0, 2.0, 2.0]), torch.zeros(4, 3), 1.5).counts == [0] * 4
    with pytest.raises(ValueError):
        redundancy_profile(p, torch.zeros(1, 3), 1.0)


def test_redundancy_zero_update_flagged():
    with pytest.warns(UserWarning):
        prof = redundancy_profile(_translation([0.0, 0.0, 0.0]), torch.zeros(2, 3), 2)
    assert prof.counts == [2, 2] and prof.degenerate == 2


@pytest.mark.parametrize("mode", ["constant", "scalar", "per_basis"])
def test_redundancy_matches_brute_force(mode):
    gen = torch.Generator().manual_seed(7)
    p = random_params(16, 12, mode, gen)
    H = torch.randn(100, 16, dtype=F64, generator=gen)
    for M in (2, 5, 10):
        assert redundancy_profile(p, H, M).counts == brute_force_counts(p, H.numpy(), M)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_redundancy_monotone_in_m(seed):
    gen = torch.Generator().manual_seed(seed)
    p = random_params(6, 5, "per_basis", gen)
    H = torch.randn(10, 6, dtype=F64, generator=gen)
    prev = None
    for M in (1.0 + 1e-12, 1.5, 2, 5, 10, 1e6):
        counts = redundancy_profile(p, H, M).counts
        assert all(0 <= c <= 4 for c in counts)
        if prev is not None:
            assert all(c <= q for c, q in zip(counts, prev))
        prev = counts
    # just above 1 every non-maximal basis counts (magnitudes are distinct almost surely)
    assert redundancy_profile(p, H, 1.0 + 1e-12).counts == [4] * 10


def test_redundancy_profile_summary():
    prof = redundancy_profile(_translation([3.0, 0.1, 0.5]), torch.zeros(2, 3), 2)
    d = prof.to_dict()
    assert d["mean"] == 2.0 and d["min"] == 2 and d["max"] == 2 and d["n"] == 2
    u = update_magnitudes(_translation([3.0, -0.1, 0.5]), torch.zeros(1, 3))
    assert u.tolist() == [[3.0, 0.1, 0.5]]


def test_weight_profile_trivial_gates():
    model = tiny_model(seed=0, d=8)
    cats = {"edit": [("the color of", " red\n")], "other": [("lives in", " oslo\n"), ("plays", " golf\n")]}
    iv = InterventionSet.create(8, [0, 1], 3, "per_basis", seed=0)
    prof = weight_profile(model, iv, cats)
    assert all(w == 0.5 for l in prof.means for c in prof.means[l] for w in prof.means[l][c])
    assert len(prof.rows()) == 2 * 2 * 3
    ivc = InterventionSet.create(8, [1], 3, "constant", seed=0)
    with pytest.warns(UserWarning):
        prof = weight_profile(model, ivc, cats)
    assert all(w == 1.0 for r in prof.rows() for w in [r["mean_weight"]])

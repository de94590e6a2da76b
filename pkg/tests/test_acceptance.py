"""Acceptance gate.  Each test prints one ``criterion N: PASS|FAIL`` line.

The training criteria (5, 6, 7, 9) share runs made through the command line
in a module-scoped fixture.  They take a few minutes on one core.
"""

import json
import math
import random
import time
from pathlib import Path

import numpy as np
import pytest

from difflog.cli import main
from difflog.core import (
    KINSHIP,
    RuleTemplate,
    TemplateKind,
    composite,
    gen_rule_ic,
    gender_rule_ic,
    instantiate_template,
    kinship_result_ics,
)
from difflog.datagen import default_oracle
from difflog.engine import constraint_violation, forward, load_kb, register_rules
from difflog.learner import load_checkpoint, top_rules
from difflog.parser import Sample
from difflog.provenance import wmc, wmc_grad

from oracles import enumerate_wmc_fast, possible_worlds_query, random_formula, random_kb, to_formula, tuple_vars

R = KINSHIP.id
N = len(KINSHIP)

# Shared training setup for criteria 5-7 and 9.  The rule learning rate is
# the one non-default value; see the README section on learning rates.
DATA_SEED = 7
TRAIN_SEED = 7
LR_RULES = "0.003"
TRAIN_BUDGET_S = 30 * 60
MIN_ACCURACY = 0.90
MIN_MATCHES = 60
MIN_ABLATION_DROP = 0.03


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


# ---------------------------------------------------------------------------
# 1-2: weighted model counting


def test_criterion_1_wmc_matches_enumeration(capsys):
    rng = random.Random(2024)
    worst, spent = 0.0, 0.0
    for _ in range(10_000):
        n = rng.randint(1, 12)
        t = random_formula(rng, n, 6)
        probs = {i: rng.random() for i in range(n)}
        f = to_formula(t)
        t0 = time.perf_counter()
        got = wmc(f, probs)
        spent += time.perf_counter() - t0
        worst = max(worst, abs(got - enumerate_wmc_fast(t, probs)))
    ok = worst <= 1e-9 and spent < 60
    report(capsys, 1, ok, f"10000 formulas, max |err| {worst:.2e} (tol 1e-9), wmc time {spent:.1f}s (limit 60s)")
    assert ok


def test_criterion_2_gradients_match_finite_differences(capsys):
    # relative error is |g - fd| / max(|g|, |fd|, 1e-6); the floor keeps
    # exactly-zero derivatives on an absolute scale
    rng = random.Random(99)
    h = 1e-5
    worst = 0.0
    for _ in range(1_000):
        n = rng.randint(1, 12)
        t = random_formula(rng, n, 6)
        probs = {i: rng.uniform(0.01, 0.99) for i in range(n)}
        _, g = wmc_grad(to_formula(t), probs)
        for v in sorted(tuple_vars(t)):
            up, dn = dict(probs), dict(probs)
            up[v] += h
            dn[v] -= h
            fd = (enumerate_wmc_fast(t, up) - enumerate_wmc_fast(t, dn)) / (2 * h)
            gv = g.get(v, 0.0)
            worst = max(worst, abs(gv - fd) / max(abs(gv), abs(fd), 1e-6))
    ok = worst <= 1e-4
    report(capsys, 2, ok, f"1000 formulas, max relative error {worst:.2e} (tol 1e-4)")
    assert ok


# ---------------------------------------------------------------------------
# 3-4: deduction


def test_criterion_3_niece_probability(capsys):
    s = Sample(((R("brother"), "D", "R", 0.9), (R("daughter"), "R", "K", 0.8)), ("D", "K"), R("niece"), 2)
    rule = instantiate_template(composite(R("brother"), R("daughter"), R("niece")))
    y, _, _ = forward(s, [(rule, 1.0)])
    got = float(y[R("niece")])
    # "exactly" means bitwise equal to the double product 0.9 * 0.8, which is
    # itself one ulp above the double nearest 0.72
    ulps = abs(got - 0.72) / math.ulp(0.72)
    ok = got == 0.9 * 0.8 and ulps <= 1 and np.count_nonzero(y) == 1
    report(capsys, 3, ok, f"y[niece] = {got!r}, bitwise equal to 0.9*0.8: {got == 0.9 * 0.8}, "
                          f"{ulps:.0f} ulp from 0.72, no other relation derived")
    assert ok


def test_criterion_4_possible_worlds(capsys):
    rng = random.Random(4)
    worst = 0.0
    for _ in range(200):
        facts, rules, query = random_kb(rng, max_facts=10, max_rules=5, max_vars=12)
        er = [(instantiate_template(RuleTemplate(TemplateKind(kind), args)), w)
              for *_, w, (kind, args) in rules]
        y, _, trace = forward(Sample(tuple(facts), query, 0, 0), er, k=None, max_iters=64)
        assert trace.store.saturated
        expected = possible_worlds_query(facts, [r[:4] for r in rules], query, N)
        worst = max(worst, float(np.max(np.abs(y - expected))))
    ok = worst <= 1e-9
    report(capsys, 4, ok, f"200 random KBs with K=inf, max |err| {worst:.2e} (tol 1e-9)")
    assert ok


# ---------------------------------------------------------------------------
# 5-7, 9: training through the command line


def _train(out: Path, data: Path, *extra):
    t0 = time.perf_counter()
    code = main(["train", "--train", str(data / "train.jsonl"), "--out", str(out),
                 "--seed", str(TRAIN_SEED), "--lr-rules", LR_RULES, "--threads", "1", *extra])
    assert code == 0
    return time.perf_counter() - t0


def _eval(ckpt: Path, data: Path, report_path: Path) -> dict:
    code = main(["eval", "--checkpoint", str(ckpt), "--test", str(data / "test.jsonl"),
                 "--report", str(report_path), "--threads", "1"])
    assert code == 0
    return {r["k"]: r["accuracy"] for r in map(json.loads, report_path.read_text().splitlines())}


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    data = root / "data"
    assert main(["gen-data", "--seed", str(DATA_SEED), "--train", "1000x2,1000x3",
                 "--test", "50x2..10", "--out", str(data)]) == 0
    out = {"data": data}
    out["ic_time"] = _train(root / "ic", data)
    out["ic"] = _eval(root / "ic" / "checkpoint.npz", data, root / "ic" / "report.jsonl")
    _train(root / "noic", data, "--w-result-ic", "0", "--w-rule-ic", "0")
    out["noic"] = _eval(root / "noic" / "checkpoint.npz", data, root / "noic" / "report.jsonl")
    _train(root / "ic_again", data)
    out["root"] = root
    return out


def test_criterion_5_accuracy(runs, capsys):
    acc, secs = runs["ic"]["all"], runs["ic_time"]
    per_k = " ".join(f"k{k}={100 * v:.0f}" for k, v in runs["ic"].items() if k != "all")
    ok = acc >= MIN_ACCURACY and secs <= TRAIN_BUDGET_S
    report(capsys, 5, ok, f"overall accuracy {100 * acc:.2f}% (need >= 90%), train time {secs:.0f}s on 1 core "
                          f"(limit {TRAIN_BUDGET_S}s); {per_k}")
    assert ok


def test_criterion_6_rule_recovery(runs, capsys):
    store, _ = load_checkpoint(runs["root"] / "ic" / "checkpoint.npz")
    oracle = set(default_oracle().triples())
    hits = sum(t.args in oracle for t, _ in top_rules(store, 92))
    ok = hits >= MIN_MATCHES
    report(capsys, 6, ok, f"{hits} of the top 92 rules are oracle compositions (need >= 60)")
    assert ok


def test_criterion_7_ic_ablation(runs, capsys):
    with_ic, without = runs["ic"]["all"], runs["noic"]["all"]
    drop = with_ic - without
    ok = drop >= MIN_ABLATION_DROP
    report(capsys, 7, ok, f"with ICs {100 * with_ic:.2f}%, without {100 * without:.2f}%, "
                          f"drop {100 * drop:.2f} points (need >= 3)")
    assert ok


def test_criterion_9_determinism(runs, capsys):
    a, b = runs["root"] / "ic", runs["root"] / "ic_again"
    same_manifest = (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    same_metrics = (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()
    ok = same_manifest and same_metrics
    report(capsys, 9, ok, f"identical manifests: {same_manifest}, bitwise-identical metrics logs: {same_metrics}")
    assert ok


# ---------------------------------------------------------------------------
# 8: constraint arithmetic


def test_criterion_8_constraint_suite(capsys):
    ics = {c.name: c for c in kinship_result_ics()}
    w = 0.37

    def kb(*facts):
        return load_kb(Sample(tuple((R(r), s, o, p) for r, s, o, p in facts), ("A", "B"), 0, 1))

    results = []
    results.append((constraint_violation(kb(("father", "A", "B", 1.0)), ics["father"])[0], 1.0))
    results.append((constraint_violation(
        kb(("father", "A", "B", 1.0), ("son", "B", "A", 0.7)), ics["father"])[0], 1.0 - 0.7))
    results.append((constraint_violation(
        kb(("husband", "A", "B", 1.0), ("wife", "B", "A", 1.0)), ics["husband"])[0], 0.0))
    for bad, ic in [((R("brother"), R("daughter"), R("nephew")), gender_rule_ic()),
                    ((R("brother"), R("daughter"), R("granddaughter")), gen_rule_ic())]:
        store = kb()
        bound = register_rules(store, [(instantiate_template(composite(*bad)), w)])
        results.append((constraint_violation(store, ic, bound)[0], w))
    got = [g for g, _ in results]
    ok = all(g == e for g, e in results)
    report(capsys, 8, ok, "violation probabilities " + ", ".join(f"{g:.6g}" for g in got)
           + f" (expected 1, 0.3, 0, w, w with w={w})")
    assert ok

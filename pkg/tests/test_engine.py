import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from difflog.core import (
    KINSHIP,
    ResultIC,
    RuleTemplate,
    TemplateKind,
    composite,
    gen_rule_ic,
    gender_rule_ic,
    instantiate_template,
)
from difflog.engine import (
    EngineError,
    backward,
    constraint_violation,
    fixpoint,
    forward,
    load_kb,
    predict,
    register_rules,
    answer_distribution,
)
from difflog.parser import Sample
from difflog.datagen import default_oracle, generate_sample

from oracles import possible_worlds_query, random_kb

R = KINSHIP.id
N = len(KINSHIP)


def sample(facts, query, answer="niece", k=2):
    return Sample(tuple((R(r), s, o, p) for r, s, o, p in facts), query, R(answer), k)


NIECE = sample([("brother", "D", "R", 0.9), ("daughter", "R", "K", 0.8)], ("D", "K"))
NIECE_RULE = instantiate_template(composite(R("brother"), R("daughter"), R("niece")))


def test_load_kb():
    store = load_kb(NIECE)
    assert len(store.probs) == 2
    v = store.fact_vars[(R("brother"), "D", "R")]
    assert store.probs[v] == 0.9
    assert store.tags[(R("brother"), "D", "R")] == (frozenset({v}),)
    assert len(load_kb(sample([], ("A", "B"))).tags) == 0


def test_load_kb_duplicate_keeps_max(caplog):
    store = load_kb(sample([("son", "A", "B", 0.4), ("son", "A", "B", 0.6)], ("A", "B")))
    assert list(store.probs.values()) == [0.6]
    assert "duplicate" in caplog.text


def test_load_kb_skips_na():
    s = Sample(((KINSHIP.na_id, "A", "B", 1.0),), ("A", "B"), 0, 1)
    assert load_kb(s).tags == {}


def test_niece_probability_and_gradients():
    y, l_sl, trace = forward(NIECE, [(NIECE_RULE, 1.0)])
    assert y[R("niece")] == 0.9 * 0.8
    assert np.count_nonzero(y) == 1
    assert predict(y) == R("niece")
    up = np.zeros(N)
    up[R("niece")] = 1.0
    fg, rg = backward(trace, up)
    assert fg[(R("brother"), "D", "R")] == pytest.approx(0.8)
    assert fg[(R("daughter"), "R", "K")] == pytest.approx(0.9)
    assert rg[0] == pytest.approx(0.72)


def test_table3_rule_fires_at_full_probability():
    s = sample([("brother", "A", "B", 1.0), ("father", "B", "C", 1.0)], ("A", "C"), "father")
    rule = instantiate_template(composite(R("brother"), R("father"), R("father")))
    y, _, _ = forward(s, [(rule, 1.0)])
    assert y[R("father")] == 1.0


def test_no_rules_saturates_in_one_iteration():
    store = load_kb(NIECE)
    out = fixpoint(store, [])
    assert out.tags == store.tags and out.iterations == 1 and out.saturated


def test_empty_store_and_absent_query():
    y, _, _ = forward(sample([], ("A", "B")), [(NIECE_RULE, 1.0)])
    assert not y.any() and predict(y) == 0
    y2, _ = answer_distribution(fixpoint(load_kb(NIECE), []), ("X", "Y"))
    assert not y2.any()


def test_two_disjoint_proofs():
    s = sample(
        [("brother", "A", "B", 1.0), ("daughter", "B", "C", 1.0),
         ("son", "A", "D", 1.0), ("daughter", "D", "C", 1.0)],
        ("A", "C"),
    )
    r2 = instantiate_template(composite(R("son"), R("daughter"), R("niece")))
    y, _, _ = forward(s, [(NIECE_RULE, 0.5), (r2, 0.5)])
    assert y[R("niece")] == pytest.approx(0.75)


def test_query_already_in_kb():
    y, _, _ = forward(sample([("son", "A", "B", 1.0)], ("A", "B")), [])
    assert y[R("son")] == 1.0


def test_predict_tie_breaks_low():
    y = np.zeros(N)
    y[3] = y[7] = 0.6
    assert predict(y) == 3


def test_guard_blocks_self_loops():
    s = sample([("son", "A", "B", 1.0), ("father", "B", "A", 1.0)], ("A", "A"))
    rule = instantiate_template(composite(R("son"), R("father"), R("brother")))
    y, _, _ = forward(s, [(rule, 1.0)])
    assert not y.any()


# ---------------------------------------------------------------------------
# constraints

FATHER_IC = ResultIC(R("father"), ((R("son"), True), (R("daughter"), True)), "father")


def test_father_without_inverse_is_violated():
    store = load_kb(sample([("father", "A", "B", 1.0)], ("A", "B")))
    val, _ = constraint_violation(store, FATHER_IC)
    assert val == 1.0


def test_partial_inverse():
    store = load_kb(sample([("father", "A", "B", 1.0), ("son", "B", "A", 0.7)], ("A", "B")))
    val, grads = constraint_violation(store, FATHER_IC)
    assert val == pytest.approx(0.3)
    assert grads[store.fact_vars[(R("son"), "B", "A")]] == pytest.approx(-1.0)


def test_rule_ic_on_consistent_and_violating_rules():
    store = load_kb(NIECE)
    good = register_rules(store, [(NIECE_RULE, 0.4)])
    assert constraint_violation(store, gen_rule_ic(), good)[0] == 0.0
    bad_rule = instantiate_template(composite(R("brother"), R("daughter"), R("nephew")))
    bad = register_rules(store, [(bad_rule, 0.4)])
    val, _ = constraint_violation(store, gender_rule_ic(), bad)
    assert val == pytest.approx(0.4)


def test_semantic_loss_gradient_on_violating_rule():
    bad_rule = instantiate_template(composite(R("brother"), R("daughter"), R("granddaughter")))
    w = 0.3
    _, l_sl, trace = forward(NIECE, [(bad_rule, w)], rule_ics=[gen_rule_ic()])
    assert l_sl == pytest.approx(0.01 * w)
    _, rg = backward(trace, np.zeros(N), 1.0)
    h = 1e-6
    hi = forward(NIECE, [(bad_rule, w + h)], rule_ics=[gen_rule_ic()])[1]
    lo = forward(NIECE, [(bad_rule, w - h)], rule_ics=[gen_rule_ic()])[1]
    assert rg[0] == pytest.approx((hi - lo) / (2 * h), rel=1e-4)
    assert rg[0] == pytest.approx(0.01)


def test_contradictory_father_gives_positive_semantic_loss():
    s = sample([("father", "A", "B", 1.0)], ("A", "B"))
    _, l_sl, _ = forward(s, [], result_ics=[FATHER_IC])
    assert l_sl == pytest.approx(0.1)


def test_zero_upstream_gives_zero_grads():
    _, _, trace = forward(NIECE, [(NIECE_RULE, 0.7)], result_ics=[FATHER_IC])
    fg, rg = backward(trace, np.zeros(N), 0.0)
    assert not any(fg.values()) and not rg.any()


def test_stale_trace():
    _, _, trace = forward(NIECE, [(NIECE_RULE, 1.0)])
    trace.store.new_var(0.5)
    with pytest.raises(EngineError, match="stale"):
        backward(trace, np.ones(N))


def test_rule_weight_clamped_at_boundary():
    y, _, trace = forward(NIECE, [(NIECE_RULE, 3.0)])
    assert y[R("niece")] == pytest.approx(0.72)
    _, rg = backward(trace, np.eye(N)[R("niece")])
    assert rg[0] == pytest.approx(0.72)  # d/dp of the clamped variable; the learner masks it


# ---------------------------------------------------------------------------
# oracle comparisons


def _engine_rules(rules):
    out = []
    for *_, w, (kind, args) in rules:
        out.append((instantiate_template(RuleTemplate(TemplateKind(kind), args)), w))
    return out


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_engine_matches_possible_worlds(seed):
    rng = random.Random(seed)
    facts, rules, query = random_kb(rng, max_facts=6, max_rules=3, max_vars=8)
    s = Sample(tuple(facts), query, 0, 0)
    y, _, trace = forward(s, _engine_rules(rules), k=None, max_iters=64)
    assert trace.store.saturated
    expected = possible_worlds_query(facts, [r[:4] for r in rules], query, N)
    assert np.allclose(y, expected, atol=1e-9, rtol=0)


@given(st.integers(0, 2**32 - 1), st.sampled_from([None, 1, 3]))
@settings(max_examples=40, deadline=None)
def test_fixpoint_is_order_independent(seed, k):
    rng = random.Random(seed)
    facts, rules, query = random_kb(rng, max_facts=8, max_rules=4)
    er = _engine_rules(rules)
    a = forward(Sample(tuple(facts), query, 0, 0), er, k=k, max_iters=64)
    f2, r2 = list(facts), list(er)
    rng.shuffle(f2)
    rng.shuffle(r2)
    b = forward(Sample(tuple(f2), query, 0, 0), r2, k=k, max_iters=64)
    assert a[2].store.tags == b[2].store.tags
    assert np.array_equal(a[0], b[0])


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_backward_matches_finite_differences(seed):
    rng = random.Random(seed)
    facts, rules, query = random_kb(rng, max_facts=6, max_rules=3, max_vars=9)
    facts = [f[:3] + (rng.uniform(0.1, 0.9),) for f in facts]
    rules = [r[:3] + (rng.uniform(0.1, 0.9), r[4]) for r in rules]
    up = np.array([rng.uniform(-1, 1) for _ in range(N)])
    ics = [FATHER_IC, ResultIC(0, ((1, False),), "x")]

    def loss(fs, rs):
        y, l_sl, tr = forward(Sample(tuple(fs), query, 0, 0), _engine_rules(rs), ics, [gender_rule_ic()], k=None, max_iters=64)
        return float(up @ y) + l_sl, tr

    _, trace = loss(facts, rules)
    fg, rg = backward(trace, up, 1.0)
    h = 1e-5
    for i, f in enumerate(facts):
        hi, lo = list(facts), list(facts)
        hi[i] = f[:3] + (f[3] + h,)
        lo[i] = f[:3] + (f[3] - h,)
        fd = (loss(hi, rules)[0] - loss(lo, rules)[0]) / (2 * h)
        assert fg[f[:3]] == pytest.approx(fd, rel=1e-4, abs=1e-7)
    for i, r in enumerate(rules):
        hi, lo = list(rules), list(rules)
        hi[i] = r[:3] + (r[3] + h, r[4])
        lo[i] = r[:3] + (r[3] - h, r[4])
        fd = (loss(facts, hi)[0] - loss(facts, lo)[0]) / (2 * h)
        assert rg[i] == pytest.approx(fd, rel=1e-4, abs=1e-7)


def test_chain_saturates_within_k_iterations():
    oracle = default_oracle()
    rules = [(instantiate_template(composite(*t)), 1.0) for t in oracle.triples()]
    for k in range(2, 11):
        s = generate_sample(k, np.random.default_rng(k), oracle)
        _, _, trace = forward(s, rules)
        assert trace.store.saturated
        assert trace.store.iterations <= k


def test_probabilities_in_unit_interval():
    rng = random.Random(5)
    for _ in range(20):
        facts, rules, query = random_kb(rng)
        y, l_sl, _ = forward(Sample(tuple(facts), query, 0, 0), _engine_rules(rules), [FATHER_IC], k=3)
        assert ((0 <= y) & (y <= 1)).all() and 0 <= l_sl <= 0.1

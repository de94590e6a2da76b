import numpy as np
import pytest

from difflog.core import KINSHIP, LogicError, composite, gen_rule_ic, gender_rule_ic, instantiate_template
from difflog.datagen import (
    NAME_POOL,
    CompositionOracle,
    GenerationError,
    GenSpec,
    default_oracle,
    generate_dataset,
    generate_sample,
    generate_samples,
    parse_counts,
)
from difflog.engine import forward
from difflog.parser import parse_dataset

R = KINSHIP.id


def test_compose_examples():
    o = default_oracle()
    assert o.compose(R("brother"), R("daughter")) == R("niece")
    assert o.compose(R("father"), R("mother")) == R("grandmother")
    assert o.compose(R("husband"), R("husband")) is None


def test_oracle_size_and_ics():
    o = default_oracle()
    assert 85 <= len(o) <= 100
    gender, gen = gender_rule_ic(), gen_rule_ic()
    for t in o.triples():
        assert t not in gender.violating and t not in gen.violating


def test_oracle_rejects_violating_entry():
    with pytest.raises(LogicError, match="violate"):
        CompositionOracle.load("compose brother daughter nephew\n")


def test_oracle_rejects_ambiguous_entry():
    with pytest.raises(LogicError, match="ambiguous"):
        CompositionOracle.load("compose brother daughter niece\ncompose brother daughter daughter\n")


def test_name_pool():
    assert len(NAME_POOL) == 200 and len(set(NAME_POOL)) == 200


def _chain(sample):
    """Recover the chain order from the shuffled facts."""
    nxt = {s: (r, o) for r, s, o, _ in sample.facts}
    cur, rels = sample.query[0], []
    while cur != sample.query[1]:
        r, cur = nxt[cur]
        rels.append(r)
    return rels


def test_sample_shape():
    o = default_oracle()
    for k in (2, 5, 10):
        s = generate_sample(k, np.random.default_rng(k), o)
        assert s.k == k and len(s.facts) == k
        ents = {e for _, a, b, _ in s.facts for e in (a, b)}
        assert len(ents) == k + 1
        assert all(p == 1.0 for *_, p in s.facts)
        chain = _chain(s)
        acc = chain[0]
        for r in chain[1:]:
            acc = o.compose(acc, r)
        assert acc == s.answer


def test_short_chain_rejected():
    with pytest.raises(GenerationError):
        generate_sample(1, np.random.default_rng(0))


def test_resampling_cap():
    # a lone self-composing entry still yields chains of any length
    o = CompositionOracle.load("compose brother brother brother\n")
    s = generate_sample(3, np.random.default_rng(0), o)
    assert s.answer == R("brother")
    dead_end = CompositionOracle.load("compose brother daughter niece\n")
    with pytest.raises(GenerationError, match="1000 tries"):
        generate_sample(3, np.random.default_rng(0), dead_end)


def test_engine_agrees_with_generator():
    o = default_oracle()
    rules = [(instantiate_template(composite(*t)), 1.0) for t in o.triples()]
    for spec_k in range(2, 11):
        for s in generate_samples(GenSpec({spec_k: 3}, seed=11, stream=spec_k)):
            y, _, _ = forward(s, rules, k=3)
            assert y[s.answer] == 1.0
            assert np.count_nonzero(y) == 1


def test_dataset_counts_and_determinism():
    spec = GenSpec({2: 5, 3: 5}, seed=3)
    text = generate_dataset(spec)
    assert len(text.splitlines()) == 10
    assert text == generate_dataset(GenSpec({2: 5, 3: 5}, seed=3))
    assert text != generate_dataset(GenSpec({2: 5, 3: 5}, seed=4))
    samples = parse_dataset(text)
    assert [s.k for s in samples] == [2] * 5 + [3] * 5


def test_streams_differ():
    a = generate_samples(GenSpec({2: 20}, seed=1, stream=0))
    b = generate_samples(GenSpec({2: 20}, seed=1, stream=1))
    assert a != b


def test_answer_coverage():
    o = default_oracle()
    feasible = {c for c in o.table.values()}
    answers = {s.answer for s in generate_samples(GenSpec({2: 1000}, seed=0))}
    assert answers == feasible


def test_distractors():
    s = generate_sample(3, np.random.default_rng(2), distractors=2)
    assert len(s.facts) == 5
    assert s.answer == default_oracle().closure(_chain_without_distractors(s)).pop()


def _chain_without_distractors(s):
    by_sub = {}
    for r, a, b, _ in s.facts:
        by_sub.setdefault(a, []).append((r, b))
    # depth-first search for a path from the query head to its tail
    stack = [(s.query[0], [])]
    while stack:
        cur, path = stack.pop()
        if cur == s.query[1] and len(path) == s.k:
            return path
        for r, b in by_sub.get(cur, ()):
            stack.append((b, path + [r]))
    raise AssertionError("no chain")


@pytest.mark.parametrize(
    "text, expected",
    [
        ("1000x2,1000x3", {2: 1000, 3: 1000}),
        ("50x2..4", {2: 50, 3: 50, 4: 50}),
        ("", {}),
    ],
)
def test_parse_counts(text, expected):
    assert parse_counts(text) == expected


def test_parse_counts_errors():
    with pytest.raises(GenerationError, match="bad count"):
        parse_counts("lots")
    with pytest.raises(GenerationError, match="invalid count"):
        GenSpec({1: 3})

"""Bottom-up deduction over tagged facts, answer distributions and semantic loss."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import KINSHIP, ResultIC, Rule, RuleIC, Vocabulary
from .parser import Sample
from .provenance import (
    FALSE,
    ONE,
    Circuit,
    Formula,
    Tag,
    conj_all,
    disj_all,
    make_tag,
    neg,
    tag_and,
    tag_formula,
    var,
)

log = logging.getLogger(__name__)

DEFAULT_TOPK = 3
DEFAULT_MAX_ITERS = 16
RESULT_IC_WEIGHT = 0.1
RULE_IC_WEIGHT = 0.01

Key = tuple[int, str, str]


class EngineError(RuntimeError):
    pass


@dataclass
class FactStore:
    """Tagged ground atoms ``(pred, sub, obj)`` plus the variable registry."""

    tags: dict[Key, Tag] = field(default_factory=dict)
    probs: dict[int, float] = field(default_factory=dict)
    fact_vars: dict[Key, int] = field(default_factory=dict)
    iterations: int = 0
    saturated: bool = True
    version: int = 0

    def new_var(self, prob: float) -> int:
        if not 0.0 <= prob <= 1.0:
            raise EngineError(f"probability {prob} outside [0, 1]")
        v = len(self.probs)
        self.probs[v] = prob
        self.version += 1
        return v

    def copy(self) -> "FactStore":
        return FactStore(
            dict(self.tags), dict(self.probs), dict(self.fact_vars),
            self.iterations, self.saturated, self.version,
        )


def load_kb(sample: Sample, vocab: Vocabulary = KINSHIP) -> FactStore:
    """One fresh variable and singleton tag per KB fact.

    Variables are allocated in sorted atom order so ids do not depend on the
    order facts were listed in.
    """
    best: dict[Key, float] = {}
    for rel, sub, obj, prob in sample.facts:
        if rel >= len(vocab):
            continue  # n/a never enters the store
        key = (rel, sub, obj)
        if key in best:
            log.warning("duplicate fact %s(%s, %s); keeping max probability",
                        vocab.name(rel), sub, obj)
            prob = max(prob, best[key])
        best[key] = prob
    store = FactStore()
    for key in sorted(best):
        v = store.new_var(best[key])
        store.fact_vars[key] = v
        store.tags[key] = (frozenset((v,)),)
    return store


# ---------------------------------------------------------------------------
# Fixpoint


class _Index:
    def __init__(self, tags: dict[Key, Tag]):
        self.by_sub: dict[tuple[int, str], list[str]] = {}
        self.by_obj: dict[tuple[int, str], list[str]] = {}
        self.by_pred: dict[int, list[tuple[str, str]]] = {}
        for p, s, o in sorted(tags):
            self.by_sub.setdefault((p, s), []).append(o)
            self.by_obj.setdefault((p, o), []).append(s)
            self.by_pred.setdefault(p, []).append((s, o))

    def matches(self, pred: int, args: tuple[str, str], env: dict[str, str]):
        x, y = args
        if x in env and y in env:
            s, o = env[x], env[y]
            if o in self.by_sub.get((pred, s), ()):
                yield s, o
        elif x in env:
            s = env[x]
            for o in self.by_sub.get((pred, s), ()):
                yield s, o
        elif y in env:
            o = env[y]
            for s in self.by_obj.get((pred, o), ()):
                yield s, o
        else:
            yield from self.by_pred.get(pred, ())


def _bind(args: tuple[str, str], s: str, o: str, env: dict[str, str]) -> dict[str, str] | None:
    x, y = args
    if x == y and s != o:
        return None
    if env.get(x, s) != s or env.get(y, o) != o:
        return None
    new = dict(env)
    new[x] = s
    new[y] = o
    return new


def fixpoint(
    store: FactStore,
    rules: Sequence[tuple[Rule, int | None]],
    k: int | None = DEFAULT_TOPK,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> FactStore:
    """Semi-naive evaluation to a fixpoint of the tags.

    Every iteration fires each rule on bindings that use at least one atom
    whose tag changed in the previous iteration, reading all tags from the
    previous state, so the result does not depend on rule or fact order.
    Rule variables must already be registered in ``store.probs``.
    """
    probs = store.probs
    tags = dict(store.tags)
    delta = set(tags)
    rule_tags = [ONE if v is None else (frozenset((v,)),) for _, v in rules]
    iters = 0
    saturated = False
    while iters < max_iters:
        iters += 1
        index = _Index(tags)
        derived: dict[Key, list] = {}
        delta_by_pred: dict[int, list[Key]] = {}
        for key in sorted(delta):
            delta_by_pred.setdefault(key[0], []).append(key)
        for (rule, _), rtag in zip(rules, rule_tags):
            for env, body_keys in _fire(rule, index, delta_by_pred):
                head = (rule.head.pred, env[rule.head.args[0]], env[rule.head.args[1]])
                t = rtag
                for bk in body_keys:
                    t = tag_and(t, tags[bk], k, probs)
                    if not t:
                        break
                if t:
                    derived.setdefault(head, []).extend(t)
        new_delta = set()
        for head in sorted(derived):
            old = tags.get(head, ())
            new = make_tag(itertools.chain(old, derived[head]), k, probs)
            if new != old:
                tags[head] = new
                new_delta.add(head)
        delta = new_delta
        if not delta:
            saturated = True
            break
    if not saturated:
        log.warning("fixpoint stopped at the iteration cap (%d) before saturating", max_iters)
    out = FactStore(tags, dict(probs), dict(store.fact_vars), iters, saturated, store.version + 1)
    return out


def _fire(rule: Rule, index: _Index, delta_by_pred: dict[int, list[Key]]):
    """Bindings of ``rule`` with at least one body atom drawn from the delta."""
    body = rule.body
    seen = set()
    for i, atom in enumerate(body):
        for key in delta_by_pred.get(atom.pred, ()):
            env = _bind(atom.args, key[1], key[2], {})
            if env is None:
                continue
            for env2, keys in _join(body, i, index, env, 0):
                if any(env2[a] == env2[b] for a, b in rule.neq):
                    continue
                ident = tuple(keys)
                if ident in seen:
                    continue
                seen.add(ident)
                yield env2, keys


def _join(body, skip: int, index: _Index, env, pos: int):
    if pos == len(body):
        keys = []
        for atom in body:
            keys.append((atom.pred, env[atom.args[0]], env[atom.args[1]]))
        yield env, keys
        return
    if pos == skip:
        yield from _join(body, skip, index, env, pos + 1)
        return
    atom = body[pos]
    for s, o in index.matches(atom.pred, atom.args, env):
        env2 = _bind(atom.args, s, o, env)
        if env2 is not None:
            yield from _join(body, skip, index, env2, pos + 1)


# ---------------------------------------------------------------------------
# Queries and constraints


@dataclass
class ForwardTrace:
    """Formulas of one forward pass, compiled into a shared circuit."""

    circuit: Circuit
    probs: dict[int, float]
    answer_roots: dict[int, int]
    result_ic_roots: list[int]
    rule_ic_roots: list[int]
    fact_vars: dict[Key, int]
    rule_vars: list[int | None]
    values: list[float]
    answer_formulas: dict[int, Formula]
    constraint_formulas: list[Formula]
    store: FactStore | None = None
    version: int = 0
    w_result_ic: float = RESULT_IC_WEIGHT
    w_rule_ic: float = RULE_IC_WEIGHT
    warnings: list[str] = field(default_factory=list)


def _new_trace(store: FactStore) -> ForwardTrace:
    return ForwardTrace(
        Circuit(), store.probs, {}, [], [], store.fact_vars, [], [], {}, [],
        store, store.version,
    )


def answer_distribution(
    store: FactStore, query: tuple[str, str], vocab: Vocabulary = KINSHIP,
    trace: ForwardTrace | None = None,
) -> tuple[np.ndarray, ForwardTrace]:
    s, o = query
    trace = trace or _new_trace(store)
    for r in range(len(vocab)):
        tag = store.tags.get((r, s, o))
        if tag:
            f = tag_formula(tag)
            trace.answer_formulas[r] = f
            trace.answer_roots[r] = trace.circuit.compile(f)
    trace.values = trace.circuit.values(store.probs)
    y = np.zeros(len(vocab))
    for r, root in trace.answer_roots.items():
        y[r] = trace.values[root]
    return y, trace


def predict(y_hat: np.ndarray) -> int:
    """Argmax with ties going to the smallest relation id."""
    return int(np.argmax(y_hat))


def result_ic_formula(store: FactStore, c: ResultIC) -> Formula:
    clauses = []
    for key in sorted(store.tags):
        pred, a, b = key
        if pred != c.premise:
            continue
        concl = []
        for rel, swapped in c.conclusions:
            t = store.tags.get((rel, b, a) if swapped else (rel, a, b))
            if t:
                concl.append(tag_formula(t))
        clauses.append(disj_all([neg(tag_formula(store.tags[key]))] + concl))
    if not clauses:
        return FALSE
    return neg(conj_all(clauses))


def rule_ic_formula(c: RuleIC, rules: Sequence[tuple[Rule, int | None]]) -> Formula:
    return disj_all(
        var(v) for rule, v in rules
        if v is not None and rule.template is not None and c.violates(rule.template)
    )


def constraint_violation(
    store: FactStore,
    c: ResultIC | RuleIC,
    rules: Sequence[tuple[Rule, int | None]] = (),
) -> tuple[float, dict[int, float]]:
    """Probability that ``c`` is violated, with d/dp for every variable."""
    f = result_ic_formula(store, c) if isinstance(c, ResultIC) else rule_ic_formula(c, rules)
    circuit = Circuit()
    root = circuit.compile(f)
    vals = circuit.values(store.probs)
    grads = circuit.gradient({root: 1.0}, store.probs, vals)
    return vals[root], {v: grads.get(v, 0.0) for v in sorted(f.vars)}


# ---------------------------------------------------------------------------
# Forward / backward


def register_rules(
    store: FactStore, rules: Sequence[tuple[Rule, float | None]]
) -> list[tuple[Rule, int | None]]:
    """Give each weighted rule a variable with its weight clamped to [0, 1].

    Variables are allocated in a canonical rule order so that tie-breaking
    during top-k truncation does not depend on the order rules were listed.
    """
    def key(i: int):
        rule, w = rules[i]
        t = rule.template
        return (0, t.kind.value, t.args, w) if t is not None else (1, repr(rule), w)

    weighted = [i for i, (_, w) in enumerate(rules) if w is not None]
    vars_: dict[int, int] = {}
    for i in sorted(weighted, key=key):
        w = float(rules[i][1])
        vars_[i] = store.new_var(min(max(w, 0.0), 1.0))
    return [(rule, vars_.get(i)) for i, (rule, _) in enumerate(rules)]


def forward(
    sample: Sample,
    rules: Sequence[tuple[Rule, float | None]],
    result_ics: Sequence[ResultIC] = (),
    rule_ics: Sequence[RuleIC] = (),
    k: int | None = DEFAULT_TOPK,
    *,
    max_iters: int = DEFAULT_MAX_ITERS,
    w_result_ic: float = RESULT_IC_WEIGHT,
    w_rule_ic: float = RULE_IC_WEIGHT,
    vocab: Vocabulary = KINSHIP,
) -> tuple[np.ndarray, float, ForwardTrace]:
    """Deduce the answer distribution and the weighted semantic loss.

    ``rules`` pairs each rule with its raw weight (None for fixed rules).
    """
    store = load_kb(sample, vocab)
    bound = register_rules(store, rules)
    store = fixpoint(store, bound, k, max_iters)
    trace = _new_trace(store)
    trace.rule_vars = [v for _, v in bound]
    trace.w_result_ic = w_result_ic
    trace.w_rule_ic = w_rule_ic
    if not store.saturated:
        trace.warnings.append("saturation incomplete")
    for c in result_ics:
        f = result_ic_formula(store, c)
        trace.constraint_formulas.append(f)
        trace.result_ic_roots.append(trace.circuit.compile(f))
    for c in rule_ics:
        f = rule_ic_formula(c, bound)
        trace.constraint_formulas.append(f)
        trace.rule_ic_roots.append(trace.circuit.compile(f))
    y, trace = answer_distribution(store, sample.query, vocab, trace)
    vals = trace.values
    l_sl = w_result_ic * sum(vals[r] for r in trace.result_ic_roots) + w_rule_ic * sum(
        vals[r] for r in trace.rule_ic_roots
    )
    return y, float(l_sl), trace


def backward(
    trace: ForwardTrace, upstream_y: np.ndarray | Sequence[float], upstream_sl: float = 0.0
) -> tuple[dict[Key, float], np.ndarray]:
    """Chain rule through every stored formula.

    Returns gradients for each KB fact probability and, aligned with the
    rule list given to ``forward``, each clamped rule weight (zero for fixed
    rules).
    """
    if trace.store is not None and trace.store.version != trace.version:
        raise EngineError("stale trace: the fact store changed after the forward pass")
    seeds: dict[int, float] = {}
    for r, root in sorted(trace.answer_roots.items()):
        g = float(upstream_y[r])
        if g:
            seeds[root] = seeds.get(root, 0.0) + g
    if upstream_sl:
        for root in trace.result_ic_roots:
            seeds[root] = seeds.get(root, 0.0) + upstream_sl * trace.w_result_ic
        for root in trace.rule_ic_roots:
            seeds[root] = seeds.get(root, 0.0) + upstream_sl * trace.w_rule_ic
    grads = trace.circuit.gradient(seeds, trace.probs, trace.values)
    fact_grads = {key: grads.get(v, 0.0) for key, v in sorted(trace.fact_vars.items())}
    rule_grads = np.array(
        [0.0 if v is None else grads.get(v, 0.0) for v in trace.rule_vars]
    )
    return fact_grads, rule_grads

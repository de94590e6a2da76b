"""Top-k proof provenance and exact, differentiable weighted model counting.

A derived fact is tagged with a small set of proofs; each proof is the set
of boolean variables (facts and rule weights) it depends on.  Probabilities
are obtained by lowering a tag to a DNF formula and counting its models
exactly with Shannon expansion.  The expansion is recorded as an arithmetic
circuit so a single reverse sweep yields every partial derivative.
"""

from __future__ import annotations

import itertools
from collections import Counter
from typing import Iterable, Mapping

import numpy as np

Proof = frozenset  # frozenset[int]
Tag = tuple  # tuple[Proof, ...], canonical order

EMPTY_PROOF: Proof = frozenset()
ONE: Tag = (EMPTY_PROOF,)
ZERO: Tag = ()

BRUTE_FORCE_MAX_VARS = 20


class WmcError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Tags


def proof_prob(proof: Proof, probs: Mapping[int, float]) -> float:
    p = 1.0
    for v in proof:
        p *= probs[v]
    return p


def _rank_key(proof: Proof, probs: Mapping[int, float]):
    # Subsets rank before supersets on ties, which keeps truncation and
    # absorption commuting.
    return (-proof_prob(proof, probs), len(proof), tuple(sorted(proof)))


def _absorb(proofs: Iterable[Proof]) -> list[Proof]:
    uniq = sorted(set(proofs), key=len)
    kept: list[Proof] = []
    for p in uniq:
        if not any(q <= p for q in kept):
            kept.append(p)
    return kept


def make_tag(proofs: Iterable[Proof], k: int | None, probs: Mapping[int, float]) -> Tag:
    """Absorb, rank by probability, keep the best ``k`` (all if None)."""
    kept = _absorb(proofs)
    kept.sort(key=lambda p: _rank_key(p, probs))
    if k is not None:
        kept = kept[:k]
    return tuple(kept)


def tag_or(t1: Tag, t2: Tag, k: int | None, probs: Mapping[int, float]) -> Tag:
    return make_tag(itertools.chain(t1, t2), k, probs)


def tag_and(t1: Tag, t2: Tag, k: int | None, probs: Mapping[int, float]) -> Tag:
    return make_tag((p | q for p in t1 for q in t2), k, probs)


def tag_vars(tag: Tag) -> set[int]:
    return set().union(*tag) if tag else set()


# ---------------------------------------------------------------------------
# Boolean formulas


class Formula:
    """Immutable boolean formula node with structural equality.

    ``op`` is one of ``T``, ``F``, ``v`` (args = var id), ``!`` (args =
    child), ``&`` / ``|`` (args = frozenset of children).  Build through
    the constructors below, which flatten and simplify.
    """

    __slots__ = ("op", "args", "vars", "_hash", "_occ")

    def __init__(self, op: str, args, vars_: frozenset):
        self.op = op
        self.args = args
        self.vars = vars_
        self._hash = hash((op, args))
        self._occ = None

    def __hash__(self) -> int:
        return self._hash

    def __eq__(self, other) -> bool:
        if self is other:
            return True
        return (
            isinstance(other, Formula)
            and self._hash == other._hash
            and self.op == other.op
            and self.args == other.args
        )

    def __repr__(self) -> str:
        if self.op in "TF":
            return self.op
        if self.op == "v":
            return f"x{self.args}"
        if self.op == "!":
            return f"!{self.args!r}"
        inner = f" {self.op} ".join(sorted(map(repr, self.args)))
        return f"({inner})"

    def __and__(self, other: "Formula") -> "Formula":
        return conj(self, other)

    def __or__(self, other: "Formula") -> "Formula":
        return disj(self, other)

    def __invert__(self) -> "Formula":
        return neg(self)

    def occurrences(self) -> Counter:
        if self._occ is None:
            if self.op == "v":
                self._occ = Counter({self.args: 1})
            elif self.op == "!":
                self._occ = self.args.occurrences()
            elif self.op in "&|":
                c: Counter = Counter()
                for ch in self.args:
                    c.update(ch.occurrences())
                self._occ = c
            else:
                self._occ = Counter()
        return self._occ


TRUE = Formula("T", None, frozenset())
FALSE = Formula("F", None, frozenset())


def var(i: int) -> Formula:
    return Formula("v", int(i), frozenset((int(i),)))


def neg(f: Formula) -> Formula:
    if f is TRUE or f.op == "T":
        return FALSE
    if f.op == "F":
        return TRUE
    if f.op == "!":
        return f.args
    return Formula("!", f, f.vars)


def _nary(op: str, fs: Iterable[Formula]) -> Formula:
    unit, zero = (TRUE, FALSE) if op == "&" else (FALSE, TRUE)
    children: set[Formula] = set()
    for f in fs:
        if f.op == zero.op:
            return zero
        if f.op == unit.op:
            continue
        if f.op == op:
            children.update(f.args)
        else:
            children.add(f)
    if not children:
        return unit
    if len(children) == 1:
        return next(iter(children))
    for ch in children:
        if ch.op == "!" and ch.args in children:
            return zero
    vs = frozenset().union(*(c.vars for c in children))
    return Formula(op, frozenset(children), vs)


def conj(*fs: Formula) -> Formula:
    return _nary("&", fs)


def disj(*fs: Formula) -> Formula:
    return _nary("|", fs)


def conj_all(fs: Iterable[Formula]) -> Formula:
    return _nary("&", fs)


def disj_all(fs: Iterable[Formula]) -> Formula:
    return _nary("|", fs)


def tag_formula(tag: Tag) -> Formula:
    """Lower a proof set to OR over proofs of AND over their variables."""
    return disj_all(conj_all(var(v) for v in sorted(p)) for p in tag)


def condition(f: Formula, v: int, value: bool, memo: dict | None = None) -> Formula:
    if v not in f.vars:
        return f
    if memo is None:
        memo = {}
    hit = memo.get(f)
    if hit is not None:
        return hit
    if f.op == "v":
        out = TRUE if value else FALSE
    elif f.op == "!":
        out = neg(condition(f.args, v, value, memo))
    else:
        out = _nary(f.op, (condition(c, v, value, memo) for c in f.args))
    memo[f] = out
    return out


def evaluate(f: Formula, world: Mapping[int, bool]) -> bool:
    op = f.op
    if op == "T":
        return True
    if op == "F":
        return False
    if op == "v":
        return bool(world[f.args])
    if op == "!":
        return not evaluate(f.args, world)
    if op == "&":
        return all(evaluate(c, world) for c in f.args)
    return any(evaluate(c, world) for c in f.args)


# ---------------------------------------------------------------------------
# Shannon expansion compiled to an arithmetic circuit

_CONST, _LIT, _NEG, _PROD, _DEC = range(5)


class Circuit:
    """Post-order node list; children always precede their parents."""

    def __init__(self):
        self.nodes: list[tuple] = []
        self._memo: dict[Formula, int] = {}
        self._consts: dict[float, int] = {}

    def _add(self, node: tuple) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def const(self, value: float) -> int:
        if value not in self._consts:
            self._consts[value] = self._add((_CONST, value))
        return self._consts[value]

    def compile(self, f: Formula) -> int:
        hit = self._memo.get(f)
        if hit is not None:
            return hit
        op = f.op
        if op == "T":
            idx = self.const(1.0)
        elif op == "F":
            idx = self.const(0.0)
        elif op == "v":
            idx = self._add((_LIT, f.args))
        elif op == "!":
            idx = self._add((_NEG, self.compile(f.args)))
        else:
            comps = _components(f.args)
            if len(comps) > 1:
                parts = [_nary(op, c) for c in comps]
                if op == "&":
                    idx = self._add((_PROD, tuple(self.compile(p) for p in parts)))
                else:
                    negs = tuple(self._add((_NEG, self.compile(p))) for p in parts)
                    idx = self._add((_NEG, self._add((_PROD, negs))))
            else:
                v = _branch_var(f)
                memo: dict = {}
                hi = self.compile(condition(f, v, True, memo))
                memo = {}
                lo = self.compile(condition(f, v, False, memo))
                idx = self._add((_DEC, v, hi, lo))
        self._memo[f] = idx
        return idx

    def values(self, probs: Mapping[int, float]) -> list[float]:
        vals = [0.0] * len(self.nodes)
        for i, node in enumerate(self.nodes):
            kind = node[0]
            if kind == _LIT:
                vals[i] = probs[node[1]]
            elif kind == _DEC:
                p = probs[node[1]]
                vals[i] = p * vals[node[2]] + (1.0 - p) * vals[node[3]]
            elif kind == _NEG:
                vals[i] = 1.0 - vals[node[1]]
            elif kind == _PROD:
                acc = 1.0
                for c in node[1]:
                    acc *= vals[c]
                vals[i] = acc
            else:
                vals[i] = node[1]
        return vals

    def gradient(
        self, seeds: Mapping[int, float], probs: Mapping[int, float], vals=None
    ) -> dict[int, float]:
        """One reverse sweep; returns d(sum_r seeds[r] * value(r)) / d p(v)."""
        if vals is None:
            vals = self.values(probs)
        if not seeds:
            return {}
        top = max(seeds)
        adj = [0.0] * (top + 1)
        for r, s in seeds.items():
            adj[r] += s
        grads: dict[int, float] = {}
        for i in range(top, -1, -1):
            a = adj[i]
            if a == 0.0:
                continue
            node = self.nodes[i]
            kind = node[0]
            if kind == _LIT:
                grads[node[1]] = grads.get(node[1], 0.0) + a
            elif kind == _DEC:
                _, v, hi, lo = node
                p = probs[v]
                grads[v] = grads.get(v, 0.0) + a * (vals[hi] - vals[lo])
                adj[hi] += a * p
                adj[lo] += a * (1.0 - p)
            elif kind == _NEG:
                adj[node[1]] -= a
            elif kind == _PROD:
                kids = node[1]
                for j, c in enumerate(kids):
                    rest = 1.0
                    for m, d in enumerate(kids):
                        if m != j:
                            rest *= vals[d]
                    adj[c] += a * rest
        return grads


def _components(children: Iterable[Formula]) -> list[list[Formula]]:
    """Group children into classes that share variables (union-find)."""
    children = list(children)
    parent = list(range(len(children)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    owner: dict[int, int] = {}
    for i, ch in enumerate(children):
        for v in ch.vars:
            j = owner.setdefault(v, i)
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[ri] = rj
    groups: dict[int, list[Formula]] = {}
    for i, ch in enumerate(children):
        groups.setdefault(find(i), []).append(ch)
    return list(groups.values())


def _branch_var(f: Formula) -> int:
    occ = f.occurrences()
    return min(occ, key=lambda v: (-occ[v], v))


def _check_probs(f: Formula, probs: Mapping[int, float]) -> None:
    for v in f.vars:
        if v not in probs:
            raise WmcError(f"unbound variable x{v}")
        p = probs[v]
        if not 0.0 <= p <= 1.0:
            raise WmcError(f"probability of x{v} is {p}, outside [0, 1]")


class WmcContext:
    """Shares one compiled circuit across the formulas of a forward pass."""

    def __init__(self):
        self.circuit = Circuit()

    def wmc(self, f: Formula, probs: Mapping[int, float]) -> float:
        _check_probs(f, probs)
        root = self.circuit.compile(f)
        return self.circuit.values(probs)[root]

    def wmc_grad(self, f: Formula, probs: Mapping[int, float]) -> tuple[float, dict[int, float]]:
        _check_probs(f, probs)
        root = self.circuit.compile(f)
        vals = self.circuit.values(probs)
        grads = self.circuit.gradient({root: 1.0}, probs, vals)
        return vals[root], {v: grads.get(v, 0.0) for v in sorted(f.vars)}


def wmc(f: Formula, probs: Mapping[int, float]) -> float:
    return WmcContext().wmc(f, probs)


def wmc_grad(f: Formula, probs: Mapping[int, float]) -> tuple[float, dict[int, float]]:
    return WmcContext().wmc_grad(f, probs)


# ---------------------------------------------------------------------------
# Oracle


def brute_force_wmc(f: Formula, probs: Mapping[int, float]) -> float:
    """Sum world weights over all 2^n assignments that satisfy ``f``."""
    vs = sorted(f.vars)
    n = len(vs)
    if n > BRUTE_FORCE_MAX_VARS:
        raise WmcError(f"{n} variables exceeds the enumeration cap of {BRUTE_FORCE_MAX_VARS}")
    for v in vs:
        if v not in probs:
            raise WmcError(f"unbound variable x{v}")
    worlds = np.arange(1 << n, dtype=np.int64)
    bits = {v: ((worlds >> i) & 1).astype(bool) for i, v in enumerate(vs)}
    weight = np.ones(1 << n)
    for v in vs:
        p = probs[v]
        weight *= np.where(bits[v], p, 1.0 - p)
    sat = _eval_worlds(f, bits, 1 << n, {})
    return float(weight[sat].sum())


def _eval_worlds(f: Formula, bits, size: int, memo: dict) -> np.ndarray:
    hit = memo.get(f)
    if hit is not None:
        return hit
    op = f.op
    if op == "T":
        out = np.ones(size, dtype=bool)
    elif op == "F":
        out = np.zeros(size, dtype=bool)
    elif op == "v":
        out = bits[f.args]
    elif op == "!":
        out = ~_eval_worlds(f.args, bits, size, memo)
    elif op == "&":
        out = np.ones(size, dtype=bool)
        for c in f.args:
            out = out & _eval_worlds(c, bits, size, memo)
    else:
        out = np.zeros(size, dtype=bool)
        for c in f.args:
            out = out | _eval_worlds(c, bits, size, memo)
    memo[f] = out
    return out

"""Synthetic kinship chains with answers from a hand-written composition table."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .core import KINSHIP, LogicError, TemplateKind, Vocabulary, gen_rule_ic, gender_rule_ic
from .parser import Sample, dump_sample, parse_rule_priors

MAX_TRIES = 1000

_ONSETS = ("Al", "Be", "Ca", "Da", "El", "Fa", "Ga", "Ha", "Is", "Jo",
           "Ka", "Le", "Ma", "Ne", "Ol", "Pe", "Ro", "Sa", "Ta", "Vi")
_CODAS = ("den", "ra", "lin", "mon", "tha", "ric", "na", "vin", "sa", "ton")
NAME_POOL: tuple[str, ...] = tuple(a + b for a, b in itertools.product(_ONSETS, _CODAS))


class GenerationError(RuntimeError):
    pass


def oracle_text() -> str:
    return resources.files("difflog").joinpath("data/oracle.priors").read_text()


@dataclass(frozen=True)
class CompositionOracle:
    table: dict[tuple[int, int], int]
    vocab: Vocabulary = KINSHIP

    @classmethod
    def load(cls, text: str | None = None, vocab: Vocabulary = KINSHIP) -> "CompositionOracle":
        priors = parse_rule_priors(oracle_text() if text is None else text, vocab)
        table: dict[tuple[int, int], int] = {}
        for t in priors:
            if t.kind is not TemplateKind.COMPOSITE:
                raise LogicError(f"oracle entries must be compositions, got {t.kind.value}")
            r1, r2, r3 = t.args
            if table.get((r1, r2), r3) != r3:
                raise LogicError(f"ambiguous oracle entry for ({vocab.name(r1)}, {vocab.name(r2)})")
            table[(r1, r2)] = r3
        oracle = cls(table, vocab)
        bad = oracle.ic_violations()
        if bad:
            names = ", ".join("(" + ", ".join(vocab.name(r) for r in t) + ")" for t in bad)
            raise LogicError(f"oracle entries violate rule constraints: {names}")
        return oracle

    def ic_violations(self) -> list[tuple[int, int, int]]:
        ics = (gender_rule_ic(self.vocab), gen_rule_ic(self.vocab))
        triples = [(a, b, c) for (a, b), c in sorted(self.table.items())]
        return [t for t in triples if any(t in ic.violating for ic in ics)]

    def compose(self, r1: int, r2: int) -> int | None:
        return self.table.get((r1, r2))

    def triples(self) -> list[tuple[int, int, int]]:
        return [(a, b, c) for (a, b), c in sorted(self.table.items())]

    def __len__(self) -> int:
        return len(self.table)

    def closure(self, chain: list[int]) -> set[int]:
        """Relations derivable between the chain ends under any bracketing."""
        n = len(chain)
        spans: dict[tuple[int, int], set[int]] = {(i, i + 1): {r} for i, r in enumerate(chain)}
        for width in range(2, n + 1):
            for i in range(n - width + 1):
                j = i + width
                out = set()
                for m in range(i + 1, j):
                    for x in spans[(i, m)]:
                        for y in spans[(m, j)]:
                            z = self.table.get((x, y))
                            if z is not None:
                                out.add(z)
                spans[(i, j)] = out
        return spans[(0, n)]


def generate_sample(
    k: int,
    rng: np.random.Generator,
    oracle: CompositionOracle | None = None,
    names: tuple[str, ...] = NAME_POOL,
    distractors: int = 0,
) -> Sample:
    """Random chain of ``k`` facts whose end-to-end relation is unambiguous."""
    if k < 2:
        raise GenerationError("chains need k >= 2")
    if k + 1 + distractors > len(names):
        raise GenerationError("name pool too small for this chain")
    oracle = oracle or default_oracle()
    starts = sorted({a for a, _ in oracle.table})
    for _ in range(MAX_TRIES):
        chain = [starts[rng.integers(len(starts))]]
        acc = chain[0]
        for _ in range(k - 1):
            nxt = sorted(b for (a, b) in oracle.table if a == acc)
            if not nxt:
                break
            r = nxt[rng.integers(len(nxt))]
            chain.append(r)
            acc = oracle.table[(acc, r)]
        if len(chain) != k or oracle.closure(chain) != {acc}:
            continue
        people = [names[i] for i in rng.choice(len(names), k + 1 + distractors, replace=False)]
        ents, extra = people[: k + 1], people[k + 1 :]
        facts = [(r, ents[i], ents[i + 1], 1.0) for i, r in enumerate(chain)]
        for x in extra:
            facts.append((int(rng.integers(len(oracle.vocab))), ents[rng.integers(k + 1)], x, 1.0))
        order = rng.permutation(len(facts))
        return Sample(tuple(facts[i] for i in order), (ents[0], ents[-1]), acc, k)
    raise GenerationError(f"no unambiguous chain of length {k} after {MAX_TRIES} tries")


_DEFAULT_ORACLE: CompositionOracle | None = None


def default_oracle() -> CompositionOracle:
    global _DEFAULT_ORACLE
    if _DEFAULT_ORACLE is None:
        _DEFAULT_ORACLE = CompositionOracle.load()
    return _DEFAULT_ORACLE


@dataclass(frozen=True)
class GenSpec:
    counts: dict[int, int]
    seed: int = 0
    names: tuple[str, ...] = NAME_POOL
    distractors: int = 0
    stream: int = 0  # separates train/test draws under one seed
    oracle_text: str | None = field(default=None, repr=False)

    def __post_init__(self):
        for k, c in self.counts.items():
            if k < 2 or c < 0:
                raise GenerationError(f"invalid count {c} for k={k}")


def generate_samples(spec: GenSpec) -> list[Sample]:
    oracle = CompositionOracle.load(spec.oracle_text) if spec.oracle_text else default_oracle()
    out = []
    index = 0
    for k in sorted(spec.counts):
        for _ in range(spec.counts[k]):
            rng = np.random.default_rng([spec.seed, spec.stream, index])
            out.append(generate_sample(k, rng, oracle, spec.names, spec.distractors))
            index += 1
    return out


def generate_dataset(spec: GenSpec) -> str:
    """Dataset file text, one JSON record per line."""
    return "".join(dump_sample(s) + "\n" for s in generate_samples(spec))


def parse_counts(text: str) -> dict[int, int]:
    """``1000x2,1000x3`` or ``50x2..10`` into ``{k: count}``."""
    counts: dict[int, int] = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        try:
            n, ks = part.split("x", 1)
            if ".." in ks:
                lo, hi = ks.split("..", 1)
                krange = range(int(lo), int(hi) + 1)
            else:
                krange = range(int(ks), int(ks) + 1)
            for k in krange:
                counts[k] = counts.get(k, 0) + int(n)
        except ValueError:
            raise GenerationError(f"bad count spec {part!r}; expected NxK or NxK1..K2") from None
    return counts

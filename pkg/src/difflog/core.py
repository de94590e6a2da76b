"""Relations, templates, rules and constraints shared by the parser and engine."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

# Ids are pinned at both ends (DAUGHTER = 0, SISTER = 1, MOTHER_IN_LAW = 19)
# to match the constants used by kinship programs; the middle is alphabetical.
KINSHIP_RELATIONS: tuple[str, ...] = (
    "daughter",
    "sister",
    "aunt",
    "brother",
    "daughter-in-law",
    "father",
    "father-in-law",
    "granddaughter",
    "grandfather",
    "grandmother",
    "grandson",
    "husband",
    "mother",
    "nephew",
    "niece",
    "son",
    "son-in-law",
    "uncle",
    "wife",
    "mother-in-law",
)

NA = "n/a"


class LogicError(ValueError):
    """Raised for malformed templates, rules or vocabulary lookups."""


class Gender(enum.IntEnum):
    MALE = 0
    FEMALE = 1
    NEUTRAL = 2


@dataclass(frozen=True)
class RelationMeta:
    gender: Gender
    gen: int


# Generation offset is gen(target) - gen(source) for "target is source's r".
_KINSHIP_META: dict[str, tuple[Gender, int]] = {
    "daughter": (Gender.FEMALE, -1),
    "sister": (Gender.FEMALE, 0),
    "aunt": (Gender.FEMALE, 1),
    "brother": (Gender.MALE, 0),
    "daughter-in-law": (Gender.FEMALE, -1),
    "father": (Gender.MALE, 1),
    "father-in-law": (Gender.MALE, 1),
    "granddaughter": (Gender.FEMALE, -2),
    "grandfather": (Gender.MALE, 2),
    "grandmother": (Gender.FEMALE, 2),
    "grandson": (Gender.MALE, -2),
    "husband": (Gender.MALE, 0),
    "mother": (Gender.FEMALE, 1),
    "nephew": (Gender.MALE, -1),
    "niece": (Gender.FEMALE, -1),
    "son": (Gender.MALE, -1),
    "son-in-law": (Gender.MALE, -1),
    "uncle": (Gender.MALE, 1),
    "wife": (Gender.FEMALE, 0),
    "mother-in-law": (Gender.FEMALE, 1),
}


@dataclass(frozen=True)
class Vocabulary:
    """Closed relation vocabulary; ids index ``names``, ``len(names)`` is n/a."""

    names: tuple[str, ...]
    meta: tuple[RelationMeta, ...] = ()

    def __post_init__(self) -> None:
        if len(set(self.names)) != len(self.names):
            raise LogicError("duplicate relation names in vocabulary")
        if self.meta and len(self.meta) != len(self.names):
            raise LogicError("relation meta table must cover every relation")
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(self.names)})

    def __len__(self) -> int:
        return len(self.names)

    @property
    def na_id(self) -> int:
        return len(self.names)

    def id(self, name: str) -> int:
        try:
            return self._index[normalize_relation_name(name)]  # type: ignore[attr-defined]
        except KeyError:
            raise LogicError(f"unknown relation {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return normalize_relation_name(name) in self._index  # type: ignore[attr-defined]

    def name(self, rid: int) -> str:
        if rid == self.na_id:
            return NA
        return self.names[rid]

    def relation_meta(self, rid: int) -> RelationMeta:
        if not 0 <= rid < len(self.names):
            raise LogicError(f"no meta entry for relation id {rid}")
        if not self.meta:
            return RelationMeta(Gender.NEUTRAL, 0)
        return self.meta[rid]


def normalize_relation_name(name: str) -> str:
    """``MOTHER_IN_LAW`` and ``mother-in-law`` name the same relation."""
    return name.strip().lower().replace("_", "-")


def constant_name(name: str) -> str:
    return name.upper().replace("-", "_")


KINSHIP = Vocabulary(
    KINSHIP_RELATIONS,
    tuple(RelationMeta(*_KINSHIP_META[n]) for n in KINSHIP_RELATIONS),
)


def relation_meta(rid: int, vocab: Vocabulary = KINSHIP) -> RelationMeta:
    return vocab.relation_meta(rid)


class TemplateKind(str, enum.Enum):
    COMPOSITE = "composite"
    TRANSITIVE = "transitive"
    SYMMETRIC = "symmetric"
    INVERSE = "inverse"
    IMPLIES = "implies"

    @property
    def arity(self) -> int:
        return _ARITY[self]


_ARITY = {
    TemplateKind.COMPOSITE: 3,
    TemplateKind.TRANSITIVE: 1,
    TemplateKind.SYMMETRIC: 1,
    TemplateKind.INVERSE: 2,
    TemplateKind.IMPLIES: 2,
}


@dataclass(frozen=True, order=True)
class RuleTemplate:
    kind: TemplateKind
    args: tuple[int, ...]

    def __post_init__(self) -> None:
        kind = TemplateKind(self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "args", tuple(int(a) for a in self.args))
        if len(self.args) != kind.arity:
            raise LogicError(
                f"malformed template: {kind.value} takes {kind.arity} relations, "
                f"got {len(self.args)}"
            )
        if any(a < 0 for a in self.args):
            raise LogicError("malformed template: negative relation id")

    def render(self, vocab: Vocabulary = KINSHIP) -> str:
        names = ", ".join(vocab.name(a) for a in self.args)
        return f"{self.kind.value}({names})"


def composite(r1: int, r2: int, r3: int) -> RuleTemplate:
    return RuleTemplate(TemplateKind.COMPOSITE, (r1, r2, r3))


@dataclass(frozen=True)
class Atom:
    """``pred(args...)`` where ``pred`` is a relation id and args are variables."""

    pred: int
    args: tuple[str, ...]

    def render(self, vocab: Vocabulary = KINSHIP) -> str:
        return f"{vocab.name(self.pred)}({','.join(self.args)})"


@dataclass(frozen=True)
class Rule:
    """Horn clause ``head <- body, guards`` over binary relation atoms.

    ``template`` is the weight slot the rule draws its confidence from, or
    None for a fixed rule with constant weight 1.
    """

    head: Atom
    body: tuple[Atom, ...]
    neq: tuple[tuple[str, str], ...] = ()
    template: RuleTemplate | None = None

    def __post_init__(self) -> None:
        body_vars = {v for atom in self.body for v in atom.args}
        missing = [v for v in self.head.args if v not in body_vars]
        if missing:
            raise LogicError(f"head variables {missing} do not appear in the body")
        for a, b in self.neq:
            if a not in body_vars or b not in body_vars:
                raise LogicError(f"guard {a} != {b} uses unbound variables")

    def render(self, vocab: Vocabulary = KINSHIP) -> str:
        body = " ∧ ".join(atom.render(vocab) for atom in self.body)
        return f"{self.head.render(vocab)} ← {body}"


def instantiate_template(t: RuleTemplate) -> Rule:
    k, args = t.kind, t.args
    if k is TemplateKind.COMPOSITE:
        r1, r2, r3 = args
        return Rule(
            Atom(r3, ("a", "c")),
            (Atom(r1, ("a", "b")), Atom(r2, ("b", "c"))),
            (("a", "c"),),
            t,
        )
    if k is TemplateKind.TRANSITIVE:
        (r,) = args
        return Rule(
            Atom(r, ("a", "c")),
            (Atom(r, ("a", "b")), Atom(r, ("b", "c"))),
            (("a", "c"),),
            t,
        )
    if k is TemplateKind.SYMMETRIC:
        (r,) = args
        return Rule(Atom(r, ("b", "a")), (Atom(r, ("a", "b")),), (), t)
    if k is TemplateKind.INVERSE:
        r, p = args
        return Rule(Atom(p, ("b", "a")), (Atom(r, ("a", "b")),), (), t)
    if k is TemplateKind.IMPLIES:
        r, p = args
        return Rule(Atom(p, ("a", "b")), (Atom(r, ("a", "b")),), (), t)
    raise LogicError(f"malformed template kind {k!r}")


# ---------------------------------------------------------------------------
# Constraints


@dataclass(frozen=True)
class ResultIC:
    """``forall a, b: premise(a, b) => OR conclusions``.

    Each conclusion is ``(relation, swapped)``; swapped means the atom is
    ``relation(b, a)``.
    """

    premise: int
    conclusions: tuple[tuple[int, bool], ...]
    name: str = ""


@dataclass(frozen=True)
class RuleIC:
    """Integrity constraint over composite triples.

    ``violates(r1, r2, r3)`` is precomputed into ``violating`` for the
    whole vocabulary so the engine only has to look triples up.
    """

    name: str
    violating: frozenset[tuple[int, int, int]] = field(repr=False)

    def violates(self, t: RuleTemplate) -> bool:
        return t.kind is TemplateKind.COMPOSITE and t.args in self.violating


def gender_rule_ic(vocab: Vocabulary = KINSHIP) -> RuleIC:
    n = len(vocab)
    bad = frozenset(
        (r1, r2, r3)
        for r1 in range(n)
        for r2 in range(n)
        for r3 in range(n)
        if vocab.relation_meta(r2).gender != vocab.relation_meta(r3).gender
    )
    return RuleIC("gender", bad)


def gen_rule_ic(vocab: Vocabulary = KINSHIP) -> RuleIC:
    n = len(vocab)
    g = [vocab.relation_meta(r).gen for r in range(n)]
    bad = frozenset(
        (r1, r2, r3)
        for r1 in range(n)
        for r2 in range(n)
        for r3 in range(n)
        if g[r1] + g[r2] != g[r3]
    )
    return RuleIC("gen", bad)


def kinship_result_ics(vocab: Vocabulary = KINSHIP) -> list[ResultIC]:
    """The six result constraints over the kinship graph."""
    spec = [
        ("grandfather", ("grandson", "granddaughter")),
        ("grandmother", ("grandson", "granddaughter")),
        ("father", ("son", "daughter")),
        ("mother", ("son", "daughter")),
        ("husband", ("wife",)),
        ("brother", ("sister", "brother")),
    ]
    return [
        ResultIC(vocab.id(p), tuple((vocab.id(c), True) for c in cs), p)
        for p, cs in spec
    ]

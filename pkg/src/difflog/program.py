"""Syntax tree for logic programs and its lowering to engine rules."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from .core import (
    KINSHIP,
    Atom,
    Gender,
    LogicError,
    RelationMeta,
    ResultIC,
    Rule,
    RuleIC,
    TemplateKind,
    Vocabulary,
    constant_name,
    normalize_relation_name,
)

# ---------------------------------------------------------------------------
# Terms


@dataclass(frozen=True)
class Var:
    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Sym:
    """Upper-case constant such as ``FATHER``."""

    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Num:
    value: int

    def __str__(self) -> str:
        return str(self.value)


@dataclass(frozen=True)
class Str:
    value: str

    def __str__(self) -> str:
        return '"' + self.value.replace("\\", "\\\\").replace('"', '\\"') + '"'


@dataclass(frozen=True)
class Add:
    left: "Term"
    right: "Term"

    def __str__(self) -> str:
        return f"{self.left} + {self.right}"


Term = Var | Sym | Num | Str | Add


@dataclass(frozen=True)
class Literal:
    pred: str
    args: tuple[Term, ...]

    def __str__(self) -> str:
        return f"{self.pred}({', '.join(map(str, self.args))})"


@dataclass(frozen=True)
class Guard:
    left: Term
    right: Term

    def __str__(self) -> str:
        return f"{self.left} != {self.right}"


# ---------------------------------------------------------------------------
# Declarations


@dataclass(frozen=True)
class TypeDecl:
    name: str
    fields: tuple[tuple[str, str], ...]

    def __str__(self) -> str:
        inner = ", ".join(f"{n}: {t}" for n, t in self.fields)
        return f"type {self.name}({inner})"


@dataclass(frozen=True)
class ConstDecl:
    items: tuple[tuple[str, int], ...]

    def __str__(self) -> str:
        return "const " + ", ".join(f"{n} = {v}" for n, v in self.items)


@dataclass(frozen=True)
class FactSet:
    pred: str
    rows: tuple[tuple[Term, ...], ...]

    def __str__(self) -> str:
        rows = ", ".join("(" + ", ".join(map(str, r)) + ")" for r in self.rows)
        return f"rel {self.pred} = {{{rows}}}"


@dataclass(frozen=True)
class Clause:
    head: Literal
    body: tuple[Literal, ...]
    guards: tuple[Guard, ...] = ()

    def __str__(self) -> str:
        parts = [str(b) for b in self.body] + [str(g) for g in self.guards]
        return f"rel {self.head} = {', '.join(parts)}"


@dataclass(frozen=True)
class Constraint:
    """``rel violation(!r) = r := forall(vars: premise => conclusion)``.

    ``premise`` is a conjunction and ``conclusion`` a disjunction of literals.
    """

    kind: str  # "result_ic" | "rule_ic"
    result: str
    vars: tuple[str, ...]
    premise: tuple[Literal, ...]
    conclusion: tuple[Literal, ...]

    def __str__(self) -> str:
        prem = " and ".join(map(str, self.premise))
        concl = " or ".join(map(str, self.conclusion))
        if len(self.conclusion) > 1:
            concl = f"({concl})"
        return (
            f"rel violation(!{self.result}) = {self.result} := "
            f"forall({', '.join(self.vars)}: {prem} => {concl})"
        )


Decl = TypeDecl | ConstDecl | FactSet | Clause | Constraint


@dataclass(frozen=True)
class Program:
    items: tuple[Decl, ...] = ()

    @property
    def types(self) -> dict[str, TypeDecl]:
        return {d.name: d for d in self.items if isinstance(d, TypeDecl)}

    @property
    def consts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for d in self.items:
            if isinstance(d, ConstDecl):
                out.update(d.items)
        return out

    @property
    def facts(self) -> list[FactSet]:
        return [d for d in self.items if isinstance(d, FactSet)]

    @property
    def clauses(self) -> list[Clause]:
        return [d for d in self.items if isinstance(d, Clause)]

    @property
    def constraints(self) -> list[Constraint]:
        return [d for d in self.items if isinstance(d, Constraint)]

    @property
    def answer_rules(self) -> list[Clause]:
        return [c for c in self.clauses if c.head.pred == "answer"]

    @property
    def deduction_rules(self) -> list[Clause]:
        return [c for c in self.clauses if c.head.pred != "answer"]


def print_program(program: Program) -> str:
    """Canonical text form; ``parse_program(print_program(p)) == p``."""
    return "".join(f"{item}\n" for item in program.items)


# ---------------------------------------------------------------------------
# Lowering

TEMPLATE_PREDICATES = {k.value for k in TemplateKind}
# Programs may answer through ``derive`` while deriving ``kinship``.
PREDICATE_ALIASES = {"derive": "kinship"}
KB_PREDICATE = "kinship"


@dataclass
class CompiledProgram:
    vocab: Vocabulary
    fixed_rules: list[Rule] = field(default_factory=list)
    template_kinds: set[TemplateKind] = field(default_factory=set)
    result_ics: list[ResultIC] = field(default_factory=list)
    rule_ics: list[RuleIC] = field(default_factory=list)
    has_answer: bool = False


def compile_program(program: Program, vocab: Vocabulary = KINSHIP) -> CompiledProgram:
    """Resolve relation constants and split clauses into rules and constraints."""
    consts = program.consts
    for name, value in consts.items():
        rel = normalize_relation_name(name)
        if rel in vocab and vocab.id(rel) != value:
            raise LogicError(
                f"constant {name} = {value} disagrees with relation id {vocab.id(rel)}"
            )
    tables = _fact_tables(program, vocab)
    vocab = _vocab_with_meta(vocab, tables)
    out = CompiledProgram(vocab)
    for clause in program.clauses:
        if clause.head.pred == "answer":
            out.has_answer = True
            continue
        kinds = [
            TemplateKind(b.pred) for b in clause.body if b.pred in TEMPLATE_PREDICATES
        ]
        if kinds:
            out.template_kinds.update(kinds)
            continue
        out.fixed_rules.append(_lower_clause(clause, vocab, consts))
    for c in program.constraints:
        if c.kind == "result_ic":
            out.result_ics.append(_lower_result_ic(c, vocab, consts))
        else:
            out.rule_ics.append(_lower_rule_ic(c, vocab, consts, tables))
    return out


def _relation_of(term: Term, vocab: Vocabulary, consts: dict[str, int]) -> int:
    if isinstance(term, Sym):
        if term.name in consts and normalize_relation_name(term.name) not in vocab:
            return consts[term.name]
        return vocab.id(term.name)
    if isinstance(term, Str):
        return vocab.id(term.value)
    if isinstance(term, Num):
        return term.value
    raise LogicError(f"expected a relation constant, got {term}")


def _binary_atom(lit: Literal, vocab: Vocabulary, consts: dict[str, int]) -> Atom:
    pred = PREDICATE_ALIASES.get(lit.pred, lit.pred)
    if pred == KB_PREDICATE:
        if len(lit.args) != 3:
            raise LogicError(f"{lit} must have 3 arguments")
        rel, *rest = lit.args
        rid = _relation_of(rel, vocab, consts)
    else:
        rid = vocab.id(pred)
        rest = list(lit.args)
    if len(rest) != 2 or not all(isinstance(t, Var) for t in rest):
        raise LogicError(f"{lit} must relate two variables")
    return Atom(rid, tuple(t.name for t in rest))  # type: ignore[union-attr]


def _lower_clause(clause: Clause, vocab: Vocabulary, consts: dict[str, int]) -> Rule:
    head = _binary_atom(clause.head, vocab, consts)
    body = tuple(_binary_atom(b, vocab, consts) for b in clause.body)
    neq = []
    for g in clause.guards:
        if not isinstance(g.left, Var) or not isinstance(g.right, Var):
            raise LogicError(f"guard {g} must compare variables")
        neq.append((g.left.name, g.right.name))
    return Rule(head, body, tuple(neq))


def _lower_result_ic(c: Constraint, vocab: Vocabulary, consts: dict[str, int]) -> ResultIC:
    if len(c.premise) != 1:
        raise LogicError("result constraints take a single premise atom")
    prem = _binary_atom(c.premise[0], vocab, consts)
    a, b = prem.args
    concl = []
    for lit in c.conclusion:
        atom = _binary_atom(lit, vocab, consts)
        if atom.args == (a, b):
            concl.append((atom.pred, False))
        elif atom.args == (b, a):
            concl.append((atom.pred, True))
        else:
            raise LogicError(f"conclusion {lit} must mention the premise variables")
    return ResultIC(prem.pred, tuple(concl), vocab.name(prem.pred))


def _fact_tables(program: Program, vocab: Vocabulary) -> dict[str, set[tuple[int, ...]]]:
    consts = program.consts
    tables: dict[str, set[tuple[int, ...]]] = {}
    for fs in program.facts:
        rows = tables.setdefault(fs.pred, set())
        for row in fs.rows:
            vals = []
            for i, t in enumerate(row):
                if isinstance(t, Num):
                    vals.append(t.value)
                elif isinstance(t, Sym) and t.name in consts:
                    vals.append(consts[t.name])
                elif isinstance(t, Sym) and i == 0 and t.name in vocab:
                    vals.append(vocab.id(t.name))
                elif isinstance(t, Sym) and t.name in Gender.__members__:
                    vals.append(int(Gender[t.name]))
                else:
                    raise LogicError(f"cannot resolve {t} in {fs.pred}")
            rows.add(tuple(vals))
    return tables


def _vocab_with_meta(vocab: Vocabulary, tables: dict[str, set[tuple[int, ...]]]) -> Vocabulary:
    """Use program-provided gender/gen tables when they cover the vocabulary."""
    gender = {r: g for r, g in tables.get("gender", ())}
    gen = {r: g for r, g in tables.get("gen", ())}
    n = len(vocab)
    if not (set(gender) >= set(range(n)) and set(gen) >= set(range(n))):
        return vocab
    meta = tuple(RelationMeta(Gender(gender[r]), gen[r]) for r in range(n))
    return Vocabulary(vocab.names, meta)


def _lower_rule_ic(
    c: Constraint,
    vocab: Vocabulary,
    consts: dict[str, int],
    tables: dict[str, set[tuple[int, ...]]],
) -> RuleIC:
    """Find every composite triple for which the constraint body can be violated."""
    templ = [lit for lit in c.premise if lit.pred in TEMPLATE_PREDICATES]
    if len(templ) != 1 or templ[0].pred != "composite":
        raise LogicError("rule constraints quantify over exactly one composite atom")
    rest = [lit for lit in c.premise if lit is not templ[0]]
    tables = dict(tables)
    if "gender" not in tables:
        tables["gender"] = {(r, int(vocab.relation_meta(r).gender)) for r in range(len(vocab))}
    if "gen" not in tables:
        tables["gen"] = {(r, vocab.relation_meta(r).gen) for r in range(len(vocab))}
    n = len(vocab)
    bad = set()
    for triple in itertools.product(range(n), repeat=3):
        env: dict[str, int] = {}
        ok = True
        for t, v in zip(templ[0].args, triple):
            if isinstance(t, Var):
                env[t.name] = v
            elif _eval_term(t, env, consts) != v:
                ok = False
        if not ok:
            continue
        for binding in _join(rest, env, tables, consts):
            if not any(_holds(lit, binding, tables, consts) for lit in c.conclusion):
                bad.add(triple)
                break
    name = c.premise[-1].pred if rest else "composite"
    return RuleIC(name, frozenset(bad))


def _eval_term(t: Term, env: dict[str, int], consts: dict[str, int]) -> int:
    if isinstance(t, Var):
        return env[t.name]
    if isinstance(t, Num):
        return t.value
    if isinstance(t, Sym):
        if t.name in consts:
            return consts[t.name]
        if t.name in Gender.__members__:
            return int(Gender[t.name])
        return KINSHIP.id(t.name)
    if isinstance(t, Add):
        return _eval_term(t.left, env, consts) + _eval_term(t.right, env, consts)
    raise LogicError(f"cannot evaluate {t}")


def _join(lits, env, tables, consts):
    if not lits:
        yield env
        return
    head, *tail = lits
    for row in sorted(tables.get(head.pred, ())):
        if len(row) != len(head.args):
            raise LogicError(f"arity mismatch for {head.pred}")
        new = dict(env)
        ok = True
        for t, v in zip(head.args, row):
            if isinstance(t, Var) and t.name not in new:
                new[t.name] = v
            elif _eval_term(t, new, consts) != v:
                ok = False
                break
        if ok:
            yield from _join(tail, new, tables, consts)


def _holds(lit, env, tables, consts) -> bool:
    try:
        row = tuple(_eval_term(t, env, consts) for t in lit.args)
    except KeyError:
        raise LogicError(f"unbound variable in conclusion {lit}") from None
    return row in tables.get(lit.pred, ())


def relation_constant(rid: int, vocab: Vocabulary = KINSHIP) -> str:
    return constant_name(vocab.name(rid))

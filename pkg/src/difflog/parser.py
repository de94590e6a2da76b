"""Parsers for ``.dsr`` programs, ``.jsonl`` datasets and ``.priors`` files.

Program grammar (``//`` comments run to end of line)::

    program    := item*
    item       := "type" IDENT "(" field ("," field)* ")"
                | "const" IDENT "=" INT ("," IDENT "=" INT)*
                | "rel" IDENT "=" "{" row ("," row)* "}"
                | "rel" "violation" "(" "!" IDENT ")" "=" IDENT ":="
                      "forall" "(" IDENT ("," IDENT)* ":" conj "=>" disj ")"
                | "rel" literal "=" body
    field      := IDENT ":" IDENT
    row        := "(" term ("," term)* ")"
    body       := (literal | term "!=" term) ("," ...)*
    conj       := literal ("and" literal)*      (optionally parenthesised)
    disj       := literal ("or" literal)*       (optionally parenthesised)
    literal    := IDENT "(" term ("," term)* ")"
    term       := primary ("+" primary)*
    primary    := lower-case IDENT (variable) | upper-case IDENT (constant)
                | ["-"] INT | STRING
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

from .core import KINSHIP, LogicError, RuleTemplate, TemplateKind, Vocabulary
from .program import (
    PREDICATE_ALIASES,
    Add,
    Clause,
    ConstDecl,
    Constraint,
    FactSet,
    Guard,
    Literal,
    Num,
    Program,
    Str,
    Sym,
    Term,
    TypeDecl,
    Var,
)


@dataclass(frozen=True)
class SourceSpan:
    line: int
    column: int
    start: int
    end: int

    def __str__(self) -> str:
        return f"{self.line}:{self.column}"


class ParseError(ValueError):
    def __init__(self, message: str, span: SourceSpan):
        super().__init__(f"{span}: {message}")
        self.message = message
        self.span = span


@dataclass(frozen=True)
class Sample:
    facts: tuple[tuple[int, str, str, float], ...]
    query: tuple[str, str]
    answer: int
    k: int


# ---------------------------------------------------------------------------
# Lexer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>//[^\n]*)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<int>\d+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>:=|=>|!=|[(){}=,:!+\-])
    """,
    re.VERBOSE,
)

KEYWORDS = {"type", "const", "rel", "forall", "and", "or"}


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    span: SourceSpan


def _span(text: str, start: int, end: int) -> SourceSpan:
    line = text.count("\n", 0, start) + 1
    col = start - (text.rfind("\n", 0, start) + 1) + 1
    return SourceSpan(line, col, start, end)


def tokenize(text: str) -> list[Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", _span(text, pos, pos + 1))
        kind = m.lastgroup
        if kind not in ("ws", "comment"):
            if kind == "ident" and m.group() in KEYWORDS:
                kind = "kw"
            tokens.append(Token(kind, m.group(), _span(text, m.start(), m.end())))
        pos = m.end()
    tokens.append(Token("eof", "", _span(text, len(text), len(text))))
    return tokens


# ---------------------------------------------------------------------------
# Program parser


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = tokenize(text)
        self.i = 0
        self.spans: dict[int, SourceSpan] = {}

    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def peek(self, offset: int = 1) -> Token:
        return self.toks[min(self.i + offset, len(self.toks) - 1)]

    def error(self, message: str, tok: Token | None = None) -> ParseError:
        return ParseError(message, (tok or self.tok).span)

    def accept(self, text: str) -> Token | None:
        if self.tok.text == text and self.tok.kind in ("op", "kw"):
            tok = self.tok
            self.i += 1
            return tok
        return None

    def expect(self, text: str) -> Token:
        tok = self.accept(text)
        if tok is None:
            got = self.tok.text or "end of input"
            raise self.error(f"expected {text!r}, found {got!r}")
        return tok

    def ident(self) -> Token:
        if self.tok.kind != "ident":
            raise self.error(f"expected identifier, found {self.tok.text or 'end of input'!r}")
        tok = self.tok
        self.i += 1
        return tok

    def integer(self) -> int:
        neg = self.accept("-") is not None
        if self.tok.kind != "int":
            raise self.error("expected integer")
        value = int(self.tok.text)
        self.i += 1
        return -value if neg else value

    # items ---------------------------------------------------------------

    def program(self) -> tuple[Program, list[tuple[Literal, SourceSpan]]]:
        items = []
        uses: list[tuple[Literal, SourceSpan]] = []
        while self.tok.kind != "eof":
            if self.accept("type"):
                items.append(self.type_decl())
            elif self.accept("const"):
                items.append(self.const_decl())
            elif self.accept("rel"):
                items.append(self.rel(uses))
            else:
                raise self.error(f"expected 'type', 'const' or 'rel', found {self.tok.text!r}")
        return Program(tuple(items)), uses

    def type_decl(self) -> TypeDecl:
        name = self.ident().text
        self.expect("(")
        fields = []
        while True:
            fname = self.ident().text
            self.expect(":")
            fields.append((fname, self.ident().text))
            if not self.accept(","):
                break
        self.expect(")")
        return TypeDecl(name, tuple(fields))

    def const_decl(self) -> ConstDecl:
        items = []
        while True:
            name = self.ident().text
            self.expect("=")
            items.append((name, self.integer()))
            if not self.accept(","):
                break
        return ConstDecl(tuple(items))

    def rel(self, uses) -> FactSet | Clause | Constraint:
        if self.tok.text == "violation" and self.peek().text == "(" and self.peek(2).text == "!":
            return self.constraint(uses)
        if self.tok.kind == "ident" and self.peek().text == "=" and self.peek(2).text == "{":
            pred = self.ident().text
            self.expect("=")
            self.expect("{")
            rows = []
            if not self.accept("}"):
                while True:
                    self.expect("(")
                    rows.append(self.terms(")"))
                    if not self.accept(","):
                        break
                self.expect("}")
            return FactSet(pred, tuple(rows))
        head = self.literal(uses, head=True)
        self.expect("=")
        body: list[Literal] = []
        guards: list[Guard] = []
        while True:
            if self.tok.kind == "ident" and self.peek().text == "(":
                body.append(self.literal(uses))
            else:
                left = self.term()
                self.expect("!=")
                guards.append(Guard(left, self.term()))
            if not self.accept(","):
                break
        return Clause(head, tuple(body), tuple(guards))

    def constraint(self, uses) -> Constraint:
        self.ident()
        self.expect("(")
        self.expect("!")
        result = self.ident().text
        self.expect(")")
        self.expect("=")
        tok = self.ident()
        if tok.text != result:
            raise self.error(f"constraint result must be {result!r}", tok)
        self.expect(":=")
        self.expect("forall")
        self.expect("(")
        qvars = []
        while True:
            qvars.append(self.ident().text)
            if not self.accept(","):
                break
        self.expect(":")
        premise = self.connective("and", uses)
        self.expect("=>")
        conclusion = self.connective("or", uses)
        self.expect(")")
        kind = "rule_ic" if any(p.pred == "composite" for p in premise) else "result_ic"
        return Constraint(kind, result, tuple(qvars), tuple(premise), tuple(conclusion))

    def connective(self, word: str, uses) -> list[Literal]:
        if self.tok.text == "(":
            self.expect("(")
            lits = self.connective(word, uses)
            self.expect(")")
            return lits
        lits = [self.literal(uses)]
        while self.accept(word):
            lits.append(self.literal(uses))
        return lits

    def literal(self, uses, head: bool = False) -> Literal:
        tok = self.ident()
        self.expect("(")
        if head and self.tok.text == "!":
            raise self.error("negated heads are only allowed in violation constraints")
        args = self.terms(")")
        lit = Literal(tok.text, args)
        uses.append((lit, tok.span, head))
        return lit

    def terms(self, close: str) -> tuple[Term, ...]:
        out = []
        if self.accept(close):
            return ()
        while True:
            out.append(self.term())
            if not self.accept(","):
                break
        self.expect(close)
        return tuple(out)

    def term(self) -> Term:
        t = self.primary()
        while self.accept("+"):
            t = Add(t, self.primary())
        return t

    def primary(self) -> Term:
        tok = self.tok
        if tok.kind == "string":
            self.i += 1
            return Str(json.loads(tok.text))
        if tok.kind == "int" or (tok.text == "-" and self.peek().kind == "int"):
            return Num(self.integer())
        if tok.kind == "ident":
            self.i += 1
            return Sym(tok.text) if tok.text[0].isupper() else Var(tok.text)
        raise self.error(f"expected a term, found {tok.text or 'end of input'!r}")


def parse_program(text: str, vocab: Vocabulary = KINSHIP) -> Program:
    """Parse program text and check predicate declarations and arities.

    Relation names of ``vocab`` (``mother_in_law`` style) are implicitly
    declared binary predicates.
    """
    parser = _Parser(text)
    program, uses = parser.program()
    declared = {name: len(d.fields) for name, d in program.types.items()}
    defined: dict[str, int] = {}
    for lit, span, is_head in uses:
        if is_head:
            defined.setdefault(lit.pred, len(lit.args))
    for fs in program.facts:
        if fs.rows:
            defined.setdefault(fs.pred, len(fs.rows[0]))
    implicit = {n.replace("-", "_"): 2 for n in vocab.names}
    known = {**implicit, **defined, **declared}
    for lit, span, is_head in uses:
        pred = PREDICATE_ALIASES.get(lit.pred, lit.pred)
        if pred not in known:
            raise ParseError(f"undeclared predicate {lit.pred!r}", span)
        if known[pred] != len(lit.args):
            raise ParseError(
                f"arity mismatch: {lit.pred} expects {known[pred]} arguments, "
                f"got {len(lit.args)}",
                span,
            )
    for fs in program.facts:
        want = known.get(fs.pred)
        for row in fs.rows:
            if want is not None and len(row) != want:
                raise ParseError(
                    f"arity mismatch in facts of {fs.pred}", _first_span(text, fs.pred)
                )
    return program


def _first_span(text: str, word: str) -> SourceSpan:
    pos = max(text.find(word), 0)
    return _span(text, pos, pos + len(word))


# ---------------------------------------------------------------------------
# Datasets


def parse_dataset(text: str, vocab: Vocabulary = KINSHIP) -> list[Sample]:
    """One JSON object per non-blank line: ``facts``, ``query``, ``answer``, ``k``."""
    samples = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        span = SourceSpan(lineno, 1, 0, len(line))
        try:
            rec = json.loads(line)
            samples.append(_sample(rec, vocab))
        except (ValueError, KeyError, TypeError, LogicError) as exc:
            raise ParseError(f"malformed dataset record on line {lineno}: {exc}", span) from None
    return samples


def _sample(rec: dict, vocab: Vocabulary) -> Sample:
    facts = []
    for f in rec["facts"]:
        if len(f) not in (3, 4):
            raise ValueError(f"fact {f!r} must be [relation, subject, object(, prob)]")
        prob = float(f[3]) if len(f) == 4 else 1.0
        if not 0.0 <= prob <= 1.0:
            raise ValueError(f"probability {prob} outside [0, 1]")
        sub, obj = str(f[1]), str(f[2])
        if not sub or not obj:
            raise ValueError("entity names must be nonempty")
        facts.append((vocab.id(f[0]), sub, obj, prob))
    q = rec["query"]
    if len(q) != 2:
        raise ValueError("query must be [subject, object]")
    k = int(rec.get("k", len(facts)))
    return Sample(tuple(facts), (str(q[0]), str(q[1])), vocab.id(rec["answer"]), k)


def dump_sample(sample: Sample, vocab: Vocabulary = KINSHIP) -> str:
    facts = []
    for r, s, o, p in sample.facts:
        facts.append([vocab.name(r), s, o] if p == 1.0 else [vocab.name(r), s, o, p])
    rec = {
        "facts": facts,
        "query": list(sample.query),
        "answer": vocab.name(sample.answer),
        "k": sample.k,
    }
    return json.dumps(rec, separators=(", ", ": "))


_KB_FACT = re.compile(
    r"^(?:(?P<p>[0-9.eE+-]+)\s*::\s*)?(?P<rel>[\w-]+)\s*\(\s*(?P<s>[^,()\s]+)\s*,\s*(?P<o>[^,()\s]+)\s*\)\s*\.?$"
)


def parse_kb(text: str, vocab: Vocabulary = KINSHIP) -> tuple[tuple[int, str, str, float], ...]:
    """Facts written ``0.9::brother(D, R)`` or ``brother(D, R)``, one per line.

    ``#`` and ``//`` start comments.  A ``.jsonl`` dataset line is also
    accepted, in which case its facts are used.
    """
    stripped = text.strip()
    if stripped.startswith("{"):
        samples = parse_dataset(text, vocab)
        return samples[0].facts if samples else ()
    facts = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = re.split(r"#|//", raw, maxsplit=1)[0].strip()
        if not line:
            continue
        span = SourceSpan(lineno, 1, 0, len(raw))
        m = _KB_FACT.match(line)
        if m is None:
            raise ParseError("expected [prob::]relation(subject, object)", span)
        try:
            prob = float(m["p"]) if m["p"] else 1.0
            rel = vocab.id(m["rel"])
        except (ValueError, LogicError) as exc:
            raise ParseError(str(exc), span) from None
        if not 0.0 <= prob <= 1.0:
            raise ParseError(f"probability {prob} outside [0, 1]", span)
        facts.append((rel, m["s"], m["o"], prob))
    return tuple(facts)


# ---------------------------------------------------------------------------
# Rule priors

_RENDERED_RULE = re.compile(
    r"^\s*(?P<w>\S+)\s+(?P<r3>[\w-]+)\(a,\s*c\)\s*(?:←|<-)\s*"
    r"(?P<r1>[\w-]+)\(a,\s*b\)\s*(?:∧|,|&)\s*(?P<r2>[\w-]+)\(b,\s*c\)\s*$"
)


def parse_rule_priors(text: str, vocab: Vocabulary = KINSHIP) -> dict[RuleTemplate, float]:
    """Template weights, one per line.

    Accepted line forms::

        composite <r1> <r2> <r3> <weight>
        compose <r1> <r2> <r3> [weight]       # oracle table, weight defaults to 1
        transitive|symmetric <r> <weight>
        inverse|implies <r> <p> <weight>
        <weight>  r3(a,c) ← r1(a,b) ∧ r2(b,c)  # export format
    """
    out: dict[RuleTemplate, float] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        span = SourceSpan(lineno, 1, 0, len(raw))
        try:
            tmpl, w = _prior_line(line, vocab)
        except (LogicError, ValueError) as exc:
            raise ParseError(f"line {lineno}: {exc}", span) from None
        if w < 0:
            raise ParseError(f"line {lineno}: negative weight {w}", span)
        out[tmpl] = w
    return out


def _prior_line(line: str, vocab: Vocabulary) -> tuple[RuleTemplate, float]:
    m = _RENDERED_RULE.match(line)
    if m:
        rels = (vocab.id(m["r1"]), vocab.id(m["r2"]), vocab.id(m["r3"]))
        return RuleTemplate(TemplateKind.COMPOSITE, rels), float(m["w"])
    word, *rest = line.split()
    if word == "compose":
        if len(rest) not in (3, 4):
            raise ValueError("compose takes 3 relations and an optional weight")
        w = float(rest[3]) if len(rest) == 4 else 1.0
        return RuleTemplate(TemplateKind.COMPOSITE, tuple(vocab.id(r) for r in rest[:3])), w
    try:
        kind = TemplateKind(word)
    except ValueError:
        raise ValueError(f"unknown template kind {word!r}") from None
    if len(rest) != kind.arity + 1:
        raise ValueError(f"{word} takes {kind.arity} relations and a weight")
    return RuleTemplate(kind, tuple(vocab.id(r) for r in rest[:-1])), float(rest[-1])

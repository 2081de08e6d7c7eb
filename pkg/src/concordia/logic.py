"""Weighted first-order rule language: AST, parser, validator and formatter.

Concrete syntax, one statement per ``.``::

    # comment
    predicate: Close/2 closed .
    1.0   :: Doing(B1, A) & Close(B1, B2) -> Doing(B2, A) .
    LEARN :: AvgUser(U, I) <-> Rates(U, I) .
    HARD  :: Same(X, Y) -> Same(Y, X) .
    constraint: Doing(B, +A) = 1 .

Variables start with an uppercase letter; constants start with a lowercase
letter or are double-quoted.  ``<->`` is sugar for two directed rules that
share one weight.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

__all__ = [
    "Term", "Atom", "Rule", "SumConstraint", "Declaration", "Theory",
    "Issue", "ValidationReport", "ParseError", "TheoryError",
    "parse_theory", "validate_theory", "format_theory", "var", "const",
    "PREDICATE_KINDS", "HARD_WEIGHT",
]

# closed: absent atoms are false; open: absent atoms are latent variables;
# query: only facts and explicitly queried atoms exist in the Herbrand base.
PREDICATE_KINDS = ("open", "closed", "query")

_PLAIN_CONST = re.compile(r"[a-z][A-Za-z0-9_]*\Z")


# soft-solver stand-in for an inviolable rule
HARD_WEIGHT = 100.0


class ParseError(ValueError):
    """Syntax error with a 1-based line/column position."""

    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"line {line}, column {col}: {message}")
        self.line = line
        self.col = col


class TheoryError(ValueError):
    """A parsed theory is not well formed (arity conflict, unsafe rule...)."""


@dataclass(frozen=True)
class Term:
    kind: str  # "var" or "const"
    name: str

    @property
    def is_var(self) -> bool:
        return self.kind == "var"

    def __str__(self) -> str:
        if self.is_var or _PLAIN_CONST.match(self.name):
            return self.name
        escaped = self.name.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'


def var(name: str) -> Term:
    return Term("var", name)


def const(name: str) -> Term:
    return Term("const", name)


@dataclass(frozen=True)
class Atom:
    predicate: str
    args: tuple[Term, ...]

    @property
    def arity(self) -> int:
        return len(self.args)

    def variables(self) -> list[str]:
        return [t.name for t in self.args if t.is_var]

    def __str__(self) -> str:
        return f"{self.predicate}({', '.join(map(str, self.args))})"


@dataclass(frozen=True)
class Rule:
    """``weight :: premise_1 & ... & premise_n -> conclusion``.

    ``twin`` marks the second half of a desugared ``<->`` rule; it shares the
    weight of the rule immediately before it.
    """

    weight: float
    premise: tuple[Atom, ...]
    conclusion: Atom
    learnable: bool = False
    hard: bool = False
    twin: bool = False

    def variables(self) -> list[str]:
        seen: dict[str, None] = {}
        for a in (*self.premise, self.conclusion):
            for v in a.variables():
                seen.setdefault(v, None)
        return list(seen)

    def unsafe_variables(self) -> list[str]:
        bound = {v for a in self.premise for v in a.variables()}
        return [v for v in dict.fromkeys(self.conclusion.variables()) if v not in bound]


@dataclass(frozen=True)
class SumConstraint:
    """Soft truth values of ``predicate(fixed..., X)`` summed over X equal ``target``."""

    predicate: str
    args: tuple[Term, ...]  # summed position holds a variable
    summed_position: int
    target: float = 1.0

    @property
    def arity(self) -> int:
        return len(self.args)

    def __str__(self) -> str:
        parts = [("+" if i == self.summed_position else "") + str(t) for i, t in enumerate(self.args)]
        return f"constraint: {self.predicate}({', '.join(parts)}) = {_fmt_number(self.target)} ."


@dataclass(frozen=True)
class Declaration:
    name: str
    arity: int
    kind: str = "open"


@dataclass
class Theory:
    rules: list[Rule] = field(default_factory=list)
    constraints: list[SumConstraint] = field(default_factory=list)
    declarations: list[Declaration] = field(default_factory=list)

    def atoms(self) -> Iterator[Atom]:
        for r in self.rules:
            yield from r.premise
            yield r.conclusion

    def predicates(self) -> dict[str, Declaration]:
        """Declaration table: explicit declarations, then first use (open by default)."""
        table = {d.name: d for d in self.declarations}
        for a in self.atoms():
            table.setdefault(a.predicate, Declaration(a.predicate, a.arity))
        for c in self.constraints:
            table.setdefault(c.predicate, Declaration(c.predicate, c.arity))
        return table

    def arities(self) -> dict[str, int]:
        return {name: d.arity for name, d in self.predicates().items()}

    def kind(self, predicate: str) -> str:
        d = self.predicates().get(predicate)
        return d.kind if d is not None else "open"

    def initial_weights(self) -> np.ndarray:
        """Starting weights; hard rules carry the large fixed ``HARD_WEIGHT``."""
        return np.array([HARD_WEIGHT if r.hard else r.weight for r in self.rules], dtype=float)

    def hard_mask(self) -> np.ndarray:
        return np.array([r.hard for r in self.rules], dtype=bool)

    def learnable_mask(self) -> np.ndarray:
        return np.array([r.learnable and not r.hard for r in self.rules], dtype=bool)

    def tie_groups(self) -> np.ndarray:
        """Rule index -> weight-group index; twins share their partner's group."""
        groups = np.zeros(len(self.rules), dtype=int)
        g = -1
        for i, r in enumerate(self.rules):
            if not (r.twin and i > 0):
                g += 1
            groups[i] = g
        return groups


@dataclass(frozen=True)
class Issue:
    kind: str  # "unsafe", "arity", "undeclared", "constraint"
    message: str
    rule: int | None = None


@dataclass
class ValidationReport:
    issues: list[Issue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def __iter__(self):
        return iter(self.issues)

    def __len__(self) -> int:
        return len(self.issues)


# ---------------------------------------------------------------------------
# tokenizer

_TOKEN_SPEC = [
    ("WS", r"[ \t\r]+"),
    ("NL", r"\n"),
    ("COMMENT", r"#[^\n]*"),
    ("NUMBER", r"\d+(?:\.\d+)?(?:[eE][+-]?\d+)?"),
    ("STRING", r'"(?:[^"\\\n]|\\.)*"'),
    ("IDENT", r"[A-Za-z_][A-Za-z0-9_]*"),
    ("IFF", r"<->"),
    ("ARROW", r"->"),
    ("DCOLON", r"::"),
    ("PUNCT", r"[&(),.=+:/]"),
]
_TOKEN_RE = re.compile("|".join(f"(?P<{n}>{p})" for n, p in _TOKEN_SPEC))


@dataclass(frozen=True)
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Tok]:
    toks: list[_Tok] = []
    line, line_start, pos = 1, 0, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        if kind == "NL":
            line += 1
            line_start = m.end()
        elif kind not in ("WS", "COMMENT"):
            if kind == "PUNCT":
                kind = m.group()
            toks.append(_Tok(kind, m.group(), line, m.start() - line_start + 1))
        pos = m.end()
    toks.append(_Tok("EOF", "", line, pos - line_start + 1))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0
        self.theory = Theory()
        self.rule_pos: list[tuple[int, int]] = []

    def peek(self, k: int = 0) -> _Tok:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def next(self) -> _Tok:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, kind: str, what: str | None = None) -> _Tok:
        tok = self.peek()
        if tok.kind != kind:
            found = tok.text or "end of input"
            raise ParseError(f"expected {what or kind!r}, found {found!r}", tok.line, tok.col)
        return self.next()

    def error(self, msg: str, tok: _Tok | None = None) -> ParseError:
        tok = tok or self.peek()
        return ParseError(msg, tok.line, tok.col)

    def parse(self) -> Theory:
        while self.peek().kind != "EOF":
            self.statement()
        return self.theory

    def statement(self) -> None:
        tok = self.peek()
        if tok.kind == "IDENT" and tok.text in ("predicate", "constraint") and self.peek(1).kind == ":":
            self.next()
            self.next()
            if tok.text == "predicate":
                self.declaration()
            else:
                self.constraint()
            return
        self.rule()

    def declaration(self) -> None:
        name = self.expect("IDENT", "predicate name")
        self.expect("/", "/")
        arity = int(self.expect("NUMBER", "arity").text)
        kind = "open"
        if self.peek().kind == "IDENT":
            k = self.next()
            if k.text not in PREDICATE_KINDS:
                raise self.error(f"unknown predicate kind {k.text!r}", k)
            kind = k.text
        self.expect(".", ".")
        self.theory.declarations.append(Declaration(name.text, arity, kind))

    def constraint(self) -> None:
        start = self.peek()
        name = self.expect("IDENT", "predicate name")
        self.expect("(", "(")
        args: list[Term] = []
        summed: list[int] = []
        while True:
            if self.peek().kind == "+":
                self.next()
                summed.append(len(args))
            args.append(self.term())
            if self.peek().kind == ",":
                self.next()
                continue
            self.expect(")", ")")
            break
        self.expect("=", "=")
        target = float(self.expect("NUMBER", "target value").text)
        self.expect(".", ".")
        if len(summed) != 1:
            raise self.error("constraint needs exactly one '+' summed argument", start)
        if not args[summed[0]].is_var:
            raise self.error("summed argument must be a variable", start)
        if target <= 0:
            raise self.error("constraint target must be positive", start)
        self.theory.constraints.append(SumConstraint(name.text, tuple(args), summed[0], target))

    def rule(self) -> None:
        start = self.peek()
        learnable = hard = False
        if start.kind == "NUMBER":
            weight = float(self.next().text)
        elif start.kind == "IDENT" and start.text in ("LEARN", "HARD"):
            self.next()
            weight = 1.0
            learnable = start.text == "LEARN"
            hard = start.text == "HARD"
        else:
            raise self.error("expected a weight, LEARN, HARD, 'predicate:' or 'constraint:'")
        self.expect("DCOLON", "::")
        premise: list[Atom] = []
        if self.peek().kind not in ("ARROW", "IFF"):
            premise.append(self.atom())
            while self.peek().kind == "&":
                self.next()
                premise.append(self.atom())
        arrow = self.peek()
        if arrow.kind not in ("ARROW", "IFF"):
            raise self.error("expected '->' or '<->'")
        self.next()
        conclusion = self.atom()
        if self.peek().kind == "&":
            raise self.error("conjunctions are not allowed in a conclusion")
        self.expect(".", ".")
        if arrow.kind == "IFF":
            if len(premise) != 1:
                raise self.error("'<->' needs exactly one atom on each side", arrow)
            self.theory.rules.append(Rule(weight, tuple(premise), conclusion, learnable, hard))
            self.theory.rules.append(Rule(weight, (conclusion,), premise[0], learnable, hard, twin=True))
            self.rule_pos += [(start.line, start.col)] * 2
        else:
            self.theory.rules.append(Rule(weight, tuple(premise), conclusion, learnable, hard))
            self.rule_pos.append((start.line, start.col))

    def atom(self) -> Atom:
        name = self.expect("IDENT", "predicate name")
        self.expect("(", "(")
        args = [self.term()]
        while self.peek().kind == ",":
            self.next()
            args.append(self.term())
        self.expect(")", ")")
        return Atom(name.text, tuple(args))

    def term(self) -> Term:
        tok = self.next()
        if tok.kind == "IDENT":
            if tok.text[0].isupper():
                return var(tok.text)
            if tok.text[0] == "_":
                raise self.error(f"identifier {tok.text!r} must start with a letter", tok)
            return const(tok.text)
        if tok.kind == "STRING":
            return const(re.sub(r"\\(.)", r"\1", tok.text[1:-1]))
        raise self.error(f"expected a term, found {tok.text or 'end of input'!r}", tok)


def parse_theory(source_text: str, *, check: bool = True) -> Theory:
    """Parse rule-language text into a :class:`Theory`.

    With ``check`` (the default) arity conflicts, undeclared predicates and
    unsafe rules raise :class:`TheoryError` naming the offending line.
    """
    p = _Parser(source_text)
    theory = p.parse()
    if check:
        report = validate_theory(theory)
        if not report.ok:
            first = report.issues[0]
            where = ""
            if first.rule is not None:
                line, col = p.rule_pos[first.rule]
                where = f"line {line}, column {col}: "
            raise TheoryError(where + first.message)
    return theory


def validate_theory(t: Theory) -> ValidationReport:
    issues: list[Issue] = []
    declared = {d.name: d for d in t.declarations}
    seen: dict[str, int] = {d.name: d.arity for d in t.declarations}
    conflicts: set[tuple[str, int]] = set()
    undeclared: set[str] = set()

    def check_atom(pred: str, arity: int, rule: int | None) -> None:
        if declared and pred not in declared and pred not in undeclared:
            undeclared.add(pred)
            issues.append(Issue("undeclared", f"predicate {pred} is not declared", rule))
        first = seen.setdefault(pred, arity)
        if first != arity and (pred, arity) not in conflicts:
            conflicts.add((pred, arity))
            issues.append(Issue("arity", f"predicate {pred} used with arity {arity}, expected {first}", rule))

    for i, r in enumerate(t.rules):
        for a in (*r.premise, r.conclusion):
            check_atom(a.predicate, a.arity, i)
        for v in r.unsafe_variables():
            issues.append(Issue("unsafe", f"rule {i}: variable {v} of the conclusion does not occur in the premise", i))
        if r.weight < 0:
            issues.append(Issue("weight", f"rule {i}: negative weight {r.weight}", i))
    for c in t.constraints:
        check_atom(c.predicate, c.arity, None)
        if not 0 <= c.summed_position < c.arity or not c.args[c.summed_position].is_var:
            issues.append(Issue("constraint", f"constraint on {c.predicate}: bad summed position", None))
        if c.target <= 0:
            issues.append(Issue("constraint", f"constraint on {c.predicate}: target must be positive", None))
    return ValidationReport(issues)


def _fmt_number(x: float) -> str:
    return str(int(x)) if float(x).is_integer() and abs(x) < 1e15 else repr(float(x))


def _fmt_weight(r: Rule) -> str:
    if r.hard:
        return "HARD"
    if r.learnable:
        return "LEARN"
    return repr(float(r.weight))


def format_theory(t: Theory) -> str:
    lines: list[str] = []
    for d in t.declarations:
        lines.append(f"predicate: {d.name}/{d.arity} {d.kind} .")
    i = 0
    while i < len(t.rules):
        r = t.rules[i]
        nxt = t.rules[i + 1] if i + 1 < len(t.rules) else None
        if nxt is not None and nxt.twin and len(r.premise) == 1:
            lines.append(f"{_fmt_weight(r)} :: {r.premise[0]} <-> {r.conclusion} .")
            i += 2
            continue
        body = " & ".join(map(str, r.premise))
        lines.append(f"{_fmt_weight(r)} :: {body + ' ' if body else ''}-> {r.conclusion} .")
        i += 1
    lines.extend(str(c) for c in t.constraints)
    return "\n".join(lines)

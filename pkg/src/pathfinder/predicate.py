"""Filter predicates: grammar, boolean algebra, and DNF normalization.

The filter language is conjunctions and disjunctions of two atom shapes:
numeric range predicates and categorical membership predicates. There is
no negation. Planning relies on purely symbolic region tests (covers,
overlaps, intersection), never on data-dependent cardinalities.

Grammar accepted by parse_filter::

    expr   := term (OR term)*
    term   := factor (AND factor)*
    factor := atom | "(" expr ")"
    atom   := ident cmp number
            | number "<=" ident "<=" number
            | ident IN "(" string ("," string)* ")"
    cmp    := "<" | "<=" | ">" | ">=" | "="

Keywords are case-insensitive and strings are double-quoted.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union

import numpy as np

from .data import Kind, Relation, Schema, Tuple

__all__ = [
    "Range",
    "InSet",
    "MatchAll",
    "AtomicPredicate",
    "NodePredicate",
    "And",
    "Or",
    "BoolExpr",
    "ConjunctiveClause",
    "DnfPredicate",
    "FilterError",
    "FilterSyntaxError",
    "UnsatisfiableFilterError",
    "ClauseLimitError",
    "MAX_DNF_CLAUSES",
    "parse_filter",
    "to_dnf",
    "evaluate",
    "matching_mask",
    "conjoin_simplify",
    "covers",
    "overlaps",
]

MAX_DNF_CLAUSES = 64


class FilterError(ValueError):
    """Base class for filter construction and normalization errors."""


class FilterSyntaxError(FilterError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class UnsatisfiableFilterError(FilterError):
    """Every clause of the filter denotes an empty region."""


class ClauseLimitError(FilterError):
    """DNF expansion would exceed MAX_DNF_CLAUSES clauses."""


# -- atoms ---------------------------------------------------------------

@dataclass(frozen=True)
class Range:
    """Numeric interval on one attribute. Missing bounds are open ends;
    sentinel infinities are never used so inclusivity stays exact."""

    attr: str
    lower: float | None = None
    lower_inclusive: bool = True
    upper: float | None = None
    upper_inclusive: bool = True

    def __post_init__(self):
        if self.lower is None and self.upper is None:
            raise ValueError(f"range on {self.attr!r} must have at least one bound")
        if self.lower is not None and self.upper is not None:
            if self.lower > self.upper:
                raise ValueError(
                    f"range on {self.attr!r}: lower {self.lower} > upper {self.upper}"
                )
            if self.lower == self.upper and not (
                self.lower_inclusive and self.upper_inclusive
            ):
                raise ValueError(
                    f"range on {self.attr!r}: degenerate bound must be inclusive"
                )

    def contains(self, v: float) -> bool:
        if self.lower is not None:
            if v < self.lower or (v == self.lower and not self.lower_inclusive):
                return False
        if self.upper is not None:
            if v > self.upper or (v == self.upper and not self.upper_inclusive):
                return False
        return True

    def __str__(self) -> str:
        lo = "(-inf" if self.lower is None else ("[" if self.lower_inclusive else "(") + repr(self.lower)
        hi = "inf)" if self.upper is None else repr(self.upper) + ("]" if self.upper_inclusive else ")")
        return f"{self.attr} in {lo}, {hi}"


@dataclass(frozen=True)
class InSet:
    """Categorical membership on one attribute."""

    attr: str
    values: frozenset[str]

    def __post_init__(self):
        if not self.values:
            raise ValueError(f"IN set on {self.attr!r} must be non-empty")
        object.__setattr__(self, "values", frozenset(str(v) for v in self.values))

    def contains(self, v: str) -> bool:
        return v in self.values

    def __str__(self) -> str:
        vals = ", ".join(f'"{v}"' for v in sorted(self.values))
        return f"{self.attr} IN ({vals})"


@dataclass(frozen=True)
class MatchAll:
    """The full-relation region: the predicate of every root index node."""

    def __str__(self) -> str:
        return "TRUE"


AtomicPredicate = Union[Range, InSet]
NodePredicate = Union[Range, InSet, MatchAll]


# -- boolean expression tree --------------------------------------------

@dataclass(frozen=True)
class And:
    children: tuple["BoolExpr", ...]

    def __post_init__(self):
        if not self.children:
            raise ValueError("AND must have at least one child")


@dataclass(frozen=True)
class Or:
    children: tuple["BoolExpr", ...]

    def __post_init__(self):
        if not self.children:
            raise ValueError("OR must have at least one child")


BoolExpr = Union[Range, InSet, And, Or]


# -- conjunctive clauses and DNF -----------------------------------------

@dataclass(frozen=True)
class ConjunctiveClause:
    """AND of atoms, normalized so each attribute appears at most once.

    An empty intersection is kept as an explicitly flagged empty clause
    rather than an invalid atom. A clause with no atoms is the full
    region (arises only internally, e.g. when a borrowed atom widens to
    the whole domain).
    """

    atoms: tuple[AtomicPredicate, ...]
    empty: bool = False

    def __post_init__(self):
        names = [a.attr for a in self.atoms]
        if len(set(names)) != len(names):
            raise ValueError("clause atoms must target distinct attributes")
        object.__setattr__(
            self, "atoms", tuple(sorted(self.atoms, key=lambda a: a.attr))
        )

    @classmethod
    def of(cls, *atoms: AtomicPredicate) -> "ConjunctiveClause":
        clause = cls(atoms=())
        for a in atoms:
            clause = conjoin_simplify(clause, a)
        return clause

    def atom_on(self, attr: str) -> AtomicPredicate | None:
        for a in self.atoms:
            if a.attr == attr:
                return a
        return None

    @property
    def attrs(self) -> tuple[str, ...]:
        return tuple(a.attr for a in self.atoms)

    def __str__(self) -> str:
        if self.empty:
            return "FALSE"
        if not self.atoms:
            return "TRUE"
        return " AND ".join(str(a) for a in self.atoms)


@dataclass(frozen=True)
class DnfPredicate:
    """Disjunction of conjunctive clauses. A tuple matches iff it
    satisfies at least one clause."""

    clauses: tuple[ConjunctiveClause, ...]

    def __post_init__(self):
        if not self.clauses:
            raise ValueError("DNF must have at least one clause")

    def to_expr(self) -> BoolExpr:
        """Rebuild a boolean expression tree (used for idempotence checks)."""
        terms = []
        for c in self.clauses:
            if len(c.atoms) == 1:
                terms.append(c.atoms[0])
            else:
                terms.append(And(tuple(c.atoms)))
        if len(terms) == 1:
            return terms[0]
        return Or(tuple(terms))

    def __str__(self) -> str:
        if len(self.clauses) == 1:
            return str(self.clauses[0])
        return " OR ".join(f"({c})" for c in self.clauses)


# -- parser --------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>[+-]?(\d+\.\d*|\.\d+|\d+)([eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<string>"[^"]*")
  | (?P<op><=|>=|<|>|=)
  | (?P<lparen>\()
  | (?P<rparen>\))
  | (?P<comma>,)
    """,
    re.VERBOSE,
)

_KEYWORDS = {"and", "or", "in"}


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise FilterSyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        if kind != "ws":
            value = m.group()
            if kind == "ident" and value.lower() in _KEYWORDS:
                kind = value.lower()
            tokens.append((kind, value, pos))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, schema: Schema):
        self.text = text
        self.schema = schema
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self) -> tuple[str, str, int]:
        return self.tokens[self.i]

    def next(self) -> tuple[str, str, int]:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, kind: str) -> tuple[str, str, int]:
        tok = self.next()
        if tok[0] != kind:
            raise FilterSyntaxError(
                f"expected {kind}, found {tok[1] or 'end of input'!r}", tok[2]
            )
        return tok

    def parse(self) -> BoolExpr:
        expr = self.expr()
        tok = self.peek()
        if tok[0] != "end":
            raise FilterSyntaxError(f"unexpected trailing {tok[1]!r}", tok[2])
        return expr

    def expr(self) -> BoolExpr:
        terms = [self.term()]
        while self.peek()[0] == "or":
            self.next()
            terms.append(self.term())
        return terms[0] if len(terms) == 1 else Or(tuple(terms))

    def term(self) -> BoolExpr:
        factors = [self.factor()]
        while self.peek()[0] == "and":
            self.next()
            factors.append(self.factor())
        return factors[0] if len(factors) == 1 else And(tuple(factors))

    def factor(self) -> BoolExpr:
        tok = self.peek()
        if tok[0] == "lparen":
            self.next()
            inner = self.expr()
            self.expect("rparen")
            return inner
        return self.atom()

    def atom(self) -> AtomicPredicate:
        tok = self.next()
        if tok[0] == "number":
            # two-sided form: number <= ident <= number
            low = float(tok[1])
            op1 = self.expect("op")
            if op1[1] != "<=":
                raise FilterSyntaxError("expected <= in two-sided range", op1[2])
            ident = self.expect("ident")
            op2 = self.expect("op")
            if op2[1] != "<=":
                raise FilterSyntaxError("expected <= in two-sided range", op2[2])
            high_tok = self.expect("number")
            high = float(high_tok[1])
            self._check_numeric(ident)
            if low > high:
                raise FilterError(
                    f"empty range {low} <= {ident[1]} <= {high}"
                )
            return Range(ident[1], lower=low, upper=high)
        if tok[0] != "ident":
            raise FilterSyntaxError(
                f"expected attribute or number, found {tok[1] or 'end of input'!r}",
                tok[2],
            )
        ident = tok
        follow = self.next()
        if follow[0] == "in":
            self.expect("lparen")
            values = [self._string()]
            while self.peek()[0] == "comma":
                self.next()
                values.append(self._string())
            self.expect("rparen")
            self._check_categorical(ident)
            return InSet(ident[1], frozenset(values))
        if follow[0] == "op":
            num = self.expect("number")
            value = float(num[1])
            self._check_numeric(ident)
            op = follow[1]
            if op == "=":
                return Range(ident[1], lower=value, upper=value)
            if op == "<":
                return Range(ident[1], upper=value, upper_inclusive=False)
            if op == "<=":
                return Range(ident[1], upper=value)
            if op == ">":
                return Range(ident[1], lower=value, lower_inclusive=False)
            return Range(ident[1], lower=value)
        raise FilterSyntaxError(
            f"expected comparison or IN after {ident[1]!r}", follow[2]
        )

    def _string(self) -> str:
        tok = self.expect("string")
        return tok[1][1:-1]

    def _resolve(self, ident: tuple[str, str, int]) -> Kind:
        name = ident[1]
        if name not in self.schema:
            raise FilterError(f"unknown attribute {name!r}")
        return self.schema.kind_of(name)

    def _check_numeric(self, ident: tuple[str, str, int]) -> None:
        if self._resolve(ident) is not Kind.NUMERIC:
            raise FilterError(
                f"attribute {ident[1]!r} is categorical; ranges need a numeric attribute"
            )

    def _check_categorical(self, ident: tuple[str, str, int]) -> None:
        if self._resolve(ident) is not Kind.CATEGORICAL:
            raise FilterError(
                f"attribute {ident[1]!r} is numeric; IN needs a categorical attribute"
            )


def parse_filter(text: str, schema: Schema) -> BoolExpr:
    """Parse a filter expression against the schema.

    Raises FilterSyntaxError (with position) on malformed input and
    FilterError on unknown attributes or kind mismatches.
    """
    return _Parser(text, schema).parse()


# -- interval helpers ----------------------------------------------------

def _intersect_ranges(a: Range, b: Range) -> Range | None:
    """Intersection of two ranges on the same attribute, None if empty."""
    lo, lo_inc = a.lower, a.lower_inclusive
    if b.lower is not None and (lo is None or b.lower > lo or (b.lower == lo and not b.lower_inclusive)):
        lo, lo_inc = b.lower, b.lower_inclusive
    hi, hi_inc = a.upper, a.upper_inclusive
    if b.upper is not None and (hi is None or b.upper < hi or (b.upper == hi and not b.upper_inclusive)):
        hi, hi_inc = b.upper, b.upper_inclusive
    if lo is not None and hi is not None:
        if lo > hi or (lo == hi and not (lo_inc and hi_inc)):
            return None
    return Range(a.attr, lower=lo, lower_inclusive=lo_inc, upper=hi, upper_inclusive=hi_inc)


def _range_contains_range(outer: Range, inner: Range) -> bool:
    """True iff region(inner) is a subset of region(outer)."""
    if outer.lower is not None:
        if inner.lower is None:
            return False
        if inner.lower < outer.lower:
            return False
        if inner.lower == outer.lower and inner.lower_inclusive and not outer.lower_inclusive:
            return False
    if outer.upper is not None:
        if inner.upper is None:
            return False
        if inner.upper > outer.upper:
            return False
        if inner.upper == outer.upper and inner.upper_inclusive and not outer.upper_inclusive:
            return False
    return True


def _ranges_overlap(a: Range, b: Range) -> bool:
    return _intersect_ranges(a, b) is not None


# -- clause algebra ------------------------------------------------------

def conjoin_simplify(c: ConjunctiveClause, a: AtomicPredicate) -> ConjunctiveClause:
    """Clause AND atom, with per-attribute interval/set intersection.

    The result region equals region(c) ∩ region(a); a vanished
    intersection yields a clause marked empty.
    """
    if c.empty:
        return c
    existing = c.atom_on(a.attr)
    if existing is None:
        return ConjunctiveClause(atoms=c.atoms + (a,))
    others = tuple(x for x in c.atoms if x.attr != a.attr)
    if isinstance(existing, Range) and isinstance(a, Range):
        merged = _intersect_ranges(existing, a)
        if merged is None:
            return ConjunctiveClause(atoms=others, empty=True)
        return ConjunctiveClause(atoms=others + (merged,))
    if isinstance(existing, InSet) and isinstance(a, InSet):
        inter = existing.values & a.values
        if not inter:
            return ConjunctiveClause(atoms=others, empty=True)
        return ConjunctiveClause(atoms=others + (InSet(a.attr, inter),))
    raise FilterError(
        f"attribute {a.attr!r} constrained by both a range and an IN set"
    )


def _count_clauses(e: BoolExpr) -> int:
    if isinstance(e, (Range, InSet)):
        return 1
    if isinstance(e, Or):
        return sum(_count_clauses(c) for c in e.children)
    total = 1
    for child in e.children:
        total *= _count_clauses(child)
        if total > MAX_DNF_CLAUSES:
            return total
    return total


def _expand(e: BoolExpr) -> list[list[AtomicPredicate]]:
    if isinstance(e, (Range, InSet)):
        return [[e]]
    if isinstance(e, Or):
        out: list[list[AtomicPredicate]] = []
        for child in e.children:
            out.extend(_expand(child))
        return out
    combos: list[list[AtomicPredicate]] = [[]]
    for child in e.children:
        expanded = _expand(child)
        combos = [base + extra for base in combos for extra in expanded]
    return combos


def to_dnf(e: BoolExpr) -> DnfPredicate:
    """Normalize to a disjunction of per-attribute-merged clauses.

    Unsatisfiable clauses are dropped; if nothing is left the filter as a
    whole is unsatisfiable and an error is raised. Expansion past
    MAX_DNF_CLAUSES clauses is refused rather than allowed to blow up.
    """
    n = _count_clauses(e)
    if n > MAX_DNF_CLAUSES:
        raise ClauseLimitError(
            f"DNF expansion needs {n} clauses, more than the {MAX_DNF_CLAUSES} allowed"
        )
    clauses = []
    for atom_list in _expand(e):
        clause = ConjunctiveClause.of(*atom_list)
        if not clause.empty:
            clauses.append(clause)
    if not clauses:
        raise UnsatisfiableFilterError("filter matches no possible tuple")
    return DnfPredicate(tuple(clauses))


# -- evaluation ----------------------------------------------------------

def evaluate(p, t: Tuple) -> bool:
    """Evaluate a predicate of any shape against one tuple."""
    if isinstance(p, MatchAll):
        return True
    if isinstance(p, (Range, InSet)):
        return p.contains(t.value(p.attr))
    if isinstance(p, ConjunctiveClause):
        if p.empty:
            return False
        return all(a.contains(t.value(a.attr)) for a in p.atoms)
    if isinstance(p, DnfPredicate):
        return any(evaluate(c, t) for c in p.clauses)
    if isinstance(p, And):
        return all(evaluate(c, t) for c in p.children)
    if isinstance(p, Or):
        return any(evaluate(c, t) for c in p.children)
    raise TypeError(f"cannot evaluate {type(p).__name__}")


def matching_mask(p, r: Relation) -> np.ndarray:
    """Boolean mask over pks 0..n-1: which tuples satisfy p."""
    if isinstance(p, MatchAll):
        return np.ones(r.card, dtype=bool)
    if isinstance(p, Range):
        col = r.column(p.attr)
        mask = np.ones(r.card, dtype=bool)
        if p.lower is not None:
            mask &= col >= p.lower if p.lower_inclusive else col > p.lower
        if p.upper is not None:
            mask &= col <= p.upper if p.upper_inclusive else col < p.upper
        return mask
    if isinstance(p, InSet):
        return np.isin(r.column(p.attr), sorted(p.values))
    if isinstance(p, ConjunctiveClause):
        if p.empty:
            return np.zeros(r.card, dtype=bool)
        mask = np.ones(r.card, dtype=bool)
        for a in p.atoms:
            mask &= matching_mask(a, r)
        return mask
    if isinstance(p, DnfPredicate):
        mask = np.zeros(r.card, dtype=bool)
        for c in p.clauses:
            mask |= matching_mask(c, r)
        return mask
    if isinstance(p, And):
        mask = np.ones(r.card, dtype=bool)
        for c in p.children:
            mask &= matching_mask(c, r)
        return mask
    if isinstance(p, Or):
        mask = np.zeros(r.card, dtype=bool)
        for c in p.children:
            mask |= matching_mask(c, r)
        return mask
    raise TypeError(f"cannot build mask for {type(p).__name__}")


# -- symbolic region tests used by the planner ---------------------------

def covers(node_pred: NodePredicate, c: ConjunctiveClause) -> bool:
    """True iff region(c) is symbolically contained in region(node_pred).

    node_pred is a single-attribute region (a tree subrange, a hash
    category set, or the full relation). A clause that does not constrain
    node_pred's attribute can take any value there, so only the
    full-relation predicate covers it.
    """
    if isinstance(node_pred, MatchAll):
        return True
    if c.empty:
        return True
    atom = c.atom_on(node_pred.attr)
    if atom is None:
        return False
    if isinstance(node_pred, Range) and isinstance(atom, Range):
        return _range_contains_range(node_pred, atom)
    if isinstance(node_pred, InSet) and isinstance(atom, InSet):
        return atom.values <= node_pred.values
    return False


def overlaps(node_pred: NodePredicate, c: ConjunctiveClause) -> bool:
    """True iff region(c) ∩ region(node_pred) is symbolically non-empty."""
    if c.empty:
        return False
    if isinstance(node_pred, MatchAll):
        return True
    atom = c.atom_on(node_pred.attr)
    if atom is None:
        return True
    if isinstance(node_pred, Range) and isinstance(atom, Range):
        return _ranges_overlap(node_pred, atom)
    if isinstance(node_pred, InSet) and isinstance(atom, InSet):
        return bool(node_pred.values & atom.values)
    return False

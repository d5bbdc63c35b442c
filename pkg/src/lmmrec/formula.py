"""Model formulas of the form ``y ~ -1 + a + b + (1|g) + (1|h)``.

Only categorical fixed factors and random intercepts per grouping factor are
supported.  The grammar is::

    formula := IDENT "~" term ("+" term)*
    term    := "-1" | "1" | IDENT | "(" "1" "|" IDENT ")"

``-1`` removes the fixed intercept; without it the model carries one.
Whitespace is ignored everywhere.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from lmmrec.errors import FormulaError

IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")

_TOKEN_RE = re.compile(
    r"(?P<ws>\s+)|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)|(?P<num>[0-9]+(?:\.[0-9]*)?)"
    r"|(?P<op>[~+\-()|])"
)


@dataclass(frozen=True)
class ModelFormula:
    response: str
    intercept: bool
    fixed_factors: tuple[str, ...] = ()
    random_factors: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "fixed_factors", tuple(self.fixed_factors))
        object.__setattr__(self, "random_factors", tuple(self.random_factors))
        names = [self.response, *self.fixed_factors, *self.random_factors]
        for name in names:
            if not IDENT_RE.fullmatch(name):
                raise FormulaError(f"invalid identifier {name!r}")
        seen = set()
        for name in names:
            if name in seen:
                raise FormulaError(f"duplicate factor {name!r}")
            seen.add(name)
        if not self.intercept and not self.fixed_factors:
            raise FormulaError("empty model: no fixed factor and no intercept")

    @property
    def factors(self) -> tuple[str, ...]:
        return self.fixed_factors + self.random_factors

    def __str__(self) -> str:
        return format_formula(self)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise FormulaError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append((kind, m.group(), pos))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def next(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, kind: str, value: str | None = None, what: str | None = None):
        tok = self.next()
        if tok[0] != kind or (value is not None and tok[1] != value):
            found = tok[1] or "end of input"
            raise FormulaError(f"expected {what or value or kind}, found {found!r}", tok[2])
        return tok

    def parse(self) -> ModelFormula:
        response = self.expect("ident", what="response name")[1]
        self.expect("op", "~", what="'~'")
        intercept_terms = []  # (value, position)
        fixed: list[str] = []
        random: list[str] = []
        seen: dict[str, int] = {response: 0}

        def add_name(name: str, pos: int, target: list[str]):
            if name in seen:
                raise FormulaError(f"duplicate factor {name!r}", pos)
            seen[name] = pos
            target.append(name)

        while True:
            kind, value, pos = self.peek()
            if kind == "op" and value == "-":
                self.next()
                one = self.next()
                if one[:2] != ("num", "1"):
                    raise FormulaError("only '-1' may follow '-'", one[2])
                intercept_terms.append((False, pos))
            elif kind == "num":
                self.next()
                if value != "1":
                    raise FormulaError(f"numeric term must be 1, found {value!r}", pos)
                intercept_terms.append((True, pos))
            elif kind == "ident":
                self.next()
                add_name(value, pos, fixed)
            elif kind == "op" and value == "(":
                self.next()
                one = self.next()
                if one[:2] != ("num", "1"):
                    raise FormulaError(
                        "random term must be a random intercept '(1|group)'", one[2]
                    )
                self.expect("op", "|", what="'|'")
                name_tok = self.expect("ident", what="grouping factor name")
                self.expect("op", ")", what="')'")
                add_name(name_tok[1], name_tok[2], random)
            elif kind == "end" or (kind == "op" and value == "+"):
                raise FormulaError("empty term", pos)
            else:
                raise FormulaError(f"unexpected {value!r}", pos)

            kind, value, pos = self.peek()
            if kind == "end":
                break
            if kind == "op" and value == "+":
                self.next()
                continue
            raise FormulaError(f"expected '+' or end of formula, found {value!r}", pos)

        if len(intercept_terms) > 1:
            raise FormulaError("intercept specified more than once", intercept_terms[1][1])
        intercept = intercept_terms[0][0] if intercept_terms else True
        if not intercept and not fixed:
            raise FormulaError("empty model: no fixed factor and no intercept")
        return ModelFormula(response, intercept, tuple(fixed), tuple(random))


def parse_formula(text: str) -> ModelFormula:
    """Parse ``text`` into a :class:`ModelFormula`.

    Raises
    ------
    FormulaError
        On any text outside the grammar, duplicated factors, or a model with
        neither an intercept nor a fixed factor.
    """
    if not isinstance(text, str) or not text.strip():
        raise FormulaError("formula is empty", 0)
    return _Parser(text).parse()


def format_formula(f: ModelFormula) -> str:
    terms = []
    if not f.intercept:
        terms.append("-1")
    elif not f.fixed_factors:
        terms.append("1")
    terms.extend(f.fixed_factors)
    terms.extend(f"(1|{g})" for g in f.random_factors)
    return f"{f.response} ~ " + " + ".join(terms)

"""Arithmetic expression toolkit.

Expressions are sequences of tokens over binary operators {+, -, *, /, ^},
quantity slots N1, N2, ... and numeric constants.  The canonical machine
representation is a prefix (Polish) token sequence, equivalently a binary
tree whose internal nodes are operators and whose leaves are slots or
constants.  Everything here is pure and deterministic.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

OPERATORS = ("+", "-", "*", "/", "^")

_PRECEDENCE = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 3}
_RIGHT_ASSOC = {"^"}

# unicode operator spellings accepted on input, normalized to ASCII
_OP_ALIASES = {"−": "-", "×": "*", "÷": "/", "∗": "*"}

_NUMBER_RE = re.compile(r"\d+\.\d+|\d+|\.\d+")
_SLOT_RE = re.compile(r"N(\d+)")


class ExprError(ValueError):
    """Base class for everything this module raises."""


class UnknownSymbol(ExprError):
    def __init__(self, symbol, token_index):
        super().__init__(f"unknown symbol {symbol!r} at token index {token_index}")
        self.symbol = symbol
        self.token_index = token_index


class EmptyExpression(ExprError):
    pass


class UnbalancedParentheses(ExprError):
    pass


class MalformedExpression(ExprError):
    pass


class IncompletePrefix(ExprError):
    pass


class TrailingTokens(ExprError):
    pass


class DivisionByZero(ExprError):
    pass


class UnboundSlot(ExprError):
    def __init__(self, index):
        super().__init__(f"no value bound for slot N{index}")
        self.index = index


class NonFiniteResult(ExprError):
    pass


@dataclass(frozen=True)
class Token:
    """One expression token: an operator, a quantity slot, or a constant.

    Parenthesis markers (kind "(" / ")") appear only in lexer output; they
    never occur in prefix sequences or trees.
    """

    kind: str  # "op" | "slot" | "const" | "(" | ")"
    op: str | None = None
    index: int | None = None
    value: float | None = None

    @property
    def is_operator(self) -> bool:
        return self.kind == "op"

    @property
    def is_operand(self) -> bool:
        return self.kind in ("slot", "const")

    @property
    def text(self) -> str:
        if self.kind == "op":
            return self.op
        if self.kind == "slot":
            return f"N{self.index}"
        if self.kind == "const":
            return format_number(self.value)
        return self.kind

    def __str__(self) -> str:
        return self.text


LPAREN = Token("(")
RPAREN = Token(")")


def op_token(symbol: str) -> Token:
    symbol = _OP_ALIASES.get(symbol, symbol)
    if symbol not in OPERATORS:
        raise ExprError(f"not an operator: {symbol!r}")
    return Token("op", op=symbol)


def slot_token(index: int) -> Token:
    if index < 1:
        raise ExprError(f"slot index must be >= 1, got {index}")
    return Token("slot", index=index)


def const_token(value: float) -> Token:
    return Token("const", value=float(value))


def format_number(value: float) -> str:
    """Canonical text for a numeric value: '7' for integers, repr otherwise."""
    if float(value).is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(float(value))


def token_from_text(text: str) -> Token:
    """Parse a single token from its text form ('+', 'N3', '3.14', ...)."""
    text = _OP_ALIASES.get(text, text)
    if text in _PRECEDENCE:
        return op_token(text)
    m = _SLOT_RE.fullmatch(text)
    if m:
        return slot_token(int(m.group(1)))
    if _NUMBER_RE.fullmatch(text):
        return const_token(float(text))
    raise ExprError(f"cannot parse token {text!r}")


def tokenize_infix(text: str) -> list[Token]:
    """Lex an infix expression string into tokens (parens included).

    Accepts numbers, slot tokens N<k>, the five operators (ASCII or the
    unicode spellings), parentheses, and whitespace.  Numeric literals
    become constant tokens; classification against a constant list happens
    at record construction, not here.
    """
    tokens: list[Token] = []
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        if ch == "(":
            tokens.append(LPAREN)
            i += 1
            continue
        if ch == ")":
            tokens.append(RPAREN)
            i += 1
            continue
        ch_norm = _OP_ALIASES.get(ch, ch)
        if ch_norm in _PRECEDENCE:
            tokens.append(op_token(ch_norm))
            i += 1
            continue
        m = _SLOT_RE.match(text, i)
        if m:
            tokens.append(slot_token(int(m.group(1))))
            i = m.end()
            continue
        m = _NUMBER_RE.match(text, i)
        if m:
            tokens.append(const_token(float(m.group(0))))
            i = m.end()
            continue
        raise UnknownSymbol(ch, len(tokens))
    if not tokens:
        raise EmptyExpression("empty expression text")
    return tokens


@dataclass
class ExprTree:
    """A binary expression tree node; a tree is just its root node.

    ``index`` is the node's preorder position, which coincides with the
    position of its token in the prefix serialization.
    """

    token: Token
    left: ExprTree | None = None
    right: ExprTree | None = None
    index: int = 0

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def nodes_preorder(self) -> list[ExprTree]:
        out: list[ExprTree] = []
        stack = [self]
        while stack:
            node = stack.pop()
            out.append(node)
            if node.right is not None:
                stack.append(node.right)
            if node.left is not None:
                stack.append(node.left)
        return out

    def n_operators(self) -> int:
        return sum(1 for n in self.nodes_preorder() if n.token.is_operator)

    def n_nodes(self) -> int:
        return len(self.nodes_preorder())


def _assign_preorder(root: ExprTree) -> None:
    for i, node in enumerate(root.nodes_preorder()):
        node.index = i


def parse_infix(tokens: list[Token]) -> ExprTree:
    """Parse an infix token sequence (precedence climbing) into a tree.

    ^ binds tightest and is right-associative; * / then + - are
    left-associative.
    """
    if not tokens:
        raise EmptyExpression("no tokens")
    pos = 0

    def peek() -> Token | None:
        return tokens[pos] if pos < len(tokens) else None

    def parse_primary() -> ExprTree:
        nonlocal pos
        tok = peek()
        if tok is None:
            raise MalformedExpression("expression ends where an operand is expected")
        if tok is LPAREN or tok.kind == "(":
            pos += 1
            inner = parse_expr(1)
            closing = peek()
            if closing is None or closing.kind != ")":
                raise UnbalancedParentheses("missing closing parenthesis")
            pos += 1
            return inner
        if tok.is_operand:
            pos += 1
            return ExprTree(tok)
        raise MalformedExpression(f"operand expected, found {tok.text!r}")

    def parse_expr(min_prec: int) -> ExprTree:
        nonlocal pos
        left = parse_primary()
        while True:
            tok = peek()
            if tok is None or not tok.is_operator:
                break
            prec = _PRECEDENCE[tok.op]
            if prec < min_prec:
                break
            pos += 1
            next_min = prec if tok.op in _RIGHT_ASSOC else prec + 1
            right = parse_expr(next_min)
            left = ExprTree(tok, left, right)
        return left

    root = parse_expr(1)
    leftover = peek()
    if leftover is not None:
        if leftover.kind == ")":
            raise UnbalancedParentheses("unmatched closing parenthesis")
        raise MalformedExpression(f"unexpected token {leftover.text!r} after expression")
    _assign_preorder(root)
    return root


def infix_to_prefix(tokens: list[Token]) -> list[Token]:
    """Convert a well-formed infix token sequence to prefix order."""
    return tree_to_prefix(parse_infix(tokens))


def parse_prefix(tokens: list[Token]) -> ExprTree:
    """Build the tree for a prefix token sequence."""
    pos = 0

    def build() -> ExprTree:
        nonlocal pos
        if pos >= len(tokens):
            raise IncompletePrefix(f"prefix ends early after {len(tokens)} tokens")
        tok = tokens[pos]
        node = ExprTree(tok, index=pos)
        pos += 1
        if tok.is_operator:
            node.left = build()
            node.right = build()
        elif not tok.is_operand:
            raise MalformedExpression(f"token {tok.text!r} not allowed in prefix")
        return node

    root = build()
    if pos != len(tokens):
        raise TrailingTokens(f"{len(tokens) - pos} tokens left after a complete tree")
    return root


def tree_to_prefix(root: ExprTree) -> list[Token]:
    return [node.token for node in root.nodes_preorder()]


def is_complete_prefix(tokens: list[Token]) -> tuple[bool, int]:
    """Check prefix completeness by operand accounting.

    Scanning left to right with a running need counter (1 at start, +1 per
    operator, -1 per operand), a sequence is complete iff the counter hits
    0 exactly at the last token.  Returns (complete, operands still
    needed); a sequence with tokens beyond the completion point reports
    (False, 0).
    """
    need = 1
    for tok in tokens:
        if need == 0:
            return False, 0
        need += 1 if tok.is_operator else -1
    return need == 0, need


def evaluate(root: ExprTree, bindings: dict[int, float] | None = None) -> float:
    """Recursively evaluate a tree under slot-index -> value bindings."""
    bindings = bindings or {}

    def rec(node: ExprTree) -> float:
        tok = node.token
        if tok.kind == "slot":
            if tok.index not in bindings:
                raise UnboundSlot(tok.index)
            return float(bindings[tok.index])
        if tok.kind == "const":
            return tok.value
        a = rec(node.left)
        b = rec(node.right)
        if tok.op == "+":
            r = a + b
        elif tok.op == "-":
            r = a - b
        elif tok.op == "*":
            r = a * b
        elif tok.op == "/":
            if b == 0.0:
                raise DivisionByZero("division by zero")
            r = a / b
        else:  # "^"
            try:
                r = a ** b
            except (OverflowError, ZeroDivisionError) as e:
                raise NonFiniteResult(str(e)) from e
            if isinstance(r, complex):
                raise NonFiniteResult(f"complex result from {a} ^ {b}")
        if not math.isfinite(r):
            raise NonFiniteResult(f"non-finite value from {tok.op}")
        return r

    return rec(root)


def leaves_in_order(root: ExprTree) -> list[tuple[int, Token]]:
    """All leaves in preorder as (preorder position, token) pairs."""
    return [(n.index, n.token) for n in root.nodes_preorder() if n.is_leaf]


def prefix_to_text(tokens: list[Token]) -> str:
    return " ".join(t.text for t in tokens)


def prefix_from_text(text: str) -> list[Token]:
    return [token_from_text(w) for w in text.split()]

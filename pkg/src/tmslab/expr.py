"""Integer infix expressions over + - * without parentheses.

Multiplication binds tighter than addition and subtraction; operators of
equal precedence associate to the left.  Numbers are runs of decimal digits
without leading zeros.
"""
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

OPERATORS = ("+", "-", "*")


class ExprError(ValueError):
    pass


@dataclass(frozen=True)
class Parsed:
    value: int
    numbers: tuple[int, ...]


def tokenize(symbols: Sequence[str]) -> list[str | int]:
    """Group digit symbols into integers; each symbol is one character."""
    out: list[str | int] = []
    digits = ""

    def flush():
        if len(digits) > 1 and digits[0] == "0":
            raise ExprError(f"number with leading zero: {digits}")
        out.append(int(digits))

    for s in symbols:
        if len(s) == 1 and s.isdigit():
            digits += s
            continue
        if digits:
            flush()
            digits = ""
        if s in OPERATORS:
            out.append(s)
        else:
            raise ExprError(f"unexpected symbol {s!r}")
    if digits:
        flush()
    return out


def parse(symbols: Sequence[str]) -> Parsed:
    toks = tokenize(symbols)
    if not toks:
        raise ExprError("empty expression")
    numbers = []
    for i, t in enumerate(toks):
        want_number = i % 2 == 0
        if want_number != isinstance(t, int):
            raise ExprError("operators and numbers must alternate")
        if want_number:
            numbers.append(t)
    if len(toks) % 2 == 0:
        raise ExprError("expression ends with an operator")

    total = 0
    sign = 1
    term = toks[0]
    for op, num in zip(toks[1::2], toks[2::2]):
        if op == "*":
            term *= num
        else:
            total += sign * term
            sign = 1 if op == "+" else -1
            term = num
    total += sign * term
    return Parsed(total, tuple(numbers))


def evaluate(symbols: Sequence[str]) -> int:
    return parse(symbols).value


def render(numbers: Sequence[int], ops: Sequence[str]) -> str:
    """Interleave numbers and operators into an expression string."""
    if len(ops) != len(numbers) - 1:
        raise ValueError("need exactly one operator between consecutive numbers")
    parts = [str(numbers[0])]
    for op, n in zip(ops, numbers[1:]):
        parts += [op, str(n)]
    return "".join(parts)

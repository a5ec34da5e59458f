"""
Chemical formula parsing and canonical reduced compositions
"""

import re
from fractions import Fraction
from math import gcd
from functools import reduce
from typing import Dict, Iterable, List, Mapping, Tuple

from textcrystal.core.exceptions import DataError
from textcrystal.services.elements import get_element_table

_TOKEN = re.compile(r"([A-Z][a-z]?)|(\()|(\))|(\d+(?:\.\d+)?)|(\s+)")


def parse_formula(formula: str) -> Dict[str, Fraction]:
    """Parse a formula such as ``La(NiGe)2`` into element counts.

    Nested parentheses and decimal multipliers are accepted; whitespace is ignored.
    """
    if not formula or not formula.strip():
        raise DataError("Empty chemical formula")
    table = get_element_table()

    stack: List[Dict[str, Fraction]] = [{}]
    last: Dict[str, Fraction] = {}
    pos = 0
    while pos < len(formula):
        m = _TOKEN.match(formula, pos)
        if m is None:
            raise DataError(f"Cannot parse formula {formula!r} at position {pos}")
        symbol, open_, close, number, space = m.groups()
        pos = m.end()
        if space:
            continue
        if symbol:
            if not table.has_symbol(symbol):
                raise DataError(f"Unknown element {symbol!r} in formula {formula!r}")
            last = {symbol: Fraction(1)}
            _merge(stack[-1], last)
        elif open_:
            stack.append({})
            last = {}
        elif close:
            if len(stack) == 1:
                raise DataError(f"Unbalanced ')' in formula {formula!r}")
            group = stack.pop()
            _merge(stack[-1], group)
            last = group
        elif number:
            if not last:
                raise DataError(f"Multiplier without element in formula {formula!r}")
            factor = Fraction(number) - 1
            _merge(stack[-1], {el: n * factor for el, n in last.items()})
            last = {}
    if len(stack) != 1:
        raise DataError(f"Unbalanced '(' in formula {formula!r}")
    counts = {el: n for el, n in stack[0].items() if n > 0}
    if not counts:
        raise DataError(f"Formula {formula!r} has no elements")
    return counts


def _merge(target: Dict[str, Fraction], extra: Mapping[str, Fraction]) -> None:
    for el, n in extra.items():
        target[el] = target.get(el, Fraction(0)) + n


def formula_elements(formula: str) -> Tuple[str, ...]:
    """Element symbols in order of first appearance"""
    seen: List[str] = []
    for m in _TOKEN.finditer(formula):
        if m.group(1) and m.group(1) not in seen:
            seen.append(m.group(1))
    return tuple(seen)


def reduce_counts(counts: Mapping[str, Fraction]) -> Dict[str, int]:
    """Divide counts by their common factor so that they become coprime integers"""
    fracs = {el: Fraction(n).limit_denominator(1000) for el, n in counts.items() if n > 0}
    if not fracs:
        raise DataError("Empty composition")
    lcm_den = reduce(lambda a, b: a * b // gcd(a, b), (f.denominator for f in fracs.values()), 1)
    ints = {el: int(f * lcm_den) for el, f in fracs.items()}
    common = reduce(gcd, ints.values())
    return {el: n // common for el, n in ints.items()}


def composition_of_labels(labels: Iterable[int]) -> Dict[str, int]:
    """Element counts of a list of atom labels"""
    table = get_element_table()
    counts: Dict[str, int] = {}
    for label in labels:
        symbol = table.symbol(int(label))
        counts[symbol] = counts.get(symbol, 0) + 1
    return counts


def reduced_composition(formula: str) -> Dict[str, int]:
    return reduce_counts(parse_formula(formula))


def formula_string(counts: Mapping[str, int]) -> str:
    """Formula text in order of increasing atomic number, ones omitted"""
    table = get_element_table()
    parts = []
    for el in sorted(counts, key=lambda s: table.by_symbol(s).Z):
        n = counts[el]
        parts.append(el if n == 1 else f"{el}{n}")
    return "".join(parts)


def reduced_formula_of_labels(labels: Iterable[int]) -> str:
    return formula_string(reduce_counts(composition_of_labels(labels)))


def same_reduced_composition(a: Mapping[str, int], b: Mapping[str, int]) -> bool:
    return reduce_counts(a) == reduce_counts(b)


def atom_count(formula: str) -> int:
    """Number of atoms in the formula as written (``La(NiGe)2`` -> 5)"""
    total = sum(parse_formula(formula).values())
    if total.denominator != 1:
        raise DataError(f"Formula {formula!r} has a non-integer atom count")
    return int(total)

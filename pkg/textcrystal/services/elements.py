"""
Bundled periodic-table data: symbols, masses and common oxidation states
"""

import json
import logging
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Dict, List, Tuple

from textcrystal.core.exceptions import DataError

logger = logging.getLogger(__name__)

NUM_TYPE_CLASSES = 100  # label i <-> atomic number i + 1


@dataclass(frozen=True)
class Element:
    Z: int
    symbol: str
    mass: float
    oxidation_states: Tuple[int, ...]

    @property
    def label(self) -> int:
        return self.Z - 1


class ElementTable:
    """Lookup by label, atomic number or symbol"""

    def __init__(self, elements: List[Element]):
        self._by_label = {e.label: e for e in elements}
        self._by_symbol = {e.symbol: e for e in elements}

    def __len__(self) -> int:
        return len(self._by_label)

    def by_label(self, label: int) -> Element:
        try:
            return self._by_label[int(label)]
        except KeyError:
            raise DataError(f"Atom label {label} outside 0..{NUM_TYPE_CLASSES - 1}")

    def by_symbol(self, symbol: str) -> Element:
        try:
            return self._by_symbol[symbol]
        except KeyError:
            raise DataError(f"Unknown element symbol: {symbol!r}")

    def has_symbol(self, symbol: str) -> bool:
        return symbol in self._by_symbol

    def symbol(self, label: int) -> str:
        return self.by_label(label).symbol

    def label(self, symbol: str) -> int:
        return self.by_symbol(symbol).label

    def mass(self, label: int) -> float:
        return self.by_label(label).mass

    def oxidation_states(self, label: int) -> Tuple[int, ...]:
        return self.by_label(label).oxidation_states

    @property
    def symbols(self) -> Dict[str, int]:
        return {s: e.label for s, e in self._by_symbol.items()}


@lru_cache(maxsize=1)
def get_element_table() -> ElementTable:
    """Load the bundled element table (cached)"""
    raw = resources.files("textcrystal.data").joinpath("elements.json").read_text(encoding="utf-8")
    payload = json.loads(raw)
    elements = [
        Element(
            Z=int(row["Z"]),
            symbol=row["symbol"],
            mass=float(row["mass"]),
            oxidation_states=tuple(int(s) for s in row["oxidation_states"]),
        )
        for row in payload["elements"]
    ]
    logger.debug(f"Loaded {len(elements)} elements from bundled table")
    return ElementTable(elements)

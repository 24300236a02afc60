"""The 38 WM-38k pattern classes and their base-defect label masks.

A label mask is an 8-bit integer; bit ``i`` is set when base defect
``BASE_DEFECTS[i]`` is present.  The order is fixed forever because it is
baked into the dataset file format.
"""

from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Tuple

from .errors import ContractError

BASE_DEFECTS: Tuple[str, ...] = ("C", "D", "EL", "ER", "L", "NF", "R", "S")
BASE_DEFECT_NAMES: Dict[str, str] = {
    "C": "Center",
    "D": "Donut",
    "EL": "Edge-Loc",
    "ER": "Edge-Ring",
    "L": "Loc",
    "NF": "Near-Full",
    "R": "Random",
    "S": "Scratch",
}
NUM_BASE = len(BASE_DEFECTS)
BIT = {abbr: 1 << i for i, abbr in enumerate(BASE_DEFECTS)}


@dataclass(frozen=True)
class PatternClass:
    class_id: int           # 1..38
    mask: int
    display_name: str
    group: str              # single | 2-mixed | 3-mixed | 4-mixed
    amount: int             # WM-38k record count

    @property
    def label(self) -> str:
        return f"C{self.class_id}"

    @property
    def defects(self) -> Tuple[str, ...]:
        return mask_to_defects(self.mask)


def defects_to_mask(defects: Iterable[str]) -> int:
    m = 0
    for d in defects:
        if d not in BIT:
            raise ContractError(f"unknown base defect {d!r}; expected one of {BASE_DEFECTS}")
        m |= BIT[d]
    return m


def mask_to_defects(mask: int) -> Tuple[str, ...]:
    return tuple(d for d in BASE_DEFECTS if mask & BIT[d])


def mask_to_vector(mask: int):
    return [(mask >> i) & 1 for i in range(NUM_BASE)]


# (display name, defects, amount) in row order of the WM-38k description.
_TABLE = [
    ("Normal", (), 1000),
    ("Center", ("C",), 1000),
    ("Donut", ("D",), 1000),
    ("Edge_Loc", ("EL",), 1000),
    ("Edge_Ring", ("ER",), 1000),
    ("Loc", ("L",), 1000),
    ("Near_Full", ("NF",), 149),
    ("Scratch", ("S",), 1000),
    ("Random", ("R",), 866),
    ("C+EL", ("C", "EL"), 1000),
    ("C+ER", ("C", "ER"), 1000),
    ("C+L", ("C", "L"), 1000),
    ("C+S", ("C", "S"), 1000),
    ("D+EL", ("D", "EL"), 1000),
    ("D+ER", ("D", "ER"), 1000),
    ("D+L", ("D", "L"), 1000),
    ("D+S", ("D", "S"), 1000),
    ("EL+L", ("EL", "L"), 1000),
    ("EL+S", ("EL", "S"), 1000),
    ("ER+L", ("ER", "L"), 1000),
    ("ER+S", ("ER", "S"), 1000),
    ("L+S", ("L", "S"), 1000),
    ("C+EL+L", ("C", "EL", "L"), 1000),
    ("C+EL+S", ("C", "EL", "S"), 2000),
    ("C+ER+L", ("C", "ER", "L"), 1000),
    ("C+ER+S", ("C", "ER", "S"), 1000),
    ("C+L+S", ("C", "L", "S"), 1000),
    ("D+EL+L", ("D", "EL", "L"), 1000),
    ("D+EL+S", ("D", "EL", "S"), 1000),
    ("D+ER+L", ("D", "ER", "L"), 1000),
    ("D+ER+S", ("D", "ER", "S"), 1000),
    ("D+L+S", ("D", "L", "S"), 1000),
    ("EL+L+S", ("EL", "L", "S"), 1000),
    ("ER+L+S", ("ER", "L", "S"), 1000),
    ("C+L+EL+S", ("C", "L", "EL", "S"), 1000),
    ("C+L+ER+S", ("C", "L", "ER", "S"), 1000),
    ("D+L+EL+S", ("D", "L", "EL", "S"), 1000),
    ("D+L+ER+S", ("D", "L", "ER", "S"), 1000),
]

_GROUPS = {0: "single", 1: "single", 2: "2-mixed", 3: "3-mixed", 4: "4-mixed"}

PATTERN_CLASSES: Tuple[PatternClass, ...] = tuple(
    PatternClass(i + 1, defects_to_mask(d), name, _GROUPS[len(d)], amount)
    for i, (name, d, amount) in enumerate(_TABLE)
)
NUM_CLASSES = len(PATTERN_CLASSES)

_BY_MASK: Dict[int, PatternClass] = {pc.mask: pc for pc in PATTERN_CLASSES}
# mask -> 0-based class index, -1 for combinations outside the table
MASK_TO_INDEX = [(_BY_MASK[m].class_id - 1) if m in _BY_MASK else -1 for m in range(256)]
CLASS_MASKS = [pc.mask for pc in PATTERN_CLASSES]

SINGLE_DEFECT_IDS = tuple(pc.class_id for pc in PATTERN_CLASSES if pc.group == "single")
TWO_MIXED_IDS = tuple(pc.class_id for pc in PATTERN_CLASSES if pc.group == "2-mixed")


def class_of(mask: int) -> Optional[PatternClass]:
    """Class for a label mask, or ``None`` for an invalid combination."""
    return _BY_MASK.get(int(mask))


def get_class(class_id: int) -> PatternClass:
    if not 1 <= int(class_id) <= NUM_CLASSES:
        raise ContractError(f"class id must be in 1..{NUM_CLASSES}, got {class_id}")
    return PATTERN_CLASSES[int(class_id) - 1]


def describe(mask: int) -> str:
    pc = class_of(mask)
    return f"{pc.label} {pc.display_name}" if pc else "invalid combination"


def table3_counts() -> Dict[int, int]:
    return {pc.class_id: pc.amount for pc in PATTERN_CLASSES}

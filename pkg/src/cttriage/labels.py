"""Class taxonomy shared by every stage of the triage pipeline.

The three-way class order is fixed as (Normal, CAP, COVID19) so that
probability vectors, confusion matrices, and reports are comparable
across runs. Argmax ties are broken by infection priority: COVID19
beats CAP beats Normal, which keeps the screening side of the tool
conservative.
"""

from __future__ import annotations

CLASS_NAMES: tuple[str, str, str] = ("Normal", "CAP", "COVID19")

NORMAL, CAP, COVID19 = CLASS_NAMES
UNKNOWN = "Unknown"

# Indices scanned first-to-last when scores tie.
TIE_PRIORITY: tuple[int, int, int] = (2, 1, 0)

INFECTIOUS = "infectious"
NON_INFECTIOUS = "non_infectious"

_CANONICAL = {name.lower(): name for name in CLASS_NAMES}
_CANONICAL[UNKNOWN.lower()] = UNKNOWN


def class_index(name: str) -> int:
    """Index of a class name in the fixed (Normal, CAP, COVID19) order."""
    try:
        return CLASS_NAMES.index(name)
    except ValueError:
        raise ValueError(f"unknown class name: {name!r}") from None


def parse_diagnosis(token: str) -> str:
    """Normalize a case-insensitive diagnosis token to its canonical spelling.

    Accepts exactly Normal, CAP, COVID19, and Unknown (any casing).
    """
    canonical = _CANONICAL.get(token.strip().lower())
    if canonical is None:
        raise ValueError(f"unknown diagnosis token: {token!r}")
    return canonical


def argmax_class(scores) -> str:
    """Class name with the highest score; ties resolve COVID19 > CAP > Normal."""
    best = TIE_PRIORITY[0]
    for idx in TIE_PRIORITY[1:]:
        if scores[idx] > scores[best]:
            best = idx
    return CLASS_NAMES[best]

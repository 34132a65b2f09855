"""Supremum measurement record shared by the mass scans."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

__all__ = ["MassReport"]


@dataclass
class MassReport:
    """A measured supremum: log-domain value, argmax point and provenance.

    ``value_log`` is the natural log of the mass at ``argmax``; ``grid`` and
    ``truncation`` record how the scan was run.
    """

    functional: str
    k: int
    value_log: float
    argmax: dict
    grid: dict = field(default_factory=dict)
    truncation: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def value(self) -> float:
        return math.exp(self.value_log)

    def to_dict(self) -> dict:
        d = asdict(self)
        if not d["extra"]:
            d.pop("extra")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    CSV_HEADER = ("functional", "k", "value_log")

    def csv_row(self) -> tuple:
        return (self.functional, self.k, repr(float(self.value_log)))

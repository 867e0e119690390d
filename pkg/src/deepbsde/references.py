"""Reference values that solver estimates are scored against."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass


class Provenance(str, enum.Enum):
    CLOSED_FORM_MC = "closed_form_mc"
    EXTERNAL_PUBLISHED = "external_published"
    EXACT_FUNCTION = "exact_function"


@dataclass(frozen=True)
class ReferenceValue:
    value: float
    provenance: Provenance
    citation: str = ""
    std_error: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"reference value must be finite, got {self.value}")
        object.__setattr__(self, "provenance", Provenance(self.provenance))

    def relative_error(self, estimate: float) -> float:
        return abs(estimate - self.value) / abs(self.value)

    def to_dict(self) -> dict:
        return {"value": self.value, "provenance": self.provenance.value,
                "citation": self.citation, "std_error": self.std_error}

"""Subject-line scoring reference algorithm.

score = clamp(0.2*hasNumber + 0.2*hasExclamation + 0.3*hasDiscountToken
              + 0.3*min(length, 60)/60, 0, 1)

Computed over integer two-hundredths (0.2 = 40/200, 0.3/60 = 1/200) so
every score is an exact multiple of 0.005 and identical across worker
implementation languages. Length counts Unicode code points; digits are
ASCII digits; discount tokens match case-insensitively as substrings.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

DISCOUNT_TOKENS = ("%", "off", "free", "discount")


@dataclass(frozen=True)
class SubjectLineScore:
    score: float
    length: int
    has_number: bool
    has_exclamation: bool
    has_discount_token: bool

    def to_doc(self) -> dict[str, Any]:
        return {
            "score": self.score,
            "features": {
                "length": self.length,
                "hasNumber": int(self.has_number),
                "hasExclamation": int(self.has_exclamation),
                "hasDiscountToken": int(self.has_discount_token),
            },
        }


def score_subject_line(subject_line: str) -> SubjectLineScore:
    length = len(subject_line)
    has_number = any("0" <= c <= "9" for c in subject_line)
    has_exclamation = "!" in subject_line
    lowered = subject_line.lower()
    has_discount = any(token in lowered for token in DISCOUNT_TOKENS)
    two_hundredths = (
        40 * has_number + 40 * has_exclamation + 60 * has_discount + min(length, 60)
    )
    score = min(max(two_hundredths, 0), 200) / 200
    return SubjectLineScore(score, length, has_number, has_exclamation, has_discount)

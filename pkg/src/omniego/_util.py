"""Small helpers shared across modules: hashing, exact-rational rendering."""

from __future__ import annotations

import hashlib
import json
import re
from decimal import Decimal
from fractions import Fraction
from typing import Any


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8", "surrogatepass")).hexdigest()


def digest_of(obj: Any) -> str:
    return sha256_text(canonical_json(obj))


def round_half_up(value: Fraction, places: int = 2) -> Decimal:
    """Round an exact rational to ``places`` decimals, halves away from zero."""
    scaled = abs(value) * 10**places
    whole, rem = divmod(scaled.numerator, scaled.denominator)
    if 2 * rem >= scaled.denominator:
        whole += 1
    sign = -1 if value < 0 else 1
    return Decimal(sign * whole).scaleb(-places).quantize(Decimal(1).scaleb(-places))


def fraction_to_str(value: Fraction) -> str:
    if value.denominator == 1:
        return str(value.numerator)
    return f"{value.numerator}/{value.denominator}"


def parse_fraction(value: Any) -> Fraction:
    """Accept int, float, decimal string or ``"n/d"`` and return an exact Fraction."""
    if isinstance(value, bool):
        raise ValueError("boolean is not a number")
    if isinstance(value, Fraction):
        return value
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        # repr round-trips, so 29.97 stays 2997/100 rather than its binary expansion
        return Fraction(repr(value))
    if isinstance(value, str):
        text = value.strip()
        if len(text) > 64 or re.search(r"[eE][+-]?\d{4,}", text):
            raise ValueError(f"number literal out of range: {value!r}")
        return Fraction(text)
    raise ValueError(f"not a number: {value!r}")

"""Time representation.

All times are signed 64-bit integer nanoseconds from recording start.
Decimal-second text (as found in TextGrid files) is converted exactly via
:mod:`decimal` with round-half-even, so boundary equality is never subject
to float drift.
"""

from __future__ import annotations

from decimal import Decimal, InvalidOperation, ROUND_HALF_EVEN

NS_PER_SECOND = 1_000_000_000

_ONE_NS = Decimal(1)


def seconds_to_ns(value: str | int | float | Decimal) -> int:
    """Convert decimal seconds to integer nanoseconds (round-half-even).

    Accepts the textual form directly so "140.48" maps to exactly
    140_480_000_000 regardless of float representability.
    """
    if isinstance(value, float):
        value = repr(value)
    try:
        d = Decimal(value) * NS_PER_SECOND
    except InvalidOperation as exc:
        raise ValueError(f"not a decimal number: {value!r}") from exc
    return int(d.to_integral_value(rounding=ROUND_HALF_EVEN))


def ns_to_seconds_text(ns: int) -> str:
    """Format nanoseconds as decimal seconds, up to 9 fractional digits.

    Trailing zeros are trimmed; ``seconds_to_ns(ns_to_seconds_text(t)) == t``
    for every integer t.
    """
    sign = "-" if ns < 0 else ""
    whole, frac = divmod(abs(ns), NS_PER_SECOND)
    if frac == 0:
        return f"{sign}{whole}"
    digits = f"{frac:09d}".rstrip("0")
    return f"{sign}{whole}.{digits}"


def ns_to_seconds(ns: int) -> float:
    return ns / NS_PER_SECOND

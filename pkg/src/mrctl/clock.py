"""Clock-offset estimation from a four-timestamp request/response exchange.

t0/t3 are the client's send/receive clocks, t1/t2 the server's receive/send
clocks.  With symmetric network delay the offset estimate is exact; in
general its error is bounded by half the round-trip delay.
"""

from __future__ import annotations

from dataclasses import dataclass


class NegativeDelay(ValueError):
    """Timestamps violate causality; the sample must be rejected."""


@dataclass(frozen=True)
class ClockEstimate:
    offset_ns: float
    delay_ns: float


def estimate_clock_offset(t0: int, t1: int, t2: int, t3: int) -> ClockEstimate:
    """offset = ((t1-t0) + (t2-t3)) / 2, delay = (t3-t0) - (t2-t1)."""
    if t3 < t0:
        raise NegativeDelay(f"response before request: t0={t0}, t3={t3}")
    if t2 < t1:
        raise NegativeDelay(f"server sent before receiving: t1={t1}, t2={t2}")
    delay = (t3 - t0) - (t2 - t1)
    if delay < 0:
        raise NegativeDelay(f"negative path delay {delay} ns")
    offset = ((t1 - t0) + (t2 - t3)) / 2
    return ClockEstimate(offset_ns=offset, delay_ns=float(delay))

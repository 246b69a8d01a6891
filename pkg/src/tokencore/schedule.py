"""Per-layer retained-sequence-length schedules.

A schedule fixes how many tokens each encoder layer keeps.  The main
generator decays the length exponentially from the input length N down
to N*p at layer ``prune_upto`` and holds it constant afterwards:

    length(j) = round(N * p ** (min(j, prune_upto) / prune_upto))

with round() either floor or ceil.  Floor is the default because it is
the mode that reproduces the reference 30-configuration table used by
the sweep harness; ceil is kept as an option.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidArgumentError

FLOOR = "floor"
CEIL = "ceil"
ROUNDINGS = (FLOOR, CEIL)

# (prune_upto, p) pairs of the reference configuration grid, in table
# order.  One pair appears twice in the source table and is kept as-is.
REFERENCE_GRID: tuple[tuple[int, float], ...] = (
    (2, 0.15), (3, 0.15), (4, 0.15),
    (3, 0.10), (4, 0.10),
    (3, 0.20), (4, 0.20),
    (3, 0.17), (3, 0.18), (3, 0.19), (3, 0.22), (3, 0.25),
    (1, 0.25), (2, 0.25), (3, 0.25), (5, 0.25), (9, 0.25), (11, 0.25),
    (1, 0.50), (2, 0.50), (3, 0.50), (5, 0.50), (9, 0.50), (11, 0.50),
    (1, 0.75), (2, 0.75), (3, 0.75), (7, 0.75), (9, 0.75), (11, 0.75),
)


@dataclass(frozen=True)
class LengthSchedule:
    """Retained lengths per layer, index 0 being the input layer.

    ``lengths`` has layers+1 entries.  For generated schedules
    lengths[0] == input_len; the input-truncation constructor is the one
    exception (it prunes at the input layer itself).
    """

    input_len: int
    layers: int
    lengths: tuple[int, ...]
    prune_upto: Optional[int] = None
    ratio: Optional[float] = None
    rounding: str = FLOOR

    def __post_init__(self):
        if self.input_len < 1:
            raise InvalidArgumentError("input length must be >= 1")
        if self.layers < 1:
            raise InvalidArgumentError("layer count must be >= 1")
        if len(self.lengths) != self.layers + 1:
            raise InvalidArgumentError(
                f"need {self.layers + 1} lengths (input layer included), "
                f"got {len(self.lengths)}"
            )
        if self.lengths[0] > self.input_len:
            raise InvalidArgumentError("length at the input layer exceeds the input length")
        if self.lengths[-1] < 1:
            raise InvalidArgumentError("final length must keep at least the CLS token")
        for a, b in zip(self.lengths, self.lengths[1:]):
            if b > a:
                raise InvalidArgumentError(f"lengths must be non-increasing, got {self.lengths}")
        if self.prune_upto is not None:
            tail = self.lengths[self.prune_upto:]
            if any(t != tail[0] for t in tail):
                raise InvalidArgumentError(
                    f"lengths must be constant from layer {self.prune_upto} on"
                )

    @property
    def is_full_retention(self) -> bool:
        return all(l == self.input_len for l in self.lengths)

    def length_at(self, j: int) -> int:
        return self.lengths[j]

    def schedule_id(self) -> str:
        if self.prune_upto is not None and self.ratio is not None:
            return f"pu{self.prune_upto}_p{self.ratio:g}"
        return "custom_" + "-".join(str(l) for l in self.lengths)

    def to_csv_row(self) -> list[str]:
        """Row layout: prune_upto, p, then the per-layer lengths 1..L."""
        head = [
            str(self.prune_upto) if self.prune_upto is not None else "NA",
            f"{self.ratio:g}" if self.ratio is not None else "NA",
        ]
        return head + [str(l) for l in self.lengths[1:]]


def generate_schedule(
    input_len: int,
    layers: int,
    ratio: float,
    prune_upto: int,
    rounding: str = FLOOR,
) -> LengthSchedule:
    """Exponentially decaying schedule from (N, p, prune_upto).

    Lengths are floored at 1 so the CLS token always survives even for
    tiny inputs where the raw formula would round to zero.
    """
    if not 0.0 < ratio <= 1.0:
        raise InvalidArgumentError(f"ratio must be in (0, 1], got {ratio}")
    if not 1 <= prune_upto <= layers:
        raise InvalidArgumentError(
            f"prune_upto must be in [1, {layers}], got {prune_upto}"
        )
    if input_len < 1:
        raise InvalidArgumentError("input length must be >= 1")
    if rounding not in ROUNDINGS:
        raise InvalidArgumentError(f"rounding must be one of {ROUNDINGS}")
    op = math.floor if rounding == FLOOR else math.ceil
    lengths = []
    for j in range(layers + 1):
        raw = input_len * ratio ** (min(j, prune_upto) / prune_upto)
        lengths.append(max(1, int(op(raw))))
    return LengthSchedule(
        input_len=input_len,
        layers=layers,
        lengths=tuple(lengths),
        prune_upto=prune_upto,
        ratio=ratio,
        rounding=rounding,
    )


def full_retention_schedule(input_len: int, layers: int) -> LengthSchedule:
    return generate_schedule(input_len, layers, ratio=1.0, prune_upto=1)


def input_truncation_schedule(input_len: int, layers: int, keep: int) -> LengthSchedule:
    """Constant schedule [keep, ..., keep]: a single truncation at the
    input layer, no further reduction inside the stack."""
    if not 1 <= keep <= input_len:
        raise InvalidArgumentError(f"keep={keep} out of range for input length {input_len}")
    return LengthSchedule(
        input_len=input_len,
        layers=layers,
        lengths=tuple([keep] * (layers + 1)),
        prune_upto=None,
        ratio=None,
    )


def generate_reference_suite(input_len: int = 128, layers: int = 12,
                             rounding: str = FLOOR) -> list[LengthSchedule]:
    """The standard 30-configuration grid, in table order."""
    return [
        generate_schedule(input_len, layers, ratio=p, prune_upto=pu, rounding=rounding)
        for pu, p in REFERENCE_GRID
    ]


def generate_random_schedule(input_len: int, layers: int, seed) -> LengthSchedule:
    """Seeded random monotone non-increasing schedule (baseline for
    comparing against the decay generator)."""
    rng = np.random.default_rng(seed)
    draws = rng.integers(1, input_len + 1, size=layers)
    body = sorted((int(v) for v in draws), reverse=True)
    return LengthSchedule(
        input_len=input_len,
        layers=layers,
        lengths=tuple([input_len] + body),
        prune_upto=None,
        ratio=None,
    )


def pooling_schedule(input_len: int, layers: int, window: int,
                     pool_layers: tuple[int, ...]) -> LengthSchedule:
    """Schedule realized by strided mean pooling with the given window
    applied at the listed layers (1-based)."""
    from .selectors import pooled_length  # local import avoids a cycle

    if any(not 1 <= j <= layers for j in pool_layers):
        raise InvalidArgumentError(f"pool layers out of range: {pool_layers}")
    lengths = [input_len]
    current = input_len
    for j in range(1, layers + 1):
        if j in pool_layers and current > 1:
            current = pooled_length(current, window)
        lengths.append(current)
    return LengthSchedule(
        input_len=input_len,
        layers=layers,
        lengths=tuple(lengths),
        prune_upto=None,
        ratio=None,
    )


def schedules_to_csv(schedules: list[LengthSchedule]) -> str:
    layers = schedules[0].layers
    header = ["prune_upto", "p"] + [f"l{j}" for j in range(1, layers + 1)]
    lines = [",".join(header)]
    for s in schedules:
        if s.layers != layers:
            raise InvalidArgumentError("all schedules in a CSV must share the layer count")
        lines.append(",".join(s.to_csv_row()))
    return "\n".join(lines) + "\n"


def schedule_from_csv_row(row: list[str], input_len: int) -> LengthSchedule:
    """Inverse of to_csv_row; needs the input length, which the row
    layout does not carry.

    Rows without (prune_upto, p) are read back as input truncation when
    the lengths are constant and as an input-length-preserving custom
    schedule otherwise.
    """
    if len(row) < 3:
        raise InvalidArgumentError(f"schedule row too short: {row}")
    prune_upto = None if row[0] == "NA" else int(row[0])
    ratio = None if row[1] == "NA" else float(row[1])
    body = tuple(int(v) for v in row[2:])
    if prune_upto is None and all(b == body[0] for b in body):
        lengths = (body[0],) + body
    else:
        lengths = (input_len,) + body
    return LengthSchedule(
        input_len=input_len,
        layers=len(body),
        lengths=lengths,
        prune_upto=prune_upto,
        ratio=ratio,
    )

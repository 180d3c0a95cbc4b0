"""Text key-value schedule files.

One ``key = value`` per line; ``#`` starts a comment.  Layer tables use one
line per layer with whitespace-separated per-channel values::

    layers = 2
    channels = 3
    delta.1 = 9 9 9
    delta.2 = 3 3 3
    delta_inv.1 = 9 9 9
    delta_inv.2 = 3 3 3
    gamma = 1e-06 1e-06

Keys other than the tables (``T``, ``lambda_base``, ``mode``, ``seed`` ...) are
kept as strings in the returned extras.  Floats are written with ``repr`` so a
file round-trips exactly.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError
from .latent import StepSchedule, validate_schedule

__all__ = ["dumps_schedule", "loads_schedule", "write_schedule", "read_schedule"]


def _row(values):
    return " ".join(repr(float(v)) for v in values)


def dumps_schedule(schedule, **extras):
    lines = [
        "# hqstream step schedule",
        f"layers = {schedule.n_layers}",
        f"channels = {schedule.n_channels}",
    ]
    for key, value in extras.items():
        if value is not None:
            lines.append(f"{key} = {value}")
    for l in range(schedule.n_layers):
        lines.append(f"delta.{l + 1} = {_row(schedule.delta[l])}")
    for l in range(schedule.n_layers):
        lines.append(f"delta_inv.{l + 1} = {_row(schedule.delta_inv[l])}")
    lines.append(f"gamma = {_row(schedule.gamma)}")
    return "\n".join(lines) + "\n"


def _floats(text, lineno):
    try:
        return [float(x) for x in text.split()]
    except ValueError:
        raise FormatError(f"line {lineno}: expected numbers, got {text!r}") from None


def loads_schedule(text, validate=True):
    """Parse a schedule file; returns ``(schedule, extras)``."""
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in entries:
            raise FormatError(f"line {lineno}: duplicate key {key!r}")
        entries[key] = (value, lineno)
    try:
        L = int(entries.pop("layers")[0])
        C = int(entries.pop("channels")[0])
    except KeyError as exc:
        raise FormatError(f"missing key {exc.args[0]!r}") from None
    except ValueError:
        raise FormatError("layers and channels must be integers") from None
    if L < 1 or C < 1:
        raise FormatError("layers and channels must be positive")

    def table(name):
        rows = []
        for l in range(1, L + 1):
            key = f"{name}.{l}"
            if key not in entries:
                raise FormatError(f"missing key {key!r}")
            value, lineno = entries.pop(key)
            row = _floats(value, lineno)
            if len(row) != C:
                raise FormatError(f"line {lineno}: {key} has {len(row)} values, expected {C}")
            rows.append(row)
        return np.array(rows)

    delta = table("delta")
    has_inv = "delta_inv.1" in entries
    delta_inv = table("delta_inv") if has_inv else delta
    gamma = None
    if "gamma" in entries:
        value, lineno = entries.pop("gamma")
        gamma = _floats(value, lineno)
        if len(gamma) != L:
            raise FormatError(f"line {lineno}: gamma has {len(gamma)} values, expected {L}")
    stray = [k for k in entries if k.split(".")[0] in ("delta", "delta_inv")]
    if stray:
        raise FormatError(f"unexpected table key {stray[0]!r}")
    schedule = StepSchedule(delta, delta_inv, gamma)
    if validate:
        validate_schedule(schedule)
    return schedule, {k: v for k, (v, _) in entries.items()}


def write_schedule(path, schedule, **extras):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_schedule(schedule, **extras))


def read_schedule(path, validate=True):
    with open(path, encoding="utf-8") as fh:
        return loads_schedule(fh.read(), validate=validate)

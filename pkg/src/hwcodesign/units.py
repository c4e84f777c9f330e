"""Human-readable quantities with decimal SI prefixes.

``"10TOPS"`` is 1e13 FLOP/s, ``"50GB/s"`` is 5e10 B/s, ``"4GB"`` is 4e9 B and
``"100ms"`` is 0.1 s. Binary prefixes (KiB, MiB, GiB, TiB) are rejected so that a
gigabyte always means 1e9 bytes. Bare numbers are taken in base units.
"""

from __future__ import annotations

import math
import re

from .errors import ParseError

KINDS = ("flops", "bandwidth", "bytes", "time")

_PREFIX = {"": 1.0, "k": 1e3, "K": 1e3, "M": 1e6, "G": 1e9, "T": 1e12, "P": 1e15}

_UNITS = {
    "flops": ("FLOPS", "FLOP/s", "FLOP/S", "OPS", "OP/s", "OP/S"),
    "bandwidth": ("B/s", "B/S", "Bps"),
    "bytes": ("B",),
}

_TIME = {"s": 1.0, "ms": 1e-3, "us": 1e-6, "µs": 1e-6, "ns": 1e-9}

_NUMBER = r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?"
_PATTERN = re.compile(rf"^\s*({_NUMBER})\s*([A-Za-zµ/]*)\s*$")
_BINARY = re.compile(r"^[KMGTP]i(B|b)(/s)?$")


def parse_quantity(text: str | float | int, kind: str) -> float:
    """Convert ``text`` to base units (FLOP/s, B/s, B or s)."""
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    if isinstance(text, (int, float)) and not isinstance(text, bool):
        value = float(text)
        return _check(value, str(text))
    match = _PATTERN.match(str(text))
    if not match:
        raise ParseError(f"cannot read {text!r} as a {kind} quantity", "<argument>")
    number, unit = float(match.group(1)), match.group(2)
    if _BINARY.match(unit):
        decimal = unit.replace("i", "")
        raise ParseError(
            f"binary unit {unit!r} is not accepted; use decimal {decimal!r} "
            f"(1 {decimal.split('/')[0]} = 1e{_exp(unit[0])} bytes)", "<argument>")
    if unit == "":
        return _check(number, text)
    scale = _scale(unit, kind)
    if scale is None:
        raise ParseError(f"unknown unit {unit!r} for a {kind} quantity ({_hint(kind)})", "<argument>")
    return _check(number * scale, text)


def _scale(unit: str, kind: str) -> float | None:
    if kind == "time":
        return _TIME.get(unit)
    for base in _UNITS[kind]:
        if unit.endswith(base):
            prefix = unit[: -len(base)]
            if prefix in _PREFIX:
                return _PREFIX[prefix]
    return None


def _exp(prefix: str) -> int:
    return {"K": 3, "M": 6, "G": 9, "T": 12, "P": 15}[prefix]


def _hint(kind: str) -> str:
    return {
        "flops": "e.g. 10TOPS, 275TFLOPS, 1e13",
        "bandwidth": "e.g. 50GB/s, 204.8GB/s, 5e10",
        "bytes": "e.g. 4GB, 512MB, 4e9",
        "time": "e.g. 100ms, 0.1s, 0.1",
    }[kind]


def _check(value: float, text) -> float:
    if not math.isfinite(value) or value <= 0:
        raise ParseError(f"quantity must be finite and > 0, got {text!r}", "<argument>")
    return value

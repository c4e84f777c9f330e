"""Decimal SI quantity parsing."""

from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from hwcodesign.errors import ParseError
from hwcodesign.units import parse_quantity


@pytest.mark.parametrize("text, kind, value", [
    ("10TOPS", "flops", 1e13),
    ("275TFLOPS", "flops", 2.75e14),
    ("1.5 PFLOP/s", "flops", 1.5e15),
    ("50GB/s", "bandwidth", 5e10),
    ("204.8GB/s", "bandwidth", 2.048e11),
    ("800MBps", "bandwidth", 8e8),
    ("4GB", "bytes", 4e9),
    ("512MB", "bytes", 5.12e8),
    ("100ms", "time", 0.1),
    ("0.1s", "time", 0.1),
    ("250us", "time", 2.5e-4),
    ("250µs", "time", 2.5e-4),
    ("5ns", "time", 5e-9),
    ("1e13", "flops", 1e13),
    (4e9, "bytes", 4e9),
])
def test_known_quantities(text, kind, value):
    assert parse_quantity(text, kind) == pytest.approx(value, rel=1e-15)


@pytest.mark.parametrize("text", ["4GiB", "50GiB/s", "512MiB", "1KiB"])
def test_binary_units_rejected_with_decimal_hint(text):
    with pytest.raises(ParseError) as info:
        parse_quantity(text, "bandwidth" if "/s" in text else "bytes")
    unit = text.lstrip("0123456789.")
    assert f"'{unit.replace('i', '')}'" in str(info.value)


@pytest.mark.parametrize("text, kind", [
    ("fast", "flops"), ("10XB", "bytes"), ("50GB", "bandwidth"), ("100 hours", "time"),
    ("0", "bytes"), ("-1GB", "bytes"), ("nan", "time"), (float("inf"), "time"),
])
def test_bad_quantities(text, kind):
    with pytest.raises(ParseError):
        parse_quantity(text, kind)


def test_unknown_kind():
    with pytest.raises(ValueError):
        parse_quantity("1", "volts")


@given(st.floats(1e-3, 1e6), st.sampled_from([("k", 1e3), ("M", 1e6), ("G", 1e9), ("T", 1e12)]))
def test_prefix_scaling(number, prefix):
    symbol, scale = prefix
    assert parse_quantity(f"{number!r}{symbol}B", "bytes") == pytest.approx(number * scale, rel=1e-12)

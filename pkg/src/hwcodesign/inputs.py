"""Loading JSON inputs from files or bundled presets."""

from __future__ import annotations

import json
import logging
from importlib import resources
from pathlib import Path

from .arch import ArchitectureConfig, HardwareSpec, WorkloadSpec
from .errors import ParseError, ValidationError
from .loss import ScalingLawCoefficients
from .space import SearchSpace

log = logging.getLogger(__name__)

PRESET_FILES = {
    "coeffs": {"paper-appendix-c": "paper-appendix-c.coeffs.json"},
    "hardware": {"jetson-orin-like": "jetson-orin-like.hardware.json"},
    "workload": {"vla-workload": "vla-workload.json"},
}

# Presets whose numbers are stand-ins rather than measurements.
PLACEHOLDER_PRESETS = frozenset({"jetson-orin-like"})

_BUILDERS = {
    "coeffs": ScalingLawCoefficients.from_dict,
    "hardware": HardwareSpec.from_dict,
    "workload": WorkloadSpec.from_dict,
    "arch": ArchitectureConfig.from_dict,
    "space": SearchSpace.from_dict,
}


def parse_json(text: str, source: str = "<json>"):
    """``json.loads`` with a ``ParseError`` carrying line and column on failure."""
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, source, exc.lineno, exc.colno) from None


def read_text(path: str | Path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ValidationError(f"file not found: {path}") from None
    except UnicodeDecodeError as exc:
        raise ParseError(f"not UTF-8 text ({exc.reason})", str(path)) from None


def preset_names(kind: str) -> list[str]:
    return sorted(PRESET_FILES.get(kind, {}))


def load_preset_dict(kind: str, name: str) -> dict:
    try:
        filename = PRESET_FILES[kind][name]
    except KeyError:
        raise ValidationError(
            f"no {kind} preset named {name!r}; available: {', '.join(preset_names(kind)) or 'none'}"
        ) from None
    text = resources.files(__package__).joinpath("presets", filename).read_text(encoding="utf-8")
    if name in PLACEHOLDER_PRESETS:
        log.warning("preset %r holds placeholder numbers, not measurements; supply real values", name)
    return parse_json(text, f"preset:{name}")


def load_dict(kind: str, ref: str) -> dict:
    """JSON object from a file path or, when no such file exists, a preset name."""
    path = Path(ref)
    if path.is_file():
        data = parse_json(read_text(path), str(path))
    elif ref in PRESET_FILES.get(kind, {}):
        data = load_preset_dict(kind, ref)
    else:
        hint = f" or a preset ({', '.join(preset_names(kind))})" if preset_names(kind) else ""
        raise ValidationError(f"{kind} input {ref!r} is not a file{hint}")
    if not isinstance(data, dict):
        raise ValidationError(f"{kind} input {ref!r} must be a JSON object")
    return data


def load(kind: str, ref: str):
    """Typed object (coefficients, hardware, workload, arch or space) from a path or preset."""
    if kind not in _BUILDERS:
        raise ValueError(f"unknown input kind {kind!r}")
    try:
        return _BUILDERS[kind](load_dict(kind, ref))
    except TypeError as exc:
        raise ValidationError(f"{kind} input {ref!r}: {exc}") from None

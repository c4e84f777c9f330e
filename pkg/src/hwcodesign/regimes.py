"""Latency targets to normalised budgets, constraint slacks and regime labels."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .arch import ArchitectureConfig, HardwareSpec, WorkloadSpec, xi_f, xi_w_all, xi_w_dec
from .errors import ValidationError

LABELS = (
    "prefill_latency_only",
    "decode_latency_only",
    "memory_only",
    "prefill_plus_memory",
    "decode_plus_memory",
    "unconstrained",
    "infeasible",
)

METHODS = ("ratio_heuristic", "active_set")


@dataclass(frozen=True)
class Budgets:
    """Normalised budgets. ``None`` means the corresponding target was not given.

    ``F_bar_p`` is the prefill FLOP allowance per (token * layer * d^2) unit and
    ``M_bar_d`` the decode byte allowance per generated token.
    """

    F_bar_p: float | None = None
    M_bar_d: float | None = None
    M_budget: float | None = None

    def __post_init__(self) -> None:
        for name in ("F_bar_p", "M_bar_d", "M_budget"):
            value = getattr(self, name)
            if value is not None and (math.isnan(value) or value <= 0):
                raise ValidationError(f"{name} must be > 0, got {value!r}")
        if self.F_bar_p is None and self.M_bar_d is None and not self.has_memory:
            raise ValidationError("budgets need at least one latency target or a memory budget")

    @property
    def has_memory(self) -> bool:
        return self.M_budget is not None and math.isfinite(self.M_budget)

    @property
    def eta(self) -> float | None:
        if self.M_bar_d is None or not self.has_memory:
            return None
        return self.M_bar_d / self.M_budget

    @property
    def eta_p(self) -> float | None:
        if self.F_bar_p is None or not self.has_memory:
            return None
        return self.F_bar_p / self.M_budget

    def to_dict(self) -> dict:
        return {
            "F_bar_p": self.F_bar_p,
            "M_bar_d": self.M_bar_d,
            "M_budget": self.M_budget if self.has_memory else None,
            "eta": self.eta,
            "eta_p": self.eta_p,
        }


def normalize_budgets(
    hardware: HardwareSpec,
    workload: WorkloadSpec,
    T_pre: float | None = None,
    T_dec: float | None = None,
    T_total: float | None = None,
    split: float | None = None,
    reference: ArchitectureConfig | None = None,
) -> Budgets:
    """Turn latency targets (seconds) into normalised budgets.

    A ``T_total`` target is divided into prefill and decode shares. ``split`` is the
    prefill fraction; when omitted it follows the dominant-term latency ratio of
    ``reference`` (the default search-space centroid).
    """
    for name, value in (("T_pre", T_pre), ("T_dec", T_dec), ("T_total", T_total)):
        if value is not None and (not math.isfinite(value) or value <= 0):
            raise ValidationError(f"{name} must be finite and > 0, got {value!r}")
    if T_total is not None:
        if T_pre is not None or T_dec is not None:
            raise ValidationError("give either T_total or per-phase targets, not both")
        T_pre, T_dec = split_total_target(hardware, workload, T_total, split, reference)
        if workload.seq_in == 0:
            T_pre = None
        if workload.seq_out == 0:
            T_dec = None
    if T_pre is None and T_dec is None and not math.isfinite(hardware.memory_budget):
        raise ValidationError("no latency target and no finite memory budget")
    F_bar_p = M_bar_d = None
    if T_pre is not None:
        if workload.seq_in < 1:
            raise ValidationError("a prefill target needs seq_in >= 1")
        F_bar_p = T_pre * hardware.peak_flops / (workload.batch * workload.seq_in)
    if T_dec is not None:
        if workload.seq_out < 1:
            raise ValidationError("a decode target needs seq_out >= 1")
        M_bar_d = T_dec * hardware.bandwidth / workload.seq_out
    M_budget = hardware.memory_budget if math.isfinite(hardware.memory_budget) else None
    return Budgets(F_bar_p=F_bar_p, M_bar_d=M_bar_d, M_budget=M_budget)


def split_total_target(hardware, workload, T_total, split=None, reference=None) -> tuple[float, float]:
    if split is None:
        from .roofline import decode_latency, prefill_latency
        from .space import SearchSpace

        ref = reference or SearchSpace().centroid()
        pre = prefill_latency(ref, workload, hardware, "dominant")
        dec = decode_latency(ref, workload, hardware, "closed_form")
        split = pre / (pre + dec)
    if not 0.0 <= split <= 1.0:
        raise ValidationError(f"split must lie in [0, 1], got {split}")
    return T_total * split, T_total * (1.0 - split)


# Constraint functions g(theta) <= budget, shared with the solvers.

def prefill_load(arch: ArchitectureConfig) -> float:
    return arch.layers * xi_f(arch) * arch.width ** 2


def decode_load(arch: ArchitectureConfig, workload: WorkloadSpec, hardware: HardwareSpec) -> float:
    d = arch.width
    return (arch.layers * xi_w_dec(arch) * d * d * hardware.b_w
            + 2.0 * arch.layers * workload.s_bar * d * hardware.b_kv / arch.gqa)


def memory_load(arch: ArchitectureConfig, hardware: HardwareSpec) -> float:
    return arch.layers * xi_w_all(arch) * arch.width ** 2 * hardware.b_w


def check_constraints(
    arch: ArchitectureConfig, budgets: Budgets, workload: WorkloadSpec, hardware: HardwareSpec
) -> dict[str, float | None]:
    """Signed slack ``budget - load`` per constraint (positive = satisfied, None = absent)."""
    return {
        "prefill": None if budgets.F_bar_p is None else budgets.F_bar_p - prefill_load(arch),
        "decode": None if budgets.M_bar_d is None else budgets.M_bar_d - decode_load(arch, workload, hardware),
        "memory": None if not budgets.has_memory else budgets.M_budget - memory_load(arch, hardware),
    }


def relative_slacks(arch, budgets, workload, hardware) -> dict[str, float | None]:
    """Slack divided by the budget."""
    raw = check_constraints(arch, budgets, workload, hardware)
    scale = {"prefill": budgets.F_bar_p, "decode": budgets.M_bar_d, "memory": budgets.M_budget}
    return {k: (None if v is None else v / scale[k]) for k, v in raw.items()}


@dataclass(frozen=True)
class RegimeLabel:
    label: str
    method: str
    eta: float | None = None
    eta_p: float | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.label not in LABELS:
            raise ValidationError(f"unknown regime label {self.label!r}")

    @property
    def active(self) -> tuple[str, ...]:
        return {
            "prefill_latency_only": ("prefill",),
            "decode_latency_only": ("decode",),
            "memory_only": ("memory",),
            "prefill_plus_memory": ("prefill", "memory"),
            "decode_plus_memory": ("decode", "memory"),
        }.get(self.label, ())

    def to_dict(self) -> dict:
        return {
            "eta": self.eta,
            "eta_p": self.eta_p,
            "label": self.label,
            "method": self.method,
            "slacks": self.diagnostics.get("slacks", {}),
            "diagnostics": {k: v for k, v in self.diagnostics.items() if k != "slacks"},
        }


def classify_regime(
    budgets: Budgets,
    method: str = "ratio_heuristic",
    low: float = 0.5,
    high: float = 2.0,
    inputs=None,
) -> RegimeLabel:
    """Label the active constraint regime.

    ``ratio_heuristic`` thresholds eta (decode preferred) or eta_p: below ``low`` is
    memory-bound, above ``high`` latency-bound, in between dual. ``active_set`` solves
    each single-constraint problem and checks the omitted constraints; it needs a
    ``TheoryInputs`` carrying coefficients, hardware and workload.
    """
    if not 0 < low <= high:
        raise ValidationError(f"thresholds must satisfy 0 < low <= high, got {low}, {high}")
    if method == "ratio_heuristic":
        return _ratio_label(budgets, low, high)
    if method == "active_set":
        if inputs is None:
            raise ValidationError("active_set classification needs theory inputs")
        from .closed_form import classify_active_set

        if inputs.budgets != budgets:
            inputs = inputs.with_budgets(budgets)
        return classify_active_set(inputs)
    raise ValidationError(f"method must be one of {METHODS}, got {method!r}")


def _ratio_label(budgets: Budgets, low: float, high: float) -> RegimeLabel:
    eta, eta_p = budgets.eta, budgets.eta_p
    diag = {"thresholds": [low, high]}
    if eta is not None:
        ratio, latency, dual = eta, "decode_latency_only", "decode_plus_memory"
    elif eta_p is not None:
        ratio, latency, dual = eta_p, "prefill_latency_only", "prefill_plus_memory"
    else:
        # A single kind of constraint: nothing to compare.
        if budgets.has_memory:
            label = "memory_only"
        elif budgets.M_bar_d is not None:
            label = "decode_latency_only"
        else:
            label = "prefill_latency_only"
        return RegimeLabel(label, "ratio_heuristic", eta, eta_p, diag)
    if ratio < low:
        label = "memory_only"
    elif ratio > high:
        label = latency
    else:
        label = dual
    return RegimeLabel(label, "ratio_heuristic", eta, eta_p, diag)

"""Roofline cost model: per-operator FLOPs and traffic, phase latency and memory footprint.

All quantities are in FLOPs, bytes and seconds. Decode weights are loaded once per
step and shared by the batch; KV-cache traffic scales with the batch.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np

from .arch import ArchitectureConfig, HardwareSpec, WorkloadSpec, xi_f, xi_w_all, xi_w_dec
from .errors import ValidationError

OP_KINDS = ("q_proj", "k_proj", "v_proj", "o_proj", "qk_matmul", "softmax",
            "sv_matmul", "ffn_gate", "ffn_up", "ffn_down")

SOFTMAX_FLOPS_PER_ELEMENT = 5.0

PREFILL_MODES = ("dominant", "full")
DECODE_MODES = ("closed_form", "per_step", "full")
TOTAL_MODES = ("closed_form", "full")


def roofline_latency(flops, bytes_moved, hardware: HardwareSpec):
    """max(flops / peak, bytes / bandwidth); broadcasts over arrays."""
    return np.maximum(np.divide(flops, hardware.peak_flops), np.divide(bytes_moved, hardware.bandwidth))


@dataclass(frozen=True)
class OperatorCost:
    op_kind: str
    flops: float
    bytes_weights: float
    bytes_activations: float
    bytes_kv: float
    latency: float

    @property
    def total_bytes(self) -> float:
        return self.bytes_weights + self.bytes_activations + self.bytes_kv


@dataclass(frozen=True)
class PhaseBreakdown:
    """Per-layer operator costs for one phase; ``total_*`` fields cover all layers."""

    phase: str
    per_layer: tuple[OperatorCost, ...]
    layer_latency: float
    total_latency: float
    total_flops: float
    total_bytes: float
    step: int | None = None


def _op(kind, flops, w, a, kv, hw) -> OperatorCost:
    latency = float(roofline_latency(flops, w + a + kv, hw))
    return OperatorCost(kind, float(flops), float(w), float(a), float(kv), latency)


def per_operator_costs(
    arch: ArchitectureConfig,
    workload: WorkloadSpec,
    hardware: HardwareSpec,
    phase: str,
    t: int | None = None,
) -> list[OperatorCost]:
    """Costs of every operator in one layer.

    ``phase="prefill"`` processes ``S_in`` tokens at once. ``phase="decode"`` is the
    single step ``t`` (1-based) whose context holds ``S_in + t`` entries.
    """
    B = workload.batch
    d, g, r, rho = arch.width, arch.gqa, arch.ffn_ratio, arch.activation_rate
    d_m = arch.kv_dim
    n_h = arch.heads
    b_w, b_a, b_kv = hardware.b_w, hardware.b_a, hardware.b_kv
    hw = hardware

    if phase == "prefill":
        if workload.seq_in < 1:
            raise ValidationError("prefill needs seq_in >= 1")
        S = float(workload.seq_in)
        q = S        # query rows
        ctx = S      # attended keys per query
        ffn_w = r * d * d * b_w / rho   # a full prompt routes through every expert
    elif phase == "decode":
        if t is None or not 1 <= t <= workload.seq_out:
            raise ValidationError(f"decode step t must lie in [1, {workload.seq_out}], got {t!r}")
        q = 1.0
        ctx = float(workload.seq_in + t)
        ffn_w = r * d * d * b_w        # only the routed experts are read
    else:
        raise ValidationError(f"phase must be 'prefill' or 'decode', got {phase!r}")

    tokens = B * q
    scores = B * n_h * q * ctx
    return [
        _op("q_proj", 2 * tokens * d * d, d * d * b_w, 2 * tokens * d * b_a, 0.0, hw),
        _op("k_proj", 2 * tokens * d * d / g, d * d * b_w / g, 0.0, tokens * d * b_kv / g, hw),
        _op("v_proj", 2 * tokens * d * d / g, d * d * b_w / g, 0.0, tokens * d * b_kv / g, hw),
        _op("o_proj", 2 * tokens * d * d, d * d * b_w, 2 * tokens * d * b_a, 0.0, hw),
        _op("qk_matmul", 2 * tokens * ctx * d, 0.0, tokens * d * b_a + scores * b_a,
            B * ctx * d_m * b_kv, hw),
        _op("softmax", SOFTMAX_FLOPS_PER_ELEMENT * scores, 0.0, 2 * scores * b_a, 0.0, hw),
        _op("sv_matmul", 2 * tokens * ctx * d, 0.0, scores * b_a + tokens * d * b_a,
            B * ctx * d_m * b_kv, hw),
        _op("ffn_gate", 2 * tokens * r * d * d, ffn_w, 0.0, 0.0, hw),
        _op("ffn_up", 2 * tokens * r * d * d, ffn_w, 0.0, 0.0, hw),
        _op("ffn_down", 2 * tokens * r * d * d, ffn_w, 0.0, 0.0, hw),
    ]


def _summarise(phase, ops, layers, step=None) -> PhaseBreakdown:
    layer_latency = sum(o.latency for o in ops)
    return PhaseBreakdown(
        phase=phase,
        per_layer=tuple(ops),
        layer_latency=layer_latency,
        total_latency=layers * layer_latency,
        total_flops=layers * sum(o.flops for o in ops),
        total_bytes=layers * sum(o.total_bytes for o in ops),
        step=step,
    )


def prefill_breakdown(arch, workload, hardware) -> PhaseBreakdown:
    return _summarise("prefill", per_operator_costs(arch, workload, hardware, "prefill"), arch.layers)


def decode_step_breakdown(arch, workload, hardware, t: int) -> PhaseBreakdown:
    ops = per_operator_costs(arch, workload, hardware, "decode", t)
    return _summarise("decode_step", ops, arch.layers, step=t)


def decode_total_breakdown(arch, workload, hardware) -> PhaseBreakdown:
    """Per-operator costs summed over all decode steps."""
    if workload.seq_out < 1:
        raise ValidationError("decode needs seq_out >= 1")
    steps = [per_operator_costs(arch, workload, hardware, "decode", t)
             for t in range(1, workload.seq_out + 1)]
    ops = []
    for i, kind in enumerate(OP_KINDS):
        col = [s[i] for s in steps]
        ops.append(OperatorCost(
            kind,
            float(sum(c.flops for c in col)),
            float(sum(c.bytes_weights for c in col)),
            float(sum(c.bytes_activations for c in col)),
            float(sum(c.bytes_kv for c in col)),
            float(sum(c.latency for c in col)),
        ))
    return _summarise("decode_total", ops, arch.layers)


def prefill_latency(arch, workload, hardware, mode: str = "dominant") -> float:
    """Prefill time. ``dominant`` keeps only projection/FFN FLOPs on the compute roof."""
    if workload.seq_in == 0:
        return 0.0
    if mode == "dominant":
        return arch.layers * workload.batch * workload.seq_in * arch.width ** 2 * xi_f(arch) / hardware.peak_flops
    if mode == "full":
        return prefill_breakdown(arch, workload, hardware).total_latency
    raise ValidationError(f"prefill mode must be one of {PREFILL_MODES}, got {mode!r}")


def decode_latency(arch, workload, hardware, mode: str = "closed_form") -> float:
    """Decode time for ``S_out`` steps on the bandwidth roof (or per-operator in ``full``)."""
    if workload.seq_out == 0:
        return 0.0
    l, d, g = arch.layers, arch.width, arch.gqa
    b_w, b_kv, B = hardware.b_w, hardware.b_kv, workload.batch
    weights = xi_w_dec(arch) * d * d * b_w
    if mode == "closed_form":
        kv = 2.0 * B * workload.s_bar * d * b_kv / g
        return l * workload.seq_out * (weights + kv) / hardware.bandwidth
    if mode == "per_step":
        total = 0.0
        for t in range(1, workload.seq_out + 1):
            total += (l / hardware.bandwidth) * (weights + 2.0 * (workload.seq_in + t) * d * b_kv / g * B)
        return total
    if mode == "full":
        return decode_total_breakdown(arch, workload, hardware).total_latency
    raise ValidationError(f"decode mode must be one of {DECODE_MODES}, got {mode!r}")


def memory_footprint(arch: ArchitectureConfig, hardware: HardwareSpec) -> float:
    """Bytes needed to store every layer's weights, all experts included."""
    return arch.layers * xi_w_all(arch) * arch.width ** 2 * hardware.b_w


def total_latency(arch, workload, hardware, mode: str = "closed_form") -> float:
    if mode == "closed_form":
        return (prefill_latency(arch, workload, hardware, "dominant")
                + decode_latency(arch, workload, hardware, "closed_form"))
    if mode == "full":
        return (prefill_latency(arch, workload, hardware, "full")
                + decode_latency(arch, workload, hardware, "full"))
    raise ValidationError(f"total mode must be one of {TOTAL_MODES}, got {mode!r}")


def objective_latency(arch, workload, hardware, objective: str, full: bool = False) -> float:
    """Latency for a named objective: prefill, decode or total."""
    if objective == "prefill":
        return prefill_latency(arch, workload, hardware, "full" if full else "dominant")
    if objective == "decode":
        return decode_latency(arch, workload, hardware, "full" if full else "closed_form")
    if objective == "total":
        return total_latency(arch, workload, hardware, "full" if full else "closed_form")
    raise ValidationError(f"objective must be prefill, decode or total, got {objective!r}")


# Export

BREAKDOWN_COLUMNS = ("op", "phase", "flops", "bytes_w", "bytes_a", "bytes_kv", "latency_s")


def breakdown_rows(breakdowns: list[PhaseBreakdown]) -> list[dict]:
    rows = []
    for b in breakdowns:
        for o in b.per_layer:
            rows.append({
                "op": o.op_kind, "phase": b.phase, "flops": o.flops,
                "bytes_w": o.bytes_weights, "bytes_a": o.bytes_activations,
                "bytes_kv": o.bytes_kv, "latency_s": o.latency,
            })
    return rows


def breakdown_to_json(breakdowns: list[PhaseBreakdown], extra: dict | None = None) -> dict:
    out = {
        "rows": breakdown_rows(breakdowns),
        "phases": {
            b.phase: {
                "layer_latency_s": b.layer_latency,
                "total_latency_s": b.total_latency,
                "total_flops": b.total_flops,
                "total_bytes": b.total_bytes,
            }
            for b in breakdowns
        },
    }
    if extra:
        out.update(extra)
    return out


def breakdown_to_csv(breakdowns: list[PhaseBreakdown]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=BREAKDOWN_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in breakdown_rows(breakdowns):
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def operator_cost_dict(cost: OperatorCost) -> dict:
    return asdict(cost)

"""Architecture, hardware and workload types plus the per-layer cost coefficients.

The coefficients normalise per-layer cost by ``d**2``:

* ``xi_f``      FLOPs per token           ``4 + 4/gqa + 6r``
* ``xi_w_dec``  weight bytes per decode   ``2 + 2/gqa + 3r``        (times ``b_w``)
* ``xi_w_all``  stored weights            ``2 + 2/gqa + 3r/rho``    (times ``b_w``)
* ``xi_w_eff``  decode bytes incl. KV     ``xi_w_dec + 2*S_bar*b_kv/(gqa*d*b_w)``

Embedding / LM-head parameters, norms and rotary embeddings are not modelled.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Callable, Iterable, Mapping

from .errors import ValidationError

DEFAULT_HEAD_DIM = 64

# name -> (bytes per weight, bytes per activation, bytes per KV element)
PRECISIONS: dict[str, tuple[float, float, float]] = {
    "fp32": (4.0, 4.0, 4.0),
    "fp16": (2.0, 2.0, 2.0),
    "int8": (1.0, 1.0, 1.0),
}


def _finite_positive(name: str, value: float) -> None:
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise ValidationError(f"{name} must be a number, got {value!r}")
    if not math.isfinite(value) or value <= 0:
        raise ValidationError(f"{name} must be finite and > 0, got {value!r}")


def _close(a: float, b: float, rel: float = 1e-9) -> bool:
    return abs(a - b) <= rel * max(abs(a), abs(b))


@dataclass(frozen=True)
class ArchitectureConfig:
    """Decision vector (l, d, r, rho, gqa) with optional discrete head/expert structure.

    ``ffn_ratio`` is the total expansion across the *activated* experts, so an MoE with
    ``K`` active experts of per-expert ratio ``r_single`` has ``ffn_ratio = K * r_single``.
    Continuous fields are plain floats so the theory solvers can use the same type.
    """

    layers: float
    width: float
    ffn_ratio: float
    activation_rate: float = 1.0
    gqa: float = 1.0
    n_heads: int | None = None
    n_kv_heads: int | None = None
    head_dim: int | None = None
    experts_total: int | None = None
    experts_active: int | None = None

    def __post_init__(self) -> None:
        _finite_positive("layers", self.layers)
        _finite_positive("width", self.width)
        r = self.ffn_ratio
        if not isinstance(r, (int, float)) or not math.isfinite(r) or r < 0:
            raise ValidationError(f"ffn_ratio must be finite and >= 0, got {r!r}")
        rho = self.activation_rate
        if not isinstance(rho, (int, float)) or not (0.0 < rho <= 1.0):
            raise ValidationError(f"activation_rate must lie in (0, 1], got {rho!r}")
        if not isinstance(self.gqa, (int, float)) or not math.isfinite(self.gqa) or self.gqa < 1.0:
            raise ValidationError(f"gqa must be finite and >= 1, got {self.gqa!r}")

        if (self.n_heads is None) != (self.n_kv_heads is None):
            raise ValidationError("n_heads and n_kv_heads must be given together")
        if self.n_heads is not None:
            if self.n_heads < 1 or self.n_kv_heads < 1:
                raise ValidationError("head counts must be >= 1")
            if self.n_kv_heads > self.n_heads:
                raise ValidationError(
                    f"n_kv_heads ({self.n_kv_heads}) exceeds n_heads ({self.n_heads})")
            if not _close(self.gqa, self.n_heads / self.n_kv_heads):
                raise ValidationError(
                    f"gqa={self.gqa} != n_heads/n_kv_heads={self.n_heads / self.n_kv_heads}")
            if self.head_dim is not None and not _close(self.width, self.n_heads * self.head_dim):
                raise ValidationError(
                    f"width={self.width} != n_heads*head_dim={self.n_heads * self.head_dim}")
        elif self.head_dim is not None:
            raise ValidationError("head_dim requires n_heads and n_kv_heads")

        if (self.experts_total is None) != (self.experts_active is None):
            raise ValidationError("experts_total and experts_active must be given together")
        if self.experts_total is not None:
            if self.experts_active < 1 or self.experts_total < 1:
                raise ValidationError("expert counts must be >= 1")
            if self.experts_active > self.experts_total:
                raise ValidationError(
                    f"experts_active ({self.experts_active}) exceeds experts_total ({self.experts_total})")
            if not _close(rho, self.experts_active / self.experts_total):
                raise ValidationError(
                    f"activation_rate={rho} != K/E={self.experts_active / self.experts_total}")

    @classmethod
    def from_structure(
        cls,
        layers: int,
        width: int,
        r_single: float,
        n_heads: int,
        n_kv_heads: int,
        experts_total: int = 1,
        experts_active: int = 1,
        head_dim: int | None = None,
    ) -> "ArchitectureConfig":
        """Discrete construction path: derive (r, rho, gqa) from heads and experts."""
        if head_dim is None:
            if width % n_heads:
                raise ValidationError(f"width {width} not divisible by n_heads {n_heads}")
            head_dim = width // n_heads
        # n_h need not be a multiple of n_kv: gqa is a real-valued ratio.
        return cls(
            layers=layers,
            width=width,
            ffn_ratio=experts_active * r_single,
            activation_rate=experts_active / experts_total,
            gqa=n_heads / n_kv_heads,
            n_heads=n_heads,
            n_kv_heads=n_kv_heads,
            head_dim=head_dim,
            experts_total=experts_total,
            experts_active=experts_active,
        )

    # Short aliases used throughout the formulas.
    @property
    def l(self) -> float:  # noqa: E743
        return self.layers

    @property
    def d(self) -> float:
        return self.width

    @property
    def r(self) -> float:
        return self.ffn_ratio

    @property
    def rho(self) -> float:
        return self.activation_rate

    @property
    def kv_dim(self) -> float:
        """d_m = d / gqa."""
        return self.width / self.gqa

    @property
    def heads(self) -> float:
        """Query heads; falls back to ``d / 64`` for purely continuous configs."""
        if self.n_heads is not None:
            return float(self.n_heads)
        return max(1.0, self.width / DEFAULT_HEAD_DIM)

    @property
    def is_moe(self) -> bool:
        return self.activation_rate < 1.0

    @property
    def r_single(self) -> float:
        k = self.experts_active or 1
        return self.ffn_ratio / k

    @property
    def is_discrete(self) -> bool:
        return self.n_heads is not None and self.experts_total is not None

    def theta(self) -> tuple[float, float, float, float, float]:
        return (float(self.layers), float(self.width), float(self.ffn_ratio),
                float(self.activation_rate), float(self.gqa))

    def parameter_count(self) -> float:
        """Non-embedding weights stored across all experts."""
        return self.layers * xi_w_all(self) * self.width ** 2

    def with_(self, **changes) -> "ArchitectureConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = {
            "layers": self.layers,
            "width": self.width,
            "ffn_ratio": self.ffn_ratio,
            "activation_rate": self.activation_rate,
            "gqa": self.gqa,
        }
        for key in ("n_heads", "n_kv_heads", "head_dim", "experts_total", "experts_active"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "ArchitectureConfig":
        required = ("layers", "width", "ffn_ratio")
        missing = [k for k in required if k not in data]
        if missing:
            raise ValidationError(f"architecture is missing fields: {', '.join(missing)}")
        known = {"layers", "width", "ffn_ratio", "activation_rate", "gqa", "n_heads",
                 "n_kv_heads", "head_dim", "experts_total", "experts_active"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError(f"unknown architecture fields: {', '.join(unknown)}")
        kwargs = dict(data)
        if "n_heads" in kwargs and "gqa" not in kwargs:
            kwargs["gqa"] = kwargs["n_heads"] / kwargs["n_kv_heads"]
        if "experts_total" in kwargs and "activation_rate" not in kwargs:
            kwargs["activation_rate"] = kwargs["experts_active"] / kwargs["experts_total"]
        return cls(**kwargs)


@dataclass(frozen=True)
class HardwareSpec:
    """Peak compute (FLOP/s), sustained bandwidth (B/s), memory budget (B) and byte widths."""

    peak_flops: float
    bandwidth: float
    memory_budget: float = math.inf
    b_w: float = 2.0
    b_a: float = 2.0
    b_kv: float = 2.0

    def __post_init__(self) -> None:
        for name in ("peak_flops", "bandwidth", "b_w", "b_a", "b_kv"):
            _finite_positive(name, getattr(self, name))
        mb = self.memory_budget
        if not isinstance(mb, (int, float)) or math.isnan(mb) or mb <= 0:
            raise ValidationError(f"memory_budget must be > 0, got {mb!r}")

    @property
    def ridge_point(self) -> float:
        """Arithmetic intensity (FLOP/B) where compute and bandwidth bounds meet."""
        return self.peak_flops / self.bandwidth

    def with_precision(self, precision: str | tuple[float, float, float]) -> "HardwareSpec":
        if isinstance(precision, str):
            try:
                precision = PRECISIONS[precision.lower()]
            except KeyError:
                raise ValidationError(
                    f"unknown precision {precision!r}; choose from {sorted(PRECISIONS)}") from None
        b_w, b_a, b_kv = precision
        return replace(self, b_w=b_w, b_a=b_a, b_kv=b_kv)

    def to_dict(self) -> dict:
        return {
            "peak_flops": self.peak_flops,
            "bandwidth_bytes_per_s": self.bandwidth,
            "memory_budget_bytes": self.memory_budget,
            "bytes_weight": self.b_w,
            "bytes_activation": self.b_a,
            "bytes_kv": self.b_kv,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "HardwareSpec":
        names = {
            "peak_flops": "peak_flops",
            "bandwidth_bytes_per_s": "bandwidth",
            "memory_budget_bytes": "memory_budget",
            "bytes_weight": "b_w",
            "bytes_activation": "b_a",
            "bytes_kv": "b_kv",
        }
        unknown = sorted(set(data) - set(names) - {"comment", "name"})
        if unknown:
            raise ValidationError(f"unknown hardware fields: {', '.join(unknown)}")
        for key in ("peak_flops", "bandwidth_bytes_per_s"):
            if key not in data:
                raise ValidationError(f"hardware is missing field {key!r}")
        kwargs = {names[k]: v for k, v in data.items() if k in names}
        if kwargs.get("memory_budget") is None:
            kwargs.pop("memory_budget", None)
        return cls(**kwargs)


@dataclass(frozen=True)
class WorkloadSpec:
    """Batch size and input/output token counts."""

    batch: int = 1
    seq_in: int = 1024
    seq_out: int = 16

    def __post_init__(self) -> None:
        for name in ("batch", "seq_in", "seq_out"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise ValidationError(f"{name} must be an integer, got {value!r}")
        if self.batch < 1:
            raise ValidationError(f"batch must be >= 1, got {self.batch}")
        if self.seq_in < 0 or self.seq_out < 0:
            raise ValidationError("seq_in and seq_out must be >= 0")
        if self.seq_in + self.seq_out < 1:
            raise ValidationError("seq_in + seq_out must be >= 1")

    @property
    def s_bar(self) -> float:
        return average_context(self.seq_in, self.seq_out)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "WorkloadSpec":
        unknown = sorted(set(data) - {"batch", "seq_in", "seq_out", "comment", "name"})
        if unknown:
            raise ValidationError(f"unknown workload fields: {', '.join(unknown)}")
        return cls(**{k: data[k] for k in ("batch", "seq_in", "seq_out") if k in data})


def average_context(seq_in: float, seq_out: float) -> float:
    """Mean KV length over decode steps t = 1..S_out (context S_in + t)."""
    return seq_in + (seq_out + 1) / 2


# Raw coefficient formulas. These broadcast over numpy arrays.

def alpha_attn_raw(gqa):
    return 2.0 + 2.0 / gqa


def xi_f_raw(r, gqa):
    return 4.0 + 4.0 / gqa + 6.0 * r


def xi_w_dec_raw(r, gqa):
    return 2.0 + 2.0 / gqa + 3.0 * r


def xi_w_all_raw(r, rho, gqa):
    return 2.0 + 2.0 / gqa + 3.0 * r / rho


def kv_correction_raw(d, gqa, s_bar, b_w, b_kv):
    return 2.0 * s_bar * b_kv / (gqa * d * b_w)


def xi_w_eff_raw(r, gqa, d, s_bar, b_w, b_kv):
    return xi_w_dec_raw(r, gqa) + kv_correction_raw(d, gqa, s_bar, b_w, b_kv)


# Arch-level wrappers.

def alpha_attn(arch: ArchitectureConfig) -> float:
    return alpha_attn_raw(arch.gqa)


def xi_f(arch: ArchitectureConfig) -> float:
    return xi_f_raw(arch.ffn_ratio, arch.gqa)


def xi_w_dec(arch: ArchitectureConfig) -> float:
    return xi_w_dec_raw(arch.ffn_ratio, arch.gqa)


def xi_w_all(arch: ArchitectureConfig) -> float:
    if arch.activation_rate <= 0:
        raise ValidationError("activation_rate must be > 0")
    return xi_w_all_raw(arch.ffn_ratio, arch.activation_rate, arch.gqa)


def kv_correction(arch: ArchitectureConfig, workload: WorkloadSpec, hardware: HardwareSpec) -> float:
    """delta: KV-cache bytes per decode step, normalised like the weight coefficients."""
    return kv_correction_raw(arch.width, arch.gqa, workload.s_bar, hardware.b_w, hardware.b_kv)


def xi_w_eff(arch: ArchitectureConfig, workload: WorkloadSpec, hardware: HardwareSpec) -> float:
    return xi_w_dec(arch) + kv_correction(arch, workload, hardware)


def gamma(arch: ArchitectureConfig, workload: WorkloadSpec, hardware: HardwareSpec) -> float:
    """Per-layer decode traffic (bytes) at the average context: xi_w_eff * d^2 * b_w."""
    d = arch.width
    return (xi_w_dec(arch) * d * d * hardware.b_w
            + 2.0 * workload.s_bar * d * hardware.b_kv / arch.gqa)


def coefficient_partials(
    arch: ArchitectureConfig, workload: WorkloadSpec, hardware: HardwareSpec
) -> dict[str, dict[str, float]]:
    """Analytic partials of every coefficient with respect to r, gqa, rho and d."""
    r, rho, g, d = arch.ffn_ratio, arch.activation_rate, arch.gqa, arch.width
    s_bar, b_w, b_kv = workload.s_bar, hardware.b_w, hardware.b_kv
    kv = 2.0 * s_bar * b_kv
    return {
        "xi_f": {"r": 6.0, "gqa": -4.0 / g ** 2, "rho": 0.0, "d": 0.0},
        "xi_w_dec": {"r": 3.0, "gqa": -2.0 / g ** 2, "rho": 0.0, "d": 0.0},
        "xi_w_eff": {
            "r": 3.0,
            "gqa": -2.0 / g ** 2 - kv / (g ** 2 * d * b_w),
            "rho": 0.0,
            "d": -kv / (g * d ** 2 * b_w),
        },
        "xi_w_all": {"r": 3.0 / rho, "gqa": -2.0 / g ** 2, "rho": -3.0 * r / rho ** 2, "d": 0.0},
    }


def snap_to_grid(
    arch: ArchitectureConfig,
    candidates: Iterable[ArchitectureConfig],
    feasible: Callable[[ArchitectureConfig], bool] | None = None,
) -> ArchitectureConfig:
    """Nearest candidate to ``arch`` in log-(l, d, r, rho, gqa) space.

    Ties break toward the smaller parameter count, then lexicographic theta.
    """
    target = [math.log(v) for v in _log_safe(arch.theta())]
    best_key = None
    best = None
    for cand in candidates:
        if feasible is not None and not feasible(cand):
            continue
        dist = sum((math.log(v) - t) ** 2
                   for v, t in zip(_log_safe(cand.theta()), target))
        key = (round(dist, 12), cand.parameter_count(), cand.theta())
        if best_key is None or key < best_key:
            best_key, best = key, cand
    if best is None:
        raise ValidationError("no feasible candidate to snap to")
    return best


def _log_safe(theta: tuple[float, ...]) -> tuple[float, ...]:
    # r may be 0 in the FFN-free limit.
    return tuple(max(v, 1e-12) for v in theta)

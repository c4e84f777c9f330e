"""Discrete architecture search space."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

from .arch import DEFAULT_HEAD_DIM, PRECISIONS, ArchitectureConfig
from .errors import ValidationError

# Sentinel in ``kv_heads`` meaning "as many KV heads as query heads" (gqa = 1).
ALL_HEADS = "n_h"


@dataclass(frozen=True)
class SearchSpace:
    """Grid over depth, width, (E, K) expert pairs, KV-head counts and per-expert FFN ratio."""

    depths: tuple[int, ...] = (4, 8, 12, 16, 20, 24, 28, 32)
    widths: tuple[int, ...] = (768, 1024, 1280, 1536, 1792, 2048, 2304, 2560, 3072)
    moe: tuple[tuple[int, int], ...] = ((1, 1), (8, 1), (8, 2), (16, 1), (16, 2))
    kv_heads: tuple[int | str, ...] = (1, 2, 4, 8, ALL_HEADS)
    ffn_ratios: tuple[float, ...] = (8 / 3,)
    head_dim: int = DEFAULT_HEAD_DIM
    precisions: tuple[str, ...] = ("fp16", "int8")

    def __post_init__(self) -> None:
        for name in ("depths", "widths", "moe", "kv_heads", "ffn_ratios", "precisions"):
            if not getattr(self, name):
                raise ValidationError(f"search space {name} grid is empty")
        if any(d < 1 for d in self.depths) or any(w < 1 for w in self.widths):
            raise ValidationError("depths and widths must be >= 1")
        for e, k in self.moe:
            if not 1 <= k <= e:
                raise ValidationError(f"invalid MoE pair (E={e}, K={k})")
        for w in self.widths:
            if w % self.head_dim:
                raise ValidationError(f"width {w} is not a multiple of head_dim {self.head_dim}")
        for kv in self.kv_heads:
            if kv != ALL_HEADS and (not isinstance(kv, int) or kv < 1):
                raise ValidationError(f"invalid KV head count {kv!r}")
        if any(r <= 0 for r in self.ffn_ratios):
            raise ValidationError("ffn ratios must be > 0")
        for p in self.precisions:
            if p not in PRECISIONS:
                raise ValidationError(f"unknown precision {p!r}")

    @property
    def axes(self) -> tuple[int, int, int, int, int]:
        """Axis lengths in index order (depth, width, moe, kv, ffn)."""
        return (len(self.depths), len(self.widths), len(self.moe), len(self.kv_heads), len(self.ffn_ratios))

    @property
    def size(self) -> int:
        n = 1
        for a in self.axes:
            n *= a
        return n

    def _kv_for(self, n_heads: int, kv: int | str) -> int | None:
        if kv == ALL_HEADS:
            return n_heads
        return kv if kv <= n_heads else None

    def config_at(self, index: tuple[int, int, int, int, int]) -> ArchitectureConfig | None:
        """Configuration at a grid index, or None when the KV option exceeds the head count."""
        i_l, i_d, i_m, i_kv, i_r = index
        width = self.widths[i_d]
        n_heads = width // self.head_dim
        n_kv = self._kv_for(n_heads, self.kv_heads[i_kv])
        if n_kv is None:
            return None
        e, k = self.moe[i_m]
        return ArchitectureConfig.from_structure(
            layers=self.depths[i_l], width=width, r_single=self.ffn_ratios[i_r],
            n_heads=n_heads, n_kv_heads=n_kv, experts_total=e, experts_active=k,
            head_dim=self.head_dim)

    def indices(self) -> list[tuple[int, int, int, int, int]]:
        out = []
        a0, a1, a2, a3, a4 = self.axes
        for i in range(a0):
            for j in range(a1):
                for m in range(a2):
                    for q in range(a3):
                        for f in range(a4):
                            idx = (i, j, m, q, f)
                            if self.config_at(idx) is not None:
                                out.append(idx)
        return out

    def configurations(self) -> list[ArchitectureConfig]:
        """All valid configurations, de-duplicated, in index order."""
        seen = set()
        out = []
        for idx in self.indices():
            cfg = self.config_at(idx)
            if cfg.theta() in seen:
                continue
            seen.add(cfg.theta())
            out.append(cfg)
        return out

    def centroid(self) -> ArchitectureConfig:
        """Middle grid point, used as a reference architecture."""
        mid = tuple(n // 2 for n in self.axes)
        cfg = self.config_at(mid)
        if cfg is None:
            cfg = self.config_at(mid[:3] + (self.kv_heads.index(ALL_HEADS) if ALL_HEADS in self.kv_heads else 0,) + mid[4:])
        if cfg is None:
            cfg = self.configurations()[0]
        return cfg

    def to_dict(self) -> dict:
        return {
            "depths": list(self.depths),
            "widths": list(self.widths),
            "moe": [list(p) for p in self.moe],
            "kv_heads": list(self.kv_heads),
            "ffn_ratios": [str(Fraction(r).limit_denominator(1000)) if r != int(r) else r
                           for r in self.ffn_ratios],
            "head_dim": self.head_dim,
            "precisions": list(self.precisions),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "SearchSpace":
        known = {"depths", "widths", "moe", "kv_heads", "ffn_ratios", "head_dim", "precisions"}
        unknown = sorted(set(data) - known - {"comment"})
        if unknown:
            raise ValidationError(f"unknown search space fields: {', '.join(unknown)}")
        kwargs = {}
        if "depths" in data:
            kwargs["depths"] = tuple(int(x) for x in data["depths"])
        if "widths" in data:
            kwargs["widths"] = tuple(int(x) for x in data["widths"])
        if "moe" in data:
            kwargs["moe"] = tuple((int(e), int(k)) for e, k in data["moe"])
        if "kv_heads" in data:
            kwargs["kv_heads"] = tuple(x if x == ALL_HEADS else int(x) for x in data["kv_heads"])
        if "ffn_ratios" in data:
            kwargs["ffn_ratios"] = tuple(_parse_ratio(x) for x in data["ffn_ratios"])
        if "head_dim" in data:
            kwargs["head_dim"] = int(data["head_dim"])
        if "precisions" in data:
            kwargs["precisions"] = tuple(str(p) for p in data["precisions"])
        return cls(**kwargs)


def _parse_ratio(value) -> float:
    if isinstance(value, str):
        try:
            return float(Fraction(value))
        except (ValueError, ZeroDivisionError):
            raise ValidationError(f"invalid ffn ratio {value!r}") from None
    return float(value)


def neighbours(space: SearchSpace, index: Sequence[int]) -> list[tuple[int, int, int, int, int]]:
    """Grid indices at Chebyshev distance one (every axis moves by -1, 0 or +1)."""
    out = []
    for offset in itertools.product((-1, 0, 1), repeat=len(space.axes)):
        if not any(offset):
            continue
        nb = tuple(i + o for i, o in zip(index, offset))
        if all(0 <= j < n for j, n in zip(nb, space.axes)):
            out.append(nb)
    return out

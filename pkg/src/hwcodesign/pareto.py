"""Loss-latency Pareto frontiers over a discrete architecture space."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .arch import ArchitectureConfig, HardwareSpec, WorkloadSpec
from .errors import InfeasibleError, ValidationError
from .loss import ScalingLawCoefficients, loss_raw, predict_loss
from .roofline import memory_footprint, objective_latency
from .space import SearchSpace, neighbours

OBJECTIVES = ("prefill", "decode", "total")

FRONTIER_CSV_HEADER = ("latency_s", "loss", "memory_bytes", "layers", "width", "ffn_ratio",
                       "experts_total", "experts_active", "gqa", "precision")


@dataclass(frozen=True)
class ParetoPoint:
    arch: ArchitectureConfig
    loss: float
    latency: float
    memory: float
    objective: str
    precision: str
    latency_full: float | None = None

    def __post_init__(self) -> None:
        if not (math.isfinite(self.loss) and self.loss > 0):
            raise ValidationError(f"loss must be finite and > 0, got {self.loss}")
        if not (math.isfinite(self.latency) and self.latency > 0):
            raise ValidationError(f"latency must be finite and > 0, got {self.latency}")

    def sort_key(self):
        return (self.latency, self.loss, self.memory, self.arch.theta())

    def to_dict(self) -> dict:
        return {
            "latency_s": self.latency,
            "latency_full_s": self.latency_full,
            "loss": self.loss,
            "memory_bytes": self.memory,
            "objective": self.objective,
            "precision": self.precision,
            "arch": self.arch.to_dict(),
        }


def dominates(a: ParetoPoint, b: ParetoPoint) -> bool:
    """a is no worse than b in loss and latency and strictly better in one."""
    if a.objective != b.objective:
        raise ValueError(f"cannot compare objectives {a.objective!r} and {b.objective!r}")
    if a.precision != b.precision:
        raise ValueError(f"cannot compare precisions {a.precision!r} and {b.precision!r}")
    return (a.loss <= b.loss and a.latency <= b.latency
            and (a.loss < b.loss or a.latency < b.latency))


@dataclass
class Frontier:
    points: list[ParetoPoint]
    objective: str = ""
    precision: str = ""
    provenance: list[dict] = field(default_factory=list)
    dominated_count: int = 0
    evaluated: int = 0

    def __len__(self) -> int:
        return len(self.points)

    def key_set(self) -> set:
        return {p.arch.theta() for p in self.points}

    def hypervolume(self, ref_latency: float, ref_loss: float) -> float:
        return hypervolume(self.points, ref_latency, ref_loss)

    def to_csv(self, two_column: bool = False) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        if two_column:
            writer.writerow(("latency_s", "loss"))
            for p in self.points:
                writer.writerow((repr(p.latency), repr(p.loss)))
            return buf.getvalue()
        writer.writerow(FRONTIER_CSV_HEADER)
        for p in self.points:
            a = p.arch
            writer.writerow((
                repr(p.latency), repr(p.loss), repr(p.memory), _num(a.layers), _num(a.width),
                repr(float(a.ffn_ratio)), a.experts_total or 1, a.experts_active or 1,
                repr(float(a.gqa)), p.precision,
            ))
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "precision": self.precision,
            "points": [p.to_dict() for p in self.points],
            "provenance": self.provenance,
            "dominated_count": self.dominated_count,
            "evaluated": self.evaluated,
        }


def _num(x):
    return int(x) if float(x).is_integer() else repr(float(x))


def build_frontier(points: list[ParetoPoint]) -> Frontier:
    """Non-dominated subset, one point per (loss, latency) pair, sorted by latency.

    Duplicated coordinates keep the smaller memory footprint, then the smaller theta.
    """
    if not points:
        raise ValidationError("cannot build a frontier from no points")
    objective, precision = points[0].objective, points[0].precision
    for p in points:
        if p.objective != objective or p.precision != precision:
            raise ValueError("all points must share objective and precision")
    ordered = sorted(points, key=ParetoPoint.sort_key)
    kept = []
    best_loss = math.inf
    for p in ordered:
        if p.loss < best_loss:
            kept.append(p)
            best_loss = p.loss
    return Frontier(kept, objective, precision, dominated_count=len(points) - len(kept),
                    evaluated=len(points))


def brute_force_frontier(points: list[ParetoPoint]) -> list[ParetoPoint]:
    """Quadratic reference filter with the same duplicate rule as :func:`build_frontier`."""
    survivors = [p for p in points if not any(dominates(q, p) for q in points if q is not p)]
    by_coords = {}
    for p in survivors:
        key = (p.loss, p.latency)
        if key not in by_coords or (p.memory, p.arch.theta()) < (by_coords[key].memory, by_coords[key].arch.theta()):
            by_coords[key] = p
    return sorted(by_coords.values(), key=ParetoPoint.sort_key)


def hypervolume(points: list[ParetoPoint], ref_latency: float, ref_loss: float) -> float:
    """Area dominated by the frontier inside the reference box."""
    area = 0.0
    prev_loss = ref_loss
    for p in sorted(points, key=lambda q: (q.latency, q.loss)):
        if p.latency >= ref_latency or p.loss >= prev_loss:
            continue
        area += (ref_latency - p.latency) * (prev_loss - p.loss)
        prev_loss = p.loss
    return area


@dataclass(frozen=True)
class SearchOptions:
    seed: int = 0
    initial: int = 2000
    gap_k: int = 8
    max_rounds: int = 20
    # Stop once the relative hypervolume change of a round drops below this (None disables).
    hv_tol: float | None = 1e-4
    redraws: int = 10
    full_verify: bool = True
    threads: int = 1

    def __post_init__(self) -> None:
        if self.initial < 1 or self.gap_k < 0 or self.max_rounds < 0:
            raise ValidationError("initial must be >= 1; gap_k and max_rounds must be >= 0")


class _Evaluator:
    """Caches point evaluations by grid index; filters memory-infeasible points."""

    def __init__(self, space, coeffs, hardware, workload, objective, precision, threads=1):
        self.space = space
        self.coeffs = coeffs
        self.hw = hardware
        self.wl = workload
        self.objective = objective
        self.precision = precision
        self.threads = threads
        self.cache: dict[tuple, ParetoPoint | None] = {}

    def latency(self, arch):
        return objective_latency(arch, self.wl, self.hw, self.objective)

    def _one(self, idx):
        arch = self.space.config_at(idx)
        if arch is None:
            return None
        mem = memory_footprint(arch, self.hw)
        if mem > self.hw.memory_budget:
            return None
        return ParetoPoint(arch, predict_loss(arch, self.coeffs), self.latency(arch), mem,
                           self.objective, self.precision)

    def evaluate(self, indices) -> list[tuple]:
        todo = sorted({tuple(i) for i in indices if tuple(i) not in self.cache})
        if self.threads > 1 and len(todo) > 64:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                results = list(pool.map(self._one, todo))
        else:
            results = [self._one(i) for i in todo]
        for idx, pt in zip(todo, results):
            self.cache[idx] = pt
        return todo

    def points(self) -> list[ParetoPoint]:
        return [p for _, p in sorted(self.cache.items()) if p is not None]

    def index_of(self) -> dict:
        return {p.arch.theta(): idx for idx, p in self.cache.items() if p is not None}


def _lhs_indices(space: SearchSpace, n: int, seed: int, redraws: int) -> list[tuple]:
    axes = np.array(space.axes)
    sampler = qmc.LatinHypercube(d=len(axes), seed=seed)
    unit = sampler.random(n)
    idx = np.minimum((unit * axes).astype(int), axes - 1)
    rng = np.random.default_rng(seed)
    seen = set()
    out = []
    for row in idx:
        cand = tuple(int(v) for v in row)
        tries = 0
        while cand in seen and tries < redraws:
            cand = tuple(int(v) for v in np.minimum((rng.random(len(axes)) * axes).astype(int), axes - 1))
            tries += 1
        seen.add(cand)
        out.append(cand)
    return out


def search_pareto(
    space: SearchSpace,
    coeffs: ScalingLawCoefficients,
    hardware: HardwareSpec,
    workload: WorkloadSpec,
    objective: str = "decode",
    precision: str = "fp16",
    options: SearchOptions = SearchOptions(),
) -> Frontier:
    """Latin-hypercube seeding followed by gap and neighbourhood refinement."""
    if objective not in OBJECTIVES:
        raise ValidationError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    hw = hardware.with_precision(precision)
    ev = _Evaluator(space, coeffs, hw, workload, objective, precision, options.threads)
    rng = np.random.default_rng(options.seed + 1)

    initial = _lhs_indices(space, options.initial, options.seed, options.redraws)
    ev.evaluate(initial)
    pts = ev.points()
    if not pts:
        raise InfeasibleError("every sampled configuration exceeds the memory budget")
    front = build_frontier(pts)
    ref = (max(p.latency for p in pts), max(p.loss for p in pts))
    hv = front.hypervolume(*ref)
    provenance = [{"round": 0, "sampled": len(initial), "evaluated": len(ev.cache),
                   "frontier": len(front), "hypervolume": hv}]

    predicted: dict[tuple, float] | None = None
    for rnd in range(1, options.max_rounds + 1):
        index_of = ev.index_of()
        proposals = []
        # Neighbourhoods of frontier points.
        for p in front.points:
            proposals.extend(neighbours(space, index_of[p.arch.theta()]))
        # Sparse stretches of the frontier: draw unevaluated configurations whose
        # predicted latency lands inside each wider-than-median gap.
        if len(front) > 1 and options.gap_k > 0:
            if predicted is None:
                predicted = {idx: ev.latency(space.config_at(idx)) for idx in space.indices()}
            lats = [p.latency for p in front.points]
            gaps = np.diff(lats)
            median = float(np.median(gaps))
            pending = [idx for idx in predicted if idx not in ev.cache]
            for i, gap in enumerate(gaps):
                if gap <= median:
                    continue
                lo, hi = lats[i], lats[i + 1]
                inside = [idx for idx in pending if lo < predicted[idx] < hi]
                if len(inside) > options.gap_k:
                    pick = rng.choice(len(inside), size=options.gap_k, replace=False)
                    inside = [inside[j] for j in sorted(pick)]
                proposals.extend(inside)
        new = ev.evaluate(proposals)
        pts = ev.points()
        new_front = build_frontier(pts)
        ref = (max(ref[0], max(p.latency for p in pts)), max(ref[1], max(p.loss for p in pts)))
        new_hv = new_front.hypervolume(*ref)
        added = new_front.key_set() - front.key_set()
        provenance.append({"round": rnd, "sampled": len(proposals), "new_evaluations": len(new),
                           "evaluated": len(ev.cache), "frontier": len(new_front),
                           "added": len(added), "hypervolume": new_hv})
        change = abs(new_hv - hv) / hv if hv > 0 else (0.0 if new_hv == 0 else math.inf)
        front, hv = new_front, new_hv
        if not added or (options.hv_tol is not None and change < options.hv_tol):
            break

    return _finalise(front, ev, provenance, options.full_verify)


def enumerate_frontier(
    space: SearchSpace,
    coeffs: ScalingLawCoefficients,
    hardware: HardwareSpec,
    workload: WorkloadSpec,
    objective: str = "decode",
    precision: str = "fp16",
    full_verify: bool = True,
) -> Frontier:
    """Exhaustive evaluation of every configuration in the space."""
    if objective not in OBJECTIVES:
        raise ValidationError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    hw = hardware.with_precision(precision)
    ev = _Evaluator(space, coeffs, hw, workload, objective, precision)
    ev.evaluate(space.indices())
    pts = ev.points()
    if not pts:
        raise InfeasibleError("every configuration exceeds the memory budget")
    front = build_frontier(pts)
    provenance = [{"round": 0, "sampled": space.size, "evaluated": len(ev.cache), "frontier": len(front)}]
    return _finalise(front, ev, provenance, full_verify)


def _finalise(front: Frontier, ev: _Evaluator, provenance, full_verify) -> Frontier:
    points = front.points
    if full_verify:
        points = [
            ParetoPoint(p.arch, p.loss, p.latency, p.memory, p.objective, p.precision,
                        objective_latency(p.arch, ev.wl, ev.hw, p.objective, full=True))
            for p in points
        ]
    pts = ev.points()
    return Frontier(points, front.objective, front.precision, provenance,
                    dominated_count=len(pts) - len(points), evaluated=len(pts))


def parameter_traces(front: Frontier) -> list[dict]:
    """Architecture parameters along the frontier, for plotting outside this package."""
    return [
        {"latency_s": p.latency, "loss": p.loss, "layers": p.arch.layers, "width": p.arch.width,
         "experts_total": p.arch.experts_total or 1, "experts_active": p.arch.experts_active or 1,
         "ffn_ratio": p.arch.ffn_ratio, "gqa": p.arch.gqa}
        for p in front.points
    ]


def depth_monotone(front: Frontier) -> bool:
    depths = [p.arch.layers for p in front.points]
    return all(a <= b for a, b in zip(depths, depths[1:]))


def latency_at_loss(front: Frontier, loss: float) -> float:
    """Smallest frontier latency reaching ``loss`` or lower (inf if none)."""
    ok = [p.latency for p in front.points if p.loss <= loss]
    return min(ok) if ok else math.inf


def coefficient_sensitivities(points: list[ParetoPoint], coeffs: ScalingLawCoefficients) -> dict[str, float]:
    """Mean elasticity of predicted loss to each coefficient over ``points``."""
    names = ["kappa_l", "kappa_rho", "kappa_d", "kappa_m", "alpha_l", "alpha_rho",
             "alpha_r", "alpha_m", "beta_1", "beta_2", "l_inf"]
    out = {}
    theta = np.array([p.arch.theta() for p in points])
    l, d, r, rho, g = theta.T
    base = loss_raw(l, d, r, rho, g, coeffs)
    for n in names:
        v = getattr(coeffs, n)
        h = 1e-6 * max(1.0, abs(v))
        bumped = coeffs.replace(**{n: v + h})
        deriv = (loss_raw(l, d, r, rho, g, bumped) - base) / h
        out[n] = float(np.mean(deriv * v / base))
    return out


def reproduction_report(
    coeffs: ScalingLawCoefficients,
    hardware: HardwareSpec,
    workload: WorkloadSpec,
    space: SearchSpace | None = None,
) -> dict:
    """Qualitative frontier checks reported, not asserted."""
    space = space or SearchSpace()
    dec = {p: enumerate_frontier(space, coeffs, hardware, workload, "decode", p, full_verify=False)
           for p in ("fp16", "int8")}
    fp16 = dec["fp16"]
    moe_share = sum(1 for p in fp16.points if p.arch.is_moe) / len(fp16)
    max_e = max(e for e, _ in space.moe)
    top1_share = sum(1 for p in fp16.points
                     if (p.arch.experts_total or 1) == max_e and (p.arch.experts_active or 1) == 1) / len(fp16)
    matched = [latency_at_loss(dec["int8"], p.loss) < p.latency for p in fp16.points]
    int8_share = sum(matched) / len(matched)
    sens = coefficient_sensitivities(fp16.points, coeffs)
    dense = [p for p in fp16.points if not p.arch.is_moe]
    return {
        "moe_share_of_decode_frontier": moe_share,
        "all_moe": moe_share == 1.0,
        "largest_pool_top1_share": top1_share,
        "prefers_largest_pool_top1": top1_share >= 0.5,
        "int8_faster_at_matched_loss_share": int8_share,
        "int8_dominates": int8_share == 1.0,
        "dense_points_on_decode_frontier": [p.arch.to_dict() for p in dense],
        "sensitivities": sens,
        "frontier_sizes": {k: len(v) for k, v in dec.items()},
    }

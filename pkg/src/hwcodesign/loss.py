"""Separable loss scaling law: evaluation, analytic partials and least-squares fitting.

    L(l, d, r, rho, gqa) = k_l / l**a_l
                         + k_rho * rho**a_rho / (r**a_r * d**b_1)
                         + k_d / (r**a_r * d**b_2)
                         + k_m / (d / gqa)**a_m
                         + L_inf
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import least_squares
from scipy.stats import qmc

from .arch import ArchitectureConfig
from .errors import ConvergenceError, InsufficientDataError, ParseError, ValidationError

TERM_NAMES = ("depth", "sparsity", "capacity", "kv", "irreducible")

# JSON key -> attribute name.
_JSON_KEYS = {
    "kappa_l": "kappa_l",
    "kappa_rho": "kappa_rho",
    "kappa_d": "kappa_d",
    "kappa_m": "kappa_m",
    "alpha_l": "alpha_l",
    "alpha_rho": "alpha_rho",
    "alpha_r": "alpha_r",
    "alpha_m": "alpha_m",
    "beta_1": "beta_1",
    "beta_2": "beta_2",
    "L_inf": "l_inf",
}


@dataclass(frozen=True)
class ScalingLawCoefficients:
    kappa_l: float
    kappa_rho: float
    kappa_d: float
    kappa_m: float
    alpha_l: float
    alpha_rho: float
    alpha_r: float
    alpha_m: float
    beta_1: float
    beta_2: float
    l_inf: float
    source: str = "user"
    fitted_on: int = 0

    def __post_init__(self) -> None:
        for f in fields(self)[:11]:
            value = getattr(self, f.name)
            if not isinstance(value, (int, float)) or isinstance(value, bool) or not math.isfinite(value):
                raise ValidationError(f"{f.name} must be a finite number, got {value!r}")
        # Zero prefactors are allowed so single terms can be switched off.
        for name in ("kappa_l", "kappa_rho", "kappa_d", "kappa_m"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.l_inf < 0:
            raise ValidationError(f"L_inf must be >= 0, got {self.l_inf}")

    @property
    def sparsity_law_valid(self) -> bool:
        """Interior memory-only optimum in rho exists only when alpha_rho > alpha_r."""
        return self.alpha_rho > self.alpha_r

    def vector(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)[:11]], dtype=float)

    @classmethod
    def from_vector(cls, values: Sequence[float], **meta) -> "ScalingLawCoefficients":
        names = [f.name for f in fields(cls)[:11]]
        return cls(**{n: float(v) for n, v in zip(names, values)}, **meta)

    def replace(self, **changes) -> "ScalingLawCoefficients":
        data = asdict(self)
        data.update(changes)
        return ScalingLawCoefficients(**data)

    def to_dict(self) -> dict:
        out = {key: getattr(self, attr) for key, attr in _JSON_KEYS.items()}
        out["source"] = self.source
        out["fitted_on"] = self.fitted_on
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "ScalingLawCoefficients":
        missing = [k for k in _JSON_KEYS if k not in data]
        if missing:
            raise ValidationError(f"coefficients missing fields: {', '.join(missing)}")
        unknown = sorted(set(data) - set(_JSON_KEYS) - {"source", "fitted_on", "comment"})
        if unknown:
            raise ValidationError(f"unknown coefficient fields: {', '.join(unknown)}")
        kwargs = {attr: data[key] for key, attr in _JSON_KEYS.items()}
        return cls(**kwargs, source=str(data.get("source", "user")),
                   fitted_on=int(data.get("fitted_on", 0)))


PAPER_APPENDIX_C = ScalingLawCoefficients(
    kappa_l=9.96, kappa_rho=0.031, kappa_d=500.0, kappa_m=0.20,
    alpha_l=1.63, alpha_rho=1.09, alpha_r=0.17, alpha_m=0.05,
    beta_1=-0.33, beta_2=0.97, l_inf=2.53,
    source="paper-appendix-c", fitted_on=170,
)


def _check_domain(l, d, r, rho, gqa) -> None:
    for name, value in (("layers", l), ("width", d), ("ffn_ratio", r), ("activation_rate", rho), ("gqa", gqa)):
        if np.any(np.asarray(value) <= 0):
            raise ValidationError(f"{name} must be > 0 for loss prediction")


def loss_terms_raw(l, d, r, rho, gqa, c: ScalingLawCoefficients):
    """The five additive terms; broadcasts over numpy arrays."""
    depth = c.kappa_l * np.power(l, -c.alpha_l)
    r_pow = np.power(r, -c.alpha_r)
    sparsity = c.kappa_rho * np.power(rho, c.alpha_rho) * r_pow * np.power(d, -c.beta_1)
    capacity = c.kappa_d * r_pow * np.power(d, -c.beta_2)
    # k_m / (d/gqa)**a_m  ==  k_m * gqa**a_m / d**a_m: one expression, two readings.
    kv = c.kappa_m * np.power(d / gqa, -c.alpha_m)
    return depth, sparsity, capacity, kv, c.l_inf


def loss_raw(l, d, r, rho, gqa, c: ScalingLawCoefficients):
    depth, sparsity, capacity, kv, irreducible = loss_terms_raw(l, d, r, rho, gqa, c)
    return depth + sparsity + capacity + kv + irreducible


def predict_loss(arch: ArchitectureConfig, coeffs: ScalingLawCoefficients) -> float:
    """Predicted validation loss (nats)."""
    _check_domain(arch.layers, arch.width, arch.ffn_ratio, arch.activation_rate, arch.gqa)
    return float(loss_raw(arch.layers, arch.width, arch.ffn_ratio, arch.activation_rate, arch.gqa, coeffs))


def loss_terms(arch: ArchitectureConfig, coeffs: ScalingLawCoefficients) -> dict[str, float]:
    _check_domain(arch.layers, arch.width, arch.ffn_ratio, arch.activation_rate, arch.gqa)
    values = loss_terms_raw(arch.layers, arch.width, arch.ffn_ratio, arch.activation_rate, arch.gqa, coeffs)
    return {name: float(v) for name, v in zip(TERM_NAMES, values)}


def loss_partials(arch: ArchitectureConfig, coeffs: ScalingLawCoefficients) -> dict[str, float]:
    """Analytic partials of the loss with respect to l, d, r, rho and gqa."""
    depth, sparsity, capacity, kv, _ = loss_terms_raw(
        arch.layers, arch.width, arch.ffn_ratio, arch.activation_rate, arch.gqa, coeffs)
    c = coeffs
    l, d, r, rho, g = arch.layers, arch.width, arch.ffn_ratio, arch.activation_rate, arch.gqa
    return {
        "l": float(-c.alpha_l * depth / l),
        "d": float((-c.beta_1 * sparsity - c.beta_2 * capacity - c.alpha_m * kv) / d),
        "r": float(-c.alpha_r * (sparsity + capacity) / r),
        "rho": float(c.alpha_rho * sparsity / rho),
        "gqa": float(c.alpha_m * kv / g),
    }


# Fitting

@dataclass(frozen=True)
class TrainingRunRecord:
    arch: ArchitectureConfig
    observed_loss: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.observed_loss) or self.observed_loss <= 0:
            raise ValidationError(f"observed_loss must be > 0, got {self.observed_loss!r}")


@dataclass(frozen=True)
class FitOptions:
    seed: int = 0
    holdout: float = 0.2
    n_starts: int = 16
    max_iter: int = 500
    ftol: float = 1e-12
    threads: int = 1
    use_published_start: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.holdout < 1.0:
            raise ValidationError(f"holdout must lie in [0, 1), got {self.holdout}")
        if self.n_starts < 1:
            raise ValidationError("n_starts must be >= 1")


@dataclass
class StartDiagnostic:
    index: int
    sse: float
    nfev: int
    status: int
    converged: bool


@dataclass
class FitReport:
    n_train: int
    n_val: int
    sse_train: float
    r2_train: float
    r2_val: float | None
    residuals_train: list[float]
    residuals_val: list[float]
    best_start: int
    starts: list[StartDiagnostic] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_train": self.n_train,
            "n_val": self.n_val,
            "sse_train": self.sse_train,
            "r2_train": self.r2_train,
            "r2_val": self.r2_val,
            "best_start": self.best_start,
            "residuals_train": self.residuals_train,
            "residuals_val": self.residuals_val,
            "starts": [asdict(s) for s in self.starts],
        }


# Optimiser parameter vector: log of the four prefactors, then raw exponents and L_inf.
_LOG_KAPPA = slice(0, 4)
_LOWER = np.array([-40.0] * 4 + [-3.0] * 6 + [0.0])
_UPPER = np.array([40.0] * 4 + [3.0] * 6 + [10.0])
_START_LOWER = np.array([math.log(1e-3)] * 4 + [-3.0] * 6 + [0.0])
_START_UPPER = np.array([math.log(1e4)] * 4 + [3.0] * 6 + [10.0])


def _to_params(c: ScalingLawCoefficients) -> np.ndarray:
    v = c.vector()
    p = v.copy()
    p[_LOG_KAPPA] = np.log(np.maximum(v[_LOG_KAPPA], 1e-300))
    return np.clip(p, _LOWER, _UPPER)


def _from_params(p: np.ndarray, **meta) -> ScalingLawCoefficients:
    v = np.array(p, dtype=float)
    v[_LOG_KAPPA] = np.exp(v[_LOG_KAPPA])
    return ScalingLawCoefficients.from_vector(v, **meta)


class _Design:
    """Precomputed logs of the design matrix for residual/Jacobian evaluation."""

    def __init__(self, X: np.ndarray, y: np.ndarray):
        l, d, r, rho, g = X.T
        self.y = y
        self.ln_l, self.ln_d, self.ln_r, self.ln_rho = np.log(l), np.log(d), np.log(r), np.log(rho)
        self.ln_dm = np.log(d / g)

    def terms(self, p: np.ndarray):
        lk_l, lk_rho, lk_d, lk_m, a_l, a_rho, a_r, a_m, b_1, b_2, _ = p
        t1 = np.exp(lk_l - a_l * self.ln_l)
        t2 = np.exp(lk_rho + a_rho * self.ln_rho - a_r * self.ln_r - b_1 * self.ln_d)
        t3 = np.exp(lk_d - a_r * self.ln_r - b_2 * self.ln_d)
        t4 = np.exp(lk_m - a_m * self.ln_dm)
        return t1, t2, t3, t4

    def residuals(self, p: np.ndarray) -> np.ndarray:
        t1, t2, t3, t4 = self.terms(p)
        return t1 + t2 + t3 + t4 + p[10] - self.y

    def jacobian(self, p: np.ndarray) -> np.ndarray:
        t1, t2, t3, t4 = self.terms(p)
        J = np.empty((self.y.size, 11))
        J[:, 0] = t1
        J[:, 1] = t2
        J[:, 2] = t3
        J[:, 3] = t4
        J[:, 4] = -self.ln_l * t1
        J[:, 5] = self.ln_rho * t2
        J[:, 6] = -self.ln_r * (t2 + t3)
        J[:, 7] = -self.ln_dm * t4
        J[:, 8] = -self.ln_d * t2
        J[:, 9] = -self.ln_d * t3
        J[:, 10] = 1.0
        return J


def _design_matrix(records: Sequence[TrainingRunRecord]) -> tuple[np.ndarray, np.ndarray]:
    X = np.array([r.arch.theta() for r in records], dtype=float)
    # theta order is (l, d, r, rho, gqa)
    y = np.array([r.observed_loss for r in records], dtype=float)
    return X, y


def _check_fit_data(records: Sequence[TrainingRunRecord], n_train: int) -> None:
    if len(records) < 12:
        raise InsufficientDataError(f"need at least 12 records to fit 11 coefficients, got {len(records)}")
    if n_train < 12:
        raise InsufficientDataError(
            f"only {n_train} training records remain after the holdout split; need at least 12")
    X, _ = _design_matrix(records)
    if np.any(X[:, 2] <= 0):
        raise ValidationError("ffn_ratio must be > 0 in every training record")
    distinct = [len(np.unique(X[:, j])) for j in range(5)]
    if distinct[0] < 2:
        raise InsufficientDataError("records use a single depth value")
    if distinct[1] < 2:
        raise InsufficientDataError("records use a single width value")
    if max(distinct[2], distinct[3], distinct[4]) < 2:
        raise InsufficientDataError("records do not vary any of ffn_ratio, activation_rate or gqa")


def _r2(residuals: np.ndarray, y: np.ndarray) -> float:
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return float("nan")
    return 1.0 - float(np.sum(residuals ** 2)) / ss_tot


def split_indices(n: int, holdout: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic shuffled train/validation split."""
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(holdout * n))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def fit_scaling_law(
    records: Sequence[TrainingRunRecord], options: FitOptions = FitOptions()
) -> tuple[ScalingLawCoefficients, FitReport]:
    """Multi-start bounded trust-region least squares on the training split."""
    train_idx, val_idx = split_indices(len(records), options.holdout, options.seed)
    _check_fit_data(records, len(train_idx))
    X, y = _design_matrix(records)
    train = _Design(X[train_idx], y[train_idx])

    starts = []
    n_random = options.n_starts
    if options.use_published_start:
        starts.append(_to_params(PAPER_APPENDIX_C))
        n_random -= 1
    if n_random > 0:
        sampler = qmc.LatinHypercube(d=11, seed=options.seed)
        unit = sampler.random(n_random)
        starts.extend(qmc.scale(unit, _START_LOWER, _START_UPPER))

    def run(p0: np.ndarray):
        return least_squares(
            train.residuals, p0, jac=train.jacobian, bounds=(_LOWER, _UPPER),
            method="trf", ftol=options.ftol, xtol=options.ftol, gtol=options.ftol,
            max_nfev=options.max_iter, x_scale="jac",
        )

    if options.threads > 1:
        with ThreadPoolExecutor(max_workers=options.threads) as pool:
            results = list(pool.map(run, starts))
    else:
        results = [run(p0) for p0 in starts]

    diagnostics = []
    best = None
    for i, res in enumerate(results):
        sse = float(np.sum(res.fun ** 2))
        if not math.isfinite(sse):
            sse = math.inf
        diagnostics.append(StartDiagnostic(i, sse, int(res.nfev), int(res.status), bool(res.status > 0)))
        # Strict < keeps the earliest start on ties.
        if best is None or sse < diagnostics[best].sse:
            best = i

    coeffs = _from_params(results[best].x, source="fit", fitted_on=len(train_idx))
    if not any(s.converged for s in diagnostics):
        raise ConvergenceError(
            f"no start converged within {options.max_iter} evaluations",
            best=coeffs, iterates=[s.sse for s in diagnostics])

    res_train = train.residuals(results[best].x)
    if len(val_idx):
        val = _Design(X[val_idx], y[val_idx])
        res_val = val.residuals(results[best].x)
        r2_val = _r2(res_val, val.y)
    else:
        res_val = np.empty(0)
        r2_val = None
    report = FitReport(
        n_train=len(train_idx),
        n_val=len(val_idx),
        sse_train=float(np.sum(res_train ** 2)),
        r2_train=_r2(res_train, train.y),
        r2_val=r2_val,
        residuals_train=res_train.tolist(),
        residuals_val=res_val.tolist(),
        best_start=best,
        starts=diagnostics,
    )
    return coeffs, report


# Synthetic data and CSV I/O

def synthetic_records(
    coeffs: ScalingLawCoefficients = PAPER_APPENDIX_C,
    n: int = 170,
    noise: float = 0.01,
    seed: int = 0,
    space=None,
) -> list[TrainingRunRecord]:
    """Draw ``n`` distinct grid configurations and label them with the law plus Gaussian noise."""
    from .space import SearchSpace

    space = space or SearchSpace()
    configs = space.configurations()
    rng = np.random.default_rng(seed)
    if n > len(configs):
        raise ValidationError(f"requested {n} records from a space of {len(configs)} configurations")
    picks = np.sort(rng.choice(len(configs), size=n, replace=False))
    archs = [configs[i] for i in picks]
    clean = np.array([predict_loss(a, coeffs) for a in archs])
    observed = clean + noise * rng.standard_normal(n)
    return [TrainingRunRecord(a, float(v)) for a, v in zip(archs, observed)]


CSV_HEADER = ("layers", "width", "ffn_ratio", "activation_rate", "gqa", "loss")


def records_to_csv(records: Iterable[TrainingRunRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for rec in records:
        a = rec.arch
        writer.writerow([repr(float(a.layers)), repr(float(a.width)), repr(float(a.ffn_ratio)),
                         repr(float(a.activation_rate)), repr(float(a.gqa)), repr(rec.observed_loss)])
    return buf.getvalue()


def records_from_csv(text: str, source: str = "<csv>") -> list[TrainingRunRecord]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise InsufficientDataError("training CSV is empty") from None
    if tuple(header) != CSV_HEADER:
        raise ValidationError(f"training CSV header must be {','.join(CSV_HEADER)}, got {','.join(header)}")
    records = []
    for row in reader:
        lineno = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(CSV_HEADER):
            raise ParseError(f"expected {len(CSV_HEADER)} columns, got {len(row)}", source, lineno)
        values = []
        column = 1
        for cell in row:
            try:
                values.append(float(cell))
            except ValueError:
                raise ParseError(f"not a number: {cell!r}", source, lineno, column) from None
            column += len(cell) + 1
        arch = ArchitectureConfig(layers=values[0], width=values[1], ffn_ratio=values[2],
                                  activation_rate=values[3], gqa=values[4])
        records.append(TrainingRunRecord(arch, values[5]))
    return records

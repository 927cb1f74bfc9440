"""Embodied-efficiency metrics, success-conditional averaging and baseline normalization."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Sequence

import numpy as np

from .errors import InsufficientLengthError, ValidationError
from .trajectory import EpisodeLog, SuiteRun, derive_velocities

METRICS = ("tau", "L_ee", "L_joint", "J", "R")
UNDEFINED = "n/a"


@dataclass(frozen=True)
class MetricVector:
    tau: float
    L_ee: float
    L_joint: float
    J: float
    R: float

    def __post_init__(self):
        for name in METRICS:
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValidationError(f"metric {name} must be finite and >= 0, got {v!r}")

    def as_dict(self) -> dict[str, float]:
        return {m: getattr(self, m) for m in METRICS}


@dataclass(frozen=True)
class SuiteSummary:
    """Success rate plus success-conditional metric means.

    ``means`` is ``None`` when no episode succeeded.
    """

    SR: float
    means: MetricVector | None
    n_success: int
    N: int
    suite_id: str = ""
    run_tag: str = ""

    def __post_init__(self):
        if not 0.0 <= self.SR <= 1.0:
            raise ValidationError(f"SR must lie in [0, 1], got {self.SR}")
        if not 0 <= self.n_success <= self.N:
            raise ValidationError("n_success must be between 0 and N")
        if (self.means is None) != (self.n_success == 0):
            raise ValidationError("means are defined exactly when n_success >= 1")

    @property
    def means_defined(self) -> bool:
        return self.means is not None


# -- per-episode metrics --------------------------------------------------------

def _segment_lengths(x: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.diff(x, axis=0), axis=1)


def completion_time(ep: EpisodeLog) -> float:
    return ep.T / ep.f


def ee_path_length(ep: EpisodeLog) -> float:
    if ep.T < 2:
        raise InsufficientLengthError("end-effector path length needs T >= 2")
    return float(math.fsum(_segment_lengths(ep.p)))


def joint_path_length(ep: EpisodeLog) -> float:
    if ep.T < 2:
        raise InsufficientLengthError("joint path length needs T >= 2")
    return float(math.fsum(_segment_lengths(ep.q)))


def jerk_of_velocities(qdot: np.ndarray, f: float) -> float:
    """Mean squared second difference of velocity samples, scaled by ``f**4``.

    ``qdot`` is ``(T, d)``; the sum runs over interior samples t = 2..T-1.
    """
    qdot = np.asarray(qdot, dtype=np.float64)
    if qdot.ndim == 1:
        qdot = qdot[:, None]
    T = qdot.shape[0]
    if T < 3:
        raise InsufficientLengthError("jerk needs at least 3 samples")
    second = qdot[2:] - 2.0 * qdot[1:-1] + qdot[:-2]
    return f**4 / (T - 2) * math.fsum(np.einsum("ij,ij->i", second, second))


def action_rate_of(a: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.shape[0] < 2:
        raise InsufficientLengthError("action rate needs at least 2 samples")
    return math.fsum(_segment_lengths(a)) / (a.shape[0] - 1)


def avg_jerk(ep: EpisodeLog) -> float:
    """Average jerk; velocities are derived first when the log lacks them."""
    if ep.T < 3:
        raise InsufficientLengthError("average jerk needs T >= 3")
    return jerk_of_velocities(derive_velocities(ep).qdot, ep.f)


def avg_action_rate(ep: EpisodeLog) -> float:
    if ep.T < 2:
        raise InsufficientLengthError("average action rate needs T >= 2")
    return action_rate_of(ep.a)


def episode_metrics(ep: EpisodeLog) -> MetricVector:
    return MetricVector(
        tau=completion_time(ep),
        L_ee=ee_path_length(ep),
        L_joint=joint_path_length(ep),
        J=avg_jerk(ep),
        R=avg_action_rate(ep),
    )


# -- suite-level reductions --------------------------------------------------------

def success_rate(run: SuiteRun | Sequence[EpisodeLog]) -> float:
    episodes = run.episodes if isinstance(run, SuiteRun) else tuple(run)
    if not episodes:
        raise ValidationError("success rate needs at least one episode")
    return sum(1 for e in episodes if e.success) / len(episodes)


def summarize(metrics: Sequence[MetricVector | None], success: Sequence[bool],
              suite_id: str = "", run_tag: str = "") -> SuiteSummary:
    """Success-conditional mean over precomputed per-episode metrics.

    Failed episodes contribute nothing, so their metrics may be ``None``.
    """
    N = len(success)
    if N < 1 or len(metrics) != N:
        raise ValidationError("need one metric entry per episode and N >= 1")
    kept = [m for m, s in zip(metrics, success) if s]
    n = len(kept)
    means = None
    if n:
        means = MetricVector(**{
            name: math.fsum(getattr(m, name) for m in kept) / n for name in METRICS
        })
    return SuiteSummary(SR=n / N, means=means, n_success=n, N=N,
                        suite_id=suite_id, run_tag=run_tag)


def success_conditional_mean(run: SuiteRun) -> SuiteSummary:
    metrics = [episode_metrics(e) if e.success else None for e in run.episodes]
    return summarize(metrics, [e.success for e in run.episodes],
                     suite_id=run.suite_id, run_tag=run.run_tag)


# -- normalization -------------------------------------------------------------------

@dataclass(frozen=True)
class NormalizedCell:
    """``value`` is 100 * variant / baseline; ``None`` marks an undefined ratio."""

    value: float | None
    baseline: float | None = None
    variant: float | None = None
    n_suites: int = 1
    n_total: int = 1

    @property
    def delta(self) -> float | None:
        return None if self.value is None else self.value - 100.0

    @property
    def partial(self) -> bool:
        return self.n_suites < self.n_total


@dataclass(frozen=True)
class NormalizedRow:
    run_tag: str
    baseline_tag: str
    SR_baseline: float
    SR_variant: float
    cells: dict[str, NormalizedCell] = field(default_factory=dict)
    suite_id: str = ""

    @property
    def SR_delta_pp(self) -> float:
        return 100.0 * (self.SR_variant - self.SR_baseline)


def normalize_to_baseline(baseline: SuiteSummary, variant: SuiteSummary) -> NormalizedRow:
    cells = {}
    for name in METRICS:
        b = getattr(baseline.means, name) if baseline.means else None
        v = getattr(variant.means, name) if variant.means else None
        if b is None or v is None or b == 0:
            cells[name] = NormalizedCell(None, b, v, n_suites=0)
        else:
            cells[name] = NormalizedCell(100.0 * (v / b), b, v)
    return NormalizedRow(run_tag=variant.run_tag, baseline_tag=baseline.run_tag,
                         SR_baseline=baseline.SR, SR_variant=variant.SR,
                         cells=cells, suite_id=variant.suite_id)


def aggregate_over_suites(rows: Iterable[NormalizedRow | tuple[SuiteSummary, SuiteSummary]]
                          ) -> NormalizedRow:
    """Equal-weight mean of per-suite normalized rows.

    Accepts either normalized rows or ``(baseline, variant)`` summary pairs.
    Metrics undefined in some suites are averaged over the remaining ones and
    flagged through ``NormalizedCell.partial``.
    """
    rows = [r if isinstance(r, NormalizedRow) else normalize_to_baseline(*r) for r in rows]
    if not rows:
        raise ValidationError("aggregation needs at least one suite")
    total = len(rows)
    cells = {}
    for name in METRICS:
        vals = [r.cells[name].value for r in rows if r.cells[name].value is not None]
        value = math.fsum(vals) / len(vals) if vals else None
        cells[name] = NormalizedCell(value, n_suites=len(vals), n_total=total)
    return NormalizedRow(
        run_tag=rows[0].run_tag, baseline_tag=rows[0].baseline_tag,
        SR_baseline=math.fsum(r.SR_baseline for r in rows) / total,
        SR_variant=math.fsum(r.SR_variant for r in rows) / total,
        cells=cells, suite_id="*" if total > 1 else rows[0].suite_id,
    )


# -- display ---------------------------------------------------------------------------

def round_half_away(x: float, places: int = 1) -> Decimal:
    """Round the shortest decimal repr of ``x`` half away from zero."""
    return Decimal(repr(float(x))).quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP)


def _fmt(x: float, places: int = 1) -> str:
    d = round_half_away(x, places)
    if d == 0:
        d = abs(d)
    return f"{d:.{places}f}"


def format_value(x: float, places: int = 1) -> str:
    """One-decimal display with half-away-from-zero rounding and no negative zero."""
    return _fmt(x, places)


def format_signed(x: float, places: int = 1) -> str:
    s = _fmt(x, places)
    return s if s.startswith("-") else "+" + s


def format_delta_percent(baseline: float, variant: float) -> str:
    """Relative change, e.g. ``1540.9 -> 1973.1`` gives ``'+28.0%'``."""
    if baseline == 0:
        return UNDEFINED
    return format_signed(100.0 * (variant / baseline) - 100.0) + "%"


def format_normalized(cell: NormalizedCell) -> str:
    if cell.value is None:
        return UNDEFINED
    text = f"{_fmt(cell.value)} ({format_signed(cell.delta)})"
    if cell.partial:
        text += f" [{cell.n_suites}/{cell.n_total}]"
    return text


def format_raw(cell: NormalizedCell, places: int = 1) -> str:
    """Raw variant value with its relative change, e.g. ``1973.1 (+28.0%)``."""
    if cell.variant is None:
        return UNDEFINED
    if cell.baseline is None or cell.baseline == 0:
        return f"{_fmt(cell.variant, places)} ({UNDEFINED})"
    return f"{_fmt(cell.variant, places)} ({format_delta_percent(cell.baseline, cell.variant)})"


def format_sr(SR_variant: float, SR_baseline: float | None = None) -> str:
    text = _fmt(100.0 * SR_variant)
    if SR_baseline is not None:
        text += f" ({format_signed(100.0 * SR_variant - 100.0 * SR_baseline)})"
    return text

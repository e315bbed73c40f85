"""The note's roll schedule and weight process.

The strategy holds the front and second futures contracts and shifts weight
daily from front to second; the front weight fraction is

    alpha(t) = (shift(T1, -1) - shift(t, +1)) / (shift(T1, -1) - T0)

with business-day shifts and calendar-day date differences (clamped to
[0, 1]). A simpler convention without calendar adjustments,
alpha = (T1 - t) / (T2 - T1), is available as ``alpha_convention="simple"``.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np

from .errors import ScheduleError
from .market_data import BusinessCalendar, year_fraction

ALPHA_CONVENTIONS = ("prospectus", "simple")
V_FLOOR_FRACTION = 1e-6


@dataclass(frozen=True)
class RollSchedule:
    """Front/second contract assignment and weight fraction per business day.

    ``front`` / ``second`` index into ``live_maturities`` (the contracts
    alive after the observation date, maturity-ordered).
    """

    observation_date: dt.date
    dates: tuple[dt.date, ...]
    taus: np.ndarray
    live_maturities: tuple[dt.date, ...]
    front: np.ndarray
    second: np.ndarray
    alpha: np.ndarray
    on_maturity: np.ndarray

    def __len__(self):
        return len(self.dates)


def build_roll_schedule(t0: dt.date, maturities, cal: BusinessCalendar,
                        horizon: dt.date,
                        alpha_convention: str = "prospectus") -> RollSchedule:
    """Resolve front/second contracts and alpha for every business day.

    ``maturities`` must contain at least one date at or before t0 (the
    previous roll anchor) and cover every roll window up to ``horizon``.
    """
    if alpha_convention not in ALPHA_CONVENTIONS:
        raise ScheduleError(f"unknown alpha convention '{alpha_convention}'")
    mats = sorted(maturities)
    if not any(m < t0 for m in mats):
        raise ScheduleError(
            f"need a futures maturity before the observation date {t0}"
        )
    live = tuple(m for m in mats if m > t0)
    if len(live) < 2:
        raise ScheduleError("need at least two futures maturities after t0")
    if horizon > live[-1]:
        raise ScheduleError(
            f"horizon {horizon} beyond the last futures maturity {live[-1]}"
        )

    dates = tuple(cal.business_days(t0, horizon))
    taus = np.array([year_fraction(t0, d) for d in dates])
    front = np.empty(len(dates), dtype=int)
    second = np.empty(len(dates), dtype=int)
    alpha = np.empty(len(dates))
    on_maturity = np.zeros(len(dates), dtype=bool)

    for i, d in enumerate(dates):
        prev = [m for m in mats if m < d]
        t_prev = prev[-1]
        later = [m for m in mats if m > t_prev]
        if len(later) < 2:
            raise ScheduleError(
                f"no second contract available on {d}; extend the futures list"
            )
        t1, t2 = later[0], later[1]
        front[i] = live.index(t1)
        second[i] = live.index(t2)
        on_maturity[i] = d == t1
        if alpha_convention == "prospectus":
            anchor = cal.shift(t1, -1)
            num = (anchor - cal.shift(d, 1)).days
            den = (anchor - t_prev).days
        else:
            num = (t1 - d).days
            den = (t2 - t1).days
        alpha[i] = min(max(num / den, 0.0), 1.0) if den > 0 else 0.0
        if on_maturity[i]:
            alpha[i] = 0.0  # maturing contract carries no weight on its last day

    return RollSchedule(
        observation_date=t0,
        dates=dates,
        taus=taus,
        live_maturities=live,
        front=front,
        second=second,
        alpha=alpha,
        on_maturity=on_maturity,
    )


def weights(alpha: float, f1, f2):
    """Per-unit-value holdings of front and second contracts.

    Returns (w1, w2) with w1 * f1 + w2 * f2 = 1 exactly. Accepts arrays of
    futures prices for per-path evaluation; paths whose referenced futures
    were both absorbed at zero get zero weights instead of a division blowup.
    """
    denom = alpha * np.asarray(f1, dtype=float) + (1.0 - alpha) * np.asarray(
        f2, dtype=float
    )
    guarded = np.where(denom > 1e-12, denom, np.inf)
    w1 = alpha / guarded
    w2 = (1.0 - alpha) / guarded
    return w1, w2


@dataclass(frozen=True)
class EtpState:
    """Strategy state: note value plus the referenced futures levels."""

    value: float
    f1: float
    f2: float
    front: int = 0
    second: int = 1

    def __post_init__(self):
        if self.value <= 0:
            raise ValueError("ETP value must stay positive")


def step_etp(state: EtpState, df1: float, df2: float, alpha: float, r: float,
             phi: float, dt_: float, floor: float = 0.0) -> EtpState:
    """One explicit-Euler step of dV/V = (r - phi) dt + w1 dF1 + w2 dF2.

    Weights are evaluated at the pre-step futures levels; the new value is
    floored at ``floor``.
    """
    w1, w2 = weights(alpha, state.f1, state.f2)
    new_value = state.value * (1.0 + (r - phi) * dt_ + w1 * df1 + w2 * df2)
    return EtpState(
        value=max(new_value, floor) if floor > 0 else new_value,
        f1=state.f1 + df1,
        f2=state.f2 + df2,
        front=state.front,
        second=state.second,
    )


def step_etp_paths(values: np.ndarray, f1: np.ndarray, f2: np.ndarray,
                   df1: np.ndarray, df2: np.ndarray, alpha: float,
                   carry: float, dt_: float, floor: float):
    """Vectorized step over paths; returns (new_values, floor_hits)."""
    w1, w2 = weights(alpha, f1, f2)
    new_values = values * (1.0 + carry * dt_ + w1 * df1 + w2 * df2)
    hits = int(np.count_nonzero(new_values < floor))
    return np.maximum(new_values, floor), hits

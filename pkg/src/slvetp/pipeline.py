"""End-to-end orchestration: calibrate both books, simulate, extract vols,
sweep parameters, and write reports.

A joint fit runs calibrate_eta (futures book) -> calibrate_eta (note book,
zero mean reversion) -> simulate -> discounted payoff averages at the stored
maturity slices -> implied vols. Reports carry market bid/ask next to the
model vol with its Monte Carlo standard error, so every number can be
regenerated bit-for-bit from (snapshot, parameters, paths, seed).
"""

from __future__ import annotations

import datetime as dt
import hashlib
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .black import implied_vol
from .engine import KernelSpec, ModelParams, SimulationResult, simulate
from .errors import SlvEtpError, StageError
from .localvol import (EtpLocalVol, FuturesLocalVol, MaturitySlice,
                       calibrate_eta, default_grid)
from .market_data import MarketSnapshot, year_fraction
from .strategy import build_roll_schedule

SWEEP_PARAMS = ("a", "v_bar", "kappa", "theta", "xi", "rho_v")
DEFAULT_MONEYNESS_GRID = tuple(np.round(np.arange(0.4, 2.61, 0.1), 10))


@dataclass(frozen=True)
class RunSettings:
    """Numerical settings of a run (everything except the model parameters)."""

    n_paths: int = 50_000
    seed: int = 20191107
    dt_substeps: int = 1
    alpha_convention: str = "prospectus"
    rho_mode: str = "solve"
    rho_fixed: float = 0.85
    kernel_shape: str = "quartic"
    kernel_bandwidth_mult: float = 1.5
    n_eval_points: int = 41
    pde_n_strikes: int = 300
    pde_steps_per_day: int = 64
    moneyness_grid: tuple = DEFAULT_MONEYNESS_GRID

    def kernel_spec(self) -> KernelSpec:
        return KernelSpec(shape=self.kernel_shape,
                          bandwidth_mult=self.kernel_bandwidth_mult)

    def replace(self, **kwargs) -> RunSettings:
        from dataclasses import replace as _replace

        return _replace(self, **kwargs)


@dataclass
class QuoteFit:
    expiry: dt.date
    strike: float
    bid: float
    ask: float
    model_vol: float
    model_se: float
    in_band: bool
    excluded: bool  # outside the calibration moneyness window


@dataclass
class SmilePoint:
    expiry: dt.date
    moneyness: float
    strike: float
    model_vol: float
    model_se: float


@dataclass
class RhoSummary:
    step_taus: list[float]
    step_mean: list[float]
    step_std: list[float]
    step_exceed: list[float]
    step_below: list[float]
    histograms: list[np.ndarray]

    @classmethod
    def from_record(cls, record) -> RhoSummary:
        return cls(
            step_taus=list(record.taus),
            step_mean=list(record.path_mean),
            step_std=list(record.path_std),
            step_exceed=list(record.exceed_fraction),
            step_below=list(record.below_fraction),
            histograms=[h.copy() for h in record.histograms],
        )

    def longrun(self, steps) -> tuple[float, float, float]:
        """Pooled mean/std/exceedance of the capped per-path correlation over
        the requested step indices."""
        steps = [s for s in steps if 0 <= s < len(self.step_mean)]
        if not steps:
            raise ValueError("no valid steps for the long-run statistics")
        means = np.array([self.step_mean[s] for s in steps])
        stds = np.array([self.step_std[s] for s in steps])
        exceeds = np.array([self.step_exceed[s] for s in steps])
        mean = float(np.mean(means))
        second = float(np.mean(stds**2 + means**2))
        std = math.sqrt(max(second - mean**2, 0.0))
        return mean, std, float(np.mean(exceeds))


@dataclass
class FitReport:
    asof: dt.date
    params: ModelParams
    settings: RunSettings
    vix_rows: dict
    vxx_rows: dict
    vix_smiles: dict
    vxx_smiles: dict
    rho: RhoSummary | None
    calibration_warnings: list[str]
    diagnostics: dict
    input_hash: str
    runtimes: dict = field(default_factory=dict)  # volatile; kept out of reports

    def all_rows(self):
        for md, rows in sorted(self.vix_rows.items()):
            for r in rows:
                yield "vix", md, r
        for md, rows in sorted(self.vxx_rows.items()):
            for r in rows:
                yield "vxx", md, r


# ---------------------------------------------------------------------------
# Calibration stage
# ---------------------------------------------------------------------------


def vix_calibration_slices(snapshot: MarketSnapshot) -> list[MaturitySlice]:
    slices = []
    for maturity, f0, book in snapshot.futures_books():
        fut_tau = year_fraction(snapshot.asof, maturity)
        for expiry in book.expiries():
            quotes = book.at_expiry(expiry)
            slices.append(MaturitySlice(
                tau=year_fraction(snapshot.asof, expiry),
                forward=f0,
                strikes=tuple(q.strike for q in quotes),
                vols=tuple(q.mid_vol for q in quotes),
                fut_maturity=fut_tau,
            ))
    return slices


def etp_forward(snapshot: MarketSnapshot, date: dt.date) -> float:
    carry = (snapshot.curves.rate_integral(snapshot.asof, date)
             - snapshot.curves.fee_integral(snapshot.asof, date))
    return snapshot.etp_spot * math.exp(carry)


def etp_forward_fn(snapshot: MarketSnapshot, horizon: dt.date):
    """Deterministic note forward as a function of the year fraction."""
    days = (horizon - snapshot.asof).days
    taus = np.arange(days + 1) / 365.0
    fwd = np.array([
        etp_forward(snapshot, snapshot.asof + dt.timedelta(days=i))
        for i in range(days + 1)
    ])
    return lambda t: float(np.interp(t, taus, fwd))


def etp_calibration_slices(snapshot: MarketSnapshot) -> list[MaturitySlice]:
    book = snapshot.etp_book()
    if book is None:
        return []
    slices = []
    for expiry in book.expiries():
        quotes = book.at_expiry(expiry)
        slices.append(MaturitySlice(
            tau=year_fraction(snapshot.asof, expiry),
            forward=etp_forward(snapshot, expiry),
            strikes=tuple(q.strike for q in quotes),
            vols=tuple(q.mid_vol for q in quotes),
        ))
    return slices


def calibrate_books(snapshot: MarketSnapshot, params: ModelParams,
                    settings: RunSettings):
    """Calibrate eta for the futures book and eta_V for the note book.

    Returns (vix_result, etp_result, fut_lv, etp_lv); fut_lv holds one
    FuturesLocalVol per live contract (contracts without an option book use
    the flat-extrapolated surface).
    """
    vix_slices = vix_calibration_slices(snapshot)
    if not vix_slices:
        raise SlvEtpError("snapshot has no futures option books")
    grid = default_grid([s.tau for s in vix_slices],
                        n_strikes=settings.pde_n_strikes,
                        steps_per_day=settings.pde_steps_per_day)
    vix_result = calibrate_eta(vix_slices, params.a, grid)

    etp_result, etp_lv = None, None
    etp_slices = etp_calibration_slices(snapshot)
    if etp_slices:
        grid_v = default_grid([s.tau for s in etp_slices],
                              n_strikes=settings.pde_n_strikes,
                              steps_per_day=settings.pde_steps_per_day)
        etp_result = calibrate_eta(etp_slices, 0.0, grid_v)
        horizon = snapshot.futures.maturities[-1]
        etp_lv = EtpLocalVol(etp_result.surface,
                             etp_forward_fn(snapshot, horizon))

    live = snapshot.futures.live(snapshot.asof)
    fut_lv = [
        FuturesLocalVol(vix_result.surface, price,
                        year_fraction(snapshot.asof, maturity), params.a)
        for maturity, price in zip(live.maturities, live.prices)
    ]
    return vix_result, etp_result, fut_lv, etp_lv


# ---------------------------------------------------------------------------
# Simulation stage
# ---------------------------------------------------------------------------


def books_horizon(snapshot: MarketSnapshot) -> dt.date:
    """Last option-relevant date: the latest expiry across all books."""
    dates = []
    for maturity, _, _ in snapshot.futures_books():
        dates.append(maturity)
    book = snapshot.etp_book()
    if book is not None:
        dates.extend(book.expiries())
    if not dates:
        raise SlvEtpError("snapshot has no option books")
    return max(dates)


def step_carries(snapshot: MarketSnapshot, schedule) -> np.ndarray:
    """Annualized r - phi applying on each simulation step."""
    out = np.zeros(max(len(schedule) - 1, 0))
    for n in range(len(out)):
        d1, d2 = schedule.dates[n], schedule.dates[n + 1]
        tau = year_fraction(d1, d2)
        carry = (snapshot.curves.rate_integral(d1, d2)
                 - snapshot.curves.fee_integral(d1, d2))
        out[n] = carry / tau if tau > 0 else 0.0
    return out


def run_simulation(snapshot: MarketSnapshot, params: ModelParams,
                   settings: RunSettings, fut_lv, etp_lv) -> SimulationResult:
    horizon = books_horizon(snapshot)
    schedule = build_roll_schedule(
        snapshot.asof, snapshot.futures.maturities, snapshot.calendar,
        horizon, settings.alpha_convention,
    )
    carries = step_carries(snapshot, schedule)
    book = snapshot.etp_book()
    etp_dates = book.expiries() if book is not None else ()
    return simulate(
        schedule=schedule,
        fut_lv=fut_lv,
        etp_lv=etp_lv,
        v0_etp=snapshot.etp_spot,
        carries=carries,
        params=params,
        n_paths=settings.n_paths,
        seed=settings.seed,
        kernel=settings.kernel_spec(),
        rho_mode=settings.rho_mode,
        rho_fixed=settings.rho_fixed,
        etp_slice_dates=etp_dates,
        n_eval_points=settings.n_eval_points,
        substeps=settings.dt_substeps,
    )


# ---------------------------------------------------------------------------
# Pricing from the ensemble
# ---------------------------------------------------------------------------


def _mc_vol(values: np.ndarray, forward: float, strike: float, tau: float):
    """Implied vol of the mean discounted payoff with its standard error.

    Returns (vol, se_vol); NaNs when the mean price sits outside the
    arbitrage band (empty or saturated payoff tail).
    """
    payoff = np.maximum(values - strike, 0.0)
    mean = float(np.mean(payoff))
    se = float(np.std(payoff) / math.sqrt(len(payoff)))
    try:
        vol = implied_vol(mean, forward, strike, tau)
    except SlvEtpError:
        return float("nan"), float("nan")
    lo, hi = mean - se, mean + se
    try:
        vol_lo = implied_vol(max(lo, 0.0), forward, strike, tau)
    except SlvEtpError:
        vol_lo = 0.0
    try:
        vol_hi = implied_vol(min(hi, forward * (1 - 1e-12)), forward, strike, tau)
    except SlvEtpError:
        vol_hi = vol
    return vol, 0.5 * abs(vol_hi - vol_lo)


def extract_fit(snapshot: MarketSnapshot, sim: SimulationResult,
                settings: RunSettings):
    """Model vols for every quote plus smile grids per maturity."""
    from .localvol import MONEYNESS_WINDOW

    live_maturities = list(sim.schedule.live_maturities)
    vix_rows, vix_smiles = {}, {}
    for maturity, f0, book in snapshot.futures_books():
        idx = live_maturities.index(maturity)
        if idx not in sim.fut_slices:
            raise SlvEtpError(f"no simulated slice for maturity {maturity}")
        values = sim.fut_slices[idx]
        tau = year_fraction(snapshot.asof, maturity)
        rows = []
        for q in book.at_expiry(maturity):
            vol, se = _mc_vol(values, f0, q.strike, tau)
            m = q.strike / f0
            rows.append(QuoteFit(
                expiry=maturity, strike=q.strike, bid=q.bid_vol, ask=q.ask_vol,
                model_vol=vol, model_se=se,
                in_band=bool(q.bid_vol <= vol <= q.ask_vol),
                excluded=not MONEYNESS_WINDOW[0] <= m <= MONEYNESS_WINDOW[1],
            ))
        vix_rows[maturity] = rows
        vix_smiles[maturity] = [
            SmilePoint(maturity, m, m * f0, *_mc_vol(values, f0, m * f0, tau))
            for m in settings.moneyness_grid
        ]

    vxx_rows, vxx_smiles = {}, {}
    book = snapshot.etp_book()
    if book is not None:
        for expiry in book.expiries():
            values = sim.etp_slices.get(expiry)
            if values is None:
                raise SlvEtpError(f"no simulated note slice for {expiry}")
            tau = year_fraction(snapshot.asof, expiry)
            fwd = etp_forward(snapshot, expiry)
            rows = []
            for q in book.at_expiry(expiry):
                vol, se = _mc_vol(values, fwd, q.strike, tau)
                m = q.strike / fwd
                rows.append(QuoteFit(
                    expiry=expiry, strike=q.strike, bid=q.bid_vol,
                    ask=q.ask_vol, model_vol=vol, model_se=se,
                    in_band=bool(q.bid_vol <= vol <= q.ask_vol),
                    excluded=not MONEYNESS_WINDOW[0] <= m <= MONEYNESS_WINDOW[1],
                ))
            vxx_rows[expiry] = rows
            vxx_smiles[expiry] = [
                SmilePoint(expiry, m, m * fwd, *_mc_vol(values, fwd, m * fwd, tau))
                for m in settings.moneyness_grid
            ]
    return vix_rows, vxx_rows, vix_smiles, vxx_smiles


# ---------------------------------------------------------------------------
# Joint fit / sweep / histograms
# ---------------------------------------------------------------------------


def input_hash(snapshot_text: str, params: ModelParams,
               settings: RunSettings) -> str:
    blob = "\n".join([
        snapshot_text,
        repr((params.a, params.v_bar, params.kappa, params.theta, params.xi,
              params.rho_v, params.correlation_dim)),
        repr((settings.n_paths, settings.seed, settings.dt_substeps,
              settings.alpha_convention, settings.rho_mode,
              settings.rho_fixed, settings.kernel_shape,
              settings.kernel_bandwidth_mult, settings.n_eval_points,
              settings.pde_n_strikes, settings.pde_steps_per_day,
              settings.moneyness_grid)),
    ])
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def run_joint_fit(snapshot: MarketSnapshot, params: ModelParams,
                  settings: RunSettings,
                  snapshot_text: str | None = None) -> FitReport:
    """Full pipeline on one parameter vector; stage failures carry the stage
    name."""
    runtimes = {}
    t0 = time.perf_counter()
    try:
        vix_result, etp_result, fut_lv, etp_lv = calibrate_books(
            snapshot, params, settings
        )
    except SlvEtpError as exc:
        raise StageError("calibrate-lv", exc) from exc
    runtimes["calibrate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    try:
        sim = run_simulation(snapshot, params, settings, fut_lv, etp_lv)
    except SlvEtpError as exc:
        raise StageError("simulate", exc) from exc
    runtimes["simulate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    try:
        vix_rows, vxx_rows, vix_smiles, vxx_smiles = extract_fit(
            snapshot, sim, settings
        )
    except SlvEtpError as exc:
        raise StageError("extract-vols", exc) from exc
    runtimes["extract"] = time.perf_counter() - t0

    warnings = list(vix_result.warnings)
    if etp_result is not None:
        warnings.extend(etp_result.warnings)
    rho = RhoSummary.from_record(sim.rho_record)
    diagnostics = {k: v for k, v in sim.diagnostics.items()
                   if k != "rho_paths_store"}
    diagnostics["run_flagged"] = sim.flagged
    return FitReport(
        asof=snapshot.asof,
        params=params,
        settings=settings,
        vix_rows=vix_rows,
        vxx_rows=vxx_rows,
        vix_smiles=vix_smiles,
        vxx_smiles=vxx_smiles,
        rho=rho,
        calibration_warnings=warnings,
        diagnostics=diagnostics,
        input_hash=input_hash(snapshot_text or "", params, settings),
        runtimes=runtimes,
    )


@dataclass(frozen=True)
class SweepSpec:
    """One-parameter sensitivity sweep around a base parameter vector."""

    param: str
    values: tuple[float, ...]
    base: ModelParams

    def __post_init__(self):
        if self.param not in SWEEP_PARAMS:
            raise ValueError(f"sweep parameter must be one of {SWEEP_PARAMS}")
        if not self.values:
            raise ValueError("sweep needs a non-empty value list")


@dataclass
class SweepResult:
    spec: SweepSpec
    reports: list[FitReport | None]
    errors: list[str | None]

    def atm_series(self, book: str = "vxx", moneyness: float = 1.0):
        """(value, vol, se) at the first maturity for the given moneyness."""
        out = []
        for value, report in zip(self.spec.values, self.reports):
            if report is None:
                out.append((value, float("nan"), float("nan")))
                continue
            smiles = report.vxx_smiles if book == "vxx" else report.vix_smiles
            first = sorted(smiles)[0]
            pts = [p for p in smiles[first]
                   if abs(p.moneyness - moneyness) < 1e-9]
            if not pts:
                raise ValueError(f"moneyness {moneyness} not on the smile grid")
            out.append((value, pts[0].model_vol, pts[0].model_se))
        return out

    def monotonicity_diagnostic(self, moneyness: float, decreasing: bool):
        """2-SE-aware directional check along the sweep values."""
        series = self.atm_series("vxx", moneyness)
        ok = True
        for (_, v1, s1), (_, v2, s2) in zip(series, series[1:]):
            if math.isnan(v1) or math.isnan(v2):
                ok = False
                continue
            band = 2.0 * math.hypot(s1, s2)
            if decreasing and v2 > v1 + band:
                ok = False
            if not decreasing and v2 < v1 - band:
                ok = False
        return ok, series


def run_sweep(spec: SweepSpec, snapshot: MarketSnapshot, settings: RunSettings,
              snapshot_text: str | None = None, workers: int = 1) -> SweepResult:
    """Run one report per parameter value; per-value failures are isolated.

    Sensitivity runs keep the inter-futures correlation frozen (fixed-rho
    mode) so the parameter's imprint on the note smile is visible.
    """
    sweep_settings = settings if settings.rho_mode == "fixed" else (
        settings.replace(rho_mode="fixed")
    )
    jobs = []
    for value in spec.values:
        jobs.append((spec.base.replace(**{spec.param: value}), sweep_settings))

    reports: list[FitReport | None] = [None] * len(jobs)
    errors: list[str | None] = [None] * len(jobs)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = {
                pool.submit(run_joint_fit, snapshot, p, s, snapshot_text): i
                for i, (p, s) in enumerate(jobs)
            }
            for fut, i in futs.items():
                try:
                    reports[i] = fut.result()
                except (SlvEtpError, Exception) as exc:  # keep sweeping
                    errors[i] = str(exc)
    else:
        for i, (p, s) in enumerate(jobs):
            try:
                reports[i] = run_joint_fit(snapshot, p, s, snapshot_text)
            except SlvEtpError as exc:
                errors[i] = str(exc)
    return SweepResult(spec=spec, reports=reports, errors=errors)


@dataclass
class RhoHistogram:
    day: int
    tau: float
    bin_edges: np.ndarray
    masses: np.ndarray
    mean: float
    std: float
    exceed_fraction: float


def rho_histograms(rho: RhoSummary, days) -> list[RhoHistogram]:
    """Binned capped-correlation distributions at the requested step indices
    (business days from the observation date)."""
    out = []
    edges = np.linspace(-1.0, 1.0, len(rho.histograms[0]) + 1) if rho.histograms \
        else np.linspace(-1.0, 1.0, 41)
    for day in days:
        day = int(day)
        if day < 0 or day >= len(rho.step_taus):
            raise ValueError(
                f"day {day} outside the simulated horizon "
                f"(0..{len(rho.step_taus) - 1})"
            )
        out.append(RhoHistogram(
            day=day,
            tau=rho.step_taus[day],
            bin_edges=edges,
            masses=rho.histograms[day].copy(),
            mean=rho.step_mean[day],
            std=rho.step_std[day],
            exceed_fraction=rho.step_exceed[day],
        ))
    return out

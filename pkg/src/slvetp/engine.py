"""Particle Monte Carlo for the joint futures / note dynamics.

Each futures contract diffuses as dF^i = l_i(t, F^i) sqrt(v) B^i sqrt(dt)
where v is a CIR variance, the B^i are unit-variance factors with pairwise
correlation rho(t, V_t), and the leverage l_i is re-estimated every step
from the cross-section so the contract keeps repricing its own vanillas:

    l_i(t, K) = eta_F^i(t, K) / sqrt(E[v | F^i_t = K]).

The local correlation solves, strike by strike on the note level,

    rho(t, K) = (eta_V^2(t, K) - A1(t, K) - A2(t, K)) / (2 A12(t, K)),

with A1/A2/A12 kernel-regression conditional expectations of the
weighted-leverage-variance products against V_t. Raw values are recorded
and the simulation runs on values capped into the admissible interval of
the chosen loading dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CorrelationRangeError
from .localvol import EtpLocalVol, FuturesLocalVol
from .market_data import year_fraction
from .strategy import RollSchedule, step_etp_paths, weights

V_MIN = 1e-6
A12_TOL = 1e-10
DEFAULT_EVAL_POINTS = 41
EVAL_SPAN_STDS = 4.0
CLAMP_FLAG_FRACTION = 0.5
HISTOGRAM_BINS = 40


@dataclass(frozen=True)
class ModelParams:
    """Free parameters of the dynamics: mean reversion of the normalized
    spot, CIR variance (initial level, speed, long-run mean, vol-of-vol)
    and the variance-futures correlation."""

    a: float
    v_bar: float
    kappa: float
    theta: float
    xi: float
    rho_v: float
    correlation_dim: int | str = 2  # 2 or "N"

    def __post_init__(self):
        if self.a < 0:
            raise ValueError("mean reversion a must be non-negative")
        if self.v_bar <= 0 or self.kappa <= 0 or self.theta <= 0:
            raise ValueError("v_bar, kappa, theta must be positive")
        if self.xi < 0:
            raise ValueError("xi must be non-negative")
        if not -1.0 <= self.rho_v <= 1.0:
            raise ValueError("rho_v must lie in [-1, 1]")
        if self.correlation_dim not in (2, "N"):
            raise ValueError("correlation_dim must be 2 or 'N'")

    @property
    def feller_satisfied(self) -> bool:
        return 2.0 * self.kappa * self.theta >= self.xi**2

    def replace(self, **kwargs) -> ModelParams:
        from dataclasses import replace

        return replace(self, **kwargs)


@dataclass(frozen=True)
class KernelSpec:
    """Mollifier for the cross-sectional conditional expectations."""

    shape: str = "quartic"  # or "gaussian"
    bandwidth_mult: float = 1.5  # eps = mult * std * P^(-1/5)
    bandwidth: float | None = None  # overrides the rule when set
    min_effective_samples: int = 25

    def __post_init__(self):
        if self.shape not in ("quartic", "gaussian"):
            raise ValueError("kernel shape must be 'quartic' or 'gaussian'")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.bandwidth_mult <= 0:
            raise ValueError("bandwidth_mult must be positive")

    def epsilon(self, values: np.ndarray) -> float:
        if self.bandwidth is not None:
            return self.bandwidth
        std = float(np.std(values))
        return self.bandwidth_mult * std * len(values) ** (-0.2)


def _kernel_values(u: np.ndarray, shape: str) -> np.ndarray:
    if shape == "quartic":
        inside = np.abs(u) < 1.0
        w = np.zeros_like(u)
        w[inside] = (1.0 - u[inside] ** 2) ** 2
        return w
    return np.exp(-0.5 * u * u)


def _nw_sums(y: np.ndarray, x_list: list[np.ndarray], grid: np.ndarray,
             eps: float, shape: str, chunk: int = 131072):
    """Kernel-weighted sums of each x over the evaluation grid.

    Returns (numerators, denominator, effective_counts); chunked over paths
    with a fixed accumulation order.
    """
    n_grid = len(grid)
    nums = [np.zeros(n_grid) for _ in x_list]
    den = np.zeros(n_grid)
    cnt = np.zeros(n_grid, dtype=np.int64)
    for start in range(0, len(y), chunk):
        yb = y[start:start + chunk]
        u = (yb[:, None] - grid[None, :]) / eps
        w = _kernel_values(u, shape)
        den += w.sum(axis=0)
        cnt += np.count_nonzero(np.abs(u) < 1.0, axis=0)
        for j, x in enumerate(x_list):
            nums[j] += (w * x[start:start + chunk, None]).sum(axis=0)
    return nums, den, cnt


def kernel_conditional_expectation(x, y, at, spec: KernelSpec = KernelSpec()):
    """Nadaraya-Watson estimate of E[X | Y = at].

    Evaluation points with fewer than ``spec.min_effective_samples`` paths
    inside the kernel window fall back to the global sample mean. Returns
    (estimate, fallback_flag) matching the shape of ``at``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    at_arr = np.atleast_1d(np.asarray(at, dtype=float))
    eps = spec.epsilon(y)
    if eps <= 0.0:
        est = np.full(at_arr.shape, float(np.mean(x)))
        flag = np.ones(at_arr.shape, dtype=bool)
        return (float(est[0]), bool(flag[0])) if np.isscalar(at) else (est, flag)
    nums, den, cnt = _nw_sums(y, [x], at_arr, eps, spec.shape)
    fallback = (cnt < spec.min_effective_samples) | (den <= 0.0)
    est = np.where(fallback, float(np.mean(x)),
                   nums[0] / np.where(den > 0, den, 1.0))
    if np.isscalar(at):
        return float(est[0]), bool(fallback[0])
    return est, fallback


def step_cir(v, dt: float, z, params: ModelParams):
    """Full-truncation Euler step of dv = kappa (theta - v) dt + xi sqrt(v) dZ.

    The state may go negative; all coefficients use v+ = max(v, 0).
    """
    v = np.asarray(v, dtype=float)
    v_plus = np.maximum(v, 0.0)
    out = (v + params.kappa * (params.theta - v_plus) * dt
           + params.xi * np.sqrt(v_plus) * np.asarray(z) * math.sqrt(dt))
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Equicorrelation loadings
# ---------------------------------------------------------------------------


def admissible_rho_interval(n: int, dim) -> tuple[float, float]:
    """Capping interval for the local correlation under the chosen loading
    dimension: full [-1, 1] for the two-factor rows, the positive
    semidefiniteness bound -1/(n-1) (plus a margin) for the n-factor ones."""
    if dim == 2:
        return (-1.0, 1.0)
    return (-1.0 / (n - 1) + 1e-6, 1.0)


def correlation_loadings(rho: float, n: int, dim=2) -> np.ndarray:
    """Unit-norm loading rows R_i with the prescribed pairwise correlation.

    dim=2: row i is [1, 0] for even i and [rho, sqrt(1-rho^2)] for odd i
    (adjacent rows correlate at rho). dim="N": rows of the Cholesky factor
    of the n x n equicorrelation matrix (every pair correlates at rho).
    """
    lo, hi = admissible_rho_interval(n, dim)
    if not lo <= rho <= hi:
        raise CorrelationRangeError(
            f"rho={rho} outside admissible interval [{lo:.6f}, {hi}] "
            f"for dim={dim}, n={n}"
        )
    if dim == 2:
        r = np.zeros((n, 2))
        r[0::2, 0] = 1.0
        r[1::2, 0] = rho
        r[1::2, 1] = math.sqrt(max(1.0 - rho * rho, 0.0))
        return r
    loadings = np.zeros((n, n))
    s = 0.0  # running sum of squared off-diagonal column values
    c_cols = []
    for j in range(n):
        d_j = math.sqrt(max(1.0 - s, 0.0))
        loadings[j, j] = d_j
        for m, c in enumerate(c_cols):
            loadings[j, m] = c
        c_j = (rho - s) / d_j if d_j > 0 else 0.0
        c_cols.append(c_j)
        s += c_j * c_j
    return loadings


def _factor_draws_dim2(rho_p: np.ndarray, g: np.ndarray, g_z: np.ndarray,
                       rho_v: float, n_contracts: int):
    """Per-path factor increments B (n_contracts, P) and variance driver z.

    z is built to correlate at rho_v with every futures driver, scaled down
    when the joint correlation matrix would lose positive semidefiniteness.
    """
    rho_c = np.clip(rho_p, -1.0 + 1e-12, 1.0)
    root = np.sqrt(np.maximum(1.0 - rho_c**2, 0.0))
    b = np.empty((n_contracts, len(rho_p)))
    b[0::2] = g[0]
    if n_contracts > 1:
        b[1::2] = rho_c * g[0] + root * g[1]
    lam1 = np.full_like(rho_c, rho_v)
    lam2 = rho_v * np.sqrt(np.maximum((1.0 - rho_c) / (1.0 + rho_c + 1e-12), 0.0))
    norm_sq = lam1**2 + lam2**2
    scale = np.where(norm_sq > 1.0, 1.0 / np.sqrt(norm_sq), 1.0)
    lam1, lam2, norm_sq = lam1 * scale, lam2 * scale, np.minimum(norm_sq, 1.0)
    z = lam1 * g[0] + lam2 * g[1] + np.sqrt(1.0 - norm_sq) * g_z
    return b, z


def _factor_draws_dimn(rho_p: np.ndarray, g: np.ndarray, g_z: np.ndarray,
                       rho_v: float, n_contracts: int):
    """Equicorrelation Cholesky applied path-wise (closed-form recursion)."""
    n = n_contracts
    p = len(rho_p)
    b = np.empty((n, p))
    prefix = np.zeros(p)
    s = np.zeros(p)
    colsum_acc = np.zeros(p)  # sum over factors of lam-weighted sums
    lam_cols = []
    for j in range(n):
        d_j = np.sqrt(np.maximum(1.0 - s, 1e-16))
        b[j] = prefix + d_j * g[j]
        c_j = (rho_p - s) / d_j
        lam_cols.append((d_j + c_j * (n - 1 - j)))
        prefix = prefix + c_j * g[j]
        s = s + c_j * c_j
    denom = 1.0 + (n - 1) * rho_p
    norm_sq = np.maximum(rho_v**2 * n / np.maximum(denom, 1e-12), 0.0)
    scale = np.where(norm_sq > 1.0, 1.0 / np.sqrt(norm_sq), 1.0)
    z = np.zeros(p)
    for j in range(n):
        lam_j = rho_v * lam_cols[j] / np.maximum(denom, 1e-12)
        z += scale * lam_j * g[j]
    z += np.sqrt(np.maximum(1.0 - np.minimum(norm_sq, 1.0), 0.0)) * g_z
    return b, z


# ---------------------------------------------------------------------------
# Per-step estimation helpers
# ---------------------------------------------------------------------------


def _eval_grid(values: np.ndarray, n_points: int = DEFAULT_EVAL_POINTS,
               span: float = EVAL_SPAN_STDS) -> np.ndarray:
    mu = float(np.mean(values))
    sd = float(np.std(values))
    if sd <= 1e-12 * max(abs(mu), 1.0):
        return np.array([mu])
    return np.linspace(mu - span * sd, mu + span * sd, n_points)


def leverage_on_grid(f_values: np.ndarray, v_plus: np.ndarray,
                     eta_f_on_grid: np.ndarray, grid: np.ndarray,
                     spec: KernelSpec, v_min: float = V_MIN):
    """Leverage l = eta_F / sqrt(E[v | F = K]) on an evaluation grid.

    Returns (leverage_grid, n_fallback_points).
    """
    cond, fallback = kernel_conditional_expectation(v_plus, f_values, grid, spec)
    cond = np.atleast_1d(cond)
    lev = eta_f_on_grid / np.sqrt(np.maximum(cond, v_min))
    return lev, int(np.count_nonzero(fallback))


def local_correlation_on_grid(v_paths: np.ndarray, wl1: np.ndarray,
                              wl2: np.ndarray, v_plus: np.ndarray,
                              eta_v_on_grid: np.ndarray, grid: np.ndarray,
                              spec: KernelSpec, prev: tuple | None,
                              a12_tol: float = A12_TOL):
    """Raw local correlation on the note-level grid.

    wl1/wl2 are the per-path weighted leverages of front and second
    contracts; entries where the cross term A12 degenerates inherit the
    previous step's (interpolated) value. Returns (rho_raw, n_degenerate).
    """
    x1 = wl1 * wl1 * v_plus
    x2 = wl2 * wl2 * v_plus
    x12 = wl1 * wl2 * v_plus
    eps = spec.epsilon(v_paths)
    if eps <= 0.0 or len(grid) == 1:
        a1, a2, a12 = float(np.mean(x1)), float(np.mean(x2)), float(np.mean(x12))
        a1 = np.full(len(grid), a1)
        a2 = np.full(len(grid), a2)
        a12 = np.full(len(grid), a12)
        cnt_bad = np.zeros(len(grid), dtype=bool)
    else:
        nums, den, cnt = _nw_sums(v_paths, [x1, x2, x12], grid, eps, spec.shape)
        cnt_bad = (cnt < spec.min_effective_samples) | (den <= 0.0)
        safe_den = np.where(den > 0, den, 1.0)
        a1 = np.where(cnt_bad, float(np.mean(x1)), nums[0] / safe_den)
        a2 = np.where(cnt_bad, float(np.mean(x2)), nums[1] / safe_den)
        a12 = np.where(cnt_bad, float(np.mean(x12)), nums[2] / safe_den)
    degenerate = np.abs(a12) < a12_tol
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = (eta_v_on_grid**2 - a1 - a2) / (2.0 * a12)
    if np.any(degenerate):
        if prev is None:
            rho[degenerate] = 0.0
        else:
            prev_grid, prev_rho = prev
            rho[degenerate] = np.interp(grid[degenerate], prev_grid, prev_rho)
    return rho, int(np.count_nonzero(degenerate))


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


@dataclass
class LocalCorrelationRecord:
    """Per-step local-correlation diagnostics."""

    taus: list[float] = field(default_factory=list)
    grids: list[np.ndarray] = field(default_factory=list)
    rho_raw: list[np.ndarray] = field(default_factory=list)
    rho_capped: list[np.ndarray] = field(default_factory=list)
    path_mean: list[float] = field(default_factory=list)
    path_std: list[float] = field(default_factory=list)
    exceed_fraction: list[float] = field(default_factory=list)
    below_fraction: list[float] = field(default_factory=list)
    histograms: list[np.ndarray] = field(default_factory=list)
    degenerate_points: list[int] = field(default_factory=list)

    def append_step(self, tau, grid, raw, capped, rho_paths_raw, rho_paths):
        self.taus.append(float(tau))
        self.grids.append(np.asarray(grid))
        self.rho_raw.append(np.asarray(raw))
        self.rho_capped.append(np.asarray(capped))
        self.path_mean.append(float(np.mean(rho_paths)))
        self.path_std.append(float(np.std(rho_paths)))
        self.exceed_fraction.append(float(np.mean(rho_paths_raw > 1.0)))
        self.below_fraction.append(float(np.mean(rho_paths_raw < -1.0)))
        hist, _ = np.histogram(np.clip(rho_paths, -1.0, 1.0),
                               bins=HISTOGRAM_BINS, range=(-1.0, 1.0))
        self.histograms.append(hist / max(len(rho_paths), 1))

    def __len__(self):
        return len(self.taus)


@dataclass
class SimulationResult:
    """Ensemble output: terminal slices plus per-step diagnostics."""

    schedule: RollSchedule
    n_paths: int
    seed: int
    fut_slices: dict  # contract index -> settlement values (P,)
    etp_slices: dict  # date -> note values (P,)
    rho_record: LocalCorrelationRecord
    diagnostics: dict
    flagged: bool = False


def simulate(schedule: RollSchedule, fut_lv: list[FuturesLocalVol],
             etp_lv: EtpLocalVol | None, v0_etp: float | None,
             carries: np.ndarray, params: ModelParams, n_paths: int,
             seed: int, kernel: KernelSpec = KernelSpec(),
             rho_mode: str = "solve", rho_fixed: float = 0.85,
             etp_slice_dates=(), n_eval_points: int = DEFAULT_EVAL_POINTS,
             v_min: float = V_MIN, v_floor_fraction: float = 1e-6,
             substeps: int = 1, record_rho_paths_at=()) -> SimulationResult:
    """Run the particle simulation over the roll schedule.

    ``fut_lv`` must be ordered like ``schedule.live_maturities``;
    ``carries`` holds the per-step annualized r - phi. ``rho_mode`` is
    "solve" (local correlation from the note constraint) or "fixed"
    (constant ``rho_fixed``). ``substeps`` splits every business day into
    equal Euler substeps (leverage and correlation re-estimated on each);
    diagnostics are recorded once per day. ``record_rho_paths_at`` lists
    day indices whose per-path correlation values are kept.
    """
    if rho_mode not in ("solve", "fixed"):
        raise ValueError("rho_mode must be 'solve' or 'fixed'")
    n_contracts = len(fut_lv)
    if n_contracts != len(schedule.live_maturities):
        raise ValueError("one futures local vol per live contract required")
    has_etp = etp_lv is not None and v0_etp is not None
    if rho_mode == "solve" and not has_etp:
        raise ValueError("solving the local correlation requires the note book")

    dim = 2 if params.correlation_dim == 2 else n_contracts
    rho_lo, rho_hi = admissible_rho_interval(n_contracts, params.correlation_dim)
    fut_taus = np.array(
        [year_fraction(schedule.observation_date, m)
         for m in schedule.live_maturities]
    )
    etp_slice_taus = {
        year_fraction(schedule.observation_date, d): d for d in etp_slice_dates
    }

    n_steps = len(schedule) - 1
    f_state = np.tile(
        np.array([lv.f0 for lv in fut_lv])[:, None], (1, n_paths)
    )
    v_state = np.full(n_paths, params.v_bar)
    etp_state = np.full(n_paths, float(v0_etp)) if has_etp else None
    v_floor_abs = v_floor_fraction * float(v0_etp) if has_etp else 0.0

    fut_slices: dict[int, np.ndarray] = {}
    etp_slices: dict = {}
    record = LocalCorrelationRecord()
    rho_paths_store: dict[int, np.ndarray] = {}
    diag = {
        "f_floor_hits": 0,
        "v_floor_hits": 0,
        "leverage_fallbacks": 0,
        "surface_clamp_points": 0,
        "surface_eval_points": 0,
        "rho_degenerate_points": 0,
    }
    prev_rho_curve: tuple | None = None

    for n in range(n_steps):
        tau_next = schedule.taus[n + 1]
        day_dt = tau_next - schedule.taus[n]
        alive = fut_taus >= tau_next - 1e-12
        fr = schedule.front[n]
        se = schedule.second[n]
        alpha_n = schedule.alpha[n]

        for sub in range(substeps):
            tau_n = schedule.taus[n] + sub * day_dt / substeps
            dt = day_dt / substeps
            v_plus = np.maximum(v_state, 0.0)
            sqrt_v = np.sqrt(v_plus)

            # (1) leverage per alive contract
            lev_paths = np.zeros((n_contracts, n_paths))
            for i in range(n_contracts):
                if not alive[i]:
                    continue
                grid_i = _eval_grid(f_state[i], n_eval_points)
                eta_i, clamped = fut_lv[i].eval(tau_n, grid_i,
                                                count_clamped=True)
                diag["surface_clamp_points"] += clamped
                diag["surface_eval_points"] += len(grid_i)
                lev_grid, n_fb = leverage_on_grid(
                    f_state[i], v_plus, np.atleast_1d(eta_i), grid_i, kernel,
                    v_min
                )
                diag["leverage_fallbacks"] += n_fb
                if len(grid_i) == 1:
                    lev_paths[i] = lev_grid[0]
                else:
                    lev_paths[i] = np.interp(f_state[i], grid_i, lev_grid)

            # (2) local correlation on the note level
            if rho_mode == "fixed" or not has_etp:
                rho_paths = np.full(n_paths, rho_fixed)
                rho_paths_raw = rho_paths
                grid_v = np.array([float(np.mean(etp_state))
                                   if has_etp else 0.0])
                raw_curve = np.array([rho_fixed])
                capped_curve = np.array([rho_fixed])
            elif schedule.on_maturity[n] and prev_rho_curve is not None:
                grid_v, capped_curve = prev_rho_curve
                raw_curve = capped_curve
                rho_paths = _curve_at(etp_state, grid_v, capped_curve)
                rho_paths_raw = rho_paths
            else:
                w1, w2 = weights(alpha_n, f_state[fr], f_state[se])
                wl1 = w1 * lev_paths[fr]
                wl2 = w2 * lev_paths[se]
                grid_v = _eval_grid(etp_state, n_eval_points)
                eta_v_vals = np.atleast_1d(etp_lv.eval(tau_n, grid_v))
                raw_curve, n_deg = local_correlation_on_grid(
                    etp_state, wl1, wl2, v_plus, eta_v_vals, grid_v, kernel,
                    prev_rho_curve
                )
                diag["rho_degenerate_points"] += n_deg
                capped_curve = np.clip(raw_curve, rho_lo, rho_hi)
                rho_paths = _curve_at(etp_state, grid_v, capped_curve)
                rho_paths_raw = _curve_at(etp_state, grid_v, raw_curve)
                prev_rho_curve = (grid_v, capped_curve)
            if sub == 0:
                record.append_step(tau_n, grid_v, raw_curve, capped_curve,
                                   rho_paths_raw, rho_paths)
                if n in record_rho_paths_at:
                    rho_paths_store[n] = rho_paths.copy()

            # (3)+(4) correlated factor draws
            rng = np.random.Generator(
                np.random.Philox(np.random.SeedSequence(entropy=seed,
                                                        spawn_key=(n, sub)))
            )
            draws = rng.standard_normal((dim + 1, n_paths))
            g, g_z = draws[:-1], draws[-1]
            if dim == 2:
                b, z = _factor_draws_dim2(rho_paths, g, g_z, params.rho_v,
                                          n_contracts)
            else:
                rho_safe = np.clip(rho_paths, rho_lo, rho_hi)
                b, z = _factor_draws_dimn(rho_safe, g, g_z, params.rho_v,
                                          n_contracts)

            # (5) advance futures, note, variance
            sqrt_dt = math.sqrt(dt)
            f_front_pre = f_state[fr].copy()
            f_second_pre = f_state[se].copy()
            df = np.zeros((n_contracts, n_paths))
            for i in range(n_contracts):
                if not alive[i]:
                    continue
                incr = lev_paths[i] * sqrt_v * b[i] * sqrt_dt
                new_f = f_state[i] + incr
                hits = int(np.count_nonzero(new_f < 0.0))
                diag["f_floor_hits"] += hits
                new_f = np.maximum(new_f, 0.0)
                df[i] = new_f - f_state[i]
                f_state[i] = new_f
            if has_etp:
                etp_state, hits = step_etp_paths(
                    etp_state, f_front_pre, f_second_pre,
                    df[fr], df[se], alpha_n, carries[n], dt, v_floor_abs
                )
                diag["v_floor_hits"] += hits
            v_state = step_cir(v_state, dt, z, params)

        # slice capture at the post-step date
        for i in range(n_contracts):
            if abs(fut_taus[i] - tau_next) < 1e-12 and i not in fut_slices:
                fut_slices[i] = f_state[i].copy()
        for tau_e, d in etp_slice_taus.items():
            if has_etp and abs(tau_e - tau_next) < 1e-12 and d not in etp_slices:
                etp_slices[d] = etp_state.copy()

    flagged = (
        diag["surface_eval_points"] > 0
        and diag["surface_clamp_points"]
        > CLAMP_FLAG_FRACTION * diag["surface_eval_points"]
    )
    diag["rho_paths_store"] = rho_paths_store
    return SimulationResult(
        schedule=schedule,
        n_paths=n_paths,
        seed=seed,
        fut_slices=fut_slices,
        etp_slices=etp_slices,
        rho_record=record,
        diagnostics=diag,
        flagged=flagged,
    )


def _curve_at(values: np.ndarray, grid: np.ndarray, curve: np.ndarray):
    if len(grid) == 1:
        return np.full(len(values), curve[0])
    return np.interp(values, grid, curve)

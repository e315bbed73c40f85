"""Report rendering: human-readable text tables, machine CSVs and the
resolved-config echo.

Rendered bytes are a pure function of the report content: no timestamps or
wall-clock data enter these files (runtimes go to a sidecar .log), so a rerun
with the same config and seed reproduces them exactly.
"""

from __future__ import annotations

import io
from dataclasses import asdict

from .pipeline import FitReport, RhoHistogram, SweepResult


def _fmt(x, nd=6):
    if x != x:  # NaN
        return "nan"
    return f"{x:.{nd}f}"


def render_config(report: FitReport, snapshot_path: str, mode: str) -> str:
    """Fully-resolved run configuration; feeding it back reproduces the run."""
    p, s = report.params, report.settings
    lines = [
        "# resolved run configuration",
        f"mode = {mode}",
        f"snapshot = {snapshot_path}",
        f"a = {p.a!r}",
        f"v_bar = {p.v_bar!r}",
        f"kappa = {p.kappa!r}",
        f"theta = {p.theta!r}",
        f"xi = {p.xi!r}",
        f"rho_v = {p.rho_v!r}",
        f"correlation_dim = {p.correlation_dim}",
        f"n_paths = {s.n_paths}",
        f"seed = {s.seed}",
        f"dt_substeps = {s.dt_substeps}",
        f"alpha_convention = {s.alpha_convention}",
        f"rho_mode = {s.rho_mode}",
        f"rho_fixed = {s.rho_fixed!r}",
        f"kernel_shape = {s.kernel_shape}",
        f"kernel_bandwidth_mult = {s.kernel_bandwidth_mult!r}",
        f"n_eval_points = {s.n_eval_points}",
        f"pde_n_strikes = {s.pde_n_strikes}",
        f"pde_steps_per_day = {s.pde_steps_per_day}",
    ]
    return "\n".join(lines) + "\n"


def render_fit_text(report: FitReport) -> str:
    out = io.StringIO()
    p = report.params
    out.write(f"joint fit report  (inputs {report.input_hash})\n")
    out.write(f"asof {report.asof.isoformat()}\n")
    out.write(
        "parameters: a=%s v_bar=%s kappa=%s theta=%s xi=%s rho_v=%s dim=%s\n"
        % (p.a, p.v_bar, p.kappa, p.theta, p.xi, p.rho_v, p.correlation_dim)
    )
    out.write(
        f"paths={report.settings.n_paths} seed={report.settings.seed} "
        f"rho_mode={report.settings.rho_mode}\n"
    )
    if not p.feller_satisfied:
        out.write("warning: Feller condition violated (2 kappa theta < xi^2)\n")
    for label, rows_by_mat in (("VIX", report.vix_rows), ("VXX", report.vxx_rows)):
        if not rows_by_mat:
            continue
        out.write(f"\n[{label} quotes]\n")
        out.write("expiry      strike     bid      ask      model    se       band excl\n")
        for expiry in sorted(rows_by_mat):
            for r in rows_by_mat[expiry]:
                out.write(
                    f"{expiry.isoformat()}  {r.strike:8.3f} {_fmt(r.bid, 4):>8}"
                    f" {_fmt(r.ask, 4):>8} {_fmt(r.model_vol, 4):>8}"
                    f" {_fmt(r.model_se, 4):>8}"
                    f" {'in ' if r.in_band else 'out'}"
                    f"  {'x' if r.excluded else '-'}\n"
                )
    if report.rho is not None and report.rho.step_taus:
        last = len(report.rho.step_taus) - 1
        out.write("\n[local correlation]\n")
        out.write(
            f"final step mean={_fmt(report.rho.step_mean[last], 4)} "
            f"std={_fmt(report.rho.step_std[last], 4)} "
            f"exceed={_fmt(report.rho.step_exceed[last], 4)}\n"
        )
    if report.calibration_warnings:
        out.write("\n[calibration warnings]\n")
        for w in report.calibration_warnings:
            out.write(f"- {w}\n")
    out.write("\n[diagnostics]\n")
    for key in sorted(report.diagnostics):
        out.write(f"{key} = {report.diagnostics[key]}\n")
    return out.getvalue()


def render_fit_csv(report: FitReport) -> str:
    lines = ["book,expiry,strike,bid,ask,model_vol,model_se,in_bid_ask,excluded"]
    for book, expiry, r in report.all_rows():
        lines.append(
            f"{book},{expiry.isoformat()},{_fmt(r.strike, 4)},{_fmt(r.bid)},"
            f"{_fmt(r.ask)},{_fmt(r.model_vol)},{_fmt(r.model_se)},"
            f"{int(r.in_band)},{int(r.excluded)}"
        )
    return "\n".join(lines) + "\n"


def render_smiles_csv(report: FitReport) -> str:
    lines = ["book,expiry,moneyness,strike,model_vol,model_se"]
    for book, smiles in (("vix", report.vix_smiles), ("vxx", report.vxx_smiles)):
        for expiry in sorted(smiles):
            for pt in smiles[expiry]:
                lines.append(
                    f"{book},{expiry.isoformat()},{_fmt(pt.moneyness, 4)},"
                    f"{_fmt(pt.strike, 4)},{_fmt(pt.model_vol)},{_fmt(pt.model_se)}"
                )
    return "\n".join(lines) + "\n"


def render_rho_csv(report: FitReport) -> str:
    """Per-step evaluation of the local correlation (diagnostics stream)."""
    lines = ["step,tau,mean,std,exceed_frac,below_frac"]
    rho = report.rho
    if rho is not None:
        for n, tau in enumerate(rho.step_taus):
            lines.append(
                f"{n},{tau:.8f},{_fmt(rho.step_mean[n])},{_fmt(rho.step_std[n])},"
                f"{_fmt(rho.step_exceed[n])},{_fmt(rho.step_below[n])}"
            )
    return "\n".join(lines) + "\n"


def render_runtimes(report: FitReport) -> str:
    lines = [f"{k} = {v:.3f} s" for k, v in report.runtimes.items()]
    return "\n".join(lines) + "\n"


def render_histograms_csv(hists: list[RhoHistogram]) -> str:
    lines = ["day,tau,bin_lo,bin_hi,mass"]
    for h in hists:
        for lo, hi, mass in zip(h.bin_edges[:-1], h.bin_edges[1:], h.masses):
            lines.append(
                f"{h.day},{h.tau:.8f},{_fmt(lo, 4)},{_fmt(hi, 4)},{_fmt(mass, 8)}"
            )
    return "\n".join(lines) + "\n"


def render_histograms_text(hists: list[RhoHistogram]) -> str:
    out = io.StringIO()
    out.write("local correlation histograms\n")
    for h in hists:
        out.write(
            f"\nday {h.day} (tau={h.tau:.6f}): mean={_fmt(h.mean, 4)} "
            f"std={_fmt(h.std, 4)} exceed={_fmt(h.exceed_fraction, 4)}\n"
        )
        peak = max(float(m) for m in h.masses) or 1.0
        for lo, hi, mass in zip(h.bin_edges[:-1], h.bin_edges[1:], h.masses):
            bar = "#" * int(round(40 * float(mass) / peak))
            out.write(f"  [{lo:+.2f},{hi:+.2f}) {_fmt(mass, 5)} {bar}\n")
    return out.getvalue()


def render_sweep_csv(sweep: SweepResult) -> str:
    """Note smiles per maturity with one vol column per swept value."""
    spec = sweep.spec
    header = ["expiry", "moneyness"]
    header += [f"vol_{spec.param}_{v:g}" for v in spec.values]
    lines = [",".join(header)]
    any_report = next((r for r in sweep.reports if r is not None), None)
    if any_report is None:
        return lines[0] + "\n"
    expiries = sorted(any_report.vxx_smiles)
    grid = [pt.moneyness for pt in any_report.vxx_smiles[expiries[0]]]
    for expiry in expiries:
        for j, m in enumerate(grid):
            row = [expiry.isoformat(), _fmt(m, 4)]
            for rep in sweep.reports:
                if rep is None:
                    row.append("nan")
                else:
                    row.append(_fmt(rep.vxx_smiles[expiry][j].model_vol))
            lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def render_sweep_text(sweep: SweepResult) -> str:
    out = io.StringIO()
    spec = sweep.spec
    out.write(f"sweep over {spec.param}: values {list(spec.values)}\n")
    for value, err in zip(spec.values, sweep.errors):
        if err is not None:
            out.write(f"value {value:g}: FAILED ({err})\n")
    atm = sweep.atm_series("vxx", 1.0)
    out.write("\nfirst-maturity ATM note vol per value:\n")
    for value, vol, se in atm:
        out.write(f"  {spec.param}={value:<8g} vol={_fmt(vol, 4)} se={_fmt(se, 4)}\n")
    if spec.param == "a":
        ok, _ = sweep.monotonicity_diagnostic(1.0, decreasing=True)
        out.write(f"\ndiagnostic: ATM vol decreasing in a -> {'pass' if ok else 'FAIL'}\n")
    if spec.param == "xi":
        ok, _ = sweep.monotonicity_diagnostic(0.5, decreasing=False)
        out.write(
            f"\ndiagnostic: moneyness-0.5 vol increasing in xi -> "
            f"{'pass' if ok else 'FAIL'}\n"
        )
    return out.getvalue()

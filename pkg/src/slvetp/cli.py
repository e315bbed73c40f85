"""Batch command line: snapshot -> calibration -> simulation -> reports.

Subcommands: calibrate-lv, simulate, joint-fit, sweep, histograms. A plain
``key = value`` config file supplies the model parameters and numerical
settings; command-line flags override file values. Every run writes its
fully-resolved configuration next to its outputs so it can be reproduced
exactly.

Exit codes: 0 success, 2 bad configuration or snapshot, 3 numerical failure
(with stage attribution on stderr).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .engine import ModelParams
from .errors import (ConfigError, MarketDataError, SlvEtpError,
                     SnapshotFormatError, StageError)
from .market_data import load_market_snapshot
from .pipeline import (RunSettings, SweepSpec, SWEEP_PARAMS, input_hash,
                       rho_histograms, run_joint_fit, run_sweep)

DEFAULT_PARAMS = dict(a=7.5, v_bar=1.0, kappa=2.5, theta=2.5, xi=1.1,
                      rho_v=0.75, correlation_dim=2)
DEFAULT_DAYS = (2, 9, 59, 67)

_KEY_DOC = {
    "snapshot": "path to the market snapshot file",
    "out_dir": "output directory for reports (default '.')",
    "figures": "true/false: render PNG figures next to the reports",
    "a": "mean-reversion speed of the normalized spot (>= 0)",
    "v_bar": "initial variance (> 0)",
    "kappa": "variance mean-reversion speed (> 0)",
    "theta": "long-run variance (> 0)",
    "xi": "volatility of variance (>= 0)",
    "rho_v": "variance-futures correlation in [-1, 1]",
    "correlation_dim": "loading dimension: 2 or N",
    "n_paths": "Monte Carlo paths (> 0)",
    "seed": "master RNG seed",
    "dt_substeps": "simulation substeps per business day (>= 1)",
    "alpha_convention": "roll weight convention: prospectus | simple",
    "rho_mode": "solve | fixed local correlation",
    "rho_fixed": "constant correlation when rho_mode = fixed",
    "kernel_shape": "quartic | gaussian regression kernel",
    "kernel_bandwidth_mult": "bandwidth rule multiplier (> 0)",
    "n_eval_points": "strikes per kernel evaluation grid (>= 3)",
    "pde_n_strikes": "strike nodes of the calibration PDE grid",
    "pde_steps_per_day": "time steps per day of the calibration PDE grid",
    "param": "sweep parameter: " + "|".join(SWEEP_PARAMS),
    "values": "sweep values: comma list or start:stop:step",
    "days": "histogram days (business days from asof), comma list",
    "surfaces": "surface file from calibrate-lv (simulate only)",
}

_INT_KEYS = {"n_paths", "seed", "n_eval_points", "pde_n_strikes",
             "pde_steps_per_day", "dt_substeps"}
_FLOAT_KEYS = {"a", "v_bar", "kappa", "theta", "xi", "rho_v", "rho_fixed",
               "kernel_bandwidth_mult"}
_BOOL_KEYS = {"figures"}


def parse_config_file(path: str) -> dict:
    cfg: dict = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}", key="config")
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value'",
                              key="config")
        key, _, value = line.partition("=")
        cfg[key.strip()] = value.strip()
    return cfg


def coerce_config(cfg: dict) -> dict:
    out = {}
    for key, value in cfg.items():
        if key not in _KEY_DOC:
            raise ConfigError("unknown configuration key", key=key)
        try:
            if key in _INT_KEYS:
                out[key] = int(value)
            elif key in _FLOAT_KEYS:
                out[key] = float(value)
            elif key in _BOOL_KEYS:
                if str(value).lower() not in ("true", "false", "1", "0"):
                    raise ValueError("expected true/false")
                out[key] = str(value).lower() in ("true", "1")
            elif key == "correlation_dim":
                if str(value) not in ("2", "N"):
                    raise ValueError("expected 2 or N")
                out[key] = 2 if str(value) == "2" else "N"
            else:
                out[key] = value
        except ValueError as exc:
            raise ConfigError(f"bad value '{value}' ({exc})", key=key)
    return out


def parse_values(spec: str) -> tuple[float, ...]:
    """Sweep values, either '0,1,2' or 'start:stop:step' (stop inclusive)."""
    spec = spec.strip()
    if ":" in spec:
        parts = spec.split(":")
        if len(parts) != 3:
            raise ConfigError("range must be start:stop:step", key="values")
        start, stop, step = (float(p) for p in parts)
        if step <= 0:
            raise ConfigError("range step must be positive", key="values")
        values = []
        x = start
        while x <= stop + 1e-12:
            values.append(round(x, 12))
            x += step
        return tuple(values)
    try:
        return tuple(float(tok) for tok in spec.split(",") if tok.strip())
    except ValueError:
        raise ConfigError(f"bad values list '{spec}'", key="values")


def build_objects(cfg: dict):
    params_kwargs = dict(DEFAULT_PARAMS)
    for key in ("a", "v_bar", "kappa", "theta", "xi", "rho_v",
                "correlation_dim"):
        if key in cfg:
            params_kwargs[key] = cfg[key]
    try:
        params = ModelParams(**params_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc), key="model parameters")

    settings_kwargs = {}
    for key in ("n_paths", "seed", "dt_substeps", "alpha_convention",
                "rho_mode", "rho_fixed", "kernel_shape",
                "kernel_bandwidth_mult", "n_eval_points", "pde_n_strikes",
                "pde_steps_per_day"):
        if key in cfg:
            settings_kwargs[key] = cfg[key]
    try:
        settings = RunSettings(**settings_kwargs)
        if settings.n_paths <= 0:
            raise ValueError("n_paths must be positive")
        if settings.n_eval_points < 3:
            raise ValueError("n_eval_points must be at least 3")
        if settings.dt_substeps < 1:
            raise ValueError("dt_substeps must be at least 1")
        settings.kernel_spec()  # validates the kernel fields
        if settings.alpha_convention not in ("prospectus", "simple"):
            raise ValueError("alpha_convention must be prospectus or simple")
        if settings.rho_mode not in ("solve", "fixed"):
            raise ValueError("rho_mode must be solve or fixed")
    except ValueError as exc:
        raise ConfigError(str(exc), key="settings")
    return params, settings


def _load_snapshot(cfg: dict):
    if "snapshot" not in cfg:
        raise ConfigError("missing snapshot path", key="snapshot")
    path = cfg["snapshot"]
    if not os.path.exists(path):
        raise ConfigError(f"snapshot file '{path}' does not exist",
                          key="snapshot")
    snap = load_market_snapshot(path)
    text = Path(path).read_text(encoding="utf-8")
    return snap, text


def _write(path: Path, content: str):
    path.write_text(content, encoding="utf-8")
    return str(path)


def _report_files(report, outdir: Path, snapshot_path: str, mode: str,
                  figures: bool):
    from . import reports as rep

    stem = outdir / f"fit_{report.input_hash}"
    written = [
        _write(Path(f"{stem}.txt"), rep.render_fit_text(report)),
        _write(Path(f"{stem}.csv"), rep.render_fit_csv(report)),
        _write(Path(f"{stem}_smiles.csv"), rep.render_smiles_csv(report)),
        _write(Path(f"{stem}_rho.csv"), rep.render_rho_csv(report)),
        _write(Path(f"{stem}.cfg"),
               rep.render_config(report, snapshot_path, mode)),
        _write(Path(f"{stem}.log"), rep.render_runtimes(report)),
    ]
    if figures:
        from .figures import save_fit_figures

        written.extend(save_fit_figures(report, str(stem)))
    return written


def cmd_joint_fit(cfg: dict) -> int:
    snap, text = _load_snapshot(cfg)
    params, settings = build_objects(cfg)
    outdir = Path(cfg.get("out_dir", "."))
    outdir.mkdir(parents=True, exist_ok=True)
    report = run_joint_fit(snap, params, settings, snapshot_text=text)
    written = _report_files(report, outdir, cfg["snapshot"], "joint-fit",
                            cfg.get("figures", True))
    for path in written:
        print(path)
    return 0


def cmd_calibrate_lv(cfg: dict) -> int:
    from .localvol import dump_surfaces
    from .pipeline import calibrate_books

    snap, text = _load_snapshot(cfg)
    params, settings = build_objects(cfg)
    outdir = Path(cfg.get("out_dir", "."))
    outdir.mkdir(parents=True, exist_ok=True)
    vix_result, etp_result, _, _ = calibrate_books(snap, params, settings)
    surfaces = {"vix": (vix_result.surface, params.a)}
    if etp_result is not None:
        surfaces["etp"] = (etp_result.surface, 0.0)
    tag = input_hash(text, params, settings)
    path = _write(outdir / f"surfaces_{tag}.txt", dump_surfaces(surfaces))
    print(path)
    lines = ["calibration summary"]
    for name, result in (("vix", vix_result), ("etp", etp_result)):
        if result is None:
            continue
        for tau in sorted(result.residuals):
            lines.append(
                f"{name} tau={tau:.6f}: residual {result.residuals[tau]:.2e} "
                f"in {result.iterations[tau]} iterations"
            )
        for w in result.warnings:
            lines.append(f"{name} warning: {w}")
        for tau, strike in result.excluded:
            lines.append(f"{name} excluded quote tau={tau:.6f} K={strike}")
    print(_write(outdir / f"surfaces_{tag}_report.txt",
                 "\n".join(lines) + "\n"))
    return 0


def cmd_simulate(cfg: dict) -> int:
    from . import reports as rep
    from .localvol import EtpLocalVol, FuturesLocalVol, load_surfaces
    from .market_data import year_fraction
    from .pipeline import (RhoSummary, calibrate_books, etp_forward_fn,
                           run_simulation)

    snap, text = _load_snapshot(cfg)
    params, settings = build_objects(cfg)
    outdir = Path(cfg.get("out_dir", "."))
    outdir.mkdir(parents=True, exist_ok=True)

    surfaces_path = cfg.get("surfaces")
    if surfaces_path:
        loaded = load_surfaces(Path(surfaces_path).read_text(encoding="utf-8"))
        if "vix" not in loaded:
            raise ConfigError("surface file lacks a [surface vix] section",
                              key="surfaces")
        vix_surface, a_stored = loaded["vix"]
        if abs(a_stored - params.a) > 1e-12:
            raise ConfigError(
                f"surface file was calibrated at a={a_stored}, config has "
                f"a={params.a}", key="a")
        live = snap.futures.live(snap.asof)
        fut_lv = [
            FuturesLocalVol(vix_surface, price,
                            year_fraction(snap.asof, maturity), params.a)
            for maturity, price in zip(live.maturities, live.prices)
        ]
        etp_lv = None
        if "etp" in loaded:
            etp_lv = EtpLocalVol(loaded["etp"][0],
                                 etp_forward_fn(snap, snap.futures.maturities[-1]))
    else:
        _, _, fut_lv, etp_lv = calibrate_books(snap, params, settings)

    sim = run_simulation(snap, params, settings, fut_lv, etp_lv)
    tag = input_hash(text, params, settings)
    rho = RhoSummary.from_record(sim.rho_record)

    lines = ["step,tau,mean,std,exceed_frac,below_frac"]
    for n, tau in enumerate(rho.step_taus):
        lines.append(
            f"{n},{tau:.8f},{rho.step_mean[n]:.6f},{rho.step_std[n]:.6f},"
            f"{rho.step_exceed[n]:.6f},{rho.step_below[n]:.6f}"
        )
    print(_write(outdir / f"sim_{tag}_rho.csv", "\n".join(lines) + "\n"))

    summary = [
        "ensemble summary",
        f"paths = {sim.n_paths}",
        f"seed = {sim.seed}",
        f"steps = {len(sim.schedule) - 1}",
        f"flagged = {sim.flagged}",
    ]
    for key in sorted(k for k in sim.diagnostics if k != "rho_paths_store"):
        summary.append(f"{key} = {sim.diagnostics[key]}")
    for i, mat in enumerate(sim.schedule.live_maturities):
        if i in sim.fut_slices:
            vals = sim.fut_slices[i]
            summary.append(
                f"futures[{mat.isoformat()}] mean={vals.mean():.6f} "
                f"std={vals.std():.6f}"
            )
    for d in sorted(sim.etp_slices):
        vals = sim.etp_slices[d]
        summary.append(
            f"note[{d.isoformat()}] mean={vals.mean():.6f} std={vals.std():.6f}"
        )
    print(_write(outdir / f"sim_{tag}_summary.txt", "\n".join(summary) + "\n"))
    return 0


def cmd_sweep(cfg: dict) -> int:
    from . import reports as rep

    snap, text = _load_snapshot(cfg)
    params, settings = build_objects(cfg)
    if "param" not in cfg:
        raise ConfigError("sweep requires 'param'", key="param")
    if "values" not in cfg:
        raise ConfigError("sweep requires 'values'", key="values")
    if cfg["param"] not in SWEEP_PARAMS:
        raise ConfigError(f"must be one of {SWEEP_PARAMS}", key="param")
    values = parse_values(cfg["values"])
    spec = SweepSpec(param=cfg["param"], values=values, base=params)
    outdir = Path(cfg.get("out_dir", "."))
    outdir.mkdir(parents=True, exist_ok=True)
    workers = int(os.environ.get("SLV_ETP_THREADS", "1") or "1")
    sweep = run_sweep(spec, snap, settings, snapshot_text=text,
                      workers=max(workers, 1))
    tag = input_hash(text + f"|sweep {cfg['param']} {values}", params, settings)
    print(_write(outdir / f"sweep_{tag}.csv", rep.render_sweep_csv(sweep)))
    print(_write(outdir / f"sweep_{tag}.txt", rep.render_sweep_text(sweep)))
    if cfg.get("figures", True):
        from .figures import save_sweep_figure

        print(save_sweep_figure(sweep, str(outdir / f"sweep_{tag}.png")))
    return 0


def cmd_histograms(cfg: dict) -> int:
    from . import reports as rep

    snap, text = _load_snapshot(cfg)
    params, settings = build_objects(cfg)
    days = DEFAULT_DAYS
    if "days" in cfg:
        try:
            days = tuple(int(tok) for tok in cfg["days"].split(",") if tok.strip())
        except ValueError:
            raise ConfigError(f"bad days list '{cfg['days']}'", key="days")
    outdir = Path(cfg.get("out_dir", "."))
    outdir.mkdir(parents=True, exist_ok=True)
    report = run_joint_fit(snap, params, settings, snapshot_text=text)
    hists = rho_histograms(report.rho, days)
    tag = report.input_hash
    print(_write(outdir / f"rho_hist_{tag}.csv",
                 rep.render_histograms_csv(hists)))
    print(_write(outdir / f"rho_hist_{tag}.txt",
                 rep.render_histograms_text(hists)))
    if cfg.get("figures", True):
        from .figures import save_histogram_figure

        print(save_histogram_figure(hists, str(outdir / f"rho_hist_{tag}.png")))
    return 0


_COMMANDS = {
    "joint-fit": cmd_joint_fit,
    "calibrate-lv": cmd_calibrate_lv,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "histograms": cmd_histograms,
}


def _key_help() -> str:
    lines = ["configuration keys (config file or flags):"]
    for key, doc in _KEY_DOC.items():
        lines.append(f"  {key:<22} {doc}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slvetp",
        description="Joint calibration of futures and note option books "
                    "with a stochastic local-volatility particle engine.",
        epilog=_key_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name, epilog=_key_help(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--snapshot", help=_KEY_DOC["snapshot"])
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--out", dest="out_dir", help=_KEY_DOC["out_dir"])
        p.add_argument("--paths", dest="n_paths", type=int,
                       help=_KEY_DOC["n_paths"])
        p.add_argument("--seed", type=int, help=_KEY_DOC["seed"])
        p.add_argument("--rho-mode", dest="rho_mode",
                       choices=("solve", "fixed"), help=_KEY_DOC["rho_mode"])
        p.add_argument("--figures", dest="figures", action="store_true",
                       default=None, help="render PNG figures (default on)")
        p.add_argument("--no-figures", dest="figures", action="store_false",
                       help="skip PNG figures")
        p.add_argument("--set", action="append", default=[],
                       metavar="KEY=VALUE",
                       help="override any configuration key")
        if name == "sweep":
            p.add_argument("--param", choices=SWEEP_PARAMS,
                           help=_KEY_DOC["param"])
            p.add_argument("--values", help=_KEY_DOC["values"])
        if name == "histograms":
            p.add_argument("--days", help=_KEY_DOC["days"])
        if name == "simulate":
            p.add_argument("--surfaces",
                           help="surface file from calibrate-lv")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg: dict = {}
        if args.config:
            cfg.update(coerce_config(parse_config_file(args.config)))
        overrides = {}
        for key in ("snapshot", "out_dir", "n_paths", "seed", "rho_mode",
                    "figures", "param", "values", "days", "surfaces"):
            value = getattr(args, key, None)
            if value is not None:
                overrides[key] = value
        for item in args.set:
            if "=" not in item:
                raise ConfigError("--set expects KEY=VALUE", key="set")
            key, _, value = item.partition("=")
            overrides[key.strip()] = value.strip()
        str_overrides = {k: str(v) for k, v in overrides.items()
                         if k not in ("surfaces",)}
        cfg.update(coerce_config(str_overrides))
        if "surfaces" in overrides:
            cfg["surfaces"] = overrides["surfaces"]
        return _COMMANDS[args.command](cfg)
    except (ConfigError, SnapshotFormatError, MarketDataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except SlvEtpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

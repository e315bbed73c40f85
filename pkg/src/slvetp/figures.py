"""Figure rendering for fit reports, sweeps and correlation histograms.

PNGs land next to the text/CSV outputs. The Agg backend is forced so batch
runs need no display; metadata is pinned so repeated runs write identical
bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .pipeline import FitReport, RhoHistogram, SweepResult

_PNG_META = {"Software": "slvetp"}
_DPI = 110


def _smile_panel(ax, rows, smiles, forward_label):
    quotes = sorted(rows, key=lambda r: r.strike)
    strikes = np.array([q.strike for q in quotes])
    bid = np.array([q.bid for q in quotes])
    ask = np.array([q.ask for q in quotes])
    ax.fill_between(strikes, bid, ask, color="firebrick", alpha=0.25,
                    label="bid-ask")
    pts = [p for p in smiles if p.model_vol == p.model_vol]
    ax.plot([p.strike for p in pts], [p.model_vol for p in pts],
            color="tab:blue", lw=1.8, label="model")
    ax.set_xlabel(forward_label)
    ax.set_ylabel("volatility")
    ax.grid(alpha=0.3)


def save_fit_figures(report: FitReport, stem: str) -> list[str]:
    """One smile figure per book plus the correlation history; returns the
    written paths."""
    written = []
    for book, rows_by_mat, smiles_by_mat in (
        ("vix", report.vix_rows, report.vix_smiles),
        ("vxx", report.vxx_rows, report.vxx_smiles),
    ):
        if not rows_by_mat:
            continue
        mats = sorted(rows_by_mat)
        ncols = 2
        nrows = (len(mats) + ncols - 1) // ncols
        fig, axes = plt.subplots(nrows, ncols, figsize=(10, 3.6 * nrows),
                                 squeeze=False)
        for ax in axes.ravel()[len(mats):]:
            ax.set_visible(False)
        for ax, mat in zip(axes.ravel(), mats):
            _smile_panel(ax, rows_by_mat[mat], smiles_by_mat[mat], "strike")
            ax.set_title(f"{book.upper()} {mat.isoformat()}")
            ax.legend(loc="upper left", fontsize=8)
        fig.tight_layout()
        path = f"{stem}_{book}.png"
        fig.savefig(path, dpi=_DPI, metadata=_PNG_META)
        plt.close(fig)
        written.append(path)

    if report.rho is not None and report.rho.step_taus:
        fig, ax = plt.subplots(figsize=(8, 4))
        taus = np.array(report.rho.step_taus) * 365.0
        mean = np.array(report.rho.step_mean)
        std = np.array(report.rho.step_std)
        ax.plot(taus, mean, color="tab:blue", lw=1.5, label="mean")
        ax.fill_between(taus, mean - std, mean + std, color="tab:blue",
                        alpha=0.2, label="+-1 std")
        ax.plot(taus, report.rho.step_exceed, color="firebrick", lw=1.0,
                label="exceed frac")
        ax.set_xlabel("days")
        ax.set_ylabel("local correlation")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = f"{stem}_rho.png"
        fig.savefig(path, dpi=_DPI, metadata=_PNG_META)
        plt.close(fig)
        written.append(path)
    return written


def save_histogram_figure(hists: list[RhoHistogram], path: str) -> str:
    ncols = 2
    nrows = (len(hists) + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(9, 3.2 * nrows),
                             squeeze=False)
    for ax in axes.ravel()[len(hists):]:
        ax.set_visible(False)
    for ax, h in zip(axes.ravel(), hists):
        centers = 0.5 * (h.bin_edges[:-1] + h.bin_edges[1:])
        width = h.bin_edges[1] - h.bin_edges[0]
        ax.bar(centers, h.masses, width=width, color="tab:blue", alpha=0.7)
        ax.set_title(f"day {h.day}  mean={h.mean:.2f} std={h.std:.2f}")
        ax.set_xlabel("local correlation")
        ax.set_ylabel("probability")
        ax.set_xlim(-1.05, 1.05)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI, metadata=_PNG_META)
    plt.close(fig)
    return path


def save_sweep_figure(sweep: SweepResult, path: str) -> str:
    """Note smiles of the first maturity, one curve per swept value."""
    spec = sweep.spec
    fig, ax = plt.subplots(figsize=(8, 5))
    cmap = plt.get_cmap("viridis")
    drew = False
    for j, (value, rep) in enumerate(zip(spec.values, sweep.reports)):
        if rep is None:
            continue
        first = sorted(rep.vxx_smiles)[0]
        pts = [p for p in rep.vxx_smiles[first] if p.model_vol == p.model_vol]
        color = cmap(j / max(len(spec.values) - 1, 1))
        ax.plot([p.moneyness for p in pts], [p.model_vol for p in pts],
                color=color, lw=1.4, label=f"{spec.param}={value:g}")
        drew = True
    if drew:
        ax.legend(fontsize=8, ncol=2)
    ax.set_xlabel("moneyness")
    ax.set_ylabel("volatility")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI, metadata=_PNG_META)
    plt.close(fig)
    return path

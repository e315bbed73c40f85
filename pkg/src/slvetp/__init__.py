"""Joint calibration of VIX futures and VXX note options: local-volatility
surfaces from a forward PDE plus a particle Monte Carlo that pins leverage
functions and a local inter-futures correlation so both books reprice."""

from .black import (VanillaSpec, black_call, black_call_price, implied_vol,
                    normalized_call_from_quote)
from .engine import (KernelSpec, ModelParams, correlation_loadings,
                     kernel_conditional_expectation, simulate, step_cir)
from .localvol import (EtpLocalVol, FuturesLocalVol, LocalVolSurface,
                       MaturitySlice, NormalizedCallSurface, PdeGrid,
                       calibrate_eta, default_grid, eta_futures,
                       solve_dupire_forward)
from .market_data import (BusinessCalendar, CarryCurves, FuturesTermStructure,
                          MarketSnapshot, OptionQuote, OptionQuoteBook,
                          load_market_snapshot, shift_business_days,
                          year_fraction)
from .pipeline import (FitReport, RunSettings, SweepSpec, rho_histograms,
                       run_joint_fit, run_sweep)
from .strategy import (EtpState, RollSchedule, build_roll_schedule, step_etp,
                       weights)

__version__ = "0.1.0"

__all__ = [
    "BusinessCalendar", "CarryCurves", "EtpLocalVol", "EtpState", "FitReport",
    "FuturesLocalVol", "FuturesTermStructure", "KernelSpec", "LocalVolSurface",
    "MarketSnapshot", "MaturitySlice", "ModelParams", "NormalizedCallSurface",
    "OptionQuote", "OptionQuoteBook", "PdeGrid", "RollSchedule", "RunSettings",
    "SweepSpec", "VanillaSpec", "black_call", "black_call_price",
    "build_roll_schedule", "calibrate_eta", "correlation_loadings",
    "default_grid", "eta_futures", "implied_vol",
    "kernel_conditional_expectation", "load_market_snapshot",
    "normalized_call_from_quote", "rho_histograms", "run_joint_fit",
    "run_sweep", "shift_business_days", "simulate", "solve_dupire_forward",
    "step_cir", "step_etp", "weights", "year_fraction",
]

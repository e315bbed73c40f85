"""Lognormal (Black-76) pricing on forwards and robust implied-vol inversion.

Also hosts the map from a quoted futures-option vol to the effective strike
and normalized call price consumed by the forward PDE solver. All functions
are pure and accept numpy arrays where it is useful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import ImpliedVolBoundError, StrikeMappingError

MAX_VOL = 20.0
PRICE_TOL = 1e-10


@dataclass(frozen=True)
class VanillaSpec:
    """A plain-vanilla call on a forward."""

    forward: float
    strike: float
    expiry: float
    vol: float
    discount: float = 1.0

    def __post_init__(self):
        if self.forward <= 0 or self.strike <= 0:
            raise ValueError("forward and strike must be positive")
        if self.expiry < 0 or self.vol < 0:
            raise ValueError("expiry and vol must be non-negative")
        if not 0 < self.discount <= 1:
            raise ValueError("discount factor must be in (0, 1]")


def black_call(spec: VanillaSpec) -> float:
    """Discounted Black-76 call price for a VanillaSpec."""
    return float(
        black_call_price(spec.forward, spec.strike, spec.expiry, spec.vol)
        * spec.discount
    )


def black_call_price(forward, strike, expiry, vol):
    """Undiscounted Black-76 call price; broadcasts over numpy inputs."""
    forward = np.asarray(forward, dtype=float)
    strike = np.asarray(strike, dtype=float)
    stddev = np.asarray(vol, dtype=float) * np.sqrt(expiry)
    intrinsic = np.maximum(forward - strike, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = np.log(forward / strike) / stddev + 0.5 * stddev
        d2 = d1 - stddev
        live = forward * ndtr(d1) - strike * ndtr(d2)
    price = np.where(stddev > 0, live, intrinsic)
    out = np.maximum(price, intrinsic)
    return out if out.ndim else float(out)


def black_put_price(forward, strike, expiry, vol):
    """Undiscounted put via call-put parity."""
    return black_call_price(forward, strike, expiry, vol) - (
        np.asarray(forward, dtype=float) - strike
    )


def black_vega(forward, strike, expiry, vol):
    """d(undiscounted price)/d(vol)."""
    stddev = np.asarray(vol, dtype=float) * np.sqrt(expiry)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = np.log(np.asarray(forward, float) / strike) / stddev + 0.5 * stddev
    pdf = np.exp(-0.5 * d1 * d1) / math.sqrt(2.0 * math.pi)
    out = np.where(stddev > 0, forward * pdf * np.sqrt(expiry), 0.0)
    return out if out.ndim else float(out)


def implied_vol(price: float, forward: float, strike: float, expiry: float,
                discount: float = 1.0) -> float:
    """Invert the Black-76 call price for the lognormal vol.

    Bisection-safeguarded Newton; converges to PRICE_TOL in undiscounted
    price. Prices at intrinsic return vol 0; prices outside the arbitrage
    band raise ImpliedVolBoundError naming the violated bound.
    """
    if expiry <= 0:
        raise ValueError("implied_vol requires a positive expiry")
    target = price / discount
    intrinsic = max(forward - strike, 0.0)
    upper = forward
    scale = max(forward, 1e-12)
    if target < intrinsic - PRICE_TOL * scale:
        raise ImpliedVolBoundError(
            f"price {price} below intrinsic {intrinsic * discount}", bound="lower"
        )
    if target > upper + PRICE_TOL * scale:
        raise ImpliedVolBoundError(
            f"price {price} above forward bound {upper * discount}", bound="upper"
        )
    if target <= intrinsic + PRICE_TOL * scale:
        return 0.0
    if target >= upper - PRICE_TOL * scale:
        raise ImpliedVolBoundError(
            f"price {price} at or above forward bound {upper * discount}",
            bound="upper",
        )

    # Brenner-Subrahmanyam style seed from the ATM rational approximation.
    atm_guess = math.sqrt(2.0 * math.pi / expiry) * (target - 0.5 * intrinsic) / forward
    sigma = min(max(atm_guess, 1e-4), 5.0)

    lo, hi = 0.0, sigma
    while black_call_price(forward, strike, expiry, hi) < target:
        lo = hi
        hi *= 2.0
        if hi > MAX_VOL:
            hi = MAX_VOL
            break

    for _ in range(100):
        value = black_call_price(forward, strike, expiry, sigma)
        diff = value - target
        if abs(diff) <= PRICE_TOL * scale:
            return sigma
        if diff > 0:
            hi = sigma
        else:
            lo = sigma
        vega = black_vega(forward, strike, expiry, sigma)
        candidate = sigma - diff / vega if vega > 1e-14 else None
        if candidate is not None and lo < candidate < hi:
            sigma = candidate
        else:
            sigma = 0.5 * (lo + hi)
    return sigma


def effective_strike(strike: float, f0: float, expiry: float, fut_maturity: float,
                     mean_reversion: float) -> float:
    """Strike of the equivalent normalized-spot option.

    ``expiry`` is the option expiry and ``fut_maturity`` the maturity of the
    underlying futures contract, both in year fractions; the exponential
    carries the mean reversion accumulated over [expiry, fut_maturity].
    """
    if fut_maturity < expiry:
        raise StrikeMappingError(
            f"futures maturity {fut_maturity} before option expiry {expiry}"
        )
    grow = math.exp(mean_reversion * (fut_maturity - expiry))
    return 1.0 - (1.0 - strike / f0) * grow


def normalized_call_from_quote(vol: float, strike: float, f0: float, expiry: float,
                               fut_maturity: float, mean_reversion: float
                               ) -> tuple[float, float]:
    """Map a quoted futures-option vol to (effective strike, normalized call).

    The normalized price is the undiscounted option price divided by
    ``f0 * exp(-a * (fut_maturity - expiry))``, so that pricing the call on
    the normalized spot at the effective strike reproduces the futures-option
    price under the affine contract map.
    """
    k = effective_strike(strike, f0, expiry, fut_maturity, mean_reversion)
    if k <= 0.0:
        raise StrikeMappingError(
            f"effective strike {k:.6f} <= 0 for strike {strike} "
            f"(too far below the forward for mean reversion {mean_reversion})"
        )
    undiscounted = black_call_price(f0, strike, expiry, vol)
    shrink = math.exp(-mean_reversion * (fut_maturity - expiry))
    return k, undiscounted / (f0 * shrink)

"""Build the bundled November 2019 market snapshot.

Near-the-money quotes are anchored to exchange marks from 2019-11-07; each
maturity's full smile is an SVI total-variance curve fitted through the
anchors (to machine precision) and two wing-level targets, then sampled on
an exchange-style strike ladder and validated to be free of butterfly and
monotonicity arbitrage before the file is written.

Run from the repository root:  python3 tools/build_snapshot.py
"""

from __future__ import annotations

import datetime as dt
import math
import sys
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from slvetp.black import black_call_price  # noqa: E402
from slvetp.market_data import parse_market_snapshot  # noqa: E402

ASOF = dt.date(2019, 11, 7)
ETP_SPOT = 19.22
RATE = 0.0155
FEE = 0.0089

HOLIDAYS = [
    "2019-11-28",  # Thanksgiving
    "2019-12-25",  # Christmas
    "2020-01-01",  # New Year
    "2020-01-20",  # Martin Luther King Jr.
    "2020-02-17",  # Presidents Day
]

FUTURES = [
    ("2019-10-16", 15.50),  # expired front anchor for the roll schedule
    ("2019-11-20", 14.60),
    ("2019-12-18", 16.15),
    ("2020-01-22", 17.45),
    ("2020-02-19", 18.15),
    ("2020-03-18", 18.65),  # next contract, carried for the roll window
]

# (strike, mid_vol, half_spread) anchors near the money per maturity.
VIX_ANCHORS = {
    "2019-11-20": [(14.0, 1.0739, 0.14345), (14.5, 1.0911, 0.11430),
                   (15.0, 1.1392, 0.14545)],
    "2019-12-18": [(15.0, 0.8642, 0.06300), (16.0, 0.9030, 0.05880),
                   (17.0, 0.9170, 0.05260)],
    "2020-01-22": [(16.0, 0.7263, 0.05210), (17.0, 0.7540, 0.04875),
                   (18.0, 0.7839, 0.04750)],
    "2020-02-19": [(17.0, 0.6896, 0.04860), (18.0, 0.7103, 0.03980),
                   (19.0, 0.7360, 0.04560)],
}

VXX_ANCHORS = {
    "2019-11-15": [(19.0, 0.4602, 0.01740), (19.5, 0.5030, 0.00670),
                   (20.0, 0.5473, 0.02090)],
    "2019-12-20": [(19.0, 0.6050, 0.00380), (19.5, 0.6154, 0.01160),
                   (20.0, 0.6329, 0.01190)],
    "2020-01-17": [(19.0, 0.6450, 0.00800), (19.5, 0.6514, 0.01165),
                   (20.0, 0.6735, 0.00735)],
}

# wing-level targets (log-moneyness, vol) steering the synthetic smiles
VIX_WING_TARGETS = {
    "2019-11-20": ((-0.45, 0.95), (1.10, 1.90)),
    "2019-12-18": ((-0.42, 0.82), (1.10, 1.22)),
    "2020-01-22": ((-0.42, 0.67), (1.10, 0.93)),
    "2020-02-19": ((-0.44, 0.64), (1.10, 0.86)),
}

VXX_WING_TARGETS = {
    "2019-11-15": ((-0.70, 0.58), (1.00, 1.20)),
    "2019-12-20": ((-0.90, 0.66), (1.00, 1.02)),
    "2020-01-17": ((-0.90, 0.69), (1.05, 1.01)),
}

# strike ladders (moneyness coverage ~0.5..3+ with exchange-style spacing)
VIX_STRIKES = {
    "2019-11-20": [10, 11, 12, 13, 14, 14.5, 15, 16, 17, 18, 19, 20, 22,
                   24, 26, 29, 32, 36, 40, 43, 50, 60, 80],
    "2019-12-18": [11, 12, 13, 14, 15, 16, 17, 18, 19, 20, 22, 24, 26, 29,
                   32, 36, 40, 45, 47, 55, 65, 80],
    "2020-01-22": [12, 13, 14, 15, 16, 17, 18, 19, 20, 22, 24, 26, 29, 32,
                   36, 40, 45, 50, 60, 70, 80],
    "2020-02-19": [12, 13, 14, 15, 16, 17, 18, 19, 20, 22, 24, 26, 29, 32,
                   36, 40, 45, 50, 65, 80],
}

VXX_STRIKES = {
    "2019-11-15": [10, 12, 14, 15, 16, 17, 18, 18.5, 19, 19.5, 20, 20.5,
                   21, 22, 23, 24, 26, 28, 30, 33, 36, 40, 45, 50, 57],
    "2019-12-20": [8, 10, 12, 14, 15, 16, 17, 18, 18.5, 19, 19.5, 20, 20.5,
                   21, 22, 23, 24, 26, 28, 30, 33, 36, 40, 45, 50, 57],
    "2020-01-17": [10, 12, 14, 15, 16, 17, 18, 18.5, 19, 19.5, 20, 20.5,
                   21, 22, 23, 24, 26, 28, 30, 33, 36, 40, 45, 50, 55],
}

ANCHOR_WEIGHT = 1e4  # anchors are hard constraints
WING_WEIGHT = 50.0   # wing levels held close but not exactly


def svi_total_variance(x, p):
    a, b, rho, m, s = p
    return a + b * (rho * (x - m) + np.sqrt((x - m) ** 2 + s * s))


def fit_svi(tau, anchors_x, anchors_vol, wing_lo, wing_hi):
    """SVI parameters matching the anchors exactly and the wings softly."""
    xs = np.array(list(anchors_x) + [wing_lo[0], wing_hi[0]])
    ws = np.array(list(anchors_vol) + [wing_lo[1], wing_hi[1]]) ** 2 * tau
    weights = np.array([ANCHOR_WEIGHT] * len(anchors_x)
                       + [WING_WEIGHT, WING_WEIGHT])

    def resid(p):
        return (svi_total_variance(xs, p) - ws) * weights

    slope = (ws[-1] - ws[len(anchors_x) - 1]) / (xs[-1] - xs[len(anchors_x) - 1])
    p0 = np.array([ws[0] * 0.8, max(slope, 1e-3), 0.6, -0.05, 0.2])
    bounds = ([1e-8, 1e-6, -0.999, -2.0, 1e-4], [5.0, 20.0, 0.999, 2.0, 5.0])
    best = None
    for rho0 in (0.3, 0.6, 0.9):
        for m0 in (-0.15, -0.05, 0.05):
            start = p0.copy()
            start[2], start[3] = rho0, m0
            sol = least_squares(resid, start, bounds=bounds, xtol=1e-15,
                                ftol=1e-15, gtol=1e-15, max_nfev=4000)
            if best is None or sol.cost < best.cost:
                best = sol
    anchor_err = np.max(np.abs(
        np.sqrt(svi_total_variance(np.array(anchors_x), best.x) / tau)
        - np.array(anchors_vol)
    ))
    return best.x, anchor_err


def smile_from_anchors(expiry, forward, anchors, wing_targets):
    tau = (dt.date.fromisoformat(expiry) - ASOF).days / 365.0
    ax = [math.log(k / forward) for k, _, _ in anchors]
    av = [v for _, v, _ in anchors]
    params, err = fit_svi(tau, ax, av, *wing_targets)
    anchor_map = {k: v for k, v, _ in anchors}

    def vol(strike):
        if strike in anchor_map:
            return anchor_map[strike]
        x = math.log(strike / forward)
        return float(math.sqrt(svi_total_variance(x, params) / tau))

    return vol, err


def spread_function(anchors):
    """Half-spread: exact at anchors, widening into the wings."""
    ref = float(np.mean([hs for _, _, hs in anchors]))
    anchor_map = {k: hs for k, _, hs in anchors}

    def half_spread(strike, forward):
        if strike in anchor_map:
            return anchor_map[strike]
        x = abs(math.log(strike / forward))
        return ref * (1.0 + 1.6 * x)

    return half_spread


def check_no_arbitrage(label, forward, tau, strikes, mids):
    prices = [black_call_price(forward, k, tau, v)
              for k, v in zip(strikes, mids)]
    ok = True
    for i in range(1, len(prices)):
        if prices[i] >= prices[i - 1] - 1e-12:
            print(f"  {label}: call not decreasing at K={strikes[i]}")
            ok = False
    for i in range(1, len(prices) - 1):
        wl = (strikes[i + 1] - strikes[i]) / (strikes[i + 1] - strikes[i - 1])
        hull = wl * prices[i - 1] + (1 - wl) * prices[i + 1]
        if prices[i] > hull + 1e-10:
            print(f"  {label}: butterfly violation at K={strikes[i]} "
                  f"({prices[i] - hull:.2e})")
            ok = False
    return ok


def etp_forward(expiry: str) -> float:
    days = (dt.date.fromisoformat(expiry) - ASOF).days
    return ETP_SPOT * math.exp((RATE - FEE) * days / 365.0)


def build() -> str:
    lines = [
        "version=1",
        f"asof={ASOF.isoformat()}",
        f"etp_spot={ETP_SPOT}",
        "# Reconstructed snapshot. Near-the-money quotes anchored to",
        "# 2019-11-07 exchange marks; wings, the March futures price and",
        "# the rate/fee levels are synthetic reconstructions.",
        "[calendar]",
        *HOLIDAYS,
        "[futures]",
        *[f"{d} {p}" for d, p in FUTURES],
        "[curves]",
        f"rate 2019-10-01 {RATE}",
        f"fee 2019-10-01 {FEE}",
    ]

    all_ok = True
    fut_prices = dict(FUTURES)
    for expiry, anchors in VIX_ANCHORS.items():
        f0 = fut_prices[expiry]
        tau = (dt.date.fromisoformat(expiry) - ASOF).days / 365.0
        vol, err = smile_from_anchors(expiry, f0, anchors,
                                      VIX_WING_TARGETS[expiry])
        print(f"vix {expiry}: svi anchor err {err:.2e}")
        hs = spread_function(anchors)
        strikes = VIX_STRIKES[expiry]
        mids = [vol(k) for k in strikes]
        all_ok &= check_no_arbitrage(f"vix {expiry}", f0, tau, strikes, mids)
        lines.append(f"[quotes fut {expiry}]")
        for k, mid in zip(strikes, mids):
            h = hs(k, f0)
            lines.append(f"{expiry} {k} {mid - h:.4f} {mid + h:.4f}")

    lines.append("[quotes etp]")
    for expiry, anchors in VXX_ANCHORS.items():
        fwd = etp_forward(expiry)
        tau = (dt.date.fromisoformat(expiry) - ASOF).days / 365.0
        vol, err = smile_from_anchors(expiry, fwd, anchors,
                                      VXX_WING_TARGETS[expiry])
        print(f"vxx {expiry}: svi anchor err {err:.2e}")
        hs = spread_function(anchors)
        strikes = VXX_STRIKES[expiry]
        mids = [vol(k) for k in strikes]
        all_ok &= check_no_arbitrage(f"vxx {expiry}", fwd, tau, strikes, mids)
        for k, mid in zip(strikes, mids):
            h = hs(k, fwd)
            lines.append(f"{expiry} {k} {mid - h:.4f} {mid + h:.4f}")

    if not all_ok:
        raise SystemExit("arbitrage found in generated smiles; adjust wings")
    return "\n".join(lines) + "\n"


def main():
    text = build()
    snap = parse_market_snapshot(text)  # full schema + invariant validation
    out = Path(__file__).resolve().parents[1] / "src/slvetp/data/nov2019.snap"
    out.write_text(text, encoding="utf-8")
    n_quotes = sum(len(b.quotes) for b in snap.books.values())
    print(f"wrote {out} ({n_quotes} quotes, "
          f"{len(snap.futures)} futures entries)")


if __name__ == "__main__":
    main()

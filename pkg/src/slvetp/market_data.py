"""Market snapshot loading, validation and business-date arithmetic.

A snapshot is a single UTF-8 text file with a ``version=1`` header,
``asof``/``etp_spot`` header keys and the line-oriented sections
``[calendar]``, ``[futures]``, ``[curves]`` and ``[quotes <underlying>]``.
Everything in this module is immutable after loading and safe to share
across threads.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field

from .errors import DateOrderError, MarketDataError, SnapshotFormatError

DAYS_PER_YEAR = 365.0

_WEEKEND = (5, 6)  # Saturday, Sunday


def year_fraction(d1: dt.date, d2: dt.date) -> float:
    """ACT/365F year fraction between two dates (d1 <= d2)."""
    if d1 > d2:
        raise DateOrderError(f"year_fraction requires d1 <= d2, got {d1} > {d2}")
    return (d2 - d1).days / DAYS_PER_YEAR


@dataclass(frozen=True)
class BusinessCalendar:
    """Holiday calendar with the Saturday/Sunday weekend convention."""

    holidays: frozenset[dt.date] = frozenset()

    def is_business_day(self, d: dt.date) -> bool:
        return d.weekday() not in _WEEKEND and d not in self.holidays

    def shift(self, d: dt.date, n: int) -> dt.date:
        """n-th business day strictly after (n>0) or before (n<0) d.

        n=0 returns d itself when d is a business day, otherwise the next
        business day.
        """
        if n == 0:
            while not self.is_business_day(d):
                d += dt.timedelta(days=1)
            return d
        step = dt.timedelta(days=1 if n > 0 else -1)
        remaining = abs(n)
        while remaining > 0:
            d += step
            if self.is_business_day(d):
                remaining -= 1
        return d

    def business_days(self, start: dt.date, end: dt.date) -> list[dt.date]:
        """All business days in [start, end], inclusive."""
        out = []
        d = start
        while d <= end:
            if self.is_business_day(d):
                out.append(d)
            d += dt.timedelta(days=1)
        return out


def shift_business_days(d: dt.date, n: int, cal: BusinessCalendar) -> dt.date:
    """Calendar-date shift of n business days (free-function form)."""
    return cal.shift(d, n)


@dataclass(frozen=True)
class FuturesTermStructure:
    """Maturity-ordered futures quotes observed at the snapshot date."""

    maturities: tuple[dt.date, ...]
    prices: tuple[float, ...]

    def __post_init__(self):
        if len(self.maturities) != len(self.prices):
            raise MarketDataError("futures maturities/prices length mismatch")
        bad = [f"{m}: {p}" for m, p in zip(self.maturities, self.prices) if p <= 0.0]
        if bad:
            raise MarketDataError("non-positive futures prices: " + ", ".join(bad))
        for a, b in zip(self.maturities, self.maturities[1:]):
            if a >= b:
                raise MarketDataError(
                    f"futures maturities not strictly increasing at {a} >= {b}"
                )

    def __len__(self):
        return len(self.maturities)

    def price(self, maturity: dt.date) -> float:
        try:
            return self.prices[self.maturities.index(maturity)]
        except ValueError:
            raise MarketDataError(f"no futures contract with maturity {maturity}")

    def live(self, asof: dt.date) -> FuturesTermStructure:
        """Contracts with maturity strictly after asof."""
        keep = [(m, p) for m, p in zip(self.maturities, self.prices) if m > asof]
        return FuturesTermStructure(
            tuple(m for m, _ in keep), tuple(p for _, p in keep)
        )


@dataclass(frozen=True)
class OptionQuote:
    expiry: dt.date
    strike: float
    bid_vol: float
    ask_vol: float

    @property
    def mid_vol(self) -> float:
        return 0.5 * (self.bid_vol + self.ask_vol)


@dataclass(frozen=True)
class OptionQuoteBook:
    """Vanilla call quotes (lognormal implied vols) for one underlying.

    ``underlying_id`` is ``fut:<maturity>`` for options on a futures
    contract or ``etp`` for options on the note.
    """

    underlying_id: str
    quotes: tuple[OptionQuote, ...]

    def __post_init__(self):
        bad = [q for q in self.quotes if q.bid_vol > q.ask_vol]
        if bad:
            raise MarketDataError(
                f"{self.underlying_id}: bid above ask for "
                + ", ".join(f"{q.expiry}/{q.strike}" for q in bad)
            )
        bad = [q for q in self.quotes if q.strike <= 0.0]
        if bad:
            raise MarketDataError(
                f"{self.underlying_id}: non-positive strikes "
                + ", ".join(str(q.strike) for q in bad)
            )
        for expiry in self.expiries():
            n = sum(1 for q in self.quotes if q.expiry == expiry)
            if n < 3:
                raise MarketDataError(
                    f"{self.underlying_id}: only {n} quotes at {expiry}, "
                    "need at least 3 per maturity"
                )

    def expiries(self) -> list[dt.date]:
        return sorted({q.expiry for q in self.quotes})

    def at_expiry(self, expiry: dt.date) -> list[OptionQuote]:
        return sorted(
            (q for q in self.quotes if q.expiry == expiry), key=lambda q: q.strike
        )


@dataclass(frozen=True)
class CarryCurves:
    """Deterministic instantaneous rate r(t) and fee phi(t).

    Both are piecewise-constant in calendar time; a segment applies from its
    start date until the next segment (the last one extends indefinitely).
    """

    rate_segments: tuple[tuple[dt.date, float], ...]
    fee_segments: tuple[tuple[dt.date, float], ...]

    def __post_init__(self):
        for name, segs in (("rate", self.rate_segments), ("fee", self.fee_segments)):
            if not segs:
                raise MarketDataError(f"{name} curve has no segments")
            for (d1, _), (d2, _) in zip(segs, segs[1:]):
                if d1 >= d2:
                    raise MarketDataError(f"{name} curve segments out of order")

    @staticmethod
    def _integral(segs, d1: dt.date, d2: dt.date) -> float:
        if d1 > d2:
            raise DateOrderError("curve integral requires d1 <= d2")
        if d1 < segs[0][0]:
            raise MarketDataError(
                f"curve does not cover {d1} (first segment starts {segs[0][0]})"
            )
        total = 0.0
        for i, (start, value) in enumerate(segs):
            end = segs[i + 1][0] if i + 1 < len(segs) else None
            lo = max(start, d1)
            hi = d2 if end is None else min(end, d2)
            if hi > lo:
                total += value * year_fraction(lo, hi)
        return total

    def rate_integral(self, d1: dt.date, d2: dt.date) -> float:
        return self._integral(self.rate_segments, d1, d2)

    def fee_integral(self, d1: dt.date, d2: dt.date) -> float:
        return self._integral(self.fee_segments, d1, d2)

    def discount(self, d1: dt.date, d2: dt.date) -> float:
        import math

        return math.exp(-self.rate_integral(d1, d2))

    def carry_rate(self, d: dt.date) -> float:
        """Instantaneous r - phi applying on date d."""
        return self._value(self.rate_segments, d) - self._value(self.fee_segments, d)

    @staticmethod
    def _value(segs, d: dt.date) -> float:
        value = None
        for start, v in segs:
            if start <= d:
                value = v
        if value is None:
            raise MarketDataError(f"curve does not cover {d}")
        return value


@dataclass(frozen=True)
class MarketSnapshot:
    asof: dt.date
    calendar: BusinessCalendar
    futures: FuturesTermStructure
    books: dict[str, OptionQuoteBook] = field(default_factory=dict)
    curves: CarryCurves = None
    etp_spot: float | None = None

    def futures_books(self) -> list[tuple[dt.date, float, OptionQuoteBook]]:
        """(maturity, F0, book) for every futures option book, maturity-ordered."""
        out = []
        for uid, book in self.books.items():
            if uid.startswith("fut:"):
                maturity = dt.date.fromisoformat(uid[4:])
                out.append((maturity, self.futures.price(maturity), book))
        out.sort(key=lambda t: t[0])
        return out

    def etp_book(self) -> OptionQuoteBook | None:
        return self.books.get("etp")


# ---------------------------------------------------------------------------
# Snapshot file parsing / serialization
# ---------------------------------------------------------------------------


def _parse_date(token: str, line_no: int, fieldname: str) -> dt.date:
    try:
        return dt.date.fromisoformat(token)
    except ValueError:
        raise SnapshotFormatError(
            f"bad ISO-8601 date '{token}'", line_no=line_no, field=fieldname
        )


def _parse_float(token: str, line_no: int, fieldname: str) -> float:
    try:
        return float(token)
    except ValueError:
        raise SnapshotFormatError(
            f"bad decimal '{token}'", line_no=line_no, field=fieldname
        )


def load_market_snapshot(path) -> MarketSnapshot:
    """Load and validate a snapshot file.

    Raises SnapshotFormatError on schema violations (with line numbers) and
    MarketDataError when a parsed object breaks one of its invariants.
    """
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_market_snapshot(text)


def parse_market_snapshot(text: str) -> MarketSnapshot:
    header: dict[str, str] = {}
    section = None
    holidays: list[dt.date] = []
    fut_rows: list[tuple[dt.date, float]] = []
    curve_rows: dict[str, list[tuple[dt.date, float]]] = {"rate": [], "fee": []}
    quote_rows: dict[str, list[OptionQuote]] = {}

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise SnapshotFormatError("unterminated section header", line_no)
            parts = line[1:-1].split()
            if parts[0] == "calendar" and len(parts) == 1:
                section = ("calendar",)
            elif parts[0] == "futures" and len(parts) == 1:
                section = ("futures",)
            elif parts[0] == "curves" and len(parts) == 1:
                section = ("curves",)
            elif parts[0] == "quotes" and len(parts) in (2, 3):
                if parts[1] == "etp" and len(parts) == 2:
                    uid = "etp"
                elif parts[1] == "fut" and len(parts) == 3:
                    maturity = _parse_date(parts[2], line_no, "quotes maturity")
                    uid = f"fut:{maturity.isoformat()}"
                else:
                    raise SnapshotFormatError(
                        f"bad quotes underlying '{' '.join(parts[1:])}'", line_no
                    )
                if uid in quote_rows:
                    raise SnapshotFormatError(f"duplicate section for '{uid}'", line_no)
                quote_rows[uid] = []
                section = ("quotes", uid)
            else:
                raise SnapshotFormatError(f"unknown section '{line}'", line_no)
            continue
        if section is None:
            if "=" not in line:
                raise SnapshotFormatError(
                    "expected key=value header line before first section", line_no
                )
            key, _, value = line.partition("=")
            header[key.strip()] = value.strip()
            continue
        if section[0] == "calendar":
            holidays.append(_parse_date(line, line_no, "holiday"))
        elif section[0] == "futures":
            toks = line.split()
            if len(toks) != 2:
                raise SnapshotFormatError(
                    "futures line must be '<maturity> <price>'", line_no
                )
            fut_rows.append(
                (
                    _parse_date(toks[0], line_no, "futures maturity"),
                    _parse_float(toks[1], line_no, "futures price"),
                )
            )
        elif section[0] == "curves":
            toks = line.split()
            if len(toks) != 3 or toks[0] not in curve_rows:
                raise SnapshotFormatError(
                    "curves line must be 'rate|fee <date> <value>'", line_no
                )
            curve_rows[toks[0]].append(
                (
                    _parse_date(toks[1], line_no, f"{toks[0]} date"),
                    _parse_float(toks[2], line_no, f"{toks[0]} value"),
                )
            )
        else:
            toks = line.split()
            if len(toks) != 4:
                raise SnapshotFormatError(
                    "quote line must be '<expiry> <strike> <bid_vol> <ask_vol>'",
                    line_no,
                )
            quote_rows[section[1]].append(
                OptionQuote(
                    expiry=_parse_date(toks[0], line_no, "expiry"),
                    strike=_parse_float(toks[1], line_no, "strike"),
                    bid_vol=_parse_float(toks[2], line_no, "bid_vol"),
                    ask_vol=_parse_float(toks[3], line_no, "ask_vol"),
                )
            )

    if header.get("version") != "1":
        raise SnapshotFormatError(
            f"unsupported or missing version '{header.get('version')}'", field="version"
        )
    if "asof" not in header:
        raise SnapshotFormatError("missing 'asof' header", field="asof")
    asof = _parse_date(header["asof"], 1, "asof")
    etp_spot = None
    if "etp_spot" in header:
        etp_spot = _parse_float(header["etp_spot"], 1, "etp_spot")
        if etp_spot <= 0:
            raise MarketDataError("etp_spot must be positive")
    known = {"version", "asof", "etp_spot"}
    unknown = set(header) - known
    if unknown:
        raise SnapshotFormatError(f"unknown header keys {sorted(unknown)}")

    calendar = BusinessCalendar(frozenset(holidays))
    futures = FuturesTermStructure(
        tuple(d for d, _ in fut_rows), tuple(p for _, p in fut_rows)
    )
    if not curve_rows["rate"] or not curve_rows["fee"]:
        raise MarketDataError("curves section must define both rate and fee")
    curves = CarryCurves(tuple(curve_rows["rate"]), tuple(curve_rows["fee"]))

    books: dict[str, OptionQuoteBook] = {}
    for uid, quotes in quote_rows.items():
        if not quotes:
            raise MarketDataError(f"empty quote list in section '{uid}'")
        book = OptionQuoteBook(uid, tuple(quotes))
        if uid.startswith("fut:"):
            maturity = dt.date.fromisoformat(uid[4:])
            if maturity not in futures.maturities:
                raise MarketDataError(
                    f"quotes reference futures maturity {maturity} "
                    "absent from [futures]"
                )
            late = [q for q in book.quotes if q.expiry > maturity]
            if late:
                raise MarketDataError(
                    f"{uid}: option expiry after futures maturity for "
                    + ", ".join(f"{q.expiry}/{q.strike}" for q in late)
                )
        for q in book.quotes:
            if q.expiry <= asof:
                raise MarketDataError(f"{uid}: expiry {q.expiry} not after asof {asof}")
        books[uid] = book

    if "etp" in books and etp_spot is None:
        raise MarketDataError("etp quotes present but no etp_spot header")

    # rate/fee must cover asof onwards
    curves.rate_integral(asof, asof)
    curves.fee_integral(asof, asof)

    return MarketSnapshot(
        asof=asof,
        calendar=calendar,
        futures=futures,
        books=books,
        curves=curves,
        etp_spot=etp_spot,
    )


def dump_market_snapshot(snap: MarketSnapshot) -> str:
    """Serialize a snapshot back to the text format (round-trips with load)."""
    lines = ["version=1", f"asof={snap.asof.isoformat()}"]
    if snap.etp_spot is not None:
        lines.append(f"etp_spot={snap.etp_spot}")
    lines.append("[calendar]")
    lines.extend(d.isoformat() for d in sorted(snap.calendar.holidays))
    lines.append("[futures]")
    lines.extend(
        f"{m.isoformat()} {p}" for m, p in zip(snap.futures.maturities, snap.futures.prices)
    )
    lines.append("[curves]")
    lines.extend(f"rate {d.isoformat()} {v}" for d, v in snap.curves.rate_segments)
    lines.extend(f"fee {d.isoformat()} {v}" for d, v in snap.curves.fee_segments)
    for uid in sorted(snap.books):
        if uid == "etp":
            lines.append("[quotes etp]")
        else:
            lines.append(f"[quotes fut {uid[4:]}]")
        for q in sorted(snap.books[uid].quotes, key=lambda q: (q.expiry, q.strike)):
            lines.append(
                f"{q.expiry.isoformat()} {q.strike} {q.bid_vol} {q.ask_vol}"
            )
    return "\n".join(lines) + "\n"

"""Return-panel ingestion, standardization and CSV round-tripping.

A panel is a T x N matrix of standardized log-returns with ordered date
labels, asset identifiers and optional sector codes (metadata only).
All variances use the population convention (denominator T) so that a
unit-variance column satisfies (1/T) sum x^2 = 1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    CoverageError,
    DegenerateColumnError,
    DuplicateError,
    ParseError,
)

# 17 significant digits round-trips IEEE doubles exactly through decimal.
FLOAT_FMT = "%.17g"


@dataclass(frozen=True)
class ReturnPanel:
    """Immutable T x N panel of returns with metadata.

    Attributes
    ----------
    returns : (T, N) float array
    dates : list of str, strictly increasing labels
    asset_ids : list of str
    sector_codes : list of int, metadata only (0 when unknown)
    """

    returns: np.ndarray
    dates: list[str]
    asset_ids: list[str]
    sector_codes: list[int] = field(default_factory=list)

    def __post_init__(self):
        r = np.asarray(self.returns, dtype=float)
        object.__setattr__(self, "returns", r)
        if r.ndim != 2:
            raise ParseError("returns must be a 2-d matrix")
        t, n = r.shape
        if t < 2 or n < 2:
            raise ParseError(f"panel too small: T={t}, N={n} (need T>=2, N>=2)")
        if len(self.dates) != t:
            raise ParseError("dates length does not match number of rows")
        if len(self.asset_ids) != n:
            raise ParseError("asset_ids length does not match number of columns")
        if any(a >= b for a, b in zip(self.dates, self.dates[1:])):
            raise ParseError("dates must be strictly increasing")
        if not np.all(np.isfinite(r)):
            raise ParseError("panel contains non-finite values")
        if not self.sector_codes:
            object.__setattr__(self, "sector_codes", [0] * n)
        elif len(self.sector_codes) != n:
            raise ParseError("sector_codes length does not match number of columns")
        r.setflags(write=False)

    @property
    def n_dates(self) -> int:
        return self.returns.shape[0]

    @property
    def n_assets(self) -> int:
        return self.returns.shape[1]


def _parse_float(token: str, where: str) -> float:
    try:
        return float(token)
    except ValueError as exc:
        raise ParseError(f"cannot parse number {token!r} at {where}") from exc


def _load_wide(path: str) -> ReturnPanel:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if len(header) < 3 or header[0].strip().lower() != "date":
            raise ParseError(f"{path}: wide header must be 'date,<id1>,...,<idN>'")
        asset_ids = [h.strip() for h in header[1:]]
        dates, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            dates.append(row[0].strip())
            rows.append([_parse_float(tok, f"{path}:{lineno}") for tok in row[1:]])
    return ReturnPanel(np.array(rows, dtype=float), dates, asset_ids)


def _load_long(path: str, max_missing_frac: float) -> ReturnPanel:
    cells: dict[tuple[str, str], float] = {}
    sectors: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip().lower() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if header[:3] != ["date", "asset", "return"]:
            raise ParseError(f"{path}: long header must be 'date,asset,return[,sector]'")
        has_sector = len(header) > 3 and header[3] == "sector"
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 3:
                raise ParseError(f"{path}:{lineno}: expected at least 3 fields")
            date, asset = row[0].strip(), row[1].strip()
            key = (date, asset)
            if key in cells:
                raise DuplicateError(f"{path}:{lineno}: duplicate cell for {key}")
            cells[key] = _parse_float(row[2], f"{path}:{lineno}")
            if has_sector and len(row) > 3 and row[3].strip():
                sectors[asset] = int(_parse_float(row[3], f"{path}:{lineno}"))

    dates = sorted({d for d, _ in cells})
    assets = sorted({a for _, a in cells})
    t = len(dates)
    keep, dropped = [], []
    for a in assets:
        present = sum((d, a) in cells for d in dates)
        if t - present > max_missing_frac * t:
            dropped.append(a)
        else:
            keep.append(a)
    if not keep or len(keep) < 2:
        raise CoverageError(f"{path}: fewer than 2 assets with sufficient coverage")
    mat = np.empty((t, len(keep)))
    for j, a in enumerate(keep):
        for i, d in enumerate(dates):
            try:
                mat[i, j] = cells[(d, a)]
            except KeyError:
                raise CoverageError(
                    f"{path}: missing cell (date={d}, asset={a}) below rejection "
                    f"threshold but no imputation is performed"
                ) from None
    codes = [sectors.get(a, 0) for a in keep]
    return ReturnPanel(mat, dates, keep, codes)


def load_panel(path: str, format: str = "wide", max_missing_frac: float = 0.0) -> ReturnPanel:
    """Load a return panel from CSV.

    Wide format: header ``date,<id1>,...,<idN>`` with one row per date.
    Long format: header ``date,asset,return[,sector]``; assets missing
    more than ``max_missing_frac`` of the dates are dropped, any other
    missing cell raises CoverageError.
    """
    if format == "wide":
        return _load_wide(path)
    if format == "long":
        return _load_long(path, max_missing_frac)
    raise ParseError(f"unknown panel format {format!r}")


def load_sector_sidecar(path: str, panel: ReturnPanel) -> ReturnPanel:
    """Attach sector codes from an ``asset,sector_code`` CSV."""
    table: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip().lower() for h in next(reader)]
        if header[:2] != ["asset", "sector_code"]:
            raise ParseError(f"{path}: sidecar header must be 'asset,sector_code'")
        for row in reader:
            if row:
                table[row[0].strip()] = int(row[1])
    codes = [table.get(a, 0) for a in panel.asset_ids]
    return replace(panel, sector_codes=codes)


def save_panel(panel: ReturnPanel, path: str) -> None:
    """Write a panel in wide CSV format (17 significant digits)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date"] + list(panel.asset_ids))
        for i, d in enumerate(panel.dates):
            writer.writerow([d] + [FLOAT_FMT % x for x in panel.returns[i]])


def standardize(panel: ReturnPanel) -> ReturnPanel:
    """Demean and scale every column to unit population variance.

    Raises DegenerateColumnError on constant columns. The input panel is
    left unmodified.
    """
    r = panel.returns
    mean = r.mean(axis=0)
    var = r.var(axis=0)  # population: ddof=0
    bad = np.flatnonzero(var <= 0.0)
    if bad.size:
        ids = ", ".join(panel.asset_ids[j] for j in bad[:5])
        raise DegenerateColumnError(f"constant column(s): {ids}")
    out = (r - mean) / np.sqrt(var)
    return replace(panel, returns=out)

"""
Gridded series I/O and dataset assembly.

GRIDTS files (little-endian): magic "GTS1", uint32 length + UTF-8 variable
id, uint32 I, J, T, T dates as int64 days since 1970-01-01, T*I*J float64
values, trailing uint32 CRC-32 of everything after the magic.
"""

import json
import logging
import os
import struct
import zlib
from collections import defaultdict
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from core import (DAY, EPOCH, DECADAL_TEST_YEARS, DatasetManifest, ForecastCase, GridSeries,
                  ManifestEntry, Role, years_of, year_of)
from exceptions import ConfigurationError, ContractError, FormatError

logger = logging.getLogger(__name__)

GRIDTS_MAGIC = b"GTS1"


# ---------------------------------------------------------------------------
# GRIDTS codec

def encode_gridts(series: GridSeries) -> bytes:
    days = series.times.astype("datetime64[D]")
    if not np.array_equal(days, series.times):
        raise ContractError("GRIDTS stores daily dates; aggregate sub-daily series first",
                            {"variable": series.variable})
    name = series.variable.encode("utf-8")
    t, i, j = series.values.shape
    payload = b"".join([
        struct.pack("<I", len(name)),
        name,
        struct.pack("<III", i, j, t),
        (days - EPOCH).astype("<i8").tobytes(),
        np.ascontiguousarray(series.values, dtype="<f8").tobytes(),
    ])
    return GRIDTS_MAGIC + payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def decode_gridts(buf: bytes) -> GridSeries:
    if len(buf) < 4 or buf[:4] != GRIDTS_MAGIC:
        raise FormatError("Bad magic, not a GRIDTS file", 0)
    pos = 4
    if len(buf) < pos + 4:
        raise FormatError("Truncated variable length", pos)
    (name_len,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + name_len:
        raise FormatError("Truncated variable id", pos)
    try:
        variable = buf[pos:pos + name_len].decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("Variable id is not UTF-8", pos)
    pos += name_len
    if len(buf) < pos + 12:
        raise FormatError("Truncated grid dimensions", pos)
    n_lat, n_lon, n_times = struct.unpack_from("<III", buf, pos)
    pos += 12
    if n_lat == 0 or n_lon == 0 or n_times == 0:
        raise FormatError("Zero grid dimension", pos - 12)

    dates_end = pos + 8 * n_times
    values_end = dates_end + 8 * n_times * n_lat * n_lon
    if len(buf) < dates_end:
        raise FormatError("Truncated date block", pos)
    if len(buf) < values_end:
        raise FormatError("Truncated value payload", dates_end)
    if len(buf) < values_end + 4:
        raise FormatError("Missing CRC-32", values_end)
    if len(buf) > values_end + 4:
        raise FormatError("Payload longer than the declared dimensions", values_end + 4)
    (crc,) = struct.unpack_from("<I", buf, values_end)
    if crc != zlib.crc32(buf[4:values_end]) & 0xFFFFFFFF:
        raise FormatError("CRC-32 mismatch", values_end)

    offsets = np.frombuffer(buf, dtype="<i8", count=n_times, offset=pos)
    times = EPOCH + offsets.astype(np.int64) * DAY
    values = np.frombuffer(buf, dtype="<f8", count=n_times * n_lat * n_lon, offset=dates_end)
    values = values.astype(np.float64).reshape(n_times, n_lat, n_lon)
    return GridSeries(variable, times, values)


def write_gridts(series: GridSeries, path) -> None:
    data = encode_gridts(series)
    with open(path, "wb") as f:
        f.write(data)
    logger.debug("wrote GRIDTS %s: %s %s", path, series.variable, series.values.shape)


def read_gridts(path) -> GridSeries:
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise ConfigurationError(f"Cannot read GRIDTS file: {e}", {"path": str(path)})
    try:
        return decode_gridts(buf)
    except FormatError as e:
        e.context["path"] = str(path)
        raise


# ---------------------------------------------------------------------------
# aggregation

def ensemble_mean(members: Sequence[GridSeries]) -> GridSeries:
    """Pointwise mean of ensemble members sharing variable, dates and grid"""
    if not members:
        raise ContractError("ensemble_mean needs at least one member")
    first = members[0]
    for k, m in enumerate(members[1:], start=1):
        if m.variable != first.variable or m.grid != first.grid or not np.array_equal(m.times, first.times):
            raise ContractError("Ensemble members do not share variable, dates and grid",
                                {"member": k, "variable": m.variable})
    if len(members) == 1:
        return GridSeries(first.variable, first.times.copy(), first.values.copy())
    stacked = np.stack([m.values for m in members])
    return GridSeries(first.variable, first.times.copy(), stacked.mean(axis=0))


def daily_average(subdaily: GridSeries, steps_per_day: int) -> GridSeries:
    """Average consecutive blocks of ``steps_per_day`` fields into daily means"""
    if steps_per_day < 1:
        raise ConfigurationError("steps_per_day must be at least 1")
    t = subdaily.n_times
    if t % steps_per_day:
        raise ContractError("Series length is not a multiple of steps_per_day",
                            {"T": t, "steps_per_day": steps_per_day})
    days = subdaily.times.astype("datetime64[D]")
    blocks = days.reshape(-1, steps_per_day)
    if not np.all(blocks == blocks[:, :1]):
        raise ContractError("A daily block spans more than one calendar day",
                            {"steps_per_day": steps_per_day})
    if steps_per_day > 1:
        steps = np.diff(subdaily.times.reshape(-1, steps_per_day), axis=1)
        if not np.all(steps == steps.reshape(-1)[0]):
            raise ContractError("Sub-daily steps are not evenly spaced")
    if steps_per_day == 1:
        return GridSeries(subdaily.variable, days.copy(), subdaily.values.copy())
    i, j = subdaily.grid
    values = subdaily.values.reshape(-1, steps_per_day, i, j).mean(axis=1)
    return GridSeries(subdaily.variable, blocks[:, 0].copy(), values)


# ---------------------------------------------------------------------------
# manifest

def load_manifest(path) -> DatasetManifest:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"Manifest is not valid JSON: {e}", {"path": str(path)})
    except OSError as e:
        raise ConfigurationError(f"Cannot read manifest: {e}", {"path": str(path)})
    unknown = set(data) - {"files", "test_years"}
    if unknown:
        raise ConfigurationError(f"Unknown manifest keys: {sorted(unknown)}", {"path": str(path)})
    files = [ManifestEntry.from_dict(entry) for entry in data.get("files", [])]
    test_years = tuple(int(y) for y in data.get("test_years", DECADAL_TEST_YEARS))
    return DatasetManifest(files, test_years, base_dir=os.path.dirname(os.path.abspath(path)))


def save_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def validate_manifest(manifest: DatasetManifest) -> None:
    """Every forecast entry needs truth of the same variable covering its years"""
    truth_years = defaultdict(set)
    for entry in manifest.files:
        if entry.role == Role.TRUTH:
            truth_years[entry.variable].update(entry.years)
    for entry in manifest.files:
        if entry.role != Role.FORECAST:
            continue
        missing = set(entry.years) - truth_years[entry.variable]
        if missing:
            raise ContractError("Forecast entry has no truth counterpart for some years",
                                {"path": entry.path, "missing_years": sorted(missing)})


def resolve_path(manifest: DatasetManifest, entry: ManifestEntry) -> str:
    if os.path.isabs(entry.path):
        return entry.path
    return os.path.join(manifest.base_dir, entry.path)


def _load_role(manifest: DatasetManifest, variable: str, role: Role, lead: Optional[int] = None) -> Optional[GridSeries]:
    parts = [read_gridts(resolve_path(manifest, e)) for e in manifest.files
             if e.variable == variable and e.role == role and (lead is None or e.lead == lead)]
    return GridSeries.concat(parts) if parts else None


def load_truth(manifest: DatasetManifest, variable: str) -> GridSeries:
    truth = _load_role(manifest, variable, Role.TRUTH)
    if truth is None:
        raise ContractError(f"No truth files for {variable}")
    return truth


def assemble_cases(manifest: DatasetManifest, variable: str) -> List[ForecastCase]:
    """Pair per-lead forecast files with verifying truth into ForecastCases.

    A forecast file for lead l holds, at each init date, the field valid at
    init + l days. Inits missing from any lead or lacking truth are skipped.
    """
    validate_manifest(manifest)
    leads = sorted(set(e.lead for e in manifest.files if e.variable == variable and e.role == Role.FORECAST))
    if not leads:
        raise ContractError(f"No forecast files for {variable}")
    if leads != list(range(1, len(leads) + 1)):
        raise ConfigurationError("Forecast leads must be 1..L without gaps", {"leads": leads})
    truth = load_truth(manifest, variable)
    per_lead = [_load_role(manifest, variable, Role.FORECAST, lead) for lead in leads]
    for series in per_lead:
        if series.grid != truth.grid:
            raise ContractError("Forecast and truth grids differ",
                                {"forecast": series.grid, "truth": truth.grid})

    inits = per_lead[0].times
    for series in per_lead[1:]:
        inits = np.intersect1d(inits, series.times)
    cases, skipped = [], 0
    for init in inits:
        truth_idx = [truth.index_of(init + lead * DAY) for lead in leads]
        if min(truth_idx) < 0:
            skipped += 1
            continue
        forecast = np.stack([s.values[s.index_of(init)] for s in per_lead])
        cases.append(ForecastCase(init, forecast, truth.values[truth_idx]))
    if skipped:
        logger.info("skipped %d %s inits without verifying truth", skipped, variable)
    return cases


def forecast_series_by_lead(cases: Sequence[ForecastCase], variable: str,
                            values: Optional[np.ndarray] = None) -> List[GridSeries]:
    """Inverse of ``assemble_cases`` for the forecast side: one series per lead"""
    if not cases:
        raise ContractError("No cases to write")
    inits = np.array([c.init_date for c in cases], dtype="datetime64[D]")
    stack = np.stack([c.forecast for c in cases]) if values is None else np.asarray(values)
    order = np.argsort(inits, kind="stable")
    return [GridSeries(variable, inits[order], stack[order, lead]) for lead in range(stack.shape[1])]


# ---------------------------------------------------------------------------
# decadal split

def decadal_split(manifest: DatasetManifest,
                  test_years: Optional[Iterable[int]] = None) -> Tuple[DatasetManifest, DatasetManifest]:
    """Partition manifest files by year into training and test manifests"""
    test = set(manifest.test_years if test_years is None else test_years)
    covered = set(manifest.years)
    if not test <= covered:
        raise ConfigurationError("Test years are not covered by the manifest",
                                 {"uncovered": sorted(test - covered)})
    train = covered - test
    if not train:
        raise ConfigurationError("Decadal split leaves no training years")
    if not test:
        raise ConfigurationError("Decadal split leaves no test years")

    def subset(years):
        entries = []
        for e in manifest.files:
            kept = tuple(y for y in e.years if y in years)
            if kept:
                entries.append(ManifestEntry(e.path, e.variable, e.role, kept, e.lead))
        return DatasetManifest(entries, tuple(sorted(test)), manifest.base_dir)

    return subset(train), subset(test)


def split_cases(cases: Sequence[ForecastCase],
                test_years: Iterable[int]) -> Tuple[List[ForecastCase], List[ForecastCase]]:
    """Split cases by init year; training cases whose verification window
    enters a test year are dropped from both sides."""
    test = set(int(y) for y in test_years)
    train, held_out, dropped = [], [], 0
    for case in cases:
        if year_of(case.init_date) in test:
            held_out.append(case)
        elif test.intersection(int(y) for y in years_of(case.valid_dates)):
            dropped += 1
        else:
            train.append(case)
    if not train:
        raise ConfigurationError("No training cases after the split")
    if not held_out:
        raise ConfigurationError("No test cases after the split")
    if dropped:
        logger.info("excluded %d training cases whose truth window enters a test year", dropped)
    return train, held_out

"""Parsing, normalization, windowing, and split assignment.

File formats (all CSV with fixed headers, one directory per dataset):

    <data_dir>/
        buildings.csv            one row per building
        manifest.json            {"<climate_id>": "train"|"val"|"test"}
        weather/<climate_id>.csv 8760 hourly rows
        loads/<climate_id>__<building_id>.csv  8760 rows of hour_of_year,heat_kwh,cool_kwh

All parsers are pure functions over file contents and are safe to call
concurrently; window lists are ordered by (climate_id, building_id, start).
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HOURS_PER_YEAR = 8760
WINDOW_LEN = 24
EPSILON_ZERO = 1e-6  # kWh; |load| above this counts as a non-zero (triggered) hour

STATIC_VARS = (
    "height", "perimeter", "glazing_ratio", "footprint",
    "heat_setpoint", "cool_setpoint", "wall_u", "roof_u", "floor_u",
    "window_u", "wall_refl_avg", "wall_refl", "roof_refl",
)
TEMPORAL_VARS = (
    "day", "month", "hour", "diffuse_rad", "beam_rad", "temp",
    "surface_temp", "wind_speed", "wind_dir", "rel_humidity", "precip",
    "cloud_cover", "hour_of_year",
)
LOAD_VARS = ("heat", "cool")

WEATHER_COLUMNS = TEMPORAL_VARS[:-1]  # hour_of_year column is optional on disk
BUILDING_COLUMNS = ("building_id",) + STATIC_VARS
LOADS_COLUMNS = ("hour_of_year", "heat_kwh", "cool_kwh")
SPLIT_TAGS = ("train", "val", "test")

# 365-day year, no leap handling (TMY convention).
_DAYS_PER_MONTH = (31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31)
_MONTH_START_DAY = tuple(int(np.cumsum((0,) + _DAYS_PER_MONTH)[m]) for m in range(12))


class DataError(Exception):
    """Base class for dataset file and contract errors."""


class SchemaError(DataError):
    """Header does not match the documented column list."""


class ParseError(DataError):
    """A cell could not be parsed as a number."""


class LengthError(DataError):
    """File has the wrong number of data rows."""


class RangeError(DataError):
    """A value is outside its documented range."""


class DuplicateError(DataError):
    """A key that must be unique appears twice."""


class InvariantError(DataError):
    """A cross-field invariant is violated."""


class ManifestError(DataError):
    """Split manifest is missing, inconsistent, or incomplete."""


def hour_of_year(month: int, day: int, hour: int) -> int:
    """1-based hour index in a 365-day year; (1, 1, 0) -> 1, (12, 31, 23) -> 8760."""
    day_of_year = _MONTH_START_DAY[month - 1] + (day - 1)
    return day_of_year * 24 + hour + 1


@dataclass(frozen=True)
class BuildingStatic:
    """The 13 static building covariates plus an identifier."""

    building_id: str
    height: float
    perimeter: float
    glazing_ratio: float
    footprint: float
    heat_setpoint: float
    cool_setpoint: float
    wall_u: float
    roof_u: float
    floor_u: float
    window_u: float
    wall_refl_avg: float
    wall_refl: float
    roof_refl: float

    def __post_init__(self):
        for name in ("glazing_ratio", "wall_refl_avg", "wall_refl", "roof_refl"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise RangeError(f"building {self.building_id!r}: {name}={v} outside [0, 1]")
        for name in ("wall_u", "roof_u", "floor_u", "window_u"):
            v = getattr(self, name)
            if not v > 0.0:
                raise RangeError(f"building {self.building_id!r}: {name}={v} must be > 0")
        if not self.footprint > 0.0:
            raise RangeError(f"building {self.building_id!r}: footprint={self.footprint} must be > 0")
        if not self.heat_setpoint < self.cool_setpoint:
            raise InvariantError(
                f"building {self.building_id!r}: heat_setpoint={self.heat_setpoint} "
                f"must be < cool_setpoint={self.cool_setpoint}"
            )

    def vector(self) -> np.ndarray:
        """Covariates as a float64 13-vector in STATIC_VARS order."""
        return np.array([getattr(self, name) for name in STATIC_VARS], dtype=np.float64)


@dataclass(frozen=True)
class WeatherRecord:
    """One hourly weather observation (13 numeric covariates)."""

    day: int
    month: int
    hour: int
    diffuse_rad: float
    beam_rad: float
    temp: float
    surface_temp: float
    wind_speed: float
    wind_dir: float
    rel_humidity: float
    precip: float
    cloud_cover: float
    hour_of_year: int

    def validate(self) -> None:
        if not 1 <= self.month <= 12:
            raise RangeError(f"month={self.month} outside 1..12")
        if not 1 <= self.day <= _DAYS_PER_MONTH[self.month - 1]:
            raise RangeError(f"day={self.day} invalid for month {self.month}")
        if not 0 <= self.hour <= 23:
            raise RangeError(f"hour={self.hour} outside 0..23")
        if self.diffuse_rad < 0 or self.beam_rad < 0:
            raise RangeError("radiation must be >= 0")
        if not 0.0 <= self.wind_dir < 360.0:
            raise RangeError(f"wind_dir={self.wind_dir} outside [0, 360)")
        if not 0.0 <= self.rel_humidity <= 100.0:
            raise RangeError(f"rel_humidity={self.rel_humidity} outside [0, 100]")
        if not 0.0 <= self.cloud_cover <= 1.0:
            raise RangeError(f"cloud_cover={self.cloud_cover} outside [0, 1]")
        expected = hour_of_year(self.month, self.day, self.hour)
        if self.hour_of_year != expected:
            raise InvariantError(
                f"hour_of_year={self.hour_of_year} inconsistent with "
                f"(month={self.month}, day={self.day}, hour={self.hour}); expected {expected}"
            )

    def vector(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in TEMPORAL_VARS], dtype=np.float64)


@dataclass
class WeatherSeries:
    """One climate's full year of hourly weather (8760 records)."""

    climate_id: str
    records: list[WeatherRecord]
    split_tag: str | None = None
    _matrix: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if len(self.records) != HOURS_PER_YEAR:
            raise LengthError(
                f"climate {self.climate_id!r}: expected {HOURS_PER_YEAR} records, "
                f"got {len(self.records)}"
            )
        for i, rec in enumerate(self.records):
            if rec.hour_of_year != i + 1:
                raise InvariantError(
                    f"climate {self.climate_id!r}: record {i} has hour_of_year="
                    f"{rec.hour_of_year}, expected {i + 1}"
                )

    def matrix(self) -> np.ndarray:
        """(8760, 13) float64 matrix in TEMPORAL_VARS order; cached."""
        if self._matrix is None:
            self._matrix = np.stack([rec.vector() for rec in self.records])
        return self._matrix


@dataclass
class LoadSeries:
    """Hourly heating (>= 0) and cooling (<= 0) loads in kWh for one (building, climate)."""

    building_id: str
    climate_id: str
    heat: np.ndarray
    cool: np.ndarray

    def __post_init__(self):
        self.heat = np.asarray(self.heat, dtype=np.float64)
        self.cool = np.asarray(self.cool, dtype=np.float64)
        if self.heat.shape != (HOURS_PER_YEAR,) or self.cool.shape != (HOURS_PER_YEAR,):
            raise LengthError(
                f"loads for ({self.climate_id!r}, {self.building_id!r}) must have "
                f"{HOURS_PER_YEAR} hours"
            )
        if np.any(self.heat < 0):
            raise InvariantError("heat loads must be >= 0 (sign convention)")
        if np.any(self.cool > 0):
            raise InvariantError("cool loads must be <= 0 (sign convention)")

    def matrix(self) -> np.ndarray:
        """(8760, 2) signed loads: column 0 heat, column 1 cool."""
        return np.stack([self.heat, self.cool], axis=1)


@dataclass
class NormalizationStats:
    """Per-variable z-score statistics computed on the train split only."""

    mean: dict[str, float]
    std: dict[str, float]

    def normalize(self, x, var: str):
        return (np.asarray(x, dtype=np.float64) - self.mean[var]) / self.std[var]

    def denormalize(self, x, var: str):
        return np.asarray(x, dtype=np.float64) * self.std[var] + self.mean[var]

    def normalize_matrix(self, matrix: np.ndarray, names) -> np.ndarray:
        mu = np.array([self.mean[n] for n in names])
        sd = np.array([self.std[n] for n in names])
        return (matrix - mu) / sd

    def to_dict(self) -> dict:
        return {"mean": dict(self.mean), "std": dict(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(mean=dict(d["mean"]), std=dict(d["std"]))


@dataclass
class SampleWindow:
    """One training sample: 24 consecutive hours for one (climate, building)."""

    static: np.ndarray          # (13,) normalized
    weather: np.ndarray         # (24, 13) normalized
    target_loads: np.ndarray    # (24, 2) normalized signed loads
    trigger_targets: np.ndarray  # (24, 2) binary, 1 where |raw| > epsilon_zero
    raw_loads: np.ndarray       # (24, 2) signed kWh
    climate_id: str = ""
    building_id: str = ""
    start: int = 0


@dataclass
class DatasetSplit:
    """Climate-determined train/val/test membership, expanded to (climate, building) pairs."""

    train: list[tuple[str, str]]
    val: list[tuple[str, str]]
    test: list[tuple[str, str]]
    climate_tags: dict[str, str]

    def pairs(self, split_name: str) -> list[tuple[str, str]]:
        return getattr(self, split_name)

    def climates(self, split_name: str) -> list[str]:
        return sorted({c for c, _ in getattr(self, split_name)})


def _read_rows(path: Path, expected_header, optional_tail=()) -> tuple[list[str], list[list[str]]]:
    """Read a CSV; enforce header equality (optionally allowing a fixed tail)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, expected header") from None
        rows = [row for row in reader if row]
    allowed = [list(expected_header)]
    for k in range(1, len(optional_tail) + 1):
        allowed.append(list(expected_header) + list(optional_tail[:k]))
    if header not in allowed:
        expected_set = set(expected_header) | set(optional_tail)
        missing = [c for c in expected_header if c not in header]
        extra = [c for c in header if c not in expected_set]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}")
        if extra:
            raise SchemaError(f"{path}: unexpected column(s) {extra}")
        raise SchemaError(f"{path}: columns out of order, expected {list(expected_header)}")
    return header, rows


def _cell_float(value: str, path: Path, row_num: int, col: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ParseError(f"{path}: row {row_num}: non-numeric value {value!r} in column {col!r}") from None


def _cell_int(value: str, path: Path, row_num: int, col: str) -> int:
    v = _cell_float(value, path, row_num, col)
    if v != int(v):
        raise ParseError(f"{path}: row {row_num}: expected integer in column {col!r}, got {value!r}")
    return int(v)


def parse_weather_csv(path, climate_id: str | None = None) -> WeatherSeries:
    """Parse one climate's hourly weather file into a validated WeatherSeries.

    The hour_of_year column is filled in from (month, day, hour) when absent.
    """
    path = Path(path)
    if climate_id is None:
        climate_id = path.stem
    header, rows = _read_rows(path, WEATHER_COLUMNS, optional_tail=("hour_of_year",))
    if len(rows) != HOURS_PER_YEAR:
        raise LengthError(f"{path}: expected {HOURS_PER_YEAR} data rows, got {len(rows)}")
    has_hoy = len(header) == len(WEATHER_COLUMNS) + 1
    records = []
    for i, row in enumerate(rows):
        row_num = i + 2  # 1-based, counting the header line
        if len(row) != len(header):
            raise ParseError(f"{path}: row {row_num}: expected {len(header)} cells, got {len(row)}")
        day = _cell_int(row[0], path, row_num, "day")
        month = _cell_int(row[1], path, row_num, "month")
        hour = _cell_int(row[2], path, row_num, "hour")
        floats = [_cell_float(row[j], path, row_num, header[j]) for j in range(3, 12)]
        if not 1 <= month <= 12:
            raise RangeError(f"{path}: row {row_num}: month={month} outside 1..12")
        if has_hoy:
            hoy = _cell_int(row[12], path, row_num, "hour_of_year")
        else:
            if not 1 <= day <= _DAYS_PER_MONTH[month - 1]:
                raise RangeError(f"{path}: row {row_num}: day={day} invalid for month {month}")
            if not 0 <= hour <= 23:
                raise RangeError(f"{path}: row {row_num}: hour={hour} outside 0..23")
            hoy = hour_of_year(month, day, hour)
        rec = WeatherRecord(day, month, hour, *floats, hour_of_year=hoy)
        try:
            rec.validate()
        except DataError as exc:
            raise type(exc)(f"{path}: row {row_num}: {exc}") from None
        records.append(rec)
    return WeatherSeries(climate_id=climate_id, records=records)


def parse_building_csv(path) -> list[BuildingStatic]:
    """Parse the building covariate table; order preserved, ids unique."""
    path = Path(path)
    _, rows = _read_rows(path, BUILDING_COLUMNS)
    buildings = []
    seen = set()
    for i, row in enumerate(rows):
        row_num = i + 2
        if len(row) != len(BUILDING_COLUMNS):
            raise ParseError(f"{path}: row {row_num}: expected {len(BUILDING_COLUMNS)} cells, got {len(row)}")
        bid = row[0]
        if bid in seen:
            raise DuplicateError(f"{path}: row {row_num}: duplicate building_id {bid!r}")
        seen.add(bid)
        values = [_cell_float(row[j], path, row_num, BUILDING_COLUMNS[j]) for j in range(1, 14)]
        try:
            buildings.append(BuildingStatic(bid, *values))
        except DataError as exc:
            raise type(exc)(f"{path}: row {row_num}: {exc}") from None
    return buildings


def parse_loads_csv(path, climate_id: str | None = None, building_id: str | None = None) -> LoadSeries:
    """Parse an hourly loads file (hour_of_year,heat_kwh,cool_kwh).

    Ids default to the `<climate_id>__<building_id>` filename convention.
    """
    path = Path(path)
    if climate_id is None or building_id is None:
        parts = path.stem.split("__")
        if len(parts) != 2:
            raise ParseError(
                f"{path}: cannot infer ids from filename; expected <climate_id>__<building_id>.csv"
            )
        climate_id, building_id = parts
    _, rows = _read_rows(path, LOADS_COLUMNS)
    if len(rows) != HOURS_PER_YEAR:
        raise LengthError(f"{path}: expected {HOURS_PER_YEAR} data rows, got {len(rows)}")
    heat = np.empty(HOURS_PER_YEAR)
    cool = np.empty(HOURS_PER_YEAR)
    for i, row in enumerate(rows):
        row_num = i + 2
        hoy = _cell_int(row[0], path, row_num, "hour_of_year")
        if hoy != i + 1:
            raise InvariantError(f"{path}: row {row_num}: hour_of_year={hoy}, expected {i + 1}")
        heat[i] = _cell_float(row[1], path, row_num, "heat_kwh")
        cool[i] = _cell_float(row[2], path, row_num, "cool_kwh")
    if np.any(heat < 0):
        bad = int(np.argmax(heat < 0))
        raise InvariantError(f"{path}: row {bad + 2}: heat_kwh={heat[bad]} violates heat >= 0")
    if np.any(cool > 0):
        bad = int(np.argmax(cool > 0))
        raise InvariantError(f"{path}: row {bad + 2}: cool_kwh={cool[bad]} violates cool <= 0")
    return LoadSeries(building_id=building_id, climate_id=climate_id, heat=heat, cool=cool)


def _column_stats(values: np.ndarray, var: str) -> tuple[float, float]:
    mean = float(np.mean(values))
    std = float(np.std(values))  # population std
    if std == 0.0:
        warnings.warn(f"variable {var!r} is constant ({mean}); clamping std to 1", stacklevel=3)
        std = 1.0
    return mean, std


def compute_norm_stats(
    weather: list[WeatherSeries],
    buildings: list[BuildingStatic],
    loads: list[LoadSeries],
) -> NormalizationStats:
    """Z-score statistics over the train split (population std; constant columns clamp to std 1)."""
    if not weather:
        raise ValueError("need at least one train climate to compute statistics")
    mean: dict[str, float] = {}
    std: dict[str, float] = {}
    static_mat = np.stack([b.vector() for b in buildings])
    for j, var in enumerate(STATIC_VARS):
        mean[var], std[var] = _column_stats(static_mat[:, j], var)
    temporal_mat = np.concatenate([w.matrix() for w in weather])
    for j, var in enumerate(TEMPORAL_VARS):
        mean[var], std[var] = _column_stats(temporal_mat[:, j], var)
    heat_all = np.concatenate([ls.heat for ls in loads]) if loads else np.zeros(1)
    cool_all = np.concatenate([ls.cool for ls in loads]) if loads else np.zeros(1)
    mean["heat"], std["heat"] = _column_stats(heat_all, "heat")
    mean["cool"], std["cool"] = _column_stats(cool_all, "cool")
    return NormalizationStats(mean=mean, std=std)


def window_count(n_steps: int, stride: int) -> int:
    return (n_steps - WINDOW_LEN) // stride + 1


def make_windows(
    building: BuildingStatic,
    weather: WeatherSeries,
    loads: LoadSeries,
    stats: NormalizationStats,
    stride: int = WINDOW_LEN,
    epsilon_zero: float = EPSILON_ZERO,
) -> list[SampleWindow]:
    """Cut one (building, climate) year into fixed 24-step windows.

    Windows start at 0, stride, 2*stride, ...; trigger targets mark hours whose
    absolute raw load exceeds epsilon_zero.
    """
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    if weather.climate_id != loads.climate_id:
        raise InvariantError(
            f"weather climate {weather.climate_id!r} != loads climate {loads.climate_id!r}"
        )
    static_norm = stats.normalize_matrix(building.vector(), STATIC_VARS)
    weather_norm = stats.normalize_matrix(weather.matrix(), TEMPORAL_VARS)
    raw = loads.matrix()
    target = np.stack(
        [stats.normalize(loads.heat, "heat"), stats.normalize(loads.cool, "cool")], axis=1
    )
    triggers = (np.abs(raw) > epsilon_zero).astype(np.float64)
    windows = []
    for start in range(0, HOURS_PER_YEAR - WINDOW_LEN + 1, stride):
        end = start + WINDOW_LEN
        windows.append(
            SampleWindow(
                static=static_norm,
                weather=weather_norm[start:end],
                target_loads=target[start:end],
                trigger_targets=triggers[start:end],
                raw_loads=raw[start:end],
                climate_id=weather.climate_id,
                building_id=building.building_id,
                start=start,
            )
        )
    return windows


def load_manifest(path) -> dict[str, str]:
    """Read the split manifest, rejecting duplicate keys with conflicting tags."""
    path = Path(path)

    def hook(pairs):
        out: dict[str, str] = {}
        for key, value in pairs:
            if key in out and out[key] != value:
                raise ManifestError(
                    f"{path}: climate {key!r} tagged both {out[key]!r} and {value!r}"
                )
            out[key] = value
        return out

    with open(path) as fh:
        manifest = json.load(fh, object_pairs_hook=hook)
    for climate, tag in manifest.items():
        if tag not in SPLIT_TAGS:
            raise ManifestError(f"{path}: climate {climate!r} has unknown tag {tag!r}")
    return manifest


def assign_splits(
    climates: list[WeatherSeries],
    manifest: dict[str, str],
    buildings: list[BuildingStatic],
) -> DatasetSplit:
    """Assign climates to splits per the manifest and expand to (climate, building) pairs."""
    by_tag: dict[str, list[str]] = {tag: [] for tag in SPLIT_TAGS}
    for series in climates:
        tag = manifest.get(series.climate_id)
        if tag is None:
            raise ManifestError(f"climate {series.climate_id!r} missing from manifest")
        if tag not in SPLIT_TAGS:
            raise ManifestError(f"climate {series.climate_id!r} has unknown tag {tag!r}")
        series.split_tag = tag
        by_tag[tag].append(series.climate_id)
    building_ids = sorted(b.building_id for b in buildings)
    pairs = {
        tag: [(c, b) for c in sorted(ids) for b in building_ids]
        for tag, ids in by_tag.items()
    }
    for tag in ("val", "test"):
        if not by_tag[tag]:
            warnings.warn(f"no climates tagged {tag!r}; that split is empty", stacklevel=2)
    tags = {series.climate_id: manifest[series.climate_id] for series in climates}
    return DatasetSplit(train=pairs["train"], val=pairs["val"], test=pairs["test"], climate_tags=tags)


@dataclass
class Dataset:
    """Everything loaded from one dataset directory, with train-split statistics."""

    buildings: dict[str, BuildingStatic]
    weather: dict[str, WeatherSeries]
    loads: dict[tuple[str, str], LoadSeries]
    split: DatasetSplit
    stats: NormalizationStats

    def windows(self, split_name: str, stride: int = WINDOW_LEN) -> list[SampleWindow]:
        """All windows of a split, ordered by (climate_id, building_id, start)."""
        out: list[SampleWindow] = []
        for climate_id, building_id in sorted(self.split.pairs(split_name)):
            out.extend(
                make_windows(
                    self.buildings[building_id],
                    self.weather[climate_id],
                    self.loads[(climate_id, building_id)],
                    self.stats,
                    stride=stride,
                )
            )
        return out


def load_dataset(data_dir) -> Dataset:
    """Load a full dataset directory and compute train-split normalization stats."""
    data_dir = Path(data_dir)
    buildings = parse_building_csv(data_dir / "buildings.csv")
    manifest = load_manifest(data_dir / "manifest.json")
    weather_dir = data_dir / "weather"
    weather: dict[str, WeatherSeries] = {}
    for path in sorted(weather_dir.glob("*.csv")):
        series = parse_weather_csv(path)
        weather[series.climate_id] = series
    if not weather:
        raise DataError(f"no weather files found under {weather_dir}")
    split = assign_splits(list(weather.values()), manifest, buildings)
    loads: dict[tuple[str, str], LoadSeries] = {}
    for climate_id in weather:
        for building in buildings:
            path = data_dir / "loads" / f"{climate_id}__{building.building_id}.csv"
            loads[(climate_id, building.building_id)] = parse_loads_csv(
                path, climate_id=climate_id, building_id=building.building_id
            )
    train_climates = [weather[c] for c in split.climates("train")]
    train_loads = [loads[pair] for pair in sorted(split.train)]
    stats = compute_norm_stats(train_climates, buildings, train_loads)
    return Dataset(
        buildings={b.building_id: b for b in buildings},
        weather=weather,
        loads=loads,
        split=split,
        stats=stats,
    )


def stack_windows(windows: list[SampleWindow]) -> dict[str, np.ndarray]:
    """Stack a window list into dense arrays for batched training/evaluation."""
    if not windows:
        raise ValueError("cannot stack an empty window list")
    return {
        "static": np.stack([w.static for w in windows]),
        "weather": np.stack([w.weather for w in windows]),
        "target_loads": np.stack([w.target_loads for w in windows]),
        "trigger_targets": np.stack([w.trigger_targets for w in windows]),
        "raw_loads": np.stack([w.raw_loads for w in windows]),
    }

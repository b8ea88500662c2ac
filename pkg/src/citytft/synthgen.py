"""Synthetic weather years and a closed-form load oracle.

The oracle is deliberately simple so tests can recompute expected loads
independently; it is a physics-lite stand-in, not a building simulator.

Load model, per hour t (all temperatures in degC, loads in kWh):

    gross_wall   = perimeter * height
    window_area  = gross_wall * glazing_ratio
    ua_kw_per_k  = (wall_u * (gross_wall - window_area) + window_u * window_area
                    + roof_u * footprint + floor_u * footprint) / 1000
    t_eff[t]     = temp[t] + solar_gain * glazing_ratio * (beam[t] + diffuse[t])
    heat[t]      = k_heat * ua_kw_per_k * (offset + heat_setpoint - t_eff[t])   if t_eff[t] < heat_setpoint else 0
    cool[t]      = -k_cool * ua_kw_per_k * (offset + t_eff[t] - cool_setpoint)  if t_eff[t] > cool_setpoint else 0

Both channels respond to the same solar-adjusted temperature, so the
deadband [heat_setpoint, cool_setpoint] on t_eff yields exactly zero load in
both channels. The trigger offset (in Kelvin-equivalent) models minimum
equipment output: loads jump from zero to a floor of k * ua * offset when a
system switches on, giving the zero-inflated, gap-separated load distribution
typical of simulated HVAC demand. Set it to zero for a pure proportional law.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dataio import (
    HOURS_PER_YEAR,
    BUILDING_COLUMNS,
    LOADS_COLUMNS,
    TEMPORAL_VARS,
    BuildingStatic,
    LoadSeries,
    WeatherRecord,
    WeatherSeries,
)

# Indoor temperature rise per W/m2 of glazed solar irradiance.
SOLAR_GAIN_K_PER_WM2 = 0.012
K_HEAT = 1.0
K_COOL = 1.0
TRIGGER_OFFSET_K = 2.0  # minimum-output floor, in K of equivalent setpoint deficit


@dataclass(frozen=True)
class SynthClimateConfig:
    """Parameters of one synthetic climate; identical config + seed reproduce bytes."""

    climate_id: str
    mean_temp: float
    seasonal_amplitude: float
    diurnal_amplitude: float
    solar_peak: float
    humidity_base: float
    noise_std: float
    seed: int

    def __post_init__(self):
        if self.seasonal_amplitude < 0 or self.diurnal_amplitude < 0:
            raise ValueError(f"climate {self.climate_id!r}: amplitudes must be >= 0")
        if self.noise_std < 0:
            raise ValueError(f"climate {self.climate_id!r}: noise_std must be >= 0")
        if self.solar_peak < 0:
            raise ValueError(f"climate {self.climate_id!r}: solar_peak must be >= 0")
        if not 0.0 <= self.humidity_base <= 100.0:
            raise ValueError(f"climate {self.climate_id!r}: humidity_base outside [0, 100]")


def generate_weather(cfg: SynthClimateConfig) -> WeatherSeries:
    """Generate a full 8760-hour synthetic year from one seeded config.

    Temperature is mean + seasonal sinusoid + diurnal sinusoid + Gaussian noise;
    radiation follows a clipped daylight curve attenuated by cloud cover.
    """
    rng = np.random.default_rng(cfg.seed)
    hoy = np.arange(1, HOURS_PER_YEAR + 1)
    day_of_year = (hoy - 1) // 24          # 0..364
    hour = (hoy - 1) % 24                  # 0..23

    seasonal = -np.cos(2.0 * np.pi * day_of_year / 365.0)       # -1 on Jan 1, +1 mid-year
    diurnal = -np.cos(2.0 * np.pi * (hour - 3) / 24.0)          # trough 03:00, peak 15:00
    noise = rng.standard_normal(HOURS_PER_YEAR)
    temp = (
        cfg.mean_temp
        + cfg.seasonal_amplitude * seasonal
        + cfg.diurnal_amplitude * diurnal
        + cfg.noise_std * noise
    )

    cloud = rng.beta(2.0, 2.0, HOURS_PER_YEAR)
    daylight = np.clip(np.sin(np.pi * (hour - 6) / 12.0), 0.0, None)  # 0 outside 06..18
    day_scale = 1.0 + 0.3 * seasonal                                   # longer/stronger summer sun
    beam = cfg.solar_peak * daylight * day_scale * (1.0 - 0.75 * cloud)
    diffuse = 0.5 * cfg.solar_peak * daylight * day_scale * (0.3 + 0.5 * cloud)

    surface_temp = temp + 3.0 * daylight * (1.0 - cloud)
    wind_speed = np.abs(rng.normal(3.0, 1.8, HOURS_PER_YEAR))
    wind_dir = rng.uniform(0.0, 360.0, HOURS_PER_YEAR) % 360.0
    humidity = np.clip(
        cfg.humidity_base - 0.8 * (temp - cfg.mean_temp) + 5.0 * rng.standard_normal(HOURS_PER_YEAR),
        0.0,
        100.0,
    )
    precip = np.where(cloud > 0.8, rng.exponential(0.5, HOURS_PER_YEAR), 0.0)

    month = np.searchsorted(np.cumsum([31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31]), day_of_year, side="right") + 1
    month_start = np.concatenate([[0], np.cumsum([31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30])])
    day = day_of_year - month_start[month - 1] + 1

    records = [
        WeatherRecord(
            day=int(day[i]),
            month=int(month[i]),
            hour=int(hour[i]),
            diffuse_rad=float(diffuse[i]),
            beam_rad=float(beam[i]),
            temp=float(temp[i]),
            surface_temp=float(surface_temp[i]),
            wind_speed=float(wind_speed[i]),
            wind_dir=float(wind_dir[i]),
            rel_humidity=float(humidity[i]),
            precip=float(precip[i]),
            cloud_cover=float(cloud[i]),
            hour_of_year=int(hoy[i]),
        )
        for i in range(HOURS_PER_YEAR)
    ]
    return WeatherSeries(climate_id=cfg.climate_id, records=records)


def effective_ua(b: BuildingStatic) -> float:
    """Envelope heat-loss coefficient in kWh per K per hour (kW/K)."""
    gross_wall = b.perimeter * b.height
    window_area = gross_wall * b.glazing_ratio
    opaque_wall = gross_wall - window_area
    ua_w_per_k = (
        b.wall_u * opaque_wall
        + b.window_u * window_area
        + b.roof_u * b.footprint
        + b.floor_u * b.footprint
    )
    return ua_w_per_k / 1000.0


def simulate_loads(
    b: BuildingStatic,
    w: WeatherSeries,
    k_heat: float = K_HEAT,
    k_cool: float = K_COOL,
    solar_gain: float = SOLAR_GAIN_K_PER_WM2,
    trigger_offset: float = TRIGGER_OFFSET_K,
) -> LoadSeries:
    """Hourly heating (>= 0) and cooling (<= 0) loads from the closed form above."""
    mat = w.matrix()
    temp = mat[:, TEMPORAL_VARS.index("temp")]
    global_rad = mat[:, TEMPORAL_VARS.index("beam_rad")] + mat[:, TEMPORAL_VARS.index("diffuse_rad")]
    ua = effective_ua(b)
    t_eff = temp + solar_gain * b.glazing_ratio * global_rad
    heat_deficit = b.heat_setpoint - t_eff
    cool_excess = t_eff - b.cool_setpoint
    heat = np.where(heat_deficit > 0.0, k_heat * ua * (trigger_offset + heat_deficit), 0.0)
    cool = np.where(cool_excess > 0.0, -k_cool * ua * (trigger_offset + cool_excess), 0.0)
    return LoadSeries(building_id=b.building_id, climate_id=w.climate_id, heat=heat, cool=cool)


DEFAULT_CLIMATES = (
    SynthClimateConfig(
        climate_id="temperate_valley",
        mean_temp=21.0,
        seasonal_amplitude=8.0,
        diurnal_amplitude=4.0,
        solar_peak=750.0,
        humidity_base=65.0,
        noise_std=1.2,
        seed=101,
    ),
    SynthClimateConfig(
        climate_id="hot_inland",
        mean_temp=27.0,
        seasonal_amplitude=7.0,
        diurnal_amplitude=6.0,
        solar_peak=900.0,
        humidity_base=35.0,
        noise_std=1.5,
        seed=202,
    ),
)

DEFAULT_MANIFEST = {"temperate_valley": "train", "hot_inland": "test"}

DEFAULT_BUILDINGS = (
    BuildingStatic("bld_a", 12.0, 90.0, 0.35, 600.0, 23.5, 24.5, 0.9, 0.5, 0.8, 2.2, 0.45, 0.40, 0.55),
    BuildingStatic("bld_b", 18.0, 130.0, 0.45, 950.0, 23.5, 24.5, 0.7, 0.4, 0.6, 1.8, 0.35, 0.30, 0.60),
    BuildingStatic("bld_c", 8.0, 60.0, 0.25, 320.0, 23.3, 24.2, 1.2, 0.6, 1.0, 2.6, 0.55, 0.50, 0.45),
    BuildingStatic("bld_d", 24.0, 160.0, 0.55, 1400.0, 23.8, 24.7, 0.6, 0.35, 0.5, 1.6, 0.30, 0.25, 0.65),
)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _weather_csv_text(series: WeatherSeries) -> str:
    lines = [",".join(TEMPORAL_VARS)]
    for rec in series.records:
        lines.append(
            ",".join(
                [
                    str(rec.day), str(rec.month), str(rec.hour),
                    str(rec.diffuse_rad), str(rec.beam_rad), str(rec.temp),
                    str(rec.surface_temp), str(rec.wind_speed), str(rec.wind_dir),
                    str(rec.rel_humidity), str(rec.precip), str(rec.cloud_cover),
                    str(rec.hour_of_year),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def _buildings_csv_text(buildings) -> str:
    lines = [",".join(BUILDING_COLUMNS)]
    for b in buildings:
        lines.append(",".join([b.building_id] + [str(v) for v in b.vector()]))
    return "\n".join(lines) + "\n"


def _loads_csv_text(loads: LoadSeries) -> str:
    lines = [",".join(LOADS_COLUMNS)]
    for i in range(HOURS_PER_YEAR):
        lines.append(f"{i + 1},{loads.heat[i]!s},{loads.cool[i]!s}")
    return "\n".join(lines) + "\n"


def build_synth_dataset(
    climate_cfgs,
    buildings,
    manifest: dict[str, str],
    out_dir,
    k_heat: float = K_HEAT,
    k_cool: float = K_COOL,
    solar_gain: float = SOLAR_GAIN_K_PER_WM2,
    trigger_offset: float = TRIGGER_OFFSET_K,
) -> Path:
    """Generate and write a full dataset in the dataio on-disk format.

    Deterministic: the same configs and seeds reproduce byte-identical files.
    Returns the dataset directory.
    """
    if not any(manifest.get(c.climate_id) == "train" for c in climate_cfgs):
        raise ValueError("manifest must tag at least one generated climate as train")
    out_dir = Path(out_dir)
    (out_dir / "weather").mkdir(parents=True, exist_ok=True)
    (out_dir / "loads").mkdir(parents=True, exist_ok=True)

    for cfg in climate_cfgs:
        series = generate_weather(cfg)
        _atomic_write(out_dir / "weather" / f"{cfg.climate_id}.csv", _weather_csv_text(series))
        for b in buildings:
            loads = simulate_loads(
                b, series, k_heat=k_heat, k_cool=k_cool,
                solar_gain=solar_gain, trigger_offset=trigger_offset,
            )
            _atomic_write(
                out_dir / "loads" / f"{cfg.climate_id}__{b.building_id}.csv",
                _loads_csv_text(loads),
            )
    _atomic_write(out_dir / "buildings.csv", _buildings_csv_text(buildings))
    _atomic_write(out_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    config_doc = {
        "climates": [asdict(c) for c in climate_cfgs],
        "buildings": [
            {"building_id": b.building_id, **dict(zip(BUILDING_COLUMNS[1:], b.vector().tolist()))}
            for b in buildings
        ],
        "manifest": manifest,
        "oracle": {
            "k_heat": k_heat, "k_cool": k_cool,
            "solar_gain": solar_gain, "trigger_offset": trigger_offset,
        },
    }
    _atomic_write(out_dir / "synth-config.json", json.dumps(config_doc, indent=2, sort_keys=True) + "\n")
    return out_dir

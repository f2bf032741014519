"""Deterministic synthetic EV-fleet generator.

Produces charging snippets with the structure the training pipeline needs:
mileage-dependent capacity fade (accelerated by a vehicle's realized share
of fast charging), labeled slow-charging snippets, unlabeled fast-charging
snippets, per-manufacturer affine channel shifts, and a labeled
novel-pattern slice between the slow and fast current regimes.

Physical cues that make capacity inferable from the series: for a given
current the SOC slope scales inversely with capacity, internal resistance
grows with fade (lifting voltage under load), and the cell voltage spread
widens with age.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import CHANNELS, N_CHANNELS, T_STEPS, ChargingSnippet
from .errors import ConfigError
from .rng import STREAM_FLEET, STREAM_NOVEL, substream

SLOW_CURRENT_A = (8.0, 16.0)
FAST_CURRENT_A = (30.0, 60.0)
NOVEL_CURRENT_A = (25.6, 39.4)  # stays inside [25, 40] after clipped noise

_STEP_HOURS = 1.0 / 60.0

# Fixed sensor-noise magnitudes (physical units). These model field
# measurement quality and are independent of `noise_std`, which is the
# capacity-label noise. Current noise stays clipped so peak-current bands
# hold exactly; SOC is clean by construction (integrated on board).
_NOISE_CURRENT_A = 0.2
_NOISE_VOLT_V = 3.0
_NOISE_SPREAD_V = 0.3
_NOISE_TEMP_C = 1.5
_NOISE_RESIST_MOHM = 0.03
_RESIST_BIAS_MOHM = 0.015
_SPREAD_BIAS_V = 0.15


@dataclass(frozen=True)
class FleetConfig:
    n_vehicles: int = 30
    snippets_per_vehicle: int = 24
    manufacturer_id: str = "EVM1"
    seed: int = 0
    rated_capacity_ah: float = 150.0
    fade_per_1000km: float = 0.0004
    fast_fade_multiplier: float = 2.0
    fast_charge_fraction: float = 0.2
    mileage_range_km: tuple[float, float] = (0.0, 200_000.0)
    noise_std: float = 0.5
    manufacturer_offsets: dict[str, tuple[float, float]] = field(default_factory=dict)

    def validate(self) -> None:
        lo, hi = self.mileage_range_km
        if self.n_vehicles < 1 or self.snippets_per_vehicle < 1:
            raise ConfigError("fleet must have at least one vehicle and one snippet each")
        if not lo < hi or lo < 0:
            raise ConfigError(f"bad mileage range ({lo}, {hi})")
        if not 0.0 <= self.fast_charge_fraction <= 1.0:
            raise ConfigError(f"fast_charge_fraction must lie in [0, 1], got {self.fast_charge_fraction}")
        if self.rated_capacity_ah <= 0:
            raise ConfigError("rated capacity must be positive")
        if self.fade_per_1000km < 0 or not math.isfinite(self.fade_per_1000km):
            raise ConfigError("fade rate must be finite and non-negative")
        if self.fast_fade_multiplier < 1.0:
            raise ConfigError("fast_fade_multiplier must be >= 1")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")
        for name in self.manufacturer_offsets:
            if name not in CHANNELS:
                raise ConfigError(f"unknown channel in manufacturer_offsets: {name!r}")


def _capacity_at(config: FleetConfig, mileage_km: float, fast_share: float) -> float:
    fade = config.fade_per_1000km * (mileage_km / 1000.0) * (
        1.0 + config.fast_fade_multiplier * fast_share
    )
    return config.rated_capacity_ah * (1.0 - fade)


def _synth_series(
    rng: np.random.Generator,
    current_level: float,
    capacity_ah: float,
    fade_frac: float,
) -> np.ndarray:
    """One (T, C) snippet: constant-current charge with taper above 80% SOC."""
    noise_i = np.clip(rng.normal(0.0, _NOISE_CURRENT_A, T_STEPS), -0.5, 0.5)
    noise_v = rng.normal(0.0, _NOISE_VOLT_V, T_STEPS)
    noise_spread = np.abs(rng.normal(0.0, _NOISE_SPREAD_V, T_STEPS))
    noise_t = rng.normal(0.0, _NOISE_TEMP_C, T_STEPS)
    noise_r = rng.normal(0.0, _NOISE_RESIST_MOHM, T_STEPS)

    soc = rng.uniform(20.0, 55.0)
    temp = 25.0 + rng.normal(0.0, 1.0)
    # age cues carry per-snippet bias noise: time-averaging alone cannot
    # pin capacity, but curve shape plus level still can
    resist = 1.2 * (1.0 + 1.0 * fade_frac) + rng.normal(0.0, _RESIST_BIAS_MOHM)
    spread_bias = abs(rng.normal(0.0, _SPREAD_BIAS_V))

    out = np.empty((T_STEPS, N_CHANNELS), dtype=np.float64)
    for t in range(T_STEPS):
        taper = 1.0 if soc <= 80.0 else math.exp(-(soc - 80.0) / 8.0)
        i_t = min(max(current_level * taper + noise_i[t], 0.0), current_level)
        ocv = 300.0 + 0.6 * soc + 6.0 * math.tanh((soc - 90.0) / 10.0)
        v_max = min(ocv + i_t * resist * 0.08 + noise_v[t], 420.0)
        spread = 0.5 + 2.0 * fade_frac + spread_bias + noise_spread[t]
        temp += 0.0005 * i_t * i_t - 0.08 * (temp - 25.0)
        out[t, 0] = i_t
        out[t, 1] = v_max
        out[t, 2] = v_max - spread
        out[t, 3] = temp + 0.8
        out[t, 4] = temp - 0.8 + noise_t[t]
        out[t, 5] = soc
        out[t, 6] = resist + noise_r[t]
        soc = min(soc + i_t * _STEP_HOURS / capacity_ah * 100.0, 100.0)
    return out


def _apply_offsets(series: np.ndarray, offsets: dict[str, tuple[float, float]]) -> np.ndarray:
    for name, (gain, bias) in offsets.items():
        c = CHANNELS.index(name)
        series[:, c] = series[:, c] * gain + bias
    return series


def _make_snippet(config, rng, vehicle_id, snippet_id, mileage, fast_share, current_range, labeled):
    capacity = _capacity_at(config, mileage, fast_share)
    if config.noise_std > 0:
        capacity += rng.normal(0.0, config.noise_std)
    else:
        rng.normal(0.0, 1.0)  # keep the stream aligned across noise settings
    capacity = float(np.clip(capacity, 1e-3, config.rated_capacity_ah))
    fade_frac = 1.0 - capacity / config.rated_capacity_ah
    level = rng.uniform(*current_range)
    series = _synth_series(rng, level, capacity, fade_frac)
    series = _apply_offsets(series, config.manufacturer_offsets)
    return ChargingSnippet(
        snippet_id=snippet_id,
        vehicle_id=vehicle_id,
        manufacturer_id=config.manufacturer_id,
        mileage_km=float(mileage),
        capacity_label_ah=capacity if labeled else None,
        series=series.astype(np.float32),
    )


def generate_fleet(config: FleetConfig) -> list[ChargingSnippet]:
    """Deterministic fleet; each vehicle draws from its own substream."""
    config.validate()
    snippets: list[ChargingSnippet] = []
    lo, hi = config.mileage_range_km
    for v in range(config.n_vehicles):
        rng = substream(config.seed, STREAM_FLEET, v)
        vehicle_id = f"{config.manufacturer_id}_v{v:03d}"
        is_fast = rng.random(config.snippets_per_vehicle) < config.fast_charge_fraction
        fast_share = float(is_fast.mean())
        mileages = np.sort(rng.uniform(lo, hi, config.snippets_per_vehicle))
        for k in range(config.snippets_per_vehicle):
            current_range = FAST_CURRENT_A if is_fast[k] else SLOW_CURRENT_A
            snippets.append(
                _make_snippet(
                    config,
                    rng,
                    vehicle_id,
                    f"{vehicle_id}_s{k:03d}",
                    mileages[k],
                    fast_share,
                    current_range,
                    labeled=not is_fast[k],
                )
            )
    return snippets


def generate_novel_slice(config: FleetConfig) -> list[ChargingSnippet]:
    """Labeled snippets with peak currents between the slow and fast
    regimes, all below 100,000 km so they tag as D1."""
    config.validate()
    snippets: list[ChargingSnippet] = []
    n_vehicles = max(3, config.n_vehicles // 6)
    for v in range(n_vehicles):
        rng = substream(config.seed, STREAM_NOVEL, v)
        vehicle_id = f"{config.manufacturer_id}_n{v:03d}"
        fast_share = float(rng.random() * 0.3)
        mileages = np.sort(rng.uniform(5_000.0, 95_000.0, config.snippets_per_vehicle))
        for k in range(config.snippets_per_vehicle):
            snippets.append(
                _make_snippet(
                    config,
                    rng,
                    vehicle_id,
                    f"{vehicle_id}_s{k:03d}",
                    mileages[k],
                    fast_share,
                    NOVEL_CURRENT_A,
                    labeled=True,
                )
            )
    return snippets

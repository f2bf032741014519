"""Properties of the synthetic fleet generator."""

import numpy as np
import pytest
from scipy.stats import wasserstein_distance

from evcap.data import DistributionTag, assign_distribution
from evcap.errors import ConfigError
from evcap.synthgen import FleetConfig, generate_fleet, generate_novel_slice


def labels_by_tag(snippets, tag):
    return [
        s.capacity_label_ah
        for s in snippets
        if s.capacity_label_ah is not None and assign_distribution(s) is tag
    ]


def test_zero_fade_zero_noise_gives_rated_labels():
    config = FleetConfig(n_vehicles=4, snippets_per_vehicle=5, fade_per_1000km=0.0, noise_std=0.0, seed=3)
    for s in generate_fleet(config):
        if s.capacity_label_ah is not None:
            assert s.capacity_label_ah == pytest.approx(150.0, abs=1e-9)


def test_determinism_bitwise():
    config = FleetConfig(n_vehicles=5, snippets_per_vehicle=6, seed=11)
    a = generate_fleet(config)
    b = generate_fleet(config)
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert x.snippet_id == y.snippet_id
        assert x.series.tobytes() == y.series.tobytes()
        assert x.capacity_label_ah == y.capacity_label_ah


def test_d3_labels_below_d1_labels():
    snippets = generate_fleet(FleetConfig(seed=0))
    d1 = labels_by_tag(snippets, DistributionTag.D1)
    d3 = labels_by_tag(snippets, DistributionTag.D3)
    assert d1 and d3
    assert np.mean(d3) < np.mean(d1)


def test_monotone_fade_within_vehicle():
    config = FleetConfig(n_vehicles=3, snippets_per_vehicle=10, noise_std=0.0, seed=5)
    snippets = generate_fleet(config)
    by_vehicle = {}
    for s in snippets:
        if s.capacity_label_ah is not None:
            by_vehicle.setdefault(s.vehicle_id, []).append(s)
    assert by_vehicle
    for group in by_vehicle.values():
        group.sort(key=lambda s: s.mileage_km)
        caps = [s.capacity_label_ah for s in group]
        assert all(a >= b - 1e-9 for a, b in zip(caps, caps[1:]))


def test_label_coverage_matches_fast_fraction():
    config = FleetConfig(n_vehicles=60, snippets_per_vehicle=20, fast_charge_fraction=0.2, seed=9)
    snippets = generate_fleet(config)
    assert len(snippets) >= 1000
    labeled = sum(s.capacity_label_ah is not None for s in snippets)
    assert abs(labeled / len(snippets) - 0.8) <= 0.02


def test_distribution_shift_realized():
    snippets = generate_fleet(FleetConfig(seed=1))
    d1 = labels_by_tag(snippets, DistributionTag.D1)
    d3 = labels_by_tag(snippets, DistributionTag.D3)
    assert wasserstein_distance(d1, d3) > 0.0


def test_slow_snippets_labeled_fast_unlabeled():
    snippets = generate_fleet(FleetConfig(n_vehicles=10, snippets_per_vehicle=10, seed=2))
    for s in snippets:
        peak = float(s.series[:, 0].max())
        if s.capacity_label_ah is None:
            assert peak > 25.0
        else:
            assert peak <= 16.0


def test_voltage_rises_and_soc_ramps():
    config = FleetConfig(n_vehicles=2, snippets_per_vehicle=4, noise_std=0.0, seed=4)
    for s in generate_fleet(config):
        v = s.series[:, 1].astype(np.float64)
        soc = s.series[:, 5].astype(np.float64)
        assert np.all(np.diff(soc) >= -1e-6)
        # monotone-with-noise: compare smoothed endpoints, not raw samples
        assert v[-5:].mean() > v[:5].mean()
        assert np.all(v <= 420.0 + 1e-6)


def test_manufacturer_offsets_applied():
    base = FleetConfig(n_vehicles=2, snippets_per_vehicle=3, noise_std=0.0, seed=6)
    shifted = FleetConfig(
        n_vehicles=2,
        snippets_per_vehicle=3,
        noise_std=0.0,
        seed=6,
        manufacturer_offsets={"temp_max_c": (1.0, 5.0)},
    )
    a = generate_fleet(base)
    b = generate_fleet(shifted)
    for x, y in zip(a, b):
        assert np.allclose(y.series[:, 3], x.series[:, 3] + 5.0, atol=1e-4)
        assert np.allclose(y.series[:, 0], x.series[:, 0])


class TestNovelSlice:
    def test_peak_currents_in_band(self):
        for s in generate_novel_slice(FleetConfig(seed=7)):
            peak = float(s.series[:, 0].max())
            assert 25.0 <= peak <= 40.0

    def test_all_d1(self):
        for s in generate_novel_slice(FleetConfig(seed=7)):
            assert assign_distribution(s) is DistributionTag.D1

    def test_all_labeled(self):
        for s in generate_novel_slice(FleetConfig(seed=7)):
            assert s.capacity_label_ah is not None


def test_invalid_config_rejected():
    with pytest.raises(ConfigError):
        generate_fleet(FleetConfig(mileage_range_km=(10.0, 10.0)))
    with pytest.raises(ConfigError):
        generate_fleet(FleetConfig(fast_charge_fraction=1.5))
    with pytest.raises(ConfigError):
        generate_fleet(FleetConfig(manufacturer_offsets={"bogus": (1.0, 0.0)}))

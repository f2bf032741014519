"""Data model, normalization, splits, and dataset round trips."""

import numpy as np
import pytest

from evcap import data
from evcap.errors import ConfigError, LeakageError, ParseError, ValidationError


def make_snippet(sid="s0", vid="v0", mileage=50_000.0, capacity=150.0, seed=0):
    series = np.random.default_rng(seed).normal(size=(data.T_STEPS, data.N_CHANNELS))
    return data.ChargingSnippet(
        snippet_id=sid,
        vehicle_id=vid,
        manufacturer_id="EVM1",
        mileage_km=mileage,
        capacity_label_ah=capacity,
        series=series.astype(np.float32),
    )


class TestDistributionTag:
    @pytest.mark.parametrize(
        "mileage,tag",
        [
            (50_000, data.DistributionTag.D1),
            (100_000, data.DistributionTag.D1),
            (100_000.5, data.DistributionTag.D2),
            (150_000, data.DistributionTag.D2),
            (150_001, data.DistributionTag.D3),
            (0.0, data.DistributionTag.D1),
        ],
    )
    def test_thresholds(self, mileage, tag):
        assert data.tag_for_mileage(mileage) is tag

    def test_negative_mileage(self):
        with pytest.raises(ValidationError):
            data.tag_for_mileage(-1.0)

    def test_partition_of_halfline(self):
        mileages = np.random.default_rng(0).uniform(0, 400_000, size=500)
        tags = [data.tag_for_mileage(m) for m in mileages]
        assert all(isinstance(t, data.DistributionTag) for t in tags)

    def test_snippet_dispatch(self):
        assert data.assign_distribution(make_snippet(mileage=120_000)) is data.DistributionTag.D2


class TestSnippetInvariants:
    def test_wrong_shape(self):
        with pytest.raises(ValidationError):
            data.ChargingSnippet("s", "v", "m", 0.0, None, np.zeros((10, 7), dtype=np.float32))

    def test_negative_capacity(self):
        with pytest.raises(ValidationError):
            make_snippet(capacity=-1.0)


class TestNormalization:
    def test_constant_channel_maps_to_zero(self):
        snippet = make_snippet()
        stats = data.compute_stats([snippet])
        series = snippet.series.copy()
        series[:, 2] = 5.0
        snippet = data.ChargingSnippet("s", "v", "m", 0.0, None, series)
        stats = data.compute_stats([snippet])
        out = data.normalize(snippet, stats)
        assert np.allclose(out.series[:, 2], 0.0, atol=1e-6)

    def test_flat_channel_divisor_floor(self):
        stats = data.NormalizationStats(
            mean=np.zeros(7, dtype=np.float32),
            std=np.zeros(7, dtype=np.float32),
            value_range=np.full(7, 10.0, dtype=np.float32),
        )
        assert np.allclose(stats.divisor(), 0.1)

    def test_round_trip(self):
        snippets = [make_snippet(sid=f"s{i}", seed=i) for i in range(5)]
        stats = data.compute_stats(snippets)
        out = data.denormalize(data.normalize(snippets[0], stats), stats)
        assert np.allclose(out.series, snippets[0].series, atol=1e-5)

    def test_leakage_assertion(self):
        snippets = [make_snippet(sid=f"s{i}", vid=f"v{i}", seed=i) for i in range(3)]
        with pytest.raises(LeakageError):
            data.compute_stats(snippets, allowed_vehicles={"v0", "v1"})


class TestSplits:
    def test_thirty_vehicles(self):
        split = data.make_splits([f"v{i}" for i in range(30)], seed=1)
        assert len(split.vehicles("pretrain")) == 21
        assert len(split.vehicles("validation")) == 3
        assert len(split.vehicles("test")) == 6
        assert len(split.finetune_vehicles) >= 2

    def test_determinism(self):
        vehicles = [f"v{i}" for i in range(17)]
        a = data.make_splits(vehicles, seed=9)
        b = data.make_splits(vehicles, seed=9)
        assert a == b

    def test_partition_property(self):
        vehicles = [f"v{i}" for i in range(23)]
        split = data.make_splits(vehicles, seed=3)
        pre, val, test = (split.vehicles(s) for s in data.SPLIT_NAMES)
        assert pre | val | test == set(vehicles)
        assert not (pre & val or pre & test or val & test)
        assert split.finetune_vehicles <= pre

    def test_too_few_vehicles(self):
        with pytest.raises(ConfigError):
            data.make_splits([f"v{i}" for i in range(9)], seed=0)

    def test_manifest_round_trip(self, tmp_path):
        split = data.make_splits([f"v{i}" for i in range(12)], seed=5)
        path = tmp_path / "manifest.csv"
        data.save_manifest(split, path)
        assert data.load_manifest(path) == split


class TestDatasetIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        snippets = []
        for i in range(100):
            cap = float(rng.uniform(120, 160)) if i % 3 else None
            snippets.append(
                data.ChargingSnippet(
                    snippet_id=f"s{i:03d}",
                    vehicle_id=f"v{i % 7}",
                    manufacturer_id="EVM1",
                    mileage_km=float(rng.uniform(0, 200_000)),
                    capacity_label_ah=cap,
                    series=rng.normal(scale=40.0, size=(128, 7)).astype(np.float32),
                )
            )
        path = tmp_path / "fleet.csv"
        data.save_dataset(snippets, path)
        loaded = data.load_dataset(path)
        assert len(loaded) == len(snippets)
        for a, b in zip(snippets, loaded):
            assert a.snippet_id == b.snippet_id
            assert a.vehicle_id == b.vehicle_id
            assert a.mileage_km == pytest.approx(b.mileage_km, abs=1e-5)
            if a.capacity_label_ah is None:
                assert b.capacity_label_ah is None
            else:
                assert a.capacity_label_ah == pytest.approx(b.capacity_label_ah, abs=1e-5)
            assert np.allclose(a.series, b.series, atol=1e-5)

    def test_short_snippet_rejected(self, tmp_path):
        snippet = make_snippet()
        path = tmp_path / "bad.csv"
        data.save_dataset([snippet], path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-1]) + "\n")  # drop row 127
        with pytest.raises(ParseError, match="s0"):
            data.load_dataset(path)

    def test_duplicate_t_index(self, tmp_path):
        snippet = make_snippet()
        path = tmp_path / "bad.csv"
        data.save_dataset([snippet], path)
        lines = path.read_text().splitlines()
        lines.append(lines[-1])  # repeat t_index 127
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError, match="t_index"):
            data.load_dataset(path)

    def test_wrong_column_count(self, tmp_path):
        snippet = make_snippet()
        path = tmp_path / "bad.csv"
        data.save_dataset([snippet], path)
        lines = path.read_text().splitlines()
        lines[5] = lines[5] + ",1.0"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError, match="line 6"):
            data.load_dataset(path)

    def test_empty_capacity_is_none(self, tmp_path):
        snippet = data.ChargingSnippet(
            "s0", "v0", "EVM1", 10.0, None, np.zeros((128, 7), dtype=np.float32)
        )
        path = tmp_path / "fleet.csv"
        data.save_dataset([snippet], path)
        assert data.load_dataset(path)[0].capacity_label_ah is None

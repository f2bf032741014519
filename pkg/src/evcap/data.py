"""Charging-snippet data model, normalization, splits, and CSV persistence."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .errors import ConfigError, LeakageError, ParseError, SchemaError, ValidationError
from .rng import STREAM_SPLIT, substream

T_STEPS = 128
CHANNELS = (
    "current_a",
    "voltage_max_v",
    "voltage_min_v",
    "temp_max_c",
    "temp_min_c",
    "soc_pct",
    "resistance_mohm",
)
N_CHANNELS = len(CHANNELS)

DATASET_HEADER = [
    "snippet_id",
    "vehicle_id",
    "manufacturer_id",
    "mileage_km",
    "capacity_ah",
    "t_index",
    *CHANNELS,
]

MANIFEST_HEADER = ["vehicle_id", "split", "finetune_flag"]

SPLIT_NAMES = ("pretrain", "validation", "test")


class DistributionTag(str, Enum):
    """Mileage-partitioned distribution buckets."""

    D1 = "D1"
    D2 = "D2"
    D3 = "D3"


@dataclass(frozen=True)
class ChargingSnippet:
    """One fixed-length multivariate charging record with metadata.

    `series` is (T_STEPS, N_CHANNELS) float32 and treated as immutable
    after construction. `capacity_label_ah` is None for unlabeled snippets.
    """

    snippet_id: str
    vehicle_id: str
    manufacturer_id: str
    mileage_km: float
    capacity_label_ah: float | None
    series: np.ndarray

    def __post_init__(self):
        if self.series.shape != (T_STEPS, N_CHANNELS):
            raise ValidationError(
                f"snippet {self.snippet_id}: series shape {self.series.shape} "
                f"!= ({T_STEPS}, {N_CHANNELS})"
            )
        if not np.all(np.isfinite(self.series)):
            raise ValidationError(f"snippet {self.snippet_id}: non-finite series values")
        if self.mileage_km < 0:
            raise ValidationError(f"snippet {self.snippet_id}: negative mileage")
        if self.capacity_label_ah is not None and self.capacity_label_ah <= 0:
            raise ValidationError(f"snippet {self.snippet_id}: non-positive capacity label")


def tag_for_mileage(mileage_km: float) -> DistributionTag:
    """Bucket boundaries are inclusive on the lower-indexed side."""
    if mileage_km < 0:
        raise ValidationError(f"negative mileage {mileage_km}")
    if mileage_km <= 100_000:
        return DistributionTag.D1
    if mileage_km <= 150_000:
        return DistributionTag.D2
    return DistributionTag.D3


def assign_distribution(snippet: ChargingSnippet) -> DistributionTag:
    return tag_for_mileage(snippet.mileage_km)


@dataclass(frozen=True)
class NormalizationStats:
    """Per-channel corpus statistics; the effective divisor is floored at
    1% of the channel's value range so flat channels stay well-scaled."""

    mean: np.ndarray
    std: np.ndarray
    value_range: np.ndarray

    def divisor(self) -> np.ndarray:
        return np.maximum(np.maximum(self.std, 0.01 * self.value_range), 1e-6)


def compute_stats(
    snippets: list[ChargingSnippet], allowed_vehicles: set[str] | None = None
) -> NormalizationStats:
    """Corpus-level channel statistics.

    When `allowed_vehicles` is given, any snippet outside it aborts with a
    leakage error: statistics must come from the pretraining split only.
    """
    if not snippets:
        raise ConfigError("cannot compute statistics over an empty corpus")
    if allowed_vehicles is not None:
        outside = {s.vehicle_id for s in snippets} - set(allowed_vehicles)
        if outside:
            raise LeakageError(f"statistics corpus contains held-out vehicles: {sorted(outside)}")
    stacked = np.stack([s.series for s in snippets]).astype(np.float64)
    mean = stacked.mean(axis=(0, 1))
    std = stacked.std(axis=(0, 1))
    rng_ = stacked.max(axis=(0, 1)) - stacked.min(axis=(0, 1))
    return NormalizationStats(
        mean.astype(np.float32), std.astype(np.float32), rng_.astype(np.float32)
    )


def normalize(snippet: ChargingSnippet, stats: NormalizationStats) -> ChargingSnippet:
    if stats.mean.shape != (N_CHANNELS,):
        raise SchemaError(f"stats channel count {stats.mean.shape} != {N_CHANNELS}")
    series = (snippet.series - stats.mean) / stats.divisor()
    return replace(snippet, series=series.astype(np.float32))


def denormalize(snippet: ChargingSnippet, stats: NormalizationStats) -> ChargingSnippet:
    series = snippet.series * stats.divisor() + stats.mean
    return replace(snippet, series=series.astype(np.float32))


@dataclass(frozen=True)
class SplitAssignment:
    """Vehicle-level split membership plus the labeled fine-tuning subset."""

    assignment: dict[str, str]
    finetune_vehicles: frozenset[str]

    def vehicles(self, split: str) -> set[str]:
        return {v for v, s in self.assignment.items() if s == split}

    def check(self) -> None:
        for v, s in self.assignment.items():
            if s not in SPLIT_NAMES:
                raise ValidationError(f"vehicle {v} has unknown split {s!r}")
        if not self.finetune_vehicles <= self.vehicles("pretrain"):
            raise LeakageError("finetune vehicles must be a subset of the pretrain split")


def make_splits(vehicles: list[str], seed: int) -> SplitAssignment:
    """Deterministic 70/10/20 vehicle partition; finetune subset is the
    first 10% (rounded up, at least one) of the shuffled pretrain block."""
    vehicles = sorted(set(vehicles))
    if len(vehicles) < 10:
        raise ConfigError(f"need at least 10 vehicles to split, got {len(vehicles)}")
    order = list(substream(seed, STREAM_SPLIT).permutation(len(vehicles)))
    shuffled = [vehicles[i] for i in order]
    n = len(shuffled)
    n_pre = round(0.7 * n)
    n_val = round(0.1 * n)
    pretrain = shuffled[:n_pre]
    validation = shuffled[n_pre : n_pre + n_val]
    test = shuffled[n_pre + n_val :]
    assignment = {v: "pretrain" for v in pretrain}
    assignment.update({v: "validation" for v in validation})
    assignment.update({v: "test" for v in test})
    n_ft = max(1, math.ceil(0.1 * len(pretrain)))
    split = SplitAssignment(assignment, frozenset(pretrain[:n_ft]))
    split.check()
    return split


# ---------------------------------------------------------------------------
# CSV persistence
# ---------------------------------------------------------------------------


def fmt_float(v: float) -> str:
    """Shortest decimal string that reproduces the float32 value exactly."""
    return repr(float(np.float32(v)))


def fmt_meta(v: float) -> str:
    """Full-precision decimal string for float64 metadata fields."""
    return repr(float(v))


def write_rows(path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def read_rows(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        return header, list(reader)


def save_dataset(snippets: list[ChargingSnippet], path) -> None:
    def rows():
        for s in snippets:
            cap = "" if s.capacity_label_ah is None else fmt_meta(s.capacity_label_ah)
            for t in range(T_STEPS):
                yield [
                    s.snippet_id,
                    s.vehicle_id,
                    s.manufacturer_id,
                    fmt_meta(s.mileage_km),
                    cap,
                    str(t),
                    *(fmt_float(v) for v in s.series[t]),
                ]

    write_rows(path, DATASET_HEADER, rows())


def load_dataset(path) -> list[ChargingSnippet]:
    header, rows = read_rows(path)
    if header != DATASET_HEADER:
        raise ParseError(f"unexpected header {header}", line=1)

    snippets: list[ChargingSnippet] = []
    current: dict | None = None

    def finish(record: dict, line: int) -> None:
        if record["next_t"] != T_STEPS:
            raise ParseError(
                f"snippet {record['snippet_id']} has {record['next_t']} rows, expected {T_STEPS}",
                line=line,
            )
        snippets.append(
            ChargingSnippet(
                snippet_id=record["snippet_id"],
                vehicle_id=record["vehicle_id"],
                manufacturer_id=record["manufacturer_id"],
                mileage_km=record["mileage_km"],
                capacity_label_ah=record["capacity"],
                series=np.asarray(record["series"], dtype=np.float32),
            )
        )

    seen_ids: set[str] = set()
    for i, row in enumerate(rows):
        line = i + 2  # header occupies line 1
        if len(row) != len(DATASET_HEADER):
            raise ParseError(f"expected {len(DATASET_HEADER)} columns, got {len(row)}", line=line)
        sid, vid, mid, mileage_s, cap_s, t_s = row[:6]
        try:
            t_index = int(t_s)
            mileage = float(mileage_s)
            capacity = float(cap_s) if cap_s != "" else None
            values = [float(v) for v in row[6:]]
        except ValueError as e:
            raise ParseError(str(e), line=line) from None

        if current is None or sid != current["snippet_id"]:
            if current is not None:
                finish(current, line - 1)
            if sid in seen_ids:
                raise ParseError(f"snippet {sid} appears in two non-contiguous blocks", line=line)
            seen_ids.add(sid)
            current = {
                "snippet_id": sid,
                "vehicle_id": vid,
                "manufacturer_id": mid,
                "mileage_km": mileage,
                "capacity": capacity,
                "series": [],
                "next_t": 0,
            }
        if t_index != current["next_t"]:
            if t_index < current["next_t"]:
                raise ParseError(f"duplicate t_index {t_index} for snippet {sid}", line=line)
            raise ParseError(
                f"non-contiguous t_index for snippet {sid}: expected {current['next_t']}, got {t_index}",
                line=line,
            )
        current["series"].append(values)
        current["next_t"] += 1

    if current is not None:
        finish(current, len(rows) + 1)
    return snippets


def save_manifest(split: SplitAssignment, path) -> None:
    rows = [
        [v, s, "1" if v in split.finetune_vehicles else "0"]
        for v, s in sorted(split.assignment.items())
    ]
    write_rows(path, MANIFEST_HEADER, rows)


def load_manifest(path) -> SplitAssignment:
    header, rows = read_rows(path)
    if header != MANIFEST_HEADER:
        raise ParseError(f"unexpected manifest header {header}", line=1)
    assignment: dict[str, str] = {}
    finetune = set()
    for i, row in enumerate(rows):
        if len(row) != 3:
            raise ParseError(f"expected 3 columns, got {len(row)}", line=i + 2)
        vid, split_name, flag = row
        if vid in assignment:
            raise ParseError(f"vehicle {vid} listed twice", line=i + 2)
        assignment[vid] = split_name
        if flag == "1":
            finetune.add(vid)
    split = SplitAssignment(assignment, frozenset(finetune))
    split.check()
    return split

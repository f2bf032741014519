"""Supervised fine-tuning, metrics, and the experiment protocols.

Fine-tuning clones the pretrained encoder, re-initializes the regression
head, and minimizes squared error on standardized labels with early
stopping on validation RMSE. Protocols wire corpus variants, targets, and
seeds into grids of (pretrain -> finetune -> test) cells; pretraining
results are cached per (corpus, loss setting, seed) so the three targets
of a cell share one pretrained encoder.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .data import (
    ChargingSnippet,
    DistributionTag,
    NormalizationStats,
    SplitAssignment,
    assign_distribution,
    compute_stats,
    fmt_meta,
    normalize,
    write_rows,
)
from .errors import ConfigError, LeakageError, ParameterError
from .model import ModelHyper, ParamDict, clone_params, init_params, regress_snippets
from .numerics import Tensor
from .optim import Adam, cosine_warmup_lr
from .pretrain import PretrainConfig, PretrainReport, pretrain_loop
from .rng import STREAM_FINETUNE, STREAM_INIT, substream

PROTOCOLS = ("unlabeled_impact", "age_shift", "cross_manufacturer", "novel_inference", "ablation")
CORPUS_VARIANTS = ("d1_labeled_only", "d1_full")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def rmse(preds, labels) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape or preds.size < 1:
        raise ParameterError(f"rmse needs equal-length non-empty vectors, got {preds.shape} and {labels.shape}")
    return float(np.sqrt(np.mean((preds - labels) ** 2)))


def mape(preds, labels) -> float:
    """Mean absolute percentage error; zero labels are excluded with a
    warning since physical capacities are strictly positive."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape or preds.size < 1:
        raise ParameterError(f"mape needs equal-length non-empty vectors, got {preds.shape} and {labels.shape}")
    live = labels != 0.0
    n_zero = int(np.sum(~live))
    if n_zero:
        warnings.warn(f"mape: excluded {n_zero} zero labels (likely data corruption)")
    if not live.any():
        raise ParameterError("mape: all labels are zero")
    return float(100.0 * np.mean(np.abs(preds[live] - labels[live]) / np.abs(labels[live])))


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FinetuneConfig:
    hyper: ModelHyper
    epochs: int = 200
    batch_size: int = 32
    patience: int = 20
    peak_lr: float = 0.01
    warmup_frac: float = 0.05
    freeze_encoder: bool = False


@dataclass
class FinetuneReport:
    train_mse: list[float] = field(default_factory=list)
    val_rmse: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_epoch: int = -1

    def epochs_to_threshold(self, threshold: float) -> int:
        """First epoch whose training loss drops below threshold (or a
        sentinel past the run length)."""
        for i, v in enumerate(self.train_mse):
            if v < threshold:
                return i
        return len(self.train_mse) + 1


def _snippet_batch(snippets: list[ChargingSnippet]) -> np.ndarray:
    return np.stack([s.series for s in snippets])


def predict(
    params: ParamDict,
    snippets: list[ChargingSnippet],
    label_mean: float,
    label_std: float,
    hyper: ModelHyper,
    batch_size: int = 32,
) -> np.ndarray:
    """Capacity estimates in Ah for a list of snippets."""
    preds = []
    for start in range(0, len(snippets), batch_size):
        batch = _snippet_batch(snippets[start : start + batch_size])
        out = regress_snippets(batch, params, hyper)
        preds.append(out.data[:, 0])
    return np.concatenate(preds) * label_std + label_mean


def finetune(
    pretrained: ParamDict | None,
    train: list[ChargingSnippet],
    val: list[ChargingSnippet],
    config: FinetuneConfig,
    seed: int,
) -> tuple[ParamDict, tuple[float, float], FinetuneReport]:
    """Returns (best parameters, (label_mean, label_std), report).

    `pretrained=None` trains from random initialization (the from-scratch
    baseline). Labels are standardized on the training set; predictions are
    mapped back to Ah before any metric is computed.
    """
    if not train:
        raise ConfigError("fine-tuning needs a non-empty labeled training set")
    for s in train + val:
        if s.capacity_label_ah is None:
            raise ConfigError(f"snippet {s.snippet_id} is unlabeled")

    if pretrained is None:
        params = init_params(config.hyper, substream(seed, STREAM_INIT))
    else:
        params = clone_params(pretrained)
    head_init = init_params(config.hyper, substream(seed, STREAM_FINETUNE))
    params["head_w"] = head_init["head_w"]
    params["head_b"] = head_init["head_b"]

    labels = np.array([s.capacity_label_ah for s in train], dtype=np.float64)
    label_mean = float(labels.mean())
    label_std = float(max(labels.std(), 1e-6))
    y_train = ((labels - label_mean) / label_std).astype(np.float32)
    val_labels = np.array([s.capacity_label_ah for s in val], dtype=np.float64)

    trainable = {"head_w", "head_b"}
    if not config.freeze_encoder:
        trainable |= {k for k in params if k.startswith("enc_")}
    skip = frozenset(set(params) - trainable)

    optimizer = Adam()
    n_batches = (len(train) + config.batch_size - 1) // config.batch_size
    total_steps = config.epochs * n_batches
    report = FinetuneReport()
    best_params = clone_params(params)
    best_rmse = float("inf")
    since_best = 0
    step_idx = 0

    for epoch in range(config.epochs):
        order = substream(seed, STREAM_FINETUNE, epoch).permutation(len(train))
        epoch_loss, seen = 0.0, 0
        for start in range(0, len(train), config.batch_size):
            chunk = order[start : start + config.batch_size]
            batch = [train[i] for i in chunk]
            preds = regress_snippets(_snippet_batch(batch), params, config.hyper)
            target = Tensor(y_train[chunk].reshape(-1, 1))
            diff = nx.sub(preds, target)
            loss = nx.mean_all(nx.mul(diff, diff))
            nx.backward(loss)
            lr = cosine_warmup_lr(step_idx, total_steps, config.peak_lr, config.warmup_frac)
            optimizer.step(params, lr, skip=skip)
            step_idx += 1
            epoch_loss += loss.item() * len(batch)
            seen += len(batch)
        report.train_mse.append(epoch_loss / seen)

        if val:
            val_preds = predict(params, val, label_mean, label_std, config.hyper, config.batch_size)
            score = rmse(val_preds, val_labels)
            report.val_rmse.append(score)
            if score < best_rmse:
                best_rmse = score
                best_params = clone_params(params)
                report.best_epoch = epoch
                since_best = 0
            else:
                since_best += 1
                if since_best >= config.patience:
                    report.stopped_epoch = epoch
                    break
    else:
        report.stopped_epoch = config.epochs - 1

    if not val:
        best_params = params
        report.best_epoch = config.epochs - 1
    return best_params, (label_mean, label_std), report


# ---------------------------------------------------------------------------
# Corpora and protocols
# ---------------------------------------------------------------------------


@dataclass
class ProtocolCorpora:
    fleet: list[ChargingSnippet]
    splits: SplitAssignment
    transfer_fleet: list[ChargingSnippet] | None = None
    transfer_splits: SplitAssignment | None = None
    novel: list[ChargingSnippet] | None = None


@dataclass
class EvalReport:
    """Seed-aggregated scores for one protocol cell."""

    protocol: str
    pretrain_corpus: str
    loss_setting: str
    target: str
    seeds: list[int]
    rmse_per_seed: list[float]
    mape_per_seed: list[float]
    n_test: int
    recon_mse_per_seed: list[float] | None = None

    def __post_init__(self):
        if not self.seeds:
            raise ParameterError("a report needs at least one seed")
        if any(r < 0 for r in self.rmse_per_seed) or any(m < 0 for m in self.mape_per_seed):
            raise ParameterError("metrics must be non-negative")

    @property
    def rmse_mean(self) -> float:
        return float(np.mean(self.rmse_per_seed))

    @property
    def rmse_std(self) -> float:
        return float(np.std(self.rmse_per_seed))

    @property
    def mape_mean(self) -> float:
        return float(np.mean(self.mape_per_seed))

    @property
    def mape_std(self) -> float:
        return float(np.std(self.mape_per_seed))


def strip_labels(snippets: list[ChargingSnippet]) -> list[ChargingSnippet]:
    return [replace(s, capacity_label_ah=None) for s in snippets]


def pretrain_corpus(
    fleet: list[ChargingSnippet], splits: SplitAssignment, variant: str, split_name: str = "pretrain"
) -> list[ChargingSnippet]:
    """Distribution-1 snippets of one split, labels removed.

    `d1_full` keeps every D1 snippet including unlabeled fast-charging
    ones; `d1_labeled_only` keeps only the initially labeled slow-charging
    snippets, then uses them without labels.
    """
    if variant not in CORPUS_VARIANTS:
        raise ConfigError(f"unknown corpus variant {variant!r}")
    vehicles = splits.vehicles(split_name)
    out = [
        s
        for s in fleet
        if s.vehicle_id in vehicles and assign_distribution(s) is DistributionTag.D1
    ]
    if variant == "d1_labeled_only":
        out = [s for s in out if s.capacity_label_ah is not None]
    return strip_labels(out)


def labeled_subset(
    fleet: list[ChargingSnippet], vehicles: set[str], tag: DistributionTag
) -> list[ChargingSnippet]:
    return [
        s
        for s in fleet
        if s.vehicle_id in vehicles
        and s.capacity_label_ah is not None
        and assign_distribution(s) is tag
    ]


def check_no_leakage(corpora: ProtocolCorpora) -> None:
    for fleet, splits in ((corpora.fleet, corpora.splits), (corpora.transfer_fleet, corpora.transfer_splits)):
        if fleet is None or splits is None:
            continue
        splits.check()
        known = set(splits.assignment)
        fleet_vehicles = {s.vehicle_id for s in fleet}
        if not fleet_vehicles <= known:
            raise LeakageError(f"vehicles missing from manifest: {sorted(fleet_vehicles - known)[:5]}")
        pre, val, test = (splits.vehicles(n) for n in ("pretrain", "validation", "test"))
        if pre & val or pre & test or val & test:
            raise LeakageError("split sets overlap")
    if corpora.novel:
        novel_vehicles = {s.vehicle_id for s in corpora.novel}
        if novel_vehicles & set(corpora.splits.assignment):
            raise LeakageError("novel slice shares vehicles with the main fleet")


@dataclass
class TrainedCell:
    params: ParamDict
    stats: NormalizationStats
    report: PretrainReport


PretrainCache = dict[tuple[str, str, int], TrainedCell]


def _pretrain_cell(
    fleet: list[ChargingSnippet],
    splits: SplitAssignment,
    corpus_id: str,
    variant: str,
    loss_setting: str,
    seed: int,
    pconfig: PretrainConfig,
    cache: PretrainCache,
) -> TrainedCell:
    key = (f"{corpus_id}:{variant}", loss_setting, seed)
    if key in cache:
        return cache[key]
    corpus = pretrain_corpus(fleet, splits, variant)
    if not corpus:
        raise ConfigError(f"empty pretraining corpus for {key}")
    stats = compute_stats(corpus, allowed_vehicles=splits.vehicles("pretrain"))
    train = [normalize(s, stats) for s in corpus]
    val_corpus = pretrain_corpus(fleet, splits, variant, split_name="validation")
    val = [normalize(s, stats) for s in val_corpus]
    config = replace(pconfig, contrastive_enabled=(loss_setting == "lc_lr"))
    params, _, report = pretrain_loop(train, val, config, seed)
    cell = TrainedCell(params=params, stats=stats, report=report)
    cache[key] = cell
    return cell


def _finetune_and_score(
    cell: TrainedCell,
    fleet: list[ChargingSnippet],
    splits: SplitAssignment,
    tag: DistributionTag,
    fconfig: FinetuneConfig,
    seed: int,
    test_override: list[ChargingSnippet] | None = None,
) -> tuple[float, float, int]:
    """Fine-tune on one target distribution and score its test vehicles
    (or an explicit test slice). Returns (rmse, mape, n_test)."""
    train = labeled_subset(fleet, splits.finetune_vehicles, tag)
    val = labeled_subset(fleet, splits.vehicles("validation"), tag)
    test = test_override if test_override is not None else labeled_subset(fleet, splits.vehicles("test"), tag)
    if not train:
        raise ConfigError(f"no labeled fine-tuning snippets for target {tag.value}")
    if not test:
        raise ConfigError(f"no labeled test snippets for target {tag.value}")
    train_n = [normalize(s, cell.stats) for s in train]
    val_n = [normalize(s, cell.stats) for s in val]
    test_n = [normalize(s, cell.stats) for s in test]
    params, (mean, std), _ = finetune(cell.params, train_n, val_n, fconfig, seed)
    preds = predict(params, test_n, mean, std, fconfig.hyper, fconfig.batch_size)
    labels = np.array([s.capacity_label_ah for s in test], dtype=np.float64)
    return rmse(preds, labels), mape(preds, labels), len(test)


def run_protocol(
    protocol: str,
    corpora: ProtocolCorpora,
    seeds: list[int],
    pconfig: PretrainConfig,
    fconfig: FinetuneConfig,
    cache: PretrainCache | None = None,
) -> list[EvalReport]:
    """Execute one experiment protocol over all seeds."""
    if protocol not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")
    if not seeds:
        raise ConfigError("need at least one seed")
    check_no_leakage(corpora)
    cache = cache if cache is not None else {}
    fleet, splits = corpora.fleet, corpora.splits
    corpus_id = fleet[0].manufacturer_id if fleet else "fleet"
    targets = (DistributionTag.D1, DistributionTag.D2, DistributionTag.D3)
    reports: list[EvalReport] = []

    def grid(variants, loss_setting, src_fleet, src_splits, src_id):
        for variant in variants:
            for tag in targets:
                scores = []
                for seed in seeds:
                    cell = _pretrain_cell(
                        src_fleet, src_splits, src_id, variant, loss_setting, seed, pconfig, cache
                    )
                    scores.append(_finetune_and_score(cell, fleet, splits, tag, fconfig, seed))
                recon = [
                    cache[(f"{src_id}:{variant}", loss_setting, seed)].report.final_val_mse
                    for seed in seeds
                ]
                reports.append(
                    EvalReport(
                        protocol=protocol,
                        pretrain_corpus=f"{src_id}:{variant}",
                        loss_setting=loss_setting,
                        target=tag.value,
                        seeds=list(seeds),
                        rmse_per_seed=[s[0] for s in scores],
                        mape_per_seed=[s[1] for s in scores],
                        n_test=scores[0][2],
                        recon_mse_per_seed=recon if protocol == "ablation" else None,
                    )
                )

    if protocol == "unlabeled_impact":
        grid(["d1_labeled_only", "d1_full"], "lc_lr", fleet, splits, corpus_id)
    elif protocol == "age_shift":
        grid(["d1_full"], "lc_lr", fleet, splits, corpus_id)
    elif protocol == "cross_manufacturer":
        if corpora.transfer_fleet is None or corpora.transfer_splits is None:
            raise ConfigError("cross_manufacturer protocol needs a transfer fleet and manifest")
        transfer_id = corpora.transfer_fleet[0].manufacturer_id
        grid(["d1_full"], "lc_lr", corpora.transfer_fleet, corpora.transfer_splits, transfer_id)
    elif protocol == "ablation":
        for loss_setting in ("lr_only", "lc_lr"):
            grid(["d1_full"], loss_setting, fleet, splits, corpus_id)
    elif protocol == "novel_inference":
        if not corpora.novel:
            raise ConfigError("novel_inference protocol needs a novel slice")
        for variant in CORPUS_VARIANTS:
            scores = []
            for seed in seeds:
                cell = _pretrain_cell(fleet, splits, corpus_id, variant, "lc_lr", seed, pconfig, cache)
                scores.append(
                    _finetune_and_score(
                        cell, fleet, splits, DistributionTag.D1, fconfig, seed,
                        test_override=corpora.novel,
                    )
                )
            reports.append(
                EvalReport(
                    protocol=protocol,
                    pretrain_corpus=f"{corpus_id}:{variant}",
                    loss_setting="lc_lr",
                    target="novel",
                    seeds=list(seeds),
                    rmse_per_seed=[s[0] for s in scores],
                    mape_per_seed=[s[1] for s in scores],
                    n_test=scores[0][2],
                )
            )
    return reports


# ---------------------------------------------------------------------------
# Report serialization
# ---------------------------------------------------------------------------

REPORT_HEADER = [
    "protocol",
    "pretrain_corpus",
    "loss_setting",
    "target",
    "n_test",
    "seeds",
    "rmse_per_seed",
    "rmse_mean",
    "rmse_std",
    "mape_per_seed",
    "mape_mean",
    "mape_std",
    "recon_mse_per_seed",
    "config_hash",
    "seed",
    "version",
]


def _joined(values) -> str:
    return ";".join(fmt_meta(v) for v in values)


def write_reports_csv(reports: list[EvalReport], path, provenance: dict[str, str]) -> None:
    rows = [
        [
            r.protocol,
            r.pretrain_corpus,
            r.loss_setting,
            r.target,
            str(r.n_test),
            ";".join(str(s) for s in r.seeds),
            _joined(r.rmse_per_seed),
            fmt_meta(r.rmse_mean),
            fmt_meta(r.rmse_std),
            _joined(r.mape_per_seed),
            fmt_meta(r.mape_mean),
            fmt_meta(r.mape_std),
            _joined(r.recon_mse_per_seed) if r.recon_mse_per_seed else "",
            provenance.get("config_hash", ""),
            provenance.get("seed", ""),
            provenance.get("version", ""),
        ]
        for r in reports
    ]
    write_rows(path, REPORT_HEADER, rows)


def write_reports_jsonl(reports: list[EvalReport], path, provenance: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in reports:
            record = {
                "protocol": r.protocol,
                "pretrain_corpus": r.pretrain_corpus,
                "loss_setting": r.loss_setting,
                "target": r.target,
                "n_test": r.n_test,
                "seeds": r.seeds,
                "rmse_per_seed": r.rmse_per_seed,
                "rmse_mean": r.rmse_mean,
                "rmse_std": r.rmse_std,
                "mape_per_seed": r.mape_per_seed,
                "mape_mean": r.mape_mean,
                "mape_std": r.mape_std,
                "recon_mse_per_seed": r.recon_mse_per_seed,
                **provenance,
            }
            fh.write(json.dumps(record) + "\n")


def write_svg_chart(reports: list[EvalReport], path, provenance: dict[str, str]) -> None:
    """Self-contained bar chart of seed-mean RMSE per protocol cell."""
    bar_w, gap, height, base = 46, 18, 260, 210
    entries = [(f"{r.pretrain_corpus}|{r.loss_setting}|{r.target}", r.rmse_mean) for r in reports]
    width = gap + len(entries) * (bar_w + gap) + 120
    top = max((v for _, v in entries), default=1.0) or 1.0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f"<!-- {' '.join(f'{k}={v}' for k, v in sorted(provenance.items()))} -->",
        '<style>text{font-family:monospace;font-size:9px}</style>',
        f'<text x="{gap}" y="14">seed-mean RMSE (Ah)</text>',
    ]
    for i, (label, value) in enumerate(entries):
        x = gap + i * (bar_w + gap)
        h = max(1.0, (value / top) * (base - 40))
        parts.append(
            f'<rect x="{x}" y="{base - h:.1f}" width="{bar_w}" height="{h:.1f}" fill="#4878a8"/>'
        )
        parts.append(f'<text x="{x}" y="{base - h - 4:.1f}">{value:.3f}</text>')
        parts.append(
            f'<text x="{x + bar_w / 2:.0f}" y="{base + 10}" '
            f'transform="rotate(40 {x + bar_w / 2:.0f} {base + 10})">{label}</text>'
        )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")

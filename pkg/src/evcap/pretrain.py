"""Contrastive similarity learning and similarity-weighted masked reconstruction.

A batch of b snippets becomes M = b*C univariate units, one per
(snippet, channel). Originals occupy rows [0, M) and their masked views
rows [M, 2M), so each row's positive sits at a +/-M offset diagonal. The
2M x 2M cosine-similarity matrix drives two couplings:

  * a contrastive loss pulling each unit toward its masked counterpart and
    away from the other 2M - 2 rows, and
  * per-unit reconstruction weights (a temperature softmax over the other
    2M - 1 rows) that mix point-wise representations into a reconstruction
    of the unit's parent snippet, scored against the full T x C original.

Both loss terms are balanced by learnable log-variance weights; the loop
optimizes everything jointly with Adam under a warmup + cosine schedule.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .data import CHANNELS, ChargingSnippet, write_rows
from .errors import DimensionError, DivergenceError, NumericError, PairingError, ParameterError
from .masking import geometric_mask
from .model import (
    ModelHyper,
    ParamDict,
    decode_flat,
    encode_sequences,
    init_params,
    project_flat,
    save_checkpoint,
)
from .numerics import Tensor
from .optim import Adam, cosine_warmup_lr
from .rng import (
    STREAM_CALIBRATE,
    STREAM_INIT,
    STREAM_SHUFFLE,
    STREAM_TRAIN_MASK,
    STREAM_VAL_MASK,
    substream,
)

RowLabel = tuple[str, str, str]  # (snippet_id, channel, "original" | "masked")


@dataclass
class SimilarityRecord:
    """Batched cosine-similarity matrix plus the reconstruction weights.

    `d` stays differentiable; `matrix` is a clipped float32 snapshot for
    inspection and export. Rows [0, n_original) are original units.
    """

    d: Tensor
    weights: Tensor
    temperature: float
    n_original: int
    labels: list[RowLabel]

    @property
    def matrix(self) -> np.ndarray:
        return np.clip(self.d.data.astype(np.float32), -1.0, 1.0)


@dataclass(frozen=True)
class UncertaintyWeights:
    """Learnable log-variances balancing the two loss terms."""

    logvar_r: Tensor
    logvar_c: Tensor


def positive_pairs(n_original: int) -> np.ndarray:
    """Row index of each row's positive: the +/-M offset counterpart."""
    idx = np.arange(2 * n_original)
    return (idx + n_original) % (2 * n_original)


def similarity_matrix(
    snippet_reps: Tensor,
    temperature: float,
    labels: list[RowLabel] | None = None,
    n_original: int | None = None,
) -> SimilarityRecord:
    """Pairwise cosine similarities of 2M snippet-wise vectors."""
    if temperature <= 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    n_rows = snippet_reps.shape[0]
    if n_rows % 2 != 0 or n_rows < 2:
        raise DimensionError(f"expected an even number of rows >= 2, got {n_rows}")
    if n_original is None:
        n_original = n_rows // 2
    if labels is None:
        labels = [("row%d" % i, "?", "original" if i < n_original else "masked") for i in range(n_rows)]
    if len(labels) != n_rows:
        raise DimensionError(f"{len(labels)} labels for {n_rows} rows")
    unit = nx.l2_normalize_rows(snippet_reps, floor=1e-8)
    d = nx.matmul(unit, nx.transpose(unit))
    weights = nx.offdiag_softmax_rows(d, temperature)
    return SimilarityRecord(d=d, weights=weights, temperature=temperature, n_original=n_original, labels=labels)


def contrastive_loss(record: SimilarityRecord, pairs: np.ndarray) -> Tensor:
    """Sum over all anchors of -log softmax mass on the anchor's positive."""
    n_rows = record.d.shape[0]
    pairs = np.asarray(pairs, dtype=np.intp)
    if pairs.shape != (n_rows,):
        raise PairingError(f"need one positive per row, got {pairs.shape} for {n_rows} rows")
    if np.any(pairs < 0) or np.any(pairs >= n_rows) or np.any(pairs == np.arange(n_rows)):
        raise PairingError("positives must reference a different in-range row")
    if not np.array_equal(pairs[pairs], np.arange(n_rows)):
        raise PairingError("positive pairing must be an involution")
    return nx.sum_all(nx.offdiag_nll_pairs(record.d, pairs, record.temperature))


def weighted_reconstruction(record: SimilarityRecord, pointwise_reps: Tensor) -> Tensor:
    """Mix the other rows' point-wise representations for each original unit."""
    n_rows = record.d.shape[0]
    if pointwise_reps.shape[0] != n_rows:
        raise DimensionError(
            f"pointwise rows {pointwise_reps.shape[0]} != similarity rows {n_rows}"
        )
    originals = nx.slice_rows(record.weights, 0, record.n_original)
    return nx.matmul(originals, pointwise_reps)


def reconstruction_loss(originals, reconstructions) -> Tensor:
    """Mean squared reconstruction error over every entry (sum/(M*T*C))."""
    a = originals if isinstance(originals, Tensor) else Tensor(originals)
    b = reconstructions if isinstance(reconstructions, Tensor) else Tensor(reconstructions)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = nx.sub(a, b)
    return nx.mean_all(nx.mul(diff, diff))


def total_loss(l_r: Tensor, l_c: Tensor, weights: UncertaintyWeights) -> Tensor:
    """exp(-logvar_r)*L_r + exp(-logvar_c)*L_c + logvar_r + logvar_c."""
    for term in (l_r, l_c):
        if not np.all(np.isfinite(term.data)):
            raise NumericError("non-finite loss term")
    w_r = nx.exp(nx.mul(weights.logvar_r, -1.0))
    w_c = nx.exp(nx.mul(weights.logvar_c, -1.0))
    weighted = nx.add(nx.mul(w_r, l_r), nx.mul(w_c, l_c))
    return nx.add(weighted, nx.add(weights.logvar_r, weights.logvar_c))


# ---------------------------------------------------------------------------
# Batch assembly and the forward pass
# ---------------------------------------------------------------------------


def build_units(snippets: list[ChargingSnippet]) -> tuple[np.ndarray, np.ndarray, list[RowLabel]]:
    """Split b snippets into M = b*C channel-isolated units.

    Unit (i, c) is snippet i with every channel except c zeroed, so the
    multivariate encoder sees one univariate series through its own input
    weights. Returns (units (M, T, C), targets (M, T*C), labels); a unit's
    reconstruction target is its own isolated frame, which keeps the
    contrastive pull toward the masked twin aligned with what the decoder
    must reproduce.
    """
    unit_rows = []
    labels: list[RowLabel] = []
    for s in snippets:
        n_chan = s.series.shape[1]
        for c in range(n_chan):
            name = CHANNELS[c] if n_chan == len(CHANNELS) else f"ch{c}"
            isolated = np.zeros_like(s.series)
            isolated[:, c] = s.series[:, c]
            unit_rows.append(isolated)
            labels.append((s.snippet_id, name, "original"))
    units = np.stack(unit_rows)
    targets = np.ascontiguousarray(units.reshape(units.shape[0], -1))
    return units, targets, labels


def mask_units(
    units: np.ndarray, ratio: float, mean_masked_run: float, rng: np.random.Generator
) -> np.ndarray:
    """Independent geometric mask per unit row; masked positions become 0."""
    t_steps = units.shape[1]
    masked = units.copy()
    for i in range(units.shape[0]):
        spec = geometric_mask(t_steps, ratio, mean_masked_run, rng)
        masked[i, spec.mask] = 0.0
    return masked


@dataclass
class StepResult:
    loss: Tensor
    l_r: Tensor
    l_c: Tensor | None
    record: SimilarityRecord
    pointwise: Tensor
    reconstruction: Tensor


def pretrain_forward(
    params: ParamDict,
    unit_series: np.ndarray,
    masked_series: np.ndarray,
    targets: np.ndarray,
    hyper: ModelHyper,
    temperature: float,
    contrastive_enabled: bool = True,
    labels: list[RowLabel] | None = None,
) -> StepResult:
    """One full forward pass over a batch of units."""
    m = unit_series.shape[0]
    x_all = np.vstack([unit_series, masked_series])
    if labels is not None:
        labels = [(sid, ch, "original") for sid, ch, _ in labels] + [
            (sid, ch, "masked") for sid, ch, _ in labels
        ]
    flat, _ = encode_sequences(x_all, params, hyper)
    reps = project_flat(flat, params)
    record = similarity_matrix(reps, temperature, labels=labels, n_original=m)

    p_hat = weighted_reconstruction(record, flat)
    x_hat = decode_flat(p_hat, params, hyper)
    l_r = reconstruction_loss(targets, x_hat)

    if contrastive_enabled:
        l_c = contrastive_loss(record, positive_pairs(m))
        loss = total_loss(l_r, l_c, UncertaintyWeights(params["logvar_r"], params["logvar_c"]))
    else:
        l_c = None
        loss = l_r
    return StepResult(loss=loss, l_r=l_r, l_c=l_c, record=record, pointwise=flat, reconstruction=x_hat)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PretrainConfig:
    hyper: ModelHyper
    epochs: int = 50
    batch_size: int = 32
    temperature: float = 0.1
    mask_ratio: float = 0.5
    mean_masked_run: float = 3.0
    peak_lr: float = 0.01
    warmup_frac: float = 0.05
    contrastive_enabled: bool = True


@dataclass
class EpochStats:
    epoch: int
    l_r: float
    l_c: float
    weight_r: float
    weight_c: float
    val_mse: float
    seconds: float


@dataclass
class PretrainReport:
    epochs: list[EpochStats] = field(default_factory=list)

    @property
    def final_val_mse(self) -> float:
        return self.epochs[-1].val_mse if self.epochs else float("nan")


def _calibrate_loss_weights(
    params: ParamDict, train: list[ChargingSnippet], config: PretrainConfig, seed: int
) -> None:
    """Warm-start each log-variance at its stationary point log(L) measured
    on one calibration batch, so both loss terms begin with effective
    weight ~1 regardless of their raw scales."""
    batch = train[: config.batch_size]
    units, targets, labels = build_units(batch)
    rng = substream(seed, STREAM_CALIBRATE)
    masked = mask_units(units, config.mask_ratio, config.mean_masked_run, rng)
    step = pretrain_forward(
        params, units, masked, targets, config.hyper, config.temperature,
        contrastive_enabled=True, labels=labels,
    )
    params["logvar_r"].data = np.full((1, 1), np.log(max(step.l_r.item(), 1e-8)), dtype=nx.REAL)
    params["logvar_c"].data = np.full((1, 1), np.log(max(step.l_c.item(), 1e-8)), dtype=nx.REAL)


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        chunk = order[start : start + batch_size]
        if len(chunk) >= 1:
            yield chunk


def _validation_mse(
    params: ParamDict, snippets: list[ChargingSnippet], config: PretrainConfig, rng: np.random.Generator
) -> float:
    total, count = 0.0, 0
    for chunk in _batches(len(snippets), config.batch_size, np.arange(len(snippets))):
        batch = [snippets[i] for i in chunk]
        units, targets, labels = build_units(batch)
        masked = mask_units(units, config.mask_ratio, config.mean_masked_run, rng)
        step = pretrain_forward(
            params, units, masked, targets, config.hyper, config.temperature,
            contrastive_enabled=False, labels=labels,
        )
        total += step.l_r.item() * len(batch)
        count += len(batch)
    return total / max(count, 1)


def pretrain_loop(
    train: list[ChargingSnippet],
    val: list[ChargingSnippet],
    config: PretrainConfig,
    seed: int,
    checkpoint_dir=None,
    log_path=None,
    extra_meta: dict[str, str] | None = None,
) -> tuple[ParamDict, dict[str, str], PretrainReport]:
    """Seeded Adam loop: fresh masks, forward, backward, update, checkpoint.

    Raises DivergenceError if any step produces non-finite values; the last
    completed epoch's checkpoint (when a directory is given) is preserved.
    """
    if not train:
        raise ParameterError("pretraining corpus is empty")
    params = init_params(config.hyper, substream(seed, STREAM_INIT))
    if config.contrastive_enabled:
        _calibrate_loss_weights(params, train, config, seed)
    optimizer = Adam()
    n_batches = (len(train) + config.batch_size - 1) // config.batch_size
    total_steps = config.epochs * n_batches
    skip = frozenset() if config.contrastive_enabled else frozenset({"logvar_r", "logvar_c"})

    report = PretrainReport()
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    last_good: str | None = None
    step_idx = 0
    try:
        if log_fh:
            header = {"run": {"seed": seed, **(extra_meta or {})}}
            log_fh.write(json.dumps(header) + "\n")
        for epoch in range(config.epochs):
            tic = time.perf_counter()
            order = substream(seed, STREAM_SHUFFLE, epoch).permutation(len(train))
            mask_rng = substream(seed, STREAM_TRAIN_MASK, epoch)
            sum_lr, sum_lc, n_seen = 0.0, 0.0, 0
            try:
                for chunk in _batches(len(train), config.batch_size, order):
                    batch = [train[i] for i in chunk]
                    units, targets, labels = build_units(batch)
                    masked = mask_units(units, config.mask_ratio, config.mean_masked_run, mask_rng)
                    step = pretrain_forward(
                        params, units, masked, targets, config.hyper, config.temperature,
                        contrastive_enabled=config.contrastive_enabled, labels=labels,
                    )
                    nx.backward(step.loss)
                    lr = cosine_warmup_lr(step_idx, total_steps, config.peak_lr, config.warmup_frac)
                    optimizer.step(params, lr, skip=skip)
                    step_idx += 1
                    sum_lr += step.l_r.item() * len(batch)
                    sum_lc += (step.l_c.item() if step.l_c is not None else 0.0) * len(batch)
                    n_seen += len(batch)
            except NumericError as e:
                raise DivergenceError(f"pretraining diverged in epoch {epoch}: {e}", last_good) from e

            val_rng = substream(seed, STREAM_VAL_MASK, epoch)
            val_mse = _validation_mse(params, val, config, val_rng) if val else float("nan")
            # clip so a wandering logvar cannot overflow the report itself
            weight_r = float(np.exp(np.clip(-params["logvar_r"].item(), -700, 700)))
            weight_c = float(np.exp(np.clip(-params["logvar_c"].item(), -700, 700)))
            stats = EpochStats(
                epoch=epoch,
                l_r=sum_lr / n_seen,
                l_c=sum_lc / n_seen if config.contrastive_enabled else float("nan"),
                weight_r=weight_r,
                weight_c=weight_c,
                val_mse=val_mse,
                seconds=time.perf_counter() - tic,
            )
            report.epochs.append(stats)
            if checkpoint_dir is not None:
                meta = _loop_meta(config, seed, epoch, extra_meta)
                path = str(checkpoint_dir / f"pretrain_epoch{epoch:03d}.ckpt")
                save_checkpoint(params, meta, path)
                last_good = path
            if log_fh:
                record = {
                    "epoch": stats.epoch,
                    "l_r": stats.l_r,
                    "l_c": stats.l_c,
                    "weight_r": stats.weight_r,
                    "weight_c": stats.weight_c,
                    "val_mse": stats.val_mse,
                    "seconds": stats.seconds,
                }
                log_fh.write(json.dumps(record) + "\n")
    finally:
        if log_fh:
            log_fh.close()

    metadata = _loop_meta(config, seed, config.epochs - 1, extra_meta)
    return params, metadata, report


def _loop_meta(config: PretrainConfig, seed: int, epoch: int, extra: dict[str, str] | None) -> dict[str, str]:
    meta = {
        **config.hyper.as_meta(),
        "seed": str(seed),
        "epoch": str(epoch),
        "temperature": repr(config.temperature),
        "mask_ratio": repr(config.mask_ratio),
        "mean_masked_run": repr(config.mean_masked_run),
        "batch_size": str(config.batch_size),
        "peak_lr": repr(config.peak_lr),
        "contrastive_enabled": str(config.contrastive_enabled).lower(),
    }
    meta.update(extra or {})
    return meta


# ---------------------------------------------------------------------------
# Introspection export
# ---------------------------------------------------------------------------

DUMP_HEADER = [
    "anchor_snippet_id",
    "anchor_channel",
    "anchor_view",
    "candidate_snippet_id",
    "candidate_channel",
    "candidate_view",
    "weight",
]


def export_similarity_dump(record: SimilarityRecord, path) -> None:
    """Long-form CSV of reconstruction weights for Fig.-style inspection."""
    weights = record.weights.data
    labels = record.labels

    def rows():
        for i, anchor in enumerate(labels):
            for j, cand in enumerate(labels):
                if i == j:
                    continue
                yield [*anchor, *cand, repr(float(weights[i, j]))]

    write_rows(path, DUMP_HEADER, rows())

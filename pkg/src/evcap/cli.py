"""Command-line workflow: gen, split, pretrain, finetune, eval, dump-sim.

Every command is deterministic given (config, seed) and embeds
(config hash, seed, code version) in its artifacts; dataset CSVs carry the
provenance in a .meta.json sidecar because their column schema is fixed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .config import RunConfig, apply_env_overrides, apply_set_overrides, load_config, parse_offsets
from .data import (
    NormalizationStats,
    assign_distribution,
    compute_stats,
    fmt_meta,
    load_dataset,
    load_manifest,
    make_splits,
    normalize,
    save_dataset,
    save_manifest,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DivergenceError,
    EvcapError,
    LeakageError,
    NumericError,
    ParseError,
    SchemaError,
)
from .finetune_eval import (
    FinetuneConfig,
    ProtocolCorpora,
    finetune,
    labeled_subset,
    pretrain_corpus,
    run_protocol,
    write_reports_csv,
    write_reports_jsonl,
    write_svg_chart,
)
from .model import load_checkpoint, save_checkpoint
from .pretrain import PretrainConfig, build_units, mask_units, pretrain_forward, pretrain_loop
from .pretrain import export_similarity_dump
from .rng import STREAM_SHUFFLE, STREAM_TRAIN_MASK, substream
from .synthgen import FleetConfig, generate_fleet, generate_novel_slice

EXIT_OK = 0
EXIT_GENERIC = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_SCHEMA = 4
EXIT_CHECKPOINT = 5
EXIT_NUMERIC = 6
EXIT_LEAKAGE = 7


def _exit_code(error: Exception) -> int:
    if isinstance(error, LeakageError):
        return EXIT_LEAKAGE
    if isinstance(error, (DivergenceError, NumericError)):
        return EXIT_NUMERIC
    if isinstance(error, CheckpointError):
        return EXIT_CHECKPOINT
    if isinstance(error, (ParseError, SchemaError)):
        return EXIT_SCHEMA
    if isinstance(error, ConfigError):
        return EXIT_CONFIG
    if isinstance(error, FileNotFoundError):
        return EXIT_MISSING
    if isinstance(error, EvcapError):
        return EXIT_GENERIC
    raise error


def _provenance(config: RunConfig) -> dict[str, str]:
    return {"config_hash": config.config_hash(), "seed": str(config.seed), "version": __version__}


def _out(config: RunConfig, name: str) -> str:
    os.makedirs(config.out_dir, exist_ok=True)
    return name if os.path.isabs(name) else os.path.join(config.out_dir, name)


def _write_sidecar(path: str, config: RunConfig, command: str) -> None:
    with open(path + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump({"command": command, **_provenance(config)}, fh, sort_keys=True)
        fh.write("\n")


def _require(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing {what}: {path}")
    return path


def stats_to_meta(stats: NormalizationStats) -> dict[str, str]:
    return {
        "norm_mean": ",".join(fmt_meta(v) for v in stats.mean),
        "norm_std": ",".join(fmt_meta(v) for v in stats.std),
        "norm_range": ",".join(fmt_meta(v) for v in stats.value_range),
    }


def stats_from_meta(meta: dict[str, str]) -> NormalizationStats:
    try:
        parts = [
            np.array([float(v) for v in meta[key].split(",")], dtype=np.float32)
            for key in ("norm_mean", "norm_std", "norm_range")
        ]
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"checkpoint metadata lacks normalization stats: {e}") from None
    return NormalizationStats(*parts)


def _pretrain_config(config: RunConfig) -> PretrainConfig:
    return PretrainConfig(
        hyper=config.hyper(),
        epochs=config.pretrain_epochs,
        batch_size=config.batch_size,
        temperature=config.temperature,
        mask_ratio=config.mask_ratio,
        mean_masked_run=config.mean_masked_run,
        peak_lr=config.peak_lr,
        warmup_frac=config.warmup_frac,
        contrastive_enabled=config.contrastive_enabled,
    )


def _finetune_config(config: RunConfig) -> FinetuneConfig:
    return FinetuneConfig(
        hyper=config.hyper(),
        epochs=config.finetune_epochs,
        batch_size=config.batch_size,
        patience=config.patience,
        peak_lr=config.peak_lr,
        warmup_frac=config.warmup_frac,
        freeze_encoder=config.freeze_encoder,
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen(config: RunConfig) -> int:
    fleet = generate_fleet(config.fleet_config())
    path = _out(config, config.data_path)
    save_dataset(fleet, path)
    _write_sidecar(path, config, "gen")
    print(f"gen: wrote {len(fleet)} snippets to {path}")

    if config.gen_transfer:
        transfer = generate_fleet(
            FleetConfig(
                n_vehicles=config.transfer_n_vehicles,
                snippets_per_vehicle=config.snippets_per_vehicle,
                manufacturer_id=config.transfer_manufacturer_id,
                seed=config.seed + 1,
                rated_capacity_ah=config.transfer_rated_capacity_ah,
                fade_per_1000km=config.fade_per_1000km,
                fast_fade_multiplier=config.fast_fade_multiplier,
                fast_charge_fraction=config.fast_charge_fraction,
                mileage_range_km=(config.mileage_min_km, config.mileage_max_km),
                noise_std=config.noise_std,
                manufacturer_offsets=parse_offsets(config.transfer_offsets),
            )
        )
        path = _out(config, config.transfer_data_path)
        save_dataset(transfer, path)
        _write_sidecar(path, config, "gen")
        print(f"gen: wrote {len(transfer)} transfer snippets to {path}")

    if config.gen_novel:
        novel_cfg = FleetConfig(
            n_vehicles=config.n_vehicles,
            snippets_per_vehicle=max(4, config.snippets_per_vehicle // 2),
            manufacturer_id=config.novel_manufacturer_id,
            seed=config.seed + 2,
            rated_capacity_ah=config.rated_capacity_ah,
            fade_per_1000km=config.fade_per_1000km,
            fast_fade_multiplier=config.fast_fade_multiplier,
            fast_charge_fraction=config.fast_charge_fraction,
            mileage_range_km=(config.mileage_min_km, config.mileage_max_km),
            noise_std=config.noise_std,
        )
        novel = generate_novel_slice(novel_cfg)
        path = _out(config, config.novel_data_path)
        save_dataset(novel, path)
        _write_sidecar(path, config, "gen")
        print(f"gen: wrote {len(novel)} novel-slice snippets to {path}")
    return EXIT_OK


def cmd_split(config: RunConfig) -> int:
    fleet = load_dataset(_require(_out(config, config.data_path), "dataset"))
    split = make_splits(sorted({s.vehicle_id for s in fleet}), config.seed)
    path = _out(config, config.manifest_path)
    save_manifest(split, path)
    _write_sidecar(path, config, "split")
    print(f"split: wrote manifest for {len(split.assignment)} vehicles to {path}")

    transfer_path = _out(config, config.transfer_data_path)
    if config.gen_transfer and os.path.exists(transfer_path):
        transfer = load_dataset(transfer_path)
        tsplit = make_splits(sorted({s.vehicle_id for s in transfer}), config.seed)
        tpath = _out(config, config.transfer_manifest_path)
        save_manifest(tsplit, tpath)
        _write_sidecar(tpath, config, "split")
        print(f"split: wrote transfer manifest to {tpath}")
    return EXIT_OK


def _load_corpus(config: RunConfig):
    fleet = load_dataset(_require(_out(config, config.data_path), "dataset"))
    split = load_manifest(_require(_out(config, config.manifest_path), "split manifest"))
    return fleet, split


def cmd_pretrain(config: RunConfig) -> int:
    fleet, split = _load_corpus(config)
    corpus = pretrain_corpus(fleet, split, config.corpus_variant)
    if not corpus:
        raise ConfigError(f"empty pretraining corpus for variant {config.corpus_variant!r}")
    stats = compute_stats(corpus, allowed_vehicles=split.vehicles("pretrain"))
    train = [normalize(s, stats) for s in corpus]
    val = [
        normalize(s, stats)
        for s in pretrain_corpus(fleet, split, config.corpus_variant, split_name="validation")
    ]

    ckpt_dir = _out(config, "pretrain_checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    from pathlib import Path

    extra = {**_provenance(config), **stats_to_meta(stats), "corpus_variant": config.corpus_variant}
    params, meta, report = pretrain_loop(
        train,
        val,
        _pretrain_config(config),
        config.seed,
        checkpoint_dir=Path(ckpt_dir),
        log_path=_out(config, "pretrain_log.jsonl"),
        extra_meta=extra,
    )
    path = _out(config, config.checkpoint_path)
    save_checkpoint(params, meta, path)
    print(
        f"pretrain: {len(train)} snippets, {config.pretrain_epochs} epochs, "
        f"final val recon MSE {report.final_val_mse:.5f} -> {path}"
    )
    return EXIT_OK


def cmd_finetune(config: RunConfig) -> int:
    fleet, split = _load_corpus(config)
    ckpt_path = _require(_out(config, config.checkpoint_path), "pretrained checkpoint")
    pretrained, meta = load_checkpoint(ckpt_path, expected_hyper=config.hyper())
    stats = stats_from_meta(meta)

    from .data import DistributionTag

    try:
        tag = DistributionTag(config.target_distribution)
    except ValueError:
        raise ConfigError(f"unknown target distribution {config.target_distribution!r}") from None
    train = [normalize(s, stats) for s in labeled_subset(fleet, split.finetune_vehicles, tag)]
    val = [normalize(s, stats) for s in labeled_subset(fleet, split.vehicles("validation"), tag)]
    if not train:
        raise ConfigError(f"no labeled fine-tuning snippets for {tag.value}")

    params, (label_mean, label_std), report = finetune(
        pretrained, train, val, _finetune_config(config), config.seed
    )
    out_meta = {
        **config.hyper().as_meta(),
        **_provenance(config),
        **stats_to_meta(stats),
        "seed": str(config.seed),
        "epoch": str(report.stopped_epoch),
        "best_epoch": str(report.best_epoch),
        "label_mean": fmt_meta(label_mean),
        "label_std": fmt_meta(label_std),
        "target_distribution": tag.value,
    }
    path = _out(config, config.finetuned_path)
    save_checkpoint(params, out_meta, path)
    log_path = _out(config, "finetune_log.jsonl")
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"run": {**_provenance(config), "target": tag.value}}) + "\n")
        for epoch, train_mse in enumerate(report.train_mse):
            record = {"epoch": epoch, "train_mse": train_mse}
            if epoch < len(report.val_rmse):
                record["val_rmse"] = report.val_rmse[epoch]
            fh.write(json.dumps(record) + "\n")
    best = min(report.val_rmse) if report.val_rmse else float("nan")
    print(f"finetune: target {tag.value}, best val RMSE {best:.4f} -> {path}")
    return EXIT_OK


def cmd_eval(config: RunConfig) -> int:
    fleet, split = _load_corpus(config)
    corpora = ProtocolCorpora(fleet=fleet, splits=split)
    if config.protocol == "cross_manufacturer":
        corpora.transfer_fleet = load_dataset(
            _require(_out(config, config.transfer_data_path), "transfer dataset")
        )
        corpora.transfer_splits = load_manifest(
            _require(_out(config, config.transfer_manifest_path), "transfer manifest")
        )
    if config.protocol == "novel_inference":
        corpora.novel = load_dataset(_require(_out(config, config.novel_data_path), "novel slice"))

    reports = run_protocol(
        config.protocol,
        corpora,
        config.seed_list(),
        _pretrain_config(config),
        _finetune_config(config),
    )
    prov = _provenance(config)
    base = f"report_{config.protocol}"
    write_reports_csv(reports, _out(config, base + ".csv"), prov)
    write_reports_jsonl(reports, _out(config, base + ".jsonl"), prov)
    write_svg_chart(reports, _out(config, base + ".svg"), prov)
    for r in reports:
        print(
            f"eval[{r.protocol}] {r.pretrain_corpus} {r.loss_setting} -> {r.target}: "
            f"RMSE {r.rmse_mean:.4f}±{r.rmse_std:.4f} MAPE {r.mape_mean:.3f}%±{r.mape_std:.3f} (n={r.n_test})"
        )
    return EXIT_OK


def cmd_dump_sim(config: RunConfig) -> int:
    fleet, split = _load_corpus(config)
    ckpt_path = _require(_out(config, config.checkpoint_path), "pretrained checkpoint")
    params, meta = load_checkpoint(ckpt_path, expected_hyper=config.hyper())
    stats = stats_from_meta(meta)
    variant = meta.get("corpus_variant", config.corpus_variant)
    corpus = [normalize(s, stats) for s in pretrain_corpus(fleet, split, variant)]
    if not corpus:
        raise ConfigError("empty pretraining corpus; nothing to dump")

    # Rebuild the first training batch of epoch 0 exactly as the loop saw it.
    order = substream(config.seed, STREAM_SHUFFLE, 0).permutation(len(corpus))
    batch = [corpus[i] for i in order[: config.batch_size]]
    units, targets, labels = build_units(batch)
    mask_rng = substream(config.seed, STREAM_TRAIN_MASK, 0)
    masked = mask_units(units, config.mask_ratio, config.mean_masked_run, mask_rng)
    step = pretrain_forward(
        params, units, masked, targets, config.hyper(), config.temperature,
        contrastive_enabled=False, labels=labels,
    )
    path = _out(config, "similarity.csv")
    export_similarity_dump(step.record, path)
    _write_sidecar(path, config, "dump-sim")
    print(f"dump-sim: wrote {2 * units.shape[0]}x{2 * units.shape[0]} weights to {path}")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "split": cmd_split,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "dump-sim": cmd_dump_sim,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evcap",
        description="Self-supervised pretraining pipeline for battery capacity estimation",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="path to a key=value config file")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--out", help="output directory for artifacts")
    parser.add_argument(
        "--set",
        dest="assignments",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any config key (repeatable)",
    )
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config)
    config = apply_env_overrides(config)
    config = apply_set_overrides(config, args.assignments)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if overrides:
        from dataclasses import replace

        config = replace(config, **overrides)
    return config


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args)
        return COMMANDS[args.command](config)
    except Exception as e:  # noqa: BLE001 - mapped to structured exit codes
        code = _exit_code(e)
        print(f"error[{type(e).__name__}]: {e}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())

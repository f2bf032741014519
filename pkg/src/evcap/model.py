"""Learnable blocks and their persistence.

The encoder is a single-layer bidirectional LSTM over (T, C) inputs; each
position's feature vector concatenates the forward- and backward-direction
states, so the full width d_f splits evenly between directions. Univariate
units from the pretraining stage enter as channel-isolated snippets (their
inactive channels zeroed, the same convention masking uses), which keeps
one set of input weights valid for both pretraining and multivariate
fine-tuning.

Projector: flatten all T positions, one affine map, tanh. Decoder: one
affine map from a position's features to all C channels, shared across
positions. Head: mean-pool over positions, then a single linear layer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import CheckpointError, ConfigError, DimensionError
from .numerics import Tensor

ParamDict = dict[str, Tensor]

_MAGIC = b"EVCAPCKPT1"
_VERSION = 1


@dataclass(frozen=True)
class ModelHyper:
    t_steps: int = 128
    channels: int = 7
    d_f: int = 32
    d_h: int = 128

    def __post_init__(self):
        if self.d_f % 2 != 0:
            raise ConfigError(f"d_f must be even (two directions), got {self.d_f}")
        if min(self.t_steps, self.channels, self.d_f, self.d_h) < 1:
            raise ConfigError("all model dimensions must be positive")

    @property
    def d_dir(self) -> int:
        return self.d_f // 2

    def as_meta(self) -> dict[str, str]:
        return {
            "t_steps": str(self.t_steps),
            "channels": str(self.channels),
            "d_f": str(self.d_f),
            "d_h": str(self.d_h),
        }


def hyper_from_meta(meta: dict[str, str]) -> ModelHyper:
    try:
        return ModelHyper(
            t_steps=int(meta["t_steps"]),
            channels=int(meta["channels"]),
            d_f=int(meta["d_f"]),
            d_h=int(meta["d_h"]),
        )
    except KeyError as e:
        raise CheckpointError(f"checkpoint metadata missing hyperparameter {e}") from None


def param_shapes(hyper: ModelHyper) -> dict[str, tuple[int, ...]]:
    h = hyper.d_dir
    shapes: dict[str, tuple[int, ...]] = {}
    for direction in ("fw", "bw"):
        shapes[f"enc_{direction}_wx"] = (hyper.channels, 4 * h)
        shapes[f"enc_{direction}_wh"] = (h, 4 * h)
        shapes[f"enc_{direction}_b"] = (1, 4 * h)
    shapes["proj_w"] = (hyper.t_steps * hyper.d_f, hyper.d_h)
    shapes["proj_b"] = (1, hyper.d_h)
    shapes["dec_w"] = (hyper.d_f, hyper.channels)
    shapes["dec_b"] = (1, hyper.channels)
    shapes["head_w"] = (hyper.d_f, 1)
    shapes["head_b"] = (1, 1)
    shapes["logvar_r"] = (1, 1)
    shapes["logvar_c"] = (1, 1)
    return shapes


def init_params(hyper: ModelHyper, rng: np.random.Generator) -> ParamDict:
    """Uniform(-k, k) with k = 1/sqrt(fan_in); forget-gate bias starts at +1."""
    h = hyper.d_dir
    params: ParamDict = {}
    for name, shape in param_shapes(hyper).items():
        if name.startswith("logvar") or name.endswith("_b"):
            arr = np.zeros(shape, dtype=nx.REAL)
        else:
            k = 1.0 / np.sqrt(shape[0])
            arr = rng.uniform(-k, k, size=shape).astype(nx.REAL)
        if name.startswith("enc_") and name.endswith("_b"):
            arr[0, h : 2 * h] = 1.0  # gate order: input, forget, cell, output
        params[name] = Tensor(arr, requires_grad=True)
    return params


def clone_params(params: ParamDict) -> ParamDict:
    return {k: Tensor(v.data.copy(), requires_grad=True) for k, v in params.items()}


# ---------------------------------------------------------------------------
# Forward blocks
# ---------------------------------------------------------------------------


def _lstm_direction(
    xs: list[np.ndarray], wx: Tensor, wh: Tensor, b: Tensor, reverse: bool
) -> list[Tensor]:
    """Run one direction over T constant (n, C) inputs; returns per-position states."""
    n = xs[0].shape[0]
    h = wh.shape[0]
    dtype = wx.dtype
    state_h = Tensor(np.zeros((n, h), dtype=dtype))
    state_c = Tensor(np.zeros((n, h), dtype=dtype))
    order = range(len(xs) - 1, -1, -1) if reverse else range(len(xs))
    outs: list[Tensor | None] = [None] * len(xs)
    for t in order:
        gates = nx.add_bias(nx.add(nx.matmul(Tensor(xs[t]), wx), nx.matmul(state_h, wh)), b)
        gate_i = nx.sigmoid(nx.slice_cols(gates, 0, h))
        gate_f = nx.sigmoid(nx.slice_cols(gates, h, 2 * h))
        gate_g = nx.tanh(nx.slice_cols(gates, 2 * h, 3 * h))
        gate_o = nx.sigmoid(nx.slice_cols(gates, 3 * h, 4 * h))
        state_c = nx.add(nx.mul(gate_f, state_c), nx.mul(gate_i, gate_g))
        state_h = nx.mul(gate_o, nx.tanh(state_c))
        outs[t] = state_h
    return outs  # type: ignore[return-value]


def encode_sequences(x: np.ndarray, params: ParamDict, hyper: ModelHyper) -> tuple[Tensor, Tensor]:
    """Encode n snippets given as an (n, T, C) array.

    Returns (flat, pooled): flat is (n, T*d_f) with each position's
    forward|backward state pair laid out in time order; pooled is the
    position mean (n, d_f).
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3 or x.shape[1:] != (hyper.t_steps, hyper.channels):
        raise DimensionError(
            f"expected (n, {hyper.t_steps}, {hyper.channels}) batch, got {x.shape}"
        )
    xs = [np.ascontiguousarray(x[:, t, :]) for t in range(hyper.t_steps)]
    fw = _lstm_direction(xs, params["enc_fw_wx"], params["enc_fw_wh"], params["enc_fw_b"], reverse=False)
    bw = _lstm_direction(xs, params["enc_bw_wx"], params["enc_bw_wh"], params["enc_bw_b"], reverse=True)

    blocks: list[Tensor] = []
    for t in range(hyper.t_steps):
        blocks.append(fw[t])
        blocks.append(bw[t])
    flat = nx.concat_cols(blocks)

    sum_fw, sum_bw = fw[0], bw[0]
    for t in range(1, hyper.t_steps):
        sum_fw = nx.add(sum_fw, fw[t])
        sum_bw = nx.add(sum_bw, bw[t])
    pooled = nx.mul(nx.concat_cols([sum_fw, sum_bw]), 1.0 / hyper.t_steps)
    return flat, pooled


def encode(series: np.ndarray, params: ParamDict, hyper: ModelHyper) -> Tensor:
    """(T, C) snippet -> (T, d_f) point-wise representations."""
    series = np.asarray(series, dtype=np.float32)
    if series.shape != (hyper.t_steps, hyper.channels):
        raise DimensionError(
            f"expected ({hyper.t_steps}, {hyper.channels}) series, got {series.shape}"
        )
    flat, _ = encode_sequences(series[None, :, :], params, hyper)
    return nx.reshape(flat, (hyper.t_steps, hyper.d_f))


def project_flat(flat: Tensor, params: ParamDict) -> Tensor:
    """(n, T*d_f) point-wise representations -> (n, d_h) snippet vectors."""
    return nx.tanh(nx.add_bias(nx.matmul(flat, params["proj_w"]), params["proj_b"]))


def project(pointwise, params: ParamDict, hyper: ModelHyper) -> Tensor:
    """(T, d_f) -> (1, d_h)."""
    p = pointwise if isinstance(pointwise, Tensor) else Tensor(pointwise)
    if p.shape != (hyper.t_steps, hyper.d_f):
        raise DimensionError(f"expected ({hyper.t_steps}, {hyper.d_f}) input, got {p.shape}")
    return project_flat(nx.reshape(p, (1, hyper.t_steps * hyper.d_f)), params)


def decode_flat(flat: Tensor, params: ParamDict, hyper: ModelHyper) -> Tensor:
    """(n, T*d_f) -> (n, T*C): the same affine map applied at every position."""
    n = flat.shape[0]
    per_pos = nx.reshape(flat, (n * hyper.t_steps, hyper.d_f))
    decoded = nx.add_bias(nx.matmul(per_pos, params["dec_w"]), params["dec_b"])
    return nx.reshape(decoded, (n, hyper.t_steps * hyper.channels))


def decode(pointwise_hat, params: ParamDict, hyper: ModelHyper) -> Tensor:
    """(T, d_f) -> (T, C)."""
    p = pointwise_hat if isinstance(pointwise_hat, Tensor) else Tensor(pointwise_hat)
    if p.shape != (hyper.t_steps, hyper.d_f):
        raise DimensionError(f"expected ({hyper.t_steps}, {hyper.d_f}) input, got {p.shape}")
    return nx.add_bias(nx.matmul(p, params["dec_w"]), params["dec_b"])


def head_pooled(pooled: Tensor, params: ParamDict) -> Tensor:
    """(n, d_f) pooled features -> (n, 1) estimates."""
    return nx.add_bias(nx.matmul(pooled, params["head_w"]), params["head_b"])


def regress(pointwise, params: ParamDict, hyper: ModelHyper) -> Tensor:
    """(T, d_f) -> scalar capacity estimate: mean-pool over positions, then affine."""
    p = pointwise if isinstance(pointwise, Tensor) else Tensor(pointwise)
    if p.shape != (hyper.t_steps, hyper.d_f):
        raise DimensionError(f"expected ({hyper.t_steps}, {hyper.d_f}) input, got {p.shape}")
    pool = nx.matmul(Tensor(np.full((1, hyper.t_steps), 1.0 / hyper.t_steps, dtype=np.float32)), p)
    return head_pooled(pool, params)


def regress_snippets(batch: np.ndarray, params: ParamDict, hyper: ModelHyper) -> Tensor:
    """Batched estimate for (B, T, C) snippets, returned as (B, 1)."""
    _, pooled = encode_sequences(batch, params, hyper)
    return head_pooled(pooled, params)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: ParamDict, metadata: dict[str, str], path) -> None:
    """Binary layout: magic, version u32, metadata block, named float32 records."""
    for k, v in metadata.items():
        if "=" in k or "\n" in k or "\n" in str(v):
            raise CheckpointError(f"metadata key/value may not contain '=' or newline: {k!r}")
    meta_text = "".join(f"{k}={v}\n" for k, v in sorted(metadata.items()))
    meta_bytes = meta_text.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(params)))
        for name, tensor in params.items():
            arr = np.ascontiguousarray(tensor.data, dtype="<f4")
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path, expected_hyper: ModelHyper | None = None) -> tuple[ParamDict, dict[str, str]]:
    with open(path, "rb") as fh:
        if _read_exact(fh, len(_MAGIC), "magic") != _MAGIC:
            raise CheckpointError("not an evcap checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4, "metadata length"))
        meta_text = _read_exact(fh, meta_len, "metadata").decode("utf-8")
        metadata: dict[str, str] = {}
        for line in meta_text.splitlines():
            key, _, value = line.partition("=")
            metadata[key] = value
        (n_params,) = struct.unpack("<I", _read_exact(fh, 4, "parameter count"))
        params: ParamDict = {}
        for _ in range(n_params):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
            count = int(np.prod(dims)) if dims else 1
            payload = _read_exact(fh, 4 * count, f"payload of {name}")
            arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
            params[name] = Tensor(arr, requires_grad=True)
        if fh.read(1):
            raise CheckpointError("trailing bytes after final parameter record")

    if expected_hyper is not None:
        stored = hyper_from_meta(metadata)
        if stored != expected_hyper:
            raise CheckpointError(
                f"hyperparameter mismatch: checkpoint has {stored}, expected {expected_hyper}"
            )
        expected_shapes = param_shapes(expected_hyper)
        for name, shape in expected_shapes.items():
            if name not in params:
                raise CheckpointError(f"checkpoint missing parameter {name}")
            if params[name].shape != shape:
                raise CheckpointError(
                    f"parameter {name} has shape {params[name].shape}, expected {shape}"
                )
    return params, metadata

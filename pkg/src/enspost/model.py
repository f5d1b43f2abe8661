"""Self-attentive ensemble transformer postprocessing all lead times jointly.

Tensors follow the layout ``[batch, member, lead, lat, lon, channel]``.
Attention runs across the member axis only, with one ``k x k`` score matrix
per sample and head computed from the flattened ``(lead, lat, lon, feature)``
representation of each member; all projections are shared across members,
lead times and gridpoints.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, Tensor, adam_step
from .data import ForecastDataset, Normalizer
from .scoring import KernelCrpsConfig, gaussian_crps_loss, kernel_crps_loss

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "TransformerParams",
    "TrainResult",
    "TrainingDivergedError",
    "init_params",
    "embed",
    "attention_block",
    "mlp_block",
    "forward",
    "training_loss",
    "train",
    "extract_attention_map",
    "save_checkpoint",
    "load_checkpoint",
]

logger = logging.getLogger(__name__)

VARIABLE_KINDS = ("gaussian_target", "nonnegative_target")
LOSS_KINDS = ("auto", "gaussian_crps", "kernel_crps")
LN_EPS = 1e-5


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, message: str = "loss became non-finite"):
        super().__init__(f"{message} in epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class ModelConfig:
    k: int
    t: int
    h: int
    w: int
    c: int
    c_tilde: int = 32
    n_blocks: int = 4
    h_n: int = 8
    m_n: int = 4
    variable_kind: str = "gaussian_target"
    seed: int = 0
    target_index: int = 0

    def __post_init__(self):
        for f in ("k", "t", "h", "w", "c", "c_tilde", "n_blocks", "h_n", "m_n"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be >= 1")
        if self.c_tilde % self.h_n:
            raise ValueError(f"c_tilde={self.c_tilde} is not divisible by h_n={self.h_n}")
        if self.variable_kind not in VARIABLE_KINDS:
            raise ValueError(f"variable_kind must be one of {VARIABLE_KINDS}")
        if not 0 <= self.target_index < self.c:
            raise ValueError("target_index out of range")

    @property
    def head_width(self) -> int:
        return self.c_tilde // self.h_n

    @classmethod
    def for_dataset(cls, ds: ForecastDataset, **kwargs) -> "ModelConfig":
        _, k, t, h, w, c = ds.dims
        return cls(k=k, t=t, h=h, w=w, c=c, target_index=ds.target_index, **kwargs)


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and early-stopping settings.

    ``loss_kind="auto"`` picks the Gaussian CRPS for ``gaussian_target``
    models and the penalized kernel CRPS for ``nonnegative_target`` ones.
    """

    batch_size: int = 2
    learning_rate: float = 0.001
    patience: int = 5
    max_epochs: int = 100
    loss_kind: str = "auto"
    kernel: KernelCrpsConfig = field(default_factory=KernelCrpsConfig)
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ValueError("batch_size and max_epochs must be >= 1, patience >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")


@dataclass
class TransformerParams:
    """Learned weights plus the input normalization they were trained with."""

    weights: dict[str, np.ndarray]
    input_mean: np.ndarray
    input_std: np.ndarray

    def tensors(self) -> dict[str, Tensor]:
        return {name: Tensor(v) for name, v in self.weights.items()}

    def astype(self, dtype) -> "TransformerParams":
        return TransformerParams(
            {n: v.astype(dtype) for n, v in self.weights.items()},
            self.input_mean.copy(),
            self.input_std.copy(),
        )

    def copy(self) -> "TransformerParams":
        return self.astype(next(iter(self.weights.values())).dtype)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes; the order is the checkpoint order."""
    c, d, m = config.c, config.c_tilde, config.m_n * config.c_tilde
    shapes = {"embed.weight": (c, d), "embed.bias": (d,)}
    for l in range(config.n_blocks):
        p = f"blocks.{l}."
        shapes.update(
            {
                p + "attn_norm.gain": (d,),
                p + "attn_norm.shift": (d,),
                p + "attn.wq": (d, d),
                p + "attn.wk": (d, d),
                p + "attn.wv": (d, d),
                p + "attn.wo": (d, d),
                p + "attn.bo": (d,),
                p + "mlp_norm.gain": (d,),
                p + "mlp_norm.shift": (d,),
                p + "mlp.w1": (d, m),
                p + "mlp.b1": (m,),
                p + "mlp.w2": (m, d),
                p + "mlp.b2": (d,),
            }
        )
    shapes["output.weight"] = (d, 1)
    shapes["output.bias"] = (1,)
    return shapes


def init_params(config: ModelConfig, dtype=np.float32, normalizer: Normalizer | None = None) -> TransformerParams:
    """Fresh parameters: uniform(+-1/sqrt(fan_in)) weights, zero biases and
    zero attention output projections, unit norm gains."""
    rng = np.random.default_rng(config.seed)
    weights = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            arr = np.ones(shape)
        elif leaf in ("bias", "shift", "bo", "b1", "b2", "wo"):
            arr = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, size=shape)
        weights[name] = arr.astype(dtype)
    if normalizer is None:
        mean, std = np.zeros(config.c), np.ones(config.c)
    else:
        mean, std = np.asarray(normalizer.mean, float), np.asarray(normalizer.std, float)
    return TransformerParams(weights, mean, std)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def _check(x: Tensor, where: str) -> Tensor:
    return ad.check_finite(x, where)


def embed(z: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Map the ``c`` predictors at every position to ``c_tilde`` features."""
    w = p["embed.weight"]
    if z.shape[-1] != w.shape[0]:
        raise ValueError(f"input has {z.shape[-1]} channels, embedding expects {w.shape[0]}")
    return ad.contract(z, w, "bkthwc,cd->bkthwd") + p["embed.bias"]


def attention_block(x: Tensor, p: dict[str, Tensor], config: ModelConfig, block: int, capture: dict | None = None) -> Tensor:
    b, k, t, h, w, d = x.shape
    hn, dn = config.h_n, config.head_width
    pre = f"blocks.{block}."
    xn = ad.layer_normalize(x, -1, LN_EPS, p[pre + "attn_norm.gain"], p[pre + "attn_norm.shift"])
    q = ad.contract(xn, p[pre + "attn.wq"], "bkthwc,cd->bkthwd")
    kk = ad.contract(xn, p[pre + "attn.wk"], "bkthwc,cd->bkthwd")
    v = ad.contract(xn, p[pre + "attn.wv"], "bkthwc,cd->bkthwd")
    if capture is not None and capture.get("block") == block:
        capture["q"] = q.data
        capture["k"] = kk.data

    flat = t * h * w * dn

    def heads(a: Tensor) -> Tensor:
        # [b,k,t,h,w,hn,dn] -> [b,hn,k,t,h,w,dn] -> [b,hn,k,F]
        a = a.reshape(b, k, t, h, w, hn, dn).transpose(0, 5, 1, 2, 3, 4, 6)
        return a.reshape(b, hn, k, flat)

    qh = ad.layer_normalize(heads(q), -1, LN_EPS) * (1.0 / math.sqrt(flat))
    kh = ad.layer_normalize(heads(kk), -1, LN_EPS)
    scores = ad.contract(qh, kh, "bnif,bnjf->bnij")
    weights = ad.softmax(scores, axis=-1)
    if capture is not None and capture.get("block") == block:
        capture["weights"] = weights.data
    att = ad.contract(weights, heads(v), "bnij,bnjf->bnif")
    att = att.reshape(b, hn, k, t, h, w, dn).transpose(0, 2, 3, 4, 5, 1, 6).reshape(b, k, t, h, w, d)
    out = x + ad.contract(att, p[pre + "attn.wo"], "bkthwc,cd->bkthwd") + p[pre + "attn.bo"]
    return _check(out, f"attention block {block}")


def mlp_block(x: Tensor, p: dict[str, Tensor], config: ModelConfig, block: int) -> Tensor:
    pre = f"blocks.{block}."
    xn = ad.layer_normalize(x, -1, LN_EPS, p[pre + "mlp_norm.gain"], p[pre + "mlp_norm.shift"])
    hid = ad.gelu(ad.contract(xn, p[pre + "mlp.w1"], "bkthwc,cm->bkthwm") + p[pre + "mlp.b1"])
    out = x + ad.contract(hid, p[pre + "mlp.w2"], "bkthwm,md->bkthwd") + p[pre + "mlp.b2"]
    return _check(out, f"mlp block {block}")


def forward_normalized(z: Tensor, p: dict[str, Tensor], config: ModelConfig, capture: dict | None = None) -> Tensor:
    """Transformer on normalized inputs; returns normalized target values [b,k,t,h,w]."""
    expected = (config.k, config.t, config.h, config.w, config.c)
    if z.ndim != 6 or z.shape[1:] != expected:
        raise ValueError(f"input shape {z.shape} does not match [b,{','.join(map(str, expected))}]")
    x = embed(z, p)
    for l in range(config.n_blocks):
        x = attention_block(x, p, config, l, capture)
        x = mlp_block(x, p, config, l)
    y = ad.contract(x, p["output.weight"], "bkthwd,do->bkthwo") + p["output.bias"]
    y = y.reshape(y.shape[:-1])
    return _check(y, "output projection")


def forward(z, params: TransformerParams, config: ModelConfig, inference: bool = True) -> np.ndarray:
    """Corrected ensemble ``[b,k,t,h,w]`` in physical units for physical input ``z``."""
    dtype = next(iter(params.weights.values())).dtype
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 5 and config.c == 1:
        z = z[..., None]
    zn = ((z - params.input_mean) / params.input_std).astype(dtype)
    out = forward_normalized(Tensor(zn), params.tensors(), config).data.astype(np.float64)
    ti = config.target_index
    out = out * params.input_std[ti] + params.input_mean[ti]
    if inference and config.variable_kind == "nonnegative_target":
        out = np.maximum(out, 0.0)
    return out.astype(dtype)


def training_loss(pred: Tensor, obs, train_config: TrainConfig) -> Tensor:
    if train_config.loss_kind == "auto":
        raise ValueError("resolve loss_kind 'auto' before computing a loss")
    if train_config.loss_kind == "gaussian_crps":
        return gaussian_crps_loss(pred, obs, member_axis=1)
    return kernel_crps_loss(pred, obs, train_config.kernel, member_axis=1)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: TransformerParams
    train_loss: list[float]
    val_loss: list[float]
    best_epoch: int

    @property
    def epochs(self) -> int:
        return len(self.train_loss)


def _batch_loss(params: dict[str, Tensor], z, y, config, train_config) -> float:
    pred = forward_normalized(Tensor._wrap(z), params, config)
    return float(training_loss(pred, y, train_config).data)


def evaluate_loss(params: TransformerParams, z: np.ndarray, y: np.ndarray, config, train_config) -> float:
    """Mean training objective over normalized samples, evaluated in batches."""
    tens = params.tensors()
    total, n = 0.0, z.shape[0]
    for a in range(0, n, train_config.batch_size):
        sl = slice(a, a + train_config.batch_size)
        total += _batch_loss(tens, z[sl], y[sl], config, train_config) * (min(a + train_config.batch_size, n) - a)
    return total / n


def train(
    train_ds: ForecastDataset,
    val_ds: ForecastDataset,
    config: ModelConfig,
    train_config: TrainConfig = TrainConfig(),
    callback: Callable[[int, float, float], None] | None = None,
) -> TrainResult:
    """Fit transformer weights by minimizing the mean CRPS with Adam.

    Weights are kept only when the validation loss improves; training stops
    after ``train_config.patience`` consecutive epochs without improvement.
    """
    if train_ds.n_samples == 0 or val_ds.n_samples == 0:
        raise ValueError("training and validation splits must be non-empty")
    if train_config.loss_kind == "auto":
        # Gaussian CRPS for temperature-like targets, kernel CRPS for non-negative ones
        kind = "gaussian_crps" if config.variable_kind == "gaussian_target" else "kernel_crps"
        train_config = replace(train_config, loss_kind=kind)
    norm = Normalizer.fit(train_ds)
    # round to the checkpoint precision so saved models reproduce exactly
    norm = Normalizer(norm.mean.astype(np.float32).astype(np.float64), norm.std.astype(np.float32).astype(np.float64), norm.target_index)
    z_tr = norm.normalize_forecasts(train_ds.forecasts)
    y_tr = norm.normalize_target(train_ds.observations)
    z_va = norm.normalize_forecasts(val_ds.forecasts)
    y_va = norm.normalize_target(val_ds.observations)

    params = init_params(config, np.float32, norm)
    names = list(params.weights)
    current = {n: Tensor(params.weights[n]) for n in names}
    states = {n: AdamState.zeros_like(current[n]) for n in names}
    rng = np.random.default_rng(np.random.SeedSequence([train_config.seed, 1]))
    lr = train_config.learning_rate
    bs = train_config.batch_size

    best = math.inf
    best_weights = {n: current[n].data for n in names}
    best_epoch = 0
    stale = 0
    history_train, history_val = [], []
    for epoch in range(train_config.max_epochs):
        order = rng.permutation(train_ds.n_samples)
        total = 0.0
        for a in range(0, len(order), bs):
            idx = order[a : a + bs]
            with Tape() as tape:
                for t in current.values():
                    tape.watch(t)
                try:
                    pred = forward_normalized(Tensor._wrap(z_tr[idx]), current, config)
                except ad.NonFiniteError as exc:
                    raise TrainingDivergedError(epoch, str(exc)) from None
                loss = training_loss(pred, y_tr[idx], train_config)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch)
            grads = tape.gradient(loss, [current[n] for n in names])
            for n, g in zip(names, grads):
                current[n], states[n] = adam_step(current[n], g, states[n], lr)
            total += value * len(idx)
        train_loss = total / train_ds.n_samples
        snapshot = TransformerParams({n: current[n].data for n in names}, norm.mean, norm.std)
        val_loss = evaluate_loss(snapshot, z_va, y_va, config, train_config)
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(epoch, "validation loss became non-finite")
        history_train.append(train_loss)
        history_val.append(val_loss)
        logger.info("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)
        if callback is not None:
            callback(epoch, train_loss, val_loss)
        if val_loss < best:
            best, best_epoch, stale = val_loss, epoch, 0
            best_weights = {n: current[n].data for n in names}
        else:
            stale += 1
        if stale >= train_config.patience:
            break
    final = TransformerParams({n: np.array(v) for n, v in best_weights.items()}, norm.mean, norm.std)
    return TrainResult(final, history_train, history_val, best_epoch)


# ---------------------------------------------------------------------------
# attention maps
# ---------------------------------------------------------------------------


def extract_attention_map(z, params: TransformerParams, config: ModelConfig, block: int, head: int, batch: int = 0) -> np.ndarray:
    """Mean of the elementwise query-key product for one head, per gridpoint.

    The projected query and key of ``block`` are multiplied elementwise and
    averaged over members, lead times and the head's features, giving an
    ``[h, w]`` map for sample ``batch`` of ``z``.
    """
    z = np.asarray(z, dtype=np.float64)
    if not 0 <= block < config.n_blocks:
        raise IndexError(f"block {block} out of range [0, {config.n_blocks})")
    if not 0 <= head < config.h_n:
        raise IndexError(f"head {head} out of range [0, {config.h_n})")
    if z.ndim != 6 or not 0 <= batch < z.shape[0]:
        raise IndexError(f"batch {batch} out of range for input of shape {z.shape}")
    dtype = next(iter(params.weights.values())).dtype
    zn = ((z[batch : batch + 1] - params.input_mean) / params.input_std).astype(dtype)
    capture = {"block": block}
    p = params.tensors()
    x = embed(Tensor(zn), p)
    for l in range(block + 1):
        x = attention_block(x, p, config, l, capture)
        if l < block:
            x = mlp_block(x, p, config, l)
    dn = config.head_width
    qk = capture["q"] * capture["k"]
    sel = qk[0, ..., head * dn : (head + 1) * dn]
    return sel.astype(np.float64).mean(axis=(0, 1, 4))


# ---------------------------------------------------------------------------
# checkpoint io
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"EPPT1\n"
_CONFIG_FIELDS = ("k", "t", "h", "w", "c", "c_tilde", "n_blocks", "h_n", "m_n", "variable_kind", "seed", "target_index")


class CheckpointFormatError(ValueError):
    pass


def save_checkpoint(path, params: TransformerParams, config: ModelConfig) -> None:
    """Write ``params`` in the EPPT1 format.

    Layout: magic ``EPPT1\\n``; twelve u32 config values in the order
    k, t, h, w, c, c_tilde, n_blocks, h_n, m_n, variable_kind (0 gaussian,
    1 nonnegative), seed, target_index; then each tensor as u16 name length,
    UTF-8 name, u8 rank, u32 extents and float32 row-major values. The
    normalization statistics are stored as tensors ``norm.mean`` and
    ``norm.std``.
    """
    values = [getattr(config, f) for f in _CONFIG_FIELDS]
    values[_CONFIG_FIELDS.index("variable_kind")] = VARIABLE_KINDS.index(config.variable_kind)
    parts = [CHECKPOINT_MAGIC, struct.pack(f"<{len(values)}I", *values)]
    tensors = dict(params.weights)
    tensors["norm.mean"] = params.input_mean
    tensors["norm.std"] = params.input_std
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[TransformerParams, ModelConfig]:
    buf = Path(path).read_bytes()
    if not buf.startswith(CHECKPOINT_MAGIC):
        raise CheckpointFormatError(f"{path}: not an EPPT checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    nf = len(_CONFIG_FIELDS)
    try:
        values = list(struct.unpack_from(f"<{nf}I", buf, pos))
        pos += 4 * nf
        values[_CONFIG_FIELDS.index("variable_kind")] = VARIABLE_KINDS[values[_CONFIG_FIELDS.index("variable_kind")]]
        config = ModelConfig(**dict(zip(_CONFIG_FIELDS, values)))
        tensors = {}
        while pos < len(buf):
            (ln,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + ln].decode("utf-8")
            pos += ln
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            if pos + 4 * count > len(buf):
                raise CheckpointFormatError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(buf, "<f4", count, pos).reshape(shape).astype(np.float32)
            pos += 4 * count
    except (struct.error, IndexError, UnicodeDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    mean = tensors.pop("norm.mean", np.zeros(config.c)).astype(np.float64)
    std = tensors.pop("norm.std", np.ones(config.c)).astype(np.float64)
    shapes = param_shapes(config)
    if list(tensors) != list(shapes) or any(tensors[n].shape != s for n, s in shapes.items()):
        raise CheckpointFormatError(f"{path}: tensors do not match the stored configuration")
    return TransformerParams(tensors, mean, std), config

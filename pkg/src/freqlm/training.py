"""Training loop, Adam, checkpoint serialization, and perplexity.

Batches are random contiguous windows of the training stream; the window
starts for step ``s`` come from a dedicated counter-based stream keyed by
(seed, s), so any step can be reproduced in isolation and runs are
order-independent. Gradients are clipped by global norm before the
optimizer step; weight decay is added to the (clipped) gradient inside
the step, classic Adam-with-L2 style.

Checkpoints are little-endian binary: magic, format version, a JSON
header (model/train config, partition, step, seed), then named float32
tensors for the parameters and both Adam moments. RNG state needs no
tensors of its own — the (seed, step) pair in the header pins every
stream.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import CHECKPOINT_FORMAT_VERSION, ConfigError, DataError, NumericError
from .corpus import TokenStream
from .model import Model, ModelConfig
from .nn import global_norm
from .partition import ClassPartition
from .rng import BATCH, stream

CHECKPOINT_MAGIC = b"FQLM"


@dataclass
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 0.25
    weight_decay: float = 0.0
    total_steps: int = 500
    eval_interval: int = 50

    def validate(self) -> None:
        if self.batch_size < 1 or self.total_steps < 1 or self.eval_interval < 1:
            raise ConfigError("batch_size, total_steps, eval_interval must be >= 1")
        if self.learning_rate <= 0 or self.eps <= 0 or self.clip_norm <= 0:
            raise ConfigError("learning_rate, eps, clip_norm must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size, "learning_rate": self.learning_rate,
            "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "clip_norm": self.clip_norm, "weight_decay": self.weight_decay,
            "total_steps": self.total_steps, "eval_interval": self.eval_interval,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class Adam:
    """Adam with bias correction; weight decay enters as +wd*p on the
    incoming (already clipped) gradient."""

    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if c.weight_decay > 0.0:
                g = g + c.weight_decay * p
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p -= (c.learning_rate / bc1) * m / (np.sqrt(v / bc2) + c.eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global norm is at most max_norm.
    Returns the pre-clip norm."""
    norm = global_norm(grads.values())
    if norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


def sample_batch(ids: np.ndarray, seed: int, step: int, batch_size: int, window: int) -> np.ndarray:
    """batch_size random contiguous windows of ``window`` tokens."""
    n = ids.shape[0]
    if n < window:
        raise DataError(f"stream of {n} tokens is shorter than one {window}-token window")
    rng = stream(seed, BATCH, step)
    starts = rng.integers(0, n - window + 1, size=batch_size)
    return np.stack([ids[s : s + window] for s in starts])


def _stream_ids(source) -> np.ndarray:
    ids = source.ids if isinstance(source, TokenStream) else np.asarray(source, dtype=np.int64)
    if ids.size < 2:
        raise DataError("token stream must hold at least 2 tokens")
    return ids


def mean_nll(model: Model, source) -> float:
    """Eval-mode mean negative log-likelihood per token, in nats.

    The stream is scored in back-to-back windows of sequence_length, so
    every token except the first is predicted exactly once.
    """
    ids = _stream_ids(source)
    T = model.config.sequence_length
    total = 0.0
    count = 0
    full_ctx, full_tgt = [], []
    for s in range(0, ids.size - 1, T):
        window = ids[s : s + T + 1]
        if window.size == T + 1:
            full_ctx.append(window[:-1])
            full_tgt.append(window[1:])
        elif window.size >= 2:
            total += model.nll_sum(window[None, :-1], window[None, 1:])
            count += window.size - 1
    if full_ctx:
        total += model.nll_sum(np.stack(full_ctx), np.stack(full_tgt))
        count += sum(c.size for c in full_ctx)
    return total / count


def perplexity(model: Model, source) -> float:
    """exp of the mean per-token nll under the model's full posterior."""
    return float(np.exp(mean_nll(model, source)))


@dataclass
class TrainResult:
    model: Model
    optimizer: Adam
    step: int
    curve: list  # (step, train_loss, valid_loss | None)

    def final_train_loss(self) -> float:
        return self.curve[-1][1]


def train(model: Model, train_source, valid_source=None, tcfg: TrainConfig | None = None,
          *, curve_path: str | Path | None = None, start_step: int = 0,
          optimizer: Adam | None = None, log=None) -> TrainResult:
    """Run total_steps optimizer steps; returns the trained model plus the
    loss curve. Aborts with NumericError if the loss goes non-finite."""
    tcfg = tcfg or TrainConfig()
    tcfg.validate()
    ids = _stream_ids(train_source)
    window = min(model.config.sequence_length, ids.size - 1) + 1
    opt = optimizer or Adam(model.params, tcfg)
    seed = model.config.seed
    curve = []
    for step in range(start_step + 1, start_step + tcfg.total_steps + 1):
        batch = sample_batch(ids, seed, step, tcfg.batch_size, window)
        loss, grads = model.loss_and_grads(batch, step=step)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite training loss at step {step} (batch stream seed {seed})")
        clip_gradients(grads, tcfg.clip_norm)
        opt.step(model.params, grads)
        valid = None
        if valid_source is not None and (step % tcfg.eval_interval == 0
                                         or step == start_step + tcfg.total_steps):
            valid = mean_nll(model, valid_source)
            if not np.isfinite(valid):
                raise NumericError(f"non-finite validation loss at step {step}")
        curve.append((step, float(loss), valid))
        if log is not None:
            log(step, float(loss), valid)
    if curve_path is not None:
        write_loss_curve(curve_path, curve)
    return TrainResult(model, opt, start_step + tcfg.total_steps, curve)


def write_loss_curve(path: str | Path, curve) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "train_loss", "valid_loss"])
    for step, tr, va in curve:
        w.writerow([step, f"{tr:.6f}", "" if va is None else f"{va:.6f}"])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_tensor(fh):
    (nlen,) = struct.unpack("<H", fh.read(2))
    name = fh.read(nlen).decode("utf-8")
    (ndim,) = struct.unpack("<B", fh.read(1))
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
    return name, data.copy()


def save_checkpoint(path: str | Path, model: Model, optimizer: Adam | None = None,
                    step: int = 0, tcfg: TrainConfig | None = None,
                    extra: dict | None = None) -> None:
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "partition": json.loads(model.partition.to_json()),
        "train_config": tcfg.to_dict() if tcfg is not None else None,
        "step": step,
        "seed": model.config.seed,
    }
    if extra:
        header.update(extra)
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    tensors = [(k, v) for k, v in sorted(model.params.items())]
    if optimizer is not None:
        tensors += [(f"opt.m.{k}", v) for k, v in sorted(optimizer.m.items())]
        tensors += [(f"opt.v.{k}", v) for k, v in sorted(optimizer.v.items())]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            _write_tensor(fh, name, arr)


def load_checkpoint(path: str | Path, tcfg_override: TrainConfig | None = None):
    """Returns (model, optimizer, step, header). The optimizer is None when
    the checkpoint was saved without one."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"checkpoint not found: {p}")
    with open(p, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise DataError(f"not a checkpoint file: {p}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_FORMAT_VERSION:
            raise DataError(
                f"checkpoint format version mismatch: file has {version}, "
                f"expected {CHECKPOINT_FORMAT_VERSION}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        (ntensors,) = struct.unpack("<I", fh.read(4))
        tensors = dict(_read_tensor(fh) for _ in range(ntensors))
    config = ModelConfig.from_dict(header["model_config"])
    partition = ClassPartition.from_json(json.dumps(header["partition"]))
    if config.head_type != "f2":
        partition = None
    params = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    model = Model(config, partition, params=params, dtype=np.float32)
    optimizer = None
    moments_m = {k[len("opt.m."):]: a for k, a in tensors.items() if k.startswith("opt.m.")}
    moments_v = {k[len("opt.v."):]: a for k, a in tensors.items() if k.startswith("opt.v.")}
    if moments_m:
        tc = tcfg_override or (TrainConfig.from_dict(header["train_config"])
                               if header.get("train_config") else TrainConfig())
        optimizer = Adam(model.params, tc)
        optimizer.m = moments_m
        optimizer.v = moments_v
        optimizer.t = header["step"]
    return model, optimizer, header["step"], header

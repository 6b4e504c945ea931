"""Spatiotemporal recurrent convolutional network: assembly, training, checkpoints.

Every input frame goes through the convolutional stack, is flattened and
projected to a feature vector; the feature sequence runs through stacked
LSTMs; the top layer's final hidden state is dropped out (training only) and
fed to one affine head per horizon offset.
"""
from __future__ import annotations

import io
import json
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import (
    ShapeError, Tape, Tensor, add, dropout, flatten, getitem, hadamard, read_tensor, scale, sub, tsum,
    write_tensor,
)
from .data import SampleWindow, chronological_split
from .layers import ConvBlock, DenseLayer
from .lstm import LstmCellParams, run_stacked

CHECKPOINT_MAGIC = b"SRCN"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass(frozen=True)
class SrcnConfig:
    height: int = 163
    width: int = 148
    channels: tuple[int, ...] = (16, 32, 64, 64, 128)
    pool_after: tuple[int, ...] = (0, 1, 4)  # zero-based block indices followed by a 2x2 pool
    feature_dim: int = 278
    hidden: int = 800
    lstm_layers: int = 2
    n_links: int = 278
    dropout: float = 0.2
    lag: int = 15
    offsets: tuple[int, ...] = (1, 2, 3)
    learning_rate: float = 0.003
    decay: float = 0.9
    rms_eps: float = 1e-8
    batch_size: int = 64
    val_fraction: float = 0.2
    patience: int = 10
    min_delta: float = 1e-5
    max_epochs: int = 100
    bn_eps: float = 1e-5
    bn_momentum: float = 0.99

    def __post_init__(self):
        for name in ("channels", "pool_after", "offsets"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.height < 1 or self.width < 1:
            raise ConfigError("grid dimensions must be positive")
        if not self.channels:
            raise ConfigError("need at least one convolution block")
        if any(c < 1 for c in self.channels):
            raise ConfigError("channel counts must be positive")
        if any(not 0 <= b < len(self.channels) for b in self.pool_after):
            raise ConfigError("pool_after refers to a missing block")
        if not self.offsets or self.offsets[0] < 1 or any(b <= a for a, b in zip(self.offsets, self.offsets[1:])):
            raise ConfigError(f"horizon offsets must be strictly increasing and >= 1, got {self.offsets}")
        if self.lag < 1 or self.lstm_layers < 1 or self.hidden < 1 or self.feature_dim < 1 or self.n_links < 1:
            raise ConfigError("lag, lstm_layers, hidden, feature_dim and n_links must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if not self.learning_rate > 0 or not 0.0 <= self.decay < 1.0 or not self.rms_eps > 0:
            raise ConfigError("invalid optimizer settings")
        if self.batch_size < 2:
            raise ConfigError("batch size must be >= 2 (batch normalization)")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in (0, 1)")
        if self.patience < 0 or self.max_epochs < 1:
            raise ConfigError("patience must be >= 0 and max_epochs >= 1")

    def conv_shapes(self) -> list[tuple[int, int, int]]:
        """Output shape (C, H, W) of every convolution block for one frame."""
        h, w, c_in = self.height, self.width, 1
        out = []
        for k, c in enumerate(self.channels):
            if k in self.pool_after:
                if h < 2 or w < 2:
                    raise ConfigError(f"grid too small to pool after block {k}")
                h, w = h // 2, w // 2
            out.append((c, h, w))
            c_in = c
        return out

    @property
    def flat_dim(self) -> int:
        c, h, w = self.conv_shapes()[-1]
        return c * h * w

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SrcnConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model settings: {sorted(unknown)}")
        return cls(**d)


class SrcnParams:
    def __init__(self, config: SrcnConfig, rng: np.random.Generator | None = None):
        """Random initialization from ``rng``; all-zero weights when it is None."""
        self.config = config
        self.conv: list[ConvBlock] = []
        c_in = 1
        for k, c in enumerate(config.channels):
            self.conv.append(ConvBlock(c_in, c, pool=k in config.pool_after, rng=rng,
                                       eps=config.bn_eps, momentum=config.bn_momentum))
            c_in = c
        self.feature = DenseLayer(config.flat_dim, config.feature_dim, rng)
        self.lstm: list[LstmCellParams] = []
        p = config.feature_dim
        for _ in range(config.lstm_layers):
            self.lstm.append(LstmCellParams.init(p, config.hidden, rng))
            p = config.hidden
        self.heads = [DenseLayer(config.hidden, config.n_links, rng) for _ in config.offsets]

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for k, block in enumerate(self.conv):
            for name, t in block.parameters().items():
                out[f"conv{k}.{name}"] = t
        for name, t in self.feature.parameters().items():
            out[f"feature.{name}"] = t
        for k, cell in enumerate(self.lstm):
            for name, t in cell.parameters().items():
                out[f"lstm{k}.{name}"] = t
        for k, head in enumerate(self.heads):
            for name, t in head.parameters().items():
                out[f"head{k}.{name}"] = t
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for k, block in enumerate(self.conv):
            for name, arr in block.buffers().items():
                out[f"conv{k}.{name}"] = arr
        return out

    def count_parameters(self) -> int:
        return sum(t.size for t in self.named_parameters().values())

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        snap = {f"param:{k}": t.data.copy() for k, t in self.named_parameters().items()}
        snap.update({f"buffer:{k}": a.copy() for k, a in self.named_buffers().items()})
        return snap

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, t in self.named_parameters().items():
            t.data = snap[f"param:{k}"].copy()
        for k, a in self.named_buffers().items():
            a[...] = snap[f"buffer:{k}"]


def _as_batch(frames, config: SrcnConfig) -> tuple[np.ndarray, bool]:
    x = np.asarray(frames, dtype=np.float64)
    unbatched = x.ndim == 3
    if unbatched:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"expected frames [L, H, W] or [N, L, H, W], got {x.shape}")
    if x.shape[1] != config.lag:
        raise ShapeError(f"window has {x.shape[1]} frames, config expects {config.lag}")
    if x.shape[2:] != (config.height, config.width):
        raise ShapeError(f"frames are {x.shape[2:]}, config expects {(config.height, config.width)}")
    return x, unbatched


def encode_frames(params: SrcnParams, x: Tensor, training: bool) -> Tensor:
    """Conv stack + flatten + feature projection for a [M, 1, H, W] batch -> [M, p]."""
    for block in params.conv:
        x = block(x, training)
    return params.feature(flatten(x, start_dim=1))


def forward(
    params: SrcnParams,
    frames,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout_mask: np.ndarray | None = None,
) -> list[Tensor]:
    """Predict normalized link speeds for every horizon offset.

    ``frames`` is one window [L, H, W] or a batch [N, L, H, W]. Returns one
    tensor per offset, shaped [n_links] or [N, n_links].
    """
    cfg = params.config
    x, unbatched = _as_batch(frames, cfg)
    n, lag = x.shape[:2]
    # time-major so that step t is a contiguous slice
    stacked = Tensor(x.transpose(1, 0, 2, 3).reshape(lag * n, 1, cfg.height, cfg.width))
    feats = encode_frames(params, stacked, training).reshape((lag, n, cfg.feature_dim))
    sequence = [getitem(feats, t) for t in range(lag)]
    top = run_stacked(params.lstm, sequence)
    h = dropout(top.h, cfg.dropout, training, rng=rng, mask=dropout_mask)
    outs = [head(h) for head in params.heads]
    if unbatched:
        outs = [o.reshape((cfg.n_links,)) for o in outs]
    return outs


def mse_loss(preds: Sequence[Tensor], targets) -> Tensor:
    """Mean squared error over horizons, links and batch elements.

    ``targets`` is indexed by horizon first: a [K, ...] array or a sequence of
    K arrays each shaped like the matching prediction.
    """
    if len(preds) != len(targets):
        raise ShapeError(f"{len(preds)} predicted horizons vs {len(targets)} targets")
    total = None
    count = 0
    for p, t in zip(preds, targets):
        t = t if isinstance(t, Tensor) else Tensor(t)
        if p.shape != t.shape:
            raise ShapeError(f"prediction {p.shape} vs target {t.shape}")
        d = sub(p, t)
        s = tsum(hadamard(d, d))
        total = s if total is None else add(total, s)
        count += p.size
    return scale(total, 1.0 / count)


class RMSprop:
    """acc <- decay*acc + (1-decay)*g^2 ;  theta <- theta - lr*g/sqrt(acc+eps)."""

    def __init__(self, params: dict[str, Tensor], lr: float = 0.003, decay: float = 0.9, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self.acc = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self) -> None:
        missing = [k for k, t in self.params.items() if t.grad is None]
        if missing:
            raise ValueError(f"missing gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
        for k, t in self.params.items():
            g = t.grad
            acc = self.acc[k]
            acc *= self.decay
            acc += (1.0 - self.decay) * g * g
            t.data -= self.lr * g / np.sqrt(acc + self.eps)


def _batch_arrays(windows: Sequence[SampleWindow]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([w.inputs for w in windows])
    y = np.stack([w.targets for w in windows]).transpose(1, 0, 2)  # [K, N, n]
    return x, y


def train_step(params: SrcnParams, opt: RMSprop, x: np.ndarray, y: np.ndarray, rng: np.random.Generator) -> float:
    params.zero_grad()
    with Tape() as tape:
        loss = mse_loss(forward(params, x, training=True, rng=rng), y)
    tape.backward(loss)
    opt.step()
    return loss.item()


def predict(params: SrcnParams, windows: Sequence[SampleWindow], batch_size: int = 64) -> np.ndarray:
    """Infer-mode predictions, shaped [N, K, n] (normalized)."""
    out = []
    for s in range(0, len(windows), batch_size):
        x = np.stack([w.inputs for w in windows[s:s + batch_size]])
        preds = forward(params, x, training=False)
        out.append(np.stack([p.data for p in preds], axis=1))
    if not out:
        return np.zeros((0, len(params.heads), params.config.n_links))
    return np.concatenate(out)


def evaluate_mse(params: SrcnParams, windows: Sequence[SampleWindow], batch_size: int = 64) -> float:
    pred = predict(params, windows, batch_size)
    target = np.stack([w.targets for w in windows])
    return float(np.mean((pred - target) ** 2))


@dataclass
class TrainResult:
    params: SrcnParams
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_mse: float = float("inf")
    stopped_early: bool = False


def train(
    config: SrcnConfig,
    windows: Sequence[SampleWindow],
    seed: int,
    log_path: str | Path | None = None,
    verbose: bool = False,
) -> TrainResult:
    """Mini-batch RMSprop on MSE with early stopping on a chronological
    validation tail; returns the best-validation parameters."""
    if not windows:
        raise ValueError("empty dataset")
    train_w, val_w = chronological_split(windows, 1.0 - config.val_fraction)
    if len(train_w) < config.batch_size:
        raise ValueError(f"{len(train_w)} training windows is fewer than one batch of {config.batch_size}")
    rng = np.random.default_rng(seed)
    params = SrcnParams(config, rng)
    opt = RMSprop(params.named_parameters(), config.learning_rate, config.decay, config.rms_eps)
    result = TrainResult(params)
    best_snap = params.snapshot()
    wait = 0
    log_fp = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, config.max_epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(train_w))
            total, seen = 0.0, 0
            for s in range(0, len(order), config.batch_size):
                idx = order[s:s + config.batch_size]
                if len(idx) < 2:
                    continue
                x, y = _batch_arrays([train_w[i] for i in idx])
                total += train_step(params, opt, x, y, rng) * len(idx)
                seen += len(idx)
            val = evaluate_mse(params, val_w)
            record = {
                "epoch": epoch,
                "train_mse": total / seen,
                "val_mse": val,
                "lr": config.learning_rate,
                "seconds": time.perf_counter() - t0,
            }
            result.log.append(record)
            if log_fp:
                log_fp.write(json.dumps(record) + "\n")
                log_fp.flush()
            if verbose:
                print(f"epoch {epoch:3d}  train {record['train_mse']:.6f}  val {val:.6f}  {record['seconds']:.1f}s")
            if val < result.best_val_mse - config.min_delta:
                result.best_val_mse = val
                result.best_epoch = epoch
                best_snap = params.snapshot()
                wait = 0
            else:
                wait += 1
                if wait > config.patience:
                    result.stopped_early = True
                    break
    finally:
        if log_fp:
            log_fp.close()
    params.restore(best_snap)
    return result


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

def save_checkpoint(params: SrcnParams, path: str | Path, meta: dict | None = None) -> None:
    """Write magic, u32 version, length-prefixed JSON header, then named tensors."""
    tensors = {f"param:{k}": t.data for k, t in params.named_parameters().items()}
    tensors.update({f"buffer:{k}": a for k, a in params.named_buffers().items()})
    header = json.dumps(
        {"config": params.config.to_dict(), "meta": meta or {}, "tensors": list(tensors)},
        sort_keys=True,
    ).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<Q", len(header)))
    buf.write(header)
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        write_tensor(buf, arr)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[SrcnParams, SrcnConfig, dict]:
    """Read a checkpoint written by :func:`save_checkpoint`.

    The whole file is validated before any parameters are built.
    """
    blob = Path(path).read_bytes()
    fp = io.BytesIO(blob)
    magic = fp.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointVersionError(f"{path}: not an SRCN checkpoint (bad magic {magic!r})")
    raw = fp.read(4)
    if len(raw) != 4:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack("<I", raw)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint format version {version}, expected {CHECKPOINT_VERSION}")
    try:
        (hlen,) = struct.unpack("<Q", fp.read(8))
        hraw = fp.read(hlen)
        if len(hraw) != hlen:
            raise CheckpointError("truncated header")
        header = json.loads(hraw.decode("utf-8"))
        config = SrcnConfig.from_dict(header["config"])
        arrays = {}
        for name in header["tensors"]:
            (nlen,) = struct.unpack("<I", fp.read(4))
            got = fp.read(nlen).decode("utf-8")
            if got != name:
                raise CheckpointError(f"tensor order mismatch: expected {name!r}, found {got!r}")
            arrays[name] = read_tensor(fp)
    except (struct.error, EOFError, UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt or truncated checkpoint ({exc})") from exc
    if fp.read(1):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    params = SrcnParams(config, rng=None)
    expected = {f"param:{k}": t.shape for k, t in params.named_parameters().items()}
    expected.update({f"buffer:{k}": a.shape for k, a in params.named_buffers().items()})
    if set(expected) != set(arrays):
        raise CheckpointError(f"{path}: tensor names do not match the configuration")
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {arrays[name].shape}, expected {shape}")
    params.restore(arrays)
    return params, config, header.get("meta", {})

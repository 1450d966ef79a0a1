"""Per-layer (X, Y) activation caches built by running teacher and student in
lockstep over calibration batches, plus train/validation sharding and
optional disk spill in the tensor container format.

X rows are the student's layer inputs (so they reflect whatever upstream
layers are already compressed); Y rows are always the original fine-tuned
teacher's layer outputs on the same tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import TapPoint, ToyModel, forward, linear_layer_names
from .tensor import Rng, read_container, write_container


class DataSourceError(ValueError):
    """Empty or malformed calibration data."""


@dataclass
class CalibConfig:
    train_batches: int = 50
    val_batches: int | None = None  # default ceil(train/4)
    batch_size: int = 4
    seq_len: int = 16
    seed: int = 0

    @property
    def n_val(self) -> int:
        if self.val_batches is not None:
            return self.val_batches
        return math.ceil(self.train_batches / 4)

    def validate(self):
        if self.train_batches < 1 or self.n_val < 1:
            raise ValueError("train and val batch counts must be >= 1")
        if self.batch_size < 1 or self.seq_len < 1:
            raise ValueError("batch size and sequence length must be >= 1")


class TokenSource:
    """Deterministic random token batches, addressable by batch index."""

    def __init__(self, vocab: int, cfg: CalibConfig):
        self.vocab = vocab
        self.cfg = cfg

    def batch(self, index: int) -> np.ndarray:
        rng = Rng(self.cfg.seed * 1_000_003 + index)
        return np.asarray(
            rng.integers(0, self.vocab, (self.cfg.batch_size, self.cfg.seq_len))
        )


class FileTokenSource:
    """Batches from a newline-delimited token-id file.

    One sequence per line, space-separated base-10 ids; all sequences must
    share a length, and consecutive lines are grouped into batches.
    """

    def __init__(self, path, cfg: CalibConfig):
        with open(path) as f:
            lines = [ln.strip() for ln in f if ln.strip()]
        if not lines:
            raise DataSourceError(f"{path}: no calibration sequences")
        seqs = [[int(tok) for tok in ln.split()] for ln in lines]
        lengths = {len(s) for s in seqs}
        if len(lengths) != 1:
            raise DataSourceError(f"{path}: ragged sequence lengths {sorted(lengths)}")
        self._seqs = np.asarray(seqs, dtype=np.int64)
        self.cfg = cfg

    def batch(self, index: int) -> np.ndarray:
        n = self.cfg.batch_size
        lo = index * n
        if lo + n > len(self._seqs):
            raise DataSourceError(
                f"calibration file exhausted: batch {index} needs rows "
                f"{lo}..{lo + n}, have {len(self._seqs)}"
            )
        return self._seqs[lo : lo + n]


@dataclass
class CalibCache:
    layer: str
    X_train: np.ndarray
    Y_train: np.ndarray
    X_val: np.ndarray
    Y_val: np.ndarray

    def __post_init__(self):
        if self.X_train.shape[0] != self.Y_train.shape[0]:
            raise ValueError("train shard row mismatch")
        if self.X_val.shape[0] != self.Y_val.shape[0]:
            raise ValueError("val shard row mismatch")


def build_cache(
    teacher: ToyModel,
    student: ToyModel,
    layer: str,
    cfg: CalibConfig,
    source,
) -> CalibCache:
    """Run both models in lockstep over train+val batches and pool rows.

    Batch b feeds both models identically; the first `train_batches` go to
    the train shard, the next `n_val` to the validation shard.
    """
    cfg.validate()
    if layer not in linear_layer_names(teacher) or layer not in linear_layer_names(
        student
    ):
        raise KeyError(f"unknown layer {layer!r}")
    tap_out = TapPoint(layer, "output")
    tap_in = TapPoint(layer, "input")
    xs, ys = [], []
    total = cfg.train_batches + cfg.n_val
    for b in range(total):
        tokens = source.batch(b)
        _, t_caps = forward(teacher, tokens, (tap_out,))
        _, s_caps = forward(student, tokens, (tap_in,))
        ys.append(t_caps[tap_out])
        xs.append(s_caps[tap_in])
    rows_per_batch = xs[0].shape[0]
    split = cfg.train_batches * rows_per_batch
    X = np.concatenate(xs, axis=0)
    Y = np.concatenate(ys, axis=0)
    return CalibCache(layer, X[:split], Y[:split], X[split:], Y[split:])


def split_shards(X: np.ndarray, Y: np.ndarray, fraction: float):
    """Deterministic contiguous split of pooled rows into (train, val)."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0,1), got {fraction}")
    if X.shape[0] != Y.shape[0]:
        raise ValueError("X/Y row mismatch")
    cut = int(round(X.shape[0] * fraction))
    if cut < 1 or cut >= X.shape[0]:
        raise ValueError(f"degenerate split: {cut}/{X.shape[0] - cut}")
    return (X[:cut], Y[:cut]), (X[cut:], Y[cut:])


def save_cache(path, cache: CalibCache) -> int:
    """Spill a cache to disk as a tensor container."""
    return write_container(
        path,
        {
            f"{cache.layer}.X_train": cache.X_train,
            f"{cache.layer}.Y_train": cache.Y_train,
            f"{cache.layer}.X_val": cache.X_val,
            f"{cache.layer}.Y_val": cache.Y_val,
        },
    )


def load_cache(path, layer: str) -> CalibCache:
    entries = read_container(path)
    try:
        return CalibCache(
            layer,
            entries[f"{layer}.X_train"],
            entries[f"{layer}.Y_train"],
            entries[f"{layer}.X_val"],
            entries[f"{layer}.Y_val"],
        )
    except KeyError as e:
        raise KeyError(f"{path}: missing cache shard for layer {layer!r}: {e}")

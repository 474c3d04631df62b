"""Mini-batch training, evaluation, prediction and the persistence baseline."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, DatasetVariant, get_variant
from .errors import EmptyDataset, NonFiniteLoss, VariantMismatch
from .ingestion import format_utc
from .models import Checkpoint, save_checkpoint
from .neural import AdamState, adam_step, mse, mse_backward

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ("sensor", "t", "horizon", "measured", "predicted")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    shuffle: bool = True
    # start the output bias at the mean target so the final ReLU begins active
    init_output_bias: bool = True
    checkpoint_every: int = 0
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def adam(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


@dataclass
class TrainReport:
    epoch_losses: list = field(default_factory=list)
    test_mse: float | None = None
    wall_time: float = 0.0

    def to_csv(self, stream=None):
        """``epoch,loss`` rows plus a summary comment. Wall time is left out so
        the file is reproducible; it goes to the run manifest instead."""
        out = io.StringIO() if stream is None else stream
        out.write("epoch,loss\n")
        for i, loss in enumerate(self.epoch_losses, 1):
            out.write(f"{i},{loss!r}\n")
        test = "NA" if self.test_mse is None else repr(self.test_mse)
        out.write(f"# summary: epochs={len(self.epoch_losses)} test_mse_ft2={test}\n")
        if stream is None:
            return out.getvalue()
        return None


def _arrays(data):
    if isinstance(data, Dataset):
        return data.X, data.y
    X, y = data
    return np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.float64)


def _check_width(net, X):
    if X.ndim != 2 or X.shape[1] != net.n_inputs:
        raise VariantMismatch(
            f"{net.kind} model expects {net.n_inputs} inputs per entry, data has {X.shape[-1]}"
        )


def train(net, data, config: TrainConfig | None = None, test=None):
    """Fit ``net`` in place with Adam on per-batch mean squared error.

    ``data`` (and optional ``test``) is a :class:`Dataset` or an ``(X, y)``
    pair. Parameters are initialized from ``config.seed`` if the network has
    none yet. Given the seed, a single run is bit-reproducible.

    Returns:
        ``(Checkpoint, TrainReport)``

    Raises:
        VariantMismatch: input width differs from the network's.
        NonFiniteLoss: a batch loss or gradient went non-finite; the error
            carries the checkpoint from the start of that epoch.
    """
    config = config or TrainConfig()
    X, y = _arrays(data)
    _check_width(net, X)
    if len(X) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    if len(net.params) == 0:
        net.init_params(config.seed)
        if config.init_output_bias:
            net.params[net.output_bias_name()] = np.full(net.n_outputs, float(y.mean()))
    state = AdamState.create(net.params, **config.adam())
    rng = np.random.Generator(np.random.Philox(config.seed))
    report = TrainReport()
    started = time.perf_counter()
    n = len(X)

    for epoch in range(1, config.epochs + 1):
        good = Checkpoint(_clone(net), _clone_state(state), {"epoch": epoch - 1})
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        total = 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            pred, cache = net.forward(X[idx])
            loss, diff = mse(pred, y[idx])
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"non-finite loss in epoch {epoch}", good)
            grads = net.backward(mse_backward(diff), cache)
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NonFiniteLoss(f"non-finite gradient in epoch {epoch}", good)
            net.params.set_grads(grads)
            adam_step(net.params, state)
            total += loss * len(idx)
        report.epoch_losses.append(total / n)
        logger.info("epoch %d/%d loss %.6g", epoch, config.epochs, report.epoch_losses[-1])
        if config.checkpoint_every and config.checkpoint_path and epoch % config.checkpoint_every == 0:
            save_checkpoint(net, state, config.checkpoint_path, {"epoch": epoch})

    if test is not None:
        report.test_mse = evaluate(net, test)
    report.wall_time = time.perf_counter() - started
    return Checkpoint(net, state, {"epoch": config.epochs}), report


def _clone(net):
    return type(net)(net.config, net.params.copy())


def _clone_state(state):
    return AdamState(
        state.lr, state.beta1, state.beta2, state.eps, state.step,
        {k: v.copy() for k, v in state.m.items()},
        {k: v.copy() for k, v in state.v.items()},
    )


def predict_batch(net, X, chunk: int = 512) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    _check_width(net, X)
    parts = [net.forward(X[i : i + chunk])[0] for i in range(0, len(X), chunk)]
    return np.concatenate(parts) if parts else np.zeros((0, net.n_outputs))


def per_entry_mse(net, data) -> np.ndarray:
    X, y = _arrays(data)
    pred = predict_batch(net, X)
    return np.mean((pred - y) ** 2, axis=1)


def evaluate(net, data) -> float:
    """Mean over entries of the per-entry mean squared error (feet squared)."""
    X, _ = _arrays(data)
    if len(X) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    errors = per_entry_mse(net, data)
    return math.fsum(errors.tolist()) / len(errors)


def predict(net, entry) -> np.ndarray:
    """24 hourly stage forecasts for one entry (a DatasetEntry or input vector)."""
    x = np.asarray(getattr(entry, "input", entry), dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != net.n_inputs:
        raise VariantMismatch(f"{net.kind} model expects {net.n_inputs} inputs, got {x.shape}")
    return net.predict(x)


def persistence_baseline(entry, variant: DatasetVariant | str = "larger") -> np.ndarray:
    """Repeat the sensor's most recent observed stage across the horizon."""
    variant = get_variant(variant)
    x = np.asarray(getattr(entry, "input", entry), dtype=np.float64)
    last = x[..., variant.height_len - 1]
    return np.repeat(np.asarray(last)[..., None], variant.output_len, axis=-1)


def persistence_mse(data: Dataset) -> float:
    pred = persistence_baseline(data.X, data.variant)
    errors = np.mean((pred - data.y) ** 2, axis=1)
    return math.fsum(errors.tolist()) / len(errors)


def write_trace(net, data: Dataset, stream=None, sensor: str | None = None):
    """Measured-vs-predicted rows ``sensor,t,horizon,measured,predicted``.

    ``horizon`` is the forecast lead in hours (0 .. 23) from the entry time.
    """
    keep = [i for i in range(len(data)) if sensor is None or data.sensors[i] == sensor]
    if not keep:
        raise EmptyDataset(f"no entries for sensor {sensor!r}")
    pred = predict_batch(net, data.X[keep])
    out = io.StringIO() if stream is None else stream
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for row, i in enumerate(keep):
        stamp = format_utc(int(data.times[i]))
        for h in range(data.variant.output_len):
            writer.writerow([data.sensors[i], stamp, h, repr(float(data.y[i, h])), repr(float(pred[row, h]))])
    if stream is None:
        return out.getvalue()
    return None

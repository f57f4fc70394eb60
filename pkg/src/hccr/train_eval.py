"""Training loop, top-k evaluation, ensembling, persistence, size accounting.

Training is plain minibatch SGD with momentum and a per-epoch multiplicative
learning-rate decay, fully deterministic for a given seed. Evaluation ranks
classes by probability with ties resolved toward the lower class index.
Models persist to a small binary container (magic "HCRM") holding the
topology followed by the raw float32 parameters in canonical order.
"""

import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .directional_features import canonical_mode, stack_batch
from .network_builder import (
    ParamStore,
    count_parameters,
    forward_net,
    init_weights,
    loss_and_grads,
    parameter_entries,
    spec_from_bytes,
    spec_to_bytes,
    with_dropout_rate,
)

MODEL_MAGIC = b"HCRM"
MODEL_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.01
    lr_decay: float = 0.95
    momentum: float = 0.9
    dropout: float = 0.5
    seed: int = 0
    mode: str = "original"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if not 0 <= self.lr_decay <= 1:
            raise ValueError(f"lr_decay must be in [0, 1], got {self.lr_decay}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        canonical_mode(self.mode)


@dataclass(frozen=True)
class TrainLogEntry:
    epoch: int
    train_loss: float
    val_top1: float             # percent; nan when no validation set was given


def format_training_log(log):
    """Line-oriented text: epoch, tab, train loss, tab, validation top-1."""
    return "\n".join(f"{e.epoch}\t{e.train_loss:.6f}\t{e.val_top1:.2f}"
                     for e in log)


def _stacked_inputs(dataset, mode):
    images = [s.image for s in dataset.samples]
    return stack_batch(images, mode), dataset.labels()


def _batch_ranges(n, batch_size):
    return [(lo, min(lo + batch_size, n)) for lo in range(0, n, batch_size)]


def _top1_percent(spec, params, x, labels, batch_size):
    hits = 0
    for lo, hi in _batch_ranges(len(labels), batch_size):
        probs, _ = forward_net(spec, params, x[lo:hi], mode="infer")
        hits += int((probs.argmax(axis=1) == labels[lo:hi]).sum())
    return 100.0 * hits / len(labels)


def train(spec, train_set, config, val_set=None):
    """Minibatch SGD over a preprocessed dataset. Returns (params, log).

    The input mode of `config` decides which feature planes are stacked
    under each sample. One checkpoint is kept per completed epoch; if the
    loss ever goes non-finite the run aborts, appends a nan log entry, and
    returns the last checkpoint (the initial weights when epoch 0 fails).
    Identical configs and datasets give bit-identical results.
    """
    if train_set.class_count != spec.class_count:
        raise ValueError(f"dataset has {train_set.class_count} classes, "
                         f"network expects {spec.class_count}")
    run_spec = with_dropout_rate(spec, config.dropout)
    params = init_weights(run_spec, config.seed)
    rng = np.random.default_rng([config.seed, 1])
    x, labels = _stacked_inputs(train_set, config.mode)
    if x.shape[1:] != tuple(run_spec.input_shape):
        raise tc.ShapeError(f"stacked input {x.shape[1:]} does not match "
                            f"network input {tuple(run_spec.input_shape)}")
    if val_set is not None:
        val_x, val_labels = _stacked_inputs(val_set, config.mode)
    log = []
    checkpoint = params.copy()
    lr = config.lr
    for epoch in range(config.epochs):
        order = rng.permutation(len(labels))
        loss_sum = 0.0
        for lo, hi in _batch_ranges(len(labels), config.batch_size):
            batch = order[lo:hi]
            loss, _, grads = loss_and_grads(run_spec, params, x[batch],
                                            labels[batch], rng=rng)
            if not math.isfinite(loss):
                log.append(TrainLogEntry(epoch, float("nan"), float("nan")))
                return checkpoint, log
            if lr > 0:
                tc.sgd_step(params.tensors, grads, lr, config.momentum,
                            params.velocity)
            loss_sum += loss * len(batch)
        train_loss = loss_sum / len(labels)
        if val_set is not None:
            val_top1 = _top1_percent(run_spec, params, val_x, val_labels,
                                     config.batch_size)
        else:
            val_top1 = float("nan")
        log.append(TrainLogEntry(epoch, train_loss, val_top1))
        checkpoint = params.copy()
        lr *= config.lr_decay
    return params, log


# ---------------------------------------------------------------------------
# evaluation

@dataclass(frozen=True)
class EvalReport:
    topk: dict                  # k -> accuracy percent
    mean_loss: float
    sample_count: int
    parameter_count: int
    serialized_bytes: int


def rank_classes(probs):
    """Class indices best-first; equal probabilities keep lower index first."""
    return np.argsort(-probs, axis=1, kind="stable")


def evaluate_topk(spec, params, dataset, ks=(1, 2, 5, 10), mode="original",
                  batch_size=128):
    """Top-k accuracies, mean loss, and size accounting on a dataset."""
    ks = tuple(sorted(set(int(k) for k in ks)))
    for k in ks:
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        if k > spec.class_count:
            warnings.warn(f"top-{k} requested with only {spec.class_count} "
                          f"classes; reporting 100%")
    x, labels = _stacked_inputs(dataset, mode)
    hits = {k: 0 for k in ks}
    loss_sum = 0.0
    for lo, hi in _batch_ranges(len(labels), batch_size):
        probs, _ = forward_net(spec, params, x[lo:hi], mode="infer")
        loss_sum += tc.cross_entropy(probs, labels[lo:hi]) * (hi - lo)
        ranked = rank_classes(probs)
        for k in ks:
            kk = min(k, spec.class_count)
            hits[k] += int((ranked[:, :kk] == labels[lo:hi, None]).any(axis=1).sum())
    n = len(labels)
    topk = {k: 100.0 * hits[k] / n for k in ks}
    size = serialized_size_report(spec)
    return EvalReport(topk, loss_sum / n, n, size.parameter_count,
                      size.projected_bytes)


def report_keyvalues(report):
    lines = [f"top{k}={report.topk[k]:.2f}" for k in sorted(report.topk)]
    lines += [f"mean_loss={report.mean_loss:.6f}",
              f"samples={report.sample_count}",
              f"parameters={report.parameter_count}",
              f"serialized_bytes={report.serialized_bytes}"]
    return "\n".join(lines)


def report_table(report):
    header = " ".join(f"Top{k} (%)" for k in sorted(report.topk))
    values = " ".join(f"{report.topk[k]:8.2f}" for k in sorted(report.topk))
    return (f"{header}\n{values}\n"
            f"samples: {report.sample_count}   "
            f"mean loss: {report.mean_loss:.4f}\n"
            f"parameters: {report.parameter_count:,}   "
            f"size: {report.serialized_bytes / 2 ** 20:.2f} MiB")


# ---------------------------------------------------------------------------
# ensembling

def ensemble_predict(members, images, batch_size=128):
    """Arithmetic mean of member softmax outputs on shared raw images.

    members: sequence of (spec, params, mode) triples; each member stacks
    its own feature planes from the same preprocessed images, so members
    with different input modes can vote together.
    """
    if not members:
        raise ValueError("ensemble needs at least one member")
    class_counts = {m[0].class_count for m in members}
    if len(class_counts) > 1:
        raise ValueError(f"members disagree on class count: "
                         f"{sorted(class_counts)}")
    images = list(images)
    total = None
    for spec, params, mode in members:
        x = stack_batch(images, mode)
        parts = []
        for lo, hi in _batch_ranges(len(images), batch_size):
            probs, _ = forward_net(spec, params, x[lo:hi], mode="infer")
            parts.append(probs)
        member_probs = np.concatenate(parts, axis=0)
        total = member_probs if total is None else total + member_probs
    return total / len(members)


def relative_error_reduction(baseline_acc, new_acc):
    """Percent reduction of the error rate when accuracy moves baseline -> new."""
    for name, value in (("baseline", baseline_acc), ("new", new_acc)):
        if not 0 <= value <= 100:
            raise ValueError(f"{name} accuracy must be in [0, 100], got {value}")
    if baseline_acc == 100:
        raise ValueError("baseline accuracy of 100% leaves no error to reduce")
    baseline_err = 100.0 - baseline_acc
    new_err = 100.0 - new_acc
    return (baseline_err - new_err) / baseline_err * 100.0


# ---------------------------------------------------------------------------
# persistence and size accounting

def save_model(spec, params, path):
    """Write the HCRM container; returns the byte count written."""
    tensors = params.tensors if isinstance(params, ParamStore) else params
    blob = spec_to_bytes(spec)
    out = bytearray()
    out += MODEL_MAGIC
    out += struct.pack("<3I", MODEL_VERSION, spec.class_count, len(blob))
    out += blob
    for name, shape, _ in parameter_entries(spec):
        tensor = tensors[name]
        if tuple(tensor.shape) != shape:
            raise ValueError(f"parameter {name} has shape {tensor.shape}, "
                             f"spec wants {shape}")
        out += np.ascontiguousarray(tensor, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))
    return len(out)


def load_model(path):
    """Read an HCRM container back into (spec, ParamStore)."""
    data = Path(path).read_bytes()
    if data[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}")
    version, class_count, blob_len = struct.unpack_from("<3I", data, 4)
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    offset = 16
    spec = spec_from_bytes(data[offset:offset + blob_len], class_count)
    offset += blob_len
    entries = parameter_entries(spec)
    expected = offset + 4 * sum(int(np.prod(shape)) for _, shape, _ in entries)
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, file has "
                         f"{len(data)}")
    tensors = {}
    for name, shape, _ in entries:
        count = int(np.prod(shape))
        flat = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        tensors[name] = flat.reshape(shape).astype(tc.FLOAT)
        offset += 4 * count
    return spec, ParamStore(tensors)


@dataclass(frozen=True)
class SizeReport:
    parameter_count: int
    projected_bytes: int        # exact save_model output size
    weights_bytes: int          # 4 bytes per parameter
    human: str

    def __str__(self):
        return (f"{self.parameter_count:,} parameters, "
                f"{self.projected_bytes:,} bytes ({self.human})")


def serialized_size_report(spec):
    count = count_parameters(spec)
    header = 16 + len(spec_to_bytes(spec))
    weights = 4 * count
    total = header + weights
    return SizeReport(count, total, weights, f"{total / 2 ** 20:.2f} MiB")

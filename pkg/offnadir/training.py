"""
Training loop, checkpoints and the loss log.
"""
from __future__ import annotations

import dataclasses
import io
import json
import logging
import pathlib
import struct
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from typing import NamedTuple, Optional, Union

import numpy as np

from . import uncertainty
from .data import Manifest, MetaStats, Sample, normalize_metadata
from .defaults import config
from .model import ConfigError, ForwardOutput, ModelConfig, SegmentationModel, build_model
from .optim import AdamState, adam_step, linear_decay
from .tensor import FormatError, NonFiniteError, Rng, decode_ten, encode_ten, no_grad
from .version import __version__

logger = logging.getLogger(__name__)

AnyPath = Union[str, pathlib.Path]

CHECKPOINT_MAGIC = b"UNCKPT1"
CHECKPOINT_FORMAT = 1
LOSS_LOG_NAME = "loss.log"
VAL_LOG_NAME = "val.log"
FINAL_CHECKPOINT = "final.ckpt"
LOSS_LOG_HEADER = "# iteration\tlr\tloss"
VAL_SAMPLES = 32

# Stream keys below the training seed
INIT_STREAM = 0
ITERATION_STREAM = 1
BATCH_STREAM, DROPOUT_STREAM, NOISE_STREAM = 0, 1, 2

RECORD_KINDS = ("param", "buffer", "adam.m", "adam.v")


class TrainingError(RuntimeError):
    """Training cannot continue (for example, the loss became non-finite)."""


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """
    Optimization schedule.

    Attributes
    ----------
    iterations : int
        Total number of updates; the learning rate reaches zero here.
    batch_size : int
        At least two, for batch normalization.
    lr0 : float
    weight_decay : float
        Penalty on convolution and linear weights.
    seed : int
        Seeds initialization, batch sampling, dropout and logit noise.
    checkpoint_every : int
        Write ``checkpoint_<t>.ckpt`` every this many iterations (0: never).
    eval_every : int
        Log the validation loss every this many iterations (0: never).
    log_every : int
    """

    iterations: int = config.getint("desk", "iterations")
    batch_size: int = config.getint("desk", "batch_size")
    lr0: float = config.getfloat("optimizer", "lr0")
    weight_decay: float = config.getfloat("optimizer", "weight_decay")
    seed: int = 0
    checkpoint_every: int = 0
    eval_every: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.iterations <= 0:
            raise ConfigError(f"iterations must be positive, got {self.iterations}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.lr0 < 0 or self.weight_decay < 0:
            raise ConfigError("lr0 and weight_decay must be non-negative")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        for name in ("checkpoint_every", "eval_every", "log_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    def learning_rate(self, iteration: int) -> float:
        return learning_rate(self.lr0, iteration, self.iterations)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping) -> TrainConfig:
        fields = {field.name for field in dataclasses.fields(cls)}
        unknown = set(values) - fields
        if unknown:
            raise ConfigError(f"Unknown training configuration keys: {sorted(unknown)}")
        return cls(**values)


def learning_rate(lr0: float, iteration: int, iterations: int) -> float:
    """Linear decay: ``lr0`` at iteration 0, zero at ``iterations``."""
    if not 0 <= iteration <= iterations:
        raise ValueError(f"iteration {iteration} outside [0, {iterations}]")
    return linear_decay(lr0, iteration, iterations)


class Batch(NamedTuple):
    images: np.ndarray
    metadata: Optional[np.ndarray]
    labels: np.ndarray


@dataclasses.dataclass
class Checkpoint:
    """Everything needed to evaluate a model or resume its training."""

    model: SegmentationModel
    adam: AdamState
    meta_stats: MetaStats
    iteration: int = 0
    train_config: Optional[TrainConfig] = None

    @property
    def model_config(self) -> ModelConfig:
        return self.model.config


class TrainResult(NamedTuple):
    checkpoint: Checkpoint
    losses: list[float]
    checkpoint_path: pathlib.Path


def make_batch(samples: Sequence[Sample], indices: Sequence[int], stats: MetaStats,
               model_config: ModelConfig) -> Batch:
    chosen = [samples[int(index)] for index in indices]
    images = np.stack([sample.image for sample in chosen]).astype(np.float32)
    labels = np.stack([sample.mask for sample in chosen])[:, None].astype(np.float32)
    metadata = None
    if model_config.injection_mode != "none":
        metadata = normalize_metadata(
            np.stack([sample.metadata for sample in chosen]), stats
        )
    return Batch(images, metadata, labels)


def train_step(model: SegmentationModel, state: AdamState, batch: Batch, lr: float,
               weight_decay: float, rng: Rng,
               iteration: int = 0) -> tuple[float, ForwardOutput]:
    """
    One update: forward in batch-norm train mode (dropout sampled when the
    model has dropout), loss for the model's uncertainty mode, backward and
    an Adam step.

    Raises
    ------
    TrainingError
        If the loss or any gradient is non-finite.  Parameters are unchanged.
    """
    params = model.params
    params.zero_grad()
    output = model.forward(
        batch.images,
        batch.metadata,
        rng=rng.spawn(DROPOUT_STREAM),
        dropout_active=model.config.has_dropout,
        bn_mode="train",
    )
    loss = uncertainty.loss_for_mode(
        output, batch.labels, rng.spawn(NOISE_STREAM), model.config.uncertainty_mode
    )
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingError(f"Non-finite loss {value} at iteration {iteration}")
    loss.backward()
    try:
        adam_step(params, params.grads(), state, lr, weight_decay)
    except NonFiniteError as ex:
        raise TrainingError(f"Iteration {iteration}: {ex}") from ex
    return value, output


def _load_split(manifest: Manifest, split: str, size: int, threads: int) -> list[Sample]:
    rows = manifest.rows_for(split)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            return list(executor.map(lambda row: manifest.load(row, size=size), rows))
    return [manifest.load(row, size=size) for row in rows]


def read_loss_log(path: AnyPath) -> list[tuple[int, float, float]]:
    """Parse a loss log into ``(iteration, lr, loss)`` rows."""
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                iteration, lr, loss = line.split("\t")
                rows.append((int(iteration), float(lr), float(loss)))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: malformed loss log row") from None
    return rows


def _open_loss_log(path: pathlib.Path, start: int):
    """Open the loss log for appending, dropping rows from ``start`` on."""
    kept = []
    if start > 0 and path.exists():
        kept = [row for row in read_loss_log(path) if row[0] < start]
    with open(path, "w", encoding="utf-8") as f:
        f.write(LOSS_LOG_HEADER + "\n")
        for iteration, lr, loss in kept:
            f.write(f"{iteration}\t{lr!r}\t{loss!r}\n")
    return open(path, "a", encoding="utf-8")


def validation_loss(model: SegmentationModel, samples: Sequence[Sample], stats: MetaStats) -> float:
    """Mean plain BCE over ``samples`` with dropout off and batch norm in eval mode."""
    losses = []
    for start in range(0, len(samples), 8):
        batch = make_batch(samples, range(start, min(start + 8, len(samples))),
                           stats, model.config)
        with no_grad():
            output = model.forward(batch.images, batch.metadata, bn_mode="eval")
            loss = uncertainty.loss_for_mode(output, batch.labels, None, "none")
        losses.append(loss.item() * len(batch.images))
    return float(sum(losses) / len(samples))


def train(model_config: ModelConfig, train_config: TrainConfig, manifest: Manifest,
          out_dir: AnyPath, resume: Optional[Checkpoint] = None,
          threads: int = 1) -> TrainResult:
    """
    Train a model on the ``train`` split of ``manifest``.

    Each iteration ``t`` draws a batch with replacement, runs
    :func:`train_step` at ``lr0 * (1 - t / iterations)`` and appends
    ``t, lr, loss`` to ``loss.log``.  All randomness of iteration ``t``
    comes from streams keyed by ``(seed, t)``, so resuming from a checkpoint
    reproduces the uninterrupted run.

    Parameters
    ----------
    model_config : ModelConfig
    train_config : TrainConfig
    manifest : Manifest
    out_dir : str or pathlib.Path
        Receives ``loss.log``, periodic checkpoints and ``final.ckpt``.
    resume : Checkpoint, optional
        Continue from this checkpoint (its model configuration must match).
    threads : int, optional
        Threads used to load the dataset.

    Returns
    -------
    TrainResult
    """
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    samples = _load_split(manifest, "train", model_config.input_size, threads)
    if not samples:
        raise ValueError("The manifest has no training samples")
    val_samples = []
    if train_config.eval_every:
        val_samples = _load_split(manifest, "val", model_config.input_size, threads)
        val_samples = val_samples[:VAL_SAMPLES]

    if resume is None:
        model = build_model(model_config, Rng(train_config.seed, (INIT_STREAM,)))
        state = AdamState.for_params(model.params)
        stats = MetaStats.from_manifest(manifest)
        start = 0
    else:
        if resume.model_config != model_config:
            raise ConfigError(
                f"Checkpoint model configuration {resume.model_config} does not "
                f"match {model_config}"
            )
        model, state, stats, start = resume.model, resume.adam, resume.meta_stats, resume.iteration
        if start > train_config.iterations:
            raise ConfigError(
                f"Checkpoint is at iteration {start}, beyond {train_config.iterations}"
            )
        logger.info("Resuming training at iteration %d", start)

    logger.info(
        "Training %s/%s on %d samples: %d iterations, batch %d, %d parameters",
        model_config.uncertainty_mode, model_config.injection_mode, len(samples),
        train_config.iterations, train_config.batch_size, model.params.num_parameters(),
    )

    losses = []
    checkpoint = Checkpoint(model, state, stats, start, train_config)
    with _open_loss_log(out_dir / LOSS_LOG_NAME, start) as log:
        for t in range(start, train_config.iterations):
            rng = Rng(train_config.seed, (ITERATION_STREAM, t))
            indices = rng.spawn(BATCH_STREAM).integers(len(samples), train_config.batch_size)
            batch = make_batch(samples, indices, stats, model_config)
            lr = train_config.learning_rate(t)
            loss, _ = train_step(model, state, batch, lr, train_config.weight_decay,
                                 rng, iteration=t)
            losses.append(loss)
            log.write(f"{t}\t{lr!r}\t{loss!r}\n")

            done = t + 1
            checkpoint.iteration = done
            if train_config.log_every and done % train_config.log_every == 0:
                recent = losses[-train_config.log_every:]
                logger.info("iteration %d lr %.3g loss %.5f", done, lr, float(np.mean(recent)))
            if train_config.checkpoint_every and done % train_config.checkpoint_every == 0:
                log.flush()
                save_checkpoint(out_dir / f"checkpoint_{done}.ckpt", checkpoint)
            if train_config.eval_every and val_samples and done % train_config.eval_every == 0:
                value = validation_loss(model, val_samples, stats)
                logger.info("iteration %d validation loss %.5f", done, value)
                with open(out_dir / VAL_LOG_NAME, "a", encoding="utf-8") as f:
                    f.write(f"{done}\t{value!r}\n")

    final = out_dir / FINAL_CHECKPOINT
    save_checkpoint(final, checkpoint)
    logger.info("Wrote %s", final)
    return TrainResult(checkpoint, losses, final)


def _header(checkpoint: Checkpoint) -> dict:
    state = checkpoint.adam
    return {
        "format": CHECKPOINT_FORMAT,
        "version": str(__version__),
        "model_config": checkpoint.model_config.to_dict(),
        "meta_stats": checkpoint.meta_stats.to_dict(),
        "iteration": checkpoint.iteration,
        "adam": {"step": state.step, "beta1": state.beta1, "beta2": state.beta2,
                 "eps": state.eps},
        "train_config": (
            None if checkpoint.train_config is None else checkpoint.train_config.to_dict()
        ),
    }


def _records(checkpoint: Checkpoint):
    params = checkpoint.model.params
    for name, param in params.items():
        yield f"param:{name}", param.data
    for name, buffer in params.buffers.items():
        yield f"buffer:{name}", buffer
    for name, _ in params.items():
        yield f"adam.m:{name}", checkpoint.adam.first_moment[name]
    for name, _ in params.items():
        yield f"adam.v:{name}", checkpoint.adam.second_moment[name]


def save_checkpoint(path: AnyPath, checkpoint: Checkpoint) -> pathlib.Path:
    """
    Write ``checkpoint`` to ``path``.

    The file is ``UNCKPT1``, a little-endian u32 header length, a UTF-8 JSON
    header, then one record per tensor: u16 name length, the name and a
    ``.ten`` record.  Records follow parameter order, grouped as parameters,
    buffers, Adam first moments and Adam second moments.
    """
    path = pathlib.Path(path)
    buffer = io.BytesIO()
    header = json.dumps(_header(checkpoint), sort_keys=True).encode("utf-8")
    buffer.write(CHECKPOINT_MAGIC)
    buffer.write(struct.pack("<I", len(header)))
    buffer.write(header)
    for name, array in _records(checkpoint):
        encoded = name.encode("utf-8")
        buffer.write(struct.pack("<H", len(encoded)))
        buffer.write(encoded)
        buffer.write(encode_ten(array))
    path.write_bytes(buffer.getvalue())
    logger.debug("Saved checkpoint %s at iteration %d", path, checkpoint.iteration)
    return path


def _parse(data: bytes, path) -> tuple[dict, dict[str, np.ndarray]]:
    if not data.startswith(CHECKPOINT_MAGIC):
        raise FormatError(f"{path}: not a checkpoint (bad magic {data[:7]!r})")
    offset = len(CHECKPOINT_MAGIC)
    try:
        (length,) = struct.unpack_from("<I", data, offset)
        offset += 4
        header = json.loads(data[offset:offset + length].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as ex:
        raise FormatError(f"{path}: corrupt checkpoint header ({ex})") from None
    offset += length
    if header.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: unsupported checkpoint format {header.get('format')!r}")

    records = {}
    while offset < len(data):
        try:
            (name_length,) = struct.unpack_from("<H", data, offset)
        except struct.error:
            raise FormatError(f"{path}: truncated record name") from None
        offset += 2
        name = data[offset:offset + name_length].decode("utf-8", errors="replace")
        offset += name_length
        if name in records:
            raise FormatError(f"{path}: duplicate record {name!r}")
        records[name], offset = decode_ten(data, offset)
    return header, records


def load_checkpoint(path: AnyPath) -> Checkpoint:
    """
    Read a checkpoint written by :func:`save_checkpoint`.

    Every record is checked against the model described by the header
    before any parameter is filled in.

    Raises
    ------
    FormatError
        Bad magic, unsupported format, truncated data, or records that do not
        match the model described by the header.
    """
    data = pathlib.Path(path).read_bytes()
    header, records = _parse(data, path)
    try:
        model_config = ModelConfig.from_dict(header["model_config"])
        meta_stats = MetaStats.from_dict(header["meta_stats"])
        train_config = header.get("train_config")
        train_config = None if train_config is None else TrainConfig.from_dict(train_config)
        iteration = int(header["iteration"])
        adam_header = header["adam"]
        state = AdamState(beta1=float(adam_header["beta1"]), beta2=float(adam_header["beta2"]),
                          eps=float(adam_header["eps"]), step=int(adam_header["step"]))
    except (KeyError, TypeError, ValueError) as ex:
        raise FormatError(f"{path}: invalid checkpoint header ({ex})") from None

    model = build_model(model_config, Rng(0, (INIT_STREAM,)))
    params = model.params
    expected = {
        f"{kind}:{name}": (array.shape, array.dtype)
        for kind in RECORD_KINDS
        for name, array in (
            params.buffers.items() if kind == "buffer"
            else ((n, p.data) for n, p in params.items())
        )
    }
    if set(records) != set(expected):
        missing = sorted(set(expected) - set(records))[:3]
        extra = sorted(set(records) - set(expected))[:3]
        raise FormatError(f"{path}: records do not match the model (missing {missing}, extra {extra})")
    for name, (shape, _) in expected.items():
        if records[name].shape != shape:
            raise FormatError(f"{path}: {name} has shape {records[name].shape}, expected {shape}")

    for name, param in params.items():
        param.data = records[f"param:{name}"].copy()
    for name in params.buffers:
        params.buffers[name] = records[f"buffer:{name}"].copy()
    for name, _ in params.items():
        state.first_moment[name] = records[f"adam.m:{name}"].copy()
        state.second_moment[name] = records[f"adam.v:{name}"].copy()
    logger.debug("Loaded checkpoint %s (iteration %d)", path, iteration)
    return Checkpoint(model, state, meta_stats, iteration, train_config)

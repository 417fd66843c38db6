"""
Losses with Gaussian logit corruption and Monte Carlo dropout inference.
"""
from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import TYPE_CHECKING, Optional

import numpy as np

from . import functional as F
from .defaults import config
from .model import UNCERTAINTY_MODES
from .tensor import Rng, ShapeError, Tensor, no_grad

if TYPE_CHECKING:
    from .model import ForwardOutput, SegmentationModel

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
CORRUPTED_MODES = ("aleatoric", "both")


@dataclasses.dataclass(frozen=True)
class McConfig:
    """
    Monte Carlo inference settings.

    Attributes
    ----------
    num_samples : int
        Number of stochastic forward passes ``T``.
    seed : int
        Sample ``t`` draws its dropout masks from ``Rng(seed, (t,))``.
    threads : int
        Forward passes run concurrently on this many threads.
    """

    num_samples: int = config.getint("desk", "mc_samples")
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValueError(f"num_samples must be >= 1, got {self.num_samples}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")
        if self.threads < 1:
            raise ValueError(f"threads must be >= 1, got {self.threads}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass
class PredictionResult:
    """
    Aggregated Monte Carlo prediction for one image.

    Attributes
    ----------
    mean_prob : np.ndarray
        ``sigmoid(mean logit)``, shape ``[H, W]``.
    epistemic_var : np.ndarray
        Variance of the logit samples, shape ``[H, W]``.
    mean_sigma : np.ndarray or None
        Mean of ``exp(log_var / 2)`` over the samples, when the model has an
        aleatoric head.
    mean_logit : np.ndarray
    samples : np.ndarray or None
        The raw ``[T, H, W]`` logit samples, if retained.
    """

    mean_prob: np.ndarray
    epistemic_var: np.ndarray
    mean_sigma: Optional[np.ndarray]
    mean_logit: np.ndarray
    samples: Optional[np.ndarray] = None

    @property
    def num_samples(self) -> int:
        return 0 if self.samples is None else len(self.samples)

    def maps(self) -> dict[str, np.ndarray]:
        """The exportable maps, keyed by file suffix."""
        maps = {"prob": self.mean_prob, "epistemic": self.epistemic_var}
        if self.mean_sigma is not None:
            maps["aleatoric"] = self.mean_sigma
        return maps


def _check_binary(labels: np.ndarray, what: str = "labels"):
    if not np.all((labels == 0) | (labels == 1)):
        bad = np.unique(labels[(labels != 0) & (labels != 1)])[:5]
        raise ValueError(f"{what} must be binary, found values {bad.tolist()}")


def bce_loss(probs: Tensor, labels) -> Tensor:
    """
    Mean binary cross entropy.

    Probabilities are clamped to ``[1e-7, 1 - 1e-7]`` before taking logs.

    Parameters
    ----------
    probs : Tensor
        Predicted probabilities.
    labels : np.ndarray or Tensor
        Same shape, values in {0, 1}.

    Returns
    -------
    Tensor
        A 0-d tensor.
    """
    labels = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if labels.shape != probs.shape:
        raise ShapeError(f"bce_loss: labels {labels.shape} vs probabilities {probs.shape}")
    _check_binary(labels)
    labels = labels.astype(probs.dtype)

    p = probs.clip(PROB_CLAMP, 1.0 - PROB_CLAMP)
    log_likelihood = p.log() * labels + (1.0 - p).log() * (1.0 - labels)
    return -log_likelihood.mean()


def aleatoric_corrupt(logits: Tensor, log_var: Tensor, rng: Optional[Rng],
                      epsilon: Optional[np.ndarray] = None) -> Tensor:
    """
    Reparameterized Gaussian corruption ``logits + exp(log_var / 2) * eps``.

    Parameters
    ----------
    logits, log_var : Tensor
        Same shape.
    rng : Rng
        Draws one standard-normal ``eps`` per element.
    epsilon : np.ndarray, optional
        Use this ``eps`` instead of drawing (gradient checks).
    """
    if logits.shape != log_var.shape:
        raise ShapeError(f"aleatoric_corrupt: logits {logits.shape} vs log_var {log_var.shape}")
    if epsilon is None:
        if rng is None:
            raise ValueError("aleatoric_corrupt needs an Rng or a fixed epsilon")
        epsilon = rng.normal(logits.shape, dtype=logits.dtype)
    elif epsilon.shape != logits.shape:
        raise ShapeError(f"epsilon shape {epsilon.shape} != {logits.shape}")
    sigma = (log_var * 0.5).exp()
    return logits + sigma * np.asarray(epsilon, dtype=logits.dtype)


def loss_for_mode(output: ForwardOutput, labels, rng: Optional[Rng], mode: str,
                  epsilon: Optional[np.ndarray] = None) -> Tensor:
    """
    Training loss for an uncertainty mode.

    ``none`` and ``epistemic`` use plain BCE on ``sigmoid(logits)``;
    ``aleatoric`` and ``both`` corrupt the logits with one Gaussian draw per
    pixel first.  The weight penalty is applied by the optimizer.
    """
    if mode not in UNCERTAINTY_MODES:
        raise ValueError(f"Unknown uncertainty mode {mode!r}")
    logits = output.logits
    if mode in CORRUPTED_MODES:
        if output.log_var is None:
            raise ValueError(f"Uncertainty mode {mode!r} requires a log-variance head")
        logits = aleatoric_corrupt(logits, output.log_var, rng, epsilon=epsilon)
    return bce_loss(F.sigmoid(logits), labels)


def aggregate_samples(logit_samples: np.ndarray,
                      sigma_samples: Optional[np.ndarray] = None,
                      keep_samples: bool = False) -> PredictionResult:
    """
    Reduce ``[T, H, W]`` logit samples to a :class:`PredictionResult`.

    The mean is taken over logits before the sigmoid.  The variance is the
    population variance over samples, accumulated in float64 in sample order
    and clamped at zero.
    """
    samples = np.asarray(logit_samples, dtype=np.float64)
    if samples.ndim != 3 or not len(samples):
        raise ShapeError(f"Expected [T, H, W] logit samples with T >= 1, got {samples.shape}")
    mean_logit = samples.mean(axis=0)
    variance = np.maximum(((samples - mean_logit) ** 2).mean(axis=0), 0.0)
    mean_sigma = None
    if sigma_samples is not None:
        mean_sigma = np.asarray(sigma_samples, dtype=np.float64).mean(axis=0)
    return PredictionResult(
        mean_prob=F.sigmoid_array(mean_logit),
        epistemic_var=variance,
        mean_sigma=mean_sigma,
        mean_logit=mean_logit,
        samples=np.asarray(logit_samples) if keep_samples else None,
    )


def _single_pass(model: SegmentationModel, image: np.ndarray, metadata: Optional[np.ndarray],
                 rng: Rng, dropout_active: bool) -> tuple[np.ndarray, Optional[np.ndarray]]:
    with no_grad():
        output = model.forward(image, metadata, rng=rng, dropout_active=dropout_active,
                               bn_mode="eval")
    logits = output.logits.data[0, 0]
    sigma = None
    if output.log_var is not None:
        sigma = np.exp(output.log_var.data[0, 0] / 2.0)
    return logits, sigma


def mc_predict(model: SegmentationModel, image, metadata, mc: McConfig,
               dropout_active: Optional[bool] = None,
               keep_samples: bool = False) -> PredictionResult:
    """
    Monte Carlo dropout prediction for a single image.

    Parameters
    ----------
    model : SegmentationModel
    image : np.ndarray
        ``[C, H, W]`` or ``[1, C, H, W]``.
    metadata : np.ndarray or None
        Normalized metadata, ``[metadata_dim]`` or ``[1, metadata_dim]``.
    mc : McConfig
    dropout_active : bool, optional
        Sample dropout masks; defaults to whether the model has dropout.
    keep_samples : bool, optional
        Retain the ``[T, H, W]`` logit samples in the result.

    Returns
    -------
    PredictionResult
    """
    image = np.asarray(image.data if isinstance(image, Tensor) else image)
    if image.ndim == 3:
        image = image[None]
    if image.ndim != 4 or image.shape[0] != 1:
        raise ShapeError(f"mc_predict expects a single image, got shape {image.shape}")
    if metadata is not None:
        metadata = np.asarray(metadata.data if isinstance(metadata, Tensor) else metadata)
        metadata = metadata.reshape(1, -1).astype(image.dtype)

    if dropout_active is None:
        dropout_active = model.config.has_dropout
    stochastic = dropout_active and model.config.has_dropout
    streams = [Rng(mc.seed, (t,)) for t in range(mc.num_samples)]

    if not stochastic:
        logits, sigma = _single_pass(model, image, metadata, streams[0], False)
        results = [(logits, sigma)] * mc.num_samples
    elif mc.threads > 1:
        with ThreadPoolExecutor(max_workers=mc.threads) as executor:
            results = list(
                executor.map(
                    lambda rng: _single_pass(model, image, metadata, rng, True), streams
                )
            )
    else:
        results = [_single_pass(model, image, metadata, rng, True) for rng in streams]

    logit_samples = np.stack([logits for logits, _ in results])
    sigma_samples = None
    if results[0][1] is not None:
        sigma_samples = np.stack([sigma for _, sigma in results])
    logger.debug("MC prediction: T=%d dropout=%s", mc.num_samples, stochastic)
    return aggregate_samples(logit_samples, sigma_samples, keep_samples=keep_samples)

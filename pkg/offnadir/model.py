"""
Residual U-Net for building segmentation with optional uncertainty heads and
metadata injection.

The network is a stride-1 stem plus ``encoder_depth`` residual downsampling
stages, followed by ``encoder_depth + 1`` decoder levels.  Decoder level 1
works on the bottleneck; every later level upsamples the previous level by
two and concatenates the encoder feature of the same resolution.  Metadata
enters either once at the bottleneck (``metacat``) or through an affine
combination module at every decoder level (``metaacm``).
"""
from __future__ import annotations

import dataclasses
import logging
from collections.abc import Iterator, Mapping
from typing import NamedTuple, Optional

import numpy as np

from . import functional as F
from .defaults import config as default_config
from .tensor import Rng, ShapeError, Tensor, concat

logger = logging.getLogger(__name__)

UNCERTAINTY_MODES = ("none", "aleatoric", "epistemic", "both")
INJECTION_MODES = ("none", "metacat", "metaacm")
LOG_VAR_RANGE = (-10.0, 10.0)
LEAKY_SLOPE = 0.2
META_MLP_BLOCKS = 3
DROPOUT_LEVELS = 3
MAX_WIDTH_DOUBLINGS = 2


class ConfigError(ValueError):
    """A model or training configuration is invalid."""


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    """
    Architecture choices.

    Attributes
    ----------
    input_channels : int
        Image channels (RGB-NIR by default).
    base_channels : int
        Width of the stem; encoder stages double it up to four times.
    encoder_depth : int
        Number of stride-2 residual stages.
    dropout_rate : float
        Rate of the decoder dropout layers.
    uncertainty_mode : {'none', 'aleatoric', 'epistemic', 'both'}
    injection_mode : {'none', 'metacat', 'metaacm'}
    metadata_dim : int
        Length of the (normalized) metadata vector.
    input_size : int
        Square input resolution; divisible by ``2 ** encoder_depth``.
    """

    input_channels: int = 4
    base_channels: int = default_config.getint("model", "base_channels")
    encoder_depth: int = default_config.getint("model", "encoder_depth")
    dropout_rate: float = default_config.getfloat("model", "dropout_rate")
    uncertainty_mode: str = "both"
    injection_mode: str = "metacat"
    metadata_dim: int = 2
    input_size: int = 64

    def __post_init__(self):
        if self.uncertainty_mode not in UNCERTAINTY_MODES:
            raise ConfigError(
                f"uncertainty_mode must be one of {UNCERTAINTY_MODES}, "
                f"got {self.uncertainty_mode!r}"
            )
        if self.injection_mode not in INJECTION_MODES:
            raise ConfigError(
                f"injection_mode must be one of {INJECTION_MODES}, "
                f"got {self.injection_mode!r}"
            )
        if self.input_channels < 1 or self.metadata_dim < 1:
            raise ConfigError("input_channels and metadata_dim must be positive")
        if self.base_channels < 4:
            raise ConfigError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.encoder_depth < 1:
            raise ConfigError(f"encoder_depth must be >= 1, got {self.encoder_depth}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        stride = 2**self.encoder_depth
        if self.input_size < stride or self.input_size % stride:
            raise ConfigError(
                f"input_size {self.input_size} is not divisible by "
                f"2**encoder_depth = {stride}"
            )

    @property
    def has_dropout(self) -> bool:
        return self.uncertainty_mode in ("epistemic", "both")

    @property
    def has_aleatoric_head(self) -> bool:
        return self.uncertainty_mode in ("aleatoric", "both")

    @property
    def encoder_channels(self) -> list[int]:
        """Widths of the stem and of each encoder stage, shallow to deep."""
        return [self.base_channels] + [
            self.base_channels * 2 ** min(stage + 1, MAX_WIDTH_DOUBLINGS)
            for stage in range(self.encoder_depth)
        ]

    @property
    def bottleneck_channels(self) -> int:
        return self.encoder_channels[-1]

    @property
    def decoder_levels(self) -> int:
        return self.encoder_depth + 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping) -> ModelConfig:
        fields = {field.name for field in dataclasses.fields(cls)}
        unknown = set(values) - fields
        if unknown:
            raise ConfigError(f"Unknown model configuration keys: {sorted(unknown)}")
        return cls(**values)


class ParameterStore:
    """
    Ordered collection of named learnable tensors plus non-learnable buffers
    (batch-norm running statistics).

    Iteration order is insertion order, which keeps checkpoints and random
    initialization deterministic.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._decay: dict[str, bool] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, data: np.ndarray, decay: bool) -> Tensor:
        if name in self._params or name in self.buffers:
            raise ValueError(f"Duplicate parameter name: {name!r}")
        tensor = Tensor(data, requires_grad=True, name=name)
        self._params[name] = tensor
        self._decay[name] = bool(decay)
        return tensor

    def add_buffer(self, name: str, data: np.ndarray):
        if name in self._params or name in self.buffers:
            raise ValueError(f"Duplicate buffer name: {name!r}")
        self.buffers[name] = data

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"No parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def __repr__(self):
        return (
            f"<ParameterStore tensors={len(self)} "
            f"values={self.num_parameters()} buffers={len(self.buffers)}>"
        )

    def items(self):
        return self._params.items()

    def decays(self, name: str) -> bool:
        return self._decay[name]

    def num_parameters(self) -> int:
        return sum(param.size for param in self._params.values())

    def zero_grad(self):
        for param in self._params.values():
            param.zero_grad()

    def grads(self) -> dict[str, Optional[np.ndarray]]:
        return {name: param.grad for name, param in self._params.items()}

    def astype(self, dtype) -> ParameterStore:
        """A deep copy with every tensor and buffer cast to ``dtype``."""
        store = ParameterStore()
        for name, param in self._params.items():
            store.add(name, param.data.astype(dtype), self._decay[name])
        for name, buffer in self.buffers.items():
            store.add_buffer(name, buffer.astype(dtype))
        return store

    def copy(self) -> ParameterStore:
        store = ParameterStore()
        for name, param in self._params.items():
            store.add(name, param.data.copy(), self._decay[name])
        for name, buffer in self.buffers.items():
            store.add_buffer(name, buffer.copy())
        return store


@dataclasses.dataclass(frozen=True)
class LayerSpec:
    """Shape description of one parameterized layer."""

    name: str
    kind: str
    in_channels: int
    out_channels: int
    kernel: int = 1
    stride: int = 1
    padding: int = 0

    @property
    def num_parameters(self) -> int:
        if self.kind == "conv":
            return self.out_channels * (self.in_channels * self.kernel**2 + 1)
        if self.kind == "linear":
            return self.out_channels * (self.in_channels + 1)
        if self.kind == "batch_norm":
            return 2 * self.out_channels
        raise ValueError(f"Unknown layer kind {self.kind!r}")


@dataclasses.dataclass(frozen=True)
class DecoderLevel:
    """One decoder level; ``index`` counts from 1 at the bottleneck."""

    index: int
    resolution: int
    in_channels: int
    out_channels: int
    encoder_channels: int
    upsample: bool
    has_dropout: bool


@dataclasses.dataclass
class ModelGraph:
    """The built architecture: layer shapes and decoder wiring."""

    config: ModelConfig
    layers: dict[str, LayerSpec] = dataclasses.field(default_factory=dict)
    decoder: list[DecoderLevel] = dataclasses.field(default_factory=list)

    @property
    def dropout_levels(self) -> list[int]:
        return [level.index for level in self.decoder if level.has_dropout]

    def num_parameters(self) -> int:
        return sum(layer.num_parameters for layer in self.layers.values())


class ForwardOutput(NamedTuple):
    """
    Network outputs.

    Attributes
    ----------
    logits : Tensor
        Pre-sigmoid scores, ``[N, 1, H, W]``.
    log_var : Tensor or None
        Predicted ``log(sigma**2)`` clamped to ``LOG_VAR_RANGE``; present
        when the configuration has an aleatoric head.
    acm_products : list of Tensor or None
        ``h * W(v)`` per decoder level, coarse to fine (``metaacm`` only).
    dropout_layers : int
        Number of dropout layers that sampled a mask in this pass.
    activations : dict or None
        Named intermediate tensors, when requested.
    """

    logits: Tensor
    log_var: Optional[Tensor] = None
    acm_products: Optional[list[Tensor]] = None
    dropout_layers: int = 0
    activations: Optional[dict[str, Tensor]] = None


class LayerBuilder:
    """
    Registers layers into a :class:`ParameterStore` with seeded He-normal
    weights (zero biases, unit batch-norm scale).
    """

    def __init__(self, params: ParameterStore, rng: Rng, graph: Optional[ModelGraph] = None):
        self.params = params
        self.rng = rng
        self.layers = graph.layers if graph is not None else {}

    def _he_normal(self, shape, fan_in: int) -> np.ndarray:
        return self.rng.normal(shape, dtype=np.float32) * np.float32(np.sqrt(2.0 / fan_in))

    def conv(self, name: str, in_channels: int, out_channels: int, kernel: int,
             stride: int = 1, padding: Optional[int] = None) -> LayerSpec:
        padding = kernel // 2 if padding is None else padding
        shape = (out_channels, in_channels, kernel, kernel)
        self.params.add(f"{name}.weight", self._he_normal(shape, in_channels * kernel**2), True)
        self.params.add(f"{name}.bias", np.zeros(out_channels, dtype=np.float32), False)
        spec = LayerSpec(name, "conv", in_channels, out_channels, kernel, stride, padding)
        self.layers[name] = spec
        return spec

    def linear(self, name: str, in_features: int, out_features: int) -> LayerSpec:
        shape = (out_features, in_features)
        self.params.add(f"{name}.weight", self._he_normal(shape, in_features), True)
        self.params.add(f"{name}.bias", np.zeros(out_features, dtype=np.float32), False)
        spec = LayerSpec(name, "linear", in_features, out_features)
        self.layers[name] = spec
        return spec

    def batch_norm(self, name: str, channels: int) -> LayerSpec:
        self.params.add(f"{name}.gamma", np.ones(channels, dtype=np.float32), False)
        self.params.add(f"{name}.beta", np.zeros(channels, dtype=np.float32), False)
        self.params.add_buffer(f"{name}.running_mean", np.zeros(channels, dtype=np.float32))
        self.params.add_buffer(f"{name}.running_var", np.ones(channels, dtype=np.float32))
        spec = LayerSpec(name, "batch_norm", channels, channels)
        self.layers[name] = spec
        return spec

    def meta_mlp(self, metadata_dim: int, width: int, prefix: str = "meta_mlp"):
        in_features = metadata_dim
        for block in range(META_MLP_BLOCKS):
            self.linear(f"{prefix}.{block}", in_features, width)
            in_features = width

    def acm(self, prefix: str, v_channels: int, h_channels: int):
        self.conv(f"{prefix}.w_conv", v_channels, v_channels, 3)
        self.conv(f"{prefix}.b_conv", v_channels, v_channels, 3)
        if h_channels != v_channels:
            self.conv(f"{prefix}.adapter", h_channels, v_channels, 1)


class SegmentationModel(NamedTuple):
    """A built network: ``params, graph = model`` unpacks it."""

    params: ParameterStore
    graph: ModelGraph

    @property
    def config(self) -> ModelConfig:
        return self.graph.config

    def forward(self, image, metadata=None, rng: Optional[Rng] = None,
                dropout_active: bool = False, bn_mode: str = "eval",
                record_activations: bool = False) -> ForwardOutput:
        return forward(self, image, metadata, rng, dropout_active, bn_mode,
                       record_activations=record_activations)

    def astype(self, dtype) -> SegmentationModel:
        return SegmentationModel(self.params.astype(dtype), self.graph)


def build_model(config: ModelConfig, rng: Rng) -> SegmentationModel:
    """
    Construct parameters and wiring for ``config``.

    Parameters
    ----------
    config : ModelConfig
    rng : Rng
        Seeds the He-normal weight initialization.

    Returns
    -------
    SegmentationModel
        Unpacks as ``(ParameterStore, ModelGraph)``.
    """
    if not isinstance(config, ModelConfig):
        raise ConfigError(f"Expected a ModelConfig, got {type(config).__name__}")

    params = ParameterStore()
    graph = ModelGraph(config)
    builder = LayerBuilder(params, rng, graph)
    widths = config.encoder_channels
    base = config.base_channels

    builder.conv("stem.conv", config.input_channels, base, 3)
    builder.batch_norm("stem.bn", base)
    for stage in range(1, config.encoder_depth + 1):
        in_ch, out_ch = widths[stage - 1], widths[stage]
        builder.conv(f"encoder.{stage}.conv1", in_ch, out_ch, 4, stride=2, padding=1)
        builder.batch_norm(f"encoder.{stage}.bn1", out_ch)
        builder.conv(f"encoder.{stage}.conv2", out_ch, out_ch, 3)
        builder.batch_norm(f"encoder.{stage}.bn2", out_ch)
        builder.conv(f"encoder.{stage}.skip", in_ch, out_ch, 2, stride=2, padding=0)
        builder.batch_norm(f"encoder.{stage}.skip_bn", out_ch)

    bottleneck = config.bottleneck_channels
    if config.injection_mode != "none":
        builder.meta_mlp(config.metadata_dim, bottleneck)
    if config.injection_mode == "metacat":
        builder.conv("metacat.proj", 2 * bottleneck, bottleneck, 1)

    levels = config.decoder_levels
    previous = None
    for index in range(1, levels + 1):
        encoder_ch = widths[levels - index]
        resolution = config.input_size // 2 ** (levels - index)
        in_ch = encoder_ch if previous is None else previous + encoder_ch
        if config.injection_mode == "metaacm":
            h_ch = bottleneck if previous is None else previous
            builder.acm(f"acm.{index}", encoder_ch, h_ch)
        builder.conv(f"decoder.{index}.conv", in_ch, encoder_ch, 3)
        builder.batch_norm(f"decoder.{index}.bn", encoder_ch)
        graph.decoder.append(
            DecoderLevel(
                index=index,
                resolution=resolution,
                in_channels=in_ch,
                out_channels=encoder_ch,
                encoder_channels=encoder_ch,
                upsample=previous is not None,
                has_dropout=config.has_dropout and index <= DROPOUT_LEVELS,
            )
        )
        previous = encoder_ch

    builder.conv("head.logits", previous, 1, 3)
    if config.has_aleatoric_head:
        builder.conv("head.log_var", previous, 1, 3)

    logger.debug(
        "Built model: %d tensors, %d values (%s / %s)",
        len(params), params.num_parameters(),
        config.uncertainty_mode, config.injection_mode,
    )
    return SegmentationModel(params, graph)


def _conv(params: ParameterStore, name: str, x: Tensor, stride: int = 1,
          padding: Optional[int] = None) -> Tensor:
    weight = params[f"{name}.weight"]
    if padding is None:
        padding = weight.shape[-1] // 2
    return F.conv2d(x, weight, params[f"{name}.bias"], stride=stride, padding=padding)


def _conv_layer(params: ParameterStore, graph: ModelGraph, name: str, x: Tensor) -> Tensor:
    spec = graph.layers[name]
    return _conv(params, name, x, stride=spec.stride, padding=spec.padding)


def _bn(params: ParameterStore, name: str, x: Tensor, bn_mode: str) -> Tensor:
    return F.batch_norm(
        x,
        params[f"{name}.gamma"],
        params[f"{name}.beta"],
        params.buffers[f"{name}.running_mean"],
        params.buffers[f"{name}.running_var"],
        mode=bn_mode,
    )


def meta_mlp(metadata_vec: Tensor, params: ParameterStore, prefix: str = "meta_mlp") -> Tensor:
    """
    Encode ``[N, metadata_dim]`` metadata into ``[N, D]`` features with three
    linear + leaky-ReLU(0.2) blocks.
    """
    x = metadata_vec
    for block in range(META_MLP_BLOCKS):
        name = f"{prefix}.{block}"
        x = F.leaky_relu(
            F.linear(x, params[f"{name}.weight"], params[f"{name}.bias"]), LEAKY_SLOPE
        )
    return x


def metacat_inject(image_feats: Tensor, meta_feats: Tensor, params: ParameterStore,
                   prefix: str = "metacat.proj") -> Tensor:
    """
    Repeat metadata features over space, concatenate them to the image
    features and project ``2D -> D`` channels with a 1x1 convolution.
    """
    if image_feats.ndim != 4 or meta_feats.ndim != 2:
        raise ShapeError(
            f"metacat expects [N, D, h, w] and [N, D], got "
            f"{image_feats.shape} and {meta_feats.shape}"
        )
    n, depth, height, width = image_feats.shape
    if meta_feats.shape != (n, depth):
        raise ShapeError(
            f"metacat: metadata features {meta_feats.shape} do not match "
            f"image features {image_feats.shape}"
        )
    repeated = F.repeat_spatial(meta_feats, height, width)
    return _conv(params, prefix, concat([image_feats, repeated], axis=1), padding=0)


def acm_inject(v: Tensor, h_feats: Tensor, params: ParameterStore,
               prefix: str = "acm.1") -> tuple[Tensor, Tensor]:
    """
    Affine combination ``v' = h * W(v) + b(v)``.

    ``W`` and ``b`` are 3x3 same-padding convolutions; ``h_feats`` goes
    through a 1x1 adapter convolution first when its width differs from
    ``v``.

    Returns
    -------
    v_prime : Tensor
    product : Tensor
        The metadata-relevant term ``h * W(v)``.
    """
    if v.ndim != 4 or h_feats.ndim != 4:
        raise ShapeError(f"acm expects 4D inputs, got {v.shape} and {h_feats.shape}")
    if v.shape[0] != h_feats.shape[0] or v.shape[2:] != h_feats.shape[2:]:
        raise ShapeError(
            f"acm: spatial mismatch between v {v.shape} and h {h_feats.shape}"
        )
    if f"{prefix}.adapter.weight" in params:
        h_feats = _conv(params, f"{prefix}.adapter", h_feats, padding=0)
    product = h_feats * _conv(params, f"{prefix}.w_conv", v)
    return product + _conv(params, f"{prefix}.b_conv", v), product


def _dropout(level: DecoderLevel, x: Tensor, rate: float, rng: Optional[Rng],
             dropout_active: bool) -> tuple[Tensor, int]:
    if not level.has_dropout:
        return x, 0
    out = F.dropout(x, rate, rng, dropout_active)
    return out, int(out is not x)


def _encode(model: SegmentationModel, image: Tensor, bn_mode: str,
            activations: Optional[dict]) -> list[Tensor]:
    params, graph = model
    x = F.relu(_bn(params, "stem.bn", _conv_layer(params, graph, "stem.conv", image), bn_mode))
    features = [x]
    for stage in range(1, graph.config.encoder_depth + 1):
        prefix = f"encoder.{stage}"
        y = _conv_layer(params, graph, f"{prefix}.conv1", x)
        y = F.relu(_bn(params, f"{prefix}.bn1", y, bn_mode))
        y = _bn(params, f"{prefix}.bn2", _conv_layer(params, graph, f"{prefix}.conv2", y), bn_mode)
        skip = _bn(params, f"{prefix}.skip_bn",
                   _conv_layer(params, graph, f"{prefix}.skip", x), bn_mode)
        x = F.relu(y + skip)
        features.append(x)
    if activations is not None:
        for depth, feature in enumerate(features):
            activations[f"encoder.{depth}"] = feature
    return features


def _decode(model: SegmentationModel, features: list[Tensor], meta_feats: Optional[Tensor],
            rng: Optional[Rng], dropout_active: bool, bn_mode: str,
            activations: Optional[dict]) -> tuple[Tensor, Optional[list[Tensor]], int]:
    params, graph = model
    config = graph.config
    products = [] if config.injection_mode == "metaacm" else None
    dropout_layers = 0
    previous = None
    for level in graph.decoder:
        v = features[config.decoder_levels - level.index]
        up = F.bilinear_upsample(previous, 2) if level.upsample else None

        if config.injection_mode == "metacat" and level.index == 1:
            v = metacat_inject(v, meta_feats, params)
        elif config.injection_mode == "metaacm":
            if up is None:
                h = F.repeat_spatial(meta_feats, v.shape[2], v.shape[3])
            else:
                h = up
            if activations is not None:
                activations[f"acm.{level.index}.h"] = h
            v, product = acm_inject(v, h, params, prefix=f"acm.{level.index}")
            products.append(product)

        x = v if up is None else concat([up, v], axis=1)
        x, sampled = _dropout(level, x, config.dropout_rate, rng, dropout_active)
        dropout_layers += sampled
        x = _conv_layer(params, graph, f"decoder.{level.index}.conv", x)
        previous = F.relu(_bn(params, f"decoder.{level.index}.bn", x, bn_mode))
        if activations is not None:
            activations[f"decoder.{level.index}"] = previous
    return previous, products, dropout_layers


def _head(model: SegmentationModel, last: Tensor) -> tuple[Tensor, Optional[Tensor]]:
    params, graph = model
    logits = _conv_layer(params, graph, "head.logits", last)
    log_var = None
    if graph.config.has_aleatoric_head:
        log_var = _conv_layer(params, graph, "head.log_var", last).clip(*LOG_VAR_RANGE)
    return logits, log_var


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_inputs(config: ModelConfig, image: Tensor, metadata: Optional[Tensor]):
    expected = (config.input_channels, config.input_size, config.input_size)
    if image.ndim != 4 or image.shape[1:] != expected:
        raise ShapeError(f"Expected image of shape [N, {', '.join(map(str, expected))}], "
                         f"got {image.shape}")
    if config.injection_mode == "none":
        return
    if metadata is None:
        raise ValueError(
            f"Metadata is required for injection_mode={config.injection_mode!r}"
        )
    if metadata.shape != (image.shape[0], config.metadata_dim):
        raise ShapeError(
            f"Expected metadata of shape [{image.shape[0]}, {config.metadata_dim}], "
            f"got {metadata.shape}"
        )


def forward(model: SegmentationModel, image, metadata=None, rng: Optional[Rng] = None,
            dropout_active: bool = False, bn_mode: str = "eval",
            record_activations: bool = False) -> ForwardOutput:
    """
    Run the network.

    Parameters
    ----------
    model : SegmentationModel
    image : Tensor or np.ndarray
        ``[N, C, H, W]`` at ``config.input_size``.
    metadata : Tensor or np.ndarray, optional
        ``[N, metadata_dim]`` normalized metadata; required unless
        ``injection_mode`` is ``none``, and ignored in that case.
    rng : Rng, optional
        Source of dropout masks; consumed in layer order.
    dropout_active : bool
        Sample dropout masks (only where the graph has dropout layers).
    bn_mode : {'train', 'eval'}
    record_activations : bool
        Return named intermediate tensors in ``ForwardOutput.activations``.
    """
    config = model.config
    image = _as_tensor(image)
    metadata = None if metadata is None else _as_tensor(metadata)
    _check_inputs(config, image, metadata)

    activations = {} if record_activations else None
    features = _encode(model, image, bn_mode, activations)
    meta_feats = None
    if config.injection_mode != "none":
        meta_feats = meta_mlp(metadata, model.params)
        if activations is not None:
            activations["meta_mlp"] = meta_feats
    last, products, dropout_layers = _decode(
        model, features, meta_feats, rng, dropout_active, bn_mode, activations
    )
    logits, log_var = _head(model, last)
    return ForwardOutput(logits, log_var, products, dropout_layers, activations)


def metaacm_decode(model: SegmentationModel, encoder_feats: list[Tensor], meta_feats: Tensor,
                   rng: Optional[Rng] = None, dropout_active: bool = False,
                   bn_mode: str = "eval") -> ForwardOutput:
    """
    Decode encoder features with one ACM per decoder level.

    Parameters
    ----------
    encoder_feats : list of Tensor
        Stem output followed by every encoder stage output (shallow to deep).
    meta_feats : Tensor
        ``[N, D]`` output of :func:`meta_mlp`.
    """
    if model.config.injection_mode != "metaacm":
        raise ConfigError(
            f"metaacm_decode needs injection_mode='metaacm', "
            f"got {model.config.injection_mode!r}"
        )
    if meta_feats is None:
        raise ValueError("metaacm_decode requires metadata features")
    if len(encoder_feats) != model.config.decoder_levels:
        raise ShapeError(
            f"Expected {model.config.decoder_levels} encoder features, "
            f"got {len(encoder_feats)}"
        )
    last, products, dropout_layers = _decode(
        model, list(encoder_feats), meta_feats, rng, dropout_active, bn_mode, None
    )
    logits, log_var = _head(model, last)
    return ForwardOutput(logits, log_var, products, dropout_layers, None)


def encode(model: SegmentationModel, image, bn_mode: str = "eval") -> list[Tensor]:
    """Encoder features (stem first, bottleneck last)."""
    return _encode(model, _as_tensor(image), bn_mode, None)

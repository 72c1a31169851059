"""Generator and K+1-class fully-convolutional discriminator."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import BatchNorm2d, Conv2d, ConvTranspose2d, Module


class ConfigError(ValueError):
    pass


SEED_SIDE = 4

GENERATOR_PRESETS = {
    "paper": (769, 384, 256, 192, 3),
    "desk": (256, 128, 64, 32, 3),
    "tiny": (64, 32, 16, 8, 3),
}

ENCODER_PRESETS = {
    "desk": (32, 64, 128, 256),
    "tiny": (16, 32, 48, 64),
}


@dataclass
class GeneratorConfig:
    noise_dim: int = 100
    class_dim: int = 0
    feature_maps: Tuple[int, ...] = GENERATOR_PRESETS["desk"]
    output_channels: int = 3
    output_size: int = 32

    def __post_init__(self):
        self.feature_maps = tuple(int(f) for f in self.feature_maps)
        if self.noise_dim < 1:
            raise ConfigError(f"noise_dim must be >= 1, got {self.noise_dim}")
        if self.class_dim < 0:
            raise ConfigError(f"class_dim must be >= 0, got {self.class_dim}")
        if not self.feature_maps:
            raise ConfigError("feature_maps must be non-empty")
        if self.feature_maps[-1] != self.output_channels:
            raise ConfigError(f"last feature map count {self.feature_maps[-1]} != output_channels {self.output_channels}")
        ratio = self.output_size // SEED_SIDE
        if self.output_size % SEED_SIDE or ratio & (ratio - 1):
            raise ConfigError(f"output_size {self.output_size} must be {SEED_SIDE} times a power of two")
        if self.num_upsampling > len(self.feature_maps) - 1:
            raise ConfigError(f"output_size {self.output_size} needs {self.num_upsampling} stride-2 layers "
                              f"but feature_maps {self.feature_maps} allows {len(self.feature_maps) - 1}")

    @property
    def num_upsampling(self) -> int:
        return int(np.log2(self.output_size // SEED_SIDE))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["feature_maps"] = list(self.feature_maps)
        return d


@dataclass
class DiscriminatorConfig:
    num_classes: int = 4
    encoder_channels: Tuple[int, ...] = ENCODER_PRESETS["desk"]
    # first block is stride 1 (3x3); the rest are stride 2 (4x4) unless overridden
    encoder_strides: Optional[Tuple[int, ...]] = None
    decoder_deconv_layers: int = 3
    input_size: int = 32
    input_channels: int = 3
    leaky_slope: float = 0.2
    batchnorm: bool = False

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        if self.encoder_strides is None:
            self.encoder_strides = (1,) + (2,) * (len(self.encoder_channels) - 1)
        self.encoder_strides = tuple(int(s) for s in self.encoder_strides)
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if len(self.encoder_channels) < 2:
            raise ConfigError("encoder needs at least two blocks")
        if len(self.encoder_strides) != len(self.encoder_channels) or set(self.encoder_strides) - {1, 2}:
            raise ConfigError(f"encoder_strides must be 1s and 2s, one per block, got {self.encoder_strides}")
        if self.input_size % self.downsampling:
            raise ConfigError(f"input_size {self.input_size} not divisible by encoder stride {self.downsampling}")
        if self.num_down == 0 or self.decoder_deconv_layers not in (1, self.num_down):
            raise ConfigError(f"decoder_deconv_layers must be 1 or {self.num_down}, "
                              f"got {self.decoder_deconv_layers}")

    @property
    def num_down(self) -> int:
        return sum(1 for s in self.encoder_strides if s == 2)

    @property
    def downsampling(self) -> int:
        return 2 ** self.num_down

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["encoder_strides"] = list(self.encoder_strides)
        return d


@dataclass
class ConfidenceMap:
    """Discriminator output. Channel ``K`` (the last) is the fake class."""

    logits: Tensor
    probs: Tensor = field(init=False)

    def __post_init__(self):
        self.probs = ad.softmax_channels(self.logits)

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1] - 1


class Generator(Module):
    """Noise (optionally concatenated with a multi-hot class vector) to an image in [-1, 1].

    A stride-1 4x4 transposed convolution expands the 1x1 input to the
    4x4 seed; stride-2 layers double the side until ``output_size``; any
    remaining layers are stride-1 3x3.
    """

    def __init__(self, config: GeneratorConfig):
        self.config = config
        fm = config.feature_maps
        layers = [ConvTranspose2d(config.noise_dim + config.class_dim, fm[0], 4, 1, 0)]
        for i in range(1, len(fm)):
            if i <= config.num_upsampling:
                layers.append(ConvTranspose2d(fm[i - 1], fm[i], 4, 2, 1))
            else:
                layers.append(ConvTranspose2d(fm[i - 1], fm[i], 3, 1, 1))
        self.layers = layers
        self.norms = [BatchNorm2d(c) for c in fm[:-1]]

    def forward(self, noise, class_onehot=None) -> Tensor:
        cfg = self.config
        noise = ad.as_tensor(noise)
        if noise.ndim != 2 or noise.shape[1] != cfg.noise_dim:
            raise ShapeError(f"noise must be (N, {cfg.noise_dim}), got {noise.shape}")
        if cfg.class_dim and class_onehot is None:
            raise ConfigError("conditional generator needs a class vector")
        if not cfg.class_dim and class_onehot is not None:
            raise ConfigError("unconditional generator got a class vector")
        h = noise
        if class_onehot is not None:
            class_onehot = ad.as_tensor(class_onehot)
            if class_onehot.shape != (noise.shape[0], cfg.class_dim):
                raise ShapeError(f"class vector must be ({noise.shape[0]}, {cfg.class_dim}), got {class_onehot.shape}")
            h = ad.concat([noise, Tensor(class_onehot.data, dtype=noise.dtype)], axis=1)
        h = ad.reshape(h, (h.shape[0], h.shape[1], 1, 1))
        for layer, norm in zip(self.layers[:-1], self.norms):
            h = ad.relu(norm(layer(h)))
        return ad.tanh(self.layers[-1](h))


class Discriminator(Module):
    """Fully-convolutional pixel classifier emitting K+1 logit maps at input resolution.

    Encoder: 3x3 stride-1 and 4x4 stride-2 blocks (by default one stride-1
    block followed by stride-2 blocks). Decoder:
    either mirrored stride-2 transposed convolutions or a single transposed
    convolution covering the whole stride, followed by a 1x1 classifier.
    """

    def __init__(self, config: DiscriminatorConfig):
        self.config = config
        ch = config.encoder_channels
        enc, prev = [], config.input_channels
        for c, stride in zip(ch, config.encoder_strides):
            enc.append(Conv2d(prev, c, 4, 2, 1) if stride == 2 else Conv2d(prev, c, 3, 1, 1))
            prev = c
        self.encoder = enc
        # decoder widths mirror the encoder outputs that precede each downsampling
        down_in = [ch[i - 1] if i else ch[0] for i, s in enumerate(config.encoder_strides) if s == 2]
        if config.decoder_deconv_layers == 1:
            s = config.downsampling
            self.decoder = [ConvTranspose2d(ch[-1], down_in[0], 2 * s, s, s // 2)]
        else:
            widths = [ch[-1]] + down_in[::-1]
            self.decoder = [ConvTranspose2d(widths[i], widths[i + 1], 4, 2, 1) for i in range(len(widths) - 1)]
        self.classifier = Conv2d(down_in[0], config.num_classes + 1, 1, 1, 0)
        self.norms = []
        if config.batchnorm:
            self.norms = [BatchNorm2d(layer.weight.shape[0]) for layer in enc[1:]]
            self.norms += [BatchNorm2d(layer.weight.shape[1]) for layer in self.decoder]

    def forward(self, image) -> Tensor:
        cfg = self.config
        image = ad.as_tensor(image)
        expected = (cfg.input_channels, cfg.input_size, cfg.input_size)
        if image.ndim != 4 or image.shape[1:] != expected:
            raise ShapeError(f"discriminator expects (N, {', '.join(map(str, expected))}), got {image.shape}")
        h = image
        slope = cfg.leaky_slope
        layers = self.encoder + self.decoder
        # the first block stays unnormalized
        norms = [None] + self.norms if self.norms else [None] * len(layers)
        for layer, norm in zip(layers, norms):
            h = layer(h)
            if norm is not None:
                h = norm(h)
            h = ad.leaky_relu(h, slope)
        return self.classifier(h)


def generator_forward(g: Generator, noise, class_onehot=None) -> Tensor:
    return g(noise, class_onehot)


def discriminator_forward(d: Discriminator, image) -> ConfidenceMap:
    return ConfidenceMap(d(image))


def init_weights(net: Module, rng_seed: int, std: float = 0.02) -> None:
    """Isotropic Gaussian init: conv weights ~ N(0, std^2), biases 0, BN gamma ~ N(1, std^2), beta 0."""
    rng = np.random.default_rng(rng_seed)
    for _, m in net.named_modules():
        if isinstance(m, (Conv2d, ConvTranspose2d)):
            w = m.weight.data
            w[...] = rng.normal(0.0, std, size=w.shape)
            if m.bias is not None:
                m.bias.data[...] = 0
        elif isinstance(m, BatchNorm2d):
            m.gamma.data[...] = rng.normal(1.0, std, size=m.gamma.shape)
            m.beta.data[...] = 0
            m._buffers["running_mean"][...] = 0
            m._buffers["running_var"][...] = 1


def predict_labels(d: Discriminator, image, batch_size: int = 64) -> np.ndarray:
    """Per-pixel argmax over the K real classes; the fake channel never wins."""
    image = image.data if isinstance(image, Tensor) else np.asarray(image)
    k = d.config.num_classes
    was_training = d.training
    d.eval()
    out = []
    with ad.no_grad():
        for start in range(0, len(image), batch_size):
            logits = d(Tensor(image[start:start + batch_size])).data
            # np.argmax returns the first maximal index, so ties go to the lowest class
            out.append(np.argmax(logits[:, :k], axis=1))
    d.train(was_training)
    return np.concatenate(out).astype(np.int64)


def labels_from_probs(probs: np.ndarray, num_classes: int) -> np.ndarray:
    return np.argmax(np.asarray(probs)[:, :num_classes], axis=1)

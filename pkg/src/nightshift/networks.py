"""ResNet-style generator and PatchGAN discriminator at desk scale.

Both networks are parameter dicts plus a forward method on the tape. The
generator eats the night image concatenated with its invariant features
(6 channels) and emits a tanh image in (-1, 1); the (x+1)/2 remap to [0, 1]
belongs to the pipeline boundary, not here. Dropping the invariant input
yields the 3-channel variant used by the corresponding ablation.
"""

from __future__ import annotations

import numpy as np

from . import color
from . import tensor as T

NORM_EPSILON = 1e-5
INIT_STD = 0.02
DEFAULT_RES_BLOCKS = 4


def instance_norm(x: T.Tensor, gamma: T.Tensor, beta: T.Tensor, eps: float = NORM_EPSILON) -> T.Tensor:
    """Per-sample, per-channel normalization with a learned affine.

    Composed from primitive ops, so gradients flow through the statistics.
    """
    mu = T.spatial_mean(x)
    centered = T.sub(x, mu)
    var = T.spatial_mean(T.mul(centered, centered))
    std = T.sqrt(T.add(var, eps))
    return T.add(T.mul(T.div(centered, std, eps=0.0), gamma), beta)


def _conv_weight(rng: np.random.Generator, out_ch: int, in_ch: int, k: int) -> T.Tensor:
    return T.Tensor(rng.normal(0.0, INIT_STD, (out_ch, in_ch, k, k)).astype(np.float32), requires_grad=True)


def _zero_bias(out_ch: int) -> T.Tensor:
    return T.Tensor(np.zeros((1, out_ch, 1, 1), np.float32), requires_grad=True)


def _norm_params(ch: int) -> tuple[T.Tensor, T.Tensor]:
    gamma = T.Tensor(np.ones((1, ch, 1, 1), np.float32), requires_grad=True)
    beta = T.Tensor(np.zeros((1, ch, 1, 1), np.float32), requires_grad=True)
    return gamma, beta


def _add_block(params: dict[str, T.Tensor], rng, name: str, in_ch: int, out_ch: int, k: int, norm: bool) -> None:
    params[f"{name}.weight"] = _conv_weight(rng, out_ch, in_ch, k)
    params[f"{name}.bias"] = _zero_bias(out_ch)
    if norm:
        params[f"{name}.norm.gamma"], params[f"{name}.norm.beta"] = _norm_params(out_ch)


class Generator:
    """stem 7x7 -> two stride-2 downs -> residual trunk -> two up2 stages -> tanh."""

    def __init__(self, seed: int = 0, in_channels: int = 6, res_blocks: int = DEFAULT_RES_BLOCKS):
        if in_channels not in (3, 6):
            raise ValueError(f"generator takes 3 or 6 input channels, got {in_channels}")
        if res_blocks < 0:
            raise ValueError(f"residual block count must be >= 0, got {res_blocks}")
        self.in_channels = in_channels
        self.res_blocks = res_blocks
        self.seed = seed
        rng = np.random.default_rng([seed, 0])
        p: dict[str, T.Tensor] = {}
        _add_block(p, rng, "stem", in_channels, 32, 7, norm=True)
        _add_block(p, rng, "down1", 32, 64, 3, norm=True)
        _add_block(p, rng, "down2", 64, 128, 3, norm=True)
        for i in range(1, res_blocks + 1):
            _add_block(p, rng, f"res{i}.conv1", 128, 128, 3, norm=False)
            p[f"res{i}.norm1.gamma"], p[f"res{i}.norm1.beta"] = _norm_params(128)
            _add_block(p, rng, f"res{i}.conv2", 128, 128, 3, norm=False)
            p[f"res{i}.norm2.gamma"], p[f"res{i}.norm2.beta"] = _norm_params(128)
        _add_block(p, rng, "up1", 128, 64, 3, norm=True)
        _add_block(p, rng, "up2", 64, 32, 3, norm=True)
        _add_block(p, rng, "out", 32, 3, 7, norm=False)
        self.params = p

    def _norm(self, x: T.Tensor, name: str) -> T.Tensor:
        return instance_norm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"])

    def _conv(self, x: T.Tensor, name: str, stride: int, padding: int) -> T.Tensor:
        return T.conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], stride, padding)

    def forward(self, rgb: T.Tensor, xi: T.Tensor | None = None) -> T.Tensor:
        if self.in_channels == 6:
            if xi is None:
                raise ValueError("this generator expects invariant features alongside the image")
            x = T.concat_channels(rgb, xi)
        else:
            if xi is not None:
                raise ValueError("3-channel generator takes no invariant features")
            x = rgb
        _, c, h, w = x.shape
        if c != self.in_channels:
            raise T.DimensionError(f"expected {self.in_channels} input channels, got {c}")
        if h % 4 or w % 4:
            raise T.DimensionError(f"spatial extents must be divisible by 4, got {h}x{w}")
        x = T.relu(self._norm(self._conv(x, "stem", 1, 3), "stem.norm"))
        x = T.relu(self._norm(self._conv(x, "down1", 2, 1), "down1.norm"))
        x = T.relu(self._norm(self._conv(x, "down2", 2, 1), "down2.norm"))
        for i in range(1, self.res_blocks + 1):
            y = T.relu(self._norm(self._conv(x, f"res{i}.conv1", 1, 1), f"res{i}.norm1"))
            y = self._norm(self._conv(y, f"res{i}.conv2", 1, 1), f"res{i}.norm2")
            x = T.add(x, y)
        x = T.relu(self._norm(self._conv(T.resample(x, "up2"), "up1", 1, 1), "up1.norm"))
        x = T.relu(self._norm(self._conv(T.resample(x, "up2"), "up2", 1, 1), "up2.norm"))
        return T.tanh(self._conv(x, "out", 1, 3))


class Discriminator:
    """Four 4x4 stride-2 convs to a patch logit map; leaky slopes, no final activation."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        rng = np.random.default_rng([seed, 1])
        p: dict[str, T.Tensor] = {}
        _add_block(p, rng, "layer1", 3, 32, 4, norm=False)
        _add_block(p, rng, "layer2", 32, 64, 4, norm=True)
        _add_block(p, rng, "layer3", 64, 128, 4, norm=True)
        _add_block(p, rng, "out", 128, 1, 4, norm=False)
        self.params = p

    def forward(self, image: T.Tensor) -> T.Tensor:
        _, c, h, w = image.shape
        if c != 3:
            raise T.DimensionError(f"discriminator takes RGB input, got {c} channels")
        if h < 32 or w < 32:
            raise T.DimensionError(f"input must be at least 32x32, got {h}x{w}")
        x = T.leaky_relu(T.conv2d(image, self.params["layer1.weight"], self.params["layer1.bias"], 2, 1))
        for name in ("layer2", "layer3"):
            x = T.conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], 2, 1)
            x = T.leaky_relu(instance_norm(x, self.params[f"{name}.norm.gamma"], self.params[f"{name}.norm.beta"]))
        return T.conv2d(x, self.params["out.weight"], self.params["out.bias"], 2, 1)


def init_networks(
    seed: int, use_lci: bool = True, res_blocks: int = DEFAULT_RES_BLOCKS
) -> tuple[Generator, Discriminator, color.InvariantEnsemble]:
    """Seeded construction of the full trainable trio; same seed, same bits."""
    gen = Generator(seed=seed, in_channels=6 if use_lci else 3, res_blocks=res_blocks)
    disc = Discriminator(seed=seed)
    ensemble = color.init_ensemble()
    return gen, disc, ensemble

"""The spectrogram separator network and the 1x1-convolution mixer.

The separator is a U-Net over (frequency, time) built from TFC-TDF
blocks: a stack of 3x3 convolutions followed by a frequency-axis
bottleneck MLP shared across channels and frames. Encoder/decoder
links are elementwise products (no concatenation, no other skips),
channel width grows by g per downsampling step and shrinks back on the
way up, and the network regresses complex spectrograms directly.

Initialization is He-style fan-in uniform, U(-sqrt(6/fan_in), +...),
biases zero; the same seed always yields bit-identical parameters.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .tensor import (Parameter, Tensor, add_channel_bias, concat, conv2d,
                     conv_transpose2d, hadamard, linear, permute, relu)

U_MODES = ("multiply", "concat")


def he_uniform(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def tdf_hidden_size(f, bn):
    """Bottleneck width of the frequency MLP: ceil(f / bn)."""
    return -(-f // bn)


class TdfBlock:
    """Two linear layers applied along the frequency axis, identically for
    every (channel, frame) slice, with a relu between them."""

    def __init__(self, f, bn, rng, prefix):
        self.f = f
        self.bn = bn
        self.hidden = tdf_hidden_size(f, bn)
        self.w1 = Parameter(he_uniform(rng, (self.hidden, f), f), f"{prefix}.w1")
        self.b1 = Parameter(np.zeros(self.hidden), f"{prefix}.b1")
        self.w2 = Parameter(he_uniform(rng, (f, self.hidden), self.hidden),
                            f"{prefix}.w2")
        self.b2 = Parameter(np.zeros(f), f"{prefix}.b2")

    def forward(self, x):
        if x.shape[1] != self.f:
            raise DimensionError(
                f"tdf_forward: input has {x.shape[1]} bins, block expects {self.f}"
            )
        xt = permute(x, (0, 2, 1))  # (C, T, F)
        h = relu(linear(xt, self.w1, self.b1))
        y = linear(h, self.w2, self.b2)
        return permute(y, (0, 2, 1))

    def composed_matrix(self):
        """The full F x F frequency map W2 @ W1 (ignoring biases)."""
        return self.w2.data @ self.w1.data

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]


class TfcBlock:
    """num_convs 3x3 convolutions (stride 1, padding 1), relu after each."""

    def __init__(self, in_ch, out_ch, num_convs, rng, prefix):
        if num_convs < 1:
            raise ConfigError(f"TfcBlock needs at least one conv, got {num_convs}")
        self.convs = []
        c = in_ch
        for i in range(num_convs):
            kernel = Parameter(he_uniform(rng, (out_ch, c, 3, 3), c * 9),
                               f"{prefix}.conv{i}.weight")
            bias = Parameter(np.zeros(out_ch), f"{prefix}.conv{i}.bias")
            self.convs.append((kernel, bias))
            c = out_ch

    def forward(self, x):
        for kernel, bias in self.convs:
            x = relu(add_channel_bias(conv2d(x, kernel, (1, 1), (1, 1)), bias))
        return x

    def parameters(self):
        return [p for pair in self.convs for p in pair]


class TfcTdfBlock:
    """TFC stack followed by a TDF; no residual around either part."""

    def __init__(self, in_ch, out_ch, num_convs, f, bn, rng, prefix):
        self.tfc = TfcBlock(in_ch, out_ch, num_convs, rng, prefix)
        self.tdf = TdfBlock(f, bn, rng, f"{prefix}.tdf")

    def forward(self, x):
        return self.tdf.forward(self.tfc.forward(x))

    def parameters(self):
        return self.tfc.parameters() + self.tdf.parameters()


def tdf_forward(x, block):
    return block.forward(x)


def tfc_tdf_forward(x, block):
    return block.forward(x)


@dataclass(frozen=True)
class UNetV2Config:
    num_blocks: int = 5
    convs_per_block: int = 3
    bn: int = 8
    dim_f: int = 64
    dim_t: int = 32
    g: int = 4
    in_channels: int = 4

    def __post_init__(self):
        if self.num_blocks < 3 or self.num_blocks % 2 == 0:
            raise ConfigError(
                f"num_blocks must be odd and >= 3, got {self.num_blocks}"
            )
        scale = 1 << self.depth
        if self.dim_f % scale != 0 or self.dim_f == 0:
            raise ConfigError(
                f"dim_f={self.dim_f} not divisible by 2^depth={scale}"
            )
        if self.dim_t % scale != 0 or self.dim_t == 0:
            raise ConfigError(
                f"dim_t={self.dim_t} not divisible by 2^depth={scale}"
            )
        for name in ("convs_per_block", "bn", "g", "in_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.in_channels % 2 != 0:
            raise ConfigError(
                f"in_channels must be 2*audio_channels (even), got {self.in_channels}"
            )

    @property
    def depth(self):
        return (self.num_blocks - 1) // 2

    def to_dict(self):
        return {
            "num_blocks": self.num_blocks,
            "convs_per_block": self.convs_per_block,
            "bn": self.bn,
            "dim_f": self.dim_f,
            "dim_t": self.dim_t,
            "g": self.g,
            "in_channels": self.in_channels,
        }


def bottleneck_shape(cfg):
    """(channels, bins, frames) of the deepest activation, by shape arithmetic."""
    d = cfg.depth
    return (cfg.g * (d + 1), cfg.dim_f >> d, cfg.dim_t >> d)


class UNetV2:
    def __init__(self, cfg, rng, u_mode="multiply"):
        if u_mode not in U_MODES:
            raise ConfigError(f"u_mode must be one of {U_MODES}, got {u_mode!r}")
        self.cfg = cfg
        self.u_mode = u_mode
        d, g, nc, bn = cfg.depth, cfg.g, cfg.convs_per_block, cfg.bn

        self.entry_w = Parameter(
            he_uniform(rng, (g, cfg.in_channels, 1, 1), cfg.in_channels),
            "entry.weight")
        self.entry_b = Parameter(np.zeros(g), "entry.bias")

        self.encoder, self.down = [], []
        for k in range(d):
            width, f = g * (k + 1), cfg.dim_f >> k
            self.encoder.append(
                TfcTdfBlock(width, width, nc, f, bn, rng, f"encoder{k}"))
            wider = g * (k + 2)
            self.down.append((
                Parameter(he_uniform(rng, (wider, width, 2, 2), width * 4),
                          f"down{k}.weight"),
                Parameter(np.zeros(wider), f"down{k}.bias"),
            ))

        deep = g * (d + 1)
        self.bottleneck = TfcTdfBlock(deep, deep, nc, cfg.dim_f >> d, bn, rng,
                                      "bottleneck")

        self.up, self.decoder = {}, {}
        for k in reversed(range(d)):  # construction follows forward order
            width, wider, f = g * (k + 1), g * (k + 2), cfg.dim_f >> k
            self.up[k] = (
                Parameter(he_uniform(rng, (wider, width, 2, 2), wider * 4),
                          f"up{k}.weight"),
                Parameter(np.zeros(width), f"up{k}.bias"),
            )
            dec_in = 2 * width if u_mode == "concat" else width
            self.decoder[k] = TfcTdfBlock(dec_in, width, nc, f, bn, rng,
                                          f"decoder{k}")

        self.exit_w = Parameter(
            he_uniform(rng, (cfg.in_channels, g, 1, 1), g), "exit.weight")
        self.exit_b = Parameter(np.zeros(cfg.in_channels), "exit.bias")

        names = [p.name for p in self.parameters()]
        assert len(names) == len(set(names)), "duplicate parameter names"

    @property
    def encoder_widths(self):
        """Channel width per scale, shallow to deep (bottleneck included)."""
        d, g = self.cfg.depth, self.cfg.g
        return [g * (k + 1) for k in range(d + 1)]

    def forward(self, x, trace=None):
        cfg = self.cfg
        expected = (cfg.in_channels, cfg.dim_f, cfg.dim_t)
        if x.shape != expected:
            raise DimensionError(
                f"unet_forward: input shape {x.shape} != configured {expected}"
            )
        h = add_channel_bias(conv2d(x, self.entry_w), self.entry_b)
        saved = []
        # down/up layers are plain strided convolutions; activations live
        # inside the TFC-TDF blocks.
        for block, (dk, db) in zip(self.encoder, self.down):
            h = block.forward(h)
            saved.append(h)
            h = add_channel_bias(conv2d(h, dk, (2, 2)), db)
        h = self.bottleneck.forward(h)
        if trace is not None:
            trace["bottleneck_shape"] = h.shape
        for k in reversed(range(len(self.encoder))):
            uk, ub = self.up[k]
            h = add_channel_bias(conv_transpose2d(h, uk, (2, 2)), ub)
            if self.u_mode == "multiply":
                h = hadamard(h, saved[k])
            else:
                h = concat([h, saved[k]], axis=0)
            h = self.decoder[k].forward(h)
        return add_channel_bias(conv2d(h, self.exit_w), self.exit_b)

    def tdf_blocks(self):
        """(name, TdfBlock) pairs in forward order; index = position."""
        pairs = [(f"encoder{k}", b.tdf) for k, b in enumerate(self.encoder)]
        pairs.append(("bottleneck", self.bottleneck.tdf))
        for k in reversed(range(len(self.encoder))):
            pairs.append((f"decoder{k}", self.decoder[k].tdf))
        return pairs

    def parameters(self):
        params = [self.entry_w, self.entry_b]
        for block, (dk, db) in zip(self.encoder, self.down):
            params += block.parameters() + [dk, db]
        params += self.bottleneck.parameters()
        for k in reversed(range(len(self.encoder))):
            params += list(self.up[k]) + self.decoder[k].parameters()
        params += [self.exit_w, self.exit_b]
        return params


class Mixer:
    """Per-sample linear map over stacked stem + mixture channels.

    With identity initialization the source channels map straight
    through and the mixture contributes nothing, so an untrained mixer
    is a no-op on the estimated stems.
    """

    def __init__(self, num_sources=4, audio_channels=2, identity=True, rng=None):
        self.num_sources = num_sources
        self.audio_channels = audio_channels
        in_ch = (num_sources + 1) * audio_channels
        out_ch = num_sources * audio_channels
        if identity:
            weight = np.zeros((out_ch, in_ch))
            weight[:, :out_ch] = np.eye(out_ch)
        else:
            weight = he_uniform(rng, (out_ch, in_ch), in_ch)
        self.w = Parameter(weight, "mixer.weight")
        self.b = Parameter(np.zeros(out_ch), "mixer.bias")

    @property
    def in_channels(self):
        return (self.num_sources + 1) * self.audio_channels

    @property
    def out_channels(self):
        return self.num_sources * self.audio_channels

    def forward(self, stacked):
        """stacked: Tensor (in_channels, L) -> Tensor (out_channels, L)."""
        if stacked.shape[0] != self.in_channels:
            raise DimensionError(
                f"mixer expects {self.in_channels} stacked channels, "
                f"got {stacked.shape[0]}"
            )
        y = linear(permute(stacked, (1, 0)), self.w, self.b)
        return permute(y, (1, 0))

    def parameters(self):
        return [self.w, self.b]


def unet_forward(x, net, trace=None):
    return net.forward(x, trace=trace)


def mixer_forward(sources, mixture, mixer):
    """Refine four estimated stems given the mixture.

    sources: list of 4 Waveforms in stem order; mixture: Waveform.
    Returns 4 refined Waveforms.
    """
    from .dsp import Waveform

    if len(sources) != mixer.num_sources:
        raise ContractError(
            f"mixer_forward: got {len(sources)} sources, "
            f"expected {mixer.num_sources}"
        )
    signals = list(sources) + [mixture]
    length = mixture.length
    for s in signals:
        if s.length != length or s.channels != mixer.audio_channels:
            raise ContractError(
                f"mixer_forward: signal {s!r} does not match mixture "
                f"length {length} / {mixer.audio_channels} channels"
            )
    stacked = Tensor(np.concatenate([s.samples for s in signals], axis=0))
    out = mixer.forward(stacked).data
    ch = mixer.audio_channels
    return [Waveform(out[i * ch:(i + 1) * ch], mixture.sample_rate)
            for i in range(mixer.num_sources)]


def param_count(model):
    return sum(p.size for p in model.parameters())


def unet_param_count_formula(cfg, u_mode="multiply"):
    """Closed-form parameter count, kept independent of the model walker.

    entry/exit 1x1 convs: g*in + g and in*g + in. Per scale k (width
    w = g*(k+1), f = dim_f/2^k): a TFC-TDF block costs
    nc*(w*w_in*9 + w) for the convs plus h*f + h + f*h + f for the TDF
    with h = ceil(f/bn); downsampling costs (w+g)*w*4 + (w+g) and
    upsampling (w+g)*w*4 + w. Concat U-connections double the input
    width of the first conv of each decoder block.
    """
    d, g, nc, bn = cfg.depth, cfg.g, cfg.convs_per_block, cfg.bn

    def tdf_cost(f):
        h = tdf_hidden_size(f, bn)
        return h * f + h + f * h + f

    def block_cost(width, f, first_in):
        convs = (width * first_in * 9 + width)
        convs += (nc - 1) * (width * width * 9 + width)
        return convs + tdf_cost(f)

    total = cfg.g * cfg.in_channels + cfg.g
    total += cfg.in_channels * cfg.g + cfg.in_channels
    for k in range(d):
        width, wider, f = g * (k + 1), g * (k + 2), cfg.dim_f >> k
        total += block_cost(width, f, width)  # encoder
        dec_in = 2 * width if u_mode == "concat" else width
        total += block_cost(width, f, dec_in)  # decoder
        total += wider * width * 4 + wider  # down
        total += wider * width * 4 + width  # up
    total += block_cost(g * (d + 1), cfg.dim_f >> d, g * (d + 1))
    return total


def build_separator(cfg, seed, u_mode="multiply"):
    """Deterministically initialized separator; same seed, same bytes."""
    rng = np.random.default_rng(seed)
    return UNetV2(cfg, rng, u_mode=u_mode)


def build_mixer(num_sources=4, audio_channels=2):
    return Mixer(num_sources=num_sources, audio_channels=audio_channels,
                 identity=True)

"""End-to-end separation: chunked inference, mixer refinement, blending.

Long signals are split into overlapping chunks (75% overlap, triangular
cross-fade, flat boundary windows) of the network's native sample
length, processed independently and overlap-added back together, so the
output always has exactly the input length.
"""

import numpy as np

from .dsp import Spectrogram, StftConfig, Waveform, istft_tensor, stft_tensor
from .errors import ConfigError, ContractError
from .tensor import Tensor, narrow, no_grad, pad_axis

SOURCES = ("vocals", "drums", "bass", "other")


def check_source(name):
    if name not in SOURCES:
        raise ContractError(f"unknown source {name!r}, expected one of {SOURCES}")
    return name


class SeparatorBundle:
    """One separator network plus STFT configuration per stem.

    All four configurations must share hop, dim_f and frame count; n_fft
    is free to differ per source.
    """

    def __init__(self, nets, stft_cfgs, sample_rate):
        for s in SOURCES:
            if s not in nets or s not in stft_cfgs:
                raise ContractError(f"bundle is missing source {s!r}")
        hops = {stft_cfgs[s].hop for s in SOURCES}
        dims = {stft_cfgs[s].dim_f for s in SOURCES}
        if len(hops) != 1 or len(dims) != 1:
            raise ConfigError(
                f"per-source STFT configs must share hop and dim_f, "
                f"got hops {sorted(hops)} and dim_f {sorted(dims)}"
            )
        dts = {nets[s].cfg.dim_t for s in SOURCES}
        if len(dts) != 1:
            raise ConfigError(f"separators must share dim_t, got {sorted(dts)}")
        for s in SOURCES:
            if nets[s].cfg.dim_f != stft_cfgs[s].dim_f:
                raise ConfigError(
                    f"{s}: network dim_f {nets[s].cfg.dim_f} != "
                    f"stft dim_f {stft_cfgs[s].dim_f}"
                )
        self.nets = dict(nets)
        self.stft_cfgs = dict(stft_cfgs)
        self.sample_rate = int(sample_rate)

    @property
    def audio_channels(self):
        return self.nets[SOURCES[0]].cfg.in_channels // 2

    @property
    def dim_t(self):
        return self.nets[SOURCES[0]].cfg.dim_t

    @property
    def hop(self):
        return self.stft_cfgs[SOURCES[0]].hop

    @property
    def chunk_samples(self):
        """Native network input length: stft yields exactly dim_t frames."""
        return self.hop * (self.dim_t - 1)


def spectrogram_scale(scfg):
    """Fixed conditioning constant: bins are divided by this before the
    network and multiplied back after. n_fft/4 is the peak bin magnitude
    of a full-scale sinusoid under the Hann window, so normalized inputs
    land near [-1, 1] regardless of the per-source n_fft."""
    return scfg.n_fft / 4.0


def separator_estimate(net, scfg, mix, out_length):
    """Differentiable stft -> freq_cut -> network -> freq_pad -> istft chain.

    mix is a (C, L) tensor of exactly the native chunk length.
    """
    s = spectrogram_scale(scfg)
    spec = stft_tensor(mix, scfg) * (1.0 / s)
    cut = narrow(spec, 1, 0, scfg.dim_f)
    est = net.forward(cut) * s
    padded = pad_axis(est, 1, 0, scfg.full_bins - scfg.dim_f)
    return istft_tensor(padded, scfg, out_length)


def _crossfade_windows(chunk_len, n_chunks):
    """Triangular cross-fade windows; boundary chunks keep their outer
    halves flat so a single chunk passes through untouched."""
    base = np.bartlett(chunk_len) if chunk_len > 1 else np.ones(1)
    half = chunk_len // 2
    windows = []
    for i in range(n_chunks):
        w = base.copy()
        if i == 0:
            w[:half] = 1.0
        if i == n_chunks - 1:
            w[half:] = 1.0
        windows.append(w)
    return windows


def separate_one(mixture, source, bundle):
    """Estimate one stem from a mixture of arbitrary length."""
    check_source(source)
    if mixture.channels != bundle.audio_channels:
        raise ContractError(
            f"mixture has {mixture.channels} channels, bundle expects "
            f"{bundle.audio_channels}"
        )
    net = bundle.nets[source]
    scfg = bundle.stft_cfgs[source]
    chunk_len = bundle.chunk_samples
    length = mixture.length
    samples = mixture.samples

    hop = max(1, chunk_len // 4)  # 75% overlap
    if length <= chunk_len:
        offsets = [0]
        padded = np.zeros((mixture.channels, chunk_len))
        padded[:, :length] = samples
    else:
        n_hops = -(-(length - chunk_len) // hop)
        offsets = [i * hop for i in range(n_hops + 1)]
        padded = np.zeros((mixture.channels, offsets[-1] + chunk_len))
        padded[:, :length] = samples

    windows = _crossfade_windows(chunk_len, len(offsets))
    acc = np.zeros_like(padded)
    weight = np.zeros(padded.shape[1])
    with no_grad():
        for off, w in zip(offsets, windows):
            chunk = padded[:, off:off + chunk_len]
            est = separator_estimate(net, scfg, Tensor(chunk), chunk_len).data
            acc[:, off:off + chunk_len] += est * w
            weight[off:off + chunk_len] += w
    out = acc[:, :length] / weight[:length]
    return Waveform(out, mixture.sample_rate)


def separate_all(mixture, bundle, mixer=None):
    """Run all four separators; refine with the mixer when given."""
    stems = {s: separate_one(mixture, s, bundle) for s in SOURCES}
    if mixer is not None:
        from .model import mixer_forward

        refined = mixer_forward([stems[s] for s in SOURCES], mixture, mixer)
        stems = dict(zip(SOURCES, refined))
    return stems


def check_source_set(stems):
    for s in SOURCES:
        if s not in stems:
            raise ContractError(f"source set is missing {s!r}")
    lengths = {stems[s].length for s in SOURCES}
    rates = {stems[s].sample_rate for s in SOURCES}
    if len(lengths) != 1 or len(rates) != 1:
        raise ContractError(
            f"source set stems are not aligned: lengths {sorted(lengths)}, "
            f"rates {sorted(rates)}"
        )
    return stems


def default_blend_weights():
    return {s: 1.0 for s in SOURCES}


def blend(a, b, weights):
    """Per-source weighted average: out[s] = w[s]*a[s] + (1-w[s])*b[s].

    The endpoints w=1 and w=0 return copies of the corresponding stream
    bit-exactly.
    """
    check_source_set(a)
    check_source_set(b)
    out = {}
    for s in SOURCES:
        w = float(weights[s])
        if not 0.0 <= w <= 1.0:
            raise ContractError(f"blend weight for {s} must be in [0, 1], got {w}")
        if a[s].length != b[s].length:
            raise ContractError(
                f"blend: {s} lengths differ ({a[s].length} vs {b[s].length})"
            )
        if w == 1.0:
            samples = a[s].samples.copy()
        elif w == 0.0:
            samples = b[s].samples.copy()
        else:
            samples = w * a[s].samples + (1.0 - w) * b[s].samples
        out[s] = Waveform(samples, a[s].sample_rate)
    return out


class SecondStream:
    """Interface for a second, independently trained separation stream."""

    def separate(self, mixture):
        raise NotImplementedError


class PassthroughStub(SecondStream):
    """Non-informative baseline: every stem is mixture / 4.

    Stands in for a time-domain stream without pretending to separate;
    the four stems sum back to the mixture exactly.
    """

    def separate(self, mixture):
        quarter = mixture.samples * 0.25
        return {s: Waveform(quarter.copy(), mixture.sample_rate)
                for s in SOURCES}


SECOND_STREAMS = {"passthrough": PassthroughStub}


def make_second_stream(name):
    if name in (None, "none", ""):
        return None
    if name not in SECOND_STREAMS:
        raise ConfigError(
            f"unknown second stream {name!r}, available: "
            f"{sorted(SECOND_STREAMS)} or 'none'"
        )
    return SECOND_STREAMS[name]()


def run_pipeline(mixture, bundle, mixer=None, weights=None, second_stream=None):
    """Full two-stream pipeline of the overall architecture: separators,
    optional mixer, optional second stream merged by blending."""
    stems = separate_all(mixture, bundle, mixer)
    if second_stream is None:
        return stems
    other = check_source_set(second_stream.separate(mixture))
    return blend(stems, other, weights or default_blend_weights())

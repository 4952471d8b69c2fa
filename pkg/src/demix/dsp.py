"""STFT analysis/synthesis, frequency cutting/padding and WAV I/O.

The transforms are real-linear maps implemented as custom autodiff ops,
so gradients flow through an stft -> network -> istft chain. Synthesis
uses squared-window overlap-add normalization; with the default periodic
Hann window and hop <= n_fft/2 the round trip reconstructs the input to
machine precision.

Conventions: signals are reflect-padded by n_fft/2 on both ends, so a
chunk of hop * (dim_t - 1) samples yields exactly dim_t frames. Complex
bins are stored as interleaved real/imag channels: channel 2c is the
real part of audio channel c, channel 2c+1 the imaginary part.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, FormatError
from .tensor import Tensor, narrow, pad_axis, _result

_WINDOWS = ("hann", "rect")


@dataclass(frozen=True)
class StftConfig:
    n_fft: int
    hop: int
    dim_f: int
    window: str = "hann"

    def __post_init__(self):
        if self.n_fft < 2 or self.n_fft % 2 != 0:
            raise ConfigError(f"n_fft must be even and >= 2, got {self.n_fft}")
        if not 1 <= self.hop <= self.n_fft:
            raise ConfigError(
                f"hop must be in [1, n_fft={self.n_fft}], got {self.hop}"
            )
        if not 1 <= self.dim_f <= self.full_bins:
            raise ConfigError(
                f"dim_f must be in [1, {self.full_bins}], got {self.dim_f}"
            )
        if self.window not in _WINDOWS:
            raise ConfigError(
                f"unknown window {self.window!r}, supported: {_WINDOWS}"
            )

    @property
    def full_bins(self):
        return self.n_fft // 2 + 1

    @property
    def pad(self):
        return self.n_fft // 2


class Waveform:
    """A (channels, length) float64 signal plus its sample rate."""

    def __init__(self, samples, sample_rate):
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[np.newaxis, :]
        if samples.ndim != 2:
            raise DimensionError(
                f"waveform samples must be (channels, length), got {samples.shape}"
            )
        if samples.shape[0] not in (1, 2):
            raise ContractError(
                f"waveform must have 1 or 2 channels, got {samples.shape[0]}"
            )
        if not np.isfinite(samples).all():
            raise ContractError("waveform contains non-finite samples")
        self.samples = samples
        self.sample_rate = int(sample_rate)

    @property
    def channels(self):
        return self.samples.shape[0]

    @property
    def length(self):
        return self.samples.shape[1]

    def to_stereo(self):
        if self.channels == 2:
            return self
        return Waveform(np.repeat(self.samples, 2, axis=0), self.sample_rate)

    def __repr__(self):
        return (f"Waveform(channels={self.channels}, length={self.length}, "
                f"rate={self.sample_rate})")


@dataclass
class Spectrogram:
    """Real/imag channel-interleaved STFT data of shape (2C, bins, frames)."""

    data: Tensor
    cfg: StftConfig
    sample_rate: int = 0
    full_bins: int = field(default=0)

    def __post_init__(self):
        if self.full_bins == 0:
            self.full_bins = self.cfg.full_bins

    @property
    def bins(self):
        return self.data.shape[1]

    @property
    def frames(self):
        return self.data.shape[2]

    @property
    def audio_channels(self):
        return self.data.shape[0] // 2


def make_window(name, n_fft):
    if name == "hann":
        # periodic Hann: 0.5 * (1 - cos(2 pi n / N))
        return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n_fft) / n_fft))
    if name == "rect":
        return np.ones(n_fft)
    raise ConfigError(f"unknown window {name!r}")


def _reflect_indices(length, pad):
    """Index map so padded[i] = x[idx[i]] realizes reflect padding."""
    if length == 1:
        return np.zeros(length + 2 * pad, dtype=np.intp)
    pos = np.arange(-pad, length + pad)
    period = 2 * (length - 1)
    m = np.mod(pos, period)
    return np.where(m < length, m, period - m).astype(np.intp)


def frame_count(length, cfg):
    """Frames produced by stft for a signal of this length."""
    padded = length + 2 * cfg.pad
    return 1 + (padded - cfg.n_fft) // cfg.hop


def _frame_view(xp, n_fft, hop, frames):
    c = xp.shape[0]
    s0, s1 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, shape=(c, frames, n_fft), strides=(s0, s1 * hop, s1),
        writeable=False,
    )


def stft_tensor(x, cfg):
    """Windowed onesided DFT of a (C, L) tensor -> (2C, full_bins, T)."""
    if x.ndim != 2:
        raise DimensionError(f"stft input must be (channels, length), got {x.shape}")
    channels, length = x.shape
    if length < 1:
        raise ContractError("stft: empty signal")
    n_fft, hop = cfg.n_fft, cfg.hop
    window = make_window(cfg.window, n_fft)
    idx = _reflect_indices(length, cfg.pad)
    frames = frame_count(length, cfg)
    bins = cfg.full_bins

    xp = x.data[:, idx]
    segs = _frame_view(xp, n_fft, hop, frames) * window
    spec = np.fft.rfft(segs, axis=-1)  # (C, T, bins)
    out = np.empty((2 * channels, bins, frames))
    out[0::2] = np.real(spec).transpose(0, 2, 1)
    out[1::2] = np.imag(spec).transpose(0, 2, 1)

    def backward(g):
        if not x.requires_grad:
            return
        z = (g[0::2] + 1j * g[1::2]).transpose(0, 2, 1).copy()  # (C, T, bins)
        z[..., 1:-1] /= 2.0
        gsegs = n_fft * np.fft.irfft(z, n_fft, axis=-1) * window
        gpad = np.zeros((channels, length + 2 * cfg.pad))
        for t in range(frames):
            gpad[:, t * hop:t * hop + n_fft] += gsegs[:, t]
        gx = np.zeros((channels, length))
        for c in range(channels):
            np.add.at(gx[c], idx, gpad[c])
        x.accumulate_grad(gx)

    return _result(out, (x,), backward)


def _ola_normalizer(cfg, frames):
    """Squared-window overlap-add sum over the padded buffer."""
    window = make_window(cfg.window, cfg.n_fft)
    total = cfg.n_fft + (frames - 1) * cfg.hop
    norm = np.zeros(total)
    wsq = window * window
    for t in range(frames):
        norm[t * cfg.hop:t * cfg.hop + cfg.n_fft] += wsq
    return norm


def istft_tensor(s, cfg, out_length):
    """Overlap-add synthesis of a (2C, full_bins, T) tensor -> (C, out_length).

    Raises ConfigError when the squared-window normalizer drops below
    1e-8 anywhere in the retained sample range (COLA violation for the
    configured window/hop pair).
    """
    if s.ndim != 3:
        raise DimensionError(f"istft input must be (2C, bins, T), got {s.shape}")
    if s.shape[0] % 2 != 0:
        raise DimensionError(f"istft needs real/imag channel pairs, got {s.shape[0]}")
    if s.shape[1] != cfg.full_bins:
        raise DimensionError(
            f"istft needs full_bins={cfg.full_bins} bins, got {s.shape[1]} "
            "(apply freq_pad first)"
        )
    if out_length < 1:
        raise ContractError("istft: out_length must be >= 1")
    n_fft, hop = cfg.n_fft, cfg.hop
    frames = s.shape[2]
    channels = s.shape[0] // 2
    total = n_fft + (frames - 1) * hop
    start = cfg.pad
    if start + out_length > total:
        raise ContractError(
            f"istft: out_length {out_length} exceeds the {total - start} samples "
            f"synthesizable from {frames} frames"
        )
    window = make_window(cfg.window, n_fft)
    norm = _ola_normalizer(cfg, frames)
    kept = norm[start:start + out_length]
    if kept.min() < 1e-8:
        raise ConfigError(
            f"COLA violation: squared-window overlap-add sum reaches "
            f"{kept.min():.3e} (< 1e-8) for window={cfg.window!r}, "
            f"n_fft={n_fft}, hop={hop}"
        )

    z = (s.data[0::2] + 1j * s.data[1::2]).transpose(0, 2, 1)  # (C, T, bins)
    segs = np.fft.irfft(z, n_fft, axis=-1) * window
    buf = np.zeros((channels, total))
    for t in range(frames):
        buf[:, t * hop:t * hop + n_fft] += segs[:, t]
    out = buf[:, start:start + out_length] / kept

    def backward(g):
        if not s.requires_grad:
            return
        gbuf = np.zeros((channels, total))
        gbuf[:, start:start + out_length] = g / kept
        gsegs = _frame_view(gbuf, n_fft, hop, frames) * window
        gz = np.fft.rfft(gsegs, axis=-1)
        ga = (2.0 / n_fft) * np.real(gz)
        ga[..., 0] *= 0.5
        ga[..., -1] *= 0.5
        gb = (2.0 / n_fft) * np.imag(gz)
        gb[..., 0] = 0.0
        gb[..., -1] = 0.0
        gs = np.empty(s.shape)
        gs[0::2] = ga.transpose(0, 2, 1)
        gs[1::2] = gb.transpose(0, 2, 1)
        s.accumulate_grad(gs)

    return _result(out, (s,), backward)


def stft(w, cfg):
    """STFT of a Waveform into a full-bins Spectrogram."""
    data = stft_tensor(Tensor(w.samples), cfg)
    return Spectrogram(data=data, cfg=cfg, sample_rate=w.sample_rate)


def istft(spec, cfg, out_length):
    """Inverse STFT of a full-bins Spectrogram back to a Waveform."""
    data = istft_tensor(spec.data, cfg, out_length)
    return Waveform(data.data, spec.sample_rate)


def freq_cut(spec, dim_f):
    """Keep only the lowest dim_f frequency bins."""
    if dim_f > spec.bins:
        raise ContractError(
            f"freq_cut: dim_f {dim_f} exceeds available bins {spec.bins}"
        )
    if dim_f == spec.bins:
        return spec
    return Spectrogram(
        data=narrow(spec.data, 1, 0, dim_f),
        cfg=spec.cfg,
        sample_rate=spec.sample_rate,
        full_bins=spec.full_bins,
    )


def freq_pad(spec, full_bins):
    """Zero-fill the cut high-frequency bins back to full_bins."""
    if spec.bins > full_bins:
        raise ContractError(
            f"freq_pad: spectrogram has {spec.bins} bins > full_bins {full_bins}"
        )
    if spec.bins == full_bins:
        return spec
    return Spectrogram(
        data=pad_axis(spec.data, 1, 0, full_bins - spec.bins),
        cfg=spec.cfg,
        sample_rate=spec.sample_rate,
        full_bins=full_bins,
    )


# ---------------------------------------------------------------------------
# WAV files: 16-bit PCM and 32-bit IEEE float, 1-2 channels
# ---------------------------------------------------------------------------

def wav_write(path, w):
    """Write a Waveform as a 32-bit IEEE float WAV file."""
    interleaved = np.ascontiguousarray(w.samples.T, dtype="<f4")
    data = interleaved.tobytes()
    channels = w.channels
    block = 4 * channels
    header = b"".join([
        b"RIFF",
        struct.pack("<I", 4 + 8 + 18 + 8 + 4 + 8 + len(data)),
        b"WAVE",
        b"fmt ",
        struct.pack("<IHHIIHH", 18, 3, channels, w.sample_rate,
                    w.sample_rate * block, block, 32),
        b"fact",
        struct.pack("<II", 4, w.length),
        b"data",
        struct.pack("<I", len(data)),
    ])
    with open(path, "wb") as f:
        f.write(header)
        f.write(data)
        if len(data) % 2:
            f.write(b"\x00")


def wav_read(path, to_stereo=False):
    """Read a WAV file into a Waveform.

    16-bit PCM samples map to floats in [-1, 1) via division by 32768;
    32-bit float samples pass through unchanged. Mono stays mono unless
    to_stereo is set.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[0:4] != b"RIFF":
        raise FormatError(f"{path}: missing RIFF signature")
    if blob[8:12] != b"WAVE":
        raise FormatError(f"{path}: RIFF form type is {blob[8:12]!r}, not WAVE")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(blob):
        cid = blob[pos:pos + 4]
        (size,) = struct.unpack_from("<I", blob, pos + 4)
        body = blob[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise FormatError(f"{path}: fmt chunk truncated ({len(body)} bytes)")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            data = body
        pos += 8 + size + (size % 2)

    if fmt is None:
        raise FormatError(f"{path}: no fmt chunk")
    if data is None:
        raise FormatError(f"{path}: no data chunk")
    tag, channels, rate, _byterate, _block, bits = fmt
    if channels not in (1, 2):
        raise FormatError(f"{path}: unsupported channel count {channels}")
    if tag == 1 and bits == 16:
        raw = np.frombuffer(data, dtype="<i2")
        samples = raw.astype(np.float64) / 32768.0
    elif tag == 3 and bits == 32:
        raw = np.frombuffer(data, dtype="<f4")
        samples = raw.astype(np.float64)
    else:
        raise FormatError(
            f"{path}: unsupported format tag {tag} / bit depth {bits} "
            "(need 16-bit PCM or 32-bit IEEE float)"
        )
    usable = (len(samples) // channels) * channels
    samples = samples[:usable].reshape(-1, channels).T
    w = Waveform(samples, rate)
    return w.to_stereo() if to_stereo else w

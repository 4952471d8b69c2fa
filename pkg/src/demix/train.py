"""Two-phase training: per-source separators first, then the mixer with
the separators frozen.

Augmentation is random chunking plus instrument mixing: every stem of a
training chunk is drawn from an independently chosen song and offset and
the mixture is their sum. Everything is driven by a seeded generator, so
a (seed, config, dataset) triple reproduces the exact loss trajectory.
"""

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from .dsp import wav_read
from .errors import ConfigError, ContractError, TrainingDivergedError
from .model import build_mixer, build_separator
from .pipeline import SOURCES, SeparatorBundle, check_source, separator_estimate
from .tensor import Tensor, add, mean, narrow, no_grad, scale, tensor_abs


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    rms_alpha: float = 0.9
    rms_eps: float = 1e-8
    steps: int = 500
    batch_size: int = 4
    seed: int = 0
    target: str = "vocals"
    validation_interval: int = 100
    validation_chunks: int = 8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.rms_alpha < 1.0:
            raise ConfigError(f"rms_alpha must be in [0, 1), got {self.rms_alpha}")
        if self.target != "mixer":
            check_source(self.target)


@dataclass
class Song:
    name: str
    stems: dict
    sample_rate: int

    @property
    def length(self):
        return self.stems[SOURCES[0]].shape[1]

    @property
    def channels(self):
        return self.stems[SOURCES[0]].shape[0]

    def mixture(self):
        """Sample-wise sum of the four stems."""
        return sum(self.stems[s] for s in SOURCES)


class DatasetIndex:
    """Songs with all four stems, equal lengths and rates."""

    def __init__(self, songs):
        if not songs:
            raise ContractError("dataset index has no songs")
        rates = {s.sample_rate for s in songs}
        chans = {s.channels for s in songs}
        if len(rates) != 1:
            raise ContractError(f"songs disagree on sample rate: {sorted(rates)}")
        if len(chans) != 1:
            raise ContractError(f"songs disagree on channel count: {sorted(chans)}")
        for song in songs:
            lengths = {song.stems[s].shape[1] for s in SOURCES}
            if len(lengths) != 1:
                raise ContractError(
                    f"song {song.name}: stems have different lengths "
                    f"{sorted(lengths)}"
                )
        self.songs = list(songs)

    @property
    def sample_rate(self):
        return self.songs[0].sample_rate

    @property
    def channels(self):
        return self.songs[0].channels

    @property
    def min_length(self):
        return min(s.length for s in self.songs)

    def __len__(self):
        return len(self.songs)


def load_index(path):
    """Read an index file of lines ``song_name,vocals,drums,bass,other``;
    stem paths are resolved relative to the index file."""
    base = os.path.dirname(os.path.abspath(path))
    songs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise ContractError(
                    f"{path}:{lineno}: expected 5 comma-separated fields, "
                    f"got {len(parts)}"
                )
            name = parts[0]
            stems = {}
            rate = None
            for source, rel in zip(SOURCES, parts[1:]):
                wav = wav_read(os.path.join(base, rel))
                stems[source] = wav.samples
                if rate is not None and wav.sample_rate != rate:
                    raise ContractError(
                        f"song {name}: stem sample rates differ "
                        f"({wav.sample_rate} vs {rate})"
                    )
                rate = wav.sample_rate
            songs.append(Song(name=name, stems=stems, sample_rate=rate))
    return DatasetIndex(songs)


# ---------------------------------------------------------------------------
# chunk sampling / augmentation
# ---------------------------------------------------------------------------

def _check_chunk_len(index, chunk_len):
    if chunk_len > index.min_length:
        raise ContractError(
            f"chunk_len {chunk_len} exceeds shortest song "
            f"({index.min_length} samples)"
        )
    if chunk_len < 1:
        raise ContractError(f"chunk_len must be >= 1, got {chunk_len}")


def sample_chunk(index, chunk_len, rng, target):
    """Aligned random chunk of one song: (mixture, target stem)."""
    check_source(target)
    _check_chunk_len(index, chunk_len)
    song = index.songs[int(rng.integers(len(index.songs)))]
    offset = int(rng.integers(song.length - chunk_len + 1))
    window = slice(offset, offset + chunk_len)
    mixture = sum(song.stems[s][:, window] for s in SOURCES)
    return mixture, song.stems[target][:, window].copy()


def draw_stems(index, chunk_len, rng):
    """One chunk per stem, each from an independent random song/offset."""
    _check_chunk_len(index, chunk_len)
    out = {}
    for source in SOURCES:
        song = index.songs[int(rng.integers(len(index.songs)))]
        offset = int(rng.integers(song.length - chunk_len + 1))
        out[source] = song.stems[source][:, offset:offset + chunk_len].copy()
    return out


def mix_instruments(index, chunk_len, rng, target):
    """Instrument-mixing augmentation: stems from different songs, mixture
    their sum, target the drawn stem of the trained source."""
    check_source(target)
    stems = draw_stems(index, chunk_len, rng)
    mixture = sum(stems[s] for s in SOURCES)
    return mixture, stems[target]


# ---------------------------------------------------------------------------
# loss and optimizer
# ---------------------------------------------------------------------------

def l1_time_loss(estimate, target):
    """Mean absolute error over all samples and channels, as a scalar tensor."""
    est = estimate if isinstance(estimate, Tensor) else Tensor(
        getattr(estimate, "samples", estimate))
    tgt = target if isinstance(target, Tensor) else Tensor(
        getattr(target, "samples", target))
    if est.shape != tgt.shape:
        raise ContractError(
            f"l1_time_loss: shapes {est.shape} and {tgt.shape} differ"
        )
    return mean(tensor_abs(est - tgt))


def rmsprop_step(param, grad, state, lr, alpha, eps):
    """In-place RMSProp update without momentum:
    v <- alpha*v + (1-alpha)*g^2; p <- p - lr*g/(sqrt(v)+eps)."""
    state *= alpha
    state += (1.0 - alpha) * grad * grad
    param -= lr * grad / (np.sqrt(state) + eps)


class RmsProp:
    """RMSProp with no momentum over a fixed parameter list."""

    def __init__(self, params, lr, alpha=0.9, eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.alpha = float(alpha)
        self.eps = float(eps)
        self.state = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.state):
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            rmsprop_step(p.data, grad, v, self.lr, self.alpha, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint_path: str
    loss_log_path: str
    losses: list = field(default_factory=list)
    val_steps: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)

    @property
    def first_loss(self):
        return self.losses[0] if self.losses else None

    @property
    def final_loss(self):
        return self.losses[-1] if self.losses else None


def _write_loss_log(path, losses):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss"])
        for step, loss in enumerate(losses, 1):
            writer.writerow([step, repr(loss)])


def _mean_loss(parts):
    total = parts[0]
    for p in parts[1:]:
        total = add(total, p)
    return scale(total, 1.0 / len(parts))


def _check_finite(value, step, last_finite):
    if not np.isfinite(value):
        raise TrainingDivergedError(step, last_finite)


def train_separator(index, train_cfg, model_cfg, stft_cfg, out_dir):
    """Train one single-target separator; returns paths and loss history.

    Per step: draw batch_size augmented chunks, push each through the
    differentiable stft -> net -> istft chain, average the time-domain
    l1 losses, backprop, RMSProp update.
    """
    source = check_source(train_cfg.target)
    if index.channels * 2 != model_cfg.in_channels:
        raise ConfigError(
            f"dataset has {index.channels} channels but the model expects "
            f"{model_cfg.in_channels // 2}"
        )
    chunk_len = stft_cfg.hop * (model_cfg.dim_t - 1)
    rng = np.random.default_rng([train_cfg.seed, 0])
    val_rng = np.random.default_rng([train_cfg.seed, 1])
    net = build_separator(model_cfg, seed=train_cfg.seed)
    opt = RmsProp(net.parameters(), train_cfg.learning_rate,
                  train_cfg.rms_alpha, train_cfg.rms_eps)

    val_set = [mix_instruments(index, chunk_len, val_rng, source)
               for _ in range(train_cfg.validation_chunks)]

    def val_loss():
        with no_grad():
            losses = [
                l1_time_loss(
                    separator_estimate(net, stft_cfg, Tensor(mix), chunk_len),
                    tgt)
                for mix, tgt in val_set
            ]
        return float(np.mean([l.item() for l in losses]))

    losses, val_steps, val_losses = [], [], []
    val_steps.append(0)
    val_losses.append(val_loss())
    last_finite = None
    for step in range(1, train_cfg.steps + 1):
        parts = []
        for _ in range(train_cfg.batch_size):
            mix, tgt = mix_instruments(index, chunk_len, rng, source)
            est = separator_estimate(net, stft_cfg, Tensor(mix), chunk_len)
            parts.append(l1_time_loss(est, tgt))
        loss = _mean_loss(parts)
        value = loss.item()
        _check_finite(value, step, last_finite)
        last_finite = value
        loss.backward()
        opt.step()
        opt.zero_grad()
        losses.append(value)
        if train_cfg.validation_interval and \
                step % train_cfg.validation_interval == 0:
            val_steps.append(step)
            val_losses.append(val_loss())

    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, f"{source}.ckpt")
    ckpt.save_separator(net, stft_cfg, source, index.sample_rate, ckpt_path)
    log_path = os.path.join(out_dir, f"{source}_loss.csv")
    _write_loss_log(log_path, losses)
    return TrainResult(checkpoint_path=ckpt_path, loss_log_path=log_path,
                       losses=losses, val_steps=val_steps,
                       val_losses=val_losses)


def load_bundle(checkpoint_paths):
    """Build a SeparatorBundle from four checkpoint paths keyed by source."""
    nets, cfgs, rates = {}, {}, set()
    for source in SOURCES:
        net, scfg, stored, rate = ckpt.load_separator(checkpoint_paths[source])
        if stored != source:
            raise ContractError(
                f"{checkpoint_paths[source]}: trained for {stored!r}, "
                f"used as {source!r}"
            )
        nets[source] = net
        cfgs[source] = scfg
        rates.add(rate)
    if len(rates) != 1:
        raise ContractError(f"checkpoints disagree on sample rate: {sorted(rates)}")
    return SeparatorBundle(nets, cfgs, rates.pop())


def _mixer_chunk_loss(mixer, bundle, stems, mixture, chunk_len):
    """Sum of per-source l1 losses after mixer refinement of one chunk."""
    with no_grad():
        ests = [
            separator_estimate(bundle.nets[s], bundle.stft_cfgs[s],
                               Tensor(mixture), chunk_len).data
            for s in SOURCES
        ]
    stacked = Tensor(np.concatenate(ests + [mixture], axis=0))
    refined = mixer.forward(stacked)
    ch = bundle.audio_channels
    parts = [
        l1_time_loss(narrow(refined, 0, i * ch, ch), stems[s])
        for i, s in enumerate(SOURCES)
    ]
    total = parts[0]
    for p in parts[1:]:
        total = add(total, p)
    return total


def train_mixer(index, train_cfg, checkpoint_paths, out_dir):
    """Train the mixer on frozen separators; loss is the sum of per-source
    time-domain l1 losses. The mixer starts as the identity map, so its
    step-0 validation loss equals the plain no-mixer pipeline loss."""
    bundle = load_bundle(checkpoint_paths)
    if index.channels != bundle.audio_channels:
        raise ConfigError(
            f"dataset has {index.channels} channels, separators expect "
            f"{bundle.audio_channels}"
        )
    chunk_len = bundle.chunk_samples
    rng = np.random.default_rng([train_cfg.seed, 2])
    val_rng = np.random.default_rng([train_cfg.seed, 3])
    mixer = build_mixer(len(SOURCES), bundle.audio_channels)
    opt = RmsProp(mixer.parameters(), train_cfg.learning_rate,
                  train_cfg.rms_alpha, train_cfg.rms_eps)

    val_set = []
    for _ in range(train_cfg.validation_chunks):
        stems = draw_stems(index, chunk_len, val_rng)
        val_set.append((stems, sum(stems[s] for s in SOURCES)))

    def val_loss():
        with no_grad():
            values = [
                _mixer_chunk_loss(mixer, bundle, stems, mixture,
                                  chunk_len).item()
                for stems, mixture in val_set
            ]
        return float(np.mean(values))

    losses, val_steps, val_losses = [], [0], [val_loss()]
    last_finite = None
    for step in range(1, train_cfg.steps + 1):
        parts = []
        for _ in range(train_cfg.batch_size):
            stems = draw_stems(index, chunk_len, rng)
            mixture = sum(stems[s] for s in SOURCES)
            parts.append(
                _mixer_chunk_loss(mixer, bundle, stems, mixture, chunk_len))
        loss = _mean_loss(parts)
        value = loss.item()
        _check_finite(value, step, last_finite)
        last_finite = value
        loss.backward()
        opt.step()
        opt.zero_grad()
        losses.append(value)
        if train_cfg.validation_interval and \
                step % train_cfg.validation_interval == 0:
            val_steps.append(step)
            val_losses.append(val_loss())

    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "mixer.ckpt")
    ckpt.save_mixer(mixer, index.sample_rate, ckpt_path)
    log_path = os.path.join(out_dir, "mixer_loss.csv")
    _write_loss_log(log_path, losses)
    return TrainResult(checkpoint_path=ckpt_path, loss_log_path=log_path,
                       losses=losses, val_steps=val_steps,
                       val_losses=val_losses)

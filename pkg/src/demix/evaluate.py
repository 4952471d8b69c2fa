"""SDR evaluation, synthetic stem generation and TDF weight dumping.

The metric is the energy-ratio SDR over all samples and channels
jointly, reported framewise (non-overlapping 1 s frames by default) with
median aggregation per song and then across songs. Frames whose
reference is exactly silent are skipped; a stem with no scored frames is
reported as a missing value.
"""

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from .dsp import Waveform, wav_write
from .errors import ContractError
from .pipeline import SOURCES, run_pipeline
from .train import DatasetIndex, Song, load_index

SDR_DELTA = 1e-10
SDR_CAP = 100.0


def _as_samples(x):
    return x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)


def sdr(reference, estimate):
    """Multi-channel energy-ratio SDR in dB, capped at +100."""
    ref = _as_samples(reference)
    est = _as_samples(estimate)
    if ref.shape != est.shape:
        raise ContractError(f"sdr: shapes {ref.shape} and {est.shape} differ")
    if ref.size == 0:
        raise ContractError("sdr: empty signals")
    num = np.sum(ref * ref) + SDR_DELTA
    den = np.sum((ref - est) ** 2) + SDR_DELTA
    return min(10.0 * np.log10(num / den), SDR_CAP)


def framewise_sdr(reference, estimate, sample_rate, frame_seconds=1.0):
    """Median over per-frame SDRs; None when every frame is silent.

    Frames are consecutive and non-overlapping; the final partial frame
    is scored too. Returns (median_db or None, frames_used, frames_total).
    """
    if frame_seconds <= 0:
        raise ContractError(f"frame_seconds must be > 0, got {frame_seconds}")
    ref = _as_samples(reference)
    est = _as_samples(estimate)
    if ref.shape != est.shape:
        raise ContractError(
            f"framewise_sdr: shapes {ref.shape} and {est.shape} differ"
        )
    frame_len = max(1, int(round(frame_seconds * sample_rate)))
    total = -(-ref.shape[1] // frame_len)
    values = []
    for i in range(total):
        window = slice(i * frame_len, (i + 1) * frame_len)
        rf = ref[:, window]
        if not rf.any():
            continue
        values.append(sdr(rf, est[:, window]))
    if not values:
        return None, 0, total
    return float(np.median(values)), len(values), total


@dataclass
class SdrRow:
    song: str
    source: str
    median_db: float  # None when all frames were silent
    frames_used: int
    frames_total: int


@dataclass
class SdrReport:
    frame_seconds: float
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)  # source -> median across songs

    def to_csv(self, path):
        """Header ``song,source,median_sdr_db``; per-song rows followed by
        across-song medians under the pseudo-song ALL."""
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["song", "source", "median_sdr_db"])
            for row in self.rows:
                value = "" if row.median_db is None else repr(row.median_db)
                writer.writerow([row.song, row.source, value])
            for source in SOURCES:
                value = self.summary.get(source)
                writer.writerow([
                    "ALL", source, "" if value is None else repr(value)])

    def table(self):
        lines = [f"{'song':<20} " + " ".join(f"{s:>8}" for s in SOURCES)]
        by_song = {}
        for row in self.rows:
            by_song.setdefault(row.song, {})[row.source] = row.median_db
        for song in sorted(by_song):
            cells = [
                "n/a" if by_song[song].get(s) is None
                else f"{by_song[song][s]:.2f}"
                for s in SOURCES
            ]
            lines.append(f"{song:<20} " + " ".join(f"{c:>8}" for c in cells))
        cells = [
            "n/a" if self.summary.get(s) is None else f"{self.summary[s]:.2f}"
            for s in SOURCES
        ]
        lines.append(f"{'MEDIAN':<20} " + " ".join(f"{c:>8}" for c in cells))
        return "\n".join(lines)


def evaluate(index, bundle, mixer=None, weights=None, second_stream=None,
             frame_seconds=1.0):
    """Run the full pipeline on every song and report per-source median
    framewise SDR per song plus the median across songs."""
    report = SdrReport(frame_seconds=frame_seconds)
    per_source = {s: [] for s in SOURCES}
    for song in index.songs:
        mixture = Waveform(song.mixture(), song.sample_rate)
        stems = run_pipeline(mixture, bundle, mixer=mixer, weights=weights,
                             second_stream=second_stream)
        for source in SOURCES:
            median, used, total = framewise_sdr(
                song.stems[source], stems[source].samples,
                song.sample_rate, frame_seconds)
            report.rows.append(SdrRow(song.name, source, median, used, total))
            if median is not None:
                per_source[source].append(median)
    for source in SOURCES:
        values = per_source[source]
        report.summary[source] = float(np.median(values)) if values else None
    return report


# ---------------------------------------------------------------------------
# synthetic stems
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    num_songs: int = 2
    duration_seconds: float = 30.0
    sample_rate: int = 44100
    seed: int = 0

    def __post_init__(self):
        if self.num_songs < 1:
            raise ContractError(f"num_songs must be >= 1, got {self.num_songs}")
        if self.duration_seconds <= 0:
            raise ContractError("duration_seconds must be > 0")


# Stems are quantized to a 2^-18 grid with per-stem peaks ~0.2, so the
# four-stem sum stays below 1.0 and is exact in 32-bit float arithmetic:
# mixture.wav minus the stem files is identically zero.
_GRID = float(2 ** 18)


def _quantize(x):
    return np.round(np.clip(x, -0.24, 0.24) * _GRID) / _GRID


def _stereoize(rng, mono, detune):
    """Two slightly different renderings of a mono recipe."""
    shift = int(rng.integers(7, 23))
    right = np.roll(mono, shift) * (1.0 - detune)
    return np.stack([mono, right])


def _synth_vocals(rng, n, rate):
    """Vibrato sine around G4 with a slow amplitude envelope."""
    t = np.arange(n) / rate
    f0 = 392.0 * (1.0 + 0.02 * rng.standard_normal())
    vib = 15.0 * np.sin(2 * np.pi * 5.0 * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(f0 + vib) / rate
    env = 0.55 + 0.45 * np.sin(2 * np.pi * 0.31 * t + rng.uniform(0, 2 * np.pi))
    mono = 0.2 * env * np.sin(phase)
    return _stereoize(rng, mono, 0.05)


def _synth_drums(rng, n, rate):
    """Decaying low-passed noise bursts roughly twice a second."""
    mono = np.zeros(n)
    period = int(0.5 * rate)
    burst_len = int(0.12 * rate)
    decay = np.exp(-np.arange(burst_len) / (0.025 * rate))
    pos = int(rng.integers(0, period // 2))
    while pos < n:
        seg = min(burst_len, n - pos)
        mono[pos:pos + seg] += rng.standard_normal(seg) * decay[:seg]
        pos += period + int(rng.integers(-period // 8, period // 8 + 1))
    a = 0.7  # one-pole lowpass, truncated impulse response
    kernel = (1 - a) * a ** np.arange(64)
    mono = np.convolve(mono, kernel)[:n]
    peak = np.abs(mono).max()
    mono *= 0.2 / peak if peak > 0 else 1.0
    return _stereoize(rng, mono, 0.1)


def _synth_bass(rng, n, rate):
    """Low sine near 62 Hz with a touch of second harmonic."""
    t = np.arange(n) / rate
    f0 = 62.0 * (1.0 + 0.03 * rng.standard_normal())
    phi = rng.uniform(0, 2 * np.pi)
    env = 0.6 + 0.4 * np.sin(2 * np.pi * 0.17 * t + rng.uniform(0, 2 * np.pi))
    mono = 0.2 * env * (np.sin(2 * np.pi * f0 * t + phi)
                        + 0.3 * np.sin(2 * np.pi * 2 * f0 * t + 2 * phi))
    return _stereoize(rng, mono, 0.03)


def _synth_other(rng, n, rate):
    """Slowly breathing minor-chord pad."""
    t = np.arange(n) / rate
    mono = np.zeros(n)
    for freq, lfo in ((220.0, 0.11), (261.63, 0.13), (329.63, 0.07)):
        amp = 0.5 + 0.5 * np.sin(2 * np.pi * lfo * t + rng.uniform(0, 2 * np.pi))
        mono += amp * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    mono *= 0.2 / np.abs(mono).max()
    return _stereoize(rng, mono, 0.08)


_RECIPES = {
    "vocals": _synth_vocals,
    "drums": _synth_drums,
    "bass": _synth_bass,
    "other": _synth_other,
}


def stem_correlation(a, b):
    """Zero-lag normalized cross-correlation between two stems."""
    x, y = a.reshape(-1), b.reshape(-1)
    denom = np.linalg.norm(x) * np.linalg.norm(y)
    return float(np.dot(x, y) / denom) if denom > 0 else 0.0


def gen_synth_dataset(spec, out_dir):
    """Write per-song stem and mixture WAVs plus the index file.

    Returns (index_path, DatasetIndex). The mixture file is asserted to
    equal the sample-wise sum of the stem files.
    """
    rng = np.random.default_rng(spec.seed)
    n = int(round(spec.duration_seconds * spec.sample_rate))
    os.makedirs(out_dir, exist_ok=True)
    index_path = os.path.join(out_dir, "index.csv")
    songs = []
    lines = []
    for i in range(spec.num_songs):
        name = f"song_{i:03d}"
        song_dir = os.path.join(out_dir, name)
        os.makedirs(song_dir, exist_ok=True)
        stems = {s: _quantize(_RECIPES[s](rng, n, spec.sample_rate))
                 for s in SOURCES}
        for s1 in range(len(SOURCES)):
            for s2 in range(s1 + 1, len(SOURCES)):
                c = abs(stem_correlation(stems[SOURCES[s1]], stems[SOURCES[s2]]))
                if c >= 0.2:
                    raise ContractError(
                        f"{name}: stems {SOURCES[s1]}/{SOURCES[s2]} are "
                        f"correlated (|ncc|={c:.3f} >= 0.2)"
                    )
        mixture = sum(stems[s] for s in SOURCES)
        assert np.array_equal(mixture, sum(stems[s] for s in SOURCES))
        rels = []
        for s in SOURCES:
            rel = f"{name}/{s}.wav"
            wav_write(os.path.join(out_dir, rel), Waveform(stems[s], spec.sample_rate))
            rels.append(rel)
        wav_write(os.path.join(song_dir, "mixture.wav"),
                  Waveform(mixture, spec.sample_rate))
        lines.append(",".join([name] + rels))
        songs.append(Song(name=name, stems=stems, sample_rate=spec.sample_rate))
    with open(index_path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return index_path, DatasetIndex(songs)


# ---------------------------------------------------------------------------
# TDF weight dump
# ---------------------------------------------------------------------------

def dump_tdf_weights(checkpoint_path, block, out_csv):
    """Write the composed F x F frequency map (W2 @ W1) of one TDF block
    as CSV. ``block`` is a forward-order index or a block name."""
    net, _, _, _ = ckpt.load_separator(checkpoint_path)
    blocks = net.tdf_blocks()
    names = [name for name, _ in blocks]
    tdf = None
    if isinstance(block, int) or (isinstance(block, str) and block.isdigit()):
        i = int(block)
        if 0 <= i < len(blocks):
            tdf = blocks[i][1]
    else:
        for name, candidate in blocks:
            if name == block:
                tdf = candidate
    if tdf is None:
        raise ContractError(
            f"no TDF block {block!r}; available: "
            + ", ".join(f"{i}={n}" for i, n in enumerate(names))
        )
    matrix = tdf.composed_matrix()
    np.savetxt(out_csv, matrix, delimiter=",")
    return matrix.shape

"""Flat ``key = value`` configuration files with desk-scale defaults.

Unknown keys are rejected so typos fail loudly; values are coerced to
the type of their default. The full-scale settings from the original
system (11 blocks, g=32, dim_f=2048, dim_t=256, hop 1024, per-source
n_fft 6144/4096/16384/8192) can be selected by overriding the model and
STFT keys.
"""

from .dsp import StftConfig
from .errors import ConfigError
from .model import UNetV2Config
from .pipeline import SOURCES
from .train import TrainConfig

DEFAULTS = {
    # data
    "sample_rate": 44100,
    "audio_channels": 2,
    # model
    "num_blocks": 5,
    "convs_per_block": 3,
    "bn": 8,
    "g": 4,
    "dim_f": 64,
    "dim_t": 32,
    # stft (n_fft may differ per source; hop and dim_f are shared)
    "hop": 128,
    "n_fft_vocals": 512,
    "n_fft_drums": 512,
    "n_fft_bass": 512,
    "n_fft_other": 512,
    "window": "hann",
    # training
    "target": "vocals",
    "learning_rate": 1e-3,
    "rms_alpha": 0.9,
    "rms_eps": 1e-8,
    "steps": 500,
    "batch_size": 4,
    "seed": 0,
    "validation_interval": 100,
    "validation_chunks": 8,
    # augmentation; pitch/time is a reserved hook, only "none" is implemented
    "pitch_time_augmentation": "none",
    # inference / evaluation
    "second_stream": "none",
    "blend_vocals": 1.0,
    "blend_drums": 1.0,
    "blend_bass": 1.0,
    "blend_other": 1.0,
    "frame_seconds": 1.0,
}


def parse_config_text(text, path="<config>"):
    values = dict(DEFAULTS)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        default = DEFAULTS[key]
        try:
            if isinstance(default, int):
                values[key] = int(value)
            elif isinstance(default, float):
                values[key] = float(value)
            else:
                values[key] = value
        except ValueError:
            raise ConfigError(
                f"{path}:{lineno}: cannot parse {value!r} for {key} "
                f"(expected {type(default).__name__})"
            ) from None
    if values["pitch_time_augmentation"] != "none":
        raise ConfigError(
            "pitch_time_augmentation is a reserved hook; only 'none' is implemented"
        )
    return values


def load_config(path=None, overrides=None):
    """defaults <- config file <- explicit overrides."""
    if path is None:
        values = dict(DEFAULTS)
    else:
        with open(path, encoding="utf-8") as f:
            values = parse_config_text(f.read(), path)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config override {key!r}")
        values[key] = type(DEFAULTS[key])(value)
    return values


def model_config(values):
    return UNetV2Config(
        num_blocks=values["num_blocks"],
        convs_per_block=values["convs_per_block"],
        bn=values["bn"],
        dim_f=values["dim_f"],
        dim_t=values["dim_t"],
        g=values["g"],
        in_channels=2 * values["audio_channels"],
    )


def stft_config(values, source):
    if source not in SOURCES:
        raise ConfigError(f"no STFT config for source {source!r}")
    return StftConfig(
        n_fft=values[f"n_fft_{source}"],
        hop=values["hop"],
        dim_f=values["dim_f"],
        window=values["window"],
    )


def train_config(values, target=None):
    return TrainConfig(
        learning_rate=values["learning_rate"],
        rms_alpha=values["rms_alpha"],
        rms_eps=values["rms_eps"],
        steps=values["steps"],
        batch_size=values["batch_size"],
        seed=values["seed"],
        target=target or values["target"],
        validation_interval=values["validation_interval"],
        validation_chunks=values["validation_chunks"],
    )


def blend_weights(values):
    return {s: float(values[f"blend_{s}"]) for s in SOURCES}

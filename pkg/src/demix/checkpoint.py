"""Versioned binary checkpoints with a content checksum.

Layout (all integers little-endian u32):

    b"MDXN" | version | config_len | config JSON (utf-8) | n_params |
    per param: name_len, name, ndim, dims..., float64 LE data |
    crc32 of everything above

Loading verifies magic, version and checksum before parsing, so a
truncated or corrupted file fails with a CheckpointError whose ``code``
names the offending stage ('magic', 'version' or 'checksum').
"""

import json
import struct
import zlib

import numpy as np

from .dsp import StftConfig
from .errors import CheckpointError, ContractError, FormatError
from .model import Mixer, UNetV2Config, build_separator

MAGIC = b"MDXN"
VERSION = 1


def save_checkpoint(kind, config, params, path):
    """params: iterable of Parameters or (name, ndarray) pairs."""
    pairs = []
    for p in params:
        if isinstance(p, tuple):
            pairs.append((p[0], np.asarray(p[1], dtype=np.float64)))
        else:
            pairs.append((p.name, p.data))
    config = dict(config, kind=kind)
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob,
             struct.pack("<I", len(pairs))]
    for name, data in pairs:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.astype("<f8").tobytes())
    body = b"".join(parts)
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_checkpoint(path):
    """Returns (kind, config dict, ordered {name: float64 array})."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) >= 4 and blob[:4] != MAGIC:
        raise CheckpointError("magic", f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 16:
        raise CheckpointError("checksum", f"{path}: truncated ({len(blob)} bytes)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(
            "version", f"{path}: version {version}, this build reads {VERSION}"
        )
    (stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored:
        raise CheckpointError("checksum", f"{path}: content checksum mismatch")

    pos = 8
    (clen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    config = json.loads(blob[pos:pos + clen].decode("utf-8"))
    pos += clen
    (n_params,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    params = {}
    for _ in range(n_params):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(blob, dtype="<f8", count=count, offset=pos)
        pos += 8 * count
        params[name] = data.reshape(shape).astype(np.float64)
    kind = config.pop("kind", "unknown")
    return kind, config, params


def _load_params_into(model, params, path):
    own = {p.name: p for p in model.parameters()}
    if set(own) != set(params):
        missing = sorted(set(own) - set(params))
        extra = sorted(set(params) - set(own))
        raise FormatError(
            f"{path}: parameter names do not match the config "
            f"(missing {missing}, unexpected {extra})"
        )
    for name, data in params.items():
        if own[name].shape != data.shape:
            raise FormatError(
                f"{path}: parameter {name} has shape {data.shape}, "
                f"expected {own[name].shape}"
            )
        own[name].data = data


def save_separator(net, stft_cfg, source, sample_rate, path):
    config = {
        "source": source,
        "sample_rate": sample_rate,
        "u_mode": net.u_mode,
        "model": net.cfg.to_dict(),
        "stft": {"n_fft": stft_cfg.n_fft, "hop": stft_cfg.hop,
                 "dim_f": stft_cfg.dim_f, "window": stft_cfg.window},
    }
    save_checkpoint("separator", config, net.parameters(), path)


def load_separator(path):
    """Returns (net, stft_cfg, source, sample_rate)."""
    kind, config, params = load_checkpoint(path)
    if kind != "separator":
        raise ContractError(f"{path}: checkpoint kind is {kind!r}, not separator")
    cfg = UNetV2Config(**config["model"])
    net = build_separator(cfg, seed=0, u_mode=config.get("u_mode", "multiply"))
    _load_params_into(net, params, path)
    scfg = StftConfig(**config["stft"])
    return net, scfg, config["source"], config["sample_rate"]


def save_mixer(mixer, sample_rate, path):
    config = {
        "num_sources": mixer.num_sources,
        "audio_channels": mixer.audio_channels,
        "sample_rate": sample_rate,
    }
    save_checkpoint("mixer", config, mixer.parameters(), path)


def load_mixer(path):
    kind, config, params = load_checkpoint(path)
    if kind != "mixer":
        raise ContractError(f"{path}: checkpoint kind is {kind!r}, not mixer")
    mixer = Mixer(num_sources=config["num_sources"],
                  audio_channels=config["audio_channels"])
    _load_params_into(mixer, params, path)
    return mixer

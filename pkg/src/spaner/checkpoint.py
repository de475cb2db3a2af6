"""Binary model checkpoints (SPNR files).

Layout, all integers little-endian:

    magic "SPNR" | u32 version | u32 config length | config JSON (UTF-8)
    u32 parameter count, then per parameter:
        u32 name length | name UTF-8 | u8 frozen | u32 ndim | ndim x u32 dims
        float64 values, row-major

The config JSON echoes the model geometry (width, prompt tokens, heads,
projection dim, loss settings, modalities in order), enough to rebuild
the object graph before the parameter bytes are poured back in.  Values
round-trip bitwise: save then load yields identical float64 bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ._binio import ByteReader
from .errors import FormatError
from .losses import ContrastiveConfig
from .model import Parameter, SharedPrompt, SpanerModel
from .tensor import Rng

MAGIC = b"SPNR"
VERSION = 1


def model_config(model: SpanerModel) -> dict:
    """The geometry echo stored in every checkpoint."""
    return {
        "embed_dim": model.width,
        "prompt_tokens": model.prompt.count,
        "heads": model.heads,
        "proj_dim": model.proj_dim,
        "ca_weight": model.ca_weight,
        "temperature": model.loss_config.temperature,
        "symmetric": model.loss_config.symmetric,
        "modalities": [{"tag": tag, "input_dim": dim}
                       for tag, dim in model.modalities.items()],
    }


def save_model(model: SpanerModel, path) -> None:
    """Write the model to `path` in SPNR form."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    config = json.dumps(model_config(model), sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    blob += struct.pack("<I", len(config))
    blob += config
    params = model.parameters()
    blob += struct.pack("<I", len(params))
    for p in params:
        name = p.name.encode("utf-8")
        blob += struct.pack("<I", len(name))
        blob += name
        blob += struct.pack("<B", 1 if p.frozen else 0)
        blob += struct.pack("<I", p.data.ndim)
        blob += struct.pack(f"<{p.data.ndim}I", *p.data.shape)
        blob += np.ascontiguousarray(p.data, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(blob))


def _empty_model(config: dict) -> SpanerModel:
    """Rebuild the object graph with zero weights, ready to be filled."""
    d = int(config["embed_dim"])
    prompt = SharedPrompt(Parameter(np.zeros((int(config["prompt_tokens"]), d)),
                                    name="prompt.tokens"))
    model = SpanerModel(prompt, int(config["heads"]), int(config["proj_dim"]),
                        float(config["ca_weight"]),
                        ContrastiveConfig(float(config["temperature"]),
                                          bool(config["symmetric"])))
    zero = Rng(0)
    for entry in config["modalities"]:
        model.register_modality(str(entry["tag"]), int(entry["input_dim"]), zero)
    return model


def load_model(path) -> SpanerModel:
    """Read an SPNR file back into a model, bit-for-bit."""
    r = ByteReader(Path(path).read_bytes(), path)
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0, expected {MAGIC!r}")
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    config_len = r.u32("config length")
    at = r.offset
    try:
        config = json.loads(r.take(config_len, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise FormatError(f"{path}: unreadable config at byte {at}: {err}")
    try:
        model = _empty_model(config)
    except (KeyError, TypeError, ValueError) as err:
        raise FormatError(f"{path}: invalid config at byte {at}: {err}")

    expected = {p.name: p for p in model.parameters()}
    count = r.u32("parameter count")
    if count != len(expected):
        raise FormatError(
            f"{path}: {count} parameters at byte {r.offset - 4}, "
            f"config implies {len(expected)}")
    for _ in range(count):
        name_at = r.offset
        name = r.take(r.u32("name length"), "name").decode("utf-8")
        if name not in expected:
            raise FormatError(
                f"{path}: unexpected parameter {name!r} at byte {name_at}")
        p = expected[name]
        frozen = r.u8("frozen flag")
        if frozen not in (0, 1):
            raise FormatError(
                f"{path}: bad frozen flag {frozen} at byte {r.offset - 1}")
        ndim = r.u32("rank")
        dims_at = r.offset
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, "shape"))
        if shape != p.data.shape:
            raise FormatError(
                f"{path}: parameter {name!r} has shape {shape} at byte {dims_at}, "
                f"config implies {p.data.shape}")
        values_at = r.offset
        values = np.frombuffer(r.take(8 * p.data.size, "values"), dtype="<f8")
        if not np.all(np.isfinite(values)):
            raise FormatError(
                f"{path}: non-finite value in {name!r} at byte {values_at}")
        p.data[...] = values.reshape(shape)
        if frozen:
            p.freeze()
    r.expect_end()
    return model


def snapshot(model: SpanerModel) -> dict[str, np.ndarray]:
    """Copy every parameter, keyed by name (for freeze audits)."""
    return {p.name: p.data.copy() for p in model.parameters()}


def read_parameters(path) -> dict[str, np.ndarray]:
    """Parameter values from a checkpoint file, keyed by name."""
    return snapshot(load_model(path))

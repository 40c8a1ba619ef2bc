"""PFM depth maps, binary PPM images and the parameter checkpoint container."""

import json
import os
import struct
from collections import OrderedDict
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import FormatError
from .network import AdamState, ModelConfig, ModelParams, init_model
from .tensor import Tensor

_WHITESPACE = b" \t\r\n"


def _token(buf: bytes, pos: int, what: str, comments: bool = False) -> Tuple[bytes, int]:
    """Next whitespace-delimited header token; returns it and the index just past it."""
    while True:
        while pos < len(buf) and buf[pos] in _WHITESPACE:
            pos += 1
        if comments and pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos] not in b"\r\n":
                pos += 1
            continue
        break
    start = pos
    while pos < len(buf) and buf[pos] not in _WHITESPACE:
        pos += 1
    if start == pos:
        raise FormatError(f"missing {what} in header", start)
    return buf[start:pos], pos


def _int_token(buf, pos, what, comments=False):
    tok, end = _token(buf, pos, what, comments)
    try:
        value = int(tok)
    except ValueError:
        raise FormatError(f"bad {what} {tok!r}", end - len(tok)) from None
    if value < 1:
        raise FormatError(f"{what} must be positive, got {value}", end - len(tok))
    return value, end


def _end_of_header(buf: bytes, pos: int) -> int:
    # exactly one whitespace byte separates the header from the payload
    if pos >= len(buf) or buf[pos] not in _WHITESPACE:
        raise FormatError("header not terminated by whitespace", pos)
    return pos + 1


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _write_atomic(path, payload: bytes) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# PFM (single channel "Pf" only)


def parse_pfm(buf: bytes) -> np.ndarray:
    magic, pos = _token(buf, 0, "magic")
    if magic == b"PF":
        raise FormatError("three-channel PFM is not supported; expected 'Pf'", 0)
    if magic != b"Pf":
        raise FormatError(f"not a PFM file (magic {magic[:8]!r})", 0)
    width, pos = _int_token(buf, pos, "width")
    height, pos = _int_token(buf, pos, "height")
    tok, pos = _token(buf, pos, "scale")
    try:
        scale = float(tok)
    except ValueError:
        raise FormatError(f"bad scale {tok!r}", pos - len(tok)) from None
    if scale == 0 or not np.isfinite(scale):
        raise FormatError(f"scale must be finite and nonzero, got {tok!r}", pos - len(tok))
    pos = _end_of_header(buf, pos)
    need = 4 * width * height
    if len(buf) - pos < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {len(buf) - pos}", len(buf))
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(buf, dtype=dtype, count=width * height, offset=pos)
    # rows are stored bottom to top
    return np.flipud(data.reshape(height, width)).astype(np.float32)


def read_pfm(path) -> np.ndarray:
    """Read a single-channel PFM as an (H, W) float32 array."""
    return parse_pfm(_read_bytes(path))


def encode_pfm(depth, little_endian: bool = True) -> bytes:
    arr = np.asarray(getattr(depth, "data", depth), dtype=np.float32)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    if arr.ndim != 2:
        raise FormatError(f"PFM holds a 2-D map, got shape {arr.shape}")
    h, w = arr.shape
    header = f"Pf\n{w} {h}\n{'-1.0' if little_endian else '1.0'}\n".encode("ascii")
    body = np.flipud(arr).astype("<f4" if little_endian else ">f4").tobytes()
    return header + body


def write_pfm(path, depth, little_endian: bool = True) -> None:
    _write_atomic(path, encode_pfm(depth, little_endian))


# ---------------------------------------------------------------------------
# PPM (binary P6, maxval 255)


def parse_ppm(buf: bytes) -> np.ndarray:
    magic, pos = _token(buf, 0, "magic")
    if magic != b"P6":
        raise FormatError(f"only binary P6 PPM is supported (magic {magic[:8]!r})", 0)
    width, pos = _int_token(buf, pos, "width", comments=True)
    height, pos = _int_token(buf, pos, "height", comments=True)
    maxval, pos = _int_token(buf, pos, "maxval", comments=True)
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}; expected 255", pos)
    pos = _end_of_header(buf, pos)
    need = 3 * width * height
    if len(buf) - pos < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {len(buf) - pos}", len(buf))
    raw = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return raw.reshape(height, width, 3).astype(np.float32) / np.float32(255.0)


def read_ppm(path) -> np.ndarray:
    """Read a P6 image as (H, W, 3) float32 in [0, 1]."""
    return parse_ppm(_read_bytes(path))


def encode_ppm(image) -> bytes:
    arr = np.asarray(getattr(image, "data", image), dtype=np.float64)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise FormatError(f"PPM holds an (H, W, 3) image, got shape {arr.shape}")
    h, w, _ = arr.shape
    q = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def write_ppm(path, image) -> None:
    _write_atomic(path, encode_ppm(image))


# ---------------------------------------------------------------------------
# checkpoint container
#
#   b"CAMBCKPT" | u32 version | u32 count
#   count x ( u32 name_len | name utf-8 | u32 rank | rank x u32 extent | float32 payload )
#
# all integers and floats little-endian.  Model parameters use their registry
# names; the model config is stored as "config/json" (one float per byte) and
# optimizer state under "adam/".

MAGIC = b"CAMBCKPT"
VERSION = 1
CONFIG_KEY = "config/json"


def encode_entries(entries: Dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_entries(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    if buf[:len(MAGIC)] != MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    pos = len(MAGIC)

    def take(n, what):
        nonlocal pos
        if len(buf) - pos < n:
            raise FormatError(f"truncated checkpoint while reading {what}", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", len(MAGIC))
    entries: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        start = pos
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8", start + 4) from None
        if name in entries:
            raise FormatError(f"duplicate tensor name {name!r}", start)
        (rank,) = struct.unpack("<I", take(4, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        n = int(np.prod(shape)) if rank else 1
        entries[name] = np.frombuffer(take(4 * n, f"payload of {name!r}"), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last tensor", pos)
    return entries


def _config_to_array(config: ModelConfig) -> np.ndarray:
    text = json.dumps({"stage_channels": list(config.stage_channels),
                       "input_channels": config.input_channels, "reduction": config.reduction,
                       "p": config.p, "use_camb": config.use_camb,
                       "depth_scale": config.depth_scale}, sort_keys=True)
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def _config_from_array(arr: np.ndarray) -> ModelConfig:
    try:
        cfg = json.loads(arr.astype(np.uint8).tobytes().decode("utf-8"))
        return ModelConfig(**cfg)
    except (ValueError, TypeError) as exc:
        raise FormatError(f"unreadable model config in checkpoint: {exc}") from None


def save_checkpoint(params: ModelParams, adam_state: Optional[AdamState], path) -> None:
    entries: Dict[str, np.ndarray] = OrderedDict()
    entries[CONFIG_KEY] = _config_to_array(params.config)
    for name, t in params.registry.items():
        if "/" in name:
            raise FormatError(f"parameter name {name!r} may not contain '/'")
        entries[name] = t.data
    if adam_state is not None:
        entries["adam/step"] = np.array(adam_state.step, dtype=np.float32)
        for name in params.registry:
            entries[f"adam/m/{name}"] = adam_state.m[name]
            entries[f"adam/v/{name}"] = adam_state.v[name]
    _write_atomic(path, encode_entries(entries))


def load_checkpoint(path) -> Tuple[ModelParams, Optional[AdamState]]:
    """Rebuild parameters (and optimizer state if stored) from a checkpoint.

    Nothing is returned unless the whole file decodes.
    """
    entries = decode_entries(_read_bytes(path))
    if CONFIG_KEY not in entries:
        raise FormatError("checkpoint has no model config")
    config = _config_from_array(entries[CONFIG_KEY])
    registry = OrderedDict((n, Tensor(a, requires_grad=True))
                           for n, a in entries.items() if "/" not in n)
    expected = init_model(config).registry
    layout = [(n, t.shape) for n, t in registry.items()]
    if layout != [(n, t.shape) for n, t in expected.items()]:
        raise FormatError("checkpoint tensors do not match the layout of its model config")
    params = ModelParams(config, registry)
    state = None
    if "adam/step" in entries:
        missing = [n for n in registry if f"adam/m/{n}" not in entries or f"adam/v/{n}" not in entries]
        if missing:
            raise FormatError(f"optimizer state missing for {missing[0]!r}")
        state = AdamState({n: entries[f"adam/m/{n}"] for n in registry},
                          {n: entries[f"adam/v/{n}"] for n in registry},
                          int(entries["adam/step"]))
    return params, state


def checkpoint_names(path) -> list:
    return list(decode_entries(_read_bytes(path)))

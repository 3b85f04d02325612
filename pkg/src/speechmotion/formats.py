"""On-disk formats: PCM16 WAV, "MSPC" spectrograms, "MFLD" motion fields and
the "ANCK" tensor container used for translator checkpoints and SVM models.

All multi-byte fields are little-endian.
"""
from __future__ import annotations

import json
import struct
import wave
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .errors import BadCheckpoint, BadConfig, IoError

MSPC_MAGIC = b"MSPC"
MFLD_MAGIC = b"MFLD"
ANCK_MAGIC = b"ANCK"
MSPC_VERSION = 1
MFLD_VERSION = 1
ANCK_VERSION = 1

# ANCK blob dtype codes
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read ({exc.strerror})", path) from exc


def _write_bytes(path, data: bytes):
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoError(f"cannot write ({exc.strerror})", path) from exc


# -- WAV --------------------------------------------------------------------

def write_wav(path, samples: np.ndarray, sample_rate: int):
    """Mono PCM16; samples outside [-1, 1] are clipped."""
    pcm = np.round(np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0) * 32767.0).astype("<i2")
    try:
        with wave.open(str(path), "wb") as fh:
            fh.setnchannels(1)
            fh.setsampwidth(2)
            fh.setframerate(int(sample_rate))
            fh.writeframes(pcm.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write wav ({exc.strerror})", path) from exc


def read_wav(path) -> Tuple[np.ndarray, int]:
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
                raise BadConfig(f"{path}: only mono 16-bit PCM is supported")
            sr = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (OSError, EOFError, wave.Error) as exc:
        raise IoError(f"cannot read wav ({exc})", path) from exc
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0, sr


# -- MSPC spectrogram -------------------------------------------------------

def encode_spectrogram(values: np.ndarray, norm=None) -> bytes:
    values = np.asarray(values)
    if values.ndim != 2:
        raise BadConfig(f"spectrogram must be 2-D, got shape {values.shape}")
    lo, hi = norm if norm is not None else (np.nan, np.nan)
    head = MSPC_MAGIC + struct.pack("<HII2f", MSPC_VERSION, values.shape[0], values.shape[1], lo, hi)
    return head + np.ascontiguousarray(values, dtype="<f4").tobytes()


def decode_spectrogram(data: bytes):
    """Returns ``(values float32, norm or None)``."""
    hsize = 4 + struct.calcsize("<HII2f")
    if len(data) < hsize or data[:4] != MSPC_MAGIC:
        raise BadCheckpoint("not an MSPC spectrogram file (bad magic)")
    version, rows, cols, lo, hi = struct.unpack_from("<HII2f", data, 4)
    if version != MSPC_VERSION:
        raise BadCheckpoint(f"unsupported MSPC version {version}")
    n = rows * cols * 4
    if len(data) != hsize + n:
        raise BadCheckpoint(f"MSPC payload is {len(data) - hsize} bytes, header promises {n}")
    values = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=hsize).reshape(rows, cols).copy()
    norm = None if np.isnan(lo) or np.isnan(hi) else (float(lo), float(hi))
    return values, norm


def save_spectrogram(path, values, norm=None):
    _write_bytes(path, encode_spectrogram(values, norm))


def load_spectrogram(path):
    return decode_spectrogram(_read_bytes(path))


# -- MFLD motion field ------------------------------------------------------

def encode_motion(frames: np.ndarray) -> bytes:
    frames = np.asarray(frames)
    if frames.ndim != 5 or frames.shape[-1] != 3:
        raise BadConfig(f"motion must be (T, X, Y, Z, 3), got {frames.shape}")
    t, x, y, z, _ = frames.shape
    head = MFLD_MAGIC + struct.pack("<HIIII", MFLD_VERSION, t, x, y, z)
    return head + np.ascontiguousarray(frames, dtype="<f4").tobytes()


def decode_motion(data: bytes) -> np.ndarray:
    hsize = 4 + struct.calcsize("<HIIII")
    if len(data) < hsize or data[:4] != MFLD_MAGIC:
        raise BadCheckpoint("not an MFLD motion file (bad magic)")
    version, t, x, y, z = struct.unpack_from("<HIIII", data, 4)
    if version != MFLD_VERSION:
        raise BadCheckpoint(f"unsupported MFLD version {version}")
    count = t * x * y * z * 3
    if len(data) != hsize + 4 * count:
        raise BadCheckpoint("MFLD payload length does not match its header")
    return np.frombuffer(data, dtype="<f4", count=count, offset=hsize).reshape(t, x, y, z, 3).copy()


def save_motion(path, frames):
    _write_bytes(path, encode_motion(frames))


def load_motion(path) -> np.ndarray:
    return decode_motion(_read_bytes(path))


# -- ANCK container ---------------------------------------------------------

def encode_container(header: dict, tensors: Dict[str, np.ndarray]) -> bytes:
    """Magic, version, JSON header, then named tensor blobs.

    Blob layout: u32 name length, name bytes, u8 dtype code, u32 rank,
    u32 dims..., raw little-endian payload.
    """
    hjson = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [ANCK_MAGIC, struct.pack("<HI", ANCK_VERSION, len(hjson)), hjson,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise BadConfig(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<BI{arr.ndim}I", _CODES[dt], arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def decode_container(data: bytes):
    try:
        return _decode_container(data)
    except struct.error as exc:
        raise BadCheckpoint(f"truncated container ({exc})") from exc


def _decode_container(data: bytes):
    if data[:4] != ANCK_MAGIC:
        raise BadCheckpoint("not an ANCK container (bad magic)")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != ANCK_VERSION:
        raise BadCheckpoint(f"unsupported ANCK version {version}")
    pos = 10
    if len(data) < pos + hlen:
        raise BadCheckpoint("truncated container header")
    try:
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BadCheckpoint(f"corrupt container header ({exc})") from exc
    pos += hlen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode("utf-8", errors="replace")
        pos += nlen
        code, rank = struct.unpack_from("<BI", data, pos)
        pos += 5
        if code not in _DTYPES:
            raise BadCheckpoint(f"tensor {name!r}: unknown dtype code {code}")
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > len(data):
            raise BadCheckpoint(f"tensor {name!r} is truncated")
        tensors[name] = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
        pos += nbytes
    if pos != len(data):
        raise BadCheckpoint(f"{len(data) - pos} trailing bytes after the last tensor")
    return header, tensors


def save_container(path, header, tensors):
    _write_bytes(path, encode_container(header, tensors))


def load_container(path):
    return decode_container(_read_bytes(path))

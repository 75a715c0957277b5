"""
Artifact Storage Module.

Reads and writes the files exchanged between pipeline stages:

- AVT1 tensor containers (named tensors, float32 or int16, little-endian)
  with an optional JSON header stored next to them as `<file>.json`;
- mono 16-bit PCM WAV audio;
- JSON and JSON-lines records.

All writers are deterministic: identical inputs give identical bytes.
"""
import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np
import soundfile as sf

import config
from errors import StorageError

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MAGIC = b"AVT1"
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<i2")}
_CODE_FOR_DTYPE = {np.dtype("float32"): 0, np.dtype("int16"): 1}


def _ensure_parent(path: Path) -> None:
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)


# --- Tensor container ---

def encode_tensors(tensors: dict) -> bytes:
    """Serializes named arrays into an AVT1 byte string."""
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name, array in tensors.items():
        array = np.asarray(array)
        code = _CODE_FOR_DTYPE.get(array.dtype.newbyteorder("="))
        if code is None:
            raise StorageError(f"Tensor '{name}' has unsupported dtype {array.dtype}; use float32 or int16.")
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<I", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(struct.pack("<I", code))
        chunks.append(np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes())
    return b"".join(chunks)


def decode_tensors(payload: bytes) -> dict:
    """Parses an AVT1 byte string back into named arrays."""
    if payload[:4] != MAGIC:
        raise StorageError("Not an AVT1 container (bad magic).")
    offset = 4

    def take(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(payload):
            raise StorageError("Truncated AVT1 container.")
        values = struct.unpack_from(fmt, payload, offset)
        offset += size
        return values

    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = take("<I")
        if offset + name_len > len(payload):
            raise StorageError("Truncated AVT1 container (entry name).")
        name = payload[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        (code,) = take("<I")
        if code not in DTYPE_CODES:
            raise StorageError(f"Entry '{name}' has unknown dtype code {code}.")
        dtype = DTYPE_CODES[code]
        n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        if offset + n_bytes > len(payload):
            raise StorageError(f"Entry '{name}' declares {n_bytes} bytes but the payload is shorter.")
        if n_bytes == 0:
            tensors[name] = np.zeros(dims, dtype=dtype.newbyteorder("="))
        else:
            data = np.frombuffer(payload, dtype=dtype, count=n_bytes // dtype.itemsize, offset=offset)
            tensors[name] = data.reshape(dims).astype(dtype.newbyteorder("="), copy=True)
        offset += n_bytes
    if offset != len(payload):
        raise StorageError(f"{len(payload) - offset} trailing bytes after the last AVT1 entry.")
    return tensors


def write_tensors(path: PathLike, tensors: dict) -> Path:
    path = Path(path)
    _ensure_parent(path)
    with open(path, "wb") as f:
        f.write(encode_tensors(tensors))
    return path


def read_tensors(path: PathLike) -> dict:
    with open(path, "rb") as f:
        return decode_tensors(f.read())


def header_path(path: PathLike) -> Path:
    """Location of the JSON header stored next to a container."""
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_container(path: PathLike, tensors: dict, header: dict) -> Path:
    """Writes a tensor container plus its JSON header sidecar."""
    path = write_tensors(path, tensors)
    write_json(header_path(path), header)
    logger.debug(f"Saved {len(tensors)} tensors to {path}")
    return path


def load_container(path: PathLike) -> tuple:
    """Returns (tensors, header) for a container written by save_container."""
    path = Path(path)
    tensors = read_tensors(path)
    sidecar = header_path(path)
    header = read_json(sidecar) if sidecar.exists() else {}
    return tensors, header


# --- Audio ---

def write_wav(path: PathLike, samples: np.ndarray, sample_rate: int) -> Path:
    """Writes mono 16-bit PCM; samples are clipped to [-1, 1]."""
    path = Path(path)
    _ensure_parent(path)
    data = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    sf.write(str(path), data, int(sample_rate), subtype="PCM_16", format="WAV")
    return path


def read_wav(path: PathLike) -> tuple:
    """Returns (samples as float64 in [-1, 1], sample_rate)."""
    data, sample_rate = sf.read(str(path), dtype="float64", always_2d=False)
    if data.ndim != 1:
        raise StorageError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    return data, int(sample_rate)


# --- JSON ---

def write_json(path: PathLike, data) -> Path:
    path = Path(path)
    _ensure_parent(path)
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_json(path: PathLike):
    try:
        with open(path, "r") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise StorageError(f"{path} contains invalid JSON: {e}") from e


def write_jsonl(path: PathLike, records: Iterable[dict]) -> Path:
    path = Path(path)
    _ensure_parent(path)
    with open(path, "w") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True))
            f.write("\n")
    return path


def append_jsonl(path: PathLike, record: dict) -> None:
    path = Path(path)
    _ensure_parent(path)
    with open(path, "a") as f:
        f.write(json.dumps(record, sort_keys=True))
        f.write("\n")


def read_jsonl(path: PathLike) -> list:
    records = []
    with open(path, "r") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise StorageError(f"{path}:{line_no} is not valid JSON: {e}") from e
    return records


def file_digest(path: PathLike, extra: Optional[Iterable[PathLike]] = None) -> str:
    """sha256 over the bytes of one file, optionally followed by others."""
    h = hashlib.sha256()
    for p in [path, *(extra or [])]:
        with open(p, "rb") as f:
            for block in iter(lambda: f.read(1 << 20), b""):
                h.update(block)
    return h.hexdigest()

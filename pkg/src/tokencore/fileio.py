"""Binary matrix/model files and the plain-text config format.

Matrix file layout (little-endian throughout):

    magic   4 bytes  "PYRM"
    version u32      currently 1
    rows    u64
    cols    u64
    data    rows*cols float64, row-major

Model file layout:

    magic   4 bytes  "PYRB"
    version u32      currently 1
    header  7 x u32  layers, heads, dim, ffn_dim, classes, vocab, max_len
    data    all parameters as float64, row-major, in the fixed
            named_parameters order of the stack

Config files are `key = value` lines; `#` starts a comment, blank lines
are ignored, later keys override earlier ones.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError
from .encoder import EncoderStack, init_stack

MATRIX_MAGIC = b"PYRM"
MODEL_MAGIC = b"PYRB"
FORMAT_VERSION = 1


def write_matrix(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.float64))
    if arr.ndim != 2:
        raise InvalidArgumentError(f"matrix files hold 2-D arrays, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<QQ", arr.shape[0], arr.shape[1]))
        fh.write(arr.astype("<f8").tobytes())


def read_matrix(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 24:
        raise InvalidArgumentError(f"{path}: too short for a matrix file")
    if blob[:4] != MATRIX_MAGIC:
        raise InvalidArgumentError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != FORMAT_VERSION:
        raise InvalidArgumentError(f"{path}: unsupported version {version}")
    rows, cols = struct.unpack("<QQ", blob[8:24])
    expected = 24 + rows * cols * 8
    if len(blob) != expected:
        raise InvalidArgumentError(
            f"{path}: payload is {len(blob)} bytes, header implies {expected}"
        )
    data = np.frombuffer(blob, dtype="<f8", offset=24).reshape(rows, cols)
    return data.astype(np.float64)


def write_stack(path, stack: EncoderStack) -> None:
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(
            struct.pack(
                "<7I",
                stack.num_layers, stack.heads, stack.dim, stack.ffn_dim,
                stack.num_classes, stack.vocab_size, stack.max_len,
            )
        )
        for _, param in stack.named_parameters():
            fh.write(np.ascontiguousarray(param, dtype="<f8").tobytes())


def read_stack(path) -> EncoderStack:
    blob = Path(path).read_bytes()
    if len(blob) < 36:
        raise InvalidArgumentError(f"{path}: too short for a model file")
    if blob[:4] != MODEL_MAGIC:
        raise InvalidArgumentError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != FORMAT_VERSION:
        raise InvalidArgumentError(f"{path}: unsupported version {version}")
    layers, heads, dim, ffn_dim, classes, vocab, max_len = struct.unpack("<7I", blob[8:36])
    stack = init_stack(
        layers=layers, heads=heads, dim=dim, ffn_dim=ffn_dim,
        classes=classes, vocab=vocab, max_len=max_len, seed=0,
    )
    offset = 36
    for _, param in stack.named_parameters():
        nbytes = param.size * 8
        if offset + nbytes > len(blob):
            raise InvalidArgumentError(f"{path}: truncated parameter payload")
        values = np.frombuffer(blob, dtype="<f8", count=param.size, offset=offset)
        param[...] = values.reshape(param.shape)
        offset += nbytes
    if offset != len(blob):
        raise InvalidArgumentError(f"{path}: {len(blob) - offset} trailing bytes")
    return stack


# ---------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------


class Config:
    """Typed access over the parsed `key = value` pairs."""

    def __init__(self, values: dict[str, str]):
        self.values = values

    def get_str(self, key: str, default: str = None) -> str:
        if key in self.values:
            return self.values[key]
        if default is None:
            raise InvalidArgumentError(f"config key {key!r} is required")
        return default

    def get_int(self, key: str, default: int = None) -> int:
        return int(self.get_str(key, None if default is None else str(default)))

    def get_float(self, key: str, default: float = None) -> float:
        return float(self.get_str(key, None if default is None else str(default)))

    def get_bool(self, key: str, default: bool = None) -> bool:
        raw = self.get_str(key, None if default is None else str(default)).lower()
        if raw in ("true", "1", "yes"):
            return True
        if raw in ("false", "0", "no"):
            return False
        raise InvalidArgumentError(f"config key {key!r} must be boolean, got {raw!r}")

    def get_list(self, key: str, default: str = None) -> list[str]:
        raw = self.get_str(key, default)
        return [part.strip() for part in raw.split(",") if part.strip()]

    def get_int_list(self, key: str, default: str = None) -> list[int]:
        return [int(v) for v in self.get_list(key, default)]

    def get_float_list(self, key: str, default: str = None) -> list[float]:
        return [float(v) for v in self.get_list(key, default)]


def parse_config(text: str) -> Config:
    """Parse config text; malformed lines are reported with their line
    number."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgumentError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise InvalidArgumentError(f"config line {lineno}: empty key or value in {raw!r}")
        values[key] = value
    return Config(values)


def load_config(path) -> Config:
    return parse_config(Path(path).read_text())

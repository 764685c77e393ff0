"""HGST binary tensors: magic "HGST", uint8 dtype code, uint8 ndim, uint32
dims, then the little-endian row-major payload."""

import struct
from pathlib import Path

import numpy as np

from splatengine.constants import TENSOR_MAGIC
from splatengine.utils.files import atomic_write

DTYPE_CODES = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("u1"),
}
CODES_BY_DTYPE = {dtype: code for code, dtype in DTYPE_CODES.items()}


class TensorFileError(ValueError):
    """An HGST file is malformed."""


def encode_tensor(array: np.ndarray) -> bytes:
    dtype = np.dtype(array.dtype).newbyteorder("<")
    if dtype.kind == "f" and dtype.itemsize == 4:
        dtype = DTYPE_CODES[1]
    if dtype not in CODES_BY_DTYPE:
        raise TensorFileError(f"Unsupported tensor dtype {array.dtype}.")
    array = np.ascontiguousarray(array, dtype=dtype)
    header = TENSOR_MAGIC + struct.pack(
        f"<BB{array.ndim}I", CODES_BY_DTYPE[dtype], array.ndim, *array.shape
    )
    return header + array.tobytes()


def decode_tensor(data: bytes, source: str = "<bytes>") -> np.ndarray:
    if data[:4] != TENSOR_MAGIC:
        raise TensorFileError(
            f"{source} has bad magic {data[:4]!r}, expected {TENSOR_MAGIC!r}."
        )
    if len(data) < 6:
        raise TensorFileError(f"{source} is truncated.")
    code, ndim = struct.unpack("<BB", data[4:6])
    if code not in DTYPE_CODES:
        raise TensorFileError(f"{source} has unknown dtype code {code}.")
    dims_end = 6 + 4 * ndim
    if len(data) < dims_end:
        raise TensorFileError(f"{source} is truncated.")
    shape = struct.unpack(f"<{ndim}I", data[6:dims_end])
    dtype = DTYPE_CODES[code]
    expected = int(np.prod(shape)) * dtype.itemsize
    payload = data[dims_end:]
    if len(payload) != expected:
        raise TensorFileError(
            f"{source} holds {len(payload)} payload bytes, expected "
            f"{expected} for shape {shape}."
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    atomic_write(path, encode_tensor(array))


def read_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    return decode_tensor(path.read_bytes(), str(path))

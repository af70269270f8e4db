"""
RTRL DESK - TSR1 tensor files

Layout (little-endian):
    magic "TSR1" (4 bytes) | dtype code (1 byte: 1=f32, 2=f64) | ndim (1 byte)
    | dims (ndim x u64) | raw scalars, row-major

Scalars are stored with shape [1].
"""

import struct
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from app.autograd.tensor import Tensor
from app.core.errors import ContractError, FormatError

MAGIC = b"TSR1"
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
CODE_OF = {4: 1, 8: 2}


def encode_tensor(array: Union[np.ndarray, Tensor]) -> bytes:
    data = array.data if isinstance(array, Tensor) else np.asarray(array)
    if data.ndim == 0:
        data = data.reshape(1)
    code = CODE_OF.get(data.dtype.itemsize) if data.dtype.kind == "f" else None
    if code is None:
        raise ContractError(f"tensor files hold float32 or float64 data, got {data.dtype}")
    if data.ndim > 255:
        raise ContractError(f"tensor rank {data.ndim} exceeds the format limit of 255")
    header = MAGIC + struct.pack("<BB", code, data.ndim) + struct.pack(f"<{data.ndim}Q", *data.shape)
    return header + np.ascontiguousarray(data, dtype=DTYPE_CODES[code]).tobytes()


def decode_tensor(buffer: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Decode one tensor starting at offset; returns (array, offset past its payload)"""
    if len(buffer) - offset < 6:
        raise FormatError("truncated tensor header", offset=offset)
    if buffer[offset:offset + 4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buffer[offset:offset + 4])!r}, expected {MAGIC!r}", offset=offset)
    code, ndim = struct.unpack_from("<BB", buffer, offset + 4)
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}", offset=offset + 4)
    cursor = offset + 6
    if len(buffer) - cursor < 8 * ndim:
        raise FormatError(f"truncated dims: need {8 * ndim} bytes", offset=cursor)
    shape = struct.unpack_from(f"<{ndim}Q", buffer, cursor)
    cursor += 8 * ndim
    dtype = DTYPE_CODES[code]
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    nbytes = count * dtype.itemsize
    if len(buffer) - cursor < nbytes:
        raise FormatError(f"truncated payload: need {nbytes} bytes, have {len(buffer) - cursor}", offset=cursor)
    data = np.frombuffer(buffer, dtype=dtype, count=count, offset=cursor).reshape(shape)
    return data.astype(dtype.newbyteorder("="), copy=True), cursor + nbytes


def tensor_file_write(path: Union[str, Path], tensor: Union[np.ndarray, Tensor]) -> None:
    Path(path).write_bytes(encode_tensor(tensor))


def tensor_file_read(path: Union[str, Path]) -> Tensor:
    buffer = Path(path).read_bytes()
    data, end = decode_tensor(buffer)
    if end != len(buffer):
        raise FormatError(f"{len(buffer) - end} trailing bytes after tensor payload", offset=end)
    return Tensor._wrap(data)

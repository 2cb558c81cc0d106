"""
Binary tensor format and parameter manifests.

Tensor file layout (little endian):
    magic "SPGT" | dtype code u8 | 3 reserved bytes | four u32 extents | raw values

Tensors of rank < 4 are stored with leading extents of 1; the manifest that
accompanies a parameter set records each tensor's logical shape.
"""

import logging
import os
import struct
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import SerializationError
from .tensor import DType, Tensor

logger = logging.getLogger(__name__)

MAGIC = b"SPGT"
HEADER = struct.Struct("<4sB3x4I")
HEADER_SIZE = HEADER.size  # 24 bytes


def _padded_extents(shape: Tuple[int, ...]) -> Tuple[int, int, int, int]:
    return tuple([1] * (4 - len(shape)) + list(shape))


def encode_tensor(tensor: Tensor) -> bytes:
    extents = _padded_extents(tensor.shape)
    header = HEADER.pack(MAGIC, tensor.dtype.code, *extents)
    payload = tensor.data.astype(tensor.dtype.numpy.newbyteorder("<"), copy=False).tobytes(order="C")
    return header + payload


def decode_tensor(blob: bytes, shape: Optional[Tuple[int, ...]] = None, source: str = "<bytes>") -> Tensor:
    """
    Decode a tensor blob.

    Args:
        blob: encoded bytes
        shape: logical shape to restore (defaults to the four stored extents)
        source: label used in error messages
    """
    if len(blob) < HEADER_SIZE:
        raise SerializationError(source, f"truncated header ({len(blob)} bytes)")
    magic, code, *extents = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise SerializationError(source, f"bad magic {magic!r}")
    try:
        dtype = DType.from_code(code)
    except ValueError as e:
        raise SerializationError(source, str(e)) from None
    count_ = int(np.prod(extents))
    expected = HEADER_SIZE + count_ * dtype.numpy.itemsize
    if len(blob) != expected:
        raise SerializationError(source, f"payload length {len(blob)} != expected {expected}")
    values = np.frombuffer(blob, dtype=dtype.numpy.newbyteorder("<"), count=count_, offset=HEADER_SIZE)
    values = values.reshape(extents)
    if shape is not None:
        if int(np.prod(shape)) != count_:
            raise SerializationError(source, f"manifest shape {list(shape)} does not match extents {extents}")
        values = values.reshape(tuple(shape))
    return Tensor(values, dtype=dtype)


def save_tensor(path: str, tensor: Tensor) -> str:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "wb") as f:
        f.write(encode_tensor(tensor))
    logger.debug(f"Saved tensor {list(tensor.shape)} to {path}")
    return path


def load_tensor(path: str, shape: Optional[Tuple[int, ...]] = None) -> Tensor:
    if not os.path.isfile(path):
        raise SerializationError(path, "file not found")
    with open(path, "rb") as f:
        blob = f.read()
    return decode_tensor(blob, shape=shape, source=path)


def save_tensor_set(directory: str, tensors: Dict[str, Tensor], roles: Dict[str, str]) -> List[Dict]:
    """
    Write each tensor as `<name>.spgt` and return manifest entries.

    Args:
        directory: destination directory
        tensors: name -> tensor
        roles: name -> role label recorded in the manifest
    """
    os.makedirs(directory, exist_ok=True)
    entries = []
    for name, tensor in tensors.items():
        filename = f"{name}.spgt"
        save_tensor(os.path.join(directory, filename), tensor)
        entries.append({
            "name": name,
            "role": roles.get(name, "parameter"),
            "shape": list(tensor.shape),
            "dtype": tensor.dtype.value,
            "file": filename,
        })
    return entries


def load_tensor_set(directory: str, entries: List[Dict]) -> Dict[str, Tensor]:
    tensors = {}
    for entry in entries:
        try:
            name, filename, shape = entry["name"], entry["file"], tuple(entry["shape"])
        except KeyError as e:
            raise SerializationError(directory, f"manifest entry missing {e}") from None
        tensors[name] = load_tensor(os.path.join(directory, filename), shape=shape)
    return tensors

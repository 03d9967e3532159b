# SPDX-FileCopyrightText: 2025 Luis Villa <luis@lu.is>
#
# SPDX-License-Identifier: BlueOak-1.0.0

"""Utility functions for cycle-interpret: flat-binary arrays, hashing, devices, seeds."""

import hashlib
import json
import os
import random
from pathlib import Path

import numpy as np
import torch

# Flat binary layout for every persisted array: little-endian, row-major.
ARRAY_DTYPES = {
    'float32': '<f4',
    'float64': '<f8',
    'int64': '<i8',
}


def write_array(path: Path | str, array: np.ndarray, dtype: str = 'float32') -> dict:
    """
    Write an array as raw little-endian values.

    Args:
        path: Destination file
        array: Array to write (converted to dtype)
        dtype: One of ARRAY_DTYPES

    Returns:
        Descriptor dict with 'shape' and 'dtype' for the accompanying JSON manifest
    """
    if dtype not in ARRAY_DTYPES:
        raise ValueError(f"Invalid dtype '{dtype}'. Must be one of: {list(ARRAY_DTYPES)}")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(array, dtype=ARRAY_DTYPES[dtype])
    data.tofile(path)
    return {'shape': list(data.shape), 'dtype': dtype}


def read_array(path: Path | str, shape, dtype: str = 'float32') -> np.ndarray:
    """
    Read an array written by write_array.

    Args:
        path: Source file
        shape: Dimensions recorded in the manifest
        dtype: One of ARRAY_DTYPES

    Returns:
        Array in native byte order
    """
    if dtype not in ARRAY_DTYPES:
        raise ValueError(f"Invalid dtype '{dtype}'. Must be one of: {list(ARRAY_DTYPES)}")

    shape = tuple(int(s) for s in shape)
    data = np.fromfile(Path(path), dtype=ARRAY_DTYPES[dtype])
    expected = int(np.prod(shape)) if shape else 1
    if data.size != expected:
        raise ValueError(f"{path}: expected {expected} values for shape {shape}, found {data.size}")
    return data.reshape(shape).astype(np.dtype(ARRAY_DTYPES[dtype]).newbyteorder('='))


def write_json(path: Path | str, payload: dict) -> None:
    """Write JSON with sorted keys so identical payloads give identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write('\n')


def read_json(path: Path | str) -> dict:
    """Load a JSON document."""
    with open(path, 'r') as f:
        return json.load(f)


def file_sha256(path: Path | str) -> str:
    """Content hash of a single file."""
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def directory_sha256(path: Path | str) -> str:
    """
    Content hash of a directory tree (relative names and bytes, in sorted order).

    Args:
        path: Directory to hash

    Returns:
        Hex digest stable across machines
    """
    root = Path(path)
    digest = hashlib.sha256()
    for item in sorted(p for p in root.rglob('*') if p.is_file()):
        digest.update(item.relative_to(root).as_posix().encode())
        digest.update(file_sha256(item).encode())
    return digest.hexdigest()


def get_device() -> torch.device:
    """Torch device from INTERPRET_DEVICE (default: cpu)."""
    return torch.device(os.getenv('INTERPRET_DEVICE', 'cpu'))


def seed_everything(seed: int) -> torch.Generator:
    """
    Seed python, numpy and torch, and return a dedicated torch generator.

    Args:
        seed: Run seed

    Returns:
        torch.Generator seeded with the same value, for data shuffling
    """
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator

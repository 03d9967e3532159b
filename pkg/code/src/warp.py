# SPDX-FileCopyrightText: 2025 Luis Villa <luis@lu.is>
#
# SPDX-License-Identifier: BlueOak-1.0.0

"""Differentiable warping, diffusion smoothness energy and log-Jacobian maps.

Displacements are in voxel units with one channel per spatial axis, in axis
order. The warped image samples the source at v + u(v) (pull-back).
"""

import itertools
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from utils import read_array, read_json, write_array, write_json

logger = logging.getLogger(__name__)

DETERMINANT_FLOOR = 1e-6


@dataclass
class WarpField:
    """Dense displacement field u with d channels over a d-dimensional grid."""

    u: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u)
        if self.u.ndim < 3 or self.u.shape[0] != self.u.ndim - 1:
            raise ValueError(f"Displacement must be (d, *grid) with d channels, got shape {self.u.shape}")
        if not np.all(np.isfinite(self.u)):
            raise ValueError("Displacement field contains non-finite values")

    @property
    def grid(self) -> tuple:
        return tuple(self.u.shape[1:])

    @property
    def dims(self) -> int:
        return self.u.shape[0]

    def to_tensor(self, dtype=torch.float64) -> torch.Tensor:
        """Batched tensor (1, d, *grid)."""
        return torch.as_tensor(self.u, dtype=dtype).unsqueeze(0)

    def save(self, path: Path | str) -> Path:
        """Write <path>.f32 and <path>.json (channel count and grid recorded)."""
        path = Path(path)
        info = write_array(path.with_suffix('.f32'), self.u, 'float32')
        meta = path.with_suffix('.json')
        write_json(meta, {'kind': 'warp_field', 'channels': self.dims, 'grid': list(self.grid),
                          'file': path.with_suffix('.f32').name, **info})
        return meta

    @classmethod
    def load(cls, path: Path | str) -> 'WarpField':
        meta = read_json(Path(path).with_suffix('.json'))
        return cls(read_array(Path(path).with_suffix('.f32'), meta['shape'], meta['dtype']))


def identity_grid(spatial, dtype=torch.float64, device=None) -> torch.Tensor:
    """Voxel coordinates, shape (d, *spatial)."""
    axes = [torch.arange(s, dtype=dtype, device=device) for s in spatial]
    return torch.stack(torch.meshgrid(*axes, indexing='ij'))


def _check_pair(image: torch.Tensor, displacement: torch.Tensor) -> None:
    dims = image.dim() - 2
    if dims not in (2, 3):
        raise ValueError(f"Image must be (B, C, H, W) or (B, C, D, H, W), got shape {tuple(image.shape)}")
    expected = (image.shape[0], dims) + tuple(image.shape[2:])
    if tuple(displacement.shape) != expected:
        raise ValueError(f"Displacement shape {tuple(displacement.shape)} does not match image grid {expected}")


def apply_warp(image: torch.Tensor, displacement: torch.Tensor) -> torch.Tensor:
    """
    Warp images by linear interpolation at v + u(v), clamping samples to the border.

    Differentiable with respect to both image and displacement.

    Args:
        image: (B, C, *spatial)
        displacement: (B, d, *spatial) in voxel units

    Returns:
        Warped images, same shape as image
    """
    _check_pair(image, displacement)
    spatial = tuple(image.shape[2:])
    batch, channels = image.shape[:2]
    coords = identity_grid(spatial, displacement.dtype, displacement.device).unsqueeze(0) + displacement

    lower, upper, frac = [], [], []
    for axis, size in enumerate(spatial):
        position = coords[:, axis].clamp(0, size - 1)
        floor = position.detach().floor()
        frac.append(position - floor)
        index = floor.long()
        lower.append(index)
        upper.append((index + 1).clamp(max=size - 1))

    strides = [int(np.prod(spatial[axis + 1:])) for axis in range(len(spatial))]
    flat = image.reshape(batch, channels, -1)

    warped = None
    for corner in itertools.product((0, 1), repeat=len(spatial)):
        index = 0
        weight = None
        for axis, bit in enumerate(corner):
            index = index + (upper[axis] if bit else lower[axis]) * strides[axis]
            w = frac[axis] if bit else 1 - frac[axis]
            weight = w if weight is None else weight * w
        gathered = flat.gather(2, index.reshape(batch, 1, -1).expand(-1, channels, -1))
        term = weight.unsqueeze(1) * gathered.reshape(image.shape)
        warped = term if warped is None else warped + term
    return warped


def smoothness_energy(displacement: torch.Tensor, lambda_phi: float) -> torch.Tensor:
    """
    Diffusion regularizer lambda * sum_v |grad u(v)|^2 with forward differences.

    Differences are taken over interior voxel pairs along every axis and summed
    over all channels; a batch returns the mean of per-field energies.

    Args:
        displacement: (B, d, *spatial)
        lambda_phi: Non-negative weight

    Returns:
        Scalar tensor
    """
    if lambda_phi < 0:
        raise ValueError(f"lambda_phi must be >= 0, got {lambda_phi}")
    dims = displacement.dim() - 2
    per_field = displacement.new_zeros(displacement.shape[0])
    for axis in range(dims):
        diff = torch.diff(displacement, dim=axis + 2)
        per_field = per_field + diff.pow(2).flatten(1).sum(dim=1)
    return lambda_phi * per_field.mean()


class LogJacobian(NamedTuple):
    values: np.ndarray
    clamped: int


def jacobian_determinant(displacement: torch.Tensor) -> torch.Tensor:
    """
    det(I + du/dv) per voxel with central differences (one-sided at borders).

    Args:
        displacement: (B, d, *spatial)

    Returns:
        Determinants shaped (B, *spatial)
    """
    dims = displacement.dim() - 2
    if dims not in (2, 3) or displacement.shape[1] != dims:
        raise ValueError(f"Displacement must be (B, d, *spatial) with d channels, got shape "
                         f"{tuple(displacement.shape)}")

    rows = []
    for i in range(dims):
        grads = torch.gradient(displacement[:, i], dim=tuple(range(1, dims + 1)), edge_order=1)
        rows.append(torch.stack(grads, dim=-1))
    jac = torch.stack(rows, dim=-2) + torch.eye(dims, dtype=displacement.dtype, device=displacement.device)
    return torch.linalg.det(jac)


def log_jacobian_map(field) -> LogJacobian:
    """
    Voxelwise log det(I + du/dv); negative values mark shrinkage, positive expansion.

    Determinants below 1e-6 are clamped to the floor before the log and counted.

    Args:
        field: WarpField or displacement array/tensor (d, *spatial)

    Returns:
        LogJacobian(values, clamped)
    """
    u = field.u if isinstance(field, WarpField) else field
    u = u.detach() if torch.is_tensor(u) else u
    u = torch.as_tensor(u, dtype=torch.float64)
    if u.dim() - 1 != u.shape[0]:
        raise ValueError(f"Displacement must be (d, *grid), got shape {tuple(u.shape)}")
    det = jacobian_determinant(u.unsqueeze(0))[0]
    clamped = int((det < DETERMINANT_FLOOR).sum())
    if clamped:
        logger.warning(f"{clamped} voxels with Jacobian determinant below {DETERMINANT_FLOOR} were clamped")
    return LogJacobian(torch.log(det.clamp(min=DETERMINANT_FLOOR)).numpy(), clamped)

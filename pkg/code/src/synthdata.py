# SPDX-FileCopyrightText: 2025 Luis Villa <luis@lu.is>
#
# SPDX-License-Identifier: BlueOak-1.0.0

"""Synthetic two-group Gaussian-blob datasets with per-image ground truth.

Each image holds one Gaussian blob per block of a 2x2 (or 2x2x2) block grid.
Two designated blobs carry the group difference through their magnitude; the
others are subject-specific nuisance.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from utils import read_array, read_json, write_array, write_json

logger = logging.getLogger(__name__)

DEFAULT_SHAPE_2D = (32, 32)
DEFAULT_SHAPE_3D = (32, 32, 32)
DEFAULT_NOISE_SD = 0.002
DEFAULT_BLOB_WIDTH = 3.0
DEFAULT_TRAIN_FRACTION = 0.8

# Magnitude ranges: informative blobs per group, nuisance blobs for both.
INFORMATIVE_RANGES = {0: (1.0, 5.0), 1: (4.0, 8.0)}
NUISANCE_RANGE = (1.0, 6.0)

# Block indices (per axis, 0 = low half, 1 = high half).
# 2D: off-diagonal = top-right and bottom-left.
BLOCKS_2D = {
    'nuisance': [(0, 0), (1, 1)],
    'informative': [(0, 1), (1, 0)],
}
# 3D: 4 of the 8 octants are used, 2 of them informative.
BLOCKS_3D = {
    'nuisance': [(0, 0, 0), (1, 1, 1)],
    'informative': [(0, 1, 1), (1, 0, 0)],
}

SPLITS = ('train', 'test')


@dataclass
class BlobSpec:
    """One isotropic Gaussian blob."""

    center: Tuple[float, ...]
    magnitude: float
    width: float = DEFAULT_BLOB_WIDTH
    informative: bool = False

    def __post_init__(self):
        self.center = tuple(float(c) for c in self.center)
        if not self.magnitude > 0:
            raise ValueError(f"Blob magnitude must be > 0, got {self.magnitude}")
        if not self.width > 0:
            raise ValueError(f"Blob width must be > 0, got {self.width}")

    def to_dict(self) -> dict:
        return {
            'center': list(self.center),
            'magnitude': self.magnitude,
            'width': self.width,
            'informative': self.informative,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'BlobSpec':
        return cls(
            center=tuple(data['center']),
            magnitude=data['magnitude'],
            width=data['width'],
            informative=data.get('informative', False),
        )


@dataclass
class ImageSample:
    """A single 2D or 3D scalar image with its group label."""

    pixels: np.ndarray
    group: int
    subject_id: int
    blobs: List[BlobSpec] = field(default_factory=list)
    split: str = 'train'

    def __post_init__(self):
        if self.group not in (0, 1):
            raise ValueError(f"Group must be 0 or 1, got {self.group}")
        if self.split not in SPLITS:
            raise ValueError(f"Invalid split '{self.split}'. Must be one of: {SPLITS}")


@dataclass
class SyntheticDataset:
    """Collection of samples sharing one grid, with a train/test split per sample."""

    samples: List[ImageSample]
    shape: Tuple[int, ...]
    rng_seed: int
    noise_sd: float = DEFAULT_NOISE_SD
    blob_width: float = DEFAULT_BLOB_WIDTH

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        for sample in self.samples:
            if tuple(sample.pixels.shape) != self.shape:
                raise ValueError(
                    f"Sample {sample.subject_id} has shape {sample.pixels.shape}, "
                    f"dataset shape is {self.shape}"
                )

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def dims(self) -> int:
        return len(self.shape)

    def select(self, group: Optional[int] = None, split: Optional[str] = None) -> List[ImageSample]:
        """
        Filter samples by group and/or split.

        Args:
            group: 0, 1 or None for both
            split: 'train', 'test' or None for both

        Returns:
            Matching samples in dataset order
        """
        return [
            s for s in self.samples
            if (group is None or s.group == group) and (split is None or s.split == split)
        ]

    def as_arrays(self, split: Optional[str] = None, group: Optional[int] = None):
        """
        Stack pixels, labels and subject ids of a subset.

        Returns:
            (images, labels, subject_ids) with images shaped (N, 1, *shape)
        """
        chosen = self.select(group=group, split=split)
        if not chosen:
            empty = np.zeros((0, 1) + self.shape, dtype=np.float32)
            return empty, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        images = np.stack([s.pixels for s in chosen])[:, None].astype(np.float32)
        labels = np.array([s.group for s in chosen], dtype=np.int64)
        ids = np.array([s.subject_id for s in chosen], dtype=np.int64)
        return images, labels, ids

    def by_id(self, subject_id: int) -> ImageSample:
        for sample in self.samples:
            if sample.subject_id == subject_id:
                return sample
        raise KeyError(f"No sample with subject_id {subject_id}")

    def save(self, directory: Path | str) -> Path:
        """
        Persist as dataset.json plus one flat float32 file per sample.

        Args:
            directory: Target dataset directory (created if missing)

        Returns:
            Path to the written dataset.json
        """
        directory = Path(directory)
        (directory / 'samples').mkdir(parents=True, exist_ok=True)

        entries = []
        for sample in self.samples:
            rel = f"samples/{sample.subject_id:06d}.f32"
            write_array(directory / rel, sample.pixels, 'float32')
            entries.append({
                'subject_id': sample.subject_id,
                'group': sample.group,
                'split': sample.split,
                'file': rel,
                'blobs': [b.to_dict() for b in sample.blobs],
            })

        manifest = {
            'shape': list(self.shape),
            'dtype': 'float32',
            'byte_order': 'little',
            'rng_seed': self.rng_seed,
            'noise_sd': self.noise_sd,
            'blob_width': self.blob_width,
            'samples': entries,
        }
        path = directory / 'dataset.json'
        write_json(path, manifest)
        logger.info(f"Saved {len(self.samples)} samples to {directory}")
        return path

    @classmethod
    def load(cls, directory: Path | str) -> 'SyntheticDataset':
        """Load a dataset directory written by save()."""
        directory = Path(directory)
        manifest_path = directory / 'dataset.json'
        if not manifest_path.exists():
            raise FileNotFoundError(f"No dataset.json in {directory}")

        manifest = read_json(manifest_path)
        shape = tuple(manifest['shape'])
        samples = []
        for entry in manifest['samples']:
            samples.append(ImageSample(
                pixels=read_array(directory / entry['file'], shape, manifest.get('dtype', 'float32')),
                group=entry['group'],
                subject_id=entry['subject_id'],
                blobs=[BlobSpec.from_dict(b) for b in entry.get('blobs', [])],
                split=entry['split'],
            ))
        return cls(
            samples=samples,
            shape=shape,
            rng_seed=manifest['rng_seed'],
            noise_sd=manifest.get('noise_sd', DEFAULT_NOISE_SD),
            blob_width=manifest.get('blob_width', DEFAULT_BLOB_WIDTH),
        )


def _check_center(center: Sequence[float], shape: Sequence[int]) -> None:
    if len(center) != len(shape):
        raise ValueError(f"Blob center {tuple(center)} does not match grid dimensionality {len(shape)}")
    for c, size in zip(center, shape):
        if not 0 <= c <= size - 1:
            raise ValueError(f"Blob center {tuple(center)} lies outside grid {tuple(shape)}")


def render_blobs(blobs: Sequence[BlobSpec], shape: Sequence[int], unit_magnitude: bool = False) -> np.ndarray:
    """
    Noise-free superposition of Gaussian blobs on a voxel grid.

    Args:
        blobs: Blobs to render
        shape: Grid dimensions
        unit_magnitude: Render every blob with magnitude 1 (pattern support)

    Returns:
        float64 array of the given shape
    """
    shape = tuple(int(s) for s in shape)
    coords = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing='ij')
    image = np.zeros(shape, dtype=np.float64)
    for blob in blobs:
        _check_center(blob.center, shape)
        sq_dist = sum((axis - c) ** 2 for axis, c in zip(coords, blob.center))
        magnitude = 1.0 if unit_magnitude else blob.magnitude
        image += magnitude * np.exp(-sq_dist / (2.0 * blob.width ** 2))
    return image


def gen_gaussian_image(
    blobs: Sequence[BlobSpec],
    noise_sd: float,
    shape: Sequence[int],
    rng: np.random.Generator,
) -> np.ndarray:
    """
    Render blobs and add i.i.d. Gaussian noise.

    Args:
        blobs: Non-empty list of blobs
        noise_sd: Noise standard deviation (>= 0); not clipped
        shape: Grid dimensions
        rng: Random stream for the noise

    Returns:
        float64 image
    """
    if not blobs:
        raise ValueError("At least one blob is required")
    if noise_sd < 0:
        raise ValueError(f"noise_sd must be >= 0, got {noise_sd}")

    image = render_blobs(blobs, shape)
    if noise_sd > 0:
        image = image + rng.normal(0.0, noise_sd, size=image.shape)
    return image


def _block_center(rng: np.random.Generator, block: Sequence[int], shape: Sequence[int]) -> Tuple[float, ...]:
    # Uniform inside the central half of the block so blobs never straddle block borders.
    center = []
    for index, size in zip(block, shape):
        half = size / 2.0
        low = index * half + half / 4.0
        center.append(float(rng.uniform(low, low + half / 2.0)))
    return tuple(center)


def _sample_blobs(rng: np.random.Generator, group: int, shape, blocks: dict, width: float) -> List[BlobSpec]:
    blobs = []
    for block in blocks['nuisance']:
        blobs.append(BlobSpec(
            center=_block_center(rng, block, shape),
            magnitude=float(rng.uniform(*NUISANCE_RANGE)),
            width=width,
            informative=False,
        ))
    for block in blocks['informative']:
        blobs.append(BlobSpec(
            center=_block_center(rng, block, shape),
            magnitude=float(rng.uniform(*INFORMATIVE_RANGES[group])),
            width=width,
            informative=True,
        ))
    return blobs


def _generate(
    n_per_group: int,
    shape: Sequence[int],
    seed: int,
    blocks: dict,
    noise_sd: float,
    blob_width: float,
    train_fraction: float,
) -> SyntheticDataset:
    if n_per_group < 2:
        raise ValueError(f"n_per_group must be >= 2, got {n_per_group}")
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    for size in shape:
        if size < 4 or size % 2:
            raise ValueError(f"Grid dimensions must be even and >= 4, got {tuple(shape)}")

    rng = np.random.default_rng(seed)
    samples = []
    subject_id = 0
    n_train = math.ceil(train_fraction * n_per_group)

    for group in (0, 1):
        train_idx = set(rng.permutation(n_per_group)[:n_train].tolist())
        for i in range(n_per_group):
            blobs = _sample_blobs(rng, group, shape, blocks, blob_width)
            pixels = gen_gaussian_image(blobs, noise_sd, shape, rng).astype(np.float32)
            samples.append(ImageSample(
                pixels=pixels,
                group=group,
                subject_id=subject_id,
                blobs=blobs,
                split='train' if i in train_idx else 'test',
            ))
            subject_id += 1

    logger.info(f"Generated {len(samples)} images of shape {tuple(shape)} (seed {seed})")
    return SyntheticDataset(
        samples=samples,
        shape=tuple(shape),
        rng_seed=seed,
        noise_sd=noise_sd,
        blob_width=blob_width,
    )


def gen_dataset(
    n_per_group: int = 512,
    shape: Sequence[int] = DEFAULT_SHAPE_2D,
    seed: int = 0,
    noise_sd: float = DEFAULT_NOISE_SD,
    blob_width: float = DEFAULT_BLOB_WIDTH,
    train_fraction: float = DEFAULT_TRAIN_FRACTION,
) -> SyntheticDataset:
    """
    Generate the two-group 2D blob dataset.

    Group 0 draws the off-diagonal magnitudes from U(1,5), group 1 from U(4,8);
    diagonal magnitudes come from U(1,6) for both groups.

    Args:
        n_per_group: Images per group (>= 2)
        shape: 2D grid, each side even
        seed: Seed for the whole dataset
        noise_sd: Additive noise standard deviation
        blob_width: Gaussian sigma in pixels
        train_fraction: Fraction of each group tagged 'train' (rounded up)

    Returns:
        SyntheticDataset
    """
    if len(shape) != 2:
        raise ValueError(f"gen_dataset expects a 2D shape, got {tuple(shape)}")
    return _generate(n_per_group, shape, seed, BLOCKS_2D, noise_sd, blob_width, train_fraction)


def gen_dataset_3d(
    n_per_group: int = 512,
    shape: Sequence[int] = DEFAULT_SHAPE_3D,
    seed: int = 0,
    noise_sd: float = DEFAULT_NOISE_SD,
    blob_width: float = DEFAULT_BLOB_WIDTH,
    train_fraction: float = DEFAULT_TRAIN_FRACTION,
) -> SyntheticDataset:
    """Volumetric analogue of gen_dataset: 4 blobs in 4 of the 8 octants, 2 informative."""
    if len(shape) != 3:
        raise ValueError(f"gen_dataset_3d expects a 3D shape, got {tuple(shape)}")
    return _generate(n_per_group, shape, seed, BLOCKS_3D, noise_sd, blob_width, train_fraction)


def ground_truth_pattern(sample: ImageSample) -> np.ndarray:
    """
    Support of the group-separating pattern for one image.

    Renders the sample's informative blobs with unit magnitude and no noise.

    Args:
        sample: Sample carrying blob metadata

    Returns:
        float64 map on the sample grid
    """
    informative = [b for b in sample.blobs if b.informative]
    if not informative:
        raise ValueError(f"Sample {sample.subject_id} carries no blob metadata")
    return render_blobs(informative, sample.pixels.shape, unit_magnitude=True)


def group_difference_map(dataset: SyntheticDataset, split: Optional[str] = None) -> np.ndarray:
    """
    Noise-free group-mean difference (group 1 minus group 0).

    Args:
        dataset: Dataset with blob metadata
        split: Restrict to one split, or None for all samples

    Returns:
        float64 map on the dataset grid
    """
    means = []
    for group in (0, 1):
        chosen = dataset.select(group=group, split=split)
        if not chosen:
            raise ValueError(f"No samples of group {group} in split {split}")
        if any(not s.blobs for s in chosen):
            raise ValueError("Group difference map needs blob metadata on every sample")
        total = np.zeros(dataset.shape, dtype=np.float64)
        for sample in chosen:
            total += render_blobs(sample.blobs, dataset.shape)
        means.append(total / len(chosen))
    return means[1] - means[0]


def block_of(position: Sequence[float], shape: Sequence[int]) -> Tuple[int, ...]:
    """Block index (0/1 per axis) containing a voxel position."""
    return tuple(int(p >= size / 2.0) for p, size in zip(position, shape))


def informative_blocks(dims: int) -> List[Tuple[int, ...]]:
    return list((BLOCKS_2D if dims == 2 else BLOCKS_3D)['informative'])

# SPDX-FileCopyrightText: 2025 Luis Villa <luis@lu.is>
#
# SPDX-License-Identifier: BlueOak-1.0.0

"""Baseline saliency maps: BP, guided BP, Grad-CAM, guided Grad-CAM, occlusion."""

import itertools
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.interpolate import RegularGridInterpolator

from layers import predict_logits
from training import balanced_accuracy
from utils import read_array, read_json, write_array, write_json

logger = logging.getLogger(__name__)

METHODS = ('bp', 'guided-bp', 'grad-cam', 'guided-grad-cam', 'occlusion')


@dataclass
class SaliencyMap:
    """Importance map on the image grid; occlusion maps also keep their coarse grid."""

    values: np.ndarray
    method: str
    subject_id: Optional[int] = None
    coarse: Optional[np.ndarray] = None
    window: Optional[Sequence[int]] = None
    stride: Optional[int] = None
    classifier_hash: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"Invalid method '{self.method}'. Must be one of: {METHODS}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"{self.method} map contains non-finite values")

    def save(self, path: Path | str) -> Path:
        """Write <path>.f32 (+ <path>.coarse.f32) and <path>.json metadata."""
        path = Path(path)
        meta = {
            'method': self.method,
            'subject_id': self.subject_id,
            'window': list(self.window) if self.window is not None else None,
            'stride': self.stride,
            'classifier_hash': self.classifier_hash,
            'values': {'file': path.name + '.f32', **write_array(path.parent / (path.name + '.f32'), self.values)},
            'extra': self.extra,
        }
        if self.coarse is not None:
            meta['coarse'] = {'file': path.name + '.coarse.f32',
                              **write_array(path.parent / (path.name + '.coarse.f32'), self.coarse)}
        meta_path = path.parent / (path.name + '.json')
        write_json(meta_path, meta)
        return meta_path

    @classmethod
    def load(cls, path: Path | str) -> 'SaliencyMap':
        path = Path(path)
        meta = read_json(path.parent / (path.name + '.json'))
        values = read_array(path.parent / meta['values']['file'], meta['values']['shape'])
        coarse = None
        if 'coarse' in meta:
            coarse = read_array(path.parent / meta['coarse']['file'], meta['coarse']['shape'])
        return cls(values=values, method=meta['method'], subject_id=meta['subject_id'], coarse=coarse,
                   window=meta['window'], stride=meta['stride'], classifier_hash=meta['classifier_hash'],
                   extra=meta.get('extra', {}))


def _input_tensor(model: nn.Module, x) -> torch.Tensor:
    reference = next(model.parameters())
    image = torch.as_tensor(x.pixels if hasattr(x, 'pixels') else x,
                            dtype=reference.dtype, device=reference.device)
    while image.dim() < getattr(model, 'dims', image.dim() - 2) + 2:
        image = image.unsqueeze(0)
    if image.shape[0] != 1:
        raise ValueError("Subject-level saliency takes exactly one image")
    return image.detach().clone().requires_grad_(True)


def _logit(model: nn.Module, image: torch.Tensor) -> torch.Tensor:
    return model(image).reshape(-1)[0]


def _input_gradient(model: nn.Module, x) -> np.ndarray:
    model.eval()
    image = _input_tensor(model, x)
    (grad,) = torch.autograd.grad(_logit(model, image), image)
    return grad[0, 0].detach().cpu().numpy()


def _subject(x) -> Optional[int]:
    return getattr(x, 'subject_id', None)


def saliency_bp(P: nn.Module, X) -> SaliencyMap:
    """Signed input gradient dp/dX."""
    return SaliencyMap(values=_input_gradient(P, X), method='bp', subject_id=_subject(X))


@contextmanager
def guided_relus(model: nn.Module):
    """Make every nn.ReLU pass back only positive gradients at positive activations."""

    def hook(module, grad_input, grad_output):
        # grad_input already carries the forward mask; drop negative upstream signal too.
        return (torch.clamp(grad_input[0], min=0.0),)

    handles = [m.register_full_backward_hook(hook) for m in model.modules() if isinstance(m, nn.ReLU)]
    try:
        yield model
    finally:
        for handle in handles:
            handle.remove()


def saliency_guided_bp(P: nn.Module, X) -> SaliencyMap:
    """Guided backpropagation map."""
    with guided_relus(P):
        values = _input_gradient(P, X)
    return SaliencyMap(values=values, method='guided-bp', subject_id=_subject(X))


def _resolve_layer(model: nn.Module, layer: Optional[str]) -> nn.Module:
    if layer is None:
        layer = getattr(model, 'default_cam_layer', None)
        if layer is None:
            raise ValueError("Model has no default Grad-CAM layer; pass a layer id")
    modules = dict(model.named_modules())
    if layer not in modules:
        raise ValueError(f"Unknown layer id '{layer}'. Available: {[n for n in modules if n]}")
    return modules[layer]


def _upsample(cam: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
    mode = 'bilinear' if len(size) == 2 else 'trilinear'
    return F.interpolate(cam, size=tuple(size), mode=mode, align_corners=False)


def grad_cam(P: nn.Module, X, layer: Optional[str] = None) -> SaliencyMap:
    """
    Grad-CAM: ReLU of the gradient-weighted sum of target-layer activations.

    Args:
        P: Classifier
        X: One image
        layer: Module name from named_modules(); defaults to the classifier's last conv stack

    Returns:
        SaliencyMap up-sampled to the input grid, coarse map attached
    """
    target = _resolve_layer(P, layer)
    captured = {}

    def hook(module, inputs, output):
        captured['activation'] = output

    P.eval()
    handle = target.register_forward_hook(hook)
    try:
        image = _input_tensor(P, X)
        logit = _logit(P, image)
    finally:
        handle.remove()

    activation = captured['activation']
    (grad,) = torch.autograd.grad(logit, activation)
    spatial_axes = tuple(range(2, activation.dim()))
    weights = grad.mean(dim=spatial_axes, keepdim=True)
    coarse = F.relu((weights * activation).sum(dim=1, keepdim=True))
    full = _upsample(coarse, image.shape[2:])
    return SaliencyMap(
        values=full[0, 0].detach().cpu().numpy(),
        method='grad-cam',
        subject_id=_subject(X),
        coarse=coarse[0, 0].detach().cpu().numpy(),
    )


def guided_grad_cam(P: nn.Module, X, layer: Optional[str] = None) -> SaliencyMap:
    """Elementwise product of the Grad-CAM map and the guided-BP map."""
    cam = grad_cam(P, X, layer)
    guided = saliency_guided_bp(P, X)
    return SaliencyMap(values=cam.values * guided.values, method='guided-grad-cam', subject_id=_subject(X))


# ── Occlusion (population level) ────────────────────────────────


def window_positions(shape: Sequence[int], window: Sequence[int], stride: int) -> list:
    """Start indices of every window position, per axis."""
    if len(window) != len(shape):
        raise ValueError(f"Window {tuple(window)} does not match image dimensionality {len(shape)}")
    if any(w > s for w, s in zip(window, shape)):
        raise ValueError(f"Window {tuple(window)} is larger than image {tuple(shape)}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    return [list(range(0, s - w + 1, stride)) for s, w in zip(shape, window)]


def _to_full_resolution(coarse: np.ndarray, centers: list, shape: Sequence[int]) -> np.ndarray:
    if any(len(c) < 2 for c in centers):
        return np.broadcast_to(coarse.mean(), tuple(shape)).copy()
    interpolator = RegularGridInterpolator([np.asarray(c, dtype=np.float64) for c in centers], coarse)
    grid = np.meshgrid(*[np.clip(np.arange(s, dtype=np.float64), c[0], c[-1]) for s, c in zip(shape, centers)],
                       indexing='ij')
    points = np.stack([g.ravel() for g in grid], axis=-1)
    return interpolator(points).reshape(tuple(shape))


def occlusion_map(
    P: nn.Module,
    images,
    labels,
    window: Optional[Sequence[int]] = None,
    stride: int = 4,
    fill: float = 0.0,
    batch_size: int = 256,
) -> SaliencyMap:
    """
    Population-level occlusion sensitivity.

    For every window position the window is overwritten with `fill` in all
    test images and the balanced accuracy is recomputed; the drop from the
    unoccluded baseline is assigned to the window center.

    Args:
        P: Classifier
        images: Test images (N, 1, *spatial), both groups present
        labels: Group labels (N,)
        window: Window extent per axis (default 8 along every axis)
        stride: Step between window positions
        fill: Value written into the window

    Returns:
        SaliencyMap with the coarse drop grid and its linear interpolation to full resolution
    """
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.ndim < 4 or images.shape[0] != labels.shape[0]:
        raise ValueError("Occlusion needs a labeled image population shaped (N, 1, *spatial)")
    if len(np.unique(labels)) < 2:
        raise ValueError("Occlusion is population-level: the data must contain both groups")

    shape = images.shape[2:]
    window = tuple(window) if window is not None else (8,) * len(shape)
    starts = window_positions(shape, window, stride)

    baseline = balanced_accuracy(predict_logits(P, images, batch_size), labels)
    coarse = np.zeros([len(s) for s in starts], dtype=np.float64)
    for index in itertools.product(*[range(len(s)) for s in starts]):
        occluded = images.copy()
        region = (slice(None), slice(None)) + tuple(
            slice(starts[a][i], starts[a][i] + window[a]) for a, i in enumerate(index)
        )
        occluded[region] = fill
        coarse[index] = baseline - balanced_accuracy(predict_logits(P, occluded, batch_size), labels)

    centers = [[s + w // 2 for s in axis] for axis, w in zip(starts, window)]
    logger.info(f"Occlusion: {coarse.size} window positions, baseline balanced accuracy {baseline:.3f}")
    return SaliencyMap(
        values=_to_full_resolution(coarse, centers, shape),
        method='occlusion',
        coarse=coarse,
        window=window,
        stride=stride,
        extra={'baseline_accuracy': baseline, 'centers': centers, 'fill': fill},
    )


def top_positions(saliency: SaliencyMap, k: int = 5) -> list:
    """Centers of the k largest coarse occlusion drops, largest first."""
    if saliency.coarse is None or 'centers' not in saliency.extra:
        raise ValueError("top_positions needs an occlusion map")
    centers = saliency.extra['centers']
    flat = np.argsort(-saliency.coarse, axis=None, kind='stable')[:k]
    return [tuple(centers[a][i] for a, i in enumerate(np.unravel_index(f, saliency.coarse.shape))) for f in flat]


def compute_saliency(method: str, P: nn.Module, X, layer: Optional[str] = None) -> SaliencyMap:
    """Dispatch a subject-level method by name; occlusion is rejected here."""
    if method == 'bp':
        return saliency_bp(P, X)
    if method == 'guided-bp':
        return saliency_guided_bp(P, X)
    if method == 'grad-cam':
        return grad_cam(P, X, layer)
    if method == 'guided-grad-cam':
        return guided_grad_cam(P, X, layer)
    if method == 'occlusion':
        raise ValueError("Occlusion is population-level and cannot explain a single image; use occlusion_map")
    raise ValueError(f"Invalid method '{method}'. Must be one of: {METHODS}")

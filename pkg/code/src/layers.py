# SPDX-FileCopyrightText: 2025 Luis Villa <luis@lu.is>
#
# SPDX-License-Identifier: BlueOak-1.0.0

"""Network building blocks: conditional convolution, classifier, coupled simulator.

Also holds the checkpoint format (architecture.json + flat binary parameters).
"""

import logging
import math
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from utils import directory_sha256, read_array, read_json, write_array, write_json
from warp import apply_warp

logger = logging.getLogger(__name__)

MODES = ('direct-image', 'warp-field')
COUPLINGS = ('condconv', 'separate-encoders')
LEAKY_SLOPE = 0.01

CONV = {2: nn.Conv2d, 3: nn.Conv3d}
CONV_FN = {2: F.conv2d, 3: F.conv3d}
BATCH_NORM = {2: nn.BatchNorm2d, 3: nn.BatchNorm3d}
MAX_POOL = {2: nn.MaxPool2d, 3: nn.MaxPool3d}


def _check_dims(dims: int) -> None:
    if dims not in (2, 3):
        raise ValueError(f"dims must be 2 or 3, got {dims}")


def task_tensor(t, reference: torch.Tensor) -> torch.Tensor:
    """
    Broadcast a task label to one value per batch element.

    Args:
        t: 0/1 scalar, sequence or tensor
        reference: Batch tensor supplying batch size, dtype and device

    Returns:
        Tensor of shape (B,)
    """
    batch = reference.shape[0]
    task = torch.as_tensor(t, dtype=reference.dtype, device=reference.device)
    if task.dim() == 0:
        task = task.expand(batch)
    task = task.reshape(-1)
    if task.shape[0] != batch:
        raise ValueError(f"Task labels for {task.shape[0]} images, batch has {batch}")
    if not bool(((task == 0) | (task == 1)).all()):
        raise ValueError("Task labels must be 0 (inject) or 1 (remove)")
    return task


def route_weights(f: torch.Tensor, t, routing: torch.Tensor) -> torch.Tensor:
    """
    Expert weights alpha_k = sigmoid(<[mean_v f(v), t], R_k>).

    Args:
        f: Feature map (B, C, *spatial)
        t: Task label(s)
        routing: Routing matrix (K, C + 1)

    Returns:
        Tensor (B, K) with entries in (0, 1)
    """
    if routing.dim() != 2:
        raise ValueError(f"Routing parameters must be 2D (K, C+1), got shape {tuple(routing.shape)}")
    if f.dim() < 3:
        raise ValueError(f"Feature map must be (B, C, *spatial), got shape {tuple(f.shape)}")
    if routing.shape[1] != f.shape[1] + 1:
        raise ValueError(
            f"Routing dimension {routing.shape[1]} does not match {f.shape[1]} channels + task label"
        )
    pooled = f.flatten(2).mean(dim=2)
    task = task_tensor(t, f).unsqueeze(1)
    return torch.sigmoid(torch.cat([pooled, task], dim=1) @ routing.t())


class CondConv(nn.Module):
    """Convolution whose kernel is a per-sample mixture of K expert kernels."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        experts: int = 3,
        dims: int = 2,
        activation: Optional[nn.Module] = None,
    ):
        super().__init__()
        _check_dims(dims)
        if experts < 1:
            raise ValueError(f"experts must be >= 1, got {experts}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.experts = experts
        self.dims = dims
        self.weight = nn.Parameter(torch.empty(experts, out_channels, in_channels, *([kernel_size] * dims)))
        self.routing = nn.Parameter(torch.empty(experts, in_channels + 1))
        self.activation = activation if activation is not None else nn.Identity()
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for k in range(self.experts):
            nn.init.kaiming_uniform_(self.weight[k], a=math.sqrt(5))
        bound = 1.0 / math.sqrt(self.in_channels + 1)
        nn.init.uniform_(self.routing, -bound, bound)

    def mixed_kernel(self, alpha: torch.Tensor) -> torch.Tensor:
        """Per-sample kernel sum_k alpha_k W_k, shape (B, out, in, *kernel)."""
        return torch.einsum('bk,koi...->boi...', alpha, self.weight)

    def forward(self, f: torch.Tensor, t, alpha: Optional[torch.Tensor] = None) -> torch.Tensor:
        if f.dim() != self.dims + 2 or f.shape[1] != self.in_channels:
            raise ValueError(
                f"Expected input (B, {self.in_channels}, *{self.dims}D), got shape {tuple(f.shape)}"
            )
        batch = f.shape[0]
        if alpha is None:
            alpha = route_weights(f, t, self.routing)
        else:
            alpha = torch.as_tensor(alpha, dtype=f.dtype, device=f.device)
            if alpha.dim() == 1:
                alpha = alpha.unsqueeze(0).expand(batch, -1)
            if alpha.shape != (batch, self.experts):
                raise ValueError(f"alpha must have shape ({batch}, {self.experts}), got {tuple(alpha.shape)}")

        # One grouped convolution: each sample convolved with its own mixed kernel.
        kernel = self.mixed_kernel(alpha).reshape(batch * self.out_channels, self.in_channels,
                                                  *([self.kernel_size] * self.dims))
        merged = f.reshape(1, batch * self.in_channels, *f.shape[2:])
        out = CONV_FN[self.dims](merged, kernel, padding=self.kernel_size // 2, groups=batch)
        return self.activation(out.reshape(batch, self.out_channels, *f.shape[2:]))


def condconv_forward(f: torch.Tensor, t, layer: CondConv) -> torch.Tensor:
    """Apply a CondConv layer for task t."""
    return layer(f, t)


class StaticConv(nn.Module):
    """Conventional convolution with the CondConv call signature (task label ignored)."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        dims: int = 2,
        activation: Optional[nn.Module] = None,
    ):
        super().__init__()
        _check_dims(dims)
        self.conv = CONV[dims](in_channels, out_channels, kernel_size, padding=kernel_size // 2, bias=False)
        self.activation = activation if activation is not None else nn.Identity()

    def forward(self, f: torch.Tensor, t=None) -> torch.Tensor:
        return self.activation(self.conv(f))


class ConvStack(nn.Module):
    """Task-aware convolution, BatchNorm, LeakyReLU."""

    def __init__(self, conv: nn.Module, channels: int, dims: int):
        super().__init__()
        self.conv = conv
        self.norm = BATCH_NORM[dims](channels)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)

    def forward(self, f: torch.Tensor, t) -> torch.Tensor:
        return self.act(self.norm(self.conv(f, t)))


# ── Classifier ──────────────────────────────────────────────────


class LogitClassifier(nn.Module):
    """Conv/ReLU/max-pool stacks followed by a one-hidden-layer perceptron, one logit out."""

    def __init__(
        self,
        dims: int = 2,
        input_shape: Sequence[int] = (32, 32),
        channels: Sequence[int] = (2, 4, 8),
        hidden: int = 16,
        kernel_size: int = 3,
    ):
        super().__init__()
        _check_dims(dims)
        if len(input_shape) != dims:
            raise ValueError(f"input_shape {tuple(input_shape)} does not match dims={dims}")
        factor = 2 ** len(channels)
        if any(s % factor for s in input_shape):
            raise ValueError(f"input_shape {tuple(input_shape)} must be divisible by {factor}")

        self.dims = dims
        self.input_shape = tuple(int(s) for s in input_shape)
        self.channels = tuple(int(c) for c in channels)
        self.hidden = hidden
        self.kernel_size = kernel_size

        stacks = []
        previous = 1
        for width in self.channels:
            stacks.append(nn.Sequential(
                CONV[dims](previous, width, kernel_size, padding=kernel_size // 2),
                nn.ReLU(),
                MAX_POOL[dims](2),
            ))
            previous = width
        self.stacks = nn.ModuleList(stacks)
        self.flatten_size = self.channels[-1] * int(np.prod([s // factor for s in self.input_shape]))
        self.head = nn.Sequential(
            nn.Flatten(),
            nn.Linear(self.flatten_size, hidden),
            nn.ReLU(),
            nn.Linear(hidden, 1),
        )
        # Uninformative logit (p = 0) until trained.
        nn.init.zeros_(self.head[3].weight)
        nn.init.zeros_(self.head[3].bias)

    @property
    def default_cam_layer(self) -> str:
        """Activation of the last convolutional stack (before pooling)."""
        return f"stacks.{len(self.stacks) - 1}.1"

    def features(self, x: torch.Tensor) -> torch.Tensor:
        for stack in self.stacks:
            x = stack(x)
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x)).squeeze(-1)

    def descriptor(self) -> dict:
        return {
            'kind': 'classifier',
            'dims': self.dims,
            'input_shape': list(self.input_shape),
            'channels': list(self.channels),
            'hidden': self.hidden,
            'kernel_size': self.kernel_size,
        }


def build_classifier_2d(input_shape: Sequence[int] = (32, 32)) -> LogitClassifier:
    """Synthetic-experiment classifier: channels {2,4,8}, hidden layer of 16."""
    return LogitClassifier(dims=2, input_shape=input_shape, channels=(2, 4, 8), hidden=16)


def build_classifier_3d(input_shape: Sequence[int] = (64, 64, 64)) -> LogitClassifier:
    """Volumetric classifier: channels {16,32,64,16}, hidden layer of 64."""
    return LogitClassifier(dims=3, input_shape=input_shape, channels=(16, 32, 64, 16), hidden=64)


def freeze(model: nn.Module) -> nn.Module:
    """Make a model non-trainable and switch it to inference mode."""
    for param in model.parameters():
        param.requires_grad_(False)
    model.eval()
    return model


def is_frozen(model: nn.Module) -> bool:
    return not any(p.requires_grad for p in model.parameters())


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _as_batch(images, model: nn.Module) -> torch.Tensor:
    reference = next(model.parameters())
    return torch.as_tensor(images, dtype=reference.dtype, device=reference.device)


def classify(P: LogitClassifier, X) -> float:
    """
    Logit of a single image; p > 0 labels it group 1.

    Args:
        P: Trained classifier
        X: ImageSample, or an array/tensor shaped like the classifier input (with or without
           batch and channel axes)

    Returns:
        Scalar logit
    """
    pixels = X.pixels if hasattr(X, 'pixels') else X
    image = _as_batch(pixels, P)
    while image.dim() < P.dims + 2:
        image = image.unsqueeze(0)
    P.eval()
    with torch.no_grad():
        return float(P(image)[0])


def predict_logits(P: LogitClassifier, images, batch_size: int = 256) -> np.ndarray:
    """Logits for a stack of images shaped (N, 1, *spatial)."""
    batch = _as_batch(images, P)
    P.eval()
    outputs = []
    with torch.no_grad():
        for start in range(0, batch.shape[0], batch_size):
            outputs.append(P(batch[start:start + batch_size]).cpu())
    if not outputs:
        return np.zeros(0, dtype=np.float64)
    return torch.cat(outputs).double().numpy()


# ── Coupled simulator ───────────────────────────────────────────


class Encoder(nn.Module):
    """Conv stacks with max-pooling, then a fully connected bottleneck."""

    def __init__(self, conv_factory, channels: Sequence[int], dims: int, input_shape: Sequence[int],
                 bottleneck: int):
        super().__init__()
        self.dims = dims
        self.stacks = nn.ModuleList()
        previous = 1
        for width in channels:
            self.stacks.append(ConvStack(conv_factory(previous, width), width, dims))
            previous = width
        self.pool = MAX_POOL[dims](2)
        factor = 2 ** len(channels)
        self.code_shape = (channels[-1],) + tuple(s // factor for s in input_shape)
        flat = int(np.prod(self.code_shape))
        self.fc = nn.Sequential(
            nn.Linear(flat, bottleneck),
            nn.ReLU(),
            nn.Linear(bottleneck, flat),
            nn.ReLU(),
        )

    def forward(self, x: torch.Tensor, t) -> Tuple[torch.Tensor, list]:
        skips = []
        for stack in self.stacks:
            x = stack(x, t)
            skips.append(x)
            x = self.pool(x)
        code = self.fc(x.flatten(1)).reshape(x.shape[0], *self.code_shape)
        return code, skips


class Decoder(nn.Module):
    """Mirror of the encoder: nearest up-sampling, skip concatenation, conv stacks, output head."""

    def __init__(self, conv_factory, head_factory, channels: Sequence[int], dims: int, out_channels: int):
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode='nearest')
        self.stacks = nn.ModuleList()
        previous = channels[-1]
        for width in reversed(channels):
            self.stacks.append(ConvStack(conv_factory(previous + width, width), width, dims))
            previous = width
        self.head = head_factory(previous, out_channels)

    def forward(self, code: torch.Tensor, skips: list, t) -> torch.Tensor:
        x = code
        for stack, skip in zip(self.stacks, reversed(skips)):
            x = stack(torch.cat([self.up(x), skip], dim=1), t)
        return self.head(x, t)


DEFAULT_SIMULATOR = {
    2: {'channels': (1, 2, 4, 8), 'bottleneck': 64, 'input_shape': (32, 32)},
    3: {'channels': (16, 32, 64, 16, 16), 'bottleneck': 512, 'input_shape': (64, 64, 64)},
}


class CoupledSimulator(nn.Module):
    """
    One task-conditioned U-net realizing both simulators.

    t = 0 injects the group-1 pattern (G1), t = 1 removes it (G2). In
    'direct-image' mode the network predicts an additive change of the image;
    in 'warp-field' mode it predicts a displacement field that warps the input.
    """

    def __init__(
        self,
        mode: str = 'direct-image',
        dims: int = 2,
        input_shape: Optional[Sequence[int]] = None,
        channels: Optional[Sequence[int]] = None,
        bottleneck: Optional[int] = None,
        experts: int = 3,
        coupling: str = 'condconv',
        kernel_size: int = 3,
    ):
        super().__init__()
        _check_dims(dims)
        if mode not in MODES:
            raise ValueError(f"Invalid mode '{mode}'. Must be one of: {MODES}")
        if coupling not in COUPLINGS:
            raise ValueError(f"Invalid coupling '{coupling}'. Must be one of: {COUPLINGS}")

        defaults = DEFAULT_SIMULATOR[dims]
        self.mode = mode
        self.dims = dims
        self.input_shape = tuple(int(s) for s in (input_shape or defaults['input_shape']))
        self.channels = tuple(int(c) for c in (channels or defaults['channels']))
        self.bottleneck = int(bottleneck or defaults['bottleneck'])
        self.experts = experts
        self.coupling = coupling
        self.kernel_size = kernel_size

        if len(self.input_shape) != dims:
            raise ValueError(f"input_shape {self.input_shape} does not match dims={dims}")
        factor = 2 ** len(self.channels)
        if any(s % factor for s in self.input_shape):
            raise ValueError(f"input_shape {self.input_shape} must be divisible by {factor}")

        if coupling == 'condconv':
            def conv_factory(cin, cout):
                return CondConv(cin, cout, kernel_size, experts, dims)
            n_encoders = 1
        else:
            def conv_factory(cin, cout):
                return StaticConv(cin, cout, kernel_size, dims)
            n_encoders = 2

        def head_factory(cin, cout):
            head = conv_factory(cin, cout)
            # Zero output at initialization: identity simulation.
            with torch.no_grad():
                (head.weight if isinstance(head, CondConv) else head.conv.weight).zero_()
            return head

        out_channels = 1 if mode == 'direct-image' else dims
        self.encoders = nn.ModuleList([
            Encoder(conv_factory, self.channels, dims, self.input_shape, self.bottleneck)
            for _ in range(n_encoders)
        ])
        self.decoder = Decoder(conv_factory, head_factory, self.channels, dims, out_channels)

    def _encoder_for(self, task: torch.Tensor) -> Encoder:
        if len(self.encoders) == 1:
            return self.encoders[0]
        if not bool((task == task[0]).all()):
            raise ValueError("Separate encoders need one task label per batch")
        return self.encoders[int(task[0].item())]

    def forward(self, x: torch.Tensor, t) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        """
        Simulate task t on a batch.

        Args:
            x: Images (B, 1, *spatial)
            t: Task label(s), 0 = inject, 1 = remove

        Returns:
            (simulated images, displacement field or None)
        """
        if x.dim() != self.dims + 2 or x.shape[1] != 1 or tuple(x.shape[2:]) != self.input_shape:
            raise ValueError(f"Expected images (B, 1, *{self.input_shape}), got shape {tuple(x.shape)}")
        task = task_tensor(t, x)
        code, skips = self._encoder_for(task)(x, task)
        out = self.decoder(code, skips, task)
        if self.mode == 'direct-image':
            return x + out, None
        return apply_warp(x, out), out

    def descriptor(self) -> dict:
        return {
            'kind': 'simulator',
            'mode': self.mode,
            'dims': self.dims,
            'input_shape': list(self.input_shape),
            'channels': list(self.channels),
            'bottleneck': self.bottleneck,
            'experts': self.experts,
            'coupling': self.coupling,
            'kernel_size': self.kernel_size,
        }


def build_simulator(
    mode: str = 'direct-image',
    dims: int = 2,
    input_shape: Optional[Sequence[int]] = None,
    experts: int = 3,
    coupling: str = 'condconv',
) -> CoupledSimulator:
    """Coupled simulator with the default architecture for 2D or 3D images."""
    return CoupledSimulator(mode=mode, dims=dims, input_shape=input_shape, experts=experts, coupling=coupling)


# ── Checkpoints ─────────────────────────────────────────────────


def build_from_descriptor(descriptor: dict) -> nn.Module:
    """Instantiate an untrained model from an architecture descriptor."""
    kwargs = dict(descriptor)
    kind = kwargs.pop('kind', None)
    if kind == 'classifier':
        return LogitClassifier(**kwargs)
    if kind == 'simulator':
        return CoupledSimulator(**kwargs)
    raise ValueError(f"Unknown model kind '{kind}' in architecture descriptor")


def save_checkpoint(model: nn.Module, directory: Path | str) -> Path:
    """
    Write architecture.json and one flat binary file per parameter/buffer.

    Args:
        model: Model with a descriptor() method
        directory: Checkpoint directory (replaced contents)

    Returns:
        Path to architecture.json
    """
    directory = Path(directory)
    (directory / 'params').mkdir(parents=True, exist_ok=True)

    entries = []
    for name, tensor in model.state_dict().items():
        dtype = 'float32' if tensor.is_floating_point() else 'int64'
        rel = f"params/{name}.bin"
        info = write_array(directory / rel, tensor.detach().cpu().numpy(), dtype)
        entries.append({'name': name, 'file': rel, **info})

    path = directory / 'architecture.json'
    write_json(path, {'descriptor': model.descriptor(), 'parameters': entries, 'byte_order': 'little'})
    logger.info(f"Saved {model.descriptor()['kind']} checkpoint to {directory}")
    return path


def load_checkpoint(directory: Path | str, frozen: bool = False) -> nn.Module:
    """
    Rebuild a model from a checkpoint directory.

    Args:
        directory: Directory written by save_checkpoint
        frozen: Freeze the loaded model (classifiers used for interpretation)

    Returns:
        Model in eval mode
    """
    directory = Path(directory)
    path = directory / 'architecture.json'
    if not path.exists():
        raise FileNotFoundError(f"No architecture.json in {directory}")

    manifest = read_json(path)
    model = build_from_descriptor(manifest['descriptor'])
    state = {}
    for entry in manifest['parameters']:
        array = read_array(directory / entry['file'], entry['shape'], entry['dtype'])
        state[entry['name']] = torch.from_numpy(array.copy())
    model.load_state_dict(state)
    model.eval()
    return freeze(model) if frozen else model


def checkpoint_hash(directory: Path | str) -> str:
    return directory_sha256(directory)

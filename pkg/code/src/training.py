# SPDX-FileCopyrightText: 2025 Luis Villa <luis@lu.is>
#
# SPDX-License-Identifier: BlueOak-1.0.0

"""Loss terms, classifier training and cycle-consistent simulator training."""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import stats
from torch.utils.data import DataLoader, TensorDataset

from layers import (
    COUPLINGS,
    MODES,
    CoupledSimulator,
    LogitClassifier,
    build_classifier_2d,
    build_classifier_3d,
    is_frozen,
    predict_logits,
    save_checkpoint,
)
from utils import get_device, seed_everything
from warp import smoothness_energy

logger = logging.getLogger(__name__)

LOSS_VARIANTS = ('logit-shift', 'bce')
INJECT, REMOVE = 0, 1


@dataclass
class TrainConfig:
    """Hyperparameters for classifier and simulator training."""

    delta: float = 5.0
    lambda_phi: float = 0.02
    experts: int = 3
    lr: float = 1e-4
    epochs: int = 60
    batch_size: int = 32
    mode: str = 'direct-image'
    loss_variant: str = 'logit-shift'
    coupling: str = 'condconv'
    seed: int = 0
    classifier_epochs: int = 30
    classifier_lr: float = 1e-3
    checkpoint_every: int = 0
    explain_subjects: int = 8

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if self.lambda_phi < 0:
            raise ValueError(f"lambda_phi must be >= 0, got {self.lambda_phi}")
        if self.experts < 1:
            raise ValueError(f"experts must be >= 1, got {self.experts}")
        if not self.lr > 0 or not self.classifier_lr > 0:
            raise ValueError("Learning rates must be > 0")
        if self.epochs < 0 or self.classifier_epochs < 0 or self.checkpoint_every < 0:
            raise ValueError("Epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.mode not in MODES:
            raise ValueError(f"Invalid mode '{self.mode}'. Must be one of: {MODES}")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"Invalid loss_variant '{self.loss_variant}'. Must be one of: {LOSS_VARIANTS}")
        if self.coupling not in COUPLINGS:
            raise ValueError(f"Invalid coupling '{self.coupling}'. Must be one of: {COUPLINGS}")


@dataclass
class LossBreakdown:
    """Objective terms of one simulator training step."""

    e_logit: float
    e_cycle: float
    e_phi: float
    e_total: float = field(default=None)
    step: int = 0
    epoch: int = 0

    def __post_init__(self):
        if self.e_total is None:
            self.e_total = self.e_logit + self.e_cycle + self.e_phi

    def to_dict(self) -> dict:
        return asdict(self)


class MetricsLog:
    """Line-delimited JSON metrics; records are also kept in memory."""

    def __init__(self, path: Optional[Path | str] = None):
        self.path = Path(path) if path is not None else None
        self.records: List[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text('')

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, 'a') as f:
                f.write(json.dumps(record, sort_keys=True) + '\n')


# ── Loss terms ──────────────────────────────────────────────────


def logit_shift_loss(
    p_raw_x: Optional[torch.Tensor],
    p_sim_x: Optional[torch.Tensor],
    p_raw_y: Optional[torch.Tensor],
    p_sim_y: Optional[torch.Tensor],
    delta: float,
) -> torch.Tensor:
    """
    Hinge on the logit shift: mean max(p(X) - p(G1 X), -delta) + mean max(p(G2 Y) - p(Y), -delta).

    Either side may be omitted by passing None for both of its arrays. The loss
    is bounded below by -2 * delta.
    """
    if not delta > 0:
        raise ValueError(f"delta must be > 0, got {delta}")
    terms = []
    if p_raw_x is not None:
        terms.append(torch.clamp(p_raw_x - p_sim_x, min=-delta).mean())
    if p_raw_y is not None:
        terms.append(torch.clamp(p_sim_y - p_raw_y, min=-delta).mean())
    if not terms:
        raise ValueError("logit_shift_loss needs at least one group")
    return sum(terms)


def per_image_rmse(images: torch.Tensor, reconstructed: torch.Tensor) -> torch.Tensor:
    """Root-mean-square residual of each image in a batch."""
    if images.shape != reconstructed.shape:
        raise ValueError(f"Shape mismatch: {tuple(images.shape)} vs {tuple(reconstructed.shape)}")
    residual = (reconstructed - images).flatten(1)
    # vector_norm has a zero subgradient at 0, so perfect reconstructions stay differentiable.
    return torch.linalg.vector_norm(residual, dim=1) / math.sqrt(residual.shape[1])


def cycle_loss(x: torch.Tensor, x_cycle: torch.Tensor, y: torch.Tensor, y_cycle: torch.Tensor) -> torch.Tensor:
    """Mean per-image RMSE of G2(G1(X)) against X plus that of G1(G2(Y)) against Y."""
    return per_image_rmse(x, x_cycle).mean() + per_image_rmse(y, y_cycle).mean()


def bce_loss_variant(p_sim_x: torch.Tensor, p_sim_y: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy pushing simulated X towards group 1 and simulated Y towards group 0."""
    return (F.binary_cross_entropy_with_logits(p_sim_x, torch.ones_like(p_sim_x))
            + F.binary_cross_entropy_with_logits(p_sim_y, torch.zeros_like(p_sim_y)))


# ── Classifier ──────────────────────────────────────────────────


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float('nan')
    return float(np.mean((np.asarray(logits) > 0).astype(np.int64) == np.asarray(labels)))


def balanced_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean of per-group accuracies."""
    logits, labels = np.asarray(logits), np.asarray(labels)
    per_group = [accuracy(logits[labels == g], labels[labels == g]) for g in (0, 1) if np.any(labels == g)]
    return float(np.mean(per_group)) if per_group else float('nan')


def _build_classifier(dataset) -> LogitClassifier:
    if dataset.dims == 2:
        return build_classifier_2d(dataset.shape)
    return build_classifier_3d(dataset.shape)


def train_classifier(dataset, cfg: TrainConfig, metrics_path: Optional[Path | str] = None
                     ) -> Tuple[LogitClassifier, List[dict]]:
    """
    Train the logit classifier on the train split.

    Args:
        dataset: SyntheticDataset with both groups in its train split
        cfg: Training configuration (classifier_epochs, classifier_lr, batch_size, seed)
        metrics_path: Optional JSONL file receiving one accuracy record per epoch

    Returns:
        (classifier, per-epoch history)
    """
    images, labels, _ = dataset.as_arrays('train')
    if len(np.unique(labels)) < 2:
        raise ValueError("Classifier training needs both groups in the train split")
    test_images, test_labels, _ = dataset.as_arrays('test')

    generator = seed_everything(cfg.seed)
    device = get_device()
    model = _build_classifier(dataset).to(device)
    loader = DataLoader(
        TensorDataset(torch.from_numpy(images), torch.from_numpy(labels).float()),
        batch_size=cfg.batch_size,
        shuffle=True,
        generator=generator,
    )
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.classifier_lr)
    loss_fn = nn.BCEWithLogitsLoss()
    log = MetricsLog(metrics_path)

    for epoch in range(1, cfg.classifier_epochs + 1):
        model.train()
        losses = []
        for x, y in loader:
            optimizer.zero_grad()
            loss = loss_fn(model(x.to(device)), y.to(device))
            loss.backward()
            optimizer.step()
            losses.append(loss.item())

        record = {
            'epoch': epoch,
            'loss': float(np.mean(losses)),
            'train_accuracy': accuracy(predict_logits(model, images), labels),
            'test_accuracy': accuracy(predict_logits(model, test_images), test_labels),
        }
        log.write(record)
        logger.info(f"Classifier epoch {epoch}: loss {record['loss']:.4f}, "
                    f"train {record['train_accuracy']:.3f}, test {record['test_accuracy']:.3f}")

    model.eval()
    return model, log.records


# ── Simulators ──────────────────────────────────────────────────


def simulator_losses(P: LogitClassifier, simulator: CoupledSimulator, x: torch.Tensor, y: torch.Tensor,
                     cfg: TrainConfig) -> Tuple[torch.Tensor, LossBreakdown]:
    """
    Forward and cycle passes for one pair of batches.

    x are group-0 images (injected by G1, t = 0), y are group-1 images (pattern
    removed by G2, t = 1).

    Returns:
        (differentiable total objective, LossBreakdown)
    """
    x_sim, phi_x = simulator(x, INJECT)
    y_sim, phi_y = simulator(y, REMOVE)
    x_cycle, phi_xc = simulator(x_sim, REMOVE)
    y_cycle, phi_yc = simulator(y_sim, INJECT)

    p_sim_x, p_sim_y = P(x_sim), P(y_sim)
    if cfg.loss_variant == 'bce':
        e_logit = bce_loss_variant(p_sim_x, p_sim_y)
    else:
        with torch.no_grad():
            p_raw_x, p_raw_y = P(x), P(y)
        e_logit = logit_shift_loss(p_raw_x, p_sim_x, p_raw_y, p_sim_y, cfg.delta)

    e_cycle = cycle_loss(x, x_cycle, y, y_cycle)
    if cfg.mode == 'warp-field':
        e_phi = sum(smoothness_energy(phi, cfg.lambda_phi) for phi in (phi_x, phi_y, phi_xc, phi_yc))
    else:
        e_phi = torch.zeros((), dtype=x.dtype, device=x.device)

    total = e_logit + e_cycle + e_phi
    return total, LossBreakdown(e_logit=e_logit.item(), e_cycle=e_cycle.item(), e_phi=e_phi.item())


def _epoch_order(n: int, length: int, generator: torch.Generator) -> torch.Tensor:
    # Concatenated permutations so the smaller group is revisited within an epoch.
    chunks = []
    while sum(len(c) for c in chunks) < length:
        chunks.append(torch.randperm(n, generator=generator))
    return torch.cat(chunks)[:length]


def train_simulator_pair(
    P: LogitClassifier,
    dataset,
    cfg: TrainConfig,
    metrics_path: Optional[Path | str] = None,
    checkpoint_dir: Optional[Path | str] = None,
    split: str = 'train',
) -> Tuple[CoupledSimulator, List[LossBreakdown]]:
    """
    Train the coupled simulator against a frozen classifier.

    Each step draws equal-sized batches from group 0 (X) and group 1 (Y) and
    minimizes E = E_logit + E_cycle + E_phi over the simulator parameters only.

    Args:
        P: Frozen classifier
        dataset: SyntheticDataset
        cfg: Training configuration
        metrics_path: Optional JSONL file receiving one LossBreakdown per step
        checkpoint_dir: Where epoch checkpoints go when cfg.checkpoint_every > 0
        split: Split used for training

    Returns:
        (simulator in eval mode, LossBreakdown per step)
    """
    if not is_frozen(P):
        raise ValueError("Classifier must be frozen before simulator training (see layers.freeze)")
    x_all, _, _ = dataset.as_arrays(split, group=0)
    y_all, _, _ = dataset.as_arrays(split, group=1)
    if len(x_all) == 0 or len(y_all) == 0:
        raise ValueError(f"Both groups need images in the '{split}' split")

    generator = seed_everything(cfg.seed)
    reference = next(P.parameters())
    simulator = CoupledSimulator(
        mode=cfg.mode,
        dims=dataset.dims,
        input_shape=dataset.shape,
        experts=cfg.experts,
        coupling=cfg.coupling,
    ).to(device=reference.device, dtype=reference.dtype)
    x_all = torch.as_tensor(x_all, dtype=reference.dtype, device=reference.device)
    y_all = torch.as_tensor(y_all, dtype=reference.dtype, device=reference.device)

    optimizer = torch.optim.Adam(simulator.parameters(), lr=cfg.lr)
    log = MetricsLog(metrics_path)
    batch = cfg.batch_size
    steps_per_epoch = math.ceil(max(len(x_all), len(y_all)) / batch)
    history: List[LossBreakdown] = []
    P.eval()

    step = 0
    for epoch in range(1, cfg.epochs + 1):
        simulator.train()
        order_x = _epoch_order(len(x_all), steps_per_epoch * batch, generator)
        order_y = _epoch_order(len(y_all), steps_per_epoch * batch, generator)
        for s in range(steps_per_epoch):
            xb = x_all[order_x[s * batch:(s + 1) * batch]]
            yb = y_all[order_y[s * batch:(s + 1) * batch]]
            optimizer.zero_grad()
            total, breakdown = simulator_losses(P, simulator, xb, yb, cfg)
            total.backward()
            optimizer.step()

            step += 1
            breakdown.step, breakdown.epoch = step, epoch
            history.append(breakdown)
            log.write(breakdown.to_dict())

        recent = history[-steps_per_epoch:]
        logger.info(f"Simulator epoch {epoch}: E {np.mean([b.e_total for b in recent]):.4f} "
                    f"(logit {np.mean([b.e_logit for b in recent]):.4f}, "
                    f"cycle {np.mean([b.e_cycle for b in recent]):.4f}, "
                    f"phi {np.mean([b.e_phi for b in recent]):.4f})")

        if checkpoint_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(simulator, Path(checkpoint_dir) / f"epoch_{epoch:03d}")

    simulator.eval()
    return simulator, history


def simulate(simulator: CoupledSimulator, images, task: int, batch_size: int = 64
             ) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Run one simulator task over a stack of images in inference mode.

    Args:
        simulator: Trained simulator
        images: (N, 1, *spatial)
        task: 0 = inject (G1), 1 = remove (G2)

    Returns:
        (simulated images, displacement fields or None in direct-image mode)
    """
    reference = next(simulator.parameters())
    images = torch.as_tensor(images, dtype=reference.dtype, device=reference.device)
    simulator.eval()
    simulated, fields = [], []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            out, phi = simulator(images[start:start + batch_size], task)
            simulated.append(out.cpu())
            if phi is not None:
                fields.append(phi.cpu())
    if not simulated:
        return np.zeros_like(images.cpu().numpy()), None
    return torch.cat(simulated).numpy(), (torch.cat(fields).numpy() if fields else None)


def logit_trajectories(P: LogitClassifier, simulator: CoupledSimulator, images, task: int) -> dict:
    """
    Raw, simulated and cycle-back logits for one group.

    Args:
        P: Classifier
        simulator: Trained simulator
        images: Images of one group
        task: Task applied first (0 for group-0 images, 1 for group-1 images)

    Returns:
        Dict of numpy arrays 'raw', 'simulated', 'cycle'
    """
    simulated, _ = simulate(simulator, images, task)
    cycled, _ = simulate(simulator, simulated, 1 - task)
    return {
        'raw': predict_logits(P, images),
        'simulated': predict_logits(P, simulated),
        'cycle': predict_logits(P, cycled),
    }


def logit_rank_statistics(raw: np.ndarray, simulated: np.ndarray) -> dict:
    """
    How well simulation preserves the ordering of subjects along the logit axis.

    Returns:
        Dict with Spearman rho, logit variances and the mean shift
    """
    raw, simulated = np.asarray(raw, dtype=np.float64), np.asarray(simulated, dtype=np.float64)
    if raw.shape != simulated.shape or raw.size < 2:
        raise ValueError("Need at least two paired logits")
    rho = stats.spearmanr(raw, simulated)[0]
    return {
        'spearman': float(rho) if np.isfinite(rho) else 0.0,
        'variance_raw': float(np.var(raw)),
        'variance_simulated': float(np.var(simulated)),
        'mean_shift': float(np.mean(simulated - raw)),
        'n': int(raw.size),
    }


def cycle_fidelity(images: np.ndarray, cycled: np.ndarray, reference: Optional[np.ndarray] = None) -> dict:
    """
    Mean per-image RMSE of cycle reconstructions relative to the intensity IQR.

    Args:
        images: Original images
        cycled: Cycle reconstructions
        reference: Intensities defining the IQR (default: images)

    Returns:
        Dict with 'mean_rmse', 'iqr' and 'ratio'
    """
    images, cycled = np.asarray(images, dtype=np.float64), np.asarray(cycled, dtype=np.float64)
    rmse = per_image_rmse(torch.from_numpy(images), torch.from_numpy(cycled)).numpy()
    values = np.asarray(images if reference is None else reference, dtype=np.float64).ravel()
    q75, q25 = np.percentile(values, [75, 25])
    iqr = float(q75 - q25)
    mean_rmse = float(rmse.mean()) if rmse.size else float('nan')
    return {'mean_rmse': mean_rmse, 'iqr': iqr, 'ratio': mean_rmse / iqr if iqr > 0 else float('inf')}

"""Offline self-supervised optimization with stochastic modality dropout."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .checkpoint import Calibration, Checkpoint
from .core import ChannelLayout, ObservationMask, ServiceGraph, TelediagError
from .diagnosis import DiagnosisConfig
from .ingest import STD_FLOOR, windows_with_targets
from .network import DiagnosisNetwork, ModelConfig

logger = logging.getLogger(__name__)


class TrainingDiverged(TelediagError):
    """Loss became non-finite; carries the epoch/batch and a parameter report."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 0  # 0 = full batch
    learning_rate: float = 1e-3
    loss_balance: float = 1.0  # weight of the masked reconstruction term
    drop_prob: float = 0.2  # per-modality dropout probability
    calib_fraction: float = 0.2
    augment: bool = True  # stochastic modality dropout; off = complete-mask training
    norm_window: int = 60
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.drop_prob < 1.0:
            raise ValueError("drop probability must be in [0, 1)")
        if self.loss_balance < 0:
            raise ValueError("loss balance must be >= 0")
        if self.epochs < 0 or self.batch_size < 0:
            raise ValueError("epochs and batch size must be non-negative")
        if not 0.0 < self.calib_fraction < 1.0:
            raise ValueError("calibration fraction must be in (0, 1)")


def dropout_augment(rng: np.random.Generator, p_drop: float) -> ObservationMask:
    """Drop each modality independently with probability p_drop, rejecting the
    all-missing outcome so at least one modality always survives."""
    if not 0.0 <= p_drop < 1.0:
        raise ValueError("drop probability must be in [0, 1)")
    while True:
        bits = tuple(int(rng.random() >= p_drop) for _ in range(3))
        if any(bits):
            return ObservationMask.from_bits(bits)


def masked_losses(
    x_hat: np.ndarray,
    x_true: np.ndarray,
    mask: ObservationMask,
    layout: ChannelLayout,
    loss_balance: float,
) -> tuple[float, float, float]:
    """Masked mean squared errors of one window's next-step prediction.

    L_obs averages squared error over observed elements, L_miss over masked
    ones (0 when nothing is masked); the total is L_obs + balance * L_miss.
    """
    x_hat_t = torch.as_tensor(np.asarray(x_hat, dtype=np.float64))
    x_true_t = torch.as_tensor(np.asarray(x_true, dtype=np.float64))
    chan = torch.as_tensor(mask.channel_mask(layout))[None, :]  # (1, K)
    l_obs, l_miss, total = _batch_losses(x_hat_t[None], x_true_t[None], chan, loss_balance)
    return float(l_obs), float(l_miss), float(total)


def _batch_losses(
    x_hat: torch.Tensor, x_true: torch.Tensor, chan_bits: torch.Tensor, loss_balance: float
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Per-window masked losses averaged over the batch.

    x_hat, x_true: (B, N, K); chan_bits: (B, K) with each channel carrying its
    modality's observation bit.
    """
    err2 = (x_hat - x_true) ** 2
    obs = chan_bits[:, None, :]
    n_obs = obs.expand_as(err2).sum(dim=(1, 2))
    n_miss = (1.0 - obs).expand_as(err2).sum(dim=(1, 2))
    sum_obs = (err2 * obs).sum(dim=(1, 2))
    sum_miss = (err2 * (1.0 - obs)).sum(dim=(1, 2))
    l_obs = sum_obs / n_obs  # the mask guarantee means n_obs >= 1 element
    l_miss = torch.where(n_miss > 0, sum_miss / n_miss.clamp(min=1.0), torch.zeros_like(sum_miss))
    l_obs_m = l_obs.mean()
    l_miss_m = l_miss.mean()
    return l_obs_m, l_miss_m, l_obs_m + loss_balance * l_miss_m


@dataclass
class TrainingSet:
    """Normalized windows paired with next-step targets, in stream order."""

    windows: np.ndarray  # (W, N, K, T)
    targets: np.ndarray  # (W, N, K)
    minutes: np.ndarray  # (W,) window start minutes
    layout: ChannelLayout

    def __len__(self) -> int:
        return self.windows.shape[0]


def build_training_set(
    values: np.ndarray,
    layout: ChannelLayout,
    window: int,
    norm_window: int,
    start_minute: int = 0,
    exclude: Sequence[tuple[int, int]] = (),
    end_minute: int | None = None,
    pad_before: int = 1,
    pad_after: int = 3,
) -> TrainingSet:
    """Window the aligned series, keeping only anomaly-free stretches.

    ``exclude`` lists inclusive minute intervals (annotated faults); windows
    whose span, padded target included, touches a padded interval are dropped.
    ``end_minute`` (exclusive) cuts the stream, e.g. at the evaluation split.
    """
    padded = [(s - pad_before, e + pad_after) for s, e in exclude]
    wins, targets, minutes = [], [], []
    for win, target in windows_with_targets(values, layout, window, norm_window, start_minute):
        s = win.start_time
        t_end = s + window  # target minute
        if end_minute is not None and t_end >= end_minute:
            break
        if any(s <= pe and ps <= t_end for ps, pe in padded):
            continue
        wins.append(win.values)
        targets.append(target)
        minutes.append(s)
    if not wins:
        raise TelediagError("no training windows survive the exclusions")
    return TrainingSet(
        windows=np.stack(wins),
        targets=np.stack(targets),
        minutes=np.asarray(minutes),
        layout=layout,
    )


def _param_report(net: DiagnosisNetwork) -> str:
    parts = [f"{name}: norm={p.detach().norm().item():.4g}" for name, p in net.named_parameters()]
    return "; ".join(parts)


def train(
    training_set: TrainingSet,
    graph: ServiceGraph,
    model_config: ModelConfig,
    train_config: TrainConfig,
    diagnosis_config: DiagnosisConfig | None = None,
) -> Checkpoint:
    """Optimize the full network on anomaly-free windows and calibrate.

    The chronological tail of the training set (calib_fraction) is held out;
    after optimization it provides the calibration statistics under the
    complete mask. Deterministic given the seed: two runs produce identical
    loss curves and checkpoint bytes.
    """
    if diagnosis_config is None:
        diagnosis_config = DiagnosisConfig()
    n_total = len(training_set)
    n_calib = max(1, int(round(train_config.calib_fraction * n_total)))
    n_train = n_total - n_calib
    if n_train < 1:
        raise TelediagError(f"{n_total} windows leave no training data after calibration split")

    torch.manual_seed(train_config.seed)
    net = DiagnosisNetwork(model_config, graph)
    mask_rng = np.random.default_rng(train_config.seed)

    x = torch.as_tensor(training_set.windows[:n_train])
    y = torch.as_tensor(training_set.targets[:n_train])
    modality_of = torch.as_tensor(training_set.layout.channel_modalities())
    optimizer = torch.optim.Adam(net.parameters(), lr=train_config.learning_rate)

    loss_curve: list[float] = []
    for epoch in range(train_config.epochs):
        net.train()
        if train_config.augment:
            bits = np.stack(
                [dropout_augment(mask_rng, train_config.drop_prob).as_tuple() for _ in range(n_train)]
            ).astype(np.float64)
        else:
            bits = np.ones((n_train, 3))
        bits_t = torch.as_tensor(bits)
        if train_config.batch_size == 0:
            batches = [np.arange(n_train)]
        else:
            perm = mask_rng.permutation(n_train)
            batches = [
                perm[i : i + train_config.batch_size]
                for i in range(0, n_train, train_config.batch_size)
            ]
        epoch_loss = 0.0
        for b_idx, batch in enumerate(batches):
            idx = torch.as_tensor(batch)
            mb = bits_t[idx]
            xb = x[idx]
            yb = y[idx]  # offline targets are complete; only the input is masked
            optimizer.zero_grad()
            x_hat, _, _ = net(xb, mb)
            chan_bits = mb[:, modality_of]
            _, _, loss = _batch_losses(x_hat, yb, chan_bits, train_config.loss_balance)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {b_idx}; {_param_report(net)}"
                )
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach()) * len(batch)
        epoch_loss /= n_train
        loss_curve.append(epoch_loss)
        logger.info("epoch %d: loss %.6f", epoch, epoch_loss)

    calibration = _calibrate(
        net,
        training_set.windows[n_train:],
        training_set.targets[n_train:],
        diagnosis_config.latent_weight,
    )
    return _as_checkpoint(net, model_config, train_config, diagnosis_config, calibration, loss_curve)


def _calibrate(
    net: DiagnosisNetwork,
    windows: np.ndarray,
    targets: np.ndarray,
    latent_weight: float,
    batch_size: int = 512,
) -> Calibration:
    """Forward the held-out slice under the complete mask and summarize it."""
    net.eval()
    n = windows.shape[0]
    errors = np.empty_like(targets)
    latents = np.empty((n, windows.shape[1], net.config.latent_dim))
    with torch.no_grad():
        for lo in range(0, n, batch_size):
            hi = min(lo + batch_size, n)
            xb = torch.as_tensor(windows[lo:hi])
            mb = torch.ones((hi - lo, 3), dtype=xb.dtype)
            x_hat, z, _ = net(xb, mb)
            errors[lo:hi] = x_hat.numpy() - targets[lo:hi]
            latents[lo:hi] = z.numpy()
    sigma = np.maximum(errors.std(axis=(0, 1)), STD_FLOOR)  # (K,)
    latent_mean = latents.mean(axis=0)  # (N, d_z)
    e_term = np.linalg.norm(errors / sigma[None, None, :], axis=2).mean(axis=1)
    l_term = np.linalg.norm(latents - latent_mean[None], axis=2).mean(axis=1)
    scores = e_term + latent_weight * l_term
    return Calibration(error_sigma=sigma, latent_mean=latent_mean, scores=scores)


def _as_checkpoint(
    net: DiagnosisNetwork,
    model_config: ModelConfig,
    train_config: TrainConfig,
    diagnosis_config: DiagnosisConfig,
    calibration: Calibration,
    loss_curve: Sequence[float],
) -> Checkpoint:
    config: dict[str, str] = {}
    for key, value in model_config.to_dict().items():
        config[f"model.{key}"] = repr(value)
    for field_name, value in vars(train_config).items():
        config[f"train.{field_name}"] = repr(value)
    for field_name, value in vars(diagnosis_config).items():
        config[f"diagnosis.{field_name}"] = repr(value)
    tensors: dict[str, np.ndarray] = {
        name: t.detach().numpy().copy() for name, t in net.state_dict().items()
    }
    tensors.update(calibration.to_tensors())
    tensors["training.loss_curve"] = np.asarray(loss_curve, dtype=np.float64)
    return Checkpoint(config=config, tensors=tensors)


def loss_curve_of(ckpt: Checkpoint) -> np.ndarray:
    return ckpt.tensors["training.loss_curve"]

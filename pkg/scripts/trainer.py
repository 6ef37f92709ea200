"""
Training and evaluation loops
Distortion stage: L1 training, PSNR validation.
GAN stage: alternating discriminator / generator steps with
alpha*L1 + lambda*feature loss + gamma*adversarial loss, validated by feature distance.
"""

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from config import (
    DISTORTION_FULL, DISTORTION_PROXY, GAN_FULL, GAN_LOSS_WEIGHTS, GAN_PROXY, PSNR_CAP_DB,
    SMOOTHING_WINDOW, TRAIN_LR, TRAIN_LR_DECAY_EPOCH, TRAIN_LR_DECAYED,
)
from errors import ConfigError, DivergedError, ShapeError
from model_builder import DiscriminatorNet, FrozenExtractor, GeneratorNet, build_frozen_extractor
from sr_data import Dataset, ImagePair, sample_patch_batch
from tensorkit import DTYPE, Adam, sigmoid

logger = logging.getLogger(__name__)

FEATURE_EPS = 1e-10


# ── Configs ─────────────────────────────────────────────────────

@dataclass
class DistortionConfig:
    epochs: int = DISTORTION_PROXY["epochs"]
    batch: int = DISTORTION_PROXY["batch"]
    lr_patch: int = DISTORTION_PROXY["lr_patch"]
    lr: float = TRAIN_LR
    lr_decayed: float = TRAIN_LR_DECAYED
    decay_epoch: int = TRAIN_LR_DECAY_EPOCH
    steps_per_epoch: int = 0            # 0 = one pass over the training patches
    seed: int = 0
    augment: bool = True
    y_channel: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch < 1 or self.lr_patch < 1 or self.steps_per_epoch < 0:
            raise ConfigError(f"Invalid distortion config: {asdict(self)}")

    @classmethod
    def proxy(cls, **overrides) -> "DistortionConfig":
        return cls(**{**DISTORTION_PROXY, **overrides})

    @classmethod
    def full(cls, **overrides) -> "DistortionConfig":
        return cls(**{**DISTORTION_FULL, **overrides})

    def lr_at(self, epoch: int) -> float:
        return self.lr if epoch < self.decay_epoch else self.lr_decayed


@dataclass
class GanConfig:
    epochs: int = GAN_PROXY["epochs"]
    batch: int = GAN_PROXY["batch"]
    hr_patch: int = GAN_PROXY["hr_patch"]
    feature_depth: int = GAN_PROXY["feature_depth"]
    alpha: float = GAN_LOSS_WEIGHTS[0]
    lam: float = GAN_LOSS_WEIGHTS[1]
    gamma: float = GAN_LOSS_WEIGHTS[2]
    d_steps: int = 1                    # discriminator steps per generator step
    lr: float = TRAIN_LR
    lr_decayed: float = TRAIN_LR_DECAYED
    decay_epoch: int = TRAIN_LR_DECAY_EPOCH
    steps_per_epoch: int = 0
    seed: int = 0
    extractor_seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if min(self.alpha, self.lam, self.gamma) < 0:
            raise ConfigError("GAN loss weights must be non-negative")
        if not 1 <= self.feature_depth <= 3:
            raise ConfigError(f"feature_depth must be 1..3, got {self.feature_depth}")
        if self.epochs < 0 or self.batch < 1 or self.d_steps < 1 or self.steps_per_epoch < 0:
            raise ConfigError(f"Invalid GAN config: {asdict(self)}")

    @classmethod
    def proxy(cls, **overrides) -> "GanConfig":
        return cls(**{**GAN_PROXY, **overrides})

    @classmethod
    def full(cls, **overrides) -> "GanConfig":
        return cls(**{**GAN_FULL, **overrides})

    @property
    def weights(self) -> Tuple[float, float, float]:
        return self.alpha, self.lam, self.gamma

    def lr_at(self, epoch: int) -> float:
        return self.lr if epoch < self.decay_epoch else self.lr_decayed


@dataclass
class EvalReport:
    metric: str                 # "psnr" (dB, higher better) | "feat_dist" (lower better)
    value: float
    trace: List[float] = field(default_factory=list)
    wall_time: float = 0.0
    steps: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


# ── Metrics and losses ──────────────────────────────────────────

def _check_same(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(what, expected=b.shape, actual=a.shape)


def l1_loss(pred: np.ndarray, target: np.ndarray) -> float:
    _check_same(pred, target, "l1_loss operands")
    return float(np.abs(pred - target).mean())


def l1_loss_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    return (np.sign(pred - target) / pred.size).astype(pred.dtype)


def rgb_to_y(x: np.ndarray) -> np.ndarray:
    """BT.601 luma on [0, 1] RGB along axis -3"""
    r, g, b = x[..., 0, :, :], x[..., 1, :, :], x[..., 2, :, :]
    return (65.481 * r + 128.553 * g + 24.966 * b) / 255.0 + 16.0 / 255.0


def psnr(pred: np.ndarray, target: np.ndarray, data_range: float = 1.0, shave: int = 0,
         y_channel: bool = False) -> float:
    _check_same(pred, target, "psnr operands")
    pred = pred.astype(np.float64)
    target = target.astype(np.float64)
    if y_channel:
        pred, target = rgb_to_y(pred), rgb_to_y(target)
    if shave:
        pred = pred[..., shave:-shave, shave:-shave]
        target = target[..., shave:-shave, shave:-shave]
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(data_range ** 2 / mse))


def _normalize_channels(features: np.ndarray) -> np.ndarray:
    norm = np.sqrt((features.astype(np.float64) ** 2).sum(axis=1, keepdims=True))
    return features / (norm + FEATURE_EPS)


def feature_distance(img_a: np.ndarray, img_b: np.ndarray, extractor: FrozenExtractor,
                     depth: int = 3) -> float:
    """Mean squared difference of channel-normalized features; whole images, no shave"""
    _check_same(img_a, img_b, "feature_distance operands")
    a = img_a[None] if img_a.ndim == 3 else img_a
    b = img_b[None] if img_b.ndim == 3 else img_b
    fa = _normalize_channels(extractor.forward(a, depth))
    fb = _normalize_channels(extractor.forward(b, depth))
    return float(np.mean((fa - fb) ** 2))


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


@dataclass
class GanLosses:
    l1: float
    feature: float
    adversarial: float
    generator: float
    discriminator: float
    grad_output: Optional[np.ndarray] = None


def gan_losses(g_out: np.ndarray, hr: np.ndarray, discriminator: DiscriminatorNet,
               extractor: FrozenExtractor, weights: Sequence[float] = GAN_LOSS_WEIGHTS,
               depth: int = 3, mean_rgb: Optional[np.ndarray] = None,
               with_grad: bool = False) -> GanLosses:
    """
    L_G = alpha*L1 + lambda*L_feat + gamma*L_adv with L_adv = -log sigmoid(D(fake)),
    L_D = -log sigmoid(D(real)) - log(1 - sigmoid(D(fake))), both in softplus form.

    `g_out` and `hr` live in network space (mean-subtracted); the extractor sees
    them with the mean added back. With `with_grad`, dL_G/dg_out is returned and
    the discriminator's parameter gradients are left dirty.
    """
    _check_same(g_out, hr, "gan_losses operands")
    alpha, lam, gamma = weights
    shift = 0.0 if mean_rgb is None else np.asarray(mean_rgb, dtype=g_out.dtype).reshape(1, 3, 1, 1)
    batch = g_out.shape[0]

    l1 = l1_loss(g_out, hr)
    fb = extractor.forward(hr + shift, depth)
    fa = extractor.forward(g_out + shift, depth)
    feature = float(np.mean((fa - fb) ** 2))

    logits = discriminator.forward(np.concatenate([hr, g_out]))
    real, fake = logits[:batch, 0], logits[batch:, 0]
    adversarial = float(softplus(-fake).mean())
    d_loss = float(softplus(-real).mean() + softplus(fake).mean())
    losses = GanLosses(l1, feature, adversarial, alpha * l1 + lam * feature + gamma * adversarial, d_loss)

    if with_grad:
        grad = alpha * l1_loss_grad(g_out, hr)
        if lam:
            grad = grad + extractor.backward((lam * 2.0 * (fa - fb) / fa.size).astype(fa.dtype))
        if gamma:
            dlogits = np.zeros_like(logits)
            dlogits[batch:, 0] = -gamma * sigmoid(-fake) / batch
            grad = grad + discriminator.backward(dlogits)[batch:]
        losses.grad_output = grad.astype(g_out.dtype)
    return losses


def smooth_last_epochs(trace: Sequence[float], window: int = SMOOTHING_WINDOW,
                       lower_is_better: bool = True) -> float:
    """Best value among the last `window` epochs"""
    if not trace:
        raise ValueError("Cannot smooth an empty trace")
    tail = list(trace)[-window:]
    return min(tail) if lower_is_better else max(tail)


# ── Evaluation ──────────────────────────────────────────────────

def _predict(generator: GeneratorNet, pair: ImagePair, mean_rgb: np.ndarray) -> np.ndarray:
    shift = np.asarray(mean_rgb, dtype=DTYPE).reshape(3, 1, 1)
    out = generator.forward((pair.lr - shift)[None])[0] + shift
    if not np.all(np.isfinite(out)):
        raise DivergedError(f"Generator produced non-finite output on {pair.id}")
    return np.clip(out, 0.0, 1.0)


def evaluate_psnr(generator: GeneratorNet, pairs: Sequence[ImagePair], mean_rgb: np.ndarray,
                  y_channel: bool = False) -> float:
    """Mean PSNR over pairs, border shaved by the scale factor"""
    generator.eval()
    scores = [psnr(_predict(generator, p, mean_rgb), p.hr, shave=generator.scale, y_channel=y_channel)
              for p in pairs]
    generator.train()
    return float(np.mean(scores))


def evaluate_feature_distance(generator: GeneratorNet, pairs: Sequence[ImagePair], mean_rgb: np.ndarray,
                              extractor: FrozenExtractor, depth: int = 3) -> float:
    generator.eval()
    scores = [feature_distance(_predict(generator, p, mean_rgb), p.hr, extractor, depth) for p in pairs]
    generator.train()
    return float(np.mean(scores))


def _steps_per_epoch(configured: int, pairs: Sequence[ImagePair], lr_patch: int, batch: int) -> int:
    if configured:
        return configured
    patches = sum((p.lr.shape[1] // lr_patch) * (p.lr.shape[2] // lr_patch) for p in pairs)
    return max(1, math.ceil(patches / batch))


def _append_trace(path: Optional[Path], record: dict) -> None:
    if path is None:
        return
    with open(path, "a") as f:
        f.write(json.dumps(record) + "\n")


def _check_finite(value: float, what: str, epoch: int) -> None:
    if not math.isfinite(value):
        raise DivergedError(f"{what} became non-finite in epoch {epoch}")


# ── Distortion training ─────────────────────────────────────────

def train_distortion(generator: GeneratorNet, dataset: Dataset, config: DistortionConfig,
                     trace_path: Optional[Path] = None) -> EvalReport:
    """Adam + L1 on random patches; returns mean validation PSNR after the last epoch"""
    if dataset.scale != generator.scale:
        raise ShapeError("Dataset scale", expected=generator.scale, actual=dataset.scale)
    start = time.time()
    rng = np.random.default_rng(config.seed)
    optimizer = Adam(generator.parameters(), config.lr)
    per_epoch = _steps_per_epoch(config.steps_per_epoch, dataset.train, config.lr_patch, config.batch)
    val = dataset.val or dataset.train
    trace: List[float] = []
    steps = 0

    generator.train()
    for epoch in range(config.epochs):
        optimizer.lr = config.lr_at(epoch)
        losses = []
        for _ in range(per_epoch):
            lr_batch, hr_batch = sample_patch_batch(dataset.train, config.batch, config.lr_patch,
                                                    config.augment, rng, dataset.mean_rgb)
            optimizer.zero_grad()
            out = generator.forward(lr_batch)
            loss = l1_loss(out, hr_batch)
            _check_finite(loss, "L1 loss", epoch)
            generator.backward(l1_loss_grad(out, hr_batch))
            optimizer.step()
            losses.append(loss)
            steps += 1
        metric = evaluate_psnr(generator, val, dataset.mean_rgb, config.y_channel)
        trace.append(metric)
        _append_trace(trace_path, {"epoch": epoch + 1, "loss": float(np.mean(losses)),
                                   "psnr": metric, "lr": optimizer.lr})
        logger.debug(f"  📈 Epoch {epoch + 1}/{config.epochs}: L1 {np.mean(losses):.5f}, PSNR {metric:.2f} dB")

    value = trace[-1] if trace else evaluate_psnr(generator, val, dataset.mean_rgb, config.y_channel)
    return EvalReport("psnr", value, trace, time.time() - start, steps)


# ── GAN training ────────────────────────────────────────────────

def discriminator_step(discriminator: DiscriminatorNet, optimizer: Adam, real: np.ndarray,
                       fake: np.ndarray) -> Tuple[float, float]:
    """One update on a concatenated real+fake batch; returns (loss, accuracy)"""
    batch = real.shape[0]
    optimizer.zero_grad()
    logits = discriminator.forward(np.concatenate([real, fake]))
    real_logits, fake_logits = logits[:batch, 0], logits[batch:, 0]
    loss = float(softplus(-real_logits).mean() + softplus(fake_logits).mean())
    dlogits = np.zeros_like(logits)
    dlogits[:batch, 0] = -sigmoid(-real_logits) / batch
    dlogits[batch:, 0] = sigmoid(fake_logits) / batch
    discriminator.backward(dlogits)
    optimizer.step()
    accuracy = float(((real_logits > 0).sum() + (fake_logits < 0).sum()) / (2 * batch))
    return loss, accuracy


def discriminator_accuracy(discriminator: DiscriminatorNet, real: np.ndarray, fake: np.ndarray) -> float:
    discriminator.eval()
    logits = discriminator.forward(np.concatenate([real, fake]))[:, 0]
    discriminator.train()
    batch = real.shape[0]
    return float(((logits[:batch] > 0).sum() + (logits[batch:] < 0).sum()) / (2 * batch))


def train_gan(generator: GeneratorNet, discriminator: DiscriminatorNet, dataset: Dataset,
              config: GanConfig, extractor: Optional[FrozenExtractor] = None,
              trace_path: Optional[Path] = None) -> EvalReport:
    """
    Alternate d_steps discriminator updates and one generator update per batch.
    Returns the best validation feature distance over the last epochs and leaves
    the generator holding the weights of that epoch.
    """
    if config.hr_patch != discriminator.patch:
        raise ShapeError("GAN HR patch vs discriminator patch", expected=discriminator.patch, actual=config.hr_patch)
    if config.hr_patch % generator.scale:
        raise ShapeError("HR patch not divisible by scale", expected=generator.scale, actual=config.hr_patch)
    start = time.time()
    extractor = extractor or build_frozen_extractor(config.extractor_seed)
    depth = config.feature_depth
    lr_patch = config.hr_patch // generator.scale
    rng = np.random.default_rng(config.seed)
    g_opt = Adam(generator.parameters(), config.lr)
    d_opt = Adam(discriminator.parameters(), config.lr)
    per_epoch = _steps_per_epoch(config.steps_per_epoch, dataset.train, lr_patch, config.batch)
    val = dataset.val or dataset.train
    trace: List[float] = []
    psnr_trace: List[float] = []
    steps = 0
    best_state: Optional[dict] = None
    best_epoch = 0

    generator.train()
    discriminator.train()
    for epoch in range(config.epochs):
        g_opt.lr = d_opt.lr = config.lr_at(epoch)
        g_losses, d_losses = [], []
        for _ in range(per_epoch):
            lr_batch, hr_batch = sample_patch_batch(dataset.train, config.batch, lr_patch,
                                                    config.augment, rng, dataset.mean_rgb)
            for _ in range(config.d_steps):
                fake = generator.forward(lr_batch)
                d_loss, _ = discriminator_step(discriminator, d_opt, hr_batch, fake)
                _check_finite(d_loss, "Discriminator loss", epoch)

            g_opt.zero_grad()
            out = generator.forward(lr_batch)
            losses = gan_losses(out, hr_batch, discriminator, extractor, config.weights, depth,
                                dataset.mean_rgb, with_grad=True)
            _check_finite(losses.generator, "Generator loss", epoch)
            generator.backward(losses.grad_output)
            g_opt.step()
            g_losses.append(losses.generator)
            d_losses.append(d_loss)
            steps += 1

        metric = evaluate_feature_distance(generator, val, dataset.mean_rgb, extractor, depth)
        distortion = evaluate_psnr(generator, val, dataset.mean_rgb)
        trace.append(metric)
        psnr_trace.append(distortion)
        if epoch >= config.epochs - SMOOTHING_WINDOW and (best_state is None or metric < trace[best_epoch - 1]):
            best_state, best_epoch = generator.state_dict(), epoch + 1
        _append_trace(trace_path, {"epoch": epoch + 1, "g_loss": float(np.mean(g_losses)),
                                   "d_loss": float(np.mean(d_losses)), "feat_dist": metric,
                                   "psnr": distortion, "lr": g_opt.lr})
        logger.debug(f"  📈 Epoch {epoch + 1}/{config.epochs}: L_G {np.mean(g_losses):.5f}, "
                     f"L_D {np.mean(d_losses):.4f}, feat-dist {metric:.5f}")

    if trace:
        value = smooth_last_epochs(trace)
        generator.load_state_dict(best_state)
    else:
        value = evaluate_feature_distance(generator, val, dataset.mean_rgb, extractor, depth)
    return EvalReport("feat_dist", value, trace, time.time() - start, steps,
                      {"psnr_trace": psnr_trace, "best_epoch": best_epoch})

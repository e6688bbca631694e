"""Segmentation losses and the poly learning-rate schedule.

The Dice term is implemented verbatim with its constant offset: a perfect
prediction scores ~1 (not 0) and an all-empty pair scores 2. The offset does
not affect gradients; don't read these values as a conventional 1-Dice.

All math here is float64 numpy; `seg_loss_grad` returns the analytic gradient
with respect to pre-sigmoid logits and is checked against central finite
differences in the test suite.
"""

from dataclasses import dataclass

import numpy as np

from .core import ChangeMask, ConfigError, ProbabilityMask, ShapeError

LOSS_MODES = ("bce", "dice", "bce_plus_dice")

# CLI spelling -> internal mode
LOSS_MODE_ALIASES = {"bce+dice": "bce_plus_dice"}


def canonical_loss_mode(mode: str) -> str:
    mode = LOSS_MODE_ALIASES.get(mode, mode)
    if mode not in LOSS_MODES:
        raise ConfigError(f"loss mode must be one of {LOSS_MODES} (or 'bce+dice')")
    return mode


@dataclass
class LossConfig:
    epsilon: float = 1e-6  # Dice denominator stabilizer
    clamp_eps: float = 1e-7  # probability clamp for BCE logs
    mode: str = "bce_plus_dice"
    joint_batch: bool = False  # batch Dice jointly instead of per-image mean

    def validate(self):
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0.0 < self.clamp_eps < 0.5:
            raise ConfigError(f"clamp_eps must be in (0, 0.5), got {self.clamp_eps}")
        self.mode = canonical_loss_mode(self.mode)
        return self


@dataclass
class PolySchedule:
    max_iter: int
    base_lr: float = 0.001
    power: float = 0.9

    def validate(self):
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if self.power <= 0:
            raise ConfigError(f"power must be > 0, got {self.power}")
        if self.max_iter < 1:
            raise ConfigError(f"max_iter must be >= 1, got {self.max_iter}")
        return self


def _as_arrays(p_true, p_pred):
    t = p_true.data if isinstance(p_true, ChangeMask) else p_true
    p = p_pred.data if isinstance(p_pred, ProbabilityMask) else p_pred
    t = np.asarray(t, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if t.shape != p.shape:
        raise ShapeError(f"shape mismatch: target {t.shape} vs prediction {p.shape}")
    return t, p


def bce_loss(p_true, p_pred, clamp_eps: float = 1e-7) -> float:
    """Mean binary cross-entropy over all pixels."""
    t, p = _as_arrays(p_true, p_pred)
    p = np.clip(p, clamp_eps, 1.0 - clamp_eps)
    return float(np.mean(-(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))))


def dice_loss(p_true, p_pred, epsilon: float = 1e-6) -> float:
    """2 - 2*sum(t*p) / (sum(t^2) + sum(p^2) + epsilon), offset included."""
    t, p = _as_arrays(p_true, p_pred)
    intersection = np.sum(t * p)
    denom = np.sum(t * t) + np.sum(p * p) + epsilon
    return float(2.0 - 2.0 * intersection / denom)


def seg_loss(p_true, p_pred, config: LossConfig) -> float:
    """Dispatch on loss mode; bce_plus_dice is the plain sum of the two terms."""
    mode = canonical_loss_mode(config.mode)
    if mode == "bce":
        return bce_loss(p_true, p_pred, config.clamp_eps)
    if mode == "dice":
        return dice_loss(p_true, p_pred, config.epsilon)
    return bce_loss(p_true, p_pred, config.clamp_eps) + dice_loss(
        p_true, p_pred, config.epsilon
    )


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _bce_grad_wrt_logit(t, p, clamp_eps):
    # d/dz of mean BCE(clip(sigmoid(z))); zero where the clamp is active
    # because the clipped loss is locally constant there.
    g = (p - t) / t.size
    active = (p > clamp_eps) & (p < 1.0 - clamp_eps)
    return np.where(active, g, 0.0)


def _dice_grad_wrt_logit(t, p, epsilon):
    intersection = np.sum(t * p)
    denom = np.sum(t * t) + np.sum(p * p) + epsilon
    dl_dp = (-2.0 * t * denom + 4.0 * intersection * p) / (denom * denom)
    return dl_dp * p * (1.0 - p)


def seg_loss_grad(p_true, logits, config: LossConfig) -> np.ndarray:
    """Analytic gradient of seg_loss(sigmoid(logits)) w.r.t. the logits."""
    t = p_true.data if isinstance(p_true, ChangeMask) else p_true
    t = np.asarray(t, dtype=np.float64)
    z = np.asarray(logits, dtype=np.float64)
    if t.shape != z.shape:
        raise ShapeError(f"shape mismatch: target {t.shape} vs logits {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ConfigError("logits contain non-finite values")
    p = sigmoid(z)
    mode = canonical_loss_mode(config.mode)
    grad = np.zeros_like(z)
    if mode in ("bce", "bce_plus_dice"):
        grad += _bce_grad_wrt_logit(t, p, config.clamp_eps)
    if mode in ("dice", "bce_plus_dice"):
        grad += _dice_grad_wrt_logit(t, p, config.epsilon)
    return grad


def poly_lr(schedule: PolySchedule, iteration: int) -> float:
    """base_lr * (1 - iter/max_iter)^power."""
    if not 0 <= iteration <= schedule.max_iter:
        raise ConfigError(
            f"iteration {iteration} outside [0, {schedule.max_iter}]"
        )
    if iteration == 0:
        return float(schedule.base_lr)
    frac = 1.0 - iteration / schedule.max_iter
    return float(schedule.base_lr * frac ** schedule.power)


# --- batched forms used by the trainer -----------------------------------


def seg_loss_batch(t_batch: np.ndarray, z_batch: np.ndarray, config: LossConfig):
    """(loss_total, loss_bce, loss_dice) over a batch of logit rasters.

    Default reduction is per-image-then-mean; joint_batch treats the whole
    batch as one raster for the Dice term (BCE is identical either way for
    uniform image sizes).
    """
    t = np.asarray(t_batch, dtype=np.float64)
    z = np.asarray(z_batch, dtype=np.float64)
    if t.shape != z.shape:
        raise ShapeError(f"shape mismatch: targets {t.shape} vs logits {z.shape}")
    p = sigmoid(z)
    mode = canonical_loss_mode(config.mode)
    l_bce = bce_loss(t.ravel(), p.ravel(), config.clamp_eps)
    if config.joint_batch:
        l_dice = dice_loss(t.ravel(), p.ravel(), config.epsilon)
    else:
        l_dice = float(
            np.mean([dice_loss(t[i], p[i], config.epsilon) for i in range(t.shape[0])])
        )
    if mode == "bce":
        total = l_bce
    elif mode == "dice":
        total = l_dice
    else:
        total = l_bce + l_dice
    return total, l_bce, l_dice


def seg_loss_grad_batch(
    t_batch: np.ndarray, z_batch: np.ndarray, config: LossConfig
) -> np.ndarray:
    """Analytic d(batch loss)/d(logits), matching seg_loss_batch's reduction."""
    t = np.asarray(t_batch, dtype=np.float64)
    z = np.asarray(z_batch, dtype=np.float64)
    if t.shape != z.shape:
        raise ShapeError(f"shape mismatch: targets {t.shape} vs logits {z.shape}")
    n = t.shape[0]
    p = sigmoid(z)
    mode = canonical_loss_mode(config.mode)
    grad = np.zeros_like(z)
    if mode in ("bce", "bce_plus_dice"):
        # mean over every pixel of the batch == mean of per-image means
        grad += _bce_grad_wrt_logit(t.ravel(), p.ravel(), config.clamp_eps).reshape(
            z.shape
        )
    if mode in ("dice", "bce_plus_dice"):
        if config.joint_batch:
            grad += _dice_grad_wrt_logit(
                t.ravel(), p.ravel(), config.epsilon
            ).reshape(z.shape)
        else:
            for i in range(n):
                grad[i] += _dice_grad_wrt_logit(t[i], p[i], config.epsilon) / n
    return grad

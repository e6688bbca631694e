"""Training loop and ablation harness.

The forward pass runs through torch, but the loss and its gradient with
respect to the logits are computed in float64 numpy (see objective) and fed
back via ``logits.backward(gradient=...)``; torch only propagates through
the convolutions. Learning rate follows the poly schedule exactly, set
before every step. Batches are drawn with replacement from a per-iteration
seeded generator, so a run is reproducible from (dataset, config) alone.
"""

import json
import os
import time
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np
import torch

from .core import ConfigError, ImagePair, LabeledSample, ShapeError
from .evalkit import EvalConfig, evaluate
from .net import (
    BackboneSpec,
    ChangeModel,
    set_trainable_tail,
    trainable_parameters,
)
from .objective import (
    LossConfig,
    PolySchedule,
    poly_lr,
    seg_loss_batch,
    seg_loss_grad_batch,
)
from .synthlab import (
    SynthConfig,
    apply_shadow,
    generate_shadow_pattern,
    photometric_augment,
)

ABLATION_AXES = ("tap_layer", "trainable_tail", "loss_mode", "shadow_aug")


class TrainingAborted(RuntimeError):
    """Raised when the loss or logits go non-finite; training state is discarded."""

    def __init__(self, iteration: int, batch_ids: List[int], detail: str = ""):
        self.iteration = iteration
        self.batch_ids = list(batch_ids)
        msg = f"non-finite loss at iteration {iteration} (batch ids {self.batch_ids})"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


@dataclass
class TrainConfig:
    max_iter: int = 2000
    batch_size: int = 8
    image_size: Tuple[int, int] = (128, 256)
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: Optional[PolySchedule] = None  # None -> poly over max_iter
    augment: bool = True
    synth: SynthConfig = field(default_factory=SynthConfig)  # aug knobs only
    trainable_tail_k: Optional[int] = None  # None -> whole encoder trains
    weight_tying: str = "untied"
    rng_seed: int = 0
    log_every: int = 1

    def validate(self):
        if self.max_iter < 0:
            raise ConfigError(f"max_iter must be >= 0, got {self.max_iter}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        h, w = self.image_size
        if h < 1 or w < 1:
            raise ConfigError(f"bad image_size {self.image_size}")
        if self.weight_tying not in ("tied", "untied"):
            raise ConfigError("weight_tying must be 'tied' or 'untied'")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")
        self.loss.validate()
        self.synth.validate()
        if self.schedule is not None:
            self.schedule.validate()
        return self

    def resolved_schedule(self) -> PolySchedule:
        if self.schedule is not None:
            return self.schedule
        return PolySchedule(max_iter=max(1, self.max_iter))


@dataclass
class TrainLog:
    records: List[dict] = field(default_factory=list)
    checkpoint_path: Optional[str] = None

    def append(self, **row):
        self.records.append(row)

    @property
    def final(self) -> dict:
        if not self.records:
            raise ConfigError("empty training log")
        return self.records[-1]

    def save(self, path: str):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as f:
            for row in self.records:
                f.write(json.dumps(row) + "\n")

    @classmethod
    def load(cls, path: str) -> "TrainLog":
        log = cls()
        with open(path) as f:
            for line in f:
                line = line.strip()
                if line:
                    log.records.append(json.loads(line))
        return log


def _iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(iteration,))
    )


def _augment_pair(t0, t1, rng, cfg: SynthConfig):
    """Shadow (per branch, with probability) then photometric jitter.

    Neither transform moves pixels, so the GT mask is reused untouched.
    """
    out = []
    for arr in (t0, t1):
        if cfg.shadow_probability > 0 and rng.random() < cfg.shadow_probability:
            pattern = generate_shadow_pattern(rng, arr.shape[:2])
            lo, hi = cfg.shadow_weight_range
            arr = apply_shadow(arr, pattern, float(rng.uniform(lo, hi)))
        arr = photometric_augment(
            arr, cfg.photometric_severity, cfg.median_kernel, rng
        )
        out.append(arr)
    return out


def _check_dataset(dataset: List[LabeledSample], config: TrainConfig, stride: int):
    if not dataset:
        raise ConfigError("training dataset is empty")
    h, w = config.image_size
    for i, s in enumerate(dataset):
        if s.mask is None:
            raise ConfigError(f"training sample {i} has no mask")
        if s.pair.shape != (h, w):
            raise ShapeError(
                f"sample {i} is {s.pair.shape}, config expects {(h, w)}"
            )
    if h % stride or w % stride:
        raise ShapeError(
            f"image_size {config.image_size} not divisible by tap stride {stride}"
        )


def _batch_tensors(samples, aug, rng, cfg: SynthConfig):
    t0s, t1s, targets = [], [], []
    for s in samples:
        t0, t1 = np.array(s.pair.t0), np.array(s.pair.t1)
        if aug:
            t0, t1 = _augment_pair(t0, t1, rng, cfg)
        t0s.append(np.moveaxis(t0, 2, 0))
        t1s.append(np.moveaxis(t1, 2, 0))
        targets.append(np.array(s.mask.data, dtype=np.float64))
    x0 = torch.from_numpy(np.ascontiguousarray(np.stack(t0s))).float()
    x1 = torch.from_numpy(np.ascontiguousarray(np.stack(t1s))).float()
    return x0, x1, np.stack(targets)


def train(
    model: ChangeModel,
    dataset: List[LabeledSample],
    config: TrainConfig,
    log_path: Optional[str] = None,
) -> Tuple[ChangeModel, TrainLog]:
    """Run the full schedule; returns (model, per-iteration log).

    Mutates `model` in place; max_iter = 0 leaves parameters bit-unchanged.
    If `log_path` is given, the log is written as jsonl (also on abort, with
    whatever was recorded so far).
    """
    config.validate()
    schedule = config.resolved_schedule().validate()
    # single-threaded conv backward keeps repeated runs byte-identical
    torch.set_num_threads(1)
    _check_dataset(dataset, config, model.tap_stride)

    tail_k = config.trainable_tail_k
    set_trainable_tail(model, model.spec.tap_layer if tail_k is None else tail_k)
    params = trainable_parameters(model)
    if not params:
        raise ConfigError("no trainable parameters (frozen encoder and no decoder?)")
    optimizer = torch.optim.Adam(
        params, lr=schedule.base_lr, betas=(0.9, 0.999), eps=1e-8
    )

    n = len(dataset)
    log = TrainLog()
    try:
        for t in range(config.max_iter):
            tic = time.perf_counter()
            lr = poly_lr(schedule, t)
            for group in optimizer.param_groups:
                group["lr"] = lr

            rng = _iteration_rng(config.rng_seed, t)
            ids = [int(j) for j in rng.integers(0, n, size=config.batch_size)]
            x0, x1, targets = _batch_tensors(
                [dataset[j] for j in ids], config.augment, rng, config.synth
            )

            z = model.logits(x0, x1)
            z_np = z.detach().numpy()[:, 0].astype(np.float64)
            if not np.all(np.isfinite(z_np)):
                raise TrainingAborted(t, ids, "logits")
            total, l_bce, l_dice = seg_loss_batch(targets, z_np, config.loss)
            if not np.isfinite(total):
                raise TrainingAborted(t, ids, f"loss={total}")

            grad = seg_loss_grad_batch(targets, z_np, config.loss)
            optimizer.zero_grad()
            z.backward(gradient=torch.from_numpy(grad[:, None]).to(z.dtype))
            optimizer.step()

            if t % config.log_every == 0 or t == config.max_iter - 1:
                log.append(
                    iter=t,
                    lr=lr,
                    loss_total=float(total),
                    loss_bce=float(l_bce),
                    loss_dice=float(l_dice),
                    wall_ms=1000.0 * (time.perf_counter() - tic),
                )
    finally:
        if log_path is not None and log.records:
            log.save(log_path)
    return model, log


def build_and_train(
    dataset: List[LabeledSample],
    config: TrainConfig,
    spec: Optional[BackboneSpec] = None,
    init_seed: int = 0,
    log_path: Optional[str] = None,
):
    """Convenience wrapper: construct the model, train it, return (model, log)."""
    model = ChangeModel(
        spec if spec is not None else BackboneSpec(),
        weight_tying=config.weight_tying,
        init_seed=init_seed,
    )
    return train(model, dataset, config, log_path=log_path)


def _ablation_variant(axis: str, value, config: TrainConfig, spec: BackboneSpec):
    """One (config, spec) cell for an ablation axis; everything else shared."""
    config = replace(
        config,
        loss=replace(config.loss),
        synth=replace(config.synth),
        schedule=replace(config.schedule) if config.schedule else None,
    )
    if axis == "tap_layer":
        spec = replace(spec, tap_layer=int(value))
    elif axis == "trainable_tail":
        config.trainable_tail_k = int(value)
    elif axis == "loss_mode":
        config.loss.mode = str(value)
    elif axis == "shadow_aug":
        if isinstance(value, bool):
            # True keeps the configured rate (or 0.5 if it was off), False disables
            config.synth.shadow_probability = (
                (config.synth.shadow_probability or 0.5) if value else 0.0
            )
        else:
            config.synth.shadow_probability = float(value)
    else:
        raise ConfigError(f"ablation axis must be one of {ABLATION_AXES}, got {axis!r}")
    return config, spec


def run_ablation(
    axis: str,
    values,
    train_data: List[LabeledSample],
    test_data: List[LabeledSample],
    base_config: TrainConfig,
    spec: Optional[BackboneSpec] = None,
    eval_config: Optional[EvalConfig] = None,
    init_seed: int = 0,
) -> List[dict]:
    """Train one model per value of `axis`, evaluate each on `test_data`.

    All other settings (data, seeds, schedule) are held fixed, so rows are
    comparable. Returns [{"axis", "value", "precision", "recall", "f1"}, ...]
    in the order given.
    """
    if axis not in ABLATION_AXES:
        raise ConfigError(f"ablation axis must be one of {ABLATION_AXES}, got {axis!r}")
    if not values:
        raise ConfigError("ablation needs at least one value")
    spec = spec if spec is not None else BackboneSpec()
    rows = []
    for value in values:
        cfg, sp = _ablation_variant(axis, value, base_config, spec)
        model, _ = build_and_train(train_data, cfg, spec=sp, init_seed=init_seed)
        report = evaluate(model, test_data, eval_config)
        rows.append(
            {
                "axis": axis,
                "value": value,
                "precision": report.precision,
                "recall": report.recall,
                "f1": report.f1,
            }
        )
    return rows

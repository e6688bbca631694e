"""Training-data synthesis: object pasting, shadow and photometric augmentation,
and a procedural desk-scale scene generator.

Every operation is a pure function of its inputs and a seeded generator, so a
fixed seed reproduces a dataset byte for byte. Masks are only ever touched by
the paste rule; shadows and photometric jitter never modify them.
"""

from dataclasses import dataclass
from typing import Tuple

import cv2
import numpy as np
from scipy import ndimage

from .core import (
    ChangeMask,
    ConfigError,
    ImagePair,
    LabeledSample,
    ShapeError,
    as_image,
)


class PlacementError(ValueError):
    """Cutout does not fit fully inside the image at the requested position."""


@dataclass(frozen=True, eq=False)
class ObjectCutout:
    """A foreground sprite (rgb) with a soft alpha matte, pasted to create changes."""

    rgb: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        rgb = as_image(self.rgb, "cutout rgb")
        alpha = np.asarray(self.alpha, dtype=np.float32)
        if alpha.ndim != 2:
            raise ShapeError(f"alpha must be 2-D, got shape {alpha.shape}")
        if alpha.shape != rgb.shape[:2]:
            raise ShapeError(
                f"alpha shape {alpha.shape} != rgb spatial shape {rgb.shape[:2]}"
            )
        if not np.all(np.isfinite(alpha)) or alpha.min() < 0 or alpha.max() > 1:
            raise ConfigError("alpha values must be finite and in [0,1]")
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "alpha", alpha)

    @property
    def shape(self):
        return self.alpha.shape

    def support(self, alpha_threshold: float = 0.5) -> np.ndarray:
        """Binary support of the sprite: alpha strictly above the threshold."""
        return (self.alpha > alpha_threshold).astype(np.uint8)

    def usable(self, alpha_threshold: float = 0.5) -> bool:
        return bool(self.support(alpha_threshold).any())


@dataclass(frozen=True, eq=False)
class ShadowPattern:
    """Soft grayscale occlusion pattern; 1 = full shadow."""

    pattern: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pattern, dtype=np.float32)
        if p.ndim != 2:
            raise ShapeError(f"shadow pattern must be 2-D, got shape {p.shape}")
        if not np.all(np.isfinite(p)) or p.min() < 0 or p.max() > 1:
            raise ConfigError("shadow pattern values must be finite and in [0,1]")
        object.__setattr__(self, "pattern", p)

    @property
    def shape(self):
        return self.pattern.shape


@dataclass
class SynthConfig:
    paste_rate: float = 2.0
    paste_branch_policy: str = "either"  # t0_only | t1_only | either
    shadow_probability: float = 0.5
    shadow_weight_range: Tuple[float, float] = (0.2, 0.6)
    photometric_severity: float = 0.3
    median_kernel: int = 3
    alpha_threshold: float = 0.5
    rng_seed: int = 0

    def validate(self):
        if self.paste_rate < 0:
            raise ConfigError(f"paste_rate must be >= 0, got {self.paste_rate}")
        if self.paste_branch_policy not in ("t0_only", "t1_only", "either"):
            raise ConfigError(
                f"unknown paste_branch_policy {self.paste_branch_policy!r}"
            )
        if not 0.0 <= self.shadow_probability <= 1.0:
            raise ConfigError("shadow_probability must be in [0,1]")
        lo, hi = self.shadow_weight_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ConfigError("shadow_weight_range must be within [0,1] with lo <= hi")
        if not 0.0 <= self.photometric_severity <= 1.0:
            raise ConfigError("photometric_severity must be in [0,1]")
        if self.median_kernel < 1 or self.median_kernel % 2 == 0:
            raise ConfigError(f"median_kernel must be odd >= 1, got {self.median_kernel}")
        if not 0.0 < self.alpha_threshold < 1.0:
            raise ConfigError("alpha_threshold must be in (0,1)")
        return self


# --- elementary operations ----------------------------------------------


def paste_object(
    sample: LabeledSample,
    cutout: ObjectCutout,
    position: Tuple[int, int],
    branch: str,
    alpha_threshold: float = 0.5,
) -> LabeledSample:
    """Alpha-blend a cutout onto one branch and OR its support into the mask.

    The paste must fit fully inside the image; partial pastes are rejected.
    """
    if branch not in ("t0", "t1"):
        raise ConfigError(f"branch must be 't0' or 't1', got {branch!r}")
    row, col = position
    H, W = sample.pair.shape
    h, w = cutout.shape
    if row < 0 or col < 0 or row + h > H or col + w > W:
        raise PlacementError(
            f"cutout {h}x{w} at ({row},{col}) does not fit inside {H}x{W}"
        )

    image = np.array(sample.pair.t0 if branch == "t0" else sample.pair.t1)
    window = image[row : row + h, col : col + w]
    alpha = cutout.alpha[:, :, None]
    image[row : row + h, col : col + w] = alpha * cutout.rgb + (1.0 - alpha) * window

    old_mask = (
        sample.mask.data
        if sample.mask is not None
        else np.zeros((H, W), dtype=np.uint8)
    )
    new_mask = np.array(old_mask)
    new_mask[row : row + h, col : col + w] |= cutout.support(alpha_threshold)

    pair = ImagePair(
        t0=image if branch == "t0" else sample.pair.t0,
        t1=image if branch == "t1" else sample.pair.t1,
        scene_id=sample.pair.scene_id,
    )
    return LabeledSample(pair=pair, mask=ChangeMask(new_mask), provenance="synthetic")


def apply_shadow(image: np.ndarray, pattern: ShadowPattern, weight: float) -> np.ndarray:
    """Multiplicative darkening: out = image * (1 - weight * pattern)."""
    if not 0.0 <= weight <= 1.0:
        raise ConfigError(f"shadow weight must be in [0,1], got {weight}")
    img = np.asarray(image, dtype=np.float32)
    if img.shape[:2] != pattern.shape:
        raise ShapeError(
            f"image spatial shape {img.shape[:2]} != pattern shape {pattern.shape}"
        )
    shade = 1.0 - np.float32(weight) * pattern.pattern
    out = img * shade[:, :, None] if img.ndim == 3 else img * shade
    return np.clip(out, 0.0, 1.0)


def apply_shadow_to_sample(
    sample: LabeledSample, pattern: ShadowPattern, weight: float, branch: str = "t1"
) -> LabeledSample:
    """Shadow one branch of a sample; the GT mask passes through bit-identically."""
    if branch not in ("t0", "t1"):
        raise ConfigError(f"branch must be 't0' or 't1', got {branch!r}")
    t0, t1 = sample.pair.t0, sample.pair.t1
    if branch == "t0":
        t0 = apply_shadow(t0, pattern, weight)
    else:
        t1 = apply_shadow(t1, pattern, weight)
    pair = ImagePair(t0=t0, t1=t1, scene_id=sample.pair.scene_id)
    return LabeledSample(pair=pair, mask=sample.mask, provenance=sample.provenance)


def _median_blur(img: np.ndarray, kernel: int) -> np.ndarray:
    # cv2 float path only supports ksize 3/5; fall back to scipy for larger odd kernels
    if kernel == 1:
        return img
    if kernel in (3, 5):
        return cv2.medianBlur(np.ascontiguousarray(img, dtype=np.float32), kernel)
    return ndimage.median_filter(img, size=(kernel, kernel, 1))


def photometric_augment(
    image: np.ndarray, severity: float, kernel: int, rng: np.random.Generator
) -> np.ndarray:
    """Contrast scale, brightness offset, then median blur; clipped to [0,1].

    Contrast ~ U[1-severity, 1+severity], brightness ~ U[-severity, +severity].
    """
    if not 0.0 <= severity <= 1.0:
        raise ConfigError(f"severity must be in [0,1], got {severity}")
    if kernel < 1 or kernel % 2 == 0:
        raise ConfigError(f"median kernel must be odd >= 1, got {kernel}")
    img = np.asarray(image, dtype=np.float32)
    contrast = np.float32(rng.uniform(1.0 - severity, 1.0 + severity))
    brightness = np.float32(rng.uniform(-severity, severity))
    out = img * contrast + brightness
    out = _median_blur(out, kernel)
    return np.clip(out, 0.0, 1.0)


def label_or(mask_added: ChangeMask, mask_removed: ChangeMask) -> ChangeMask:
    """Elementwise logical OR of two binary masks."""
    if mask_added.shape != mask_removed.shape:
        raise ShapeError(
            f"mask shapes differ: {mask_added.shape} vs {mask_removed.shape}"
        )
    return ChangeMask(mask_added.data | mask_removed.data)


# --- procedural generators ----------------------------------------------

SCENE_JITTER_MAX = 0.15


def _random_color(rng, lo=0.25, hi=0.75):
    return rng.uniform(lo, hi, size=3).astype(np.float32)


def _render_background(rng: np.random.Generator, size) -> np.ndarray:
    """Smooth two-color gradient with muted rectangle/ellipse clutter."""
    H, W = size
    rows, cols = np.mgrid[0:H, 0:W].astype(np.float32)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(theta) * rows / H + np.sin(theta) * cols / W + 1.0) / 2.0
    ramp = np.clip(ramp, 0.0, 1.0)[:, :, None]
    c0, c1 = _random_color(rng), _random_color(rng)
    img = (1.0 - ramp) * c0 + ramp * c1

    n_clutter = int(rng.integers(4, 10))
    for _ in range(n_clutter):
        color = _random_color(rng, 0.2, 0.8)
        opacity = np.float32(rng.uniform(0.4, 0.9))
        h = int(rng.integers(H // 8, H // 3 + 1))
        w = int(rng.integers(W // 8, W // 3 + 1))
        r = int(rng.integers(0, H - h + 1))
        c = int(rng.integers(0, W - w + 1))
        if rng.random() < 0.5:
            region = np.ones((h, w), dtype=bool)
        else:
            rr, cc = np.mgrid[0:h, 0:w].astype(np.float32)
            region = ((rr - h / 2) / (h / 2)) ** 2 + ((cc - w / 2) / (w / 2)) ** 2 <= 1.0
        win = img[r : r + h, c : c + w]
        win[region] = (1.0 - opacity) * win[region] + opacity * color
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _photometric_jitter(img: np.ndarray, jitter: float, rng) -> np.ndarray:
    contrast = np.float32(rng.uniform(1.0 - jitter, 1.0 + jitter))
    brightness = np.float32(rng.uniform(-jitter, jitter))
    return np.clip(img * contrast + brightness, 0.0, 1.0)


def generate_scene(
    rng: np.random.Generator, size: Tuple[int, int], jitter: float = 0.12
) -> ImagePair:
    """Procedural unchanged pair: one background rendered twice with independent
    small photometric jitter, so t0 != t1 photometrically but not semantically.
    """
    H, W = size
    if H < 32 or W < 32:
        raise ConfigError(f"scene size must be at least 32x32, got {H}x{W}")
    if not 0.0 <= jitter <= SCENE_JITTER_MAX:
        raise ConfigError(f"scene jitter must be in [0, {SCENE_JITTER_MAX}]")
    scene_id = f"scene{int(rng.integers(0, 2 ** 32)):08x}"
    base = _render_background(rng, (H, W))
    t0 = _photometric_jitter(base, jitter, rng)
    t1 = _photometric_jitter(base, jitter, rng)
    return ImagePair(t0=t0, t1=t1, scene_id=scene_id)


def generate_cutout(
    rng: np.random.Generator, size_range: Tuple[int, int] = (14, 40)
) -> ObjectCutout:
    """Random saturated sprite (rectangle / ellipse / triangle) with a feathered
    alpha matte. Saturated colors keep sprites distinct from the muted scenes.
    """
    lo, hi = size_range
    if lo < 4 or hi < lo:
        raise ConfigError(f"bad cutout size_range {size_range}")
    h = int(rng.integers(lo, hi + 1))
    w = int(rng.integers(lo, hi + 1))
    kind = ("rect", "ellipse", "triangle")[int(rng.integers(0, 3))]

    canvas = np.zeros((h, w), dtype=np.uint8)
    if kind == "rect":
        canvas[1 : h - 1, 1 : w - 1] = 255
    elif kind == "ellipse":
        cv2.ellipse(
            canvas, (w // 2, h // 2), (w // 2 - 1, h // 2 - 1), 0, 0, 360, 255, -1
        )
    else:
        pts = np.array(
            [[1, h - 2], [w - 2, h - 2], [int(rng.integers(1, w - 1)), 1]],
            dtype=np.int32,
        )
        cv2.fillPoly(canvas, [pts], 255)
    alpha = cv2.GaussianBlur(canvas.astype(np.float32) / 255.0, (3, 3), 0.8)
    alpha = np.clip(alpha, 0.0, 1.0)

    # saturated base color: one channel pushed high, one low
    color = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
    color[int(rng.integers(0, 3))] = rng.uniform(0.85, 1.0)
    color[int(rng.integers(0, 3))] *= 0.2
    rgb = np.broadcast_to(color, (h, w, 3)).copy()
    if rng.random() < 0.5:  # two-tone stripe for texture
        color2 = np.clip(color * np.float32(rng.uniform(0.4, 0.7)), 0, 1)
        if rng.random() < 0.5:
            rgb[:, : w // 2] = color2
        else:
            rgb[h // 2 :, :] = color2
    return ObjectCutout(rgb=np.clip(rgb, 0, 1), alpha=alpha)


def generate_shadow_pattern(
    rng: np.random.Generator, size: Tuple[int, int]
) -> ShadowPattern:
    """Soft shadow pattern: a band with a soft edge, or smooth elliptical blobs."""
    H, W = size
    rows, cols = np.mgrid[0:H, 0:W].astype(np.float32)
    if rng.random() < 0.5:
        theta = rng.uniform(0, 2 * np.pi)
        offset = rng.uniform(-0.3, 0.3)
        softness = rng.uniform(0.02, 0.15) * max(H, W)
        d = (
            np.cos(theta) * (rows - H / 2)
            + np.sin(theta) * (cols - W / 2)
            - offset * max(H, W)
        )
        pattern = 1.0 / (1.0 + np.exp(-d / softness))
    else:
        pattern = np.zeros((H, W), dtype=np.float32)
        for _ in range(int(rng.integers(1, 4))):
            cr = rng.uniform(0, H)
            cc = rng.uniform(0, W)
            sr = rng.uniform(H / 6, H / 2)
            sc = rng.uniform(W / 6, W / 2)
            pattern += np.exp(
                -(((rows - cr) / sr) ** 2 + ((cols - cc) / sc) ** 2)
            )
        pattern = np.clip(pattern, 0.0, 1.0)
    return ShadowPattern(np.clip(pattern, 0.0, 1.0).astype(np.float32))


# --- dataset synthesis ---------------------------------------------------


def sample_seed_sequence(rng_seed: int, index: int) -> np.random.Generator:
    """Per-sample derived generator so parallel and serial synthesis agree."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=rng_seed, spawn_key=(index,))
    )


def _augment_branches(pair_arrays, rng, shadows, config: SynthConfig):
    """Shadow (with probability, independently per branch) then photometric jitter."""
    out = []
    for arr in pair_arrays:
        if shadows and rng.random() < config.shadow_probability:
            pattern = shadows[int(rng.integers(0, len(shadows)))]
            lo, hi = config.shadow_weight_range
            weight = float(rng.uniform(lo, hi))
            arr = apply_shadow(arr, pattern, weight)
        arr = photometric_augment(
            arr, config.photometric_severity, config.median_kernel, rng
        )
        out.append(arr)
    return out


def synth_dataset(
    backgrounds,
    cutouts,
    shadows,
    config: SynthConfig,
    count: int,
) -> list:
    """Synthesize `count` labeled samples from unchanged background pairs.

    Per sample: pick a background, paste a Poisson(paste_rate) number of cutouts
    at uniform valid positions on branches chosen by policy, then shadow each
    branch with probability shadow_probability, then photometric-augment both.
    The mask is built solely by the paste rule.
    """
    config.validate()
    if count < 0:
        raise ConfigError(f"count must be >= 0, got {count}")
    if not backgrounds:
        raise ConfigError("backgrounds must be nonempty")
    if config.paste_rate > 0 and not cutouts:
        raise ConfigError("cutouts must be nonempty when paste_rate > 0")
    if config.shadow_probability > 0 and not shadows:
        raise ConfigError("shadows must be nonempty when shadow_probability > 0")
    for cut in cutouts:
        for bg in backgrounds:
            if cut.shape[0] > bg.shape[0] or cut.shape[1] > bg.shape[1]:
                raise ConfigError(
                    f"cutout {cut.shape} larger than background {bg.shape}"
                )
    for sh in shadows:
        for bg in backgrounds:
            if sh.shape != bg.shape:
                raise ShapeError(
                    f"shadow pattern {sh.shape} does not match background {bg.shape}"
                )

    samples = []
    for i in range(count):
        rng = sample_seed_sequence(config.rng_seed, i)
        bg = backgrounds[int(rng.integers(0, len(backgrounds)))]
        sample = LabeledSample(
            pair=bg, mask=ChangeMask.zeros(bg.shape), provenance="synthetic"
        )

        n_paste = int(rng.poisson(config.paste_rate)) if config.paste_rate > 0 else 0
        for _ in range(n_paste):
            cut = cutouts[int(rng.integers(0, len(cutouts)))]
            h, w = cut.shape
            H, W = sample.pair.shape
            row = int(rng.integers(0, H - h + 1))
            col = int(rng.integers(0, W - w + 1))
            if config.paste_branch_policy == "t0_only":
                branch = "t0"
            elif config.paste_branch_policy == "t1_only":
                branch = "t1"
            else:
                branch = "t0" if rng.random() < 0.5 else "t1"
            sample = paste_object(
                sample, cut, (row, col), branch, config.alpha_threshold
            )

        t0, t1 = _augment_branches(
            [sample.pair.t0, sample.pair.t1], rng, shadows, config
        )
        pair = ImagePair(t0=t0, t1=t1, scene_id=sample.pair.scene_id)
        samples.append(
            LabeledSample(pair=pair, mask=sample.mask, provenance="synthetic")
        )
    return samples


# spawn keys reserved for asset-pool rngs; per-sample keys are (0..count-1)
_POOL_KEYS = {"scene": 0xFFFF0001, "cutout": 0xFFFF0002, "shadow": 0xFFFF0003}


def _pool_rng(seed: int, which: str) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(_POOL_KEYS[which],))
    )


def generate_asset_pools(
    seed: int,
    size: Tuple[int, int],
    n_scenes: int = 8,
    n_cutouts: int = 16,
    n_shadows: int = 8,
    cutout_range: Tuple[int, int] = (14, 40),
):
    """Procedural (backgrounds, cutouts, shadows) pools for synth_dataset.

    Pool rngs use spawn keys disjoint from the per-sample keys, so pools and
    samples derived from one seed never share a random stream.
    """
    rng = _pool_rng(seed, "scene")
    scenes = [generate_scene(rng, size) for _ in range(n_scenes)]
    rng = _pool_rng(seed, "cutout")
    cutouts = []
    attempts = 0
    while len(cutouts) < n_cutouts:
        if attempts > 20 * n_cutouts + 20:
            raise ConfigError("could not generate usable cutouts; widen size range")
        attempts += 1
        c = generate_cutout(rng, cutout_range)
        if c.usable():
            cutouts.append(c)
    rng = _pool_rng(seed, "shadow")
    shadows = [generate_shadow_pattern(rng, size) for _ in range(n_shadows)]
    return scenes, cutouts, shadows

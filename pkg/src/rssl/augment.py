"""View generation for pre-training and the downstream eval pipeline.

Every stochastic transform here is a pure function of (input, seed): callers
derive a per-image seed from (global seed, epoch/iteration, sample index) via
`rssl.rng.derive_seed`, so batches can be built in parallel and in any order
without changing results.

Images move through this module as float32 (3, H, W) tensors in [0, 1];
`to_chw` converts from numpy HWC arrays or PIL images.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor
from torchvision.transforms import InterpolationMode
from torchvision.transforms.v2 import functional as TF

from .errors import ConfigurationError, DegenerateInputError, DimensionError
from .rng import generator

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# Smallest source side the view sampler accepts.
MIN_SOURCE_SIZE = 8

_ASPECT_RANGE = (3.0 / 4.0, 4.0 / 3.0)
_BLUR_SIGMA = (0.1, 2.0)


@dataclass(frozen=True)
class SslRecipe:
    """Stochastic two-view recipe. Defaults follow the standard Siamese
    pre-training pipeline: scale-(0.2,1.0) random resized crop, flip p=0.5,
    color jitter 0.4/0.4/0.4/0.1 with p=0.8, grayscale p=0.2, blur p=0.5."""

    crop_size: int = 224
    crop_scale_range: tuple[float, float] = (0.2, 1.0)
    flip_prob: float = 0.5
    rotation_choices: tuple[int, ...] = (0,)
    color_jitter_strength: float = 1.0
    color_jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    normalization: tuple[tuple[float, float, float], tuple[float, float, float]] = (
        IMAGENET_MEAN,
        IMAGENET_STD,
    )

    def __post_init__(self):
        for name in ("flip_prob", "color_jitter_prob", "grayscale_prob", "blur_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"{name} must be in [0, 1], got {p}")
        lo, hi = self.crop_scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ConfigurationError(f"crop_scale_range must lie in (0, 1], got {lo, hi}")
        if self.crop_size <= 0:
            raise ConfigurationError("crop_size must be positive")
        if self.color_jitter_strength < 0:
            raise ConfigurationError("color_jitter_strength must be >= 0")
        if any(r % 90 != 0 for r in self.rotation_choices):
            raise ConfigurationError("rotation_choices must be multiples of 90 degrees")
        if not self.rotation_choices:
            raise ConfigurationError("rotation_choices must not be empty (use (0,))")


@dataclass(frozen=True)
class EvalRecipe:
    """Downstream pipeline: resize, train-only flips, center crop, normalize.
    Datasets named in `skip_resize_for` (EuroSAT's 64px tiles by default) skip
    the resize stage and are scaled straight to the crop size."""

    resize_to: int = 256
    center_crop: int = 224
    train_flip: bool = True
    normalization: tuple[tuple[float, float, float], tuple[float, float, float]] = (
        IMAGENET_MEAN,
        IMAGENET_STD,
    )
    skip_resize_for: tuple[str, ...] = ("EuroSAT",)

    def __post_init__(self):
        if self.center_crop > self.resize_to:
            raise ConfigurationError(
                f"center_crop {self.center_crop} exceeds resize_to {self.resize_to}"
            )
        if self.center_crop <= 0:
            raise ConfigurationError("center_crop must be positive")


def to_chw(image) -> Tensor:
    """Accept (3,H,W)/(H,W,3) tensors, HWC numpy arrays, or PIL images and
    return float32 (3, H, W) in [0, 1]."""
    if isinstance(image, Tensor):
        t = image
        if t.ndim == 3 and t.shape[-1] == 3 and t.shape[0] != 3:
            t = t.permute(2, 0, 1)
    elif isinstance(image, np.ndarray):
        if image.ndim != 3 or image.shape[-1] != 3:
            raise DimensionError(f"expected HxWx3 array, got shape {image.shape}")
        t = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)
    else:  # PIL
        t = torch.from_numpy(np.asarray(image.convert("RGB")).copy()).permute(2, 0, 1)
    if t.dtype == torch.uint8:
        t = t.float() / 255.0
    t = t.float()
    if t.ndim != 3 or t.shape[0] != 3:
        raise DimensionError(f"expected a 3-channel image, got shape {tuple(t.shape)}")
    return t


def normalize(image: Tensor, mean, std) -> Tensor:
    """Per-channel (x - mean) / std; zero-std channels fall back to std=1."""
    std = list(std)
    if any(s == 0 for s in std):
        warnings.warn("zero std channel in normalization; substituting 1.0")
        std = [s if s != 0 else 1.0 for s in std]
    return TF.normalize(image, mean=list(mean), std=std)


def _uniform(g, lo, hi) -> float:
    return lo + (hi - lo) * torch.rand((), generator=g).item()


def _bernoulli(g, p) -> bool:
    return torch.rand((), generator=g).item() < p


def _sample_resized_crop(h, w, scale, g):
    """Standard random-resized-crop sampling: ten area/aspect proposals, then
    a deterministic aspect-clamped center fallback."""
    area = h * w
    log_lo, log_hi = math.log(_ASPECT_RANGE[0]), math.log(_ASPECT_RANGE[1])
    for _ in range(10):
        target_area = area * _uniform(g, scale[0], scale[1])
        aspect = math.exp(_uniform(g, log_lo, log_hi))
        cw = int(round(math.sqrt(target_area * aspect)))
        ch = int(round(math.sqrt(target_area / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(torch.randint(0, h - ch + 1, (), generator=g).item())
            left = int(torch.randint(0, w - cw + 1, (), generator=g).item())
            return top, left, ch, cw
    in_ratio = w / h
    if in_ratio < _ASPECT_RANGE[0]:
        cw, ch = w, min(h, int(round(w / _ASPECT_RANGE[0])))
    elif in_ratio > _ASPECT_RANGE[1]:
        ch, cw = h, min(w, int(round(h * _ASPECT_RANGE[1])))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def _color_jitter(img, strength, g):
    b = c = s = 0.4 * strength
    hue = min(0.1 * strength, 0.5)
    ops = []
    ops.append(("brightness", _uniform(g, max(0.0, 1 - b), 1 + b)))
    ops.append(("contrast", _uniform(g, max(0.0, 1 - c), 1 + c)))
    ops.append(("saturation", _uniform(g, max(0.0, 1 - s), 1 + s)))
    ops.append(("hue", _uniform(g, -hue, hue)))
    order = torch.randperm(4, generator=g).tolist()
    for i in order:
        kind, factor = ops[i]
        if kind == "brightness":
            img = TF.adjust_brightness(img, factor)
        elif kind == "contrast":
            img = TF.adjust_contrast(img, factor)
        elif kind == "saturation":
            img = TF.adjust_saturation(img, factor)
        else:
            img = TF.adjust_hue(img, factor)
    return img


def _blur_kernel(crop_size: int) -> int:
    return max(3, (crop_size // 20) * 2 + 1)


def _one_view(img: Tensor, recipe: SslRecipe, g) -> Tensor:
    h, w = img.shape[-2:]
    top, left, ch, cw = _sample_resized_crop(h, w, recipe.crop_scale_range, g)
    out = TF.resized_crop(
        img,
        top,
        left,
        ch,
        cw,
        size=[recipe.crop_size, recipe.crop_size],
        interpolation=InterpolationMode.BILINEAR,
        antialias=True,
    )
    if _bernoulli(g, recipe.flip_prob):
        out = TF.horizontal_flip(out)
    if len(recipe.rotation_choices) > 1 or recipe.rotation_choices[0] % 360 != 0:
        pick = int(torch.randint(0, len(recipe.rotation_choices), (), generator=g).item())
        quarter_turns = (recipe.rotation_choices[pick] // 90) % 4
        if quarter_turns:
            out = torch.rot90(out, quarter_turns, dims=(-2, -1))
    if recipe.color_jitter_strength > 0 and _bernoulli(g, recipe.color_jitter_prob):
        out = _color_jitter(out, recipe.color_jitter_strength, g)
    if _bernoulli(g, recipe.grayscale_prob):
        out = TF.rgb_to_grayscale(out, num_output_channels=3)
    if _bernoulli(g, recipe.blur_prob):
        sigma = _uniform(g, *_BLUR_SIGMA)
        out = TF.gaussian_blur(out, kernel_size=_blur_kernel(recipe.crop_size), sigma=sigma)
    mean, std = recipe.normalization
    return normalize(out, mean, std)


def make_ssl_views(image, recipe: SslRecipe, seed: int) -> tuple[Tensor, Tensor]:
    """Two independently augmented views of one image, fully determined by
    `seed`. Both come out as (3, crop_size, crop_size), normalized."""
    img = to_chw(image)
    h, w = img.shape[-2:]
    if min(h, w) < MIN_SOURCE_SIZE:
        raise DegenerateInputError(
            f"image {h}x{w} below the minimum source size {MIN_SOURCE_SIZE}"
        )
    g = generator("ssl-view", seed)
    return _one_view(img, recipe, g), _one_view(img, recipe, g)


def eval_transform(image, recipe: EvalRecipe, split: str, dataset_name: str, seed: int = 0) -> Tensor:
    """resize -> (train-only flips) -> center crop -> normalize.

    val/test outputs are a pure function of the input; the train split flips
    horizontally/vertically with p=0.5 each, driven by `seed`.
    """
    if split not in ("train", "val", "test"):
        raise ConfigurationError(f"unknown split {split!r}")
    img = to_chw(image)
    skip = {name.lower() for name in recipe.skip_resize_for}
    if dataset_name.lower() in skip:
        out = TF.resize(
            img,
            [recipe.center_crop, recipe.center_crop],
            interpolation=InterpolationMode.BILINEAR,
            antialias=True,
        )
    else:
        out = TF.resize(
            img,
            [recipe.resize_to, recipe.resize_to],
            interpolation=InterpolationMode.BILINEAR,
            antialias=True,
        )
    if split == "train" and recipe.train_flip:
        g = generator("eval-flip", seed)
        if _bernoulli(g, 0.5):
            out = TF.horizontal_flip(out)
        if _bernoulli(g, 0.5):
            out = TF.vertical_flip(out)
    if out.shape[-1] != recipe.center_crop or out.shape[-2] != recipe.center_crop:
        out = TF.center_crop(out, [recipe.center_crop, recipe.center_crop])
    mean, std = recipe.normalization
    return normalize(out, mean, std)


def channel_stats(images) -> tuple[tuple[float, float, float], tuple[float, float, float]]:
    """Streaming per-channel mean and (population) std of pixel intensities
    over an iterable of images."""
    count = 0
    total = np.zeros(3, dtype=np.float64)
    total_sq = np.zeros(3, dtype=np.float64)
    for image in images:
        x = to_chw(image).numpy().astype(np.float64).reshape(3, -1)
        count += x.shape[1]
        total += x.sum(axis=1)
        total_sq += (x * x).sum(axis=1)
    if count == 0:
        raise DegenerateInputError("channel_stats over an empty dataset")
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    std = np.sqrt(var)
    return tuple(mean.tolist()), tuple(std.tolist())

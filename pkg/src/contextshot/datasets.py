"""Labeled image collections: folder loading, class-level splits, preprocessing.

A :class:`LabeledImageSet` is the unit everything else consumes: encoder
pretraining batches, episode sampling, and evaluation all draw from one.
Sets are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torchvision.transforms.v2.functional as TF
from PIL import Image, UnidentifiedImageError

from .errors import StructureError, ValidationError
from .seeding import make_rng

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}


@dataclass(frozen=True)
class LabeledImageSet:
    """Images with integer class labels, stacked into one array.

    pixels: (N, H, W, C) float32 in [0, 1]
    class_ids: (N,) int64, contiguous 0..C-1, every class non-empty
    class_names: one name per class id
    image_ids: one opaque id per item (file stem or generator tag)
    """

    pixels: np.ndarray
    class_ids: np.ndarray
    class_names: tuple[str, ...]
    image_ids: tuple[str, ...]

    def __post_init__(self):
        if self.pixels.ndim != 4:
            raise ValidationError(f"pixels must be (N, H, W, C), got shape {self.pixels.shape}")
        n = self.pixels.shape[0]
        if len(self.class_ids) != n or len(self.image_ids) != n:
            raise ValidationError("pixels, class_ids and image_ids must have equal length")
        if n == 0:
            raise ValidationError("a LabeledImageSet must contain at least one image")
        ids = np.asarray(self.class_ids)
        present = np.unique(ids)
        expected = np.arange(len(self.class_names))
        if not np.array_equal(present, expected):
            raise ValidationError(
                f"class ids must be contiguous 0..{len(self.class_names) - 1} with every class non-empty"
            )
        lo, hi = float(self.pixels.min()), float(self.pixels.max())
        if lo < 0.0 or hi > 1.0:
            raise ValidationError(f"pixel values must lie in [0, 1], found range [{lo}, {hi}]")

    @property
    def n_items(self) -> int:
        return self.pixels.shape[0]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_size(self) -> tuple[int, int]:
        return (self.pixels.shape[1], self.pixels.shape[2])

    @property
    def channels(self) -> int:
        return self.pixels.shape[3]

    def indices_of_class(self, class_id: int) -> np.ndarray:
        return np.nonzero(self.class_ids == class_id)[0]

    def class_item_counts(self) -> np.ndarray:
        return np.bincount(self.class_ids, minlength=self.n_classes)

    def subset_of_classes(self, keep_class_ids) -> "LabeledImageSet":
        """Restrict to the given classes, remapping ids to 0..len(keep)-1.

        `keep_class_ids` order defines the new id order; original names are kept.
        """
        keep = [int(c) for c in keep_class_ids]
        if len(set(keep)) != len(keep):
            raise ValidationError("duplicate class ids in subset request")
        for c in keep:
            if not 0 <= c < self.n_classes:
                raise ValidationError(f"class id {c} out of range")
        remap = {old: new for new, old in enumerate(keep)}
        mask = np.isin(self.class_ids, keep)
        idx = np.nonzero(mask)[0]
        new_ids = np.array([remap[int(c)] for c in self.class_ids[idx]], dtype=np.int64)
        return LabeledImageSet(
            pixels=self.pixels[idx],
            class_ids=new_ids,
            class_names=tuple(self.class_names[c] for c in keep),
            image_ids=tuple(self.image_ids[i] for i in idx),
        )


@dataclass(frozen=True)
class AugmentParams:
    """Training-time perturbations: Gaussian blur and sharpness jitter.

    Each perturbation is applied independently with `apply_probability`;
    magnitudes are drawn uniformly from the configured ranges.
    """

    blur_sigma_range: tuple[float, float] = (0.1, 1.5)
    blur_kernel: int = 3
    sharpness_factor_range: tuple[float, float] = (0.5, 2.0)
    apply_probability: float = 0.5
    target_size: tuple[int, int] = (64, 64)

    def __post_init__(self):
        if self.blur_sigma_range[0] > self.blur_sigma_range[1]:
            raise ValidationError("blur_sigma_range must satisfy lo <= hi")
        if self.sharpness_factor_range[0] > self.sharpness_factor_range[1]:
            raise ValidationError("sharpness_factor_range must satisfy lo <= hi")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ValidationError("blur_kernel must be an odd integer >= 1")
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ValidationError("apply_probability must lie in [0, 1]")


def load_image_folder(root, target_size: tuple[int, int]) -> LabeledImageSet:
    """Load a `root/<class_name>/<image files>` tree as a LabeledImageSet.

    Class ids follow sorted subdirectory names; images are resized to
    `target_size` and scaled to [0, 1]. Undecodable files are skipped with
    a warning; a class with no decodable image is a structure error.
    """
    root = Path(root)
    if not root.exists():
        raise FileNotFoundError(f"dataset root does not exist: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise StructureError(f"dataset root contains no class directories: {root}")

    pixels, class_ids, image_ids, class_names = [], [], [], []
    for class_id, class_dir in enumerate(class_dirs):
        class_names.append(class_dir.name)
        files = sorted(p for p in class_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
        loaded = 0
        for path in files:
            try:
                with Image.open(path) as img:
                    img = img.convert("RGB").resize((target_size[1], target_size[0]), Image.BILINEAR)
            except (UnidentifiedImageError, OSError) as exc:
                log.warning("skipping undecodable image %s: %s", path, exc)
                continue
            pixels.append(np.asarray(img, dtype=np.float32) / 255.0)
            class_ids.append(class_id)
            image_ids.append(f"{class_dir.name}/{path.stem}")
            loaded += 1
        if loaded == 0:
            raise StructureError(f"class directory has no decodable images: {class_dir}")

    return LabeledImageSet(
        pixels=np.stack(pixels),
        class_ids=np.array(class_ids, dtype=np.int64),
        class_names=tuple(class_names),
        image_ids=tuple(image_ids),
    )


def save_image_folder(dataset: LabeledImageSet, root) -> None:
    """Write a LabeledImageSet as 8-bit PNGs in the folder layout.

    Directory names are the class names; loading the result back with
    sorted-name ordering reproduces the class ids as long as the names
    sort in id order (the synthetic generator guarantees this).
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    counters = [0] * dataset.n_classes
    for i in range(dataset.n_items):
        class_id = int(dataset.class_ids[i])
        class_dir = root / dataset.class_names[class_id]
        class_dir.mkdir(exist_ok=True)
        arr = np.clip(np.rint(dataset.pixels[i] * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(class_dir / f"{counters[class_id]:05d}.png")
        counters[class_id] += 1


def split_classes(dataset: LabeledImageSet, holdout_classes: int, seed: int):
    """Partition classes into (train, holdout) sets, deterministic in `seed`.

    Returns two LabeledImageSets over disjoint classes whose union is the
    original class set.
    """
    c = dataset.n_classes
    if not 0 < holdout_classes < c:
        raise ValidationError(f"holdout_classes must be in (0, {c}), got {holdout_classes}")
    rng = make_rng(seed, "class-split")
    order = rng.permutation(c)
    holdout = sorted(int(x) for x in order[:holdout_classes])
    train = sorted(int(x) for x in order[holdout_classes:])
    return dataset.subset_of_classes(train), dataset.subset_of_classes(holdout)


def _to_chw(image: np.ndarray) -> torch.Tensor:
    if image.ndim != 3:
        raise ValidationError(f"image must be (H, W, C), got shape {image.shape}")
    return torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)


def preprocess(
    image: np.ndarray,
    params: AugmentParams,
    mode: str,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Resize an image to the target size; in train mode also augment.

    In train mode, Gaussian blur (sigma ~ U(range)) and sharpness adjustment
    (factor ~ U(range)) are each applied independently with
    `params.apply_probability`, drawing from `rng`. Eval mode only resizes.
    Output is (H, W, C) float32 clamped to [0, 1].
    """
    if mode not in ("train", "eval"):
        raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and rng is None:
        raise ValidationError("train-mode preprocessing requires an rng stream")

    x = _to_chw(image)
    if (x.shape[1], x.shape[2]) != tuple(params.target_size):
        x = TF.resize(x, list(params.target_size), antialias=True)

    if mode == "train":
        if rng.random() < params.apply_probability:
            sigma = float(rng.uniform(*params.blur_sigma_range))
            if sigma > 0.0:
                x = TF.gaussian_blur(x, kernel_size=params.blur_kernel, sigma=sigma)
        if rng.random() < params.apply_probability:
            factor = float(rng.uniform(*params.sharpness_factor_range))
            x = TF.adjust_sharpness(x, factor)

    x = x.clamp_(0.0, 1.0)
    return x.permute(1, 2, 0).contiguous().numpy()


def preprocess_batch(
    pixels: np.ndarray,
    params: AugmentParams,
    mode: str,
    base_seed: int = 0,
) -> np.ndarray:
    """Preprocess a stack of images, one derived rng stream per image.

    Streams are keyed by position in the stack, so the result is independent
    of any parallel execution schedule.
    """
    out = [
        preprocess(pixels[i], params, mode, make_rng(base_seed, "img", i) if mode == "train" else None)
        for i in range(pixels.shape[0])
    ]
    return np.stack(out)

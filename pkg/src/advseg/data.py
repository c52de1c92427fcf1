"""Deterministic synthetic off-road scenes with dense segmentation masks.

Scenes are layered procedurally: a sky gradient above a noisy horizon, a
distant-terrain strip, a vegetation band, a grassy foreground crossed by a
meandering trail (smooth or rough), plus puddles on the trail, rock
obstacles, dense-brush patches, and tree trunks. Classes are told apart by
texture statistics and context, not by unique colors: the three greens
(vegetation, grass, brush) and the three browns (both trail types, trunks)
overlap in RGB, and every image gets its own photometric jitter, so a
per-pixel color rule cannot separate the classes while a small convnet
can.

All randomness flows from ``np.random.default_rng((spec.seed, index))``:
the same spec and index always produce bit-identical scenes, on any
machine.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, replace

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image
from scipy.ndimage import gaussian_filter, gaussian_filter1d

CLASS_NAMES = (
    "background",
    "vegetation",
    "traversable_grass",
    "smooth_trail",
    "obstacle",
    "sky",
    "rough_trail",
    "puddle",
    "non_traversable_vegetation",
    "tree",
)

NUM_CLASSES = len(CLASS_NAMES)

# viz palette only; scene colors come from the textures below
CLASS_COLORS = np.array([
    [120, 110, 90],    # background
    [60, 140, 60],     # vegetation
    [170, 210, 90],    # traversable grass
    [200, 170, 130],   # smooth trail
    [110, 110, 120],   # obstacle
    [135, 190, 240],   # sky
    [150, 110, 70],    # rough trail
    [90, 130, 200],    # puddle
    [20, 80, 30],      # non-traversable vegetation
    [130, 80, 40],     # tree
], dtype=np.uint8)

_MANIFEST = "manifest.txt"
_FORMAT_VERSION = 1

_SPLITS = ("train", "val", "test")


class DatasetFormatError(ValueError):
    """An on-disk dataset is missing, incomplete, or malformed."""


@dataclass(frozen=True)
class SceneSpec:
    """Generator knobs; two different specs give two different 'sites'."""

    seed: int = 0
    image_size: int = 64
    horizon_band: tuple[float, float] = (0.20, 0.34)
    trail_width_range: tuple[float, float] = (0.20, 0.36)
    obstacle_count_range: tuple[int, int] = (0, 3)
    puddle_probability: float = 0.75
    texture_noise_scale: float = 1.0

    def validate(self) -> None:
        if self.image_size < 16 or self.image_size % 8:
            raise ValueError("image_size must be >= 16 and divisible by 8")
        lo, hi = self.horizon_band
        if not 0.05 <= lo < hi <= 0.6:
            raise ValueError(f"horizon_band {self.horizon_band} outside (0.05, 0.6)")
        lo, hi = self.trail_width_range
        if not 0.02 <= lo < hi <= 0.8:
            raise ValueError(f"trail_width_range {self.trail_width_range} invalid")
        lo, hi = self.obstacle_count_range
        if lo < 0 or hi < lo:
            raise ValueError(f"obstacle_count_range {self.obstacle_count_range} invalid")
        if not 0.0 <= self.puddle_probability <= 1.0:
            raise ValueError("puddle_probability must be in [0, 1]")
        if self.texture_noise_scale <= 0:
            raise ValueError("texture_noise_scale must be positive")


def _noise(rng, size, sigma, amp):
    n = rng.standard_normal((size, size))
    if sigma > 0:
        n = gaussian_filter(n, sigma, mode="reflect")
    return n / (n.std() + 1e-9) * amp


def _noise1d(rng, size, sigma, amp):
    n = rng.standard_normal(size)
    if sigma > 0:
        n = gaussian_filter1d(n, sigma, mode="reflect")
    return n / (n.std() + 1e-9) * amp


def _fill_quad(mask, cx, cy, radii, angles, value):
    size = mask.shape[0]
    xs = cx + radii * np.cos(angles)
    ys = cy + radii * np.sin(angles)
    yy, xx = np.mgrid[0:size, 0:size]
    inside = np.ones((size, size), dtype=bool)
    for i in range(4):
        x1, y1 = xs[i], ys[i]
        x2, y2 = xs[(i + 1) % 4], ys[(i + 1) % 4]
        # vertices wind counter-clockwise, so interior is the left half-plane
        inside &= (x2 - x1) * (yy - y1) - (y2 - y1) * (xx - x1) >= 0
    mask[inside] = value
    return inside


def _disk(size, cx, cy, rx, ry):
    yy, xx = np.mgrid[0:size, 0:size]
    return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0


def generate_scene(spec: SceneSpec, index: int):
    """One (image, mask) pair: image (3,S,S) float64 in [0,1], mask (S,S) uint8."""
    spec.validate()
    rng = np.random.default_rng((spec.seed, index))
    size = spec.image_size
    yy = np.arange(size)[:, None]
    mask = np.zeros((size, size), dtype=np.uint8)

    # --- geometry ----------------------------------------------------------
    horizon = rng.uniform(*spec.horizon_band) * size
    horizon_line = horizon + _noise1d(rng, size, 5.0, 0.025 * size)
    mask[yy < horizon_line[None, :]] = 5  # sky

    bg_depth = rng.uniform(0.03, 0.08) * size
    veg_depth = rng.uniform(0.12, 0.20) * size
    veg_top = horizon_line + bg_depth
    veg_bottom = veg_top + veg_depth + _noise1d(rng, size, 4.0, 0.02 * size)
    band = (yy >= veg_top[None, :]) & (yy < veg_bottom[None, :])
    mask[band] = 1  # vegetation band
    mask[yy >= veg_bottom[None, :]] = 2  # grassy foreground

    ground_top = float(veg_bottom.mean())

    # dense brush: blobs hugging the vegetation band and field edges
    for _ in range(int(rng.integers(2, 5))):
        bx = rng.uniform(0.05, 0.95) * size
        by = rng.uniform(veg_top.mean(), min(ground_top + 0.18 * size, size - 2))
        brx = rng.uniform(0.05, 0.11) * size
        bry = rng.uniform(0.04, 0.08) * size
        blob = _disk(size, bx, by, brx, bry) & (mask != 5)
        mask[blob] = 8

    # extra vegetation patches on the field
    for _ in range(int(rng.integers(1, 4))):
        bx = rng.uniform(0.05, 0.95) * size
        by = rng.uniform(ground_top, size - 2)
        blob = _disk(size, bx, by, rng.uniform(0.05, 0.12) * size,
                     rng.uniform(0.03, 0.07) * size) & (mask != 5)
        mask[blob] = 1

    # trail: meandering corridor from the bottom edge up into the band
    trail_kind = 3 if rng.random() < 0.5 else 6
    trail_top = float(veg_top.mean())
    center = (rng.uniform(0.32, 0.68) * size
              + np.linspace(rng.uniform(-0.18, 0.18) * size, 0.0, size)[::-1]
              + _noise1d(rng, size, 7.0, 0.05 * size))
    half_bottom = rng.uniform(*spec.trail_width_range) * size / 2.0
    half_top = 0.25 * half_bottom
    t = np.clip((np.arange(size) - trail_top) / max(size - 1 - trail_top, 1.0), 0.0, 1.0)
    half = half_top + (half_bottom - half_top) * t
    xx = np.arange(size)[None, :]
    offset = np.abs(xx - center[:, None])
    corridor = (offset <= half[:, None]) & (yy >= trail_top)
    margin = (offset <= half[:, None] + rng.uniform(0.04, 0.09) * size) \
        & (yy >= trail_top) & ~corridor
    mask[margin & (mask != 5)] = 2  # grass verge
    mask[corridor & (mask != 5)] = trail_kind

    # puddles sit on the trail surface
    puddle_zone = corridor | margin
    for attempt in range(2):
        chance = spec.puddle_probability if attempt == 0 else spec.puddle_probability * 0.5
        if rng.random() < chance:
            py = rng.uniform(max(trail_top + 2, 0.5 * size), size - 3)
            px = center[int(py)] + rng.uniform(-0.3, 0.3) * half[int(py)] * 2
            prx = rng.uniform(0.09, 0.20) * size
            pry = rng.uniform(0.35, 0.55) * prx
            mask[_disk(size, px, py, prx, pry) & puddle_zone] = 7

    # rock obstacles in the foreground, biased toward the trail edges
    lo, hi = spec.obstacle_count_range
    for _ in range(int(rng.integers(lo, hi + 1))):
        oy = rng.uniform(ground_top, size - 4)
        if rng.random() < 0.6:
            side = 1 if rng.random() < 0.5 else -1
            ox = center[int(oy)] + side * (half[int(oy)] + rng.uniform(2, 8))
        else:
            ox = rng.uniform(0.08, 0.92) * size
        radii = rng.uniform(0.05, 0.09) * size * rng.uniform(0.7, 1.3, 4)
        angles = np.deg2rad(np.array([20, 110, 200, 290]) + rng.uniform(-25, 25, 4))
        _fill_quad(mask, ox, oy, radii, angles, 4)

    # tree trunks with a leafy crown; crowns stay below the top rows
    for _ in range(int(rng.integers(0, 4))):
        base_y = rng.uniform(veg_top.mean() + 2, ground_top + 0.22 * size)
        tx = rng.uniform(0.06, 0.94) * size
        if abs(tx - center[int(min(base_y, size - 1))]) < half_bottom + 3:
            tx = (tx + size / 2) % size  # keep trunks off the trail corridor
        height = rng.uniform(0.22, 0.42) * size
        top_y = max(3.0, base_y - height)
        width = rng.uniform(1.2, 2.2)
        crown_r = rng.uniform(0.05, 0.10) * size
        crown_y = max(top_y, crown_r + 1.0)
        crown = _disk(size, tx, crown_y, crown_r, crown_r * 0.8)
        mask[crown] = 1
        trunk = (np.abs(xx - tx) <= width) & (yy >= top_y) & (yy <= base_y)
        mask[trunk] = 9

    # --- textures -----------------------------------------------------------
    ts = spec.texture_noise_scale
    tex = np.zeros((NUM_CLASSES, 3, size, size))
    grad = (yy / (size - 1.0))[None, :, :]

    def layer(base, *noises):
        out = np.zeros((3, size, size))
        for c in range(3):
            out[c] = base[c]
        for n in noises:
            out += n
        return out

    tex[0] = layer((0.46, 0.41, 0.34), _noise(rng, size, 3.0, 0.06 * ts),
                   _noise(rng, size, 0.0, 0.025 * ts))
    tex[1] = layer((0.26, 0.44, 0.18), _noise(rng, size, 1.2, 0.075 * ts),
                   _noise(rng, size, 0.0, 0.02 * ts))
    tex[2] = layer((0.40, 0.52, 0.24), _noise(rng, size, 0.6, 0.045 * ts))
    tex[3] = layer((0.52, 0.43, 0.31), _noise(rng, size, 2.5, 0.018 * ts)) + 0.04 * grad
    facets = np.floor(_noise(rng, size, 3.0, 1.0) * 2.0) / 2.0 * 0.09 * ts
    tex[4] = layer((0.42, 0.41, 0.39), facets, _noise(rng, size, 0.0, 0.02 * ts))
    sky_top = np.array([0.60, 0.72, 0.88])
    sky_bottom = np.array([0.80, 0.85, 0.93])
    sky_t = np.clip(yy / max(horizon, 1.0), 0.0, 1.0)[None, :, :]
    tex[5] = sky_top[:, None, None] + (sky_bottom - sky_top)[:, None, None] * sky_t \
        + _noise(rng, size, 2.0, 0.012 * ts)
    stones = (_noise(rng, size, 1.0, 1.0) > 1.1) * 0.12 * ts
    tex[6] = layer((0.49, 0.39, 0.28), _noise(rng, size, 0.8, 0.11 * ts), -stones)
    tex[7] = layer((0.62, 0.70, 0.83), _noise(rng, size, 2.0, 0.02 * ts))
    tex[8] = layer((0.18, 0.30, 0.13), _noise(rng, size, 1.6, 0.10 * ts))
    stripes = _noise1d(rng, size, 0.8, 0.07 * ts)[None, None, :]
    tex[9] = layer((0.40, 0.29, 0.20)) + np.broadcast_to(stripes, (3, size, size))

    image = np.zeros((3, size, size))
    for cls in range(NUM_CLASSES):
        sel = mask == cls
        if sel.any():
            image[:, sel] = tex[cls][:, sel]

    # per-image photometric jitter: moves class color statistics between
    # images so a per-pixel color rule cannot memorize the palette
    gains = rng.uniform(0.86, 1.14, size=3)
    contrast = rng.uniform(0.82, 1.22)
    brightness = rng.uniform(-0.10, 0.10)
    image = (image * gains[:, None, None] - 0.5) * contrast + 0.5 + brightness
    return np.clip(image, 0.0, 1.0), mask


# ---------------------------------------------------------------------------
# dataset container


@dataclass
class LabeledDataset:
    """Images (N,3,H,W) in [0,1], masks (N,H,W) uint8, one split tag each."""

    images: np.ndarray
    masks: np.ndarray
    split_tags: np.ndarray
    class_names: tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        self.split_tags = np.asarray(self.split_tags, dtype="<U5")
        self.validate()

    def validate(self) -> None:
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ValueError(f"images must be (N,3,H,W), got {self.images.shape}")
        n = self.images.shape[0]
        if self.masks.shape != (n,) + self.images.shape[2:]:
            raise ValueError("masks do not match images")
        if self.split_tags.shape != (n,):
            raise ValueError("one split tag per sample required")
        if n and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("image values outside [0,1]")
        if n and self.masks.max() >= len(self.class_names):
            raise ValueError("mask labels outside the class range")
        bad = set(self.split_tags.tolist()) - set(_SPLITS)
        if bad:
            raise ValueError(f"unknown split tags {sorted(bad)}")

    def __len__(self) -> int:
        return self.images.shape[0]

    def indices(self, split: str) -> np.ndarray:
        if split not in _SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return np.flatnonzero(self.split_tags == split)

    def subset(self, split: str) -> "LabeledDataset":
        idx = self.indices(split)
        return LabeledDataset(self.images[idx], self.masks[idx],
                              self.split_tags[idx], self.class_names)


def generate_dataset(spec: SceneSpec, count: int, tag: str = "train") -> LabeledDataset:
    """``count`` scenes from a spec, all carrying one split tag (retag via
    split_dataset)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    pairs = [generate_scene(spec, i) for i in range(count)]
    images = np.stack([p[0] for p in pairs])
    masks = np.stack([p[1] for p in pairs])
    return LabeledDataset(images, masks, np.full(count, tag, dtype="<U5"))


def merge_datasets(a: LabeledDataset, b: LabeledDataset) -> LabeledDataset:
    """Concatenate two datasets, keeping sample order and split tags."""
    if a.class_names != b.class_names:
        raise ValueError("cannot merge datasets with different class taxonomies")
    if len(b) == 0:
        return LabeledDataset(a.images.copy(), a.masks.copy(),
                              a.split_tags.copy(), a.class_names)
    if len(a) == 0:
        return LabeledDataset(b.images.copy(), b.masks.copy(),
                              b.split_tags.copy(), b.class_names)
    if a.images.shape[1:] != b.images.shape[1:]:
        raise ValueError("cannot merge datasets with different image shapes")
    return LabeledDataset(
        np.concatenate([a.images, b.images]),
        np.concatenate([a.masks, b.masks]),
        np.concatenate([a.split_tags, b.split_tags]),
        a.class_names,
    )


def split_dataset(ds: LabeledDataset, counts: tuple[int, int, int],
                  seed: int = 0) -> LabeledDataset:
    """Assign train/val/test tags by a seeded shuffle; sample order is kept."""
    if len(counts) != 3 or any(c < 0 for c in counts):
        raise ValueError("counts must be three non-negative integers")
    if sum(counts) != len(ds):
        raise ValueError(f"split counts {counts} do not sum to {len(ds)}")
    order = np.random.default_rng(seed).permutation(len(ds))
    tags = np.empty(len(ds), dtype="<U5")
    start = 0
    for name, count in zip(_SPLITS, counts):
        tags[order[start:start + count]] = name
        start += count
    return LabeledDataset(ds.images.copy(), ds.masks.copy(), tags, ds.class_names)


def class_frequencies(ds: LabeledDataset) -> np.ndarray:
    """Fraction of all pixels carrying each label."""
    counts = np.bincount(ds.masks.reshape(-1), minlength=len(ds.class_names))
    return counts / max(ds.masks.size, 1)


# ---------------------------------------------------------------------------
# augmentation


def augment(image: np.ndarray, mask: np.ndarray, rng, *, flip_p: float = 0.5,
            hue_delta: float = 0.05, contrast_range: tuple[float, float] = (0.8, 1.2),
            brightness_delta: float = 0.1):
    """One augmented copy of an (image, mask) pair.

    The horizontal flip is joint (image and mask together); hue rotation,
    contrast, and brightness touch the image only. Output pixels are
    clamped to [0,1] and the input arrays are never modified.
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3,H,W) image, got {image.shape}")
    if mask.shape != image.shape[1:]:
        raise ValueError("mask does not match image")
    img = image.copy()
    out_mask = mask.copy()
    if rng.random() < flip_p:
        img = img[:, :, ::-1].copy()
        out_mask = out_mask[:, ::-1].copy()
    shift = rng.uniform(-hue_delta, hue_delta)
    hsv = rgb_to_hsv(np.clip(img, 0.0, 1.0).transpose(1, 2, 0))
    hsv[..., 0] = (hsv[..., 0] + shift) % 1.0
    img = hsv_to_rgb(hsv).transpose(2, 0, 1)
    img = (img - 0.5) * rng.uniform(*contrast_range) + 0.5
    img = img + rng.uniform(-brightness_delta, brightness_delta)
    return np.clip(img, 0.0, 1.0), out_mask


def one_hot(masks: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """(N,H,W) integer masks to (N,K,H,W) one-hot planes in the default
    float dtype."""
    masks = np.asarray(masks)
    if masks.ndim != 3:
        raise ValueError(f"expected (N,H,W) masks, got {masks.shape}")
    if masks.min() < 0 or masks.max() >= num_classes:
        raise ValueError(f"labels outside [0, {num_classes})")
    from .autodiff import get_default_dtype
    out = np.zeros((masks.shape[0], num_classes) + masks.shape[1:],
                   dtype=get_default_dtype())
    np.put_along_axis(out, masks[:, None].astype(np.int64), 1.0, axis=1)
    return out


# ---------------------------------------------------------------------------
# persistence


def colorize_mask(mask: np.ndarray) -> np.ndarray:
    """(H,W) labels to an (H,W,3) uint8 color rendering."""
    return CLASS_COLORS[np.asarray(mask, dtype=np.int64)]


def save_image_png(path: str, array: np.ndarray) -> None:
    """Write a float [0,1] or uint8 array ((H,W), (H,W,3), or (3,H,W)) as PNG."""
    arr = np.asarray(array)
    if arr.ndim == 3 and arr.shape[0] in (1, 3) and arr.shape[2] not in (1, 3):
        arr = arr.transpose(1, 2, 0)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def save_dataset(ds: LabeledDataset, directory: str) -> None:
    """images/NNNNN.png (8-bit RGB), masks/NNNNN.png (8-bit labels), and a
    manifest. The manifest is written last, so its presence marks a complete
    dataset. Masks round-trip exactly; images are quantized to 8 bits."""
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    os.makedirs(os.path.join(directory, "masks"), exist_ok=True)
    for i in range(len(ds)):
        save_image_png(os.path.join(directory, "images", f"{i:05d}.png"), ds.images[i])
        Image.fromarray(ds.masks[i]).save(
            os.path.join(directory, "masks", f"{i:05d}.png"), format="PNG")
    manifest = [
        f"format_version={_FORMAT_VERSION}",
        f"count={len(ds)}",
        f"classes={','.join(ds.class_names)}",
        f"splits={','.join(ds.split_tags.tolist())}",
    ]
    tmp = os.path.join(directory, _MANIFEST + ".tmp")
    with open(tmp, "w") as fh:
        fh.write("\n".join(manifest) + "\n")
    os.replace(tmp, os.path.join(directory, _MANIFEST))


def load_dataset(directory: str) -> LabeledDataset:
    manifest_path = os.path.join(directory, _MANIFEST)
    if not os.path.exists(manifest_path):
        raise DatasetFormatError(f"no dataset manifest at {manifest_path}")
    fields: dict[str, str] = {}
    with open(manifest_path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                key, _, value = line.partition("=")
                fields[key] = value
    if fields.get("format_version") != str(_FORMAT_VERSION):
        raise DatasetFormatError(
            f"unsupported dataset format_version={fields.get('format_version')!r}")
    try:
        count = int(fields["count"])
        class_names = tuple(fields["classes"].split(","))
        tags = fields["splits"].split(",") if fields["splits"] else []
    except (KeyError, ValueError) as exc:
        raise DatasetFormatError(f"bad dataset manifest: {exc}") from exc
    if len(tags) != count:
        raise DatasetFormatError(
            f"manifest count={count} but {len(tags)} split tags")
    present = sorted(f for f in os.listdir(os.path.join(directory, "images"))
                     if re.fullmatch(r"\d{5}\.png", f))
    if len(present) != count:
        raise DatasetFormatError(
            f"manifest count={count} but {len(present)} image files")

    images, masks = [], []
    for i in range(count):
        with Image.open(os.path.join(directory, "images", f"{i:05d}.png")) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        images.append(rgb.transpose(2, 0, 1))
        with Image.open(os.path.join(directory, "masks", f"{i:05d}.png")) as im:
            masks.append(np.asarray(im, dtype=np.uint8))
    return LabeledDataset(np.stack(images), np.stack(masks),
                          np.asarray(tags, dtype="<U5"), class_names)

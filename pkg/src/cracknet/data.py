"""Dataset loading, preprocessing, augmentation, splitting and synthetic cracks."""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, LabelError, PairingError, ShapeError, SplitError
from .nn import interp_matrix

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])


@dataclass
class Sample:
    image: np.ndarray  # [3, H, W] in [0, 1]
    mask: np.ndarray  # [H, W] int labels
    id: str

    @property
    def size(self) -> tuple[int, int]:
        return self.mask.shape


# -- I/O -------------------------------------------------------------------

def _pngs(directory: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(directory.glob("*.png"))}


def load_dataset(image_dir, mask_dir) -> list[Sample]:
    """Pair ``<stem>.png`` files across the two directories, sorted by stem.

    Masks are 8-bit: 0 is background, 255 is crack (label 1).
    """
    images, masks = _pngs(Path(image_dir)), _pngs(Path(mask_dir))
    orphans = sorted(set(images) ^ set(masks))
    if orphans:
        raise PairingError(f"unpaired files: {', '.join(orphans)}")
    samples = []
    for stem in sorted(images):
        img = np.asarray(Image.open(images[stem]).convert("RGB"), dtype=np.float64) / 255.0
        raw = np.asarray(Image.open(masks[stem]).convert("L"))
        if raw.shape != img.shape[:2]:
            raise ShapeError(f"{stem}: image {img.shape[:2]} vs mask {raw.shape}")
        bad = np.setdiff1d(np.unique(raw), [0, 255])
        if bad.size:
            raise LabelError(f"{stem}: mask values {bad.tolist()} are neither 0 nor 255")
        samples.append(Sample(img.transpose(2, 0, 1).copy(), (raw == 255).astype(np.int64), stem))
    return samples


def write_dataset(samples, out_dir) -> tuple[Path, Path]:
    """Write ``images/<id>.png`` (RGB) and ``masks/<id>.png`` (0/255)."""
    out = Path(out_dir)
    img_dir, mask_dir = out / "images", out / "masks"
    img_dir.mkdir(parents=True, exist_ok=True)
    mask_dir.mkdir(parents=True, exist_ok=True)
    for s in samples:
        rgb = np.floor(np.clip(s.image, 0, 1).transpose(1, 2, 0) * 255 + 0.5).astype(np.uint8)
        Image.fromarray(rgb).save(img_dir / f"{s.id}.png")
        Image.fromarray((s.mask > 0).astype(np.uint8) * 255).save(mask_dir / f"{s.id}.png")
    return img_dir, mask_dir


# -- preprocessing ---------------------------------------------------------

def nearest_index(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum(np.arange(n_out) * n_in // n_out, n_in - 1)


def resize(sample: Sample, height: int, width: int) -> Sample:
    """Bilinear image, nearest-neighbour mask."""
    H, W = sample.mask.shape
    if (H, W) == (height, width):
        return replace(sample, image=sample.image.copy(), mask=sample.mask.copy())
    mh, mw = interp_matrix(H, height), interp_matrix(W, width)
    image = mh @ sample.image @ mw.T
    mask = sample.mask[np.ix_(nearest_index(H, height), nearest_index(W, width))]
    return Sample(image, mask, sample.id)


def normalize(image: np.ndarray) -> np.ndarray:
    return (image - IMAGENET_MEAN[:, None, None]) / IMAGENET_STD[:, None, None]


def denormalize(image: np.ndarray) -> np.ndarray:
    return image * IMAGENET_STD[:, None, None] + IMAGENET_MEAN[:, None, None]


def split_80_20(samples, seed: int) -> tuple[list[Sample], list[Sample]]:
    n = len(samples)
    if n < 5:
        raise SplitError(f"need at least 5 samples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(0.8 * n + 0.5))
    return [samples[i] for i in order[:n_train]], [samples[i] for i in order[n_train:]]


def stack_batch(samples) -> tuple[np.ndarray, np.ndarray]:
    """Normalized images ``[B,3,H,W]`` and labels ``[B,H,W]``."""
    images = np.stack([normalize(s.image) for s in samples])
    masks = np.stack([s.mask for s in samples]).astype(np.int64)
    return images, masks


# -- augmentation ----------------------------------------------------------

@dataclass
class AugmentConfig:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_rot90: float = 0.5
    p_shift_scale_rotate: float = 0.5
    shift_limit: float = 0.0625
    scale_limit: float = 0.1
    rotate_limit: float = 15.0
    p_noise: float = 0.3
    noise_sigma: float = 0.02
    p_color_jitter: float = 0.3
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            if f.name.startswith("p_") and not 0.0 <= getattr(self, f.name) <= 1.0:
                raise ConfigError(f"{f.name} must be a probability")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(**{f.name: 0.0 for f in fields(cls) if f.name.startswith("p_")})

    def to_dict(self) -> dict:
        return asdict(self)


def sample_rng(seed: int, epoch: int, sample_id: str) -> np.random.Generator:
    """Per-sample stream, independent of iteration order."""
    return np.random.default_rng([seed, epoch, zlib.crc32(sample_id.encode())])


def hflip(s: Sample) -> Sample:
    return Sample(s.image[:, :, ::-1].copy(), s.mask[:, ::-1].copy(), s.id)


def vflip(s: Sample) -> Sample:
    return Sample(s.image[:, ::-1, :].copy(), s.mask[::-1, :].copy(), s.id)


def rot90(s: Sample, k: int = 1) -> Sample:
    return Sample(np.rot90(s.image, k, axes=(1, 2)).copy(), np.rot90(s.mask, k).copy(), s.id)


def shift_scale_rotate(s: Sample, shift: tuple[float, float], scale: float, angle_deg: float) -> Sample:
    """Affine warp about the image centre; borders fill with 0 (background).

    ``shift`` is a fraction of (height, width).
    """
    H, W = s.mask.shape
    theta = math.radians(angle_deg)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    centre = np.array([(H - 1) / 2, (W - 1) / 2])
    t = np.array([shift[0] * H, shift[1] * W])
    inv = rot.T / scale
    offset = centre - inv @ (centre + t)
    image = np.stack([
        ndimage.affine_transform(ch, inv, offset, order=1, mode="constant", cval=0.0)
        for ch in s.image
    ])
    mask = ndimage.affine_transform(s.mask, inv, offset, order=0, mode="constant", cval=0)
    return Sample(np.clip(image, 0.0, 1.0), mask.astype(np.int64), s.id)


def gaussian_noise(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return np.clip(image + rng.normal(0.0, sigma, size=image.shape), 0.0, 1.0)


def color_jitter(image: np.ndarray, brightness: float, contrast: float,
                 saturation: float, hue_shift: float) -> np.ndarray:
    """Factors are multiplicative (1 = unchanged); ``hue_shift`` is a fraction of the colour wheel."""
    img = image * brightness
    gray = img.mean()
    img = gray + (img - gray) * contrast
    lum = (0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2])[None]
    img = np.clip(lum + (img - lum) * saturation, 0.0, 1.0)
    if hue_shift:
        hsv = rgb_to_hsv(img.transpose(1, 2, 0))
        hsv[..., 0] = (hsv[..., 0] + hue_shift) % 1.0
        img = hsv_to_rgb(hsv).transpose(2, 0, 1)
    return np.clip(img, 0.0, 1.0)


def augment(sample: Sample, config: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Geometric ops move image and mask together; photometric ops touch the image only."""
    s = sample
    if rng.random() < config.p_hflip:
        s = hflip(s)
    if rng.random() < config.p_vflip:
        s = vflip(s)
    if rng.random() < config.p_rot90:
        s = rot90(s, int(rng.integers(1, 4)))
    if rng.random() < config.p_shift_scale_rotate:
        shift = tuple(rng.uniform(-config.shift_limit, config.shift_limit, size=2))
        scale = 1.0 + rng.uniform(-config.scale_limit, config.scale_limit)
        angle = rng.uniform(-config.rotate_limit, config.rotate_limit)
        s = shift_scale_rotate(s, shift, scale, angle)
    image = s.image
    if rng.random() < config.p_noise:
        image = gaussian_noise(image, config.noise_sigma, rng)
    if rng.random() < config.p_color_jitter:
        b, c, sat = (1.0 + rng.uniform(-r, r) for r in (config.brightness, config.contrast, config.saturation))
        image = color_jitter(image, b, c, sat, rng.uniform(-config.hue, config.hue))
    if image is s.image and s is sample:
        return Sample(sample.image.copy(), sample.mask.copy(), sample.id)
    return Sample(image, s.mask, s.id)


# -- synthetic cracks ------------------------------------------------------

@dataclass
class SynthConfig:
    count: int = 8
    size: int = 64
    width_min: float = 2.0
    width_max: float = 3.5
    cracks_per_image: int = 2
    texture_amplitude: float = 0.08
    fg_fraction: float = 0.028
    darkness: float = 0.55

    def __post_init__(self):
        if not 0.0 < self.fg_fraction < 0.2:
            raise ConfigError("fg_fraction must lie in (0, 0.2)")
        if self.count < 0 or self.size < 1 or self.cracks_per_image < 1:
            raise ConfigError("count, size and cracks_per_image must be positive")
        if self.width_min < 0 or self.width_max < self.width_min:
            raise ConfigError("need 0 <= width_min <= width_max")

    def to_dict(self) -> dict:
        return asdict(self)


def _stamp_segment(mask: np.ndarray, p0, p1, width: float) -> int:
    """Mark pixels whose centre lies strictly within ``width/2`` of segment p0-p1.

    Returns the number of newly marked pixels.
    """
    r = width / 2.0
    if r <= 0:
        return 0
    H, W = mask.shape
    lo = np.floor(np.minimum(p0, p1) - r).astype(int)
    hi = np.ceil(np.maximum(p0, p1) + r).astype(int) + 1
    r0, c0 = max(lo[0], 0), max(lo[1], 0)
    r1, c1 = min(hi[0], H), min(hi[1], W)
    if r0 >= r1 or c0 >= c1:
        return 0
    rr, cc = np.mgrid[r0:r1, c0:c1].astype(np.float64)
    d = p1 - p0
    len2 = float(d @ d)
    if len2 == 0:
        t = np.zeros_like(rr)
    else:
        t = np.clip(((rr - p0[0]) * d[0] + (cc - p0[1]) * d[1]) / len2, 0.0, 1.0)
    dist2 = (rr - p0[0] - t * d[0]) ** 2 + (cc - p0[1] - t * d[1]) ** 2
    region = mask[r0:r1, c0:c1]
    new = (dist2 < r * r) & ~region
    region |= new
    return int(new.sum())


def _texture(rng: np.random.Generator, size: int, amplitude: float) -> np.ndarray:
    coarse = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=max(1.0, size / 16))
    coarse /= coarse.std() + 1e-12
    fine = rng.normal(size=(size, size))
    return amplitude * (0.7 * coarse + 0.3 * fine)


def _crack_mask(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    n = cfg.size
    mask = np.zeros((n, n), dtype=bool)
    target = cfg.fg_fraction * n * n
    step = max(1.0, n / 32)
    marked = 0
    for j in range(cfg.cracks_per_image):
        budget = target * (j + 1) / cfg.cracks_per_image
        width = rng.uniform(cfg.width_min, cfg.width_max)
        pos = rng.uniform(0.15 * n, 0.85 * n, size=2)
        heading = rng.uniform(0, 2 * math.pi)
        for _ in range(20 * n):
            if marked >= budget:
                break
            heading += rng.normal(0.0, 0.3)
            nxt = pos + step * np.array([math.sin(heading), math.cos(heading)])
            if not (0 <= nxt[0] < n and 0 <= nxt[1] < n):
                heading += math.pi
                continue
            marked += _stamp_segment(mask, pos, nxt, width)
            pos = nxt
    return mask


def synth_generate(config: SynthConfig, seed: int) -> list[Sample]:
    """Textured grey backgrounds with dark random-walk cracks; masks are exact."""
    samples = []
    n = config.size
    for i in range(config.count):
        rng = np.random.default_rng([seed, i])
        mask = _crack_mask(rng, config)
        base = rng.uniform(0.45, 0.65)
        tint = rng.uniform(-0.04, 0.04, size=3)
        tex = _texture(rng, n, config.texture_amplitude)
        image = base + tint[:, None, None] + tex[None]
        shade = 1.0 - config.darkness * rng.uniform(0.85, 1.0, size=(n, n))
        image = np.where(mask[None], image * shade[None], image)
        samples.append(Sample(np.clip(image, 0.0, 1.0), mask.astype(np.int64), f"synth_{i:05d}"))
    return samples


def foreground_fraction(samples) -> float:
    total = sum(s.mask.size for s in samples)
    return float(sum(int((s.mask > 0).sum()) for s in samples) / total) if total else 0.0

"""Self-supervision data engine: random homographies, warping, augmentation.

Images are float arrays of shape (3, H, W) with values in [0, 1] everywhere
in this package; point coordinates are (x, y) with x along the width axis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from .tensor import Tensor, gather_bilinear


class HomographySampleError(RuntimeError):
    """Raised when rejection sampling cannot find an acceptable warp."""


@dataclass(frozen=True)
class Homography:
    """3x3 projective map, normalized so the bottom-right entry is 1."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"homography matrix must be 3x3, got {m.shape}")
        if abs(np.linalg.det(m)) <= 1e-8:
            raise ValueError("homography is not invertible")
        m = m / m[2, 2]
        object.__setattr__(self, "matrix", m)

    @staticmethod
    def identity() -> "Homography":
        return Homography(np.eye(3))

    @staticmethod
    def translation(tx: float, ty: float) -> "Homography":
        m = np.eye(3)
        m[0, 2], m[1, 2] = tx, ty
        return Homography(m)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def compose(self, other: "Homography") -> "Homography":
        """Map applying ``other`` first, then ``self``."""
        return Homography(self.matrix @ other.matrix)


def warp_points(points: np.ndarray, h: Homography) -> Tuple[np.ndarray, np.ndarray]:
    """Apply the projective map to (K, 2) xy points.

    Returns the mapped points and a validity flag per point; points carried
    to the plane at infinity are flagged invalid instead of raising.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    ones = np.ones((pts.shape[0], 1))
    hom = np.concatenate([pts, ones], axis=1) @ h.matrix.T
    wcomp = hom[:, 2]
    valid = np.abs(wcomp) >= 1e-12
    out = np.full_like(pts, np.nan)
    out[valid] = hom[valid, :2] / wcomp[valid, None]
    if single:
        return out[0], valid[0]
    return out, valid


def solve_homography_dlt(src: np.ndarray, dst: np.ndarray) -> Homography:
    """Direct linear transform from >= 4 point correspondences."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape[0] < 4 or src.shape != dst.shape:
        raise ValueError("need at least 4 matched points")
    rows = []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, _, vt = np.linalg.svd(np.asarray(rows))
    return Homography(vt[-1].reshape(3, 3))


def _sample_grid(h: Homography, height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    """Source coordinates of every target pixel under inverse mapping."""
    inv = h.inverse().matrix
    xs, ys = np.meshgrid(np.arange(width, dtype=np.float64),
                         np.arange(height, dtype=np.float64))
    denom = inv[2, 0] * xs + inv[2, 1] * ys + inv[2, 2]
    sx = (inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]) / denom
    sy = (inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]) / denom
    return sx, sy


def _bilinear(channel: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    hh, ww = channel.shape
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    fx = sx - x0
    fy = sy - y0
    x0c = np.clip(x0, 0, ww - 1)
    y0c = np.clip(y0, 0, hh - 1)
    x1c = np.clip(x0 + 1, 0, ww - 1)
    y1c = np.clip(y0 + 1, 0, hh - 1)
    v00 = channel[y0c, x0c]
    v01 = channel[y0c, x1c]
    v10 = channel[y1c, x0c]
    v11 = channel[y1c, x1c]
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bot * fy


def warp_image(image: np.ndarray, h: Homography,
               target_size: Optional[Tuple[int, int]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Warp (3, H, W) image by ``h`` with bilinear inverse mapping.

    Returns the warped image and a boolean mask of target pixels whose
    preimage lies inside the source frame. Invalid pixels are zero.
    """
    image = np.asarray(image)
    _, src_h, src_w = image.shape
    out_h, out_w = target_size if target_size is not None else (src_h, src_w)
    sx, sy = _sample_grid(h, out_h, out_w)
    valid = (sx >= 0) & (sx <= src_w - 1) & (sy >= 0) & (sy <= src_h - 1)
    sxc = np.where(valid, sx, 0.0)
    syc = np.where(valid, sy, 0.0)
    warped = np.stack([_bilinear(image[c], sxc, syc) for c in range(image.shape[0])])
    warped *= valid[None].astype(warped.dtype)
    return warped.astype(image.dtype, copy=False), valid


def warp_heatmap(heatmap: Tensor, h: Homography) -> Tuple[Tensor, np.ndarray]:
    """Warp a (H, W) heatmap tensor by ``h``, keeping the gradient path.

    Output pixel p reads the heatmap at h^{-1}(p) via bilinear sampling;
    the paired mask marks pixels with an in-frame preimage.
    """
    hh, ww = heatmap.data.shape
    sx, sy = _sample_grid(h, hh, ww)
    valid = (sx >= 0) & (sx <= ww - 1) & (sy >= 0) & (sy <= hh - 1)
    flat = gather_bilinear(heatmap, np.where(valid, sy, 0.0).ravel(),
                           np.where(valid, sx, 0.0).ravel())
    from .tensor import mul as _mul
    masked = _mul(flat, Tensor(valid.ravel().astype(heatmap.data.dtype)))
    # reshape through a tracked view is unnecessary: downstream consumers take
    # the flat layout plus the mask
    return masked, valid


@dataclass(frozen=True)
class HomographyLimits:
    """Ranges for the random warp components; all configurable, defaults keep
    the pair overlap high while still exercising viewpoint change."""

    rotation_deg: float = 25.0
    scale_min: float = 0.7
    scale_max: float = 1.4
    translation_frac: float = 0.10
    perspective_frac: float = 0.08

    def __post_init__(self):
        if not (0 <= self.rotation_deg <= 90):
            raise ValueError("rotation_deg out of range")
        if not (0.2 <= self.scale_min <= self.scale_max <= 5.0):
            raise ValueError("scale range out of range")
        if not (0 <= self.translation_frac <= 0.5):
            raise ValueError("translation_frac out of range")
        if not (0 <= self.perspective_frac <= 0.25):
            raise ValueError("perspective_frac out of range")

    def zeroed(self) -> "HomographyLimits":
        return HomographyLimits(0.0, 1.0, 1.0, 0.0, 0.0)


IDENTITY_LIMITS = HomographyLimits(0.0, 1.0, 1.0, 0.0, 0.0)


def overlap_fraction(h: Homography, size: Tuple[int, int]) -> float:
    """Smaller of the two valid-mask fractions for a size x size frame pair."""
    height, width = size
    xs, ys = np.meshgrid(np.arange(width, dtype=np.float64),
                         np.arange(height, dtype=np.float64))
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1)
    fwd, vf = warp_points(grid, h)
    inside_fwd = vf & (fwd[:, 0] >= 0) & (fwd[:, 0] <= width - 1) \
        & (fwd[:, 1] >= 0) & (fwd[:, 1] <= height - 1)
    back, vb = warp_points(grid, h.inverse())
    inside_back = vb & (back[:, 0] >= 0) & (back[:, 0] <= width - 1) \
        & (back[:, 1] >= 0) & (back[:, 1] <= height - 1)
    return float(min(inside_fwd.mean(), inside_back.mean()))


def sample_homography(rng: np.random.Generator, size: Tuple[int, int],
                      limits: HomographyLimits = HomographyLimits(),
                      min_overlap: float = 0.4, max_tries: int = 100) -> Homography:
    """Draw a random warp as rotation/scale/perspective about the frame center
    followed by a translation, rejecting draws with too little overlap."""
    height, width = size
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    span = float(min(height, width))
    for _ in range(max_tries):
        angle = np.deg2rad(rng.uniform(-limits.rotation_deg, limits.rotation_deg))
        sx = rng.uniform(limits.scale_min, limits.scale_max)
        sy = rng.uniform(limits.scale_min, limits.scale_max)
        tx = rng.uniform(-limits.translation_frac, limits.translation_frac) * width
        ty = rng.uniform(-limits.translation_frac, limits.translation_frac) * height
        # perspective rows bounded so corner displacement stays near
        # perspective_frac * span
        pmax = 2.0 * limits.perspective_frac / span if span > 0 else 0.0
        p1 = rng.uniform(-pmax, pmax)
        p2 = rng.uniform(-pmax, pmax)

        rot = np.array([[np.cos(angle), -np.sin(angle), 0.0],
                        [np.sin(angle), np.cos(angle), 0.0],
                        [0.0, 0.0, 1.0]])
        scale = np.diag([sx, sy, 1.0])
        persp = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [p1, p2, 1.0]])
        to_center = np.array([[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]])
        from_center = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
        trans = np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])

        m = trans @ to_center @ persp @ rot @ scale @ from_center
        if abs(np.linalg.det(m)) <= 1e-8:
            continue
        h = Homography(m)
        if overlap_fraction(h, size) >= min_overlap:
            return h
    raise HomographySampleError(
        f"no homography with overlap >= {min_overlap} in {max_tries} draws")


# ---------------------------------------------------------------------------
# photometric augmentation
# ---------------------------------------------------------------------------

def photometric_augment(image: np.ndarray, rng: np.random.Generator,
                        strength: float = 1.0) -> np.ndarray:
    """Random brightness/contrast/channel-gain/noise, clamped to [0, 1].

    ``strength`` in [0, 1] scales every distortion toward the identity.
    """
    if not (0.0 <= strength <= 1.0):
        raise ValueError("strength must lie in [0, 1]")
    out = np.asarray(image, dtype=np.float64).copy()
    brightness = rng.uniform(-0.2, 0.2) * strength
    contrast = 1.0 + rng.uniform(-0.3, 0.3) * strength
    gains = 1.0 + rng.uniform(-0.1, 0.1, size=3) * strength
    sigma = rng.uniform(0.0, 0.02) * strength
    out = (out - 0.5) * contrast + 0.5 + brightness
    out *= gains[:, None, None]
    if sigma > 0:
        out += rng.normal(0.0, sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# synthetic textures and corpus sampling
# ---------------------------------------------------------------------------

def _value_noise(rng: np.random.Generator, size: int) -> np.ndarray:
    """Multi-octave smooth colored noise in [0, 1], shape (3, size, size)."""
    acc = np.zeros((3, size, size))
    total = 0.0
    cells = 4
    while cells < size:
        amp = 1.0 / np.sqrt(cells)
        grid = rng.random((3, cells + 1, cells + 1))
        ys = np.linspace(0, cells, size)
        xs = np.linspace(0, cells, size)
        y0 = np.clip(ys.astype(int), 0, cells - 1)
        x0 = np.clip(xs.astype(int), 0, cells - 1)
        fy = (ys - y0)[None, :, None]
        fx = (xs - x0)[None, None, :]
        g00 = grid[:, y0][:, :, x0]
        g01 = grid[:, y0][:, :, x0 + 1]
        g10 = grid[:, y0 + 1][:, :, x0]
        g11 = grid[:, y0 + 1][:, :, x0 + 1]
        acc += amp * ((g00 * (1 - fx) + g01 * fx) * (1 - fy)
                      + (g10 * (1 - fx) + g11 * fx) * fy)
        total += amp
        cells *= 2
    return acc / total


def synth_texture(rng: np.random.Generator, size: int = 256,
                  flat_band: bool = False, band_frac: float = 0.25) -> np.ndarray:
    """One synthetic training texture: colored noise, random polygons, and
    optionally a flat band (useful for exercising variance weighting)."""
    img = _value_noise(rng, size)
    canvas = Image.fromarray((np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0))
    draw = ImageDraw.Draw(canvas)
    n_poly = int(rng.integers(6, 16))
    for _ in range(n_poly):
        cx, cy = rng.uniform(0, size, size=2)
        radius = rng.uniform(size * 0.03, size * 0.18)
        nv = int(rng.integers(3, 7))
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=nv))
        pts = [(cx + radius * np.cos(a) * rng.uniform(0.6, 1.0),
                cy + radius * np.sin(a) * rng.uniform(0.6, 1.0)) for a in angles]
        color = tuple(int(v) for v in rng.integers(0, 256, size=3))
        draw.polygon(pts, fill=color)
    out = np.asarray(canvas, dtype=np.float64).transpose(2, 0, 1) / 255.0
    if flat_band:
        band = max(1, int(round(size * band_frac)))
        level = rng.uniform(0.25, 0.75)
        horizontal = bool(rng.random() < 0.5)
        offset = int(rng.integers(0, size - band + 1))
        if horizontal:
            out[:, offset:offset + band, :] = level
        else:
            out[:, :, offset:offset + band] = level
    return out


def make_checkerboard(size: int = 256, square: int = 32) -> np.ndarray:
    """Gray checkerboard image (3, size, size) in [0, 1]."""
    idx = np.add.outer(np.arange(size) // square, np.arange(size) // square) % 2
    board = np.where(idx == 0, 0.9, 0.1)
    return np.repeat(board[None], 3, axis=0).astype(np.float64)


def save_image(path: Path, image: np.ndarray) -> None:
    arr = (np.clip(np.asarray(image), 0, 1) * 255).round().astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0)).save(path)


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr.transpose(2, 0, 1) / 255.0


def generate_corpus(out_dir: Path, count: int, size: int, seed: int,
                    flat_band_share: float = 0.4) -> List[Path]:
    """Write ``count`` synthetic PNG textures plus a manifest with the seeds."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    master = np.random.default_rng(seed)
    image_seeds = master.integers(0, 2 ** 63 - 1, size=count, dtype=np.int64)
    paths = []
    for i, s in enumerate(image_seeds):
        rng = np.random.default_rng(int(s))
        flat = rng.random() < flat_band_share
        img = synth_texture(rng, size=size, flat_band=flat)
        path = out_dir / f"texture_{i:04d}.png"
        save_image(path, img)
        paths.append(path)
    manifest = {"seed": seed, "count": count, "size": size,
                "flat_band_share": flat_band_share,
                "image_seeds": [int(s) for s in image_seeds],
                "files": [p.name for p in paths]}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return paths


class Corpus:
    """Directory of RGB images used to sample training pairs."""

    EXTENSIONS = (".png", ".ppm")

    def __init__(self, root: Path):
        self.root = Path(root)
        self.paths = sorted(p for p in self.root.iterdir()
                            if p.suffix.lower() in self.EXTENSIONS)
        if not self.paths:
            raise FileNotFoundError(f"no corpus images in {self.root}")
        self._cache: dict = {}

    def __len__(self) -> int:
        return len(self.paths)

    def image(self, index: int) -> np.ndarray:
        if index not in self._cache:
            self._cache[index] = load_image(self.paths[index])
        return self._cache[index]


@dataclass
class WarpSample:
    """A training pair: a patch, its warped counterpart, and validity masks.

    ``mask_source`` marks source pixels whose warp lands inside the warped
    frame; ``mask_warped`` marks warped pixels with an in-frame preimage.
    """

    image: np.ndarray
    warped: np.ndarray
    homography: Homography
    mask_source: np.ndarray
    mask_warped: np.ndarray


def source_visibility_mask(h: Homography, size: Tuple[int, int]) -> np.ndarray:
    height, width = size
    xs, ys = np.meshgrid(np.arange(width, dtype=np.float64),
                         np.arange(height, dtype=np.float64))
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
    mapped, valid = warp_points(pts, h)
    inside = valid & (mapped[:, 0] >= 0) & (mapped[:, 0] <= width - 1) \
        & (mapped[:, 1] >= 0) & (mapped[:, 1] <= height - 1)
    return inside.reshape(height, width)


def sample_training_pair(corpus: Corpus, rng: np.random.Generator,
                         patch_size: int = 192,
                         limits: HomographyLimits = HomographyLimits(),
                         min_overlap: float = 0.4,
                         photometric_strength: float = 1.0) -> WarpSample:
    """Draw an image, crop a patch, warp it, and augment both sides.

    Images smaller than the patch are skipped; an all-too-small corpus raises.
    """
    order = rng.permutation(len(corpus))
    patch = None
    for idx in order:
        img = corpus.image(int(idx))
        _, h, w = img.shape
        if h < patch_size or w < patch_size:
            continue
        top = int(rng.integers(0, h - patch_size + 1))
        left = int(rng.integers(0, w - patch_size + 1))
        patch = img[:, top:top + patch_size, left:left + patch_size]
        break
    if patch is None:
        raise ValueError(f"no corpus image is at least {patch_size}px on both sides")

    homog = sample_homography(rng, (patch_size, patch_size), limits, min_overlap)
    warped, mask_warped = warp_image(patch, homog)
    mask_source = source_visibility_mask(homog, (patch_size, patch_size))
    image_aug = photometric_augment(patch, rng, photometric_strength)
    warped_aug = photometric_augment(warped, rng, photometric_strength)
    warped_aug *= mask_warped[None]
    return WarpSample(image=image_aug, warped=warped_aug, homography=homog,
                      mask_source=mask_source, mask_warped=mask_warped)

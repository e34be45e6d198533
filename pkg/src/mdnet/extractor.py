"""Turning heatmaps into disjoint keypoint sets: thresholding, NMS, a sqrt(2)
image pyramid, per-set budgets, and descriptor sampling."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import maximum_filter

from .model import ModelWeights, forward
from .synthwarp import _bilinear
from .tensor import Tensor

FEATURE_MAGIC = b"MDF1"
FEATURE_VERSION = 1


class FeatureFileError(RuntimeError):
    """Unreadable or inconsistent feature file."""


@dataclass(frozen=True)
class ExtractConfig:
    budget: int = 2048
    threshold: float = 0.7
    nms_radius: int = 3
    pyramid_factor: float = math.sqrt(2.0)
    pyramid_min_dim: int = 256
    cross_scale_nms: bool = False

    def __post_init__(self):
        if self.nms_radius < 1:
            raise ValueError("nms radius must be >= 1")
        if self.pyramid_factor <= 1.0:
            raise ValueError("pyramid factor must exceed 1")


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    score: float
    scale: int
    set_index: int


@dataclass
class FeatureSet:
    """One detector's keypoints: parallel arrays plus row-aligned descriptors."""

    xs: np.ndarray          # float32, level-0 coordinates
    ys: np.ndarray
    scores: np.ndarray      # float32
    scales: np.ndarray      # uint8 pyramid level indices
    descriptors: np.ndarray  # float32 (count, C)

    @staticmethod
    def empty(dim: int) -> "FeatureSet":
        return FeatureSet(np.zeros(0, np.float32), np.zeros(0, np.float32),
                          np.zeros(0, np.float32), np.zeros(0, np.uint8),
                          np.zeros((0, dim), np.float32))

    def __len__(self) -> int:
        return len(self.xs)


@dataclass
class MultiFeatureSet:
    image_size: Tuple[int, int]          # (H, W)
    num_detectors: int
    descriptor_dim: int
    sets: List[FeatureSet]
    config: Optional[ExtractConfig] = None

    def total_count(self) -> int:
        return sum(len(s) for s in self.sets)

    def keypoints(self) -> List[Keypoint]:
        out = []
        for n, s in enumerate(self.sets):
            for i in range(len(s)):
                out.append(Keypoint(float(s.xs[i]), float(s.ys[i]),
                                    float(s.scores[i]), int(s.scales[i]), n))
        return out


def nms(heatmap: np.ndarray, threshold: float, radius: int) -> List[Tuple[int, int, float]]:
    """Local maxima above a threshold within a Chebyshev radius.

    A pixel survives when it is >= every neighbor in its window and strictly
    greater than any tied value occurring earlier in row-major order, which
    keeps plateau handling deterministic. Returns (x, y, score) tuples.
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    hm = np.asarray(heatmap, dtype=np.float64)
    h, w = hm.shape
    win = 2 * radius + 1
    local_max = maximum_filter(hm, size=win, mode="constant", cval=-np.inf)
    candidates = np.argwhere((hm > threshold) & (hm >= local_max))
    out = []
    for i, j in candidates:
        v = hm[i, j]
        j0, j1 = max(0, j - radius), min(w, j + radius + 1)
        above = hm[max(0, i - radius):i, j0:j1]
        left = hm[i, j0:j]
        if (above == v).any() or (left == v).any():
            continue
        out.append((int(j), int(i), float(v)))
    return out


def _resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Downscale with pixel-center alignment."""
    _, h, w = image.shape
    sy = h / out_h
    sx = w / out_w
    ys = (np.arange(out_h) + 0.5) * sy - 0.5
    xs = (np.arange(out_w) + 0.5) * sx - 0.5
    gy, gx = np.meshgrid(np.clip(ys, 0, h - 1), np.clip(xs, 0, w - 1), indexing="ij")
    return np.stack([_bilinear(image[c], gx, gy) for c in range(image.shape[0])])


def build_pyramid(image: np.ndarray, factor: float = math.sqrt(2.0),
                  min_dim: int = 256) -> List[np.ndarray]:
    """Level k holds the image at round(dim / factor^k); levels are kept while
    the shortest dimension stays >= min_dim, and level 0 is always kept."""
    _, h, w = image.shape
    levels = [image]
    k = 1
    while True:
        hk = int(np.rint(h / factor ** k))
        wk = int(np.rint(w / factor ** k))
        if min(hk, wk) < min_dim:
            break
        levels.append(_resize_bilinear(image, hk, wk))
        k += 1
    return levels


def _per_set_budget(budget: int, num_sets: int) -> int:
    return -(-budget // num_sets)  # ceil


def extract(image: np.ndarray, weights: ModelWeights,
            config: ExtractConfig = ExtractConfig()) -> MultiFeatureSet:
    """Detect and describe up to ceil(M/N) keypoints per set across the pyramid.

    Candidates from every level compete on score; coordinates are mapped back
    to the original frame by the per-axis level scale, and each descriptor is
    read at the detection pixel of the level where it fired.
    """
    model_cfg = weights.config
    if config.budget < model_cfg.num_detectors:
        raise ValueError("budget must be at least the number of detectors")
    _, h0, w0 = image.shape
    levels = build_pyramid(image, config.pyramid_factor, config.pyramid_min_dim)

    n_sets = model_cfg.num_detectors
    dim = model_cfg.descriptor_dim
    dtype = weights.conv_weights[0].data.dtype
    per_set: List[List[tuple]] = [[] for _ in range(n_sets)]
    for level, img in enumerate(levels):
        maps = forward(Tensor(img.astype(dtype)), weights)
        heat = maps.heatmaps.data
        desc = maps.descriptors.data
        _, hk, wk = img.shape
        sx, sy = w0 / wk, h0 / hk
        for n in range(n_sets):
            for x, y, score in nms(heat[n], config.threshold, config.nms_radius):
                vec = desc[:, y, x].astype(np.float32)
                per_set[n].append((score, level, y, x, x * sx, y * sy, vec))

    sets: List[FeatureSet] = []
    for n in range(n_sets):
        cands = per_set[n]
        # highest score first; ties resolved by lower level then row-major
        cands.sort(key=lambda c: (-c[0], c[1], c[2], c[3]))
        if config.cross_scale_nms:
            kept: List[tuple] = []
            r = float(config.nms_radius)
            for c in cands:
                if all(max(abs(c[4] - k[4]), abs(c[5] - k[5])) > r for k in kept):
                    kept.append(c)
            cands = kept
        cands = cands[:_per_set_budget(config.budget, n_sets)]
        if cands:
            sets.append(FeatureSet(
                xs=np.array([c[4] for c in cands], np.float32),
                ys=np.array([c[5] for c in cands], np.float32),
                scores=np.array([c[0] for c in cands], np.float32),
                scales=np.array([c[1] for c in cands], np.uint8),
                descriptors=np.stack([c[6] for c in cands]).astype(np.float32)))
        else:
            sets.append(FeatureSet.empty(dim))
    return MultiFeatureSet(image_size=(h0, w0), num_detectors=n_sets,
                           descriptor_dim=dim, sets=sets, config=config)


# ---------------------------------------------------------------------------
# feature file IO (little-endian binary)
# ---------------------------------------------------------------------------

def save_features(features: MultiFeatureSet, path: Path) -> None:
    h, w = features.image_size
    blob = bytearray()
    blob += FEATURE_MAGIC
    blob += struct.pack("<IIIII", FEATURE_VERSION, h, w,
                        features.num_detectors, features.descriptor_dim)
    for s in features.sets:
        blob += struct.pack("<I", len(s))
        for i in range(len(s)):
            blob += struct.pack("<fffB3x", float(s.xs[i]), float(s.ys[i]),
                                float(s.scores[i]), int(s.scales[i]))
            blob += np.ascontiguousarray(s.descriptors[i], dtype="<f4").tobytes()
    tmp = Path(path).with_suffix(Path(path).suffix + ".tmp")
    tmp.write_bytes(bytes(blob))
    tmp.replace(path)


def load_features(path: Path) -> MultiFeatureSet:
    raw = Path(path).read_bytes()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise FeatureFileError(f"{path}: truncated feature file")
        chunk = raw[off:off + n]
        off += n
        return chunk

    if take(4) != FEATURE_MAGIC:
        raise FeatureFileError(f"{path}: bad magic, not a feature file")
    version, h, w, n_sets, dim = struct.unpack("<IIIII", take(20))
    if version != FEATURE_VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    sets = []
    rec = struct.Struct("<fffB3x")
    for _ in range(n_sets):
        (count,) = struct.unpack("<I", take(4))
        xs = np.empty(count, np.float32)
        ys = np.empty(count, np.float32)
        scores = np.empty(count, np.float32)
        scales = np.empty(count, np.uint8)
        descs = np.empty((count, dim), np.float32)
        for i in range(count):
            x, y, score, scale = rec.unpack(take(rec.size))
            xs[i], ys[i], scores[i], scales[i] = x, y, score, scale
            descs[i] = np.frombuffer(take(4 * dim), dtype="<f4")
        sets.append(FeatureSet(xs, ys, scores, scales, descs))
    if off != len(raw):
        raise FeatureFileError(f"{path}: {len(raw) - off} trailing bytes")
    return MultiFeatureSet(image_size=(h, w), num_detectors=n_sets,
                           descriptor_dim=dim, sets=sets)

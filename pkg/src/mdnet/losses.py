"""Training losses: hinged triplet with hardest-in-batch negatives, variance
weighted peakyness, heatmap similarity across the warp, and the pairwise
dissimilarity term that keeps the detector sets apart."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .synthwarp import Homography, source_visibility_mask, warp_points


class DegeneratePairError(RuntimeError):
    """An image pair with no usable correspondences; the trainer skips it."""


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 1.0
    grid_step: int = 10
    exclusion_radius: float = 5.0

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if not (0 < self.exclusion_radius < self.grid_step):
            raise ValueError("exclusion radius must be positive and below the grid step")


@dataclass(frozen=True)
class PeakyConfig:
    peak_window: int = 17
    variance_window: int = 9

    def __post_init__(self):
        for w in (self.peak_window, self.variance_window):
            if w < 3 or w % 2 == 0:
                raise ValueError("patch sizes must be odd and >= 3")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0   # peakyness
    beta: float = 4.0    # similarity
    gamma: float = 0.5   # dissimilarity (tuned per detector count)

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")


def _grid_coords(height: int, width: int, step: int) -> np.ndarray:
    ys = np.arange(step // 2, height, step)
    xs = np.arange(step // 2, width, step)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1).astype(np.float64)


def triplet_loss(descriptors: Tensor, warped_descriptors: Tensor,
                 homography: Homography, cfg: TripletConfig = TripletConfig()) -> Tensor:
    """Mean hinge over grid anchors with hardest-in-batch negatives.

    Anchors sit on a regular grid in the first image; the positive is the
    warped image descriptor at the anchor's mapped pixel, and the negative is
    the most similar positive of any other anchor mapped further than the
    exclusion radius from the anchor's own location. Anchors without any
    admissible negative are dropped from the mean.
    """
    c, h, w = descriptors.data.shape
    anchors = _grid_coords(h, w, cfg.grid_step)
    mapped, finite = warp_points(anchors, homography)
    visible = finite & (mapped[:, 0] >= 0) & (mapped[:, 0] <= w - 1) \
        & (mapped[:, 1] >= 0) & (mapped[:, 1] <= h - 1)
    if not visible.any():
        raise DegeneratePairError("no grid anchor maps into the warped frame")
    anchors = anchors[visible]
    mapped = mapped[visible]

    a_vecs = T.gather_pixels(descriptors, anchors[:, 1].astype(np.intp),
                             anchors[:, 0].astype(np.intp))
    p_vecs = T.gather_pixels(warped_descriptors,
                             np.rint(mapped[:, 1]).astype(np.intp),
                             np.rint(mapped[:, 0]).astype(np.intp))

    # hardest negative chosen on detached similarities; only the selected
    # descriptor pairs re-enter the differentiable graph
    scores = a_vecs.data @ p_vecs.data.T
    sep = np.linalg.norm(mapped[:, None, :] - mapped[None, :, :], axis=2)
    admissible = sep > cfg.exclusion_radius
    has_negative = admissible.any(axis=1)
    if not has_negative.any():
        raise DegeneratePairError("no anchor has an admissible negative")
    masked = np.where(admissible, scores, -np.inf)
    neg_idx = np.argmax(masked, axis=1)

    keep = np.flatnonzero(has_negative)
    a_kept = T.gather_rows(a_vecs, keep)
    p_kept = T.gather_rows(p_vecs, keep)
    n_kept = T.gather_rows(p_vecs, neg_idx[keep])
    pos_sim = T.tsum(T.mul(a_kept, p_kept), axis=1)
    neg_sim = T.tsum(T.mul(a_kept, n_kept), axis=1)
    hinge = T.relu(T.add(T.sub(neg_sim, pos_sim), cfg.margin))
    return T.tmean(hinge)


def _box_mean_fast(x: np.ndarray, win: int) -> np.ndarray:
    """Border-clipped box mean via separable shifted sums (no gradient)."""
    r = win // 2
    h, w = x.shape[-2:]
    rowsum = np.zeros_like(x)
    for dj in range(-r, r + 1):
        j0, j1 = max(0, -dj), min(w, w - dj)
        if j0 < j1:
            rowsum[..., j0:j1] += x[..., j0 + dj:j1 + dj]
    out = np.zeros_like(x)
    for di in range(-r, r + 1):
        i0, i1 = max(0, -di), min(h, h - di)
        if i0 < i1:
            out[..., i0:i1, :] += rowsum[..., i0 + di:i1 + di, :]
    rows = np.minimum(np.arange(h) + r, h - 1) - np.maximum(np.arange(h) - r, 0) + 1
    cols = np.minimum(np.arange(w) + r, w - 1) - np.maximum(np.arange(w) - r, 0) + 1
    return out / (rows[:, None] * cols[None, :])


def variance_weight(features: Tensor, cfg: PeakyConfig = PeakyConfig(),
                    detach: bool = True) -> Tensor:
    """Local variance of the feature volume, averaged over channels.

    Detached by default: it only rescales the peakyness loss and must not
    feed gradients back into the backbone. The detached path runs a fast
    float64 computation; the differentiable path composes tensor ops.
    """
    if detach:
        f = features.data.astype(np.float64)
        var = _box_mean_fast(f * f, cfg.variance_window) \
            - _box_mean_fast(f, cfg.variance_window) ** 2
        var = np.maximum(var.mean(axis=0), 0.0)  # clamp rounding residue
        return Tensor(var.astype(features.data.dtype))
    sq_mean = T.mean_pool_same(T.square(features), cfg.variance_window)
    mean_sq = T.square(T.mean_pool_same(features, cfg.variance_window))
    return T.tmean(T.sub(sq_mean, mean_sq), axis=0)


def peaky_loss(heatmaps: Tensor, weight: Tensor,
               cfg: PeakyConfig = PeakyConfig()) -> Tensor:
    """Weighted sharpness penalty: per pixel, 1 minus the max-minus-mean of
    the surrounding patch, averaged over pixels then over detectors."""
    if heatmaps.data.ndim != 3:
        raise ValueError(f"expected (N, H, W) heatmaps, got {heatmaps.data.shape}")
    n = heatmaps.data.shape[0]
    if weight.data.shape != heatmaps.data.shape[1:]:
        raise ValueError(
            f"weight shape {weight.data.shape} does not match heatmap slices "
            f"{heatmaps.data.shape[1:]}")
    peak = T.sub(T.max_pool_same(heatmaps, cfg.peak_window),
                 T.mean_pool_same(heatmaps, cfg.peak_window))
    total = None
    for i in range(n):
        term = T.tmean(T.mul(weight, T.sub(1.0, T.take_channel(peak, i))))
        total = term if total is None else T.add(total, term)
    return T.mul(total, 1.0 / n)


def similarity_loss(heatmaps: Tensor, warped_heatmaps: Tensor,
                    homography: Homography,
                    valid_mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean squared heatmap disagreement between an image and the inverse
    warp of its counterpart, over pixels visible in both frames."""
    if heatmaps.data.shape != warped_heatmaps.data.shape:
        raise ValueError("heatmap stacks must share a shape")
    n, h, w = heatmaps.data.shape
    if valid_mask is None:
        valid_mask = source_visibility_mask(homography, (h, w))
    if not valid_mask.any():
        raise DegeneratePairError("no pixel maps into the warped frame")
    ys, xs = np.nonzero(valid_mask)
    pts = np.stack([xs, ys], axis=1).astype(np.float64)
    mapped, _ = warp_points(pts, homography)
    total = None
    for i in range(n):
        here = T.gather_pixels(T.take_channel(heatmaps, i), ys, xs)
        there = T.gather_bilinear(T.take_channel(warped_heatmaps, i),
                                  mapped[:, 1], mapped[:, 0])
        term = T.tmean(T.square(T.sub(here, there)))
        total = term if total is None else T.add(total, term)
    return T.mul(total, 1.0 / n)


def dissimilarity_loss(heatmaps: Tensor) -> Tensor:
    """Mean pairwise product of the detector heatmaps; zero for one detector."""
    n = heatmaps.data.shape[0]
    if n < 2:
        return Tensor(np.zeros((), dtype=heatmaps.data.dtype))
    total = None
    for a in range(n - 1):
        for b in range(a + 1, n):
            prod = T.mul(T.take_channel(heatmaps, a), T.take_channel(heatmaps, b))
            total = prod if total is None else T.add(total, prod)
    pairs = n * (n - 1) // 2
    return T.mul(T.tmean(total), 1.0 / pairs)


def combine_losses(triplet: Tensor, peaky: Tensor, similarity: Tensor,
                   dissimilarity: Tensor, weights: LossWeights) -> Tensor:
    """Weighted sum of the four components; the triplet term is unweighted."""
    return T.add(T.add(triplet, T.mul(peaky, weights.alpha)),
                 T.add(T.mul(similarity, weights.beta),
                       T.mul(dissimilarity, weights.gamma)))


@dataclass
class JointLossResult:
    total: Tensor
    triplet: Tensor
    peaky: Tensor
    similarity: Tensor
    dissimilarity: Tensor

    def components(self) -> dict:
        return {
            "triplet": self.triplet.item(),
            "peaky": self.peaky.item(),
            "similarity": self.similarity.item(),
            "dissimilarity": self.dissimilarity.item(),
            "total": self.total.item(),
        }


def joint_loss(maps, warped_maps, homography: Homography,
               weights: LossWeights = LossWeights(),
               triplet_cfg: TripletConfig = TripletConfig(),
               peaky_cfg: PeakyConfig = PeakyConfig(),
               variance_weighting: bool = True,
               valid_mask: Optional[np.ndarray] = None) -> JointLossResult:
    """Weighted sum of all four losses for one (image, warped image) pair.

    ``maps``/``warped_maps`` are the forward outputs for each side. With
    ``variance_weighting`` off the peakyness term uses a constant weight of
    one (the ablation baseline).
    """
    l_triplet = triplet_loss(maps.descriptors, warped_maps.descriptors,
                             homography, triplet_cfg)
    if variance_weighting:
        w_here = variance_weight(maps.features, peaky_cfg)
        w_there = variance_weight(warped_maps.features, peaky_cfg)
    else:
        shape = maps.features.data.shape[1:]
        ones = Tensor(np.ones(shape, dtype=maps.features.data.dtype))
        w_here = w_there = ones
    l_peaky = T.mul(T.add(peaky_loss(maps.heatmaps, w_here, peaky_cfg),
                          peaky_loss(warped_maps.heatmaps, w_there, peaky_cfg)), 0.5)
    l_sim = similarity_loss(maps.heatmaps, warped_maps.heatmaps, homography,
                            valid_mask=valid_mask)
    l_dissim = T.mul(T.add(dissimilarity_loss(maps.heatmaps),
                           dissimilarity_loss(warped_maps.heatmaps)), 0.5)
    total = combine_losses(l_triplet, l_peaky, l_sim, l_dissim, weights)
    return JointLossResult(total, l_triplet, l_peaky, l_sim, l_dissim)

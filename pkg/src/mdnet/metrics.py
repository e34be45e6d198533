"""Homography-ground-truth evaluation: matching accuracy, matching score,
repeatability, and the per-image set-separability metric.

Ratios with an empty denominator are reported as absent (None), never as 0
or 1, so aggregate means are not silently skewed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .extractor import MultiFeatureSet
from .matcher import MatchResult
from .synthwarp import Homography, warp_points


def _all_points(features: MultiFeatureSet) -> Tuple[np.ndarray, np.ndarray]:
    """Stack keypoints of every set; returns (K, 2) xy and set labels."""
    pts, labels = [], []
    for n, s in enumerate(features.sets):
        if len(s):
            pts.append(np.stack([s.xs, s.ys], axis=1).astype(np.float64))
            labels.append(np.full(len(s), n))
    if not pts:
        return np.zeros((0, 2)), np.zeros(0, int)
    return np.concatenate(pts), np.concatenate(labels)


def _inside(points: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    h, w = size
    return (points[:, 0] >= 0) & (points[:, 0] <= w - 1) \
        & (points[:, 1] >= 0) & (points[:, 1] <= h - 1)


def _match_endpoints(matches: MatchResult, f1: MultiFeatureSet,
                     f2: MultiFeatureSet) -> Tuple[np.ndarray, np.ndarray]:
    p1, p2 = [], []
    for s, i, j in zip(matches.set_ids, matches.idx1, matches.idx2):
        s1 = f1.sets[int(s)]
        s2 = f2.sets[int(s)]
        p1.append((s1.xs[i], s1.ys[i]))
        p2.append((s2.xs[j], s2.ys[j]))
    if not p1:
        return np.zeros((0, 2)), np.zeros((0, 2))
    return np.asarray(p1, dtype=np.float64), np.asarray(p2, dtype=np.float64)


def correct_match_mask(matches: MatchResult, f1: MultiFeatureSet,
                       f2: MultiFeatureSet, g: Homography,
                       threshold: float) -> np.ndarray:
    """A match is correct when its warped endpoint lands within threshold px."""
    p1, p2 = _match_endpoints(matches, f1, f2)
    if len(p1) == 0:
        return np.zeros(0, bool)
    mapped, valid = warp_points(p1, g)
    err = np.linalg.norm(mapped - p2, axis=1)
    return valid & (err <= threshold)


def mma(matches: MatchResult, f1: MultiFeatureSet, f2: MultiFeatureSet,
        g: Homography, threshold: float) -> Optional[float]:
    """Correct matches over proposed matches; absent when nothing was proposed."""
    if len(matches) == 0:
        return None
    correct = correct_match_mask(matches, f1, f2, g, threshold)
    return float(correct.mean())


def matching_score(matches: MatchResult, f1: MultiFeatureSet,
                   f2: MultiFeatureSet, g: Homography,
                   threshold: float) -> Optional[float]:
    """Correct matches over shared-area keypoints, averaged over both images."""
    pts1, _ = _all_points(f1)
    pts2, _ = _all_points(f2)
    fwd, v1 = warp_points(pts1, g)
    back, v2 = warp_points(pts2, g.inverse())
    shared1 = int(np.sum(v1 & _inside(fwd, f2.image_size)))
    shared2 = int(np.sum(v2 & _inside(back, f1.image_size)))
    if shared1 == 0 or shared2 == 0:
        return None
    n_correct = int(correct_match_mask(matches, f1, f2, g, threshold).sum())
    return 0.5 * (n_correct / shared1 + n_correct / shared2)


def repeatability(f1: MultiFeatureSet, f2: MultiFeatureSet, g: Homography,
                  threshold: float) -> Optional[float]:
    """Symmetric fraction of shared-area keypoints with a counterpart within
    threshold px of their ground-truth projection, sets ignored."""
    pts1, _ = _all_points(f1)
    pts2, _ = _all_points(f2)

    def one_way(src, dst, h, dst_size):
        mapped, valid = warp_points(src, h)
        shared = valid & _inside(mapped, dst_size)
        if not shared.any():
            return None
        if len(dst) == 0:
            return 0.0
        d = np.linalg.norm(mapped[shared][:, None, :] - dst[None, :, :], axis=2)
        return float((d.min(axis=1) <= threshold).mean())

    r12 = one_way(pts1, pts2, g, f2.image_size)
    r21 = one_way(pts2, pts1, g.inverse(), f1.image_size)
    if r12 is None or r21 is None:
        return None
    return 0.5 * (r12 + r21)


def separability(features: MultiFeatureSet, radius: float) -> Optional[float]:
    """One minus the fraction of keypoints lying strictly closer than
    ``radius`` px to a keypoint of a different set; single-image metric,
    undefined for one detector."""
    if features.num_detectors < 2:
        return None
    pts, labels = _all_points(features)
    total = len(pts)
    if total == 0:
        return None
    violations = 0
    for n in np.unique(labels):
        own = pts[labels == n]
        others = pts[labels != n]
        if len(others) == 0:
            continue
        d = np.linalg.norm(own[:, None, :] - others[None, :, :], axis=2)
        violations += int((d.min(axis=1) < radius).sum())
    return 1.0 - violations / total


THRESHOLDS = (1.0, 2.0, 3.0)


@dataclass
class MetricReport:
    mma_1px: Optional[float] = None
    mma_2px: Optional[float] = None
    mma_3px: Optional[float] = None
    ms_1px: Optional[float] = None
    ms_2px: Optional[float] = None
    ms_3px: Optional[float] = None
    repeatability_3px: Optional[float] = None
    separability_3px: Optional[float] = None
    num_proposed: int = 0
    num_correct_3px: int = 0
    shared_keypoints_1: int = 0
    shared_keypoints_2: int = 0

    def as_row(self) -> List:
        return [getattr(self, f.name) for f in fields(self)]

    @staticmethod
    def header() -> List[str]:
        return [f.name for f in fields(MetricReport)]


def evaluate_pair(f1: MultiFeatureSet, f2: MultiFeatureSet, g: Homography,
                  matches: MatchResult) -> MetricReport:
    report = MetricReport()
    report.num_proposed = len(matches)
    report.mma_1px, report.mma_2px, report.mma_3px = \
        (mma(matches, f1, f2, g, t) for t in THRESHOLDS)
    report.ms_1px, report.ms_2px, report.ms_3px = \
        (matching_score(matches, f1, f2, g, t) for t in THRESHOLDS)
    report.repeatability_3px = repeatability(f1, f2, g, 3.0)
    seps = [s for s in (separability(f1, 3.0), separability(f2, 3.0)) if s is not None]
    report.separability_3px = float(np.mean(seps)) if seps else None
    report.num_correct_3px = int(correct_match_mask(matches, f1, f2, g, 3.0).sum())

    pts1, _ = _all_points(f1)
    pts2, _ = _all_points(f2)
    fwd, v1 = warp_points(pts1, g)
    back, v2 = warp_points(pts2, g.inverse())
    report.shared_keypoints_1 = int(np.sum(v1 & _inside(fwd, f2.image_size)))
    report.shared_keypoints_2 = int(np.sum(v2 & _inside(back, f1.image_size)))
    return report


def write_report_csv(path: Path, reports: Sequence[MetricReport]) -> None:
    """One row per pair plus an aggregate row of means over present values."""
    header = ["pair"] + MetricReport.header()
    tmp = Path(path).with_suffix(Path(path).suffix + ".tmp")

    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return f"{v:.9g}"
        return v

    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, r in enumerate(reports):
            writer.writerow([i] + [fmt(v) for v in r.as_row()])
        agg = []
        for name in MetricReport.header():
            vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
            agg.append(fmt(float(np.mean(vals))) if vals else "")
        writer.writerow(["mean"] + agg)
    tmp.replace(path)


def load_homography_file(path: Path) -> Homography:
    """Ground-truth homography as nine whitespace-separated numbers, row-major."""
    values = [float(v) for v in Path(path).read_text().split()]
    if len(values) != 9:
        raise ValueError(f"{path}: expected 9 numbers, found {len(values)}")
    return Homography(np.asarray(values).reshape(3, 3))

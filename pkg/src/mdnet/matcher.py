"""Mutual-nearest-neighbor matching, partitioned per keypoint set.

Descriptors are unit vectors, so nearest-by-Euclidean-distance equals
largest-inner-product; the instrumented count of score evaluations makes the
partitioned complexity reduction checkable as an exact integer identity.
"""

from __future__ import annotations

import csv
import itertools
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .extractor import MultiFeatureSet


@dataclass
class MatchResult:
    set_ids: np.ndarray       # int32
    idx1: np.ndarray          # int32 indices into the image-1 set
    idx2: np.ndarray          # int32 indices into the image-2 set
    distances: np.ndarray     # float64 Euclidean descriptor distances
    distance_computations: int
    wallclock_s: float = 0.0

    def __len__(self) -> int:
        return len(self.idx1)

    @staticmethod
    def empty() -> "MatchResult":
        z = np.zeros(0, np.int32)
        return MatchResult(z, z.copy(), z.copy(), np.zeros(0, np.float64), 0)


def mnn_match(desc_a: np.ndarray, desc_b: np.ndarray) \
        -> Tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Mutual nearest neighbors between two unit-norm descriptor matrices.

    Returns (idx_a, idx_b, distances, count); ties go to the lowest index.
    The count is exactly rows(a) * rows(b).
    """
    a = np.asarray(desc_a)
    b = np.asarray(desc_b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"descriptor dims disagree: {a.shape} vs {b.shape}")
    count = a.shape[0] * b.shape[0]
    if count == 0:
        empty = np.zeros(0, np.int32)
        return empty, empty.copy(), np.zeros(0, np.float64), count
    scores = a @ b.T
    nn_ab = np.argmax(scores, axis=1)
    nn_ba = np.argmax(scores, axis=0)
    ia = np.arange(a.shape[0])
    mutual = nn_ba[nn_ab] == ia
    idx_a = ia[mutual].astype(np.int32)
    idx_b = nn_ab[mutual].astype(np.int32)
    sims = scores[idx_a, idx_b].astype(np.float64)
    dist = np.sqrt(np.maximum(2.0 - 2.0 * sims, 0.0))
    return idx_a, idx_b, dist, count


def match_full(f1: MultiFeatureSet, f2: MultiFeatureSet) -> MatchResult:
    """Single-pool MNN baseline: every descriptor against every descriptor."""
    d1 = np.concatenate([s.descriptors for s in f1.sets]) if f1.sets else np.zeros((0, f1.descriptor_dim))
    d2 = np.concatenate([s.descriptors for s in f2.sets]) if f2.sets else np.zeros((0, f2.descriptor_dim))
    t0 = time.perf_counter()
    idx_a, idx_b, dist, count = mnn_match(d1, d2)
    elapsed = time.perf_counter() - t0
    return MatchResult(set_ids=np.full(len(idx_a), -1, np.int32),
                       idx1=idx_a, idx2=idx_b, distances=dist,
                       distance_computations=count, wallclock_s=elapsed)


def match_partitioned(f1: MultiFeatureSet, f2: MultiFeatureSet) -> MatchResult:
    """Per-set MNN; results are tagged with their set and concatenated."""
    if f1.num_detectors != f2.num_detectors:
        raise ValueError(f"set counts disagree: {f1.num_detectors} vs {f2.num_detectors}")
    if f1.descriptor_dim != f2.descriptor_dim:
        raise ValueError(f"descriptor dims disagree: {f1.descriptor_dim} vs {f2.descriptor_dim}")
    set_ids, idx1, idx2, dists = [], [], [], []
    count = 0
    t0 = time.perf_counter()
    for n in range(f1.num_detectors):
        ia, ib, d, c = mnn_match(f1.sets[n].descriptors, f2.sets[n].descriptors)
        count += c
        set_ids.append(np.full(len(ia), n, np.int32))
        idx1.append(ia)
        idx2.append(ib)
        dists.append(d)
    elapsed = time.perf_counter() - t0
    return MatchResult(
        set_ids=np.concatenate(set_ids) if set_ids else np.zeros(0, np.int32),
        idx1=np.concatenate(idx1) if idx1 else np.zeros(0, np.int32),
        idx2=np.concatenate(idx2) if idx2 else np.zeros(0, np.int32),
        distances=np.concatenate(dists) if dists else np.zeros(0, np.float64),
        distance_computations=count, wallclock_s=elapsed)


def verify_matches(desc_a: np.ndarray, desc_b: np.ndarray,
                   idx_a: np.ndarray, idx_b: np.ndarray) -> bool:
    """Post-hoc mutuality and uniqueness check, O(matches * max set size)."""
    if len(np.unique(idx_a)) != len(idx_a) or len(np.unique(idx_b)) != len(idx_b):
        return False
    for i, j in zip(idx_a, idx_b):
        row = desc_a[i] @ desc_b.T
        col = desc_a @ desc_b[j]
        if np.argmax(row) != j or np.argmax(col) != i:
            return False
    return True


# ---------------------------------------------------------------------------
# synthetic pairwise benchmark
# ---------------------------------------------------------------------------

@dataclass
class BenchRow:
    num_sets: int
    total_s: float
    ms_per_pair: float
    distances_per_pair: int
    speedup_vs_single: float


def synthetic_feature_sets(rng: np.random.Generator, num_images: int,
                           keypoints: int, num_sets: int,
                           dim: int = 128) -> List[List[np.ndarray]]:
    """Unit-norm float32 descriptors for each image, split evenly into sets."""
    if keypoints % num_sets:
        raise ValueError("keypoint budget must divide evenly across sets")
    per = keypoints // num_sets
    images = []
    for _ in range(num_images):
        d = rng.standard_normal((keypoints, dim)).astype(np.float32)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        images.append([d[k * per:(k + 1) * per] for k in range(num_sets)])
    return images


def bench_pairwise(num_images: int, keypoints: int,
                   set_counts: Sequence[int] = (1, 2, 4, 8),
                   seed: int = 0, dim: int = 128,
                   verify: bool = False) -> List[BenchRow]:
    """Time all-pairs matching for each detector count on one shared pool of
    synthetic descriptors; counts are exact, wallclock is machine-dependent."""
    rows: List[BenchRow] = []
    base_total = None
    for n_sets in set_counts:
        rng = np.random.default_rng(seed)
        images = synthetic_feature_sets(rng, num_images, keypoints, n_sets, dim)
        pairs = list(itertools.combinations(range(num_images), 2))
        total_count = 0
        t0 = time.perf_counter()
        results = []
        for i, j in pairs:
            pair_count = 0
            matched = []
            for s in range(n_sets):
                ia, ib, d, c = mnn_match(images[i][s], images[j][s])
                pair_count += c
                matched.append((ia, ib))
            total_count += pair_count
            results.append(matched)
        elapsed = time.perf_counter() - t0
        if verify:
            for (i, j), matched in zip(pairs, results):
                for s, (ia, ib) in enumerate(matched):
                    ref = mnn_match(images[i][s], images[j][s])
                    if not (np.array_equal(ia, ref[0]) and np.array_equal(ib, ref[1])):
                        raise AssertionError(f"per-set mismatch on pair {(i, j)} set {s}")
        per_pair = total_count // len(pairs)
        if base_total is None:
            base_total = elapsed
        rows.append(BenchRow(
            num_sets=n_sets, total_s=elapsed,
            ms_per_pair=elapsed / len(pairs) * 1e3,
            distances_per_pair=per_pair,
            speedup_vs_single=base_total / elapsed if elapsed > 0 else float("inf")))
    return rows


# ---------------------------------------------------------------------------
# CSV interfaces
# ---------------------------------------------------------------------------

def write_matches_csv(path: Path, result: MatchResult) -> None:
    tmp = Path(path).with_suffix(Path(path).suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("set", "idx1", "idx2", "distance"))
        for s, i, j, d in zip(result.set_ids, result.idx1, result.idx2,
                              result.distances):
            writer.writerow((int(s), int(i), int(j), f"{d:.9g}"))
    tmp.replace(path)


def write_bench_csv(path: Path, rows: Sequence[BenchRow]) -> None:
    tmp = Path(path).with_suffix(Path(path).suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("N", "total_s", "ms_per_pair", "distances_per_pair",
                         "speedup_vs_1"))
        for r in rows:
            writer.writerow((r.num_sets, f"{r.total_s:.6f}", f"{r.ms_per_pair:.4f}",
                             r.distances_per_pair, f"{r.speedup_vs_single:.3f}"))
    tmp.replace(path)

"""Two-stage optimization: descriptor priming (triplet only), then short
joint training of every branch with the full loss."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .losses import (DegeneratePairError, JointLossResult, LossWeights,
                     PeakyConfig, TripletConfig, joint_loss, triplet_loss)
from .model import ForwardMaps, ModelConfig, ModelWeights, desk_config, \
    forward, init_weights, reinit_detector_head, save_weights
from .synthwarp import Corpus, HomographyLimits, sample_training_pair


class NumericalAbort(RuntimeError):
    """A non-finite gradient appeared; carries the offending parameter name."""


@dataclass(frozen=True)
class TrainConfig:
    stage: str                      # "priming" or "joint"
    iterations: int
    batch_pairs: int = 10
    patch_size: int = 192
    learning_rate: float = 1e-4
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    loss_weights: LossWeights = LossWeights()
    triplet: TripletConfig = TripletConfig()
    peaky: PeakyConfig = PeakyConfig()
    homography: HomographyLimits = HomographyLimits()
    photometric_strength: float = 1.0
    min_overlap: float = 0.4
    variance_weighting: bool = True
    grad_clip_norm: float = 5.0
    seed: int = 0
    dtype: str = "float32"
    checkpoint_every: Optional[int] = None

    def __post_init__(self):
        if self.stage not in ("priming", "joint"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_pairs < 1 or self.iterations < 1:
            raise ValueError("batch size and iteration count must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


def desk_priming_config(seed: int = 0, iterations: int = 2000) -> TrainConfig:
    return TrainConfig(stage="priming", iterations=iterations, batch_pairs=4,
                       patch_size=96, seed=seed)


def desk_joint_config(seed: int = 0, iterations: int = 300,
                      loss_weights: LossWeights = LossWeights(),
                      variance_weighting: bool = True) -> TrainConfig:
    return TrainConfig(stage="joint", iterations=iterations, batch_pairs=4,
                       patch_size=96, seed=seed, loss_weights=loss_weights,
                       variance_weighting=variance_weighting)


def paper_priming_config(seed: int = 0) -> TrainConfig:
    return TrainConfig(stage="priming", iterations=70_000, batch_pairs=10,
                       patch_size=192, seed=seed)


def paper_joint_config(seed: int = 0) -> TrainConfig:
    return TrainConfig(stage="joint", iterations=1_000, batch_pairs=10,
                       patch_size=192, seed=seed)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    first_moments: List[np.ndarray]
    second_moments: List[np.ndarray]
    step_count: int = 0

    @staticmethod
    def for_params(params: Sequence[Tensor]) -> "AdamState":
        return AdamState(
            first_moments=[np.zeros_like(p.data) for p in params],
            second_moments=[np.zeros_like(p.data) for p in params],
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray],
              state: AdamState, lr: float = 1e-4,
              betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
              names: Optional[Sequence[str]] = None) -> AdamState:
    """Standard bias-corrected Adam update, applied in place."""
    b1, b2 = betas
    state.step_count += 1
    t = state.step_count
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter "
                             f"shape {p.data.shape}")
        if not np.isfinite(g).all():
            name = names[i] if names else f"param[{i}]"
            raise NumericalAbort(f"non-finite gradient for {name}")
        m = state.first_moments[i]
        v = state.second_moments[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)
    return state


def clip_gradients(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for g in grads:
            g *= factor
    return total


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

@dataclass
class TrainLogRow:
    iteration: int
    l_triplet: float
    l_peaky: float
    l_sim: float
    l_dissim: float
    total: float
    wallclock_ms: float


@dataclass
class TrainResult:
    weights: ModelWeights
    log: List[TrainLogRow]
    degenerate_pairs: int = 0


LOG_HEADER = ("iteration", "l_triplet", "l_peaky", "l_sim", "l_dissim",
              "total", "wallclock_ms")


def write_train_log(path: Path, rows: Sequence[TrainLogRow]) -> None:
    tmp = Path(path).with_suffix(Path(path).suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
        for r in rows:
            writer.writerow([r.iteration, f"{r.l_triplet:.9g}", f"{r.l_peaky:.9g}",
                             f"{r.l_sim:.9g}", f"{r.l_dissim:.9g}",
                             f"{r.total:.9g}", f"{r.wallclock_ms:.3f}"])
    tmp.replace(path)


def _run_loop(cfg: TrainConfig, corpus: Corpus, weights: ModelWeights,
              params: List[Tensor], names: List[str],
              checkpoint_path: Optional[Path]) -> TrainResult:
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.for_params(params)
    log: List[TrainLogRow] = []
    degenerate_total = 0
    window: List[Tuple[int, int]] = []  # (degenerate, attempted) per iteration
    dtype = cfg.np_dtype

    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        sums = {"triplet": 0.0, "peaky": 0.0, "sim": 0.0, "dissim": 0.0, "total": 0.0}
        pair_losses: List[Tensor] = []
        degenerate_here = 0
        samples = [sample_training_pair(
            corpus, rng, patch_size=cfg.patch_size, limits=cfg.homography,
            min_overlap=cfg.min_overlap,
            photometric_strength=cfg.photometric_strength)
            for _ in range(cfg.batch_pairs)]
        for sample in samples:
            maps = forward(Tensor(sample.image.astype(dtype)), weights)
            wmaps = forward(Tensor(sample.warped.astype(dtype)), weights)
            try:
                if cfg.stage == "priming":
                    l = triplet_loss(maps.descriptors, wmaps.descriptors,
                                     sample.homography, cfg.triplet)
                    sums["triplet"] += l.item()
                    sums["total"] += l.item()
                    pair_losses.append(l)
                else:
                    res = joint_loss(maps, wmaps, sample.homography,
                                     weights=cfg.loss_weights,
                                     triplet_cfg=cfg.triplet, peaky_cfg=cfg.peaky,
                                     variance_weighting=cfg.variance_weighting,
                                     valid_mask=sample.mask_source)
                    sums["triplet"] += res.triplet.item()
                    sums["peaky"] += res.peaky.item()
                    sums["sim"] += res.similarity.item()
                    sums["dissim"] += res.dissimilarity.item()
                    sums["total"] += res.total.item()
                    pair_losses.append(res.total)
            except DegeneratePairError:
                degenerate_here += 1
                continue

        window.append((degenerate_here, cfg.batch_pairs))
        if len(window) > 100:
            window.pop(0)
        degenerate_total += degenerate_here
        if len(window) == 100:
            bad = sum(d for d, _ in window)
            attempted = sum(a for _, a in window)
            if bad > attempted / 2:
                raise RuntimeError(
                    f"degenerate pair rate {bad}/{attempted} over the last 100 "
                    "iterations; corpus unusable")

        n_ok = len(pair_losses)
        if n_ok > 0:
            batch_loss = pair_losses[0]
            for extra in pair_losses[1:]:
                batch_loss = T.add(batch_loss, extra)
            batch_loss = T.mul(batch_loss, 1.0 / n_ok)
            for p in params:
                p.zero_grad()
            T.backward(batch_loss)
            grads = []
            for p, name in zip(params, names):
                if p.grad is None:
                    grads.append(np.zeros_like(p.data))
                else:
                    grads.append(p.grad)
            clip_gradients(grads, cfg.grad_clip_norm)
            adam_step(params, grads, state, lr=cfg.learning_rate,
                      betas=cfg.adam_betas, eps=cfg.adam_eps, names=names)

        ms = (time.perf_counter() - t0) * 1e3
        div = max(n_ok, 1)
        log.append(TrainLogRow(
            iteration=it,
            l_triplet=sums["triplet"] / div, l_peaky=sums["peaky"] / div,
            l_sim=sums["sim"] / div, l_dissim=sums["dissim"] / div,
            total=sums["total"] / div, wallclock_ms=ms))

        if checkpoint_path and cfg.checkpoint_every \
                and (it + 1) % cfg.checkpoint_every == 0:
            save_weights(weights, checkpoint_path)

    if checkpoint_path:
        save_weights(weights, checkpoint_path)
    return TrainResult(weights=weights, log=log, degenerate_pairs=degenerate_total)


def train_priming(cfg: TrainConfig, corpus: Corpus,
                  model_cfg: Optional[ModelConfig] = None,
                  initial: Optional[ModelWeights] = None,
                  checkpoint_path: Optional[Path] = None) -> TrainResult:
    """Stage one: optimize the backbone under the triplet loss alone.

    The detector head is excluded from the optimizer, so its parameters come
    out bitwise identical to their initialization.
    """
    if cfg.stage != "priming":
        raise ValueError("config stage must be 'priming'")
    if initial is None:
        model_cfg = model_cfg or desk_config()
        initial = init_weights(model_cfg, seed=cfg.seed, dtype=cfg.np_dtype)
    weights = initial.astype(cfg.np_dtype)
    params = weights.backbone_parameters()
    names = [n for n in weights.parameter_names() if n.startswith("conv")]
    return _run_loop(cfg, corpus, weights, params, names, checkpoint_path)


def train_joint(cfg: TrainConfig, corpus: Corpus,
                primed: Optional[ModelWeights] = None,
                num_detectors: Optional[int] = None,
                from_scratch: bool = False,
                checkpoint_path: Optional[Path] = None) -> TrainResult:
    """Stage two: all parameters trainable under the full weighted loss.

    Changing the detector count only re-initializes the detector head, so a
    single priming run can serve any number of keypoint sets.
    """
    if cfg.stage != "joint":
        raise ValueError("config stage must be 'joint'")
    if primed is None:
        if not from_scratch:
            raise ValueError("joint stage needs primed weights or from_scratch=True")
        primed = init_weights(desk_config(num_detectors or 2), seed=cfg.seed,
                              dtype=cfg.np_dtype)
    weights = primed.astype(cfg.np_dtype)
    if num_detectors is not None and num_detectors != weights.config.num_detectors:
        weights = reinit_detector_head(weights, num_detectors, seed=cfg.seed)
    params = weights.parameters()
    names = weights.parameter_names()
    return _run_loop(cfg, corpus, weights, params, names, checkpoint_path)

"""Cross-fitted contrast estimation for the weighted-classification step.

Each sample's classification weight is a contrast estimated with models that
never saw the sample's own batch. The generic driver is agnostic to what the
per-batch fitting procedure returns, as long as it can evaluate contrasts on
held-out histories; the IV-optimal pipeline wrapper cross-fits the final
classification weights while propagating pseudo-outcome values from
full-sample fits (nested sample splitting is out of scope).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .bounds import RewardBounds, WeightSpec
from .data import BatchAssignment, Dataset, assign_batches
from .dtr_core import (
    DEFAULT_TIE_SIGN,
    Dtr,
    backward_induct,
    fit_stage,
    fit_weighted_tree,
    pseudo_outcomes,
    sign_with_tie,
)

MIN_BATCH_SIZE = 10


@dataclass(frozen=True)
class CrossfitContrasts:
    """Per-sample, per-stage contrasts fitted without the sample's own batch."""

    contrasts: tuple[np.ndarray, ...]   # entry k-1: (n,) stage-k contrasts
    batches: BatchAssignment
    m: int


def crossfit_stage_contrasts(
    dataset: Dataset,
    batches: BatchAssignment,
    fit_fn: Callable[[Dataset], Callable[[int, np.ndarray], np.ndarray]],
) -> CrossfitContrasts:
    """Fit on each batch complement, evaluate contrasts on the held-out batch.

    fit_fn(train_subset) must return evaluate(stage, histories) -> contrasts.
    The training subset never contains held-out trajectories, so the returned
    contrasts are out-of-batch by construction.
    """
    if batches.m < 2:
        raise ValueError("cross-fitting needs at least 2 batches")
    K = dataset.num_stages
    n = dataset.n
    out = [np.zeros(n) for _ in range(K)]
    for j in range(batches.m):
        held = batches.members(j)
        train = dataset.subset(batches.complement(j))
        evaluate = fit_fn(train)
        held_set = dataset.subset(held)
        for k in range(1, K + 1):
            out[k - 1][held] = evaluate(k, held_set.histories(k))
    return CrossfitContrasts(contrasts=tuple(out), batches=batches, m=batches.m)


def ivoptimal_contrast_fitter(
    reward_bounds: RewardBounds,
    lam: WeightSpec,
    clip: float = 1e-3,
) -> Callable[[Dataset], Callable[[int, np.ndarray], np.ndarray]]:
    """fit_fn running the full backward induction on the training subset."""

    def fit(train: Dataset):
        estimates, _ = backward_induct(train, reward_bounds, lam, clip=clip)

        def evaluate(k: int, histories: np.ndarray) -> np.ndarray:
            return estimates[k - 1].evaluator.contrast(histories)

        return evaluate

    return fit


def fit_ivoptimal_crossfit(
    dataset: Dataset,
    reward_bounds: RewardBounds,
    lam: WeightSpec,
    depth: int,
    m: int,
    seed: int,
    clip: float = 1e-3,
    min_leaf_weight: Optional[float] = None,
    tie_sign: int = DEFAULT_TIE_SIGN,
) -> Dtr:
    """IV-optimal pipeline with cross-fitted classification weights.

    m <= 1 degenerates to the plain in-sample pipeline. Pseudo-outcome value
    propagation always uses the full-sample stage fits; only the contrasts
    feeding the per-stage weighted classification are refit per batch
    complement.
    """
    full_estimates, _ = backward_induct(dataset, reward_bounds, lam, clip=clip,
                                        tie_sign=tie_sign)
    if m <= 1:
        stages = []
        for est in full_estimates:
            H = dataset.histories(est.stage)
            stages.append(fit_weighted_tree(H, est.action, np.abs(est.contrast),
                                            depth, min_leaf_weight=min_leaf_weight))
        return Dtr(stages=tuple(stages), kind="iv_optimal", lam=lam)

    n = dataset.n
    if n // m < MIN_BATCH_SIZE:
        raise ValueError(
            f"cross-fitting with m={m} leaves batches below {MIN_BATCH_SIZE} samples"
        )
    rng = np.random.default_rng(seed)
    batches = assign_batches(n, m, rng)

    K = dataset.num_stages
    cf_contrasts = [np.zeros(n) for _ in range(K)]
    for j in range(m):
        held = batches.members(j)
        train_idx = batches.complement(j)
        train = dataset.subset(train_idx)
        held_set = dataset.subset(held)
        next_value_train: Optional[np.ndarray] = None
        for k in range(K, 0, -1):
            tail = reward_bounds.tail(k)
            if k == K:
                outcomes = train.rewards(k)
            else:
                # value propagation from the full-sample fit, per design
                next_value_train = full_estimates[k].value[train_idx]
                outcomes = pseudo_outcomes(train.rewards(k), next_value_train)
            outcomes = np.clip(outcomes, tail[0], tail[1])
            est = fit_stage(
                train.histories(k), train.instruments(k), train.actions(k),
                outcomes, tail, lam.at(k), clip=clip, tie_sign=tie_sign, stage=k,
            )
            cf_contrasts[k - 1][held] = est.evaluator.contrast(held_set.histories(k))

    stages = []
    for k in range(1, K + 1):
        contrast = cf_contrasts[k - 1]
        labels = sign_with_tie(contrast, tie_sign)
        stages.append(
            fit_weighted_tree(dataset.histories(k), labels, np.abs(contrast),
                              depth, min_leaf_weight=min_leaf_weight)
        )
    return Dtr(stages=tuple(stages), kind="iv_optimal", lam=lam)

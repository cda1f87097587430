"""IV-improvement operator: never worse than a baseline policy, possibly better.

The per-stage relative contrast stored here uses the flip-positive convention:

  stage K:  C(h) = lower(h, -a') - upper(h, a')
  stage k:  C(h) = lower_{r+V}(h, -a') - upper_r(h, a') - lower_V(h, a')

where a' is the baseline action at h, lower/upper are partial-identification
interval ends for the subscripted outcome, and V is the next stage's relative
value. A strictly positive contrast means even the worst case of flipping the
baseline action beats its best case, so the improved rule flips; ties keep the
baseline. The relative value propagated backwards is

  V(h) = keep(h) + max(0, C(h)),   keep_K = 0,  keep_k = lower_V(h, a').

A single set of instrument/treatment fits per stage is shared by the three
outcome regressions (reward-only, relative-continuation-only, their sum),
which are bounded separately before the interval ends are combined.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .bounds import RewardBounds, mp_bounds_matrix
from .data import Dataset
from .dtr_core import Dtr, fit_weighted_tree
from .nuisance import fit_mu_cells, fit_stage_nuisance


def improve_rule_single(L: float, U: float, baseline_action: int) -> int:
    """Single-stage improved action from a contrast interval [L, U].

    +1 when the interval is strictly positive, -1 when strictly negative,
    the baseline action when the interval straddles zero.
    """
    if L > U:
        raise ValueError(f"contrast interval [{L}, {U}] has L > U")
    if L > 0:
        return 1
    if U < 0:
        return -1
    return int(baseline_action)


def _pick_by_action(values_pos: np.ndarray, values_neg: np.ndarray, action: np.ndarray) -> np.ndarray:
    return np.where(action == 1, values_pos, values_neg)


@dataclass(frozen=True)
class RelativeStageEstimate:
    """Per-sample relative contrast pieces at one stage.

    contrast > 0 means flipping the baseline action is worst-case beneficial.
    """

    stage: int
    baseline_action: np.ndarray   # a'_i
    flip_lower: np.ndarray        # lower end of reward(+continuation) on arm -a'
    baseline_upper: np.ndarray    # upper end of reward-only on arm a'
    keep_lower: np.ndarray        # lower end of continuation-only on arm a' (0 at stage K)
    contrast: np.ndarray          # flip_lower - baseline_upper - keep_lower
    improved_action: np.ndarray   # flip where contrast > 0, else baseline
    relative_value: np.ndarray    # keep_lower + max(0, contrast)
    n_repaired: int


def relative_contrast_stage_K(nuisance, h: np.ndarray, baseline_action: int,
                              tail: tuple[float, float]) -> float:
    """Final-stage relative contrast at one history (flip-positive sign)."""
    H = np.atleast_2d(h)
    a_flip = -int(baseline_action)
    low_flip, _, _ = mp_bounds_matrix(nuisance, H, a_flip, tail)
    _, up_base, _ = mp_bounds_matrix(nuisance, H, int(baseline_action), tail)
    return float(low_flip[0] - up_base[0])


def relative_contrast_stage_k(
    reward_nuisance,
    sum_nuisance,
    continuation_nuisance,
    h: np.ndarray,
    baseline_action: int,
    reward_tail: tuple[float, float],
    sum_tail: tuple[float, float],
    continuation_tail: tuple[float, float],
) -> float:
    """Generic-stage relative contrast at one history (flip-positive sign).

    With a zero continuation (continuation nuisance bounding the constant 0)
    this reduces exactly to the final-stage formula.
    """
    H = np.atleast_2d(h)
    a_base = int(baseline_action)
    low_flip, _, _ = mp_bounds_matrix(sum_nuisance, H, -a_base, sum_tail)
    _, up_base, _ = mp_bounds_matrix(reward_nuisance, H, a_base, reward_tail)
    low_keep, _, _ = mp_bounds_matrix(continuation_nuisance, H, a_base, continuation_tail)
    return float(low_flip[0] - up_base[0] - low_keep[0])


def relative_stage_estimates(
    dataset: Dataset,
    baseline: Dtr,
    reward_bounds: RewardBounds,
    clip: float = 1e-3,
) -> list[RelativeStageEstimate]:
    """Backward pass of the improvement operator over all stages.

    Returns estimates indexed by stage (entry k-1 is stage k).
    """
    K = dataset.num_stages
    if baseline.num_stages != K:
        raise ValueError(
            f"baseline has {baseline.num_stages} stages, dataset has {K}"
        )
    if reward_bounds.num_stages != K:
        raise ValueError("reward_bounds must declare one [low, high] pair per stage")

    estimates: list[Optional[RelativeStageEstimate]] = [None] * K
    next_relative: Optional[np.ndarray] = None

    for k in range(K, 0, -1):
        H = dataset.histories(k)
        z = dataset.instruments(k)
        a = dataset.actions(k)
        r = dataset.rewards(k)
        reward_tail = reward_bounds.stage(k)
        bad = (r < reward_tail[0] - 1e-9) | (r > reward_tail[1] + 1e-9)
        if np.any(bad):
            row = int(np.flatnonzero(bad)[0]) + 1
            raise ValueError(
                f"stage {k} reward outside declared bounds {list(reward_tail)} at row {row}"
            )
        base_action = baseline.action_matrix(k, H)

        binary_reward = reward_tail == (0.0, 1.0) and bool(np.all((r == 0.0) | (r == 1.0)))
        reward_ns = fit_stage_nuisance(
            H, z, a, r, outcome_range=reward_tail, binary_outcome=binary_reward, clip=clip
        )
        n_rep = 0

        if k == K:
            low_flip_p, up_p, rep1 = mp_bounds_matrix(reward_ns, H, +1, reward_tail)
            low_flip_n, up_n, rep2 = mp_bounds_matrix(reward_ns, H, -1, reward_tail)
            n_rep += rep1 + rep2
            flip_lower = _pick_by_action(low_flip_n, low_flip_p, base_action)
            baseline_upper = _pick_by_action(up_p, up_n, base_action)
            keep_lower = np.zeros_like(flip_lower)
        else:
            cont_width = reward_bounds.tail_width(k + 1)
            cont_tail = (0.0, cont_width)
            sum_tail = (reward_tail[0], reward_tail[1] + cont_width)
            cont_y = np.clip(next_relative, cont_tail[0], cont_tail[1])
            sum_y = np.clip(r + cont_y, sum_tail[0], sum_tail[1])

            cont_mu, cont_empty = fit_mu_cells(H, z, a, cont_y, cont_tail, binary_outcome=False)
            sum_mu, sum_empty = fit_mu_cells(H, z, a, sum_y, sum_tail, binary_outcome=False)
            cont_ns = reward_ns.with_mu(cont_mu, cont_tail, False, cont_empty)
            sum_ns = reward_ns.with_mu(sum_mu, sum_tail, False, sum_empty)

            low_sum_p, _, rep1 = mp_bounds_matrix(sum_ns, H, +1, sum_tail)
            low_sum_n, _, rep2 = mp_bounds_matrix(sum_ns, H, -1, sum_tail)
            _, up_r_p, rep3 = mp_bounds_matrix(reward_ns, H, +1, reward_tail)
            _, up_r_n, rep4 = mp_bounds_matrix(reward_ns, H, -1, reward_tail)
            low_c_p, _, rep5 = mp_bounds_matrix(cont_ns, H, +1, cont_tail)
            low_c_n, _, rep6 = mp_bounds_matrix(cont_ns, H, -1, cont_tail)
            n_rep += rep1 + rep2 + rep3 + rep4 + rep5 + rep6

            flip_lower = _pick_by_action(low_sum_n, low_sum_p, base_action)
            baseline_upper = _pick_by_action(up_r_p, up_r_n, base_action)
            keep_lower = _pick_by_action(low_c_p, low_c_n, base_action)

        contrast = flip_lower - baseline_upper - keep_lower
        improved = np.where(contrast > 0, -base_action, base_action).astype(int)
        relative_value = keep_lower + np.maximum(contrast, 0.0)

        estimates[k - 1] = RelativeStageEstimate(
            stage=k,
            baseline_action=base_action.astype(int),
            flip_lower=flip_lower,
            baseline_upper=baseline_upper,
            keep_lower=keep_lower,
            contrast=contrast,
            improved_action=improved,
            relative_value=relative_value,
            n_repaired=n_rep,
        )
        next_relative = relative_value

    return list(estimates)


def fit_ivimproved(
    dataset: Dataset,
    baseline: Dtr,
    reward_bounds: RewardBounds,
    depth: int,
    clip: float = 1e-3,
    min_leaf_weight: Optional[float] = None,
    baseline_id: str = "baseline",
) -> tuple[Dtr, list[RelativeStageEstimate]]:
    """Estimate the IV-improved policy over a baseline, projected onto trees."""
    estimates = relative_stage_estimates(dataset, baseline, reward_bounds, clip=clip)
    stages = []
    for est in estimates:
        H = dataset.histories(est.stage)
        tree = fit_weighted_tree(
            H, est.improved_action, np.abs(est.contrast), depth,
            min_leaf_weight=min_leaf_weight,
        )
        stages.append(tree)
    dtr = Dtr(stages=tuple(stages), kind=f"iv_improved({baseline_id})")
    return dtr, estimates

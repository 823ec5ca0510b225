"""Sampling-based MPC over the learned ensemble dynamics.

Classic path-integral scheme: sample K perturbed action sequences, roll each
out through the model, weight by exponentiated negative cost, and average the
perturbations into the nominal sequence. One controller serves two modes:
exploration (maximize accumulated ensemble disagreement) and deployment
(track the centerline at a target speed, optionally penalizing disagreement).

Rollouts propagate each particle with one fixed ensemble member's mean
increment while all members are consulted every step for the disagreement
mixture; the K rollouts are evaluated as one vectorized batch, which is
order-insensitive and deterministically reduced by construction. Per-sample
noise streams depend only on (seed, step, sample), so results never depend
on scheduling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ControlError, ShapeError
from .jrd import jrd_batch
from .sim import Track, track_frame_batch

# A control sequence is a plain (T, 2) array of (steer, throttle) in [-1, 1].


@dataclass
class MppiConfig:
    k: int = 512
    horizon: int = 25
    lam: float = 1.0
    sigma: tuple = (0.3, 0.3)
    seed: int = 0
    smoothing: str = "moving_average"  # or "none"
    smoothing_window: int = 3

    def __post_init__(self) -> None:
        if self.k < 2:
            raise ConfigError(f"need K >= 2 samples, got {self.k}")
        if self.horizon < 1:
            raise ConfigError(f"need horizon >= 1, got {self.horizon}")
        if not self.lam > 0:
            raise ConfigError(f"temperature must be positive, got {self.lam}")
        if self.smoothing not in ("none", "moving_average"):
            raise ConfigError(f"unknown smoothing {self.smoothing!r}")


@dataclass
class CostSpec:
    """Rollout objective. Modes:

    explore       negated accumulated disagreement plus control effort.
    deploy_direct centerline/speed tracking, disagreement ignored (w_unc
                  forced to zero, no threshold indicator).
    deploy_safe   tracking plus w_unc * jrd and a big penalty above the
                  jrd threshold.
    custom        per-step callable (vectorized), for stubs and toys.
    """

    mode: str = "explore"
    w_track: float = 2.0
    w_speed: float = 0.5
    w_ctrl: float = 0.1
    w_unc: float = 5.0
    jrd_threshold: float = math.inf
    penalty_big: float = 1000.0
    v_target: float = 8.0
    track: Track | None = None
    custom_step_cost: object = None

    def __post_init__(self) -> None:
        if self.mode not in ("explore", "deploy_direct", "deploy_safe", "custom"):
            raise ConfigError(f"unknown cost mode {self.mode!r}")
        if self.mode == "deploy_safe" and not self.w_unc > 0:
            raise ConfigError("deploy_safe needs a positive uncertainty weight")
        if self.mode.startswith("deploy") and self.track is None:
            raise ConfigError(f"{self.mode} needs a track reference")
        if self.mode == "custom" and self.custom_step_cost is None:
            raise ConfigError("custom mode needs a step-cost callable")
        if self.mode == "deploy_direct":
            self.w_unc = 0.0

    @property
    def needs_pose(self) -> bool:
        return self.mode in ("deploy_direct", "deploy_safe")


@dataclass
class RolloutResult:
    states: np.ndarray      # (T+1, 3)
    jrd_values: np.ndarray  # (T,)
    cost: float
    valid: bool = True


def sample_perturbations(cfg: MppiConfig, step_index: int = 0) -> np.ndarray:
    """(K, T, 2) zero-mean Gaussian noise with per-channel std cfg.sigma.

    Sample k's stream depends only on (seed, step_index, k), so any degree of
    per-sample parallelism reproduces the same tensor.
    """
    sigma = np.asarray(cfg.sigma, dtype=np.float64)
    noise = np.empty((cfg.k, cfg.horizon, 2))
    for k in range(cfg.k):
        rng = np.random.default_rng([cfg.seed, step_index, k])
        noise[k] = rng.standard_normal((cfg.horizon, 2)) * sigma
    return noise


def exploration_cost(jrd_values, actions, w_ctrl: float = 0.0) -> float:
    """Negated accumulated disagreement plus quadratic control effort."""
    jrd_values = np.asarray(jrd_values, dtype=np.float64)
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    return float(-np.sum(jrd_values) + w_ctrl * np.sum(actions**2))


def deployment_cost(vx, e_lat, jrd_values, actions, prev_action,
                    spec: CostSpec) -> float:
    """Tracking cost plus (in deploy_safe) disagreement penalties.

    Per step: w_track * e_lat^2 + w_speed * (vx - v_target)^2
    + w_ctrl * |u_t - u_{t-1}|^2, then gamma * jrd and a penalty_big
    indicator above the threshold when the spec is deploy_safe.
    """
    vx = np.asarray(vx, dtype=np.float64)
    e_lat = np.asarray(e_lat, dtype=np.float64)
    jrd_values = np.asarray(jrd_values, dtype=np.float64)
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    du = np.diff(np.vstack([np.asarray(prev_action)[None, :], actions]), axis=0)
    cost = float(np.sum(spec.w_track * e_lat**2
                        + spec.w_speed * (vx - spec.v_target) ** 2
                        + spec.w_ctrl * np.sum(du**2, axis=1)))
    if spec.mode == "deploy_safe":
        cost += float(np.sum(spec.w_unc * jrd_values
                             + spec.penalty_big * (jrd_values > spec.jrd_threshold)))
    return cost


def _rollout_batch(model, window, seqs: np.ndarray, spec: CostSpec,
                   members: np.ndarray | None, pose=None):
    """Vectorized rollouts of K action sequences from one shared history.

    ``members`` assigns one ensemble member per rollout (None propagates the
    ensemble-mean increment). seqs[:, 0] replaces the newest action in the
    window; the pre-replacement newest action seeds the control-rate cost.
    Returns (costs (K,), jrd (K, T), states (K, T+1, 3), invalid (K,)).
    """
    seqs = np.asarray(seqs, dtype=np.float64)
    k, t_hor = seqs.shape[0], seqs.shape[1]
    h = window.h
    states_hist = np.repeat(window.states[None, :, :], k, axis=0)
    actions_hist = np.repeat(window.actions[None, :, :], k, axis=0)
    prev_u = np.repeat(window.actions[-1][None, :], k, axis=0)
    cur = states_hist[:, -1].copy()
    traj = np.empty((k, t_hor + 1, 3))
    traj[:, 0] = cur
    jrd_vals = np.zeros((k, t_hor))
    invalid = np.zeros(k, dtype=bool)
    cost = np.zeros(k)
    if spec.needs_pose:
        if pose is None:
            raise ControlError(f"{spec.mode} rollouts need the current pose")
        poses = np.repeat(np.asarray(pose, dtype=np.float64)[None, :], k, axis=0)

    for t in range(t_hor):
        u = seqs[:, t]
        actions_hist[:, -1] = u
        means, varis = model.delta_batch(states_hist, actions_hist)
        if model.b >= 2:
            next_means = cur[None, :, :] + means
            jrd_t = jrd_batch(next_means.transpose(1, 0, 2),
                              varis.transpose(1, 0, 2))
        else:
            jrd_t = np.zeros(k)
        jrd_vals[:, t] = jrd_t
        if members is None:
            delta = means.mean(axis=0)
        else:
            delta = means[members, np.arange(k)]
        new = cur + delta
        bad = ~np.all(np.isfinite(new), axis=1) | ~np.isfinite(jrd_t)
        if bad.any():
            invalid |= bad
            new[bad] = cur[bad]  # freeze so downstream math stays finite
        if spec.mode == "custom":
            cost += spec.custom_step_cost(new, u, prev_u, jrd_t)
        elif spec.needs_pose:
            dtm = window.dt
            yaw = poses[:, 2]
            poses[:, 0] += (new[:, 0] * np.cos(yaw) - new[:, 1] * np.sin(yaw)) * dtm
            poses[:, 1] += (new[:, 0] * np.sin(yaw) + new[:, 1] * np.cos(yaw)) * dtm
            poses[:, 2] += new[:, 2] * dtm
            _, e_lat, _, dist = track_frame_batch(poses[:, :2], poses[:, 2],
                                                  spec.track)
            invalid |= dist > 5.0 * spec.track.half_width
            du2 = np.sum((u - prev_u) ** 2, axis=1)
            cost += (spec.w_track * e_lat**2
                     + spec.w_speed * (new[:, 0] - spec.v_target) ** 2
                     + spec.w_ctrl * du2)
            if spec.mode == "deploy_safe":
                cost += (spec.w_unc * jrd_t
                         + spec.penalty_big * (jrd_t > spec.jrd_threshold))
        # history shift (functional per particle)
        states_hist[:, :-1] = states_hist[:, 1:]
        states_hist[:, -1] = new
        actions_hist[:, :-1] = actions_hist[:, 1:]
        cur = new
        traj[:, t + 1] = cur
        prev_u = u
    if spec.mode == "explore":
        cost = -np.sum(jrd_vals, axis=1) + spec.w_ctrl * np.sum(seqs**2, axis=(1, 2))
    cost = np.where(invalid, np.inf, cost)
    return cost, jrd_vals, traj, invalid


def rollout(model, window, seq: np.ndarray, spec: CostSpec,
            member: int | None = 0, pose=None) -> RolloutResult:
    """Roll one action sequence through the model and cost it.

    ``member`` fixes which ensemble member's mean propagates the particle
    (None uses the ensemble mean); all members are evaluated each step to form
    the disagreement mixture. A non-finite state marks the rollout invalid
    with infinite cost.
    """
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[1] != 2:
        raise ShapeError(f"sequence must be (T, 2), got {seq.shape}")
    members = None if member is None else np.array([int(member)])
    costs, jrd_vals, traj, invalid = _rollout_batch(
        model, window, seq[None, :, :], spec, members, pose)
    return RolloutResult(states=traj[0], jrd_values=jrd_vals[0],
                         cost=float(costs[0]), valid=not bool(invalid[0]))


def mppi_weights(costs: np.ndarray, lam: float) -> np.ndarray:
    """Exponentially reweighted costs: w_k ~ exp(-(S_k - min S) / lam).

    Invalid (+inf) rollouts get weight zero; raises ControlError when every
    cost is infinite.
    """
    costs = np.asarray(costs, dtype=np.float64)
    finite = np.isfinite(costs)
    if not finite.any():
        raise ControlError("every rollout was invalid; holding previous nominal")
    base = np.min(costs[finite])
    w = np.zeros_like(costs)
    w[finite] = np.exp(-(costs[finite] - base) / lam)
    return w / np.sum(w)


def _moving_average(seq: np.ndarray, window: int) -> np.ndarray:
    if window <= 1:
        return seq
    kernel = np.ones(window)
    counts = np.convolve(np.ones(seq.shape[0]), kernel, mode="same")
    out = np.empty_like(seq)
    for c in range(seq.shape[1]):
        out[:, c] = np.convolve(seq[:, c], kernel, mode="same") / counts
    return out


def mppi_update(nominal: np.ndarray, perturbations: np.ndarray,
                weights: np.ndarray, smoothing_window: int = 0) -> np.ndarray:
    """Weighted-noise update, clamped to [-1, 1], optionally smoothed."""
    nominal = np.asarray(nominal, dtype=np.float64)
    perturbations = np.asarray(perturbations, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if perturbations.shape[:1] != weights.shape or \
            perturbations.shape[1:] != nominal.shape:
        raise ShapeError("nominal, perturbations, and weights shapes disagree")
    updated = nominal + np.einsum("k,ktc->tc", weights, perturbations)
    updated = np.clip(updated, -1.0, 1.0)
    if smoothing_window > 1:
        updated = _moving_average(updated, smoothing_window)
    return updated


@dataclass
class MpcState:
    """Controller state owned by a single logical control loop."""

    cfg: MppiConfig
    spec: CostSpec
    nominal: np.ndarray = None  # (T, 2)
    step_index: int = 0

    def __post_init__(self) -> None:
        if self.nominal is None:
            self.nominal = np.zeros((self.cfg.horizon, 2))
        self.nominal = np.asarray(self.nominal, dtype=np.float64)
        if self.nominal.shape != (self.cfg.horizon, 2):
            raise ShapeError("nominal sequence must be (horizon, 2)")


def mpc_step(state: MpcState, model, window, pose=None):
    """One control period: sample, roll out, reweight, update, emit.

    Returns (action (2,), next MpcState, diagnostics). The emitted action is
    the first step of the updated nominal; the stored nominal is shifted left
    with the last step repeated. If every rollout is invalid the action is
    zero and diagnostics["all_invalid"] is set.
    """
    cfg = state.cfg
    noise = sample_perturbations(cfg, state.step_index)
    seqs = np.clip(state.nominal[None, :, :] + noise, -1.0, 1.0)
    members = np.arange(cfg.k) % max(model.b, 1)
    costs, jrd_vals, _, invalid = _rollout_batch(
        model, window, seqs, state.spec, members, pose)
    n_invalid = int(invalid.sum())
    diagnostics = {
        "n_invalid": n_invalid,
        "all_invalid": False,
        "best_cost": math.inf,
        "mean_jrd": 0.0,
        "max_jrd": 0.0,
    }
    valid = ~invalid
    if valid.any():
        diagnostics["best_cost"] = float(np.min(costs[valid]))
        diagnostics["mean_jrd"] = float(np.mean(jrd_vals[valid]))
        diagnostics["max_jrd"] = float(np.max(jrd_vals[valid]))
    try:
        weights = mppi_weights(costs, cfg.lam)
    except ControlError:
        diagnostics["all_invalid"] = True
        next_nominal = np.vstack([state.nominal[1:], state.nominal[-1:]])
        return (np.zeros(2),
                replace(state, nominal=next_nominal,
                        step_index=state.step_index + 1),
                diagnostics)
    smoothing = cfg.smoothing_window if cfg.smoothing == "moving_average" else 0
    updated = mppi_update(state.nominal, noise, weights, smoothing)
    action = updated[0].copy()
    next_nominal = np.vstack([updated[1:], updated[-1:]])
    return (action,
            replace(state, nominal=next_nominal, step_index=state.step_index + 1),
            diagnostics)

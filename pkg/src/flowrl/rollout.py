"""Denoising-MDP executor: samples groups of stochastic trajectories under a
frozen policy and scores every step via one-step terminal projection.

Each trajectory draws from its own seed-derived stream (seed entropy includes
the trajectory index), so groups regenerate bit-identically and could be
produced in parallel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import envsuite, flowcore
from .diffnet import Architecture
from .envsuite import RewardModel
from .flowcore import NoiseSchedule


class RolloutError(RuntimeError):
    """A trajectory produced a non-finite state."""


@dataclass
class Trajectory:
    """One rollout: states in generation order s_T .. s_0 plus per-step records.

    ``instant_rewards`` holds R_T .. R_1 (chronological); the last entry equals
    ``terminal_reward`` exactly because the projection at tau = 0 is the
    identity. ``logp_old`` is None for deterministic (a = 0) rollouts, which
    have no transition density.
    """

    context: int
    states: np.ndarray          # (T+1, D)
    noises: np.ndarray          # (T, D)
    step_means: np.ndarray      # (T, D)
    step_vars: np.ndarray       # (T,)
    logp_old: np.ndarray | None
    instant_rewards: np.ndarray  # (T,)
    terminal_reward: float

    def __post_init__(self) -> None:
        t = self.num_steps
        if self.states.shape[0] != t + 1:
            raise ValueError("states must have T+1 entries")
        for name in ("noises", "step_means"):
            if getattr(self, name).shape[0] != t:
                raise ValueError(f"{name} must have T entries")
        if self.step_vars.shape != (t,) or self.instant_rewards.shape != (t,):
            raise ValueError("per-step arrays must have T entries")
        if self.logp_old is not None and self.logp_old.shape != (t,):
            raise ValueError("logp_old must have T entries")
        arrays = [self.states, self.noises, self.step_means, self.step_vars, self.instant_rewards]
        if self.logp_old is not None:
            arrays.append(self.logp_old)
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise ValueError("non-finite trajectory entries")
        # the projection at tau = 0 is the identity, so the last instant
        # reward must reproduce the terminal reward
        if self.instant_rewards[-1] != self.terminal_reward:
            raise ValueError("final instant reward must equal the terminal reward")

    @property
    def num_steps(self) -> int:
        return self.instant_rewards.shape[0] if self.instant_rewards.ndim else 0


@dataclass
class RolloutGroup:
    """G trajectories sharing one context and one schedule."""

    context: int
    schedule: NoiseSchedule
    trajectories: list[Trajectory]

    def __post_init__(self) -> None:
        if not self.trajectories:
            raise ValueError("empty rollout group")
        if any(tr.context != self.context for tr in self.trajectories):
            raise ValueError("trajectories must share the group context")

    @property
    def group_size(self) -> int:
        return len(self.trajectories)

    @property
    def num_steps(self) -> int:
        return self.trajectories[0].num_steps

    def terminal_rewards(self) -> np.ndarray:
        return np.array([tr.terminal_reward for tr in self.trajectories])

    def instant_reward_matrix(self) -> np.ndarray:
        return np.stack([tr.instant_rewards for tr in self.trajectories])

    def states_stack(self) -> np.ndarray:
        return np.stack([tr.states for tr in self.trajectories])

    def logp_matrix(self) -> np.ndarray:
        if any(tr.logp_old is None for tr in self.trajectories):
            raise ValueError("deterministic rollouts carry no log-densities")
        return np.stack([tr.logp_old for tr in self.trajectories])


def _as_seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, (tuple, list)):
        return np.random.SeedSequence(tuple(int(s) for s in seed))
    return np.random.SeedSequence(int(seed))


def instant_reward(
    arch: Architecture,
    params_old: np.ndarray,
    s_next,
    tau_next: float,
    rm: RewardModel,
    context: int,
):
    """Reward of the one-step projected terminal state reached from s_next."""
    projected = flowcore.ode_project(arch, params_old, s_next, tau_next, context)
    return envsuite.reward(rm, projected, context)


def rollout_group(
    arch: Architecture,
    params_old: np.ndarray,
    context: int,
    group_size: int,
    schedule: NoiseSchedule,
    rm: RewardModel,
    seed,
    shared_initial_noise: bool = False,
) -> RolloutGroup:
    """Sample G stochastic trajectories for one context under a frozen policy.

    For t = T .. 1 each trajectory takes one exploration step, records the
    transition distribution and its log-density, and scores the one-step
    projection of the new state. ``shared_initial_noise`` starts every
    trajectory from the same s_T (exploration then comes only from the step
    noise); the default draws independent initial noise per trajectory.
    """
    if group_size < 2:
        raise ValueError("group_size must be >= 2")
    t_steps = schedule.num_steps
    d = arch.state_dim
    children = _as_seed_sequence(seed).spawn(group_size + 1)
    rngs = [np.random.default_rng(c) for c in children[:group_size]]
    if shared_initial_noise:
        shared = np.random.default_rng(children[group_size]).standard_normal(d)
        init = np.tile(shared, (group_size, 1))
    else:
        init = np.stack([r.standard_normal(d) for r in rngs])
    noises = np.stack([r.standard_normal((t_steps, d)) for r in rngs])

    states = np.empty((t_steps + 1, group_size, d))
    step_means = np.empty((t_steps, group_size, d))
    step_vars = np.empty(t_steps)
    logps = np.empty((t_steps, group_size)) if schedule.a > 0 else None
    rewards = np.empty((t_steps, group_size))

    states[0] = init
    x = init
    for j, t in enumerate(range(t_steps, 0, -1)):
        tau = t / t_steps
        try:
            x, dist = flowcore.sde_step(
                arch, params_old, x, tau, schedule.dtau, schedule, noises[:, j], context
            )
        except RuntimeError as exc:
            raise RolloutError(f"step t={t} context={context}: {exc}") from exc
        states[j + 1] = x
        step_means[j] = dist.mean
        step_vars[j] = dist.var
        if logps is not None:
            logps[j] = flowcore.transition_logpdf(x, dist)
        tau_next = (t - 1) / t_steps
        projected = flowcore.ode_project(arch, params_old, x, tau_next, context)
        rewards[j] = envsuite.reward(rm, projected, context)
    terminal = envsuite.reward(rm, x, context)

    trajectories = []
    for i in range(group_size):
        trajectories.append(
            Trajectory(
                context=context,
                states=states[:, i].copy(),
                noises=noises[i],
                step_means=step_means[:, i].copy(),
                step_vars=step_vars.copy(),
                logp_old=None if logps is None else logps[:, i].copy(),
                instant_rewards=rewards[:, i].copy(),
                terminal_reward=float(terminal[i]),
            )
        )
    return RolloutGroup(context=context, schedule=schedule, trajectories=trajectories)


def dump_trajectories(groups, path) -> None:
    """Write one JSON-lines record per trajectory (debugging / oracle tests)."""
    with Path(path).open("w") as fh:
        for group in groups:
            for tr in group.trajectories:
                record = {
                    "context": tr.context,
                    "states": tr.states.tolist(),
                    "instant_rewards": tr.instant_rewards.tolist(),
                    "terminal_reward": tr.terminal_reward,
                    "logp_old": None if tr.logp_old is None else tr.logp_old.tolist(),
                }
                fh.write(json.dumps(record) + "\n")


def load_trajectory_dump(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]

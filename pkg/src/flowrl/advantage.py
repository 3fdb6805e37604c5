"""Advantage estimation: discounted cumulative values, value-driven timestep
weights, group-relative normalization, and the adaptive dual estimator that
keeps a learning signal alive when within-group reward diversity vanishes.

Conventions: matrices are (G, T) with rows indexed by trajectory and columns
in generation order (step T first, step 1 last). Group statistics use the
population standard deviation (divide by G).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ESTIMATOR_NAMES = ("flow-grpo", "vgpo-adae")

DEFAULT_EPS_STD = 1e-8
DEFAULT_EPS_MEAN = 1e-6


@dataclass(frozen=True)
class AdvantageTable:
    """Per-(trajectory, timestep) advantages under a named estimator."""

    A: np.ndarray
    estimator: str
    k: float
    eps_std: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "A", np.asarray(self.A, dtype=np.float64))
        if self.A.ndim != 2:
            raise ValueError("advantage table must be (G, T)")
        if not np.all(np.isfinite(self.A)):
            raise ValueError("non-finite advantages")
        if self.estimator not in ESTIMATOR_NAMES:
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.k < 0.0 or self.eps_std <= 0.0:
            raise ValueError("need k >= 0 and eps_std > 0")


@dataclass(frozen=True)
class StdDiagnostic:
    """Report for one group column: how hard pure relative normalization
    would amplify its reward gaps."""

    std: float
    amplification: float  # 1/std; inf for a constant column
    flagged: bool         # std below the configured threshold
    guard_active: bool    # std below the numerical floor


def _column_stats(values: np.ndarray) -> tuple[float, float]:
    """Population mean and std of one group column."""
    m = float(values.mean())
    s = float(np.sqrt(((values - m) ** 2).mean()))
    return m, s


def _normalize_column(values: np.ndarray, eps_std: float) -> np.ndarray:
    """(v - mean)/max(std, eps); a degenerate column (std < eps) is all zero."""
    m, s = _column_stats(values)
    if s < eps_std:
        return np.zeros_like(values)
    return (values - m) / max(s, eps_std)


def cumulative_values(instant_rewards, gamma: float):
    """Discounted cumulative values along each trajectory.

    ``instant_rewards`` is (..., T) in generation order R_T .. R_1; entry t
    accumulates gamma^k R_{t-k} over the remaining steps, i.e. a right-to-left
    scan Q_1 = R_1, Q_t = R_t + gamma * Q_{t-1}.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must be in [0, 1)")
    r = np.asarray(instant_rewards, dtype=np.float64)
    if r.shape[-1] == 0:
        raise ValueError("empty reward sequence")
    q = np.empty_like(r)
    q[..., -1] = r[..., -1]
    for j in range(r.shape[-1] - 2, -1, -1):
        q[..., j] = r[..., j] + gamma * q[..., j + 1]
    return q


def value_weights(q, eps_mean: float = DEFAULT_EPS_MEAN):
    """Per-step weights Q_t / mean_t(Q) along each trajectory.

    If a trajectory's temporal mean falls below ``eps_mean`` its weights are
    all one (no information to reweight with).
    """
    if eps_mean <= 0.0:
        raise ValueError("eps_mean must be > 0")
    q = np.asarray(q, dtype=np.float64)
    mean_t = q.mean(axis=-1, keepdims=True)
    safe = np.where(mean_t < eps_mean, 1.0, mean_t)
    return np.where(mean_t < eps_mean, 1.0, q / safe)


def grpo_terminal_advantage(terminal_rewards, num_steps: int, eps_std: float = DEFAULT_EPS_STD) -> np.ndarray:
    """Group-normalized terminal rewards broadcast to every timestep.

    The sparse-reward baseline: one normalized score per trajectory, repeated
    across the T columns.
    """
    r = np.asarray(terminal_rewards, dtype=np.float64)
    if r.ndim != 1 or r.shape[0] < 2:
        raise ValueError("need a 1-D group of at least 2 terminal rewards")
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    col = _normalize_column(r, eps_std)
    return np.tile(col[:, None], (1, num_steps))


def group_relative(q, eps_std: float = DEFAULT_EPS_STD) -> np.ndarray:
    """Per-timestep group normalization of a (G, T) value table.

    Columns whose std falls below ``eps_std`` are defined as all zero rather
    than letting 1/std blow up.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 2 or q.shape[0] < 2:
        raise ValueError("need a (G, T) table with G >= 2")
    out = np.empty_like(q)
    for j in range(q.shape[1]):
        out[:, j] = _normalize_column(np.ascontiguousarray(q[:, j]), eps_std)
    return out


def adae(q, k: float, omega, eps_std: float = DEFAULT_EPS_STD) -> AdvantageTable:
    """Adaptive dual advantages: relative normalization plus an absolute term.

    Per column, with alpha = k * std: A_i = omega_i * ((1 + alpha) * Q_i -
    mean) / max(std, eps). When the column's std falls below ``eps_std`` the
    algebraic limit A_i = omega_i * k * Q_i takes over, so uniformly scored
    groups still produce a (value-proportional) learning signal.
    """
    q = np.asarray(q, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    if q.ndim != 2 or q.shape[0] < 2:
        raise ValueError("need a (G, T) table with G >= 2")
    if omega.shape != q.shape:
        raise ValueError(f"omega shape {omega.shape} != {q.shape}")
    if k < 0.0:
        raise ValueError("k must be >= 0")
    a = np.empty_like(q)
    for j in range(q.shape[1]):
        col = np.ascontiguousarray(q[:, j])
        m, s = _column_stats(col)
        if s < eps_std:
            a[:, j] = omega[:, j] * (k * col)
        else:
            a[:, j] = omega[:, j] * (((1.0 + k * s) * col - m) / max(s, eps_std))
    return AdvantageTable(A=a, estimator="vgpo-adae", k=float(k), eps_std=float(eps_std))


def near_zero_std_diagnostic(
    column,
    threshold: float = 1e-3,
    eps_std: float = DEFAULT_EPS_STD,
) -> StdDiagnostic:
    """Flag a group column whose reward spread would be amplified by 1/std."""
    col = np.asarray(column, dtype=np.float64)
    if col.ndim != 1 or col.shape[0] < 1:
        raise ValueError("need a 1-D column")
    _, s = _column_stats(col)
    amplification = float("inf") if s == 0.0 else 1.0 / s
    return StdDiagnostic(
        std=s,
        amplification=amplification,
        flagged=s < threshold,
        guard_active=s < eps_std,
    )

"""Noise-coefficient schedules, timestep grids, and the one-step denoising update.

Convention: t=0 is clean, t=1 is pure noise. A timestep grid stores the
decreasing sequence t_max = values[0] > ... > values[T-1] = t_min > 0; the
final update from values[T-1] down to exactly t=0 is implicit and triggered
by k = T-1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

CLEAN = -1  # sentinel grid index for a fully denoised position


@dataclass(frozen=True)
class NoiseCoeffs:
    """Signal/noise coefficient pair alpha(t), sigma(t) on t in [0, 1].

    Only the linear-interpolation (flow matching) family is supported:
    alpha(t) = 1 - t, sigma(t) = t. alpha decreases from 1 to 0 while sigma
    increases from 0 to 1.
    """

    kind: str = "flow_matching"

    def __post_init__(self):
        if self.kind != "flow_matching":
            raise ConfigurationError(f"unknown coefficient kind {self.kind!r}")

    def alpha(self, t):
        return 1.0 - np.asarray(t, dtype=np.float64)

    def sigma(self, t):
        return np.asarray(t, dtype=np.float64) + 0.0


@dataclass(frozen=True)
class TimestepGrid:
    """Strictly decreasing timesteps values[0]=t_max ... values[T-1]=t_min."""

    values: np.ndarray
    warp: str = "linear"

    @property
    def num_steps(self) -> int:
        return len(self.values)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.ndim != 1 or len(v) < 1:
            raise ConfigurationError("grid must hold at least one timestep")
        if np.any(v <= 0.0) or np.any(v > 1.0):
            raise ConfigurationError("grid values must lie in (0, 1]")
        if len(v) > 1 and np.any(np.diff(v) >= 0.0):
            raise ConfigurationError("grid values must be strictly decreasing")


def build_schedule(num_steps: int = 25, t_min: float = 1e-3, t_max: float = 1.0,
                   warp: str = "linear", rho: float = 7.0):
    """Construct the (NoiseCoeffs, TimestepGrid) pair for a run.

    warp="linear" spaces timesteps arithmetically from t_max down to t_min.
    warp="karras" spaces them on the rho-warped sigma grid and maps back via
    t = sigma / (sigma + 1); this requires t_max < 1 since the map diverges
    at t=1. With num_steps=1 the grid is the single point [t_max].
    """
    if not (1 <= num_steps <= 10000):
        raise ConfigurationError(f"num_steps must be in [1, 10000], got {num_steps}")
    if not (0.0 < t_min < t_max <= 1.0):
        raise ConfigurationError(
            f"t_min < t_max required with 0 < t_min and t_max <= 1, "
            f"got t_min={t_min}, t_max={t_max}"
        )
    if warp == "linear":
        values = np.linspace(t_max, t_min, num_steps)
    elif warp == "karras":
        if t_max >= 1.0:
            raise ConfigurationError("t_max must be < 1 for the karras warp")
        if rho <= 0:
            raise ConfigurationError(f"rho must be positive, got {rho}")
        s_max = t_max / (1.0 - t_max)
        s_min = t_min / (1.0 - t_min)
        if num_steps == 1:
            sig = np.array([s_max])
        else:
            ramp = np.linspace(0.0, 1.0, num_steps)
            sig = (s_max ** (1 / rho) + ramp * (s_min ** (1 / rho) - s_max ** (1 / rho))) ** rho
        values = sig / (sig + 1.0)
        # endpoints are exact by construction; enforce against rounding
        values[0] = t_max
        if num_steps > 1:
            values[-1] = t_min
    else:
        raise ConfigurationError(f"warp must be 'linear' or 'karras', got {warp!r}")
    return NoiseCoeffs(), TimestepGrid(values=values, warp=warp)


def step_targets(k: int, grid: TimestepGrid):
    """Source and destination timesteps (t_k, t_next) for grid index k.

    k = T-1 is the terminal step, whose destination is exactly 0.
    """
    T = grid.num_steps
    if not (0 <= k <= T - 1):
        raise IndexError(f"grid index {k} out of range for {T} steps")
    t_k = float(grid.values[k])
    t_next = float(grid.values[k + 1]) if k < T - 1 else 0.0
    return t_k, t_next


def denoise_coefficients(k: int, grid: TimestepGrid, coeffs: NoiseCoeffs):
    """Linear-combination weights (c_e, c_x0) for one denoising step.

    The update is e_next = c_e * e_t + c_x0 * e_hat0. Writing c_x0 as
    alpha(t') - alpha(t_k) * c_e keeps the identity
    c_e * alpha(t_k) + c_x0 == alpha(t') exact in floating point and avoids
    the 0/0 at alpha(t_k) = 0.
    """
    t_k, t_next = step_targets(k, grid)
    sig_k = float(coeffs.sigma(t_k))
    if sig_k == 0.0:
        raise ValueError("cannot denoise from t=0 (sigma is zero)")
    c_e = float(coeffs.sigma(t_next)) / sig_k
    c_x0 = float(coeffs.alpha(t_next)) - float(coeffs.alpha(t_k)) * c_e
    return c_e, c_x0


def denoise_step(e_t: np.ndarray, e_hat0: np.ndarray, k: int,
                 grid: TimestepGrid, coeffs: NoiseCoeffs) -> np.ndarray:
    """Move a noisy embedding one timestep down the grid.

    At the terminal index (k = T-1) the weights reduce to (0, 1) and the
    result is exactly e_hat0, i.e. the plain fixed-point update.
    """
    e_t = np.asarray(e_t)
    e_hat0 = np.asarray(e_hat0)
    if e_t.shape != e_hat0.shape:
        raise ValueError(f"embedding shapes differ: {e_t.shape} vs {e_hat0.shape}")
    c_e, c_x0 = denoise_coefficients(k, grid, coeffs)
    if c_e == 0.0:
        return e_hat0.copy()
    return c_e * e_t + c_x0 * e_hat0


def perturb(e_clean: np.ndarray, t: float, eps: np.ndarray,
            coeffs: NoiseCoeffs) -> np.ndarray:
    """Noise a clean embedding: alpha(t) * e_clean + sigma(t) * eps."""
    e_clean = np.asarray(e_clean)
    eps = np.asarray(eps)
    if e_clean.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} does not match {e_clean.shape}")
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"timestep {t} outside [0, 1]")
    return float(coeffs.alpha(t)) * e_clean + float(coeffs.sigma(t)) * eps

"""Path simulation for the regime-modulated diffusion.

Euler draws on a uniform grid, with one counter-based RNG stream per
path so that a path's noise depends only on (seed, path index) and never
on how paths are batched across blocks or workers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from numpy.typing import NDArray

from .errors import ConfigError, NumericalError
from .model import GeneratorSpec, ProblemSpec
from .parallel import RunningMoments, run_blocks

Array = NDArray[np.float64]

# Stream tags: one independent Philox stream per (path, purpose).
TAG_CHAIN = 0
TAG_NOISE = 1
TAG_INNOVATION = 2

# |X| beyond this aborts the simulation rather than overflowing silently.
BLOWUP_LIMIT = 1e8


def path_rng(seed: int, path_index: int, tag: int) -> np.random.Generator:
    """Philox stream keyed by (seed, path, tag); independent across keys."""
    if not 0 <= tag < 4:
        raise ConfigError(f"stream tag must be in 0..3, got {tag}")
    key = np.array([seed, (np.uint64(path_index) << np.uint64(2)) | np.uint64(tag)],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def draw_normals(seed: int, path_indices, tag: int, n_steps: int) -> Array:
    """Standard normals, shape (len(path_indices), n_steps), one stream per path."""
    out = np.empty((len(path_indices), n_steps))
    for row, idx in enumerate(path_indices):
        out[row] = path_rng(seed, int(idx), tag).standard_normal(n_steps)
    return out


def draw_uniforms(seed: int, path_indices, tag: int, n_draws: int) -> Array:
    out = np.empty((len(path_indices), n_draws))
    for row, idx in enumerate(path_indices):
        out[row] = path_rng(seed, int(idx), tag).random(n_draws)
    return out


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < ... < t_N = T."""

    horizon: float
    n_steps: int

    def __post_init__(self):
        if self.horizon <= 0:
            raise ConfigError("horizon must be positive")
        if self.n_steps < 1:
            raise ConfigError("need at least one step")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> Array:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.horizon, self.n_steps * factor)


class CostEstimate(NamedTuple):
    mean: float
    std_error: float
    n_paths: int


@dataclass
class PathBundle:
    """Simulated ensemble on a common grid.

    ``states`` has shape (n_paths, N+1); ``regimes`` the hidden chain as
    integer labels 1..d (same shape); ``controls`` and ``noise`` are the
    per-step values, shape (n_paths, N).
    """

    grid: TimeGrid
    states: Array
    regimes: NDArray[np.int64]
    controls: Array
    noise: Array
    seed: int
    path_offset: int = 0

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def brownian(self) -> Array:
        """Driving Brownian levels per node, W_0 = 0."""
        levels = np.zeros((self.n_paths, self.grid.n_steps + 1))
        np.cumsum(self.noise, axis=1, out=levels[:, 1:])
        return levels

    def to_csv(self, path: str, max_paths: int | None = 32) -> None:
        """Long-format dump: one row per (path, time node)."""
        n = self.n_paths if max_paths is None else min(self.n_paths, max_paths)
        times = self.grid.times
        W = self.brownian
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path", "t", "W", "alpha", "X", "u"])
            for p in range(n):
                for k in range(self.grid.n_steps + 1):
                    u = f"{self.controls[p, k]:.10g}" if k < self.grid.n_steps else ""
                    writer.writerow(
                        [self.path_offset + p, f"{times[k]:.10g}", f"{W[p, k]:.10g}",
                         int(self.regimes[p, k]), f"{self.states[p, k]:.10g}", u]
                    )


# ---------------------------------------------------------------------------
# Chain simulation
# ---------------------------------------------------------------------------


def simulate_chain(
    generator: GeneratorSpec,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    alpha0: int | None = None,
    pi0=None,
    path_offset: int = 0,
) -> NDArray[np.int64]:
    """Sample the hidden chain at the grid nodes, shape (n_paths, N+1).

    The initial regime is either fixed (``alpha0``, label in 1..d) or
    drawn from ``pi0``.  Node-to-node moves use the exact transition
    kernel exp(Q*dt), so the node marginals carry no discretization
    error.  The step constraint dt * max_i(-q_ii) < 0.5 guards against
    grids so coarse that multiple switches per step dominate.

    One uniform per node is consumed from the path's chain stream
    regardless of how the initial regime is set, so overriding alpha0
    does not shift the transition draws.
    """
    q = generator
    if grid.dt * q.max_exit_rate >= 0.5:
        raise ConfigError(
            f"grid too coarse for the chain: dt*max_rate = "
            f"{grid.dt * q.max_exit_rate:.3g} >= 0.5"
        )
    if (alpha0 is None) == (pi0 is None):
        raise ConfigError("give exactly one of alpha0 or pi0")
    P = q.transition_matrix(grid.dt)
    cdf = np.cumsum(P, axis=1)

    indices = range(path_offset, path_offset + n_paths)
    u = draw_uniforms(seed, indices, TAG_CHAIN, grid.n_steps + 1)

    alpha = np.empty((n_paths, grid.n_steps + 1), dtype=np.int64)
    if alpha0 is not None:
        if not 1 <= int(alpha0) <= q.n_states:
            raise ConfigError(f"alpha0 must be a label in 1..{q.n_states}")
        alpha[:, 0] = int(alpha0) - 1
    else:
        pi0_cdf = np.cumsum(np.asarray(pi0, dtype=np.float64))
        alpha[:, 0] = np.searchsorted(pi0_cdf, u[:, 0], side="right")
        np.clip(alpha[:, 0], 0, q.n_states - 1, out=alpha[:, 0])
    for k in range(grid.n_steps):
        row_cdf = cdf[alpha[:, k]]
        nxt = (u[:, k + 1, None] >= row_cdf).sum(axis=1)
        alpha[:, k + 1] = np.minimum(nxt, q.n_states - 1)
    return alpha + 1


def chain_marginal(spec: ProblemSpec, t: float) -> Array:
    """Law of the chain at time t (exact, via the transition kernel)."""
    return spec.generator.marginal(np.asarray(spec.pi0), t)


# ---------------------------------------------------------------------------
# State simulation
# ---------------------------------------------------------------------------


def _controls_from_policy(policy, t, x, pi):
    return np.asarray(policy(t, x, pi), dtype=np.float64)


def simulate_state(
    spec: ProblemSpec,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    policy=None,
    path_offset: int = 0,
    alpha: NDArray[np.int64] | None = None,
    dW: Array | None = None,
    controls: Array | None = None,
) -> PathBundle:
    """Euler scheme with left-endpoint coefficients.

    X_{k+1} = X_k + b(t_k, X_k, alpha_k, u_k) dt + sigma(t_k, X_k, u_k) dW_k.

    ``policy`` is evaluated as policy(t_k, X_k, pi) with pi held at
    pi0[0]; policies that need the filtered state belong in the coupled
    forward loop, not here.  ``alpha``, ``dW`` and ``controls`` override
    the internal draws, which is what grid-coupling tests use.
    """
    if policy is not None and controls is not None:
        raise ConfigError("pass either a policy or explicit controls, not both")
    dt = grid.dt
    sqdt = np.sqrt(dt)

    if alpha is None:
        alpha = simulate_chain(spec.generator, grid, n_paths, seed,
                               pi0=spec.pi0, path_offset=path_offset)
    else:
        alpha = np.asarray(alpha, dtype=np.int64)
        if alpha.shape != (n_paths, grid.n_steps + 1):
            raise ConfigError(
                f"alpha override must have shape {(n_paths, grid.n_steps + 1)}, "
                f"got {alpha.shape}"
            )
    if dW is None:
        indices = range(path_offset, path_offset + n_paths)
        dW = draw_normals(seed, indices, TAG_NOISE, grid.n_steps) * sqdt
    else:
        dW = np.asarray(dW, dtype=np.float64)
        if dW.shape != (n_paths, grid.n_steps):
            raise ConfigError(
                f"dW override must have shape {(n_paths, grid.n_steps)}, got {dW.shape}"
            )
    if controls is not None:
        controls = np.asarray(controls, dtype=np.float64)
        if controls.shape != (n_paths, grid.n_steps):
            raise ConfigError(
                f"controls override must have shape {(n_paths, grid.n_steps)}, "
                f"got {controls.shape}"
            )

    x = np.full(n_paths, spec.x0)
    pi_const = spec.pi0[0]
    states = np.empty((n_paths, grid.n_steps + 1))
    states[:, 0] = x
    used = np.empty((n_paths, grid.n_steps))
    times = grid.times
    n_reg = spec.n_regimes

    for k in range(grid.n_steps):
        t = times[k]
        if controls is not None:
            u = controls[:, k]
        elif policy is not None:
            u = _controls_from_policy(policy, t, x, np.full(n_paths, pi_const))
        else:
            u = np.zeros(n_paths)
        u = spec.clamp_control(u)
        used[:, k] = u

        b = np.empty(n_paths)
        for i in range(1, n_reg + 1):
            mask = alpha[:, k] == i
            if mask.any():
                b[mask] = spec.drift(t, x[mask], i, u[mask])
        sig = np.broadcast_to(
            np.asarray(spec.vol(t, x, u), dtype=np.float64), (n_paths,)
        )
        x = x + b * dt + sig * dW[:, k]
        if not np.all(np.isfinite(x)) or np.any(np.abs(x) > BLOWUP_LIMIT):
            raise NumericalError(
                f"state blow-up at t={times[k + 1]:.4g}: "
                f"max |X| = {np.max(np.abs(x)):.3g}"
            )
        states[:, k + 1] = x

    return PathBundle(
        grid=grid, states=states, regimes=alpha, controls=used,
        noise=dW, seed=seed, path_offset=path_offset,
    )


# ---------------------------------------------------------------------------
# Cost
# ---------------------------------------------------------------------------


def cost_from_paths(spec: ProblemSpec, bundle: PathBundle) -> Array:
    """Per-path realized cost, left-endpoint quadrature for the running part."""
    grid = bundle.grid
    dt = grid.dt
    times = grid.times
    total = np.zeros(bundle.n_paths)
    for k in range(grid.n_steps):
        xk = bundle.states[:, k]
        uk = bundle.controls[:, k]
        for i in range(1, spec.n_regimes + 1):
            mask = bundle.regimes[:, k] == i
            if mask.any():
                total[mask] += dt * np.asarray(
                    spec.running_cost(times[k], xk[mask], i, uk[mask]),
                    dtype=np.float64,
                )
    xT = bundle.states[:, -1]
    for i in range(1, spec.n_regimes + 1):
        mask = bundle.regimes[:, -1] == i
        if mask.any():
            total[mask] += np.asarray(spec.terminal_cost(xT[mask], i), dtype=np.float64)
    return total


def estimate_cost(
    spec: ProblemSpec,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    policy=None,
    block_size: int = 4096,
    workers: int = 1,
) -> CostEstimate:
    """Monte Carlo cost of a policy, blocked so memory stays flat."""

    def run_block(offset: int, count: int) -> RunningMoments:
        bundle = simulate_state(spec, grid, count, seed, policy=policy,
                                path_offset=offset)
        m = RunningMoments()
        m.add(cost_from_paths(spec, bundle))
        return m

    moments = RunningMoments()
    for part in run_blocks(run_block, n_paths, block_size=block_size, workers=workers):
        moments.merge(part)
    return CostEstimate(moments.mean, moments.std_error, n_paths)

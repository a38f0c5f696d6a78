"""Regime filter: conditional law of the hidden chain given the state path.

Two discrete recursions for the same object, kept deliberately separate
so each can check the other:

* the normalized recursion for p_k(i) = P(alpha_k = i | X up to t_k),
  driven by the innovation increments;
* the unnormalized (linear) recursion for masses V_k(i), driven by the
  raw observation increments, with p recovered as V / V(1).

Both use left-endpoint coefficients, matching the Euler scheme of the
state.  A third, structurally different route (exact discrete Bayes
updates) serves as the convergence oracle.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import NDArray

from .errors import ConfigError, NumericalError
from .model import GeneratorSpec, ProblemSpec, eval_sigma
from .pathsim import (
    TAG_INNOVATION,
    TAG_NOISE,
    CostEstimate,
    PathBundle,
    TimeGrid,
    draw_normals,
    simulate_chain,
)

Array = NDArray[np.float64]

# Components may leave [0,1] by O(dt) before projection; excursions past
# this are counted, excursions past BREAKDOWN abort.
EXCURSION_TOL = 1e-6
BREAKDOWN_TOL = 0.5


@dataclass(frozen=True)
class FilterFunctional:
    """Function of the regime, phi: {1..d} -> R, stored as its value table."""

    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.values) < 1:
            raise ConfigError("functional needs at least one regime value")
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    @classmethod
    def from_callable(cls, fn: Callable[[int], float], n_states: int) -> "FilterFunctional":
        return cls(tuple(fn(i) for i in range(1, n_states + 1)))

    @classmethod
    def indicator(cls, regime: int, n_states: int) -> "FilterFunctional":
        return cls(tuple(1.0 if i == regime else 0.0 for i in range(1, n_states + 1)))

    @property
    def array(self) -> Array:
        return np.asarray(self.values)


def apply_generator(generator: GeneratorSpec, phi) -> Array:
    """(Q phi)(i) = sum_j q_ij (phi(j) - phi(i)); rows sum to zero makes
    this a plain matrix-vector product."""
    values = phi.array if isinstance(phi, FilterFunctional) else np.asarray(phi, dtype=np.float64)
    if values.shape[-1] != generator.n_states:
        raise ConfigError(
            f"functional has {values.shape[-1]} values for a "
            f"{generator.n_states}-state generator"
        )
    return values @ generator.matrix.T


@dataclass
class FilterPath:
    """Filter output along an ensemble of state paths.

    ``probs[p, k, i]`` is the conditional probability of regime i+1 at
    node k on path p.  ``nu_increments`` are the innovation increments
    (observation increments minus the filter-predicted drift).  ``V``
    holds the unnormalized indicator masses when the linear recursion
    produced the path, and is None for the normalized recursion.
    """

    grid: TimeGrid
    probs: Array
    nu_increments: Array
    V: Array | None = None
    clamp_events: int = 0
    max_excursion: float = 0.0

    @property
    def n_paths(self) -> int:
        return self.probs.shape[0]

    @property
    def pi(self) -> Array:
        """Conditional probability of regime 1 per node, shape (n_paths, N+1)."""
        return self.probs[:, :, 0]

    @property
    def clamp_fraction(self) -> float:
        total = self.n_paths * self.grid.n_steps
        return self.clamp_events / total if total else 0.0

    def expectation(self, phi) -> Array:
        """E[phi(alpha_k) | observations], shape (n_paths, N+1)."""
        values = phi.array if isinstance(phi, FilterFunctional) else np.asarray(phi, dtype=np.float64)
        return self.probs @ values

    def innovation_qv(self) -> Array:
        """Realized quadratic variation of the innovation per path."""
        return np.sum(self.nu_increments**2, axis=1)

    def diagnostics(self) -> dict:
        return {
            "clamp_count": int(self.clamp_events),
            "max_excursion": float(self.max_excursion),
            "qv_of_innovation": float(np.mean(self.innovation_qv())),
        }

    def to_csv(self, path: str, max_paths: int | None = 32) -> None:
        n = self.n_paths if max_paths is None else min(self.n_paths, max_paths)
        times = self.grid.times
        d = self.probs.shape[2]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path", "t", "pi", "nu_increment"]
                            + [f"V{i}" for i in range(1, d + 1)])
            for p in range(n):
                for k in range(self.grid.n_steps + 1):
                    dnu = f"{self.nu_increments[p, k]:.10g}" if k < self.grid.n_steps else ""
                    if self.V is not None:
                        vcols = [f"{self.V[p, k, i]:.10g}" for i in range(d)]
                    else:
                        vcols = [""] * d
                    writer.writerow(
                        [p, f"{times[k]:.10g}", f"{self.probs[p, k, 0]:.10g}", dnu]
                        + vcols
                    )


def observation_increments(
    spec: ProblemSpec,
    bundle_or_grid,
    states: Array | None = None,
    controls: Array | None = None,
) -> Array:
    """Delta Y_k = Delta X_k / sigma(t_k, X_k, u_k): the state path rescaled
    to unit noise intensity, which is all the filter ever sees.

    Accepts either a PathBundle or an explicit (grid, states, controls)
    triple.
    """
    if states is None:
        bundle: PathBundle = bundle_or_grid
        grid, states, controls = bundle.grid, bundle.states, bundle.controls
    else:
        grid = bundle_or_grid
    states = np.asarray(states, dtype=np.float64)
    controls = np.asarray(controls, dtype=np.float64)
    dY = np.empty_like(controls)
    times = grid.times
    for k in range(grid.n_steps):
        sig = eval_sigma(spec, times[k], states[:, k], controls[:, k])
        dY[:, k] = (states[:, k + 1] - states[:, k]) / sig
    return dY


def _h_table(spec: ProblemSpec, t: float, x: Array, u: Array) -> Array:
    """h_i(t, x, u) for all regimes, shape (n_paths, d)."""
    sig = eval_sigma(spec, t, x, u)
    h = np.empty((x.shape[0], spec.n_regimes))
    for i in range(1, spec.n_regimes + 1):
        h[:, i - 1] = np.asarray(spec.drift(t, x, i, u), dtype=np.float64) / sig
    return h


def _project_simplex(p: Array, excursion_tol: float, breakdown_tol: float):
    """Clip to the simplex; report how far outside the update landed."""
    low = float(p.min())
    high = float(p.max())
    excursion = max(0.0 - low if low < 0 else 0.0, high - 1.0 if high > 1.0 else 0.0)
    if not np.isfinite(p).all() or low < -breakdown_tol or high > 1.0 + breakdown_tol:
        raise NumericalError(
            f"filter state left [{-breakdown_tol}, {1 + breakdown_tol}]: "
            f"range [{low:.4g}, {high:.4g}]"
        )
    events = int(np.any((p < -excursion_tol) | (p > 1.0 + excursion_tol), axis=-1).sum())
    np.clip(p, 0.0, None, out=p)
    total = p.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise NumericalError("filter state collapsed to zero mass")
    p /= total
    return events, excursion


def run_normalized_filter(
    spec: ProblemSpec,
    grid: TimeGrid,
    states: Array,
    controls: Array,
    dY: Array | None = None,
    pi0: Array | None = None,
    excursion_tol: float = EXCURSION_TOL,
    breakdown_tol: float = BREAKDOWN_TOL,
) -> FilterPath:
    """Innovation-driven recursion for the conditional regime law.

    p_{k+1,i} = p_{k,i} + (p_k Q)_i dt + p_{k,i} (h_i - hbar_k) dnu_k,
    dnu_k = dY_k - hbar_k dt, hbar_k = sum_i p_{k,i} h_i.

    Each update is projected back onto the simplex (clip at zero and
    renormalize); the returned path records how often and how far the
    raw update left it.  An excursion beyond ``breakdown_tol`` raises
    ``NumericalError`` instead of being silently repaired.
    """
    states = np.asarray(states, dtype=np.float64)
    controls = np.asarray(controls, dtype=np.float64)
    n_paths, n_nodes = states.shape
    if n_nodes != grid.n_steps + 1:
        raise ConfigError(f"states must have {grid.n_steps + 1} nodes, got {n_nodes}")
    if dY is None:
        dY = observation_increments(spec, grid, states, controls)
    dt = grid.dt
    times = grid.times
    Q = spec.generator.matrix

    p = np.tile(np.asarray(pi0 if pi0 is not None else spec.pi0, dtype=np.float64),
                (n_paths, 1))
    probs = np.empty((n_paths, grid.n_steps + 1, spec.n_regimes))
    probs[:, 0] = p
    dnu = np.empty((n_paths, grid.n_steps))
    events = 0
    worst = 0.0

    for k in range(grid.n_steps):
        h = _h_table(spec, times[k], states[:, k], controls[:, k])
        hbar = np.sum(p * h, axis=1)
        dnu[:, k] = dY[:, k] - hbar * dt
        p = p + (p @ Q) * dt + p * (h - hbar[:, None]) * dnu[:, k, None]
        e, w = _project_simplex(p, excursion_tol, breakdown_tol)
        events += e
        worst = max(worst, w)
        probs[:, k + 1] = p

    return FilterPath(grid=grid, probs=probs, nu_increments=dnu,
                      clamp_events=events, max_excursion=worst)


def run_zakai_filter(
    spec: ProblemSpec,
    grid: TimeGrid,
    states: Array,
    controls: Array,
    dY: Array | None = None,
    pi0: Array | None = None,
) -> FilterPath:
    """Linear (unnormalized) recursion, driven by raw observation increments.

    V_{k+1,i} = V_{k,i} + (V_k Q)_i dt + V_{k,i} h_i dY_k, V_0 = pi0.

    Probabilities are recovered by normalizing; total mass must stay
    strictly positive and finite or the recursion has broken down.
    Innovation increments are still reported, computed from the
    normalized probabilities, so the two filter routes expose the same
    interface.
    """
    states = np.asarray(states, dtype=np.float64)
    controls = np.asarray(controls, dtype=np.float64)
    n_paths, n_nodes = states.shape
    if n_nodes != grid.n_steps + 1:
        raise ConfigError(f"states must have {grid.n_steps + 1} nodes, got {n_nodes}")
    if dY is None:
        dY = observation_increments(spec, grid, states, controls)
    dt = grid.dt
    times = grid.times
    Q = spec.generator.matrix

    V = np.tile(np.asarray(pi0 if pi0 is not None else spec.pi0, dtype=np.float64),
                (n_paths, 1))
    probs = np.empty((n_paths, grid.n_steps + 1, spec.n_regimes))
    masses = np.empty((n_paths, grid.n_steps + 1, spec.n_regimes))
    dnu = np.empty((n_paths, grid.n_steps))
    total = V.sum(axis=1)
    probs[:, 0] = V / total[:, None]
    masses[:, 0] = V

    for k in range(grid.n_steps):
        h = _h_table(spec, times[k], states[:, k], controls[:, k])
        hbar = np.sum(probs[:, k] * h, axis=1)
        dnu[:, k] = dY[:, k] - hbar * dt
        V = V + (V @ Q) * dt + V * h * dY[:, k, None]
        total = V.sum(axis=1)
        if not np.all(np.isfinite(total)) or np.any(total <= 0.0):
            raise NumericalError(
                f"unnormalized filter mass left (0, inf) at t={times[k + 1]:.4g}"
            )
        masses[:, k + 1] = V
        probs[:, k + 1] = np.clip(V / total[:, None], 0.0, None)
        probs[:, k + 1] /= probs[:, k + 1].sum(axis=1, keepdims=True)

    return FilterPath(grid=grid, probs=probs, nu_increments=dnu, V=masses)


# ---------------------------------------------------------------------------
# Forward systems
# ---------------------------------------------------------------------------


@dataclass
class CoupledPath:
    """Physical ensemble together with its filter: the simulation ground
    truth (hidden chain included) plus what an observer of X can know."""

    bundle: PathBundle
    filter_path: FilterPath


def coupled_forward(
    spec: ProblemSpec,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    policy=None,
    path_offset: int = 0,
    controls: Array | None = None,
    dW: Array | None = None,
    alpha: NDArray[np.int64] | None = None,
) -> CoupledPath:
    """Simulate the physical system and filter it in one pass.

    The chain and driving noise are drawn (or taken from the overrides),
    the state advances by Euler, and the filter advances on the realized
    observation increment of the same step.  Policies see the filtered
    probability of regime 1, so (t, x, pi)-feedback is admissible here.
    """
    if policy is not None and controls is not None:
        raise ConfigError("pass either a policy or explicit controls, not both")
    dt = grid.dt
    sqdt = np.sqrt(dt)
    times = grid.times
    Q = spec.generator.matrix

    if alpha is None:
        alpha = simulate_chain(spec.generator, grid, n_paths, seed,
                               pi0=spec.pi0, path_offset=path_offset)
    if dW is None:
        indices = range(path_offset, path_offset + n_paths)
        dW = draw_normals(seed, indices, TAG_NOISE, grid.n_steps) * sqdt

    x = np.full(n_paths, spec.x0)
    p = np.tile(np.asarray(spec.pi0, dtype=np.float64), (n_paths, 1))
    states = np.empty((n_paths, grid.n_steps + 1))
    probs = np.empty((n_paths, grid.n_steps + 1, spec.n_regimes))
    used = np.empty((n_paths, grid.n_steps))
    dnu = np.empty((n_paths, grid.n_steps))
    states[:, 0] = x
    probs[:, 0] = p
    events = 0
    worst = 0.0

    for k in range(grid.n_steps):
        t = times[k]
        if controls is not None:
            u = np.asarray(controls[:, k], dtype=np.float64)
        elif policy is not None:
            u = np.asarray(policy(t, x, p[:, 0]), dtype=np.float64)
        else:
            u = np.zeros(n_paths)
        u = spec.clamp_control(u)
        used[:, k] = u

        sig = eval_sigma(spec, t, x, u)
        b = np.empty(n_paths)
        for i in range(1, spec.n_regimes + 1):
            mask = alpha[:, k] == i
            if mask.any():
                b[mask] = spec.drift(t, x[mask], i, u[mask])
        x_next = x + b * dt + sig * dW[:, k]
        if not np.all(np.isfinite(x_next)) or np.any(np.abs(x_next) > 1e8):
            raise NumericalError(f"state blow-up at t={times[k + 1]:.4g}")

        h = _h_table(spec, t, x, u)
        hbar = np.sum(p * h, axis=1)
        dY = (x_next - x) / sig
        dnu[:, k] = dY - hbar * dt
        p = p + (p @ Q) * dt + p * (h - hbar[:, None]) * dnu[:, k, None]
        e, w = _project_simplex(p, EXCURSION_TOL, BREAKDOWN_TOL)
        events += e
        worst = max(worst, w)

        x = x_next
        states[:, k + 1] = x
        probs[:, k + 1] = p

    bundle = PathBundle(grid=grid, states=states, regimes=alpha, controls=used,
                        noise=dW, seed=seed, path_offset=path_offset)
    fpath = FilterPath(grid=grid, probs=probs, nu_increments=dnu,
                       clamp_events=events, max_excursion=worst)
    return CoupledPath(bundle=bundle, filter_path=fpath)


@dataclass
class InnovationPath:
    """State and filter evolved directly against drawn innovation noise.

    No hidden chain exists here: (X, p) is closed in itself once the
    innovation is treated as an exogenous Brownian motion.  Costs of
    feedback policies agree in law with the physical system, and the
    map (dnu paths) -> (X, p) is deterministic, which is what pathwise
    derivative checks need.
    """

    grid: TimeGrid
    states: Array
    probs: Array
    controls: Array
    dnu: Array
    seed: int
    path_offset: int = 0

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]


def innovation_forward(
    spec: ProblemSpec,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    policy=None,
    path_offset: int = 0,
    controls: Array | None = None,
    dnu: Array | None = None,
) -> InnovationPath:
    """Advance the observer's closed system (X, p) under innovation noise.

    X_{k+1} = X_k + bbar_k dt + sigma_k dnu_k, bbar = sum_i p_i b(i);
    p_{k+1,i} = p_{k,i} + (p_k Q)_i dt + p_{k,i}(h_i - hbar_k) dnu_k.
    """
    if policy is not None and controls is not None:
        raise ConfigError("pass either a policy or explicit controls, not both")
    dt = grid.dt
    sqdt = np.sqrt(dt)
    times = grid.times
    Q = spec.generator.matrix

    if dnu is None:
        indices = range(path_offset, path_offset + n_paths)
        dnu = draw_normals(seed, indices, TAG_INNOVATION, grid.n_steps) * sqdt
    else:
        dnu = np.asarray(dnu, dtype=np.float64)
        if dnu.shape != (n_paths, grid.n_steps):
            raise ConfigError(
                f"dnu override must have shape {(n_paths, grid.n_steps)}, "
                f"got {dnu.shape}"
            )

    x = np.full(n_paths, spec.x0)
    p = np.tile(np.asarray(spec.pi0, dtype=np.float64), (n_paths, 1))
    states = np.empty((n_paths, grid.n_steps + 1))
    probs = np.empty((n_paths, grid.n_steps + 1, spec.n_regimes))
    used = np.empty((n_paths, grid.n_steps))
    states[:, 0] = x
    probs[:, 0] = p

    for k in range(grid.n_steps):
        t = times[k]
        if controls is not None:
            u = np.asarray(controls[:, k], dtype=np.float64)
        elif policy is not None:
            u = np.asarray(policy(t, x, p[:, 0]), dtype=np.float64)
        else:
            u = np.zeros(n_paths)
        u = spec.clamp_control(u)
        used[:, k] = u

        sig = eval_sigma(spec, t, x, u)
        h = _h_table(spec, t, x, u)
        hbar = np.sum(p * h, axis=1)
        bbar = hbar * sig
        x = x + bbar * dt + sig * dnu[:, k]
        if not np.all(np.isfinite(x)) or np.any(np.abs(x) > 1e8):
            raise NumericalError(f"state blow-up at t={times[k + 1]:.4g}")
        p = p + (p @ Q) * dt + p * (h - hbar[:, None]) * dnu[:, k, None]
        _project_simplex(p, EXCURSION_TOL, BREAKDOWN_TOL)
        states[:, k + 1] = x
        probs[:, k + 1] = p

    return InnovationPath(grid=grid, states=states, probs=probs, controls=used,
                          dnu=dnu, seed=seed, path_offset=path_offset)


# ---------------------------------------------------------------------------
# Oracle and transformed cost
# ---------------------------------------------------------------------------


def discrete_bayes_oracle(
    spec: ProblemSpec,
    grid: TimeGrid,
    states: Array,
    controls: Array,
) -> Array:
    """Exact conditional regime law for the discretized generative model.

    Given the Euler transition density Delta X_k | alpha_k = i ~
    N(b_i dt, sigma^2 dt) and the exact node-to-node chain kernel, the
    forward algorithm below is Bayes-exact, so any gap to the filter
    recursions is pure discretization error of those recursions.
    A correction-then-prediction step per node, in log space.
    """
    if grid.dt > 1e-2 + 1e-15:
        raise ConfigError(
            f"oracle requires dt <= 1e-2 (got {grid.dt:.3g}); coarser grids "
            "make the one-step Gaussian likelihood meaningless"
        )
    states = np.asarray(states, dtype=np.float64)
    controls = np.asarray(controls, dtype=np.float64)
    n_paths = states.shape[0]
    dt = grid.dt
    times = grid.times
    P = spec.generator.transition_matrix(dt)
    log_eps = -745.0  # log of the smallest positive double, for zero probs

    p = np.tile(np.asarray(spec.pi0, dtype=np.float64), (n_paths, 1))
    probs = np.empty((n_paths, grid.n_steps + 1, spec.n_regimes))
    probs[:, 0] = p

    for k in range(grid.n_steps):
        t = times[k]
        x = states[:, k]
        u = controls[:, k]
        sig = eval_sigma(spec, t, x, u)
        dx = states[:, k + 1] - x
        with np.errstate(divide="ignore"):
            logp = np.where(p > 0, np.log(np.maximum(p, 1e-300)), log_eps)
        for i in range(1, spec.n_regimes + 1):
            mean = np.asarray(spec.drift(t, x, i, u), dtype=np.float64) * dt
            logp[:, i - 1] += -((dx - mean) ** 2) / (2.0 * sig**2 * dt)
        logp -= logp.max(axis=1, keepdims=True)
        w = np.exp(logp)
        w /= w.sum(axis=1, keepdims=True)
        p = w @ P
        probs[:, k + 1] = p

    return probs


def transformed_cost_paths(
    spec: ProblemSpec,
    grid: TimeGrid,
    states: Array,
    probs: Array,
    controls: Array,
) -> Array:
    """Per-path cost with the regime integrated out against the filter:
    sum_k Fbar(t_k, X_k, p_k, u_k) dt + Gbar(X_N, p_N), where Fbar and
    Gbar average f and g over the filtered regime law."""
    states = np.asarray(states, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    controls = np.asarray(controls, dtype=np.float64)
    dt = grid.dt
    times = grid.times
    total = np.zeros(states.shape[0])
    for k in range(grid.n_steps):
        x = states[:, k]
        u = controls[:, k]
        for i in range(1, spec.n_regimes + 1):
            total += dt * probs[:, k, i - 1] * np.asarray(
                spec.running_cost(times[k], x, i, u), dtype=np.float64
            )
    xT = states[:, -1]
    for i in range(1, spec.n_regimes + 1):
        total += probs[:, -1, i - 1] * np.asarray(
            spec.terminal_cost(xT, i), dtype=np.float64
        )
    return total


def transformed_cost(
    spec: ProblemSpec,
    grid: TimeGrid,
    states: Array,
    probs: Array,
    controls: Array,
):
    """Monte Carlo mean and standard error of the regime-averaged cost."""
    values = transformed_cost_paths(spec, grid, states, probs, controls)
    n = len(values)
    se = float(np.std(values, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return CostEstimate(float(np.mean(values)), se, n)

"""Problem definition: coefficients, costs, regime generator, admissibility.

A control problem is a diffusion whose drift, running cost and terminal
cost switch with a hidden finite-state Markov chain:

    dX_t = b(t, X_t, alpha_t, v_t) dt + sigma(t, X_t, v_t) dW_t
    J(v) = E[ integral_0^T f(t, X_t, alpha_t, v_t) dt + g(X_T, alpha_T) ]

The volatility carries no regime argument (regime-dependent volatility
would make the regime observable from the quadratic variation, a
singular estimation problem this package does not treat).  The
signal-to-noise ratio h = b / sigma drives the regime filter, so a
positive volatility floor is enforced wherever h is evaluated.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import expm

from .errors import ConfigError, DomainError

Array = NDArray[np.float64]

# Central-difference step used everywhere a coefficient derivative is
# needed numerically: step = FD_STEP_REL * max(1, |x|).
FD_STEP_REL = 1e-5


def central_diff(fn: Callable, x, step: float | None = None):
    """Central finite difference of ``fn`` at ``x`` (broadcasts over arrays)."""
    x = np.asarray(x, dtype=np.float64)
    if step is None:
        h = FD_STEP_REL * np.maximum(1.0, np.abs(x))
    else:
        h = np.broadcast_to(np.float64(step), x.shape)
    return (np.asarray(fn(x + h)) - np.asarray(fn(x - h))) / (2.0 * h)


# ---------------------------------------------------------------------------
# Regimes and the chain generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Regime:
    """State of the modulating chain; labels run 1..d."""

    index: int

    def __post_init__(self):
        if self.index < 1:
            raise ConfigError(f"regime index must be >= 1, got {self.index}")


def regime_index(regime) -> int:
    """Accept a ``Regime`` or a plain integer label."""
    idx = regime.index if isinstance(regime, Regime) else int(regime)
    if idx < 1:
        raise ConfigError(f"regime index must be >= 1, got {idx}")
    return idx


@dataclass(frozen=True)
class GeneratorSpec:
    """Rate matrix of the modulating chain.

    Rows sum to zero and off-diagonal entries are non-negative.  Rates of
    zero are accepted (a frozen chain is the natural degenerate test
    case), although the fully ergodic two-state model has both rates
    strictly positive.
    """

    rates: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        q = np.asarray(self.rates, dtype=np.float64)
        if q.ndim != 2 or q.shape[0] != q.shape[1] or q.shape[0] < 1:
            raise ConfigError(f"rate matrix must be square, got shape {q.shape}")
        off = q.copy()
        np.fill_diagonal(off, 0.0)
        if np.any(off < 0):
            raise ConfigError("off-diagonal rates must be non-negative")
        scale = max(1.0, float(np.abs(q).max()))
        if np.any(np.abs(q.sum(axis=1)) > 1e-10 * scale):
            raise ConfigError("rate matrix rows must sum to zero")
        object.__setattr__(self, "rates", tuple(tuple(float(v) for v in row) for row in q))

    @classmethod
    def two_state(cls, lambda1: float, lambda2: float) -> "GeneratorSpec":
        """Two-state generator with rate ``lambda1`` for 1->2 and ``lambda2`` for 2->1."""
        if lambda1 < 0 or lambda2 < 0:
            raise ConfigError("switching rates must be non-negative")
        return cls(((-lambda1, lambda1), (lambda2, -lambda2)))

    @property
    def matrix(self) -> Array:
        return np.asarray(self.rates, dtype=np.float64)

    @property
    def n_states(self) -> int:
        return len(self.rates)

    @property
    def lambda1(self) -> float:
        if self.n_states != 2:
            raise ConfigError("lambda1 is defined for two-state generators only")
        return self.rates[0][1]

    @property
    def lambda2(self) -> float:
        if self.n_states != 2:
            raise ConfigError("lambda2 is defined for two-state generators only")
        return self.rates[1][0]

    @property
    def max_exit_rate(self) -> float:
        return float(np.max(-np.diag(self.matrix)))

    def transition_matrix(self, dt: float) -> Array:
        """exp(Q*dt); closed form for two states, scipy ``expm`` otherwise."""
        if self.n_states == 2:
            lam = self.lambda1 + self.lambda2
            if lam == 0.0:
                return np.eye(2)
            s = self.lambda2 / lam
            e = math.exp(-lam * dt)
            return np.array(
                [
                    [s + (1.0 - s) * e, (1.0 - s) * (1.0 - e)],
                    [s * (1.0 - e), (1.0 - s) + s * e],
                ]
            )
        return expm(self.matrix * dt)

    def marginal(self, p0, t: float) -> Array:
        """Chain marginal law at time t from the initial distribution ``p0``."""
        p0 = np.asarray(p0, dtype=np.float64)
        return p0 @ self.transition_matrix(t)


# ---------------------------------------------------------------------------
# Linear-quadratic tag
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LQSpec:
    """Constants of the linear-quadratic special case.

    Dynamics dX = [a(alpha) X + b(alpha) v] dt + sigma dW with cost
    (1/2) E[ integral (Q(alpha) X^2 + R(alpha) v^2) dt + G(alpha_T) X_T^2 ].
    ``R > 0`` and ``sigma > 0`` are required; ``Q, G >= 0`` keep the cost
    convex so the first-order condition locates a minimiser.
    """

    a: tuple[float, float]
    b: tuple[float, float]
    sigma: float
    Q: tuple[float, float]
    R: tuple[float, float]
    G: tuple[float, float]
    lambda1: float
    lambda2: float
    horizon: float
    x0: float
    pi0: float
    control_domain: tuple[float, float] = (-math.inf, math.inf)

    def __post_init__(self):
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        if min(self.R) <= 0:
            raise ConfigError("control weights R must be positive")
        if min(self.Q) < 0 or min(self.G) < 0:
            raise ConfigError("state weights Q, G must be non-negative")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("switching rates must be non-negative")
        if self.horizon <= 0:
            raise ConfigError("horizon must be positive")
        if not 0.0 <= self.pi0 <= 1.0:
            raise ConfigError("pi0 must lie in [0, 1]")

    def generator(self) -> GeneratorSpec:
        return GeneratorSpec.two_state(self.lambda1, self.lambda2)

    def to_problem_spec(self) -> "ProblemSpec":
        a, b = self.a, self.b
        Q, R, G = self.Q, self.R, self.G

        def drift(t, x, i, v):
            return a[i - 1] * x + b[i - 1] * v

        def vol(t, x, v):
            return self.sigma * np.ones_like(np.asarray(x, dtype=np.float64))

        def running_cost(t, x, i, v):
            return 0.5 * (Q[i - 1] * x**2 + R[i - 1] * v**2)

        def terminal_cost(x, i):
            return 0.5 * G[i - 1] * x**2

        return ProblemSpec(
            horizon=self.horizon,
            x0=self.x0,
            pi0=(self.pi0, 1.0 - self.pi0),
            generator=self.generator(),
            drift=drift,
            vol=vol,
            running_cost=running_cost,
            terminal_cost=terminal_cost,
            control_domain=self.control_domain,
            lq=self,
        )

    def to_json(self) -> dict:
        doc = {
            "a1": self.a[0], "a2": self.a[1],
            "b1": self.b[0], "b2": self.b[1],
            "sigma": self.sigma,
            "Q1": self.Q[0], "Q2": self.Q[1],
            "R1": self.R[0], "R2": self.R[1],
            "G1": self.G[0], "G2": self.G[1],
            "lambda1": self.lambda1, "lambda2": self.lambda2,
            "T": self.horizon, "x0": self.x0, "pi0": self.pi0,
        }
        if math.isfinite(self.control_domain[0]):
            doc["u_lo"] = self.control_domain[0]
        if math.isfinite(self.control_domain[1]):
            doc["u_hi"] = self.control_domain[1]
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "LQSpec":
        required = {"a1", "a2", "b1", "b2", "sigma", "Q1", "Q2", "R1", "R2",
                    "G1", "G2", "lambda1", "lambda2", "T", "x0", "pi0"}
        missing = required - doc.keys()
        if missing:
            raise ConfigError(f"LQ spec document missing keys: {sorted(missing)}")

        def num(key: str, default: float | None = None) -> float:
            value = doc.get(key, default)
            try:
                return float(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(
                    f"LQ spec field {key} must be a number, got {value!r}"
                ) from exc

        kwargs = {}
        if "u_lo" in doc or "u_hi" in doc:
            kwargs["control_domain"] = (num("u_lo", -math.inf),
                                        num("u_hi", math.inf))
        return cls(
            a=(num("a1"), num("a2")),
            b=(num("b1"), num("b2")),
            sigma=num("sigma"),
            Q=(num("Q1"), num("Q2")),
            R=(num("R1"), num("R2")),
            G=(num("G1"), num("G2")),
            lambda1=num("lambda1"),
            lambda2=num("lambda2"),
            horizon=num("T"),
            x0=num("x0"),
            pi0=num("pi0"),
            **kwargs,
        )


# ---------------------------------------------------------------------------
# Problem spec
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProblemSpec:
    """Full control problem: coefficients, costs, generator, admissibility.

    Coefficient callables must be pure and broadcast over numpy arrays in
    their ``x`` and ``v`` arguments (``t`` scalar, regime label ``i`` a
    plain integer in 1..d).  All types here are immutable and safe to
    share across workers.

    Parameters
    ----------
    horizon : float
        Terminal time T > 0.
    x0 : float
        Initial diffusion state.
    pi0 : tuple of float
        Initial regime distribution (any point of the simplex; a vertex
        encodes a known initial regime).
    generator : GeneratorSpec
        Rate matrix of the hidden chain.
    drift, vol, running_cost, terminal_cost : callables
        b(t, x, i, v), sigma(t, x, v), f(t, x, i, v), g(x, i).
    control_domain : (float, float)
        Closed interval of admissible control values; infinite ends allowed.
    lipschitz_bound : float
        Declared Lipschitz constant for admissible feedback policies.
    sigma_min : float
        Volatility floor; h = b/sigma raises ``DomainError`` below it.
    lq : LQSpec, optional
        Tag carrying the constants when the problem is linear-quadratic;
        analytic derivatives and the explicit control formula are only
        available for tagged specs.
    """

    horizon: float
    x0: float
    pi0: tuple[float, ...]
    generator: GeneratorSpec
    drift: Callable
    vol: Callable
    running_cost: Callable
    terminal_cost: Callable
    control_domain: tuple[float, float] = (-math.inf, math.inf)
    lipschitz_bound: float = 10.0
    sigma_min: float = 1e-8
    lq: LQSpec | None = None

    def __post_init__(self):
        if self.horizon <= 0:
            raise ConfigError("horizon must be positive")
        if self.sigma_min <= 0:
            raise ConfigError("sigma_min must be positive")
        if self.lipschitz_bound <= 0:
            raise ConfigError("lipschitz_bound must be positive")
        pi0 = np.asarray(self.pi0, dtype=np.float64)
        if pi0.ndim != 1 or len(pi0) != self.generator.n_states:
            raise ConfigError("pi0 length must match the number of regimes")
        if np.any(pi0 < 0) or abs(pi0.sum() - 1.0) > 1e-10:
            raise ConfigError("pi0 must be a probability vector")
        object.__setattr__(self, "pi0", tuple(float(p) for p in pi0 / pi0.sum()))
        lo, hi = self.control_domain
        if not lo < hi:
            raise ConfigError("control_domain must be a non-degenerate interval")

    @property
    def n_regimes(self) -> int:
        return self.generator.n_states

    def clamp_control(self, u):
        lo, hi = self.control_domain
        return np.clip(u, lo, hi)

    def with_lq(self, lq: LQSpec | None) -> "ProblemSpec":
        return replace(self, lq=lq)


def eval_sigma(spec: ProblemSpec, t, x, v) -> Array:
    """Volatility with the floor enforced."""
    sig = np.asarray(spec.vol(t, x, v), dtype=np.float64)
    if np.any(sig < spec.sigma_min) or not np.all(np.isfinite(sig)):
        raise DomainError(
            f"volatility fell below the floor {spec.sigma_min} "
            f"(min observed {np.min(sig)})"
        )
    return sig


def eval_h(spec: ProblemSpec, t, x, regime, v):
    """Signal-to-noise ratio h(t, x, i, v) = b(t, x, i, v) / sigma(t, x, v)."""
    i = regime_index(regime)
    sig = eval_sigma(spec, t, x, v)
    return np.asarray(spec.drift(t, x, i, v), dtype=np.float64) / sig


# ---------------------------------------------------------------------------
# Standing-assumption validation (sampling, reporting only)
# ---------------------------------------------------------------------------


def _lattice(lo: float, hi: float, n: int) -> Array:
    return np.linspace(lo, hi, n)


def validate_spec(
    spec: ProblemSpec,
    *,
    growth_constant: float = 1e6,
    deriv_bound: float = 1e4,
    lattice_shape: tuple[int, int, int] = (11, 11, 11),
    x_range: tuple[float, float] = (-10.0, 10.0),
) -> list[str]:
    """Sample the coefficients on a (t, x, v) lattice and report violations.

    Checks, by finite differences where derivatives are involved:

    * smoothness/boundedness of the x- and v-derivatives of b, sigma
      (flagged when a sampled derivative exceeds ``deriv_bound``);
    * quadratic growth of f, g and linear growth of their derivatives
      against ``growth_constant`` (the default is large enough to disable
      the check; pass a finite budget to make it bite);
    * the volatility floor on the lattice;
    * volatility independence of the regime (structural here: the
      ``vol`` callable takes no regime argument).

    Purely reporting; an empty list means no sampled violation.
    """
    violations: list[str] = []
    K = growth_constant
    nt, nx, nv = lattice_shape
    ts = _lattice(0.0, spec.horizon, nt)
    xs = _lattice(*x_range, nx)
    lo, hi = spec.control_domain
    vs = _lattice(max(lo, -10.0), min(hi, 10.0), nv)
    regimes = range(1, spec.n_regimes + 1)

    tt, xx, vv = np.meshgrid(ts, xs, vs, indexing="ij")
    tt, xx, vv = tt.ravel(), xx.ravel(), vv.ravel()

    def fd_x(fn):
        return central_diff(lambda z: fn(tt, z, vv), xx)

    def fd_v(fn):
        return central_diff(lambda z: fn(tt, xx, z), vv)

    sig = np.asarray(spec.vol(tt, xx, vv), dtype=np.float64)
    if np.any(sig < spec.sigma_min):
        k = int(np.argmin(sig))
        violations.append(
            f"A4: sigma={sig[k]:.3g} at (t={tt[k]:.3g}, x={xx[k]:.3g}, "
            f"v={vv[k]:.3g}) is below the floor {spec.sigma_min:.3g}"
        )
    else:
        for grad, name in ((fd_x(spec.vol), "sigma_x"), (fd_v(spec.vol), "sigma_v")):
            if np.any(np.abs(grad) > deriv_bound):
                violations.append(
                    f"A1: |{name}| reaches {np.max(np.abs(grad)):.3g} "
                    f"(bound {deriv_bound:.3g})"
                )

    for i in regimes:
        b_i = lambda t, x, v, i=i: np.asarray(spec.drift(t, x, i, v), dtype=np.float64)
        for grad, name in ((fd_x(b_i), f"b_x(i={i})"), (fd_v(b_i), f"b_v(i={i})")):
            if np.any(np.abs(grad) > deriv_bound):
                violations.append(
                    f"A1: |{name}| reaches {np.max(np.abs(grad)):.3g} "
                    f"(bound {deriv_bound:.3g})"
                )

        f_i = lambda t, x, v, i=i: np.asarray(spec.running_cost(t, x, i, v), dtype=np.float64)
        fv = f_i(tt, xx, vv)
        if np.any(np.abs(fv) > K * (1 + xx**2 + vv**2)):
            violations.append(f"A2: |f(.,.,{i},.)| exceeds K(1+x^2+v^2) with K={K:.3g}")
        for grad, name in ((fd_x(f_i), "f_x"), (fd_v(f_i), "f_v")):
            if np.any(np.abs(grad) > K * (1 + np.abs(xx) + np.abs(vv))):
                violations.append(
                    f"A2: |{name}(.,.,{i},.)| exceeds K(1+|x|+|v|) with K={K:.3g}"
                )

        gv = np.asarray(spec.terminal_cost(xs, i), dtype=np.float64)
        if np.any(np.abs(gv) > K * (1 + xs**2)):
            violations.append(f"A2: |g(.,{i})| exceeds K(1+x^2) with K={K:.3g}")
        g_x = central_diff(lambda z, i=i: np.asarray(spec.terminal_cost(z, i), dtype=np.float64), xs)
        if np.any(np.abs(g_x) > K * (1 + np.abs(xs))):
            violations.append(f"A2: |g_x(.,{i})| exceeds K(1+|x|) with K={K:.3g}")

    return violations


# ---------------------------------------------------------------------------
# Feedback policies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeedbackPolicy:
    """Measurable feedback map (t, x, pi) -> u, clamped to the control domain.

    ``pi`` is the filtered probability of regime 1, which is adapted to
    the observation filtration, so feedback in (t, x, pi) stays
    admissible.  ``func`` must broadcast over arrays in x and pi.
    """

    func: Callable
    control_domain: tuple[float, float] = (-math.inf, math.inf)
    lipschitz_bound: float = 10.0
    name: str = ""

    def __call__(self, t, x, pi):
        u = np.asarray(self.func(t, x, pi), dtype=np.float64)
        lo, hi = self.control_domain
        return np.clip(u, lo, hi)

    def check_lipschitz(
        self,
        rng: np.random.Generator,
        n_samples: int = 10_000,
        x_range: tuple[float, float] = (-10.0, 10.0),
        horizon: float = 1.0,
    ) -> float:
        """Largest sampled ratio |u(t,x,pi)-u(t,y,rho)| / (|x-y| + |pi-rho|)."""
        t = rng.uniform(0.0, horizon, n_samples)
        x = rng.uniform(*x_range, size=(2, n_samples))
        p = rng.uniform(0.0, 1.0, size=(2, n_samples))
        num = np.abs(self(t, x[0], p[0]) - self(t, x[1], p[1]))
        den = np.abs(x[0] - x[1]) + np.abs(p[0] - p[1])
        mask = den > 1e-12
        return float(np.max(num[mask] / den[mask]))


def constant_policy(value: float, control_domain=(-math.inf, math.inf)) -> FeedbackPolicy:
    return FeedbackPolicy(
        func=lambda t, x, pi: np.full_like(np.asarray(x, dtype=np.float64), value),
        control_domain=control_domain,
        lipschitz_bound=1e-12,
        name=f"constant({value})",
    )


def zero_policy(control_domain=(-math.inf, math.inf)) -> FeedbackPolicy:
    return constant_policy(0.0, control_domain)


# ---------------------------------------------------------------------------
# JSON round trip
# ---------------------------------------------------------------------------


def spec_to_json(spec: ProblemSpec) -> dict:
    """Serialize a problem spec.  Only LQ-tagged specs round-trip: general
    coefficient callables are opaque."""
    if spec.lq is None:
        raise ConfigError(
            "only LQ-tagged specs serialize to JSON; general coefficient "
            "callables have no document form"
        )
    return spec.lq.to_json()


def spec_from_json(doc: dict) -> ProblemSpec:
    return LQSpec.from_json(doc).to_problem_spec()


def load_spec(path: str) -> ProblemSpec:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(
                    f"spec file {path} is not valid JSON: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read spec file {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"spec file {path} must hold a JSON object")
    return spec_from_json(doc)

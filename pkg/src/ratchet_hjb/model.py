"""Problem instances: coefficients, horizon, control bounds.

A model instance is a pair (ProblemSpec, CoefficientSet).  Coefficient
callables are vectorized numpy functions with the state carried in a
trailing axis of length N:

    drift(t, x, c)         -> array of shape batch + (N,)
    diffusion(t, x, c)     -> array of shape batch + (N, m)
    running_cost(t, x, c)  -> array of shape batch
    terminal_cost(x)       -> array of shape batch

where ``batch = x.shape[:-1]`` and ``t``/``c`` broadcast against it.
Evaluation is pure and reentrant, so callers may evaluate from any
number of workers without synchronization.

Built-in registry (control level c lives in (c_lower, c_upper]):

    CONSTANT     b = sigma = f = 0, H(x) = x
    LINEAR_RATE  b = 0, sigma = sigma0, f = c,         H = 0
    PAYOUT       b = 0, sigma = sigma0, f = -c,        H = 0
    TRACKING     b = mu0, sigma = sigma0, f = (x-c)^2, H = 0
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, NamedTuple, Optional

import numpy as np

from .errors import InvalidModelError, ParameterError, UnknownModelError


@dataclass(frozen=True)
class ProblemSpec:
    """Horizon, control bounds and dimensions of one problem instance."""

    horizon_T: float
    c_lower: float
    c_upper: float
    state_dim_N: int = 1
    noise_dim_m: int = 1

    def __post_init__(self):
        if not np.isfinite(self.horizon_T) or self.horizon_T <= 0:
            raise ParameterError(f"horizon_T must be positive, got {self.horizon_T}")
        if not (np.isfinite(self.c_lower) and np.isfinite(self.c_upper)):
            raise ParameterError("control bounds must be finite")
        if self.c_lower >= self.c_upper:
            raise ParameterError(
                f"c_lower must be < c_upper, got [{self.c_lower}, {self.c_upper}]"
            )
        if self.state_dim_N < 1 or self.noise_dim_m < 1:
            raise ParameterError("state and noise dimensions must be >= 1")


@dataclass(frozen=True)
class CoefficientSet:
    """Evaluable drift b, diffusion sigma, running cost f and terminal cost H."""

    drift: Callable[..., np.ndarray]
    diffusion: Callable[..., np.ndarray]
    running_cost: Callable[..., np.ndarray]
    terminal_cost: Callable[..., np.ndarray]


@dataclass(frozen=True)
class RegularityConstants:
    """Empirical Lipschitz/Hoelder constants of a coefficient set.

    ``kappa_prime`` is always the derived value min(holder_kappa, 1/2).
    """

    lipschitz_K: float
    holder_kappa: float
    kappa_prime: float = field(init=False)

    def __post_init__(self):
        if self.lipschitz_K <= 0:
            raise ParameterError("lipschitz_K must be > 0")
        if not (0 < self.holder_kappa <= 1):
            raise ParameterError("holder_kappa must lie in (0, 1]")
        object.__setattr__(self, "kappa_prime", min(self.holder_kappa, 0.5))


@dataclass(frozen=True)
class ModelId:
    """Registered model name plus named real parameters."""

    name: str
    parameters: Mapping[str, float] = field(default_factory=dict)


class Model(NamedTuple):
    spec: ProblemSpec
    coeffs: CoefficientSet


def _batch(x):
    return np.shape(x)[:-1]


def _build_constant(spec: ProblemSpec) -> CoefficientSet:
    m = spec.noise_dim_m
    return CoefficientSet(
        drift=lambda t, x, c: np.zeros(np.shape(x)),
        diffusion=lambda t, x, c: np.zeros(np.shape(x) + (m,)),
        running_cost=lambda t, x, c: np.zeros(_batch(x)),
        terminal_cost=lambda x: np.asarray(x, dtype=float)[..., 0],
    )


def _build_linear_rate(spec: ProblemSpec, sigma0: float = 1.0) -> CoefficientSet:
    _check_range("sigma0", sigma0, low=0.0)
    m = spec.noise_dim_m
    return CoefficientSet(
        drift=lambda t, x, c: np.zeros(np.shape(x)),
        diffusion=lambda t, x, c: np.full(np.shape(x) + (m,), float(sigma0)),
        running_cost=lambda t, x, c: np.zeros(_batch(x)) + c,
        terminal_cost=lambda x: np.zeros(_batch(x)),
    )


def _build_payout(spec: ProblemSpec, sigma0: float = 1.0) -> CoefficientSet:
    _check_range("sigma0", sigma0, low=0.0)
    m = spec.noise_dim_m
    return CoefficientSet(
        drift=lambda t, x, c: np.zeros(np.shape(x)),
        diffusion=lambda t, x, c: np.full(np.shape(x) + (m,), float(sigma0)),
        running_cost=lambda t, x, c: np.zeros(_batch(x)) - c,
        terminal_cost=lambda x: np.zeros(_batch(x)),
    )


def _build_tracking(
    spec: ProblemSpec, mu0: float = 0.5, sigma0: float = 1.0
) -> CoefficientSet:
    _check_range("mu0", mu0, low=-100.0, high=100.0)
    _check_range("sigma0", sigma0, low=0.0)
    m = spec.noise_dim_m
    return CoefficientSet(
        drift=lambda t, x, c: np.full(np.shape(x), float(mu0)),
        diffusion=lambda t, x, c: np.full(np.shape(x) + (m,), float(sigma0)),
        running_cost=lambda t, x, c: (np.asarray(x, dtype=float)[..., 0] - c) ** 2,
        terminal_cost=lambda x: np.zeros(_batch(x)),
    )


def _check_range(name, value, low=None, high=None):
    if not np.isfinite(value):
        raise ParameterError(f"{name} must be finite, got {value}")
    if low is not None and value < low:
        raise ParameterError(f"{name} must be >= {low}, got {value}")
    if high is not None and value > high:
        raise ParameterError(f"{name} must be <= {high}, got {value}")


_REGISTRY = {
    "CONSTANT": (_build_constant, ()),
    "LINEAR_RATE": (_build_linear_rate, ("sigma0",)),
    "PAYOUT": (_build_payout, ("sigma0",)),
    "TRACKING": (_build_tracking, ("mu0", "sigma0")),
}

_PROBLEM_DEFAULTS = {"T": 1.0, "c_lower": 0.0, "c_upper": 1.0}


def registered_models():
    return sorted(_REGISTRY)


def build_model(model_id: ModelId) -> Model:
    """Resolve a ModelId into a fully evaluable (ProblemSpec, CoefficientSet).

    ``parameters`` may carry the problem fields T, c_lower, c_upper
    (defaults 1.0, 0.0, 1.0) alongside the model-specific parameters.
    Unknown names and out-of-range parameters are rejected here, before
    any computation.
    """
    if model_id.name not in _REGISTRY:
        raise UnknownModelError(
            f"unknown model {model_id.name!r}; registered: {registered_models()}"
        )
    builder, accepted = _REGISTRY[model_id.name]
    params = {k: float(v) for k, v in dict(model_id.parameters).items()}

    problem = {k: params.pop(k, v) for k, v in _PROBLEM_DEFAULTS.items()}
    spec = ProblemSpec(problem["T"], problem["c_lower"], problem["c_upper"])

    unknown = set(params) - set(accepted)
    if unknown:
        raise ParameterError(
            f"model {model_id.name} does not accept parameters {sorted(unknown)}"
        )
    return Model(spec, builder(spec, **params))


def make_model(name: str, **parameters) -> Model:
    return build_model(ModelId(name, parameters))


def closed_form_value(model_id: ModelId) -> Optional[Callable]:
    """Exact value function V(t, x, c) for the built-ins that admit one.

    CONSTANT:    V = x                (zero cost, martingale terminal value)
    LINEAR_RATE: V = c (T - t)        (optimal control freezes at c)
    PAYOUT:      V = -c_upper (T - t) (optimal control jumps to c_upper)

    Returns None when no closed form is registered (e.g. TRACKING).
    """
    spec, _ = build_model(model_id)
    T, c_up = spec.horizon_T, spec.c_upper

    def _constant(t, x, c):
        t, x, c = np.broadcast_arrays(t, x, c)
        return np.asarray(x, dtype=float).copy()

    def _linear_rate(t, x, c):
        t, x, c = np.broadcast_arrays(t, x, c)
        return np.asarray(c, dtype=float) * (T - np.asarray(t, dtype=float))

    def _payout(t, x, c):
        t, x, c = np.broadcast_arrays(t, x, c)
        return -c_up * (T - np.asarray(t, dtype=float))

    forms = {"CONSTANT": _constant, "LINEAR_RATE": _linear_rate, "PAYOUT": _payout}
    return forms.get(model_id.name)


def regularity_sample_pairs(
    spec: ProblemSpec, samples: int, x_radius: float = 10.0, seed: int = 0
):
    """Sample-pair battery used by estimate_regularity.

    Returns arrays (t, x, x_hat, c, c_hat), each of length
    n_anchors + samples.  The battery starts with a fixed set of anchor
    pairs (box corners and near-degenerate separations, so documented
    worst-case quotients are always probed) followed by a seeded uniform
    stream drawn row-wise: a larger ``samples`` count extends the set
    without disturbing its prefix.
    """
    if samples < 2:
        raise ParameterError("samples must be >= 2")
    R = float(x_radius)
    if not np.isfinite(R) or R <= 0:
        raise ParameterError("x_radius must be positive and finite")
    cl, cu = spec.c_lower, spec.c_upper
    span = cu - cl
    eps_x = 1e-3 * R

    anchors = []
    # x-direction probes at the corners and the center, both control ends.
    for x0 in (-R, 0.0, R):
        x1 = x0 + eps_x if x0 <= 0 else x0 - eps_x
        for cc in (cl, cu):
            anchors.append((0.0, x0, x1, cc, cc))
    # c-direction probes: full span plus near-degenerate separations that
    # expose any blow-up of too-large a Hoelder exponent.
    for x0 in (0.0, -R, R):
        anchors.append((0.0, x0, x0, cl, cu))
        anchors.append((0.0, x0, x0, cl + 0.5 * span, cl + 0.5 * span + 1e-8 * span))
        anchors.append((0.0, x0, x0, cl + 1e-6 * span, cl + 2e-6 * span))
    anchors = np.array(anchors, dtype=float)

    rng = np.random.default_rng(seed)
    u = rng.uniform(size=(samples, 5))
    rand = np.column_stack(
        [
            u[:, 0] * spec.horizon_T,
            (2 * u[:, 1] - 1) * R,
            (2 * u[:, 2] - 1) * R,
            cl + u[:, 3] * span,
            cl + u[:, 4] * span,
        ]
    )
    pts = np.vstack([anchors, rand])
    return pts[:, 0], pts[:, 1], pts[:, 2], pts[:, 3], pts[:, 4]


def _coefficient_stack(coeffs: CoefficientSet, t, x, c):
    """Evaluate (b, sigma, f) at stacked scalar points; returns flat arrays."""
    xN = np.asarray(x, dtype=float)[:, None]
    n = xN.shape[0]
    b = np.broadcast_to(coeffs.drift(t, xN, c), (n, xN.shape[1])).astype(float)
    sig = np.asarray(coeffs.diffusion(t, xN, c), dtype=float)
    sig = np.broadcast_to(sig, (n,) + sig.shape[-2:]).reshape(n, -1)
    f = np.broadcast_to(coeffs.running_cost(t, xN, c), (n,)).astype(float)
    for arr in (b, sig, f):
        if not np.all(np.isfinite(arr)):
            raise InvalidModelError(
                "coefficient evaluation produced a non-finite value"
            )
    return b, sig, f


KAPPA_LADDER = (1.0, 0.5, 0.25)


def estimate_regularity(
    model: Model,
    samples: int = 200,
    x_radius: float = 10.0,
    seed: int = 0,
    quotient_ceiling: float = 100.0,
) -> RegularityConstants:
    """Fit empirical (K, kappa) for the coefficients b, sigma, f.

    Difference quotients |phi(t,x,c) - phi(t,x^,c^)| over the mixed
    modulus |x-x^| + (1+|x|+|x^|)|c-c^|^kappa are scanned on the sample
    battery.  kappa is the largest ladder exponent in {1, 1/2, 1/4}
    whose worst quotient stays below ``quotient_ceiling``; fitting a
    continuous exponent from noisy quotients would be ill-posed.  The
    returned K dominates every sampled quotient and every growth ratio
    |phi| / (1 + |x|).
    """
    spec, coeffs = model
    t, x, x_hat, c, c_hat = regularity_sample_pairs(spec, samples, x_radius, seed)

    b0, s0, f0 = _coefficient_stack(coeffs, t, x, c)
    b1, s1, f1 = _coefficient_stack(coeffs, t, x_hat, c_hat)
    diffs = np.stack(
        [
            np.linalg.norm(b0 - b1, axis=1),
            np.linalg.norm(s0 - s1, axis=1),
            np.abs(f0 - f1),
        ]
    )
    mags = np.stack(
        [np.linalg.norm(b0, axis=1), np.linalg.norm(s0, axis=1), np.abs(f0)]
    )
    growth = float(np.max(mags / (1.0 + np.abs(x))))

    kappa_fit, q_fit = KAPPA_LADDER[-1], np.inf
    for kappa in KAPPA_LADDER:
        denom = np.abs(x - x_hat) + (1 + np.abs(x) + np.abs(x_hat)) * np.abs(
            c - c_hat
        ) ** kappa
        ok = denom > 0
        q = float(np.max(diffs[:, ok] / denom[ok])) if np.any(ok) else 0.0
        kappa_fit, q_fit = kappa, q
        if q <= quotient_ceiling:
            break
    K = max(q_fit, growth, 1e-6)
    return RegularityConstants(lipschitz_K=K, holder_kappa=kappa_fit)

"""Numerical primitives: incomplete gamma, adaptive quadrature, logistic IRLS, seeded streams.

Everything here is pure and reentrant. Array arguments broadcast the way numpy
ufuncs do.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import linalg
from scipy.special import gammaln

from .errors import DomainError, NumericError, RankError, SeparationError

_EPS = 1e-16
_TINY = 1e-300
_MAX_ITER = 2000

SEPARATION_COEF = 1e4
# Linear predictor beyond which fitted probabilities are numerically 0 or 1.
SEPARATION_ETA = 15.0


# ---------------------------------------------------------------------------
# Incomplete gamma
# ---------------------------------------------------------------------------


def _lower_series(a, x):
    """P(a, x) by its power series; accurate for x < a + 1."""
    ap = a.copy()
    term = 1.0 / a
    total = term.copy()
    active = np.ones(a.shape, dtype=bool)
    for _ in range(_MAX_ITER):
        ap = ap + 1.0
        term = np.where(active, term * x / ap, 0.0)
        total = total + term
        active &= np.abs(term) > np.abs(total) * _EPS
        if not active.any():
            break
    else:
        raise NumericError("incomplete gamma series failed to converge")
    log_pref = -x + a * np.log(x) - gammaln(a)
    return total * np.exp(log_pref)


def _upper_cfrac(a, x):
    """Q(a, x) by modified Lentz continued fraction; accurate for x >= a + 1."""
    b = x + 1.0 - a
    c = np.full(a.shape, 1.0 / _TINY)
    d = 1.0 / b
    h = d.copy()
    active = np.ones(a.shape, dtype=bool)
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b = b + 2.0
        d = an * d + b
        d = np.where(np.abs(d) < _TINY, _TINY, d)
        c = b + an / c
        c = np.where(np.abs(c) < _TINY, _TINY, c)
        d = 1.0 / d
        delta = d * c
        h = np.where(active, h * delta, h)
        active &= np.abs(delta - 1.0) > _EPS
        if not active.any():
            break
    else:
        raise NumericError("incomplete gamma continued fraction failed to converge")
    log_pref = -x + a * np.log(x) - gammaln(a)
    return np.exp(log_pref) * h


def reg_lower_gamma(a, x):
    """Regularized lower incomplete gamma function P(a, x).

    Uses the power series below ``x = a + 1`` and the continued fraction for the
    upper function above it. Scalars in give a float out.
    """
    a_arr, x_arr = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(x, dtype=float))
    if not (np.all(np.isfinite(a_arr)) and np.all(np.isfinite(x_arr))):
        raise DomainError("reg_lower_gamma requires finite arguments")
    if np.any(a_arr <= 0):
        raise DomainError("reg_lower_gamma requires a > 0")
    if np.any(x_arr < 0):
        raise DomainError("reg_lower_gamma requires x >= 0")

    out = np.zeros(a_arr.shape)
    pos = x_arr > 0
    series = pos & (x_arr < a_arr + 1.0)
    cfrac = pos & ~series
    if series.any():
        out[series] = _lower_series(a_arr[series], x_arr[series])
    if cfrac.any():
        out[cfrac] = 1.0 - _upper_cfrac(a_arr[cfrac], x_arr[cfrac])
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class GammaParams:
    """Shape and rate (per year) of a gamma distribution."""

    shape: float
    rate: float

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0):
            raise DomainError(f"gamma shape and rate must be positive, got {self.shape}, {self.rate}")

    @property
    def mean(self) -> float:
        return self.shape / self.rate


def gamma_cdf(u, params: GammaParams):
    """CDF of Gamma(shape, rate) at duration ``u`` (years)."""
    u_arr = np.asarray(u, dtype=float)
    if np.any(u_arr < 0):
        raise DomainError("gamma_cdf requires u >= 0")
    return reg_lower_gamma(params.shape, params.rate * u_arr)


# ---------------------------------------------------------------------------
# Quadrature
# ---------------------------------------------------------------------------

# Gauss-Kronrod 7/15 nodes and weights on [-1, 1].
_XGK = np.array([
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
])
_WGK = np.array([
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
])
_WG = np.array([
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
])
_NODES = np.concatenate([-_XGK[:-1], _XGK[::-1]])
_KWEIGHTS = np.concatenate([_WGK[:-1], _WGK[::-1]])
# Gauss nodes sit at odd positions of _XGK.
_GWEIGHTS = np.zeros(15)
_GWEIGHTS[[1, 3, 5, 7, 9, 11, 13]] = np.concatenate([_WG[:-1], _WG[::-1]])


def _eval(f, xs):
    try:
        ys = np.asarray(f(xs), dtype=float)
        if ys.shape != xs.shape:
            ys = np.broadcast_to(ys, xs.shape).astype(float)
    except (TypeError, ValueError):
        ys = np.array([float(f(float(x))) for x in xs])
    bad = ~np.isfinite(ys)
    if bad.any():
        raise NumericError(f"integrand is not finite at x={xs[bad][0]!r}")
    return ys


def _gk15(f, a, b):
    mid = 0.5 * (a + b)
    half = 0.5 * (b - a)
    ys = _eval(f, mid + half * _NODES)
    kron = half * np.dot(_KWEIGHTS, ys)
    gauss = half * np.dot(_GWEIGHTS, ys)
    return kron, abs(kron - gauss)


def integrate(f: Callable, a: float, b: float, tol: float = 1e-9, points: Sequence[float] = (),
              max_intervals: int = 2000) -> float:
    """Adaptive Gauss-Kronrod (7/15) quadrature of ``f`` over ``[a, b]``.

    ``f`` may be vectorized (called with an array of abscissae) or scalar.
    ``points`` are interior breakpoints where ``f`` is not smooth.
    """
    if not (math.isfinite(a) and math.isfinite(b)):
        raise DomainError("integration limits must be finite")
    if a > b:
        raise DomainError(f"integrate requires a <= b, got [{a}, {b}]")
    if a == b:
        return 0.0
    edges = [a] + sorted(p for p in points if a < p < b) + [b]
    intervals = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        val, err = _gk15(f, lo, hi)
        intervals.append((err, lo, hi, val))
    while True:
        total_err = sum(iv[0] for iv in intervals)
        if total_err <= tol:
            break
        if len(intervals) >= max_intervals:
            raise NumericError(f"quadrature did not reach tolerance {tol} (error estimate {total_err:.3g})")
        intervals.sort(key=lambda iv: iv[0])
        _, lo, hi, _ = intervals.pop()
        mid = 0.5 * (lo + hi)
        for l, h in ((lo, mid), (mid, hi)):
            val, err = _gk15(f, l, h)
            intervals.append((err, l, h, val))
    return float(math.fsum(iv[3] for iv in intervals))


# ---------------------------------------------------------------------------
# Logistic regression by IRLS
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LogisticModel:
    coefficients: np.ndarray
    feature_names: tuple = ()
    converged: bool = True
    iterations: int = 0
    score_norm: float = 0.0
    loglik: float = float("nan")

    def __post_init__(self):
        if len(self.coefficients) != len(self.feature_names) + 1:
            raise ValueError("coefficient count must equal feature count + 1")


def expit(eta):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(eta, dtype=float)))


def _loglik(eta, y, w):
    # log(1 + exp(eta)) computed stably
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))


def _collinear_columns(xw, names):
    _, r, piv = linalg.qr(xw, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > diag[0] * 1e-10)) if diag.size and diag[0] > 0 else 0
    return [names[i] for i in piv[rank:]]


def _still_moving(A, w, y, eta) -> bool:
    # At a finite maximizer a further Newton step barely moves eta; under
    # separation each step keeps pushing the separated points outward.
    mu = expit(eta)
    v = w * mu * (1.0 - mu)
    H = (A * v[:, None]).T @ A
    step = np.linalg.lstsq(H, A.T @ (w * (y - mu)), rcond=None)[0]
    return bool(np.max(np.abs(A @ step)) > 0.5)


def logistic_fit(features, labels, offset_weights=None, feature_names: Sequence[str] | None = None,
                 tol: float = 1e-8, max_iter: int = 100, start=None) -> LogisticModel:
    """Weighted binomial maximum likelihood by iteratively reweighted least squares.

    An intercept column is prepended to ``features``. Steps that lower the
    log-likelihood are halved (up to 20 times). Raises ``SeparationError`` when
    the coefficients diverge and ``RankError`` when the weighted design is
    singular. ``start`` optionally warm-starts the coefficients.
    """
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, k = X.shape
    y = np.asarray(labels, dtype=float)
    if y.shape != (n,):
        raise DomainError("labels must be a vector matching the feature rows")
    w = np.ones(n) if offset_weights is None else np.asarray(offset_weights, dtype=float)
    if w.shape != (n,) or np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise DomainError("offset weights must be a positive finite vector")
    if not np.all(np.isfinite(X)):
        raise DomainError("features must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise DomainError("labels must be binary")
    if w.sum() <= k + 1:
        raise DomainError(f"need more than {k + 1} observations, got {w.sum():g}")
    if not (np.any(y == 1) and np.any(y == 0)):
        raise SeparationError("labels contain a single class")

    names = tuple(feature_names) if feature_names is not None else tuple(f"x{i}" for i in range(k))
    if len(names) != k:
        raise DomainError("feature_names length does not match feature columns")
    A = np.column_stack([np.ones(n), X])
    all_names = ("(intercept)",) + names

    sw = np.sqrt(w)
    if np.linalg.matrix_rank(A * sw[:, None]) < k + 1:
        raise RankError("design matrix is rank deficient; collinear columns: "
                        + ", ".join(_collinear_columns(A * sw[:, None], all_names)),
                        _collinear_columns(A * sw[:, None], all_names))

    beta = np.zeros(k + 1)
    eta = A @ beta
    ll = _loglik(eta, y, w)
    if start is not None:
        b0 = np.asarray(start, dtype=float)
        if b0.shape == beta.shape and np.all(np.isfinite(b0)):
            ll0 = _loglik(A @ b0, y, w)
            if ll0 > ll:
                beta, eta, ll = b0, A @ b0, ll0
    converged = False
    it = 0
    score = A.T @ (w * (y - expit(eta)))
    for it in range(1, max_iter + 1):
        mu = expit(eta)
        score = A.T @ (w * (y - mu))
        if np.max(np.abs(score)) <= tol:
            converged = True
            it -= 1
            break
        v = w * mu * (1.0 - mu)
        H = (A * v[:, None]).T @ A
        try:
            step = np.linalg.solve(H, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, score, rcond=None)[0]
        for _ in range(21):
            cand = beta + step
            eta_c = A @ cand
            ll_c = _loglik(eta_c, y, w)
            if ll_c >= ll - 1e-12 * abs(ll):
                break
            step = step / 2.0
        if not np.all(np.isfinite(cand)):
            raise NumericError("IRLS produced non-finite coefficients")
        beta, eta, ll = cand, eta_c, ll_c
        if np.max(np.abs(beta)) > SEPARATION_COEF:
            raise SeparationError(f"coefficients diverged past {SEPARATION_COEF:g}")
        if np.max(np.abs(step)) < 1e-15 * max(1.0, np.max(np.abs(beta))):
            score = A.T @ (w * (y - expit(eta)))
            converged = bool(np.max(np.abs(score)) <= tol)
            break
    else:
        score = A.T @ (w * (y - expit(eta)))
        converged = bool(np.max(np.abs(score)) <= tol)

    if np.max(np.abs(eta)) > SEPARATION_ETA and _still_moving(A, w, y, eta):
        raise SeparationError("fitted probabilities are numerically 0 or 1 (separated data)")
    return LogisticModel(coefficients=beta, feature_names=names, converged=converged,
                         iterations=it, score_norm=float(np.max(np.abs(score))), loglik=ll)


def logistic_predict(model: LogisticModel, x):
    """Inverse-logit of the linear predictor for one feature vector or a matrix of rows."""
    x = np.asarray(x, dtype=float)
    k = len(model.feature_names)
    if x.shape[-1:] != (k,) and not (k == 0 and x.size == 0):
        raise DomainError(f"expected {k} features, got shape {x.shape}")
    if k == 0:
        eta = np.full(x.shape[:-1] if x.ndim > 1 else (), model.coefficients[0])
    else:
        eta = model.coefficients[0] + x @ model.coefficients[1:]
    p = expit(eta)
    return float(p) if np.ndim(p) == 0 else p


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngStream:
    """Counter-based (Philox) random stream keyed by ``(seed, stream_id)``.

    Equal keys give identical sequences on any host; distinct ``stream_id``
    values give independent streams without coordination.
    """

    seed: int
    stream_id: int = 0
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        key = ((self.seed & _MASK64) << 64) | (self.stream_id & _MASK64)
        object.__setattr__(self, "_gen", np.random.Generator(np.random.Philox(key=key)))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def substream(self, index: int) -> "RngStream":
        """Independent child stream, e.g. one per bootstrap round or subtype."""
        mixed = (self.stream_id * 0x9E3779B97F4A7C15 + index + 1) & _MASK64
        return RngStream(self.seed ^ 0xD1B54A32D192ED03, mixed)

    def uniform(self, size=None):
        return self._gen.random(size)

"""Reference profiles of normal embeddings and Gamma-quantile decisions.

A reference holds the mean and (regularised) covariance of the train
embeddings plus a Gamma distribution fitted to the train distances under the
chosen metric. Test distances above the Gamma quantile ``q`` are anomalous.

The Euclidean variable is the *squared* distance ``||x - m||^2`` while the
Mahalanobis variable is the square root of the quadratic form; each metric
gets its own Gamma fit so the two conventions never mix.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import special

from .errors import (
    DegenerateSample,
    DimensionMismatch,
    EmptyInput,
    QOutOfRange,
    SingularCovariance,
    TooFewEmbeddings,
    TooFewSamples,
)

logger = logging.getLogger(__name__)

METRICS = ("euclidean", "mahalanobis")
REDUCERS = ("mean", "max")
COV_REG = 1e-3
MIN_GAMMA_SAMPLES = 10
ZERO_CLAMP = 1e-12


@dataclass(frozen=True)
class GammaParams:
    shape: float
    scale: float

    def __post_init__(self):
        for v in (self.shape, self.scale):
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"Gamma parameters must be finite and positive: {self}")

    @property
    def mean(self) -> float:
        return self.shape * self.scale


@dataclass(frozen=True)
class ReferenceModel:
    mean: np.ndarray
    cov: np.ndarray
    inv_cov: np.ndarray
    metric: str
    gamma: GammaParams | None
    epsilon: float = 0.0
    provenance: str = ""

    @property
    def dim(self) -> int:
        return self.mean.size

    def distance(self, x) -> float:
        if self.metric == "euclidean":
            return euclidean_distance(x, self.mean)
        return mahalanobis_distance(x, self)

    def distances(self, xs) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        if xs.shape[1] != self.dim:
            raise DimensionMismatch(f"embeddings of dim {xs.shape[1]} vs reference dim {self.dim}")
        diff = xs - self.mean
        if self.metric == "euclidean":
            return np.einsum("ij,ij->i", diff, diff)
        q = np.einsum("ij,jk,ik->i", diff, self.inv_cov, diff)
        return np.sqrt(np.maximum(q, 0.0))

    def to_json(self) -> str:
        return json.dumps({
            "metric": self.metric,
            "mean": self.mean.tolist(),
            "covariance": self.cov.tolist(),
            "epsilon": self.epsilon,
            "gamma": None if self.gamma is None else asdict(self.gamma),
            "embedding_dim": self.dim,
            "provenance": self.provenance,
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ReferenceModel":
        d = json.loads(text)
        cov = np.asarray(d["covariance"], dtype=np.float64)
        mean = np.asarray(d["mean"], dtype=np.float64)
        if cov.shape != (mean.size, mean.size) or mean.size != d["embedding_dim"]:
            raise DimensionMismatch("reference file has inconsistent dimensions")
        return cls(mean, cov, regularised_inverse(cov, d["epsilon"]), d["metric"],
                   GammaParams(**d["gamma"]) if d["gamma"] else None, d["epsilon"], d.get("provenance", ""))


def _pair(x, m):
    x = np.asarray(x, dtype=np.float64).ravel()
    m = np.asarray(m, dtype=np.float64).ravel()
    if x.shape != m.shape:
        raise DimensionMismatch(f"dimensions differ: {x.size} vs {m.size}")
    return x, m


def euclidean_distance(x, m) -> float:
    """Squared Euclidean distance ``||x - m||^2``."""
    x, m = _pair(x, m)
    d = x - m
    return float(d @ d)


def mahalanobis_distance(x, ref: ReferenceModel) -> float:
    """``sqrt((x - m)^T S^-1 (x - m))`` with the reference's regularised inverse."""
    x, m = _pair(x, ref.mean)
    d = x - m
    return float(math.sqrt(max(d @ ref.inv_cov @ d, 0.0)))


def regularised_inverse(cov: np.ndarray, epsilon: float) -> np.ndarray:
    """Inverse of ``cov + epsilon * I`` via Cholesky; raises if not positive definite."""
    a = cov + epsilon * np.eye(len(cov))
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise SingularCovariance(
            f"covariance + {epsilon:g} I is not positive definite") from None
    inv_l = np.linalg.solve(chol, np.eye(len(cov)))
    inv = inv_l.T @ inv_l
    return (inv + inv.T) / 2


def fit_reference(embeddings, metric: str = "mahalanobis", reg: float = COV_REG,
                  provenance: str = "") -> ReferenceModel:
    """Mean, covariance and Gamma fit over the train embeddings.

    The inverse is taken of ``S + eps I`` with ``eps = reg * trace(S) / d``;
    ``reg=0`` disables the regularisation. If the train distances cannot
    support a Gamma fit (too few, or all equal) the reference is still built,
    with ``gamma=None`` and a warning; it can score but not decide.
    """
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}")
    x = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    n, d = x.shape
    if n < 2:
        raise TooFewEmbeddings(f"need at least 2 embeddings, got {n}")
    if metric == "mahalanobis" and n < d + 1:
        logger.warning("only %d embeddings for a %d-dim covariance; relying on regularisation", n, d)
    mean = x.mean(axis=0)
    cov = np.cov(x, rowvar=False, ddof=1).reshape(d, d)
    cov = (cov + cov.T) / 2
    eps = reg * float(np.trace(cov)) / d
    if reg > 0 and eps == 0:
        eps = reg  # all embeddings identical
    inv = regularised_inverse(cov, eps) if metric == "mahalanobis" else np.eye(d)
    partial = ReferenceModel(mean, cov, inv, metric, None, eps, provenance)
    try:
        gamma = fit_gamma(partial.distances(x))
    except (TooFewSamples, DegenerateSample) as exc:
        logger.warning("reference has no Gamma fit: %s", exc)
        gamma = None
    return ReferenceModel(mean, cov, inv, metric, gamma, eps, provenance)


def fit_gamma(distances) -> GammaParams:
    """Maximum-likelihood Gamma fit.

    Solves ``log k - digamma(k) = log(mean) - mean(log x)`` by Newton's method
    from Minka's closed-form start; falls back to moments if Newton has not
    converged after 50 iterations.
    """
    x = np.asarray(distances, dtype=np.float64).ravel()
    if x.size < MIN_GAMMA_SAMPLES:
        raise TooFewSamples(f"need at least {MIN_GAMMA_SAMPLES} distances, got {x.size}")
    if np.any(~np.isfinite(x)) or np.any(x < 0):
        raise ValueError("distances must be finite and non-negative")
    if np.any(x == 0):
        logger.warning("clamping %d zero distances to %g", int(np.sum(x == 0)), ZERO_CLAMP)
        x = np.maximum(x, ZERO_CLAMP)
    mean = x.mean()
    var = x.var()
    if var <= 1e-12 * mean * mean:
        raise DegenerateSample("distances have zero variance")
    s = math.log(mean) - np.log(x).mean()
    if s <= 0:  # only possible through rounding of a near-constant sample
        raise DegenerateSample("distances too concentrated for a Gamma fit")
    k = (3 - s + math.sqrt((s - 3) ** 2 + 24 * s)) / (12 * s)
    for _ in range(50):
        f = math.log(k) - special.digamma(k) - s
        fp = 1 / k - special.polygamma(1, k)
        step = f / fp
        k_new = k - step
        if k_new <= 0:
            k_new = k / 2
        if abs(k_new - k) <= 1e-12 * k:
            k = k_new
            break
        k = k_new
    else:
        logger.warning("Gamma MLE did not converge; using method of moments")
        k = mean * mean / var
    return GammaParams(float(k), float(mean / k))


def gamma_cdf(x, params: GammaParams):
    return special.gammainc(params.shape, np.asarray(x, dtype=np.float64) / params.scale)


def gamma_quantile(params: GammaParams, q: float, tol: float = 1e-10) -> float:
    """Inverse CDF by safeguarded Newton on the regularised incomplete gamma.

    Iterates until the step is below ``tol`` in absolute terms *and* below
    1e-14 relative to the iterate, so tiny quantiles (small shape) are still
    resolved to full precision.
    """
    if not 0 < q < 1:
        raise QOutOfRange(f"quantile level must lie in (0, 1), got {q}")
    k = params.shape
    # bracket in standard units (scale 1)
    lo, hi = 0.0, max(1.0, k)
    while special.gammainc(k, hi) < q:
        lo, hi = hi, hi * 2
    x = k if lo < k < hi else (lo + hi) / 2
    abs_tol = tol / params.scale
    for _ in range(500):
        f = special.gammainc(k, x) - q
        if f == 0:
            break
        if f > 0:
            hi = x
        else:
            lo = x
        # log-density keeps the Newton step stable for large k
        logpdf = (k - 1) * math.log(x) - x - special.gammaln(k) if x > 0 else -math.inf
        dens = math.exp(logpdf) if logpdf > -700 else 0.0
        nx = x - f / dens if dens > 0 else (lo + hi) / 2
        if not lo < nx < hi:
            nx = (lo + hi) / 2
        step = abs(nx - x)
        x = nx
        if step <= abs_tol and step <= 1e-14 * x:
            break
        if hi - lo <= 4 * np.spacing(hi):
            break
    return float(x * params.scale)


def score_clip(segment_embeddings, ref: ReferenceModel, reducer: str = "mean") -> float:
    """Clip score: segment distances under the reference metric, reduced."""
    e = np.asarray(segment_embeddings, dtype=np.float64)
    if e.size == 0:
        raise EmptyInput("no segment embeddings to score")
    d = ref.distances(e)
    if reducer == "mean":
        return float(d.mean())
    if reducer == "max":
        return float(d.max())
    raise ValueError(f"reducer must be one of {REDUCERS}")


@dataclass(frozen=True)
class AnomalyScore:
    clip: object
    score: float
    decision: str
    threshold_used: float


def decide(score: float, ref: ReferenceModel, q: float = 0.9, clip=None) -> AnomalyScore:
    """Anomalous iff ``score`` strictly exceeds the Gamma ``q``-quantile."""
    if ref.gamma is None:
        raise DegenerateSample("reference has no Gamma fit to threshold against")
    thr = gamma_quantile(ref.gamma, q)
    return AnomalyScore(clip, float(score), "anomaly" if score > thr else "normal", thr)

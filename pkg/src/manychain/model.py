"""Sparse Bayesian logistic regression target and its unconstrained form.

The model places Gamma(shape, rate) priors on a global scale tau and
per-feature scales lamb, a standard normal prior on raw weights beta, and a
Bernoulli likelihood on logits x @ (tau * lamb * beta). Sampling happens in
an unconstrained vector

    z = [u_tau, u_lamb (D entries), beta (D entries)],  P = 1 + 2D

with tau = exp(u_tau), lamb = exp(u_lamb) and the log-det-Jacobian
u_tau + sum(u_lamb) folded into the unconstrained density.

All density code is batched: a state is either a (P,) vector or a (C, P)
matrix of C chain states, and results come back scalar or (C,) to match.
Bernoulli terms are always evaluated in logit space through the stable
softplus -logaddexp(0, -sign * logit), never through probabilities.

log_prob_ratio computes log p(z_new) - log p(z_old) by differencing the two
states per prior term and per observation BEFORE summing. In single
precision this sidesteps the catastrophic loss that hits the naive
difference of two large totals once |log density| crosses 2**24.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, gammaln

from .prng import RandomKey, normal, split, uniform

_LOG_2PI = math.log(2.0 * math.pi)


class DatasetError(ValueError):
    """Raised for malformed dataset files or invalid dataset arrays."""


@dataclass
class Dataset:
    """Design matrix x (N, D), binary labels y (N,), feature names.

    true_coef is only populated by the synthetic generator, for checking
    recovery; loaders leave it None.
    """

    x: np.ndarray
    y: np.ndarray
    feature_names: list[str] = field(default_factory=list)
    true_coef: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.ndim != 2:
            raise DatasetError(f"x must be 2-dimensional, got shape {self.x.shape}")
        n, d = self.x.shape
        if n < 1 or d < 1:
            raise DatasetError(f"need at least one row and one feature, got {self.x.shape}")
        if self.y.shape != (n,):
            raise DatasetError(f"y must have shape ({n},), got {self.y.shape}")
        if not np.all(np.isfinite(self.x)):
            raise DatasetError("x contains non-finite values")
        if not np.all((self.y == 0.0) | (self.y == 1.0)):
            raise DatasetError("labels must be 0 or 1")
        if not self.feature_names:
            self.feature_names = [f"f{j}" for j in range(d)]

    @property
    def num_rows(self) -> int:
        return self.x.shape[0]

    @property
    def num_features(self) -> int:
        return self.x.shape[1]


@dataclass
class ConstrainedParams:
    """Model parameters on their natural scales."""

    tau: np.ndarray
    lamb: np.ndarray
    beta: np.ndarray


def load_csv_dataset(path, standardize: bool = True) -> Dataset:
    """Load a dataset from CSV: header row, feature columns, last column label.

    Errors carry 1-based row and column positions. By default features are
    standardized (centered, scaled by population std); constant columns
    become all zeros rather than dividing by zero.
    """
    try:
        fh = open(path, newline="")
    except OSError as e:
        raise DatasetError(f"cannot open dataset file {path}: {e}") from e
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: file is empty, expected a header row") from None
        ncol = len(header)
        if ncol < 2:
            raise DatasetError(f"{path}: need at least one feature column and a label column")
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != ncol:
                raise DatasetError(
                    f"{path}: row {lineno}: expected {ncol} columns, found {len(row)}"
                )
            vals = []
            for colno, cell in enumerate(row, start=1):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DatasetError(
                        f"{path}: row {lineno}, column {colno}: "
                        f"could not parse {cell!r} as a number"
                    ) from None
            if not all(math.isfinite(v) for v in vals):
                raise DatasetError(f"{path}: row {lineno}: non-finite value")
            if vals[-1] not in (0.0, 1.0):
                raise DatasetError(
                    f"{path}: row {lineno}: label must be 0 or 1, got {row[-1]!r}"
                )
            rows.append(vals[:-1])
            labels.append(vals[-1])
    if not rows:
        raise DatasetError(f"{path}: no data rows after the header")
    x = np.array(rows, dtype=np.float64)
    y = np.array(labels, dtype=np.float64)
    if standardize:
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        x = x - mean
        nz = std > 0.0
        x[:, nz] /= std[nz]
    return Dataset(x, y, feature_names=[h.strip() for h in header[:-1]])


def generate_synthetic(
    key: RandomKey, num_rows: int, num_features: int, sparsity: float
) -> Dataset:
    """Draw a synthetic classification dataset from the model family.

    Features are iid standard normal. ceil(sparsity * num_features) true
    coefficients are +-2 on a random support, the rest zero; labels are
    Bernoulli draws from the implied logits. Deterministic in key.
    """
    if num_rows < 1 or num_features < 1:
        raise ValueError("num_rows and num_features must be positive")
    if not (0.0 <= sparsity <= 1.0):
        raise ValueError(f"sparsity must be in [0, 1], got {sparsity}")
    k_x, k_support, k_sign, k_label = split(key, 4)
    x = normal(k_x, [num_rows, num_features])
    nnz = math.ceil(sparsity * num_features)
    order = np.argsort(uniform(k_support, [num_features]), kind="stable")
    coef = np.zeros(num_features)
    if nnz > 0:
        signs = np.where(np.asarray(uniform(k_sign, [nnz])) < 0.5, -2.0, 2.0)
        coef[order[:nnz]] = signs
    p = expit(x @ coef)
    y = (np.asarray(uniform(k_label, [num_rows])) < p).astype(np.float64)
    return Dataset(x, y, true_coef=coef)


def replicate_dataset(dataset: Dataset, k: int) -> Dataset:
    """Stack k copies of every row. Used to push log densities to magnitudes
    where single precision visibly breaks."""
    if k < 1:
        raise ValueError(f"replication factor must be >= 1, got {k}")
    return Dataset(
        np.tile(dataset.x, (k, 1)),
        np.tile(dataset.y, k),
        feature_names=list(dataset.feature_names),
        true_coef=dataset.true_coef,
    )


def constrain(z) -> tuple[ConstrainedParams, np.ndarray]:
    """Map unconstrained z to natural parameters plus log-det-Jacobian.

    Works on a (P,) state or a (C, P) batch; P must be odd (1 + 2D).
    """
    z = np.asarray(z, dtype=np.float64)
    zb, single = _as_batch(z)
    d = _num_features_from_dim(zb.shape[1])
    u_tau, u_lamb, beta = zb[:, 0], zb[:, 1 : 1 + d], zb[:, 1 + d :]
    tau = np.exp(u_tau)
    lamb = np.exp(u_lamb)
    ldj = u_tau + u_lamb.sum(axis=1)
    if single:
        return ConstrainedParams(tau[0], lamb[0], beta[0]), ldj[0]
    return ConstrainedParams(tau, lamb, beta), ldj


def _num_features_from_dim(p: int) -> int:
    if p < 3 or p % 2 == 0:
        raise ValueError(f"state dimension must be odd and >= 3, got {p}")
    return (p - 1) // 2


def _as_batch(z) -> tuple[np.ndarray, bool]:
    if z.ndim == 1:
        return z[None, :], True
    if z.ndim == 2:
        return z, False
    raise ValueError(f"state must be 1- or 2-dimensional, got shape {z.shape}")


def _bernoulli_terms(logits, sign):
    # log p(y | logit) in logit space, branch-free: -softplus(-sign*logit).
    return -np.logaddexp(np.zeros((), dtype=logits.dtype), -sign * logits)


class ModelTarget:
    """Sparse logistic regression posterior over the unconstrained state.

    precision selects the arithmetic width of every density and gradient
    evaluation ("double" or "single"). Data are stored at that width.
    """

    def __init__(
        self,
        dataset: Dataset,
        prior_gamma_shape: float = 0.5,
        prior_gamma_rate: float = 0.5,
        precision: str = "double",
    ):
        if prior_gamma_shape <= 0 or prior_gamma_rate <= 0:
            raise ValueError("gamma prior shape and rate must be positive")
        if precision not in ("single", "double"):
            raise ValueError(f"precision must be 'single' or 'double', got {precision!r}")
        self.dataset = dataset
        self.prior_gamma_shape = float(prior_gamma_shape)
        self.prior_gamma_rate = float(prior_gamma_rate)
        self.precision = precision
        self.dtype = np.float32 if precision == "single" else np.float64
        self._x = np.ascontiguousarray(dataset.x, dtype=self.dtype)
        self._sign = np.ascontiguousarray(2.0 * dataset.y - 1.0, dtype=self.dtype)
        self._y = np.ascontiguousarray(dataset.y, dtype=self.dtype)
        # log normalizer of the Gamma prior, one rounding into working dtype
        self._gamma_const = self.dtype(
            prior_gamma_shape * math.log(prior_gamma_rate) - gammaln(prior_gamma_shape)
        )
        self._normal_const = self.dtype(-0.5 * _LOG_2PI)

    @property
    def dim(self) -> int:
        return 1 + 2 * self.dataset.num_features

    @property
    def num_features(self) -> int:
        return self.dataset.num_features

    def param_names(self) -> list[str]:
        d = self.dataset.num_features
        return ["u_tau"] + [f"u_lamb_{j}" for j in range(d)] + [f"beta_{j}" for j in range(d)]

    def _split_state(self, zb):
        d = self.dataset.num_features
        if zb.shape[1] != self.dim:
            raise ValueError(f"state must have {self.dim} entries, got {zb.shape[1]}")
        return zb[:, 0], zb[:, 1 : 1 + d], zb[:, 1 + d :]

    def _prior_terms(self, zb):
        """Per-coordinate unconstrained prior terms, Jacobian included.

        Gamma(a, r) on v = exp(u) plus the du contribution collapses to
        a*log r - lgamma(a) + a*u - r*exp(u), which stays -inf (never NaN or
        +inf) as u walks off either end of the line.
        """
        u_tau, u_lamb, beta = self._split_state(zb)
        a = self.dtype(self.prior_gamma_shape)
        r = self.dtype(self.prior_gamma_rate)
        with np.errstate(over="ignore"):
            t_tau = self._gamma_const + a * u_tau - r * np.exp(u_tau)
            t_lamb = self._gamma_const + a * u_lamb - r * np.exp(u_lamb)
        t_beta = self._normal_const - self.dtype(0.5) * beta * beta
        return t_tau, t_lamb, t_beta

    def _logits(self, zb):
        u_tau, u_lamb, beta = self._split_state(zb)
        # overflow to inf is fine: an overflowed scale is dead by prior and
        # the caller masks the whole state
        with np.errstate(over="ignore", invalid="ignore"):
            scale = np.exp(u_tau[:, None] + u_lamb)  # tau * lamb in one exp
            coefs = scale * beta
            return coefs @ self._x.T, scale, coefs

    def _terms(self, zb):
        t_tau, t_lamb, t_beta = self._prior_terms(zb)
        logits, _, _ = self._logits(zb)
        t_obs = _bernoulli_terms(logits, self._sign)
        return t_tau, t_lamb, t_beta, t_obs

    def log_prob(self, z):
        """Unconstrained log density (prior + likelihood + log-det-Jacobian)."""
        zb, single = self._prepare(z)
        out = self._log_prob_batch(zb)
        return out[0] if single else out

    def _log_prob_batch(self, zb):
        t_tau, t_lamb, t_beta, t_obs = self._terms(zb)
        prior = t_tau + t_lamb.sum(axis=1) + t_beta.sum(axis=1)
        total = prior + t_obs.sum(axis=1)
        # a scale that overflowed exp() is dead by prior; never report NaN
        return np.where(np.isfinite(prior), total, self.dtype(-np.inf))

    def value_and_grad(self, z):
        """Log density and its analytic gradient, one shared evaluation.

        The value is computed through exactly the same operations as
        log_prob, so the two agree bit for bit.
        """
        zb, single = self._prepare(z)
        u_tau, u_lamb, beta = self._split_state(zb)
        a = self.dtype(self.prior_gamma_shape)
        r = self.dtype(self.prior_gamma_rate)

        with np.errstate(over="ignore", invalid="ignore"):
            t_tau = self._gamma_const + a * u_tau - r * np.exp(u_tau)
            t_lamb = self._gamma_const + a * u_lamb - r * np.exp(u_lamb)
            t_beta = self._normal_const - self.dtype(0.5) * beta * beta
            logits, scale, coefs = self._logits(zb)
            t_obs = _bernoulli_terms(logits, self._sign)
            prior = t_tau + t_lamb.sum(axis=1) + t_beta.sum(axis=1)
            value = np.where(
                np.isfinite(prior),
                prior + t_obs.sum(axis=1),
                self.dtype(-np.inf),
            )

            resid = self._y - expit(logits)  # (C, N)
            g = resid @ self._x  # (C, D)
            grad = np.empty_like(zb)
            grad[:, 0] = (a - r * np.exp(u_tau)) + (coefs * g).sum(axis=1)
            grad[:, 1 : 1 + self.num_features] = (a - r * np.exp(u_lamb)) + coefs * g
            grad[:, 1 + self.num_features :] = -beta + scale * g
        if single:
            return value[0], grad[0]
        return value, grad

    def log_prob_ratio(self, z_new, z_old):
        """log p(z_new) - log p(z_old), differenced term by term.

        Every prior coordinate and every observation is subtracted between
        the two states before anything is summed, so the small true ratio is
        never recovered from two large, independently rounded totals. The
        ratio of a state with itself is exactly 0.0.
        """
        zn, single_n = self._prepare(z_new)
        zo, single_o = self._prepare(z_old)
        if zn.shape != zo.shape:
            raise ValueError(f"state shapes differ: {zn.shape} vs {zo.shape}")
        tn_tau, tn_lamb, tn_beta, tn_obs = self._terms(zn)
        to_tau, to_lamb, to_beta, to_obs = self._terms(zo)
        # inf - inf between two dead states is masked right below
        with np.errstate(invalid="ignore"):
            ratio = (
                (tn_tau - to_tau)
                + (tn_lamb - to_lamb).sum(axis=1)
                + (tn_beta - to_beta).sum(axis=1)
                + (tn_obs - to_obs).sum(axis=1)
            )
        prior_n = tn_tau + tn_lamb.sum(axis=1)
        prior_o = to_tau + to_lamb.sum(axis=1)
        dead_n = ~np.isfinite(prior_n)
        dead_o = ~np.isfinite(prior_o)
        ratio = np.where(dead_n, self.dtype(-np.inf), ratio)
        ratio = np.where(dead_o & ~dead_n, self.dtype(np.inf), ratio)
        return ratio[0] if (single_n and single_o) else ratio

    def _prepare(self, z):
        z = np.asarray(z, dtype=self.dtype)
        if not np.all(np.isfinite(z)):
            raise ValueError("state contains non-finite entries")
        return _as_batch(z)


def joint_log_prob(target: ModelTarget, params: ConstrainedParams):
    """Log joint density at natural-scale parameters (no Jacobian term).

    Reference constrained-space evaluation: Gamma priors on tau and lamb,
    standard normal on beta, logit-space Bernoulli likelihood.
    """
    tau = np.asarray(params.tau, dtype=target.dtype)
    lamb = np.asarray(params.lamb, dtype=target.dtype)
    beta = np.asarray(params.beta, dtype=target.dtype)
    single = lamb.ndim == 1
    if single:
        tau, lamb, beta = tau[None], lamb[None, :], beta[None, :]
    if np.any(tau <= 0) or np.any(lamb <= 0):
        raise ValueError("tau and lamb must be strictly positive")
    a = target.dtype(target.prior_gamma_shape)
    r = target.dtype(target.prior_gamma_rate)
    one = target.dtype(1.0)
    t_tau = target._gamma_const + (a - one) * np.log(tau) - r * tau
    t_lamb = target._gamma_const + (a - one) * np.log(lamb) - r * lamb
    t_beta = target._normal_const - target.dtype(0.5) * beta * beta
    coefs = tau[:, None] * lamb * beta
    logits = coefs @ target._x.T
    t_obs = _bernoulli_terms(logits, target._sign)
    total = t_tau + t_lamb.sum(axis=1) + t_beta.sum(axis=1) + t_obs.sum(axis=1)
    return total[0] if single else total


def unconstrained_log_prob(target: ModelTarget, z):
    """Density actually sampled: joint at constrain(z) plus log-det-Jacobian."""
    return target.log_prob(z)


def log_prob_ratio(target: ModelTarget, z_new, z_old):
    return target.log_prob_ratio(z_new, z_old)


class GaussianTarget:
    """Standard normal in P dimensions. Test and benchmark harness."""

    def __init__(self, dim: int, precision: str = "double"):
        if dim < 1:
            raise ValueError(f"dim must be positive, got {dim}")
        if precision not in ("single", "double"):
            raise ValueError(f"precision must be 'single' or 'double', got {precision!r}")
        self.dim = dim
        self.precision = precision
        self.dtype = np.float32 if precision == "single" else np.float64
        self._const = self.dtype(-0.5 * dim * _LOG_2PI)

    def param_names(self) -> list[str]:
        return [f"z{j}" for j in range(self.dim)]

    def _prepare(self, z):
        z = np.asarray(z, dtype=self.dtype)
        if not np.all(np.isfinite(z)):
            raise ValueError("state contains non-finite entries")
        zb, single = _as_batch(z)
        if zb.shape[1] != self.dim:
            raise ValueError(f"state must have {self.dim} entries, got {zb.shape[1]}")
        return zb, single

    def log_prob(self, z):
        zb, single = self._prepare(z)
        out = self._const + (self.dtype(-0.5) * zb * zb).sum(axis=1)
        return out[0] if single else out

    def value_and_grad(self, z):
        zb, single = self._prepare(z)
        value = self._const + (self.dtype(-0.5) * zb * zb).sum(axis=1)
        grad = -zb
        if single:
            return value[0], grad[0]
        return value, grad

    def log_prob_ratio(self, z_new, z_old):
        zn, single_n = self._prepare(z_new)
        zo, single_o = self._prepare(z_old)
        if zn.shape != zo.shape:
            raise ValueError(f"state shapes differ: {zn.shape} vs {zo.shape}")
        half = self.dtype(0.5)
        ratio = (half * zo * zo - half * zn * zn).sum(axis=1)
        return ratio[0] if (single_n and single_o) else ratio

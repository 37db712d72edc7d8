"""Streaming and trace-based sampler diagnostics.

Moment accumulation is single-pass Welford with a Chan-style merge, so
per-chain moments can be combined across chains (or across workers) without
a second pass over draws. Mixing diagnostics follow the split-chain R-hat
and the multi-chain autocorrelation ESS with Geyer initial-positive-pairs
truncation. Everything here runs in float64 regardless of the precision the
sampler itself used; diagnostics are too cheap to be worth corrupting.

1-D traces are treated as a single chain; 2-D traces are draws x chains.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ROUNDOFF_ABS_LIMIT = 1e6
ROUNDOFF_QUARTER_TOL = 1e-9


class DegenerateTraceError(ValueError):
    """A trace with zero within-chain variance cannot support R-hat or ESS."""


@dataclass(frozen=True)
class StreamingMoments:
    """Count, running mean and sum of squared deviations (M2).

    mean and m2 may be any shape; a lockstep sampler uses (C, P) so every
    chain and dimension streams its own moments under one draw count.
    """

    count: int
    mean: np.ndarray
    m2: np.ndarray


def welford_init(shape=()) -> StreamingMoments:
    return StreamingMoments(0, np.zeros(shape), np.zeros(shape))


def welford_update(acc: StreamingMoments, x) -> StreamingMoments:
    """Fold one observation (of acc's shape) into the accumulator."""
    x = np.asarray(x, dtype=np.float64)
    n = acc.count + 1
    delta = x - acc.mean
    mean = acc.mean + delta / n
    m2 = acc.m2 + delta * (x - mean)
    return StreamingMoments(n, mean, m2)


def welford_merge(a: StreamingMoments, b: StreamingMoments) -> StreamingMoments:
    """Combine two accumulators as if their draws had been one stream."""
    if a.count == 0:
        return b
    if b.count == 0:
        return a
    n = a.count + b.count
    delta = b.mean - a.mean
    mean = a.mean + delta * (b.count / n)
    m2 = a.m2 + b.m2 + delta * delta * (a.count * b.count / n)
    return StreamingMoments(n, mean, m2)


def variance(acc: StreamingMoments, ddof: int = 1) -> np.ndarray:
    if acc.count < ddof + 1:
        raise ValueError(f"need at least {ddof + 1} observations, have {acc.count}")
    return acc.m2 / (acc.count - ddof)


def merge_chain_axis(acc: StreamingMoments) -> StreamingMoments:
    """Pool a (C, ...) accumulator over its chain axis into one (...) stream."""
    if acc.count == 0 or acc.mean.ndim == 0:
        raise ValueError("expected a populated accumulator with a chain axis")
    out = StreamingMoments(acc.count, acc.mean[0], acc.m2[0])
    for c in range(1, acc.mean.shape[0]):
        out = welford_merge(out, StreamingMoments(acc.count, acc.mean[c], acc.m2[c]))
    return out


def _as_chains(trace) -> np.ndarray:
    trace = np.asarray(trace, dtype=np.float64)
    if trace.ndim == 1:
        trace = trace[:, None]
    if trace.ndim != 2:
        raise ValueError(f"trace must be (draws,) or (draws, chains), got {trace.shape}")
    return trace


def split_rhat(trace) -> float:
    """Potential scale reduction with each chain split in half.

    With n = T // 2 draws per half-chain, W the mean within-half variance
    and B the between-half variance of means, returns
    sqrt((((n - 1) / n) * W + B / n) / W).
    """
    x = _as_chains(trace)
    t = x.shape[0]
    if t < 4:
        raise ValueError(f"split R-hat needs at least 4 draws, got {t}")
    n = t // 2
    halves = [x[:n], x[n : 2 * n]]
    pieces = np.concatenate([h for h in halves], axis=1)  # (n, 2C)
    within = pieces.var(axis=0, ddof=1)
    w = within.mean()
    if w == 0.0:
        raise DegenerateTraceError("zero within-chain variance, R-hat undefined")
    means = pieces.mean(axis=0)
    b = n * means.var(ddof=1)
    var_hat = ((n - 1) / n) * w + b / n
    return float(np.sqrt(var_hat / w))


def streaming_rhat(acc: StreamingMoments) -> np.ndarray:
    """R-hat (unsplit) straight from per-chain streaming moments.

    acc holds (C, P) moments from n draws per chain. Trace retention is not
    required, but a run stuck in the first half of sampling will look better
    here than under split R-hat; prefer the split version when draws exist.
    """
    if acc.count < 2:
        raise ValueError(f"need at least 2 draws per chain, have {acc.count}")
    if acc.mean.ndim != 2 or acc.mean.shape[0] < 2:
        raise ValueError("streaming R-hat needs (C, P) moments with C >= 2")
    n = acc.count
    w = (acc.m2 / (n - 1)).mean(axis=0)
    if np.any(w == 0.0):
        raise DegenerateTraceError("zero within-chain variance, R-hat undefined")
    b = n * acc.mean.var(axis=0, ddof=1)
    var_hat = ((n - 1) / n) * w + b / n
    return np.sqrt(var_hat / w)


def _autocovariances(x: np.ndarray) -> np.ndarray:
    """Biased per-chain autocovariances via FFT. x is (T, C) centered."""
    t = x.shape[0]
    nfft = 1 << (2 * t - 1).bit_length()
    f = np.fft.rfft(x, n=nfft, axis=0)
    acov = np.fft.irfft(f * np.conj(f), n=nfft, axis=0)[:t].real
    return acov / t


def ess(trace) -> float:
    """Multi-chain effective sample size.

    Per-lag autocorrelations pool within-chain autocovariances against the
    combined variance estimate; the sum over lags is truncated by Geyer's
    initial-positive-pairs rule. Returns C * T / (1 + 2 * sum(rho)), which
    may legitimately exceed C * T for anticorrelated chains.
    """
    x = _as_chains(trace)
    t, c = x.shape
    if t < 8:
        raise ValueError(f"ESS needs at least 8 draws, got {t}")
    chain_means = x.mean(axis=0)
    chain_vars = x.var(axis=0, ddof=1)
    w = chain_vars.mean()
    if w == 0.0:
        raise DegenerateTraceError("zero within-chain variance, ESS undefined")
    if c > 1:
        var_hat = w * (t - 1) / t + chain_means.var(ddof=1)
    else:
        var_hat = w * (t - 1) / t
    acov = _autocovariances(x - chain_means)
    mean_acov = acov.mean(axis=1)
    rho = 1.0 - (w - mean_acov) / var_hat
    rho[0] = 1.0

    tau = 0.0
    k = 0
    while 2 * k + 1 < t:
        pair = rho[2 * k] + rho[2 * k + 1]
        if pair <= 0.0:
            break
        tau += 2.0 * pair
        k += 1
    tau = max(tau - 1.0, 1e-8)
    return float(c * t / tau)


def esjd(prev_batch, next_batch) -> float:
    """Expected squared jump distance for one transition, averaged over
    chains. Accumulate a running mean over steps for a whole run."""
    prev = np.atleast_2d(np.asarray(prev_batch, dtype=np.float64))
    nxt = np.atleast_2d(np.asarray(next_batch, dtype=np.float64))
    if prev.shape != nxt.shape:
        raise ValueError(f"batch shapes differ: {prev.shape} vs {nxt.shape}")
    jump = nxt - prev
    return float((jump * jump).sum(axis=-1).mean())


def chees(prev_batch, next_batch, center) -> float:
    """Change in squared distance from center, squared, averaged over chains,
    divided by 4. center should be the current cross-chain location estimate;
    the statistic is invariant to translating all three together."""
    prev = np.atleast_2d(np.asarray(prev_batch, dtype=np.float64))
    nxt = np.atleast_2d(np.asarray(next_batch, dtype=np.float64))
    if prev.shape != nxt.shape:
        raise ValueError(f"batch shapes differ: {prev.shape} vs {nxt.shape}")
    ctr = np.asarray(center, dtype=np.float64)
    d_next = ((nxt - ctr) ** 2).sum(axis=-1)
    d_prev = ((prev - ctr) ** 2).sum(axis=-1)
    diff = d_next - d_prev
    return float(0.25 * (diff * diff).mean())


def roundoff_suspicion(log_accept_ratios) -> float:
    """Fraction of finite, moderate log accept ratios sitting exactly on the
    quarter-integer grid, the residue large cancelled float totals leave
    behind. Healthy double-precision ratios land there with probability about
    zero; a large fraction means the accept statistics are quantization
    artifacts."""
    r = np.asarray(log_accept_ratios, dtype=np.float64).ravel()
    if r.size == 0:
        raise ValueError("no log accept ratios given")
    finite = np.isfinite(r)
    moderate = finite & (np.abs(r) < ROUNDOFF_ABS_LIMIT)
    q = 4.0 * r[moderate]
    on_grid = np.abs(q - np.round(q)) < ROUNDOFF_QUARTER_TOL
    return float(on_grid.sum() / r.size)


def harmonic_mean_acceptance(probs) -> float:
    """Harmonic mean of acceptance probabilities: n / sum(1/p).

    Dominated by the worst member, which is the point: one stuck chain in a
    lockstep batch should drag the shared step size down."""
    p = np.asarray(probs, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("no acceptance probabilities given")
    if np.any(p <= 0.0) or np.any(p > 1.0):
        raise ValueError("acceptance probabilities must lie in (0, 1]")
    return float(p.size / (1.0 / p).sum())


@dataclass
class DiagnosticsReport:
    """Run-level diagnostics. rhat and ess are per unconstrained dimension;
    ess is None when only streaming moments were retained. ess_tau is the
    ESS of the constrained global scale for the regression target, None
    elsewhere."""

    rhat: list[float]
    ess: list[float] | None
    ess_tau: float | None
    esjd: float
    chees: float
    mean_accept_harmonic: float
    roundoff_flag_fraction: float

    def to_dict(self) -> dict:
        return {
            "rhat": [float(v) for v in self.rhat],
            "ess": None if self.ess is None else [float(v) for v in self.ess],
            "ess_tau": None if self.ess_tau is None else float(self.ess_tau),
            "esjd": float(self.esjd),
            "chees": float(self.chees),
            "mean_accept_harmonic": float(self.mean_accept_harmonic),
            "roundoff_flag_fraction": float(self.roundoff_flag_fraction),
        }


def accept_probs_from_ratios(log_accept_ratios) -> np.ndarray:
    """Per-draw acceptance probabilities exp(min(0, ratio)), floored at 1e-10
    so a hopeless chain still has a finite harmonic-mean contribution."""
    r = np.asarray(log_accept_ratios, dtype=np.float64)
    return np.clip(np.exp(np.minimum(r, 0.0)), 1e-10, 1.0)


def report_from_trace(z_trace, log_accept_ratios, tau_trace=None) -> DiagnosticsReport:
    """Build the full report from retained draws.

    z_trace is (T, C, P) post-warmup unconstrained draws, log_accept_ratios
    is (T, C); tau_trace, when given, is (T, C) constrained tau draws.
    """
    z = np.asarray(z_trace, dtype=np.float64)
    ratios = np.asarray(log_accept_ratios, dtype=np.float64)
    if z.ndim != 3:
        raise ValueError(f"z_trace must be (T, C, P), got shape {z.shape}")
    t, c, p = z.shape
    if t < 8:
        raise ValueError(f"need at least 8 retained draws, got {t}")
    rhat = [split_rhat(z[:, :, d]) for d in range(p)]
    ess_dims = [ess(z[:, :, d]) for d in range(p)]
    ess_tau = None if tau_trace is None else ess(tau_trace)

    jumps = z[1:] - z[:-1]
    esjd_val = float((jumps * jumps).sum(axis=-1).mean()) if t > 1 else 0.0
    ctr = z.mean(axis=(0, 1))
    sq = ((z - ctr) ** 2).sum(axis=-1)
    dsq = sq[1:] - sq[:-1]
    chees_val = float(0.25 * (dsq * dsq).mean()) if t > 1 else 0.0

    # Mean over iterations of the per-iteration harmonic mean across chains.
    # Pooling 1/p over the whole trace would let one deep rejection dominate.
    probs = accept_probs_from_ratios(ratios)
    hm_per_step = [harmonic_mean_acceptance(probs[i]) for i in range(probs.shape[0])]

    return DiagnosticsReport(
        rhat=rhat,
        ess=ess_dims,
        ess_tau=ess_tau,
        esjd=esjd_val,
        chees=chees_val,
        mean_accept_harmonic=float(np.mean(hm_per_step)),
        roundoff_flag_fraction=roundoff_suspicion(ratios),
    )

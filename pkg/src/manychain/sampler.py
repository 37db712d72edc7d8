"""Lockstep multi-chain Hamiltonian Monte Carlo.

All chains live in one structure-of-arrays batch: states are a (C, P)
matrix, densities and gradients evaluate for every chain in the same
vectorized call, and every chain runs the same number of leapfrog steps per
iteration. Trajectory-length jitter is drawn ONCE per iteration from a
dedicated key stream shared by all chains; per-chain jitter would break the
lockstep execution shape (and quietly serialize a vectorized batch), so
hmc_step hard-fails if it is handed per-chain lengths that disagree.

Randomness per iteration: the iteration's step key is folded with each
chain index to give per-chain keys (momentum + accept draw), while the
jitter key is used whole. Runs are bitwise reproducible from (seed, config):
chains are processed in fixed chunks whose layout does not depend on the
worker count, and every cross-chain reduction happens in the coordinator in
a fixed order, so --threads N reproduces --threads 1 exactly.

Rejected chains keep their cached density value and gradient; a non-finite
proposal density, coordinate, or ratio forces rejection through a -inf log
accept ratio rather than poisoning the batch with NaNs.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from time import perf_counter

import numpy as np

from . import diagnostics as diag
from .prng import RandomKey, fold_in, normal, randint, split, uniform

# chains per execution chunk; fixed so results never depend on worker count
LOCKSTEP_CHUNK = 16


class LockstepViolationError(RuntimeError):
    """Chains were asked to integrate different trajectory lengths."""


@dataclass
class HmcConfig:
    """Static sampler settings.

    step_size may be 0 (degenerate identity dynamics, occasionally useful
    to isolate the accept path); it must not be negative. mass_diag is a
    per-dimension mass vector (1/posterior variance scale); None means
    identity. stable_ratio selects the per-term log density ratio for the
    accept test instead of differencing two energy totals.
    """

    step_size: float
    num_leapfrog_steps: int
    jitter: bool = True
    precision: str = "double"
    mass_diag: np.ndarray | None = None
    stable_ratio: bool = False

    def __post_init__(self):
        if not (self.step_size >= 0.0 and math.isfinite(self.step_size)):
            raise ValueError(f"step_size must be finite and >= 0, got {self.step_size}")
        if int(self.num_leapfrog_steps) != self.num_leapfrog_steps or self.num_leapfrog_steps < 1:
            raise ValueError(
                f"num_leapfrog_steps must be a positive integer, got {self.num_leapfrog_steps}"
            )
        self.num_leapfrog_steps = int(self.num_leapfrog_steps)
        if self.precision not in ("single", "double"):
            raise ValueError(f"precision must be 'single' or 'double', got {self.precision!r}")
        if self.mass_diag is not None:
            m = np.asarray(self.mass_diag, dtype=np.float64)
            if m.ndim != 1 or not np.all(np.isfinite(m)) or np.any(m <= 0.0):
                raise ValueError("mass_diag must be a 1-D vector of positive finite reals")
            self.mass_diag = m


@dataclass
class ChainBatch:
    """C chain states with cached log density values and gradients."""

    z: np.ndarray  # (C, P)
    value: np.ndarray  # (C,)
    grad: np.ndarray  # (C, P)

    @classmethod
    def init(cls, target, z_init) -> "ChainBatch":
        z = np.array(z_init, dtype=target.dtype)
        if z.ndim != 2:
            raise ValueError(f"z_init must be (chains, dim), got shape {z.shape}")
        if not np.all(np.isfinite(z)):
            raise ValueError("z_init contains non-finite entries")
        value, grad = target.value_and_grad(z)
        if not np.all(np.isfinite(value)):
            raise ValueError("initial states have non-finite log density")
        return cls(z, value, grad)

    @property
    def num_chains(self) -> int:
        return self.z.shape[0]

    @property
    def dim(self) -> int:
        return self.z.shape[1]

    def check_cache(self, target, atol=0.0):
        """Debug helper: recompute value/grad and compare with the cache."""
        value, grad = target.value_and_grad(self.z)
        ok = np.allclose(value, self.value, atol=atol, rtol=0.0) and np.allclose(
            grad, self.grad, atol=atol, rtol=0.0
        )
        if not ok:
            raise AssertionError("cached value/grad out of sync with states")


@dataclass
class StepOutput:
    """One iteration's result: post-accept states, accept flags, log accept
    ratios, and the single trajectory length every chain executed."""

    z: np.ndarray  # (C, P)
    is_accepted: np.ndarray  # (C,) bool
    log_accept_ratio: np.ndarray  # (C,)
    num_leapfrog_used: int


def leapfrog_step(target, step_size, z, m, grad, mass_diag=None):
    """One leapfrog update: half momentum kick, position drift by m / mass,
    density re-evaluation, half kick. Returns (z, m, value, grad)."""
    dtype = target.dtype
    z = np.asarray(z, dtype=dtype)
    m = np.asarray(m, dtype=dtype)
    grad = np.asarray(grad, dtype=dtype)
    single = z.ndim == 1
    if single:
        z, m, grad = z[None, :], m[None, :], grad[None, :]
    eps = dtype(step_size)
    if mass_diag is not None:
        inv_mass = (1.0 / np.asarray(mass_diag)).astype(dtype)
    else:
        inv_mass = None
    z, m, value, grad = _leapfrog(target, eps, 1, z, m, grad, inv_mass)
    if single:
        return z[0], m[0], value[0], grad[0]
    return z, m, value, grad


def _leapfrog(target, eps, num_steps, z, m, grad, inv_mass):
    half = eps * z.dtype.type(0.5)
    value = None
    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        for _ in range(num_steps):
            m = m + half * grad
            if inv_mass is None:
                z = z + eps * m
            else:
                z = z + eps * (m * inv_mass)
            value, grad = _eval(target, z)
            m = m + half * grad
    if value is None:
        value, grad = _eval(target, z)
    return z, m, value, grad


def _eval(target, z):
    """value_and_grad that tolerates non-finite states mid-trajectory."""
    if np.all(np.isfinite(z)):
        return target.value_and_grad(z)
    dead = ~np.all(np.isfinite(z), axis=1)
    safe = np.where(dead[:, None], z.dtype.type(0.0), z)
    value, grad = target.value_and_grad(safe)
    value = np.where(dead, z.dtype.type(-np.inf), value)
    grad = np.where(dead[:, None], z.dtype.type(np.nan), grad)
    return value, grad


def draw_trajectory_length(jitter_key: RandomKey, base_steps: int, jitter: bool) -> int:
    """Leapfrog count for one iteration: base_steps, or with jitter a draw
    uniform on {1, ..., 2 * base_steps}. One draw serves every chain."""
    if base_steps < 1:
        raise ValueError(f"base_steps must be >= 1, got {base_steps}")
    if not jitter:
        return int(base_steps)
    return int(randint(jitter_key, 1, 1 + 2 * base_steps))


def _chunk_ranges(num_chains: int):
    return [
        (lo, min(lo + LOCKSTEP_CHUNK, num_chains))
        for lo in range(0, num_chains, LOCKSTEP_CHUNK)
    ]


def hmc_step(
    target,
    config: HmcConfig,
    batch: ChainBatch,
    step_keys,
    jitter_key: RandomKey,
    length_fn=None,
    pool=None,
) -> tuple[ChainBatch, StepOutput]:
    """Advance every chain by one jittered HMC iteration.

    step_keys is one RandomKey per chain (momentum and accept draws);
    jitter_key is a single shared key from the separate jitter stream.
    length_fn is a test hook replacing the trajectory-length draw; if it
    hands back per-chain lengths that are not all equal the step raises
    LockstepViolationError instead of silently desynchronizing the batch.
    """
    c, p = batch.z.shape
    if len(step_keys) != c:
        raise ValueError(f"need {c} per-chain keys, got {len(step_keys)}")
    if config.precision != target.precision:
        raise ValueError(
            f"config precision {config.precision!r} does not match "
            f"target precision {target.precision!r}"
        )
    dtype = target.dtype

    if length_fn is None:
        num_steps = draw_trajectory_length(jitter_key, config.num_leapfrog_steps, config.jitter)
    else:
        drawn = np.asarray(length_fn(jitter_key))
        uniq = np.unique(drawn)
        if uniq.size != 1:
            raise LockstepViolationError(
                f"per-chain trajectory lengths differ ({uniq.tolist()}); "
                "all chains must integrate the same number of leapfrog steps"
            )
        num_steps = int(uniq[0])
        if num_steps < 1:
            raise ValueError(f"trajectory length must be >= 1, got {num_steps}")

    mass = config.mass_diag
    if mass is not None and mass.shape != (p,):
        raise ValueError(f"mass_diag must have shape ({p},), got {mass.shape}")
    inv_mass = None if mass is None else (1.0 / mass).astype(dtype)
    sqrt_mass = None if mass is None else np.sqrt(mass).astype(dtype)

    m0 = np.empty((c, p), dtype=dtype)
    log_u = np.empty(c, dtype=np.float64)
    for i, kc in enumerate(step_keys):
        mk, uk = split(kc, 2)
        m0[i] = normal(mk, [p])
        u = uniform(uk)
        log_u[i] = math.log(u) if u > 0.0 else -np.inf
    if sqrt_mass is not None:
        m0 = m0 * sqrt_mass

    eps = dtype(config.step_size)
    chunks = _chunk_ranges(c)

    def integrate(bounds):
        lo, hi = bounds
        z1, m1, v1, g1 = _leapfrog(
            target, eps, num_steps, batch.z[lo:hi], m0[lo:hi], batch.grad[lo:hi], inv_mass
        )
        ratio_part = None
        if config.stable_ratio:
            with np.errstate(over="ignore", invalid="ignore", under="ignore"):
                finite = np.all(np.isfinite(z1), axis=1)
                safe = np.where(finite[:, None], z1, batch.z[lo:hi])
                ratio_part = np.asarray(target.log_prob_ratio(safe, batch.z[lo:hi]))
                ratio_part = np.where(finite, ratio_part, dtype(-np.inf))
        return z1, m1, v1, g1, ratio_part

    if pool is not None and len(chunks) > 1:
        results = list(pool.map(integrate, chunks))
    else:
        results = [integrate(b) for b in chunks]

    z1 = np.concatenate([r[0] for r in results])
    m1 = np.concatenate([r[1] for r in results])
    value1 = np.concatenate([r[2] for r in results])
    grad1 = np.concatenate([r[3] for r in results])

    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        if config.stable_ratio:
            kin_diff = (0.5 * ((m0 * m0) - (m1 * m1))) if inv_mass is None else (
                0.5 * ((m0 * m0) - (m1 * m1)) * inv_mass
            )
            log_accept_ratio = kin_diff.sum(axis=1) + np.concatenate(
                [r[4] for r in results]
            )
        else:
            kin0 = (0.5 * m0 * m0 if inv_mass is None else 0.5 * m0 * m0 * inv_mass).sum(axis=1)
            kin1 = (0.5 * m1 * m1 if inv_mass is None else 0.5 * m1 * m1 * inv_mass).sum(axis=1)
            energy0 = kin0 - batch.value
            energy1 = kin1 - value1
            log_accept_ratio = energy0 - energy1

    # non-finite anywhere in the proposal forces rejection, never NaN out
    proposal_ok = np.all(np.isfinite(z1), axis=1) & np.isfinite(value1)
    log_accept_ratio = np.asarray(log_accept_ratio, dtype=dtype)
    log_accept_ratio = np.where(
        proposal_ok & np.isfinite(log_accept_ratio), log_accept_ratio, dtype(-np.inf)
    )

    accepted = log_u < log_accept_ratio
    keep = accepted[:, None]
    new_batch = ChainBatch(
        z=np.where(keep, z1, batch.z),
        value=np.where(accepted, value1, batch.value),
        grad=np.where(keep, grad1, batch.grad),
    )
    out = StepOutput(
        z=new_batch.z,
        is_accepted=accepted,
        log_accept_ratio=log_accept_ratio,
        num_leapfrog_used=int(num_steps),
    )
    return new_batch, out


def adapt_step_size(
    step_size: float,
    accept_probs,
    target_accept: float = 0.8,
    learning_rate: float = 0.05,
) -> float:
    """Multiplicative step-size update driven by the harmonic mean of the
    batch's acceptance probabilities. The harmonic mean is dominated by the
    worst chain, so one stuck chain shrinks the shared step for everyone,
    which is exactly what keeps a lockstep batch alive."""
    if not (step_size > 0.0 and math.isfinite(step_size)):
        raise ValueError(f"step_size must be positive and finite, got {step_size}")
    if not (0.0 < target_accept < 1.0):
        raise ValueError(f"target_accept must be in (0, 1), got {target_accept}")
    if not (learning_rate > 0.0):
        raise ValueError(f"learning_rate must be positive, got {learning_rate}")
    hm = diag.harmonic_mean_acceptance(accept_probs)
    return float(step_size * math.exp(learning_rate * (hm - target_accept)))


def estimate_diag_mass(moments: diag.StreamingMoments) -> np.ndarray:
    """Inverse posterior-variance preconditioner from warmup moments.

    Pools per-chain (C, P) moments across chains, floors the per-dimension
    variance at 1e-8, and returns mass_diag = 1 / variance."""
    if moments.count < 10:
        raise ValueError(
            f"need at least 10 warmup draws per chain to estimate mass, have {moments.count}"
        )
    pooled = diag.merge_chain_axis(moments)
    var = pooled.m2 / (pooled.count - 1)
    var = np.maximum(var, 1e-8)
    return 1.0 / var


@dataclass
class RunSummary:
    """harmonic_accept is the run mean of per-step harmonic means, the same
    quantity the step-size controller sees each iteration. Pooling 1/p over
    the whole run instead would let a single deep rejection anywhere zero out
    the statistic for an otherwise healthy run."""

    num_steps: int
    num_chains: int
    wall_seconds: float
    accept_rate: float
    harmonic_accept: float
    total_leapfrogs: int
    final_batch: ChainBatch

    @property
    def draws_per_second(self) -> float:
        if self.wall_seconds <= 0.0:
            return float("nan")
        return self.num_steps * self.num_chains / self.wall_seconds


class TraceSink:
    """Retains every post-warmup draw. Memory is T x C x P."""

    def __init__(self):
        self._z = []
        self._accepted = []
        self._ratios = []
        self._lengths = []

    def record(self, out: StepOutput):
        self._z.append(out.z)
        self._accepted.append(out.is_accepted)
        self._ratios.append(out.log_accept_ratio)
        self._lengths.append(out.num_leapfrog_used)

    @property
    def num_recorded(self) -> int:
        return len(self._z)

    def z_trace(self) -> np.ndarray:
        return np.stack(self._z).astype(np.float64) if self._z else np.zeros((0, 0, 0))

    def is_accepted(self) -> np.ndarray:
        return np.stack(self._accepted) if self._accepted else np.zeros((0, 0), dtype=bool)

    def log_accept_ratios(self) -> np.ndarray:
        return np.stack(self._ratios).astype(np.float64) if self._ratios else np.zeros((0, 0))

    def trajectory_lengths(self) -> np.ndarray:
        return np.asarray(self._lengths, dtype=np.int64)

    def report(self, tau_trace=None) -> diag.DiagnosticsReport:
        return diag.report_from_trace(self.z_trace(), self.log_accept_ratios(), tau_trace)


class MomentsSink:
    """Streams draws into Welford moments plus running ESJD/ChEES; keeps no
    trace. R-hat comes from the streamed moments; per-lag ESS is unavailable
    at this retention level."""

    def __init__(self):
        self.moments: diag.StreamingMoments | None = None
        self._prev = None
        self._esjd_sum = 0.0
        self._chees_sum = 0.0
        self._jump_count = 0
        self._step_hm_sum = 0.0
        self._step_count = 0
        self._ratio_count = 0
        self._flag_count = 0

    def record(self, out: StepOutput):
        z = np.asarray(out.z, dtype=np.float64)
        if self.moments is None:
            self.moments = diag.welford_init(z.shape)
        if self._prev is not None:
            center = self.moments.mean.mean(axis=0)
            self._esjd_sum += diag.esjd(self._prev, z)
            self._chees_sum += diag.chees(self._prev, z, center)
            self._jump_count += 1
        self.moments = diag.welford_update(self.moments, z)
        self._prev = z

        r = np.asarray(out.log_accept_ratio, dtype=np.float64)
        self._step_hm_sum += diag.harmonic_mean_acceptance(diag.accept_probs_from_ratios(r))
        self._step_count += 1
        self._ratio_count += r.size
        finite = np.isfinite(r)
        moderate = finite & (np.abs(r) < diag.ROUNDOFF_ABS_LIMIT)
        q = 4.0 * r[moderate]
        self._flag_count += int((np.abs(q - np.round(q)) < diag.ROUNDOFF_QUARTER_TOL).sum())

    @property
    def num_recorded(self) -> int:
        return 0 if self.moments is None else self.moments.count

    def report(self) -> diag.DiagnosticsReport:
        if self.moments is None or self.moments.count < 2:
            raise ValueError("not enough recorded draws for a report")
        rhat = diag.streaming_rhat(self.moments)
        return diag.DiagnosticsReport(
            rhat=[float(v) for v in rhat],
            ess=None,
            ess_tau=None,
            esjd=self._esjd_sum / max(self._jump_count, 1),
            chees=self._chees_sum / max(self._jump_count, 1),
            mean_accept_harmonic=self._step_hm_sum / self._step_count,
            roundoff_flag_fraction=self._flag_count / self._ratio_count,
        )


def run_chains(
    target,
    config: HmcConfig,
    z_init,
    root_key: RandomKey,
    num_steps: int,
    sink=None,
    threads: int = 1,
) -> RunSummary:
    """Run C lockstep chains for num_steps iterations, streaming each
    StepOutput into sink.

    root_key expands into two independent per-step streams: one for the
    per-chain step keys, one for the shared jitter draws. z_init may be a
    (C, P) array or a warm ChainBatch from a previous run.
    """
    if num_steps < 0:
        raise ValueError(f"num_steps must be >= 0, got {num_steps}")
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    if config.precision != target.precision:
        raise ValueError(
            f"config precision {config.precision!r} does not match "
            f"target precision {target.precision!r}"
        )
    if isinstance(z_init, ChainBatch):
        batch = z_init
    else:
        batch = ChainBatch.init(target, z_init)
    c = batch.num_chains

    t0 = perf_counter()
    accept_total = 0
    step_hm_sum = 0.0
    total_leapfrogs = 0
    if num_steps > 0:
        sample_root, jitter_root = split(root_key, 2)
        step_stream = split(sample_root, num_steps)
        jitter_stream = split(jitter_root, num_steps)
        pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
        try:
            for t in range(num_steps):
                per_chain = [fold_in(step_stream[t], i) for i in range(c)]
                batch, out = hmc_step(
                    target, config, batch, per_chain, jitter_stream[t], pool=pool
                )
                if sink is not None:
                    sink.record(out)
                accept_total += int(out.is_accepted.sum())
                step_hm_sum += diag.harmonic_mean_acceptance(
                    diag.accept_probs_from_ratios(out.log_accept_ratio)
                )
                total_leapfrogs += out.num_leapfrog_used
        finally:
            if pool is not None:
                pool.shutdown(wait=True)
    wall = perf_counter() - t0

    return RunSummary(
        num_steps=num_steps,
        num_chains=c,
        wall_seconds=wall,
        accept_rate=(accept_total / (num_steps * c)) if num_steps else 0.0,
        harmonic_accept=(step_hm_sum / num_steps) if num_steps else 0.0,
        total_leapfrogs=total_leapfrogs,
        final_batch=batch,
    )


@dataclass
class WarmupInfo:
    phase_steps: tuple[int, int, int]
    step_size: float
    mass_diag: np.ndarray
    final_harmonic_accept: float


def warmup_adapt(
    target,
    config: HmcConfig,
    z_init,
    root_key: RandomKey,
    num_warmup: int,
    threads: int = 1,
    target_accept: float = 0.8,
    learning_rate: float = 0.05,
) -> tuple[HmcConfig, ChainBatch, WarmupInfo]:
    """Three-phase warmup: step-size search under identity mass (15%),
    moment collection for the diagonal mass (70%), step-size re-search under
    the new mass (15%). Returns the adapted config and the warm batch."""
    if num_warmup < 15:
        raise ValueError(f"adaptive warmup needs at least 15 iterations, got {num_warmup}")
    if config.step_size <= 0.0:
        raise ValueError("warmup needs a positive initial step_size")
    n1 = max(1, int(round(0.15 * num_warmup)))
    n3 = max(1, int(round(0.15 * num_warmup)))
    n2 = num_warmup - n1 - n3
    batch = z_init if isinstance(z_init, ChainBatch) else ChainBatch.init(target, z_init)
    k1, k2, k3 = split(root_key, 3)

    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        def phase(key, steps, cfg, adapt_eps, collect):
            nonlocal batch
            moments = None
            hm = 0.0
            step_stream, jitter_stream = (split(k, steps) for k in split(key, 2))
            eps = cfg.step_size
            for t in range(steps):
                live = replace(cfg, step_size=eps)
                per_chain = [fold_in(step_stream[t], i) for i in range(batch.num_chains)]
                batch, out = hmc_step(
                    target, live, batch, per_chain, jitter_stream[t], pool=pool
                )
                probs = diag.accept_probs_from_ratios(out.log_accept_ratio)
                hm = diag.harmonic_mean_acceptance(probs)
                if adapt_eps:
                    eps = adapt_step_size(eps, probs, target_accept, learning_rate)
                if collect:
                    if moments is None:
                        moments = diag.welford_init(batch.z.shape)
                    moments = diag.welford_update(moments, np.asarray(batch.z, np.float64))
            return eps, moments, hm

        base = replace(config, mass_diag=None)
        eps1, _, _ = phase(k1, n1, replace(base, step_size=config.step_size), True, False)
        _, moments, _ = phase(k2, n2, replace(base, step_size=eps1), False, True)
        mass = estimate_diag_mass(moments)
        eps3, _, hm3 = phase(
            k3, n3, replace(config, step_size=eps1, mass_diag=mass), True, False
        )
    finally:
        if pool is not None:
            pool.shutdown(wait=True)

    adapted = replace(config, step_size=eps3, mass_diag=mass)
    info = WarmupInfo(
        phase_steps=(n1, n2, n3),
        step_size=eps3,
        mass_diag=mass,
        final_harmonic_accept=hm3,
    )
    return adapted, batch, info

"""K-step action generation and its probabilistic bookkeeping.

Deterministic sampling walks the uniform time schedule tau_k = 1 - k/K with
Euler steps of size exactly 1/K; K = 1 collapses to a single forward pass
a = z1 - u(z1, 0, 1, obs). Stochastic sampling wraps each step in a
Gaussian of scale sigma and records everything needed to recompute the
chain's log-probability bit-for-bit later (the PPO old-log-prob contract).
The prior term ln p0(a^0) is stored but kept out of the transition sum: it
has no parameter dependence and cancels in probability ratios.

Exactly K velocity-network evaluations happen per generated action.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class Schedule:
    """Uniform flow-time partition 1 = tau_0 > ... > tau_K = 0."""

    K: int
    taus: np.ndarray

    @property
    def dt(self) -> float:
        return 1.0 / self.K


def make_schedule(K: int) -> Schedule:
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    taus = (K - np.arange(K + 1, dtype=np.float64)) / float(K)
    return Schedule(K=K, taus=taus)


@dataclass
class DenoiseChain:
    """One recorded K-step stochastic generation for a single observation."""

    states: np.ndarray  # (K+1, d_a): a^0 (prior draw) .. a^K (executed action)
    means: np.ndarray  # (K, d_a): mu_k, the deterministic update from a^k
    sigma: np.ndarray  # (d_a,) transition scale (scalar sigma broadcast)
    logprob_terms: np.ndarray  # (K,) per-transition Gaussian log-densities
    total_logprob: float  # sum of transition terms, prior excluded
    prior_logprob: float  # ln p0(a^0), stored separately
    nfe_used: int

    @property
    def K(self) -> int:
        return self.means.shape[0]

    @property
    def action(self) -> np.ndarray:
        return self.states[-1]

    @property
    def joint_logprob(self) -> float:
        """Full chain log-probability including the prior term."""
        return self.prior_logprob + self.total_logprob


def _sigma_vector(sigma, d_a: int) -> np.ndarray:
    sig = np.asarray(sigma, dtype=np.float64)
    if sig.ndim == 0:
        sig = np.full(d_a, float(sig))
    if sig.shape != (d_a,):
        raise ValueError(f"sigma must be scalar or ({d_a},), got shape {sig.shape}")
    if np.any(sig <= 0.0):
        raise ValueError("sigma must be positive")
    return sig


def gaussian_logpdf(x: np.ndarray, mu: np.ndarray, sigma) -> float:
    """ln N(x | mu, diag(sigma^2)); sigma scalar or per-dimension."""
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    sig = _sigma_vector(sigma, x.shape[-1])
    diff = x - mu
    return float(-0.5 * np.sum(LOG_2PI + 2.0 * np.log(sig) + (diff / sig) ** 2))


def step_entropy(d_a: int, sigma) -> float:
    """Closed-form entropy of one Gaussian transition N(mu, sigma^2 I)."""
    sig = _sigma_vector(sigma, d_a)
    return float(np.sum(0.5 * (1.0 + LOG_2PI + 2.0 * np.log(sig))))


def policy_entropy(K: int, d_a: int, sigma) -> float:
    """Total chain entropy: K conditional Gaussian transitions."""
    if K < 1:
        raise ValueError("K must be >= 1")
    return K * step_entropy(d_a, sigma)


def sample_deterministic(net, obs: np.ndarray, K: int, rng: np.random.Generator):
    """Noise-free K-step generation; returns (action, nfe). nfe == K always."""
    sched = make_schedule(K)
    obs = np.asarray(obs, dtype=np.float64).reshape(1, -1)
    h = net.encode_arrays(obs)
    z = rng.standard_normal(net.d_a).reshape(1, -1)
    for k in range(K):
        u = net.velocity_arrays(z, float(sched.taus[k + 1]), float(sched.taus[k]), h)
        z = z - sched.dt * u
    return z[0], K


def sample_stochastic(net, obs: np.ndarray, K: int, sigma, rng: np.random.Generator) -> DenoiseChain:
    """Gaussian-perturbed chain a^{k+1} = mu_k + sigma * xi_k; records all terms."""
    chains = sample_chain_batch(net, np.asarray(obs, dtype=np.float64).reshape(1, -1), K, sigma, [rng])
    return chains[0]


def sample_chain_batch(net, obs: np.ndarray, K: int, sigma, rngs) -> list[DenoiseChain]:
    """Vectorized chain sampling across environments with per-env rng streams.

    Each environment's noise comes only from its own generator (draw order:
    a^0 first, then one xi per step), so results are independent of batching.
    """
    sched = make_schedule(K)
    E = obs.shape[0]
    if len(rngs) != E:
        raise ValueError("need one rng stream per row")
    d_a = net.d_a
    sig = _sigma_vector(sigma, d_a)
    h = net.encode_arrays(obs)

    states = np.empty((K + 1, E, d_a))
    means = np.empty((K, E, d_a))
    terms = np.empty((K, E))
    a = np.stack([rng.standard_normal(d_a) for rng in rngs])
    states[0] = a
    for k in range(K):
        u = net.velocity_arrays(a, float(sched.taus[k + 1]), float(sched.taus[k]), h)
        mu = a - sched.dt * u
        xi = np.stack([rng.standard_normal(d_a) for rng in rngs])
        a = mu + sig * xi
        means[k] = mu
        states[k + 1] = a
        diff = (a - mu) / sig
        terms[k] = -0.5 * np.sum(LOG_2PI + 2.0 * np.log(sig) + diff * diff, axis=1)

    out = []
    for e in range(E):
        prior = gaussian_logpdf(states[0, e], np.zeros(d_a), 1.0)
        out.append(
            DenoiseChain(
                states=states[:, e].copy(),
                means=means[:, e].copy(),
                sigma=sig.copy(),
                logprob_terms=terms[:, e].copy(),
                total_logprob=float(np.sum(terms[:, e])),
                prior_logprob=prior,
                nfe_used=K,
            )
        )
    return out


def chain_logprob(net, chain: DenoiseChain, obs: np.ndarray, sigma) -> float:
    """Recompute the transition log-probability sum from the recorded states.

    Matches the value stored at sampling time to machine precision when the
    parameters are unchanged (same arithmetic path).
    """
    K = chain.K
    sched = make_schedule(K)
    obs = np.asarray(obs, dtype=np.float64).reshape(1, -1)
    d_a = chain.states.shape[1]
    sig = _sigma_vector(sigma, d_a)
    h = net.encode_arrays(obs)
    total = 0.0
    for k in range(K):
        a_k = chain.states[k].reshape(1, -1)
        u = net.velocity_arrays(a_k, float(sched.taus[k + 1]), float(sched.taus[k]), h)
        mu = a_k[0] - sched.dt * u[0]
        diff = (chain.states[k + 1] - mu) / sig
        total += float(-0.5 * np.sum(LOG_2PI + 2.0 * np.log(sig) + diff * diff))
    return total

"""Stage 2 fine-tuning: GAE, the clipped surrogate over denoising chains,
value and entropy terms, behavior-cloning regularization with linear decay,
and the full collect/update loop.

The chain's transition log-probability sum (prior excluded; it cancels in
the ratio) is recomputed under the tape each epoch, so one advantage per
environment step credits every denoising transition that produced the
executed action. With fixed sigma the entropy term is a constant reported
for the breakdown; an optional learnable per-dimension log-sigma head makes
it (and the ratio) sigma-differentiable.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .autodiff import Graph, Tensor, exp, log, no_record, relu, square
from .io import write_metrics_csv
from .nets import Adam, clip_grad_norm, init_value_net
from .sampler import LOG_2PI, make_schedule, sample_chain_batch, step_entropy

METRIC_COLUMNS = (
    "iter",
    "mean_return",
    "success_rate",
    "pg",
    "v",
    "ent",
    "bc",
    "lambda_bc",
    "clip_frac",
    "approx_kl",
)


@dataclass
class Stage2Config:
    gamma: float = 0.99
    lam_gae: float = 0.95
    clip_eps: float = 0.2
    lam_value: float = 0.5
    lam_entropy: float = 0.01
    lam_bc_init: float = 1.0
    lam_bc_final: float = 0.0
    bc_decay_start: int = 0
    bc_decay_end: int = 100
    K: int = 1
    sigma: float = 0.01
    sigma_learnable: bool = False
    iterations: int = 100
    epochs: int = 4
    minibatch_size: int = 64
    rollout_steps: int = 320
    n_envs: int = 8
    # sigma=0.01 scales chain log-prob gradients by 1/sigma^2; updates must
    # stay small for the clipped ratios to remain meaningful
    lr: float = 2e-5
    grad_clip: float = 1.0
    normalize_advantages: bool = True
    value_width: int = 64
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError("gamma must be in [0, 1)")
        if not (0.0 <= self.lam_gae <= 1.0):
            raise ValueError("lam_gae must be in [0, 1]")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be > 0")
        if min(self.lam_value, self.lam_entropy, self.lam_bc_init, self.lam_bc_final) < 0:
            raise ValueError("loss coefficients must be >= 0")
        if self.bc_decay_start >= self.bc_decay_end:
            raise ValueError("bc_decay_start must be < bc_decay_end")
        if self.K < 1 or self.sigma <= 0:
            raise ValueError("need K >= 1 and sigma > 0")
        if min(self.iterations, self.epochs, self.minibatch_size, self.rollout_steps, self.n_envs) < 0:
            raise ValueError("loop sizes must be nonnegative")


# ---------------------------------------------------------------------------
# advantage estimation


def gae(rewards, values, dones, gamma, lam):
    """Backward-recursion GAE over one episode segment.

    ``values`` has one extra trailing entry: the bootstrap (0 at a true
    terminal). Returns (advantages, returns) with R_t = A_t + V(o_t).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if values.shape[0] != rewards.shape[0] + 1:
        raise ValueError(
            f"values must have len(rewards)+1 entries, got {values.shape[0]} vs {rewards.shape[0]}"
        )
    if dones.shape[0] != rewards.shape[0]:
        raise ValueError("dones must align with rewards")
    adv = kernels.gae_backward(rewards, values, dones, float(gamma), float(lam))
    return adv, adv + values[:-1]


# ---------------------------------------------------------------------------
# surrogate pieces (op-composed: usable plain or under a tape)


def ppo_ratio(new_logprob, old_logprob):
    """exp(new - old); raises OverflowError with diagnostics instead of inf."""
    new_arr = new_logprob.data if isinstance(new_logprob, Tensor) else np.asarray(new_logprob, dtype=np.float64)
    old_arr = old_logprob.data if isinstance(old_logprob, Tensor) else np.asarray(old_logprob, dtype=np.float64)
    if not (np.all(np.isfinite(new_arr)) and np.all(np.isfinite(old_arr))):
        raise ValueError("log-probabilities must be finite")
    diff_max = float(np.max(new_arr - old_arr))
    if diff_max > 700.0:
        raise OverflowError(f"probability ratio overflow: max log-prob difference {diff_max:.3f}")
    new_t = new_logprob if isinstance(new_logprob, Tensor) else Tensor(new_arr)
    return exp(new_t - Tensor(old_arr))


def _clip(rho, lo: float, hi: float):
    # clip(x, lo, hi) == lo + relu(x - lo) - relu(x - hi); exact gradients a.e.
    return relu(rho - lo) - relu(rho - hi) + lo


def clipped_pg_loss(rho, adv, clip_eps: float):
    """mean over the batch of max(-A * rho, -A * clip(rho, 1-eps, 1+eps)).

    At the tie (rho inside the clip band the two arguments coincide) the
    gradient follows the unclipped branch, so at theta == theta_old the
    gradient is the plain policy gradient.
    """
    rho_t = rho if isinstance(rho, Tensor) else Tensor(np.asarray(rho, dtype=np.float64))
    adv_c = Tensor(adv.data if isinstance(adv, Tensor) else np.asarray(adv, dtype=np.float64))
    unclipped = -adv_c * rho_t
    clipped = -adv_c * _clip(rho_t, 1.0 - clip_eps, 1.0 + clip_eps)
    # max(a, b) = a + relu(b - a)
    return (unclipped + relu(clipped - unclipped)).mean()


def value_loss(v_pred, returns):
    """0.5 * mean squared error between predictions and returns."""
    v_t = v_pred if isinstance(v_pred, Tensor) else Tensor(np.asarray(v_pred, dtype=np.float64))
    r_c = Tensor(returns.data if isinstance(returns, Tensor) else np.asarray(returns, dtype=np.float64))
    return 0.5 * square(v_t - r_c).mean()


def bc_loss(frozen_net, current_net, obs_batch, shared_noise):
    """Squared distance between one-step actions of the two nets from the
    same z1 draws; gradient flows into ``current_net`` only."""
    obs = np.asarray(obs_batch, dtype=np.float64)
    z1 = np.asarray(shared_noise, dtype=np.float64)
    if frozen_net.d_a != current_net.d_a or frozen_net.d_obs != current_net.d_obs:
        raise ValueError("frozen and current nets must share dims")
    if z1.shape != (obs.shape[0], current_net.d_a):
        raise ValueError(f"shared noise must be (B, {current_net.d_a})")
    B = obs.shape[0]
    zeros = np.zeros((B, 1))
    ones = np.ones((B, 1))
    with no_record():
        u_frozen = frozen_net.velocity(Tensor(z1), Tensor(zeros), Tensor(ones), obs=Tensor(obs))
        a_frozen = z1 - u_frozen.data
    u_cur = current_net.velocity(Tensor(z1), Tensor(zeros), Tensor(ones), obs=Tensor(obs))
    a_cur = Tensor(z1) - u_cur
    return square(a_cur - Tensor(a_frozen)).sum(axis=1).mean()


def bc_schedule(n: int, config: Stage2Config) -> float:
    """Linear decay from lam_bc_init to lam_bc_final over [bc_decay_start, bc_decay_end)."""
    if n < 0:
        raise ValueError("iteration index must be >= 0")
    if config.bc_decay_start >= config.bc_decay_end:
        raise ValueError("bc_decay_start must be < bc_decay_end")
    if n < config.bc_decay_start:
        return config.lam_bc_init
    if n >= config.bc_decay_end:
        return config.lam_bc_final
    frac = (n - config.bc_decay_start) / (config.bc_decay_end - config.bc_decay_start)
    return config.lam_bc_init + frac * (config.lam_bc_final - config.lam_bc_init)


# ---------------------------------------------------------------------------
# batched traced chain log-probability


def _sigma_tensor(nets, config):
    """Current transition scale: traced tensor if learnable, else constant."""
    if nets.log_sigma is not None:
        return exp(nets.log_sigma)
    return Tensor(np.full(nets.policy.d_a, config.sigma))


def chain_logprob_traced(policy, states: np.ndarray, obs: np.ndarray, sigma_t, K: int):
    """Sum of the K transition log-densities, differentiable in theta (and
    sigma when traced). ``states`` is (M, K+1, d_a); recorded states are
    constants, only the means depend on parameters."""
    sched = make_schedule(K)
    M, _, d_a = states.shape
    h = policy.encode(Tensor(obs))
    log_sig_sum = log(sigma_t).sum()  # traced when sigma is a parameter
    total = None
    for k in range(K):
        a_k = Tensor(np.ascontiguousarray(states[:, k, :]))
        a_k1 = Tensor(np.ascontiguousarray(states[:, k + 1, :]))
        r_col = Tensor(np.full((M, 1), sched.taus[k + 1]))
        tau_col = Tensor(np.full((M, 1), sched.taus[k]))
        u = policy.velocity(a_k, r_col, tau_col, h=h)
        mu = a_k - sched.dt * u
        diff = (a_k1 - mu) / sigma_t.reshape((1, d_a))
        quad = square(diff).sum(axis=1)
        term = -0.5 * quad - 0.5 * d_a * LOG_2PI - log_sig_sum
        total = term if total is None else total + term
    return total


@dataclass
class Stage2Nets:
    policy: object
    value: object
    frozen: object
    log_sigma: Tensor | None = None


@dataclass
class MiniBatch:
    obs: np.ndarray  # (M, d_obs)
    states: np.ndarray  # (M, K+1, d_a)
    old_logprobs: np.ndarray  # (M,)
    advantages: np.ndarray  # (M,)
    returns: np.ndarray  # (M,)
    bc_noise: np.ndarray  # (M, d_a)


def stage2_loss(batch: MiniBatch, nets: Stage2Nets, config: Stage2Config, n: int):
    """Total fine-tuning loss and its component breakdown.

    total = L_PG + lam_value * L_V + lam_entropy * L_ent + lam_bc(n) * L_BC
    """
    K = batch.states.shape[1] - 1
    d_a = nets.policy.d_a
    sigma_t = _sigma_tensor(nets, config)

    new_lp = chain_logprob_traced(nets.policy, batch.states, batch.obs, sigma_t, K)
    rho = ppo_ratio(new_lp, batch.old_logprobs)
    pg = clipped_pg_loss(rho, batch.advantages, config.clip_eps)

    v_pred = nets.value.value(Tensor(batch.obs))
    v = value_loss(v_pred, batch.returns)

    if nets.log_sigma is not None:
        # differentiable closed form: H = sum_d 0.5 (1 + ln 2pi + 2 log sigma_d) per step
        ent_per_step = (0.5 * (1.0 + LOG_2PI) * d_a) + log(sigma_t).sum()
        ent = -float(K) * ent_per_step
    else:
        ent = Tensor(-float(K) * step_entropy(d_a, config.sigma))

    bc = bc_loss(nets.frozen, nets.policy, batch.obs, batch.bc_noise)
    lam_bc = bc_schedule(n, config)

    total = pg + config.lam_value * v + config.lam_entropy * ent + lam_bc * bc
    parts = {
        "pg": pg.item(),
        "v": v.item(),
        "ent": ent.item(),
        "bc": bc.item(),
        "lambda_bc": lam_bc,
        "total": total.item(),
        "rho": rho.data,
    }
    return total, parts


# ---------------------------------------------------------------------------
# rollout collection and the outer loop


@dataclass
class RolloutBatch:
    obs: np.ndarray  # (N, d_obs)
    next_obs: np.ndarray  # (N, d_obs), pre-reset at episode ends
    states: np.ndarray  # (N, K+1, d_a)
    actions: np.ndarray  # (N, d_a) executed (post-clamp)
    rewards: np.ndarray  # (N,)
    terminals: np.ndarray  # (N,) true termination (bootstrap 0)
    dones: np.ndarray  # (N,) segment ends (termination or truncation)
    values: np.ndarray  # (N,)
    old_logprobs: np.ndarray  # (N,)
    advantages: np.ndarray = field(default=None)
    returns: np.ndarray = field(default=None)
    env_slices: list = field(default_factory=list)  # per-env contiguous ranges


def collect_rollouts(nets: Stage2Nets, envs_list, env_rngs, obs_cur, config: Stage2Config):
    """Lockstep collection: each env contributes rollout_steps / n_envs steps.

    Environments persist across calls (episodes may span iterations); all
    randomness comes from the per-env generator streams, so results do not
    depend on how rows are batched.
    """
    E = len(envs_list)
    T = config.rollout_steps // E
    if T < 1:
        raise ValueError("rollout_steps must be >= n_envs")
    d_obs = nets.policy.d_obs
    d_a = nets.policy.d_a
    sigma = np.exp(nets.log_sigma.data) if nets.log_sigma is not None else config.sigma

    obs_buf = np.empty((E, T, d_obs))
    next_buf = np.empty((E, T, d_obs))
    states_buf = np.empty((E, T, config.K + 1, d_a))
    act_buf = np.empty((E, T, d_a))
    rew_buf = np.empty((E, T))
    term_buf = np.zeros((E, T))
    done_buf = np.zeros((E, T))
    val_buf = np.empty((E, T))
    lp_buf = np.empty((E, T))
    finished = []  # (return, success) per completed episode

    for t in range(T):
        obs_mat = np.ascontiguousarray(np.stack(obs_cur))
        chains = sample_chain_batch(nets.policy, obs_mat, config.K, sigma, env_rngs)
        values = nets.value.value_arrays(obs_mat)
        for e, env in enumerate(envs_list):
            chain = chains[e]
            nxt, r, done = env.step(chain.action)
            obs_buf[e, t] = obs_mat[e]
            next_buf[e, t] = nxt
            states_buf[e, t] = chain.states
            act_buf[e, t] = np.clip(chain.action, env.action_low, env.action_high)
            rew_buf[e, t] = r
            term_buf[e, t] = 1.0 if env.terminated else 0.0
            done_buf[e, t] = 1.0 if done else 0.0
            val_buf[e, t] = values[e]
            lp_buf[e, t] = chain.total_logprob
            # running episode return lives on the env: episodes span windows
            env._episode_return = getattr(env, "_episode_return", 0.0) + r
            if done:
                finished.append((env._episode_return, bool(env.success)))
                env._episode_return = 0.0
                nxt = env.reset(int(env_rngs[e].integers(2**63)))
            obs_cur[e] = nxt

    N = E * T
    batch = RolloutBatch(
        obs=obs_buf.reshape(N, d_obs),
        next_obs=next_buf.reshape(N, d_obs),
        states=states_buf.reshape(N, config.K + 1, d_a),
        actions=act_buf.reshape(N, d_a),
        rewards=rew_buf.reshape(N),
        terminals=term_buf.reshape(N),
        dones=done_buf.reshape(N),
        values=val_buf.reshape(N),
        old_logprobs=lp_buf.reshape(N),
        env_slices=[(e * T, (e + 1) * T) for e in range(E)],
    )
    return batch, finished


def compute_advantages(batch: RolloutBatch, value_net, config: Stage2Config) -> None:
    """Per-segment GAE (segments end at dones and at the window boundary);
    truncated segments bootstrap with V of the recorded pre-reset next obs."""
    N = batch.rewards.shape[0]
    adv = np.empty(N)
    ret = np.empty(N)
    for lo, hi in batch.env_slices:
        seg_start = lo
        for i in range(lo, hi):
            at_cut = batch.dones[i] > 0.5 or i == hi - 1
            if not at_cut:
                continue
            seg = slice(seg_start, i + 1)
            if batch.terminals[i] > 0.5:
                boot = 0.0
            else:
                boot = float(value_net.value_arrays(batch.next_obs[i : i + 1])[0])
            values_seg = np.concatenate([batch.values[seg], [boot]])
            a, r = gae(batch.rewards[seg], values_seg, batch.terminals[seg], config.gamma, config.lam_gae)
            adv[seg] = a
            ret[seg] = r
            seg_start = i + 1
    batch.advantages = adv
    batch.returns = ret


def finetune(pretrained_net, env_factory, config: Stage2Config, metrics_path=None):
    """Full Algorithm: iterate collect -> GAE -> minibatch epochs on the
    joint loss. Returns (policy, value_net, metrics rows). The frozen BC
    reference is a clone of the input and is never updated."""
    policy = pretrained_net.clone()
    frozen = pretrained_net.clone()
    value_net = init_value_net(config.seed, pretrained_net.d_obs, config.value_width)
    log_sigma = None
    if config.sigma_learnable:
        log_sigma = Tensor(np.full(pretrained_net.d_a, np.log(config.sigma)), requires_grad=True)
    nets = Stage2Nets(policy=policy, value=value_net, frozen=frozen, log_sigma=log_sigma)

    params = policy.parameters() + value_net.parameters()
    if log_sigma is not None:
        params.append(log_sigma)
    opt = Adam(params, lr=config.lr)

    ss = np.random.SeedSequence(config.seed)
    children = ss.spawn(config.n_envs + 1)
    env_rngs = [np.random.default_rng(s) for s in children[: config.n_envs]]
    update_rng = np.random.default_rng(children[-1])

    envs_list = [env_factory() for _ in range(config.n_envs)]
    obs_cur = [env.reset(int(env_rngs[e].integers(2**63))) for e, env in enumerate(envs_list)]

    recent_returns: deque = deque(maxlen=20)
    recent_success: deque = deque(maxlen=20)
    metrics = []

    for n in range(config.iterations):
        batch, finished = collect_rollouts(nets, envs_list, env_rngs, obs_cur, config)
        for ep_ret, ep_succ in finished:
            recent_returns.append(ep_ret)
            recent_success.append(1.0 if ep_succ else 0.0)
        compute_advantages(batch, value_net, config)

        adv = batch.advantages
        if config.normalize_advantages:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)

        N = batch.obs.shape[0]
        parts_acc = {"pg": 0.0, "v": 0.0, "ent": 0.0, "bc": 0.0}
        clip_hits = 0
        kl_sum = 0.0
        n_rows = 0
        n_mb = 0
        for _ in range(config.epochs):
            order = update_rng.permutation(N)
            for lo in range(0, N, config.minibatch_size):
                idx = order[lo : lo + config.minibatch_size]
                mb = MiniBatch(
                    obs=np.ascontiguousarray(batch.obs[idx]),
                    states=np.ascontiguousarray(batch.states[idx]),
                    old_logprobs=batch.old_logprobs[idx],
                    advantages=adv[idx],
                    returns=batch.returns[idx],
                    bc_noise=update_rng.standard_normal((idx.size, policy.d_a)),
                )
                with Graph() as g:
                    total, parts = stage2_loss(mb, nets, config, n)
                grads = g.backward(total)
                if config.grad_clip > 0:
                    clip_grad_norm(grads, config.grad_clip)
                opt.step(grads)
                rho = parts.pop("rho")
                clip_hits += int(np.sum(np.abs(rho - 1.0) > config.clip_eps))
                kl_sum += float(np.sum((rho - 1.0) - np.log(np.maximum(rho, 1e-300))))
                n_rows += idx.size
                n_mb += 1
                for k in parts_acc:
                    parts_acc[k] += parts[k]

        lam_bc = bc_schedule(n, config)
        metrics.append(
            {
                "iter": n,
                "mean_return": float(np.mean(recent_returns)) if recent_returns else 0.0,
                "success_rate": float(np.mean(recent_success)) if recent_success else 0.0,
                "pg": parts_acc["pg"] / max(n_mb, 1),
                "v": parts_acc["v"] / max(n_mb, 1),
                "ent": parts_acc["ent"] / max(n_mb, 1),
                "bc": parts_acc["bc"] / max(n_mb, 1),
                "lambda_bc": lam_bc,
                "clip_frac": clip_hits / max(n_rows, 1),
                "approx_kl": kl_sum / max(n_rows, 1),
            }
        )

    if metrics_path is not None:
        write_metrics_csv(metrics_path, METRIC_COLUMNS, metrics)
    return policy, value_net, metrics

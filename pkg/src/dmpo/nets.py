"""Velocity and value networks, seeded init, and the Adam update rule.

The velocity network u(z, r, tau, obs) is an observation encoder (2-layer
tanh MLP producing the conditional embedding h), sinusoidal features of the
two flow times, and a tanh trunk mapping concat(z, h, feat(r), feat(tau))
to an action-space velocity. The encoder output is what the dispersive
regularizers act on; trunk parameters never influence ``encode``.

Forward code is written against the autodiff ops, so the same method runs
traced (reverse mode), dual (forward mode), or plain. ``*_arrays`` variants
are inference-only fast paths over the fused kernels.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import kernels
from .autodiff import DualTensor, Tensor, concat, tanh

# Flow times enter the trunk raw. Sinusoidal embeddings (sin/cos of 2^j pi t)
# are value-blind at t in {0, 1} while their slopes peak there, which feeds
# unconstrained derivative noise into the directional-derivative target at
# the exact (r=0, tau=1) corner one-step sampling queries; a raw time input
# keeps the time-derivative pathway identified everywhere.
N_TIME_FEATS = 1


def time_features(t):
    """(B, 1) flow times -> (B, N_TIME_FEATS) trunk features."""
    return t


def time_features_arrays(t: np.ndarray) -> np.ndarray:
    return t


def _uniform_fan_in(rng: np.random.Generator, fan_in: int, fan_out: int):
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=fan_out)
    return np.ascontiguousarray(w), np.ascontiguousarray(b)


class _MLPBase:
    """Named-parameter container with cloning and checksum support."""

    param_names: tuple[str, ...]

    def __init__(self, params: dict[str, Tensor], dims: dict[str, int]):
        self.params = params
        self.dims = dims

    def parameters(self) -> list[Tensor]:
        return [self.params[n] for n in self.param_names]

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {n: self.params[n].data for n in self.param_names}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for n in self.param_names:
            a = np.ascontiguousarray(np.asarray(arrays[n], dtype=np.float64))
            if a.shape != self.params[n].data.shape:
                raise ValueError(f"parameter {n}: shape {a.shape} != {self.params[n].data.shape}")
            self.params[n].data[...] = a

    def clone(self):
        new = object.__new__(type(self))
        new.param_names = self.param_names
        new.params = {
            n: Tensor(self.params[n].data.copy(), requires_grad=True) for n in self.param_names
        }
        new.dims = dict(self.dims)
        return new


class VelocityNet(_MLPBase):
    """u(z, r, tau, obs): conditional-embedding encoder + time-conditioned trunk."""

    def __init__(self, params: dict[str, Tensor], dims: dict[str, int]):
        names = [f"enc{i}_{p}" for i in range(2) for p in ("w", "b")]
        names += [f"trunk{i}_{p}" for i in range(2) for p in ("w", "b")]
        names += ["out_w", "out_b"]
        self.param_names = tuple(names)
        super().__init__(params, dims)

    @property
    def d_obs(self):
        return self.dims["d_obs"]

    @property
    def d_a(self):
        return self.dims["d_a"]

    @property
    def d_h(self):
        return self.dims["d_h"]

    def encode(self, obs):
        """(B, d_obs) -> conditional embeddings (B, d_h), post-activation."""
        p = self.params
        h = tanh(obs @ p["enc0_w"] + p["enc0_b"])
        return tanh(h @ p["enc1_w"] + p["enc1_b"])

    def velocity(self, z, r, tau, obs=None, h=None):
        """Average-velocity prediction. r, tau are (B, 1); requires r <= tau."""
        rp = r.primal if isinstance(r, DualTensor) else r.data
        tp = tau.primal if isinstance(tau, DualTensor) else tau.data
        if np.any(rp > tp):
            raise ValueError("flow interval start r exceeds end tau")
        if h is None:
            if obs is None:
                raise ValueError("need obs or precomputed embedding h")
            h = self.encode(obs)
        p = self.params
        x = concat([z, h, time_features(r), time_features(tau)], axis=1)
        x = tanh(x @ p["trunk0_w"] + p["trunk0_b"])
        x = tanh(x @ p["trunk1_w"] + p["trunk1_b"])
        return x @ p["out_w"] + p["out_b"]

    # inference-only fast paths -------------------------------------------------

    def encode_arrays(self, obs: np.ndarray) -> np.ndarray:
        p = self.params
        obs = np.ascontiguousarray(obs)
        h = kernels.affine_tanh(obs, p["enc0_w"].data, p["enc0_b"].data)
        return kernels.affine_tanh(h, p["enc1_w"].data, p["enc1_b"].data)

    def velocity_arrays(self, z: np.ndarray, r: float, tau: float, h: np.ndarray) -> np.ndarray:
        """Batched plain-numpy forward with scalar times shared across rows."""
        if r > tau:
            raise ValueError("flow interval start r exceeds end tau")
        B = z.shape[0]
        tf = time_features_arrays(np.array([[r], [tau]]))
        x = np.concatenate(
            [z, h, np.broadcast_to(tf[0], (B, tf.shape[1])), np.broadcast_to(tf[1], (B, tf.shape[1]))],
            axis=1,
        )
        p = self.params
        x = kernels.affine_tanh(x, p["trunk0_w"].data, p["trunk0_b"].data)
        x = kernels.affine_tanh(x, p["trunk1_w"].data, p["trunk1_b"].data)
        return kernels.affine(x, p["out_w"].data, p["out_b"].data)


class ValueNet(_MLPBase):
    """V(obs): 2-hidden-layer tanh MLP to a scalar."""

    def __init__(self, params: dict[str, Tensor], dims: dict[str, int]):
        self.param_names = ("l0_w", "l0_b", "l1_w", "l1_b", "out_w", "out_b")
        super().__init__(params, dims)

    def value(self, obs):
        p = self.params
        x = tanh(obs @ p["l0_w"] + p["l0_b"])
        x = tanh(x @ p["l1_w"] + p["l1_b"])
        return (x @ p["out_w"] + p["out_b"]).reshape((-1,))

    def value_arrays(self, obs: np.ndarray) -> np.ndarray:
        p = self.params
        x = kernels.affine_tanh(obs, p["l0_w"].data, p["l0_b"].data)
        x = kernels.affine_tanh(x, p["l1_w"].data, p["l1_b"].data)
        return kernels.affine(x, p["out_w"].data, p["out_b"].data)[:, 0]


def init_velocity_net(
    seed: int,
    d_obs: int,
    d_a: int,
    d_h: int = 32,
    enc_width: int = 64,
    trunk_width: int = 64,
) -> VelocityNet:
    """Seeded uniform fan-in init; identical seeds give bit-identical nets."""
    dims = {"d_obs": d_obs, "d_a": d_a, "d_h": d_h, "enc_width": enc_width, "trunk_width": trunk_width}
    if min(dims.values()) < 1:
        raise ValueError(f"all dims must be positive: {dims}")
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    sizes = [(d_obs, enc_width), (enc_width, d_h)]
    for i, (fi, fo) in enumerate(sizes):
        arrays[f"enc{i}_w"], arrays[f"enc{i}_b"] = _uniform_fan_in(rng, fi, fo)
    d_in = d_a + d_h + 2 * N_TIME_FEATS
    sizes = [(d_in, trunk_width), (trunk_width, trunk_width)]
    for i, (fi, fo) in enumerate(sizes):
        arrays[f"trunk{i}_w"], arrays[f"trunk{i}_b"] = _uniform_fan_in(rng, fi, fo)
    arrays["out_w"], arrays["out_b"] = _uniform_fan_in(rng, trunk_width, d_a)
    params = {n: Tensor(a, requires_grad=True) for n, a in arrays.items()}
    return VelocityNet(params, dims)


def init_value_net(seed: int, d_obs: int, width: int = 64) -> ValueNet:
    dims = {"d_obs": d_obs, "width": width}
    if min(dims.values()) < 1:
        raise ValueError(f"all dims must be positive: {dims}")
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    for i, (fi, fo) in enumerate([(d_obs, width), (width, width)]):
        arrays[f"l{i}_w"], arrays[f"l{i}_b"] = _uniform_fan_in(rng, fi, fo)
    arrays["out_w"], arrays["out_b"] = _uniform_fan_in(rng, width, 1)
    params = {n: Tensor(a, requires_grad=True) for n, a in arrays.items()}
    return ValueNet(params, dims)


# module-level wrappers matching the operation contracts ------------------------


def encode(net: VelocityNet, obs_batch) -> Tensor:
    obs = obs_batch if isinstance(obs_batch, Tensor) else Tensor(obs_batch)
    if obs.data.ndim != 2 or obs.data.shape[1] != net.d_obs:
        raise ValueError(f"obs batch must be (B, {net.d_obs}), got {obs.data.shape}")
    return net.encode(obs)


def predict_velocity(net: VelocityNet, z, r, tau, obs) -> Tensor:
    """Single-sample convenience wrapper: z (d_a,), scalar times, obs (d_obs,)."""
    z_arr = np.asarray(z, dtype=np.float64).reshape(1, -1)
    o_arr = np.asarray(obs, dtype=np.float64).reshape(1, -1)
    if z_arr.shape[1] != net.d_a or o_arr.shape[1] != net.d_obs:
        raise ValueError(f"expected d_a={net.d_a}, d_obs={net.d_obs}")
    out = net.velocity(
        Tensor(z_arr),
        Tensor(np.full((1, 1), float(r))),
        Tensor(np.full((1, 1), float(tau))),
        obs=Tensor(o_arr),
    )
    return Tensor(out.data[0])


def param_checksum(net: _MLPBase) -> str:
    """Order-sensitive content hash of all parameters."""
    import hashlib

    m = hashlib.sha256()
    for n in net.param_names:
        m.update(n.encode())
        m.update(np.ascontiguousarray(net.params[n].data).tobytes())
    return m.hexdigest()


class Adam:
    """Adam with bias correction; state lives per parameter tensor."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros(p.data.size) for p in self.params]
        self._v = [np.zeros(p.data.size) for p in self.params]

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = grads.get(p)
            if g is None:
                continue
            flat = np.ascontiguousarray(g, dtype=np.float64).ravel()
            kernels.adam_update(
                p.data.ravel(), flat, m, v, self.lr, self.beta1, self.beta2, self.eps, bc1, bc2
            )

    def state_arrays(self) -> dict:
        return {
            "t": self.t,
            "m": [m.copy() for m in self._m],
            "v": [v.copy() for v in self._v],
        }


def clip_grad_norm(grads: dict[Tensor, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so the global L2 norm is <= max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm

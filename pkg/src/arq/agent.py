"""Deep deterministic policy gradient agent for the bit-width search.

Actor and critic are small two-hidden-layer ReLU networks with their own
Adam optimizers and soft-updated target copies.  The actor head squashes
through tanh onto [0,1] and its final layer starts at zero, so the untrained
action is exactly 0.5.  Episodes share a single terminal reward: transitions
are stored with the reward blank and become sample-able only once
``finalize_episode`` stamps the episode's reward onto all of them.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn

_CKPT_MAGIC = b"ARQDDPG"
_CKPT_VERSION = 1

STATE_DIM = 10


@dataclass
class AgentConfig:
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    explore_std0: float = 0.5
    explore_decay: float = 0.99
    tau: float = 0.01
    gamma: float = 1.0
    batch_size: int = 64
    warmup_episodes: int = 8
    buffer_capacity: int = 2048
    hidden: tuple = (64, 64)
    seed: int = 0

    def __post_init__(self):
        if self.actor_lr <= 0 or self.critic_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0,1]")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0,1]")


def exploration_std(cfg: AgentConfig, episode: int) -> float:
    """Noise scale for the given 0-based episode: std0 * decay**episode."""
    return cfg.explore_std0 * cfg.explore_decay ** episode


@dataclass
class Transition:
    state: np.ndarray
    action: float
    reward: float | None
    next_state: np.ndarray
    done: bool


class ReplayBuffer:
    """Ring buffer over finalized transitions; an open episode stays
    unsampleable until its shared reward arrives."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._store: list[Transition] = []
        self._cursor = 0
        self._open: list[Transition] = []

    def __len__(self) -> int:
        return len(self._store)

    def add(self, state, action, next_state, done) -> None:
        self._open.append(Transition(np.asarray(state, dtype=nn.REAL), float(action),
                                     None, np.asarray(next_state, dtype=nn.REAL),
                                     bool(done)))

    def finalize_episode(self, reward: float) -> None:
        """Stamp the episode reward on every open transition and commit them."""
        if not self._open:
            raise RuntimeError("no open episode to finalize")
        for tr in self._open:
            tr.reward = float(reward)
            if len(self._store) < self.capacity:
                self._store.append(tr)
            else:
                self._store[self._cursor] = tr
                self._cursor = (self._cursor + 1) % self.capacity
        self._open = []

    def open_count(self) -> int:
        return len(self._open)

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = rng.integers(0, len(self._store), size=batch_size)
        batch = [self._store[i] for i in idx]
        states = np.stack([t.state for t in batch])
        actions = np.array([[t.action] for t in batch], dtype=nn.REAL)
        rewards = np.array([t.reward for t in batch], dtype=nn.REAL)
        nexts = np.stack([t.next_state for t in batch])
        dones = np.array([t.done for t in batch], dtype=nn.REAL)
        return states, actions, rewards, nexts, dones


def build_state(layer: nn.LayerSpec, i_wa: int, a_prev: float,
                net: nn.Network) -> np.ndarray:
    """Ten-component observation for one (layer, weights-or-activations) slot.

    Structural features are min-max normalized over the network's quantizable
    layers; features constant across the network map to 0.  The binary flags
    and the previous action pass through raw.
    """
    if not layer.quantizable:
        raise ValueError(f"layer {layer.index} ({layer.kind}) is not quantizable")
    qspecs = [net.layers[k] for k in net.quantizable_indices()]

    def norm(value, values):
        lo, hi = min(values), max(values)
        return 0.0 if hi == lo else (value - lo) / (hi - lo)

    feats = [
        norm(layer.index, [s.index for s in qspecs]),
        norm(layer.c_in, [s.c_in for s in qspecs]),
        norm(layer.c_out, [s.c_out for s in qspecs]),
        norm(layer.kernel_size, [s.kernel_size for s in qspecs]),
        norm(layer.stride, [s.stride for s in qspecs]),
        norm(layer.input_feature_size, [s.input_feature_size for s in qspecs]),
        norm(layer.n_params, [s.n_params for s in qspecs]),
        float(layer.is_depthwise),
        float(i_wa),
        float(a_prev),
    ]
    return np.array(feats, dtype=nn.REAL)


class _Mlp:
    """Plain dense net (ReLU hidden, linear output) with Adam."""

    def __init__(self, sizes: tuple, rng: np.random.Generator,
                 zero_last: bool = False):
        self.sizes = tuple(sizes)
        self.w, self.b = [], []
        for i in range(len(sizes) - 1):
            fan_in = sizes[i]
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(sizes[i + 1], sizes[i]))
            if zero_last and i == len(sizes) - 2:
                w = np.zeros_like(w)
            self.w.append(w.astype(nn.REAL))
            self.b.append(np.zeros(sizes[i + 1], dtype=nn.REAL))
        self._adam_m = [np.zeros_like(a) for a in self.w + self.b]
        self._adam_v = [np.zeros_like(a) for a in self.w + self.b]
        self._adam_t = 0

    def forward(self, x: np.ndarray):
        acts = [np.asarray(x, dtype=nn.REAL)]
        for i, (w, b) in enumerate(zip(self.w, self.b)):
            z = acts[-1] @ w.T + b
            acts.append(np.maximum(z, 0.0) if i < len(self.w) - 1 else z)
        return acts[-1], acts

    def backward(self, acts, dout):
        """Returns (input grads, parameter grads) without touching params."""
        gw = [None] * len(self.w)
        gb = [None] * len(self.b)
        da = dout
        for i in reversed(range(len(self.w))):
            if i < len(self.w) - 1:
                da = da * (acts[i + 1] > 0)
            gw[i] = da.T @ acts[i]
            gb[i] = da.sum(axis=0)
            da = da @ self.w[i]
        return da, gw + gb

    def adam_step(self, grads, lr, beta1, beta2, eps):
        self._adam_t += 1
        t = self._adam_t
        params = self.w + self.b
        for p, g, m, v in zip(params, grads, self._adam_m, self._adam_v):
            m *= beta1
            m += (1 - beta1) * g
            v *= beta2
            v += (1 - beta2) * g * g
            mhat = m / (1 - beta1 ** t)
            vhat = v / (1 - beta2 ** t)
            p -= lr * mhat / (np.sqrt(vhat) + eps)

    def soft_update_from(self, other: "_Mlp", tau: float):
        for mine, theirs in zip(self.w + self.b, other.w + other.b):
            mine *= 1.0 - tau
            mine += tau * theirs

    def copy_from(self, other: "_Mlp"):
        self.w = [w.copy() for w in other.w]
        self.b = [b.copy() for b in other.b]


def _actor_head(z: np.ndarray):
    t = np.tanh(z)
    return 0.5 * (t + 1.0), 0.5 * (1.0 - t * t)


class DdpgAgent:
    def __init__(self, cfg: AgentConfig):
        self.cfg = cfg
        root = np.random.SeedSequence(cfg.seed)
        init_ss, self._noise_ss, self._sample_ss = root.spawn(3)
        init_rng = np.random.default_rng(init_ss)
        sizes_a = (STATE_DIM, *cfg.hidden, 1)
        sizes_c = (STATE_DIM + 1, *cfg.hidden, 1)
        self.actor = _Mlp(sizes_a, init_rng, zero_last=True)
        self.critic = _Mlp(sizes_c, init_rng)
        self.actor_targ = _Mlp(sizes_a, init_rng)
        self.critic_targ = _Mlp(sizes_c, init_rng)
        self.actor_targ.copy_from(self.actor)
        self.critic_targ.copy_from(self.critic)
        self.noise_rng = np.random.default_rng(self._noise_ss)
        self.sample_rng = np.random.default_rng(self._sample_ss)
        self.buffer = ReplayBuffer(cfg.buffer_capacity)
        self.episodes_done = 0

    # -- acting ------------------------------------------------------------

    def policy_action(self, obs: np.ndarray) -> float:
        z, _ = self.actor.forward(np.asarray(obs, dtype=nn.REAL)[None])
        a, _ = _actor_head(z)
        return float(a[0, 0])

    def act(self, obs: np.ndarray, explore_std: float) -> float:
        """mu(obs) plus truncated-normal exploration, always inside [0,1].

        The noise is rejection-sampled to keep mu + eps in range; after 16
        failed draws the sum is clipped instead.
        """
        mu = self.policy_action(obs)
        if explore_std <= 0:
            return min(1.0, max(0.0, mu))
        for _ in range(16):
            a = mu + explore_std * self.noise_rng.standard_normal()
            if 0.0 <= a <= 1.0:
                return a
        return min(1.0, max(0.0, a))

    # -- learning ----------------------------------------------------------

    def update(self, batch=None):
        """One critic + actor Adam step and a soft target update.

        ``batch`` defaults to a uniform sample from the replay buffer; when
        the buffer holds fewer than batch_size finalized transitions the
        update is skipped and None is returned as the signal.
        """
        cfg = self.cfg
        if batch is None:
            if len(self.buffer) < cfg.batch_size:
                return None
            batch = self.buffer.sample(cfg.batch_size, self.sample_rng)
        states, actions, rewards, nexts, dones = batch
        bsz = states.shape[0]

        z_next, _ = self.actor_targ.forward(nexts)
        a_next, _ = _actor_head(z_next)
        q_next, _ = self.critic_targ.forward(np.concatenate([nexts, a_next], axis=1))
        y = rewards[:, None] + (1.0 - dones[:, None]) * cfg.gamma * q_next

        cin = np.concatenate([states, actions], axis=1)
        q, acts_c = self.critic.forward(cin)
        critic_loss = float(np.mean((q - y) ** 2))
        _, grads_c = self.critic.backward(acts_c, 2.0 * (q - y) / bsz)
        self.critic.adam_step(grads_c, cfg.critic_lr, cfg.adam_beta1,
                              cfg.adam_beta2, cfg.adam_eps)

        z_a, acts_a = self.actor.forward(states)
        a_pred, dhead = _actor_head(z_a)
        q2, acts_c2 = self.critic.forward(np.concatenate([states, a_pred], axis=1))
        actor_objective = float(np.mean(q2))
        din, _ = self.critic.backward(acts_c2, np.full_like(q2, -1.0 / bsz))
        dz = din[:, STATE_DIM:] * dhead
        _, grads_a = self.actor.backward(acts_a, dz)
        self.actor.adam_step(grads_a, cfg.actor_lr, cfg.adam_beta1,
                             cfg.adam_beta2, cfg.adam_eps)

        self.actor_targ.soft_update_from(self.actor, cfg.tau)
        self.critic_targ.soft_update_from(self.critic, cfg.tau)
        return critic_loss, actor_objective

    def finalize_episode(self, reward: float, train: bool = True):
        """Close the episode, then (past warmup) run one update per stored
        transition of the episode."""
        n_new = self.buffer.open_count()
        self.buffer.finalize_episode(reward)
        self.episodes_done += 1
        if train and self.episodes_done >= self.cfg.warmup_episodes:
            for _ in range(n_new):
                self.update()


# ---------------------------------------------------------------------------
# checkpointing


def _rng_state(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    return {
        "state": str(st["state"]["state"]),
        "inc": str(st["state"]["inc"]),
        "has_uint32": st["has_uint32"],
        "uinteger": st["uinteger"],
    }


def _set_rng_state(rng: np.random.Generator, d: dict) -> None:
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(d["state"]), "inc": int(d["inc"])},
        "has_uint32": d["has_uint32"],
        "uinteger": d["uinteger"],
    }


def _net_arrays(net: _Mlp, prefix: str, out: dict) -> None:
    for i, w in enumerate(net.w):
        out[f"{prefix}_w{i}"] = w
    for i, b in enumerate(net.b):
        out[f"{prefix}_b{i}"] = b
    for i, m in enumerate(net._adam_m):
        out[f"{prefix}_m{i}"] = m
    for i, v in enumerate(net._adam_v):
        out[f"{prefix}_v{i}"] = v


def save_agent(agent: DdpgAgent, path) -> None:
    arrays: dict = {}
    for name, netobj in (("actor", agent.actor), ("critic", agent.critic),
                         ("actor_targ", agent.actor_targ),
                         ("critic_targ", agent.critic_targ)):
        _net_arrays(netobj, name, arrays)
    store = agent.buffer._store
    if store:
        arrays["buf_states"] = np.stack([t.state for t in store])
        arrays["buf_actions"] = np.array([t.action for t in store])
        arrays["buf_rewards"] = np.array([t.reward for t in store])
        arrays["buf_nexts"] = np.stack([t.next_state for t in store])
        arrays["buf_dones"] = np.array([float(t.done) for t in store])
    header = {
        "config": {**agent.cfg.__dict__, "hidden": list(agent.cfg.hidden)},
        "episodes_done": agent.episodes_done,
        "adam_t": {"actor": agent.actor._adam_t, "critic": agent.critic._adam_t},
        "buffer_cursor": agent.buffer._cursor,
        "noise_rng": _rng_state(agent.noise_rng),
        "sample_rng": _rng_state(agent.sample_rng),
        "arrays": [],
    }
    blob = bytearray()
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        header["arrays"].append({"name": name, "shape": list(arr.shape),
                                 "offset": len(blob), "nbytes": len(raw)})
        blob.extend(raw)
    head = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(head)))
        fh.write(head)
        fh.write(bytes(blob))


def load_agent(path) -> DdpgAgent:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:7] != _CKPT_MAGIC:
        raise ValueError("not an ARQDDPG checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", blob, 7)
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported ARQDDPG version {version}")
    header = json.loads(blob[15:15 + hlen].decode())
    data = blob[15 + hlen:]
    arrays = {}
    for meta in header["arrays"]:
        arr = np.frombuffer(data, dtype="<f8",
                            count=int(np.prod(meta["shape"])) if meta["shape"] else 1,
                            offset=meta["offset"])
        arrays[meta["name"]] = arr.reshape(meta["shape"]).copy()
    cfg_d = dict(header["config"])
    cfg_d["hidden"] = tuple(cfg_d["hidden"])
    agent = DdpgAgent(AgentConfig(**cfg_d))
    for name, netobj in (("actor", agent.actor), ("critic", agent.critic),
                         ("actor_targ", agent.actor_targ),
                         ("critic_targ", agent.critic_targ)):
        for i in range(len(netobj.w)):
            netobj.w[i] = arrays[f"{name}_w{i}"]
            netobj.b[i] = arrays[f"{name}_b{i}"]
        flat = netobj.w + netobj.b
        netobj._adam_m = [arrays[f"{name}_m{i}"].reshape(flat[i].shape)
                          for i in range(len(flat))]
        netobj._adam_v = [arrays[f"{name}_v{i}"].reshape(flat[i].shape)
                          for i in range(len(flat))]
    agent.actor._adam_t = header["adam_t"]["actor"]
    agent.critic._adam_t = header["adam_t"]["critic"]
    agent.episodes_done = header["episodes_done"]
    agent.buffer._cursor = header["buffer_cursor"]
    if "buf_states" in arrays:
        n = len(arrays["buf_actions"])
        agent.buffer._store = [
            Transition(arrays["buf_states"][i], float(arrays["buf_actions"][i]),
                       float(arrays["buf_rewards"][i]), arrays["buf_nexts"][i],
                       bool(arrays["buf_dones"][i]))
            for i in range(n)
        ]
    _set_rng_state(agent.noise_rng, header["noise_rng"])
    _set_rng_state(agent.sample_rng, header["sample_rng"])
    return agent

"""Twin-critic offloading agent with delayed updates and dual distillation.

Two peer agents explore the allocation problem from differently seeded
environments.  Each runs clipped-noise target smoothing, a min-of-two-target
TD backup, critic regression every step, and actor / target / distillation
updates on even step counts.  Distillation regresses the actor toward the
peer's actions, weighted by the exponentiated advantage of the peer's
twin-critic value over one's own.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .env import AllocationAction, EconParams, RadioParams, RegionState
from .errors import DivergenceError
from .nn import Network, soft_update

# ---------------------------------------------------------------------------
# State / action codecs
# ---------------------------------------------------------------------------

def state_dim(n_max: int) -> int:
    # [bandwidth, vm_count, n_users] + rate demands + compute demands
    # + [upload power] + validity mask
    return 4 + 3 * n_max


def action_dim(n_max: int) -> int:
    return 2 * n_max


def encode_state(region: RegionState, radio: RadioParams, econ: EconParams,
                 n_max: int) -> np.ndarray:
    """Flat observation: rented resources, user count, per-user uplink-rate
    and compute demands (zero-padded), upload power, validity mask."""
    n = len(region.tasks)
    if n > n_max:
        raise ValueError(f"{n} users exceed the padding bound {n_max}")
    rate_demand = np.zeros(n_max)
    compute_demand = np.zeros(n_max)
    mask = np.zeros(n_max)
    for j, task in enumerate(region.tasks):
        rate_demand[j] = task.data_size / (econ.deadline * radio.spectral_efficiency(task.distance))
        compute_demand[j] = task.work / econ.deadline
        mask[j] = 1.0
    return np.concatenate([
        [region.bandwidth, float(region.vm_count), float(n)],
        rate_demand, compute_demand, [radio.upload_power], mask])


def decode_action(raw: np.ndarray, bandwidth: float, vm_count: int,
                  n_users: int) -> AllocationAction:
    """Map a [0,1]^(2*n_max) vector to fractions and VM indices for the
    first ``n_users`` entries; over-committed fractions are rescaled."""
    raw = np.clip(np.asarray(raw, dtype=float), 0.0, 1.0)
    n_max = raw.size // 2
    fractions = raw[:n_max][:n_users].copy()
    total = fractions.sum()
    if total > 1.0:
        fractions /= total
    vm = np.minimum((raw[n_max:][:n_users] * vm_count).astype(int), vm_count - 1)
    return AllocationAction(bw_fraction=fractions, vm_index=vm)


def feature_scale(n_max: int, bw_ref: float, rate_ref: float,
                  compute_ref: float, power_ref: float) -> np.ndarray:
    """Per-feature divisors that bring observations to unit scale.

    bw_ref sizes the rented-bandwidth feature, rate_ref the per-user uplink
    demands, compute_ref the per-user cycle demands."""
    scale = np.ones(state_dim(n_max))
    scale[0] = bw_ref
    scale[1] = 2.0
    scale[2] = n_max
    scale[3:3 + n_max] = rate_ref
    scale[3 + n_max:3 + 2 * n_max] = compute_ref
    scale[3 + 2 * n_max] = power_ref
    return scale


# ---------------------------------------------------------------------------
# Replay buffer
# ---------------------------------------------------------------------------

class ReplayBuffer:
    """Fixed-capacity ring of (s, a, r, s') transitions, sampled uniformly."""

    def __init__(self, capacity: int, state_size: int, action_size: int):
        self.capacity = capacity
        self.states = np.zeros((capacity, state_size))
        self.actions = np.zeros((capacity, action_size))
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_size))
        self._write = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, s, a, r, s2) -> None:
        i = self._write
        self.states[i] = s
        self.actions[i] = a
        self.rewards[i] = r
        self.next_states[i] = s2
        self._write = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, rng: np.random.Generator, batch_size: int):
        idx = rng.integers(0, self._size, size=batch_size)
        return (self.states[idx], self.actions[idx],
                self.rewards[idx], self.next_states[idx])


# ---------------------------------------------------------------------------
# Agent bundle
# ---------------------------------------------------------------------------

@dataclass
class AgentHyperparams:
    gamma: float = 0.99
    tau: float = 0.005
    critic_lr: float = 1e-3
    actor_lr: float = 1e-4
    distill_lr: float = 1e-4
    batch_size: int = 64
    buffer_capacity: int = 50_000
    noise_start: float = 0.3
    noise_end: float = 0.05
    noise_decay_steps: int = 20_000
    smooth_std: float = 0.2
    smooth_clip: float = 0.5
    distill_alpha: float = 1.0
    hidden: tuple = (64, 64)
    epochs: int = 150
    warmup: int = 500


# ---------------------------------------------------------------------------
# Permutation-equivariant actor / critic blocks
#
# Rewards decompose per user, so both networks apply one shared dense block
# to every padded user slot (its own demand features plus instance-level
# aggregates) instead of learning separate weights per slot position.  The
# critic's Q-value is the mask-weighted sum of per-slot outputs.
# ---------------------------------------------------------------------------

_STATE_COLS = 12   # per-slot state features fed to both blocks
_MARGIN_CAP = 6.0  # allocated-over-needed ratio is clipped here
_SHARE_CAP = 2.0   # needed budget shares are clipped here


class _TaskBlock:
    """Shared plumbing: split raw observations into per-slot feature rows.

    ``frequency`` is the VM cycle rate of the deployment, used to fold the
    execution-time share of the deadline into bandwidth-need features."""

    def __init__(self, net: Network, n_max: int, state_scale: np.ndarray,
                 frequency: float = 1e9):
        self.net = net
        self.n_max = n_max
        self.state_scale = np.asarray(state_scale, dtype=float)
        self.frequency = frequency

    @property
    def params(self) -> dict:
        return self.net.params

    def apply_gradients(self, grads: dict, lr: float) -> None:
        self.net.apply_gradients(grads, lr)

    def _parse(self, states: np.ndarray):
        states = np.atleast_2d(np.asarray(states, dtype=float))
        n = self.n_max
        scaled = states / self.state_scale
        raw_bw = states[:, 0]
        # Upload-rate need corrected for the deadline share consumed by
        # execution plus the mean-field backlog of earlier arrivals (their
        # execution shares spread over the rented VMs).  Smooth in the
        # state and independent of the VM selectors.
        raw_rates = states[:, 3:3 + n]
        exe_share = np.clip(states[:, 3 + n:3 + 2 * n] / self.frequency, 0.0, 0.95)
        mask = states[:, 4 + 2 * n:4 + 3 * n]
        active_exe = exe_share * mask
        backlog = ((np.cumsum(active_exe, axis=1) - active_exe)
                   / np.maximum(states[:, [1]], 1.0))
        free = np.clip(1.0 - exe_share - backlog, 0.05, None)
        corrected = raw_rates / free
        return states, scaled, raw_bw, corrected

    def _state_rows(self, states: np.ndarray):
        """(K, n_max, _STATE_COLS) feature rows shared by actor and critic."""
        states, scaled, raw_bw, needed = self._parse(states)
        k, n = states.shape[0], self.n_max
        rows = np.empty((k, n, _STATE_COLS))
        rows[:, :, 0] = scaled[:, [0]]                      # rented bandwidth
        rows[:, :, 1] = scaled[:, [1]]                      # rented VMs
        rows[:, :, 2] = scaled[:, [2]]                      # user count
        rows[:, :, 3] = scaled[:, [3 + 2 * n]]              # upload power
        rows[:, :, 4] = scaled[:, 3:3 + n]                  # own rate demand
        rows[:, :, 5] = scaled[:, 3 + n:3 + 2 * n]          # own compute demand
        mask = states[:, 4 + 2 * n:4 + 3 * n]
        rows[:, :, 6] = mask                                # validity
        rows[:, :, 7] = np.arange(n) / n                    # slot position
        safe_bw = np.maximum(raw_bw, 1e-9)[:, None]
        share = np.minimum(needed / safe_bw, _SHARE_CAP)
        rows[:, :, 8] = share                               # needed budget share
        rows[:, :, 9] = np.minimum(share.sum(axis=1, keepdims=True), 4.0)
        rows[:, :, 10] = (scaled[:, 3 + n:3 + 2 * n].sum(axis=1, keepdims=True)
                          / np.maximum(states[:, [1]], 1.0))
        rank = np.argsort(np.argsort(share + (1 - mask) * 99.0, axis=1,
                                     kind="stable"), axis=1, kind="stable")
        rows[:, :, 11] = rank / n                           # cheapness rank
        return rows, mask


class TaskBlockActor(_TaskBlock):
    """Maps observations to [0,1]^(2*n_max): fractions then VM selectors."""

    def copy(self) -> "TaskBlockActor":
        return TaskBlockActor(self.net.copy(), self.n_max, self.state_scale,
                              self.frequency)

    def forward(self, states: np.ndarray, return_cache: bool = False):
        single = np.asarray(states).ndim == 1
        rows, _ = self._state_rows(states)
        k = rows.shape[0]
        flat = rows.reshape(k * self.n_max, _STATE_COLS)
        out, cache = self.net.forward(flat, return_cache=True)
        pair = out.reshape(k, self.n_max, 2)
        actions = np.concatenate([pair[:, :, 0], pair[:, :, 1]], axis=1)
        if single:
            actions = actions[0]
        if return_cache:
            return actions, {"net": cache, "k": k, "single": single}
        return actions

    def backward(self, cache, d_actions: np.ndarray) -> dict:
        d_actions = np.atleast_2d(np.asarray(d_actions, dtype=float))
        k, n = cache["k"], self.n_max
        d_pair = np.empty((k, n, 2))
        d_pair[:, :, 0] = d_actions[:, :n]
        d_pair[:, :, 1] = d_actions[:, n:]
        grads, _ = self.net.backward(cache["net"], d_pair.reshape(k * n, 2))
        return grads


class TaskBlockCritic(_TaskBlock):
    """Q(s, a) as a masked sum of per-slot scores.

    Each slot sees the shared state features plus its own fraction, VM
    selector, the total committed fraction, and its post-projection
    allocated-over-needed bandwidth margin."""

    IN_COLS = _STATE_COLS + 4

    def copy(self) -> "TaskBlockCritic":
        return TaskBlockCritic(self.net.copy(), self.n_max, self.state_scale,
                              self.frequency)

    def _rows(self, states, actions):
        states_arr, _, raw_bw, corrected_need = self._parse(states)
        actions = np.atleast_2d(np.asarray(actions, dtype=float))
        k, n = states_arr.shape[0], self.n_max
        state_rows, mask = self._state_rows(states)
        fractions = actions[:, :n]
        selectors = actions[:, n:]
        total = fractions.sum(axis=1)
        denom = np.maximum(total, 1.0)
        needed = np.maximum(corrected_need, 1e-9 * np.maximum(raw_bw, 1.0)[:, None])
        ratio = np.maximum(raw_bw, 1e-9)[:, None] / needed
        margin_raw = fractions * ratio / denom[:, None]
        clipped = margin_raw > _MARGIN_CAP
        margin = np.where(clipped, _MARGIN_CAP, margin_raw)
        rows = np.empty((k, n, self.IN_COLS))
        rows[:, :, :_STATE_COLS] = state_rows
        rows[:, :, _STATE_COLS + 0] = fractions
        rows[:, :, _STATE_COLS + 1] = selectors
        rows[:, :, _STATE_COLS + 2] = total[:, None]
        rows[:, :, _STATE_COLS + 3] = margin
        aux = {"mask": mask, "fractions": fractions, "total": total,
               "denom": denom, "ratio": ratio, "clipped": clipped, "k": k}
        return rows, aux

    def forward(self, states, actions, return_cache: bool = False):
        rows, aux = self._rows(states, actions)
        k, n = aux["k"], self.n_max
        out, cache = self.net.forward(rows.reshape(k * n, self.IN_COLS),
                                      return_cache=True)
        values = (out.reshape(k, n) * aux["mask"]).sum(axis=1)
        if return_cache:
            return values, {"net": cache, "aux": aux}
        return values

    def backward(self, cache, d_values: np.ndarray):
        """Gradients of sum(d_values * Q) w.r.t. parameters and actions."""
        aux = cache["aux"]
        k, n = aux["k"], self.n_max
        d_values = np.asarray(d_values, dtype=float).reshape(k)
        d_out = (d_values[:, None] * aux["mask"]).reshape(k * n, 1)
        grads, d_rows_flat = self.net.backward(cache["net"], d_out)
        d_rows = d_rows_flat.reshape(k, n, self.IN_COLS)
        d_actions = np.zeros((k, 2 * n))
        d_actions[:, n:] = d_rows[:, :, _STATE_COLS + 1]
        d_frac = d_rows[:, :, _STATE_COLS + 0].copy()
        # Total-commitment column reaches every fraction of the sample.
        d_frac += d_rows[:, :, _STATE_COLS + 2].sum(axis=1, keepdims=True)
        # Margin column: m_j = f_j * ratio_j / max(1, sum f).
        d_margin = np.where(aux["clipped"], 0.0, d_rows[:, :, _STATE_COLS + 3])
        denom = aux["denom"]
        d_frac += d_margin * aux["ratio"] / denom[:, None]
        over = aux["total"] > 1.0
        if np.any(over):
            # d m_j / d f_i = -f_j ratio_j / S^2 for every i when S > 1.
            coeff = (d_margin * aux["fractions"] * aux["ratio"]).sum(axis=1)
            correction = np.where(over, coeff / denom ** 2, 0.0)
            d_frac -= correction[:, None]
        d_actions[:, :n] = d_frac
        return grads, d_actions


@dataclass
class AgentBundle:
    """One agent's actor, twin critics and their target copies."""

    actor: TaskBlockActor
    critic1: TaskBlockCritic
    critic2: TaskBlockCritic
    target_actor: TaskBlockActor
    target_critic1: TaskBlockCritic
    target_critic2: TaskBlockCritic
    state_scale: np.ndarray
    n_max: int
    noise_scale: float = 0.3
    step_count: int = 0
    distill_alpha: float = 1.0


def make_agent(n_max: int, state_scale: np.ndarray, hidden=(64, 64),
               rng: np.random.Generator | None = None,
               noise_scale: float = 0.3, distill_alpha: float = 1.0,
               frequency: float = 1e9) -> AgentBundle:
    rng = rng if rng is not None else np.random.default_rng(0)
    scale = np.asarray(state_scale, dtype=float)
    actor_acts = ("relu",) * len(hidden) + ("sigmoid",)
    critic_acts = ("relu",) * len(hidden) + ("identity",)
    actor = TaskBlockActor(
        Network.initialize((_STATE_COLS, *hidden, 2), actor_acts, rng),
        n_max, scale, frequency)
    critic1 = TaskBlockCritic(
        Network.initialize((TaskBlockCritic.IN_COLS, *hidden, 1), critic_acts, rng),
        n_max, scale, frequency)
    critic2 = TaskBlockCritic(
        Network.initialize((TaskBlockCritic.IN_COLS, *hidden, 1), critic_acts, rng),
        n_max, scale, frequency)
    return AgentBundle(
        actor=actor, critic1=critic1, critic2=critic2,
        target_actor=actor.copy(), target_critic1=critic1.copy(),
        target_critic2=critic2.copy(), state_scale=scale,
        n_max=n_max, noise_scale=noise_scale, distill_alpha=distill_alpha)


# ---------------------------------------------------------------------------
# Core update operations
# ---------------------------------------------------------------------------

def act(agent: AgentBundle, state: np.ndarray, explore: bool,
        rng: np.random.Generator | None = None, clip: bool = True) -> np.ndarray:
    """Deterministic policy output, plus Gaussian exploration noise when
    exploring; clipped back to the unit box unless clip=False."""
    a = agent.actor.forward(state)
    if explore:
        if rng is None:
            raise ValueError("exploration requires an rng")
        a = a + rng.normal(0.0, agent.noise_scale, size=a.shape)
    return np.clip(a, 0.0, 1.0) if clip else a


def td_target(agent: AgentBundle, batch, gamma: float, smooth_std: float,
              smooth_clip: float, rng: np.random.Generator) -> np.ndarray:
    """Backup values: reward plus the discounted minimum of the two target
    critics at the smoothed target action."""
    _, _, rewards, next_states = batch
    a2 = agent.target_actor.forward(next_states)
    noise = np.clip(rng.normal(0.0, smooth_std, size=a2.shape),
                    -smooth_clip, smooth_clip)
    a2 = np.clip(a2 + noise, 0.0, 1.0)
    q1 = agent.target_critic1.forward(next_states, a2)
    q2 = agent.target_critic2.forward(next_states, a2)
    return rewards + gamma * np.minimum(q1, q2)


def update_critics(agent: AgentBundle, batch, targets: np.ndarray,
                   lr: float) -> tuple:
    """One squared-error regression step per critic toward fixed targets."""
    states, actions, _, _ = batch
    k = np.atleast_2d(states).shape[0]
    losses = []
    for critic in (agent.critic1, agent.critic2):
        pred, cache = critic.forward(states, actions, return_cache=True)
        err = pred - targets
        loss = float(err @ err) / k
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite critic loss {loss}")
        grads, _ = critic.backward(cache, 2.0 * err / k)
        critic.apply_gradients(grads, lr)
        losses.append(loss)
    return tuple(losses)


def update_actor(agent: AgentBundle, batch, actor_lr: float, tau: float) -> bool:
    """Deterministic policy-gradient ascent on the first critic, applied
    only on even step counts; target networks track on the same schedule.

    Returns whether the update was applied."""
    if agent.step_count % 2 != 0:
        return False
    states = batch[0]
    k = np.atleast_2d(states).shape[0]
    actions, actor_cache = agent.actor.forward(states, return_cache=True)
    _, critic_cache = agent.critic1.forward(states, actions, return_cache=True)
    # Ascent on mean Q == descent on -mean Q; only the action-side gradient
    # of the critic reaches the actor.
    _, d_actions = agent.critic1.backward(critic_cache, -np.ones(k) / k)
    grads = agent.actor.backward(actor_cache, d_actions)
    agent.actor.apply_gradients(grads, actor_lr)
    soft_update(agent.target_actor.net, agent.actor.net, tau)
    soft_update(agent.target_critic1.net, agent.critic1.net, tau)
    soft_update(agent.target_critic2.net, agent.critic2.net, tau)
    return True


def value_estimate(agent: AgentBundle, states: np.ndarray) -> np.ndarray:
    """Twin-critic value of the agent's own deterministic action: the
    elementwise minimum of the two online critics."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    a = agent.actor.forward(states)
    q1 = agent.critic1.forward(states, a)
    q2 = agent.critic2.forward(states, a)
    return np.minimum(q1, q2)


def advantage(peer: AgentBundle, current: AgentBundle, state: np.ndarray):
    """Peer-minus-current value gap at a state (positive: peer looks better).

    Each side is judged by its own twin critics at its own action."""
    state = np.asarray(state, dtype=float)
    if state.ndim == 1:
        return float(value_estimate(peer, state)[0] - value_estimate(current, state)[0])
    return value_estimate(peer, state) - value_estimate(current, state)


def distill_weight(alpha: float, xi) -> np.ndarray:
    """Confidence weight exp(alpha * advantage), exponent clipped to +-50
    so extreme value gaps stay finite."""
    return np.exp(np.clip(alpha * np.asarray(xi, dtype=float), -50.0, 50.0))


def distill(current: AgentBundle, peer: AgentBundle, batch,
            lr: float) -> float:
    """One plain gradient step on the advantage-weighted regression of the
    current actor toward the (frozen) peer actor over the batch states.

    A vanilla step (not adaptive moments) keeps the update magnitude
    proportional to the confidence weight, so near-zero weights leave the
    parameters essentially untouched.  Weights far above 1 are normalized
    batch-wide, preserving their relative ordering."""
    states = np.atleast_2d(np.asarray(batch[0], dtype=float))
    k = states.shape[0]
    xi = advantage(peer, current, states)
    w = distill_weight(current.distill_alpha, xi)
    w = w / max(1.0, float(w.mean()))
    out, cache = current.actor.forward(states, return_cache=True)
    target = peer.actor.forward(states)
    diff = out - target
    loss = float(0.5 * ((diff ** 2).sum(axis=1) * w).mean())
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite distillation loss {loss}")
    grads = current.actor.backward(cache, diff * w[:, None] / k)
    for name, g in grads.items():
        current.actor.params[name] -= lr * g
    return loss


def hybrid_policy(current: AgentBundle, peer: AgentBundle,
                  state: np.ndarray) -> np.ndarray:
    """State-wise selector between the two deterministic policies: follow
    whichever agent's twin-critic value is higher (the peer on a strictly
    positive peer advantage)."""
    xi = advantage(peer, current, state)
    chosen = peer if xi > 0 else current
    return act(chosen, state, explore=False)


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

_NETS = ("actor", "critic1", "critic2", "target_actor",
         "target_critic1", "target_critic2")


def save_agent(agent: AgentBundle, path) -> None:
    arrays = {"state_scale": agent.state_scale}
    meta = {
        "format": "agent",
        "n_max": agent.n_max,
        "noise_scale": agent.noise_scale,
        "step_count": agent.step_count,
        "distill_alpha": agent.distill_alpha,
        "frequency": agent.actor.frequency,
        "nets": {},
    }
    for net_name in _NETS:
        net: Network = getattr(agent, net_name).net
        meta["nets"][net_name] = {"dims": list(net.dims),
                                  "activations": list(net.activations)}
        for pname, arr in net.params.items():
            arrays[f"{net_name}.{pname}"] = arr
    checkpoint.save_arrays(path, arrays, meta)


def load_agent(path) -> AgentBundle:
    arrays, meta = checkpoint.load_arrays(path)
    if meta.get("format") != "agent":
        raise ValueError(f"{path}: not an agent checkpoint")
    scale = arrays["state_scale"]
    n_max = meta["n_max"]
    wrappers = {}
    for net_name in _NETS:
        spec = meta["nets"][net_name]
        params = {k.split(".", 1)[1]: v for k, v in arrays.items()
                  if k.startswith(f"{net_name}.")}
        net = Network(tuple(spec["dims"]), tuple(spec["activations"]), params)
        wrapper_cls = TaskBlockActor if "actor" in net_name else TaskBlockCritic
        wrappers[net_name] = wrapper_cls(net, n_max, scale,
                                         meta.get("frequency", 1e9))
    return AgentBundle(
        state_scale=scale, n_max=n_max,
        noise_scale=meta["noise_scale"], step_count=meta["step_count"],
        distill_alpha=meta["distill_alpha"], **wrappers)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class CurveRow:
    epoch: int
    step: int
    critic_loss1: float
    critic_loss2: float
    actor_objective: float
    eval_reward: float

    CSV_HEADER = ("epoch", "step", "critic_loss1", "critic_loss2",
                  "actor_objective", "eval_reward")

    def as_row(self):
        return (self.epoch, self.step, self.critic_loss1, self.critic_loss2,
                self.actor_objective, self.eval_reward)


def greedy_episode_reward(agent: AgentBundle, env) -> float:
    """Total reward of one deterministic episode on an evaluation env."""
    s = env.reset()
    total = 0.0
    done = False
    while not done:
        r, s, done = env.step(act(agent, s, explore=False))
        total += r
    return total


@dataclass
class _Side:
    agent: AgentBundle
    env: object
    buffer: ReplayBuffer
    noise_rng: np.random.Generator
    sample_rng: np.random.Generator
    smooth_rng: np.random.Generator
    state: np.ndarray = None
    curves: list = field(default_factory=list)


def train(env_current, env_peer, hp: AgentHyperparams, n_max: int,
          state_scale: np.ndarray, seed: int = 0,
          eval_env_current=None, eval_env_peer=None, eval_every: int = 10):
    """Full dual-agent loop: explore, store, regress critics every step,
    update actor / targets / distillation on even steps, symmetrically for
    the peer.  Deterministic given the seed and the envs' own seeding.

    Returns (current agent, peer agent, current curves, peer curves).
    """
    ss = np.random.SeedSequence(seed)
    keys = [np.random.default_rng(s) for s in ss.spawn(8)]
    frequency = float(getattr(env_current, "vm_frequency", 1e9))
    sides = []
    for idx, env in enumerate((env_current, env_peer)):
        agent = make_agent(n_max, state_scale, hidden=tuple(hp.hidden),
                           rng=keys[idx], noise_scale=hp.noise_start,
                           distill_alpha=hp.distill_alpha, frequency=frequency)
        buffer = ReplayBuffer(hp.buffer_capacity, state_dim(n_max), action_dim(n_max))
        sides.append(_Side(agent=agent, env=env, buffer=buffer,
                           noise_rng=keys[2 + idx], sample_rng=keys[4 + idx],
                           smooth_rng=keys[6 + idx]))
    eval_envs = (eval_env_current, eval_env_peer)
    # Rewards are normalized into the critics' O(1) operating range; the
    # env suggests the divisor (raw eval rewards are never rescaled).
    reward_scale = max(float(getattr(env_current, "reward_scale", 1.0)), 1e-12)

    def freeze(side: _Side) -> AgentBundle:
        # Read-only snapshot for the peer's distillation pass this step.
        actor = side.agent.actor.copy()
        c1 = side.agent.critic1.copy()
        c2 = side.agent.critic2.copy()
        return AgentBundle(actor=actor, critic1=c1, critic2=c2,
                           target_actor=actor, target_critic1=c1, target_critic2=c2,
                           state_scale=side.agent.state_scale, n_max=n_max,
                           distill_alpha=side.agent.distill_alpha)

    total_steps = 0
    noise_span = max(1, hp.noise_decay_steps)
    try:
        for epoch in range(hp.epochs):
            for side in sides:
                side.state = side.env.reset()
            dones = [False, False]
            while not all(dones):
                frac = min(1.0, total_steps / noise_span)
                sigma = hp.noise_start + (hp.noise_end - hp.noise_start) * frac
                for i, side in enumerate(sides):
                    if dones[i]:
                        continue
                    side.agent.noise_scale = sigma
                    a = act(side.agent, side.state, explore=True, rng=side.noise_rng)
                    r, s2, dones[i] = side.env.step(a)
                    side.buffer.push(side.state, a, r / reward_scale, s2)
                    side.state = s2

                # Step counters advance in lockstep; distillation on even
                # steps reads parameters frozen before either side updates.
                even_step = sides[0].agent.step_count % 2 == 0
                frozen = [freeze(side) for side in sides] if even_step else None
                for i, side in enumerate(sides):
                    if len(side.buffer) < max(hp.warmup, hp.batch_size):
                        side.agent.step_count += 1
                        continue
                    batch = side.buffer.sample(side.sample_rng, hp.batch_size)
                    y = td_target(side.agent, batch, hp.gamma, hp.smooth_std,
                                  hp.smooth_clip, side.smooth_rng)
                    l1, l2 = update_critics(side.agent, batch, y, hp.critic_lr)
                    applied = update_actor(side.agent, batch, hp.actor_lr, hp.tau)
                    if applied:
                        distill(side.agent, frozen[1 - i], batch, hp.distill_lr)
                    side.agent.step_count += 1
                    if total_steps % eval_every == 0:
                        obj = float(value_estimate(side.agent, batch[0]).mean())
                        ev = (greedy_episode_reward(side.agent, eval_envs[i])
                              if eval_envs[i] is not None else math.nan)
                        side.curves.append(CurveRow(epoch, total_steps, l1, l2, obj, ev))
                total_steps += 1
    except DivergenceError as exc:
        raise DivergenceError(
            str(exc), curves=[row for side in sides for row in side.curves]) from exc
    return sides[0].agent, sides[1].agent, sides[0].curves, sides[1].curves

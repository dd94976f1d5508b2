"""DDQN agent assigning per-client momenta for the global download.

One federated run is one episode.  After every round the server builds a
state from the client reports, picks a momentum from a small grid for
each client, mixes the downloaded global parameters into that client's
local ones accordingly, and learns from (state, action, reward, next
state) transitions with a Double-DQN target.  The joint action space over
K clients is factorized into K independent heads over the grid, which
keeps the Q-network linear in K instead of exponential.
"""

from __future__ import annotations

import copy
import logging
import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .layers import uniform_init_

log = logging.getLogger(__name__)

ACTION_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)

_MAGIC = b"FSRB"
_VERSION = 1


@dataclass
class RewardConfig:
    xi: float = 64.0
    target_accuracy: float = 0.85
    discount: float = 0.99

    def __post_init__(self):
        if self.xi <= 1.0:
            raise ValueError("xi must exceed 1")
        if not 0.0 < self.target_accuracy <= 1.0:
            raise ValueError("target_accuracy must lie in (0, 1]")
        if not 0.0 < self.discount < 1.0:
            raise ValueError("discount must lie in (0, 1)")


@dataclass
class AgentConfig:
    learning_rate: float = 5e-4
    batch_size: int = 32
    buffer_capacity: int = 2000
    target_sync_period: int = 10
    warmup_rounds: int = 10
    hidden_dim: int = 128
    updates_per_round: int = 4


def compute_reward(accuracy: float, config: RewardConfig) -> float:
    """xi**(accuracy - target) - 1: zero at the target, bounded below by -1
    whenever accuracy stays at or under the target."""
    return config.xi ** (accuracy - config.target_accuracy) - 1.0


def momentum_values(indices) -> np.ndarray:
    """Map grid indices to momentum values."""
    return np.asarray(ACTION_GRID, dtype=np.float64)[np.asarray(indices)]


def build_state(reports: Sequence, num_clients: int) -> np.ndarray:
    """Concatenate (pooled representation, prediction distribution, loss)
    per client in client-id order.

    Arrival order does not matter; the layout is fixed by client id, so
    the state length is constant across rounds.
    """
    if len(reports) != num_clients:
        raise ValueError(f"expected {num_clients} reports, got {len(reports)}")
    by_id = {m.client_id: m for m in reports}
    if sorted(by_id) != list(range(num_clients)):
        raise ValueError("reports must cover client ids 0..K-1 exactly once")
    parts = []
    for k in range(num_clients):
        m = by_id[k]
        parts.append(np.asarray(m.pooled_repr, dtype=np.float64).ravel())
        parts.append(np.asarray(m.pred_dist, dtype=np.float64).ravel())
        parts.append(np.array([m.loss_scalar], dtype=np.float64))
    state = np.concatenate(parts)
    if not np.all(np.isfinite(state)):
        raise ValueError("client reports produced a non-finite state")
    return state


class QNetwork(nn.Module):
    """Shared MLP trunk with one head of len(ACTION_GRID) values per client."""

    def __init__(self, state_dim: int, num_clients: int, hidden_dim: int = 128,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        self.num_clients = num_clients
        self.trunk = nn.Sequential(
            nn.Linear(state_dim, hidden_dim), nn.ReLU(),
            nn.Linear(hidden_dim, hidden_dim), nn.ReLU())
        self.heads = nn.Linear(hidden_dim, num_clients * len(ACTION_GRID))
        if generator is not None:
            uniform_init_(self, generator)

    def forward(self, state: torch.Tensor) -> torch.Tensor:
        q = self.heads(self.trunk(state))
        return q.view(state.shape[0], self.num_clients, len(ACTION_GRID))


def action_policy(q_net: nn.Module, state: np.ndarray) -> np.ndarray:
    """Per-head softmax distribution over the grid, shape (K, len(grid))."""
    s = torch.as_tensor(state, dtype=torch.get_default_dtype()).unsqueeze(0)
    with torch.no_grad():
        q = q_net(s)[0]
    return torch.softmax(q, dim=1).numpy()


def select_action(q_net: nn.Module, state: np.ndarray, mode: str = "sample",
                  generator: Optional[torch.Generator] = None) -> np.ndarray:
    """Per-head grid indices; sample draws from softmax(Q), greedy argmaxes."""
    s = torch.as_tensor(state, dtype=torch.get_default_dtype()).unsqueeze(0)
    with torch.no_grad():
        q = q_net(s)[0]
    if mode == "greedy":
        return q.argmax(dim=1).numpy()
    if mode != "sample":
        raise ValueError(f"unknown mode '{mode}'")
    probs = torch.softmax(q, dim=1)
    return torch.multinomial(probs, 1, generator=generator)[:, 0].numpy()


def warmup_policy(num_clients: int,
                  generator: Optional[torch.Generator] = None) -> np.ndarray:
    """Uniform random grid indices, used before the agent starts acting."""
    return torch.randint(len(ACTION_GRID), (num_clients,),
                         generator=generator).numpy()


def apply_client_update(local: nn.Module, downloaded: nn.Module,
                        momentum: float) -> None:
    """In-place mix: local := (1 - momentum) * local + momentum * downloaded."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    local_params = dict(local.named_parameters())
    down_params = dict(downloaded.named_parameters())
    if local_params.keys() != down_params.keys():
        raise ValueError("parameter sets do not match")
    with torch.no_grad():
        for name, p in local_params.items():
            q = down_params[name]
            if p.shape != q.shape:
                raise ValueError(f"shape mismatch for '{name}'")
            p.mul_(1.0 - momentum).add_(q, alpha=momentum)


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    terminal: bool = False


class ReplayBuffer:
    """Fixed-capacity FIFO ring with uniform no-replacement batch sampling."""

    def __init__(self, capacity: int = 2000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: List[Transition] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._items)

    def push(self, transition: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(transition)
        else:
            self._items[self._next] = transition
        self._next = (self._next + 1) % self.capacity

    def sample(self, batch_size: int,
               generator: Optional[torch.Generator] = None) -> List[Transition]:
        if batch_size > len(self._items):
            raise ValueError("not enough stored transitions")
        idx = torch.randperm(len(self._items), generator=generator)[:batch_size]
        return [self._items[i] for i in idx.tolist()]

    def save(self, path) -> None:
        """Little-endian binary dump: header then fixed-size records."""
        if self._items:
            state_dim = len(self._items[0].state)
            action_dim = len(self._items[0].action)
            for t in self._items:
                if len(t.state) != state_dim or len(t.action) != action_dim:
                    raise ValueError("transitions disagree on dimensions")
                if len(t.next_state) != state_dim:
                    raise ValueError("transitions disagree on dimensions")
        else:
            state_dim = action_dim = 0
        header = struct.pack("<4sHIIIII", _MAGIC, _VERSION, self.capacity,
                             len(self._items), self._next, state_dim, action_dim)
        with open(path, "wb") as fh:
            fh.write(header)
            for t in self._items:
                fh.write(np.asarray(t.state, dtype="<f8").tobytes())
                fh.write(np.asarray(t.action, dtype="<i8").tobytes())
                fh.write(struct.pack("<dB", float(t.reward), int(t.terminal)))
                fh.write(np.asarray(t.next_state, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ReplayBuffer":
        with open(path, "rb") as fh:
            header = fh.read(struct.calcsize("<4sHIIIII"))
            magic, version, capacity, count, nxt, state_dim, action_dim = (
                struct.unpack("<4sHIIIII", header))
            if magic != _MAGIC:
                raise ValueError("not a replay buffer file")
            if version != _VERSION:
                raise ValueError(f"unsupported replay buffer version {version}")
            buf = cls(capacity)
            for _ in range(count):
                state = np.frombuffer(fh.read(8 * state_dim), dtype="<f8").copy()
                action = np.frombuffer(fh.read(8 * action_dim), dtype="<i8").copy()
                reward, terminal = struct.unpack("<dB", fh.read(9))
                next_state = np.frombuffer(fh.read(8 * state_dim),
                                           dtype="<f8").copy()
                buf._items.append(Transition(state=state, action=action,
                                             reward=reward, next_state=next_state,
                                             terminal=bool(terminal)))
            buf._next = nxt
        return buf


def ddqn_target(batch: Sequence[Transition], q_online: nn.Module,
                q_target: nn.Module, discount: float) -> torch.Tensor:
    """Per-head Double-DQN targets, shape (batch, K).

    The online network picks the next action, the target network scores
    it; terminal transitions reduce to the bare reward.
    """
    dtype = torch.get_default_dtype()
    with torch.no_grad():
        next_states = torch.as_tensor(
            np.stack([t.next_state for t in batch]), dtype=dtype)
        best = q_online(next_states).argmax(dim=2, keepdim=True)
        q_next = q_target(next_states).gather(2, best)[:, :, 0]
        rewards = torch.as_tensor([t.reward for t in batch],
                                  dtype=dtype).unsqueeze(1)
        live = torch.as_tensor([0.0 if t.terminal else 1.0 for t in batch],
                               dtype=dtype).unsqueeze(1)
        return rewards + discount * live * q_next


def q_update_step(buffer: ReplayBuffer, q_online: nn.Module, q_target: nn.Module,
                  config: AgentConfig, reward_config: RewardConfig,
                  generator: Optional[torch.Generator] = None) -> Optional[float]:
    """One SGD step on the mean squared TD error over a sampled batch.

    Returns the pre-step loss, or None when the buffer is still too small
    (the step is skipped, matching the burn-in behavior).
    """
    if len(buffer) < config.batch_size:
        log.info("replay buffer has %d < %d transitions; skipping update",
                 len(buffer), config.batch_size)
        return None
    batch = buffer.sample(config.batch_size, generator)
    dtype = torch.get_default_dtype()
    states = torch.as_tensor(np.stack([t.state for t in batch]), dtype=dtype)
    actions = torch.as_tensor(np.stack([t.action for t in batch]),
                              dtype=torch.long)
    targets = ddqn_target(batch, q_online, q_target, reward_config.discount)
    q = q_online(states).gather(2, actions.unsqueeze(2))[:, :, 0]
    loss = ((targets - q) ** 2).mean()
    opt = torch.optim.SGD(q_online.parameters(), lr=config.learning_rate)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss.detach())


def sync_target(q_online: nn.Module, q_target: nn.Module) -> None:
    q_target.load_state_dict(q_online.state_dict())


class DdqnAgent:
    """Owns the online/target pair, the replay buffer, and the sync counter."""

    def __init__(self, state_dim: int, num_clients: int,
                 config: Optional[AgentConfig] = None,
                 reward_config: Optional[RewardConfig] = None,
                 generator: Optional[torch.Generator] = None):
        self.config = config if config is not None else AgentConfig()
        self.reward_config = (reward_config if reward_config is not None
                              else RewardConfig())
        self.num_clients = num_clients
        self.online = QNetwork(state_dim, num_clients, self.config.hidden_dim,
                               generator)
        self.target = copy.deepcopy(self.online)
        self.buffer = ReplayBuffer(self.config.buffer_capacity)
        self.steps_since_sync = 0

    def act(self, state: Optional[np.ndarray], round_index: int,
            generator: Optional[torch.Generator] = None) -> np.ndarray:
        """Grid indices for the round: uniform during warmup, then sampled
        from the online network's softmax policy."""
        if round_index < self.config.warmup_rounds or state is None:
            return warmup_policy(self.num_clients, generator)
        return select_action(self.online, state, "sample", generator)

    def observe(self, transition: Transition) -> None:
        self.buffer.push(transition)

    def learn(self, updates: int,
              generator: Optional[torch.Generator] = None) -> List[float]:
        """Run up to `updates` gradient steps, syncing the target network
        every config.target_sync_period steps."""
        losses: List[float] = []
        for _ in range(updates):
            loss = q_update_step(self.buffer, self.online, self.target,
                                 self.config, self.reward_config, generator)
            if loss is None:
                break
            losses.append(loss)
            self.steps_since_sync += 1
            if self.steps_since_sync >= self.config.target_sync_period:
                sync_target(self.online, self.target)
                self.steps_since_sync = 0
        return losses

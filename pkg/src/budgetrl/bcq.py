"""Offline Q-learning constrained to stay near the logged behavior policy.

A softmax classifier is fit to the logged actions; Q-learning then restricts
every argmax (both action choice and bootstrap target) to actions whose
probability under that classifier is at least ``xi`` times the most probable
action's. ``xi = 0`` recovers unconstrained Q-learning, ``xi = 1`` clones the
behavior argmax.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ActionSet, HyperParams, StateVector, Trajectory, day_mask_indices, flatten
from .nets import Mlp, Optimizer, softmax, train_step

AGENT_FORMAT = "bcq-agent-v1"


def state_to_input(state: StateVector) -> np.ndarray:
    """Network input: opaque features plus normalized cycle counters."""
    return np.concatenate([state.to_array(),
                           [state.day_in_cycle / 7.0, state.bonuses_collected / 4.0]])


def states_to_inputs(states: Sequence[StateVector]) -> np.ndarray:
    return np.stack([state_to_input(s) for s in states])


def input_size(d: int) -> int:
    return d + 2


def behavior_probs(model: Mlp, state: StateVector) -> np.ndarray:
    return softmax(model.forward(state_to_input(state)))


def behavior_argmax(model: Mlp, state: StateVector, actions: ActionSet) -> int:
    """Most probable action under the behavior model within the claim mask."""
    mask = day_mask_indices(actions, state.bonuses_collected)
    probs = behavior_probs(model, state)[mask]
    return int(mask[np.argmax(probs)])


def eligible_actions(behavior_model: Mlp, state: StateVector, xi: float,
                     day_mask: np.ndarray) -> np.ndarray:
    """Masked actions whose probability is >= xi times the masked maximum.

    Never empty for xi <= 1: the masked argmax has ratio exactly 1.
    """
    if not 0.0 <= xi <= 1.0:
        raise ValueError("xi must be in [0, 1]")
    day_mask = np.asarray(day_mask, dtype=int)
    if day_mask.size == 0:
        raise ValueError("day mask must not be empty")
    probs = behavior_probs(behavior_model, state)[day_mask]
    return day_mask[probs >= xi * probs.max()]


def train_behavior_model(dataset: Sequence[Trajectory], actions: ActionSet,
                         hyper: HyperParams, d: int | None = None) -> Mlp:
    """Softmax classifier of logged actions given states (cross-entropy, seeded)."""
    transitions = flatten(dataset)
    if not transitions:
        raise ValueError("empty dataset")
    if d is None:
        d = len(transitions[0].state.features)
    x = states_to_inputs([tr.state for tr in transitions])
    labels = np.array([tr.action_index for tr in transitions], dtype=int)
    if labels.min() < 0 or labels.max() >= actions.size:
        raise ValueError("action index outside the menu")

    root = np.random.SeedSequence(hyper.seed)
    init_rng, batch_rng = (np.random.default_rng(s) for s in root.spawn(2))
    net = Mlp([input_size(d), *hyper.hidden_sizes, actions.size], rng=init_rng)
    opt = Optimizer(net, hyper.learning_rate, hyper.optimizer)
    n = x.shape[0]
    for _ in range(hyper.training_steps):
        idx = batch_rng.integers(0, n, size=min(hyper.batch_size, n))
        train_step(net, x[idx], labels[idx], "cross_entropy", hyper.learning_rate,
                   optimizer=opt)
    return net


@dataclass
class BcqAgent:
    """Trained Q-network plus the behavior classifier that constrains it."""

    q_net: Mlp
    target_net: Mlp
    behavior_model: Mlp
    hyper: HyperParams
    actions: ActionSet
    training_log: list | None = None

    def to_dict(self) -> dict:
        return {
            "format": AGENT_FORMAT,
            "hyper": {**self.hyper.__dict__, "hidden_sizes": list(self.hyper.hidden_sizes)},
            "actions": self.actions.to_dict(),
            "q_net": self.q_net.to_dict(),
            "behavior_model": self.behavior_model.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "BcqAgent":
        if payload.get("format") != AGENT_FORMAT:
            raise ValueError(f"unsupported agent format {payload.get('format')!r}")
        hyper_kw = dict(payload["hyper"])
        hyper_kw["hidden_sizes"] = tuple(hyper_kw["hidden_sizes"])
        q_net = Mlp.from_dict(payload["q_net"])
        return cls(q_net=q_net, target_net=q_net.copy(),
                   behavior_model=Mlp.from_dict(payload["behavior_model"]),
                   hyper=HyperParams(**hyper_kw),
                   actions=ActionSet.from_dict(payload["actions"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "BcqAgent":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _prepare_arrays(dataset, actions):
    transitions = flatten(dataset)
    if not transitions:
        raise ValueError("empty dataset")
    x = states_to_inputs([tr.state for tr in transitions])
    a = np.array([tr.action_index for tr in transitions], dtype=int)
    r = np.array([tr.reward for tr in transitions], dtype=float)
    done = np.array([tr.done for tr in transitions], dtype=bool)
    width = x.shape[1]
    x_next = np.zeros((len(transitions), width))
    next_mask = np.zeros((len(transitions), actions.size), dtype=bool)
    for i, tr in enumerate(transitions):
        if not tr.done:
            x_next[i] = state_to_input(tr.next_state)
            next_mask[i, day_mask_indices(actions, tr.next_state.bonuses_collected)] = True
    return x, a, r, done, x_next, next_mask


def bcq_train(dataset: Sequence[Trajectory], actions: ActionSet, hyper: HyperParams,
              behavior_model: Mlp | None = None, log_every: int | None = None) -> BcqAgent:
    """Train the constrained Q-network on logged trajectories.

    Mini-batches are sampled uniformly with replacement; terminal transitions
    bootstrap to the reward alone; the target network is a lagged copy synced
    every ``target_sync_interval`` steps. Deterministic per ``hyper.seed``.
    """
    if behavior_model is None:
        behavior_model = train_behavior_model(dataset, actions, hyper)
    x, a, r, done, x_next, next_mask = _prepare_arrays(dataset, actions)
    n = x.shape[0]

    root = np.random.SeedSequence((hyper.seed, 1))
    init_rng, batch_rng = (np.random.default_rng(s) for s in root.spawn(2))
    q_net = Mlp([x.shape[1], *hyper.hidden_sizes, actions.size], rng=init_rng)
    target_net = q_net.copy()
    opt = Optimizer(q_net, hyper.learning_rate, hyper.optimizer)

    # behavior probabilities at next states never change during Q training
    next_probs = softmax(behavior_model.forward(x_next))
    masked_probs = np.where(next_mask, next_probs, 0.0)
    ratio_ok = masked_probs >= hyper.xi * masked_probs.max(axis=1, keepdims=True)
    next_eligible = next_mask & ratio_ok

    if log_every is None:
        log_every = max(1, hyper.training_steps // 50)
    probe = np.arange(min(256, n))
    agent = BcqAgent(q_net=q_net, target_net=target_net, behavior_model=behavior_model,
                     hyper=hyper, actions=actions, training_log=[])

    for step in range(hyper.training_steps):
        idx = batch_rng.integers(0, n, size=min(hyper.batch_size, n))
        q_next = target_net.forward(x_next[idx])
        boot = np.where(next_eligible[idx], q_next, -np.inf).max(axis=1)
        boot[done[idx]] = 0.0
        targets = r[idx] + hyper.gamma * boot
        loss = train_step(q_net, x[idx], targets, "huber", hyper.learning_rate,
                          kappa=hyper.kappa, unit_indices=a[idx], optimizer=opt)
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite loss at step {step}")
        if (step + 1) % hyper.target_sync_interval == 0:
            target_net.set_params(q_net.get_params())
        if (step + 1) % log_every == 0 or step + 1 == hyper.training_steps:
            agreement = _logged_action_agreement(agent, x[probe], a[probe])
            agent.training_log.append({"step": step + 1, "loss": float(loss),
                                       "behavior_agreement": agreement})

    target_net.set_params(q_net.get_params())
    return agent


def _logged_action_agreement(agent: BcqAgent, x_probe: np.ndarray, a: np.ndarray) -> float:
    """Fraction of probe states where the greedy constrained policy matches the logged action."""
    q = agent.q_net.forward(x_probe)
    probs = softmax(agent.behavior_model.forward(x_probe))
    # the probe rows come from logged states, so reuse the logged claim mask
    bonuses = np.rint(x_probe[:, -1] * 4.0).astype(int)
    picks = np.empty(len(a), dtype=int)
    for i in range(len(a)):
        mask = day_mask_indices(agent.actions, int(bonuses[i]))
        p = probs[i, mask]
        elig = mask[p >= agent.hyper.xi * p.max()]
        costs = np.array([agent.actions.cost_cents(int(j)) for j in elig])
        scores = q[i, elig]
        best = scores.max()
        ties = np.flatnonzero(scores == best)
        picks[i] = int(elig[ties[np.argmin(costs[ties])]])
    return float(np.mean(picks == a))


def policy_action(agent: BcqAgent, state: StateVector, xi: float | None = None) -> int:
    """Highest-Q action among the behavior-eligible set; cheaper action on ties."""
    if xi is None:
        xi = agent.hyper.xi
    mask = day_mask_indices(agent.actions, state.bonuses_collected)
    elig = eligible_actions(agent.behavior_model, state, xi, mask)
    q = agent.q_net.forward(state_to_input(state))[elig]
    best = q.max()
    ties = np.flatnonzero(q == best)
    costs = np.array([agent.actions.cost_cents(int(elig[i])) for i in ties])
    return int(elig[ties[np.argmin(costs)]])


def q_vector(agent: BcqAgent, state: StateVector) -> np.ndarray:
    """Q values over the claim-eligible actions; NaN marks ineligible entries."""
    mask = day_mask_indices(agent.actions, state.bonuses_collected)
    q = agent.q_net.forward(state_to_input(state))
    out = np.full(agent.actions.size, np.nan)
    out[mask] = q[mask]
    return out


class BcqPolicy:
    """Policy adapter: direct greedy play and value rows for the allocator."""

    def __init__(self, agent: BcqAgent, xi: float | None = None):
        self.agent = agent
        self.xi = agent.hyper.xi if xi is None else xi

    def action(self, state: StateVector) -> int:
        return policy_action(self.agent, state, self.xi)

    def q_row(self, state: StateVector) -> np.ndarray:
        return q_vector(self.agent, state)

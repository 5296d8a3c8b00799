"""Deep Q-learning over a labeled dataset.

A state is a window of ``batch_size`` consecutive records, an action is a
class prediction per record, and the reward is +1/-1 for a correct/incorrect
prediction. The next state is the following window; the cursor wraps at the
end of the dataset. A single network is trained online against
``reward + gamma * max_a Q(next_state, a)``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import EncodedDataset
from .nn import (
    DivergenceError,
    QNetwork,
    apply_update,
    backward,
    default_layers,
    forward,
    init_network,
    make_optimizer,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HyperParams:
    num_episodes: int = 200
    num_iterations: int = 100
    batch_size: int = 500
    epsilon_initial: float = 0.9
    epsilon_decay: float = 0.99
    epsilon_floor: float = 0.01
    gamma: float = 0.001
    learning_rate: float = 1e-3
    seed: int = 0
    hidden: tuple[int, ...] = (100, 100)
    reward_correct: float = 1.0
    reward_wrong: float = -1.0
    optimizer: str = "adam"
    shuffle: bool = False

    def __post_init__(self):
        if self.num_episodes < 0 or self.num_iterations <= 0 or self.batch_size <= 0:
            raise ValueError("episodes must be >= 0; iterations and batch size must be positive")
        if not 0.0 <= self.epsilon_initial <= 1.0 or not 0.0 <= self.epsilon_floor <= 1.0:
            raise ValueError("epsilon values must lie in [0, 1]")
        if self.epsilon_floor > self.epsilon_initial:
            raise ValueError("epsilon floor exceeds initial epsilon")
        if not 0.0 < self.epsilon_decay <= 1.0:
            raise ValueError("epsilon decay must lie in (0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class BatchState:
    features: np.ndarray
    labels: np.ndarray
    cursor: int


@dataclass
class TrainingHistory:
    episode: list[int] = field(default_factory=list)
    iteration: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    epsilon: list[float] = field(default_factory=list)
    episode_reward: list[float] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)

    def loss_rows(self):
        return zip(self.episode, self.iteration, self.loss, self.epsilon)


@dataclass(frozen=True)
class IterationRecord:
    """What one training iteration saw and used, for diagnostics."""

    episode: int
    iteration: int
    cursor: int
    actions: np.ndarray
    rewards: np.ndarray
    next_q_max: np.ndarray
    targets: np.ndarray
    loss: float
    epsilon: float


class TrainingDiverged(DivergenceError):
    def __init__(self, message: str, last_good: QNetwork, optimizer, history: TrainingHistory):
        super().__init__(message)
        self.last_good = last_good
        self.optimizer = optimizer
        self.history = history


def select_actions(q_values: np.ndarray, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """Epsilon-greedy per record; greedy ties go to the lowest action index.

    Both the coin flips and the random actions are always drawn so the RNG
    advances identically regardless of epsilon.
    """
    q = np.asarray(q_values)
    n, k = q.shape
    explore = rng.random(n) < epsilon
    random_actions = rng.integers(0, k, size=n)
    return np.where(explore, random_actions, np.argmax(q, axis=1)).astype(np.int64)


def compute_rewards(actions, labels, correct: float = 1.0, wrong: float = -1.0) -> np.ndarray:
    actions = np.asarray(actions)
    labels = np.asarray(labels)
    if actions.shape != labels.shape:
        raise ValueError(f"{actions.shape[0]} actions vs {labels.shape[0]} labels")
    return np.where(actions == labels, correct, wrong).astype(np.float64)


def compute_targets(rewards, next_q, gamma: float) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=np.float64)
    next_q = np.asarray(next_q, dtype=np.float64)
    if next_q.ndim != 2 or next_q.shape[0] != rewards.shape[0]:
        raise ValueError(f"next-state Q rows {next_q.shape} do not match {rewards.shape[0]} rewards")
    return rewards + gamma * next_q.max(axis=1)


def decay_epsilon(epsilon: float, hp: HyperParams) -> float:
    return max(epsilon * hp.epsilon_decay, hp.epsilon_floor)


def epsilon_at(k: int, hp: HyperParams) -> float:
    """Exploration rate in effect at global iteration ``k`` (0-based)."""
    return max(hp.epsilon_initial * hp.epsilon_decay ** k, hp.epsilon_floor)


def batch_state(dataset: EncodedDataset, cursor: int, batch_size: int) -> BatchState:
    end = min(cursor + batch_size, len(dataset))
    return BatchState(dataset.matrix[cursor:end], dataset.labels[cursor:end], cursor)


def next_cursor(cursor: int, batch_size: int, n: int) -> int:
    nxt = cursor + batch_size
    return nxt if nxt < n else 0


def next_window(matrix: np.ndarray, cursor: int, size: int) -> np.ndarray:
    """``size`` rows starting at ``cursor``, wrapping past the end."""
    n = matrix.shape[0]
    if cursor + size <= n:
        return matrix[cursor : cursor + size]
    return matrix[(cursor + np.arange(size)) % n]


def exploration_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 1]))


def train(
    dataset: EncodedDataset,
    hp: HyperParams,
    net: QNetwork | None = None,
    on_iteration: Callable[[IterationRecord], None] | None = None,
):
    """Run the episode/iteration loop.

    Returns ``(net, history, optimizer_state, rng)``. Each episode restarts at
    the first window; network and optimizer state carry over between episodes.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if hp.batch_size > n:
        raise ValueError(f"batch size {hp.batch_size} exceeds dataset size {n}")
    if net is None:
        net = init_network(default_layers(dataset.width, hp.hidden), hp.seed)
    if net.input_width != dataset.width:
        raise ValueError(f"network expects {net.input_width} inputs, dataset has {dataset.width} columns")
    rng = exploration_rng(hp.seed)
    optimizer = make_optimizer(hp.optimizer)
    history = TrainingHistory()

    matrix, labels = dataset.matrix, dataset.labels
    if hp.shuffle:
        order = rng.permutation(n)
        matrix, labels = matrix[order], labels[order]

    k = 0
    for episode in range(hp.num_episodes):
        started = time.perf_counter()
        cursor = 0
        total_reward = 0.0
        for iteration in range(hp.num_iterations):
            epsilon = epsilon_at(k, hp)
            end = min(cursor + hp.batch_size, n)
            state = matrix[cursor:end]
            state_labels = labels[cursor:end]

            q = forward(net, state)
            actions = select_actions(q, epsilon, rng)
            rewards = compute_rewards(actions, state_labels, hp.reward_correct, hp.reward_wrong)
            following = next_cursor(cursor, hp.batch_size, n)
            next_q = forward(net, next_window(matrix, following, end - cursor))
            targets = compute_targets(rewards, next_q, hp.gamma)

            loss, grads = backward(net, state, actions, targets)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at episode {episode}, iteration {iteration}", net, optimizer, history
                )
            try:
                # gradients are validated before any parameter moves
                apply_update(net, grads, optimizer, hp.learning_rate)
            except DivergenceError as exc:
                raise TrainingDiverged(
                    f"{exc} at episode {episode}, iteration {iteration}", net, optimizer, history
                ) from exc

            history.episode.append(episode)
            history.iteration.append(iteration)
            history.loss.append(loss)
            history.epsilon.append(epsilon)
            total_reward += float(rewards.sum())
            if on_iteration is not None:
                on_iteration(IterationRecord(episode, iteration, cursor, actions, rewards,
                                             next_q.max(axis=1), targets, loss, epsilon))
            cursor = following
            k += 1
        history.episode_reward.append(total_reward)
        history.wall_clock.append(time.perf_counter() - started)
        log.info("episode %d: reward %.0f, last loss %.4f, epsilon %.4f",
                 episode, total_reward, history.loss[-1], history.epsilon[-1])
    return net, history, optimizer, rng


def predict(net: QNetwork, data) -> np.ndarray:
    """Greedy class per record (argmax Q, lowest index on ties)."""
    matrix = data.matrix if isinstance(data, EncodedDataset) else data
    return np.argmax(forward(net, matrix), axis=1).astype(np.int64)

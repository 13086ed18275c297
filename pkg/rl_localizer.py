#!/usr/bin/env python3
"""
Actor-critic agent that walks the voxel lattice of the target octant towards
the appendiceal base.

The agent observes a cubic window of the octant around its position, picks
one of six unit steps, and is rewarded +1 / -1 for getting closer / farther
from the target (0 when a clipped move leaves it in place). Training is
synchronous n-step advantage actor-critic over a pool of parallel
environments; inference rolls the greedy policy out and averages the tail of
the trajectory.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from errors import InvalidArgumentError, TrainingError
from nn_engine import LayerSpec, Network, SGD, load_params, log_softmax, save_params, softmax
from phantom_gen import Label, ManifestEntry
from run_config import RunConfig, write_csv
from volume_core import (Region, Volume3D, VoxelCoord, extract_patch, octant_region, read_sidecar,
                         write_sidecar)

logger = logging.getLogger(__name__)

TRAIN_LOG_COLUMNS = ("iteration", "mean_reward", "policy_loss", "value_loss", "val_error_mm")
TERMINAL_BONUS = 1.0


class Action(IntEnum):
    PLUS_X = 0
    MINUS_X = 1
    PLUS_Y = 2
    MINUS_Y = 3
    PLUS_Z = 4
    MINUS_Z = 5

    @property
    def delta(self) -> Tuple[int, int, int]:
        step = [0, 0, 0]
        step[self.value // 2] = 1 if self.value % 2 == 0 else -1
        return tuple(step)

    @property
    def inverse(self) -> "Action":
        return Action(self.value ^ 1)


NUM_ACTIONS = len(Action)


@dataclass(frozen=True)
class AgentState:
    position: VoxelCoord
    window: np.ndarray


@dataclass(frozen=True)
class Transition:
    s: AgentState
    a: Action
    s_next: AgentState
    r: int
    done: bool = False


class PolicyLike(Protocol):
    window_edge: int

    def action_probs(self, state: AgentState) -> np.ndarray:
        ...


def reward(x, a: Action, x_next, target, spacing=(1.0, 1.0, 1.0)) -> int:
    """Sign of the decrease in millimetre distance to the target"""
    s = np.asarray(spacing, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    before = np.linalg.norm((np.asarray(x, dtype=np.float64) - t) * s)
    after = np.linalg.norm((np.asarray(x_next, dtype=np.float64) - t) * s)
    return int(np.sign(before - after))


def step(x, a: Action, region: Region) -> VoxelCoord:
    return region.clamp(VoxelCoord(*x).shifted(Action(a).delta))


class OctantView:
    """Region crop of a volume; windows are zero-padded at the region faces"""

    def __init__(self, volume: Volume3D, region: Region, window_edge: int):
        if window_edge < 1 or window_edge % 2 == 0:
            raise InvalidArgumentError(f"window_edge must be odd, got {window_edge}")
        self.region = region.clip(volume.dims)
        self.crop = volume.crop(self.region)
        self.spacing = volume.spacing
        self.window_edge = window_edge

    def observe(self, position) -> AgentState:
        position = VoxelCoord(*(int(c) for c in position))
        local = VoxelCoord(*(p - o for p, o in zip(position, self.region.origin)))
        return AgentState(position, extract_patch(self.crop, local, self.window_edge).data)


class LocalizerEnv:
    def __init__(self, view: OctantView, target, max_steps: int, terminal_radius: float = 1.0):
        self.view = view
        self.target = VoxelCoord(*target)
        self.max_steps = max_steps
        self.terminal_radius = terminal_radius
        self.state: Optional[AgentState] = None
        self.steps = 0

    def reset(self, start) -> AgentState:
        self.state = self.view.observe(self.view.region.clamp(start))
        self.steps = 0
        return self.state

    def reached(self, position) -> bool:
        delta = np.asarray(position, dtype=np.float64) - np.asarray(self.target, dtype=np.float64)
        return float(np.linalg.norm(delta)) <= self.terminal_radius

    def step(self, action: Action) -> Transition:
        s = self.state
        x_next = step(s.position, action, self.view.region)
        s_next = self.view.observe(x_next)
        r = reward(s.position, action, x_next, self.target, self.view.spacing)
        self.steps += 1
        done = self.reached(x_next) or self.steps >= self.max_steps
        self.state = s_next
        return Transition(s, Action(action), s_next, r, done)


def _random_start(region: Region, rng: np.random.Generator) -> VoxelCoord:
    return VoxelCoord(*(int(rng.integers(o, u)) for o, u in zip(region.origin, region.upper)))


def _choose(probs: np.ndarray, exploration: str, rng: np.random.Generator) -> Action:
    if exploration == "greedy":
        return Action(int(np.argmax(probs)))
    if exploration == "uniform":
        return Action(int(rng.integers(NUM_ACTIONS)))
    if exploration == "policy":
        return Action(int(rng.choice(NUM_ACTIONS, p=probs)))
    raise InvalidArgumentError(f"unknown exploration mode {exploration!r}")


def collect_episode(volume: Volume3D, truth, net: PolicyLike, region: Region, max_steps: int,
                    exploration: str = "policy", rng: Optional[np.random.Generator] = None,
                    start=None, terminal_radius: float = 1.0) -> List[Transition]:
    """
    One episode from start (uniform in region when omitted) until the agent is
    within terminal_radius of the target or max_steps moves were made.
    """
    rng = rng if rng is not None else np.random.default_rng()
    target = getattr(truth, "base", truth)
    if max_steps <= 0:
        return []
    env = LocalizerEnv(OctantView(volume, region, net.window_edge), target, max_steps, terminal_radius)
    state = env.reset(start if start is not None else _random_start(env.view.region, rng))
    episode = []
    while True:
        action = _choose(np.asarray(net.action_probs(state)), exploration, rng)
        transition = env.step(action)
        episode.append(transition)
        state = transition.s_next
        if transition.done:
            return episode


class PolicyValueNet:
    """Shared conv trunk feeding a policy head (6 logits) and a value head"""

    def __init__(self, window_edge: int = 15, seed: int = 0, dtype=np.float32):
        if window_edge < 7 or window_edge % 2 == 0:
            raise InvalidArgumentError(f"window_edge must be odd and >= 7, got {window_edge}")
        self.window_edge = window_edge
        trunk = [LayerSpec.conv(3, 8), LayerSpec.relu(), LayerSpec.pool(),
                 LayerSpec.conv(3, 8), LayerSpec.relu(), LayerSpec.pool()]
        self.trunk = Network(trunk, (1, window_edge, window_edge, window_edge), seed=seed,
                             dtype=dtype, name="trunk")
        features = self.trunk.output_shape
        self.policy = Network([LayerSpec.fc(64), LayerSpec.relu(), LayerSpec.fc(NUM_ACTIONS)], features,
                              seed=seed + 1, dtype=dtype, name="policy")
        self.value = Network([LayerSpec.fc(64), LayerSpec.relu(), LayerSpec.fc(1)], features,
                             seed=seed + 2, dtype=dtype, name="value")

    @property
    def nets(self) -> List[Network]:
        return [self.trunk, self.policy, self.value]

    def forward(self, windows: np.ndarray, record: bool = True) -> Tuple[np.ndarray, np.ndarray]:
        """windows (B, W, W, W) -> (policy logits (B, 6), values (B,))"""
        feats = self.trunk.forward(np.asarray(windows)[:, None], record)
        return self.policy.forward(feats, record), self.value.forward(feats, record)[:, 0]

    def backward(self, g_logits: np.ndarray, g_values: np.ndarray) -> None:
        g_feats = self.policy.backward(g_logits) + self.value.backward(g_values[:, None])
        self.trunk.backward(g_feats)

    def action_probs(self, state: AgentState) -> np.ndarray:
        logits, _ = self.forward(state.window[None], record=False)
        return softmax(logits.astype(np.float64))[0]

    def parameters_snapshot(self) -> List[np.ndarray]:
        return [a.copy() for net in self.nets for l in net.param_layers() for a in (l.w, l.b)]

    def save(self, path) -> Path:
        path = save_params(path, self.nets)
        write_sidecar(Path(path).with_suffix(".txt"), {"model": "policy_value", "window_edge": self.window_edge})
        return path

    @classmethod
    def load(cls, path) -> "PolicyValueNet":
        meta = read_sidecar(Path(path).with_suffix(".txt"))
        net = cls(int(meta.get("window_edge", 15)))
        load_params(path, net.nets)
        return net


def policy_value_gradients(logits, values, actions, returns, entropy_weight: float, value_weight: float):
    """
    Gradients of the batch-mean A2C loss
        -A*log pi(a) - beta*H(pi) + value_weight * (V - R)^2 / 2
    with the advantage A = R - V held constant.
    """
    b = logits.shape[0]
    logp = log_softmax(logits.astype(np.float64))
    p = np.exp(logp)
    adv = returns - values
    entropy = -np.sum(p * logp, axis=1)
    onehot = np.zeros_like(p)
    onehot[np.arange(b), actions] = 1.0
    g_logits = adv[:, None] * (p - onehot) / b + entropy_weight * p * (logp + entropy[:, None]) / b
    g_values = value_weight * (values - returns) / b
    policy_loss = float(np.mean(-adv * logp[np.arange(b), actions]) - entropy_weight * np.mean(entropy))
    value_loss = float(0.5 * np.mean((values - returns) ** 2))
    return g_logits, g_values, policy_loss, value_loss


def n_step_returns(rewards: np.ndarray, dones: np.ndarray, bootstrap: np.ndarray, gamma: float) -> np.ndarray:
    """rewards/dones (T, E), bootstrap (E,) -> discounted returns (T, E)"""
    returns = np.zeros_like(rewards, dtype=np.float64)
    running = bootstrap.astype(np.float64)
    for t in range(rewards.shape[0] - 1, -1, -1):
        running = rewards[t] + gamma * running * (1.0 - dones[t])
        returns[t] = running
    return returns


@dataclass
class TrainingHistory:
    rows: List[Dict[str, float]] = field(default_factory=list)

    def write_csv(self, path) -> Path:
        return write_csv(path, TRAIN_LOG_COLUMNS, ([row[k] for k in TRAIN_LOG_COLUMNS] for row in self.rows))


def train_actor_critic(entries: Sequence[ManifestEntry], cfg: RunConfig, log_path=None,
                       val_entries: Optional[Sequence[ManifestEntry]] = None) -> Tuple[PolicyValueNet, TrainingHistory]:
    rl = cfg.rl
    if not entries:
        raise InvalidArgumentError("train_actor_critic needs at least one manifest entry")
    seed = cfg.rl_seed()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 1])))
    net = PolicyValueNet(rl.window_edge, seed=seed)
    optimizer = SGD(net.nets, rl.lr, rl.momentum)

    views, targets = [], []
    for entry in entries:
        volume = entry.load()
        views.append(OctantView(volume, octant_region(volume.dims, cfg.phantom.octant), rl.window_edge))
        targets.append(entry.truth.base)
    logger.info(f"Training localizer on {len(views)} phantoms: {rl.iterations} iterations, "
                f"{rl.num_envs} envs, window {rl.window_edge}")

    envs = []
    for _ in range(rl.num_envs):
        k = int(rng.integers(len(views)))
        env = LocalizerEnv(views[k], targets[k], rl.max_steps, rl.terminal_radius)
        env.reset(_random_start(env.view.region, rng))
        envs.append(env)
    episode_return = np.zeros(rl.num_envs)
    finished: List[float] = []
    losses: List[Tuple[float, float]] = []
    history = TrainingHistory()
    started = time.time()

    for it in range(1, rl.iterations + 1):
        windows, actions = [], []
        rewards = np.zeros((rl.n_step, rl.num_envs))
        dones = np.zeros((rl.n_step, rl.num_envs))
        for t in range(rl.n_step):
            batch = np.stack([env.state.window for env in envs])
            logits, _ = net.forward(batch, record=False)
            probs = softmax(logits.astype(np.float64))
            acts = [_choose(p / p.sum(), "policy", rng) for p in probs]
            windows.append(batch)
            actions.append(acts)
            for e, (env, a) in enumerate(zip(envs, acts)):
                tr = env.step(a)
                hit = env.reached(tr.s_next.position)
                r = tr.r + (TERMINAL_BONUS if hit else 0.0)
                rewards[t, e] = r
                episode_return[e] += r
                if tr.done:
                    # a timeout is not terminal: bootstrap from the state it stopped in
                    if not hit:
                        rewards[t, e] += rl.gamma * _value_of(net, tr.s_next.window)
                    dones[t, e] = 1.0
                    finished.append(episode_return[e])
                    episode_return[e] = 0.0
                    k = int(rng.integers(len(views)))
                    env.view, env.target = views[k], VoxelCoord(*targets[k])
                    env.reset(_random_start(env.view.region, rng))

        _, bootstrap = net.forward(np.stack([env.state.window for env in envs]), record=False)
        returns = n_step_returns(rewards, dones, bootstrap.astype(np.float64), rl.gamma).reshape(-1)
        batch = np.concatenate(windows)
        flat_actions = np.array([int(a) for acts in actions for a in acts])

        optimizer.zero_grad()
        logits, values = net.forward(batch)
        g_logits, g_values, p_loss, v_loss = policy_value_gradients(
            logits, values.astype(np.float64), flat_actions, returns, rl.entropy_weight, rl.value_weight)
        if not (math.isfinite(p_loss) and math.isfinite(v_loss)):
            raise TrainingError(f"localizer training diverged at iteration {it}")
        net.backward(g_logits, g_values)
        try:
            optimizer.step()
        except TrainingError as e:
            raise TrainingError(f"iteration {it}: {e}") from None
        losses.append((p_loss, v_loss))

        if it % rl.eval_every == 0 or it == rl.iterations:
            val = val_entries if val_entries else entries[: min(len(entries), 8)]
            val_error = float(np.mean([e.mm for e in localization_errors(val, net, cfg)]))
            row = {
                "iteration": it,
                "mean_reward": float(np.mean(finished)) if finished else float("nan"),
                "policy_loss": float(np.mean([l[0] for l in losses])),
                "value_loss": float(np.mean([l[1] for l in losses])),
                "val_error_mm": val_error,
            }
            history.rows.append(row)
            logger.info(f"[{it}/{rl.iterations}] reward {row['mean_reward']:.3f} "
                        f"val error {val_error:.2f} mm ({time.time() - started:.0f}s)")
            finished, losses = [], []

    if log_path is not None:
        history.write_csv(log_path)
    return net, history


def _value_of(net: PolicyValueNet, window: np.ndarray) -> float:
    _, v = net.forward(window[None], record=False)
    return float(v[0])


def localize_path(volume: Volume3D, net: PolicyLike, region: Region, max_steps: int = 300,
                  start=None, greedy: bool = True,
                  rng: Optional[np.random.Generator] = None) -> List[VoxelCoord]:
    """Positions visited by a rollout, start included"""
    view = OctantView(volume, region, net.window_edge)
    position = view.region.clamp(start if start is not None else view.region.origin)
    rng = rng if rng is not None else np.random.default_rng(0)
    path = [position]
    for _ in range(max_steps):
        probs = np.asarray(net.action_probs(view.observe(position)))
        position = step(position, _choose(probs, "greedy" if greedy else "policy", rng), view.region)
        path.append(position)
    return path


def tail_mean(path: Sequence[VoxelCoord], k: int) -> VoxelCoord:
    """Componentwise mean of the last k positions, rounded half up"""
    if k < 1:
        raise InvalidArgumentError(f"tail_k must be >= 1, got {k}")
    tail = np.asarray(path[-k:], dtype=np.float64)
    return VoxelCoord(*(int(v) for v in np.floor(tail.mean(axis=0) + 0.5)))


def localize(volume: Volume3D, net: PolicyLike, region: Region, max_steps: int = 300, tail_k: int = 10,
             start=None, greedy: bool = True, rng: Optional[np.random.Generator] = None) -> VoxelCoord:
    path = localize_path(volume, net, region, max_steps, start, greedy, rng)
    return region.clip(volume.dims).clamp(tail_mean(path, tail_k))


@dataclass(frozen=True)
class LocalizationError:
    path: str
    label: Label
    predicted: VoxelCoord
    truth: VoxelCoord
    mm: float


@dataclass(frozen=True)
class ErrorStats:
    n: int
    mean_mm: float
    sd_mm: float
    median_mm: float


def error_stats(errors_mm: Sequence[float]) -> ErrorStats:
    """Mean, population standard deviation and median"""
    arr = np.asarray(errors_mm, dtype=np.float64)
    if arr.size == 0:
        raise InvalidArgumentError("no localization errors to summarize")
    return ErrorStats(int(arr.size), float(arr.mean()), float(arr.std()), float(np.median(arr)))


def distance_mm(a, b, spacing) -> float:
    delta = (np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) * np.asarray(spacing)
    return float(np.linalg.norm(delta))


def localization_errors(entries: Sequence[ManifestEntry], net: PolicyLike, cfg: RunConfig) -> List[LocalizationError]:
    out = []
    for entry in entries:
        volume = entry.load()
        region = octant_region(volume.dims, cfg.phantom.octant)
        predicted = localize(volume, net, region, cfg.rl.max_steps, cfg.rl.tail_k)
        mm = distance_mm(predicted, entry.truth.base, volume.spacing)
        logger.debug(f"{entry.path}: predicted {tuple(predicted)} truth {tuple(entry.truth.base)} ({mm:.2f} mm)")
        out.append(LocalizationError(str(entry.path), entry.truth.label, predicted, entry.truth.base, mm))
    return out


def error_table(errors: Sequence[LocalizationError],
                centroid_errors_mm: Optional[Sequence[float]] = None) -> Dict[str, ErrorStats]:
    table = {"base": error_stats([e.mm for e in errors])}
    for label in Label:
        subset = [e.mm for e in errors if e.label == label]
        if subset:
            table[f"base_{label.name.lower()}"] = error_stats(subset)
    if centroid_errors_mm:
        table["centroid"] = error_stats(centroid_errors_mm)
    return table


def evaluate_localization(entries: Sequence[ManifestEntry], net: PolicyLike, cfg: RunConfig,
                          centroid_errors_mm: Optional[Sequence[float]] = None,
                          out_path=None) -> Dict[str, ErrorStats]:
    errors = localization_errors(entries, net, cfg)
    table = error_table(errors, centroid_errors_mm)
    for name, stats in table.items():
        logger.info(f"{name}: {stats.mean_mm:.2f} +/- {stats.sd_mm:.2f} mm, median {stats.median_mm:.2f} mm (n={stats.n})")
    if out_path is not None:
        write_error_table(table, out_path)
    return table


def write_error_table(table: Dict[str, ErrorStats], path) -> Path:
    rows = ([name, s.n, s.mean_mm, s.sd_mm, s.median_mm] for name, s in table.items())
    return write_csv(path, ["target", "n", "mean_mm", "sd_mm", "median_mm"], rows)

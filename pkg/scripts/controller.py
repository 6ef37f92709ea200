"""
REINFORCE controller
A single-layer LSTM emits one categorical distribution per decision; the reward
pipeline turns raw metrics into advantages (min/max normalization, EMA baseline,
entropy bonus). All controller math is float64.
"""

import json
import logging
import math
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import (
    CHECKPOINT_FORMAT_VERSION, CONTROLLER_HIDDEN, CONTROLLER_INIT_RANGE, CONTROLLER_LR,
    CONTROLLER_TANH_CONSTANT, CONTROLLER_TEMPERATURE, ENTROPY_WEIGHT, REWARD_EMA_DECAY,
)
from errors import CheckpointError, NonFiniteMetric, ParseError, ShapeMismatch
from search_space import Genome, SearchSpace, as_space, decision_dims, make_genome
from tensorkit import AdamState, adam_step

logger = logging.getLogger(__name__)

Decisions = Union[Genome, Sequence[int]]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    top = logits.max()
    return logits - (top + math.log(np.exp(logits - top).sum()))


@dataclass
class _Step:
    """Everything one LSTM step needs for backprop"""

    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    tc: np.ndarray
    h: np.ndarray
    squashed: np.ndarray
    probs: np.ndarray
    choice: int


@dataclass(frozen=True)
class PolicySample:
    decisions: Tuple[int, ...]
    log_prob: float
    entropy: float
    genome: Optional[Genome] = None


class Controller:
    """
    Policy over a fixed decision sequence.

    Step 0 reads a learned start embedding; step t > 0 reads the embedding of the
    choice made at step t-1. Each position has its own projection head:
    logits = tanh_constant * tanh(linear(h) / temperature).
    """

    def __init__(self, dims: Sequence[int], space: Optional[SearchSpace] = None,
                 hidden: int = CONTROLLER_HIDDEN, lr: float = CONTROLLER_LR, seed: int = 0,
                 tanh_constant: float = CONTROLLER_TANH_CONSTANT,
                 temperature: float = CONTROLLER_TEMPERATURE,
                 init_range: float = CONTROLLER_INIT_RANGE, head_init: str = "uniform"):
        if not dims or any(d < 1 for d in dims):
            raise ShapeMismatch(f"Every decision needs at least one option, got {list(dims)}")
        if head_init not in ("uniform", "zeros"):
            raise ValueError(f"head_init must be 'uniform' or 'zeros', got {head_init!r}")
        self.dims = [int(d) for d in dims]
        self.space = space
        self.hidden = hidden
        self.lr = lr
        self.seed = seed
        self.tanh_constant = tanh_constant
        self.temperature = temperature
        self.updates = 0
        self.rng = np.random.default_rng(seed)
        self._lock = threading.RLock()

        init = np.random.default_rng(seed + 1)

        def uniform(*shape):
            return init.uniform(-init_range, init_range, size=shape)

        h = hidden
        params = {
            "start": uniform(h),
            "lstm.w_x": uniform(4 * h, h),
            "lstm.w_h": uniform(4 * h, h),
            "lstm.bias": uniform(4 * h),
        }
        for p, dim in enumerate(self.dims):
            params[f"embed.{p}"] = uniform(dim, h)
            if head_init == "zeros":
                params[f"head.{p}.weight"] = np.zeros((dim, h))
                params[f"head.{p}.bias"] = np.zeros(dim)
            else:
                params[f"head.{p}.weight"] = uniform(dim, h)
                params[f"head.{p}.bias"] = uniform(dim)
        self.params: Dict[str, np.ndarray] = params
        self.adam = AdamState.zeros_like(list(params.values()))

    @classmethod
    def for_space(cls, space, **kwargs) -> "Controller":
        space = as_space(space)
        return cls(decision_dims(space), space=space, **kwargs)

    # ── Rollout ─────────────────────────────────────────────────

    def _rollout(self, choices: Optional[Sequence[int]] = None) -> Tuple[List[_Step], float, float]:
        """Run the LSTM over every position; sample when `choices` is None"""
        p_ = self.params
        hsz = self.hidden
        h = np.zeros(hsz)
        c = np.zeros(hsz)
        x = p_["start"]
        steps: List[_Step] = []
        log_prob = 0.0
        entropy = 0.0
        for pos, dim in enumerate(self.dims):
            z = p_["lstm.w_x"] @ x + p_["lstm.w_h"] @ h + p_["lstm.bias"]
            i = _sigmoid(z[:hsz])
            f = _sigmoid(z[hsz:2 * hsz])
            g = np.tanh(z[2 * hsz:3 * hsz])
            o = _sigmoid(z[3 * hsz:])
            c_new = f * c + i * g
            tc = np.tanh(c_new)
            h_new = o * tc
            squashed = np.tanh((p_[f"head.{pos}.weight"] @ h_new + p_[f"head.{pos}.bias"]) / self.temperature)
            logp = _log_softmax(self.tanh_constant * squashed)
            probs = np.exp(logp)
            if choices is None:
                choice = int(self.rng.choice(dim, p=probs / probs.sum()))
            else:
                choice = int(choices[pos])
            log_prob += float(logp[choice])
            entropy -= float((probs * logp).sum())
            steps.append(_Step(x, h, c, i, f, g, o, tc, h_new, squashed, probs, choice))
            x = p_[f"embed.{pos}"][choice]
            h, c = h_new, c_new
        return steps, log_prob, entropy

    def _grad_log_prob(self, steps: List[_Step]) -> Dict[str, np.ndarray]:
        """Backprop through time of sum(log p(choice_t))"""
        p_ = self.params
        hsz = self.hidden
        grads = {name: np.zeros_like(value) for name, value in p_.items()}
        dh_next = np.zeros(hsz)
        dc_next = np.zeros(hsz)
        for pos in range(len(steps) - 1, -1, -1):
            s = steps[pos]
            dlogits = -s.probs
            dlogits[s.choice] += 1.0
            dpre = dlogits * self.tanh_constant * (1.0 - s.squashed ** 2) / self.temperature
            grads[f"head.{pos}.weight"] += np.outer(dpre, s.h)
            grads[f"head.{pos}.bias"] += dpre

            dh = p_[f"head.{pos}.weight"].T @ dpre + dh_next
            dc = dc_next + dh * s.o * (1.0 - s.tc ** 2)
            dz = np.concatenate([
                dc * s.g * s.i * (1.0 - s.i),
                dc * s.c_prev * s.f * (1.0 - s.f),
                dc * s.i * (1.0 - s.g ** 2),
                dh * s.tc * s.o * (1.0 - s.o),
            ])
            dc_next = dc * s.f
            grads["lstm.w_x"] += np.outer(dz, s.x)
            grads["lstm.w_h"] += np.outer(dz, s.h_prev)
            grads["lstm.bias"] += dz
            dx = p_["lstm.w_x"].T @ dz
            dh_next = p_["lstm.w_h"].T @ dz
            if pos == 0:
                grads["start"] += dx
            else:
                grads[f"embed.{pos - 1}"][steps[pos - 1].choice] += dx
        return grads

    def _check_decisions(self, decisions: Decisions) -> Tuple[int, ...]:
        values = tuple(decisions.decisions if isinstance(decisions, Genome) else decisions)
        if len(values) != len(self.dims):
            raise ShapeMismatch(f"Genome has {len(values)} decisions, policy expects {len(self.dims)}")
        for pos, (choice, dim) in enumerate(zip(values, self.dims)):
            if not 0 <= choice < dim:
                raise ShapeMismatch(f"Decision {pos} = {choice} outside the policy's {dim} options")
        return values

    # ── Public API ──────────────────────────────────────────────

    def sample(self) -> PolicySample:
        with self._lock:
            steps, log_prob, entropy = self._rollout()
        decisions = tuple(s.choice for s in steps)
        genome = make_genome(self.space, decisions) if self.space is not None else None
        return PolicySample(decisions, log_prob, entropy, genome)

    def log_prob_and_entropy(self, decisions: Decisions) -> Tuple[float, float]:
        values = self._check_decisions(decisions)
        with self._lock:
            _, log_prob, entropy = self._rollout(values)
        return log_prob, entropy

    def probability(self, decisions: Decisions) -> float:
        return math.exp(self.log_prob_and_entropy(decisions)[0])

    def grad_log_prob(self, decisions: Decisions) -> Dict[str, np.ndarray]:
        values = self._check_decisions(decisions)
        with self._lock:
            steps, _, _ = self._rollout(values)
            return self._grad_log_prob(steps)

    def reinforce_update(self, decisions: Decisions, reward: float) -> float:
        """One Adam step on -log_prob * reward; returns that loss"""
        if not math.isfinite(reward):
            raise NonFiniteMetric(f"Reward must be finite, got {reward}")
        values = self._check_decisions(decisions)
        with self._lock:
            steps, log_prob, _ = self._rollout(values)
            grads = self._grad_log_prob(steps)
            names = list(self.params)
            updated = adam_step([self.params[n] for n in names],
                                [-reward * grads[n] for n in names], self.adam, self.lr)
            for name, value in zip(names, updated):
                if not np.all(np.isfinite(value)):
                    raise NonFiniteMetric(f"Controller parameter {name} became non-finite")
                self.params[name] = value
            self.updates += 1
        return -reward * log_prob

    def greedy_decode(self) -> Tuple[int, ...]:
        """
        Argmax at every position given the greedy prefix. This is not the
        jointly most probable genome; on enumerable spaces rank genomes by
        probability() for that.
        """
        with self._lock:
            p_ = self.params
            hsz = self.hidden
            h, c, x = np.zeros(hsz), np.zeros(hsz), p_["start"]
            choices = []
            for pos in range(len(self.dims)):
                z = p_["lstm.w_x"] @ x + p_["lstm.w_h"] @ h + p_["lstm.bias"]
                c = _sigmoid(z[hsz:2 * hsz]) * c + _sigmoid(z[:hsz]) * np.tanh(z[2 * hsz:3 * hsz])
                h = _sigmoid(z[3 * hsz:]) * np.tanh(c)
                logits = p_[f"head.{pos}.weight"] @ h + p_[f"head.{pos}.bias"]
                choices.append(int(np.argmax(logits)))
                x = p_[f"embed.{pos}"][choices[-1]]
        return tuple(choices)


# ── Reward pipeline ─────────────────────────────────────────────

@dataclass
class RewardPipeline:
    """
    reward = (N(E) - baseline) + entropy_weight * H

    N is min/max normalization over the full history (0.5 while max == min);
    the baseline is an EMA of N, updated after the advantage is taken. With
    maximize=False the metric is negated first, so lower raw values earn more.
    """

    decay: float = REWARD_EMA_DECAY
    entropy_weight: float = ENTROPY_WEIGHT
    maximize: bool = True
    baseline: float = 0.0
    running_min: Optional[float] = None
    running_max: Optional[float] = None
    count: int = 0
    last_normalized: Optional[float] = field(default=None, compare=False)

    def normalize(self, raw_metric: float) -> float:
        value = raw_metric if self.maximize else -raw_metric
        if self.running_min is None:
            self.running_min = self.running_max = value
        else:
            self.running_min = min(self.running_min, value)
            self.running_max = max(self.running_max, value)
        if self.running_max == self.running_min:
            return 0.5
        return (value - self.running_min) / (self.running_max - self.running_min)

    def _advance(self, normalized: float, entropy: float) -> float:
        advantage = normalized - self.baseline
        self.baseline = self.decay * self.baseline + (1.0 - self.decay) * normalized
        self.count += 1
        self.last_normalized = normalized
        return advantage + self.entropy_weight * entropy

    def compute_reward(self, raw_metric: float, entropy: float) -> float:
        if raw_metric is None or not math.isfinite(raw_metric):
            raise NonFiniteMetric(f"Raw metric must be finite, got {raw_metric}")
        return self._advance(self.normalize(raw_metric), entropy)

    def worst_reward(self, entropy: float) -> float:
        """Reward for a failed evaluation: normalized 0, min/max untouched"""
        return self._advance(0.0, entropy)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RewardPipeline":
        try:
            return cls(**data)
        except TypeError as e:
            raise ParseError("pipeline", str(e))


# ── Checkpoints ─────────────────────────────────────────────────

def save_checkpoint(path: Path, controller: Controller, pipeline: RewardPipeline,
                    progress: Optional[dict] = None) -> None:
    """npz container: parameters, Adam moments, RNG state, pipeline, progress"""
    path = Path(path)
    with controller._lock:
        arrays = {"format": np.array(CHECKPOINT_FORMAT_VERSION)}
        names = list(controller.params)
        for k, name in enumerate(names):
            arrays[f"param/{name}"] = controller.params[name]
            arrays[f"adam_m/{name}"] = controller.adam.m[k]
            arrays[f"adam_v/{name}"] = controller.adam.v[k]
        header = {
            "dims": controller.dims,
            "space": None if controller.space is None else asdict(controller.space),
            "hidden": controller.hidden,
            "lr": controller.lr,
            "seed": controller.seed,
            "tanh_constant": controller.tanh_constant,
            "temperature": controller.temperature,
            "updates": controller.updates,
            "adam_step": controller.adam.step,
            "rng_state": controller.rng.bit_generator.state,
            "param_order": names,
        }
    arrays["header"] = np.array(json.dumps(header))
    arrays["pipeline"] = np.array(json.dumps(pipeline.to_dict()))
    arrays["progress"] = np.array(json.dumps(progress or {}))
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as f:
            np.savez(f, **arrays)
        tmp.replace(path)
    except OSError as e:
        raise CheckpointError(f"Could not write controller checkpoint {path}: {e}")


def load_checkpoint(path: Path) -> Tuple[Controller, RewardPipeline, dict]:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as data:
            contents = {key: data[key] for key in data.files}
    except OSError as e:
        raise CheckpointError(f"Could not read controller checkpoint {path}: {e}")
    except ValueError as e:
        raise ParseError(str(path), f"not a controller checkpoint: {e}")

    if int(contents.get("format", -1)) != CHECKPOINT_FORMAT_VERSION:
        raise ParseError("format", f"unsupported checkpoint format {contents.get('format')!r}")
    header = json.loads(str(contents["header"]))
    space = SearchSpace(**header["space"]) if header["space"] else None
    controller = Controller(header["dims"], space=space, hidden=header["hidden"], lr=header["lr"],
                            seed=header["seed"], tanh_constant=header["tanh_constant"],
                            temperature=header["temperature"])
    names = header["param_order"]
    if set(names) != set(controller.params):
        raise ShapeMismatch("Checkpoint parameters do not match the policy layout")
    controller.params = {name: contents[f"param/{name}"].astype(np.float64) for name in names}
    controller.adam = AdamState([contents[f"adam_m/{n}"] for n in names],
                                [contents[f"adam_v/{n}"] for n in names], step=header["adam_step"])
    controller.updates = header["updates"]
    controller.rng.bit_generator.state = header["rng_state"]
    pipeline = RewardPipeline.from_dict(json.loads(str(contents["pipeline"])))
    progress = json.loads(str(contents["progress"]))
    return controller, pipeline, progress

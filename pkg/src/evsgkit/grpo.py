"""Group-relative policy optimisation on a desk-scale grounded-QA task.

The policy is linear-softmax over three categorical heads (start bucket,
end bucket, answer id), so log-probabilities, the KL to the reference
policy and the objective gradient all have closed forms.

Objective for a batch of B instances, one group of G rollouts each::

    J(theta) = 1/B * sum_b [ sum_k ratio_bk(theta) * A_bk  -  beta * KL(pi_theta(.|x_b) || pi_ref(.|x_b)) ]

with ``ratio = exp(logp_theta - logp_old)`` and ``A`` the group-normalised
rewards.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .errors import ConfigError, GroupSizeError, StructureError, TrainingError
from .graph import EVSG, EventSubgraph, TimeSpan, Triplet, build_graph
from .rewards import NEUTRAL_DUMP, GroundTruth, RewardWeights, score_text

TRAIN_TAG = 0
ROLLOUT_TAG = 1
EVAL_TAG = 2
EVAL_ROLLOUT_TAG = 3

SUBJECTS = ("man", "woman", "child", "dog", "player", "chef")
RELATIONS = (
    "holds", "sits_on", "picks_up", "opens", "throws", "rides", "pushes", "carries",
    "wears", "kicks", "lifts", "washes", "cuts", "pours", "reads", "folds",
)
ENTITIES = (
    "ball", "towel", "bench", "cup", "door", "bike", "book", "knife",
    "box", "phone", "hat", "bag", "bottle", "chair", "rope", "plate",
)
QUESTION_TEMPLATES = (
    "What does the {subject} {relation} in the video, and when?",
    "When the {subject} {relation} something, what is it?",
    "Which object does the {subject} {relation}? Give the time span.",
)


# --- group statistics ---------------------------------------------------------


def normalize_group(rewards: Sequence[float], std_epsilon: float = 1e-8) -> np.ndarray:
    """``(r - mean) / std`` with the population std; constant groups map to zeros."""
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size < 2:
        raise GroupSizeError(f"group needs at least 2 rewards, got {r.size}")
    std = float(r.std())
    if std < std_epsilon:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def group_objective(ratios: Sequence[float], advantages: Sequence[float]) -> float:
    """Importance-weighted group sum of advantages."""
    ratios = np.asarray(ratios, dtype=float)
    advantages = np.asarray(advantages, dtype=float)
    if ratios.size == 0 or ratios.shape != advantages.shape:
        raise StructureError(
            f"ratios and advantages must be non-empty and equal length, got {ratios.size} and {advantages.size}"
        )
    return float(np.dot(ratios, advantages))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def kl_categorical(p_logits: Sequence[float], q_logits: Sequence[float]) -> float:
    """Exact KL(softmax(p) || softmax(q))."""
    p_logits = np.asarray(p_logits, dtype=float)
    q_logits = np.asarray(q_logits, dtype=float)
    if p_logits.shape != q_logits.shape:
        raise StructureError(f"logit shapes differ: {p_logits.shape} vs {q_logits.shape}")
    lp, lq = log_softmax(p_logits), log_softmax(q_logits)
    return max(0.0, float(np.sum(np.exp(lp) * (lp - lq))))


# --- environment ---------------------------------------------------------------


@dataclass(frozen=True)
class EnvConfig:
    n_buckets: int = 8
    bucket_seconds: float = 5.0
    n_answers: int = 12
    min_events: int = 3
    max_events: int = 8

    def __post_init__(self) -> None:
        if not 1 <= self.min_events <= self.max_events:
            raise ConfigError("need 1 <= min_events <= max_events")
        if self.max_events > self.n_buckets:
            raise ConfigError("max_events cannot exceed n_buckets")
        if not 2 <= self.n_answers <= len(ENTITIES):
            raise ConfigError(f"n_answers must be in [2, {len(ENTITIES)}]")
        if self.bucket_seconds <= 0:
            raise ConfigError("bucket_seconds must be > 0")

    @property
    def duration(self) -> float:
        return self.n_buckets * self.bucket_seconds

    @property
    def answers(self) -> tuple[str, ...]:
        return ENTITIES[: self.n_answers]

    @property
    def feature_dim(self) -> int:
        R, D, K = len(RELATIONS), self.n_buckets, self.n_answers
        return 2 * R + 4 * D + K + 1


@dataclass(frozen=True)
class SyntheticInstance:
    graph: EVSG
    template_id: int
    question: str
    gt_span: tuple[float, float]
    gt_answer_id: int
    gt_answer: str
    features: np.ndarray = field(compare=False)
    gt_buckets: tuple[int, int] = (0, 0)


def gen_instance(seed: int, env: EnvConfig = EnvConfig()) -> SyntheticInstance:
    """Seeded graph + question whose answer is grounded in exactly one event."""
    rng = np.random.default_rng(seed)
    D, w = env.n_buckets, env.bucket_seconds
    n = int(rng.integers(env.min_events, env.max_events + 1))
    cuts = np.sort(rng.choice(np.arange(1, D), size=n - 1, replace=False)) if n > 1 else np.array([], int)
    bounds = [0, *cuts.tolist(), D]
    q = int(rng.integers(n))
    q_rel = RELATIONS[int(rng.integers(len(RELATIONS)))]
    others = [r for r in RELATIONS if r != q_rel]
    answer_id = int(rng.integers(env.n_answers))
    subject = SUBJECTS[int(rng.integers(len(SUBJECTS)))]

    events = []
    for k in range(n):
        triplets = [
            Triplet(SUBJECTS[int(rng.integers(len(SUBJECTS)))], others[int(rng.integers(len(others)))],
                    ENTITIES[int(rng.integers(len(ENTITIES)))])
            for _ in range(int(rng.integers(1, 3)))
        ]
        if k == q:
            triplets.insert(int(rng.integers(len(triplets) + 1)), Triplet(subject, q_rel, env.answers[answer_id]))
        events.append(EventSubgraph(k + 1, TimeSpan(bounds[k] * w, bounds[k + 1] * w), tuple(triplets)))
    graph = build_graph(f"synthetic-{seed}", env.duration, events)

    template_id = int(rng.integers(len(QUESTION_TEMPLATES)))
    question = QUESTION_TEMPLATES[template_id].format(subject=subject, relation=q_rel.replace("_", " "))
    gt_buckets = (bounds[q], bounds[q + 1] - 1)
    features = _features(graph, q_rel, gt_buckets, answer_id, env)
    return SyntheticInstance(
        graph, template_id, question, (bounds[q] * w, bounds[q + 1] * w), answer_id,
        env.answers[answer_id], features, gt_buckets,
    )


def _features(graph: EVSG, q_rel: str, gt_buckets: tuple[int, int], answer_id: int,
              env: EnvConfig) -> np.ndarray:
    """Bag-of-relations counts, event start/end histograms, and the query's event encoding."""
    R, D, K, w = len(RELATIONS), env.n_buckets, env.n_answers, env.bucket_seconds
    rel_counts = np.zeros(R)
    starts, ends = np.zeros(D), np.zeros(D)
    n = len(graph.events)
    for ev in graph.events:
        for t in ev.triplets:
            rel_counts[RELATIONS.index(t.relation)] += 1.0 / n
        starts[min(D - 1, int(round(ev.start / w)))] += 1.0 / n
        ends[min(D - 1, int(round(ev.end / w)) - 1)] += 1.0 / n
    query = np.zeros(R)
    query[RELATIONS.index(q_rel)] = 1.0
    q_start, q_end, q_obj = np.zeros(D), np.zeros(D), np.zeros(K)
    q_start[gt_buckets[0]] = 1.0
    q_end[gt_buckets[1]] = 1.0
    q_obj[answer_id] = 1.0
    return np.concatenate([rel_counts, starts, ends, query, q_start, q_end, q_obj, [1.0]])


# --- policy ------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyPolicy:
    """Linear-softmax policy; ``params`` is the flat concatenation of the three head matrices."""

    n_buckets: int
    n_answers: int
    feature_dim: int
    params: np.ndarray = field(compare=False)

    @classmethod
    def zeros(cls, env: EnvConfig) -> ToyPolicy:
        size = (2 * env.n_buckets + env.n_answers) * env.feature_dim
        return cls(env.n_buckets, env.n_answers, env.feature_dim, np.zeros(size))

    def with_params(self, params: np.ndarray) -> ToyPolicy:
        return ToyPolicy(self.n_buckets, self.n_answers, self.feature_dim, np.asarray(params, dtype=float))

    def heads(self, params: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        p = self.params if params is None else params
        D, K, F = self.n_buckets, self.n_answers, self.feature_dim
        return (p[: D * F].reshape(D, F), p[D * F: 2 * D * F].reshape(D, F), p[2 * D * F:].reshape(K, F))

    def logits(self, x: np.ndarray, params: np.ndarray | None = None) -> tuple[np.ndarray, ...]:
        return tuple(W @ x for W in self.heads(params))

    def log_prob(self, x: np.ndarray, actions: np.ndarray, params: np.ndarray | None = None) -> np.ndarray:
        """Log-probabilities of ``actions`` (shape ``(G, 3)``)."""
        actions = np.asarray(actions)
        lps = [log_softmax(z) for z in self.logits(x, params)]
        return sum(lp[actions[:, h]] for h, lp in enumerate(lps))

    def sample(self, x: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
        cols = []
        for z in self.logits(x):
            p = np.exp(log_softmax(z))
            cols.append(rng.choice(p.size, size=n, p=p))
        return np.stack(cols, axis=1)

    def kl(self, other: ToyPolicy, x: np.ndarray) -> float:
        return sum(kl_categorical(a, b) for a, b in zip(self.logits(x), other.logits(x)))

    def __eq__(self, other: object) -> bool:
        return (isinstance(other, ToyPolicy)
                and (self.n_buckets, self.n_answers, self.feature_dim)
                == (other.n_buckets, other.n_answers, other.feature_dim)
                and np.array_equal(self.params, other.params))

    __hash__ = None  # type: ignore[assignment]


# --- objective ----------------------------------------------------------------------


@dataclass(frozen=True)
class RolloutGroup:
    features: np.ndarray
    actions: np.ndarray        # (G, 3)
    rewards: np.ndarray        # (G,)
    advantages: np.ndarray     # (G,)
    logp_old: np.ndarray       # (G,)

    @property
    def size(self) -> int:
        return len(self.rewards)


def _kl_grad_logits(z: np.ndarray, z_ref: np.ndarray) -> tuple[float, np.ndarray]:
    lp, lq = log_softmax(z), log_softmax(z_ref)
    p = np.exp(lp)
    kl = float(np.sum(p * (lp - lq)))
    return kl, p * (lp - lq - kl)


def objective_and_grad(policy: ToyPolicy, params: np.ndarray, groups: Sequence[RolloutGroup],
                       ref: ToyPolicy, beta: float, clip_eps: float | None = None) -> tuple[float, np.ndarray, float]:
    """Value of J, its gradient with respect to ``params``, and the mean KL."""
    D, K, F = policy.n_buckets, policy.n_answers, policy.feature_dim
    grads = [np.zeros((D, F)), np.zeros((D, F)), np.zeros((K, F))]
    value = 0.0
    kl_total = 0.0
    for g in groups:
        x = g.features
        logits = policy.logits(x, params)
        ref_logits = ref.logits(x)
        lps = [log_softmax(z) for z in logits]
        logp = sum(lp[g.actions[:, h]] for h, lp in enumerate(lps))
        ratio = np.exp(logp - g.logp_old)
        weight = ratio * g.advantages
        if clip_eps is None:
            surrogate = weight
            active = np.ones_like(ratio, dtype=bool)
        else:
            clipped = np.clip(ratio, 1 - clip_eps, 1 + clip_eps) * g.advantages
            surrogate = np.minimum(weight, clipped)
            active = weight <= clipped
        value += float(surrogate.sum())
        coef = np.where(active, weight, 0.0)
        for h, (z, z_ref, lp) in enumerate(zip(logits, ref_logits, lps)):
            p = np.exp(lp)
            onehots = np.zeros((len(coef), z.size))
            onehots[np.arange(len(coef)), g.actions[:, h]] = 1.0
            d_logits = coef @ (onehots - p)
            kl, d_kl = _kl_grad_logits(z, z_ref)
            kl_total += kl
            value -= beta * kl
            grads[h] += np.outer(d_logits - beta * d_kl, x)
    B = len(groups)
    flat = np.concatenate([gr.ravel() for gr in grads]) / B
    return value / B, flat, kl_total / B


# --- training ------------------------------------------------------------------------


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 8
    batch_size: int = 16
    beta: float = 0.04
    learning_rate: float = 0.05
    iterations: int = 500
    seed: int = 7
    std_epsilon: float = 1e-8
    inner_steps: int = 1
    clip_eps: float | None = None
    optimizer: str = "adam"
    eval_instances: int = 64

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2")
        if self.batch_size < 1 or self.inner_steps < 1 or self.iterations < 0:
            raise ConfigError("batch_size and inner_steps must be >= 1, iterations >= 0")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.clip_eps is not None and not 0 < self.clip_eps < 1:
            raise ConfigError("clip_eps must be in (0, 1)")


RewardFn = Callable[[SyntheticInstance, np.ndarray], float]


def rollout_text(instance: SyntheticInstance, action: Sequence[int], env: EnvConfig) -> str:
    s, e, a = (int(v) for v in action)
    w = env.bucket_seconds
    return (
        f"<think>{instance.question} Looking for the event in the graph.</think>"
        f"<answer>from {s * w:.1f} to {(e + 1) * w:.1f} seconds. Answer: {env.answers[a]}</answer>"
    )


def composite_reward(env: EnvConfig, weights: RewardWeights = RewardWeights()) -> RewardFn:
    """Score a rollout with the full reward; attention is a fixed neutral 50/50 dump."""
    def reward(instance: SyntheticInstance, action: np.ndarray) -> float:
        gt = GroundTruth(instance.gt_span, instance.gt_answer)
        return score_text(rollout_text(instance, action, env), gt, NEUTRAL_DUMP, weights).total
    return reward


class Adam:
    def __init__(self, size: int, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, grad: np.ndarray) -> np.ndarray:
        """Ascent direction scaled by the learning rate."""
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class Sgd:
    def __init__(self, size: int, lr: float):
        self.lr = lr

    def step(self, grad: np.ndarray) -> np.ndarray:
        return self.lr * grad


def make_optimizer(config: GrpoConfig, size: int):
    return Adam(size, config.learning_rate) if config.optimizer == "adam" else Sgd(size, config.learning_rate)


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


def _instance_seed(*key: int) -> int:
    return int(np.random.SeedSequence(list(key)).generate_state(1)[0])


def collect_groups(policy: ToyPolicy, batch: Sequence[SyntheticInstance], config: GrpoConfig,
                   reward_fn: RewardFn, rngs: Sequence[np.random.Generator]) -> list[RolloutGroup]:
    groups = []
    for inst, rng in zip(batch, rngs):
        actions = policy.sample(inst.features, config.group_size, rng)
        rewards = np.array([reward_fn(inst, a) for a in actions])
        groups.append(RolloutGroup(
            inst.features, actions, rewards,
            normalize_group(rewards, config.std_epsilon),
            policy.log_prob(inst.features, actions),
        ))
    return groups


def grpo_step(policy: ToyPolicy, batch: Sequence[SyntheticInstance], config: GrpoConfig,
              reward_fn: RewardFn, ref: ToyPolicy | None = None, optimizer=None,
              rngs: Sequence[np.random.Generator] | None = None,
              iteration: int | None = None) -> tuple[ToyPolicy, dict[str, float]]:
    """Sample a group per instance, normalise rewards, ascend the KL-regularised objective."""
    if not np.all(np.isfinite(policy.params)):
        raise TrainingError("policy parameters are not finite", iteration)
    ref = ref if ref is not None else policy
    optimizer = optimizer or make_optimizer(config, policy.params.size)
    if rngs is None:
        rngs = [_rng(config.seed, ROLLOUT_TAG, 0 if iteration is None else iteration, b)
                for b in range(len(batch))]
    groups = collect_groups(policy, batch, config, reward_fn, rngs)

    params = policy.params.copy()
    for _ in range(config.inner_steps):
        value, grad, _ = objective_and_grad(policy, params, groups, ref, config.beta, config.clip_eps)
        if not np.all(np.isfinite(grad)):
            bad = int(np.flatnonzero(~np.isfinite(grad))[0])
            raise TrainingError(f"non-finite gradient at parameter {bad} (objective {value})", iteration)
        params = params + optimizer.step(grad)
    updated = policy.with_params(params)
    kl = float(np.mean([updated.kl(ref, inst.features) for inst in batch]))
    stats = {
        "mean_reward": float(np.mean([g.rewards.mean() for g in groups])),
        "mean_kl": kl,
        "objective": value,
    }
    return updated, stats


@dataclass
class TrainReport:
    config: dict[str, Any]
    env: dict[str, Any]
    seed: int
    mean_reward: list[float]
    mean_kl: list[float]
    initial_eval: float
    final_eval: float
    final_kl: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> TrainReport:
        return cls(**json.loads(text))


def evaluate(policy: ToyPolicy, config: GrpoConfig, env: EnvConfig, reward_fn: RewardFn) -> float:
    """Mean sampled reward on a fixed held-out instance set with fixed sampling streams."""
    total = []
    for j in range(config.eval_instances):
        inst = gen_instance(_instance_seed(config.seed, EVAL_TAG, j), env)
        actions = policy.sample(inst.features, config.group_size, _rng(config.seed, EVAL_ROLLOUT_TAG, j))
        total.extend(reward_fn(inst, a) for a in actions)
    return float(np.mean(total))


def eval_kl(policy: ToyPolicy, ref: ToyPolicy, config: GrpoConfig, env: EnvConfig) -> float:
    return float(np.mean([
        policy.kl(ref, gen_instance(_instance_seed(config.seed, EVAL_TAG, j), env).features)
        for j in range(config.eval_instances)
    ]))


def train_toy(config: GrpoConfig = GrpoConfig(), env: EnvConfig = EnvConfig(),
              weights: RewardWeights = RewardWeights(),
              on_iteration: Callable[[int, dict[str, float]], None] | None = None) -> TrainReport:
    reward_fn = composite_reward(env, weights)
    policy = ToyPolicy.zeros(env)
    ref = policy
    optimizer = make_optimizer(config, policy.params.size)
    initial = evaluate(policy, config, env, reward_fn)
    rewards, kls = [], []
    for it in range(config.iterations):
        batch = [gen_instance(_instance_seed(config.seed, TRAIN_TAG, it, b), env) for b in range(config.batch_size)]
        rngs = [_rng(config.seed, ROLLOUT_TAG, it, b) for b in range(config.batch_size)]
        try:
            policy, stats = grpo_step(policy, batch, config, reward_fn, ref, optimizer, rngs, it)
        except TrainingError:
            raise
        except Exception as exc:
            raise TrainingError(f"{type(exc).__name__}: {exc}", it) from exc
        rewards.append(stats["mean_reward"])
        kls.append(stats["mean_kl"])
        if on_iteration is not None:
            on_iteration(it, stats)
    final = evaluate(policy, config, env, reward_fn) if config.iterations else initial
    return TrainReport(
        config=asdict(config), env=asdict(env), seed=config.seed,
        mean_reward=rewards, mean_kl=kls, initial_eval=initial, final_eval=final,
        final_kl=eval_kl(policy, ref, config, env),
    )


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.size < window:
        raise ValueError(f"need at least {window} values")
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window


__all__ = [
    "Adam", "EnvConfig", "GrpoConfig", "RolloutGroup", "SyntheticInstance", "ToyPolicy", "TrainReport",
    "collect_groups", "composite_reward", "evaluate", "gen_instance", "group_objective", "grpo_step",
    "kl_categorical", "log_softmax", "moving_average", "normalize_group", "objective_and_grad",
    "rollout_text", "train_toy",
]

"""Behavior-cloned MLP policy with auxiliary jerk and action-rate penalties.

The policy maps an observation ``(q, target, normalized time)`` to an
``H x k`` chunk of joint-velocity commands. Hidden layers use tanh; the output
is ``action_scale * tanh(.)`` so commands stay bounded.

Gradients are computed by hand and checked against central differences in
``finite_diff_grad_check``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .compression import (
    ModelFile, TokenSet, WeightTensor, codec_roundtrip, load_model, save_model, token_prune,
)
from .errors import InsufficientLengthError, TrainingDivergedError, ValidationError
from .metrics import action_rate_of, jerk_of_velocities
from .sim import TaskSpec
from .trajectory import EpisodeLog, SuiteRun

DEFAULT_ETA = 0.01


@dataclass
class MlpPolicy:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    H: int
    k: int
    f: float = 1.0
    action_scale: float = 1.0
    time_scale: float = 30.0
    inference: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValidationError("need matching, non-empty weight and bias lists")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ValidationError(f"layer {i}: bias shape {b.shape} vs weight {W.shape}")
            if i and W.shape[1] != self.weights[i - 1].shape[0]:
                raise ValidationError(f"layer {i}: input width {W.shape[1]} does not chain")
        if self.weights[-1].shape[0] != self.H * self.k:
            raise ValidationError("output layer must emit H * k values")

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpPolicy":
        return MlpPolicy([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                         self.H, self.k, self.f, self.action_scale, self.time_scale,
                         dict(self.inference))

    def flat_params(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in
                               zip(self.weights, self.biases)])

    def set_flat_params(self, theta: np.ndarray) -> None:
        pos = 0
        for W, b in zip(self.weights, self.biases):
            W[...] = theta[pos:pos + W.size].reshape(W.shape)
            pos += W.size
            b[...] = theta[pos:pos + b.size]
            pos += b.size


def init_policy(n_in: int, H: int, k: int, hidden: Sequence[int] = (64, 64), seed: int = 0,
                f: float = 1.0, action_scale: float = 1.0, time_scale: float = 30.0
                ) -> MlpPolicy:
    if H < 3:
        raise ValidationError("chunk length H must be >= 3")
    rng = np.random.Generator(np.random.PCG64(seed))
    sizes = [n_in, *hidden, H * k]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpPolicy(weights, biases, H, k, f, action_scale, time_scale)


def _forward(policy: MlpPolicy, obs: np.ndarray):
    acts = [obs]
    x = obs
    for W, b in zip(policy.weights, policy.biases):
        x = np.tanh(x @ W.T + b)
        acts.append(x)
    return acts


def policy_forward(policy: MlpPolicy, obs) -> np.ndarray:
    """Action chunk ``(H, k)`` for one observation, or ``(B, H, k)`` for a batch."""
    obs = np.asarray(obs, dtype=np.float64)
    single = obs.ndim == 1
    batch = obs[None, :] if single else obs
    if batch.shape[1] != policy.n_in:
        raise ValidationError(f"observation has {batch.shape[1]} entries, policy expects {policy.n_in}")
    out = policy.action_scale * _forward(policy, batch)[-1]
    out = out.reshape(-1, policy.H, policy.k)
    return out[0] if single else out


# -- losses -------------------------------------------------------------------------------

@dataclass(frozen=True)
class LossBreakdown:
    bc: float
    jerk_term: float
    rate_term: float
    total: float
    eta: float = DEFAULT_ETA


def bc_loss(pred, demo) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    demo = np.asarray(demo, dtype=np.float64)
    if pred.shape != demo.shape:
        raise ValidationError(f"shape mismatch: {pred.shape} vs {demo.shape}")
    return float(np.mean((pred - demo) ** 2))


def jerk_penalty(chunk, f: float = 1.0) -> float:
    """The episode jerk metric with the chunk's actions as velocity samples."""
    chunk = np.asarray(chunk, dtype=np.float64)
    if chunk.shape[0] < 3:
        raise InsufficientLengthError("jerk penalty needs H >= 3")
    return jerk_of_velocities(chunk, f)


def rate_penalty(chunk) -> float:
    chunk = np.asarray(chunk, dtype=np.float64)
    if chunk.shape[0] < 2:
        raise InsufficientLengthError("rate penalty needs H >= 2")
    return action_rate_of(chunk)


def _loss_and_output_grad(P: np.ndarray, D: np.ndarray, f: float, eta: float,
                          context: np.ndarray | None = None):
    """Batch-mean losses and d(total)/dP for chunks ``P``, ``D`` of shape (B, H, k).

    ``context`` (B, k), when given, is the action executed just before each
    chunk; it is prepended to ``P`` for the jerk and rate terms only.
    """
    B, H, _ = P.shape
    resid = P - D
    bc = float(np.mean(resid**2))
    grad = 2.0 * resid / resid.size

    S = P if context is None else np.concatenate([context[:, None, :], P], axis=1)
    n = S.shape[1]
    second = S[:, 2:] - 2.0 * S[:, 1:-1] + S[:, :-2]
    jscale = f**4 / (n - 2)
    jerk = jscale * float(np.sum(second**2)) / B

    diff = S[:, 1:] - S[:, :-1]
    norms = np.linalg.norm(diff, axis=2)
    rate = float(np.sum(norms)) / ((n - 1) * B)

    if eta:
        gS = np.zeros_like(S)
        gs = eta * 2.0 * jscale * second / B
        gS[:, :-2] += gs
        gS[:, 1:-1] -= 2.0 * gs
        gS[:, 2:] += gs
        safe = np.where(norms > 0, norms, 1.0)
        # subgradient 0 where consecutive actions coincide
        gd = eta * np.where(norms[..., None] > 0, diff / safe[..., None], 0.0) / ((n - 1) * B)
        gS[:, 1:] += gd
        gS[:, :-1] -= gd
        grad += gS[:, n - H:]
    total = bc + eta * (jerk + rate)
    return LossBreakdown(bc, jerk, rate, total, eta), grad


@dataclass
class Batch:
    obs: np.ndarray                    # (B, n_in)
    chunks: np.ndarray                 # (B, H, k)
    context: np.ndarray | None = None  # (B, k) action executed before each chunk

    def subset(self, sel) -> "Batch":
        ctx = None if self.context is None else self.context[sel]
        return Batch(self.obs[sel], self.chunks[sel], ctx)

    def __len__(self):
        return self.obs.shape[0]


def loss_and_grad(policy: MlpPolicy, batch: Batch, eta: float):
    acts = _forward(policy, batch.obs)
    out = acts[-1]
    P = (policy.action_scale * out).reshape(-1, policy.H, policy.k)
    losses, gP = _loss_and_output_grad(P, batch.chunks, policy.f, eta, batch.context)
    delta = gP.reshape(out.shape) * policy.action_scale * (1.0 - out**2)
    gW, gb = [None] * len(policy.weights), [None] * len(policy.weights)
    for i in range(len(policy.weights) - 1, -1, -1):
        gW[i] = delta.T @ acts[i]
        gb[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ policy.weights[i]) * (1.0 - acts[i] ** 2)
    return losses, gW, gb


def total_loss(policy: MlpPolicy, batch: Batch, cfg: "TrainConfig | None" = None,
               eta: float | None = None) -> LossBreakdown:
    if eta is None:
        eta = cfg.eta if cfg is not None else DEFAULT_ETA
    P = policy_forward(policy, batch.obs)
    return _loss_and_output_grad(P, batch.chunks, policy.f, eta, batch.context)[0]


def flat_grad(policy: MlpPolicy, batch: Batch, eta: float) -> np.ndarray:
    _, gW, gb = loss_and_grad(policy, batch, eta)
    return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(gW, gb)])


def finite_diff_grad_check(policy: MlpPolicy, batch: Batch, cfg: "TrainConfig | None" = None,
                           h: float = 1e-5, n_params: int = 128, seed: int = 0,
                           eta: float | None = None, floor: float = 1e-8) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error is ``|g - g_fd| / max(|g|, |g_fd|, floor)`` over a random
    subset of ``n_params`` parameters.
    """
    if h <= 0:
        raise ValidationError("step h must be > 0")
    if eta is None:
        eta = cfg.eta if cfg is not None else DEFAULT_ETA
    work = policy.copy()
    theta = work.flat_params()
    analytic = flat_grad(work, batch, eta)
    rng = np.random.Generator(np.random.PCG64(seed))
    idx = rng.choice(theta.size, size=min(n_params, theta.size), replace=False)
    worst = 0.0
    for i in idx:
        saved = theta[i]
        theta[i] = saved + h
        work.set_flat_params(theta)
        up = total_loss(work, batch, eta=eta).total
        theta[i] = saved - h
        work.set_flat_params(theta)
        down = total_loss(work, batch, eta=eta).total
        theta[i] = saved
        numeric = (up - down) / (2.0 * h)
        denom = max(abs(analytic[i]), abs(numeric), floor)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    work.set_flat_params(theta)
    return worst


# -- demonstrations and training -------------------------------------------------------------

def observation(q, target, t: int, time_scale: float) -> np.ndarray:
    """``(q, target, min((t - 1) / time_scale, 1))``."""
    return np.concatenate([np.asarray(q, dtype=np.float64), np.asarray(target, dtype=np.float64),
                           [min((t - 1) / time_scale, 1.0)]])


def demo_batch(demos: SuiteRun | Sequence[EpisodeLog], H: int, time_scale: float = 30.0,
               successful_only: bool = False) -> Batch:
    """One sample per demo step: observation, the next H logged actions and
    the action before them (zero at t = 1, the arm starts at rest).

    Actions past the end of an episode are zero (the arm holds still).
    """
    episodes = demos.episodes if isinstance(demos, SuiteRun) else list(demos)
    obs, chunks, context = [], [], []
    for ep in episodes:
        if successful_only and not ep.success:
            continue
        target = ep.meta.get("target")
        if target is None:
            raise ValidationError(f"demo {ep.task_id!r} lacks the target in its header meta")
        padded = np.vstack([np.zeros((1, ep.k)), ep.a, np.zeros((H, ep.k))])
        for t in range(1, ep.T + 1):
            obs.append(observation(ep.q[t - 1], target, t, time_scale))
            chunks.append(padded[t:t + H])
            context.append(padded[t - 1])
    if not obs:
        raise ValidationError("no usable demonstrations")
    return Batch(np.array(obs), np.array(chunks), np.array(context))


@dataclass
class TrainConfig:
    """``optimizer`` is ``"adam"`` (default) or ``"gd"`` (plain minibatch
    gradient descent). Both use a fixed learning rate and seeded shuffling."""

    eta: float = DEFAULT_ETA
    epochs: int = 300
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    H: int = 8
    hidden: tuple[int, ...] = (64, 64)
    action_scale: float = 1.0
    time_scale: float = 30.0
    optimizer: str = "adam"

    def __post_init__(self):
        if not (math.isfinite(self.eta) and self.eta >= 0):
            raise ValidationError("eta must be >= 0")
        if self.optimizer not in ("adam", "gd"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.H < 3:
            raise ValidationError("H must be >= 3")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValidationError("batch_size must be >= 1 and epochs >= 0")
        self.hidden = tuple(int(h) for h in self.hidden)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        unknown = set(data) - set(known)
        if unknown:
            raise ValidationError(f"unknown training config keys {sorted(unknown)}")
        return cls(**known)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class TrainResult:
    policy: MlpPolicy
    history: list[LossBreakdown]

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "bc", "jerk_term", "rate_term", "total"])
        for i, h in enumerate(self.history):
            w.writerow([i, repr(h.bc), repr(h.jerk_term), repr(h.rate_term), repr(h.total)])
        return buf.getvalue()


class _Adam:
    def __init__(self, n, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0

    def step(self, theta, g):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def train(cfg: TrainConfig, demos: SuiteRun | Sequence[EpisodeLog] | Batch,
          f: float | None = None) -> TrainResult:
    """Fit a policy to demonstrations with seeded minibatch updates.

    The loss history holds the full-dataset loss before training and after
    every epoch. A non-finite loss aborts with ``TrainingDivergedError``
    carrying the last finite policy.
    """
    if isinstance(demos, Batch):
        batch = demos
        if f is None:
            raise ValidationError("pass the control frequency when training on a raw batch")
    else:
        episodes = demos.episodes if isinstance(demos, SuiteRun) else list(demos)
        if not episodes:
            raise ValidationError("need at least one demonstration")
        f = episodes[0].f if f is None else f
        batch = demo_batch(episodes, cfg.H, cfg.time_scale)
    k = batch.chunks.shape[2]
    policy = init_policy(batch.obs.shape[1], cfg.H, k, cfg.hidden, seed=cfg.seed, f=f,
                         action_scale=cfg.action_scale, time_scale=cfg.time_scale)
    rng = np.random.Generator(np.random.PCG64(cfg.seed + 1))
    history = [total_loss(policy, batch, eta=cfg.eta)]
    n = len(batch)
    theta = policy.flat_params()
    adam = _Adam(theta.size, cfg.learning_rate) if cfg.optimizer == "adam" else None
    for epoch in range(cfg.epochs):
        last_good = policy.copy()
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            g = flat_grad(policy, batch.subset(order[start:start + cfg.batch_size]), cfg.eta)
            theta = adam.step(theta, g) if adam else theta - cfg.learning_rate * g
            policy.set_flat_params(theta)
        losses = total_loss(policy, batch, eta=cfg.eta)
        if not all(math.isfinite(v) for v in (losses.bc, losses.jerk_term, losses.rate_term, losses.total)) \
                or not np.all(np.isfinite(policy.flat_params())):
            raise TrainingDivergedError(f"non-finite loss at epoch {epoch}",
                                        policy=last_good, history=history)
        history.append(losses)
    return TrainResult(policy, history)


# -- serialization ------------------------------------------------------------------------------

def policy_to_model(policy: MlpPolicy, extra_meta: dict | None = None) -> ModelFile:
    tensors = []
    for i, (W, b) in enumerate(zip(policy.weights, policy.biases)):
        tensors.append(WeightTensor(f"layer{i}.W", W.ravel(), W.shape))
        tensors.append(WeightTensor(f"layer{i}.b", b, b.shape))
    meta = {"kind": "mlp_policy", "H": policy.H, "k": policy.k, "f": policy.f,
            "action_scale": policy.action_scale, "time_scale": policy.time_scale,
            "n_layers": len(policy.weights), "activation": "tanh"}
    if policy.inference:
        meta["inference"] = dict(policy.inference)
    if extra_meta:
        meta.update(extra_meta)
    return ModelFile(tensors=tensors, meta=meta)


def policy_from_model(model: ModelFile) -> MlpPolicy:
    meta = model.meta
    if meta.get("kind") != "mlp_policy":
        raise ValidationError("model file does not hold an MLP policy")
    weights, biases = [], []
    for i in range(int(meta["n_layers"])):
        weights.append(model.tensor(f"layer{i}.W").array.copy())
        biases.append(model.tensor(f"layer{i}.b").array.copy())
    return MlpPolicy(weights, biases, int(meta["H"]), int(meta["k"]), float(meta["f"]),
                     float(meta.get("action_scale", 1.0)), float(meta.get("time_scale", 30.0)),
                     dict(meta.get("inference", {})))


def save_policy(path, policy: MlpPolicy, extra_meta: dict | None = None) -> None:
    save_model(path, policy_to_model(policy, extra_meta))


def load_policy(path) -> MlpPolicy:
    return policy_from_model(load_model(path))


# -- closed-loop execution ------------------------------------------------------------------------

class PolicyController:
    """Queries the policy every ``H`` steps and executes the whole chunk.

    Inference options (set by ``compress``): ``token_prune`` zeroes the
    lowest-magnitude observation entries; ``action_codec`` passes each chunk
    through the DCT codec.
    """

    def __init__(self, policy: MlpPolicy, task: TaskSpec, f: float):
        self.policy = policy
        self.target = np.asarray(task.target, dtype=np.float64)
        self.chunk = None
        self.opts = policy.inference

    def _query(self, t, q):
        obs = observation(q, self.target, t, self.policy.time_scale)
        ratio = self.opts.get("token_prune")
        if ratio:
            _, kept = token_prune(TokenSet(obs[:, None]), float(ratio))
            mask = np.zeros_like(obs)
            mask[kept] = 1.0
            obs = obs * mask
        chunk = policy_forward(self.policy, obs)
        codec = self.opts.get("action_codec")
        if codec:
            chunk = codec_roundtrip(chunk, float(codec["qstep"]), codec.get("keep"))
        return chunk

    def act(self, t, q):
        i = (t - 1) % self.policy.H
        if i == 0 or self.chunk is None:
            self.chunk = self._query(t, q)
        return self.chunk[i].copy()

"""Deterministic n-link planar arm environment.

Actions are joint-velocity commands in rad/s; the transition is
``q[t+1] = clip(q[t] + a[t] / f, lo, hi)``. Each logged step carries the
configuration, its end-effector position (embedded at z = 0), the action
chosen at that configuration and the joint velocity with which the arm
arrived there (zero at t = 1, the arm starts at rest).

Noise is drawn from numpy's PCG64 generator seeded with the controller seed,
one standard-normal d-vector per transition, scaled by ``noise_std``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import ConfigurationError, DomainError
from .trajectory import EpisodeLog

DEFAULT_F = 20.0
DEFAULT_T_MAX = 200
DEFAULT_EPSILON = 0.02
CONTROLLER_KINDS = ("min_jerk", "bang_bang", "proportional", "policy", "replay")


@dataclass(frozen=True)
class ArmModel:
    link_lengths: tuple[float, ...] = (0.5, 0.5, 0.5)
    joint_limits: tuple[tuple[float, float], ...] | None = None
    base: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        lengths = tuple(float(x) for x in self.link_lengths)
        if not lengths or not all(math.isfinite(x) and x > 0 for x in lengths):
            raise ConfigurationError("link lengths must be finite and positive")
        limits = self.joint_limits
        if limits is None:
            limits = tuple((-math.pi, math.pi) for _ in lengths)
        limits = tuple((float(lo), float(hi)) for lo, hi in limits)
        if len(limits) != len(lengths):
            raise ConfigurationError("need one [lo, hi] limit pair per joint")
        if not all(lo < hi for lo, hi in limits):
            raise ConfigurationError("joint limits need lo < hi")
        base = tuple(float(b) for b in self.base)
        if len(base) != 2:
            raise ConfigurationError("base must be a 2-vector")
        object.__setattr__(self, "link_lengths", lengths)
        object.__setattr__(self, "joint_limits", limits)
        object.__setattr__(self, "base", base)

    @property
    def d(self) -> int:
        return len(self.link_lengths)

    @property
    def reach(self) -> float:
        return math.fsum(self.link_lengths)

    @property
    def lower(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.joint_limits])

    @property
    def upper(self) -> np.ndarray:
        return np.array([hi for _, hi in self.joint_limits])


@dataclass(frozen=True)
class TaskSpec:
    target: tuple[float, float]
    epsilon: float = DEFAULT_EPSILON
    T_max: int = DEFAULT_T_MAX
    g_id: str = ""
    q0: tuple[float, ...] | None = None

    def __post_init__(self):
        target = tuple(float(x) for x in self.target)
        if len(target) != 2 or not all(math.isfinite(x) for x in target):
            raise ConfigurationError("target must be a finite 2-vector")
        if not (math.isfinite(self.epsilon) and self.epsilon > 0):
            raise ConfigurationError("epsilon must be > 0")
        if int(self.T_max) != self.T_max or self.T_max < 3:
            raise ConfigurationError("T_max must be an integer >= 3")
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "T_max", int(self.T_max))
        if self.q0 is not None:
            object.__setattr__(self, "q0", tuple(float(x) for x in self.q0))


@dataclass(frozen=True)
class ControllerSpec:
    """``speed`` is the mean joint speed (rad/s) of planned motions for
    ``min_jerk``/``bang_bang`` and the feedback gain (1/s) for ``proportional``."""

    kind: str = "min_jerk"
    noise_std: float = 0.0
    seed: int = 0
    speed: float = 0.5
    options: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in CONTROLLER_KINDS:
            raise ConfigurationError(f"unknown controller kind {self.kind!r}")
        if not (math.isfinite(self.noise_std) and self.noise_std >= 0):
            raise ConfigurationError("noise_std must be >= 0")
        if not (math.isfinite(self.speed) and self.speed > 0):
            raise ConfigurationError("speed must be > 0")


def home_configuration(arm: ArmModel) -> np.ndarray:
    """Default start: a gently bent pose inside every joint range."""
    q = np.zeros(arm.d)
    if arm.d > 1:
        q[1:] = 0.4
    q[0] = 0.3
    return np.clip(q, arm.lower, arm.upper)


# -- kinematics -------------------------------------------------------------------

def forward_kinematics(arm: ArmModel, q: Sequence[float]) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (arm.d,):
        raise DomainError(f"expected a {arm.d}-vector, got shape {q.shape}")
    if np.any(q < arm.lower) or np.any(q > arm.upper):
        raise DomainError(f"configuration {q.tolist()} outside joint limits")
    angles = np.cumsum(q)
    lengths = np.asarray(arm.link_lengths)
    x = arm.base[0] + math.fsum(lengths * np.cos(angles))
    y = arm.base[1] + math.fsum(lengths * np.sin(angles))
    return np.array([x, y])


def _jacobian(arm: ArmModel, q: np.ndarray) -> np.ndarray:
    angles = np.cumsum(q)
    lengths = np.asarray(arm.link_lengths)
    dx = -lengths * np.sin(angles)
    dy = lengths * np.cos(angles)
    # column j sums contributions of links j..d-1
    return np.vstack([np.cumsum(dx[::-1])[::-1], np.cumsum(dy[::-1])[::-1]])


def inverse_kinematics(arm: ArmModel, target: Sequence[float], q_init: Sequence[float],
                       tol: float = 1e-10, max_iter: int = 500) -> np.ndarray:
    """Damped least-squares IK from ``q_init``, respecting joint limits.

    If the solve stalls (typically against a joint limit) it restarts from a
    fixed sequence of pseudo-random configurations, so results stay deterministic.
    """
    target = np.asarray(target, dtype=np.float64)
    start = np.clip(np.asarray(q_init, dtype=np.float64), arm.lower, arm.upper)
    restarts = np.random.Generator(np.random.PCG64(0))
    lam2 = 1e-4
    for attempt in range(25):
        q = start if attempt == 0 else restarts.uniform(arm.lower, arm.upper)
        for _ in range(max_iter):
            err = target - forward_kinematics(arm, q)
            if np.linalg.norm(err) < tol:
                return q
            J = _jacobian(arm, q)
            step = J.T @ np.linalg.solve(J @ J.T + lam2 * np.eye(2), err)
            q = np.clip(q + step, arm.lower, arm.upper)
        if np.linalg.norm(target - forward_kinematics(arm, q)) < 1e-6:
            return q
    raise ConfigurationError(f"no joint configuration reaches target {target.tolist()}")


def step_dynamics(arm: ArmModel, q: Sequence[float], a: Sequence[float], f: float
                  ) -> tuple[np.ndarray, bool]:
    """Integrate one velocity command; returns the next state and a clamp flag."""
    q = np.asarray(q, dtype=np.float64)
    raw = q + np.asarray(a, dtype=np.float64) / f
    nxt = np.clip(raw, arm.lower, arm.upper)
    return nxt, bool(np.any(nxt != raw))


def check_success(arm: ArmModel, q: Sequence[float], task: TaskSpec) -> bool:
    dist = np.linalg.norm(forward_kinematics(arm, q) - np.asarray(task.target))
    return bool(dist <= task.epsilon)


# -- reference plans ------------------------------------------------------------------

def min_jerk_profile(u):
    u = np.asarray(u, dtype=np.float64)
    return u**3 * (10.0 + u * (-15.0 + 6.0 * u))


def min_jerk_plan(q0, q1, T: int, f: float = 1.0) -> np.ndarray:
    """Velocity commands that follow the quintic profile from q0 to q1 in T steps."""
    if T < 3:
        raise ConfigurationError("plan horizon must be >= 3 steps")
    q0 = np.atleast_1d(np.asarray(q0, dtype=np.float64))
    q1 = np.atleast_1d(np.asarray(q1, dtype=np.float64))
    s = min_jerk_profile(np.arange(T + 1) / T)
    return f * np.diff(s)[:, None] * (q1 - q0)[None, :]


def bang_bang_plan(q0, q1, T: int, f: float = 1.0) -> np.ndarray:
    """Constant-rate commands for ceil(T/2) steps, then zero."""
    if T < 3:
        raise ConfigurationError("plan horizon must be >= 3 steps")
    q0 = np.atleast_1d(np.asarray(q0, dtype=np.float64))
    q1 = np.atleast_1d(np.asarray(q1, dtype=np.float64))
    m = math.ceil(T / 2)
    out = np.zeros((T, q0.shape[0]))
    out[:m] = f * (q1 - q0) / m
    return out


def plan_horizon(q0, q1, speed: float, f: float) -> int:
    span = float(np.max(np.abs(np.asarray(q1) - np.asarray(q0))))
    return max(3, math.ceil(f * span / speed))


# -- controllers -------------------------------------------------------------------------

class Controller(Protocol):
    def act(self, t: int, q: np.ndarray) -> np.ndarray: ...


class PlanController:
    """Follows a precomputed plan open loop, then corrects residual error."""

    def __init__(self, actions: np.ndarray, q_goal: np.ndarray, f: float):
        self.actions = np.asarray(actions, dtype=np.float64)
        self.q_goal = np.asarray(q_goal, dtype=np.float64)
        self.gain = f / 4.0

    def act(self, t, q):
        if t <= len(self.actions):
            return self.actions[t - 1].copy()
        return self.gain * (self.q_goal - q)


class ProportionalController:
    def __init__(self, q_goal, gain):
        self.q_goal = np.asarray(q_goal, dtype=np.float64)
        self.gain = gain

    def act(self, t, q):
        return self.gain * (self.q_goal - q)


class ReplayController:
    """Replays a fixed action sequence, then commands zero velocity."""

    def __init__(self, actions):
        self.actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))

    def act(self, t, q):
        if t <= len(self.actions):
            return self.actions[t - 1].copy()
        return np.zeros(self.actions.shape[1])


def make_controller(arm: ArmModel, task: TaskSpec, ctrl: ControllerSpec, f: float,
                    q0: np.ndarray) -> Controller:
    if ctrl.kind == "replay":
        return ReplayController(ctrl.options["actions"])
    if ctrl.kind == "policy":
        from .policy import PolicyController, load_policy

        policy = ctrl.options.get("policy")
        if policy is None:
            policy = load_policy(ctrl.options["model"])
        return PolicyController(policy, task, f)
    q_goal = inverse_kinematics(arm, task.target, q0)
    if ctrl.kind == "proportional":
        if ctrl.speed > f / 2:
            raise ConfigurationError("proportional gain must not exceed f/2")
        return ProportionalController(q_goal, ctrl.speed)
    T = plan_horizon(q0, q_goal, ctrl.speed, f)
    plan = min_jerk_plan if ctrl.kind == "min_jerk" else bang_bang_plan
    return PlanController(plan(q0, q_goal, T, f), q_goal, f)


def validate_task(arm: ArmModel, task: TaskSpec) -> np.ndarray:
    """Reject unreachable or already-solved tasks; returns the start configuration."""
    dist = math.dist(task.target, arm.base)
    if dist > arm.reach:
        raise ConfigurationError(
            f"target {list(task.target)} is {dist:.4g} m from the base, beyond reach {arm.reach:.4g} m")
    q0 = np.asarray(task.q0 if task.q0 is not None else home_configuration(arm), dtype=np.float64)
    if q0.shape != (arm.d,):
        raise ConfigurationError(f"start configuration must be a {arm.d}-vector")
    try:
        forward_kinematics(arm, q0)
    except DomainError as exc:
        raise ConfigurationError(str(exc)) from None
    if check_success(arm, q0, task):
        raise ConfigurationError(f"task {task.g_id!r} starts inside the success radius")
    return q0


def rollout(arm: ArmModel, task: TaskSpec, ctrl: ControllerSpec, f: float = DEFAULT_F,
            suite_id: str = "", run_tag: str = "", controller: Controller | None = None
            ) -> EpisodeLog:
    if not (math.isfinite(f) and f > 0):
        raise ConfigurationError("control frequency must be > 0")
    q = validate_task(arm, task)
    if controller is None:
        controller = make_controller(arm, task, ctrl, f, q)
    rng = np.random.Generator(np.random.PCG64(ctrl.seed))
    qs, ps, acts, qdots, clamps = [], [], [], [], []
    qdot = np.zeros(arm.d)
    success = False
    for t in range(1, task.T_max + 1):
        a = np.asarray(controller.act(t, q.copy()), dtype=np.float64).reshape(arm.d)
        qs.append(q)
        ps.append(np.append(forward_kinematics(arm, q), 0.0))
        acts.append(a)
        qdots.append(qdot)
        if check_success(arm, q, task):
            success = True
            clamps.append(False)
            break
        noise = ctrl.noise_std * rng.standard_normal(arm.d)
        q_next, clamped = step_dynamics(arm, q, a + noise, f)
        clamps.append(clamped)
        qdot = f * (q_next - q)
        q = q_next
    meta = {"seed": int(ctrl.seed), "controller": ctrl.kind, "noise_std": ctrl.noise_std,
            "target": list(task.target), "epsilon": task.epsilon}
    return EpisodeLog(
        p=np.array(ps), q=np.array(qs), a=np.array(acts), qdot=np.array(qdots),
        f=f, success=success, task_id=task.g_id, suite_id=suite_id, run_tag=run_tag,
        clamped=np.array(clamps) if any(clamps) else None, meta=meta,
    )


def random_reachable_task(arm: ArmModel, rng: np.random.Generator, epsilon=DEFAULT_EPSILON,
                          T_max=DEFAULT_T_MAX, g_id="", q0=None, min_distance=0.2,
                          max_joint_offset=1.2) -> TaskSpec:
    """Sample a target as FK of a random perturbation of the start pose."""
    start = np.asarray(q0 if q0 is not None else home_configuration(arm), dtype=np.float64)
    p0 = forward_kinematics(arm, start)
    for _ in range(1000):
        qt = np.clip(start + rng.uniform(-max_joint_offset, max_joint_offset, arm.d),
                     arm.lower, arm.upper)
        target = forward_kinematics(arm, qt)
        if np.linalg.norm(target - p0) >= max(min_distance, 2 * epsilon):
            return TaskSpec(target=tuple(target), epsilon=epsilon, T_max=T_max, g_id=g_id,
                            q0=tuple(start) if q0 is not None else None)
    raise ConfigurationError("could not sample a reachable target")


# -- scenario files ------------------------------------------------------------------------

def episode_seed(base_seed: int, entry: int, rep: int) -> int:
    return int(np.random.SeedSequence([int(base_seed), entry, rep]).generate_state(1)[0])


@dataclass
class ScenarioEntry:
    task: TaskSpec | None
    controller: ControllerSpec
    f: float = DEFAULT_F
    repetitions: int = 1
    random_target: dict | None = None


@dataclass
class Scenario:
    suite_id: str
    run_tag: str
    entries: list[ScenarioEntry]
    arm: ArmModel = field(default_factory=ArmModel)
    seed: int = 0
    stop: str = "fixed"
    target_successes: int = 10


def _task_from(data: dict) -> TaskSpec:
    return TaskSpec(
        target=tuple(data["target"]),
        epsilon=float(data.get("epsilon", DEFAULT_EPSILON)),
        T_max=int(data.get("T_max", DEFAULT_T_MAX)),
        g_id=str(data.get("g_id", "")),
        q0=tuple(data["q0"]) if data.get("q0") is not None else None,
    )


def scenario_from_dict(data: dict, base_dir=None) -> Scenario:
    """Build a scenario from its JSON form; raises ``ConfigurationError`` on bad input."""
    from pathlib import Path

    try:
        arm_data = data.get("arm", {})
        arm = ArmModel(
            link_lengths=tuple(arm_data.get("link_lengths", (0.5, 0.5, 0.5))),
            joint_limits=tuple(tuple(x) for x in arm_data["joint_limits"])
            if "joint_limits" in arm_data else None,
            base=tuple(arm_data.get("base", (0.0, 0.0))),
        )
        entries = []
        for i, e in enumerate(data["entries"]):
            c = dict(e.get("controller", {}))
            options = {}
            if c.get("kind") == "policy":
                model = Path(c.pop("model"))
                if base_dir is not None and not model.is_absolute():
                    model = Path(base_dir) / model
                options["model"] = str(model)
            ctrl = ControllerSpec(kind=c.get("kind", "min_jerk"),
                                  noise_std=float(c.get("noise_std", 0.0)),
                                  seed=int(c.get("seed", 0)),
                                  speed=float(c.get("speed", 0.5)), options=options)
            t = e.get("task", {})
            random_target = None
            task = None
            if t.get("random_target"):
                random_target = {k: v for k, v in t.items() if k != "random_target"}
            else:
                task = _task_from(t)
            reps = int(e.get("repetitions", 1))
            if reps < 1:
                raise ConfigurationError(f"entry {i}: repetitions must be >= 1")
            entries.append(ScenarioEntry(task=task, controller=ctrl,
                                         f=float(e.get("f", DEFAULT_F)), repetitions=reps,
                                         random_target=random_target))
        if not entries:
            raise ConfigurationError("scenario has no entries")
        stop = data.get("stop", "fixed")
        if stop not in ("fixed", "first10"):
            raise ConfigurationError(f"unknown stopping rule {stop!r}")
        return Scenario(suite_id=str(data.get("suite_id", "suite")),
                        run_tag=str(data.get("run_tag", "baseline")), entries=entries,
                        arm=arm, seed=int(data.get("seed", 0)), stop=stop,
                        target_successes=int(data.get("target_successes", 10)))
    except ConfigurationError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid scenario: {exc!r}") from None


def entry_task(scenario: Scenario, entry: ScenarioEntry, idx: int, rep: int) -> TaskSpec:
    if entry.random_target is None:
        task = entry.task
        return replace(task, g_id=task.g_id or f"entry{idx}")
    opts = entry.random_target
    rng = np.random.Generator(np.random.PCG64(episode_seed(scenario.seed, idx, rep) ^ 0x5EED))
    return random_reachable_task(
        scenario.arm, rng,
        epsilon=float(opts.get("epsilon", DEFAULT_EPSILON)),
        T_max=int(opts.get("T_max", DEFAULT_T_MAX)),
        g_id=f"{opts.get('g_id', f'entry{idx}')}-{rep}",
        q0=opts.get("q0"),
        min_distance=float(opts.get("min_distance", 0.2)),
        max_joint_offset=float(opts.get("max_joint_offset", 1.2)),
    )


def expand_scenario(scenario: Scenario, stop: str | None = None,
                    on_episode: Callable[[EpisodeLog], None] | None = None) -> list[EpisodeLog]:
    """Run every entry; ``first10`` stops an entry once it has enough successes."""
    stop = stop or scenario.stop
    if stop not in ("fixed", "first10"):
        raise ConfigurationError(f"unknown stopping rule {stop!r}")
    # validate every fixed task before simulating anything
    for entry in scenario.entries:
        if entry.task is not None:
            validate_task(scenario.arm, entry.task)
    episodes = []
    for idx, entry in enumerate(scenario.entries):
        base_ctrl = entry.controller
        if base_ctrl.kind == "policy" and "policy" not in base_ctrl.options:
            from .policy import load_policy

            base_ctrl = replace(base_ctrl, options={**base_ctrl.options,
                                                    "policy": load_policy(base_ctrl.options["model"])})
        successes = 0
        for rep in range(entry.repetitions):
            task = entry_task(scenario, entry, idx, rep)
            ctrl = replace(base_ctrl, seed=episode_seed(scenario.seed, idx, rep))
            ep = rollout(scenario.arm, task, ctrl, entry.f,
                         suite_id=scenario.suite_id, run_tag=scenario.run_tag)
            episodes.append(ep)
            if on_episode is not None:
                on_episode(ep)
            successes += ep.success
            if stop == "first10" and successes >= scenario.target_successes:
                break
    return episodes

"""Acceptance suite: one check per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` or ``python tests/test_acceptance.py``.
"""

import json
import math
import sys
import time
from fractions import Fraction

import numpy as np

from embodied_eff import compression as cp
from embodied_eff import policy as pl
from embodied_eff import sim
from embodied_eff.cli import main as cli_main
from embodied_eff.metrics import (
    avg_action_rate, avg_jerk, completion_time, ee_path_length, episode_metrics,
    format_delta_percent, joint_path_length, success_conditional_mean,
)
from embodied_eff.trajectory import EpisodeLog, SuiteRun, read_suite

RESULTS = {}


def report(n, ok, detail, elapsed, budget):
    ok = bool(ok) and elapsed < budget
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail} ({elapsed:.1f}s, budget {budget:.0f}s)"
    RESULTS[n] = line
    print(line, file=sys.__stdout__, flush=True)
    return ok


def rel_close(a, b, tol=1e-9):
    return abs(a - b) <= tol * max(abs(a), abs(b), 1e-300) or a == b


# 1 -----------------------------------------------------------------------------------------

def criterion_1():
    t0 = time.perf_counter()
    cases = [((1540.9, 1973.1), "+28.0%"), ((5.4, 5.1), "-5.6%"),
             ((1810.0, 1374.9), "-24.0%"), ((1524.9, 1131.9), "-25.8%")]
    got = [format_delta_percent(b, v) for (b, v), _ in cases]
    ok = got == [want for _, want in cases]
    return report(1, ok, f"normalization renders {got}", time.perf_counter() - t0, 1)


# 2 -----------------------------------------------------------------------------------------

def _ep(T, **cols):
    full = {"p": np.zeros((T, 3)), "q": np.zeros((T, 1)), "a": np.zeros((T, 1))}
    full.update({k: np.asarray(v, float) for k, v in cols.items()})
    return EpisodeLog(f=1.0, success=True, **full)


def criterion_2():
    t0 = time.perf_counter()
    vals = {
        "L_ee": ee_path_length(_ep(3, p=[(0, 0, 0), (1, 0, 0), (1, 1, 0)])),
        "L_joint": joint_path_length(_ep(2, q=[(0, 0), (3, 4)])),
        "J": avg_jerk(_ep(4, qdot=[[0], [1], [0], [1]])),
        "R": avg_action_rate(_ep(3, a=[(0, 0), (3, 4), (3, 4)])),
    }
    want = {"L_ee": 2.0, "L_joint": 5.0, "J": 4.0, "R": 2.5}
    ok = all(abs(vals[k] - want[k]) <= 1e-12 for k in want)
    return report(2, ok, f"hand-derived metric values {vals}", time.perf_counter() - t0, 1)


# 3 -----------------------------------------------------------------------------------------

def criterion_3(n=1000, seed=20240601):
    t0 = time.perf_counter()
    rng = np.random.Generator(np.random.PCG64(seed))
    failures = []
    for i in range(n):
        T, d = int(rng.integers(3, 301)), int(rng.integers(1, 8))
        ep = EpisodeLog(p=rng.normal(size=(T, 3)), q=rng.normal(size=(T, d)),
                        a=rng.normal(size=(T, d)), qdot=rng.normal(size=(T, d)),
                        f=float(rng.uniform(1, 50)), success=True)
        base = episode_metrics(ep)
        off = rng.normal(scale=10)
        moved = episode_metrics(ep.replace(p=ep.p + off, q=ep.q + off))
        rev = episode_metrics(ep.replace(p=ep.p[::-1], q=ep.q[::-1], a=ep.a[::-1], qdot=-ep.qdot[::-1]))
        c, fc = float(rng.uniform(-5, 5)), float(rng.uniform(0.2, 5))
        scaled = ep.replace(q=c * ep.q, qdot=c * ep.qdot)
        faster = ep.replace(f=fc * ep.f)
        checks = [
            all(rel_close(getattr(moved, m), getattr(base, m)) for m in ("L_ee", "L_joint", "J", "R")),
            all(rel_close(getattr(rev, m), getattr(base, m)) for m in ("tau", "L_ee", "L_joint", "J", "R")),
            rel_close(joint_path_length(scaled), abs(c) * base.L_joint),
            rel_close(avg_jerk(scaled), c * c * base.J),
            rel_close(completion_time(faster), base.tau / fc),
            rel_close(avg_jerk(faster), fc**4 * base.J),
        ]
        if not all(checks):
            failures.append((i, checks))
    detail = f"translation/time-reversal/scaling on {n} episodes, {len(failures)} failures"
    return report(3, not failures, detail, time.perf_counter() - t0, 10)


# 4 -----------------------------------------------------------------------------------------

def criterion_4(n=20, seed=4):
    t0 = time.perf_counter()
    arm = sim.ArmModel()
    rng = np.random.Generator(np.random.PCG64(seed))
    smooth, jerky = [], []
    for i in range(n):
        task = sim.random_reachable_task(arm, rng, g_id=f"task{i}")
        smooth.append(sim.rollout(arm, task, sim.ControllerSpec("min_jerk"), run_tag="min_jerk"))
        jerky.append(sim.rollout(arm, task, sim.ControllerSpec("bang_bang"), run_tag="bang_bang"))
    s_sum = success_conditional_mean(SuiteRun(tuple(smooth)))
    b_sum = success_conditional_mean(SuiteRun(tuple(jerky)))
    per_task = all(avg_jerk(s) < avg_jerk(b) for s, b in zip(smooth, jerky))
    ok = s_sum.SR == 1.0 and b_sum.SR == 1.0 and per_task and s_sum.means.tau != b_sum.means.tau
    detail = (f"SR {s_sum.SR:.0%}/{b_sum.SR:.0%}, J {s_sum.means.J:.1f} vs {b_sum.means.J:.1f}, "
              f"lower on every task: {per_task}, tau {s_sum.means.tau:.3f} vs {b_sum.means.tau:.3f}")
    return report(4, ok, detail, time.perf_counter() - t0, 30)


# 5 -----------------------------------------------------------------------------------------

def criterion_5(seed=5):
    t0 = time.perf_counter()
    rng = np.random.Generator(np.random.PCG64(seed))
    rt_err = pars_err = 0.0
    for _ in range(1000):
        x = rng.normal(size=int(rng.integers(1, 65))) * rng.uniform(0.01, 10)
        c = cp.dct_forward(x)
        rt_err = max(rt_err, float(np.max(np.abs(cp.dct_inverse(c) - x))))
        pars_err = max(pars_err, abs(float(np.linalg.norm(c) - np.linalg.norm(x))))
    lossless = 0.0
    for _ in range(100):
        a = rng.normal(size=(int(rng.integers(1, 65)), 3))
        lossless = max(lossless, float(np.max(np.abs(cp.codec_roundtrip(a, 1e-12) - a))))

    # full pipeline: min-jerk plans replayed raw and through a coarse codec
    arm, f, H = sim.ArmModel(), 20.0, 16
    J_orig, J_codec = [], []
    for _ in range(20):
        task = sim.random_reachable_task(arm, rng)
        q0 = sim.home_configuration(arm)
        qg = sim.inverse_kinematics(arm, task.target, q0)
        T = sim.plan_horizon(q0, qg, 0.5, f)
        actions = sim.min_jerk_plan(q0, qg, T, f)
        coded = []
        for s in range(0, T, H):
            chunk = actions[s:s + H]
            q_step = 0.1 * float(np.max(np.abs(cp.dct_matrix(len(chunk)) @ chunk)))
            coded.append(cp.codec_roundtrip(chunk, q_step))
        replay = sim.TaskSpec(task.target, epsilon=1e-12, T_max=T + 1)
        for acts, out in ((actions, J_orig), (np.vstack(coded), J_codec)):
            ep = sim.rollout(arm, replay, sim.ControllerSpec("replay", options={"actions": acts}), f)
            out.append(avg_jerk(ep))
    pipeline = float(np.mean(J_codec)) >= float(np.mean(J_orig))
    ok = rt_err < 1e-12 and pars_err < 1e-12 and lossless < 1e-9 and pipeline
    detail = (f"round-trip {rt_err:.1e}, Parseval {pars_err:.1e}, lossless codec {lossless:.1e}, "
              f"rollout J {np.mean(J_orig):.1f} -> {np.mean(J_codec):.1f} "
              f"({sum(c >= o for o, c in zip(J_orig, J_codec))}/20 tasks higher)")
    return report(5, ok, detail, time.perf_counter() - t0, 10)


# 6 -----------------------------------------------------------------------------------------

def criterion_6(seed=6):
    t0 = time.perf_counter()
    rng = np.random.Generator(np.random.PCG64(seed))
    bound_ok = idem_ok = True
    for i in range(1000):
        bits = (4, 8)[i % 2]
        vals = rng.normal(size=int(rng.integers(1, 200))) * rng.uniform(1e-3, 1e3)
        w = cp.WeightTensor("w", vals)
        once = cp.fake_quantize(w, cp.QuantSpec(bits))
        s = cp.quant_scale(vals, bits)
        slack = np.spacing(np.abs(vals).max())
        bound_ok &= bool(np.all(np.abs(once.values - vals) <= s / 2 + slack))
        twice = cp.fake_quantize(once, cp.QuantSpec(bits))
        idem_ok &= bool(np.all(np.abs(twice.values - once.values) <= 1e-12 * max(1.0, np.abs(vals).max())))
    prune_ok, cases = True, 0
    for n in range(1, 33):
        for _ in range(4):
            # small integers force plenty of magnitude ties
            vals = rng.integers(-3, 4, size=n).astype(float)
            oracle_order = sorted(range(n), key=lambda j: (abs(vals[j]), j))
            for k in range(n):
                # midpoint ratio so that exactly k entries fall below floor(ratio * n)
                ratio = (2 * k + 1) / (2 * n)
                count = math.floor(Fraction(repr(ratio)) * n)
                _, mask = cp.magnitude_prune(cp.WeightTensor("w", vals), cp.PruneSpec(ratio))
                want = np.ones(n, bool)
                want[oracle_order[:count]] = False
                prune_ok &= count == k and bool(np.array_equal(mask, want))
                cases += 1
    ok = bound_ok and idem_ok and prune_ok
    detail = (f"quant bound {bound_ok}, idempotent {idem_ok}, "
              f"prune matches sort oracle on {cases} cases: {prune_ok}")
    return report(6, ok, detail, time.perf_counter() - t0, 10)


# 7 -----------------------------------------------------------------------------------------

def _demos(n, seed, f=5.0, T_max=60, noise=0.03):
    arm = sim.ArmModel()
    rng = np.random.Generator(np.random.PCG64(seed))
    tasks = [sim.random_reachable_task(arm, rng, epsilon=1e-9, T_max=T_max, max_joint_offset=0.8)
             for _ in range(n)]
    return [sim.rollout(arm, t, sim.ControllerSpec("min_jerk", speed=0.15, noise_std=noise, seed=i), f)
            for i, t in enumerate(tasks)]


def criterion_7(seed=7):
    t0 = time.perf_counter()
    data = pl.demo_batch(_demos(10, seed), H=8)
    rng = np.random.Generator(np.random.PCG64(seed))
    worst = 0.0
    for b in range(10):
        pol = pl.init_policy(data.obs.shape[1], 8, 3, (64, 64), seed=b, f=5.0)
        batch = data.subset(rng.choice(len(data), size=32, replace=False))
        worst = max(worst, pl.finite_diff_grad_check(pol, batch, eta=0.01, n_params=128, seed=b))
    return report(7, worst < 1e-4, f"max relative gradient error {worst:.2e} over 10 batches x 128 params",
                  time.perf_counter() - t0, 30)


# 8 -----------------------------------------------------------------------------------------

def criterion_8():
    t0 = time.perf_counter()
    f = 5.0
    arm = sim.ArmModel()
    demos = _demos(80, 123)
    rng = np.random.Generator(np.random.PCG64(999))
    tasks = [sim.random_reachable_task(arm, rng, epsilon=0.05, T_max=100, max_joint_offset=0.8)
             for _ in range(30)]
    stats = {}
    for eta in (0.0, 0.01):
        Js, SRs = [], []
        for seed in range(5):
            policy = pl.train(pl.TrainConfig(eta=eta, seed=seed), demos).policy
            ctrl = sim.ControllerSpec("policy", options={"policy": policy})
            summary = success_conditional_mean(SuiteRun(tuple(sim.rollout(arm, t, ctrl, f) for t in tasks)))
            Js.append(summary.means.J if summary.means else math.inf)
            SRs.append(summary.SR)
        stats[eta] = (float(np.median(Js)), float(np.mean(SRs)))
    (J0, SR0), (J1, SR1) = stats[0.0], stats[0.01]
    ok = J1 < J0 and abs(SR1 - SR0) <= 0.05
    detail = (f"median J {J1:.3f} (eta 0.01) vs {J0:.3f} (eta 0), "
              f"SR {SR1:.1%} vs {SR0:.1%} over 5 seeds")
    return report(8, ok, detail, time.perf_counter() - t0, 300)


# 9 -----------------------------------------------------------------------------------------

def criterion_9(tmp_path):
    t0 = time.perf_counter()

    def scenario(name, reps, noise, T_max=200):
        data = {"suite_id": "proto", "run_tag": name, "seed": 9,
                "entries": [{"task": {"random_target": True, "epsilon": 0.02, "T_max": T_max},
                             "controller": {"kind": "min_jerk", "noise_std": noise}, "f": 20,
                             "repetitions": reps}]}
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps(data))
        return str(path)

    cli_main(["simulate", "--scenario", scenario("always", 30, 0.0), "--out", str(tmp_path / "a"),
              "--stop", "first10"])
    always = read_suite(tmp_path / "a")
    cli_main(["simulate", "--scenario", scenario("noisy", 60, 0.1, T_max=60), "--out", str(tmp_path / "n"),
              "--stop", "first10"])
    noisy = read_suite(tmp_path / "n")
    n_ok = sum(e.success for e in noisy.episodes)
    cli_main(["simulate", "--scenario", scenario("fixed", 50, 0.1, T_max=60), "--out", str(tmp_path / "f")])
    fixed = read_suite(tmp_path / "f")
    files = sorted(p.name for p in (tmp_path / "f").glob("episode_*.jsonl"))

    # pooled mean over all episodes differs from the success-conditional one
    eps = [_ep(T, q=np.zeros((T, 1))).replace(success=s) for T, s in ((10, True), (90, False), (30, True))]
    summary = success_conditional_mean(SuiteRun(tuple(eps)))
    pooled = float(np.mean([completion_time(e) for e in eps]))
    eq2_ok = summary.means.tau == 20.0 and pooled != summary.means.tau and summary.SR == 2 / 3

    ok = (always.N == 10 and n_ok == 10 and noisy.episodes[-1].success and noisy.N > 10
          and fixed.N == 50 and len(files) == 50 and eq2_ok)
    detail = (f"first10 always-succeeding -> {always.N} files, noisy -> {n_ok} successes in {noisy.N}; "
              f"fixed -> {len(files)} files; success-conditional tau {summary.means.tau} vs pooled {pooled}")
    return report(9, ok, detail, time.perf_counter() - t0, 10)


# -- pytest wrappers ---------------------------------------------------------------------------

def test_criterion_1_normalization_arithmetic():
    assert criterion_1()


def test_criterion_2_metric_oracles():
    assert criterion_2()


def test_criterion_3_invariance_suite():
    assert criterion_3()


def test_criterion_4_equal_success_unequal_efficiency():
    assert criterion_4()


def test_criterion_5_codec_suite():
    assert criterion_5()


def test_criterion_6_quantization_and_pruning():
    assert criterion_6()


def test_criterion_7_gradient_check():
    assert criterion_7()


def test_criterion_8_aux_loss_direction():
    assert criterion_8()


def test_criterion_9_protocol(tmp_path):
    assert criterion_9(tmp_path)


if __name__ == "__main__":
    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as tmp:
        results = [criterion_1(), criterion_2(), criterion_3(), criterion_4(), criterion_5(),
                   criterion_6(), criterion_7(), criterion_8(), criterion_9(Path(tmp))]
    sys.exit(0 if all(results) else 1)

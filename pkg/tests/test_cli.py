import csv
import json
from pathlib import Path

import numpy as np
import pytest

from embodied_eff.cli import main
from embodied_eff.compression import load_model
from embodied_eff.trajectory import EpisodeLog, read_suite, write_suite


def scenario_file(tmp_path, name="scn.json", kind="min_jerk", reps=4, run_tag=None, suite="reach",
                  task=None, **extra):
    data = {"suite_id": suite, "run_tag": run_tag or kind, "seed": 11,
            "entries": [{"task": task or {"random_target": True}, "controller": {"kind": kind, **extra},
                         "f": 20, "repetitions": reps}]}
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


def read_csv(path):
    return list(csv.DictReader(open(path)))


def simulate(tmp_path, out, **kw):
    assert main(["simulate", "--scenario", str(scenario_file(tmp_path, name=f"{out}.json", **kw)),
                 "--out", str(tmp_path / out)]) == 0
    return tmp_path / out


def test_simulate_fixed_writes_n_files(tmp_path):
    out = simulate(tmp_path, "s50", reps=50)
    files = sorted(p.name for p in out.glob("episode_*.jsonl"))
    assert len(files) == 50 and json.loads((out / "manifest.json").read_text())["N"] == 50


def test_simulate_first10(tmp_path):
    scn = scenario_file(tmp_path, reps=25)
    assert main(["simulate", "--scenario", str(scn), "--out", str(tmp_path / "o"), "--stop", "first10"]) == 0
    assert read_suite(tmp_path / "o").N == 10


def test_simulate_invalid_scenario_leaves_nothing(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"entries": []}')
    assert main(["simulate", "--scenario", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o").exists()
    far = scenario_file(tmp_path, name="far.json", task={"target": [9.0, 0.0]})
    assert main(["simulate", "--scenario", str(far), "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o").exists()
    assert not list(tmp_path.glob(".o.*"))


def test_simulate_refuses_non_empty_out(tmp_path):
    (tmp_path / "o").mkdir()
    (tmp_path / "o" / "keep.txt").write_text("x")
    assert main(["simulate", "--scenario", str(scenario_file(tmp_path)), "--out", str(tmp_path / "o")]) == 1
    assert (tmp_path / "o" / "keep.txt").read_text() == "x"


def _episode(success, T=5, shift=0.0):
    q = np.linspace(0, 1, T)[:, None] ** 2 + shift
    return EpisodeLog(p=np.hstack([q, q, 0 * q]), q=q, a=np.diff(q, axis=0, append=q[-1:]),
                      f=10.0, success=success, task_id="t", suite_id="s", run_tag="r")


def test_eval_identical_episodes_and_all_failures(tmp_path):
    (tmp_path / "same").mkdir()
    write_suite(tmp_path / "same", [_episode(True), _episode(True)])
    assert main(["eval", "--suite", str(tmp_path / "same"), "--out", str(tmp_path / "m.csv")]) == 0
    row = read_csv(tmp_path / "m.csv")[0]
    recs = [json.loads(x) for x in (tmp_path / "m.jsonl").read_text().splitlines()]
    ep_metrics = recs[0]["metrics"]
    assert all(float(row[k]) == v for k, v in ep_metrics.items())
    assert list(row) == ["suite", "run", "SR", "tau", "L_ee", "L_joint", "J", "R", "n_success", "N"]

    (tmp_path / "fail").mkdir()
    write_suite(tmp_path / "fail", [_episode(False), _episode(False)])
    assert main(["eval", "--suite", str(tmp_path / "fail"), "--out", str(tmp_path / "f.csv")]) == 0
    row = read_csv(tmp_path / "f.csv")[0]
    assert float(row["SR"]) == 0.0 and row["J"] == "n/a" and row["n_success"] == "0"
    summary = [json.loads(x) for x in (tmp_path / "f.jsonl").read_text().splitlines()][-1]
    assert summary["type"] == "summary" and summary["means"] is None and not summary["means_defined"]


def test_eval_reports_bad_files(tmp_path):
    (tmp_path / "s").mkdir()
    write_suite(tmp_path / "s", [_episode(True), _episode(True)])
    (tmp_path / "s" / "episode_0001.jsonl").write_text("garbage\n")
    assert main(["eval", "--suite", str(tmp_path / "s"), "--out", str(tmp_path / "m.csv")]) == 1
    recs = [json.loads(x) for x in (tmp_path / "m.jsonl").read_text().splitlines()]
    errors = [r for r in recs if r["type"] == "error"]
    assert len(errors) == 1 and errors[0]["file"].endswith("episode_0001.jsonl")


def test_eval_smooth_suite_has_lower_jerk(tmp_path):
    smooth = simulate(tmp_path, "smooth", reps=6)
    jerky = simulate(tmp_path, "jerky", kind="bang_bang", reps=6)
    assert main(["eval", "--suite", str(smooth), str(jerky), "--out", str(tmp_path / "m.csv")]) == 0
    rows = {r["run"]: r for r in read_csv(tmp_path / "m.csv")}
    assert float(rows["min_jerk"]["J"]) < float(rows["bang_bang"]["J"])
    assert rows["min_jerk"]["SR"] == rows["bang_bang"]["SR"] == "1.0"


def summary_csv(path, rows):
    with open(path, "w") as fh:
        fh.write("suite,run,SR,tau,L_ee,L_joint,J,R,n_success,N\n")
        for r in rows:
            fh.write(",".join(str(x) for x in r) + "\n")
    return str(path)


def test_compare_published_cells(tmp_path):
    base = summary_csv(tmp_path / "b.csv", [("lib", "baseline", 0.9, 5.4, 1, 1, 1540.9, 1, 9, 10)])
    var = summary_csv(tmp_path / "v.csv", [("lib", "fast", 0.8, 5.1, 1, 1, 1973.1, 1, 8, 10)])
    assert main(["compare", "--baseline", base, "--variant", var, "--out", str(tmp_path / "r.json")]) == 0
    md = (tmp_path / "r.md").read_text()
    assert "1973.1 (+28.0%)" in md and "5.1 (-5.6%)" in md
    assert "80.0 (-10.0)" in md
    rec = json.loads((tmp_path / "r.json").read_text())
    cell = rec["sections"]["lib"][0]["cells"]["J"]
    assert cell["value"] == 100 * (1973.1 / 1540.9) and rec["aggregated"] is None
    assert rec["provenance"]["baseline"]["sha256"]


def test_compare_identity(tmp_path):
    smooth = simulate(tmp_path, "smooth", reps=3)
    main(["eval", "--suite", str(smooth), "--out", str(tmp_path / "m.csv")])
    m = str(tmp_path / "m.csv")
    assert main(["compare", "--baseline", m, "--variant", m, "--out", str(tmp_path / "r.json")]) == 0
    md = (tmp_path / "r.md").read_text()
    rows = [ln for ln in md.splitlines() if ln.startswith(("| tau", "| L_ee", "| L_joint", "| J", "| R"))]
    normalized = rows[:5]
    assert all(ln.endswith("| 100.0 | 100.0 (+0.0) |") for ln in normalized)


def test_compare_aggregates_suites(tmp_path):
    base = summary_csv(tmp_path / "b.csv", [("a", "base", 1, 1, 1, 1, 0, 1, 1, 1),
                                            ("b", "base", 1, 2, 1, 1, 1, 1, 1, 1)])
    var = summary_csv(tmp_path / "v.csv", [("a", "v", 1, 1.02, 1, 1, 1, 1, 1, 1),
                                           ("b", "v", 1, 1.96, 1, 1, 1, 1, 1, 1)])
    out = tmp_path / "r.json"
    assert main(["compare", "--baseline", base, "--variant", var, "--by-suite", "--out", str(out)]) == 0
    rec = json.loads(out.read_text())
    agg = rec["aggregated"][0]["cells"]
    assert agg["tau"]["value"] == pytest.approx(100.0, abs=1e-12)
    assert agg["J"]["n_suites"] == 1 and agg["J"]["n_total"] == 2
    md = (tmp_path / "r.md").read_text()
    assert "Suite `a`" in md and "Aggregated over 2 suites" in md and "[1/2]" in md


def test_compare_bad_input(tmp_path):
    bad = tmp_path / "b.csv"
    bad.write_text("suite,run\nx,y\n")
    assert main(["compare", "--baseline", str(bad), "--variant", str(bad), "--out", str(tmp_path / "r.json")]) == 1


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("train")
    demo = {"suite_id": "reach", "run_tag": "demo", "seed": 3,
            "entries": [{"task": {"random_target": True, "epsilon": 1e-9, "T_max": 30,
                                  "max_joint_offset": 0.8},
                         "controller": {"kind": "min_jerk", "speed": 0.15, "noise_std": 0.03},
                         "f": 5, "repetitions": 8}]}
    (tmp / "demo.json").write_text(json.dumps(demo))
    assert main(["simulate", "--scenario", str(tmp / "demo.json"), "--out", str(tmp / "demos")]) == 0
    (tmp / "cfg.json").write_text(json.dumps({"epochs": 10, "hidden": [16, 16]}))
    assert main(["train", "--config", str(tmp / "cfg.json"), "--demos", str(tmp / "demos"),
                 "--out", str(tmp / "pol.bin"), "--seed", "2"]) == 0
    return tmp


def test_train_defaults_and_determinism(trained):
    meta = load_model(trained / "pol.bin").meta
    assert meta["train"]["config"]["eta"] == 0.01 and meta["train"]["config"]["seed"] == 2
    assert (trained / "pol.loss.csv").read_text().startswith("epoch,bc,jerk_term,rate_term,total\n")
    assert main(["train", "--config", str(trained / "cfg.json"), "--demos", str(trained / "demos"),
                 "--out", str(trained / "again.bin"), "--seed", "2"]) == 0
    assert (trained / "again.bin").read_bytes() == (trained / "pol.bin").read_bytes()
    assert main(["train", "--config", str(trained / "cfg.json"), "--demos", str(trained / "demos"),
                 "--out", str(trained / "eta0.bin"), "--eta", "0"]) == 0
    assert load_model(trained / "eta0.bin").meta["train"]["config"]["eta"] == 0.0


def test_train_bad_config(trained, tmp_path):
    (tmp_path / "cfg.json").write_text('{"epochs": 1, "warp": 9}')
    assert main(["train", "--config", str(tmp_path / "cfg.json"), "--demos", str(trained / "demos"),
                 "--out", str(tmp_path / "p.bin")]) == 1


def test_compress_prune_zero_and_quant_idempotent(trained, tmp_path):
    src = str(trained / "pol.bin")
    assert main(["compress", "--model", src, "--prune", "0.0", "--out", str(tmp_path / "p0.bin")]) == 0
    assert (tmp_path / "p0.bin").read_bytes() == (trained / "pol.bin").read_bytes()
    assert main(["compress", "--model", src, "--quant-bits", "8", "--out", str(tmp_path / "q1.bin")]) == 0
    assert main(["compress", "--model", str(tmp_path / "q1.bin"), "--quant-bits", "8",
                 "--out", str(tmp_path / "q2.bin")]) == 0
    assert (tmp_path / "q1.bin").read_bytes() == (tmp_path / "q2.bin").read_bytes()
    prov = load_model(tmp_path / "q2.bin").meta["compression"]
    assert [p["op"] for p in prov] == ["quantize", "quantize"] and prov[0]["bits"] == 8


def test_compress_flag_validation(trained, tmp_path):
    src = str(trained / "pol.bin")
    out = str(tmp_path / "x.bin")
    assert main(["compress", "--model", src, "--quant-bits", "4", "--scope", "global", "--out", out]) == 1
    assert main(["compress", "--model", src, "--prune", "1.5", "--out", out]) == 1
    assert main(["compress", "--model", src, "--action-codec", "keep=3", "--out", out]) == 1
    with pytest.raises(SystemExit) as info:
        main(["compress", "--model", src, "--prune", "0.1", "--quant-bits", "4", "--out", out])
    assert info.value.code == 1


def test_prune_pipeline_report_names_scope(trained, tmp_path):
    src = trained / "pol.bin"
    assert main(["compress", "--model", str(src), "--prune", "0.1", "--scope", "global",
                 "--out", str(tmp_path / "p10.bin")]) == 0
    assert load_model(tmp_path / "p10.bin").meta["compression"][0]["scope"] == "global"
    task = {"random_target": True, "epsilon": 0.05, "T_max": 60, "max_joint_offset": 0.8}
    for name, model in (("base", src), ("prune-10", tmp_path / "p10.bin")):
        data = {"suite_id": "reach", "run_tag": name, "seed": 4,
                "entries": [{"task": task, "controller": {"kind": "policy", "model": str(model)},
                             "f": 5, "repetitions": 4}]}
        (tmp_path / f"{name}.json").write_text(json.dumps(data))
        assert main(["simulate", "--scenario", str(tmp_path / f"{name}.json"),
                     "--out", str(tmp_path / f"s-{name}")]) == 0
        main(["eval", "--suite", str(tmp_path / f"s-{name}"), "--out", str(tmp_path / f"{name}.csv")])
    assert main(["compare", "--baseline", str(tmp_path / "base.csv"), "--variant",
                 str(tmp_path / "prune-10.csv"), "--out", str(tmp_path / "r.json")]) == 0
    rec = json.loads((tmp_path / "r.json").read_text())
    assert rec["runs"] == ["prune-10"]


def test_compress_inference_options(trained, tmp_path):
    src = str(trained / "pol.bin")
    assert main(["compress", "--model", src, "--token-prune", "0.25", "--out", str(tmp_path / "t.bin")]) == 0
    assert load_model(tmp_path / "t.bin").meta["inference"] == {"token_prune": 0.25}
    assert main(["compress", "--model", src, "--action-codec", "keep=4,qstep=0.05",
                 "--out", str(tmp_path / "c.bin")]) == 0
    assert load_model(tmp_path / "c.bin").meta["inference"]["action_codec"] == {"keep": 4, "qstep": 0.05}


def test_plotdata(tmp_path):
    (tmp_path / "s").mkdir()
    write_suite(tmp_path / "s", [_episode(True, T=3)])
    assert main(["plotdata", "--suite", str(tmp_path / "s"), "--plane", "xy", "--out", str(tmp_path / "xy")]) == 0
    rows = read_csv(tmp_path / "xy" / "episode_0000.csv")
    assert len(rows) == 3 and list(rows[0]) == ["t", "u", "v"]
    assert main(["plotdata", "--suite", str(tmp_path / "s"), "--plane", "XZ", "--out", str(tmp_path / "xz")]) == 0
    assert all(float(r["v"]) == 0.0 for r in read_csv(tmp_path / "xz" / "episode_0000.csv"))
    with pytest.raises(SystemExit) as info:
        main(["plotdata", "--suite", str(tmp_path / "s"), "--plane", "uv", "--out", str(tmp_path / "uv")])
    assert info.value.code != 0
    assert not Path(tmp_path / "uv").exists()

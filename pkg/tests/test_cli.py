"""End-to-end tests of the command-line interface.

Each test drives ``main`` with real argument vectors against the bundled
example files, exactly as a shell user would, and checks exit codes, output
artifacts, and byte-level determinism.
"""

import json
import os

import pytest

from hetplan.cli import main
from hetplan.configure import TrainingPlan
from hetplan.workload import load_cluster_profile

FIXTURES = os.path.join(os.path.dirname(__file__), os.pardir, "fixtures")
TOY = os.path.join(FIXTURES, "toy_cluster.json")
SLOW = os.path.join(FIXTURES, "slow_interconnect_cluster.json")
SMALL = os.path.join(FIXTURES, "small_model.json")
MEDIUM = os.path.join(FIXTURES, "medium_model.json")


def plan_args(out, cluster=TOY, model=SMALL, extra=()):
    return ["plan", "--cluster", cluster, "--model", model,
            "--out", str(out), *extra]


class TestPartitionCommand:
    def test_writes_every_k_with_nondecreasing_cut_weight(self, tmp_path, capsys):
        out = tmp_path / "parts.json"
        assert main(["partition", "--cluster", TOY, "--k", "3",
                     "--out", str(out)]) == 0
        payload = json.loads(out.read_text())
        ks = [p["k"] for p in payload["partitions"]]
        weights = [p["cut_weight"] for p in payload["partitions"]]
        assert ks == [1, 2, 3]
        assert weights == sorted(weights)
        ids = sorted(x for p in payload["partitions"][2]["groups"] for x in p)
        assert ids == ["n0-0", "n0-1", "n1-0", "n1-1"]
        assert "in " in capsys.readouterr().out  # wall-clock note on stdout

    def test_is_byte_deterministic(self, tmp_path):
        outs = [tmp_path / f"p{i}.json" for i in (0, 1)]
        for out in outs:
            assert main(["partition", "--cluster", TOY, "--k", "2",
                         "--out", str(out)]) == 0
        assert outs[0].read_bytes() == outs[1].read_bytes()


class TestPlanCommand:
    def test_plan_round_trips_through_the_loader(self, tmp_path):
        out = tmp_path / "plan.json"
        assert main(plan_args(out)) == 0
        profile = load_cluster_profile(TOY)
        plan = TrainingPlan.load(str(out), profile)
        assert sum(g.layers_assigned for g in plan.groups) == 12
        assert plan.latency is not None and plan.latency.l_total > 0

    def test_plan_is_byte_deterministic(self, tmp_path):
        outs = [tmp_path / f"plan{i}.json" for i in (0, 1)]
        for out in outs:
            assert main(plan_args(out)) == 0
        assert outs[0].read_bytes() == outs[1].read_bytes()

    def test_batch_tokens_overrides_global_batch(self, tmp_path):
        out = tmp_path / "plan.json"
        # small model: seq_len 1024, so 65536 tokens = 64 sequences.
        assert main(plan_args(out, extra=["--batch-tokens", "65536"])) == 0
        plan = json.loads(out.read_text())
        assert plan["n_microbatches"] * plan["microbatch_size"] == 64

    def test_strategy_all_searches_every_strategy(self, tmp_path):
        out = tmp_path / "plan.json"
        assert main(plan_args(out, extra=["--strategy", "all"])) == 0
        assert json.loads(out.read_text())["strategy"] in (
            "zorse", "pp-zero2", "pp-zero3")

    def test_comm_config_changes_the_estimate(self, tmp_path):
        fast, slow = tmp_path / "fast.json", tmp_path / "slow.json"
        cfg = tmp_path / "comm.json"
        cfg.write_text(json.dumps({"ring_latency_per_hop": 5e-3}))
        assert main(plan_args(fast)) == 0
        assert main(plan_args(slow, extra=["--comm-config", str(cfg)])) == 0
        lat = lambda p: json.loads(p.read_text())["latency"]["l_total"]
        assert lat(slow) > lat(fast)


class TestSimulateCommand:
    def make_plan(self, tmp_path):
        out = tmp_path / "plan.json"
        assert main(plan_args(out)) == 0
        return out

    def test_writes_summary_and_traces(self, tmp_path):
        plan = self.make_plan(tmp_path)
        summary = tmp_path / "timeline.json"
        gantt = tmp_path / "gantt.csv"
        mem = tmp_path / "mem.csv"
        assert main(["simulate", "--cluster", TOY, "--model", SMALL,
                     "--plan", str(plan), "--out", str(summary),
                     "--gantt", str(gantt), "--mem-trace", str(mem)]) == 0
        data = json.loads(summary.read_text())
        assert data["iteration_time"] > 0
        assert set(data["memory_peaks"]) == {"n0-0", "n0-1", "n1-0", "n1-1"}
        assert gantt.read_text().splitlines()[0].startswith("start,end,kind")
        assert mem.read_text().splitlines()[0].startswith("device,time")

    def test_simulated_time_matches_plan_estimate(self, tmp_path):
        plan_path = self.make_plan(tmp_path)
        summary = tmp_path / "timeline.json"
        assert main(["simulate", "--cluster", TOY, "--model", SMALL,
                     "--plan", str(plan_path), "--out", str(summary)]) == 0
        est = json.loads(plan_path.read_text())["latency"]["l_total"]
        sim = json.loads(summary.read_text())["iteration_time"]
        assert abs(est - sim) / sim < 0.15

    def test_outputs_are_byte_deterministic(self, tmp_path):
        plan = self.make_plan(tmp_path)
        files = []
        for i in (0, 1):
            gantt = tmp_path / f"gantt{i}.csv"
            summary = tmp_path / f"tl{i}.json"
            assert main(["simulate", "--cluster", TOY, "--model", SMALL,
                         "--plan", str(plan), "--gantt", str(gantt),
                         "--out", str(summary)]) == 0
            files.append((gantt.read_bytes(), summary.read_bytes()))
        assert files[0] == files[1]


class TestReportCommand:
    def test_report_compares_estimate_and_simulation(self, tmp_path, capsys):
        plan = tmp_path / "plan.json"
        assert main(plan_args(plan)) == 0
        out = tmp_path / "report.json"
        assert main(["report", "--cluster", TOY, "--model", SMALL,
                     "--plan", str(plan), "--out", str(out)]) == 0
        data = json.loads(out.read_text())
        assert 0.8 < data["latency"]["ratio"] < 1.2
        assert all(d["fits"] for d in data["memory"].values())
        assert all(d["simulated_peak_bytes"] <= d["estimated_bytes"] * (1 + 1e-9)
                   for d in data["memory"].values())
        assert "latency:" in capsys.readouterr().out


class TestExitCodes:
    def test_missing_cluster_file_is_bad_input(self, tmp_path, capsys):
        assert main(plan_args(tmp_path / "p.json",
                              cluster=str(tmp_path / "nope.json"))) == 2
        assert "error:" in capsys.readouterr().err

    def test_corrupt_cluster_file_is_bad_input(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(plan_args(tmp_path / "p.json", cluster=str(bad))) == 2
        assert "error:" in capsys.readouterr().err

    def test_wrong_cluster_for_plan_is_bad_input(self, tmp_path, capsys):
        plan = tmp_path / "plan.json"
        assert main(plan_args(plan)) == 0
        assert main(["simulate", "--cluster", SLOW, "--model", SMALL,
                     "--plan", str(plan)]) == 2
        assert "cluster" in capsys.readouterr().err

    def test_bad_batch_tokens_is_bad_input(self, tmp_path, capsys):
        assert main(plan_args(tmp_path / "p.json",
                              extra=["--batch-tokens", "1000"])) == 2
        assert "multiple" in capsys.readouterr().err

    def test_unknown_comm_key_is_bad_input(self, tmp_path, capsys):
        cfg = tmp_path / "comm.json"
        cfg.write_text(json.dumps({"warp_drive": 9}))
        assert main(plan_args(tmp_path / "p.json",
                              extra=["--comm-config", str(cfg)])) == 2
        assert "warp_drive" in capsys.readouterr().err

    def test_memory_starved_cluster_has_no_feasible_plan(self, tmp_path, capsys):
        raw = json.loads(open(TOY).read())
        for dev in raw["devices"]:
            dev["mem_capacity"] = 1_000_000
        tiny = tmp_path / "tiny.json"
        tiny.write_text(json.dumps(raw))
        assert main(plan_args(tmp_path / "p.json", cluster=str(tiny))) == 3
        assert "no feasible plan" in capsys.readouterr().err

    def test_plan_model_layer_mismatch_fails_simulation(self, tmp_path, capsys):
        plan = tmp_path / "plan.json"
        assert main(plan_args(plan)) == 0
        assert main(["simulate", "--cluster", TOY, "--model", MEDIUM,
                     "--plan", str(plan)]) == 4
        assert "layers" in capsys.readouterr().err

    def test_unknown_strategy_is_rejected_by_the_parser(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(plan_args(tmp_path / "p.json", extra=["--strategy", "magic"]))
        assert exc.value.code == 2

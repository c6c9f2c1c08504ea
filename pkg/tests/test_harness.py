import io
import json
import pathlib

import pytest

from commkit import ScenarioError, TraceMismatch
from commkit.harness import (
    Scenario,
    TaskOutcome,
    advance,
    dump_scenario,
    graceful_close,
    kill,
    load_scenario,
    random_scenario,
    replay_trace,
    run_scenario,
    silence,
    spawn,
    submit,
    write_trace,
)
from commkit.harness.cli import main as harness_main
from commkit.harness.scenario import Event, EventKind, ExpectedOutcome
from commkit.harness.stress import stress_scenario

from trace_oracle import replay

DATA = pathlib.Path(__file__).parent / "data"
SCENARIOS = pathlib.Path(__file__).parent.parent / "scenarios"


class TestScenario:
    def test_same_seed_same_scenario(self):
        assert random_scenario(17) == random_scenario(17)
        assert random_scenario(17) != random_scenario(18)

    def test_size_zero(self):
        scenario = random_scenario(3, size=0)
        assert scenario.events == ()
        report = run_scenario(scenario)
        assert report.passed and report.outcomes == {}

    def test_jsonl_round_trip(self):
        scenario = random_scenario(5, size=30)
        buf = io.StringIO()
        dump_scenario(scenario, buf)
        assert load_scenario(io.StringIO(buf.getvalue())) == scenario

    @pytest.mark.parametrize(
        "events",
        [
            (kill("c1"),),
            (spawn(at=10), submit(1, at=5)),
            (Event(EventKind.SUBMIT_TASKS, None, {"count": -1}),),
            (Event(EventKind.SPAWN_CONSUMER, None, {"prefetch": 1, "bogus": 2}),),
            (spawn(), silence("c2", 10)),
        ],
    )
    def test_malformed(self, events):
        with pytest.raises(ScenarioError):
            Scenario(events=events).validate()

    @pytest.mark.parametrize(
        "text",
        ["", "not json\n", '{"seed": 1}\n{"kind": "NOPE"}\n', '{"seed": 1}\n{"kind": "SUBMIT_TASKS"}\n'],
    )
    def test_malformed_files(self, text):
        with pytest.raises(ScenarioError):
            load_scenario(io.StringIO(text))

    def test_expected_mismatch_fails_report(self):
        scenario = Scenario(events=(spawn(), submit(3)), expected=ExpectedOutcome((("ACKED_ONCE", 2),)))
        report = run_scenario(scenario)
        assert not report.passed
        assert any("ACKED_ONCE" in v for v in report.violations)


class TestRun:
    def test_spawn_two_kill_one_mid_run(self):
        scenario = load_scenario(str(SCENARIOS / "kill_mid_run.jsonl"))
        report = run_scenario(scenario)
        holdings = replay(report.trace)
        assert report.counts["ACKED_ONCE"] == 100 and report.passed
        assert holdings.killed_in_flight["c1"]
        assert holdings.redelivered == holdings.killed_in_flight["c1"]
        assert len(report.redelivered) == len(holdings.killed_in_flight["c1"])

    def test_no_consumers(self):
        report = run_scenario(Scenario(events=(submit(10), advance(1000))))
        assert report.counts["PENDING"] == 10 and report.counts["LOST"] == 0
        assert report.passed

    def test_grace_covers_handler(self):
        report = run_scenario(Scenario(events=(spawn(work=10), submit(1), graceful_close("c1", 50, at=2))))
        assert report.counts["ACKED_ONCE"] == 1
        assert report.redelivered == frozenset()

    def test_grace_expires(self):
        report = run_scenario(load_scenario(str(SCENARIOS / "graceful_close.jsonl")))
        assert report.counts["ACKED_ONCE"] == 1 and report.redelivered == frozenset({1})

    def test_poison(self):
        report = run_scenario(load_scenario(str(SCENARIOS / "poison.jsonl")))
        assert report.serials(TaskOutcome.DEAD_LETTERED) == [3, 7]
        assert report.passed

    @pytest.mark.parametrize("duration", list(range(1, 160, 7)) + [98, 99, 100, 101])
    def test_silence_boundary_property(self, duration):
        interval = 50
        scenario = Scenario(
            events=(spawn(prefetch=2, work=40), spawn(work=5), submit(6), silence("c1", duration, at=1)),
            heartbeat_interval=interval,
        )
        report = run_scenario(scenario)
        holdings = replay(report.trace)
        drops = [d for d in holdings.drops if d[0] == "c1"]
        if duration >= 2 * interval:
            assert len(drops) == 1
            _, held_before, requeued, t = drops[0]
            assert t == 1 + 2 * interval
            assert requeued == held_before and requeued
        else:
            assert drops == []
        assert report.passed

    def test_random_seeds_pass(self):
        for seed in range(300):
            report = run_scenario(random_scenario(seed, size=20))
            assert report.passed, report.summary()


class TestTraces:
    def test_replay_of_passing_run(self, tmp_path):
        scenario = random_scenario(11, size=25)
        report = run_scenario(scenario)
        path = tmp_path / "trace.jsonl"
        write_trace(scenario, report, str(path))
        again = replay_trace(str(path))
        assert again.summary() == report.summary()

    def test_golden_trace(self):
        report = replay_trace(str(DATA / "golden_trace.jsonl"))
        expected = (DATA / "golden_summary.txt").read_text(encoding="utf-8")
        assert report.summary() + "\n" == expected

    def test_golden_trace_regenerates_byte_identical(self):
        scenario = load_scenario(str(DATA / "golden_scenario.jsonl"))
        buf = io.StringIO()
        write_trace(scenario, run_scenario(scenario), buf)
        assert buf.getvalue() == (DATA / "golden_trace.jsonl").read_text(encoding="utf-8")

    def test_hand_edited_duplicate_ack(self):
        lines = (DATA / "golden_trace.jsonl").read_text(encoding="utf-8").splitlines()
        index = next(i for i, line in enumerate(lines) if '"event":"ack"' in line)
        tampered = lines[: index + 1] + [lines[index]] + lines[index + 1 :]
        with pytest.raises(TraceMismatch) as info:
            replay_trace(tampered)
        assert info.value.index == index

    def test_truncated_trace(self):
        lines = (DATA / "golden_trace.jsonl").read_text(encoding="utf-8").splitlines()
        with pytest.raises(TraceMismatch):
            replay_trace(lines[:-3])

    def test_trace_without_header(self):
        with pytest.raises(ScenarioError):
            replay_trace(['{"event": "ack"}'])


class TestCli:
    def test_run(self, capsys):
        assert harness_main(["run", str(SCENARIOS / "kill_mid_run.jsonl")]) == 0
        assert capsys.readouterr().out.strip().endswith("PASS")

    def test_run_writes_trace_and_replays(self, tmp_path, capsys):
        trace = tmp_path / "t.jsonl"
        assert harness_main(["run", str(DATA / "golden_scenario.jsonl"), "--trace", str(trace)]) == 0
        assert trace.read_text() == (DATA / "golden_trace.jsonl").read_text()
        assert harness_main(["replay", str(trace)]) == 0

    def test_failing_run_exits_one(self, tmp_path, capsys):
        path = tmp_path / "s.jsonl"
        path.write_text('{"seed": 0}\n{"kind": "SPAWN_CONSUMER"}\n{"kind": "SUBMIT_TASKS", "count": 2}\n'
                        '{"expected": {"ACKED_ONCE": 3}}\n')
        assert harness_main(["run", str(path)]) == 1
        assert "FAIL" in capsys.readouterr().out

    def test_replay_mismatch_exits_one(self, tmp_path, capsys):
        lines = (DATA / "golden_trace.jsonl").read_text().splitlines()
        lines[5] = lines[5].replace('"t":0', '"t":1')
        path = tmp_path / "bad.jsonl"
        path.write_text("\n".join(lines) + "\n")
        assert harness_main(["replay", str(path)]) == 1
        assert "mismatch at record 4" in capsys.readouterr().out

    def test_bad_scenario_exits_two(self, tmp_path, capsys):
        path = tmp_path / "s.jsonl"
        path.write_text("garbage\n")
        assert harness_main(["run", str(path)]) == 2
        assert harness_main(["run", str(tmp_path / "missing.jsonl")]) == 2

    def test_fuzz(self, capsys):
        assert harness_main(["fuzz", "--seeds", "200", "--start", "1000"]) == 0
        assert "0 failing" in capsys.readouterr().out

    def test_stress_flag(self, capsys):
        assert harness_main(["run", str(SCENARIOS / "poison.jsonl"), "--stress"]) == 0


class TestStress:
    @pytest.mark.parametrize("seed", range(5))
    def test_random_scenarios_under_threads(self, seed):
        report = stress_scenario(random_scenario(seed, size=12), time_scale=1.0)
        assert report.passed, report.summary()

    def test_kill_scenario(self):
        report = stress_scenario(load_scenario(str(SCENARIOS / "kill_mid_run.jsonl")), time_scale=0.5)
        assert report.counts["ACKED_ONCE"] == 100
        assert report.passed

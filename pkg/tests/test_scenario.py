import json

import pytest

from agora.report import ReportError, build_report, load_report, render_json
from agora.scenario import ScenarioError, compare, parse_scenario, run_scenario
from conftest import SCENARIOS

BUNDLED = sorted(SCENARIOS.glob("*.scn"))


def write(tmp_path, text, name="s.scn"):
    path = tmp_path / name
    path.write_text(text)
    return path


@pytest.mark.parametrize("text, line", [
    ("spawn bank\nfrobnicate\n", 2),
    ("spawn bank\n\n# c\nspawn wizard\n", 4),
    ("advance soon\n", 1),
    ("spawn host h1 cpu=1 colour=red\n", 1),
    ("at 5 advance 6\n", 1),
    ("spawn bank\nassert\n", 2),
    ("inject vm_kill\n", 1),
    ('name "unterminated\n', 1),
])
def test_parse_errors_name_the_line(text, line):
    with pytest.raises(ScenarioError) as info:
        parse_scenario(text)
    assert info.value.line == line


def test_runtime_errors_name_the_line(tmp_path):
    path = write(tmp_path, "spawn bank\nspawn host h1\nbid x a h9 amount=1 duration=1\n")
    with pytest.raises(ScenarioError) as info:
        run_scenario(path)
    assert info.value.line == 3


def test_deferred_error_surfaces(tmp_path):
    path = write(tmp_path, "spawn bank\nat 5 spawn bank\nadvance 10\n")
    with pytest.raises(ScenarioError) as info:
        run_scenario(path)
    assert info.value.line == 2


@pytest.mark.parametrize("actual, op, expected, tol, ok", [
    (0.75, "==", "0.75", 1e-9, True),
    (0.7501, "==", "0.75", 1e-3, True),
    (0.7501, "==", "0.75", 1e-9, False),
    (3, "<=", "3", 1e-9, True),
    (4, "<", "3", 1e-9, False),
    ("STARTED", "==", "STARTED", 1e-9, True),
    ("STARTED", "!=", "FAILED", 1e-9, True),
    (True, "==", "true", 1e-9, True),
])
def test_compare(actual, op, expected, tol, ok):
    assert compare(actual, op, expected, tol) is ok


def test_failing_assertion_reports_actual(tmp_path):
    path = write(tmp_path, "spawn bank\nopen a 5.00\nadvance 1\nassert balance:a 6.00\n")
    runner, report = run_scenario(path)
    assert not report.passed
    [fail] = report.failures
    assert fail["line"] == 4 and fail["actual"] == "5.00"


@pytest.mark.parametrize("path", BUNDLED, ids=lambda p: p.stem)
def test_bundled_scenarios_pass(path):
    runner, report = run_scenario(path, seed=0)
    assert report.passed, report.failures
    assert report.assertions


@pytest.mark.parametrize("path", BUNDLED, ids=lambda p: p.stem)
def test_bundled_scenarios_are_deterministic(path, tmp_path):
    outs = []
    for run in ("a", "b"):
        run_scenario(path, seed=42, log_dir=tmp_path / run)
        outs.append([(tmp_path / run / f).read_bytes()
                     for f in ("messages.ndjson", "trace.ndjson", "report.json")])
    assert outs[0] == outs[1]


@pytest.mark.parametrize("path", BUNDLED, ids=lambda p: p.stem)
def test_report_is_pure_function_of_log(path, tmp_path):
    run_scenario(path, seed=3, log_dir=tmp_path)
    rebuilt = render_json(load_report(tmp_path / "messages.ndjson"))
    assert rebuilt == (tmp_path / "report.json").read_text()


def test_report_contents_two_bidders(tmp_path):
    runner, report = run_scenario(SCENARIOS / "two_bidders.scn", seed=42)
    assert report.scenario == "two_bidders" and report.seed == 42
    assert [0.03, {"a1": 0.75, "b1": 0.25}] in report.shares["h1"]
    assert report.shares["h1"][-1] == [100.03, {}]
    assert report.cpu_seconds


def test_truncated_log_names_line(tmp_path):
    run_scenario(SCENARIOS / "two_bidders.scn", log_dir=tmp_path)
    lines = (tmp_path / "messages.ndjson").read_text().splitlines()
    cut = lines[:5] + [lines[5][: len(lines[5]) // 2]]
    with pytest.raises(ReportError) as info:
        build_report(cut)
    assert info.value.line == 6


def test_empty_log_gives_empty_report():
    report = build_report([])
    assert report.messages == 0 and report.passed
    assert json.loads(render_json(report))["shares"] == {}

import argparse
import json
import subprocess
import sys

import pytest

from agora import __version__
from agora.cli import UsageError, load_settings, main
from conftest import CORPUS, SCENARIOS


def run(capsys, *argv):
    code = main(list(map(str, argv)))
    out, err = capsys.readouterr()
    return code, out, err


def ns(**kw):
    base = dict(seed=None, until=None, log_dir=None, config=None, include=None)
    base.update(kw)
    return argparse.Namespace(**base)


def test_settings_defaults():
    s = load_settings(ns(), environ={})
    assert (s.seed, s.until, s.log_dir, tuple(s.include)) == (0, None, None, ())


def test_settings_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 1, "until": 10, "log_dir": "cfg", "include": ["a"]}))
    env = {"AGORA_CONFIG": str(cfg), "AGORA_SEED": "2", "AGORA_UNTIL": "20"}
    s = load_settings(ns(seed=3, include=["b"]), environ=env)
    assert s.seed == 3
    assert s.until == 20.0
    assert s.log_dir == "cfg"
    assert tuple(s.include) == ("a", "b")


@pytest.mark.parametrize("content", ["[1, 2]", "{bad json", '{"colour": 1}', '{"seed": "x"}'])
def test_bad_config(tmp_path, content):
    cfg = tmp_path / "c.json"
    cfg.write_text(content)
    with pytest.raises(UsageError):
        load_settings(ns(config=str(cfg)), environ={})


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_scenario_exit_codes(capsys, tmp_path):
    code, out, _ = run(capsys, "scenario", "run", SCENARIOS / "two_bidders.scn")
    assert code == 0 and "PASS" in out
    failing = tmp_path / "f.scn"
    failing.write_text("spawn bank\nopen a 5.00\nadvance 1\nassert balance:a 6.00\n")
    code, out, _ = run(capsys, "scenario", "run", failing)
    assert code == 1 and "FAIL line 4" in out
    broken = tmp_path / "b.scn"
    broken.write_text("spawn bank\nwobble\n")
    code, _, err = run(capsys, "scenario", "run", broken)
    assert code == 2 and "line 2" in err


def test_scenario_json_and_report_round_trip(capsys, tmp_path):
    code, out, _ = run(capsys, "scenario", "run", SCENARIOS / "two_bidders.scn",
                       "--format", "json", "--seed", 42, "--log-dir", tmp_path)
    assert code == 0
    code, again, _ = run(capsys, "report", tmp_path / "messages.ndjson", "--format", "json")
    assert code == 0 and again == out


def test_report_malformed(capsys, tmp_path):
    log = tmp_path / "m.ndjson"
    log.write_text('{"msg_type": "x"}\nnot json\n')
    code, _, err = run(capsys, "report", log)
    assert code == 2 and "line" in err


def test_daemon_auctioneer_registers(capsys):
    code, out, _ = run(capsys, "daemon", "auctioneer", "--host-id", "h1", "--cpu", 4, "--mem", 8192)
    assert code == 0
    data = json.loads(out)
    assert [h["host_id"] for h in data["directory"]] == ["h1"]


def test_daemon_missing_flag_is_usage_error(capsys):
    code, _, err = run(capsys, "daemon", "auctioneer", "--host-id", "h1")
    assert code == 2 and "usage" in err


@pytest.mark.parametrize("role", ["bank", "sls"])
def test_daemon_other_roles(capsys, role):
    code, out, _ = run(capsys, "daemon", role, "--until", 5)
    assert code == 0 and json.loads(out)["role"] == role


def test_bid_once_and_unaffordable(capsys):
    code, out, _ = run(capsys, "bid", "once", "--account", "a", "--target", 0.5, "--budget", 100,
                       "--duration", 100, "--host", "h1")
    assert code == 0 and json.loads(out)["share"] == 1.0
    code, out, _ = run(capsys, "bid", "once", "--account", "a", "--target", 0.5, "--budget", 100,
                       "--duration", 100, "--host", "h1:1:256")
    assert code == 1 and "no host fits" in json.loads(out)["error"]


def test_bid_auto_against_market(capsys):
    code, out, _ = run(capsys, "bid", "auto", "--account", "z", "--target", 0.4, "--budget", 200,
                       "--duration", 100, "--market", SCENARIOS / "two_bidders.scn", "--until", 200)
    data = json.loads(out)
    assert code == 0 and data["error"] is None
    assert data["share"] >= 0.4 - 0.01


def test_deploy_status_terminate_session(capsys, tmp_path):
    sd = SCENARIOS / "vm_pair.sd"
    log = tmp_path / "run"
    code, out, _ = run(capsys, "deploy", sd, "--host", "h1:2:8192", "--log-dir", log)
    assert code == 0
    data = json.loads(out)
    assert data["deployment"] == "d1"
    assert {n["state"] for n in data["nodes"]} == {"STARTED"}
    code, out, _ = run(capsys, "status", "d1", "--log-dir", log)
    assert code == 0 and json.loads(out)["now"] == data["now"]
    code, out, _ = run(capsys, "terminate", "d1", "--log-dir", log)
    assert code == 0
    assert {n["state"] for n in json.loads(out)["nodes"]} == {"TERMINATED"}
    code, _, err = run(capsys, "status", "d9", "--log-dir", log)
    assert code == 2


def test_deploy_bad_file_leaves_no_session(capsys, tmp_path):
    bad = tmp_path / "bad.sd"
    bad.write_text("sfConfig { x ; }")
    code, _, _ = run(capsys, "deploy", bad, "--log-dir", tmp_path / "run")
    assert code == 2
    assert not (tmp_path / "run" / "session.json").exists()


def test_descriptor_commands(capsys, tmp_path):
    src = CORPUS / "02_override.sd"
    code, out, _ = run(capsys, "descriptor", "resolve", src)
    assert code == 0 and out == (CORPUS / "02_override.expected").read_text()
    code, out, _ = run(capsys, "descriptor", "parse", src)
    assert code == 0 and out.startswith("P {")
    messy = tmp_path / "m.sd"
    messy.write_text("sfConfig{x 1;}")
    assert run(capsys, "descriptor", "fmt", "--check", messy)[0] == 1
    assert run(capsys, "descriptor", "fmt", "--write", messy)[0] == 0
    assert run(capsys, "descriptor", "fmt", "--check", messy)[0] == 0
    code, out, _ = run(capsys, "descriptor", "lint", messy)
    assert code == 1 and "no sfClass" in out
    assert run(capsys, "descriptor", "lint", SCENARIOS / "vm_pair.sd")[0] == 0


def test_descriptor_diagnostic_exit_one(capsys, tmp_path):
    bad = tmp_path / "bad.sd"
    bad.write_text("sfConfig {\n  x 1;\n  x 2;\n}\n")
    code, _, err = run(capsys, "descriptor", "parse", bad)
    assert code == 1 and "3:3" in err


def test_console_script_entry_point():
    out = subprocess.run([sys.executable, "-m", "agora.cli", "--version"],
                         capture_output=True, text=True, check=True)
    assert __version__ in out.stdout

import csv
import io
import json
import subprocess
import sys

import pytest

from pirnsi.cli import main, parse_sweep
from pirnsi.schemas import validate

TOY = ["--n", "1", "--t", "1", "--k", "2", "--d", "1,1", "--channels", "bec:0.2,bec:0.6"]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_capacity_toy(capsys):
    code, out, _ = run(capsys, "capacity", *TOY, "--format", "json")
    doc = json.loads(out)
    assert code == 0 and doc["C"] == "4/5" and doc["C_star"] == "3/5"
    validate(doc, "capacity")
    code, out, _ = run(capsys, "capacity", "--channels", "bec:1", "--d", "3", "--n", "2",
                       "--t", "1", "--k", "3")
    assert code == 0 and "C=1.75" in out


def test_capacity_csv(capsys):
    code, out, _ = run(capsys, "capacity", *TOY, "--format", "csv")
    rows = list(csv.DictReader(io.StringIO(out)))
    assert rows[0]["C"] == "4/5" and rows[0]["R1"] == "2/5"


def test_capacity_flags_entropy_tie(capsys, tmp_path):
    # Same H(X|Y) = 1/2 as BEC(0.5), different transition law.
    m = tmp_path / "m.txt"
    m.write_text("1/2 1/2 0\n0 1/2 1/2\n")
    code, out, err = run(capsys, "capacity", "--n", "2", "--k", "2", "--d", "1,1",
                         "--channels", f"bec:0.5,dmc:{m}", "--format", "json")
    assert code == 0 and json.loads(out)["ties"] == [[1, 2]] and "equal conditional entropy" in err
    _, out, err = run(capsys, "capacity", *TOY, "--format", "json")
    assert "ties" not in json.loads(out) and not err


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as e:
        main(["capacity", "--n", "2"])
    assert e.value.code == 2
    code, _, err = run(capsys, "capacity", "--d", "1,1", "--channels", "bec:0.2,bec:0.2")
    assert code == 2 and "identical" in err
    code, _, err = run(capsys, "simulate", "--backend", "binning", "--nsrc", "24")
    assert code == 2
    code, _, _ = run(capsys, "simulate", "--delta", "abc")
    assert code == 2


def test_simulate_is_reproducible(tmp_path, capsys):
    args = ["simulate", "--seed", "7", "--nsrc", "256", "--delta", "0.3"]
    assert run(capsys, *args, "--out", str(tmp_path / "a"))[0] == 0
    assert run(capsys, *args, "--out", str(tmp_path / "b"))[0] == 0
    for name in ("transcript.json", "cost.json", "comparison.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    validate(json.loads((tmp_path / "a" / "transcript.json").read_text()), "transcript")
    validate(json.loads((tmp_path / "a" / "cost.json").read_text()), "cost_report")


def test_seed_env_fallback(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("PIRNSI_SEED", "7")
    run(capsys, "simulate", "--nsrc", "64", "--delta", "0.3", "--out", str(tmp_path / "env"))
    run(capsys, "simulate", "--nsrc", "64", "--delta", "0.3", "--seed", "7",
        "--out", str(tmp_path / "flag"))
    assert (tmp_path / "env" / "transcript.json").read_bytes() == \
        (tmp_path / "flag" / "transcript.json").read_bytes()
    monkeypatch.setenv("PIRNSI_SEED", "x")
    assert run(capsys, "simulate", "--nsrc", "64")[0] == 2


def test_metric2_costs_no_more(tmp_path, capsys):
    costs = {}
    for m in (1, 2):
        out = tmp_path / f"m{m}"
        run(capsys, "simulate", "--seed", "3", "--nsrc", "256", "--delta", "0.3",
            "--metric", str(m), "--z", "0", "--out", str(out))
        costs[m] = json.loads((out / "cost.json").read_text())["net_cost"]
    assert costs[2] <= costs[1]


def test_simulate_binning_and_strict(capsys):
    code, out, _ = run(capsys, "simulate", "--backend", "binning", "--nsrc", "12",
                       "--delta", "0.3", "--seed", "1")
    assert code == 0 and "backend=binning" in out
    # Almost no slack: the decoder fails and strict mode exits 1.
    code, _, _ = run(capsys, "simulate", "--nsrc", "64", "--delta", "0", "--seed", "1",
                     "--strict")
    assert code == 1


def test_audit(capsys):
    code, out, _ = run(capsys, "audit", "--exact", "--metric", "1")
    doc = json.loads(out)
    assert code == 0 and doc["max_tv"] == 0.0 and doc["pass"] is True
    validate(doc, "audit_report")


def test_bench_grid(capsys):
    code, out, _ = run(capsys, "bench", "--sweep", "t=1..3,n=4", "--nsrc", "64", "--delta", "0.3")
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and len(rows) == 3
    assert [r["T"] for r in rows] == ["1", "2", "3"]
    assert rows[0]["measured_net"] and not rows[1].get("measured_net")
    assert len(parse_sweep("n=2|3,k=2..4")) == 6


def test_serve_prints_bound_port(tmp_path):
    proc = subprocess.Popen([sys.executable, "-m", "pirnsi.cli", "serve", "--port", "0",
                             "--nsrc", "64", "--delta", "0.3"],
                            stdout=subprocess.PIPE, text=True)
    try:
        line = proc.stdout.readline()
        port = int(line.rsplit(":", 1)[1])
        assert port > 0
        from pirnsi import net
        c = net.Connection(net.Endpoint("127.0.0.1", port))
        assert c.hello() == 1
        c.close()
    finally:
        proc.terminate()
        proc.wait(10)


def test_serve_from_dumped_database(tmp_path, capsys):
    db = tmp_path / "db.bin"
    run(capsys, "simulate", "--nsrc", "64", "--delta", "0.3", "--dump-db", str(db))
    assert db.read_bytes()[:8] == b"PIRNSI01"
    code, _, _ = run(capsys, "serve", "--db", str(tmp_path / "missing.bin"))
    assert code == 2

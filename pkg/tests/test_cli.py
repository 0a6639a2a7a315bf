import json

import pytest

from xfertune.cli import main
from xfertune.core import DatasetProfile, NetworkProfile
from xfertune.simulator import SimScenario, dataset_to_dict

NET = NetworkProfile(1000.0, 10.0, 256 << 10, 90.0, 90.0, "a", "b")
DS = DatasetProfile(8 << 20, 400)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    sc = SimScenario(NET, [(0.0, 0.15), (3600.0, 0.55)], 0.05, 3, DS)
    (d / "scenario.json").write_text(json.dumps(sc.to_dict()))
    prof = sc.to_dict()
    (d / "profile.json").write_text(json.dumps({"network": prof["network"],
                                                "dataset": dataset_to_dict(DS)}))
    assert main(["simgen", "--scenario", str(d / "scenario.json"), "--repeats", "1",
                 "--out", str(d / "logs.jsonl")]) == 0
    assert main(["analyze", "--logs", str(d / "logs.jsonl"), "--out", str(d / "kb.json"),
                 "--seed", "0"]) == 0
    return d


def test_simgen_and_ingest(work, capsys):
    n = len((work / "logs.jsonl").read_text().splitlines())
    assert n == 8 * 8 * 6 * 2
    assert main(["ingest", "--logs", str(work / "logs.jsonl")]) == 0
    assert f"{n} entries accepted, 0 rejected" in capsys.readouterr().out


def test_analyze_is_deterministic(work):
    out = work / "kb2.json"
    assert main(["analyze", "--logs", str(work / "logs.jsonl"), "--out", str(out),
                 "--seed", "0"]) == 0
    assert out.read_bytes() == (work / "kb.json").read_bytes()


def test_query(work, capsys):
    assert main(["query", "--kb", str(work / "kb.json"),
                 "--profile", str(work / "profile.json")]) == 0
    ans = json.loads(capsys.readouterr().out)
    assert ans["cluster"] == 0 and len(ans["surfaces"]) == 2
    assert set(ans["surfaces"][0]["argmax"]) == {"cc", "p", "pp"}


def test_transfer_transcript(work):
    load = work / "load.json"
    load.write_text(json.dumps([[0.0, 0.5]]))
    out = work / "tr.csv"
    args = ["transfer", "--kb", str(work / "kb.json"), "--profile", str(work / "profile.json"),
            "--backend", "sim", "--sim-seed", "4", "--sim-load", str(load), "--out", str(out)]
    assert main(args) == 0
    first = out.read_text()
    assert first.splitlines()[0] == ("chunk_idx,cc,p,pp,predicted_mbps,achieved_mbps,"
                                     "elapsed_s,event")
    assert main(args) == 0
    assert out.read_text() == first


def test_update(work):
    out = work / "kb_up.json"
    assert main(["update", "--kb", str(work / "kb.json"), "--logs", str(work / "logs.jsonl"),
                 "--out", str(out)]) == 0
    assert json.loads(out.read_text())["batches"][-1]["entries"] == 768


def test_report(work, capsys):
    csv_path = work / "r.csv"
    csv_path.write_text("# seed: 0\nexperiment,cell,metric,value,threshold,pass\n"
                        "x,y,z,1.0,>=0.9,1\n")
    assert main(["report", "--in", str(csv_path)]) == 0
    assert "| x | y | z | 1.0 | >=0.9 | 1 |" in capsys.readouterr().out


def test_exit_codes(work, tmp_path, capsys):
    assert main([]) == 1
    assert main(["analyze"]) == 1
    assert main(["transfer", "--kb", str(work / "kb.json"), "--profile",
                 str(work / "profile.json"), "--backend", "gridftp", "--out",
                 str(tmp_path / "x.csv")]) == 1
    assert main(["query", "--kb", str(tmp_path / "missing.json"), "--profile",
                 str(work / "profile.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"version": 42}))
    assert main(["query", "--kb", str(bad), "--profile", str(work / "profile.json")]) == 2
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert main(["analyze", "--logs", str(empty), "--out", str(tmp_path / "k.json")]) == 2
    capsys.readouterr()

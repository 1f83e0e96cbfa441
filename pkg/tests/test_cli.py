from __future__ import annotations

import json

import pytest

from hybridann.cli import build_parser, main
from hybridann.planner import PartitionPlan


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    out = tmp_path_factory.mktemp("ix")
    assert main(["build", "--synthetic", "3000x32", "--nlist", "16", "--out", str(out), "--seed", "3"]) == 0
    return out


def test_build_prints_stage_timings(tmp_path, capsys):
    out = tmp_path / "a"
    assert main(["build", "--synthetic", "2000x16", "--nlist", "64", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    for stage in ("Train", "Add", "Pre-assign"):
        assert stage in text
    assert "64 lists" in text


def test_rebuild_is_byte_identical(tmp_path, built):
    again = tmp_path / "b"
    assert main(["build", "--synthetic", "3000x32", "--nlist", "16", "--out", str(again), "--seed", "3"]) == 0
    assert (again / "index.bin").read_bytes() == (built / "index.bin").read_bytes()


def test_vector_mode_plan_has_one_block(tmp_path):
    out = tmp_path / "v"
    assert main(["build", "--synthetic", "1000x16", "--nlist", "8", "--mode", "harmony-vector", "--out", str(out)]) == 0
    plan = PartitionPlan.from_json((out / "plan.json").read_text())
    assert plan.n_dim == 1 and plan.n_vec == 4


def test_query_full_probe_recall_one(built, capsys):
    rc = main(["query", "--index", str(built), "--nprobe", "16", "--k", "5", "--sample-queries", "4", "--recall"])
    cap = capsys.readouterr()
    assert rc == 0
    lines = [l.split("\t") for l in cap.out.strip().splitlines()]
    assert len(lines) == 20 and all(len(l) == 4 for l in lines)
    assert "recall@5 1.0000" in cap.err


def test_pruning_off_same_ids(built, capsys):
    outs = []
    for flag in ("on", "off"):
        assert main(["query", "--index", str(built), "--pruning", flag, "--sample-queries", "6"]) == 0
        outs.append([l.split("\t")[:3] for l in capsys.readouterr().out.splitlines()])
    assert outs[0] == outs[1]


def test_pruning_stats_differ(tmp_path, capsys):
    reports = []
    for flag in ("on", "off"):
        rp = tmp_path / f"{flag}.json"
        assert main(["bench", "--synthetic", "2000x32", "--q-count", "20", "--nlist", "16", "--mode",
                     "harmony-dimension", "--pruning", flag, "--report", str(rp)]) == 0
        reports.append(json.loads(rp.read_text()))
    on, off = reports
    assert on["pruning"]["slice_ratios"][-1] > 0 and off["pruning"]["slice_ratios"] == [0.0] * 4
    capsys.readouterr()


def test_paper_style_aliases(tmp_path, capsys):
    rp, tab = tmp_path / "r.json", tmp_path / "t.csv"
    rc = main(["bench", "--synthetic", "2000x32", "--q-count", "20", "--NMachine", "4", "--Pruning_Configuration",
               "--Indexing_Parameters", "nlist=16", "nprobe=4", "--α", "2", "--Mode", "Harmony",
               "--report", str(rp), "--csv", str(tab)])
    assert rc == 0
    doc = json.loads(rp.read_text())
    assert doc["knobs"]["nlist"] == 16 and doc["knobs"]["nprobe"] == 4 and doc["knobs"]["alpha"] == 2.0
    assert {(r["n_vec"], r["n_dim"]) for r in doc["cost_table"]} == {(1, 4), (2, 2), (4, 1)}
    assert tab.read_text().startswith("Dataset,First Slice (%)")
    capsys.readouterr()


def test_plan_command(built, capsys):
    assert main(["plan", "--index", str(built), "--n-machine", "2", "--mode", "harmony-dimension"]) == 0
    assert "selected plan 1x2" in capsys.readouterr().out
    assert PartitionPlan.from_json((built / "plan.json").read_text()).shape == (1, 2)


def test_missing_index(tmp_path, capsys):
    assert main(["query", "--index", str(tmp_path / "nothing")]) == 2
    assert "no index" in capsys.readouterr().err


@pytest.mark.parametrize(
    "argv",
    [
        ["bench", "--synthetic", "10x4", "--mode", "faiss"],
        ["bench", "--synthetic", "10x4", "--pruning", "maybe"],
        ["bench", "--synthetic", "10x4", "--n-machine", "0"],
        ["bench", "--synthetic", "10x4", "--alpha", "-1"],
        ["bench", "--synthetic", "banana"],
        ["bench", "--synthetic", "10x4", "--Indexing_Parameters", "nlist"],
    ],
)
def test_rejected_values(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2
    assert "error" in capsys.readouterr().err


def test_dim_check(tmp_path, capsys):
    assert main(["build", "--synthetic", "100x8", "--nlist", "4", "--dim", "9", "--out", str(tmp_path)]) == 2
    assert "--dim" in capsys.readouterr().err


def test_help_lists_every_flag():
    text = build_parser()._subparsers._group_actions[0].choices["bench"].format_help()
    for flag in ("--n-machine", "--pruning", "--nlist", "--nprobe", "--alpha", "--mode", "--NMachine",
                 "--Pruning_Configuration", "--Indexing_Parameters", "--Mode"):
        assert flag in text

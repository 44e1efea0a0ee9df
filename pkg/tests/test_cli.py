import json
import subprocess
import sys

import pytest

from vimoe.cli import run


def summary(capsys):
    lines = [l for l in capsys.readouterr().out.splitlines() if l.strip()]
    return json.loads(lines[-1])


def test_count_params_example(capsys):
    assert run(["count", "params", "--preset", "vit-s-14", "--experts", "8",
                "--last-l", "2", "--shared"]) == 0
    s = summary(capsys)
    assert (s["total_M"], s["activated_M"]) == (40.9, 24.4)


def test_count_flops_csv(capsys, tmp_path):
    assert run(["count", "flops", "--preset", "vit-s-14", "--out",
                str(tmp_path / "c.csv")]) == 0
    s = summary(capsys)
    assert abs(s["flops"] / 6.14e9 - 1) < 0.03
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "config_hash,N,L,shared,k,total,activated,flops"


def test_degree_example(capsys):
    assert run(["degree", "--experts", "2", "--topk", "1", "--last-l", "5"]) == 0
    assert summary(capsys)["degree"] == 32


def test_exit_codes(capsys, tmp_path):
    assert run(["count", "params", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert run([]) == 1
    assert run(["degree", "--experts", "2", "--topk", "3", "--last-l", "1"]) == 2
    assert run(["analyze", "load", "--log", str(tmp_path / "none.vimr")]) == 2
    (tmp_path / "junk.vimr").write_bytes(b"garbage")
    assert run(["analyze", "load", "--log", str(tmp_path / "junk.vimr")]) == 2
    assert run(["count", "params", "--preset", "vit-s-14", "--last-l", "13"]) == 1


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    for args in (["--task", "cls", "--classes", "4", "--count", "64", "--seed", "1",
                  "--image-size", "8", "--out", str(d / "tr.vimd")],
                 ["--task", "cls", "--classes", "4", "--count", "32", "--seed", "1",
                  "--image-size", "8", "--split", "test", "--out", str(d / "te.vimd")],
                 ["--task", "seg", "--classes", "3", "--count", "16", "--seed", "1",
                  "--image-size", "8", "--out", str(d / "seg.vimd")]):
        assert run(["data", "gen"] + args) == 0
    common = "image_size=8\npatch_size=4\nembed_dim=8\ndepth=3\nnum_heads=2\n" \
             "epochs=2\nbatch_size=16\n"
    (d / "c.cfg").write_text(common + "num_classes=4\nmoe_last_L=2\nshared_expert=true\n")
    (d / "s.cfg").write_text(common + "num_classes=3\nmoe_last_L=1\ntask=segmentation\n")
    return d


def test_train_twice_identical(workspace, capsys):
    d = workspace
    for out in ("r1", "r2"):
        assert run(["train", "--config", str(d / "c.cfg"), "--data", str(d / "tr.vimd"),
                    "--eval-data", str(d / "te.vimd"), "--seed", "7",
                    "--out", str(d / out)]) == 0
    s = summary(capsys)
    assert s["seed"] == 7 and len(s["routing_logs"]) == 2
    assert set(s["expert_load"]) == {"1", "2"}
    assert (d / "r1/model.vimo").read_bytes() == (d / "r2/model.vimo").read_bytes()
    assert (d / "r1/curves.png").stat().st_size > 0


def test_eval_and_analyze(workspace, capsys):
    d = workspace
    if not (d / "r1/model.vimo").exists():
        run(["train", "--config", str(d / "c.cfg"), "--data", str(d / "tr.vimd"),
             "--out", str(d / "r1")])
    assert run(["eval", "--model", str(d / "r1/model.vimo"), "--data", str(d / "te.vimd"),
                "--out", str(d / "ev")]) == 0
    s = summary(capsys)
    log = s["routing_log"]
    assert 0 <= s["metric"] <= 1
    assert run(["analyze", "heatmap", "--log", log, "--layer", "1", "--out",
                str(d / "an")]) == 0
    assert summary(capsys)["files"][0].endswith("heatmap_l1.csv")
    assert (d / "an/heatmap_l1.png").exists()
    assert run(["analyze", "load", "--log", log, "--out", str(d / "an")]) == 0
    loads = summary(capsys)["load"]
    assert abs(sum(loads["2"]) - 1) < 1e-12
    assert run(["analyze", "recommend", "--log", log, "--out", str(d / "an")]) == 0
    assert "keep" in summary(capsys)
    assert run(["analyze", "degree", "--log", log]) == 0
    s = summary(capsys)
    assert s["empirical_degree"] <= s["routing_degree"] == 16
    assert run(["analyze", "heatmap", "--log", log, "--layer", "3"]) == 2
    assert run(["analyze", "allocmap", "--log", log]) == 2


def test_segmentation_allocmap(workspace, capsys):
    d = workspace
    assert run(["train", "--config", str(d / "s.cfg"), "--data", str(d / "seg.vimd"),
                "--out", str(d / "rs")]) == 0
    log = summary(capsys)["routing_logs"][-1]
    assert run(["analyze", "allocmap", "--log", log, "--image", "2", "--scale", "3",
                "--out", str(d / "as")]) == 0
    ppm = (d / "as/alloc_i2_l1.ppm").read_bytes()
    assert ppm.startswith(b"P6\n6 6\n255\n") and len(ppm) == len(b"P6\n6 6\n255\n") + 108


def test_scan(workspace, capsys):
    d = workspace
    assert run(["scan", "--config", str(d / "c.cfg"), "--data", str(d / "tr.vimd"),
                "--L", "0,1", "--N", "2", "--shared", "1", "--out", str(d / "sc")]) == 0
    s = summary(capsys)
    assert s["cells"] == 2 and s["failed"] == 0
    assert (d / "sc/scan.png").exists()


def test_entry_point():
    out = subprocess.run([sys.executable, "-m", "vimoe.cli", "degree", "--experts", "8",
                          "--last-l", "2"], capture_output=True, text=True, check=True)
    assert json.loads(out.stdout)["degree"] == 64

import csv
import json
import shutil
from pathlib import Path

import pytest

from scenarios import detection_scenario
from tdml.cli import main, read_metrics
from tdml.simulation import Scenario, load_scenario


def write(path, scenario):
    path.write_text(json.dumps(scenario.to_dict()))
    return path


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def honest_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    scenario_file = write(root / "honest.json", Scenario.generate(seed=0, n_pipelines=2, epochs=2))
    assert main(["run", str(scenario_file), "--out", str(root / "out")]) == 0
    return root / "out"


def test_run_writes_every_artifact(honest_dir):
    names = {p.name for p in honest_dir.iterdir()}
    assert {"public_chain.jsonl", "private_chain.jsonl", "metrics.csv", "detections.jsonl",
            "settlement.json", "scenario.json", "verification.json", "blobs"} <= names
    assert json.loads((honest_dir / "verification.json").read_text())["ok"] is True
    assert {int(r["epoch"]) for r in read_metrics(honest_dir / "metrics.csv")} == {1, 2}


def test_detection_exits_3(tmp_path):
    sc, _ = detection_scenario(0, "zero_gradient")
    assert main(["run", str(write(tmp_path / "z.json", sc)), "--out", str(tmp_path / "o")]) == 3
    assert (tmp_path / "o" / "detections.jsonl").read_text().strip()


def test_runs_are_byte_identical(tmp_path):
    scenario_file = write(tmp_path / "s.json", Scenario.generate(seed=7, n_pipelines=2, epochs=1))
    for out in ("a", "b"):
        main(["run", str(scenario_file), "--out", str(tmp_path / out)])
    assert tree(tmp_path / "a") == tree(tmp_path / "b")


def test_seed_override_changes_the_run(tmp_path):
    scenario_file = write(tmp_path / "s.json", Scenario.generate(seed=7, n_pipelines=2, epochs=1))
    main(["run", str(scenario_file), "--out", str(tmp_path / "a")])
    main(["run", str(scenario_file), "--seed", "8", "--out", str(tmp_path / "b")])
    assert json.loads((tmp_path / "b" / "scenario.json").read_text())["seed"] == 8
    assert (tmp_path / "a" / "private_chain.jsonl").read_bytes() != (tmp_path / "b" / "private_chain.jsonl").read_bytes()


def test_config_error_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("mode: cluster\n")
    assert main(["run", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "config error" in capsys.readouterr().err


def test_verify_codes(honest_dir, tmp_path):
    assert main(["verify", str(honest_dir)]) == 0
    copy = tmp_path / "copy"
    shutil.copytree(honest_dir, copy)
    path = copy / "private_chain.jsonl"
    lines = path.read_text().splitlines(keepends=True)
    lines[2], lines[3] = lines[3], lines[2]
    path.write_text("".join(lines))
    assert main(["verify", str(copy)]) == 1
    (tmp_path / "empty").mkdir()
    assert main(["verify", str(tmp_path / "empty")]) == 2


def rows(path, data):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["pipeline", "epoch", "global_acc"])
        w.writeheader()
        w.writerows(data)
    return str(path)


def test_compare_self_is_zero(honest_dir, capsys):
    m = str(honest_dir / "metrics.csv")
    assert main(["compare", m, m]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert all(line.split("\t")[3] in ("+0.0000", "-0.0000") for line in lines[1:])


def test_compare_gap_matches_hand_difference(tmp_path, capsys):
    a = rows(tmp_path / "a.csv", [{"pipeline": 0, "epoch": 1, "global_acc": 0.5}, {"pipeline": 0, "epoch": 2, "global_acc": 0.8}])
    b = rows(tmp_path / "b.csv", [{"pipeline": 0, "epoch": 1, "global_acc": 0.4}, {"pipeline": 0, "epoch": 2, "global_acc": 0.75}])
    assert main(["compare", a, b]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[1].split("\t") == ["1", "0.5000", "0.4000", "+0.1000"]
    assert out[-1].split("\t") == ["final", "0.8000", "0.7500", "+0.0500"]


def test_compare_schema_mismatch(tmp_path):
    a = rows(tmp_path / "a.csv", [{"pipeline": 0, "epoch": 1, "global_acc": 0.5}])
    b = rows(tmp_path / "b.csv", [{"pipeline": 0, "epoch": 2, "global_acc": 0.5}])
    assert main(["compare", a, b]) == 2
    c = tmp_path / "c.csv"
    c.write_text("epoch,loss\n1,0.3\n")
    assert main(["compare", a, str(c)]) == 2


def test_readme_example_scenario_loads(tmp_path):
    text = (Path(__file__).parents[1] / "README.md").read_text()
    block = text.split("```yaml\n", 1)[1].split("```", 1)[0]
    (tmp_path / "s.yaml").write_text(block)
    sc = load_scenario(tmp_path / "s.yaml")
    assert sc.training.n_pipelines == 4 and len(sc.trainers) == 10 and len(sc.attacks) == 2
    assert sc.lies[0].validator == sc.servers[0].uuid

import io
import json

import pytest

from agentmod.cli import main


@pytest.fixture(scope="module")
def demo(tmp_path_factory):
    out = tmp_path_factory.mktemp("demo")
    assert main(["demo", str(out), "--n", "8"]) == 0
    return out


def test_version_and_usage(capsys):
    assert main(["--version"]) == 0
    assert "results schema 1" in capsys.readouterr().out
    assert main([]) == 2


def test_demo_pipeline(demo, tmp_path, capsys):
    cfg = str(demo / "config.toml")
    manifest = str(demo / "manifest.jsonl")
    assert main(["datagen", "--config", cfg, "--manifest", manifest, "--out", str(tmp_path / "data")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["n_sft"] + summary["n_grpo"] == 8

    for mode, name in (("enforced:all", "all"), ("selective", "sel")):
        code = main(["moderate", "--config", cfg, "--manifest", manifest, "--mode", mode, "--out", str(tmp_path / f"{name}.jsonl"), "--parallelism", "3"])
        assert code == 0
    capsys.readouterr()
    code = main(
        [
            "eval", "--manifest", manifest,
            "--results", str(tmp_path / "all.jsonl"), "--label", "w/ All Tools",
            "--results", str(tmp_path / "sel.jsonl"), "--label", "Select Tool",
            "--out", str(tmp_path / "report.json"),
        ]
    )
    assert code == 0
    table = capsys.readouterr().out
    assert "w/ All Tools" in table and "Detector Ratio" in table
    rows = [r.split("\t") for r in (tmp_path / "report.tsv").read_text().splitlines()]
    assert rows[1][3:] == ["1.000", "1.000", "1.000"]
    for ext in ("json", "txt", "tsv", "png"):
        assert (tmp_path / f"report.{ext}").exists()


def test_moderate_fail_threshold(demo, tmp_path):
    manifest = str(demo / "manifest.jsonl")
    empty = tmp_path / "empty.json"
    empty.write_text("{}")
    args = ["moderate", "--manifest", manifest, "--backend", f"fixture:{empty}", "--tools", f"fixture:{demo / 'tools.json'}", "--out", str(tmp_path / "r.jsonl")]
    assert main(args) == 0
    assert main([*args, "--fail-threshold", "0.5"]) == 1


def test_fatal_errors(demo, tmp_path):
    assert main(["moderate", "--manifest", str(tmp_path / "absent.jsonl"), "--out", str(tmp_path / "r.jsonl")]) == 2
    assert main(["moderate", "--manifest", str(demo / "manifest.jsonl"), "--out", str(tmp_path / "r.jsonl")]) == 2
    assert main(["moderate", "--manifest", str(demo / "manifest.jsonl"), "--mode", "bogus", "--backend", "fixture:" + str(demo / "student.json"), "--out", str(tmp_path / "r.jsonl")]) == 2


def test_train_config(tmp_path, capsys):
    assert main(["train-config", "--stage", "lora", "--out", str(tmp_path / "lora.json"), "--seed", "5"]) == 0
    doc = json.loads((tmp_path / "lora.json").read_text())
    assert doc["lora"]["r"] == 16 and doc["metadata"]["seed"] == 5


def test_score_reward_stdin(monkeypatch, capsys):
    lines = [
        {"output": "<think>x</think><answer>hateful</answer>", "gold": "hateful", "label_space_ref": "hateful_memes"},
        {"output": "<think>x</think><answer>hateful</answer>", "gold": "not_hateful", "label_space_ref": "hateful_memes"},
    ]
    monkeypatch.setattr("sys.stdin", io.StringIO("".join(json.dumps(x) + "\n" for x in lines)))
    assert main(["score-reward", "--weights", "2", "1"]) == 0
    out = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    assert [o["combined"] for o in out] == [3.0, 1.0]

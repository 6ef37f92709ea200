"""CLI: JSON on stdout, one JSON error line on stderr, exit codes"""

import json

import numpy as np
import pytest

from cli import main
from search_space import genome_to_json

SMOKE_SEARCH = ["--smoke", "--set", "generator_search.steps=12", "--set", "controller.hidden=16"]


def last_json_line(text):
    return json.loads(text.strip().splitlines()[-1])


@pytest.fixture
def searched_run(tmp_path, capsys):
    run_dir = tmp_path / "run"
    assert main(["search-gen", "--run-dir", str(run_dir), *SMOKE_SEARCH]) == 0
    capsys.readouterr()
    return run_dir


class TestCost:
    def test_skeleton(self, tmp_path, capsys, skeleton_genome):
        path = tmp_path / "skeleton.json"
        path.write_text(genome_to_json(skeleton_genome))
        assert main(["cost", "--genome", str(path)]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["mult_adds"] == 3_151_872_000
        assert report["params"] == 12_643

    def test_conv3_chain_at_scale_two(self, tmp_path, capsys, conv3_chain):
        path = tmp_path / "chain.json"
        path.write_text(genome_to_json(conv3_chain))
        assert main(["cost", "--genome", str(path), "--scale", "2"]) == 0
        assert json.loads(capsys.readouterr().out)["mult_adds"] == 8_460_288_000

    def test_malformed_genome(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text('{"schema": 1}')
        assert main(["cost", "--genome", str(path)]) == 2
        assert last_json_line(capsys.readouterr().err)["error"] == "ParseError"

    def test_missing_genome_file(self, tmp_path, capsys):
        assert main(["cost", "--genome", str(tmp_path / "absent.json")]) == 4
        assert last_json_line(capsys.readouterr().err)["error"] == "CheckpointError"


class TestEval:
    def test_identical_images(self, tmp_path, capsys, rng):
        image = rng.random((3, 16, 16)).astype(np.float32)
        np.save(tmp_path / "a.npy", image)
        np.save(tmp_path / "b.npy", image)
        assert main(["eval", "--pred", str(tmp_path / "a.npy"), "--hr", str(tmp_path / "b.npy")]) == 0
        result = json.loads(capsys.readouterr().out)
        assert result["psnr"] == 100.0
        assert result["psnr_y"] == 100.0
        assert result["feat_dist"] == 0.0

    def test_pred_without_hr(self, tmp_path, capsys):
        assert main(["eval", "--pred", str(tmp_path / "a.npy")]) == 2
        assert last_json_line(capsys.readouterr().err)["error"] == "ConfigError"


class TestReplay:
    def test_clean_log_verifies(self, searched_run, capsys):
        assert main(["replay", "--run-dir", str(searched_run), "--kind", "generator"]) == 0
        out = capsys.readouterr().out.strip()
        assert out.startswith("OK, ")
        assert out.endswith(" records verified")
        assert int(out.split()[1]) >= 12

    def test_csv_export(self, searched_run, tmp_path, capsys):
        out = tmp_path / "log.csv"
        assert main(["replay", "--run-dir", str(searched_run), "--kind", "generator", "--csv", str(out)]) == 0
        assert out.read_text().startswith("step,decisions,gate")

    def test_tampered_log_names_the_step(self, searched_run, capsys):
        log_path = searched_run / "generator" / "search_log.jsonl"
        lines = log_path.read_text().splitlines()
        index = next(i for i, line in enumerate(lines) if json.loads(line)["gate"] == "pass")
        record = json.loads(lines[index])
        record["metric"] += 1.0
        lines[index] = json.dumps(record)
        log_path.write_text("\n".join(lines) + "\n")

        assert main(["replay", "--run-dir", str(searched_run), "--kind", "generator"]) == 1
        error = last_json_line(capsys.readouterr().err)
        assert error["error"] == "ReplayMismatch"
        assert error["step"] == record["step"]

    def test_empty_run_dir(self, tmp_path, capsys):
        assert main(["replay", "--run-dir", str(tmp_path), "--smoke"]) == 4


class TestSearchCommands:
    def test_search_is_idempotent(self, searched_run, capsys):
        assert main(["search-gen", "--run-dir", str(searched_run), *SMOKE_SEARCH]) == 0
        result = json.loads(capsys.readouterr().out)
        assert result["completed"] is True
        assert result["genome"]["space"] == "generator"

    def test_sample_from_the_checkpoint(self, searched_run, capsys):
        assert main(["sample", "--run-dir", str(searched_run), "--count", "3"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 3
        assert all(len(json.loads(line)["decisions"]) == 20 for line in lines)

    def test_stats(self, searched_run, capsys):
        assert main(["stats", "--run-dir", str(searched_run)]) == 0
        stats = json.loads(capsys.readouterr().out)
        assert stats["logs"]["generator"]["evaluated"] == 12
        assert "generator_search" in stats["phases"]

    def test_other_config_is_refused(self, searched_run, capsys):
        code = main(["search-gen", "--run-dir", str(searched_run), "--set", "seed=5"])
        assert code == 2
        assert "different config" in last_json_line(capsys.readouterr().err)["message"]

    def test_no_command(self, capsys):
        assert main([]) == 2

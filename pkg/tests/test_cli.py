import json

import pytest

from tablelink.cli import emit_report, run_command
from tablelink.config import PROFILES, ConfigError, ProjectConfig, apply_profile, load_config
from tablelink.linker import TUPLE_TO_MENTIONS, EvalReport
from tablelink.synthetic import write_synthetic_corpus


@pytest.fixture
def project(tmp_path):
    corpus_path = tmp_path / "corpus.xml"
    write_synthetic_corpus(corpus_path, entities=12, mentions_per_entity=4, seed=3)
    config = {
        "paths": {"corpus": str(corpus_path), "workdir": str(tmp_path / "work")},
        "encoder": {"dim": 64, "seed": 0},
        "network": {"hidden_r": [32], "hidden_t": [], "joint_dim": 16},
        "training": {"margin": 1.0, "lr": 1e-3, "batch_budget": 60, "batch_size": 16},
        "index": {"t": 4, "leaf_capacity": 8},
    }
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config))
    return config_path, tmp_path / "work"


class TestCommands:
    def test_full_command_chain(self, project, capsys):
        config_path, workdir = project
        for command in (
            "ingest", "stats", "fit", "train",
            "embed-tuples", "embed-mentions", "build-index", "link", "eval",
        ):
            assert run_command([command, "--config", str(config_path)]) == 0, command
        for name in (
            "corpus.json", "splits.json", "vectorizer_Landmark.json",
            "model_Landmark.ckpt", "tuples_Landmark.vec", "mentions_Landmark.vec",
            "tuples_Landmark.idx", "mentions_Landmark.idx", "links_Landmark.tsv",
            "report.json", "report.txt",
        ):
            assert (workdir / name).exists(), name
        out = capsys.readouterr().out
        assert "instances" in out  # stats table printed

    def test_stats_counts(self, project, capsys):
        config_path, _ = project
        assert run_command(["ingest", "--config", str(config_path)]) == 0
        assert run_command(["stats", "--config", str(config_path)]) == 0
        out = capsys.readouterr().out
        line = next(l for l in out.splitlines() if l.startswith("Landmark"))
        fields = line.split()
        assert fields[1:4] == ["12", "12", "48"]

    def test_link_before_index_names_producer(self, project, capsys):
        config_path, _ = project
        for command in ("ingest", "fit", "train"):
            assert run_command([command, "--config", str(config_path)]) == 0
        status = run_command(["link", "--config", str(config_path)])
        assert status == 1
        assert "build-index" in capsys.readouterr().err

    def test_eval_before_train_names_producer(self, project, capsys):
        config_path, _ = project
        assert run_command(["ingest", "--config", str(config_path)]) == 0
        assert run_command(["fit", "--config", str(config_path)]) == 0
        assert run_command(["eval", "--config", str(config_path)]) == 1
        assert "train" in capsys.readouterr().err

    def test_pipeline_rerun_identical(self, project):
        config_path, workdir = project
        assert run_command(["pipeline", "--config", str(config_path)]) == 0
        first = {
            name: (workdir / name).read_bytes()
            for name in ("report.json", "splits.json", "model_Landmark.ckpt",
                         "tuples_Landmark.vec", "mentions_Landmark.idx")
        }
        assert run_command(["pipeline", "--config", str(config_path)]) == 0
        for name, blob in first.items():
            assert (workdir / name).read_bytes() == blob, name

    def test_exact_strategy_link(self, project):
        config_path, workdir = project
        assert run_command(["ingest", "--config", str(config_path)]) == 0
        status = run_command(
            ["link", "--config", str(config_path), "--set", "strategy=exact"]
        )
        assert status == 0
        lines = (workdir / "links_Landmark.tsv").read_text().splitlines()
        assert len(lines) > 1
        assert all(l.split("\t")[4] == "exact" for l in lines[1:])
        assert all(l.split("\t")[3] == "1" for l in lines[1:])  # sentinel scores tie


class TestErrors:
    def test_unknown_flag_exits_one(self, project, capsys):
        config_path, _ = project
        assert run_command(["ingest", "--config", str(config_path), "--bogus"]) == 1
        assert "error" in capsys.readouterr().err

    def test_unknown_command_exits_one(self, project):
        config_path, _ = project
        assert run_command(["frobnicate", "--config", str(config_path)]) == 1

    def test_missing_command_exits_one(self):
        assert run_command([]) == 1

    def test_missing_corpus_path_exits_one(self, project, capsys):
        config_path, _ = project
        status = run_command(
            ["ingest", "--config", str(config_path), "--set", "paths.corpus=/no/such.xml"]
        )
        assert status == 1
        assert "does not exist" in capsys.readouterr().err

    def test_config_validation_failure_exits_one(self, project, capsys):
        config_path, _ = project
        status = run_command(
            ["ingest", "--config", str(config_path), "--set", "training.lr=-1"]
        )
        assert status == 1
        assert "training.lr" in capsys.readouterr().err

    def test_unknown_config_key_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"paths": {"corpus": "x", "typo_key": "y"}}))
        with pytest.raises(ConfigError, match="typo_key"):
            load_config(path)

    def test_lock_blocks_concurrent_commands(self, project, capsys):
        config_path, workdir = project
        assert run_command(["ingest", "--config", str(config_path)]) == 0
        (workdir / ".lock").write_text("12345")
        assert run_command(["stats", "--config", str(config_path)]) == 2
        assert "locked" in capsys.readouterr().err

    def test_corrupt_artifact_fails_loudly(self, project, capsys):
        config_path, workdir = project
        assert run_command(["ingest", "--config", str(config_path)]) == 0
        blob = (workdir / "corpus.json").read_text().replace(
            '"format_version": 1', '"format_version": 7'
        )
        (workdir / "corpus.json").write_text(blob)
        assert run_command(["stats", "--config", str(config_path)]) == 2
        assert "version" in capsys.readouterr().err


class TestProfiles:
    def test_paper_profile_pins_hyperparameters(self):
        config = apply_profile(ProjectConfig(), "paper")
        assert config.training.margin == 0.001
        assert config.training.keep_prob == 0.75
        assert config.training.lr == 1e-5
        assert config.training.decay == 0.9
        assert config.training.decay_every == 1000
        assert config.index.t == 200
        assert config.index.n == 10

    def test_unknown_profile_rejected(self):
        with pytest.raises(ConfigError, match="unknown profile"):
            apply_profile(ProjectConfig(), "galactic")

    def test_profiles_registry(self):
        assert set(PROFILES) == {"desk", "paper"}


def one_category_report(value=1.0):
    report = EvalReport(ks=(1, 5, 10))
    for split in ("test", "train", "unseen"):
        hits = {k: int(value * 4) for k in (1, 5, 10)}
        report.add_cell(TUPLE_TO_MENTIONS, split, "Building", hits, 4)
    report.finalize_overall()
    return report


class TestEmitReport:
    def test_single_row_nine_cells(self):
        table = emit_report(one_category_report(), "table").decode()
        lines = [l for l in table.splitlines() if l.strip()]
        assert len(lines) == 2
        cells = lines[1].split()
        assert cells[0] == "Building"
        assert cells[1:] == ["1.00"] * 9

    def test_json_roundtrip(self):
        report = one_category_report(0.5)
        blob = emit_report(report, "json")
        again = EvalReport.from_dict(json.loads(blob.decode()))
        assert again.to_dict() == report.to_dict()

    def test_empty_report_header_only(self):
        report = EvalReport(ks=(1, 5, 10))
        table = emit_report(report, "table").decode()
        lines = [l for l in table.splitlines() if l.strip()]
        assert len(lines) == 1
        assert lines[0].startswith("category")
        blob = json.loads(emit_report(report, "json").decode())
        assert blob["cells"] == {}

    def test_deterministic_bytes(self):
        report = one_category_report(0.75)
        assert emit_report(report, "json") == emit_report(report, "json")
        assert emit_report(report, "table") == emit_report(report, "table")

"""Tests for the click command line interface and its exit-code contract."""
import json
import sys
from pathlib import Path

import pytest
from click.testing import CliRunner

sys.path.insert(0, str(Path(__file__).parent.parent))
import artifact_storage
import mixsim
from avse_cli import cli
from errors import (AlreadyCropped, CheckpointError, ConfigError, DecouplingViolation, OrderingViolation, StateError,
                    StorageError, exit_code_for)

from tests.conftest import TINY_CORPUS, TINY_MODEL, TINY_SCHEDULE, ordering_report


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config_path = root / "tiny.json"
    config_path.write_text(json.dumps({
        "corpus": TINY_CORPUS,
        "simulate": {"seed": 11, "pairs": {"train": 4, "dev": 2, "test": 4}},
        "model": TINY_MODEL,
        "train": {**TINY_SCHEDULE, "max_epochs": 1},
    }))
    return root, config_path


def run(workspace, *args):
    root, config_path = workspace
    return CliRunner().invoke(cli, ["--config", str(config_path), "--log-file", str(root / "cli.log"), *args], obj={})


@pytest.fixture(scope="module")
def corpus(workspace):
    out = workspace[0] / "corpus"
    result = run(workspace, "corpus", "--out", str(out))
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture(scope="module")
def descriptors(workspace, corpus):
    paths = {}
    for split in ("train", "dev", "test"):
        path = workspace[0] / "sets" / f"dsav_{split}.jsonl"
        result = run(workspace, "simulate", "--manifest", str(corpus), "--variant", "dsav", "--split", split,
                     "--out", str(path))
        assert result.exit_code == 0, result.output
        paths[split] = path
    return paths


@pytest.fixture(scope="module")
def baseline_ckpt(workspace, corpus, descriptors):
    path = workspace[0] / "ckpt" / "baseline.avt"
    result = run(workspace, "train", "--variant", "baseline", "--manifest", str(corpus),
                 "--train-set", str(descriptors["train"]), "--dev-set", str(descriptors["dev"]), "--out", str(path))
    assert result.exit_code == 0, result.output
    return path


class TestCorpusAndSimulate:
    def test_corpus_files(self, corpus):
        assert (corpus / "manifest.jsonl").exists()
        assert (corpus / "corpus.json").exists()

    def test_descriptor(self, descriptors):
        dataset = mixsim.load_descriptor(descriptors["test"])
        assert len(dataset) == 4
        assert dataset.variant == "dsav"

    def test_pairs_override_and_materialize(self, workspace, corpus):
        out = workspace[0] / "sets" / "ssav_dev.jsonl"
        wav_dir = workspace[0] / "wav"
        result = run(workspace, "simulate", "--manifest", str(corpus), "--variant", "ssav", "--split", "dev",
                     "--out", str(out), "--pairs", "2", "--materialize", str(wav_dir))
        assert result.exit_code == 0, result.output
        assert len(mixsim.load_descriptor(out)) == 2
        assert (wav_dir / "ssav" / "dev" / "00001_target.wav").exists()

    def test_cross_speaker_shuffle(self, workspace, corpus):
        out = workspace[0] / "sets" / "dssv_cross.jsonl"
        result = run(workspace, "simulate", "--manifest", str(corpus), "--variant", "dssv", "--split", "test",
                     "--out", str(out), "--cross-speaker-shuffle")
        assert result.exit_code == 0, result.output
        dataset = mixsim.load_descriptor(out)
        assert dataset.cross_speaker_visual
        assert all(ex.visual_utt != ex.target_utt for ex in dataset)

    def test_cross_speaker_shuffle_needs_dssv(self, workspace, corpus):
        result = run(workspace, "simulate", "--manifest", str(corpus), "--variant", "dsav", "--split", "test",
                     "--out", str(workspace[0] / "x.jsonl"), "--cross-speaker-shuffle")
        assert result.exit_code == 2
        assert "ConfigError" in result.output

    def test_missing_config(self, tmp_path, corpus):
        result = CliRunner().invoke(cli, ["--config", str(tmp_path / "absent.json"), "--log-file",
                                          str(tmp_path / "cli.log"), "corpus", "--out", str(tmp_path / "c")], obj={})
        assert result.exit_code == 2


class TestTrain:
    def test_baseline_checkpoint(self, baseline_ckpt):
        header = artifact_storage.read_json(artifact_storage.header_path(baseline_ckpt))
        assert header["variant"] == "baseline"
        assert header["procedure"] == "baseline"
        assert baseline_ckpt.with_suffix(".trainlog.jsonl").exists()

    def test_spk_needs_step(self, workspace, corpus):
        result = run(workspace, "train", "--variant", "spk", "--manifest", str(corpus),
                     "--out", str(workspace[0] / "spk.avt"))
        assert result.exit_code == 2

    def test_spk_step2_needs_step1(self, workspace, corpus, descriptors):
        result = run(workspace, "train", "--variant", "spk", "--step", "2", "--manifest", str(corpus),
                     "--train-set", str(descriptors["train"]), "--dev-set", str(descriptors["dev"]),
                     "--out", str(workspace[0] / "spk.avt"))
        assert result.exit_code == 3
        assert "StateError" in result.output

    def test_spk_step2_rejects_other_stage(self, workspace, corpus, descriptors, baseline_ckpt):
        result = run(workspace, "train", "--variant", "spk", "--step", "2", "--manifest", str(corpus),
                     "--init-ckpt", str(baseline_ckpt), "--train-set", str(descriptors["train"]),
                     "--dev-set", str(descriptors["dev"]), "--out", str(workspace[0] / "spk.avt"))
        assert result.exit_code == 3

    def test_davse_needs_both_checkpoints(self, workspace, corpus, descriptors, baseline_ckpt):
        result = run(workspace, "train", "--variant", "davse", "--manifest", str(corpus),
                     "--train-set", str(descriptors["train"]), "--dev-set", str(descriptors["dev"]),
                     "--spk-ckpt", str(baseline_ckpt), "--out", str(workspace[0] / "davse.avt"))
        assert result.exit_code == 3
        assert "CheckpointError" in result.output

    def test_missing_descriptors(self, workspace, corpus):
        result = run(workspace, "train", "--variant", "sync", "--manifest", str(corpus),
                     "--out", str(workspace[0] / "sync.avt"))
        assert result.exit_code == 2


class TestEvaluateAndReport:
    def test_evaluate_and_merge(self, workspace, corpus, descriptors, baseline_ckpt):
        report_path = workspace[0] / "reports" / "dsav.json"
        result = run(workspace, "evaluate", "--manifest", str(corpus), "--ckpt", str(baseline_ckpt),
                     "--dataset", str(descriptors["test"]), "--report", str(report_path))
        assert result.exit_code == 0, result.output
        assert "D-S A-V" in result.output
        report = artifact_storage.read_json(report_path)
        assert [c["model"] for c in report["cells"]] == ["mixture", "baseline-face"]
        assert report["config_digest"]

        merged_path = workspace[0] / "reports" / "merged.json"
        result = run(workspace, "report", str(report_path), str(report_path), "--out", str(merged_path))
        assert result.exit_code == 0, result.output
        assert len(artifact_storage.read_json(merged_path)["cells"]) == 2

    def test_nothing_to_evaluate(self, workspace, corpus, descriptors):
        result = run(workspace, "evaluate", "--manifest", str(corpus), "--no-mixture-row",
                     "--dataset", str(descriptors["test"]), "--report", str(workspace[0] / "r.json"))
        assert result.exit_code == 2

    def test_missing_checkpoint(self, workspace, corpus, descriptors):
        result = run(workspace, "evaluate", "--manifest", str(corpus), "--ckpt", str(workspace[0] / "absent.avt"),
                     "--dataset", str(descriptors["test"]), "--report", str(workspace[0] / "r.json"))
        assert result.exit_code == 3

    def test_evaluate_from_sets_dir(self, workspace, corpus, descriptors):
        root, config_path = workspace
        dsav_only = root / "dsav_only.json"
        dsav_only.write_text(json.dumps({**json.loads(config_path.read_text()),
                                         "eval": {"datasets": ["dsav"], "split": "test"}}))
        report_path = root / "reports" / "sets_dir.json"
        result = CliRunner().invoke(cli, ["--config", str(dsav_only), "--log-file", str(root / "cli.log"), "evaluate",
                                          "--manifest", str(corpus), "--sets-dir", str(descriptors["test"].parent),
                                          "--report", str(report_path)], obj={})
        assert result.exit_code == 0, result.output
        cells = artifact_storage.read_json(report_path)["cells"]
        assert [(c["model"], c["dataset_variant"], c["split"]) for c in cells] == [("mixture", "dsav", "test")]

    def test_sets_dir_missing_descriptor(self, workspace, corpus, descriptors):
        result = run(workspace, "evaluate", "--manifest", str(corpus), "--sets-dir", str(descriptors["test"].parent),
                     "--report", str(workspace[0] / "r.json"))
        assert result.exit_code == 2
        assert "dssv_test.jsonl" in result.output

    def test_needs_dataset_or_sets_dir(self, workspace, corpus):
        result = run(workspace, "evaluate", "--manifest", str(corpus), "--report", str(workspace[0] / "r.json"))
        assert result.exit_code == 2

    def test_report_check_orderings(self, workspace):
        root = workspace[0] / "orderings"
        paths = [str(ordering_report(davse_dsav=7.0 - i).write(root / f"seed{i}.json")[0]) for i in range(3)]
        summary = root / "davse_summary.json"
        artifact_storage.write_json(summary, {"variant": "davse", "silhouette_frames": 0.3})
        baseline = root / "baseline_summary.json"
        artifact_storage.write_json(baseline, {"variant": "baseline", "silhouette_frames": 0.1})
        result = run(workspace, "report", *paths, "--check-orderings",
                     "--embed-summary", str(summary), "--embed-summary", str(baseline))
        assert result.exit_code == 0, result.output
        assert len([line for line in result.output.splitlines() if line.startswith("PASS")]) == 6

    def test_report_ordering_violation(self, workspace):
        root = workspace[0] / "orderings_bad"
        paths = [str(ordering_report(sync_dssv=1.0).write(root / f"seed{i}.json")[0]) for i in range(3)]
        result = run(workspace, "report", *paths, "--check-orderings")
        assert result.exit_code == 1
        assert "FAIL" in result.output
        assert "OrderingViolation" in result.output

    def test_embed(self, workspace, corpus, baseline_ckpt):
        out = workspace[0] / "embed"
        result = run(workspace, "embed", "--manifest", str(corpus), "--ckpt", str(baseline_ckpt),
                     "--out", str(out), "--n-speakers", "2")
        assert result.exit_code == 0, result.output
        assert (out / "embeddings.svg").exists()
        assert (out / "embeddings.avt").exists()
        summary = artifact_storage.read_json(out / "embeddings_summary.json")
        assert summary["n_speakers"] == 2


class TestExitCodes:
    @pytest.mark.parametrize("exc,code", [
        (ConfigError("x"), 2),
        (StateError("x"), 3),
        (CheckpointError("x"), 3),
        (StorageError("x"), 4),
        (FileNotFoundError("x"), 4),
        (AlreadyCropped("x"), 1),
        (DecouplingViolation("x"), 1),
        (OrderingViolation("x"), 1),
        (ValueError("x"), 1),
    ])
    def test_mapping(self, exc, code):
        assert exit_code_for(exc) == code

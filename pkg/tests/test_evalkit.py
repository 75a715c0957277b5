"""Tests for metrics aggregation, estimators, reports and the PESQ adapter."""
import stat
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))
import avcorpus
import config
import evalkit
import mixsim
import sepnet
import trainkit
from avcorpus import Waveform
from errors import ConfigError, PesqUnavailable, ShapeError, StorageError

from tests.conftest import TINY_CORPUS, ordering_report, tiny_model_config, tiny_schedule


def script(tmp_path, name, body):
    path = tmp_path / name
    path.write_text("#!/bin/sh\n" + body + "\n")
    path.chmod(path.stat().st_mode | stat.S_IEXEC)
    return path


@pytest.fixture(scope="module")
def mixture_report(datasets, store):
    return evalkit.evaluate(evalkit.MixtureEstimator(), datasets[("dsav", "test")], store)


class TestSiSnri:
    def test_perfect_estimate(self):
        rng = np.random.default_rng(0)
        target = Waveform(rng.standard_normal(800))
        mixture = Waveform(target.samples + rng.standard_normal(800))
        expected = trainkit.si_snr(target, target)[0] - trainkit.si_snr(target, mixture)[0]
        assert evalkit.si_snri(mixture, target, target) == pytest.approx(expected)

    def test_mixture_gives_zero(self):
        rng = np.random.default_rng(1)
        target = Waveform(rng.standard_normal(800))
        mixture = Waveform(target.samples + rng.standard_normal(800))
        assert evalkit.si_snri(mixture, mixture, target) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            evalkit.si_snri(Waveform(np.ones(4)), Waveform(np.ones(4)), Waveform(np.ones(5)))


class TestEvaluate:
    def test_mixture_cell(self, mixture_report, datasets):
        cell = mixture_report.cell("mixture", "dsav")
        assert cell["count"] == len(datasets[("dsav", "test")])
        assert cell["si_snri_mean"] == 0.0
        assert cell["visual_field"] is None
        assert cell["strata"]["diff"]["count"] + cell["strata"]["same"]["count"] == cell["count"]
        assert mixture_report.seeds == {"dsav": 11}

    def test_strata_follow_descriptor(self, mixture_report, datasets):
        rows = datasets[("dsav", "test")]
        cell = mixture_report.cell("mixture", "dsav")
        assert cell["strata"]["diff"]["count"] == sum(1 for ex in rows if ex.group_pair == "diff")

    def test_threads_give_same_numbers(self, mixture_report, datasets, store):
        threaded = evalkit.evaluate(evalkit.MixtureEstimator(), datasets[("dsav", "test")], store, workers=3)
        assert threaded.cells == mixture_report.cells

    def test_model_estimator(self, datasets, store):
        estimator = evalkit.ModelEstimator(sepnet.build_model(tiny_model_config("sync"), seed=0))
        report = evalkit.evaluate(estimator, datasets[("ssav", "dev")], store, visual_field="face")
        cell = report.cell("sync-face", "ssav", "face")
        assert cell["model_variant"] == "sync"
        assert cell["count"] == len(datasets[("ssav", "dev")])
        assert np.isfinite(cell["si_snr_mean"])
        assert cell["strata"]["diff"]["count"] == 0
        assert cell["strata"]["diff"]["si_snr_mean"] is None

    def test_field_mismatch(self, datasets, store):
        estimator = evalkit.ModelEstimator(sepnet.build_model(tiny_model_config("sync"), seed=0))
        with pytest.raises(ConfigError):
            evalkit.evaluate(estimator, datasets[("ssav", "dev")], store, visual_field="mouth")

    def test_incompatible_checkpoint(self, datasets, store):
        estimator = evalkit.ModelEstimator(sepnet.build_model(tiny_model_config("sync", resolution=16), seed=0))
        with pytest.raises(ConfigError, match="resolution"):
            evalkit.evaluate(estimator, datasets[("ssav", "dev")], store)

    def test_from_checkpoint(self, tmp_path):
        path = sepnet.save_checkpoint(sepnet.build_model(tiny_model_config("baseline", visual_field="mouth")),
                                      tmp_path / "b.avt")
        estimator = evalkit.ModelEstimator.from_checkpoint(path)
        assert estimator.name == "baseline-mouth"
        assert estimator.visual_field == "mouth"

    def test_pesq_failures_are_counted(self, datasets, store, tmp_path):
        failing = script(tmp_path, "pesq_fail", "exit 1")
        report = evalkit.evaluate(evalkit.MixtureEstimator(), datasets[("ssav", "dev")], store,
                                  pesq_cmd=f"sh {failing}")
        cell = report.cells[0]
        assert cell["pesq_mean"] is None
        assert cell["pesq_failures"] == cell["count"]


class TestPesqAdapter:
    def test_not_configured(self, monkeypatch):
        monkeypatch.setattr(config, "PESQ_CMD", None)
        assert evalkit.pesq_adapter(Waveform(np.ones(80)), Waveform(np.ones(80))) is None

    def test_parses_last_number(self, tmp_path):
        fake = script(tmp_path, "pesq_ok", 'echo "P.862 Prediction (Raw MOS, MOS-LQO):  = 2.10 2.74"')
        assert evalkit.pesq_adapter(Waveform(np.ones(80)), Waveform(np.ones(80)), f"sh {fake}") == 2.74

    def test_nonzero_exit(self, tmp_path):
        fake = script(tmp_path, "pesq_fail", "exit 1")
        with pytest.raises(PesqUnavailable):
            evalkit.pesq_adapter(Waveform(np.ones(80)), Waveform(np.ones(80)), f"sh {fake}")

    def test_no_score(self, tmp_path):
        fake = script(tmp_path, "pesq_quiet", 'echo "done"')
        with pytest.raises(PesqUnavailable):
            evalkit.pesq_adapter(Waveform(np.ones(80)), Waveform(np.ones(80)), f"sh {fake}")

    def test_missing_command(self, tmp_path):
        with pytest.raises(PesqUnavailable):
            evalkit.pesq_adapter(Waveform(np.ones(80)), Waveform(np.ones(80)), str(tmp_path / "no-such-pesq"))


class TestReport:
    def test_write_and_read(self, mixture_report, tmp_path):
        json_path, table_path = mixture_report.write(tmp_path / "report.json")
        assert table_path.name == "report.txt"
        assert "D-S A-V Diff" in table_path.read_text()
        assert evalkit.EvalReport.read(json_path).cells == mixture_report.cells

    def test_table_rows(self, mixture_report):
        table = mixture_report.table()
        assert table.startswith("SI-SNR (dB)")
        assert "SI-SNRi (dB)" in table
        assert "mixture" in table
        assert "PESQ" not in table

    def test_merge_replaces_same_cell(self, mixture_report):
        newer = evalkit.EvalReport.from_dict(mixture_report.to_dict())
        newer.cells = [{**newer.cells[0], "count": 999}]
        merged = evalkit.merge_reports([mixture_report, newer])
        assert len(merged.cells) == 1
        assert merged.cells[0]["count"] == 999

    def test_merge_keeps_distinct_cells(self, mixture_report, datasets, store):
        other = evalkit.evaluate(evalkit.MixtureEstimator(), datasets[("ssav", "test")], store)
        merged = evalkit.merge_reports([mixture_report, other])
        assert [c["dataset_variant"] for c in merged.cells] == ["dsav", "ssav"]
        assert merged.seeds == {"dsav": 11, "ssav": 11}

    def test_missing_cell(self, mixture_report):
        with pytest.raises(KeyError):
            mixture_report.cell("davse-face", "dsav")

    def test_not_a_report(self):
        with pytest.raises(StorageError):
            evalkit.EvalReport.from_dict({"rows": []})


class TestOrderings:
    def test_ordered_seeds_pass(self):
        reports = [ordering_report(), ordering_report(davse_dsav=6.5), ordering_report(sync_ssav=4.0)]
        checks = evalkit.check_orderings(reports)
        assert len(checks) == 5
        assert all(c.passed for c in checks), [c.detail for c in checks if not c.passed]

    def test_median_absorbs_one_outlier_seed(self):
        reports = [ordering_report(), ordering_report(), ordering_report(sync_dssv=2.0)]
        assert all(c.passed for c in evalkit.check_orderings(reports))

    def test_majority_violation_fails(self):
        reports = [ordering_report(), ordering_report(davse_dsav=4.0), ordering_report(davse_dsav=4.5)]
        failed = [c.name for c in evalkit.check_orderings(reports) if not c.passed]
        assert failed == ["davse is best on dsav"]

    @pytest.mark.parametrize("overrides,name", [
        ({"sync_ssav": 3.0}, "sync gains on aligned same-speaker mixtures"),
        ({"sync_dssv": 0.5}, "sync does not gain on shuffled visuals"),
        ({"spk_same": 3.2}, "spk separates different-group mixtures better"),
        ({"spk_mouth_diff": 4.5}, "spk face input beats mouth input on different-group mixtures"),
    ])
    def test_each_violation_is_reported(self, overrides, name):
        failed = [c.name for c in evalkit.check_orderings([ordering_report(**overrides)]) if not c.passed]
        assert failed == [name]

    def test_zero_dssv_gain_passes(self):
        assert all(c.passed for c in evalkit.check_orderings([ordering_report(sync_dssv=0.0)]))

    def test_missing_cell_fails(self):
        checks = {c.name: c for c in evalkit.check_orderings([ordering_report(davse_dsav=None)])}
        assert not checks["davse is best on dsav"].passed
        assert "missing" in checks["davse is best on dsav"].detail

    def test_silhouette_median(self):
        summaries = [
            {"variant": "davse", "silhouette_frames": 0.40},
            {"variant": "davse", "silhouette_frames": 0.05},
            {"variant": "davse", "silhouette_frames": 0.35},
            {"variant": "baseline", "silhouette_frames": 0.10},
            {"variant": "baseline", "silhouette_frames": 0.30},
            {"label": "baseline-face", "silhouette_frames": 0.20},
        ]
        checks = evalkit.check_orderings([ordering_report()], summaries)
        assert checks[-1].name == "davse embeddings separate speakers better than baseline"
        assert checks[-1].passed
        flipped = [{**s, "silhouette_frames": -s["silhouette_frames"]} for s in summaries]
        assert not evalkit.check_orderings([ordering_report()], flipped)[-1].passed

    def test_needs_reports(self):
        with pytest.raises(ConfigError):
            evalkit.check_orderings([])


@pytest.fixture(scope="module")
def trained_sync(tmp_path_factory):
    root = tmp_path_factory.mktemp("sync_signs")
    avcorpus.build_corpus(config.CorpusConfig(**{**TINY_CORPUS, "train_speakers": 8, "utterances_per_speaker": 6}),
                          root / "corpus")
    manifest = avcorpus.load_manifest(root / "corpus")
    store = avcorpus.UtteranceStore(manifest)
    model = sepnet.build_model(tiny_model_config(
        "sync", n_audio_filters=64,
        tcn={"bottleneck": 32, "hidden": 64, "blocks_per_repeat": 4, "repeats": 1, "kernel": 3},
    ), seed=0)
    schedule = tiny_schedule(max_epochs=12, batch_size=4, segment_s=1.0, max_batches_per_epoch=None, initial_lr=3e-3)
    trainkit.train_sync(model, mixsim.build_dataset(manifest, "ssav", "train", 5, 128),
                        mixsim.build_dataset(manifest, "ssav", "dev", 5, 16), schedule, store, root / "sync.avt")
    return model, manifest, store


@pytest.mark.slow
class TestSyncSignStructure:
    def test_gain_only_with_aligned_visuals(self, trained_sync):
        model, manifest, store = trained_sync
        estimator = evalkit.ModelEstimator(model)
        aligned = evalkit.evaluate(estimator, mixsim.build_dataset(manifest, "ssav", "test", 9, 24), store)
        shuffled = evalkit.evaluate(estimator, mixsim.build_dataset(manifest, "dssv", "test", 9, 24), store)
        assert aligned.cells[0]["si_snri_mean"] > 0.0
        assert shuffled.cells[0]["si_snri_mean"] <= 0.0

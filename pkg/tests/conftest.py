"""Shared fixtures: a tiny corpus built once per session and tiny model settings."""
import os
import sys
import tempfile
from pathlib import Path

os.environ.setdefault("AVSE_PROGRESS", "0")
os.environ.setdefault("LOG_FILE", str(Path(tempfile.gettempdir()) / "avse_tests.log"))

sys.path.insert(0, str(Path(__file__).parent.parent))

import pytest  # noqa: E402

import avcorpus  # noqa: E402
import config  # noqa: E402
import evalkit  # noqa: E402
import mixsim  # noqa: E402

TINY_CORPUS = dict(
    seed=3,
    train_speakers=4,
    dev_speakers=4,
    test_speakers=4,
    utterances_per_speaker=3,
    min_duration_s=4.0,
    max_duration_s=4.4,
)

TINY_MODEL = dict(
    n_audio_filters=16,
    audio_kernel=32,
    audio_stride=16,
    visual_dim=8,
    tcn={"bottleneck": 8, "hidden": 16, "blocks_per_repeat": 2, "repeats": 1, "kernel": 3},
    frontend_channels=[4, 8],
    temporal_layers=2,
    n_speakers=4,
)

TINY_SCHEDULE = dict(max_epochs=2, batch_size=2, segment_s=0.5, max_batches_per_epoch=2)


def tiny_model_config(variant: str = "baseline", **overrides) -> config.ModelConfig:
    return config.ModelConfig.from_dict({**TINY_MODEL, "variant": variant, **overrides})


def tiny_schedule(**overrides) -> config.TrainSchedule:
    return config.TrainSchedule.from_dict({**TINY_SCHEDULE, **overrides})


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    avcorpus.build_corpus(config.CorpusConfig(**TINY_CORPUS), out)
    return out


@pytest.fixture(scope="session")
def manifest(corpus_dir):
    return avcorpus.load_manifest(corpus_dir)


@pytest.fixture(scope="session")
def store(manifest):
    return avcorpus.UtteranceStore(manifest)


@pytest.fixture(scope="session")
def datasets(manifest):
    """Small train/dev/test descriptors for every dataset variant."""
    sizes = {"train": 6, "dev": 4, "test": 8}
    return {
        (variant, split): mixsim.build_dataset(manifest, variant, split, 11, n)
        for variant in config.DATASET_VARIANTS
        for split, n in sizes.items()
    }


ORDERED_SEED = dict(sync_ssav=6.0, sync_dssv=-1.0, sync_dsav=4.0, spk_dsav=3.0, spk_diff=4.0, spk_same=2.0,
                    spk_mouth_diff=3.0, davse_dsav=7.0, baseline_dsav=5.0)


def ordering_report(**overrides):
    """One seed's EvalReport with hand-set SI-SNRi means for every cell the ordering checks read."""
    v = {**ORDERED_SEED, **overrides}

    def cell(model_variant, dataset_variant, field, mean, diff=None, same=None):
        return {
            "model": f"{model_variant}-{field}",
            "model_variant": model_variant,
            "dataset_variant": dataset_variant,
            "visual_field": field,
            "si_snr_mean": mean,
            "si_snri_mean": mean,
            "strata": {
                "diff": {"si_snr_mean": mean, "si_snri_mean": mean if diff is None else diff},
                "same": {"si_snr_mean": mean, "si_snri_mean": mean if same is None else same},
            },
        }

    cells = [
        cell("sync", "ssav", "face", v["sync_ssav"]),
        cell("sync", "dssv", "face", v["sync_dssv"]),
        cell("sync", "dsav", "face", v["sync_dsav"]),
        cell("spk", "dsav", "face", v["spk_dsav"], v["spk_diff"], v["spk_same"]),
        cell("spk", "dsav", "mouth", v["spk_dsav"], v["spk_mouth_diff"], v["spk_same"]),
        cell("davse", "dsav", "face", v["davse_dsav"]),
        cell("baseline", "dsav", "face", v["baseline_dsav"]),
    ]
    return evalkit.EvalReport(cells=[c for c in cells if c["si_snri_mean"] is not None])

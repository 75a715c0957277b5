"""
Evaluation Kit Module.

Scores an estimator (a trained checkpoint, or the unprocessed mixture as a
reference row) over a dataset descriptor and aggregates SI-SNR / SI-SNRi per
cell (model variant x dataset variant x visual field), stratified into
different-group and same-group mixtures. PESQ is delegated to an optional
external command.
"""
import logging
import math
import re
import shlex
import statistics
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from tqdm import tqdm

import artifact_storage
import config
from avcorpus import UtteranceStore, Waveform
from errors import ConfigError, PesqUnavailable, ShapeError, StorageError
from mixsim import MixtureDataset, MixtureExample
from sepnet import SeparationModel, extract, load_checkpoint
from trainkit import si_snr

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
STRATA = ("diff", "same")
DATASET_TITLES = {"dsav": "D-S A-V", "dssv": "D-S S-V", "ssav": "S-S A-V"}
_FLOAT = re.compile(r"[-+]?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?")


def si_snri(mixture: Waveform, estimate: Waveform, target: Waveform) -> float:
    """SI-SNR improvement of `estimate` over `mixture`, both against `target`."""
    if not len(mixture) == len(estimate) == len(target):
        raise ShapeError(f"si_snri needs equal lengths, got {len(mixture)}, {len(estimate)}, {len(target)}")
    return si_snr(target, estimate)[0] - si_snr(target, mixture)[0]


# --- PESQ ---

def pesq_adapter(reference: Waveform, estimate: Waveform, cmd: Optional[str] = None) -> Optional[float]:
    """
    Runs `<cmd> <reference.wav> <estimate.wav>` and returns the last number it prints.

    Returns None when no command is configured.

    Raises:
        PesqUnavailable: the command is missing, exits nonzero or prints no score.
    """
    cmd = cmd or config.PESQ_CMD
    if not cmd:
        return None
    with tempfile.TemporaryDirectory(prefix="avse_pesq_") as tmp:
        ref_path = artifact_storage.write_wav(Path(tmp) / "reference.wav", reference.samples, reference.sample_rate_hz)
        est_path = artifact_storage.write_wav(Path(tmp) / "estimate.wav", estimate.samples, estimate.sample_rate_hz)
        try:
            result = subprocess.run(
                shlex.split(cmd) + [str(ref_path), str(est_path)],
                capture_output=True,
                text=True,
                timeout=120,
            )
        except (OSError, subprocess.TimeoutExpired) as e:
            raise PesqUnavailable(f"PESQ command failed to run: {e}") from e
    if result.returncode != 0:
        raise PesqUnavailable(f"PESQ command exited with {result.returncode}: {result.stderr.strip()[:200]}")
    numbers = _FLOAT.findall(result.stdout)
    if not numbers:
        raise PesqUnavailable("PESQ command printed no score")
    return float(numbers[-1])


# --- Estimators ---

class MixtureEstimator:
    """Returns the mixture unchanged; gives the reference row of a report."""

    name = "mixture"
    variant = "mixture"
    visual_field = None

    def check_compatible(self, store: UtteranceStore) -> None:
        return None

    def estimate(self, example: MixtureExample) -> Waveform:
        return example.mixture


class ModelEstimator:
    def __init__(self, model: SeparationModel, name: Optional[str] = None):
        self.model = model.eval()
        self.variant = model.variant
        self.visual_field = model.config.visual_field
        self.name = name or f"{model.variant}-{self.visual_field}"

    @classmethod
    def from_checkpoint(cls, path: PathLike, name: Optional[str] = None) -> "ModelEstimator":
        return cls(load_checkpoint(path), name=name)

    def check_compatible(self, store: UtteranceStore) -> None:
        cfg = self.model.config
        manifest = store.manifest
        for key, ours, theirs in (
            ("sample_rate", cfg.sample_rate, manifest.sample_rate),
            ("fps", cfg.fps, manifest.fps),
            ("resolution", cfg.resolution, manifest.resolution),
        ):
            if ours != theirs:
                raise ConfigError(f"Checkpoint {key}={ours} does not match the corpus ({theirs})")

    def estimate(self, example: MixtureExample) -> Waveform:
        return extract(self.model, example.mixture, example.visual)[0]


# --- Report ---

def _summary(values: list) -> dict:
    if not values:
        return {"mean": None, "median": None}
    return {"mean": math.fsum(values) / len(values), "median": float(statistics.median(values))}


@dataclass
class EvalReport:
    cells: list = field(default_factory=list)
    seeds: dict = field(default_factory=dict)
    config_digest: Optional[str] = None

    def cell(self, model: str, dataset_variant: str, visual_field: Optional[str] = None) -> dict:
        for c in self.cells:
            if c["model"] == model and c["dataset_variant"] == dataset_variant and (
                visual_field is None or c["visual_field"] == visual_field
            ):
                return c
        raise KeyError(f"No cell for ({model}, {dataset_variant}, {visual_field})")

    def find(self, model_variant: str, dataset_variant: str, visual_field: str) -> Optional[dict]:
        """The first cell of a model variant on a dataset variant with one input field, or None."""
        for c in self.cells:
            if (c.get("model_variant"), c["dataset_variant"], c["visual_field"]) == (
                model_variant, dataset_variant, visual_field
            ):
                return c
        return None

    def to_dict(self) -> dict:
        return {"cells": self.cells, "seeds": self.seeds, "config_digest": self.config_digest}

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        if not isinstance(data, dict) or "cells" not in data:
            raise StorageError("Not an evaluation report (no 'cells')")
        return cls(cells=list(data["cells"]), seeds=dict(data.get("seeds", {})), config_digest=data.get("config_digest"))

    def write(self, path: PathLike) -> tuple:
        """Writes `<path>` (JSON) and `<path minus suffix>.txt` (table)."""
        path = Path(path)
        artifact_storage.write_json(path, self.to_dict())
        table_path = path.with_suffix(".txt")
        table_path.write_text(self.table())
        return path, table_path

    @classmethod
    def read(cls, path: PathLike) -> "EvalReport":
        return cls.from_dict(artifact_storage.read_json(path))

    def table(self) -> str:
        """Aligned text table: one row per model, Diff/Same/All columns per dataset."""
        datasets = [d for d in config.DATASET_VARIANTS if any(c["dataset_variant"] == d for c in self.cells)]
        seen = []
        for c in self.cells:
            key = (c["model"], c["visual_field"])
            if key not in seen:
                seen.append(key)

        lines = []
        for metric, title in (("si_snr", "SI-SNR (dB)"), ("si_snri", "SI-SNRi (dB)")):
            header = ["Model", "Field"]
            for d in datasets:
                header += [f"{DATASET_TITLES[d]} Diff", f"{DATASET_TITLES[d]} Same", f"{DATASET_TITLES[d]} All"]
            rows = [header]
            for model, field_ in seen:
                row = [model, field_ or "-"]
                for d in datasets:
                    try:
                        c = self.cell(model, d, field_) if field_ else self.cell(model, d)
                    except KeyError:
                        row += ["", "", ""]
                        continue
                    for stratum in STRATA:
                        value = c["strata"][stratum][f"{metric}_mean"]
                        row.append("n/a" if value is None else f"{value:.2f}")
                    overall = c[f"{metric}_mean"]
                    row.append("n/a" if overall is None else f"{overall:.2f}")
                rows.append(row)
            widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
            lines.append(title)
            for r in rows:
                lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip())
            lines.append("")
        if any(c.get("pesq_mean") is not None for c in self.cells):
            lines.append("PESQ")
            for c in self.cells:
                if c.get("pesq_mean") is not None:
                    lines.append(f"{c['model']}  {c['visual_field'] or '-'}  {c['dataset_variant']}  {c['pesq_mean']:.2f}")
            lines.append("")
        return "\n".join(lines)


def merge_reports(reports: list) -> EvalReport:
    """Concatenates cells; a later report replaces an earlier cell with the same key."""
    merged = EvalReport()
    index = {}
    for report in reports:
        for c in report.cells:
            key = (c["model"], c["dataset_variant"], c["visual_field"])
            if key in index:
                merged.cells[index[key]] = c
            else:
                index[key] = len(merged.cells)
                merged.cells.append(c)
        merged.seeds.update(report.seeds)
        merged.config_digest = merged.config_digest or report.config_digest
    return merged


# --- Cross-seed orderings ---

SYNC_ALIGNED_GAIN_DB = 3.0
SPK_GROUP_MARGIN_DB = 1.0


@dataclass
class OrderingCheck:
    name: str
    passed: bool
    detail: str


def _seed_median(reports: list, model_variant: str, dataset_variant: str, visual_field: str,
                 stratum: Optional[str] = None) -> Optional[float]:
    values = []
    for report in reports:
        c = report.find(model_variant, dataset_variant, visual_field)
        if c is None:
            continue
        value = c["strata"][stratum]["si_snri_mean"] if stratum else c["si_snri_mean"]
        if value is not None:
            values.append(value)
    return float(statistics.median(values)) if values else None


def _check(name: str, values: dict, predicate) -> OrderingCheck:
    shown = ", ".join(f"{k}={'missing' if v is None else f'{v:.2f}'}" for k, v in values.items())
    if any(v is None for v in values.values()):
        return OrderingCheck(name, False, f"missing cells: {shown}")
    return OrderingCheck(name, bool(predicate(**values)), shown)


def _summary_variant(summary: dict) -> str:
    return summary.get("variant") or str(summary.get("label", "")).split("-")[0]


def check_orderings(reports: list, embed_summaries: Optional[list] = None, visual_field: str = "face") -> list:
    """
    Compares seed-median SI-SNRi across variants, one EvalReport per seed.

    `embed_summaries` are the dicts written by embedviz.summarize; when given, the
    median fused-embedding silhouette of davse must exceed that of baseline.
    Returns one OrderingCheck per comparison.
    """
    if not reports:
        raise ConfigError("check_orderings needs at least one report")
    f = visual_field
    checks = [
        _check("sync gains on aligned same-speaker mixtures",
               {"sync_ssav": _seed_median(reports, "sync", "ssav", f)},
               lambda sync_ssav: sync_ssav > SYNC_ALIGNED_GAIN_DB),
        _check("sync does not gain on shuffled visuals",
               {"sync_dssv": _seed_median(reports, "sync", "dssv", f)},
               lambda sync_dssv: sync_dssv <= 0.0),
        _check("spk separates different-group mixtures better",
               {"spk_diff": _seed_median(reports, "spk", "dsav", f, "diff"),
                "spk_same": _seed_median(reports, "spk", "dsav", f, "same")},
               lambda spk_diff, spk_same: spk_diff - spk_same >= SPK_GROUP_MARGIN_DB),
        _check("davse is best on dsav",
               {"davse": _seed_median(reports, "davse", "dsav", f),
                "baseline": _seed_median(reports, "baseline", "dsav", f),
                "spk": _seed_median(reports, "spk", "dsav", f),
                "sync": _seed_median(reports, "sync", "dsav", f)},
               lambda davse, baseline, spk, sync: davse >= max(baseline, spk, sync)),
        _check("spk face input beats mouth input on different-group mixtures",
               {"face": _seed_median(reports, "spk", "dsav", "face", "diff"),
                "mouth": _seed_median(reports, "spk", "dsav", "mouth", "diff")},
               lambda face, mouth: face >= mouth),
    ]
    if embed_summaries is not None:
        def median_silhouette(variant):
            values = [s["silhouette_frames"] for s in embed_summaries
                      if _summary_variant(s) == variant and s.get("silhouette_frames") is not None]
            return float(statistics.median(values)) if values else None

        checks.append(_check("davse embeddings separate speakers better than baseline",
                             {"davse": median_silhouette("davse"), "baseline": median_silhouette("baseline")},
                             lambda davse, baseline: davse > baseline))
    for c in checks:
        (logger.info if c.passed else logger.warning)(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}")
    return checks


# --- Evaluation ---

def _score(estimator, dataset: MixtureDataset, store: UtteranceStore, i: int, pesq_cmd: Optional[str]) -> dict:
    example = dataset.render(i, store)
    estimate = estimator.estimate(example)
    row = {
        "index": dataset[i].index,
        "group_pair": example.group_pair,
        "si_snr": si_snr(example.target, estimate)[0],
        "si_snri": si_snri(example.mixture, estimate, example.target),
        "pesq": None,
        "pesq_error": None,
    }
    if pesq_cmd:
        try:
            row["pesq"] = pesq_adapter(example.target, estimate, pesq_cmd)
        except PesqUnavailable as e:
            row["pesq_error"] = str(e)
    return row


def evaluate(
    estimator,
    dataset: MixtureDataset,
    store: UtteranceStore,
    visual_field: Optional[str] = None,
    pesq_cmd: Optional[str] = None,
    workers: int = 1,
    config_digest: Optional[str] = None,
) -> EvalReport:
    """
    Scores every example of `dataset` exactly once and returns a one-cell report.

    Raises:
        ConfigError: the estimator does not fit the corpus or the requested field.
    """
    if visual_field is not None and estimator.visual_field not in (None, visual_field):
        raise ConfigError(f"Model consumes '{estimator.visual_field}' input, evaluation asked for '{visual_field}'")
    estimator.check_compatible(store)

    indices = range(len(dataset))
    progress = dict(total=len(dataset), desc=f"eval {estimator.name} {dataset.variant}", disable=not config.SHOW_PROGRESS)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(tqdm(pool.map(lambda i: _score(estimator, dataset, store, i, pesq_cmd), indices), **progress))
    else:
        rows = [_score(estimator, dataset, store, i, pesq_cmd) for i in tqdm(indices, **progress)]

    cell = {
        "model": estimator.name,
        "model_variant": estimator.variant,
        "dataset_variant": dataset.variant,
        "visual_field": estimator.visual_field,
        "split": dataset.split,
        "count": len(rows),
        "strata": {},
    }
    for metric in ("si_snr", "si_snri"):
        summary = _summary([r[metric] for r in rows])
        cell[f"{metric}_mean"], cell[f"{metric}_median"] = summary["mean"], summary["median"]
    for stratum in STRATA:
        members = [r for r in rows if r["group_pair"] == stratum]
        entry = {"count": len(members)}
        for metric in ("si_snr", "si_snri"):
            summary = _summary([r[metric] for r in members])
            entry[f"{metric}_mean"], entry[f"{metric}_median"] = summary["mean"], summary["median"]
        cell["strata"][stratum] = entry

    if pesq_cmd:
        scores = [r["pesq"] for r in rows if r["pesq"] is not None]
        cell["pesq_mean"] = _summary(scores)["mean"]
        cell["pesq_failures"] = sum(1 for r in rows if r["pesq_error"])
        if cell["pesq_failures"]:
            logger.warning(f"PESQ failed on {cell['pesq_failures']} of {len(rows)} examples")

    if cell["count"] and not all(np.isfinite([cell["si_snr_mean"], cell["si_snri_mean"]])):
        raise ShapeError(f"Non-finite metric means for {estimator.name} on {dataset.variant}")

    mean = cell["si_snri_mean"]
    logger.info(f"{estimator.name} on {dataset.variant}/{dataset.split}: SI-SNRi {mean if mean is None else round(mean, 2)} dB over {len(rows)} mixtures")
    return EvalReport(cells=[cell], seeds={dataset.variant: dataset.seed}, config_digest=config_digest)

"""
Embedding Visualization Module.

Exports per-frame visual embeddings V for a sample of test speakers, projects
them to 2-D with PCA, min-max normalizes the points and writes a CSV plus an SVG
scatter. A silhouette score gives a number to compare how well two models
separate speakers.
"""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from sklearn.decomposition import PCA  # noqa: E402
from sklearn.metrics import silhouette_score  # noqa: E402

import artifact_storage  # noqa: E402
import config  # noqa: E402
from avcorpus import CorpusManifest, UtteranceStore, stable_seed  # noqa: E402
from errors import ConfigError, DegenerateVariance, ShapeError, SingleClusterError  # noqa: E402
from sepnet import SeparationModel, extract, model_digest  # noqa: E402

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
GROUP_MARKERS = {"low": "o", "high": "^"}
# Variants whose V is the embedding consumed by the extraction network as a whole.
EMBEDDING_VARIANTS = ("baseline", "davse")


@dataclass(frozen=True)
class EmbeddingRecord:
    speaker_id: str
    group: str
    utt_id: str
    frame_index: int
    tag: str = "V"


@dataclass
class EmbeddingDump:
    records: list
    features: np.ndarray
    model_digest: str = ""
    variant: str = ""
    seed: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2:
            raise ShapeError(f"Embedding features must be a 2-D matrix, got {self.features.shape}")
        if len(self.records) != self.features.shape[0]:
            raise ShapeError(f"{len(self.records)} records but {self.features.shape[0]} feature rows")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def speaker_ids(self) -> list:
        return [r.speaker_id for r in self.records]

    @property
    def groups(self) -> list:
        return [r.group for r in self.records]


def save_dump(dump: EmbeddingDump, path: PathLike) -> Path:
    header = {
        "model_digest": dump.model_digest,
        "variant": dump.variant,
        "seed": dump.seed,
        "records": [[r.speaker_id, r.group, r.utt_id, r.frame_index, r.tag] for r in dump.records],
    }
    return artifact_storage.save_container(path, {"features": dump.features}, header)


def load_dump(path: PathLike) -> EmbeddingDump:
    tensors, header = artifact_storage.load_container(path)
    return EmbeddingDump(
        records=[EmbeddingRecord(*row) for row in header.get("records", [])],
        features=tensors["features"],
        model_digest=header.get("model_digest", ""),
        variant=header.get("variant", ""),
        seed=int(header.get("seed", 0)),
    )


def export_embeddings(model: SeparationModel, manifest: CorpusManifest, store: UtteranceStore,
                      n_speakers: int, seed: int, split: str = "test") -> EmbeddingDump:
    """
    Exports every frame of V for every utterance of `n_speakers` sampled speakers.

    Only baseline (joint V) and davse (fused V) checkpoints are accepted.
    """
    if model.variant not in EMBEDDING_VARIANTS:
        raise ConfigError(f"Embedding export needs a baseline or davse model, got {model.variant}")
    available = manifest.speakers(split)
    if not 0 <= n_speakers <= len(available):
        raise ConfigError(f"Asked for {n_speakers} speakers but split '{split}' has {len(available)}")
    rng = np.random.default_rng(stable_seed(seed, "embed", split))
    picked = sorted(int(i) for i in rng.choice(len(available), size=n_speakers, replace=False))

    records, rows = [], []
    for i in picked:
        speaker_id, group = available[i]
        for rec in manifest.utterances_of(speaker_id):
            utt = store.get(rec.utt_id)
            v = extract(model, utt.audio, utt.video)[2]
            rows.append(v.features)
            records.extend(EmbeddingRecord(speaker_id, group, utt.utt_id, j, v.tag) for j in range(v.length))

    dim = model.visual_dim
    features = np.concatenate(rows, axis=0) if rows else np.zeros((0, dim), dtype=np.float32)
    logger.info(f"Exported {len(records)} frames of V for {n_speakers} speakers ({model.variant})")
    return EmbeddingDump(records=records, features=features, model_digest=model_digest(model),
                         variant=model.variant, seed=seed)


def utterance_mean_points(dump: EmbeddingDump) -> tuple:
    """(mean features per utterance, speaker ids, groups, utterance ids) in first-seen order."""
    order, index = [], {}
    for i, r in enumerate(dump.records):
        if r.utt_id not in index:
            index[r.utt_id] = []
            order.append(r)
        index[r.utt_id].append(i)
    if not order:
        return np.zeros((0, dump.features.shape[1]), dtype=np.float64), [], [], []
    means = np.stack([dump.features[index[r.utt_id]].astype(np.float64).mean(axis=0) for r in order])
    return means, [r.speaker_id for r in order], [r.group for r in order], [r.utt_id for r in order]


def project_2d(features) -> np.ndarray:
    """
    Top-2 principal-component coordinates of the mean-centered features.

    Each component is oriented so that its largest-magnitude loading is positive.
    """
    if isinstance(features, EmbeddingDump):
        features = features.features
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DegenerateVariance("Projection needs at least two points")
    if x.shape[1] < 2:
        x = np.hstack([x, np.zeros((x.shape[0], 2 - x.shape[1]))])
    if np.var(x, axis=0).sum() <= 0.0:
        raise DegenerateVariance("All embedding vectors are identical")
    pca = PCA(n_components=2, svd_solver="full")
    points = pca.fit_transform(x)
    for k, component in enumerate(pca.components_):
        if component[np.argmax(np.abs(component))] < 0:
            points[:, k] = -points[:, k]
    return points


def minmax_norm(points) -> np.ndarray:
    """Per-axis (x - min) / (max - min); an axis with zero range maps to 0."""
    points = np.asarray(points, dtype=np.float64)
    lo = points.min(axis=0)
    span = points.max(axis=0) - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (points - lo) / safe, 0.0)


def silhouette(points, labels) -> float:
    """Mean silhouette coefficient (Euclidean)."""
    points = np.asarray(points, dtype=np.float64)
    labels = list(labels)
    n_labels = len(set(labels))
    if n_labels < 2:
        raise SingleClusterError("Silhouette needs at least two labels")
    if n_labels >= len(labels):
        return 0.0
    return float(silhouette_score(points, labels, metric="euclidean"))


def emit_plot(points, speaker_ids: list, groups: list, out_prefix: PathLike) -> tuple:
    """Writes `<prefix>.csv` (speaker_id, group, x, y) and `<prefix>.svg`."""
    points = np.asarray(points, dtype=np.float64)
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    csv_path = out_prefix.with_name(out_prefix.name + ".csv")
    svg_path = out_prefix.with_name(out_prefix.name + ".svg")

    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["speaker_id", "group", "x", "y"])
        for sid, group, (x, y) in zip(speaker_ids, groups, points):
            writer.writerow([sid, group, f"{x:.6f}", f"{y:.6f}"])

    speakers = sorted(set(speaker_ids))
    cmap = plt.get_cmap("tab10" if len(speakers) <= 10 else "tab20")
    with plt.rc_context({"svg.hashsalt": "avse-embeddings", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 6))
        for k, sid in enumerate(speakers):
            for group, marker in GROUP_MARKERS.items():
                sel = [i for i, (s, g) in enumerate(zip(speaker_ids, groups)) if s == sid and g == group]
                if sel:
                    ax.scatter(points[sel, 0], points[sel, 1], s=8, marker=marker,
                               color=cmap(k % cmap.N), label=f"{sid} ({group})", alpha=0.7)
        ax.set_xlim(-0.05, 1.05)
        ax.set_ylim(-0.05, 1.05)
        ax.set_xlabel("PC 1 (normalized)")
        ax.set_ylabel("PC 2 (normalized)")
        if speakers:
            ax.legend(fontsize=6, loc="best", markerscale=2)
        fig.savefig(svg_path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return csv_path, svg_path


def summarize(dump: EmbeddingDump, out_prefix: PathLike, label: Optional[str] = None) -> dict:
    """Projects, normalizes and plots a dump; writes `<prefix>_summary.json`."""
    out_prefix = Path(out_prefix)
    summary = {
        "label": label or dump.variant,
        "variant": dump.variant,
        "model_digest": dump.model_digest,
        "seed": dump.seed,
        "n_points": len(dump),
        "n_speakers": len(set(dump.speaker_ids)),
        "silhouette_frames": None,
        "silhouette_utterances": None,
    }
    if len(dump) >= 2:
        points = minmax_norm(project_2d(dump))
        emit_plot(points, dump.speaker_ids, dump.groups, out_prefix)
        if summary["n_speakers"] >= 2:
            summary["silhouette_frames"] = silhouette(points, dump.speaker_ids)
            means, speakers, groups, _ = utterance_mean_points(dump)
            if len(means) >= 2:
                mean_points = minmax_norm(project_2d(means))
                emit_plot(mean_points, speakers, groups, out_prefix.with_name(out_prefix.name + "_utterances"))
                summary["silhouette_utterances"] = silhouette(mean_points, speakers)
    else:
        emit_plot(np.zeros((0, 2)), [], [], out_prefix)
    artifact_storage.write_json(out_prefix.with_name(out_prefix.name + "_summary.json"), summary)
    logger.info(f"Embedding summary for {summary['label']}: silhouette {summary['silhouette_frames']}")
    return summary

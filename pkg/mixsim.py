"""
Mixture Simulation Module.

Builds the three simulated two-speaker datasets used for training and evaluation:

- dsav: different speakers, aligned visual (the visual stream belongs to the
  target utterance itself);
- dssv: different speakers, shuffled visual (another utterance of the target
  speaker, re-drawn every epoch);
- ssav: same speaker, aligned visual (two different utterances of one speaker).

Mixtures are fully overlapped at an exact signal-to-interference ratio. A dataset
is an immutable descriptor (`MixtureDataset`); audio is rendered on demand from
an `UtteranceStore` or materialized to WAV.
"""
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from tqdm import tqdm

import artifact_storage
import config
from avcorpus import CorpusManifest, Utterance, UtteranceStore, VideoStream, Waveform, stable_seed
from errors import ConfigError, ShapeError, VariantConstraintError, ZeroEnergyError

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

PEAK_LIMIT = 0.9
DESCRIPTOR_FIELDS = ("variant", "target_utt", "interferer_utt", "visual_utt", "sir_db", "group_pair")
MAX_DERANGEMENT_TRIES = 100

PathLike = Union[str, Path]


@dataclass
class MixtureExample:
    mixture: Waveform
    target: Waveform
    target_speaker_id: str
    interferer_speaker_id: str
    visual: VideoStream
    visual_utt_id: str
    sir_db: float
    variant: str
    group_pair: str
    target_utt_id: Optional[str] = None
    interferer_utt_id: Optional[str] = None

    @property
    def interferer(self) -> np.ndarray:
        """The scaled interferer actually present in the mixture."""
        return self.mixture.samples - self.target.samples


@dataclass(frozen=True)
class MixtureSpec:
    """One row of a dataset descriptor."""

    index: int
    split: str
    variant: str
    target_utt: str
    target_speaker_id: str
    interferer_utt: str
    interferer_speaker_id: str
    visual_utt: str
    visual_speaker_id: str
    sir_db: float
    group_pair: str

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "MixtureSpec":
        missing = [k for k in DESCRIPTOR_FIELDS if k not in data]
        if missing:
            raise ConfigError(f"Descriptor record is missing field(s): {', '.join(missing)}")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"Descriptor record has unknown field(s): {', '.join(unknown)}")
        try:
            return cls(**{**data, "index": int(data["index"]), "sir_db": float(data["sir_db"])})
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"Malformed descriptor record: {e}") from e


@dataclass(frozen=True)
class MixtureDataset:
    variant: str
    split: str
    seed: int
    examples: tuple
    pool: dict = field(default_factory=dict)
    groups: dict = field(default_factory=dict)
    sir_range: tuple = config.SIR_RANGE_DB
    cross_speaker_visual: bool = False
    epoch_seed: Optional[int] = None

    def __len__(self) -> int:
        return len(self.examples)

    def __getitem__(self, i: int) -> MixtureSpec:
        return self.examples[i]

    def __iter__(self):
        return iter(self.examples)

    def render(self, i: int, store: UtteranceStore) -> MixtureExample:
        return render_example(self.examples[i], store, sir_range=self.sir_range)

    def header(self) -> dict:
        return {
            "variant": self.variant,
            "split": self.split,
            "seed": self.seed,
            "count": len(self.examples),
            "pool": {k: list(v) for k, v in self.pool.items()},
            "groups": dict(self.groups),
            "sir_range": list(self.sir_range),
            "cross_speaker_visual": self.cross_speaker_visual,
            "epoch_seed": self.epoch_seed,
        }


# --- Signal level ---

def energy(samples: np.ndarray) -> float:
    """Mean-square energy."""
    samples = np.asarray(samples, dtype=np.float64)
    return float(np.mean(samples ** 2))


def measured_sir(target: np.ndarray, interferer: np.ndarray) -> float:
    n = min(len(target), len(interferer))
    return float(10.0 * np.log10(energy(target[:n]) / energy(interferer[:n])))


def scale_for_sir(target: Waveform, interferer: Waveform, sir_db: float) -> Waveform:
    """
    Scales `interferer` so that target-to-interferer energy over the overlapped
    length equals `sir_db`. The result is truncated to that length.
    """
    n = min(len(target), len(interferer))
    p_t = energy(target.samples[:n])
    p_i = energy(interferer.samples[:n])
    if p_t <= 0.0 or p_i <= 0.0:
        raise ZeroEnergyError("scale_for_sir needs both signals to have positive energy")
    alpha = np.sqrt(p_t / (p_i * 10.0 ** (sir_db / 10.0)))
    return Waveform(alpha * interferer.samples[:n], interferer.sample_rate_hz)


def _fit_frames(video: VideoStream, n_frames: int) -> VideoStream:
    frames = video.frames
    if len(frames) >= n_frames:
        frames = frames[:n_frames]
    else:
        pad = np.repeat(frames[-1:], n_frames - len(frames), axis=0)
        frames = np.concatenate([frames, pad], axis=0)
    return VideoStream(frames=frames, fps=video.fps, field=video.field)


def check_variant(variant: str, target_utt: Utterance, interferer_utt: Utterance,
                  visual_source: Utterance, allow_cross_speaker_visual: bool = False) -> None:
    """Raises VariantConstraintError when the sources break the variant's rules."""
    if variant not in config.DATASET_VARIANTS:
        raise VariantConstraintError(f"Unknown dataset variant '{variant}'")
    same_speaker = target_utt.speaker_id == interferer_utt.speaker_id
    aligned = visual_source.utt_id == target_utt.utt_id

    if variant in ("dsav", "dssv") and same_speaker:
        raise VariantConstraintError(f"{variant} needs two different speakers, got {target_utt.speaker_id} twice")
    if variant == "ssav":
        if not same_speaker:
            raise VariantConstraintError("ssav needs target and interferer from the same speaker")
        if target_utt.utt_id == interferer_utt.utt_id:
            raise VariantConstraintError("ssav needs two different utterances")
    if variant in ("dsav", "ssav") and not aligned:
        raise VariantConstraintError(f"{variant} needs the visual stream of the target utterance")
    if variant == "dssv":
        if aligned:
            raise VariantConstraintError("dssv must not use the target utterance's own visual stream")
        if visual_source.speaker_id != target_utt.speaker_id and not allow_cross_speaker_visual:
            raise VariantConstraintError("dssv visual stream must come from the target speaker")


def mix_pair(
    target_utt: Utterance,
    interferer_utt: Utterance,
    sir_db: float,
    variant: str,
    visual_source: Utterance,
    sir_range: tuple = config.SIR_RANGE_DB,
    allow_cross_speaker_visual: bool = False,
) -> MixtureExample:
    """
    Mixes two utterances at `sir_db` with full overlap.

    Both sources are truncated to the shorter one. When the mixture peak exceeds
    0.9, mixture and target are scaled down by one shared factor.
    """
    lo, hi = sir_range
    if not lo <= sir_db <= hi:
        raise ConfigError(f"sir_db {sir_db} outside [{lo}, {hi}] dB")
    check_variant(variant, target_utt, interferer_utt, visual_source, allow_cross_speaker_visual)

    sample_rate = target_utt.audio.sample_rate_hz
    if interferer_utt.audio.sample_rate_hz != sample_rate:
        raise ShapeError("Target and interferer sample rates differ")

    n = min(len(target_utt.audio), len(interferer_utt.audio))
    target = target_utt.audio.samples[:n]
    interferer = scale_for_sir(target_utt.audio, interferer_utt.audio, sir_db).samples
    mixture = target + interferer

    peak = np.abs(mixture).max()
    if peak > PEAK_LIMIT:
        gain = PEAK_LIMIT / peak
        mixture = mixture * gain
        target = target * gain

    hop = sample_rate // visual_source.video.fps
    visual = _fit_frames(visual_source.video, max(1, int(np.ceil(n / hop))))

    if variant == "ssav":
        group_pair = "same"
    else:
        if target_utt.group is None or interferer_utt.group is None:
            raise ConfigError("Speaker groups are required to stratify different-speaker mixtures")
        group_pair = "same" if target_utt.group == interferer_utt.group else "diff"

    return MixtureExample(
        mixture=Waveform(mixture, sample_rate),
        target=Waveform(target, sample_rate),
        target_speaker_id=target_utt.speaker_id,
        interferer_speaker_id=interferer_utt.speaker_id,
        visual=visual,
        visual_utt_id=visual_source.utt_id,
        sir_db=float(sir_db),
        variant=variant,
        group_pair=group_pair,
        target_utt_id=target_utt.utt_id,
        interferer_utt_id=interferer_utt.utt_id,
    )


def render_example(spec: MixtureSpec, store: UtteranceStore, sir_range: tuple = config.SIR_RANGE_DB) -> MixtureExample:
    """Renders one descriptor row from the corpus on disk."""
    return mix_pair(
        store.get(spec.target_utt),
        store.get(spec.interferer_utt),
        spec.sir_db,
        spec.variant,
        store.get(spec.visual_utt),
        sir_range=sir_range,
        allow_cross_speaker_visual=spec.visual_speaker_id != spec.target_speaker_id,
    )


# --- Datasets ---

def _draw(rng: np.random.Generator, items) -> str:
    items = list(items)
    return items[int(rng.integers(len(items)))]


def build_dataset(
    manifest: CorpusManifest,
    variant: str,
    split: str,
    seed: int,
    pairs_per_split: int,
    sir_range: tuple = config.SIR_RANGE_DB,
    cross_speaker_visual: bool = False,
) -> MixtureDataset:
    """
    Samples `pairs_per_split` mixture descriptors for one variant and split.

    Each row is a pure function of (seed, variant, split, index).
    """
    if variant not in config.DATASET_VARIANTS:
        raise VariantConstraintError(f"Unknown dataset variant '{variant}'")
    if pairs_per_split < 0:
        raise ConfigError("pairs_per_split must be >= 0")
    lo, hi = (float(v) for v in sir_range)
    if lo > hi:
        raise ConfigError(f"Empty SIR range [{lo}, {hi}]")

    groups = dict(manifest.speakers(split))
    speakers = sorted(groups)
    pool = {sid: tuple(r.utt_id for r in manifest.utterances_of(sid)) for sid in speakers}
    if variant in ("dsav", "dssv") and len(speakers) < 2:
        raise ConfigError(f"Split '{split}' needs at least 2 speakers for {variant}")
    if not speakers:
        raise ConfigError(f"Split '{split}' has no speakers")

    examples = []
    for i in range(pairs_per_split):
        rng = np.random.default_rng(stable_seed(seed, variant, split, i))
        if variant == "ssav":
            t_spk = _draw(rng, speakers)
            i_spk = t_spk
        else:
            picked = rng.choice(len(speakers), size=2, replace=False)
            t_spk, i_spk = speakers[int(picked[0])], speakers[int(picked[1])]

        if variant in ("ssav", "dssv") and len(pool[t_spk]) < 2:
            raise ConfigError(f"Speaker {t_spk} has fewer than 2 utterances; {variant} needs two")

        if variant == "ssav":
            picked = rng.choice(len(pool[t_spk]), size=2, replace=False)
            t_utt, i_utt = pool[t_spk][int(picked[0])], pool[t_spk][int(picked[1])]
        else:
            t_utt = _draw(rng, pool[t_spk])
            i_utt = _draw(rng, pool[i_spk])

        if variant == "dssv":
            v_utt = _draw(rng, [u for u in pool[t_spk] if u != t_utt])
        else:
            v_utt = t_utt

        if variant == "ssav":
            group_pair = "same"
        else:
            group_pair = "same" if groups[t_spk] == groups[i_spk] else "diff"

        examples.append(MixtureSpec(
            index=i,
            split=split,
            variant=variant,
            target_utt=t_utt,
            target_speaker_id=t_spk,
            interferer_utt=i_utt,
            interferer_speaker_id=i_spk,
            visual_utt=v_utt,
            visual_speaker_id=t_spk,
            sir_db=float(rng.uniform(lo, hi)),
            group_pair=group_pair,
        ))

    logger.info(f"Built {variant}/{split}: {len(examples)} mixtures (seed={seed})")
    return MixtureDataset(
        variant=variant,
        split=split,
        seed=seed,
        examples=tuple(examples),
        pool=pool,
        groups=groups,
        sir_range=(lo, hi),
        cross_speaker_visual=cross_speaker_visual,
    )


def _cross_speaker_visuals(dataset: MixtureDataset, epoch_seed: int) -> list:
    """Derangement of the dataset's target utterances used as visual references."""
    n = len(dataset.examples)
    targets = [ex.target_utt for ex in dataset.examples]
    rng = np.random.default_rng(stable_seed(dataset.seed, "cross", dataset.split, epoch_seed))
    for _ in range(MAX_DERANGEMENT_TRIES):
        perm = rng.permutation(n)
        if all(targets[int(perm[i])] != targets[i] for i in range(n)):
            return [int(p) for p in perm]
    raise ConfigError("Could not permute visual references away from their own target utterances")


def reshuffle_epoch(dataset: MixtureDataset, epoch_seed: int, cross_speaker: Optional[bool] = None) -> MixtureDataset:
    """
    Re-draws every visual reference of a dssv dataset for a new epoch.

    By default each example gets another utterance of its own target speaker.
    In cross-speaker mode the references are a dataset-wide permutation of the
    target utterances, so the visual speaker may differ from the target.
    """
    if dataset.variant != "dssv":
        raise VariantConstraintError(f"reshuffle_epoch applies to dssv datasets only, got {dataset.variant}")
    cross = dataset.cross_speaker_visual if cross_speaker is None else cross_speaker

    if cross and len(dataset.examples) > 1:
        perm = _cross_speaker_visuals(dataset, epoch_seed)
        examples = [
            dataclasses.replace(
                ex,
                visual_utt=dataset.examples[j].target_utt,
                visual_speaker_id=dataset.examples[j].target_speaker_id,
            )
            for ex, j in zip(dataset.examples, perm)
        ]
    else:
        examples = []
        for ex in dataset.examples:
            rng = np.random.default_rng(stable_seed(dataset.seed, "reshuffle", dataset.split, epoch_seed, ex.index))
            candidates = [u for u in dataset.pool[ex.target_speaker_id] if u != ex.target_utt]
            if not candidates:
                raise ConfigError(f"Speaker {ex.target_speaker_id} has no alternative utterance to shuffle in")
            examples.append(dataclasses.replace(
                ex,
                visual_utt=_draw(rng, candidates),
                visual_speaker_id=ex.target_speaker_id,
            ))
    return dataclasses.replace(dataset, examples=tuple(examples), cross_speaker_visual=cross, epoch_seed=epoch_seed)


# --- Descriptor files ---

def write_descriptor(dataset: MixtureDataset, path: PathLike) -> Path:
    """JSON-lines rows plus a `<file>.json` header with the speaker pool."""
    path = artifact_storage.write_jsonl(path, [ex.to_dict() for ex in dataset.examples])
    artifact_storage.write_json(artifact_storage.header_path(path), dataset.header())
    return path


def load_descriptor(path: PathLike) -> MixtureDataset:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Dataset descriptor not found: {path}")
    rows = artifact_storage.read_jsonl(path)
    sidecar = artifact_storage.header_path(path)
    header = artifact_storage.read_json(sidecar) if sidecar.exists() else {}
    examples = tuple(MixtureSpec.from_dict(row) for row in rows)
    variants = {ex.variant for ex in examples}
    if len(variants) > 1:
        raise ConfigError(f"{path} mixes dataset variants {sorted(variants)}")
    variant = header.get("variant") or (variants.pop() if variants else None)
    if variant not in config.DATASET_VARIANTS:
        raise ConfigError(f"{path}: unknown dataset variant '{variant}'")
    return MixtureDataset(
        variant=variant,
        split=header.get("split", examples[0].split if examples else "test"),
        seed=int(header.get("seed", 0)),
        examples=examples,
        pool={k: tuple(v) for k, v in header.get("pool", {}).items()},
        groups=dict(header.get("groups", {})),
        sir_range=tuple(header.get("sir_range", config.SIR_RANGE_DB)),
        cross_speaker_visual=bool(header.get("cross_speaker_visual", False)),
        epoch_seed=header.get("epoch_seed"),
    )


def materialize(dataset: MixtureDataset, store: UtteranceStore, out_dir: PathLike) -> list:
    """Writes `<index>_mix.wav` and `<index>_target.wav` for every example."""
    out_dir = Path(out_dir) / dataset.variant / dataset.split
    written = []
    for i in tqdm(range(len(dataset)), desc=f"materialize {dataset.variant}", disable=not config.SHOW_PROGRESS):
        ex = dataset.render(i, store)
        mix_path = artifact_storage.write_wav(out_dir / f"{i:05d}_mix.wav", ex.mixture.samples, ex.mixture.sample_rate_hz)
        tgt_path = artifact_storage.write_wav(out_dir / f"{i:05d}_target.wav", ex.target.samples, ex.target.sample_rate_hz)
        written.append((mix_path, tgt_path))
    logger.info(f"Materialized {len(written)} mixtures under {out_dir}")
    return written

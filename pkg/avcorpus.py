"""
Audio-Visual Corpus Module.

Synthesizes a desk-scale audio-visual speech corpus in which the two visual
cues used for speaker extraction are independently controllable:

- speaker identity lives only in a static, per-speaker face template;
- synchronization lives only in the mouth aperture, which follows the audio
  envelope frame by frame.

The mouth rectangle is rendered identically for every speaker, so a mouth crop
keeps the synchronization cue and drops the identity cue.

Every item is a pure function of seeds; identical configs produce identical
files and manifests.
"""
import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

import artifact_storage
import config
from config import CorpusConfig
from errors import AlreadyCropped, ConfigError, DurationOutOfRange, ShapeError

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

GROUPS = ("low", "high")
F0_RANGES = {"low": (100.0, 140.0), "high": (180.0, 240.0)}
N_HARMONICS = 8
MIN_DURATION_S = 4.0
MAX_DURATION_S = 6.0
MIN_TEMPLATE_DIFFERENCE = 0.05

# Mouth rectangle as fractions of the frame: top, bottom, left, right.
MOUTH_BOX = (0.60, 0.88, 0.28, 0.72)
LIP_LEVEL = 0.45
MOUTH_DARK = 0.05
APERTURE_SMOOTHING = np.array([0.1, 0.8, 0.1])

# Pseudo-phone inventory shared by all speakers: harmonic weighting and loudness.
PHONE_SHAPES = np.array([
    [1.00, 0.90, 0.60, 0.30, 0.20, 0.10, 0.05, 0.05],
    [1.00, 0.40, 0.80, 0.50, 0.20, 0.10, 0.10, 0.05],
    [0.60, 1.00, 0.30, 0.20, 0.60, 0.30, 0.10, 0.05],
    [0.30, 0.50, 1.00, 0.70, 0.30, 0.40, 0.20, 0.10],
    [0.20, 0.30, 0.40, 0.60, 1.00, 0.80, 0.50, 0.30],
    [0.50, 0.20, 0.10, 0.10, 0.30, 0.60, 1.00, 0.70],
])
PHONE_LOUDNESS = np.array([1.00, 0.85, 0.70, 0.55, 0.40, 0.30])

PathLike = Union[str, Path]


def stable_seed(*parts) -> int:
    """64-bit seed derived from a stable hash of the given parts."""
    text = "|".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def speaker_name(index: int) -> str:
    return f"spk{index:04d}"


def speaker_index(speaker_id: str) -> int:
    return int(speaker_id[3:])


# --- Domain types ---

@dataclass
class SpeakerProfile:
    speaker_id: str
    group: str
    f0_hz: float
    timbre: np.ndarray
    face_template: np.ndarray
    seed: int


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = 8000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ShapeError("Waveform must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(self.samples)):
            raise ShapeError("Waveform contains non-finite samples")

    def __len__(self) -> int:
        return int(self.samples.size)

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz


@dataclass
class VideoStream:
    frames: np.ndarray
    fps: int = 25
    field: str = "face"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3 or self.frames.shape[1] != self.frames.shape[2]:
            raise ShapeError(f"Video frames must be T x H x W with H == W, got {self.frames.shape}")
        if self.field not in config.VISUAL_FIELDS:
            raise ShapeError(f"Unknown visual field '{self.field}'")

    def __len__(self) -> int:
        return int(self.frames.shape[0])

    @property
    def resolution(self) -> int:
        return int(self.frames.shape[1])


@dataclass
class Utterance:
    speaker_id: str
    utt_id: str
    audio: Waveform
    video: VideoStream
    aperture: np.ndarray
    group: Optional[str] = None

    @property
    def duration_s(self) -> float:
        return self.audio.duration_s


@dataclass(frozen=True)
class UtteranceRecord:
    speaker_id: str
    utt_id: str
    group: str
    split: str
    audio_path: str
    video_path: str
    duration_s: float

    def to_dict(self) -> dict:
        return {
            "speaker_id": self.speaker_id,
            "utt_id": self.utt_id,
            "group": self.group,
            "split": self.split,
            "audio_path": self.audio_path,
            "video_path": self.video_path,
            "duration_s": self.duration_s,
        }


@dataclass
class CorpusManifest:
    root: Path
    global_seed: int
    sample_rate: int
    fps: int
    resolution: int
    records: list

    @property
    def splits(self) -> dict:
        """split -> list of (speaker_id, utterance file paths, group)."""
        out = {}
        for split in config.SPLITS:
            entries = []
            for speaker_id, group in self.speakers(split):
                paths = [(r.audio_path, r.video_path) for r in self.utterances_of(speaker_id)]
                entries.append((speaker_id, paths, group))
            out[split] = entries
        return out

    @property
    def counts(self) -> dict:
        return {s: len(self.split_records(s)) for s in config.SPLITS}

    def split_records(self, split: str) -> list:
        return [r for r in self.records if r.split == split]

    def speakers(self, split: str) -> list:
        seen = {}
        for r in self.split_records(split):
            seen.setdefault(r.speaker_id, r.group)
        return sorted(seen.items())

    def utterances_of(self, speaker_id: str) -> list:
        return [r for r in self.records if r.speaker_id == speaker_id]

    def record(self, utt_id: str) -> UtteranceRecord:
        for r in self.records:
            if r.utt_id == utt_id:
                return r
        raise ConfigError(f"Utterance '{utt_id}' is not in the manifest")

    def group_of(self, speaker_id: str) -> str:
        return self.utterances_of(speaker_id)[0].group

    def profile(self, speaker_id: str) -> SpeakerProfile:
        return make_speaker(self.global_seed, speaker_index(speaker_id), self.group_of(speaker_id), self.resolution)

    def digest(self) -> str:
        return artifact_storage.file_digest(self.root / "manifest.jsonl", [self.root / "corpus.json"])


# --- Speakers ---

def _draw_face_template(rng: np.random.Generator, group: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    # Face brightness depends on group, standing in for a visible speaker attribute.
    base = rng.uniform(0.35, 0.50) if group == "low" else rng.uniform(0.60, 0.75)
    background = rng.uniform(0.0, 0.2)

    texture = np.zeros((size, size))
    for _ in range(4):
        fy, fx = rng.uniform(0.5, 3.0, 2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        texture += rng.uniform(0.03, 0.08) * np.cos(2.0 * np.pi * (fy * yy + fx * xx) + phase)
    texture += rng.uniform(-0.05, 0.05, (size, size))

    face = ((xx - 0.5) / 0.38) ** 2 + ((yy - 0.5) / 0.46) ** 2 <= 1.0
    template = np.where(face, base + texture, background + 0.5 * texture)

    eye_y = rng.uniform(0.33, 0.40)
    eye_dx = rng.uniform(0.15, 0.22)
    eye_r = rng.uniform(0.05, 0.07)
    for cx in (0.5 - eye_dx, 0.5 + eye_dx):
        eye = (xx - cx) ** 2 + (yy - eye_y) ** 2 <= eye_r ** 2
        template[eye] = 0.1
    return np.clip(template, 0.0, 1.0).astype(np.float32)


def make_speaker(global_seed: int, index: int, group: str, resolution: int = 32) -> SpeakerProfile:
    """
    Builds the synthetic speaker at `index`.

    Deterministic in (global_seed, index, group, resolution).
    """
    if index < 0:
        raise ConfigError(f"Speaker index must be >= 0, got {index}")
    if group not in GROUPS:
        raise ConfigError(f"Speaker group must be one of {GROUPS}, got '{group}'")
    seed = stable_seed(global_seed, "speaker", index, group)
    rng = np.random.default_rng(seed)
    lo, hi = F0_RANGES[group]
    f0_hz = float(rng.uniform(lo, hi))
    timbre = rng.uniform(0.1, 1.0, N_HARMONICS)
    timbre = timbre / timbre.max()
    face_template = _draw_face_template(rng, group, resolution)
    return SpeakerProfile(
        speaker_id=speaker_name(index),
        group=group,
        f0_hz=f0_hz,
        timbre=timbre,
        face_template=face_template,
        seed=seed,
    )


# --- Rendering ---

def mouth_box(size: int) -> tuple:
    top, bottom, left, right = MOUTH_BOX
    return int(round(top * size)), int(round(bottom * size)), int(round(left * size)), int(round(right * size))


def mouth_patches(aperture: np.ndarray, height: int, width: int) -> np.ndarray:
    """Speaker-independent mouth renderings, one per aperture value."""
    aperture = np.asarray(aperture, dtype=np.float64).reshape(-1, 1, 1)
    yy, xx = np.mgrid[0:height, 0:width]
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    ax = 0.42 * width
    ay = 0.06 * height + 0.40 * height * aperture
    r = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2
    inside = 1.0 / (1.0 + np.exp(8.0 * (r - 1.0)))
    return (LIP_LEVEL * (1.0 - inside) + MOUTH_DARK * inside).astype(np.float32)


def render_frames(face_template: np.ndarray, aperture: np.ndarray) -> np.ndarray:
    """Composites the face template with an aperture-driven mouth, frame by frame."""
    size = face_template.shape[0]
    top, bottom, left, right = mouth_box(size)
    frames = np.repeat(face_template[None].astype(np.float32), len(aperture), axis=0)
    frames[:, top:bottom, left:right] = mouth_patches(aperture, bottom - top, right - left)
    return frames


def crop_mouth(video: VideoStream) -> VideoStream:
    """Cuts the mouth rectangle and resizes it back to the frame resolution."""
    if video.field == "mouth":
        raise AlreadyCropped("Video is already a mouth crop")
    size = video.resolution
    top, bottom, left, right = mouth_box(size)
    crop = torch.from_numpy(np.ascontiguousarray(video.frames[:, top:bottom, left:right]))
    resized = F.interpolate(crop.unsqueeze(1), size=(size, size), mode="bilinear", align_corners=False)
    return VideoStream(frames=resized.squeeze(1).numpy(), fps=video.fps, field="mouth")


def frame_rms(samples: np.ndarray, hop: int) -> np.ndarray:
    n_frames = len(samples) // hop
    frames = np.asarray(samples[:n_frames * hop], dtype=np.float64).reshape(n_frames, hop)
    return np.sqrt(np.mean(frames ** 2, axis=1))


def aperture_from_audio(samples: np.ndarray, hop: int) -> np.ndarray:
    """Per-frame smoothed RMS rescaled to [0, 1]."""
    rms = frame_rms(samples, hop)
    smoothed = np.convolve(np.pad(rms, 1, mode="edge"), APERTURE_SMOOTHING, mode="valid")
    span = smoothed.max() - smoothed.min()
    if span <= 0:
        return np.zeros_like(smoothed)
    return (smoothed - smoothed.min()) / span


def sync_correlation(utt: Utterance) -> float:
    """Pearson correlation between the aperture and the per-frame audio RMS."""
    hop = utt.audio.sample_rate_hz // utt.video.fps
    rms = frame_rms(utt.audio.samples, hop)
    return float(np.corrcoef(utt.aperture[:len(rms)], rms)[0, 1])


def synth_utterance(
    profile: SpeakerProfile,
    utt_seed: int,
    duration_s: float,
    sample_rate: int = 8000,
    fps: int = 25,
    utt_id: Optional[str] = None,
) -> Utterance:
    """
    Synthesizes one utterance of `profile`.

    Audio is a chain of 80-240 ms pseudo-phones (harmonic source at the speaker's
    f0 shaped by timbre and phone, with a segment envelope) and brief silences.
    The video composites the face template with a mouth that opens with the
    smoothed audio envelope.
    """
    if not MIN_DURATION_S <= duration_s <= MAX_DURATION_S:
        raise DurationOutOfRange(f"duration_s must lie in [{MIN_DURATION_S}, {MAX_DURATION_S}], got {duration_s}")
    if sample_rate % fps != 0:
        raise ConfigError(f"sample_rate {sample_rate} is not a multiple of fps {fps}")

    rng = np.random.default_rng(utt_seed)
    hop = sample_rate // fps
    n_frames = int(round(duration_s * fps))
    n = n_frames * hop
    harmonics = np.arange(1, N_HARMONICS + 1)

    audio = np.zeros(n)
    pos = 0
    while pos < n:
        if rng.random() < 0.15:
            pos += int(rng.uniform(0.04, 0.12) * sample_rate)
            continue
        seg = min(int(rng.uniform(0.08, 0.24) * sample_rate), n - pos)
        phone = int(rng.integers(len(PHONE_SHAPES)))
        f0 = profile.f0_hz * (1.0 + rng.uniform(-0.03, 0.03))
        phases = rng.uniform(0.0, 2.0 * np.pi, N_HARMONICS)
        gain = PHONE_LOUDNESS[phone] * rng.uniform(0.6, 1.0)

        keep = harmonics * f0 < sample_rate / 2
        amps = (profile.timbre * PHONE_SHAPES[phone])[keep]
        tt = np.arange(seg) / sample_rate
        source = (amps[:, None] * np.sin(2.0 * np.pi * f0 * harmonics[keep, None] * tt[None] + phases[keep, None])).sum(0)
        envelope = np.sin(np.pi * (np.arange(seg) + 0.5) / seg)
        audio[pos:pos + seg] = gain * envelope * source / amps.sum()
        pos += seg

    peak = np.abs(audio).max()
    if peak > 0:
        audio *= 0.9 / peak

    aperture = aperture_from_audio(audio, hop)
    video = VideoStream(frames=render_frames(profile.face_template, aperture), fps=fps, field="face")
    return Utterance(
        speaker_id=profile.speaker_id,
        utt_id=utt_id or f"{profile.speaker_id}_s{utt_seed % 100000:05d}",
        audio=Waveform(audio, sample_rate),
        video=video,
        aperture=aperture,
        group=profile.group,
    )


# --- Identity check ---

def nearest_template_accuracy(videos: list, speaker_ids: list, profiles: dict) -> float:
    """
    Speaker accuracy of a nearest-template classifier on time-averaged frames.

    Templates are each speaker's face rendered with a closed mouth, cropped the
    same way as the classified videos.
    """
    if not videos:
        return 0.0
    ids = sorted(profiles)
    fields = {v.field for v in videos}
    if len(fields) != 1:
        raise ShapeError("All classified videos must share one visual field")
    templates = []
    for sid in ids:
        profile = profiles[sid]
        ref = VideoStream(render_frames(profile.face_template, np.zeros(1)), field="face")
        if fields == {"mouth"}:
            ref = crop_mouth(ref)
        templates.append(ref.frames[0].astype(np.float64))
    templates = np.stack(templates)

    correct = 0
    for video, sid in zip(videos, speaker_ids):
        mean_frame = video.frames.astype(np.float64).mean(axis=0)
        distances = ((templates - mean_frame[None]) ** 2).sum(axis=(1, 2))
        correct += int(ids[int(np.argmin(distances))] == sid)
    return correct / len(videos)


# --- Corpus ---

@dataclass(frozen=True)
class _UttJob:
    global_seed: int
    index: int
    group: str
    split: str
    utt_id: str
    sample_rate: int
    fps: int
    resolution: int
    min_duration_s: float
    max_duration_s: float
    out_dir: str


def _generate_and_store(job: _UttJob) -> dict:
    profile = make_speaker(job.global_seed, job.index, job.group, job.resolution)
    rng = np.random.default_rng(stable_seed(job.global_seed, profile.speaker_id, job.utt_id))
    lo = int(np.ceil(job.min_duration_s * job.fps))
    hi = int(np.floor(job.max_duration_s * job.fps))
    n_frames = int(np.clip(round(rng.uniform(job.min_duration_s, job.max_duration_s) * job.fps), lo, hi))
    duration_s = n_frames / job.fps

    utt = synth_utterance(
        profile,
        stable_seed(job.global_seed, profile.speaker_id, job.utt_id, "content"),
        duration_s,
        sample_rate=job.sample_rate,
        fps=job.fps,
        utt_id=job.utt_id,
    )
    audio_rel = f"audio/{job.split}/{profile.speaker_id}/{job.utt_id}.wav"
    video_rel = f"video/{job.split}/{profile.speaker_id}/{job.utt_id}.avt"
    root = Path(job.out_dir)
    artifact_storage.write_wav(root / audio_rel, utt.audio.samples, job.sample_rate)
    artifact_storage.write_tensors(root / video_rel, {
        "frames": np.round(utt.video.frames * 32767.0).astype(np.int16),
        "aperture": utt.aperture.astype(np.float32),
    })
    return UtteranceRecord(
        speaker_id=profile.speaker_id,
        utt_id=job.utt_id,
        group=job.group,
        split=job.split,
        audio_path=audio_rel,
        video_path=video_rel,
        duration_s=duration_s,
    ).to_dict()


def _validate_corpus_config(cfg: CorpusConfig) -> None:
    if cfg.utterances_per_speaker < 2:
        raise ConfigError("utterances_per_speaker must be >= 2 (same-speaker mixing needs two utterances)")
    for split in config.SPLITS:
        if cfg.speakers_in(split) // 2 < 2:
            raise ConfigError(f"split '{split}' needs at least 2 speakers per group, got {cfg.speakers_in(split)} speakers")
    if not MIN_DURATION_S <= cfg.min_duration_s <= cfg.max_duration_s <= MAX_DURATION_S:
        raise ConfigError(f"durations must satisfy {MIN_DURATION_S} <= min <= max <= {MAX_DURATION_S}")
    if cfg.sample_rate % cfg.fps != 0:
        raise ConfigError("corpus.sample_rate must be a multiple of corpus.fps")


def build_corpus(cfg: CorpusConfig, out_dir: PathLike, workers: int = 1) -> CorpusManifest:
    """
    Generates every utterance of the corpus and writes the manifest.

    Speakers are numbered globally across splits (train first), so split speaker
    sets never overlap. Groups alternate to keep them balanced.
    """
    _validate_corpus_config(cfg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    jobs = []
    index = 0
    for split in config.SPLITS:
        for _ in range(cfg.speakers_in(split)):
            group = GROUPS[index % 2]
            for j in range(cfg.utterances_per_speaker):
                jobs.append(_UttJob(
                    global_seed=cfg.seed,
                    index=index,
                    group=group,
                    split=split,
                    utt_id=f"{speaker_name(index)}_u{j:03d}",
                    sample_rate=cfg.sample_rate,
                    fps=cfg.fps,
                    resolution=cfg.resolution,
                    min_duration_s=cfg.min_duration_s,
                    max_duration_s=cfg.max_duration_s,
                    out_dir=str(out_dir),
                ))
            index += 1

    logger.info(f"Generating {len(jobs)} utterances for {index} speakers into {out_dir} (workers={workers})")
    progress = dict(total=len(jobs), desc="corpus", disable=not config.SHOW_PROGRESS)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(tqdm(pool.map(_generate_and_store, jobs, chunksize=8), **progress))
    else:
        rows = [_generate_and_store(job) for job in tqdm(jobs, **progress)]

    manifest = CorpusManifest(
        root=out_dir,
        global_seed=cfg.seed,
        sample_rate=cfg.sample_rate,
        fps=cfg.fps,
        resolution=cfg.resolution,
        records=[UtteranceRecord(**row) for row in rows],
    )
    artifact_storage.write_jsonl(out_dir / "manifest.jsonl", rows)
    artifact_storage.write_json(out_dir / "corpus.json", {
        "global_seed": cfg.seed,
        "sample_rate": cfg.sample_rate,
        "fps": cfg.fps,
        "resolution": cfg.resolution,
        "counts": manifest.counts,
        "speakers": {s: len(manifest.speakers(s)) for s in config.SPLITS},
    })
    logger.info(f"Corpus written: {manifest.counts}")
    return manifest


def load_manifest(path: PathLike) -> CorpusManifest:
    """Loads a manifest from its directory or from manifest.jsonl / corpus.json."""
    path = Path(path)
    root = path if path.is_dir() else path.parent
    header_file = root / "corpus.json"
    if not header_file.exists():
        raise ConfigError(f"No corpus.json next to {path}; is this a corpus directory?")
    header = artifact_storage.read_json(header_file)
    rows = artifact_storage.read_jsonl(root / "manifest.jsonl")
    return CorpusManifest(
        root=root,
        global_seed=int(header["global_seed"]),
        sample_rate=int(header["sample_rate"]),
        fps=int(header["fps"]),
        resolution=int(header["resolution"]),
        records=[UtteranceRecord(**row) for row in rows],
    )


class UtteranceStore:
    """Loads utterances of a manifest from disk with a small LRU cache."""

    def __init__(self, manifest: CorpusManifest, cache_size: int = 512):
        self.manifest = manifest
        self.cache_size = cache_size
        self._by_id = {r.utt_id: r for r in manifest.records}
        self._load = lru_cache(maxsize=cache_size)(self._read)

    def __getstate__(self):
        return {"manifest": self.manifest, "cache_size": self.cache_size}

    def __setstate__(self, state):
        self.__init__(state["manifest"], state["cache_size"])

    def __contains__(self, utt_id: str) -> bool:
        return utt_id in self._by_id

    def record(self, utt_id: str) -> UtteranceRecord:
        if utt_id not in self._by_id:
            raise ConfigError(f"Utterance '{utt_id}' is not in the manifest")
        return self._by_id[utt_id]

    def get(self, utt_id: str) -> Utterance:
        return self._load(utt_id)

    def _read(self, utt_id: str) -> Utterance:
        rec = self.record(utt_id)
        samples, sample_rate = artifact_storage.read_wav(self.manifest.root / rec.audio_path)
        tensors = artifact_storage.read_tensors(self.manifest.root / rec.video_path)
        frames = tensors["frames"].astype(np.float32) / 32767.0
        return Utterance(
            speaker_id=rec.speaker_id,
            utt_id=rec.utt_id,
            audio=Waveform(samples, sample_rate),
            video=VideoStream(frames=frames, fps=self.manifest.fps, field="face"),
            aperture=tensors["aperture"].astype(np.float64),
            group=rec.group,
        )

"""
Training Kit Module.

Losses (SI-SNR, frame-level cross-entropy), the plateau learning-rate schedule
and the four training procedures:

- train_baseline: joint visual branch on dsav;
- train_spk_step1 / train_spk_step2: identity extractor trained by speaker
  classification, then frozen while the extraction network learns on dssv
  (visual stream shuffled every epoch, never time-aligned);
- train_sync: synchronization extractor on ssav (same-speaker mixtures);
- train_davse: both pre-trained extractors frozen, fusion and extraction trained
  on dsav.

All randomness is derived from the schedule seed, so DataLoader workers do not
change results.
"""
import copy
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

import artifact_storage
import config
import mixsim
from avcorpus import UtteranceStore, VideoStream, Waveform, crop_mouth, stable_seed
from config import TrainSchedule
from errors import (ConfigError, DecouplingViolation, LabelError, ShapeError, StateError,
                    VariantConstraintError, ZeroEnergyError)
from mixsim import MixtureDataset
from sepnet import SeparationModel, load_branch, save_checkpoint

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
EPS = 1e-8


# --- Metrics and losses ---

@dataclass
class SISnrBreakdown:
    s_target: np.ndarray
    e_noise: np.ndarray
    value_db: float


def _samples(x) -> np.ndarray:
    if isinstance(x, Waveform):
        return x.samples
    return np.asarray(x, dtype=np.float64)


def si_snr(s, s_hat, eps: float = EPS, zero_mean: bool = True) -> tuple:
    """
    Scale-invariant SNR of estimate `s_hat` against reference `s`, in dB.

    `eps` is relative to the estimate energy, so scaling `s_hat` leaves the value unchanged;
    an all-zero estimate falls back to an absolute `eps` and scores 0 dB.

    Returns (value_db, SISnrBreakdown).
    """
    s = _samples(s).astype(np.float64)
    s_hat = _samples(s_hat).astype(np.float64)
    if s.shape != s_hat.shape or s.ndim != 1:
        raise ShapeError(f"si_snr needs two equal-length 1-D signals, got {s.shape} and {s_hat.shape}")
    if s.size == 0:
        raise ShapeError("si_snr needs non-empty signals")
    if zero_mean:
        s = s - s.mean()
        s_hat = s_hat - s_hat.mean()
    s_energy = np.dot(s, s)
    if s_energy <= 0.0:
        raise ZeroEnergyError("Reference signal has zero energy")
    s_target = np.dot(s_hat, s) / s_energy * s
    e_noise = s_hat - s_target
    hat_energy = np.dot(s_hat, s_hat)
    floor = eps * hat_energy if hat_energy > 0.0 else eps
    value = float(10.0 * np.log10((np.dot(s_target, s_target) + floor) / (np.dot(e_noise, e_noise) + floor)))
    return value, SISnrBreakdown(s_target=s_target, e_noise=e_noise, value_db=value)


def si_snr_tensor(s: torch.Tensor, s_hat: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Batched SI-SNR in dB over the last axis."""
    s = s - s.mean(dim=-1, keepdim=True)
    s_hat = s_hat - s_hat.mean(dim=-1, keepdim=True)
    s_energy = (s * s).sum(dim=-1, keepdim=True).clamp_min(torch.finfo(s.dtype).tiny)
    s_target = (s_hat * s).sum(dim=-1, keepdim=True) / s_energy * s
    e_noise = s_hat - s_target
    hat_energy = (s_hat * s_hat).sum(-1)
    floor = torch.where(hat_energy > 0, eps * hat_energy, torch.full_like(hat_energy, eps))
    return 10.0 * torch.log10(((s_target ** 2).sum(-1) + floor) / ((e_noise ** 2).sum(-1) + floor))


def si_snr_loss(s: torch.Tensor, s_hat: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Negative SI-SNR averaged over the batch."""
    return -si_snr_tensor(s, s_hat, eps).mean()


def ce_loss(logits, label: int) -> float:
    """Cross-entropy of per-frame logits [L, C] against one label, averaged over frames."""
    logits = torch.as_tensor(np.asarray(logits), dtype=torch.float64)
    if logits.dim() != 2:
        raise ShapeError(f"ce_loss expects logits of shape [L, C], got {tuple(logits.shape)}")
    n_classes = logits.shape[1]
    if not 0 <= label < n_classes:
        raise LabelError(f"Label {label} outside [0, {n_classes})")
    targets = torch.full((logits.shape[0],), int(label), dtype=torch.long)
    return float(F.cross_entropy(logits, targets))


def frame_ce(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """logits [B, T, C], labels [B] -> mean CE over all frames."""
    b, t, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise LabelError(f"Labels must lie in [0, {c})")
    return F.cross_entropy(logits.reshape(b * t, c), labels.repeat_interleave(t))


# --- Schedule ---

class PlateauController:
    """
    Halves the learning rate after `plateau_halve` epochs without a strict
    improvement of the best validation loss, and stops after `plateau_stop`.
    """

    def __init__(self, schedule: TrainSchedule):
        self.schedule = schedule
        self.lr = schedule.initial_lr
        self.best = float("inf")
        self.stale = 0
        self.since_halve = 0
        self.epoch = 0
        self.stop_reason = None

    def step(self, val_loss: float) -> str:
        """Registers one epoch; returns 'improved', 'continue', 'halve' or 'stop'."""
        self.epoch += 1
        if val_loss < self.best:
            self.best = val_loss
            self.stale = 0
            self.since_halve = 0
            action = "improved"
        else:
            self.stale += 1
            self.since_halve += 1
            if self.stale >= self.schedule.plateau_stop:
                self.stop_reason = "plateau"
                return "stop"
            if self.since_halve >= self.schedule.plateau_halve:
                self.lr /= 2.0
                self.since_halve = 0
                action = "halve"
            else:
                action = "continue"
        if self.epoch >= self.schedule.max_epochs:
            self.stop_reason = "max_epochs"
            return "stop"
        return action


def simulate_schedule(val_losses: list, schedule: TrainSchedule) -> dict:
    """Replays a dev-loss trace: learning rate used per epoch and where training stops."""
    controller = PlateauController(schedule)
    lrs = []
    for loss in val_losses:
        lrs.append(controller.lr)
        if controller.step(loss) == "stop":
            break
    return {"lrs": lrs, "stop_epoch": len(lrs), "stop_reason": controller.stop_reason}


# --- Logs ---

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    epoch_time: float
    metrics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "lr": self.lr,
            "epoch_time": self.epoch_time,
            **self.metrics,
        }


@dataclass
class TrainLog:
    procedure: str
    epochs: list = field(default_factory=list)
    checkpoint_path: Optional[str] = None
    stop_reason: Optional[str] = None
    best_epoch: Optional[int] = None
    best_val_loss: Optional[float] = None

    @property
    def lrs(self) -> list:
        return [e.lr for e in self.epochs]

    def summary(self) -> dict:
        return {
            "procedure": self.procedure,
            "epochs": len(self.epochs),
            "checkpoint_path": self.checkpoint_path,
            "stop_reason": self.stop_reason,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
        }


# --- Data ---

def _frames_for(video: VideoStream, visual_field: str) -> np.ndarray:
    if visual_field == "mouth":
        video = crop_mouth(video)
    return video.frames


class MixtureTorchDataset(Dataset):
    """Renders descriptor rows into (mixture, target, frames) tensors."""

    def __init__(self, dataset: MixtureDataset, store: UtteranceStore, visual_field: str = "face"):
        self.dataset = dataset
        self.store = store
        self.visual_field = visual_field

    def __len__(self) -> int:
        return len(self.dataset)

    def __getitem__(self, i: int) -> dict:
        ex = self.dataset.render(i, self.store)
        return {
            "mixture": torch.from_numpy(ex.mixture.samples.astype(np.float32)),
            "target": torch.from_numpy(ex.target.samples.astype(np.float32)),
            "frames": torch.from_numpy(np.ascontiguousarray(_frames_for(ex.visual, self.visual_field))),
            "spec": self.dataset[i],
        }


class MixtureCollator:
    """Crops a batch to its shortest mixture (and to `segment` samples when set)."""

    def __init__(self, hop: int, segment: Optional[int] = None):
        self.hop = hop
        self.segment = segment

    def __call__(self, batch: list) -> dict:
        n = min(item["mixture"].shape[0] for item in batch)
        if self.segment:
            n = min(n, self.segment)
        n_frames = -(-n // self.hop)
        return {
            "mixture": torch.stack([item["mixture"][:n] for item in batch]),
            "target": torch.stack([item["target"][:n] for item in batch]),
            "frames": torch.stack([item["frames"][:n_frames] for item in batch]),
            "specs": [item["spec"] for item in batch],
        }


class IdentityFrameDataset(Dataset):
    """Single-speaker visual streams labelled with the speaker's class index."""

    def __init__(self, store: UtteranceStore, utt_ids: list, labels: dict, visual_field: str = "face"):
        self.store = store
        self.utt_ids = list(utt_ids)
        self.labels = labels
        self.visual_field = visual_field

    def __len__(self) -> int:
        return len(self.utt_ids)

    def __getitem__(self, i: int) -> dict:
        utt = self.store.get(self.utt_ids[i])
        return {
            "frames": torch.from_numpy(np.ascontiguousarray(_frames_for(utt.video, self.visual_field))),
            "label": self.labels[utt.speaker_id],
        }


class IdentityCollator:
    def __init__(self, segment_frames: Optional[int] = None):
        self.segment_frames = segment_frames

    def __call__(self, batch: list) -> dict:
        t = min(item["frames"].shape[0] for item in batch)
        if self.segment_frames:
            t = min(t, self.segment_frames)
        return {
            "frames": torch.stack([item["frames"][:t] for item in batch]),
            "labels": torch.tensor([item["label"] for item in batch], dtype=torch.long),
        }


def epoch_order(n: int, schedule: TrainSchedule, epoch: int) -> list:
    """Deterministic per-epoch permutation, truncated to max_batches_per_epoch."""
    rng = np.random.default_rng(stable_seed(schedule.seed, "epoch", epoch))
    order = [int(i) for i in rng.permutation(n)]
    if schedule.max_batches_per_epoch:
        order = order[:schedule.max_batches_per_epoch * schedule.batch_size]
    return order


def _loader(dataset: Dataset, collate: Callable, schedule: TrainSchedule, order: Optional[list] = None) -> DataLoader:
    return DataLoader(
        dataset,
        batch_size=schedule.batch_size,
        sampler=order if order is not None else list(range(len(dataset))),
        collate_fn=collate,
        num_workers=schedule.num_workers,
    )


def _mixture_collator(model: SeparationModel, schedule: TrainSchedule) -> MixtureCollator:
    cfg = model.config
    segment = int(schedule.segment_s * cfg.sample_rate) if schedule.segment_s else None
    return MixtureCollator(cfg.sample_rate // cfg.fps, segment)


# --- Decoupling checks ---

def check_shuffled_batch(specs: list) -> None:
    """Shuffled-visual training must never see a time-aligned visual stream."""
    for spec in specs:
        if spec.visual_utt == spec.target_utt:
            raise DecouplingViolation(f"Mixture {spec.index} pairs target {spec.target_utt} with its own visual stream")


def check_same_speaker_batch(specs: list) -> None:
    """Synchronization training must only see same-speaker mixtures."""
    for spec in specs:
        if spec.target_speaker_id != spec.interferer_speaker_id:
            raise DecouplingViolation(
                f"Mixture {spec.index} mixes {spec.target_speaker_id} with {spec.interferer_speaker_id}"
            )


def _require(model: SeparationModel, variant: str, datasets: list, dataset_variant: str) -> None:
    if model.variant != variant:
        raise VariantConstraintError(f"Expected a {variant} model, got {model.variant}")
    for ds in datasets:
        if ds.variant != dataset_variant:
            raise VariantConstraintError(f"{variant} training needs {dataset_variant} data, got {ds.variant}")


# --- Loop ---

def _fit(
    model: SeparationModel,
    procedure: str,
    schedule: TrainSchedule,
    parameters: list,
    train_batches: Callable,
    batch_loss: Callable,
    evaluate_dev: Callable,
    checkpoint_path: PathLike,
    log_path: Optional[PathLike] = None,
) -> TrainLog:
    """
    Adam training with the plateau schedule; keeps the best-dev weights.

    train_batches(epoch) -> iterable of batches; batch_loss(batch) -> scalar
    tensor; evaluate_dev() -> (val_loss, metrics dict).
    """
    torch.manual_seed(schedule.seed)
    if not parameters:
        raise StateError(f"{procedure}: nothing to train (every parameter is frozen)")
    optimizer = torch.optim.Adam(parameters, lr=schedule.initial_lr)
    controller = PlateauController(schedule)
    log = TrainLog(procedure=procedure)
    if log_path:
        Path(log_path).unlink(missing_ok=True)

    counts = model.count_parameters()
    logger.info(f"{procedure}: {counts['total']} parameters, {sum(p.numel() for p in parameters)} trained")

    best_state = copy.deepcopy(model.state_dict())
    for epoch in range(1, schedule.max_epochs + 1):
        lr = controller.lr
        for group in optimizer.param_groups:
            group["lr"] = lr
        started = time.perf_counter()

        model.train()
        losses = []
        for batch in tqdm(train_batches(epoch), desc=f"{procedure} epoch {epoch}", disable=not config.SHOW_PROGRESS, leave=False):
            optimizer.zero_grad()
            loss = batch_loss(batch)
            loss.backward()
            if schedule.clip_grad_norm:
                torch.nn.utils.clip_grad_norm_(parameters, schedule.clip_grad_norm)
            optimizer.step()
            model.training_step += 1
            losses.append(float(loss.detach()))

        model.eval()
        with torch.no_grad():
            val_loss, metrics = evaluate_dev()

        record = EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(losses)) if losses else float("nan"),
            val_loss=float(val_loss),
            lr=lr,
            epoch_time=time.perf_counter() - started,
            metrics=metrics,
        )
        log.epochs.append(record)
        if log_path:
            artifact_storage.append_jsonl(log_path, record.to_dict())
        logger.info(f"{procedure} epoch {epoch}: train {record.train_loss:.4f} dev {record.val_loss:.4f} lr {lr:g}")

        action = controller.step(val_loss)
        if action == "improved" or log.best_epoch is None:
            best_state = copy.deepcopy(model.state_dict())
            log.best_epoch = epoch
            log.best_val_loss = float(val_loss)
        if action == "halve":
            logger.info(f"{procedure}: no improvement for {schedule.plateau_halve} epochs, lr -> {controller.lr:g}")
        if action == "stop":
            break

    log.stop_reason = controller.stop_reason or "max_epochs"
    model.load_state_dict(best_state)
    save_checkpoint(model, checkpoint_path, extra={
        "procedure": procedure,
        "best_epoch": log.best_epoch,
        "best_val_loss": log.best_val_loss,
        "stop_reason": log.stop_reason,
    })
    log.checkpoint_path = str(checkpoint_path)
    logger.info(f"{procedure}: stopped ({log.stop_reason}) after {len(log.epochs)} epochs, best epoch {log.best_epoch}")
    return log


def _separation_fit(
    model: SeparationModel,
    procedure: str,
    train_for_epoch: Callable,
    dev: MixtureDataset,
    schedule: TrainSchedule,
    store: UtteranceStore,
    checkpoint_path: PathLike,
    log_path: Optional[PathLike],
    check_batch: Optional[Callable] = None,
) -> TrainLog:
    collate = _mixture_collator(model, schedule)
    field_ = model.config.visual_field
    dev_loader = _loader(MixtureTorchDataset(dev, store, field_), collate, schedule)

    def train_batches(epoch: int):
        ds = train_for_epoch(epoch)
        return _loader(MixtureTorchDataset(ds, store, field_), collate, schedule, epoch_order(len(ds), schedule, epoch))

    def batch_loss(batch: dict) -> torch.Tensor:
        if check_batch:
            check_batch(batch["specs"])
        estimate = model.separate(batch["mixture"], batch["frames"])[0]
        return si_snr_loss(batch["target"], estimate)

    def evaluate_dev() -> tuple:
        total, count = 0.0, 0
        for batch in dev_loader:
            if check_batch:
                check_batch(batch["specs"])
            estimate = model.separate(batch["mixture"], batch["frames"])[0]
            total += float(-si_snr_tensor(batch["target"], estimate).sum())
            count += batch["mixture"].shape[0]
        if count == 0:
            raise ConfigError(f"{procedure}: the dev set is empty")
        return total / count, {}

    return _fit(model, procedure, schedule, model.trainable_parameters(), train_batches, batch_loss,
                evaluate_dev, checkpoint_path, log_path)


# --- Procedures ---

def train_baseline(model: SeparationModel, train: MixtureDataset, dev: MixtureDataset, schedule: TrainSchedule,
                   store: UtteranceStore, checkpoint_path: PathLike, log_path: Optional[PathLike] = None) -> TrainLog:
    _require(model, "baseline", [train, dev], "dsav")
    model.stage = "baseline"
    return _separation_fit(model, "baseline", lambda epoch: train, dev, schedule, store, checkpoint_path, log_path)


def train_sync(model: SeparationModel, train: MixtureDataset, dev: MixtureDataset, schedule: TrainSchedule,
               store: UtteranceStore, checkpoint_path: PathLike, log_path: Optional[PathLike] = None) -> TrainLog:
    _require(model, "sync", [train, dev], "ssav")
    model.stage = "sync"
    return _separation_fit(model, "sync", lambda epoch: train, dev, schedule, store, checkpoint_path, log_path,
                           check_batch=check_same_speaker_batch)


def identity_split(store: UtteranceStore, split: str = "train") -> tuple:
    """(train utt ids, held-out utt ids, labels): the last utterance of each speaker is held out."""
    manifest = store.manifest
    speakers = [sid for sid, _ in manifest.speakers(split)]
    labels = {sid: i for i, sid in enumerate(speakers)}
    train_ids, held_out = [], []
    for sid in speakers:
        utts = [r.utt_id for r in manifest.utterances_of(sid)]
        train_ids.extend(utts[:-1])
        held_out.append(utts[-1])
    return train_ids, held_out, labels


def frame_accuracy(model: SeparationModel, loader: DataLoader) -> tuple:
    """(mean CE, frame accuracy) of the identity classifier over a loader."""
    total_loss, correct, frames = 0.0, 0, 0
    with torch.no_grad():
        for batch in loader:
            logits = model.identity_logits(batch["frames"])
            n = logits.shape[0] * logits.shape[1]
            total_loss += float(frame_ce(logits, batch["labels"])) * n
            predicted = logits.argmax(dim=-1)
            correct += int((predicted == batch["labels"][:, None]).sum())
            frames += n
    if frames == 0:
        raise ConfigError("No frames to score")
    return total_loss / frames, correct / frames


def train_spk_step1(model: SeparationModel, store: UtteranceStore, schedule: TrainSchedule,
                    checkpoint_path: PathLike, log_path: Optional[PathLike] = None, split: str = "train") -> TrainLog:
    """
    Trains the identity extractor and classifier with frame-level cross-entropy
    on single-speaker visual streams, then freezes both.
    """
    if model.variant != "spk":
        raise VariantConstraintError(f"Identity pre-training needs a spk model, got {model.variant}")
    train_ids, held_out, labels = identity_split(store, split)
    if len(labels) > model.classifier.n_classes:
        raise ConfigError(f"{len(labels)} training speakers but the classifier has {model.classifier.n_classes} classes")
    model.speakers = sorted(labels, key=labels.get)

    segment_frames = int(schedule.segment_s * model.config.fps) if schedule.segment_s else None
    collate = IdentityCollator(segment_frames)
    field_ = model.config.visual_field
    train_ds = IdentityFrameDataset(store, train_ids, labels, field_)
    dev_loader = _loader(IdentityFrameDataset(store, held_out, labels, field_), IdentityCollator(), schedule)

    def train_batches(epoch: int):
        return _loader(train_ds, collate, schedule, epoch_order(len(train_ds), schedule, epoch))

    def batch_loss(batch: dict) -> torch.Tensor:
        return frame_ce(model.identity_logits(batch["frames"]), batch["labels"])

    def evaluate_dev() -> tuple:
        loss, accuracy = frame_accuracy(model, dev_loader)
        return loss, {"frame_accuracy": accuracy}

    parameters = [p for name in ("identity", "classifier") for p in model.parameter_groups()[name].parameters()]
    model.stage = "spk_step1"
    log = _fit(model, "spk_step1", schedule, parameters, train_batches, batch_loss, evaluate_dev,
               checkpoint_path, log_path)
    model.freeze("identity", "classifier")
    save_checkpoint(model, checkpoint_path, extra={"procedure": "spk_step1", **log.summary()})
    return log


def train_spk_step2(model: SeparationModel, train: MixtureDataset, dev: MixtureDataset, schedule: TrainSchedule,
                    store: UtteranceStore, checkpoint_path: PathLike, log_path: Optional[PathLike] = None) -> TrainLog:
    """SI-SNR training on dssv with the identity extractor frozen; visuals re-shuffled every epoch."""
    _require(model, "spk", [train, dev], "dssv")
    if not model.is_frozen("identity"):
        raise StateError("Identity extractor is not frozen; run identity pre-training (step 1) first")

    def train_for_epoch(epoch: int) -> MixtureDataset:
        return mixsim.reshuffle_epoch(train, stable_seed(schedule.seed, "reshuffle", epoch) % (2 ** 31))

    model.stage = "spk"
    return _separation_fit(model, "spk_step2", train_for_epoch, dev, schedule, store, checkpoint_path, log_path,
                           check_batch=check_shuffled_batch)


def train_davse(model: SeparationModel, train: MixtureDataset, dev: MixtureDataset, schedule: TrainSchedule,
                store: UtteranceStore, spk_ckpt: PathLike, sync_ckpt: PathLike, checkpoint_path: PathLike,
                log_path: Optional[PathLike] = None) -> TrainLog:
    """Loads and freezes both extractors, then trains fusion and extraction on dsav."""
    _require(model, "davse", [train, dev], "dsav")
    load_branch(model, spk_ckpt, "identity", freeze=True)
    load_branch(model, sync_ckpt, "sync", freeze=True)
    counts = model.count_parameters()
    logger.info(f"davse: {counts['trainable']} of {counts['total']} parameters trainable")
    model.stage = "davse"
    return _separation_fit(model, "davse", lambda epoch: train, dev, schedule, store, checkpoint_path, log_path)

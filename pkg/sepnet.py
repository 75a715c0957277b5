"""
Separation Network Module.

Time-domain, mask-based audio-visual speaker extraction with four variants:

- baseline: one joint visual branch (2 x D_v channels);
- spk: identity extractor + frame-level speaker classifier;
- sync: synchronization extractor;
- davse: frozen identity and sync extractors fused by a 1x1 convolution.

All variants share the audio encoder (strided Conv1d + ReLU), a TCN extraction
network emitting a sigmoid mask, and the transposed-convolution decoder.
Checkpoints are AVT1 containers of named tensors with a JSON header sidecar.
"""
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

import artifact_storage
import config
from avcorpus import VideoStream, Waveform, crop_mouth
from config import ModelConfig
from errors import CheckpointError, ConfigError, InputTooShort, ShapeError, StorageError, VariantConstraintError

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

BRANCHES_BY_VARIANT = {
    "baseline": ("joint",),
    "spk": ("identity",),
    "sync": ("sync",),
    "davse": ("identity", "sync"),
}
EMBEDDING_TAGS = ("V", "V_I", "V_S", "V_IE", "V_SE", "V_IS")


@dataclass
class EmbeddingSequence:
    features: np.ndarray
    tag: str = "V"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2:
            raise ShapeError(f"Embedding sequence must be L x N, got shape {self.features.shape}")
        if self.tag not in EMBEDDING_TAGS:
            raise ShapeError(f"Unknown embedding tag '{self.tag}'")

    @property
    def length(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])


# --- Building blocks ---

class AudioEncoder(nn.Module):
    """[B, n] -> [B, N_a, T_a]"""

    def __init__(self, n_filters: int, kernel: int, stride: int):
        super().__init__()
        self.kernel = kernel
        self.stride = stride
        self.conv = nn.Conv1d(1, n_filters, kernel_size=kernel, stride=stride, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.conv(x.unsqueeze(1)))


class AudioDecoder(nn.Module):
    """[B, N_a, T_a] -> [B, (T_a - 1) * S_a + K_a]"""

    def __init__(self, n_filters: int, kernel: int, stride: int):
        super().__init__()
        self.deconv = nn.ConvTranspose1d(n_filters, 1, kernel_size=kernel, stride=stride, bias=False)

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        return self.deconv(w).squeeze(1)


class VisualFrontend(nn.Module):
    """
    One 3-D convolution over (time, height, width) followed by three stride-2
    2-D convolutions applied frame by frame and global spatial average pooling.

    [B, T, H, W] -> [B, out_dim, T]
    """

    def __init__(self, channels: list, out_dim: int, temporal_kernel: int, spatial_kernel: int):
        super().__init__()
        c0, c1 = channels
        self.conv3d = nn.Conv3d(
            1, c0,
            kernel_size=(temporal_kernel, spatial_kernel, spatial_kernel),
            padding=(temporal_kernel // 2, spatial_kernel // 2, spatial_kernel // 2),
        )
        self.conv2d = nn.Sequential(
            nn.Conv2d(c0, c0, kernel_size=3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(c0, c1, kernel_size=3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(c1, out_dim, kernel_size=3, stride=2, padding=1),
            nn.ReLU(),
        )

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        b, t, h, w = frames.shape
        x = F.relu(self.conv3d(frames.unsqueeze(1)))           # [B, c0, T, H, W]
        x = x.transpose(1, 2).reshape(b * t, -1, h, w)         # [B*T, c0, H, W]
        x = self.conv2d(x).mean(dim=(2, 3))                    # [B*T, out]
        return x.reshape(b, t, -1).transpose(1, 2)


class VideoTemporalBlock(nn.Module):
    """Residual stack of ReLU -> BN -> depthwise conv -> pointwise conv layers."""

    def __init__(self, dim: int, layers: int):
        super().__init__()
        self.layers = nn.ModuleList([
            nn.Sequential(
                nn.ReLU(),
                nn.BatchNorm1d(dim),
                nn.Conv1d(dim, dim, kernel_size=3, padding=1, groups=dim),
                nn.Conv1d(dim, dim, kernel_size=1),
            )
            for _ in range(layers)
        ])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            x = x + layer(x)
        return x


class VisualBranch(nn.Module):
    def __init__(self, cfg: ModelConfig, out_dim: int):
        super().__init__()
        self.resolution = cfg.resolution
        self.out_dim = out_dim
        self.frontend = VisualFrontend(
            cfg.frontend_channels, out_dim, cfg.frontend_temporal_kernel, cfg.frontend_spatial_kernel
        )
        self.temporal = VideoTemporalBlock(out_dim, cfg.temporal_layers)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.dim() != 4 or frames.shape[-2:] != (self.resolution, self.resolution):
            raise ShapeError(
                f"Expected video of shape [B, T, {self.resolution}, {self.resolution}], got {tuple(frames.shape)}"
            )
        return self.temporal(self.frontend(frames))


class TemporalConvBlock(nn.Module):
    def __init__(self, bottleneck: int, hidden: int, kernel: int, dilation: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv1d(bottleneck, hidden, kernel_size=1),
            nn.PReLU(),
            nn.GroupNorm(1, hidden, eps=1e-8),
            nn.Conv1d(hidden, hidden, kernel_size=kernel, dilation=dilation,
                      padding=(kernel - 1) // 2 * dilation, groups=hidden),
            nn.PReLU(),
            nn.GroupNorm(1, hidden, eps=1e-8),
            nn.Conv1d(hidden, bottleneck, kernel_size=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.net(x)


class ExtractionNetwork(nn.Module):
    """TCN over [latent audio ; aligned visual] emitting a sigmoid mask."""

    def __init__(self, n_audio: int, visual_dim: int, tcn: config.TcnConfig):
        super().__init__()
        in_dim = n_audio + visual_dim
        self.norm = nn.GroupNorm(1, in_dim, eps=1e-8)
        self.bottleneck = nn.Conv1d(in_dim, tcn.bottleneck, kernel_size=1)
        self.blocks = nn.Sequential(*[
            TemporalConvBlock(tcn.bottleneck, tcn.hidden, tcn.kernel, 2 ** x)
            for _ in range(tcn.repeats)
            for x in range(tcn.blocks_per_repeat)
        ])
        self.output = nn.Sequential(nn.PReLU(), nn.Conv1d(tcn.bottleneck, n_audio, kernel_size=1))

    def forward(self, latent: torch.Tensor, visual: torch.Tensor) -> torch.Tensor:
        y = self.bottleneck(self.norm(torch.cat([latent, visual], dim=1)))
        return torch.sigmoid(self.output(self.blocks(y)))


class SpkClassifierHead(nn.Module):
    """Frame-level speaker classifier: logits = W v for every frame."""

    def __init__(self, dim: int, n_speakers: int):
        super().__init__()
        self.linear = nn.Linear(dim, n_speakers, bias=False)

    @property
    def n_classes(self) -> int:
        return self.linear.out_features

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        return self.linear(frames)


def make_fusion_layer(branch_dim: int, out_dim: int) -> nn.Conv1d:
    return nn.Conv1d(2 * branch_dim, out_dim, kernel_size=1, stride=1)


# --- Model ---

class SeparationModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        self.variant = cfg.variant
        self.frozen_set = []
        self.stage = None
        self.speakers = []
        self.training_step = 0

        d = cfg.visual_dim
        self.encoder = AudioEncoder(cfg.n_audio_filters, cfg.audio_kernel, cfg.audio_stride)
        self.decoder = AudioDecoder(cfg.n_audio_filters, cfg.audio_kernel, cfg.audio_stride)
        self.visual_dim = 2 * d if cfg.variant == "baseline" else d
        self.extractor = ExtractionNetwork(cfg.n_audio_filters, self.visual_dim, cfg.tcn)

        if cfg.variant == "baseline":
            self.joint = VisualBranch(cfg, 2 * d)
        if cfg.variant in ("spk", "davse"):
            self.identity = VisualBranch(cfg, d)
        if cfg.variant in ("sync", "davse"):
            self.sync = VisualBranch(cfg, d)
        if cfg.variant == "spk":
            self.classifier = SpkClassifierHead(d, cfg.n_speakers)
        if cfg.variant == "davse":
            self.fusion = make_fusion_layer(d, d)

    # --- parameter groups ---

    def parameter_groups(self) -> dict:
        names = ["encoder", "decoder", "extractor", "joint", "identity", "sync", "classifier", "fusion"]
        return {name: getattr(self, name) for name in names if hasattr(self, name)}

    def freeze(self, *groups: str) -> None:
        """Excludes the named groups from gradient updates and keeps them in eval mode."""
        available = self.parameter_groups()
        for name in groups:
            if name not in available:
                raise ConfigError(f"Model variant {self.variant} has no parameter group '{name}'")
            for p in available[name].parameters():
                p.requires_grad_(False)
            available[name].eval()
            if name not in self.frozen_set:
                self.frozen_set.append(name)
        self.frozen_set.sort()

    def is_frozen(self, group: str) -> bool:
        return group in self.frozen_set

    def train(self, mode: bool = True):
        super().train(mode)
        groups = self.parameter_groups()
        for name in self.frozen_set:
            groups[name].eval()
        return self

    def trainable_parameters(self) -> list:
        return [p for p in self.parameters() if p.requires_grad]

    def count_parameters(self) -> dict:
        total = sum(p.numel() for p in self.parameters())
        trainable = sum(p.numel() for p in self.parameters() if p.requires_grad)
        return {"total": int(total), "trainable": int(trainable)}

    @property
    def alignment_ratio(self) -> int:
        return self.config.alignment_ratio

    # --- forward paths ---

    def visual_embedding(self, frames: torch.Tensor) -> tuple:
        """Returns (V [B, D, T_v], {tag: tensor}) for the variant's routing."""
        if self.variant == "baseline":
            v = self.joint(frames)
            return v, {"V": v}
        if self.variant == "spk":
            v_ie = self.identity(frames)
            return v_ie, {"V_IE": v_ie, "V": v_ie}
        if self.variant == "sync":
            v_se = self.sync(frames)
            return v_se, {"V_SE": v_se, "V": v_se}
        v_i = self.identity(frames)
        v_s = self.sync(frames)
        v_is = torch.cat([v_i, v_s], dim=1)
        v = self.fusion(v_is)
        return v, {"V_I": v_i, "V_S": v_s, "V_IS": v_is, "V": v}

    def identity_logits(self, frames: torch.Tensor) -> torch.Tensor:
        """Per-frame speaker logits [B, T, C] (spk variant only)."""
        if not hasattr(self, "classifier"):
            raise VariantConstraintError(f"Variant {self.variant} has no speaker classifier")
        return self.classifier(self.identity(frames).transpose(1, 2))

    def separate(self, mixture: torch.Tensor, frames: torch.Tensor, mask_override=None) -> tuple:
        """
        mixture [B, n], frames [B, T_v, H, W] -> (estimate [B, n], mask [B, N_a, T_a], V [B, D, T_v])
        """
        n = mixture.shape[-1]
        kernel, stride = self.config.audio_kernel, self.config.audio_stride
        if n < kernel:
            raise InputTooShort(f"Waveform of {n} samples is shorter than the encoder kernel ({kernel})")
        pad = (stride - (n - kernel) % stride) % stride
        latent = self.encoder(F.pad(mixture, (0, pad)))

        v, _ = self.visual_embedding(frames)
        if mask_override is None:
            aligned = align_visual(v, self.alignment_ratio, latent.shape[-1])
            mask = self.extractor(latent, aligned)
        else:
            mask = torch.as_tensor(mask_override, dtype=latent.dtype).expand_as(latent)
        estimate = self.decoder(latent * mask)[..., :n]
        return estimate, mask, v

    def forward(self, mixture: torch.Tensor, frames: torch.Tensor) -> torch.Tensor:
        return self.separate(mixture, frames)[0]


def build_model(cfg: ModelConfig, seed: Optional[int] = None) -> SeparationModel:
    if seed is not None:
        torch.manual_seed(seed)
    model = SeparationModel(cfg)
    counts = model.count_parameters()
    logger.info(f"Built {cfg.variant} model ({cfg.visual_field}): {counts['total']} parameters, {counts['trainable']} trainable")
    return model


# --- Alignment ---

def upsample_tensor(x: torch.Tensor, ratio: int) -> torch.Tensor:
    """[B, D, L] -> [B, D, L * ratio] by linear interpolation along time."""
    if ratio < 1:
        raise ConfigError(f"Upsampling ratio must be >= 1, got {ratio}")
    if ratio == 1:
        return x
    return F.interpolate(x, size=x.shape[-1] * ratio, mode="linear", align_corners=False)


def fit_length(x: torch.Tensor, length: int) -> torch.Tensor:
    """Truncates or edge-pads the last axis to `length`."""
    if x.shape[-1] >= length:
        return x[..., :length]
    return F.pad(x, (0, length - x.shape[-1]), mode="replicate")


def align_visual(v: torch.Tensor, ratio: int, length: int) -> torch.Tensor:
    return fit_length(upsample_tensor(v, ratio), length)


# --- Single-example operations ---

def prepare_frames(model: SeparationModel, video: VideoStream) -> torch.Tensor:
    """Crops to the model's visual field when needed and adds a batch axis."""
    field = model.config.visual_field
    if video.field != field:
        if field == "mouth":
            video = crop_mouth(video)
        else:
            raise ShapeError("A face-field model cannot consume a mouth-cropped video")
    if video.resolution != model.config.resolution:
        raise ShapeError(f"Video resolution {video.resolution} does not match model resolution {model.config.resolution}")
    return torch.from_numpy(np.ascontiguousarray(video.frames, dtype=np.float32)).unsqueeze(0)


def encode_audio(model: SeparationModel, wave: Waveform) -> np.ndarray:
    """Latent audio frames [T_a, N_a]."""
    if len(wave) < model.config.audio_kernel:
        raise InputTooShort(f"Waveform of {len(wave)} samples is shorter than the encoder kernel ({model.config.audio_kernel})")
    x = torch.from_numpy(wave.samples.astype(np.float32)).unsqueeze(0)
    with torch.no_grad():
        latent = model.encoder(x)
    return latent[0].T.numpy()


def visual_frontend(model: SeparationModel, video: VideoStream, branch: str) -> EmbeddingSequence:
    """Runs one visual branch (front-end plus temporal block)."""
    if branch not in BRANCHES_BY_VARIANT[model.variant]:
        raise VariantConstraintError(f"Variant {model.variant} has no '{branch}' branch")
    frames = prepare_frames(model, video)
    with torch.no_grad():
        out = getattr(model, branch)(frames)[0].T.numpy()
    if branch == "joint":
        tag = "V"
    elif model.variant == "davse":
        tag = "V_I" if branch == "identity" else "V_S"
    else:
        tag = "V_IE" if branch == "identity" else "V_SE"
    return EmbeddingSequence(out, tag)


def upsample_visual(emb: EmbeddingSequence, ratio: int, length: Optional[int] = None) -> EmbeddingSequence:
    """Repeats the time axis `ratio` times by linear interpolation, then fits `length` if given."""
    x = torch.from_numpy(emb.features.T.copy()).unsqueeze(0)
    y = upsample_tensor(x, ratio)
    if length is not None:
        y = fit_length(y, length)
    return EmbeddingSequence(y[0].T.numpy(), emb.tag)


def concat_embeddings(v_i: EmbeddingSequence, v_s: EmbeddingSequence) -> EmbeddingSequence:
    if v_i.length != v_s.length:
        raise ShapeError(f"Cannot concatenate embeddings of lengths {v_i.length} and {v_s.length}")
    return EmbeddingSequence(np.concatenate([v_i.features, v_s.features], axis=1), "V_IS")


def fuse(v_i: EmbeddingSequence, v_s: EmbeddingSequence, projection: nn.Conv1d) -> EmbeddingSequence:
    """Channel concatenation followed by a 1x1 convolution. Identity embedding first."""
    if (v_i.tag, v_s.tag) != ("V_I", "V_S"):
        raise ShapeError(f"fuse expects (V_I, V_S) embeddings, got ({v_i.tag}, {v_s.tag})")
    v_is = concat_embeddings(v_i, v_s)
    if projection.in_channels != v_is.dim:
        raise ShapeError(f"Fusion expects {projection.in_channels} channels, got {v_is.dim}")
    with torch.no_grad():
        out = projection(torch.from_numpy(v_is.features.T.copy()).unsqueeze(0))
    return EmbeddingSequence(out[0].T.numpy(), "V")


def extract(model: SeparationModel, mixture: Waveform, visual: VideoStream, mask_override=None) -> tuple:
    """Returns (estimate Waveform, mask [T_a, N_a], V EmbeddingSequence)."""
    frames = prepare_frames(model, visual)
    x = torch.from_numpy(mixture.samples.astype(np.float32)).unsqueeze(0)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            estimate, mask, v = model.separate(x, frames, mask_override=mask_override)
    finally:
        model.train(was_training)
    return (
        Waveform(estimate[0].double().numpy(), mixture.sample_rate_hz),
        mask[0].T.numpy(),
        EmbeddingSequence(v[0].T.numpy(), "V"),
    )


def classify_frames(head: SpkClassifierHead, v_ie: EmbeddingSequence) -> np.ndarray:
    """Logits [L, C], one row per frame."""
    if v_ie.dim != head.linear.in_features:
        raise ShapeError(f"Classifier expects {head.linear.in_features} channels, got {v_ie.dim}")
    with torch.no_grad():
        return head(torch.from_numpy(v_ie.features)).numpy()


# --- Checkpoints ---

def _state_arrays(module: nn.Module) -> dict:
    return {
        name: tensor.detach().cpu().numpy().astype(np.float32)
        for name, tensor in module.state_dict().items()
        if not name.endswith("num_batches_tracked")
    }


def save_checkpoint(model: SeparationModel, path: PathLike, training_step: Optional[int] = None, extra: Optional[dict] = None) -> Path:
    if training_step is not None:
        model.training_step = int(training_step)
    header = {
        "variant": model.variant,
        "config": model.config.to_dict(),
        "frozen_set": list(model.frozen_set),
        "training_step": model.training_step,
        "stage": model.stage,
        "speakers": list(model.speakers),
        "parameters": model.count_parameters(),
    }
    if extra:
        header.update(extra)
    path = artifact_storage.save_container(path, _state_arrays(model), header)
    logger.info(f"Saved {model.variant} checkpoint to {path} (step {model.training_step})")
    return path


def _read_checkpoint(path: PathLike) -> tuple:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    tensors, header = artifact_storage.load_container(path)
    if "config" not in header:
        raise CheckpointError(f"{path} has no checkpoint header")
    return tensors, header


def _load_into(module: nn.Module, tensors: dict, prefix: str = "") -> None:
    state = {
        name[len(prefix):]: torch.from_numpy(array)
        for name, array in tensors.items()
        if name.startswith(prefix)
    }
    try:
        result = module.load_state_dict(state, strict=False)
    except RuntimeError as e:
        raise CheckpointError(f"Checkpoint tensors do not fit the model: {e}") from e
    missing = [k for k in result.missing_keys if not k.endswith("num_batches_tracked")]
    if missing or result.unexpected_keys:
        raise CheckpointError(f"Checkpoint mismatch: missing {missing[:5]}, unexpected {result.unexpected_keys[:5]}")


def load_checkpoint(path: PathLike) -> SeparationModel:
    tensors, header = _read_checkpoint(path)
    try:
        cfg = ModelConfig.from_dict(header["config"])
    except ConfigError as e:
        raise CheckpointError(f"{path}: invalid model config in header: {e}") from e
    model = SeparationModel(cfg)
    _load_into(model, tensors)
    model.freeze(*header.get("frozen_set", []))
    model.stage = header.get("stage")
    model.speakers = list(header.get("speakers", []))
    model.training_step = int(header.get("training_step", 0))
    model.eval()
    return model


def load_branch(model: SeparationModel, path: PathLike, branch: str, freeze: bool = True) -> dict:
    """Copies one parameter group from a checkpoint into `model`; returns the source header."""
    tensors, header = _read_checkpoint(path)
    groups = model.parameter_groups()
    if branch not in groups:
        raise CheckpointError(f"Model variant {model.variant} has no '{branch}' group to load")
    prefix = f"{branch}."
    if not any(name.startswith(prefix) for name in tensors):
        raise CheckpointError(f"{path} ({header.get('variant')}) has no '{branch}' parameters")
    source_field = header["config"].get("visual_field")
    if source_field != model.config.visual_field:
        raise CheckpointError(f"{path} was trained on '{source_field}' input, model expects '{model.config.visual_field}'")
    try:
        _load_into(groups[branch], tensors, prefix)
    except StorageError as e:
        raise CheckpointError(str(e)) from e
    if freeze:
        model.freeze(branch)
    logger.info(f"Loaded '{branch}' branch from {path}")
    return header


def model_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, array in sorted(_state_arrays(model).items()):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(array).tobytes())
    return h.hexdigest()

"""Attention-augmented residual feature extractor.

A torchvision-compatible ResNet trunk (18 or 50) with optional
channel+spatial attention after each used stage, optional Leaky-ReLU
activation swap, and multi-stage aggregation into a patch-feature grid.
Weights travel in a flat binary tensor archive with a JSON header so banks
can be fingerprinted against the exact extractor that built them.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

from .exceptions import ConfigurationError

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)
_STAGE_CHANNELS = {18: (64, 128, 256, 512), 50: (256, 512, 1024, 2048)}
_WEIGHTS_MAGIC = b"CADW"


@dataclass
class ExtractorConfig:
    backbone_depth: int = 18
    use_attention: bool = True
    activation: str = "leaky_relu"          # "relu" | "leaky_relu"
    leaky_slope: float = 0.01
    stages_used: tuple[int, ...] = (1, 2, 3)
    attention_reduction: int = 16
    spatial_kernel: int = 7
    patch_neighborhood: int = 3
    pretrained: bool = False

    def __post_init__(self):
        self.stages_used = tuple(self.stages_used)
        if self.backbone_depth not in _STAGE_CHANNELS:
            raise ConfigurationError(f"backbone_depth must be 18 or 50, got {self.backbone_depth}")
        if self.activation not in ("relu", "leaky_relu"):
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if not self.stages_used or list(self.stages_used) != sorted(set(self.stages_used)) \
                or not set(self.stages_used) <= {1, 2, 3, 4}:
            raise ConfigurationError("stages_used must be a nonempty ascending subset of {1,2,3,4}")
        if self.spatial_kernel % 2 != 1:
            raise ConfigurationError("spatial_kernel must be odd")
        if self.patch_neighborhood % 2 != 1 or self.patch_neighborhood < 1:
            raise ConfigurationError("patch_neighborhood must be odd and >= 1")

    @property
    def stage_channels(self) -> tuple[int, ...]:
        chans = _STAGE_CHANNELS[self.backbone_depth]
        return tuple(chans[s - 1] for s in self.stages_used)

    @property
    def feature_dim(self) -> int:
        return sum(self.stage_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages_used"] = list(self.stages_used)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExtractorConfig":
        return cls(**d)


class ChannelAttention(nn.Module):
    """Avg+max pooled channel descriptor -> shared 2-layer MLP -> sigmoid gate."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Conv2d(channels, hidden, 1, bias=False)
        self.fc2 = nn.Conv2d(hidden, channels, 1, bias=False)
        # Zero-init the final layer: gates start at exactly 0.5, preserving
        # pretrained trunk behavior up to a constant factor.
        nn.init.zeros_(self.fc2.weight)

    def forward(self, x):
        avg = self.fc2(F.relu(self.fc1(F.adaptive_avg_pool2d(x, 1))))
        mx = self.fc2(F.relu(self.fc1(F.adaptive_max_pool2d(x, 1))))
        return torch.sigmoid(avg + mx)


class SpatialAttention(nn.Module):
    """Channelwise avg+max maps -> kxk conv -> sigmoid gate."""

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, bias=False)
        nn.init.zeros_(self.conv.weight)

    def forward(self, x):
        avg = x.mean(dim=1, keepdim=True)
        mx = x.max(dim=1, keepdim=True).values
        return torch.sigmoid(self.conv(torch.cat([avg, mx], dim=1)))


class CBAMBlock(nn.Module):
    """Channel attention followed by spatial attention; gates are exposed."""

    def __init__(self, channels: int, reduction: int = 16, spatial_kernel: int = 7):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction)
        self.spatial = SpatialAttention(spatial_kernel)

    def forward(self, x):
        cg = self.channel(x)
        x = x * cg
        sg = self.spatial(x)
        x = x * sg
        return x, cg, sg


@dataclass
class AttentionState:
    """Gates and gated activations captured during the last forward pass."""

    stages_used: tuple[int, ...]
    input_hw: tuple[int, int]
    channel_gates: dict[int, torch.Tensor] = field(default_factory=dict)   # (B, C, 1, 1)
    spatial_gates: dict[int, torch.Tensor] = field(default_factory=dict)   # (B, 1, h, w)
    gated: dict[int, torch.Tensor] = field(default_factory=dict)           # (B, C, h, w)


def _swap_relu(module: nn.Module, slope: float) -> None:
    for name, child in module.named_children():
        if isinstance(child, nn.ReLU):
            setattr(module, name, nn.LeakyReLU(slope, inplace=True))
        else:
            _swap_relu(child, slope)


class FeatureExtractor(nn.Module):
    """Residual trunk up to the deepest used stage, with per-stage attention.

    Input is raw grayscale in [0, 255], shape (B, 1, H, W) or (B, H, W);
    it is scaled, replicated to three channels, and normalized with the
    standard natural-image statistics the trunk was pretrained with.
    """

    def __init__(self, cfg: ExtractorConfig):
        super().__init__()
        self.cfg = cfg
        ctor = torchvision.models.resnet18 if cfg.backbone_depth == 18 else torchvision.models.resnet50
        trunk = ctor(weights=None)
        self.conv1 = trunk.conv1
        self.bn1 = trunk.bn1
        self.relu = trunk.relu
        self.maxpool = trunk.maxpool
        self.max_stage = max(cfg.stages_used)
        for s in range(1, self.max_stage + 1):
            setattr(self, f"layer{s}", getattr(trunk, f"layer{s}"))
        if cfg.activation == "leaky_relu":
            _swap_relu(self, cfg.leaky_slope)
        if cfg.use_attention:
            chans = _STAGE_CHANNELS[cfg.backbone_depth]
            self.attn = nn.ModuleDict({
                str(s): CBAMBlock(chans[s - 1], cfg.attention_reduction, cfg.spatial_kernel)
                for s in cfg.stages_used
            })
        mean = torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1)
        std = torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1)
        self.register_buffer("input_mean", mean)
        self.register_buffer("input_std", std)

    def preprocess(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(1)
        x = x.float() / 255.0
        x = x.expand(-1, 3, -1, -1)
        return (x - self.input_mean) / self.input_std

    def forward(self, x: torch.Tensor) -> tuple[dict[int, torch.Tensor], AttentionState]:
        input_hw = (x.shape[-2], x.shape[-1])
        h = self.preprocess(x)
        h = self.maxpool(self.relu(self.bn1(self.conv1(h))))
        state = AttentionState(stages_used=self.cfg.stages_used, input_hw=input_hw)
        stage_maps: dict[int, torch.Tensor] = {}
        for s in range(1, self.max_stage + 1):
            h = getattr(self, f"layer{s}")(h)
            if s in self.cfg.stages_used:
                if self.cfg.use_attention:
                    h, cg, sg = self.attn[str(s)](h)
                    state.channel_gates[s] = cg.detach()
                    state.spatial_gates[s] = sg.detach()
                state.gated[s] = h.detach()
                stage_maps[s] = h
        return stage_maps, state

    def load_trunk_state(self, sd: dict) -> None:
        """Copy matching trunk tensors from a torchvision-style state dict."""
        own = self.state_dict()
        compat = {k: v for k, v in sd.items() if k in own and own[k].shape == v.shape}
        missing_trunk = [k for k in own if not k.startswith(("attn.", "input_"))
                         and k not in compat]
        if missing_trunk:
            raise ConfigurationError(f"trunk tensors missing from source: {missing_trunk[:5]}")
        own.update(compat)
        self.load_state_dict(own)


@dataclass
class PatchFeatureGrid:
    """Spatial grid of aggregated patch vectors: features[i, j] is D-dim."""

    features: torch.Tensor          # (Hf, Wf, D)
    stage_dims: tuple[int, ...]
    spatial_scale: float            # input pixels per grid cell

    def __post_init__(self):
        if self.features.dim() != 3:
            raise ValueError("features must be (Hf, Wf, D)")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return (self.features.shape[0], self.features.shape[1])

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    def vectors(self) -> torch.Tensor:
        return self.features.reshape(-1, self.dim)


def aggregate_batch(stage_maps: dict[int, torch.Tensor], patch_neighborhood: int = 3) -> torch.Tensor:
    """Resize every stage map to the earliest stage's size, concatenate along
    channels, and smooth with a same-size average pool (boundary cells average
    only real neighbors). Returns (B, D, Hf, Wf)."""
    if not stage_maps:
        raise ValueError("need at least one stage map")
    stages = sorted(stage_maps)
    target = stage_maps[stages[0]].shape[-2:]
    resized = []
    for s in stages:
        m = stage_maps[s]
        if m.shape[-2:] != tuple(target):
            m = F.interpolate(m, size=target, mode="bilinear", align_corners=False)
        resized.append(m)
    emb = torch.cat(resized, dim=1)
    if patch_neighborhood > 1:
        emb = F.avg_pool2d(emb, patch_neighborhood, stride=1,
                           padding=patch_neighborhood // 2, count_include_pad=False)
    return emb


def aggregate_layers(stage_maps: dict[int, torch.Tensor], patch_neighborhood: int = 3,
                     input_hw: tuple[int, int] | None = None) -> PatchFeatureGrid:
    """Single-image aggregation into a PatchFeatureGrid.

    `stage_maps` holds (C, h, w) tensors keyed by stage index.
    """
    batched = {s: m.unsqueeze(0) for s, m in stage_maps.items()}
    emb = aggregate_batch(batched, patch_neighborhood)[0]        # (D, Hf, Wf)
    stages = sorted(stage_maps)
    dims = tuple(stage_maps[s].shape[0] for s in stages)
    hf = emb.shape[-2]
    scale = (input_hw[0] / hf) if input_hw else float(4 * 2 ** (stages[0] - 1))
    return PatchFeatureGrid(features=emb.permute(1, 2, 0).contiguous(),
                            stage_dims=dims, spatial_scale=float(scale))


def attention_heatmap(state: AttentionState, stage: int,
                      out_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Channel-mean of the gated stage activation, min-max normalized and
    bilinearly upscaled to the input resolution. Constant maps normalize
    to all zeros."""
    if stage not in state.gated:
        raise ValueError(f"stage {stage} was not captured (used: {sorted(state.gated)})")
    act = state.gated[stage]
    if act.dim() == 4:
        act = act[0]
    heat = act.mean(dim=0)
    lo, hi = heat.min(), heat.max()
    if (hi - lo) > 0:
        heat = (heat - lo) / (hi - lo)
    else:
        heat = torch.zeros_like(heat)
    out_hw = out_hw or state.input_hw
    heat = F.interpolate(heat[None, None], size=out_hw, mode="bilinear",
                         align_corners=False)[0, 0]
    return heat.cpu().numpy()


@dataclass
class WeightSet:
    """Named tensor archive plus the config and snapshot it belongs to."""

    tensors: dict[str, np.ndarray]
    config: ExtractorConfig
    snapshot_id: str = "random/seed=0"

    @classmethod
    def from_model(cls, model: FeatureExtractor, snapshot_id: str) -> "WeightSet":
        tensors = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        return cls(tensors=tensors, config=model.cfg, snapshot_id=snapshot_id)

    def fingerprint(self) -> bytes:
        h = hashlib.sha256()
        h.update(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for name in sorted(self.tensors):
            arr = self.tensors[name]
            h.update(name.encode())
            h.update(str(arr.dtype).encode())
            h.update(str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.digest()

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        names = sorted(self.tensors)
        offset = 0
        index = {}
        for name in names:
            arr = self.tensors[name]
            index[name] = {"dtype": str(arr.dtype), "shape": list(arr.shape),
                           "offset": offset}
            offset += arr.nbytes
        header = json.dumps({
            "format": 1,
            "snapshot_id": self.snapshot_id,
            "config": self.config.to_dict(),
            "tensors": index,
        }).encode()
        with open(path, "wb") as f:
            f.write(_WEIGHTS_MAGIC)
            f.write(struct.pack("<I", len(header)))
            f.write(header)
            for name in names:
                f.write(np.ascontiguousarray(self.tensors[name]).tobytes())

    @classmethod
    def load(cls, path, expected_cfg: ExtractorConfig | None = None) -> "WeightSet":
        path = Path(path)
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != _WEIGHTS_MAGIC:
                raise ConfigurationError(f"{path} is not a weight archive")
            (hlen,) = struct.unpack("<I", f.read(4))
            header = json.loads(f.read(hlen).decode())
            blob = f.read()
        cfg = ExtractorConfig.from_dict(header["config"])
        if expected_cfg is not None and cfg.to_dict() != expected_cfg.to_dict():
            raise ConfigurationError("weight archive config does not match the requested config")
        tensors = {}
        for name, meta in header["tensors"].items():
            dt = np.dtype(meta["dtype"])
            shape = tuple(meta["shape"])
            count = int(np.prod(shape)) if shape else 1
            start = meta["offset"]
            arr = np.frombuffer(blob, dtype=dt, count=count, offset=start).reshape(shape)
            tensors[name] = arr.copy()
        return cls(tensors=tensors, config=cfg, snapshot_id=header["snapshot_id"])


def build_extractor(cfg: ExtractorConfig, weights: WeightSet | None = None) -> FeatureExtractor:
    """Instantiate the extractor, loading `weights` when given."""
    model = FeatureExtractor(cfg)
    if weights is not None:
        if weights.config.to_dict() != cfg.to_dict():
            raise ConfigurationError("weight set was produced with a different extractor config")
        state = {k: torch.from_numpy(v.copy()) for k, v in weights.tensors.items()}
        model.load_state_dict(state)
    model.eval()
    return model


def initial_weights(cfg: ExtractorConfig, seed: int = 0,
                    pretrained_source: str | Path | None = None) -> WeightSet:
    """Starting weights for stage-1 training.

    With `cfg.pretrained`, the trunk is filled from a torchvision snapshot
    (downloaded, or read from `pretrained_source` when offline); otherwise
    every tensor is seeded random. Newly added attention gates always start
    at 0.5 so the trunk's behavior is preserved at step zero.
    """
    torch.manual_seed(seed)
    model = FeatureExtractor(cfg)
    if not cfg.pretrained:
        return WeightSet.from_model(model, snapshot_id=f"random/seed={seed}")

    if pretrained_source is not None:
        sd = torch.load(pretrained_source, map_location="cpu", weights_only=True)
        snapshot = f"file/{Path(pretrained_source).name}"
    else:
        try:
            name = f"resnet{cfg.backbone_depth}"
            weights_enum = torchvision.models.get_model_weights(name).IMAGENET1K_V1
            sd = torchvision.models.get_model(name, weights=weights_enum).state_dict()
            snapshot = f"torchvision/{name}/IMAGENET1K_V1"
        except Exception as exc:
            raise ConfigurationError(
                "pretrained trunk weights are unavailable (no network access?); "
                "pass pretrained_source or set pretrained=False") from exc
    model.load_trunk_state(sd)
    return WeightSet.from_model(model, snapshot_id=snapshot)


def extract_features(img: np.ndarray, cfg: ExtractorConfig,
                     weights: WeightSet) -> tuple[dict[int, torch.Tensor], AttentionState]:
    """Run one grayscale image through the frozen extractor.

    Returns per-stage feature maps (C, h, w) and the captured attention state.
    """
    model = build_extractor(cfg, weights)
    with torch.no_grad():
        x = torch.from_numpy(np.asarray(img, dtype=np.float32))[None]
        maps, state = model(x)
    return {s: m[0] for s, m in maps.items()}, state

"""Backbone denoisers and their T-fold parameter-shared composition.

Every backbone is an image-to-image map, 1 channel in, 1 channel out, shape
preserving. A ChainModel applies one backbone module T times in sequence;
there is exactly one parameter vector no matter how large T is, and
gradients from all T applications accumulate into it.

Checkpoints are a single file: 8 magic bytes, a little-endian u64 manifest
length, a JSON manifest (backbone config, T, tensor names/shapes/dtypes,
training step), then the raw little-endian float32 blobs concatenated in
manifest order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import (
    CheckpointError,
    ConfigError,
    ReservedBackboneError,
    ShapeError,
    UnknownBackboneError,
)
from .imaging import ImageGrid

CHECKPOINT_MAGIC = b"NACKPT01"

# Pinned per-backbone defaults; desk-scale runs override base_channels.
BACKBONE_DEFAULTS = {
    "unet": {"base_channels": 64, "depth": 4, "kernel_size": 3},
    "cpce": {"base_channels": 32, "depth": 4, "kernel_size": 3},
    "resnet": {"base_channels": 64, "depth": 8, "kernel_size": 3},
}

# Registered but intentionally unbuilt variants.
RESERVED_BACKBONES = ("r2unet", "attunet", "r2aunet")


@dataclass(frozen=True)
class BackboneConfig:
    name: str
    base_channels: int = 0  # 0 means "use the backbone default"
    depth: int = 0
    kernel_size: int = 0

    def __post_init__(self):
        if self.name not in BACKBONE_DEFAULTS and self.name not in RESERVED_BACKBONES:
            raise UnknownBackboneError(f"unknown backbone '{self.name}'")
        defaults = BACKBONE_DEFAULTS.get(self.name, {})
        for fname in ("base_channels", "depth", "kernel_size"):
            if getattr(self, fname) == 0 and fname in defaults:
                object.__setattr__(self, fname, defaults[fname])
        if self.name in BACKBONE_DEFAULTS:
            if self.depth < 1:
                raise ConfigError(f"model.depth must be >= 1, got {self.depth}")
            if self.base_channels < 1:
                raise ConfigError(
                    f"model.base_channels must be >= 1, got {self.base_channels}"
                )
            if self.kernel_size < 1 or self.kernel_size % 2 == 0:
                raise ConfigError(
                    f"model.kernel_size must be odd and >= 1, got {self.kernel_size}"
                )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "base_channels": self.base_channels,
            "depth": self.depth,
            "kernel_size": self.kernel_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(
            name=d["name"],
            base_channels=int(d.get("base_channels", 0)),
            depth=int(d.get("depth", 0)),
            kernel_size=int(d.get("kernel_size", 0)),
        )


def _conv(cin, cout, k):
    return nn.Conv2d(cin, cout, k, padding=k // 2)


class _DoubleConv(nn.Module):
    def __init__(self, cin, cout, k):
        super().__init__()
        self.conv1 = _conv(cin, cout, k)
        self.conv2 = _conv(cout, cout, k)

    def forward(self, x):
        return torch.relu(self.conv2(torch.relu(self.conv1(x))))


class UNet(nn.Module):
    """Canonical U-Net: maxpool down, transposed-conv up, skip concatenation,
    ReLU activations, no normalization layers."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        c, d, k = cfg.base_channels, cfg.depth, cfg.kernel_size
        self.depth = d
        self.encoders = nn.ModuleList()
        cin = 1
        for i in range(d):
            self.encoders.append(_DoubleConv(cin, c * 2**i, k))
            cin = c * 2**i
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _DoubleConv(c * 2 ** (d - 1), c * 2**d, k)
        self.upconvs = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for i in reversed(range(d)):
            self.upconvs.append(nn.ConvTranspose2d(c * 2 ** (i + 1), c * 2**i, 2, stride=2))
            self.decoders.append(_DoubleConv(c * 2 ** (i + 1), c * 2**i, k))
        self.head = nn.Conv2d(c, 1, 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        factor = 2**self.depth
        if h % factor or w % factor:
            raise ShapeError(
                f"unet depth {self.depth} needs height and width to be multiples of "
                f"{factor}, got {h}x{w}"
            )
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.upconvs, self.decoders, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([skip, x], dim=1))
        return self.head(x)


class CPCE(nn.Module):
    """Conv encoder / deconv decoder with conveying-path concatenations and
    a ReLU after every layer."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        c, d, k = cfg.base_channels, cfg.depth, cfg.kernel_size
        if d < 2:
            raise ConfigError(f"cpce needs depth >= 2, got {d}")
        self.convs = nn.ModuleList()
        cin = 1
        for _ in range(d):
            self.convs.append(_conv(cin, c, k))
            cin = c
        self.deconvs = nn.ModuleList()
        for j in range(d):
            dc_in = c if j == 0 else 2 * c
            dc_out = 1 if j == d - 1 else c
            self.deconvs.append(
                nn.ConvTranspose2d(dc_in, dc_out, k, stride=1, padding=k // 2)
            )

    def forward(self, x):
        feats = []
        for conv in self.convs:
            x = torch.relu(conv(x))
            feats.append(x)
        x = torch.relu(self.deconvs[0](feats[-1]))
        for j in range(1, len(self.deconvs)):
            x = torch.cat([x, feats[-1 - j]], dim=1)
            x = torch.relu(self.deconvs[j](x))
        return x


class _ResBlock(nn.Module):
    def __init__(self, c, k):
        super().__init__()
        self.conv1 = _conv(c, c, k)
        self.conv2 = _conv(c, c, k)

    def forward(self, x):
        return torch.relu(x + self.conv2(torch.relu(self.conv1(x))))


class ResNet(nn.Module):
    """Residual blocks with a global input-to-output link; the final layer is
    zero-initialized so the untrained map is the identity."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        c, d, k = cfg.base_channels, cfg.depth, cfg.kernel_size
        self.stem = _conv(1, c, k)
        self.blocks = nn.Sequential(*[_ResBlock(c, k) for _ in range(d)])
        self.head = _conv(c, 1, k)

    def forward(self, x):
        return x + self.head(self.blocks(torch.relu(self.stem(x))))


_BUILDERS = {"unet": UNet, "cpce": CPCE, "resnet": ResNet}


def _init_weights(module: nn.Module) -> None:
    # He initialization; the torch default underscales ReLU stacks, and the
    # signal then vanishes through the T-fold composition.
    for layer in module.modules():
        if isinstance(layer, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(layer.weight, nonlinearity="relu")
            if layer.bias is not None:
                nn.init.zeros_(layer.bias)


def build_backbone(cfg: BackboneConfig, init_seed: int = 0) -> nn.Module:
    """Construct a backbone with deterministic initialization."""
    if cfg.name in RESERVED_BACKBONES:
        raise ReservedBackboneError(
            f"backbone '{cfg.name}' is reserved in the registry but not implemented"
        )
    if cfg.name not in _BUILDERS:
        raise UnknownBackboneError(f"unknown backbone '{cfg.name}'")
    with torch.random.fork_rng():
        torch.manual_seed(int(init_seed))
        module = _BUILDERS[cfg.name](cfg)
        _init_weights(module)
    if cfg.name == "resnet":
        nn.init.zeros_(module.head.weight)
        nn.init.zeros_(module.head.bias)
    return module.float()


class ChainModel(nn.Module):
    """T sequential applications of one shared-parameter module."""

    def __init__(self, module: nn.Module, T: int, config: BackboneConfig | None = None,
                 init_seed: int = 0):
        super().__init__()
        if T < 1:
            raise ConfigError(f"module count T must be >= 1, got {T}")
        self.module = module
        self.T = int(T)
        self.config = config
        self.init_seed = int(init_seed)

    def forward(self, x):
        for _ in range(self.T):
            x = self.module(x)
        return x

    def forward_with_intermediates(self, x):
        intermediates = []
        for _ in range(self.T):
            x = self.module(x)
            intermediates.append(x)
        return x, intermediates

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def compose_chain(
    module: nn.Module, T: int, config: BackboneConfig | None = None, init_seed: int = 0
) -> ChainModel:
    return ChainModel(module, T, config, init_seed)


def build_chain(config: BackboneConfig, T: int, init_seed: int = 0) -> ChainModel:
    return compose_chain(build_backbone(config, init_seed), T, config, init_seed)


def parameter_count(chain: ChainModel) -> int:
    return chain.parameter_count()


def apply_chain(
    chain: ChainModel, img: ImageGrid, capture_intermediates: bool = False
) -> tuple[ImageGrid, list[ImageGrid]]:
    """Run the chain over one image without gradients.

    Accepts out-of-[0, 1] values (corruption is unclipped). When requested,
    intermediates holds all T per-module outputs, the last being the final.
    """
    x = torch.from_numpy(np.ascontiguousarray(img.pixels)).reshape(1, 1, *img.shape)
    chain.eval()
    with torch.no_grad():
        if capture_intermediates:
            out, inters = chain.forward_with_intermediates(x)
            grids = [
                img.with_pixels(t.reshape(img.shape).numpy()) for t in inters
            ]
        else:
            out = chain(x)
            grids = []
    return img.with_pixels(out.reshape(img.shape).numpy()), grids


# --- checkpoint container -------------------------------------------------

def write_container(path, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
    tensors = []
    blobs = []
    for name, arr in arrays.items():
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": "float32"})
        blobs.append(arr32.tobytes())
    manifest = dict(manifest, tensors=tensors)
    encoded = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(encoded)))
        fh.write(encoded)
        for blob in blobs:
            fh.write(blob)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < 16 or data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (mlen,) = struct.unpack_from("<Q", data, 8)
    try:
        manifest = json.loads(data[16 : 16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest: {exc}") from exc
    offset = 16 + mlen
    arrays = {}
    for entry in manifest.get("tensors", []):
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = 4 * count
        if offset + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated blob for tensor '{entry['name']}'")
        arr = np.frombuffer(data[offset : offset + nbytes], dtype="<f4")
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
        offset += nbytes
    return manifest, arrays


def save_chain(chain: ChainModel, path, training_step: int = 0, extra: dict | None = None) -> None:
    if chain.config is None:
        raise CheckpointError("chain has no backbone config; cannot serialize")
    arrays = {
        f"model.{name}": tensor.detach().cpu().numpy()
        for name, tensor in chain.module.state_dict().items()
    }
    manifest = {
        "format": "chain-checkpoint",
        "version": 1,
        "backbone": chain.config.to_dict(),
        "T": chain.T,
        "init_seed": chain.init_seed,
        "training_step": int(training_step),
    }
    if extra:
        manifest["extra"] = extra
    write_container(path, manifest, arrays)


def load_chain(path) -> tuple[ChainModel, dict]:
    manifest, arrays = read_container(path)
    if manifest.get("format") != "chain-checkpoint":
        raise CheckpointError(f"{path}: unexpected container format")
    if manifest.get("version") != 1:
        raise CheckpointError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    cfg = BackboneConfig.from_dict(manifest["backbone"])
    chain = build_chain(cfg, int(manifest["T"]), int(manifest.get("init_seed", 0)))
    state = {}
    for name, arr in arrays.items():
        if name.startswith("model."):
            state[name[len("model."):]] = torch.from_numpy(arr)
    chain.module.load_state_dict(state)
    return chain, manifest

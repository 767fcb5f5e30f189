"""Encoder, decoder, discriminators, code regressor Q, classifier and feature net.

Downsampling blocks are 5x5 stride-2 convolutions; upsampling blocks are
nearest-neighbour x2 followed by a 3x3 stride-1 convolution. The image
discriminator and Q share a convolutional trunk ending in a dense feature
vector; Q owns one small dense branch per expression class.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exprcode import CodeLayout

FORMAT_VERSION = "expredit-ckpt/1"
N_FEATURE_TAPS = 5


class CheckpointError(RuntimeError):
    pass


class NotInitializedError(RuntimeError):
    pass


@dataclass(frozen=True)
class ArchitectureSpec:
    resolution: int = 64
    channels: int = 3
    n_z: int = 32
    K: int = 3
    d: int = 5
    enc_channels: tuple[int, ...] = (32, 64, 128, 256, 512)
    dec_fc_channels: int = 512
    dec_channels: tuple[int, ...] = (256, 128, 64, 32, 16, 3)
    disc_channels: tuple[int, ...] = (16, 32, 64, 128)
    shared_dim: int = 1024
    q_hidden: int = 64
    dz_hidden: tuple[int, ...] = (64, 32, 16)
    n_identities: int = 20
    generator_batchnorm: bool = False

    def __post_init__(self):
        if len(self.enc_channels) != 5:
            raise ValueError("encoder needs exactly 5 downsampling stages")
        if self.resolution % 32:
            raise ValueError(f"resolution {self.resolution} must be a multiple of 32")
        if 2 ** len(self.dec_channels) != self.resolution:
            raise ValueError(f"{len(self.dec_channels)} upsampling stages from 1x1 cannot reach {self.resolution}")
        if self.dec_channels[-1] != self.channels:
            raise ValueError("last decoder stage must output the image channels")
        if self.resolution % 2 ** len(self.disc_channels):
            raise ValueError("discriminator downsampling does not divide the resolution")

    @property
    def layout(self) -> CodeLayout:
        return CodeLayout(self.K, self.d)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ArchitectureSpec":
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


PRESETS = {
    "desk": ArchitectureSpec(),
    "paper": ArchitectureSpec(
        resolution=128, n_z=50, K=6, d=5,
        enc_channels=(64, 128, 256, 512, 1024),
        dec_fc_channels=1024,
        dec_channels=(512, 256, 128, 64, 32, 16, 3),
        n_identities=80,
    ),
    # 32 px smoke-test scale; not a modelling configuration
    "tiny": ArchitectureSpec(
        resolution=32, n_z=8, K=3, d=5,
        enc_channels=(8, 8, 16, 16, 16),
        dec_fc_channels=16,
        dec_channels=(16, 16, 8, 8, 3),
        disc_channels=(8, 8, 8, 8),
        shared_dim=32, q_hidden=8, dz_hidden=(8, 8, 8),
        n_identities=4,
    ),
}


def architecture(preset: str, **overrides) -> ArchitectureSpec:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    return dataclasses.replace(PRESETS[preset], **overrides)


# ---------------------------------------------------------------------------
# building blocks


def down_block(cin: int, cout: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, kernel_size=5, stride=2, padding=2)


class ConvTrunk(nn.Module):
    """Five downsampling stages with ReLU; returns every post-activation map."""

    def __init__(self, cin: int, channels, batchnorm: bool = False):
        super().__init__()
        self.stages = nn.ModuleList()
        for cout in channels:
            layers = [down_block(cin, cout)]
            if batchnorm:
                layers.append(nn.BatchNorm2d(cout))
            layers.append(nn.ReLU())
            self.stages.append(nn.Sequential(*layers))
            cin = cout

    def forward(self, x):
        taps = []
        for stage in self.stages:
            x = stage(x)
            taps.append(x)
        return taps


class Encoder(nn.Module):
    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        self.spec = spec
        self.trunk = ConvTrunk(spec.channels, spec.enc_channels, spec.generator_batchnorm)
        side = spec.resolution // 32
        self.fc = nn.Linear(spec.enc_channels[-1] * side * side, spec.n_z)

    def forward(self, x):
        _check_image(x, self.spec)
        h = self.trunk(x)[-1].flatten(1)
        return torch.tanh(self.fc(h))


class Decoder(nn.Module):
    """``(g, c) -> image``: dense layer to a 1x1 map, then x2 upsampling stages."""

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        self.spec = spec
        self.fc = nn.Linear(spec.n_z + spec.layout.size, spec.dec_fc_channels)
        layers = []
        cin = spec.dec_fc_channels
        for i, cout in enumerate(spec.dec_channels):
            layers += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(cin, cout, 3, 1, 1)]
            last = i == len(spec.dec_channels) - 1
            if not last:
                if spec.generator_batchnorm:
                    layers.append(nn.BatchNorm2d(cout))
                layers.append(nn.ReLU())
            cin = cout
        self.net = nn.Sequential(*layers)

    def forward(self, g, c):
        if g.shape[-1] != self.spec.n_z or c.shape[-1] != self.spec.layout.size:
            raise ValueError(f"decoder expects g of {self.spec.n_z} and c of {self.spec.layout.size}, "
                             f"got {tuple(g.shape)} and {tuple(c.shape)}")
        h = F.relu(self.fc(torch.cat([g, c], dim=1)))
        return torch.tanh(self.net(h[:, :, None, None]))


class ImageDiscriminator(nn.Module):
    """Label-conditioned discriminator; also returns the shared dense features used by Q."""

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        self.spec = spec
        layers = []
        cin = spec.channels + spec.K
        for i, cout in enumerate(spec.disc_channels):
            layers.append(down_block(cin, cout))
            if i > 0:
                layers.append(nn.BatchNorm2d(cout))
            layers.append(nn.LeakyReLU(0.2))
            cin = cout
        self.convs = nn.Sequential(*layers)
        side = spec.resolution // 2 ** len(spec.disc_channels)
        self.shared = nn.Sequential(
            nn.Linear(cin * side * side, spec.shared_dim),
            nn.BatchNorm1d(spec.shared_dim),
            nn.LeakyReLU(0.2),
        )
        self.head = nn.Linear(spec.shared_dim, 1)

    def forward(self, x, labels):
        """Returns ``(logit[B], shared_features[B, shared_dim])``."""
        _check_image(x, self.spec)
        y = F.one_hot(labels, self.spec.K).to(x.dtype)
        tiled = y[:, :, None, None].expand(-1, -1, x.shape[2], x.shape[3])
        feats = self.shared(self.convs(torch.cat([x, tiled], dim=1)).flatten(1))
        return self.head(feats).squeeze(1), feats


class QHeads(nn.Module):
    """One two-layer branch per class predicting the mean of that class's code block."""

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        self.K = spec.K
        self.branches = nn.ModuleList(
            nn.Sequential(nn.Linear(spec.shared_dim, spec.q_hidden), nn.LeakyReLU(0.2),
                          nn.Linear(spec.q_hidden, spec.d))
            for _ in range(spec.K)
        )

    def all_blocks(self, feats):
        return torch.stack([b(feats) for b in self.branches], dim=1)  # B x K x d

    def forward(self, feats, labels):
        out = self.all_blocks(feats)
        return out[torch.arange(feats.shape[0]), labels]


class CodeDiscriminator(nn.Module):
    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        self.spec = spec
        layers = []
        cin = spec.n_z
        for h in spec.dz_hidden:
            layers += [nn.Linear(cin, h), nn.BatchNorm1d(h), nn.LeakyReLU(0.2)]
            cin = h
        layers.append(nn.Linear(cin, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, g):
        if g.shape[-1] != self.spec.n_z:
            raise ValueError(f"code discriminator expects {self.spec.n_z} inputs, got {g.shape[-1]}")
        return self.net(g).squeeze(1)


class ConvClassifier(nn.Module):
    """Encoder-shaped network plus one extra dense layer of ``n_out`` logits."""

    def __init__(self, spec: ArchitectureSpec, n_out: int):
        super().__init__()
        self.spec = spec
        self.trunk = ConvTrunk(spec.channels, spec.enc_channels)
        side = spec.resolution // 32
        self.fc = nn.Linear(spec.enc_channels[-1] * side * side, spec.n_z)
        self.out = nn.Linear(spec.n_z, n_out)

    def forward(self, x):
        _check_image(x, self.spec)
        h = self.trunk(x)[-1].flatten(1)
        return self.out(F.relu(self.fc(h)))

    def feature_maps(self, x):
        _check_image(x, self.spec)
        return self.trunk(x)


def _check_image(x, spec: ArchitectureSpec) -> None:
    want = (spec.channels, spec.resolution, spec.resolution)
    if x.dim() != 4 or tuple(x.shape[1:]) != want:
        raise ValueError(f"expected images of shape (B, {want[0]}, {want[1]}, {want[2]}), got {tuple(x.shape)}")


# ---------------------------------------------------------------------------
# bundle

GROUPS = ("enc", "dec", "disc", "q", "dz", "classifier", "phi")


class ModelBundle(nn.Module):
    """All trainable subnetworks plus the metadata needed to rebuild them."""

    def __init__(self, spec: ArchitectureSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        self.seed = seed
        self.stage = 0
        self.meta: dict[str, Any] = {}
        gen = torch.random.fork_rng()
        with gen:
            torch.manual_seed(seed)
            self.enc = Encoder(spec)
            self.dec = Decoder(spec)
            self.disc = ImageDiscriminator(spec)
            self.q = QHeads(spec)
            self.dz = CodeDiscriminator(spec)
            self.classifier = ConvClassifier(spec, spec.K)
            self.phi = ConvClassifier(spec, spec.n_identities)
        self.classifier_ready = False
        self.phi_ready = False

    @property
    def layout(self) -> CodeLayout:
        return self.spec.layout

    def group(self, name: str) -> nn.Module:
        if name not in GROUPS:
            raise KeyError(name)
        return getattr(self, name)

    # forward helpers mirroring the operations of the model

    def encode(self, x):
        return self.enc(x)

    def decode(self, g, c):
        return self.dec(g, c)

    def disc_image(self, x, labels):
        logit, feats = self.disc(x, labels)
        return torch.sigmoid(logit), feats

    def q_predict(self, feats, labels):
        return self.q(feats, labels)

    def disc_z(self, g):
        return torch.sigmoid(self.dz(g))

    def classify_expression(self, x):
        if not self.classifier_ready:
            raise NotInitializedError("expression classifier not trained")
        return F.softmax(self.classifier(x), dim=1)

    def feature_maps(self, x):
        if not self.phi_ready:
            raise NotInitializedError("feature network not initialized")
        return self.phi.feature_maps(x)

    def checksum(self) -> str:
        return state_checksum(self.state_dict())


def state_checksum(state: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for k in sorted(state):
        t = state[k].detach().cpu().contiguous()
        h.update(k.encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(bundle: ModelBundle, path: str | Path, extra: dict[str, Any] | None = None) -> Path:
    """Write ``meta.json`` + ``params.pt`` (+ ``train_state.pt`` when ``extra`` is given)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    state = bundle.state_dict()
    meta = {
        "format_version": FORMAT_VERSION,
        "architecture": bundle.spec.to_dict(),
        "stage": bundle.stage,
        "seed": bundle.seed,
        "classifier_ready": bundle.classifier_ready,
        "phi_ready": bundle.phi_ready,
        "checkpoint_id": state_checksum(state)[:16],
        "meta": bundle.meta,
    }
    torch.save(state, path / "params.pt")
    if extra is not None:
        torch.save(extra, path / "train_state.pt")
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def read_meta(path: str | Path) -> dict[str, Any]:
    f = Path(path) / "meta.json"
    if not f.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    meta = json.loads(f.read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"incompatible checkpoint version {meta.get('format_version')!r} "
                              f"(expected {FORMAT_VERSION!r})")
    return meta


def load_checkpoint(path: str | Path, with_state: bool = False):
    path = Path(path)
    meta = read_meta(path)
    spec = ArchitectureSpec.from_dict(meta["architecture"])
    bundle = ModelBundle(spec, seed=meta["seed"])
    state = torch.load(path / "params.pt", weights_only=True)
    expected = bundle.state_dict()
    bad = [k for k in expected if k not in state or state[k].shape != expected[k].shape]
    if bad or set(state) - set(expected):
        raise CheckpointError(f"checkpoint parameters disagree with its architecture: {bad[:5]}")
    bundle.load_state_dict(state)
    if state_checksum(state)[:16] != meta["checkpoint_id"]:
        raise CheckpointError(f"checksum mismatch in {path}")
    bundle.stage = meta["stage"]
    bundle.classifier_ready = meta["classifier_ready"]
    bundle.phi_ready = meta["phi_ready"]
    bundle.meta = meta.get("meta", {})
    bundle.eval()
    if not with_state:
        return bundle
    train_state = None
    if (path / "train_state.pt").exists():
        train_state = torch.load(path / "train_state.pt", weights_only=False)
    return bundle, train_state

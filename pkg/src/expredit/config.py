"""Run configuration with presets, JSON config files and flag overrides.

Precedence: preset < config file < explicit overrides.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .datagen import DatasetSpec


@dataclass
class TrainConfig:
    preset: str = "desk"
    seed: int = 0
    data_seed: int = 0
    # synthetic dataset (ignored when dataset_path is set)
    n_identities: int = 20
    images_per_cell: int = 30
    test_identities: int = 20
    test_images_per_cell: int = 5
    heldout_images_per_cell: int = 5
    intensity_range: tuple[float, float] = (0.3, 1.0)
    dataset_path: str | None = None
    test_fraction: float = 0.1
    # optimisation
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 32
    stage_epochs: tuple[int, int, int] = (20, 20, 20)
    stage1_q_weight: float = 1.0
    stage1_adv_weight: float = 1.0
    stage2_q_weight: float = 1.0
    lambda_id: float = 1.0
    lambda_q: float = 1.0
    lambda_adv_img: float = 0.01
    lambda_adv_z: float = 1.0
    lambda_tv: float = 0.001
    beta: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0)
    q_supervision: str = "active"
    flip: bool = True
    generator_batchnorm: bool = False
    # auxiliary networks
    phi_max_epochs: int = 30
    phi_patience: int = 3
    phi_lr: float = 1e-3
    classifier_epochs: int = 10
    classifier_lr: float = 1e-3
    # run control
    deterministic: bool = True
    checkpoint_every: int = 0
    out_dir: str = "runs/desk"

    def __post_init__(self):
        self.intensity_range = tuple(self.intensity_range)
        self.stage_epochs = tuple(self.stage_epochs)
        self.beta = tuple(self.beta)
        if self.q_supervision not in ("active", "full"):
            raise ValueError(f"q_supervision must be 'active' or 'full', got {self.q_supervision!r}")
        if len(self.stage_epochs) != 3:
            raise ValueError("stage_epochs needs three entries")

    @property
    def resolution(self) -> int:
        from .networks import PRESETS

        return PRESETS[self.preset].resolution

    @property
    def K(self) -> int:
        from .networks import PRESETS

        return PRESETS[self.preset].K

    def dataset_spec(self, role: str = "train") -> DatasetSpec:
        """Synthetic splits: ``train``, ``heldout`` (same identities, new intensities), ``test`` (new identities)."""
        common = dict(K=self.K, resolution=self.resolution, intensity_range=self.intensity_range, seed=self.data_seed)
        if role == "train":
            return DatasetSpec(self.n_identities, self.images_per_cell, **common)
        if role == "heldout":
            return DatasetSpec(self.n_identities, self.heldout_images_per_cell, variant=1, **common)
        if role == "test":
            return DatasetSpec(self.test_identities, self.test_images_per_cell,
                               first_identity=self.n_identities, **common)
        raise ValueError(f"unknown dataset role {role!r}")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


PRESET_CONFIGS: dict[str, dict[str, Any]] = {
    "desk": {},
    # constants for the full-scale setting (128 px, K=6, 80 subjects, batch 48)
    "paper": {"preset": "paper", "n_identities": 72, "test_identities": 8, "images_per_cell": 3,
              "batch_size": 48, "out_dir": "runs/paper"},
    "tiny": {"preset": "tiny", "n_identities": 4, "images_per_cell": 4, "test_identities": 2,
             "test_images_per_cell": 2, "heldout_images_per_cell": 1, "batch_size": 8,
             "stage_epochs": (1, 1, 1), "phi_max_epochs": 2, "classifier_epochs": 1, "out_dir": "runs/tiny"},
}

FIELD_NAMES = {f.name for f in dataclasses.fields(TrainConfig)}


def load_config(preset: str = "desk", path: str | Path | None = None, **overrides) -> TrainConfig:
    if preset not in PRESET_CONFIGS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESET_CONFIGS)}")
    values: dict[str, Any] = {"preset": preset, **PRESET_CONFIGS[preset]}
    if path is not None:
        file_values = json.loads(Path(path).read_text())
        unknown = set(file_values) - FIELD_NAMES
        if unknown:
            raise ValueError(f"unknown config keys in {path}: {sorted(unknown)}")
        values.update(file_values)
    values.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(values) - FIELD_NAMES
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return TrainConfig(**values)


def config_reference() -> str:
    """Markdown table of every config key with its desk default."""
    rows = ["| key | default |", "| --- | --- |"]
    for f in dataclasses.fields(TrainConfig):
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        rows.append(f"| `{f.name}` | `{default!r}` |")
    return "\n".join(rows)

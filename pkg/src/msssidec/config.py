"""Training configuration: every hyperparameter of the three-stage pipeline."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

TASKS = ("C1", "C2", "C3", "C4", "C5", "M1", "UnsupC1", "UnsupM1")
MODES = ("semisup", "unsup")
DISTANCES = ("sqeuclidean", "euclidean")
BASELINES = ("", "kmeans_raw", "ae_kmeans")

# (stage 1, stage 2, stage 3) epoch budgets
PROFILES = {
    "full": (4000, 100, 4000),
    "desk": (200, 50, 200),
}


@dataclass
class TrainingConfig:
    # task / data
    task_id: str = "C1"
    mode: str = "semisup"
    seed: int = 0
    trials: int = 1
    data_dir: str = ""
    manifest: str = ""
    synthetic_classes: int = 0
    synthetic_noise: float = 0.5
    window: int = 1024
    stride: int = 512
    n_sp: int = 1
    n_un: int = 300
    n_test: int = 300
    label_fraction: float = 0.01
    train_fraction: float = 0.5
    n_train_total: int = 10808

    # architecture
    n_input: int = 512
    n_rep: int = 32
    n_cluster: int = 10
    skip_conv_activation: bool = True

    # optimisation
    profile: str = "full"
    batch_size: int = 32
    pretrain_epochs: int = 4000
    pretrain_lr: float = 1e-3
    pretrain_patience: int = 200
    pretrain_min_delta: float = 1e-5
    cluster_epochs: int = 100
    cluster_lr: float = 1e-4
    classifier_epochs: int = 4000
    classifier_lr: float = 1e-4

    # clustering stage
    alpha: float = 1.0
    gamma_c: float = 0.1
    gamma_vat: float = 1.0
    vat_eps: float = 2.0
    vat_xi: float = 1e-6
    vat_power_iters: int = 1
    vat_all_samples: bool = True
    update_interval: int = 20
    tol: float = 1e-4
    distance: str = "sqeuclidean"
    kmeans_restarts: int = 10
    kmeans_max_iter: int = 300

    # classifier stage
    pseudo_weight: float = 1.0

    # ablations / baselines
    no_idec: bool = False
    no_vat: bool = False
    plain_cnn: bool = False
    no_skip: bool = False
    baseline: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.task_id not in TASKS:
            raise ValueError(f"unknown task {self.task_id!r}; expected one of {TASKS}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.distance not in DISTANCES:
            raise ValueError(f"unknown distance {self.distance!r}")
        if self.baseline not in BASELINES:
            raise ValueError(f"unknown baseline {self.baseline!r}")
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        if self.plain_cnn and (self.no_idec or self.no_vat):
            raise ValueError("plain_cnn removes stage 2 and cannot be combined with no_idec/no_vat")
        positive = ("alpha", "vat_eps", "vat_xi", "update_interval", "tol", "batch_size",
                    "n_input", "n_rep", "window", "stride", "trials")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_cluster < 2:
            raise ValueError("n_cluster must be >= 2")
        for name in ("gamma_c", "gamma_vat", "pretrain_epochs", "cluster_epochs", "classifier_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def effective_gamma_vat(self) -> float:
        return 0.0 if self.no_vat else self.gamma_vat

    def replace(self, **changes) -> "TrainingConfig":
        return dataclasses.replace(self, **changes)

    def with_profile(self, profile: str) -> "TrainingConfig":
        e1, e2, e3 = PROFILES[profile]
        return self.replace(profile=profile, pretrain_epochs=e1, cluster_epochs=e2, classifier_epochs=e3)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, values: dict) -> "TrainingConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)


def desk_config(**overrides) -> TrainingConfig:
    return TrainingConfig(**overrides).with_profile("desk").replace(**overrides)


def load_config(path: str | Path) -> TrainingConfig:
    """Read a flat ``key = value`` file whose keys are TrainingConfig field names."""
    with open(path, "rb") as fh:
        values = tomllib.load(fh)
    nested = [k for k, v in values.items() if isinstance(v, dict)]
    if nested:
        raise ValueError(f"config must be flat; found tables {nested}")
    profile = values.get("profile")
    cfg = TrainingConfig.from_dict(values)
    if profile is not None:
        # epoch counts given explicitly in the file win over the profile
        epochs = {k: values[k] for k in ("pretrain_epochs", "cluster_epochs", "classifier_epochs") if k in values}
        cfg = cfg.with_profile(profile).replace(**epochs)
    return cfg


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return json.dumps(value)
    return repr(value)


def save_config(cfg: TrainingConfig, path: str | Path) -> None:
    lines = [f"{k} = {_format_value(v)}" for k, v in cfg.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

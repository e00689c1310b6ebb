"""Training configuration: hyperparameters, loss weights and feature toggles."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .matching import DetectionLossWeights, LossWeights, MatchWeights


@dataclass
class TrainConfig:
    seed: int = 0
    precision: str = "float32"

    # architecture
    d: int = 32
    heads: int = 4
    ffn_hidden: int = 64
    enc_depth: int = 2
    dec_depth: int = 2
    num_queries: int = 10
    num_classes: int = 5
    backbone_stages: int = 3
    activation: str = "gelu"

    # objective
    lambda_cq: float = 10.0
    lambda_fq: float = 10.0
    lambda_bc: float = 1.0
    lambda_dc: float = 0.5
    reversal_strength: float = 0.5
    match_cls: float = 1.0
    match_l1: float = 5.0
    match_giou: float = 2.0
    loss_ce: float = 1.0
    loss_l1: float = 5.0
    loss_giou: float = 2.0
    no_object_weight: float = 0.1

    # optimisation
    lr: float = 1e-3
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    batch_per_domain: int = 4  # step 2: this many source plus this many target images
    step1_batch: int = 8  # step 1: source images per batch
    step1_iters: int = 3000
    step2_iters: int = 2000
    lr_drop_fraction: float = 0.8  # lr /10 after this fraction of a step's iterations

    # toggles
    baseline: bool = True  # backbone L_bc + L_dc
    cq: bool = True
    fq: bool = True
    fq_position_embedding: bool = False
    fq_weight_sharing: bool = True
    encoder_avgpool: bool = False

    # evaluation
    score_threshold: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.d % 4:
            raise ConfigError(f"d={self.d} must be divisible by 4 for the 2-d position embedding")
        if self.fq_position_embedding and not self.fq:
            raise ConfigError("fq_position_embedding requires fq")
        if not self.fq_weight_sharing and not self.fq:
            raise ConfigError("disabling fq_weight_sharing requires fq")
        if self.cq and self.encoder_avgpool:
            raise ConfigError("cq and encoder_avgpool are alternative encoder aggregations; enable one")
        if self.batch_per_domain < 1 or self.step1_batch < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.reversal_strength < 0:
            raise ConfigError("reversal_strength must be >= 0")
        for name in ("step1_iters", "step2_iters"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    # -- derived views -------------------------------------------------
    @property
    def weak_supervision(self) -> bool:
        return self.baseline or self.cq or self.fq or self.encoder_avgpool

    def loss_weights(self) -> LossWeights:
        return LossWeights(cq=self.lambda_cq, fq=self.lambda_fq, bc=self.lambda_bc, dc=self.lambda_dc)

    def match_weights(self) -> MatchWeights:
        return MatchWeights(self.match_cls, self.match_l1, self.match_giou)

    def detection_weights(self) -> DetectionLossWeights:
        return DetectionLossWeights(self.loss_ce, self.loss_l1, self.loss_giou, self.no_object_weight)

    def toggles(self) -> dict:
        return {k: getattr(self, k) for k in TOGGLES}

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config fields: {unknown}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def step1_fingerprint(self) -> str:
        """Identifies the source-only pretraining, which ignores the toggles."""
        d = {k: v for k, v in self.to_dict().items() if k not in TOGGLES and not k.startswith("lambda_") and k not in STEP2_ONLY}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


TOGGLES = ("baseline", "cq", "fq", "fq_position_embedding", "fq_weight_sharing", "encoder_avgpool")
STEP2_ONLY = ("step2_iters", "batch_per_domain", "reversal_strength", "score_threshold")


def config_fields() -> list[dataclasses.Field]:
    return list(dataclasses.fields(TrainConfig))


def field_help() -> dict[str, str]:
    return {f.name: f"{f.type} (default {f.default!r})" for f in dataclasses.fields(TrainConfig)}


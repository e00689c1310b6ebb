"""Full detector: backbone, class-query encoder, foreground-query decoder, heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import Backbone, DomainClassifier, DomainLabel, FeatureMap, ImageClassifier, loss_bc, loss_dc
from .config import TrainConfig
from .decoder import Decoder, DecoderState, InstancePrediction, foreground_presence_logits, instance_predict
from .encoder import Encoder, EncoderState, class_presence_logits, presence_loss
from .errors import ContractError
from .matching import LossReport, detection_loss, match_batch, total_loss
from .nn import Module
from .tensor import Tensor


@dataclass
class ModelOutput:
    features: FeatureMap
    encoder: EncoderState
    decoder: DecoderState
    prediction: InstancePrediction


@dataclass
class Batch:
    """Images of one or both domains; source rows always come first."""

    images: np.ndarray  # (B, 3, H, W)
    domains: np.ndarray  # (B,) DomainLabel values
    tags: np.ndarray  # (B, C)
    targets: list  # per source row: (labels, boxes)

    @property
    def num_source(self) -> int:
        return int((self.domains == DomainLabel.SOURCE).sum())

    @classmethod
    def from_samples(cls, samples) -> "Batch":
        samples = sorted(samples, key=lambda s: int(s.domain))  # stable: source first
        for s in samples:
            if s.domain is DomainLabel.TARGET and s.labels is not None:
                raise ContractError(f"target sample {s.index} carries box supervision")
        return cls(
            images=np.stack([s.image for s in samples]),
            domains=np.array([int(s.domain) for s in samples]),
            tags=np.stack([s.tags for s in samples]),
            targets=[(s.labels, s.boxes) for s in samples if s.domain is DomainLabel.SOURCE],
        )


class DetrGA(Module):
    def __init__(self, config: TrainConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        c = config
        with T.precision(c.precision):
            self.backbone = Backbone(rng, c.d, c.backbone_stages, activation=c.activation)
            self.encoder = Encoder(rng, c.d, c.heads, c.ffn_hidden, c.enc_depth, c.num_classes, c.activation)
            self.decoder = Decoder(
                rng, c.d, c.heads, c.ffn_hidden, c.dec_depth, c.num_queries, c.num_classes, c.activation,
                fq_position_embedding=c.fq_position_embedding,
                fq_weight_sharing=c.fq_weight_sharing,
            )
            self.bc_head = ImageClassifier(rng, c.d, c.num_classes)
            self.dc_head = DomainClassifier(rng, c.d, c.d, c.activation)

    def apply_toggles(self, config: TrainConfig) -> None:
        self.config = config
        self.decoder.fq_position_embedding = config.fq_position_embedding
        self.decoder.fq_weight_sharing = config.fq_weight_sharing

    def forward(self, images, with_class_queries: bool | None = None, with_foreground: bool | None = None) -> ModelOutput:
        if with_class_queries is None:
            with_class_queries = self.config.cq
        if with_foreground is None:
            with_foreground = self.config.fq
        with T.precision(self.config.precision):
            fm = self.backbone(T.Tensor(images))
            enc = self.encoder(fm.tokens, fm.position, with_class_queries)
            dec = self.decoder(enc.tokens, fm.position, with_foreground)
            pred = instance_predict(dec.objects, self.decoder)
        return ModelOutput(fm, enc, dec, pred)

    def predict(self, images) -> InstancePrediction:
        """Inference path: class queries dropped, foreground kept in self-attention if trained with it."""
        with T.no_grad():
            return self.forward(images, with_class_queries=False).prediction

    def set_record(self, flag: bool) -> None:
        self.encoder.set_record(flag)
        self.decoder.set_record(flag)

    def losses(self, batch: Batch, step: int = 2) -> LossReport:
        """Forward the batch and combine the enabled loss terms.

        Step 1 trains only the detection loss on source rows. In step 2 the
        detection loss still sees only source rows while every enabled
        image-level term sees both domains.
        """
        c = self.config
        weak = step == 2 and c.weak_supervision
        ns = batch.num_source
        if ns == 0 and not weak:
            raise ContractError("batch has no source rows and no weak supervision is enabled")
        images = batch.images if weak else batch.images[:ns]
        out = self.forward(images, with_class_queries=weak and c.cq, with_foreground=weak and c.fq)
        comps: dict[str, Tensor | None] = {}
        with T.precision(c.precision):
            if ns:
                pred = out.prediction
                if len(images) > ns:
                    pred = InstancePrediction(pred.class_logits[:ns], pred.boxes[:ns])
                assignments = match_batch(pred, batch.targets, c.match_weights())
                comps["det"], _ = detection_loss(pred, batch.targets, assignments, c.detection_weights())
            if weak:
                tags = batch.tags
                if c.cq:
                    comps["cq"] = presence_loss(class_presence_logits(out.encoder.class_queries, self.encoder.presence), tags)
                if c.encoder_avgpool:
                    comps["cq"] = presence_loss(self.encoder.avgpool(out.encoder.tokens), tags)
                if c.fq:
                    comps["fq"] = presence_loss(foreground_presence_logits(out.decoder.foreground, self.decoder), tags)
                if c.baseline:
                    comps["bc"] = loss_bc(out.features, tags, self.bc_head)
                    comps["dc"] = loss_dc(out.features, batch.domains, c.reversal_strength, self.dc_head)
            return total_loss(comps, c.loss_weights())

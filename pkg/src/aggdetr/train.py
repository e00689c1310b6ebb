"""Two-step training driver and checkpoint I/O.

Step 1 pretrains a plain detector on source images with the detection loss
only. Step 2 fine-tunes on batches holding equal numbers of source and target
images with every enabled term of the combined objective.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .backbone import DomainLabel
from .config import TrainConfig
from .data import Sample, load_split
from .errors import ContractError, NumericError
from .model import Batch, DetrGA
from .optim import AdamW, clip_grad_norm

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    model: DetrGA
    loss_log: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


class BatchSampler:
    """Epoch-wise shuffled index stream, deterministic in its seed."""

    def __init__(self, n: int, rng: np.random.Generator):
        if n < 1:
            raise ContractError("cannot sample batches from an empty split")
        self.n = n
        self.rng = rng
        self._order = np.empty(0, dtype=int)

    def take(self, k: int) -> np.ndarray:
        out = []
        while len(out) < k:
            if not len(self._order):
                self._order = self.rng.permutation(self.n)
            need = k - len(out)
            out.extend(self._order[:need].tolist())
            self._order = self._order[need:]
        return np.array(out)


def _lr_at(config: TrainConfig, it: int, total: int) -> float:
    return config.lr * (0.1 if it >= int(config.lr_drop_fraction * total) else 1.0)


def _check_finite(report, step: int, it: int) -> None:
    rec = report.record()
    for name in ("l_det", "l_cq", "l_fq", "l_bc", "l_dc", "total"):
        if not np.isfinite(rec[name]):
            raise NumericError(f"non-finite loss component {name} at step {step} iteration {it}")


def run_step(
    model: DetrGA,
    step: int,
    source: list[Sample],
    target: list[Sample] | None,
    iters: int,
    on_record: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Optimize ``model`` for ``iters`` iterations of training step ``step``."""
    c = model.config
    if step == 2 and c.weak_supervision and not target:
        raise ContractError("step 2 with weak supervision needs target-domain samples")
    if any(s.domain is not DomainLabel.SOURCE for s in source):
        raise ContractError("source split contains non-source samples")
    opt = AdamW(model.parameters(), lr=c.lr, weight_decay=c.weight_decay)
    src_sampler = BatchSampler(len(source), np.random.default_rng([c.seed, step, 0]))
    tgt_sampler = BatchSampler(len(target), np.random.default_rng([c.seed, step, 1])) if target else None
    use_target = step == 2 and c.weak_supervision
    records = []
    for it in range(iters):
        opt.lr = _lr_at(c, it, iters)
        picked = [source[i] for i in src_sampler.take(c.batch_per_domain if step == 2 else c.step1_batch)]
        if use_target:
            picked += [target[i] for i in tgt_sampler.take(c.batch_per_domain)]
        batch = Batch.from_samples(picked)
        opt.zero_grad()
        report = model.losses(batch, step)
        _check_finite(report, step, it)
        report.tensor.backward()
        gnorm = clip_grad_norm(opt.params, c.grad_clip)
        opt.step()
        rec = {"step": step, "iter": it, **report.record(), "lr": opt.lr, "grad_norm": gnorm}
        records.append(rec)
        if on_record:
            on_record(rec)
    return records


def source_only_config(config: TrainConfig) -> TrainConfig:
    """``config`` with every adaptation toggle off."""
    return config.replace(cq=False, fq=False, baseline=False, encoder_avgpool=False,
                          fq_position_embedding=False, fq_weight_sharing=True)


def prepare_step2(model: DetrGA, config: TrainConfig) -> None:
    """Switch a pretrained model to the step-2 toggles."""
    model.apply_toggles(config)
    if config.fq and not config.fq_weight_sharing:
        # the separate foreground stack starts from the pretrained decoder weights
        for shared, own in zip(model.decoder.blocks, model.decoder.fg_blocks):
            own.load_state_dict(shared.state_dict())


def train(
    config: TrainConfig,
    dataset_root=None,
    out_dir=None,
    samples: dict[str, list[Sample]] | None = None,
    step1_state: dict | None = None,
    on_record: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run both training steps; ``step1_state`` skips step 1 when given.

    Either ``dataset_root`` or preloaded ``samples`` (keys ``source``,
    ``target``) must be supplied. With ``out_dir`` the loss log (one JSON
    object per line) and a checkpoint are written there.
    """
    if samples is None:
        if dataset_root is None:
            raise ContractError("train() needs a dataset root or preloaded samples")
        samples = {"source": load_split(dataset_root, "source", "train"), "target": load_split(dataset_root, "target", "train")}
    model = DetrGA(config)
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "loss_log.jsonl", "w")

    def emit(rec):
        if log_fh:
            log_fh.write(json.dumps(rec) + "\n")
        if on_record:
            on_record(rec)

    records: list[dict] = []
    try:
        if step1_state is not None:
            model.load_state_dict(step1_state)
        else:
            model.apply_toggles(source_only_config(config))
            records += run_step(model, 1, samples["source"], None, config.step1_iters, emit)
        prepare_step2(model, config)
        records += run_step(model, 2, samples["source"], samples.get("target"), config.step2_iters, emit)
    finally:
        if log_fh:
            log_fh.close()
    ckpt = None
    if out_dir is not None:
        ckpt = save_checkpoint(model, out_dir / "checkpoint.npz")
    return TrainResult(model, records, ckpt)


def pretrain_source_only(config: TrainConfig, source: list[Sample], on_record=None) -> tuple[dict, list[dict]]:
    """Step 1 alone; returns the parameter state shared by every step-2 variant."""
    model = DetrGA(source_only_config(config))
    records = run_step(model, 1, source, None, config.step1_iters, on_record)
    return model.state_dict(), records


# ----------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: DetrGA, path) -> Path:
    path = Path(path)
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    arrays["config"] = np.array(model.config.to_json())
    arrays["fingerprint"] = np.array(model.config.fingerprint())
    np.savez_compressed(path, **arrays)
    return path


def load_checkpoint(path) -> DetrGA:
    path = Path(path)
    if not path.exists():
        raise ContractError(f"checkpoint {path} does not exist")
    with np.load(path) as z:
        config = TrainConfig.from_dict(json.loads(str(z["config"])))
        state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    model = DetrGA(config)
    model.load_state_dict(state)
    return model

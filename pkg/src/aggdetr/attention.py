"""Attention-map extraction, graymap dumps and localization statistics."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Sample, write_pgm
from .errors import ContractError
from .model import DetrGA

WHICH = ("class_query", "foreground", "object")


@dataclass
class AttentionMap:
    which: str
    index: int
    block: int
    row: np.ndarray  # (h*w,) attention weights, head-averaged
    grid: tuple[int, int]

    def as_grid(self) -> np.ndarray:
        return self.row.reshape(self.grid)


def _check_request(model: DetrGA, which: str, index: int, block: int) -> None:
    c = model.config
    if which not in WHICH:
        raise ContractError(f"unknown query kind {which!r}; expected one of {WHICH}")
    if which == "class_query":
        if not c.cq:
            raise ContractError("class queries are absent: checkpoint was not trained with cq")
        if not 0 <= index < c.num_classes:
            raise ContractError(f"class query {index} out of range for {c.num_classes} classes")
        depth = c.enc_depth
    else:
        if which == "foreground" and not c.fq:
            raise ContractError("foreground query is absent: checkpoint was not trained with fq")
        if which == "foreground" and index != 0:
            raise ContractError("there is a single foreground query; index must be 0")
        if which == "object" and not 0 <= index < c.num_queries:
            raise ContractError(f"object query {index} out of range for {c.num_queries} queries")
        depth = c.dec_depth
    if not 0 <= block < depth:
        raise ContractError(f"block {block} out of range for depth {depth}")


def attention_maps(model: DetrGA, images: np.ndarray, which: str, index: int = 0, block: int = -1) -> np.ndarray:
    """Cross-attention rows of one query for a batch of images, shape (B, h*w)."""
    c = model.config
    depth = c.enc_depth if which == "class_query" else c.dec_depth
    block = block % depth if block < 0 else block
    _check_request(model, which, index, block)
    for blk in model.encoder.blocks + model.decoder.blocks + model.decoder.fg_blocks:
        blk.cross_attn.last_weights = None
    model.set_record(True)
    try:
        with_cq = which == "class_query"
        model.forward(np.asarray(images)[None] if np.ndim(images) == 3 else images, with_class_queries=with_cq)
    finally:
        model.set_record(False)
    if which == "class_query":
        w = model.encoder.class_query_maps()[block][..., index, :]
    else:
        objects, fg = model.decoder.cross_attention_maps()[block]
        w = fg[..., 0, :] if which == "foreground" else objects[..., index, :]
    return np.asarray(w, dtype=np.float64).reshape(-1, w.shape[-1])


def token_grid(model: DetrGA, image_size: int) -> tuple[int, int]:
    side = image_size // 2 ** model.config.backbone_stages
    return side, side


def dump_attention(model: DetrGA, sample: Sample, which: str, index: int, block: int, out_path) -> AttentionMap:
    """Write one query's attention row as a graymap plus the raw row as JSON.

    The graymap is the row reshaped to the token grid and scaled so its maximum
    maps to white. The JSON file sits next to it with a ``.json`` suffix.
    """
    row = attention_maps(model, sample.image, which, index, block)[0]
    grid = token_grid(model, sample.image.shape[-1])
    amap = AttentionMap(which, index, block, row, grid)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    peak = row.max()
    write_pgm(out_path, amap.as_grid() / peak if peak > 0 else amap.as_grid())
    out_path.with_suffix(".json").write_text(json.dumps(
        {"which": which, "index": index, "block": block, "grid": list(grid), "sample": sample.index,
         "domain": sample.domain.name.lower(), "row": row.tolist()}
    ))
    return amap


# ----------------------------------------------------------------------
# localization statistics


def box_token_mask(boxes_cxcywh: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Tokens whose cell centre falls inside any of the normalized boxes, flattened (h*w,)."""
    h, w = grid
    cy = (np.arange(h) + 0.5) / h
    cx = (np.arange(w) + 0.5) / w
    mask = np.zeros((h, w), dtype=bool)
    for bx, by, bw, bh in np.asarray(boxes_cxcywh, dtype=float).reshape(-1, 4):
        iny = (cy >= by - bh / 2) & (cy <= by + bh / 2)
        inx = (cx >= bx - bw / 2) & (cx <= bx + bw / 2)
        mask |= iny[:, None] & inx[None, :]
    return mask.ravel()


@dataclass
class LocalizationStats:
    images: int
    passing: int
    mass: list[float]  # per (image, present class)
    area_fraction: list[float]

    @property
    def pass_rate(self) -> float:
        return self.passing / self.images if self.images else float("nan")


def class_query_localization(model: DetrGA, samples: list[Sample], block: int = -1, batch_size: int = 32) -> LocalizationStats:
    """How often class queries put more attention inside their class's boxes than uniform would.

    An image passes when, for every class present in it, the final-block
    attention mass of that class's query on tokens inside the class's boxes
    exceeds the fraction of tokens inside those boxes.
    """
    grid = token_grid(model, samples[0].image.shape[-1])
    passing, images, masses, fracs = 0, 0, [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        imgs = np.stack([s.image for s in chunk])
        per_class = [attention_maps(model, imgs, "class_query", i, block) for i in range(model.config.num_classes)]
        for b, s in enumerate(chunk):
            labels, boxes = s.eval_targets()
            if len(labels) == 0:
                continue
            ok = True
            for cls in np.unique(labels):
                m = box_token_mask(boxes[labels == cls], grid)
                mass = float(per_class[cls][b][m].sum())
                frac = float(m.mean())
                masses.append(mass)
                fracs.append(frac)
                ok &= mass > frac
            images += 1
            passing += int(ok)
    return LocalizationStats(images, passing, masses, fracs)


def attention_entropy(rows: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of each attention row."""
    p = np.clip(rows, 1e-300, None)
    return -(rows * np.log(p)).sum(axis=-1)


def foreground_entropy(model: DetrGA, samples: list[Sample], block: int = -1, batch_size: int = 32) -> np.ndarray:
    out = []
    for start in range(0, len(samples), batch_size):
        imgs = np.stack([s.image for s in samples[start : start + batch_size]])
        out.append(attention_entropy(attention_maps(model, imgs, "foreground", 0, block)))
    return np.concatenate(out)

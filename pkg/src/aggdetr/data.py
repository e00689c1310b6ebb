"""Synthetic two-domain shape-detection benchmark.

Source images are flat-shaded shapes on a plain background and carry boxes.
Target images render the same kind of scene with a shifted appearance (new
palette, striped background texture, dark outlines, lower contrast); they
expose only class tags, while their boxes live in an evaluation-only file.

On-disk layout::

    <root>/manifest.json
    <root>/{source,target}/{train,test}/images/<index>.ppm
    <root>/{source,target}/{train,test}/annotations.json
    <root>/target/{train,test}/eval_boxes.json        (hidden boxes)
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import DomainLabel
from .errors import ContractError

SHAPES = ("disk", "square", "triangle", "ring", "cross", "diamond", "hbar", "vbar")
FORMAT_VERSION = 1
DOMAINS = ("source", "target")
SPLITS = ("train", "test")

SOURCE_PALETTE = np.array(
    [
        [0.85, 0.15, 0.15],
        [0.15, 0.65, 0.20],
        [0.15, 0.30, 0.85],
        [0.90, 0.70, 0.10],
        [0.65, 0.20, 0.75],
        [0.10, 0.70, 0.75],
    ]
)
TARGET_PALETTE = np.array(
    [
        [0.75, 0.35, 0.10],
        [0.35, 0.55, 0.15],
        [0.25, 0.20, 0.60],
        [0.80, 0.55, 0.35],
        [0.45, 0.15, 0.45],
        [0.15, 0.45, 0.55],
    ]
)


@dataclass
class SceneSpec:
    image_size: int = 64
    num_classes: int = 5
    objects_per_image: tuple[int, int] = (1, 4)
    size_range: tuple[float, float] = (14.0, 26.0)  # object extent in pixels
    max_iou: float = 0.15
    max_retries: int = 60
    seed: int = 0

    def __post_init__(self):
        self.objects_per_image = tuple(self.objects_per_image)
        self.size_range = tuple(self.size_range)
        if not 1 <= self.num_classes <= len(SHAPES):
            raise ContractError(f"num_classes must be in [1, {len(SHAPES)}], got {self.num_classes}")
        lo, hi = self.objects_per_image
        if not 1 <= lo <= hi:
            raise ContractError(f"invalid objects_per_image {self.objects_per_image}")

    @property
    def class_names(self) -> tuple[str, ...]:
        return SHAPES[: self.num_classes]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)


@dataclass
class ShiftConfig:
    """Appearance transform turning a source rendering into a target one."""

    palette_shift: int = 3  # target colour = TARGET_PALETTE[(i + shift) % 6]
    stripe_period: tuple[float, float] = (5.0, 9.0)
    stripe_contrast: float = 0.2
    background: tuple[float, float] = (0.6, 0.8)  # per-channel base level range
    outline: bool = True
    contrast: float = 0.85
    brightness: float = 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class SceneObject:
    label: int
    box: tuple[float, float, float, float]  # pixel corners x0, y0, x1, y1
    color: int


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1], 8-bit quantized
    domain: DomainLabel
    tags: np.ndarray  # (C,) multi-hot
    labels: np.ndarray | None  # (G,) class ids, source only
    boxes: np.ndarray | None  # (G, 4) normalized cxcywh, source only
    index: int = 0
    hidden_labels: np.ndarray | None = None  # target only, evaluation use
    hidden_boxes: np.ndarray | None = None
    objects: list[SceneObject] = field(default_factory=list, repr=False)

    def eval_targets(self) -> tuple[np.ndarray, np.ndarray]:
        if self.domain is DomainLabel.SOURCE:
            return self.labels, self.boxes
        if self.hidden_boxes is None:
            raise ContractError(f"target sample {self.index} has no evaluation boxes loaded")
        return self.hidden_labels, self.hidden_boxes


# ----------------------------------------------------------------------
# rendering


def shape_mask(label: int, box, size: int) -> np.ndarray:
    """Boolean mask of a class archetype filling the pixel box ``(x0, y0, x1, y1)``."""
    x0, y0, x1, y1 = box
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    u = (xs - x0) / (x1 - x0)  # [0, 1] across the box
    v = (ys - y0) / (y1 - y0)
    inside = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    du, dv = u - 0.5, v - 0.5
    r2 = du * du + dv * dv
    name = SHAPES[label]
    if name == "disk":
        m = r2 <= 0.25
    elif name == "square":
        m = inside
    elif name == "triangle":
        m = inside & (np.abs(du) <= 0.5 * v)
    elif name == "ring":
        m = (r2 <= 0.25) & (r2 >= 0.09)
    elif name == "cross":
        m = inside & ((np.abs(du) <= 0.17) | (np.abs(dv) <= 0.17))
    elif name == "diamond":
        m = np.abs(du) + np.abs(dv) <= 0.5
    elif name == "hbar":
        m = inside & ((v <= 0.3) | (v >= 0.7))
    else:  # vbar
        m = inside & ((u <= 0.3) | (u >= 0.7))
    return m & inside


def _quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _outline(mask: np.ndarray) -> np.ndarray:
    inner = mask.copy()
    inner[1:, :] &= mask[:-1, :]
    inner[:-1, :] &= mask[1:, :]
    inner[:, 1:] &= mask[:, :-1]
    inner[:, :-1] &= mask[:, 1:]
    return mask & ~inner


def render(objects: list[SceneObject], size: int, domain: DomainLabel, rng: np.random.Generator, shift: ShiftConfig | None = None) -> np.ndarray:
    """Paint the scene; ``rng`` drives only background/appearance details."""
    img = np.empty((3, size, size))
    if domain is DomainLabel.SOURCE:
        bg = rng.uniform(0.80, 0.95, size=3)
        img[:] = bg[:, None, None]
        for obj in objects:
            m = shape_mask(obj.label, obj.box, size)
            img[:, m] = SOURCE_PALETTE[obj.color][:, None]
        return _quantize(img)

    shift = shift or ShiftConfig()
    ys, xs = np.mgrid[0:size, 0:size]
    angle = rng.uniform(0, np.pi)
    period = rng.uniform(*shift.stripe_period)
    phase = np.cos(angle) * xs + np.sin(angle) * ys
    stripes = 0.5 + 0.5 * np.sign(np.sin(2 * np.pi * phase / period))
    base = rng.uniform(*shift.background, size=3)
    accent = np.clip(base + shift.stripe_contrast * rng.uniform(0.6, 1.0, size=3), 0, 1)
    img[:] = base[:, None, None] + (accent - base)[:, None, None] * stripes[None]
    for obj in objects:
        m = shape_mask(obj.label, obj.box, size)
        color = TARGET_PALETTE[(obj.color + shift.palette_shift) % len(TARGET_PALETTE)]
        img[:, m] = color[:, None]
        if shift.outline:
            img[:, _outline(m)] = 0.05
    img = 0.5 + (img - 0.5) * shift.contrast + shift.brightness
    return _quantize(img)


def _scene_rng(spec: SceneSpec, index: int, stream: int, purpose: int) -> np.random.Generator:
    if index < 0:
        raise ContractError(f"scene index must be >= 0, got {index}")
    return np.random.default_rng([spec.seed, stream, index, purpose])


def _box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def _layout(spec: SceneSpec, rng: np.random.Generator) -> list[SceneObject]:
    lo, hi = spec.objects_per_image
    count = int(rng.integers(lo, hi + 1))
    objects: list[SceneObject] = []
    for _ in range(count):
        for _attempt in range(spec.max_retries):
            label = int(rng.integers(spec.num_classes))
            w = rng.uniform(*spec.size_range)
            h = float(np.clip(w * rng.uniform(0.8, 1.25), *spec.size_range))
            x0 = rng.uniform(0, spec.image_size - w)
            y0 = rng.uniform(0, spec.image_size - h)
            box = (float(x0), float(y0), float(x0 + w), float(y0 + h))
            if all(_box_iou(box, o.box) <= spec.max_iou for o in objects):
                objects.append(SceneObject(label, box, int(rng.integers(len(SOURCE_PALETTE)))))
                break
        # retries exhausted: keep the objects placed so far
    return objects


def _normalized(objects: list[SceneObject], size: int) -> tuple[np.ndarray, np.ndarray]:
    labels = np.array([o.label for o in objects], dtype=int)
    xyxy = np.array([o.box for o in objects], dtype=float).reshape(-1, 4) / size
    cxcywh = np.stack(
        [(xyxy[:, 0] + xyxy[:, 2]) / 2, (xyxy[:, 1] + xyxy[:, 3]) / 2, xyxy[:, 2] - xyxy[:, 0], xyxy[:, 3] - xyxy[:, 1]],
        axis=-1,
    )
    return labels, cxcywh


def tags_from_labels(labels, num_classes: int) -> np.ndarray:
    tags = np.zeros(num_classes, dtype=np.float32)
    tags[np.asarray(labels, dtype=int)] = 1.0
    return tags


def generate_scene(spec: SceneSpec, index: int, stream: int = 0) -> Sample:
    """Source-appearance sample, a pure function of (spec, stream, index)."""
    objects = _layout(spec, _scene_rng(spec, index, stream, 0))
    image = render(objects, spec.image_size, DomainLabel.SOURCE, _scene_rng(spec, index, stream, 1))
    labels, boxes = _normalized(objects, spec.image_size)
    return Sample(
        image=image,
        domain=DomainLabel.SOURCE,
        tags=tags_from_labels(labels, spec.num_classes),
        labels=labels,
        boxes=boxes,
        index=index,
        objects=objects,
    )


def apply_domain_shift(sample: Sample, spec: SceneSpec, shift: ShiftConfig | None = None, stream: int = 0) -> Sample:
    """Re-render ``sample`` in target appearance; geometry moves to the hidden channel.

    Idempotent: a target sample comes back unchanged.
    """
    if sample.domain is DomainLabel.TARGET:
        return sample
    if not sample.objects:
        raise ContractError("sample carries no scene description to re-render")
    image = render(sample.objects, spec.image_size, DomainLabel.TARGET, _scene_rng(spec, sample.index, stream, 2), shift)
    return Sample(
        image=image,
        domain=DomainLabel.TARGET,
        tags=sample.tags.copy(),
        labels=None,
        boxes=None,
        index=sample.index,
        hidden_labels=sample.labels.copy(),
        hidden_boxes=sample.boxes.copy(),
        objects=list(sample.objects),
    )


STREAMS = {("source", "train"): 0, ("source", "test"): 1, ("target", "train"): 2, ("target", "test"): 3}


def generate_split(spec: SceneSpec, domain: str, split: str, count: int, shift: ShiftConfig | None = None) -> list[Sample]:
    stream = STREAMS[(domain, split)]
    out = []
    for i in range(count):
        s = generate_scene(spec, i, stream)
        if domain == "target":
            s = apply_domain_shift(s, spec, shift, stream)
        out.append(s)
    return out


# ----------------------------------------------------------------------
# portable pixmaps


def write_ppm(path, image: np.ndarray) -> None:
    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    _, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.transpose(1, 2, 0).tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    arr = np.round(np.clip(gray, 0, 1) * 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def _read_netpbm(path) -> tuple[str, int, int, bytes]:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos].decode("ascii"))
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ContractError(f"{path}: only 8-bit netpbm files are supported")
    return magic, w, h, raw[pos + 1 :]


def read_ppm(path) -> np.ndarray:
    magic, w, h, body = _read_netpbm(path)
    if magic != "P6":
        raise ContractError(f"{path}: not a binary PPM")
    arr = np.frombuffer(body[: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0).astype(np.float32)


def read_pgm(path) -> np.ndarray:
    magic, w, h, body = _read_netpbm(path)
    if magic != "P5":
        raise ContractError(f"{path}: not a binary PGM")
    return np.frombuffer(body[: w * h], dtype=np.uint8).reshape(h, w).astype(np.float32) / 255.0


# ----------------------------------------------------------------------
# datasets on disk

DEFAULT_COUNTS = {"source/train": 2000, "source/test": 200, "target/train": 2000, "target/test": 200}


def dataset_build(spec: SceneSpec, counts: dict[str, int], root, shift: ShiftConfig | None = None) -> Path:
    """Write every split plus a manifest; a pure function of (spec, shift, counts)."""
    shift = shift or ShiftConfig()
    root = Path(root)
    for key, n in counts.items():
        if key not in DEFAULT_COUNTS:
            raise ContractError(f"unknown split {key!r}; expected keys {sorted(DEFAULT_COUNTS)}")
        if int(n) < 1:
            raise ContractError(f"split {key} needs at least one sample, got {n}")
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset root {root}: {exc}") from exc
    for key in sorted(counts):
        domain, split = key.split("/")
        samples = generate_split(spec, domain, split, int(counts[key]), shift)
        _write_split(root / domain / split, samples, spec)
    manifest = {
        "format_version": FORMAT_VERSION,
        "spec": spec.to_dict(),
        "shift": shift.to_dict(),
        "counts": {k: int(v) for k, v in sorted(counts.items())},
        "class_names": list(spec.class_names),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return root


def _write_split(path: Path, samples: list[Sample], spec: SceneSpec) -> None:
    images = path / "images"
    images.mkdir(parents=True, exist_ok=True)
    records, hidden = [], []
    for s in samples:
        name = f"{s.index:05d}.ppm"
        write_ppm(images / name, s.image)
        rec = {"file": f"images/{name}", "index": s.index, "tags": [int(t) for t in s.tags]}
        if s.domain is DomainLabel.SOURCE:
            rec["objects"] = [{"label": int(l), "box": [float(x) for x in b]} for l, b in zip(s.labels, s.boxes)]
        else:
            hidden.append(
                {
                    "file": rec["file"],
                    "index": s.index,
                    "objects": [{"label": int(l), "box": [float(x) for x in b]} for l, b in zip(s.hidden_labels, s.hidden_boxes)],
                }
            )
        records.append(rec)
    domain = samples[0].domain.name.lower() if samples else "source"
    doc = {"domain": domain, "box_format": "cxcywh-normalized", "class_names": list(spec.class_names), "images": records}
    (path / "annotations.json").write_text(json.dumps(doc) + "\n")
    if hidden:
        (path / "eval_boxes.json").write_text(json.dumps({"box_format": "cxcywh-normalized", "images": hidden}) + "\n")


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise ContractError(f"no dataset manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ContractError(f"unsupported dataset format {manifest.get('format_version')}")
    return manifest


def rebuild_from_manifest(root, out_root) -> Path:
    m = read_manifest(root)
    return dataset_build(SceneSpec.from_dict(m["spec"]), m["counts"], out_root, ShiftConfig(**m["shift"]))


def load_split(root, domain: str, split: str, with_eval_boxes: bool = False) -> list[Sample]:
    """Load a split from disk. Target boxes are attached only with ``with_eval_boxes``."""
    path = Path(root) / domain / split
    ann_path = path / "annotations.json"
    if not ann_path.exists():
        raise ContractError(f"missing annotations for {domain}/{split} under {root}")
    doc = json.loads(ann_path.read_text())
    dom = DomainLabel.parse(domain)
    hidden = {}
    if dom is DomainLabel.TARGET and with_eval_boxes:
        eval_doc = json.loads((path / "eval_boxes.json").read_text())
        hidden = {rec["index"]: rec["objects"] for rec in eval_doc["images"]}
    samples = []
    for rec in doc["images"]:
        image = read_ppm(path / rec["file"])
        tags = np.array(rec["tags"], dtype=np.float32)
        labels = boxes = hl = hb = None
        if dom is DomainLabel.SOURCE:
            labels, boxes = _objects_to_arrays(rec["objects"])
        elif with_eval_boxes:
            hl, hb = _objects_to_arrays(hidden[rec["index"]])
        samples.append(Sample(image, dom, tags, labels, boxes, rec["index"], hl, hb))
    return samples


def _objects_to_arrays(objs) -> tuple[np.ndarray, np.ndarray]:
    labels = np.array([o["label"] for o in objs], dtype=int)
    boxes = np.array([o["box"] for o in objs], dtype=float).reshape(-1, 4)
    return labels, boxes


def default_dataset_root() -> Path:
    return Path(os.environ.get("AGGDETR_OUTPUT_ROOT", "runs")) / "dataset"


def generate_benchmark(spec: SceneSpec | None = None, counts: dict[str, int] | None = None, shift: ShiftConfig | None = None) -> dict[str, list[Sample]]:
    """All four splits in memory, keyed source / target / source_test / target_test."""
    spec = spec or SceneSpec()
    counts = {**DEFAULT_COUNTS, **(counts or {})}
    return {
        "source": generate_split(spec, "source", "train", counts["source/train"], shift),
        "target": generate_split(spec, "target", "train", counts["target/train"], shift),
        "source_test": generate_split(spec, "source", "test", counts["source/test"], shift),
        "target_test": generate_split(spec, "target", "test", counts["target/test"], shift),
    }


def load_benchmark(root) -> dict[str, list[Sample]]:
    """On-disk counterpart of :func:`generate_benchmark`; target test carries its evaluation boxes."""
    read_manifest(root)
    return {
        "source": load_split(root, "source", "train"),
        "target": load_split(root, "target", "train"),
        "source_test": load_split(root, "source", "test"),
        "target_test": load_split(root, "target", "test", with_eval_boxes=True),
    }

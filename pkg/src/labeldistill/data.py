"""Synthetic shapes detection data: generation, masks, and the JSONL dataset file.

Scenes are rendered deterministically from (seed, generator settings), so
dataset files store only seeds and annotations and images are regenerated
on load. Object masks are re-rasterized from normalized boxes at every
pyramid scale instead of down-sampling a full-resolution mask.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np


class DatasetError(ValueError):
    pass


@dataclasses.dataclass
class Annotation:
    box: tuple  # (x1, y1, x2, y2) normalized to [0, 1]
    category: int

    def validate(self, num_classes, scene_id=""):
        x1, y1, x2, y2 = self.box
        where = f" in scene {scene_id}" if scene_id else ""
        if not (0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0):
            raise DatasetError(f"degenerate box {self.box}{where}")
        if not (0 <= self.category < num_classes):
            raise DatasetError(f"category {self.category} out of range{where}")


@dataclasses.dataclass
class GeneratorConfig:
    image_size: int = 64
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 5
    max_annotations: int = 8
    min_extent: float = 0.12   # smallest object side, fraction of image
    max_extent: float = 0.55

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DatasetError(f"unknown generator settings: {sorted(unknown)}")
        return cls(**d)


@dataclasses.dataclass
class Scene:
    id: str
    image: np.ndarray            # (H, W, 3) in [0, 1]
    annotations: list            # list[Annotation]
    seed: int = 0
    gen: GeneratorConfig = None

    def validate(self):
        k = self.gen.num_classes if self.gen else max((a.category for a in self.annotations), default=0) + 1
        maxn = self.gen.max_annotations if self.gen else 8
        if len(self.annotations) > maxn:
            raise DatasetError(f"scene {self.id}: {len(self.annotations)} annotations exceeds {maxn}")
        for a in self.annotations:
            a.validate(k, self.id)


# three foreground classes: 0 rectangle, 1 disc, 2 triangle
_BASE_COLOR = np.array([
    [0.85, 0.25, 0.20],
    [0.20, 0.75, 0.30],
    [0.25, 0.35, 0.90],
])


def _textured_background(rng, size):
    side = max(1, size // 8)
    coarse = rng.uniform(0.25, 0.75, size=(side, side, 3))
    img = np.repeat(np.repeat(coarse, size // side, axis=0), size // side, axis=1)
    img += rng.normal(0.0, 0.03, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _shape_mask(kind, size, cx, cy, half_w, half_h):
    """Boolean pixel mask of one rendered shape; pixel centers at (i+0.5)."""
    ys = (np.arange(size) + 0.5)[:, None]
    xs = (np.arange(size) + 0.5)[None, :]
    if kind == 0:  # rectangle
        return (np.abs(xs - cx) <= half_w) & (np.abs(ys - cy) <= half_h)
    if kind == 1:  # disc (ellipse when half_w != half_h)
        return ((xs - cx) / half_w) ** 2 + ((ys - cy) / half_h) ** 2 <= 1.0
    # upward triangle: apex at top, base at bottom
    fy = (ys - (cy - half_h)) / (2 * half_h)
    fy = np.clip(fy, 0.0, None)
    return (np.abs(xs - cx) <= half_w * fy) & (fy <= 1.0)


def generate_scene(seed, gen: GeneratorConfig, scene_id=None, num_objects=None):
    """Render one deterministic scene of colored shapes on a textured background."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5CE4E]))
    size = gen.image_size
    img = _textured_background(rng, size)

    if num_objects is None:
        num_objects = int(rng.integers(gen.min_objects, gen.max_objects + 1))
    annotations = []
    for _ in range(num_objects):
        kind = int(rng.integers(0, gen.num_classes))
        half_w = 0.5 * size * rng.uniform(gen.min_extent, gen.max_extent)
        half_h = 0.5 * size * rng.uniform(gen.min_extent, gen.max_extent)
        cx = rng.uniform(half_w, size - half_w)
        cy = rng.uniform(half_h, size - half_h)
        mask = _shape_mask(kind, size, cx, cy, half_w, half_h)
        if not mask.any():
            continue
        color = np.clip(_BASE_COLOR[kind % 3] + rng.normal(0.0, 0.06, 3), 0.05, 0.98)
        shade = 1.0 - 0.25 * rng.random()
        img[mask] = color * shade
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        box = (cols[0] / size, rows[0] / size, (cols[-1] + 1) / size, (rows[-1] + 1) / size)
        annotations.append(Annotation(box=box, category=kind))

    scene = Scene(
        id=scene_id or f"scene-{seed}",
        image=img,
        annotations=annotations,
        seed=int(seed),
        gen=gen,
    )
    scene.validate()
    return scene


def rasterize_mask(box, h, w):
    """Binary mask: cell set iff its center falls inside the box.

    A box whose interior captures no cell centers still gets the single
    cell containing the box center, so every object owns at least one cell
    at every scale.
    """
    x1, y1, x2, y2 = box
    cx = (np.arange(w) + 0.5) / w
    cy = (np.arange(h) + 0.5) / h
    inside = ((cy[:, None] > y1) & (cy[:, None] < y2) &
              (cx[None, :] > x1) & (cx[None, :] < x2))
    mask = inside.astype(np.float64)
    if not inside.any():
        r = min(int((y1 + y2) / 2 * h), h - 1)
        c = min(int((x1 + x2) / 2 * w), w - 1)
        mask[r, c] = 1.0
    return mask


CONTEXT_BOX = (0.0, 0.0, 1.0, 1.0)


def mask_pyramid(scene, level_shapes):
    """Per level: (N+1, H_p*W_p) rows of flattened masks; row 0 is all-ones context."""
    out = []
    for h, w in level_shapes:
        rows = [rasterize_mask(CONTEXT_BOX, h, w).reshape(-1)]
        rows += [rasterize_mask(a.box, h, w).reshape(-1) for a in scene.annotations]
        out.append(np.stack(rows, axis=0))
    return out


# ---------------------------------------------------------------------------
# dataset file: newline-delimited JSON, one scene per line


def write_dataset(path, records):
    """records: iterable of dicts {id, seed, gen, annotations}."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def scene_record(scene):
    return {
        "id": scene.id,
        "seed": scene.seed,
        "gen": scene.gen.to_dict(),
        "annotations": [
            {"box": [round(v, 9) for v in a.box], "category": a.category}
            for a in scene.annotations
        ],
    }


def generate_dataset(path, base_seed, count, gen: GeneratorConfig):
    recs = []
    for i in range(count):
        scene = generate_scene(base_seed + i, gen, scene_id=f"s{base_seed + i:08d}")
        recs.append(scene_record(scene))
    write_dataset(path, recs)
    return recs


class SceneRef:
    """Lazy handle: annotations parsed eagerly, image regenerated on demand."""

    def __init__(self, rec, line_no):
        for key in ("id", "seed", "gen", "annotations"):
            if key not in rec:
                raise DatasetError(f"line {line_no}: missing field '{key}'")
        self.id = str(rec["id"])
        self.seed = int(rec["seed"])
        self.gen = GeneratorConfig.from_dict(rec["gen"])
        self.annotations = []
        for a in rec["annotations"]:
            ann = Annotation(box=tuple(float(v) for v in a["box"]), category=int(a["category"]))
            ann.validate(self.gen.num_classes, self.id)
            self.annotations.append(ann)
        if len(self.annotations) > self.gen.max_annotations:
            raise DatasetError(
                f"scene {self.id}: annotation count {len(self.annotations)} exceeds "
                f"{self.gen.max_annotations}")
        self._scene = None

    def load(self):
        if self._scene is None:
            scene = generate_scene(self.seed, self.gen, scene_id=self.id)
            # keep the recorded annotations (they are authoritative)
            scene.annotations = self.annotations
            self._scene = scene
        return self._scene


def load_annotations(path):
    """Parse the JSONL dataset file into SceneRefs, preserving order."""
    refs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"line {line_no}: malformed record ({e.msg})") from None
            refs.append(SceneRef(rec, line_no))
    return refs

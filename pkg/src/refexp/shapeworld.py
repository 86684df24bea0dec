"""Synthetic referring-expression scenes with a formal semantics oracle.

Scenes hold 2-5 colored shapes; every emitted expression is certified by the
oracle to denote exactly one object, which makes generation scoring exact and
grounding targets unambiguous. Images are binary P6 PPM, annotations JSONL.

Grammar (closed vocabulary, all lowercase):
    ATTR  := "the" [size] [color] kind
    SUP   := "the" superlative [size] [color] kind
    REL   := ATTR relation ATTR          (relation: "left of" | "right of" |
                                          "above" | "below")
    ORD   := "the" ordinal [size] [color] kind "from" side
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .objectives import box_iou

KINDS = ("circle", "square", "triangle")
COLORS = {
    "red": (220, 60, 50),
    "green": (70, 190, 80),
    "blue": (60, 100, 220),
    "yellow": (230, 220, 60),
    "purple": (160, 70, 200),
    "cyan": (70, 200, 210),
}
SIZES = ("small", "large")
SUPERLATIVES = {"leftmost": ("cx", 1), "rightmost": ("cx", -1),
                "topmost": ("cy", 1), "bottommost": ("cy", -1)}
ORDINALS = ("first", "second", "third", "fourth", "fifth")
SIDES = {"left": ("cx", 1), "right": ("cx", -1), "top": ("cy", 1), "bottom": ("cy", -1)}
RELATIONS = ("left of", "right of", "above", "below")
BACKGROUND = (34, 34, 38)
MAX_OBJECT_IOU = 0.10
REL_MARGIN = 0.12  # generator-side visual clarity margin; the oracle is strict

DIFFICULTY_OBJECTS = {"easy": (2, 3), "medium": (3, 4), "hard": (4, 5)}


class GenerationError(RuntimeError):
    """Scene placement or expression synthesis failed."""


class DatasetError(ValueError):
    """Malformed dataset file."""


@dataclass
class ShapeObject:
    kind: str
    color: str
    size: str
    cx: float
    cy: float
    half_w: float
    half_h: float

    @property
    def box(self) -> np.ndarray:
        return np.array([self.cx, self.cy, 2 * self.half_w, 2 * self.half_h],
                        dtype=np.float64)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "color": self.color, "size": self.size,
                "cx": self.cx, "cy": self.cy,
                "half_w": self.half_w, "half_h": self.half_h}

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeObject":
        return cls(**d)


@dataclass
class Scene:
    width: int
    height: int
    objects: list
    background: tuple = BACKGROUND
    seed: int = 0


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

def _sample_object(rng: np.random.Generator, canvas: int, kind=None, color=None,
                   size=None) -> ShapeObject:
    kind = kind or KINDS[rng.integers(len(KINDS))]
    color = color or list(COLORS)[rng.integers(len(COLORS))]
    size = size or SIZES[rng.integers(len(SIZES))]
    if size == "small":
        half = rng.uniform(5.0, 7.0) / canvas
    else:
        half = rng.uniform(10.0, 13.0) / canvas
    cx = rng.uniform(half + 0.02, 1.0 - half - 0.02)
    cy = rng.uniform(half + 0.02, 1.0 - half - 0.02)
    return ShapeObject(kind, color, size, cx, cy, half, half)


def generate_scene(seed: int, difficulty: str = "medium", canvas: int = 64) -> Scene:
    """Deterministic scene; "hard" forces at least two objects to share kind
    and color, so attribute-only phrases cannot name them."""
    if difficulty not in DIFFICULTY_OBJECTS:
        raise GenerationError(f"unknown difficulty {difficulty!r}")
    rng = np.random.default_rng(seed)
    lo, hi = DIFFICULTY_OBJECTS[difficulty]
    n = int(rng.integers(lo, hi + 1))
    plan = [(None, None, None)] * n
    if difficulty == "hard":
        kind = KINDS[rng.integers(len(KINDS))]
        color = list(COLORS)[rng.integers(len(COLORS))]
        plan[0] = plan[1] = (kind, color, None)
    objects: list[ShapeObject] = []
    for spec in plan:
        placed = False
        for _ in range(80):
            cand = _sample_object(rng, canvas, *spec)
            if all(box_iou(cand.box, o.box) <= MAX_OBJECT_IOU for o in objects):
                objects.append(cand)
                placed = True
                break
        if not placed:
            raise GenerationError(f"could not place {n} objects (seed {seed})")
    return Scene(canvas, canvas, objects, BACKGROUND, seed)


# ---------------------------------------------------------------------------
# rendering and PPM i/o
# ---------------------------------------------------------------------------

def render(scene: Scene) -> np.ndarray:
    """Rasterize to (H, W, 3) uint8; pixel centers sit at integer + 0.5."""
    img = np.empty((scene.height, scene.width, 3), dtype=np.uint8)
    img[:] = scene.background
    ys = (np.arange(scene.height) + 0.5)[:, None]
    xs = (np.arange(scene.width) + 0.5)[None, :]
    for obj in scene.objects:
        cx, cy = obj.cx * scene.width, obj.cy * scene.height
        hw, hh = obj.half_w * scene.width, obj.half_h * scene.height
        if obj.kind == "circle":
            inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= hw ** 2
        elif obj.kind == "square":
            inside = (np.abs(xs - cx) <= hw) & (np.abs(ys - cy) <= hh)
        else:  # upward triangle: apex top-center, base at the bottom edge
            dy = ys - (cy - hh)
            inside = (dy >= 0) & (dy <= 2 * hh) & (np.abs(xs - cx) <= hw * dy / (2 * hh))
        img[inside] = COLORS[obj.color]
    return img


def write_ppm(path, img: np.ndarray) -> None:
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"write_ppm expects (H, W, 3) uint8, got {img.shape} {img.dtype}")
    h, w, _ = img.shape
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())
    os.replace(tmp, path)


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P6"):
        raise DatasetError(f"{path}: not a binary P6 file")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise DatasetError(f"{path}: unsupported maxval {maxval}")
    raw = data[pos:pos + w * h * 3]
    if len(raw) != w * h * 3:
        raise DatasetError(f"{path}: expected {w * h * 3} pixel bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).copy()


# ---------------------------------------------------------------------------
# expressions: parsing and the semantics oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AttrPhrase:
    kind: str
    color: str | None = None
    size: str | None = None

    def words(self) -> list:
        out = []
        if self.size:
            out.append(self.size)
        if self.color:
            out.append(self.color)
        out.append(self.kind)
        return out

    def matches(self, obj: ShapeObject) -> bool:
        return (obj.kind == self.kind
                and (self.color is None or obj.color == self.color)
                and (self.size is None or obj.size == self.size))


@dataclass(frozen=True)
class Expression:
    head: AttrPhrase
    relation: str | None = None
    dep: AttrPhrase | None = None
    superlative: str | None = None
    ordinal: int | None = None
    side: str | None = None

    def text(self) -> str:
        words = ["the"]
        if self.superlative:
            words.append(self.superlative)
        if self.ordinal:
            words.append(ORDINALS[self.ordinal - 1])
        words.extend(self.head.words())
        if self.relation:
            words.extend(self.relation.split() + ["the"] + self.dep.words())
        if self.side:
            words.extend(["from", self.side])
        return " ".join(words)


def _parse_attrs(tokens: list) -> AttrPhrase | None:
    size = color = None
    i = 0
    if i < len(tokens) and tokens[i] in SIZES:
        size = tokens[i]
        i += 1
    if i < len(tokens) and tokens[i] in COLORS:
        color = tokens[i]
        i += 1
    if i == len(tokens) - 1 and tokens[i] in KINDS:
        return AttrPhrase(tokens[i], color, size)
    return None


def parse_expression(text: str) -> Expression | None:
    """Parse against the closed grammar; None when ungrammatical."""
    tokens = text.lower().split()
    if len(tokens) < 2 or tokens[0] != "the":
        return None
    body = tokens[1:]
    if body[0] in SUPERLATIVES:
        head = _parse_attrs(body[1:])
        return Expression(head, superlative=body[0]) if head else None
    if body[0] in ORDINALS:
        if len(body) < 4 or body[-2] != "from" or body[-1] not in SIDES:
            return None
        head = _parse_attrs(body[1:-2])
        if head is None:
            return None
        return Expression(head, ordinal=ORDINALS.index(body[0]) + 1, side=body[-1])
    for rel in RELATIONS:
        rel_words = rel.split()
        for i in range(1, len(body) - len(rel_words)):
            if body[i:i + len(rel_words)] == rel_words:
                rest = body[i + len(rel_words):]
                if not rest or rest[0] != "the":
                    continue
                head = _parse_attrs(body[:i])
                dep = _parse_attrs(rest[1:])
                if head and dep:
                    return Expression(head, relation=rel, dep=dep)
                return None
    head = _parse_attrs(body)
    return Expression(head) if head else None


def _relation_holds(a: ShapeObject, b: ShapeObject, rel: str) -> bool:
    if rel == "left of":
        return a.cx < b.cx
    if rel == "right of":
        return a.cx > b.cx
    if rel == "above":
        return a.cy < b.cy
    return a.cy > b.cy


def matches(expr: Expression, objects: list) -> list:
    """Indexes of every object the expression denotes (the oracle)."""
    cand = [i for i, o in enumerate(objects) if expr.head.matches(o)]
    if expr.relation:
        out = []
        for i in cand:
            for j, o in enumerate(objects):
                if j != i and expr.dep.matches(o) and _relation_holds(objects[i], o, expr.relation):
                    out.append(i)
                    break
        return out
    if expr.superlative:
        if not cand:
            return []
        attr, sign = SUPERLATIVES[expr.superlative]
        keys = [sign * getattr(objects[i], attr) for i in cand]
        best = min(keys)
        return [i for i, k in zip(cand, keys) if k == best]
    if expr.ordinal:
        attr, sign = SIDES[expr.side]
        ranked = sorted(cand, key=lambda i: sign * getattr(objects[i], attr))
        if len(ranked) < expr.ordinal:
            return []
        return [ranked[expr.ordinal - 1]]
    return cand


def _attr_variants(obj: ShapeObject):
    yield AttrPhrase(obj.kind)
    yield AttrPhrase(obj.kind, color=obj.color)
    yield AttrPhrase(obj.kind, size=obj.size)
    yield AttrPhrase(obj.kind, color=obj.color, size=obj.size)


def synthesize_expression(scene: Scene, target: int) -> str:
    """Shortest oracle-certified unique expression for the target object.

    Candidates are ranked by token count, ties broken by family in the order
    attribute-only, superlative, relation, ordinal (counting reads worst)."""
    objects = scene.objects
    obj = objects[target]
    candidates: list[tuple[int, Expression]] = []
    for head in _attr_variants(obj):
        candidates.append((0, Expression(head)))
        for sup in SUPERLATIVES:
            candidates.append((1, Expression(head, superlative=sup)))
        for j, other in enumerate(objects):
            if j == target:
                continue
            for rel in RELATIONS:
                if not _relation_holds(obj, other, rel):
                    continue
                axis = "cx" if rel in ("left of", "right of") else "cy"
                if abs(getattr(obj, axis) - getattr(other, axis)) < REL_MARGIN:
                    continue
                for dep in _attr_variants(other):
                    candidates.append((2, Expression(head, relation=rel, dep=dep)))
        for side in SIDES:
            attr, sign = SIDES[side]
            ranked = sorted((i for i, o in enumerate(objects) if head.matches(o)),
                            key=lambda i: sign * getattr(objects[i], attr))
            if target in ranked:
                k = ranked.index(target) + 1
                if k <= len(ORDINALS):
                    candidates.append((3, Expression(head, ordinal=k, side=side)))
    for _, expr in sorted(candidates, key=lambda c: (len(c[1].text().split()), c[0])):
        if matches(expr, objects) == [target]:
            return expr.text()
    raise GenerationError(f"no distinguishing expression for object {target}")


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    image: str               # path relative to the dataset directory
    box: np.ndarray          # (4,) normalized center form
    text: str
    split: str
    target: int | None = None
    objects: list = field(default_factory=list)   # ShapeObjects when synthetic

    def to_dict(self) -> dict:
        d = {"image": self.image, "box": [float(v) for v in self.box],
             "text": self.text, "split": self.split}
        if self.target is not None:
            d["target"] = self.target
        if self.objects:
            d["objects"] = [o.to_dict() for o in self.objects]
        return d


def emit_dataset(samples: list, out_dir) -> str:
    if not samples:
        raise DatasetError("emit_dataset: empty sample list")
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "annotations.jsonl")
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(json.dumps(s.to_dict()) + "\n")
    os.replace(tmp, path)
    return path


def _check_box(values, line_no: int, offset: int) -> np.ndarray:
    if not isinstance(values, list) or len(values) != 4:
        raise DatasetError(f"line {line_no} (byte {offset}): box must have 4 numbers")
    for k, v in enumerate(values):
        if not isinstance(v, (int, float)) or not np.isfinite(v):
            raise DatasetError(f"line {line_no} (byte {offset}): box[{k}] is not a number")
        if not 0.0 <= v <= 1.0:
            raise DatasetError(
                f"line {line_no} (byte {offset}): box[{k}]={v} outside [0, 1]")
    if values[2] <= 0 or values[3] <= 0:
        raise DatasetError(f"line {line_no} (byte {offset}): box has no area")
    return np.asarray(values, dtype=np.float32)


def load_dataset(dataset_dir) -> list:
    """Read and validate annotations.jsonl; errors carry line and byte offsets."""
    path = os.path.join(dataset_dir, "annotations.jsonl")
    if not os.path.exists(path):
        raise DatasetError(f"missing annotations file: {path}")
    samples = []
    offset = 0
    with open(path, "rb") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.decode("utf-8").strip()
            if line:
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as e:
                    raise DatasetError(
                        f"line {line_no} (byte {offset}): invalid JSON: {e}") from None
                for key in ("image", "box", "text", "split"):
                    if key not in rec:
                        raise DatasetError(
                            f"line {line_no} (byte {offset}): missing field '{key}'")
                if rec["split"] not in ("train", "val", "test"):
                    raise DatasetError(
                        f"line {line_no} (byte {offset}): bad split {rec['split']!r}")
                if not isinstance(rec["text"], str) or not rec["text"].strip():
                    raise DatasetError(f"line {line_no} (byte {offset}): empty text")
                box = _check_box(rec["box"], line_no, offset)
                objects = [ShapeObject.from_dict(o) for o in rec.get("objects", [])]
                samples.append(Sample(rec["image"], box, rec["text"], rec["split"],
                                      rec.get("target"), objects))
            offset += len(raw)
    return samples


def parse_difficulty_mix(spec: str) -> list:
    """"easy:0.4,medium:0.4,hard:0.2" -> [(name, cumulative fraction)]."""
    parts = []
    total = 0.0
    for item in spec.split(","):
        name, _, frac = item.partition(":")
        name = name.strip()
        if name not in DIFFICULTY_OBJECTS:
            raise GenerationError(f"unknown difficulty {name!r} in mix {spec!r}")
        total += float(frac)
        parts.append((name, total))
    if not np.isclose(total, 1.0, atol=1e-6):
        raise GenerationError(f"difficulty fractions must sum to 1, got {total}")
    return parts


def make_dataset(out_dir, n_samples: int, seed: int, canvas: int = 64,
                 difficulty_mix: str = "easy:0.4,medium:0.4,hard:0.2",
                 train_frac: float = 0.9, val_frac: float = 0.05) -> list:
    """Generate scenes, render images, synthesize certified expressions and
    write images/ + annotations.jsonl + vocab.txt. Splits are image-disjoint
    by construction (one scene, one image, one sample)."""
    from .model import Vocab  # local import to avoid a cycle at module load

    mix = parse_difficulty_mix(difficulty_mix)
    rng = np.random.default_rng(seed)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    samples = []
    scene_seed = seed * 1_000_003 + 7
    n_train = int(round(n_samples * train_frac))
    n_val = int(round(n_samples * val_frac))
    for i in range(n_samples):
        u = rng.random()
        difficulty = next(name for name, cum in mix if u <= cum + 1e-12)
        for _ in range(50):
            scene_seed += 1
            try:
                scene = generate_scene(scene_seed, difficulty, canvas)
                target = int(rng.integers(len(scene.objects)))
                text = synthesize_expression(scene, target)
                break
            except GenerationError:
                continue
        else:
            raise GenerationError(f"sample {i}: generation kept failing")
        rel = os.path.join("images", f"scene_{i:06d}.ppm")
        write_ppm(os.path.join(out_dir, rel), render(scene))
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        samples.append(Sample(rel, scene.objects[target].box.astype(np.float32),
                              text, split, target, scene.objects))
    emit_dataset(samples, out_dir)
    vocab = Vocab.from_texts([s.text for s in samples if s.split == "train"])
    vocab.save(os.path.join(out_dir, "vocab.txt"))
    return samples

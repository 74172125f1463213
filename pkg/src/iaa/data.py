"""Deterministic toy datasets: grammar text, shape captions, instructions, grounding.

Every generator is a pure function of ``(seed, n)``. Images are 16x16
grayscale grids holding one to three shapes, each filling one cell of a 4x4
lattice, with pairwise distinct intensity bands. Labels are computed from
the scene, so there is no label noise.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

# -- vocabulary ---------------------------------------------------------------

PAD, BOS, EOS, SEP, BOX_OPEN, BOX_CLOSE = range(6)
CAPTION, COUNT, WHAT_SHAPE, WHERE, IS_THERE, LOCATE, LOCATE_ALL, YES, NO = range(6, 15)
FAM_ARITH, FAM_REPEAT, FAM_MIRROR = 16, 17, 18
GRAMMAR_START, N_GRAMMAR = 32, 256
SHAPE_START = 288
SHAPES = ("square", "cross", "disc")
INTENSITY_START = 296
INTENSITIES = ("dim", "mid", "bright")
INTENSITY_VALUES = (0.35, 0.65, 1.0)
QUADRANT_START = 304
QUADRANTS = ("top-left", "top-right", "bottom-left", "bottom-right")
DIGIT_START, N_DIGITS = 320, 100
VOCAB_SIZE = 512

VOCAB_LAYOUT = {
    "structural": [0, 32],
    "grammar": [GRAMMAR_START, GRAMMAR_START + N_GRAMMAR],
    "shape_attribute": [SHAPE_START, DIGIT_START],
    "digits": [DIGIT_START, DIGIT_START + N_DIGITS],
    "reserved": [DIGIT_START + N_DIGITS, VOCAB_SIZE],
}

IMAGE_SIZE = 16
CELL = 4
GRID = IMAGE_SIZE // CELL

_SHAPE_MASKS = {
    "square": np.ones((CELL, CELL), np.float32),
    "disc": np.array([[0, 1, 1, 0], [1, 1, 1, 1], [1, 1, 1, 1], [0, 1, 1, 0]], np.float32),
    "cross": np.array([[1, 0, 0, 1], [0, 1, 1, 0], [0, 1, 1, 0], [1, 0, 0, 1]], np.float32),
}

_KIND_STREAM = {"text": 11, "caption": 23, "instruction": 37, "grounding": 41}


def shape_token(shape: str) -> int:
    return SHAPE_START + SHAPES.index(shape)


def intensity_token(band: str) -> int:
    return INTENSITY_START + INTENSITIES.index(band)


def quadrant_token(q: str) -> int:
    return QUADRANT_START + QUADRANTS.index(q)


def digit_token(d: int) -> int:
    if not 0 <= d < N_DIGITS:
        raise ValueError(f"digit {d} outside [0, {N_DIGITS})")
    return DIGIT_START + d


# -- core types ---------------------------------------------------------------


@dataclass
class GridImage:
    width: int
    height: int
    pixels: np.ndarray  # [height, width], float32 in [0, 1]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.shape != (self.height, self.width):
            raise ValueError(f"pixels {self.pixels.shape} != ({self.height}, {self.width})")

    @classmethod
    def from_array(cls, arr) -> GridImage:
        arr = np.asarray(arr, dtype=np.float32)
        return cls(arr.shape[1], arr.shape[0], arr)


@dataclass
class Sample:
    kind: str
    image: GridImage | None
    prompt_ids: list[int]
    response_ids: list[int]
    boxes: list[list[float]] | None = None

    @property
    def tokens(self) -> list[int]:
        return self.prompt_ids + self.response_ids

    @property
    def loss_mask(self) -> list[bool]:
        return [False] * len(self.prompt_ids) + [True] * len(self.response_ids)


@dataclass(frozen=True)
class SceneObject:
    shape: str
    intensity: str
    cell: int  # row-major index into the 4x4 lattice

    @property
    def row(self) -> int:
        return self.cell // GRID

    @property
    def col(self) -> int:
        return self.cell % GRID

    @property
    def quadrant(self) -> str:
        top = self.row < GRID // 2
        left = self.col < GRID // 2
        return QUADRANTS[(0 if top else 2) + (0 if left else 1)]


@dataclass
class Scene:
    objects: list[SceneObject] = field(default_factory=list)

    def by_intensity(self) -> list[SceneObject]:
        return sorted(self.objects, key=lambda o: INTENSITIES.index(o.intensity))


def render(scene: Scene) -> GridImage:
    px = np.zeros((IMAGE_SIZE, IMAGE_SIZE), np.float32)
    for obj in scene.objects:
        r, c = obj.row * CELL, obj.col * CELL
        val = INTENSITY_VALUES[INTENSITIES.index(obj.intensity)]
        px[r : r + CELL, c : c + CELL] = _SHAPE_MASKS[obj.shape] * np.float32(val)
    return GridImage(IMAGE_SIZE, IMAGE_SIZE, px)


def object_box(obj: SceneObject) -> list[float]:
    """Normalized [x1, y1, x2, y2] of the object's pixel extent."""
    mask = _SHAPE_MASKS[obj.shape]
    rows, cols = np.nonzero(mask)
    y1 = obj.row * CELL + rows.min()
    y2 = obj.row * CELL + rows.max() + 1
    x1 = obj.col * CELL + cols.min()
    x2 = obj.col * CELL + cols.max() + 1
    return [x1 / IMAGE_SIZE, y1 / IMAGE_SIZE, x2 / IMAGE_SIZE, y2 / IMAGE_SIZE]


def random_scene(rng: np.random.Generator, n_objects: int | None = None) -> Scene:
    k = int(rng.integers(1, 4)) if n_objects is None else n_objects
    cells = rng.choice(GRID * GRID, size=k, replace=False)
    bands = rng.choice(len(INTENSITIES), size=k, replace=False)
    shapes = rng.integers(len(SHAPES), size=k)
    return Scene([SceneObject(SHAPES[s], INTENSITIES[b], int(c)) for s, b, c in zip(shapes, bands, cells)])


# -- box serialization --------------------------------------------------------


def quantize_coord(v: float) -> int:
    """Map [0, 1] onto the 100 digit tokens; decoding error is at most 1/198."""
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"coordinate {v} outside [0, 1]")
    return int(math.floor(v * (N_DIGITS - 1) + 0.5))


def dequantize_coord(q: int) -> float:
    return q / (N_DIGITS - 1)


def serialize_box(box) -> list[int]:
    x1, y1, x2, y2 = box
    if not (x1 < x2 and y1 < y2):
        raise ValueError(f"degenerate box {box}")
    return [BOX_OPEN] + [digit_token(quantize_coord(v)) for v in box] + [BOX_CLOSE]


def parse_boxes(tokens: Iterable[int]) -> list[list[float]]:
    """Extract every well-formed ``<box> d d d d </box>`` group."""
    toks = list(tokens)
    out = []
    i = 0
    while i + 5 < len(toks):
        if toks[i] == BOX_OPEN and toks[i + 5] == BOX_CLOSE:
            digits = toks[i + 1 : i + 5]
            if all(DIGIT_START <= t < DIGIT_START + N_DIGITS for t in digits):
                out.append([dequantize_coord(t - DIGIT_START) for t in digits])
                i += 6
                continue
        i += 1
    return out


def box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area = lambda r: max(0.0, r[2] - r[0]) * max(0.0, r[3] - r[1])  # noqa: E731
    union = area(a) + area(b) - inter
    return inter / union if union > 0 else 0.0


# -- generators ---------------------------------------------------------------


def _rng(seed: int, kind: str) -> np.random.Generator:
    return np.random.default_rng([seed, _KIND_STREAM[kind]])


def _grammar_sequence(rng: np.random.Generator) -> list[int]:
    family = int(rng.integers(3))
    if family == 0:
        start, step = int(rng.integers(N_GRAMMAR)), int(rng.integers(1, 9))
        length = int(rng.integers(20, 41))
        body = [GRAMMAR_START + (start + i * step) % N_GRAMMAR for i in range(length)]
        return [FAM_ARITH] + body
    if family == 1:
        motif = rng.integers(N_GRAMMAR, size=int(rng.integers(2, 7))) + GRAMMAR_START
        length = int(rng.integers(20, 41))
        return [FAM_REPEAT] + [int(motif[i % len(motif)]) for i in range(length)]
    half = [int(t) for t in rng.integers(N_GRAMMAR, size=int(rng.integers(6, 17))) + GRAMMAR_START]
    return [FAM_MIRROR] + half + half[::-1]


def gen_text_corpus(seed: int, n: int) -> list[Sample]:
    """Unique grammar sequences: arithmetic progressions, repeated motifs, mirrors."""
    if n <= 0:
        raise ValueError("n must be positive")
    rng = _rng(seed, "text")
    seen: set[tuple[int, ...]] = set()
    out = []
    while len(out) < n:
        seq = tuple(_grammar_sequence(rng))
        if seq in seen:
            continue
        seen.add(seq)
        out.append(Sample("text", None, [BOS], list(seq) + [EOS]))
    return out


def caption_tokens(scene: Scene) -> list[int]:
    toks = []
    for obj in scene.by_intensity():
        toks += [intensity_token(obj.intensity), shape_token(obj.shape), quadrant_token(obj.quadrant)]
    return toks


def caption_sample(scene: Scene) -> Sample:
    return Sample("caption", render(scene), [BOS, CAPTION, SEP], caption_tokens(scene) + [EOS])


def gen_caption_pairs(seed: int, n: int) -> list[Sample]:
    if n <= 0:
        raise ValueError("n must be positive")
    rng = _rng(seed, "caption")
    return [caption_sample(random_scene(rng)) for _ in range(n)]


def _instruction(scene: Scene, rng: np.random.Generator) -> Sample:
    image = render(scene)
    kind = int(rng.integers(4))
    if kind == 0:
        prompt, answer = [COUNT], [digit_token(len(scene.objects))]
    elif kind == 1:
        obj = scene.objects[int(rng.integers(len(scene.objects)))]
        prompt, answer = [WHAT_SHAPE, intensity_token(obj.intensity)], [shape_token(obj.shape)]
    elif kind == 2:
        obj = scene.objects[int(rng.integers(len(scene.objects)))]
        prompt = [WHERE, intensity_token(obj.intensity), shape_token(obj.shape)]
        answer = [quadrant_token(obj.quadrant)]
    else:
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        present = any(o.shape == shape for o in scene.objects)
        prompt, answer = [IS_THERE, shape_token(shape)], [YES if present else NO]
    return Sample("instruction", image, [BOS] + prompt + [SEP], answer + [EOS])


def gen_instruction_pairs(seed: int, n: int) -> list[Sample]:
    if n <= 0:
        raise ValueError("n must be positive")
    rng = _rng(seed, "instruction")
    return [_instruction(random_scene(rng), rng) for _ in range(n)]


def grounding_sample(scene: Scene, target: SceneObject | None) -> Sample:
    """Single-object prompt when ``target`` is given, else locate-all."""
    image = render(scene)
    if target is not None:
        if target not in scene.objects:
            raise ValueError("grounding target must be present in the scene")
        prompt = [BOS, LOCATE, intensity_token(target.intensity), shape_token(target.shape), SEP]
        boxes = [object_box(target)]
    else:
        prompt = [BOS, LOCATE_ALL, SEP]
        boxes = [object_box(o) for o in scene.by_intensity()]
    response = [t for b in boxes for t in serialize_box(b)] + [EOS]
    return Sample("grounding", image, prompt, response, boxes)


def gen_grounding_pairs(seed: int, n: int, multi_fraction: float = 0.25) -> list[Sample]:
    if n <= 0:
        raise ValueError("n must be positive")
    rng = _rng(seed, "grounding")
    out = []
    for _ in range(n):
        scene = random_scene(rng)
        if len(scene.objects) > 1 and rng.random() < multi_fraction:
            out.append(grounding_sample(scene, None))
        else:
            out.append(grounding_sample(scene, scene.objects[int(rng.integers(len(scene.objects)))]))
    return out


GENERATORS = {
    "text": gen_text_corpus,
    "caption": gen_caption_pairs,
    "instruction": gen_instruction_pairs,
    "grounding": gen_grounding_pairs,
}


def split_parity(samples: list[Sample]) -> tuple[list[Sample], list[Sample]]:
    """Train on even indices, hold out odd indices."""
    return samples[0::2], samples[1::2]


def is_single_grounding(s: Sample) -> bool:
    return s.kind == "grounding" and s.prompt_ids[1] == LOCATE


# -- JSONL persistence ----------------------------------------------------------


def sample_to_record(s: Sample) -> dict:
    image = None
    if s.image is not None:
        raw = s.image.pixels.astype("<f4").tobytes()
        image = {"data": base64.b64encode(raw).decode("ascii"), "width": s.image.width, "height": s.image.height}
    return {
        "kind": s.kind,
        "image": image,
        "prompt_ids": list(map(int, s.prompt_ids)),
        "response_ids": list(map(int, s.response_ids)),
        "boxes": s.boxes,
    }


def record_to_sample(rec: dict) -> Sample:
    image = None
    if rec["image"] is not None:
        im = rec["image"]
        px = np.frombuffer(base64.b64decode(im["data"]), dtype="<f4").reshape(im["height"], im["width"])
        image = GridImage(im["width"], im["height"], px.astype(np.float32))
    return Sample(rec["kind"], image, list(rec["prompt_ids"]), list(rec["response_ids"]), rec["boxes"])


def write_samples(path, samples: Iterable[Sample]):
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_record(s), separators=(",", ":")) + "\n")


def read_samples(path) -> list[Sample]:
    with open(path) as fh:
        return [record_to_sample(json.loads(line)) for line in fh if line.strip()]


def generate_all(seed: int, sizes: dict[str, int]) -> dict[str, list[Sample]]:
    return {kind: GENERATORS[kind](seed, n) for kind, n in sizes.items()}


def write_datasets(out_dir, datasets: dict[str, list[Sample]]):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for kind, samples in datasets.items():
        write_samples(out / f"{kind}.jsonl", samples)
    (out / "vocab.json").write_text(json.dumps({"vocab_size": VOCAB_SIZE, "layout": VOCAB_LAYOUT}, indent=2))


def read_datasets(in_dir, kinds=("text", "caption", "instruction", "grounding")) -> dict[str, list[Sample]]:
    d = Path(in_dir)
    return {k: read_samples(d / f"{k}.jsonl") for k in kinds if (d / f"{k}.jsonl").exists()}

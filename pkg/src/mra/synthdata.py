"""Procedural fine-grained vision task: grids of seven-segment glyphs whose
identity is only recoverable at high render resolutions.

Scenes live on a fixed 224 x 224 unit lattice, so every render is a pure
point-sampling of an integer-aligned raster: deterministic, exactly
reproducible, and free of anti-aliasing. A render at half the lattice size
(112 px) samples exactly the odd-index lattice pixels; glyph strokes are
drawn only on pixels with at least one even coordinate, so glyphs vanish
identically at 112 px while appearing as bold three-quarter-solid strokes at
the lattice resolution and above. Solid color fills cover whole cells and
stay visible at every resolution.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np

LATTICE = 224

# Seven-segment layout on a 5 x 9 unit box; rectangles are (x, y, w, h).
# Every x/y start is even, which together with even cell offsets keeps
# stroke pixels parity-aligned with the lattice.
_SEGMENT_RECTS = {
    "a": (0, 0, 5, 1),
    "f": (0, 0, 1, 5),
    "b": (4, 0, 1, 5),
    "g": (0, 4, 5, 1),
    "e": (0, 4, 1, 5),
    "c": (4, 4, 1, 5),
    "d": (0, 8, 5, 1),
}
GLYPH_BOX = (5, 9)

_DIGIT_SEGMENTS = [
    "abcdef", "bc", "abged", "abgcd", "fgbc",
    "afgcd", "afgecd", "abc", "abcdefg", "abcdfg",
]

NUM_GLYPHS = 10

COLOR_NAMES = ("red", "green", "blue", "yellow", "magenta", "cyan")
COLOR_VALUES = np.array([
    [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 1.0],
], dtype=np.float32)

BACKGROUND = np.array([0.1, 0.1, 0.1], dtype=np.float32)

GLYPH_NAMES = ("zero", "one", "two", "three", "four",
               "five", "six", "seven", "eight", "nine")

QUERY_TYPES = ("glyph", "color")


class RenderError(ValueError):
    pass


class VocabError(ValueError):
    pass


@dataclass
class SceneSpec:
    """An n x n grid of colored glyphs on the unit lattice."""
    n: int
    glyphs: list[list[int]]
    colors: list[list[int]]
    segment_units: int = 1
    solid_fill: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or LATTICE % self.n:
            raise RenderError(f"grid size {self.n} must divide {LATTICE}")
        cell = LATTICE // self.n
        if GLYPH_BOX[1] * self.segment_units > cell:
            raise RenderError(f"glyphs of {GLYPH_BOX[1] * self.segment_units} "
                              f"units do not fit a {cell}-unit cell")

    def glyph_pixel_size(self, resolution: int) -> float:
        """Height of the glyph bounding box in pixels at ``resolution``."""
        return GLYPH_BOX[1] * self.segment_units * resolution / LATTICE


def _even_floor(x: int) -> int:
    return x - (x % 2)


def unit_image(spec: SceneSpec) -> np.ndarray:
    """Exact LATTICE x LATTICE x 3 rasterization of the scene."""
    img = np.tile(BACKGROUND, (LATTICE, LATTICE, 1))
    cell = LATTICE // spec.n
    s = spec.segment_units
    ox = _even_floor((cell - GLYPH_BOX[0] * s) // 2)
    oy = _even_floor((cell - GLYPH_BOX[1] * s) // 2)
    for r in range(spec.n):
        for c in range(spec.n):
            color = COLOR_VALUES[spec.colors[r][c]]
            x0, y0 = c * cell, r * cell
            if spec.solid_fill:
                img[y0:y0 + cell, x0:x0 + cell] = color
                continue
            for seg in _DIGIT_SEGMENTS[spec.glyphs[r][c]]:
                sx, sy, sw, sh = (v * s for v in _SEGMENT_RECTS[seg])
                ya, xa = y0 + oy + sy, x0 + ox + sx
                yy = np.arange(ya, ya + sh)[:, None]
                xx = np.arange(xa, xa + sw)[None, :]
                # skip odd-odd pixels: exactly the ones a half-resolution
                # point sample would land on
                img[ya:ya + sh, xa:xa + sw][(yy % 2 == 0) | (xx % 2 == 0)] \
                    = color
    return img.astype(np.float32)


def render_scene(spec: SceneSpec, resolution: int) -> np.ndarray:
    """Point-sampled render; values in [0, 1], shape (res, res, 3)."""
    if resolution < 1 or resolution % spec.n:
        raise RenderError(f"resolution {resolution} not divisible by grid "
                          f"size {spec.n}")
    img = unit_image(spec)
    idx = ((np.arange(resolution) + 0.5) * (LATTICE / resolution)).astype(int)
    return img[np.ix_(idx, idx)]


@dataclass
class TaskConfig:
    grid_n: int = 2
    num_glyphs: int = NUM_GLYPHS
    num_colors: int = len(COLOR_NAMES)
    segment_units: int = 1
    query_types: tuple[str, ...] = QUERY_TYPES

    def __post_init__(self):
        if not 1 <= self.num_glyphs <= NUM_GLYPHS:
            raise VocabError(f"num_glyphs must be 1..{NUM_GLYPHS}")
        if not 1 <= self.num_colors <= len(COLOR_NAMES):
            raise VocabError(f"num_colors must be 1..{len(COLOR_NAMES)}")
        for q in self.query_types:
            if q not in QUERY_TYPES:
                raise VocabError(f"unknown query type {q!r}")
        self.query_types = tuple(self.query_types)


class Vocab:
    """Fixed word list; the end token is always the last id."""

    def __init__(self, max_grid: int = 8):
        self.words = ([str(i) for i in range(max_grid)]
                      + ["glyph", "color", "at", "row", "col"]
                      + list(GLYPH_NAMES) + list(COLOR_NAMES) + ["<end>"])
        self.index = {w: i for i, w in enumerate(self.words)}

    @property
    def size(self) -> int:
        return len(self.words)

    @property
    def end_token(self) -> int:
        return self.size - 1

    def encode(self, words: list[str]) -> np.ndarray:
        try:
            return np.array([self.index[w] for w in words], dtype=np.int64)
        except KeyError as e:
            raise VocabError(f"word {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> list[str]:
        return [self.words[int(i)] for i in ids]


@dataclass
class Sample:
    scene: SceneSpec
    query_type: str
    query_row: int
    query_col: int
    instruction_text: str
    answer_text: str
    instruction: np.ndarray = field(repr=False, default=None)
    answer: np.ndarray = field(repr=False, default=None)

    def render(self, resolution: int) -> np.ndarray:
        return render_scene(self.scene, resolution)


def _tokenize(sample_words: "Sample", vocab: Vocab) -> None:
    s = sample_words
    s.instruction = vocab.encode(s.instruction_text.split())
    s.answer = vocab.encode(s.answer_text.split())


def random_scene(rng: np.random.Generator, cfg: TaskConfig,
                 seed: int) -> SceneSpec:
    n = cfg.grid_n
    return SceneSpec(
        n=n,
        glyphs=rng.integers(0, cfg.num_glyphs, size=(n, n)).tolist(),
        colors=rng.integers(0, cfg.num_colors, size=(n, n)).tolist(),
        segment_units=cfg.segment_units,
        seed=seed)


def answer_for(scene: SceneSpec, query_type: str, row: int, col: int) -> str:
    if query_type == "glyph":
        return GLYPH_NAMES[scene.glyphs[row][col]]
    return COLOR_NAMES[scene.colors[row][col]]


def sample_task(seed: int, cfg: TaskConfig, vocab: Vocab | None = None,
                ) -> Sample:
    """Uniformly random scene + query, fully determined by ``seed``."""
    vocab = vocab or Vocab()
    if cfg.grid_n > 8:
        raise VocabError("position words cover grids up to 8 x 8")
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, cfg, seed)
    row = int(rng.integers(cfg.grid_n))
    col = int(rng.integers(cfg.grid_n))
    qtype = cfg.query_types[int(rng.integers(len(cfg.query_types)))]
    sample = Sample(
        scene=scene, query_type=qtype, query_row=row, query_col=col,
        instruction_text=f"{qtype} at row {row} col {col}",
        answer_text=answer_for(scene, qtype, row, col))
    _tokenize(sample, vocab)
    return sample


MANIFEST_VERSION = 1


def write_manifest(samples: list[Sample], path: str, cfg: TaskConfig) -> None:
    """Newline-delimited manifest; images regenerate from seeds on load."""
    lines = [json.dumps({"version": MANIFEST_VERSION,
                         "task": asdict(cfg)}, sort_keys=True)]
    for s in samples:
        lines.append(json.dumps({
            "seed": s.scene.seed,
            "n": s.scene.n,
            "glyphs": s.scene.glyphs,
            "colors": s.scene.colors,
            "segment_units": s.scene.segment_units,
            "solid_fill": s.scene.solid_fill,
            "query_type": s.query_type,
            "query_row": s.query_row,
            "query_col": s.query_col,
            "instruction": s.instruction_text,
            "answer": s.answer_text,
        }, sort_keys=True))
    try:
        fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)),
                                   prefix=".manifest-")
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
        os.replace(tmp, path)
    except OSError as e:
        raise IOError(f"cannot write manifest {path}: {e}") from e


def load_manifest(path: str, vocab: Vocab | None = None,
                  ) -> tuple[TaskConfig, list[Sample]]:
    vocab = vocab or Vocab()
    with open(path, encoding="utf-8") as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    header = json.loads(lines[0])
    cfg = TaskConfig(**{k: tuple(v) if k == "query_types" else v
                        for k, v in header["task"].items()})
    samples = []
    for ln in lines[1:]:
        rec = json.loads(ln)
        scene = SceneSpec(n=rec["n"], glyphs=rec["glyphs"],
                          colors=rec["colors"],
                          segment_units=rec["segment_units"],
                          solid_fill=rec["solid_fill"], seed=rec["seed"])
        sample = Sample(scene=scene, query_type=rec["query_type"],
                        query_row=rec["query_row"], query_col=rec["query_col"],
                        instruction_text=rec["instruction"],
                        answer_text=rec["answer"])
        _tokenize(sample, vocab)
        samples.append(sample)
    return cfg, samples


def make_dataset(seed: int, count: int, cfg: TaskConfig,
                 vocab: Vocab | None = None) -> list[Sample]:
    """Deterministic dataset: sample i uses child seed i of ``seed``."""
    vocab = vocab or Vocab()
    base = np.random.SeedSequence(seed)
    return [sample_task(int(child.generate_state(1)[0]), cfg, vocab)
            for child in base.spawn(count)]

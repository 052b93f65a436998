"""A procedural shapes-and-colours world for instruction-conditioned QA.

Each scene places one or two coloured shapes on a grid of cells. A sample
pairs the rendered image with a caption, an instruction asking for one
attribute of one object, and the answer. Two-object scenes always use two
different colours and two different shapes, and the instruction is drawn
uniformly from the four questions the scene supports, so the image alone
leaves four equally likely answers: exactly chance = 1/4 for any image-only
predictor on that split.
"""

import hashlib
import io
import struct
from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, DigestError, FormatError, InputError

COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("square", "circle", "triangle", "cross")
RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
# 4x4 pixel masks, upsampled to larger patch sizes by nearest neighbour
MASKS = {
    "square": ["1111", "1111", "1111", "1111"],
    "circle": ["0110", "1001", "1001", "0110"],
    "triangle": ["1000", "1100", "1110", "1111"],
    "cross": ["1001", "0110", "0110", "1001"],
}
WORDS = ("what", "color", "shape", "is", "the", "object", "and")

PAD = 0
COLOR_TOKEN = {c: 1 + i for i, c in enumerate(COLORS)}
SHAPE_TOKEN = {s: 1 + len(COLORS) + i for i, s in enumerate(SHAPES)}
WORD_TOKEN = {w: 1 + len(COLORS) + len(SHAPES) + i for i, w in enumerate(WORDS)}
FIRST_CELL_TOKEN = 1 + len(COLORS) + len(SHAPES) + len(WORDS)

NUM_CLASSES = len(COLORS) + len(SHAPES)
COLOR_QUERY, SHAPE_QUERY = "color", "shape"


def answer_class(kind, value):
    """Class index: colours first, then shapes."""
    return COLORS.index(value) if kind == COLOR_QUERY else len(COLORS) + SHAPES.index(value)


def class_name(index):
    return COLORS[index] if index < len(COLORS) else SHAPES[index - len(COLORS)]


@dataclass(frozen=True)
class WorldConfig:
    grid_h: int = 4
    grid_w: int = 4
    patch: int = 4
    m: int = 12
    vocab_size: int = 64
    noise: float = 0.02
    p_ambiguous: float = 0.5

    def __post_init__(self):
        for name in ("grid_h", "grid_w", "patch", "m", "vocab_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.vocab_size < FIRST_CELL_TOKEN + self.n:
            raise ConfigError(f"vocab_size {self.vocab_size} too small for {self.n} cells")
        if self.m < 7:
            raise ConfigError("m must be at least 7 to hold a two-object caption")
        if not 0.0 <= self.p_ambiguous <= 1.0:
            raise ConfigError("p_ambiguous must lie in [0, 1]")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")

    @property
    def n(self):
        return self.grid_h * self.grid_w

    @property
    def p_in(self):
        return 3 * self.patch * self.patch

    def to_text(self):
        return "".join(f"{f.name} = {getattr(self, f.name)!r}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text):
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = (s.strip() for s in line.partition("="))
            if key not in types:
                raise ConfigError(f"unknown world key {key!r}")
            kwargs[key] = float(value) if types[key] in (float, "float") else int(value)
        return cls(**kwargs)


class Obj(NamedTuple):
    shape: str
    color: str
    cell: int


@dataclass(frozen=True)
class Scene:
    objects: tuple

    def __post_init__(self):
        if not self.objects:
            raise InputError("a scene needs at least one object")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise InputError("two objects share a cell")
        object.__setattr__(self, "objects", tuple(sorted(self.objects, key=lambda o: o.cell)))

    def with_object(self, index, **changes):
        objs = list(self.objects)
        objs[index] = objs[index]._replace(**changes)
        return Scene(tuple(objs))


def differing_attributes(a, b):
    """List of (object index, attribute) where two scenes with the same cells differ."""
    if [o.cell for o in a.objects] != [o.cell for o in b.objects]:
        raise InputError("scenes do not share object cells")
    out = []
    for i, (oa, ob) in enumerate(zip(a.objects, b.objects)):
        for attr in ("shape", "color"):
            if getattr(oa, attr) != getattr(ob, attr):
                out.append((i, attr))
    return out


# ------------------------------------------------------------------ rendering


def _mask(shape, patch):
    base = np.array([[c == "1" for c in row] for row in MASKS[shape]], dtype=np.float32)
    reps = -(-patch // 4)
    return np.kron(base, np.ones((reps, reps), dtype=np.float32))[:patch, :patch]


def render(scene, cfg, seed):
    """Patch features [n, 3 * patch**2]: row-major cells, each a flattened RGB patch."""
    n, p = cfg.n, cfg.patch
    patches = np.zeros((n, p, p, 3), dtype=np.float32)
    for obj in scene.objects:
        if not 0 <= obj.cell < n:
            raise InputError(f"object cell {obj.cell} outside a {cfg.grid_h}x{cfg.grid_w} grid")
        if obj.shape not in SHAPES or obj.color not in COLORS:
            raise InputError(f"unknown object {obj}")
        patches[obj.cell] = _mask(obj.shape, p)[:, :, None] * np.array(RGB[obj.color], dtype=np.float32)
    if cfg.noise > 0:
        noise = rngmod.stream(seed, "render").standard_normal(patches.shape)
        patches += (cfg.noise * noise).astype(np.float32)
    return patches.reshape(n, cfg.p_in)


# ------------------------------------------------------------ text and tasks


def cell_token(cell):
    return FIRST_CELL_TOKEN + cell


def make_caption(scene):
    """``<color> <shape> <cell> [and <color> <shape> <cell> ...]`` in cell order."""
    ids = []
    for i, obj in enumerate(scene.objects):
        if i:
            ids.append(WORD_TOKEN["and"])
        ids += [COLOR_TOKEN[obj.color], SHAPE_TOKEN[obj.shape], cell_token(obj.cell)]
    return ids


def instruction_ids(kind, key):
    """``what color is the <shape>`` or ``what shape is the <color> object``."""
    w = WORD_TOKEN
    if kind == COLOR_QUERY:
        return [w["what"], w["color"], w["is"], w["the"], SHAPE_TOKEN[key]]
    return [w["what"], w["shape"], w["is"], w["the"], COLOR_TOKEN[key], w["object"]]


def parse_instruction(ids):
    ids = list(ids)
    if len(ids) >= 5 and ids[1] == WORD_TOKEN["color"]:
        return COLOR_QUERY, SHAPES[ids[4] - SHAPE_TOKEN[SHAPES[0]]]
    if len(ids) >= 5 and ids[1] == WORD_TOKEN["shape"]:
        return SHAPE_QUERY, COLORS[ids[4] - COLOR_TOKEN[COLORS[0]]]
    raise InputError(f"not an instruction: {ids}")


def valid_queries(scene):
    """Every (kind, key) whose referent is unique in the scene."""
    shapes = [o.shape for o in scene.objects]
    colors = [o.color for o in scene.objects]
    out = []
    for obj in scene.objects:
        if shapes.count(obj.shape) == 1:
            out.append((COLOR_QUERY, obj.shape))
        if colors.count(obj.color) == 1:
            out.append((SHAPE_QUERY, obj.color))
    return out


def referent(scene, kind, key):
    attr = "shape" if kind == COLOR_QUERY else "color"
    matches = [o for o in scene.objects if getattr(o, attr) == key]
    if len(matches) != 1:
        raise InputError(f"query ({kind}, {key}) does not pick out exactly one object")
    return matches[0]


def answer_for(scene, kind, key):
    obj = referent(scene, kind, key)
    return answer_class(kind, obj.color if kind == COLOR_QUERY else obj.shape)


def is_ambiguous(scene, kind):
    values = {o.color if kind == COLOR_QUERY else o.shape for o in scene.objects}
    return len(values) >= 2


def make_instruction_task(scene, rng):
    """Draw a query uniformly from those the scene supports.

    Returns (instruction ids, answer class, ambiguous flag). Queries whose
    referent is not unique are never emitted.
    """
    queries = valid_queries(scene)
    if not queries:
        raise InputError("scene supports no unambiguous query")
    kind, key = queries[int(rng.integers(len(queries)))]
    return instruction_ids(kind, key), answer_for(scene, kind, key), is_ambiguous(scene, kind)


def response_ids(scene, instruction):
    """Reference response: ``the <color> <shape>`` of the queried object."""
    kind, key = parse_instruction(instruction)
    obj = referent(scene, kind, key)
    return [WORD_TOKEN["the"], COLOR_TOKEN[obj.color], SHAPE_TOKEN[obj.shape]]


# ------------------------------------------------------------------ sampling


def random_scene(rng, cfg, two_objects):
    cells = rng.choice(cfg.n, size=2 if two_objects else 1, replace=False)
    colors = rng.choice(len(COLORS), size=len(cells), replace=False)
    shapes = rng.choice(len(SHAPES), size=len(cells), replace=False)
    return Scene(tuple(Obj(SHAPES[s], COLORS[c], int(cell)) for s, c, cell in zip(shapes, colors, cells)))


@dataclass(eq=False)
class Sample:
    scene: Scene
    patches: np.ndarray
    caption: list
    instruction: list
    answer: int
    ambiguous: bool
    seed: int

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.scene == other.scene
            and self.caption == other.caption
            and self.instruction == other.instruction
            and self.answer == other.answer
            and self.ambiguous == other.ambiguous
            and self.seed == other.seed
            and self.patches.dtype == other.patches.dtype
            and np.array_equal(self.patches, other.patches)
        )


def make_sample(cfg, seed):
    """One sample as a pure function of its derived seed."""
    rng = rngmod.stream(seed, "sample")
    two = bool(rng.random() < cfg.p_ambiguous)
    scene = random_scene(rng, cfg, two)
    instruction, answer, ambiguous = make_instruction_task(scene, rng)
    return Sample(scene, render(scene, cfg, seed), make_caption(scene), instruction, answer, ambiguous, seed)


def sample_seed(master_seed, index):
    return rngmod.derive_seed(master_seed, "world", index)


def generate(cfg, master_seed, start, count):
    return [make_sample(cfg, sample_seed(master_seed, i)) for i in range(start, start + count)]


@dataclass(frozen=True)
class ConfusablePair:
    a: Sample
    b: Sample
    object_index: int
    attribute: str


def make_confusable_pairs(count, rng, cfg):
    """Pairs of two-object scenes differing in one attribute of one object.

    Both members share the render seed (identical noise) and an instruction
    asking for the attribute that changed.
    """
    if count < 1:
        raise InputError("count must be >= 1")
    pairs = []
    for _ in range(count):
        base = random_scene(rng, cfg, two_objects=True)
        idx = int(rng.integers(2))
        attribute = ("shape", "color")[int(rng.integers(2))]
        pool = SHAPES if attribute == "shape" else COLORS
        used = {getattr(o, attribute) for o in base.objects}
        choices = [v for v in pool if v not in used]
        other = base.with_object(idx, **{attribute: choices[int(rng.integers(len(choices)))]})
        target = base.objects[idx]
        if attribute == "color":
            kind, key = COLOR_QUERY, target.shape
        else:
            kind, key = SHAPE_QUERY, target.color
        instr = instruction_ids(kind, key)
        seed = int(rng.integers(1 << 62))
        members = [
            Sample(s, render(s, cfg, seed), make_caption(s), instr, answer_for(s, kind, key), True, seed)
            for s in (base, other)
        ]
        pairs.append(ConfusablePair(members[0], members[1], idx, attribute))
    return pairs


# -------------------------------------------------------------- dataset files

DATA_MAGIC = b"EMMADATA"
DATA_VERSION = 1
_DIGEST = 32


@dataclass(eq=False)
class Dataset:
    config: WorldConfig
    samples: list

    def __len__(self):
        return len(self.samples)

    def __eq__(self, other):
        return isinstance(other, Dataset) and self.config == other.config and self.samples == other.samples

    def seeds(self):
        return {s.seed for s in self.samples}


def _encode_sample(s):
    buf = io.BytesIO()
    buf.write(struct.pack("<QB", s.seed, len(s.scene.objects)))
    for o in s.scene.objects:
        buf.write(struct.pack("<BBH", SHAPES.index(o.shape), COLORS.index(o.color), o.cell))
    for ids in (s.caption, s.instruction):
        buf.write(struct.pack("<B", len(ids)))
        buf.write(struct.pack(f"<{len(ids)}H", *ids))
    rows, cols = s.patches.shape
    buf.write(struct.pack("<BBII", s.answer, int(s.ambiguous), rows, cols))
    buf.write(s.patches.astype("<f4").tobytes())
    return buf.getvalue()


def dataset_bytes(ds):
    cfg = ds.config.to_text().encode("utf-8")
    parts = [DATA_MAGIC, struct.pack("<HI", DATA_VERSION, len(cfg)), cfg, struct.pack("<Q", len(ds.samples))]
    for s in ds.samples:
        rec = _encode_sample(s)
        parts += [struct.pack("<I", len(rec)), rec]
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def write_dataset(ds, path):
    data = dataset_bytes(ds)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


class _Reader:
    def __init__(self, data, limit):
        self.data, self.pos, self.limit = data, 0, limit

    def take(self, size, what):
        if self.pos + size > self.limit:
            raise FormatError(f"truncated while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_dataset(data):
    if len(data) < len(DATA_MAGIC) or data[: len(DATA_MAGIC)] != DATA_MAGIC:
        raise FormatError("bad magic, not a dataset file", 0)
    if len(data) < len(DATA_MAGIC) + 6 + _DIGEST:
        raise FormatError("truncated header", len(data))
    r = _Reader(data, len(data) - _DIGEST)
    r.take(len(DATA_MAGIC), "magic")
    version, cfg_len = r.unpack("<HI", "header")
    if version != DATA_VERSION:
        raise FormatError(f"unsupported dataset version {version}", len(DATA_MAGIC))
    cfg_at = r.pos
    try:
        config = WorldConfig.from_text(r.take(cfg_len, "config").decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise FormatError(f"unreadable config echo: {exc}", cfg_at) from None
    (count,) = r.unpack("<Q", "sample count")
    samples = []
    for _ in range(count):
        start = r.pos
        (size,) = r.unpack("<I", "record length")
        rec = _Reader(r.take(size, "record"), size)
        try:
            seed, nobj = rec.unpack("<QB", "record header")
            objs = []
            for _ in range(nobj):
                si, ci, cell = rec.unpack("<BBH", "object")
                objs.append(Obj(SHAPES[si], COLORS[ci], cell))
            lists = []
            for what in ("caption", "instruction"):
                (length,) = rec.unpack("<B", what)
                lists.append(list(rec.unpack(f"<{length}H", what)))
            answer, amb, rows, cols = rec.unpack("<BBII", "answer")
            patches = np.frombuffer(rec.take(rows * cols * 4, "patches"), dtype="<f4").reshape(rows, cols)
            if rec.pos != size:
                raise FormatError("trailing bytes in record", start + 4 + rec.pos)
            samples.append(Sample(Scene(tuple(objs)), patches.astype(np.float32), lists[0], lists[1], answer, bool(amb), seed))
        except FormatError as exc:
            raise FormatError(f"corrupt record: {exc.reason}", start + 4 + (exc.offset or 0)) from None
        except (IndexError, InputError) as exc:
            raise FormatError(f"corrupt record: {exc}", start) from None
    if r.pos != r.limit:
        raise FormatError("unexpected bytes after last record", r.pos)
    body = data[: r.limit]
    if hashlib.sha256(body).digest() != data[r.limit:]:
        raise DigestError("content digest mismatch", r.limit)
    return Dataset(config, samples)


def read_dataset(path):
    with open(path, "rb") as fh:
        return parse_dataset(fh.read())

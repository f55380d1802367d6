"""Synthetic glyph scenes, C-way S-shot task sampling and the episode file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

SHAPES = ("disk", "square", "triangle", "ring", "cross", "diamond", "star", "bar")
COLORS = (
    (230, 50, 40),
    (40, 200, 70),
    (50, 90, 240),
    (235, 215, 40),
    (210, 70, 220),
)
NUM_CLASSES = len(SHAPES) * len(COLORS)

META_TRAIN = "meta-train"
META_TEST = "meta-test"


class ScenePointLabel(NamedTuple):
    y: int
    x: int
    class_id: int


class SceneError(RuntimeError):
    pass


class EpisodeFormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class GlyphClass:
    shape: str
    color: tuple

    @property
    def class_id(self) -> int:
        return SHAPES.index(self.shape) * len(COLORS) + COLORS.index(self.color)

    @classmethod
    def from_id(cls, class_id: int) -> "GlyphClass":
        s, c = divmod(int(class_id), len(COLORS))
        return cls(SHAPES[s], COLORS[c])

    @property
    def name(self) -> str:
        return f"{self.shape}-{COLORS.index(self.color)}"


def split_classes(split: str) -> list:
    """30 meta-train / 10 meta-test ids.

    A class is held out when (shape index + color index) % 4 == 0, so every
    shape and every color still occurs in meta-train; only the combinations
    are new at meta-test time.
    """
    held_out = [i for i in range(NUM_CLASSES) if sum(divmod(i, len(COLORS))) % 4 == 0]
    if split == META_TEST:
        return held_out
    if split == META_TRAIN:
        return [i for i in range(NUM_CLASSES) if i not in held_out]
    raise ValueError(f"unknown split {split!r}")


@dataclass(frozen=True)
class SceneConfig:
    size: int = 64
    r_min: int = 4
    r_max: int = 7
    max_objects: int = 10
    noise_level: float = 20.0
    max_attempts: int = 1000


@dataclass(frozen=True)
class TaskConfig:
    ways: tuple = (2, 5)
    shots: tuple = (3, 5)
    counts: tuple = (1, 4)
    scene: SceneConfig = field(default_factory=SceneConfig)
    max_scene_retries: int = 50


def glyph_mask(shape: str, r: int) -> np.ndarray:
    """Boolean (2r+1, 2r+1) mask centred on the middle pixel."""
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    d = np.hypot(dy, dx)
    if shape == "disk":
        return d <= r
    if shape == "square":
        return (np.abs(dy) <= 0.8 * r) & (np.abs(dx) <= 0.8 * r)
    if shape == "triangle":
        return (dy <= 0.8 * r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 1.8 + 0.5)
    if shape == "ring":
        return (d <= r) & (d >= 0.4 * r)
    if shape == "cross":
        arm = r / 3.0
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if shape == "star":
        theta = np.arctan2(dy, dx)
        return d <= r * (0.55 + 0.45 * np.cos(5 * theta + np.pi / 2))
    if shape == "bar":
        return (np.abs(dy) <= r / 3.0) & (np.abs(dx) <= r)
    raise ValueError(f"unknown shape {shape!r}")


def sort_labels(labels) -> list:
    """Stable lexicographic sort by (y, x)."""
    return sorted(labels, key=lambda lab: (lab[0], lab[1]))


def generate_scene(seed, classes, counts, cfg: SceneConfig = SceneConfig()):
    """Render ``counts[i]`` glyphs of global class ``classes[i]``.

    Returns (uint8 image (size, size, 3), sorted labels).  Identical seed and
    arguments give bit-identical output.
    """
    if len(classes) != len(counts):
        raise ValueError("classes and counts differ in length")
    total = int(np.sum(counts)) if len(counts) else 0
    if total > cfg.max_objects:
        raise ValueError(f"{total} objects exceed max_objects={cfg.max_objects}")
    rng = np.random.default_rng(seed)
    size = cfg.size
    noise = rng.normal(cfg.noise_level, cfg.noise_level / 2.5, (size, size, 3))
    img = np.clip(noise, 0, 255)
    sep2 = (2 * cfg.r_max) ** 2
    placed, labels = [], []
    for cls, k in zip(classes, counts):
        glyph = GlyphClass.from_id(cls)
        for _ in range(int(k)):
            r = int(rng.integers(cfg.r_min, cfg.r_max + 1))
            for _attempt in range(cfg.max_attempts):
                cy, cx = (int(v) for v in rng.integers(cfg.r_max, size - cfg.r_max, size=2))
                if all((cy - py) ** 2 + (cx - px) ** 2 >= sep2 for py, px in placed):
                    break
            else:
                raise SceneError(f"could not place object {len(placed) + 1} of {total} "
                                 f"after {cfg.max_attempts} attempts")
            placed.append((cy, cx))
            mask = glyph_mask(glyph.shape, r)
            shade = rng.uniform(0.85, 1.0)
            patch = img[cy - r:cy + r + 1, cx - r:cx + r + 1]
            patch[mask] = np.asarray(glyph.color, dtype=np.float64) * shade
            # annotation: any mask pixel within r/2 of the centre
            my, mx = np.nonzero(mask)
            near = (my - r) ** 2 + (mx - r) ** 2 <= (r / 2.0) ** 2
            pick = int(rng.integers(int(near.sum())))
            labels.append(ScenePointLabel(int(cy - r + my[near][pick]), int(cx - r + mx[near][pick]), int(cls)))
    return np.round(img).astype(np.uint8), sort_labels(labels)


@dataclass(eq=False)
class EpisodeTask:
    class_ids: tuple          # global ids in draw order
    local_index: tuple        # episode-local index of class_ids[k]
    support_images: list      # uint8 (H, W, 3)
    support_labels: list      # list of sorted ScenePointLabel lists
    query_image: np.ndarray
    query_labels: list

    @property
    def ways(self) -> int:
        return len(self.class_ids)

    @property
    def shots(self) -> int:
        return len(self.support_images)

    def local_of(self, class_id: int) -> int:
        return self.local_index[self.class_ids.index(class_id)]

    def global_of(self, local: int) -> int:
        return self.class_ids[self.local_index.index(local)]

    def local_labels(self, labels) -> list:
        return [(lab.y, lab.x, self.local_of(lab.class_id)) for lab in labels]

    @property
    def support(self) -> list:
        return [(im, self.local_labels(lab)) for im, lab in zip(self.support_images, self.support_labels)]

    @property
    def query(self) -> list:
        return self.local_labels(self.query_labels)

    def gt_counts(self) -> list:
        counts = [0] * self.ways
        for _, _, c in self.query:
            counts[c] += 1
        return counts

    def with_shots(self, shots: int) -> "EpisodeTask":
        """Same task restricted to the first ``shots`` support images."""
        if not 1 <= shots <= self.shots:
            raise ValueError(f"cannot take {shots} of {self.shots} shots")
        return replace(self, support_images=self.support_images[:shots],
                       support_labels=self.support_labels[:shots])

    def __eq__(self, other):
        if not isinstance(other, EpisodeTask):
            return NotImplemented
        return (
            tuple(self.class_ids) == tuple(other.class_ids)
            and tuple(self.local_index) == tuple(other.local_index)
            and len(self.support_images) == len(other.support_images)
            and all(np.array_equal(a, b) and a.dtype == b.dtype
                    for a, b in zip(self.support_images, other.support_images))
            and [list(x) for x in self.support_labels] == [list(x) for x in other.support_labels]
            and np.array_equal(self.query_image, other.query_image)
            and list(self.query_labels) == list(other.query_labels)
        )


def _draw_counts(rng, n_classes, cfg: TaskConfig) -> np.ndarray:
    lo, hi = cfg.counts
    counts = rng.integers(lo, hi + 1, size=n_classes)
    while counts.sum() > cfg.scene.max_objects:
        over = np.flatnonzero(counts > max(lo, 1))
        counts[over[int(rng.integers(len(over)))]] -= 1
    return counts


def _scene_with_retries(rng, classes, counts, cfg: TaskConfig):
    for _ in range(cfg.max_scene_retries):
        seed = int(rng.integers(2 ** 63))
        try:
            return generate_scene(seed, classes, counts, cfg.scene)
        except SceneError:
            continue
    raise SceneError(f"scene with counts {list(counts)} failed {cfg.max_scene_retries} times")


def _check_range(name, rng_pair, lowest):
    lo, hi = rng_pair
    if lo < lowest or hi < lo:
        raise ValueError(f"empty or invalid {name} range {rng_pair}")


def sample_task(rng: np.random.Generator, split: str, cfg: TaskConfig = TaskConfig()) -> EpisodeTask:
    """Draw one C-way S-shot task from the split's class pool.

    ``split`` is a split name or an explicit sequence of global class ids.
    """
    _check_range("ways", cfg.ways, 1)
    _check_range("shots", cfg.shots, 1)
    _check_range("counts", cfg.counts, 1)
    pool = split_classes(split) if isinstance(split, str) else [int(c) for c in split]
    if not pool:
        raise ValueError(f"split {split!r} has no classes")
    if cfg.ways[1] > len(pool):
        raise ValueError(f"{cfg.ways[1]} ways exceed the {len(pool)} classes of {split}")
    if cfg.ways[1] > cfg.scene.max_objects:
        raise ValueError("max_objects must allow one instance of every class")
    n_ways = int(rng.integers(cfg.ways[0], cfg.ways[1] + 1))
    classes = [int(c) for c in rng.choice(pool, n_ways, replace=False)]
    local = tuple(int(i) for i in rng.permutation(n_ways))
    n_shots = int(rng.integers(cfg.shots[0], cfg.shots[1] + 1))
    scenes = [_scene_with_retries(rng, classes, _draw_counts(rng, n_ways, cfg), cfg)
              for _ in range(n_shots + 1)]
    return EpisodeTask(
        class_ids=tuple(classes),
        local_index=local,
        support_images=[im for im, _ in scenes[:-1]],
        support_labels=[lab for _, lab in scenes[:-1]],
        query_image=scenes[-1][0],
        query_labels=scenes[-1][1],
    )


SPLIT_CODES = {META_TRAIN: 0, "validation": 1, META_TEST: 2}


def task_rng(master_seed: int, split: str, index: int) -> np.random.Generator:
    """Independent stream per (master seed, split, task index)."""
    return np.random.default_rng([int(master_seed), SPLIT_CODES[split], int(index)])


def generate_tasks(master_seed: int, split: str, n: int, cfg: TaskConfig = TaskConfig(),
                   classes=None) -> list:
    """``n`` tasks of the named split; ``classes`` overrides its class pool."""
    if classes is None:
        classes = split_classes(META_TEST if split == META_TEST else META_TRAIN)
    return [sample_task(task_rng(master_seed, split, i), classes, cfg) for i in range(n)]


# ------------------------------------------------------------------ file IO

MAGIC = b"SQEP"
VERSION = 1


def _pack_image(out: bytearray, image: np.ndarray, labels, task: EpisodeTask):
    h, w, c = image.shape
    if c != 3 or image.dtype != np.uint8:
        raise ValueError("episode images must be uint8 H x W x 3")
    out += struct.pack("<HH", h, w)
    out += np.ascontiguousarray(image).tobytes()
    out += struct.pack("<H", len(labels))
    for lab in labels:
        out += struct.pack("<HHB", lab.y, lab.x, task.local_of(lab.class_id))


def encode_episodes(tasks) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<HI", VERSION, len(tasks))
    for t in tasks:
        out += struct.pack("<BB", t.ways, t.shots)
        out += struct.pack(f"<{t.ways}H", *t.class_ids)
        out += struct.pack(f"<{t.ways}B", *t.local_index)
        for im, labs in zip(t.support_images, t.support_labels):
            _pack_image(out, im, labs, t)
        _pack_image(out, t.query_image, t.query_labels, t)
    return bytes(out)


def write_episodes(path, tasks) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_episodes(tasks))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise EpisodeFormatError(f"truncated file while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _read_image(rd: _Reader, class_ids, local_index):
    h, w = rd.unpack("<HH", "image header")
    image = np.frombuffer(rd.take(h * w * 3, "image pixels"), dtype=np.uint8).reshape(h, w, 3).copy()
    (n,) = rd.unpack("<H", "label count")
    labels = []
    for _ in range(n):
        y, x, local = rd.unpack("<HHB", "label")
        if local not in local_index:
            raise EpisodeFormatError(f"label references unknown local class {local}", rd.pos - 1)
        labels.append(ScenePointLabel(y, x, class_ids[local_index.index(local)]))
    return image, labels


def decode_episodes(data: bytes) -> list:
    rd = _Reader(data)
    magic = rd.take(4, "magic")
    if magic != MAGIC:
        raise EpisodeFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    (version,) = rd.unpack("<H", "version")
    if version != VERSION:
        raise EpisodeFormatError(f"unsupported version {version}", 4)
    (count,) = rd.unpack("<I", "task count")
    tasks = []
    for _ in range(count):
        ways, shots = rd.unpack("<BB", "task header")
        class_ids = rd.unpack(f"<{ways}H", "class ids")
        local_index = rd.unpack(f"<{ways}B", "local index map")
        if sorted(local_index) != list(range(ways)):
            raise EpisodeFormatError("local index map is not a permutation", rd.pos - ways)
        sup = [_read_image(rd, class_ids, local_index) for _ in range(shots)]
        q_img, q_lab = _read_image(rd, class_ids, local_index)
        tasks.append(EpisodeTask(tuple(class_ids), tuple(local_index), [s[0] for s in sup],
                                 [s[1] for s in sup], q_img, q_lab))
    if rd.pos != len(data):
        raise EpisodeFormatError("trailing bytes after last task", rd.pos)
    return tasks


def read_episodes(path) -> list:
    with open(path, "rb") as fh:
        return decode_episodes(fh.read())

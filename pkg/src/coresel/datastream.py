"""MNIST-format ingestion and deterministic task-stream synthesis.

A Dataset is a bundle of flattened 28x28 images (rows of 784 floats), labels,
and each example's index in the originating corpus. Streams are built by
per-task deterministic transforms — rotation, pixel permutation, class
imbalance, label-preserving noise — with every random draw derived from
(master_seed, task index, purpose tag), so rebuilding a stream reproduces it
bit-for-bit.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, EmptyInputError, FormatError

IMAGE_SIDE = 28
PIXELS = IMAGE_SIDE * IMAGE_SIDE
NUM_CLASSES = 10

# Purpose tags for per-task seed derivation.
_TAG_ANGLE = 0
_TAG_TRAIN_SUBSET = 1
_TAG_TEST_SUBSET = 2
_TAG_IMBALANCE = 3
_TAG_NOISE = 4
_TAG_PERMUTE = 5
_TAG_REDUCED_CLASSES = 6


@dataclass(frozen=True)
class Dataset:
    """Immutable-by-convention bundle of examples.

    source_index traces every row back to its position in the base corpus the
    stream was built from; transforms preserve it so stored coreset entries
    stay identifiable.
    """

    x: np.ndarray  # (n, 784) float64
    y: np.ndarray  # (n,) int64
    source_index: np.ndarray  # (n,) int64

    def __post_init__(self):
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],) or self.source_index.shape != self.y.shape:
            raise DimensionError(
                f"inconsistent dataset shapes x={self.x.shape} y={self.y.shape} src={self.source_index.shape}"
            )

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.x[indices], self.y[indices], self.source_index[indices])


@dataclass(frozen=True)
class TaskSpec:
    kind: str  # "rotate" | "permute" | "identity"
    angle: float | None = None
    permute_seed: int | None = None
    imbalance: tuple[tuple[int, ...], float] | None = None  # (reduced classes, keep fraction)
    noise_fraction: float = 0.0


@dataclass(frozen=True)
class Task:
    spec: TaskSpec
    train: Dataset
    test: Dataset
    noisy_source: frozenset  # source indices whose pixels were replaced by noise


@dataclass(frozen=True)
class TaskStream:
    tasks: tuple[Task, ...]
    master_seed: int

    def __len__(self) -> int:
        return len(self.tasks)


def _task_seed(master_seed: int, task: int, tag: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed), int(task), int(tag)])


# ---------------------------------------------------------------------------
# IDX ingestion


def _read_exact(fh, n: int, path: str, what: str) -> bytes:
    start = fh.tell()
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"{path}: truncated {what} at offset {start} (needed {n} bytes, got {len(data)})")
    return data


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """Read big-endian IDX image/label files into a Dataset (pixels scaled by 1/255)."""
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">iiii", _read_exact(fh, 16, images_path, "image header"))
        if magic != 0x00000803:
            raise FormatError(f"{images_path}: bad image magic 0x{magic:08x} at offset 0")
        pixels = _read_exact(fh, count * rows * cols, images_path, "image data")
        if fh.read(1):
            raise FormatError(f"{images_path}: trailing bytes after image data at offset {16 + count * rows * cols}")
    with open(labels_path, "rb") as fh:
        magic, label_count = struct.unpack(">ii", _read_exact(fh, 8, labels_path, "label header"))
        if magic != 0x00000801:
            raise FormatError(f"{labels_path}: bad label magic 0x{magic:08x} at offset 0")
        labels = _read_exact(fh, label_count, labels_path, "label data")
        if fh.read(1):
            raise FormatError(f"{labels_path}: trailing bytes after label data at offset {8 + label_count}")
    if label_count != count:
        raise FormatError(f"{labels_path}: {label_count} labels for {count} images (counts must match)")
    x = np.frombuffer(pixels, dtype=np.uint8).astype(np.float64).reshape(count, rows * cols) / 255.0
    y = np.frombuffer(labels, dtype=np.uint8).astype(np.int64)
    return Dataset(x, y, np.arange(count, dtype=np.int64))


# ---------------------------------------------------------------------------
# Per-image transforms


def _rotation_sampler(angle: float, side: int = IMAGE_SIDE):
    """Bilinear inverse-map gather plan: 4 neighbor indices + weights per output pixel.

    Rotation is about the integer pixel (side//2, side//2), so that pixel is a
    fixed point for every angle and 180 degrees maps the interior exactly onto
    the pixel lattice.
    """
    center = side // 2
    r, c = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    dr = (r - center).ravel()
    dc = (c - center).ravel()
    theta = math.radians(angle)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    # Inverse rotation of the output offset gives the source sample point.
    src_r = center + cos_t * dr + sin_t * dc
    src_c = center - sin_t * dr + cos_t * dc
    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    fr = src_r - r0
    fc = src_c - c0
    indices = np.zeros((side * side, 4), dtype=np.int64)
    weights = np.zeros((side * side, 4), dtype=np.float64)
    corners = ((r0, c0, (1 - fr) * (1 - fc)), (r0, c0 + 1, (1 - fr) * fc),
               (r0 + 1, c0, fr * (1 - fc)), (r0 + 1, c0 + 1, fr * fc))
    for k, (rr, cc, w) in enumerate(corners):
        valid = (rr >= 0) & (rr < side) & (cc >= 0) & (cc < side)
        indices[:, k] = np.where(valid, rr * side + cc, 0)
        weights[:, k] = np.where(valid, w, 0.0)
    return indices, weights


def rotate_image(pixels, angle: float) -> np.ndarray:
    """Rotate a 28x28 image in [0,1] about its center pixel, bilinear, zero fill."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.shape != (IMAGE_SIDE, IMAGE_SIDE):
        raise DimensionError(f"expected a {IMAGE_SIDE}x{IMAGE_SIDE} image, got {pixels.shape}")
    if not 0.0 <= angle <= 180.0:
        raise ValueError(f"rotation angle must lie in [0, 180], got {angle}")
    idx, w = _rotation_sampler(angle)
    flat = pixels.ravel()
    out = (flat[idx] * w).sum(axis=1)
    return np.clip(out, 0.0, 1.0).reshape(IMAGE_SIDE, IMAGE_SIDE)


def rotate_dataset(ds: Dataset, angle: float) -> Dataset:
    if ds.x.shape[1] != PIXELS:
        raise DimensionError(f"rotation needs {PIXELS}-pixel rows, got {ds.x.shape[1]}")
    if not 0.0 <= angle <= 180.0:
        raise ValueError(f"rotation angle must lie in [0, 180], got {angle}")
    idx, w = _rotation_sampler(angle)
    out = np.einsum("nkj,kj->nk", ds.x[:, idx], w)
    return Dataset(np.clip(out, 0.0, 1.0), ds.y, ds.source_index)


def permute_pixels(ds: Dataset, seed) -> Dataset:
    """Apply one fixed random pixel permutation to every image."""
    perm = np.random.default_rng(seed).permutation(ds.x.shape[1])
    return Dataset(ds.x[:, perm], ds.y, ds.source_index)


# ---------------------------------------------------------------------------
# Label/population transforms


def apply_imbalance(ds: Dataset, reduced_classes, keep_fraction: float, seed) -> Dataset:
    """Keep floor(keep_fraction * count) uniformly chosen examples of each reduced class.

    Other classes are untouched; the surviving order is reshuffled
    deterministically from `seed`.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    reduced = sorted(set(int(c) for c in reduced_classes))
    rng = np.random.default_rng(seed)
    keep = np.ones(len(ds), dtype=bool)
    for c in reduced:
        positions = np.flatnonzero(ds.y == c)
        quota = int(math.floor(keep_fraction * positions.size))
        keep[positions] = False
        if quota > 0:
            keep[rng.choice(positions, size=quota, replace=False)] = True
    survivors = np.flatnonzero(keep)
    return ds.subset(rng.permutation(survivors))


def apply_noise(ds: Dataset, fraction: float, seed) -> tuple[Dataset, np.ndarray]:
    """Replace ALL pixels of floor(fraction * n) uniformly chosen examples with N(0,1).

    Labels are retained and untouched rows stay bit-identical. Returns the new
    dataset and the sorted row positions that were replaced.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"noise fraction must lie in [0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    count = int(math.floor(fraction * len(ds)))
    positions = np.sort(rng.choice(len(ds), size=count, replace=False))
    x = ds.x.copy()
    x[positions] = rng.standard_normal((count, ds.x.shape[1]))
    return Dataset(x, ds.y, ds.source_index), positions


# ---------------------------------------------------------------------------
# Stream builders


def _subsample(ds: Dataset, size, seed) -> Dataset:
    if size is None or size >= len(ds):
        return ds
    rng = np.random.default_rng(seed)
    return ds.subset(rng.choice(len(ds), size=int(size), replace=False))


def _finish_task(spec: TaskSpec, train: Dataset, test: Dataset, master_seed: int, t: int) -> Task:
    noisy: frozenset = frozenset()
    if spec.imbalance is not None:
        reduced, keep_fraction = spec.imbalance
        train = apply_imbalance(train, reduced, keep_fraction, _task_seed(master_seed, t, _TAG_IMBALANCE))
    if spec.noise_fraction > 0.0:
        train, positions = apply_noise(train, spec.noise_fraction, _task_seed(master_seed, t, _TAG_NOISE))
        noisy = frozenset(int(s) for s in train.source_index[positions])
    return Task(spec, train, test, noisy)


def draw_reduced_classes(master_seed: int, num_reduced: int = 8, num_classes: int = NUM_CLASSES) -> tuple[int, ...]:
    rng = np.random.default_rng(_task_seed(master_seed, 0, _TAG_REDUCED_CLASSES))
    return tuple(sorted(int(c) for c in rng.choice(num_classes, size=num_reduced, replace=False)))


def build_rotated_stream(
    train: Dataset,
    test: Dataset,
    num_tasks: int,
    master_seed: int,
    *,
    train_per_task=None,
    test_per_task=None,
    angles=None,
    imbalance: tuple[tuple[int, ...], float] | None = None,
    noise_fraction: float = 0.0,
) -> TaskStream:
    """Tasks are the base corpus under per-task uniform angles from [0, 180].

    `angles` overrides the drawn sequence (test hook). `imbalance` and
    `noise_fraction` apply to the train side of every task; test sets stay
    balanced and clean so accuracies measure true generalization.
    """
    if num_tasks < 1:
        raise EmptyInputError("a stream needs at least one task")
    if angles is not None and len(angles) != num_tasks:
        raise DimensionError(f"{len(angles)} angle overrides for {num_tasks} tasks")
    tasks = []
    for t in range(num_tasks):
        if angles is not None:
            angle = float(angles[t])
        else:
            angle = float(np.random.default_rng(_task_seed(master_seed, t, _TAG_ANGLE)).uniform(0.0, 180.0))
        task_train = rotate_dataset(_subsample(train, train_per_task, _task_seed(master_seed, t, _TAG_TRAIN_SUBSET)), angle)
        task_test = rotate_dataset(_subsample(test, test_per_task, _task_seed(master_seed, t, _TAG_TEST_SUBSET)), angle)
        spec = TaskSpec(kind="rotate", angle=angle, imbalance=imbalance, noise_fraction=noise_fraction)
        tasks.append(_finish_task(spec, task_train, task_test, master_seed, t))
    return TaskStream(tuple(tasks), int(master_seed))


def build_permuted_stream(
    train: Dataset,
    test: Dataset,
    num_tasks: int,
    master_seed: int,
    *,
    train_per_task=None,
    test_per_task=None,
    imbalance: tuple[tuple[int, ...], float] | None = None,
    noise_fraction: float = 0.0,
) -> TaskStream:
    """Tasks are the base corpus under per-task fixed pixel permutations."""
    if num_tasks < 1:
        raise EmptyInputError("a stream needs at least one task")
    tasks = []
    for t in range(num_tasks):
        perm_seed = _task_seed(master_seed, t, _TAG_PERMUTE)
        task_train = permute_pixels(_subsample(train, train_per_task, _task_seed(master_seed, t, _TAG_TRAIN_SUBSET)), perm_seed)
        task_test = permute_pixels(_subsample(test, test_per_task, _task_seed(master_seed, t, _TAG_TEST_SUBSET)), perm_seed)
        spec = TaskSpec(kind="permute", permute_seed=t, imbalance=imbalance, noise_fraction=noise_fraction)
        tasks.append(_finish_task(spec, task_train, task_test, master_seed, t))
    return TaskStream(tuple(tasks), int(master_seed))


def stream_manifest(stream: TaskStream) -> str:
    """One line per task: kind, angle or permutation seed, imbalance, noise."""
    lines = [f"master_seed = {stream.master_seed}"]
    for t, task in enumerate(stream.tasks):
        spec = task.spec
        if spec.kind == "rotate":
            detail = f"angle={spec.angle:.6f}"
        elif spec.kind == "permute":
            detail = f"permute_seed={spec.permute_seed}"
        else:
            detail = "identity"
        if spec.imbalance is not None:
            reduced, keep = spec.imbalance
            imb = "classes:" + "|".join(str(c) for c in reduced) + f";keep:{keep:g}"
        else:
            imb = "none"
        noise = f"{spec.noise_fraction:g}" if spec.noise_fraction > 0 else "none"
        lines.append(
            f"task={t} kind={spec.kind} {detail} imbalance={imb} noise={noise} "
            f"train={len(task.train)} test={len(task.test)}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Synthetic corpus (28x28 digit glyphs on class canvases) for environments
# without MNIST files

_GLYPHS = {
    0: ("..####..", ".#....#.", "#......#", "#......#", "#......#", "#......#", ".#....#.", "..####.."),
    1: ("...#....", "..##....", ".#.#....", "...#....", "...#....", "...#....", "...#....", ".######."),
    2: ("..####..", ".#....#.", "......#.", ".....#..", "....#...", "..##....", ".#......", ".######."),
    3: ("..####..", ".#....#.", "......#.", "...###..", "......#.", "......#.", ".#....#.", "..####.."),
    4: ("....##..", "...#.#..", "..#..#..", ".#...#..", "#....#..", "########", ".....#..", ".....#.."),
    5: (".######.", ".#......", ".#......", ".#####..", "......#.", "......#.", ".#....#.", "..####.."),
    6: ("..####..", ".#....#.", ".#......", ".#####..", ".#....#.", ".#....#.", ".#....#.", "..####.."),
    7: (".######.", "......#.", ".....#..", "....#...", "...#....", "...#....", "...#....", "...#...."),
    8: ("..####..", ".#....#.", ".#....#.", "..####..", ".#....#.", ".#....#.", ".#....#.", "..####.."),
    9: ("..####..", ".#....#.", ".#....#.", "..#####.", "......#.", "......#.", ".#....#.", "..####.."),
}


def _box_blur(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, 1)
    out = np.zeros_like(img)
    for dr in (0, 1, 2):
        for dc in (0, 1, 2):
            out += padded[dr : dr + img.shape[0], dc : dc + img.shape[1]]
    return out / 9.0


def _glyph_template(digit: int) -> np.ndarray:
    rows = _GLYPHS[digit]
    bitmap = np.array([[1.0 if ch == "#" else 0.0 for ch in row] for row in rows])
    # Thick soft strokes: same-class images must stay strongly correlated
    # under small jitter, as handwritten digits are.
    smooth = _box_blur(_box_blur(np.kron(bitmap, np.ones((3, 3)))))
    return smooth / smooth.max()  # 24x24


# Class canvases are fixed across corpora (shared by train and test splits):
# they are part of the class definition, not of any particular sample draw.
_CANVAS_SEED = 0x5EED


def _class_canvas(digit: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([_CANVAS_SEED, digit]))
    field = _box_blur(_box_blur(rng.standard_normal((IMAGE_SIDE, IMAGE_SIDE))))
    field /= field.std()
    # Low-frequency and high-contrast: smooth enough to survive bilinear
    # rotation, strong enough that image energy spans the whole canvas rather
    # than a few stroke pixels.
    return np.clip(1.6 * field, -1.0, 1.0)


def make_synthetic_corpus(n: int, seed, *, noise_sigma: float = 0.04, max_shift: int = 1) -> Dataset:
    """Deterministic corpus: digit glyphs over per-class textured canvases.

    A stand-in with MNIST's shape and label alphabet for environments where
    the real IDX files are absent. Every image is mid-gray plus its class
    canvas at a per-example amplitude, with the class glyph drawn on top.
    Class evidence fills the image (per-image norms far from zero) while
    same-class images still vary in position, contrast, and pixel noise.
    """
    rng = np.random.default_rng(seed)
    glyphs = np.stack([_glyph_template(d) for d in range(NUM_CLASSES)])
    canvases = np.stack([_class_canvas(d) for d in range(NUM_CLASSES)])
    labels = rng.integers(0, NUM_CLASSES, size=n)
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    amplitude = rng.uniform(0.4, 0.5, size=n)
    intensity = rng.uniform(0.7, 1.0, size=n)
    noise = rng.normal(0.0, noise_sigma, size=(n, IMAGE_SIDE, IMAGE_SIDE))
    x = np.zeros((n, IMAGE_SIDE, IMAGE_SIDE))
    for i in range(n):
        dr, dc = int(shifts[i, 0]), int(shifts[i, 1])
        img = 0.5 + amplitude[i] * np.roll(canvases[labels[i]], (dr, dc), axis=(0, 1))
        r, c = 2 + dr, 2 + dc
        img[r : r + 24, c : c + 24] += intensity[i] * 0.5 * glyphs[labels[i]]
        x[i] = img
    x = np.clip(x + noise, 0.0, 1.0).reshape(n, PIXELS)
    return Dataset(x, labels.astype(np.int64), np.arange(n, dtype=np.int64))

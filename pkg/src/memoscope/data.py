"""Datasets with per-example noise provenance.

Loads IDX image/label pairs, downscales, and builds the noise variants used
throughout: inputs replaced by matched Gaussian noise (randX), labels redrawn
uniformly (randY), partial-noise mixtures, and the one-class-per-example
relabeling.  Every transform is pure: it returns a new dataset and never
mutates its argument.

A dataset can be snapshotted to a little-endian binary container (format
documented at :func:`save_dataset`) so a run can be replayed from bytes.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import ShapeError
from .seeding import stream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class FormatError(ValueError):
    """A file does not follow its declared byte format."""


class ConsistencyError(ValueError):
    """Structurally valid data that contradicts itself (counts, ranges, flags)."""


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "none"          # none | randX | randY
    fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "randX", "randY"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError(f"noise fraction {self.fraction} outside [0, 1]")


@dataclass(frozen=True)
class ExampleRecord:
    """Read-only view of one example."""

    index: int
    input: np.ndarray
    true_label: int
    effective_label: int
    input_noised: bool
    label_noised: bool
    original_input: np.ndarray | None = None


class Dataset:
    """Ordered examples with shared image shape and full noise provenance.

    Inputs are stored flat, one row per example, pixels in [0, 1] for image
    data (replacement Gaussian pixels may leave that range).  When inputs
    have been replaced, the clean originals are retained for audit.
    `source_stats` is the scalar (mean, variance) over all pixels of the
    clean inputs, recomputed on construction from originals where present.
    """

    def __init__(self, inputs, true_labels, effective_labels, input_noised,
                 label_noised, num_classes, image_shape, noise_spec=None,
                 original_inputs=None, indices=None):
        inputs = np.ascontiguousarray(inputs, dtype=np.float64)
        if inputs.ndim != 2:
            raise ShapeError(f"dataset inputs must be (N, dim), got {inputs.shape}")
        n = inputs.shape[0]
        self.inputs = inputs
        self.true_labels = np.ascontiguousarray(true_labels, dtype=np.int64)
        self.effective_labels = np.ascontiguousarray(effective_labels, dtype=np.int64)
        self.input_noised = np.ascontiguousarray(input_noised, dtype=bool)
        self.label_noised = np.ascontiguousarray(label_noised, dtype=bool)
        self.num_classes = int(num_classes)
        self.image_shape = tuple(int(s) for s in image_shape)
        self.noise_spec = noise_spec or NoiseSpec()
        self.original_inputs = (
            None if original_inputs is None
            else np.ascontiguousarray(original_inputs, dtype=np.float64)
        )
        self.indices = (
            np.arange(n, dtype=np.int64) if indices is None
            else np.ascontiguousarray(indices, dtype=np.int64)
        )
        self._validate()
        clean = self.original_inputs if self.original_inputs is not None else self.inputs
        self.source_stats = (float(clean.mean()), float(clean.var())) if n else (0.0, 0.0)

    def _validate(self):
        n, dim = self.inputs.shape
        if int(np.prod(self.image_shape)) != dim:
            raise ShapeError(f"image shape {self.image_shape} does not cover {dim} pixels")
        for name, arr in (("true_labels", self.true_labels),
                          ("effective_labels", self.effective_labels),
                          ("input_noised", self.input_noised),
                          ("label_noised", self.label_noised),
                          ("indices", self.indices)):
            if arr.shape != (n,):
                raise ConsistencyError(f"{name} has shape {arr.shape}, expected ({n},)")
        if n and (self.effective_labels.min() < 0 or self.effective_labels.max() >= self.num_classes):
            raise ConsistencyError(
                f"effective labels must lie in [0, {self.num_classes}), "
                f"found range [{self.effective_labels.min()}, {self.effective_labels.max()}]")
        mismatch = (~self.label_noised) & (self.effective_labels != self.true_labels)
        if mismatch.any():
            raise ConsistencyError("effective label differs from true label on an unflagged example")
        if self.input_noised.any() and self.original_inputs is None:
            raise ConsistencyError("input_noised set but no originals retained")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def input_dim(self):
        return self.inputs.shape[1]

    def record(self, i) -> ExampleRecord:
        orig = None
        if self.input_noised[i] and self.original_inputs is not None:
            orig = self.original_inputs[i]
        return ExampleRecord(
            index=int(self.indices[i]),
            input=self.inputs[i],
            true_label=int(self.true_labels[i]),
            effective_label=int(self.effective_labels[i]),
            input_noised=bool(self.input_noised[i]),
            label_noised=bool(self.label_noised[i]),
            original_input=orig,
        )

    def __iter__(self):
        return (self.record(i) for i in range(len(self)))

    def class_counts(self):
        return np.bincount(self.effective_labels, minlength=self.num_classes)


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    """Exact (bitwise on arrays) equality; used by determinism checks."""
    if (a.num_classes, a.image_shape, a.noise_spec) != (b.num_classes, b.image_shape, b.noise_spec):
        return False
    pairs = [
        (a.inputs, b.inputs), (a.true_labels, b.true_labels),
        (a.effective_labels, b.effective_labels), (a.input_noised, b.input_noised),
        (a.label_noised, b.label_noised), (a.indices, b.indices),
    ]
    if (a.original_inputs is None) != (b.original_inputs is None):
        return False
    if a.original_inputs is not None:
        pairs.append((a.original_inputs, b.original_inputs))
    return all(x.shape == y.shape and np.array_equal(x, y) for x, y in pairs)


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------

def _read_idx(path, expected_magic, expected_ndim):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    header_len = 4 + 4 * expected_ndim
    if len(raw) < header_len:
        raise IOError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{expected_ndim}I", raw[4:header_len])
    count = int(np.prod(dims))
    if len(raw) < header_len + count:
        raise IOError(f"{path}: truncated payload, expected {count} bytes after header")
    if len(raw) > header_len + count:
        raise FormatError(f"{path}: {len(raw) - header_len - count} unexpected trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, offset=header_len).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair into a clean dataset.

    Pixels are scaled to [0, 1] by dividing by 255.  Labels must be digits
    0-9 and the two files must agree on the record count.
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(
            f"{images.shape[0]} images vs {labels.shape[0]} labels")
    if labels.size and labels.max() > 9:
        raise ConsistencyError(f"label {int(labels.max())} out of range, labels must be < 10")
    n = images.shape[0]
    rows, cols = images.shape[1], images.shape[2]
    inputs = images.reshape(n, rows * cols).astype(np.float64) / 255.0
    lab = labels.astype(np.int64)
    return Dataset(
        inputs=inputs, true_labels=lab, effective_labels=lab.copy(),
        input_noised=np.zeros(n, dtype=bool), label_noised=np.zeros(n, dtype=bool),
        num_classes=10, image_shape=(rows, cols),
    )


def load_mnist_dir(directory) -> tuple[Dataset, Dataset]:
    """(train, test) datasets from a directory laid out with the usual file names."""
    import os

    def p(key):
        return os.path.join(directory, MNIST_FILES[key])

    train = load_idx(p("train_images"), p("train_labels"))
    test = load_idx(p("test_images"), p("test_labels"))
    return train, test


def write_idx_images(path, images):
    """Write uint8 images (N, rows, cols) in IDX format (big-endian header)."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ShapeError(f"expected (N, rows, cols) uint8 images, got {images.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    if labels.ndim != 1:
        raise ShapeError(f"expected 1-d uint8 labels, got {labels.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------

def downscale(d: Dataset) -> Dataset:
    """2x2 mean pooling: 28x28 inputs become 14x14."""
    if d.image_shape != (28, 28):
        raise ShapeError(f"downscale expects 28x28 inputs, got {d.image_shape}")

    def pool(flat):
        imgs = flat.reshape(-1, 28, 28)
        return imgs.reshape(-1, 14, 2, 14, 2).mean(axis=(2, 4)).reshape(-1, 196)

    return Dataset(
        inputs=pool(d.inputs),
        true_labels=d.true_labels.copy(),
        effective_labels=d.effective_labels.copy(),
        input_noised=d.input_noised.copy(),
        label_noised=d.label_noised.copy(),
        num_classes=d.num_classes,
        image_shape=(14, 14),
        noise_spec=d.noise_spec,
        original_inputs=None if d.original_inputs is None else pool(d.original_inputs),
        indices=d.indices.copy(),
    )


def _noise_subset(n, fraction, seed, tag):
    count = int(np.floor(fraction * n))
    rng = stream(seed, tag)
    return np.sort(rng.choice(n, size=count, replace=False))


def inject_input_noise(d: Dataset, fraction: float, seed: int) -> Dataset:
    """Replace a seed-deterministic ⌊fraction·N⌋ subset of inputs with i.i.d.
    Gaussian pixels whose scalar mean and variance match the clean inputs.

    Replacement pixels are not clipped to [0, 1]; they are raw Gaussian draws.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction {fraction} outside [0, 1]")
    chosen = _noise_subset(len(d), fraction, seed, "randX")
    inputs = d.inputs.copy()
    originals = d.inputs.copy() if d.original_inputs is None else d.original_inputs.copy()
    mean, var = d.source_stats
    rng = stream(seed, "randX-pixels")
    inputs[chosen] = rng.normal(mean, np.sqrt(var), size=(chosen.size, d.input_dim))
    flags = d.input_noised.copy()
    flags[chosen] = True
    return Dataset(
        inputs=inputs, true_labels=d.true_labels.copy(),
        effective_labels=d.effective_labels.copy(),
        input_noised=flags, label_noised=d.label_noised.copy(),
        num_classes=d.num_classes, image_shape=d.image_shape,
        noise_spec=NoiseSpec("randX", fraction, seed) if chosen.size else d.noise_spec,
        original_inputs=originals if flags.any() else None,
        indices=d.indices.copy(),
    )


def inject_label_noise(d: Dataset, fraction: float, seed: int) -> Dataset:
    """Redraw effective labels uniformly over all classes for a deterministic
    ⌊fraction·N⌋ subset.  A redraw may coincide with the true label."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction {fraction} outside [0, 1]")
    chosen = _noise_subset(len(d), fraction, seed, "randY")
    labels = d.effective_labels.copy()
    rng = stream(seed, "randY-labels")
    labels[chosen] = rng.integers(0, d.num_classes, size=chosen.size)
    flags = d.label_noised.copy()
    flags[chosen] = True
    return Dataset(
        inputs=d.inputs.copy(), true_labels=d.true_labels.copy(),
        effective_labels=labels,
        input_noised=d.input_noised.copy(), label_noised=flags,
        num_classes=d.num_classes, image_shape=d.image_shape,
        noise_spec=NoiseSpec("randY", fraction, seed) if chosen.size else d.noise_spec,
        original_inputs=None if d.original_inputs is None else d.original_inputs.copy(),
        indices=d.indices.copy(),
    )


def unique_class_labels(d: Dataset) -> Dataset:
    """One class per example: num_classes = N and example i gets label i."""
    n = len(d)
    return Dataset(
        inputs=d.inputs.copy(), true_labels=d.true_labels.copy(),
        effective_labels=np.arange(n, dtype=np.int64),
        input_noised=d.input_noised.copy(),
        label_noised=np.ones(n, dtype=bool),
        num_classes=n, image_shape=d.image_shape,
        noise_spec=d.noise_spec,
        original_inputs=None if d.original_inputs is None else d.original_inputs.copy(),
        indices=d.indices.copy(),
    )


def subset(d: Dataset, n: int, seed: int) -> Dataset:
    """Seed-deterministic sample of n examples without replacement.

    With clean labels (and a normal class count) the sample is class
    stratified: near-equal per-class quotas, remainder spread over the lowest
    class indices.  With noised or unique-class labels it is a plain uniform
    sample.
    """
    if n > len(d):
        raise ValueError(f"cannot take {n} of {len(d)} examples")
    rng = stream(seed, "subset")
    stratify = not d.label_noised.any() and d.num_classes < len(d)
    if stratify:
        quotas = np.full(d.num_classes, n // d.num_classes, dtype=np.int64)
        quotas[: n % d.num_classes] += 1
        picked = []
        for cls in range(d.num_classes):
            pool = np.flatnonzero(d.effective_labels == cls)
            if pool.size < quotas[cls]:
                raise ValueError(
                    f"class {cls} has {pool.size} examples, needs {quotas[cls]} for stratified subset")
            picked.append(rng.choice(pool, size=quotas[cls], replace=False))
        chosen = np.concatenate(picked)
        rng.shuffle(chosen)
    else:
        chosen = rng.choice(len(d), size=n, replace=False)
    return Dataset(
        inputs=d.inputs[chosen], true_labels=d.true_labels[chosen],
        effective_labels=d.effective_labels[chosen],
        input_noised=d.input_noised[chosen], label_noised=d.label_noised[chosen],
        num_classes=d.num_classes, image_shape=d.image_shape,
        noise_spec=d.noise_spec,
        original_inputs=None if d.original_inputs is None else d.original_inputs[chosen],
        indices=d.indices[chosen],
    )


def apply_noise(d: Dataset, spec: NoiseSpec) -> Dataset:
    if spec.kind == "none":
        return d
    if spec.kind == "randX":
        return inject_input_noise(d, spec.fraction, spec.seed)
    return inject_label_noise(d, spec.fraction, spec.seed)


# ---------------------------------------------------------------------------
# Binary container
# ---------------------------------------------------------------------------

_DS_MAGIC = b"MSD1"
_NOISE_CODES = {"none": 0, "randX": 1, "randY": 2}
_NOISE_NAMES = {v: k for k, v in _NOISE_CODES.items()}


def save_dataset(path, d: Dataset):
    """Snapshot a dataset to a little-endian binary container.

    Layout: magic `MSD1`, u32 version (=1), u32 N, u8 ndim + u32 dims
    (image shape), u32 num_classes, u8 noise kind, f64 fraction, i64 seed;
    then one record per example: i64 index, u16 true label, u16 effective
    label, u8 input-noised flag, u8 label-noised flag, the input pixels as
    f64, and, when the input flag is set, the original pixels as f64.
    """
    buf = io.BytesIO()
    buf.write(_DS_MAGIC)
    buf.write(struct.pack("<II", 1, len(d)))
    buf.write(struct.pack("<B", len(d.image_shape)))
    buf.write(struct.pack(f"<{len(d.image_shape)}I", *d.image_shape))
    buf.write(struct.pack("<IBdq", d.num_classes, _NOISE_CODES[d.noise_spec.kind],
                          d.noise_spec.fraction, d.noise_spec.seed))
    for i in range(len(d)):
        buf.write(struct.pack("<qHHBB", int(d.indices[i]), int(d.true_labels[i]),
                              int(d.effective_labels[i]), int(d.input_noised[i]),
                              int(d.label_noised[i])))
        buf.write(d.inputs[i].astype("<f8").tobytes())
        if d.input_noised[i]:
            buf.write(d.original_inputs[i].astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _DS_MAGIC:
        raise FormatError(f"{path}: not a dataset container")
    off = 4
    version, n = struct.unpack_from("<II", raw, off)
    off += 8
    if version != 1:
        raise FormatError(f"{path}: unsupported container version {version}")
    (ndim,) = struct.unpack_from("<B", raw, off)
    off += 1
    shape = struct.unpack_from(f"<{ndim}I", raw, off)
    off += 4 * ndim
    num_classes, noise_code, fraction, seed = struct.unpack_from("<IBdq", raw, off)
    off += struct.calcsize("<IBdq")
    dim = int(np.prod(shape))
    indices = np.empty(n, dtype=np.int64)
    true_labels = np.empty(n, dtype=np.int64)
    eff_labels = np.empty(n, dtype=np.int64)
    in_flags = np.empty(n, dtype=bool)
    lab_flags = np.empty(n, dtype=bool)
    inputs = np.empty((n, dim), dtype=np.float64)
    originals = np.empty((n, dim), dtype=np.float64)
    any_orig = False
    for i in range(n):
        idx, tl, el, inf, lnf = struct.unpack_from("<qHHBB", raw, off)
        off += struct.calcsize("<qHHBB")
        indices[i], true_labels[i], eff_labels[i] = idx, tl, el
        in_flags[i], lab_flags[i] = bool(inf), bool(lnf)
        inputs[i] = np.frombuffer(raw, dtype="<f8", count=dim, offset=off)
        off += 8 * dim
        if inf:
            originals[i] = np.frombuffer(raw, dtype="<f8", count=dim, offset=off)
            off += 8 * dim
            any_orig = True
        else:
            originals[i] = inputs[i]
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} unexpected trailing bytes")
    return Dataset(
        inputs=inputs, true_labels=true_labels, effective_labels=eff_labels,
        input_noised=in_flags, label_noised=lab_flags,
        num_classes=num_classes, image_shape=tuple(shape),
        noise_spec=NoiseSpec(_NOISE_NAMES[noise_code], fraction, seed),
        original_inputs=originals if any_orig else None,
        indices=indices,
    )

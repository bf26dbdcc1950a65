"""Dataset loading, preprocessing and splits.

Features end up as a dense float matrix with continuous columns min-max
scaled to [0, 1] and categorical columns one-hot encoded.  Class targets are
one-hot.  Every sample carries a split label (train, val or test).
"""

import csv
import gzip
import json
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BadMagic, DatasetMissing, ParseError, SchemaMismatch, TruncatedFile

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_CODES = {"train": TRAIN, "val": VAL, "test": TEST}

CACHE_VERSION = 1
CLAMP = (-0.5, 1.5)
MISSING_TOKENS = ("", "?", "NA", "nan")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class ContinuousFeature:
    name: str
    min: float
    max: float

    @property
    def width(self):
        return 1

    def to_json(self):
        return {"kind": "continuous", "name": self.name, "min": self.min, "max": self.max}


@dataclass(frozen=True)
class CategoricalFeature:
    name: str
    categories: tuple
    has_unknown: bool = False

    @property
    def width(self):
        return len(self.categories) + int(self.has_unknown)

    def to_json(self):
        return {
            "kind": "categorical",
            "name": self.name,
            "categories": list(self.categories),
            "has_unknown": self.has_unknown,
        }


def _feature_from_json(d):
    if d["kind"] == "continuous":
        return ContinuousFeature(d["name"], d["min"], d["max"])
    return CategoricalFeature(d["name"], tuple(d["categories"]), d["has_unknown"])


@dataclass(frozen=True)
class Dataset:
    """Preprocessed features ``x`` (S, D), targets ``t`` and per-sample split codes."""

    x: np.ndarray
    t: np.ndarray
    split: np.ndarray
    feature_meta: tuple = ()
    classes: tuple = ()
    name: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.x) == len(self.t) == len(self.split)):
            raise SchemaMismatch("x, t and split must have the same number of rows")

    def __len__(self):
        return len(self.x)

    @property
    def n_features(self):
        return self.x.shape[1]

    @property
    def n_targets(self):
        return self.t.shape[1]

    def mask(self, name):
        return self.split == SPLIT_CODES[name]

    def subset(self, name):
        m = self.mask(name)
        return self.x[m], self.t[m]

    def counts(self):
        return {k: int(self.mask(k).sum()) for k in SPLIT_CODES}


def one_hot(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


# --------------------------------------------------------------------------
# delimited text


def _read_rows(path, n_cols, header, delimiter):
    rows = []
    try:
        fh = open(path, newline="")
    except FileNotFoundError as exc:
        raise DatasetMissing(str(path)) from exc
    with fh:
        reader = csv.reader(fh, delimiter=delimiter, skipinitialspace=True)
        for lineno, row in enumerate(reader, start=1):
            if header and lineno == 1:
                if len(row) != n_cols:
                    raise SchemaMismatch(
                        f"header has {len(row)} columns, schema expects {n_cols}"
                    )
                continue
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) == 1 and row[0].startswith("|"):  # UCI comment lines
                continue
            if len(row) != n_cols:
                raise ParseError(f"expected {n_cols} fields, found {len(row)}", lineno)
            rows.append((lineno, [c.strip().rstrip(".") if c.strip() else "" for c in row]))
    return rows


def _is_missing(value):
    return value in MISSING_TOKENS


def load_delimited(path, schema, target_column, test_path=None, header=False, task="classification",
                   classes=None, delimiter=",", clamp=CLAMP, name=""):
    """Load comma-separated data described by ``schema``.

    Args:
        path: training file; all its rows are labelled ``train``.
        schema: one of ``"continuous"``, ``"categorical"`` or ``"ignore"`` per column.
            The entry for the target column is ignored.
        target_column: index of the label column.
        test_path: optional file whose rows are labelled ``test``.
        task: ``"classification"`` (one-hot targets) or ``"regression"``.
        classes: class order; discovered and sorted when omitted.

    Continuous columns are scaled with the minimum and maximum of the
    training rows and clamped to ``clamp``; missing values become 0.
    Categorical columns are one-hot, with an extra unknown category when a
    value is missing anywhere.
    """
    schema = list(schema)
    n_cols = len(schema)
    if not 0 <= target_column < n_cols:
        raise SchemaMismatch(f"target column {target_column} outside schema of {n_cols} columns")
    for kind in schema:
        if kind not in ("continuous", "categorical", "ignore"):
            raise SchemaMismatch(f"unknown column kind {kind!r}")
    rows = [(TRAIN, ln, r) for ln, r in _read_rows(path, n_cols, header, delimiter)]
    if test_path is not None:
        rows += [(TEST, ln, r) for ln, r in _read_rows(test_path, n_cols, header, delimiter)]
    if not rows:
        raise ParseError("no data rows", 1)
    split = np.array([s for s, _, _ in rows], dtype=np.int8)
    is_train = split == TRAIN

    blocks, meta = [], []
    for col, kind in enumerate(schema):
        if col == target_column or kind == "ignore":
            continue
        values = [r[col] for _, _, r in rows]
        if kind == "continuous":
            raw = np.empty(len(rows))
            missing = np.zeros(len(rows), dtype=bool)
            for i, (value, (_, lineno, _)) in enumerate(zip(values, rows)):
                if _is_missing(value):
                    missing[i] = True
                    raw[i] = np.nan
                    continue
                try:
                    raw[i] = float(value)
                except ValueError:
                    raise ParseError(f"column {col}: not a number: {value!r}", lineno) from None
            ref = raw[is_train & ~missing]
            lo, hi = (float(ref.min()), float(ref.max())) if ref.size else (0.0, 1.0)
            span = hi - lo if hi > lo else 1.0
            scaled = np.clip((raw - lo) / span, *clamp)
            scaled[missing] = 0.0
            blocks.append(scaled[:, None])
            meta.append(ContinuousFeature(f"c{col}", lo, hi))
        else:
            present = sorted({v for v in values if not _is_missing(v)})
            has_unknown = any(_is_missing(v) for v in values)
            index = {c: i for i, c in enumerate(present)}
            width = len(present) + int(has_unknown)
            codes = [index.get(v, len(present)) for v in values]
            blocks.append(one_hot(codes, width))
            meta.append(CategoricalFeature(f"c{col}", tuple(present), has_unknown))

    x = np.hstack(blocks) if blocks else np.zeros((len(rows), 0))
    labels = [r[target_column] for _, _, r in rows]
    if task == "classification":
        classes = tuple(classes) if classes is not None else tuple(sorted(set(labels)))
        index = {c: i for i, c in enumerate(classes)}
        try:
            codes = [index[v] for v in labels]
        except KeyError as exc:
            raise SchemaMismatch(f"label {exc.args[0]!r} not among classes") from None
        t = one_hot(codes, len(classes))
    elif task == "regression":
        try:
            t = np.array([float(v) for v in labels])[:, None]
        except ValueError:
            raise ParseError("non-numeric regression target", None) from None
        classes = ()
    else:
        raise ValueError(f"unknown task {task!r}")
    return Dataset(x, t, split, tuple(meta), tuple(classes), name)


# --------------------------------------------------------------------------
# IDX image archives


def _read_bytes(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError as exc:
        raise DatasetMissing(str(path)) from exc
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def parse_idx(data, expected_magic):
    """Decode an IDX byte string into a uint8 array of its declared shape."""
    if len(data) < 4:
        raise TruncatedFile("file shorter than the magic number")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise BadMagic(f"magic number 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise TruncatedFile("file ends inside the dimension header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    size = int(np.prod(dims))
    if len(data) - header < size:
        raise TruncatedFile(f"expected {size} data bytes, found {len(data) - header}")
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx_images(images_path, labels_path, split_name="train", n_classes=10, name=""):
    """Images scaled to [0, 1] by division by 255, flattened row-major; one-hot labels."""
    images = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC)
    labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise SchemaMismatch(f"{len(images)} images but {len(labels)} labels")
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    split = np.full(len(x), SPLIT_CODES[split_name], dtype=np.int8)
    classes = tuple(str(i) for i in range(n_classes))
    return Dataset(x, one_hot(labels, n_classes), split, (), classes, name)


def concat(*datasets):
    """Stack datasets with the same feature layout, keeping their split labels."""
    first = datasets[0]
    return replace(
        first,
        x=np.vstack([d.x for d in datasets]),
        t=np.vstack([d.t for d in datasets]),
        split=np.concatenate([d.split for d in datasets]),
    )


# --------------------------------------------------------------------------
# splits and cache


def split(dataset, val_fraction=0.10, seed=0):
    """Move a seeded random ``val_fraction`` of the original training rows to ``val``.

    Rows previously marked ``val`` are returned to the training pool first;
    test rows are never touched.
    """
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError("val_fraction must lie in [0, 1)")
    labels = dataset.split.copy()
    pool = np.flatnonzero(labels != TEST)
    if pool.size == 0:
        raise ValueError("dataset has no training rows")
    labels[pool] = TRAIN
    n_val = int(round(val_fraction * pool.size))
    chosen = np.random.default_rng(seed).permutation(pool)[:n_val]
    labels[chosen] = VAL
    return replace(dataset, split=labels)


def save_dataset(path, dataset):
    header = {
        "version": CACHE_VERSION,
        "name": dataset.name,
        "classes": list(dataset.classes),
        "feature_meta": [m.to_json() for m in dataset.feature_meta],
    }
    with open(path, "wb") as fh:
        np.savez(
            fh,
            header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8),
            x=dataset.x,
            t=dataset.t,
            split=dataset.split,
        )


def load_dataset(path):
    if not os.path.exists(path):
        raise DatasetMissing(str(path))
    with np.load(path, allow_pickle=False) as z:
        try:
            header = json.loads(z["header"].tobytes().decode())
        except (KeyError, ValueError) as exc:
            raise SchemaMismatch(f"{path}: not a dataset cache") from exc
        if header.get("version") != CACHE_VERSION:
            raise SchemaMismatch(f"{path}: cache version {header.get('version')}")
        meta = tuple(_feature_from_json(d) for d in header["feature_meta"])
        return Dataset(
            z["x"], z["t"], z["split"], meta, tuple(header["classes"]), header["name"]
        )


# --------------------------------------------------------------------------
# benchmark registry

LETTER_CLASSES = tuple(chr(ord("A") + i) for i in range(26))


def _letter(root):
    ds = load_delimited(
        os.path.join(root, "letter-recognition.data"),
        ["categorical"] + ["continuous"] * 16,
        target_column=0,
        classes=LETTER_CLASSES,
        name="letter",
    )
    # customary split: first 16000 rows for training, last 4000 for testing
    labels = ds.split.copy()
    labels[16000:] = TEST
    return replace(ds, split=labels)


ADULT_SCHEMA = [
    "continuous", "categorical", "continuous", "categorical", "continuous", "categorical",
    "categorical", "categorical", "categorical", "categorical", "continuous", "continuous",
    "continuous", "categorical", "categorical",
]


def _adult(root):
    return load_delimited(
        os.path.join(root, "adult.data"),
        ADULT_SCHEMA,
        target_column=14,
        test_path=os.path.join(root, "adult.test"),
        classes=("<=50K", ">50K"),
        name="adult",
    )


def _connect4(root, seed=0, test_fraction=0.2):
    ds = load_delimited(
        os.path.join(root, "connect-4.data"),
        ["categorical"] * 42 + ["categorical"],
        target_column=42,
        classes=("draw", "loss", "win"),
        name="connect4",
    )
    # no official split exists; hold out a seeded test fraction
    labels = ds.split.copy()
    n_test = int(round(test_fraction * len(labels)))
    labels[np.random.default_rng(seed).permutation(len(labels))[:n_test]] = TEST
    return replace(ds, split=labels)


def _mnist(root):
    def path(stem):
        for suffix in ("", ".gz"):
            p = os.path.join(root, stem + suffix)
            if os.path.exists(p):
                return p
        raise DatasetMissing(os.path.join(root, stem))

    train = load_idx_images(path("train-images-idx3-ubyte"), path("train-labels-idx1-ubyte"),
                            "train", name="mnist")
    test = load_idx_images(path("t10k-images-idx3-ubyte"), path("t10k-labels-idx1-ubyte"),
                           "test", name="mnist")
    return concat(train, test)


BENCHMARKS = {"letter": _letter, "adult": _adult, "connect4": _connect4, "mnist": _mnist}


def default_data_root():
    return os.environ.get("GPN_DATA", os.path.join(os.getcwd(), "datasets"))


def load_benchmark(name, root=None, cache_dir=None):
    """Load a registered benchmark from ``root/<name>/``, using a cache if present."""
    if name not in BENCHMARKS:
        raise KeyError(f"unknown dataset {name!r}; choose from {sorted(BENCHMARKS)}")
    root = root or default_data_root()
    if cache_dir:
        cached = os.path.join(cache_dir, f"{name}.v{CACHE_VERSION}.npz")
        if os.path.exists(cached):
            return load_dataset(cached)
    ds = BENCHMARKS[name](os.path.join(root, name))
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
        save_dataset(cached, ds)
    return ds


# --------------------------------------------------------------------------
# synthetic data


def toy_regression(n=200, seed=0, fn=None, noise=0.0, interval=(-1.0, 1.0)):
    """Samples of ``fn`` (default sin(3x)) on a uniform random design, all in ``train``."""
    rng = np.random.default_rng(seed)
    fn = fn or (lambda x: np.sin(3.0 * x))
    x = rng.uniform(*interval, size=(n, 1))
    t = fn(x) + noise * rng.standard_normal((n, 1))
    return Dataset(x, t, np.zeros(n, dtype=np.int8), name="toy_regression")


def toy_classification(n=300, n_classes=3, n_features=2, seed=0, spread=0.08):
    """Gaussian blobs in the unit square with one-hot labels, all in ``train``."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, size=(n_classes, n_features))
    labels = rng.integers(0, n_classes, size=n)
    x = np.clip(centers[labels] + spread * rng.standard_normal((n, n_features)), 0.0, 1.0)
    classes = tuple(str(c) for c in range(n_classes))
    return Dataset(x, one_hot(labels, n_classes), np.zeros(n, dtype=np.int8), (), classes,
                   "toy_classification")


TOY = {"toy_regression": toy_regression, "toy_classification": toy_classification}

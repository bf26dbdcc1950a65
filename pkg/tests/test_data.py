import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpn import data
from gpn.errors import BadMagic, DatasetMissing, ParseError, SchemaMismatch, TruncatedFile


def write(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return path


# load_delimited


def test_continuous_min_max_endpoints(tmp_path):
    ds = data.load_delimited(write(tmp_path / "a.csv", ["2,x", "4,y"]), ["continuous", "categorical"], 1)
    assert ds.x[:, 0].tolist() == [0.0, 1.0]
    assert ds.classes == ("x", "y")
    assert ds.t.tolist() == [[1, 0], [0, 1]]


def test_categorical_missing_adds_unknown(tmp_path):
    ds = data.load_delimited(write(tmp_path / "a.csv", ["a,0", "b,1", "?,0"]), ["categorical", "categorical"], 1)
    assert ds.n_features == 3
    assert ds.x.tolist() == [[1, 0, 0], [0, 1, 0], [0, 0, 1]]
    assert ds.feature_meta[0].has_unknown


def test_missing_continuous_becomes_zero(tmp_path):
    ds = data.load_delimited(write(tmp_path / "a.csv", ["1,a", "?,b", "3,a"]), ["continuous", "categorical"], 1)
    assert ds.x[:, 0].tolist() == [0.0, 0.0, 1.0]


def test_scaling_uses_training_rows_and_clamps(tmp_path):
    train = write(tmp_path / "train.csv", ["0,a", "10,b"])
    test = write(tmp_path / "test.csv", ["30,a", "-20,b", "5,a"])
    ds = data.load_delimited(train, ["continuous", "categorical"], 1, test_path=test)
    assert ds.feature_meta[0].min == 0.0 and ds.feature_meta[0].max == 10.0
    assert ds.x[ds.mask("test"), 0].tolist() == [1.5, -0.5, 0.5]
    assert ds.counts() == {"train": 2, "val": 0, "test": 3}


def test_header_and_regression_targets(tmp_path):
    path = write(tmp_path / "r.csv", ["x,y", "1,0.5", "3,-1.5"])
    ds = data.load_delimited(path, ["continuous", "continuous"], 1, header=True, task="regression")
    assert ds.t[:, 0].tolist() == [0.5, -1.5]


def test_parse_error_reports_line(tmp_path):
    path = write(tmp_path / "bad.csv", ["1,a", "2,b", "3,c,extra"])
    with pytest.raises(ParseError) as info:
        data.load_delimited(path, ["continuous", "categorical"], 1)
    assert info.value.line == 3
    path = write(tmp_path / "nan.csv", ["1,a", "two,b"])
    with pytest.raises(ParseError) as info:
        data.load_delimited(path, ["continuous", "categorical"], 1)
    assert info.value.line == 2


def test_schema_mismatch(tmp_path):
    path = write(tmp_path / "a.csv", ["x,y,z", "1,2,a"])
    with pytest.raises(SchemaMismatch):
        data.load_delimited(path, ["continuous", "categorical"], 1, header=True)
    with pytest.raises(SchemaMismatch):
        data.load_delimited(path, ["continuous", "continuous", "categorical"], 5)
    with pytest.raises(SchemaMismatch):
        data.load_delimited(path, ["continuous", "ordinal", "categorical"], 2)
    with pytest.raises(SchemaMismatch):
        data.load_delimited(write(tmp_path / "b.csv", ["1,q"]), ["continuous", "categorical"], 1, classes=("a",))


def test_missing_file(tmp_path):
    with pytest.raises(DatasetMissing):
        data.load_delimited(tmp_path / "nope.csv", ["continuous"], 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.sampled_from(["a", "b", "c", "?"]), min_size=2, max_size=2), min_size=1, max_size=20))
def test_one_hot_blocks_exclusive_and_exhaustive(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("oh") / "d.csv"
    path.write_text("".join(f"{a},{b},z\n" for a, b in rows))
    ds = data.load_delimited(path, ["categorical", "categorical", "categorical"], 2)
    start = 0
    for meta in ds.feature_meta:
        block = ds.x[:, start : start + meta.width]
        assert set(np.unique(block)) <= {0.0, 1.0}
        assert np.all(block.sum(1) == 1.0)
        start += meta.width
    assert start == ds.n_features


# IDX archives


def idx_bytes(magic, dims, payload):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload)


def write_mnist_like(tmp_path, images, labels, compress=False):
    img = idx_bytes(data.IDX_IMAGES_MAGIC, images.shape, images.ravel().tolist())
    lab = idx_bytes(data.IDX_LABELS_MAGIC, labels.shape, labels.tolist())
    if compress:
        img, lab = gzip.compress(img), gzip.compress(lab)
    (tmp_path / "img").write_bytes(img)
    (tmp_path / "lab").write_bytes(lab)
    return tmp_path / "img", tmp_path / "lab"


def test_idx_zero_image(tmp_path):
    ds = data.load_idx_images(*write_mnist_like(tmp_path, np.zeros((1, 28, 28), np.uint8), np.array([3], np.uint8)))
    assert ds.x.shape == (1, 784) and not ds.x.any()
    assert ds.t.tolist() == [np.eye(10)[3].tolist()]


def test_idx_full_intensity_and_gzip(tmp_path):
    images = np.zeros((2, 28, 28), np.uint8)
    images[1, 0, 5] = 255
    ds = data.load_idx_images(*write_mnist_like(tmp_path, images, np.array([0, 9], np.uint8), compress=True))
    assert ds.x[1, 5] == 1.0 and ds.x.sum() == 1.0


def test_idx_bad_magic_and_truncation():
    with pytest.raises(BadMagic):
        data.parse_idx(idx_bytes(0x00000802, (1,), [0]), data.IDX_IMAGES_MAGIC)
    with pytest.raises(TruncatedFile):
        data.parse_idx(b"\x00\x00", data.IDX_IMAGES_MAGIC)
    with pytest.raises(TruncatedFile):
        data.parse_idx(idx_bytes(data.IDX_IMAGES_MAGIC, (2, 2, 2), [0] * 7), data.IDX_IMAGES_MAGIC)


# split


def hundred_rows():
    return data.Dataset(np.arange(100.0)[:, None], np.zeros((100, 1)), np.zeros(100, np.int8))


def test_split_counts_and_determinism():
    a = data.split(hundred_rows(), 0.10, seed=4)
    assert a.counts() == {"train": 90, "val": 10, "test": 0}
    assert np.array_equal(a.split, data.split(hundred_rows(), 0.10, seed=4).split)
    assert not np.array_equal(a.split, data.split(hundred_rows(), 0.10, seed=5).split)


def test_split_leaves_test_rows_alone():
    labels = np.zeros(100, np.int8)
    labels[80:] = data.TEST
    ds = data.Dataset(np.zeros((100, 1)), np.zeros((100, 1)), labels)
    out = data.split(ds, 0.25, seed=0)
    assert np.all(out.split[80:] == data.TEST)
    assert out.counts() == {"train": 60, "val": 20, "test": 20}


def test_split_zero_fraction():
    assert data.split(hundred_rows(), 0.0).counts()["val"] == 0


# cache


def test_cache_round_trip_is_bit_exact(tmp_path):
    src = write(tmp_path / "a.csv", ["0.1,a,x", "0.7,?,y", "0.3,b,x"])
    ds = data.load_delimited(src, ["continuous", "categorical", "categorical"], 2)
    ds = data.split(ds, 0.34, 1)
    data.save_dataset(tmp_path / "c.npz", ds)
    back = data.load_dataset(tmp_path / "c.npz")
    assert back.x.tobytes() == ds.x.tobytes()
    assert back.t.tobytes() == ds.t.tobytes()
    assert np.array_equal(back.split, ds.split)
    assert back.feature_meta == ds.feature_meta and back.classes == ds.classes


def test_cache_rejects_foreign_files(tmp_path):
    np.savez(tmp_path / "f.npz", x=np.zeros(2))
    with pytest.raises(SchemaMismatch):
        data.load_dataset(tmp_path / "f.npz")
    with pytest.raises(DatasetMissing):
        data.load_dataset(tmp_path / "none.npz")


# benchmark registry


def test_benchmark_registry_errors(tmp_path):
    with pytest.raises(KeyError):
        data.load_benchmark("cifar", root=tmp_path)
    with pytest.raises(DatasetMissing):
        data.load_benchmark("letter", root=tmp_path)
    with pytest.raises(DatasetMissing):
        data.load_benchmark("mnist", root=tmp_path)


def test_connect4_synthetic_file_and_cache(tmp_path):
    rng = np.random.default_rng(0)
    root = tmp_path / "connect4"
    root.mkdir()
    rows = [",".join(list(rng.choice(["x", "o", "b"], 42)) + [str(rng.choice(["win", "loss", "draw"]))])
            for _ in range(50)]
    write(root / "connect-4.data", rows)
    ds = data.load_benchmark("connect4", root=tmp_path, cache_dir=tmp_path / "cache")
    assert ds.n_features == 126 and ds.counts()["test"] == 10
    again = data.load_benchmark("connect4", root=tmp_path, cache_dir=tmp_path / "cache")
    assert again.x.tobytes() == ds.x.tobytes()


def load_or_skip(name):
    try:
        return data.load_benchmark(name)
    except DatasetMissing:
        pytest.skip(f"{name} files are not available under {data.default_data_root()}")


@pytest.mark.benchmark
def test_adult_feature_width():
    assert load_or_skip("adult").n_features == 104


@pytest.mark.benchmark
def test_mnist_counts():
    ds = load_or_skip("mnist")
    assert ds.counts()["train"] == 60000 and ds.counts()["test"] == 10000 and ds.n_features == 784

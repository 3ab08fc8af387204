import gzip
import logging
import struct

import numpy as np
import pytest

from vardfs.dataio import (
    Instance,
    batch_pad,
    build_bow_instances,
    load_dataset,
    load_embeddings,
    load_idx_images,
    save_dataset,
    subsample_pixels,
    write_idx,
)
from vardfs.errors import ConfigError, FormatError
from vardfs.setmodel import PredictorNet, SetEncoderConfig, predict

MNIST_DIR = "data/mnist5k"


def write_w2v_binary(path, words, vecs, dim=None):
    dim = vecs.shape[1] if dim is None else dim
    with open(path, "wb") as fh:
        fh.write(f"{len(words)} {dim}\n".encode())
        for w, v in zip(words, vecs):
            fh.write(w.encode() + b" " + v.astype("<f4").tobytes() + b"\n")


class TestIdx:
    def test_roundtrip_and_scaling(self, tmp_path):
        imgs = np.zeros((3, 4, 5), dtype=np.uint8)
        imgs[1, 2, 3] = 255
        imgs[2, 0, 0] = 51
        write_idx(tmp_path / "i.idx", imgs)
        write_idx(tmp_path / "l.idx.gz", np.array([7, 1, 2], dtype=np.uint8))
        x, y = load_idx_images(tmp_path / "i.idx", tmp_path / "l.idx.gz")
        assert x.shape == (3, 4, 5) and x[1, 2, 3] == 1.0 and x[2, 0, 0] == pytest.approx(0.2)
        np.testing.assert_array_equal(y, [7, 1, 2])

    def test_header_is_big_endian(self, tmp_path):
        write_idx(tmp_path / "i.idx", np.zeros((2, 28, 28), dtype=np.uint8))
        raw = (tmp_path / "i.idx").read_bytes()
        assert struct.unpack(">IIII", raw[:16]) == (0x803, 2, 28, 28)

    def test_count_mismatch(self, tmp_path):
        write_idx(tmp_path / "i.idx", np.zeros((3, 2, 2), dtype=np.uint8))
        write_idx(tmp_path / "l.idx", np.zeros(2, dtype=np.uint8))
        with pytest.raises(FormatError):
            load_idx_images(tmp_path / "i.idx", tmp_path / "l.idx")

    def test_bad_magic_and_truncation(self, tmp_path):
        write_idx(tmp_path / "l.idx", np.zeros(2, dtype=np.uint8))
        with pytest.raises(FormatError, match="magic"):
            load_idx_images(tmp_path / "l.idx", tmp_path / "l.idx")
        write_idx(tmp_path / "i.idx", np.zeros((3, 2, 2), dtype=np.uint8))
        raw = (tmp_path / "i.idx").read_bytes()
        (tmp_path / "t.idx").write_bytes(raw[:-3])
        with pytest.raises(FormatError, match="offset"):
            load_idx_images(tmp_path / "t.idx", tmp_path / "l.idx")

    def test_bundled_subset_headers(self):
        # header fields read from the shipped files
        with gzip.open(f"{MNIST_DIR}/train-images-idx3-ubyte.gz") as fh:
            assert struct.unpack(">IIII", fh.read(16)) == (0x803, 4000, 28, 28)
        x, y = load_idx_images(f"{MNIST_DIR}/t10k-images-idx3-ubyte.gz",
                               f"{MNIST_DIR}/t10k-labels-idx1-ubyte.gz")
        assert x.shape == (1000, 28, 28) and y.shape == (1000,) and set(y) == set(range(10))


class TestPixels:
    def test_exhaustive(self):
        img = np.random.default_rng(0).random((28, 28))
        inst = subsample_pixels(img, 784, np.random.default_rng(1))
        assert len(set(inst.feature_ids)) == 784
        for (r, c), v in zip(inst.feature_ids, inst.values[:, 0]):
            assert img[r, c] == v

    def test_corner_descriptors(self):
        inst = subsample_pixels(np.zeros((28, 28)), 784, np.random.default_rng(2))
        z = dict(zip(inst.feature_ids, map(tuple, inst.descriptors)))
        assert z[(0, 0)] == (0.0, 0.0) and z[(27, 27)] == (1.0, 1.0)
        assert np.all((inst.descriptors >= 0) & (inst.descriptors <= 1))

    def test_hundred_pixels_seed_dependent(self):
        img = np.zeros((28, 28))
        a = subsample_pixels(img, 100, np.random.default_rng(3))
        b = subsample_pixels(img, 100, np.random.default_rng(4))
        assert a.size == 100 and set(a.feature_ids) != set(b.feature_ids)
        c = subsample_pixels(img, 100, np.random.default_rng(3))
        assert a.feature_ids == c.feature_ids

    def test_rgb_one_feature_three_values(self):
        img = np.random.default_rng(5).random((4, 4, 3))
        inst = subsample_pixels(img, 5, np.random.default_rng(6))
        assert inst.values.shape == (5, 3)

    def test_too_many(self):
        with pytest.raises(ConfigError):
            subsample_pixels(np.zeros((3, 3)), 10, np.random.default_rng(0))


class TestEmbeddings:
    def test_text(self, tmp_path):
        (tmp_path / "e.txt").write_text("cat 0.1 0.2 0.3\ndog 1 2 3\n")
        table = load_embeddings(tmp_path / "e.txt")
        assert len(table) == 2 and table.dim == 3
        np.testing.assert_array_equal(table["dog"], [1, 2, 3])

    def test_text_with_header_and_duplicate(self, tmp_path, caplog):
        (tmp_path / "e.txt").write_text("2 2\na 1 1\nb 2 2\na 3 3\n")
        with caplog.at_level(logging.WARNING):
            table = load_embeddings(tmp_path / "e.txt")
        np.testing.assert_array_equal(table["a"], [1, 1])
        assert table.duplicates == 1 and "duplicate" in caplog.text

    def test_ragged(self, tmp_path):
        (tmp_path / "e.txt").write_text("a 1 2\nb 1 2 3\n")
        with pytest.raises(FormatError, match="line 2"):
            load_embeddings(tmp_path / "e.txt")

    def test_binary(self, tmp_path):
        vecs = np.random.default_rng(7).normal(size=(3, 4))
        write_w2v_binary(tmp_path / "e.bin", ["x", "y", "z"], vecs)
        table = load_embeddings(tmp_path / "e.bin", "binary-w2v")
        assert table.dim == 4
        np.testing.assert_array_equal(table["y"], vecs[1].astype(np.float32))

    def test_binary_dim_mismatch(self, tmp_path):
        vecs = np.random.default_rng(8).normal(size=(2, 3))
        write_w2v_binary(tmp_path / "e.bin", ["x", "y"], vecs, dim=4)
        with pytest.raises(FormatError):
            load_embeddings(tmp_path / "e.bin", "binary-w2v")

    def test_binary_300_dim(self, tmp_path):
        vecs = np.random.default_rng(9).normal(size=(5, 300))
        write_w2v_binary(tmp_path / "e.bin", list("abcde"), vecs)
        assert load_embeddings(tmp_path / "e.bin", "binary-w2v").dim == 300


class TestBagOfWords:
    @pytest.fixture
    def corpus(self, tmp_path):
        (tmp_path / "c.tsv").write_text("sport\tball ball goal\npolitics\tvote law\nsport\tgoal\n")
        (tmp_path / "e.txt").write_text("ball 1 0\ngoal 0 1\nvote 1 1\nlaw -1 0\nunused 5 5\n")
        return tmp_path / "c.tsv", load_embeddings(tmp_path / "e.txt")

    def test_counts_and_zeros(self, corpus):
        path, emb = corpus
        ds = build_bow_instances(path, emb, 4, np.random.default_rng(0))
        assert ds.n_classes == 2 and ds.meta["classes"] == ["politics", "sport"]
        first = dict(zip(ds[0].feature_ids, ds[0].values[:, 0]))
        assert first == {"ball": 2, "goal": 1, "vote": 0, "law": 0}
        only_goal = dict(zip(ds[2].feature_ids, ds[2].values[:, 0]))
        assert only_goal["goal"] == 1 and sum(only_goal.values()) == 1
        np.testing.assert_array_equal(ds[0].descriptors[ds[0].feature_ids.index("vote")], [1, 1])

    def test_words_without_embedding_filtered(self, tmp_path, corpus):
        path, emb = corpus
        (tmp_path / "c2.tsv").write_text("a\tball zebra\nb\tgoal zebra\n")
        ds = build_bow_instances(tmp_path / "c2.tsv", emb, 2, np.random.default_rng(1))
        assert all("zebra" not in inst.feature_ids for inst in ds)

    def test_empty_vocabulary(self, tmp_path, corpus):
        _, emb = corpus
        (tmp_path / "c3.tsv").write_text("a\tzebra\n")
        with pytest.raises(ConfigError):
            build_bow_instances(tmp_path / "c3.tsv", emb, 1, np.random.default_rng(0))

    def test_log_counts(self, corpus):
        path, emb = corpus
        ds = build_bow_instances(path, emb, 4, np.random.default_rng(0), log_counts=True)
        assert dict(zip(ds[0].feature_ids, ds[0].values[:, 0]))["ball"] == pytest.approx(np.log(3))


def make_instance(rng, d, c=2, label=0):
    return Instance(list(range(d)), rng.normal(size=d), rng.random((d, c)), label)


class TestBatchPad:
    def test_equal_sizes(self):
        rng = np.random.default_rng(0)
        b = batch_pad([make_instance(rng, 4), make_instance(rng, 4)])
        assert b.available.all() and b.values.shape == (2, 4, 1)

    def test_ragged(self):
        rng = np.random.default_rng(1)
        insts = [make_instance(rng, 3), make_instance(rng, 5)]
        b = batch_pad(insts)
        assert b.values.shape[1] == 5
        np.testing.assert_array_equal(b.available[0], [1, 1, 1, 0, 0])
        assert np.all(b.values[0, 3:] == 0) and np.all(b.descriptors[0, 3:] == 0)
        np.testing.assert_array_equal(b.values[1, :, 0], insts[1].values[:, 0])

    def test_oversize(self):
        with pytest.raises(ConfigError):
            batch_pad([make_instance(np.random.default_rng(2), 6)], n_max=5)

    @pytest.mark.parametrize("arch", ["deepsets", "attention"])
    def test_alone_vs_batched(self, arch):
        rng = np.random.default_rng(3)
        net = PredictorNet(SetEncoderConfig(arch, 8, 2, 2), 4, 3, rng)
        insts = [make_instance(rng, d) for d in (3, 6, 2, 5)]
        mask = lambda b: (np.arange(b.values.shape[1]) < 2)[None].repeat(len(b), 0) * b.available  # noqa: E731
        together = batch_pad(insts)
        p_all = predict(net, together.tokens(mask(together)).data, together.available)
        for i, inst in enumerate(insts):
            alone = batch_pad([inst])
            p = predict(net, alone.tokens(mask(alone)).data, alone.available)
            np.testing.assert_allclose(p[0], p_all[i], atol=1e-10, rtol=0)


class TestCache:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(4)
        from vardfs.dataio import image_dataset
        ds = image_dataset(rng.random((3, 6, 6)), np.array([1, 2, 0]), 5, rng)
        save_dataset(tmp_path / "d.npz", ds)
        back = load_dataset(tmp_path / "d.npz")
        assert back.kind == "image" and back.image_shape == (6, 6) and back.n_classes == 10
        for a, b in zip(ds, back):
            assert a.feature_ids == b.feature_ids and a.label == b.label
            np.testing.assert_array_equal(a.values, b.values)
            np.testing.assert_array_equal(a.descriptors, b.descriptors)


class TestSyntheticCorpus:
    def test_round_trip_through_bow_builder(self, tmp_path):
        from vardfs.dataio import write_synthetic_corpus

        indicative = write_synthetic_corpus(tmp_path / "c.tsv", tmp_path / "e.txt",
                                            np.random.default_rng(0), n_docs=50, dim=4)
        emb = load_embeddings(tmp_path / "e.txt")
        assert emb.dim == 4
        data = build_bow_instances(tmp_path / "c.tsv", emb, 10, np.random.default_rng(1))
        assert len(data) == 50
        assert data.meta["classes"] == sorted(indicative)
        words = {w for ws in indicative.values() for w in ws}
        for inst in data:
            own = set(indicative[data.meta["classes"][inst.label]])
            for word, value in zip(inst.feature_ids, inst.values[:, 0]):
                if word in words and word not in own:
                    assert value == 0  # other classes' words never occur

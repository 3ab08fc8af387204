"""Instances with variable feature sets: loading, construction, batching, caching."""

import gzip
import json
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from vardfs.errors import ConfigError, FormatError
from vardfs.setmodel import make_tokens

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DATASET_FORMAT = "vardfs-dataset-v1"


@dataclass
class Instance:
    """One example: its own feature ids, values [d, v], descriptors [d, c] and label."""

    feature_ids: list
    values: np.ndarray
    descriptors: np.ndarray
    label: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        d = len(self.feature_ids)
        if len(self.values) != d or len(self.descriptors) != d:
            raise ValueError(f"instance has {d} ids, {len(self.values)} values, "
                             f"{len(self.descriptors)} descriptors")
        if len(set(self.feature_ids)) != d:
            raise ValueError("feature ids must be distinct")

    @property
    def size(self):
        return len(self.feature_ids)


@dataclass
class Dataset:
    instances: list
    n_classes: int
    kind: str = "generic"
    image_shape: tuple = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def __getitem__(self, i):
        return self.instances[i]

    @property
    def value_dim(self):
        return self.instances[0].values.shape[1]

    @property
    def descriptor_dim(self):
        return self.instances[0].descriptors.shape[1]

    @property
    def token_dim(self):
        return self.value_dim + 1 + self.descriptor_dim

    @property
    def min_size(self):
        return min(inst.size for inst in self.instances)

    def subset(self, indices):
        return Dataset([self.instances[i] for i in indices], self.n_classes, self.kind,
                       self.image_shape, dict(self.meta))


@dataclass
class Batch:
    """Right-padded arrays for a list of instances."""

    values: np.ndarray        # [b, n_max, v]
    descriptors: np.ndarray   # [b, n_max, c]
    available: np.ndarray     # [b, n_max] bool
    labels: np.ndarray        # [b]
    ids: list                 # per row, the feature ids of the real positions

    def tokens(self, mask):
        """Token tensor ``[x * m, m, z]`` for the given (possibly relaxed) mask."""
        return make_tokens(self.values, mask, self.descriptors)

    def __len__(self):
        return len(self.labels)


def batch_pad(instances, n_max=None):
    if not instances:
        raise ConfigError("cannot batch zero instances")
    largest = max(inst.size for inst in instances)
    if n_max is None:
        n_max = largest
    elif largest > n_max:
        raise ConfigError(f"instance of size {largest} exceeds n_max={n_max}")
    b = len(instances)
    v = instances[0].values.shape[1]
    c = instances[0].descriptors.shape[1]
    values = np.zeros((b, n_max, v))
    desc = np.zeros((b, n_max, c))
    avail = np.zeros((b, n_max), dtype=bool)
    for i, inst in enumerate(instances):
        d = inst.size
        values[i, :d] = inst.values
        desc[i, :d] = inst.descriptors
        avail[i, :d] = True
    labels = np.array([inst.label for inst in instances], dtype=np.int64)
    return Batch(values, desc, avail, labels, [list(inst.feature_ids) for inst in instances])


# -- IDX (MNIST layout) ---------------------------------------------------------

def _open_bytes(path):
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _read_idx(path, expected_magic):
    raw = _open_bytes(path)
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated IDX header", offset=len(raw))
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}",
                          offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = header + int(np.prod(dims))
    if len(raw) < need:
        raise FormatError(f"{path}: truncated IDX payload, need {need} bytes, have {len(raw)}",
                          offset=len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=int(np.prod(dims)), offset=header).reshape(dims)


def load_idx_images(images_path, labels_path, limit=None):
    """Read IDX image/label files (optionally gzipped). Pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise FormatError(f"{images_path} has {len(images)} images but {labels_path} has "
                          f"{len(labels)} labels", offset=4)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


def write_idx(path, array):
    """Write a uint8 array in IDX layout; gzip when the name ends with .gz."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    payload = struct.pack(">I", 0x800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    payload += array.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.GzipFile(path, "wb", mtime=0) as fh:
            fh.write(payload)
    else:
        path.write_bytes(payload)


def subsample_pixels(image, count, rng, label=0):
    """Instance made of ``count`` distinct random pixels of an [H, W] or [H, W, 3] image.

    Feature id is ``(row, col)``; the descriptor is the position normalized so
    that corners land exactly on 0 and 1. An RGB pixel is one feature with a
    three-valued value.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if count > h * w:
        raise ConfigError(f"cannot sample {count} pixels from a {h}x{w} image")
    flat = np.sort(rng.choice(h * w, size=count, replace=False))
    rows, cols = np.divmod(flat, w)
    values = image[rows, cols]
    desc = np.stack([rows / max(h - 1, 1), cols / max(w - 1, 1)], axis=1)
    ids = [(int(r), int(c)) for r, c in zip(rows, cols)]
    return Instance(ids, values, desc, int(label))


def image_dataset(images, labels, count, rng, n_classes=10):
    instances = [subsample_pixels(img, count, rng, lab) for img, lab in zip(images, labels)]
    return Dataset(instances, n_classes=n_classes, kind="image", image_shape=tuple(images.shape[1:3]))


# -- embeddings and bag-of-words ------------------------------------------------

@dataclass
class EmbeddingTable:
    vectors: dict
    dim: int
    duplicates: int = 0

    def __contains__(self, word):
        return word in self.vectors

    def __len__(self):
        return len(self.vectors)

    def __getitem__(self, word):
        return self.vectors[word]


def _add_vector(vectors, word, vec, counter):
    if word in vectors:
        counter["dup"] += 1
        return
    vectors[word] = vec


def load_embeddings(path, format="text"):  # noqa: A002
    """Load word vectors from whitespace text or word2vec binary layout.

    The text form may start with a ``count dim`` header line as word2vec's
    text export does. Later duplicates of a word are ignored and counted.
    """
    path = Path(path)
    vectors, counter = {}, Counter()
    if format == "text":
        dim = None
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                parts = line.split()
                if not parts:
                    continue
                if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                    dim = int(parts[1])
                    continue
                vec = np.array(parts[1:], dtype=np.float64)
                if dim is None:
                    dim = len(vec)
                if len(vec) != dim or dim == 0:
                    raise FormatError(f"{path}: line {lineno} has {len(vec)} values, expected {dim}")
                _add_vector(vectors, parts[0], vec, counter)
    elif format == "binary-w2v":
        raw = _open_bytes(path)
        nl = raw.find(b"\n")
        try:
            vocab, dim = (int(x) for x in raw[:nl].split())
        except ValueError:
            raise FormatError(f"{path}: bad word2vec header", offset=0) from None
        pos = nl + 1
        for _ in range(vocab):
            while pos < len(raw) and raw[pos:pos + 1] in (b"\n", b" "):
                pos += 1
            sp = raw.find(b" ", pos)
            if sp < 0:
                raise FormatError(f"{path}: truncated record", offset=pos)
            word = raw[pos:sp].decode("utf-8", errors="replace")
            start = sp + 1
            end = start + 4 * dim
            if end > len(raw):
                raise FormatError(f"{path}: record for {word!r} shorter than dim={dim}", offset=start)
            vec = np.frombuffer(raw[start:end], dtype="<f4").astype(np.float64)
            pos = end
            _add_vector(vectors, word, vec, counter)
        rest = raw[pos:].strip()
        if rest:
            raise FormatError(f"{path}: trailing data after {vocab} records, record length "
                              f"does not match header dim={dim}", offset=pos)
    else:
        raise ConfigError(f"unknown embedding format {format!r}")
    if not vectors:
        raise FormatError(f"{path}: no vectors")
    if counter["dup"]:
        log.warning("%s: %d duplicate words ignored", path, counter["dup"])
    return EmbeddingTable(vectors, dim, counter["dup"])


def read_corpus(path):
    """Rows of ``label<TAB>token token ...``; returns (token lists, label strings)."""
    docs, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise FormatError(f"{path}: line {lineno} lacks a tab after the label")
            label, text = line.split("\t", 1)
            labels.append(label)
            docs.append(text.split())
    return docs, labels


def build_bow_instances(corpus_path, embeddings, sample_count, rng, log_counts=False):
    """Bag-of-words instances whose features are words sampled from the corpus vocabulary.

    Words without an embedding are dropped first. Each document gets its own
    ``sample_count`` words; the value is the word's count in that document
    (zero when absent) and the descriptor is the word's embedding.
    """
    docs, label_names = read_corpus(corpus_path)
    classes = sorted(set(label_names))
    vocab = sorted({w for doc in docs for w in doc if w in embeddings})
    if not vocab:
        raise ConfigError(f"{corpus_path}: no corpus word has an embedding")
    if sample_count > len(vocab):
        raise ConfigError(f"sample_count={sample_count} exceeds filtered vocabulary of {len(vocab)}")
    emb = np.stack([embeddings[w] for w in vocab])
    instances = []
    for doc, name in zip(docs, label_names):
        counts = Counter(doc)
        idx = np.sort(rng.choice(len(vocab), size=sample_count, replace=False))
        vals = np.array([counts.get(vocab[i], 0) for i in idx], dtype=np.float64)
        if log_counts:
            vals = np.log1p(vals)
        instances.append(Instance([vocab[i] for i in idx], vals, emb[idx], classes.index(name)))
    return Dataset(instances, n_classes=len(classes), kind="bow",
                   meta={"classes": classes, "vocab_size": len(vocab)})


# -- dataset cache ----------------------------------------------------------------

def save_dataset(path, dataset):
    sizes = np.array([inst.size for inst in dataset], dtype=np.int64)
    header = {"format": DATASET_FORMAT, "n_classes": dataset.n_classes, "kind": dataset.kind,
              "image_shape": dataset.image_shape, "meta": dataset.meta,
              "ids": [list(inst.feature_ids) for inst in dataset]}
    with open(path, "wb") as fh:
        np.savez(fh, header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8),
                 sizes=sizes,
                 values=np.concatenate([inst.values for inst in dataset]),
                 descriptors=np.concatenate([inst.descriptors for inst in dataset]),
                 labels=np.array([inst.label for inst in dataset], dtype=np.int64))


def load_dataset(path):
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(data["header"].tobytes().decode())
        if header.get("format") != DATASET_FORMAT:
            raise FormatError(f"{path}: unsupported dataset format {header.get('format')!r}")
        bounds = np.concatenate([[0], np.cumsum(data["sizes"])])
        values, desc, labels = data["values"], data["descriptors"], data["labels"]
    instances = []
    for i, ids in enumerate(header["ids"]):
        a, b = bounds[i], bounds[i + 1]
        ids = [tuple(x) if isinstance(x, list) else x for x in ids]
        instances.append(Instance(ids, values[a:b], desc[a:b], int(labels[i])))
    shape = tuple(header["image_shape"]) if header["image_shape"] else None
    return Dataset(instances, header["n_classes"], header["kind"], shape, header["meta"])


# -- synthetic documents ----------------------------------------------------------

def write_synthetic_corpus(corpus_path, embeddings_path, rng, n_docs=400, n_classes=4,
                           indicative_per_class=3, n_neutral=48, doc_length=30, dim=8,
                           indicative_rate=0.15):
    """Write a small labelled corpus plus text embeddings; returns ``{class: indicative words}``.

    Each class owns a few indicative words that only its documents use; the
    rest of every document is drawn from shared neutral words. Embeddings of a
    class's indicative words sit near a class centroid, neutral words are
    scattered, loosely imitating how pretrained embeddings cluster by topic.
    """
    classes = [f"c{i}" for i in range(n_classes)]
    indicative = {c: [f"{c}w{j}" for j in range(indicative_per_class)] for c in classes}
    neutral = [f"n{j}" for j in range(n_neutral)]
    centroids = rng.normal(size=(n_classes, dim)) * 2.0
    vectors = {}
    for ci, c in enumerate(classes):
        for w in indicative[c]:
            vectors[w] = centroids[ci] + 0.3 * rng.normal(size=dim)
    for w in neutral:
        vectors[w] = rng.normal(size=dim)
    with open(corpus_path, "w", encoding="utf-8") as fh:
        for _ in range(n_docs):
            ci = int(rng.integers(n_classes))
            words = []
            for _ in range(doc_length):
                if rng.random() < indicative_rate:
                    words.append(indicative[classes[ci]][rng.integers(indicative_per_class)])
                else:
                    words.append(neutral[rng.integers(n_neutral)])
            fh.write(f"{classes[ci]}\t{' '.join(words)}\n")
    with open(embeddings_path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(vectors)} {dim}\n")
        for w, v in vectors.items():
            fh.write(w + " " + " ".join(f"{x:.6f}" for x in v) + "\n")
    return indicative

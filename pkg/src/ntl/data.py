"""Feature stores, tag and annotation files, preprocessing, and the synthetic corpus.

Feature file layout (all integers little-endian)::

    b"NTLFEAT1"                      8-byte magic
    u32 dim, u64 count
    count records of:
        u16 id_len, id_len bytes UTF-8 id, dim float32

A ``.tsv`` feature file is also accepted: one record per line, the id
followed by ``dim`` decimal floats.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .lemma import normalize_tag

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"NTLFEAT1"
MAX_TAGS = 20


class FormatError(ValueError):
    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


# ----------------------------------------------------------------- features


class FeatureStore:
    """Image ids mapped to rows of a float32 matrix."""

    def __init__(self, ids: Sequence[str], vectors, dim: Optional[int] = None):
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.size == 0:
            vectors = vectors.reshape(0, dim or 0)
        if vectors.ndim != 2 or vectors.shape[0] != len(ids):
            raise ValueError(f"{len(ids)} ids but vectors have shape {vectors.shape}")
        if dim is not None and vectors.shape[1] != dim:
            raise ValueError(f"vectors have dimension {vectors.shape[1]}, expected {dim}")
        finite = np.isfinite(vectors).all(axis=1)
        if not finite.all():
            raise FormatError(f"non-finite feature values for id {ids[int(np.argmin(finite))]!r}")
        self.ids = list(ids)
        self.vectors = vectors
        self._index = {}
        for i, k in enumerate(self.ids):
            self._index.setdefault(k, i)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.ids)

    def __contains__(self, image_id):
        return image_id in self._index

    def index(self, image_id) -> int:
        return self._index[image_id]

    def get(self, image_id) -> np.ndarray:
        return self.vectors[self._index[image_id]]

    def matrix(self, ids: Sequence[str]) -> np.ndarray:
        """float64 rows for ``ids``, in order."""
        return self.vectors[[self._index[i] for i in ids]].astype(np.float64)


def write_features(path, store: FeatureStore):
    path = Path(path)
    if path.suffix == ".tsv":
        with open(path, "w", encoding="utf-8", newline="") as fh:
            for k, v in zip(store.ids, store.vectors):
                fh.write("\t".join([k] + [repr(float(x)) for x in v]) + "\n")
        return
    buf = io.BytesIO()
    buf.write(FEATURE_MAGIC)
    buf.write(struct.pack("<IQ", store.dim, len(store)))
    data = store.vectors.astype("<f4", copy=False)
    for k, row in zip(store.ids, data):
        raw = k.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"image id too long: {k[:40]!r}...")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(row.tobytes())
    path.write_bytes(buf.getvalue())


def _read_feature_tsv(path) -> FeatureStore:
    ids, rows, dim = [], [], None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            try:
                vals = [float(x) for x in parts[1:]]
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
            if dim is None:
                dim = len(vals)
            elif len(vals) != dim:
                raise FormatError(f"{path}:{lineno}: expected {dim} values, got {len(vals)}")
            if not np.all(np.isfinite(vals)):
                raise FormatError(f"{path}:{lineno}: non-finite feature value for id {parts[0]!r}")
            ids.append(parts[0])
            rows.append(vals)
    return FeatureStore(ids, np.array(rows, dtype=np.float32), dim=dim)


def load_features(path) -> FeatureStore:
    path = Path(path)
    if path.suffix == ".tsv":
        return _read_feature_tsv(path)
    raw = path.read_bytes()
    if raw[:8] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}", 0)
    if len(raw) < 20:
        raise FormatError(f"{path}: truncated header", len(raw))
    dim, count = struct.unpack_from("<IQ", raw, 8)
    pos = 20
    nbytes = 4 * dim
    ids = []
    vecs = np.empty((count, dim), dtype=np.float32)
    for i in range(count):
        if pos + 2 > len(raw):
            raise FormatError(f"{path}: truncated record {i}", pos)
        (n,) = struct.unpack_from("<H", raw, pos)
        start = pos
        pos += 2
        if pos + n + nbytes > len(raw):
            raise FormatError(f"{path}: truncated record {i}", start)
        try:
            k = raw[pos : pos + n].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{path}: invalid UTF-8 id in record {i}", pos) from None
        pos += n
        row = np.frombuffer(raw, dtype="<f4", count=dim, offset=pos)
        if not np.all(np.isfinite(row)):
            raise FormatError(f"{path}: non-finite feature value for id {k!r}", pos)
        vecs[i] = row
        ids.append(k)
        pos += nbytes
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes after {count} records", pos)
    return FeatureStore(ids, vecs, dim=dim)


# ----------------------------------------------------------------- tags


@dataclass
class TaggedImage:
    image_id: str
    user_id: str
    tags: list


@dataclass
class ParseReport:
    rows: int = 0
    rejected: list = field(default_factory=list)
    duplicates: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def load_tags(path, report: Optional[ParseReport] = None) -> list:
    """Read ``image_id  user_id  tag1  tag2 ...`` rows, keeping tag order."""
    report = ParseReport() if report is None else report
    images, seen = [], set()
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            report.rows += 1
            cells = line.split("\t")
            if len(cells) < 2 or not cells[0].strip() or not cells[1].strip():
                report.rejected.append(lineno)
                continue
            image_id = cells[0].strip()
            if image_id in seen:
                report.duplicates.append(image_id)
            seen.add(image_id)
            tags = [c.strip() for c in cells[2:] if c.strip()]
            images.append(TaggedImage(image_id, cells[1].strip(), tags))
    return images


def write_tags(path, images):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for im in images:
            fh.write("\t".join([im.image_id, im.user_id] + list(im.tags)) + "\n")


def preprocess_tags(images, max_tags: int = MAX_TAGS, lemmatize: bool = True) -> list:
    """Lowercase, fold plurals, drop repeats (first position wins), keep the first ``max_tags``."""
    out = []
    for im in images:
        kept, seen = [], set()
        for t in im.tags:
            t = normalize_tag(t) if lemmatize else t.strip().lower()
            if t and t not in seen:
                seen.add(t)
                kept.append(t)
        out.append(TaggedImage(im.image_id, im.user_id, kept[:max_tags]))
    return out


@dataclass
class Vocabulary:
    tags: list
    counts: list

    def __len__(self):
        return len(self.tags)

    def __iter__(self):
        return iter(self.tags)

    def index(self) -> dict:
        return {t: i for i, t in enumerate(self.tags)}


def build_vocab(images, min_count: int = 1) -> Vocabulary:
    counts = Counter()
    for im in images:
        counts.update(set(im.tags))
    items = sorted((c, t) for t, c in counts.items() if c >= min_count)
    items.sort(key=lambda ct: (-ct[0], ct[1]))
    return Vocabulary([t for _, t in items], [c for c, _ in items])


def _user_key(user_id: str, seed: int) -> bytes:
    return hashlib.blake2b(f"{seed}:{user_id}".encode("utf-8"), digest_size=16).digest()


def split_by_user(images, test_fraction: float, seed: int = 0):
    """Whole users go to the test split, in seeded-hash order, until it holds ``test_fraction`` of images."""
    if not 0.0 <= test_fraction <= 1.0:
        raise ValueError("test_fraction must lie in [0, 1]")
    per_user = Counter(im.user_id for im in images)
    if 0.0 < test_fraction < 1.0 and len(per_user) < 2:
        raise ValueError("a user split needs at least two users")
    order = sorted(per_user, key=lambda u: _user_key(u, seed))
    target = test_fraction * len(images)
    test_users, n_test = set(), 0
    for u in order:
        if n_test >= target:
            break
        if test_fraction < 1.0 and len(test_users) == len(order) - 1:
            break
        test_users.add(u)
        n_test += per_user[u]
    train = [im for im in images if im.user_id not in test_users]
    test = [im for im in images if im.user_id in test_users]
    return train, test


def label_matrix(images, tags: Sequence[str]) -> np.ndarray:
    """(n_images, n_tags) 0/1 matrix of observed tags."""
    col = {t: j for j, t in enumerate(tags)}
    Y = np.zeros((len(images), len(tags)), dtype=np.uint8)
    for i, im in enumerate(images):
        for t in im.tags:
            j = col.get(t)
            if j is not None:
                Y[i, j] = 1
    return Y


# ----------------------------------------------------------------- annotations


@dataclass
class AnnotatedImage:
    image_id: str
    labels: np.ndarray


class Annotations:
    """Ground-truth label matrix over an evaluation vocabulary."""

    def __init__(self, tags: Sequence[str], image_ids: Sequence[str], labels):
        labels = np.asarray(labels, dtype=np.uint8).reshape(len(image_ids), len(tags))
        if not np.all(labels <= 1):
            raise ValueError("annotation labels must be 0 or 1")
        self.tags = list(tags)
        self.image_ids = list(image_ids)
        self.labels = labels

    def __len__(self):
        return len(self.image_ids)

    def __iter__(self):
        for k, row in zip(self.image_ids, self.labels):
            yield AnnotatedImage(k, row)

    def subset(self, rows) -> "Annotations":
        rows = np.asarray(rows, dtype=np.int64)
        return Annotations(self.tags, [self.image_ids[i] for i in rows], self.labels[rows])

    def select(self, image_ids) -> "Annotations":
        pos = {k: i for i, k in enumerate(self.image_ids)}
        return self.subset([pos[k] for k in image_ids])


def write_annotations(path, ann: Annotations):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\t".join(["image_id"] + ann.tags) + "\n")
        for k, row in zip(ann.image_ids, ann.labels):
            fh.write("\t".join([k] + [str(int(v)) for v in row]) + "\n")


def load_annotations(path) -> Annotations:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty annotation file") from None
        tags = header[1:]
        ids, rows = [], []
        for lineno, cells in enumerate(reader, 2):
            if not cells:
                continue
            if len(cells) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} columns, got {len(cells)}")
            try:
                vals = [int(c) for c in cells[1:]]
            except ValueError:
                raise FormatError(f"{path}:{lineno}: labels must be 0 or 1") from None
            if any(v not in (0, 1) for v in vals):
                raise FormatError(f"{path}:{lineno}: labels must be 0 or 1")
            ids.append(cells[0])
            rows.append(vals)
    return Annotations(tags, ids, np.array(rows, dtype=np.uint8).reshape(len(ids), len(tags)))


# ----------------------------------------------------------------- synthetic corpus


@dataclass
class PositionNoise:
    """Pushes spurious tags toward the end of each image's tag list.

    Supplied tags are ordered by ``u + shift * spurious`` with ``u ~ U(0, 1)``;
    ``shift = 0`` gives a random order.
    """

    shift: float = 1.0


@dataclass
class SynthConfig:
    num_tags: int = 20
    dim: int = 10
    num_images: int = 50000
    pi_star: object = 0.4  # float or one value per tag
    gamma_star: object = 1.0
    prevalence: object = 0.2
    weight_scale: float = 1.0
    num_users: int = 0  # 0 -> num_images // 25
    position_noise: Optional[PositionNoise] = None
    seed: int = 0
    # seed for w*; defaults to ``seed``. Corpora sharing it share w* (prior-shift setups).
    param_seed: Optional[int] = None

    def per_tag(self, value):
        return np.broadcast_to(np.asarray(value, dtype=np.float64), (self.num_tags,)).copy()

    def __post_init__(self):
        if isinstance(self.position_noise, dict):
            self.position_noise = PositionNoise(**self.position_noise)
        errors = []
        for name in ("num_tags", "dim", "num_images"):
            if int(getattr(self, name)) < 1:
                errors.append(f"{name} must be >= 1")
        if errors:
            raise ValueError("; ".join(errors))
        for name in ("pi_star", "gamma_star", "prevalence"):
            try:
                arr = self.per_tag(getattr(self, name))
            except ValueError:
                raise ValueError(f"{name} must be a scalar or have {self.num_tags} entries") from None
            if not np.all((arr > 0) & (arr <= 1)):
                raise ValueError(f"{name} values must lie in (0, 1]")
        if not np.all(self.per_tag(self.prevalence) < 1):
            raise ValueError("prevalence values must lie in (0, 1)")
        if self.weight_scale <= 0:
            raise ValueError("weight_scale must be > 0")
        if self.num_users < 0:
            raise ValueError("num_users must be >= 0")

    def to_dict(self):
        d = asdict(self)
        for k in ("pi_star", "gamma_star", "prevalence"):
            v = d[k]
            d[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return d


@dataclass
class TrueParams:
    tags: list
    w: np.ndarray  # (num_tags, dim)
    b: np.ndarray
    pi: np.ndarray
    gamma: np.ndarray
    config: dict

    def to_json(self) -> str:
        rec = {
            "config": self.config,
            "tags": [
                {"tag": t, "w": self.w[j].tolist(), "b": float(self.b[j]),
                 "pi": float(self.pi[j]), "gamma": float(self.gamma[j])}
                for j, t in enumerate(self.tags)
            ],
        }
        return json.dumps(rec, indent=2, sort_keys=True)


@dataclass
class SynthCorpus:
    features: FeatureStore
    tagged: list
    truth: Annotations
    params: TrueParams

    @property
    def observed(self) -> np.ndarray:
        return label_matrix(self.tagged, self.params.tags)


def synth_tag_names(num_tags):
    width = max(2, len(str(num_tags - 1)))
    return [f"tag{j:0{width}d}" for j in range(num_tags)]


def synth_generate(config: SynthConfig) -> SynthCorpus:
    """Draw a corpus from the noisy-tag model with known parameters."""
    param_seed = config.seed if config.param_seed is None else config.param_seed
    rng_w = np.random.default_rng([param_seed, 0])
    rng = np.random.default_rng([config.seed, 1])
    T, d, n = config.num_tags, config.dim, config.num_images
    tags = synth_tag_names(T)
    pi = config.per_tag(config.pi_star)
    gamma = config.per_tag(config.gamma_star)
    prev = config.per_tag(config.prevalence)

    X = rng.standard_normal((n, d)).astype(np.float32)
    Xd = X.astype(np.float64)
    W = rng_w.standard_normal((T, d)) * config.weight_scale
    S = Xd @ W.T
    B = np.empty(T)
    for j in range(T):
        B[j] = brentq(lambda c: float(expit(S[:, j] + c).mean()) - prev[j], -100.0, 100.0, xtol=1e-12)
    S += B
    Z = rng.random((n, T)) < expit(S)
    U = rng.random((n, T))
    Y = np.where(Z, U < pi, U < 1.0 - gamma)

    num_users = config.num_users or max(1, n // 25)
    width = len(str(num_users - 1))
    users = rng.integers(0, num_users, size=n)
    width_i = max(5, len(str(n - 1)))
    ids = [f"img{i:0{width_i}d}" for i in range(n)]

    order_keys = rng.random((n, T))
    if config.position_noise is not None:
        order_keys = order_keys + config.position_noise.shift * (Y & ~Z)
    tagged = []
    for i in range(n):
        cols = np.flatnonzero(Y[i])
        cols = cols[np.argsort(order_keys[i, cols], kind="stable")]
        tagged.append(TaggedImage(ids[i], f"user{users[i]:0{width}d}", [tags[j] for j in cols]))

    params = TrueParams(tags, W, B, pi, gamma, config.to_dict())
    return SynthCorpus(
        features=FeatureStore(ids, X, dim=d),
        tagged=tagged,
        truth=Annotations(tags, ids, Z.astype(np.uint8)),
        params=params,
    )


def write_corpus(out_dir, corpus: SynthCorpus) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "features": out / "features.bin",
        "tags": out / "tags.tsv",
        "annotations": out / "annotations.tsv",
        "params": out / "true_params.json",
    }
    write_features(paths["features"], corpus.features)
    write_tags(paths["tags"], corpus.tagged)
    write_annotations(paths["annotations"], corpus.truth)
    paths["params"].write_text(corpus.params.to_json() + "\n", encoding="utf-8")
    return paths

"""A set of per-tag models and its binary file format.

Bundle file layout (all integers and floats little-endian)::

    b"NTLMODEL"                  8-byte magic
    u32 version                  currently 1
    u32 dim                      feature dimension
    u32 num_tags
    num_tags x (u32 len, UTF-8)  vocabulary, in model order
    u32 len, UTF-8 JSON          training configuration (sorted keys)
    num_tags x record:
        dim x f64 w, then f64 b, f64 pi, f64 gamma, f64 beta
"""

from __future__ import annotations

import io
import json
import logging
import struct
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import FormatError
from .em import TrainConfig, TrainingError, fit_tag
from .model import TagModel

log = logging.getLogger(__name__)

BUNDLE_MAGIC = b"NTLMODEL"
BUNDLE_VERSION = 1


@dataclass
class ModelBundle:
    dim: int
    models: dict = field(default_factory=dict)  # tag -> TagModel, vocabulary order
    config: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)  # tag -> message, not serialised
    traces: dict = field(default_factory=dict)  # tag -> loss trace, not serialised

    @property
    def vocab(self) -> list:
        return list(self.models)

    def __len__(self):
        return len(self.models)

    def __getitem__(self, tag) -> TagModel:
        return self.models[tag]

    def __contains__(self, tag):
        return tag in self.models

    def params(self, tags=None):
        """Stacked ``(W, offset, pi, gamma)`` arrays; offset is ``b + beta``."""
        tags = self.vocab if tags is None else list(tags)
        ms = [self.models[t] for t in tags]
        W = np.stack([m.w for m in ms]) if ms else np.zeros((0, self.dim))
        off = np.array([m.b + m.beta for m in ms])
        pi = np.array([m.pi for m in ms])
        gamma = np.array([m.gamma for m in ms])
        return W, off, pi, gamma

    def with_models(self, models: dict) -> "ModelBundle":
        return ModelBundle(self.dim, dict(models), dict(self.config))


def _pack_str(buf, s):
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def dumps_bundle(bundle: ModelBundle) -> bytes:
    buf = io.BytesIO()
    buf.write(BUNDLE_MAGIC)
    buf.write(struct.pack("<III", BUNDLE_VERSION, bundle.dim, len(bundle)))
    for t in bundle.models:
        _pack_str(buf, t)
    _pack_str(buf, json.dumps(bundle.config, sort_keys=True))
    for m in bundle.models.values():
        if m.dim != bundle.dim:
            raise ValueError(f"model {m.tag!r} has dimension {m.dim}, bundle has {bundle.dim}")
        buf.write(np.asarray(m.w, dtype="<f8").tobytes())
        buf.write(struct.pack("<4d", m.b, m.pi, m.gamma, m.beta))
    return buf.getvalue()


def loads_bundle(raw: bytes, name="<bytes>") -> ModelBundle:
    if raw[:8] != BUNDLE_MAGIC:
        raise FormatError(f"{name}: bad bundle magic {raw[:8]!r}", 0)
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{name}: truncated bundle", pos)
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    version, dim, ntags = struct.unpack("<III", take(12))
    if version != BUNDLE_VERSION:
        raise FormatError(f"{name}: unsupported bundle version {version}", 8)

    def string():
        (n,) = struct.unpack("<I", take(4))
        return take(n).decode("utf-8")

    tags = [string() for _ in range(ntags)]
    config = json.loads(string())
    models = {}
    for t in tags:
        w = np.frombuffer(take(8 * dim), dtype="<f8").astype(np.float64)
        b, pi, gamma, beta = struct.unpack("<4d", take(32))
        models[t] = TagModel(tag=t, w=w, b=b, pi=pi, gamma=gamma, beta=beta)
    if pos != len(raw):
        raise FormatError(f"{name}: {len(raw) - pos} trailing bytes", pos)
    return ModelBundle(dim=dim, models=models, config=config)


def save_bundle(path, bundle: ModelBundle):
    Path(path).write_bytes(dumps_bundle(bundle))


def load_bundle(path) -> ModelBundle:
    return loads_bundle(Path(path).read_bytes(), name=str(path))


_SHARED = {}


def _init_worker(X, Y, vocab, config):
    _SHARED.update(X=X, Y=Y, vocab=vocab, config=config)


def _fit_column(j):
    X, Y, vocab, config = (_SHARED[k] for k in ("X", "Y", "vocab", "config"))
    try:
        return fit_tag(X, Y[:, j].astype(np.float64), config, tag=vocab[j])
    except TrainingError as e:
        return e


def train_all(X, Y, vocab, config: TrainConfig, threads: int = 1) -> ModelBundle:
    """Train one model per column of the 0/1 label matrix ``Y``.

    Every tag is trained independently from ``config.seed``; a tag that cannot
    be trained is recorded in ``bundle.failures`` and left out. With
    ``threads > 1`` tags are spread over worker processes (the training loop
    holds the interpreter lock); results are identical to a serial run.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y)
    vocab = list(vocab)
    if not vocab:
        raise ValueError("empty vocabulary")
    if Y.shape != (X.shape[0], len(vocab)):
        raise ValueError(f"label matrix has shape {Y.shape}, expected {(X.shape[0], len(vocab))}")

    workers = min(threads, len(vocab))
    if workers > 1:
        methods = multiprocessing.get_all_start_methods()
        ctx = multiprocessing.get_context("fork" if "fork" in methods else "spawn")
        with ProcessPoolExecutor(workers, mp_context=ctx, initializer=_init_worker,
                                 initargs=(X, Y, vocab, config)) as pool:
            results = list(pool.map(_fit_column, range(len(vocab))))
    else:
        _init_worker(X, Y, vocab, config)
        try:
            results = [_fit_column(j) for j in range(len(vocab))]
        finally:
            _SHARED.clear()

    bundle = ModelBundle(dim=X.shape[1], config=config.to_dict())
    for tag, res in zip(vocab, results):
        if isinstance(res, Exception):
            log.warning("tag %r failed: %s", tag, res)
            bundle.failures[tag] = str(res)
        else:
            bundle.models[tag] = res.model
            bundle.traces[tag] = res.trace
    return bundle

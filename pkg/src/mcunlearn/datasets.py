"""Synthetic datasets and the on-disk formats for datasets and sample sets.

Sample file (little-endian)::

    magic   4 bytes  b"MCUS"
    version u16      1
    dim     u32
    count   u32
    seed    u64
    payload count*dim float64, row-major

Dataset file: a header line ``# d=<int> classes=<int|none> n=<int>`` followed
by one line per example, ``f_1,...,f_d,<label or empty>,<id>``; features use
17 significant digits so the text round-trips exactly.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .diffmodel import LabeledDataset
from .samplers import SampleSet, make_rng

MAGIC = b"MCUS"
VERSION = 1
_HEADER = struct.Struct("<4sHIIQ")


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    def __init__(self, expected, actual):
        super().__init__(f"truncated sample file: expected {expected} payload bytes, got {actual}")
        self.expected = expected
        self.actual = actual


class MalformedLineError(FormatError):
    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


def gen_clusters(K=4, n=2000, d=2, sigma=1.0, seed=0):
    """Draw centers ``N(0, sigma^2 I)``, uniform assignments, unit-variance points.

    Labels hold the true assignment; ids are ``0..n-1``.
    """
    if K < 1 or n < 1:
        raise ValueError("need K >= 1 and n >= 1")
    rng = make_rng(seed, 100)
    centers = rng.normal(0.0, 1.0, size=(K, d)) * sigma
    labels = rng.integers(0, K, size=n)
    x = centers[labels] + rng.standard_normal((n, d))
    return LabeledDataset(x, labels, np.arange(n), n_classes=K), centers


def gen_classification(classes=4, n=2000, d=16, separation=3.0, seed=0):
    """Balanced Gaussian blobs centred at ``separation * e_c`` with unit noise."""
    if classes < 2:
        raise ValueError("need at least two classes")
    if classes > d:
        raise ValueError("need classes <= d to place class centres on axes")
    rng = make_rng(seed, 101)
    labels = rng.permutation(np.arange(n) % classes)
    means = np.zeros((classes, d))
    means[np.arange(classes), np.arange(classes)] = separation
    x = means[labels] + rng.standard_normal((n, d))
    return LabeledDataset(x, labels, np.arange(n), n_classes=classes)


def train_test_split(data: LabeledDataset, test_fraction=0.25, seed=0):
    """Random split by id; both halves keep their original ids."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    rng = make_rng(seed, 102)
    perm = rng.permutation(len(data))
    n_test = int(round(len(data) * test_fraction))
    test_ids = np.sort(data.ids[perm[:n_test]])
    train_ids = np.sort(data.ids[perm[n_test:]])
    return data.subset(train_ids), data.subset(test_ids)


def select_from_class(data: LabeledDataset, label, count, seed=None):
    """Pick ``count`` remaining ids with the given label.

    Without a seed the first ``count`` in id order are taken; with a seed the
    class is shuffled first.
    """
    if data.labels is None:
        raise ValueError("dataset has no labels")
    pool = data.ids[(data.labels == label) & ~data.removed]
    if count > pool.size:
        raise ValueError(f"class {label} has only {pool.size} remaining examples")
    if seed is not None:
        pool = make_rng(seed, 103 + int(label)).permutation(pool)
    return np.sort(pool[:count])


def _atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def samples_to_bytes(samples: SampleSet) -> bytes:
    arr = np.ascontiguousarray(samples.samples, dtype="<f8")
    count, dim = arr.shape
    return _HEADER.pack(MAGIC, VERSION, dim, count, samples.seed & ((1 << 64) - 1)) + arr.tobytes()


def samples_from_bytes(blob: bytes, model_id="") -> SampleSet:
    if len(blob) < _HEADER.size:
        if blob[:4] != MAGIC[: len(blob[:4])]:
            raise BadMagicError(f"bad magic {blob[:4]!r}")
        raise TruncatedPayloadError(_HEADER.size, len(blob))
    magic, version, dim, count, seed = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatchError(f"sample file version {version}, expected {VERSION}")
    expected = 8 * dim * count
    payload = blob[_HEADER.size:]
    if len(payload) != expected:
        raise TruncatedPayloadError(expected, len(payload))
    arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(count, dim)
    return SampleSet(arr, model_id=model_id, seed=seed)


def save_samples(path, samples: SampleSet):
    _atomic_write(path, samples_to_bytes(samples))


def load_samples(path, model_id="") -> SampleSet:
    return samples_from_bytes(Path(path).read_bytes(), model_id)


def dataset_to_text(data: LabeledDataset) -> str:
    order = np.argsort(data.ids)
    classes = "none" if data.n_classes is None else str(data.n_classes)
    lines = [f"# d={data.feature_dim} classes={classes} n={len(data)}"]
    for p in order:
        feats = ",".join(format(float(v), ".17g") for v in data.features[p])
        label = "" if data.labels is None else str(int(data.labels[p]))
        lines.append(f"{feats},{label},{int(data.ids[p])}")
    return "\n".join(lines) + "\n"


def _parse_header(line):
    if not line.startswith("#"):
        raise MalformedLineError(1, "missing header")
    fields = {}
    for tok in line[1:].split():
        key, sep, val = tok.partition("=")
        if not sep:
            raise MalformedLineError(1, f"bad header token {tok!r}")
        fields[key] = val
    try:
        d = int(fields["d"])
        n = int(fields["n"])
        classes = None if fields["classes"] == "none" else int(fields["classes"])
    except (KeyError, ValueError) as exc:
        raise MalformedLineError(1, f"bad header {line!r}") from exc
    return d, classes, n


def dataset_from_text(text: str) -> LabeledDataset:
    lines = text.splitlines()
    if not lines:
        raise MalformedLineError(1, "empty dataset file")
    d, classes, n = _parse_header(lines[0])
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != n:
        raise MalformedLineError(len(lines), f"header says n={n}, found {len(body)} rows")
    x = np.empty((n, d))
    labels = np.empty(n, dtype=np.int64)
    ids = np.empty(n, dtype=np.int64)
    has_label = None
    for i, line in enumerate(body):
        lineno = i + 2
        parts = line.split(",")
        if len(parts) != d + 2:
            raise MalformedLineError(lineno, f"expected {d + 2} fields, got {len(parts)}")
        try:
            x[i] = [float(p) for p in parts[:d]]
            ids[i] = int(parts[d + 1])
        except ValueError as exc:
            raise MalformedLineError(lineno, str(exc)) from exc
        labelled = parts[d] != ""
        if has_label is None:
            has_label = labelled
        elif labelled != has_label:
            raise MalformedLineError(lineno, "mixed labelled and unlabelled rows")
        if labelled:
            try:
                labels[i] = int(parts[d])
            except ValueError as exc:
                raise MalformedLineError(lineno, f"bad label {parts[d]!r}") from exc
            if classes is not None and not 0 <= labels[i] < classes:
                raise MalformedLineError(lineno, f"label {labels[i]} outside [0, {classes})")
        if i and ids[i] <= ids[i - 1]:
            raise MalformedLineError(lineno, "ids must be strictly increasing")
    return LabeledDataset(x, labels if has_label else None, ids, n_classes=classes)


def save_dataset(path, data: LabeledDataset):
    _atomic_write(path, dataset_to_text(data).encode())


def load_dataset(path) -> LabeledDataset:
    return dataset_from_text(Path(path).read_text())

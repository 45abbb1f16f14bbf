"""Embedding archives, label tables, trial lists and dataset splits."""

from __future__ import annotations

import logging
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

_HEADER_RE = re.compile(rb"^EMBA v1 dim=(\d+) count=(\d+)$")


class FormatError(ValueError):
    """Malformed input file; ``row`` is 1-based when known."""

    def __init__(self, message: str, row: int | None = None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class EmbeddingArchive:
    """Ordered ``utterance id -> float64 vector`` collection of fixed dim."""

    def __init__(self, dim: int, ids: Sequence[str] = (), vectors=None):
        if dim <= 0:
            raise ValueError("dim must be positive")
        ids = [str(i) for i in ids]
        vectors = np.asarray(vectors if vectors is not None else [], dtype=np.float64)
        if not ids and vectors.size == 0:
            vectors = np.zeros((0, dim))
        if vectors.shape != (len(ids), dim):
            raise ValueError(f"vectors shape {vectors.shape} != ({len(ids)}, {dim})")
        if len(set(ids)) != len(ids):
            seen = set()
            for k, i in enumerate(ids):
                if i in seen:
                    raise FormatError(f"duplicate id {i!r}", row=k + 1)
                seen.add(i)
        if not np.all(np.isfinite(vectors)):
            bad = int(np.argwhere(~np.isfinite(vectors))[0, 0])
            raise FormatError("non-finite value", row=bad + 1)
        self.dim = int(dim)
        self.ids = ids
        self.vectors = vectors
        self._index = {u: k for k, u in enumerate(ids)}

    def __len__(self):
        return len(self.ids)

    def __contains__(self, utt):
        return utt in self._index

    def __eq__(self, other):
        return (isinstance(other, EmbeddingArchive) and self.dim == other.dim
                and self.ids == other.ids and np.array_equal(self.vectors, other.vectors))

    def __repr__(self):
        return f"EmbeddingArchive(dim={self.dim}, n={len(self)})"

    def index(self, utt: str) -> int:
        return self._index[utt]

    def get(self, utt: str) -> np.ndarray:
        return self.vectors[self._index[utt]]

    def matrix(self, ids: Iterable[str]) -> np.ndarray:
        """Stack vectors for ``ids`` in the given order."""
        try:
            rows = [self._index[u] for u in ids]
        except KeyError as exc:
            raise KeyError(f"id {exc.args[0]!r} not in archive") from None
        return self.vectors[rows] if rows else np.zeros((0, self.dim))

    def subset(self, ids: Iterable[str]) -> "EmbeddingArchive":
        ids = list(ids)
        return EmbeddingArchive(self.dim, ids, self.matrix(ids))

    def concat(self, other: "EmbeddingArchive") -> "EmbeddingArchive":
        if other.dim != self.dim:
            raise ValueError("dimension mismatch")
        return EmbeddingArchive(self.dim, self.ids + other.ids,
                                np.vstack([self.vectors, other.vectors]))


def save_archive(archive: EmbeddingArchive, path) -> None:
    """Binary layout: ASCII header ``EMBA v1 dim=D count=N``, then per record a
    u32 id length, the UTF-8 id, a u32 value count and that many float64s
    (all little-endian)."""
    with open(path, "wb") as fh:
        fh.write(f"EMBA v1 dim={archive.dim} count={len(archive)}\n".encode("ascii"))
        for utt, vec in zip(archive.ids, archive.vectors):
            raw = utt.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", archive.dim))
            fh.write(np.ascontiguousarray(vec, dtype="<f8").tobytes())


def load_archive(path) -> EmbeddingArchive:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing header line")
    m = _HEADER_RE.match(data[:nl])
    if m is None:
        raise FormatError(f"{path}: malformed header {data[:nl][:80]!r}")
    dim, count = int(m.group(1)), int(m.group(2))
    if dim <= 0:
        raise FormatError(f"{path}: dim must be positive")
    off = nl + 1
    ids = []
    vectors = np.empty((count, dim))
    vec_bytes = 8 * dim
    for row in range(1, count + 1):
        if off + 4 > len(data):
            raise FormatError(f"{path}: truncated record", row=row)
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        if off + n + 4 > len(data):
            raise FormatError(f"{path}: truncated record", row=row)
        try:
            utt = data[off:off + n].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{path}: id is not valid UTF-8", row=row) from None
        off += n
        (n_values,) = struct.unpack_from("<I", data, off)
        off += 4
        if n_values != dim:
            raise FormatError(f"{path}: {n_values} values, header says dim={dim}", row=row)
        if off + vec_bytes > len(data):
            raise FormatError(f"{path}: record shorter than dim={dim} payload", row=row)
        vec = np.frombuffer(data, dtype="<f8", count=dim, offset=off)
        off += vec_bytes
        if not np.all(np.isfinite(vec)):
            raise FormatError(f"{path}: non-finite value", row=row)
        ids.append(utt)
        vectors[row - 1] = vec
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes after {count} records")
    try:
        return EmbeddingArchive(dim, ids, vectors)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


class LabelTable:
    """Per-utterance categorical labels; ``speaker`` is always a factor."""

    def __init__(self, rows: dict[str, dict[str, str]], factors: Sequence[str] | None = None):
        if factors is None:
            factors = []
            for r in rows.values():
                factors = list(r)
                break
        factors = list(factors)
        if "speaker" not in factors:
            raise ValueError("label table must define a 'speaker' factor")
        for utt, r in rows.items():
            missing = [f for f in factors if f not in r]
            if missing:
                raise ValueError(f"utterance {utt!r} missing labels for {missing}")
        self.factors = factors
        self.rows = {u: {f: str(r[f]) for f in factors} for u, r in rows.items()}

    def __len__(self):
        return len(self.rows)

    def __contains__(self, utt):
        return utt in self.rows

    def __eq__(self, other):
        return isinstance(other, LabelTable) and self.factors == other.factors and self.rows == other.rows

    def label(self, utt: str, factor: str) -> str:
        if factor not in self.factors:
            raise KeyError(f"factor {factor!r} not in label table")
        try:
            return self.rows[utt][factor]
        except KeyError:
            raise KeyError(f"utterance {utt!r} has no labels") from None

    def labels(self, ids: Iterable[str], factor: str) -> list[str]:
        return [self.label(u, factor) for u in ids]

    def classes(self, factor: str, ids: Iterable[str] | None = None) -> list[str]:
        ids = self.rows if ids is None else ids
        return sorted({self.label(u, factor) for u in ids})

    def merged(self, other: "LabelTable") -> "LabelTable":
        if other.factors != self.factors:
            raise ValueError("factor sets differ")
        rows = dict(self.rows)
        rows.update(other.rows)
        return LabelTable(rows, self.factors)


def save_labels(table: LabelTable, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(["utt", *table.factors]) + "\n")
        for utt, r in table.rows.items():
            fh.write("\t".join([utt, *(r[f] for f in table.factors)]) + "\n")


def load_labels(path) -> LabelTable:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("utt\t"):
        raise FormatError(f"{path}: header must start with 'utt<TAB>'")
    factors = lines[0].split("\t")[1:]
    rows = {}
    for k, line in enumerate(lines[1:], start=1):
        if not line:
            continue
        cells = line.split("\t")
        if len(cells) != len(factors) + 1:
            raise FormatError(f"{path}: expected {len(factors) + 1} cells, got {len(cells)}", row=k)
        if cells[0] in rows:
            raise FormatError(f"{path}: duplicate utterance {cells[0]!r}", row=k)
        rows[cells[0]] = dict(zip(factors, cells[1:]))
    return LabelTable(rows, factors)


@dataclass(frozen=True)
class Trial:
    enroll: str
    test: str
    is_target: bool


@dataclass
class TrialList:
    trials: list[Trial] = field(default_factory=list)

    def __len__(self):
        return len(self.trials)

    def __iter__(self):
        return iter(self.trials)

    @property
    def n_target(self) -> int:
        return sum(t.is_target for t in self.trials)

    @property
    def n_nontarget(self) -> int:
        return len(self.trials) - self.n_target


def load_trials(path) -> TrialList:
    trials = []
    for k, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 3:
            raise FormatError(f"{path}: expected '<enroll> <test> target|nontarget'", row=k)
        if parts[2] not in ("target", "nontarget"):
            raise FormatError(f"{path}: third field must be target or nontarget, got {parts[2]!r}", row=k)
        trials.append(Trial(parts[0], parts[1], parts[2] == "target"))
    return TrialList(trials)


def save_trials(trials: TrialList, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in trials:
            fh.write(f"{t.enroll} {t.test} {'target' if t.is_target else 'nontarget'}\n")


# -- splits ------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    seed: int

    def to_json(self) -> dict:
        return {"seed": self.seed, "train": list(self.train_ids),
                "val": list(self.val_ids), "test": list(self.test_ids)}

    @classmethod
    def from_json(cls, obj: dict) -> "SplitSpec":
        return cls(tuple(obj["train"]), tuple(obj["val"]), tuple(obj["test"]), int(obj["seed"]))


def _split_group(ids: list[str], fractions, rng) -> tuple[list, list, list]:
    order = rng.permutation(len(ids))
    n = len(ids)
    n_val = math.floor(n * fractions[1] + 1e-9)
    n_test = math.floor(n * fractions[2] + 1e-9)
    shuffled = [ids[i] for i in order]
    return (shuffled[n_val + n_test:], shuffled[:n_val], shuffled[n_val:n_val + n_test])


def make_splits(ids: Sequence[str], fractions=(0.8, 0.1, 0.1), group_by: str | None = None,
                labels: LabelTable | None = None, seed: int = 0) -> SplitSpec:
    """Random train/val/test partition, optionally applied within each group.

    Validation and test sizes are floored; the remainder goes to train.
    Groups with fewer than 3 members go wholly to train (with a warning).
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be 3 positive values summing to 1, got {fractions}")
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    if group_by is None:
        tr, va, te = _split_group(ids, fractions, rng)
        train, val, test = tr, va, te
    else:
        if labels is None:
            raise ValueError("group_by requires a label table")
        groups: dict[str, list[str]] = {}
        for u in ids:
            groups.setdefault(labels.label(u, group_by), []).append(u)
        for name in sorted(groups):
            members = groups[name]
            if len(members) < 3:
                log.warning("group %r has %d utterances; placing all in train", name, len(members))
                train.extend(members)
                continue
            tr, va, te = _split_group(members, fractions, rng)
            train.extend(tr)
            val.extend(va)
            test.extend(te)
    return SplitSpec(tuple(train), tuple(val), tuple(test), int(seed))


def subsample_balanced(ids: Sequence[str], factor: str, labels: LabelTable, seed: int = 0) -> list[str]:
    """Subsample every class of ``factor`` down to the minority class count."""
    if factor not in labels.factors:
        raise KeyError(f"factor {factor!r} not in label table")
    by_class: dict[str, list[str]] = {}
    for u in ids:
        by_class.setdefault(labels.label(u, factor), []).append(u)
    if not by_class:
        return []
    n_min = min(len(v) for v in by_class.values())
    rng = np.random.default_rng(seed)
    keep = set()
    for cls in sorted(by_class):
        members = by_class[cls]
        pick = rng.choice(len(members), size=n_min, replace=False)
        keep.update(members[i] for i in pick)
    return [u for u in ids if u in keep]

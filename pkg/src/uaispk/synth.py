"""Synthetic factor-entangled embedding corpora with known ground truth.

An utterance of speaker ``s`` with nuisance classes ``c_f`` is::

    x = speaker_strength * A[:, s] + sum_f strength_f * B_f[:, c_f] + noise_sigma * eps

where ``A`` and each ``B_f`` have orthonormal columns.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataio import EmbeddingArchive, LabelTable, Trial, TrialList

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NuisanceFactor:
    name: str
    n_classes: int
    strength: float = 1.0
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError(f"factor {self.name!r} needs at least 2 classes")
        if not np.isfinite(self.strength) or self.strength < 0:
            raise ValueError(f"factor {self.name!r}: strength must be finite and >= 0")
        if self.class_names is not None:
            object.__setattr__(self, "class_names", tuple(self.class_names))
            if len(self.class_names) != self.n_classes or len(set(self.class_names)) != self.n_classes:
                raise ValueError(f"factor {self.name!r}: need {self.n_classes} distinct class names")
        if self.name == "speaker":
            raise ValueError("'speaker' is reserved")

    def classes(self) -> tuple[str, ...]:
        return self.class_names or tuple(f"{self.name}{k}" for k in range(self.n_classes))

    @classmethod
    def parse(cls, text: str) -> "NuisanceFactor":
        """Parse ``name:n_classes:strength``."""
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"factor must look like name:n_classes:strength, got {text!r}")
        return cls(parts[0], int(parts[1]), float(parts[2]))


@dataclass(frozen=True)
class GeneratorSpec:
    dim: int = 512
    n_speakers: int = 50
    utts_per_speaker: int = 40
    nuisance_factors: tuple[NuisanceFactor, ...] = (NuisanceFactor("noise", 4, 1.0),)
    speaker_strength: float = 1.0
    noise_sigma: float = 0.1
    seed: int = 0
    # probability that a nuisance class is tied to the speaker instead of drawn uniformly
    confound: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "nuisance_factors", tuple(self.nuisance_factors))
        if self.dim <= 0 or self.n_speakers <= 0 or self.utts_per_speaker <= 0:
            raise ValueError("dim, n_speakers and utts_per_speaker must be positive")
        if not np.isfinite(self.speaker_strength) or self.speaker_strength <= 0:
            raise ValueError("speaker_strength must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if not 0.0 <= self.confound <= 1.0:
            raise ValueError("confound must lie in [0, 1]")
        names = [f.name for f in self.nuisance_factors]
        if len(set(names)) != len(names):
            raise ValueError("duplicate factor names")

    def factor(self, name: str) -> NuisanceFactor:
        for f in self.nuisance_factors:
            if f.name == name:
                return f
        raise KeyError(f"unknown nuisance factor {name!r}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "GeneratorSpec":
        obj = dict(obj)
        obj["nuisance_factors"] = tuple(NuisanceFactor(**f) for f in obj.get("nuisance_factors", ()))
        return cls(**obj)


@dataclass(frozen=True)
class AugmentSpec:
    copies: int = 1
    perturb_factor: str = "noise"
    perturb_strength: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.copies < 1:
            raise ValueError("copies must be >= 1")
        if self.perturb_strength < 0:
            raise ValueError("perturb_strength must be nonnegative")

    def to_json(self) -> dict:
        return asdict(self)


def _orthonormal_columns(rng: np.random.Generator, dim: int, k: int) -> np.ndarray:
    g = rng.standard_normal((dim, k))
    q, r = np.linalg.qr(g)
    # sign fix makes the factorization unique
    return q * np.sign(np.diag(r))


def mixing_matrices(spec: GeneratorSpec) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Speaker mixing matrix ``A`` and nuisance matrices ``B_f`` for ``spec``.

    All columns of ``[A, B_1, B_2, ...]`` come from one orthonormal basis, so
    the factor subspaces are mutually orthogonal. When the total width
    exceeds ``dim`` that is impossible; each block is then orthonormalized
    on its own (or column-normalized if it alone is wider than ``dim``).
    """
    ss = np.random.SeedSequence(spec.seed)
    mix_seed, _ = ss.spawn(2)
    rng = np.random.default_rng(mix_seed)
    widths = [spec.n_speakers, *(f.n_classes for f in spec.nuisance_factors)]
    if sum(widths) <= spec.dim:
        q = _orthonormal_columns(rng, spec.dim, sum(widths))
        blocks = np.split(q, np.cumsum(widths)[:-1], axis=1)
    else:
        blocks = []
        for k in widths:
            if k <= spec.dim:
                blocks.append(_orthonormal_columns(rng, spec.dim, k))
            else:
                g = rng.standard_normal((spec.dim, k))
                blocks.append(g / np.linalg.norm(g, axis=0))
    a = blocks[0]
    bs = {f.name: b for f, b in zip(spec.nuisance_factors, blocks[1:])}
    return a, bs


def speaker_names(n: int) -> list[str]:
    width = max(3, len(str(n - 1)))
    return [f"spk{k:0{width}d}" for k in range(n)]


def generate_corpus(spec: GeneratorSpec) -> tuple[EmbeddingArchive, LabelTable]:
    total_width = spec.n_speakers + sum(f.n_classes for f in spec.nuisance_factors)
    if spec.dim < total_width:
        log.warning("dim=%d is below the total one-hot width %d; mixing columns will overlap",
                    spec.dim, total_width)
    a, bs = mixing_matrices(spec)
    _, draw_seed = np.random.SeedSequence(spec.seed).spawn(2)
    rng = np.random.default_rng(draw_seed)

    n = spec.n_speakers * spec.utts_per_speaker
    spk_idx = np.repeat(np.arange(spec.n_speakers), spec.utts_per_speaker)
    x = spec.speaker_strength * a[:, spk_idx].T
    class_idx = {}
    for f in spec.nuisance_factors:
        c = rng.integers(0, f.n_classes, size=n)
        if spec.confound > 0:
            tied = rng.random(n) < spec.confound
            c = np.where(tied, spk_idx % f.n_classes, c)
        class_idx[f.name] = c
        x = x + f.strength * bs[f.name][:, c].T
    if spec.noise_sigma > 0:
        x = x + spec.noise_sigma * rng.standard_normal((n, spec.dim))

    spk_names = speaker_names(spec.n_speakers)
    uw = max(3, len(str(spec.utts_per_speaker - 1)))
    ids = [f"{spk_names[s]}-u{u:0{uw}d}" for s in range(spec.n_speakers)
           for u in range(spec.utts_per_speaker)]
    rows = {}
    for i, utt in enumerate(ids):
        row = {"speaker": spk_names[spk_idx[i]]}
        for f in spec.nuisance_factors:
            row[f.name] = f.classes()[class_idx[f.name][i]]
        rows[utt] = row
    factors = ["speaker", *(f.name for f in spec.nuisance_factors)]
    return EmbeddingArchive(spec.dim, ids, x), LabelTable(rows, factors)


def augment_corpus(archive: EmbeddingArchive, labels: LabelTable, spec: AugmentSpec,
                   generator: GeneratorSpec) -> tuple[EmbeddingArchive, LabelTable]:
    """Append ``copies`` perturbed duplicates of every utterance.

    Each copy resamples the class of ``perturb_factor`` and moves the
    vector by ``perturb_strength * strength_f * (B_f[new] - B_f[old])``;
    the speaker component and residual noise are untouched.
    """
    factor = generator.factor(spec.perturb_factor)
    if factor.name not in labels.factors:
        raise KeyError(f"label table has no factor {factor.name!r}")
    if archive.dim != generator.dim:
        raise ValueError("archive dim does not match generator spec")
    _, bs = mixing_matrices(generator)
    b = bs[factor.name]
    names = factor.classes()
    lookup = {c: k for k, c in enumerate(names)}
    rng = np.random.default_rng(spec.seed)

    old = np.array([lookup[labels.label(u, factor.name)] for u in archive.ids], dtype=int)
    new_ids, new_vecs = [], []
    rows = dict(labels.rows)
    for k in range(1, spec.copies + 1):
        new = rng.integers(0, factor.n_classes, size=len(archive))
        delta = spec.perturb_strength * factor.strength * (b[:, new] - b[:, old]).T
        new_vecs.append(archive.vectors + delta)
        for i, utt in enumerate(archive.ids):
            aug = f"{utt}-aug{k}"
            new_ids.append(aug)
            row = dict(labels.rows[utt])
            row[factor.name] = names[new[i]]
            rows[aug] = row
    if new_vecs:
        vecs = np.vstack([archive.vectors, *new_vecs])
    else:
        vecs = archive.vectors
    out_labels = LabelTable({u: rows[u] for u in [*archive.ids, *new_ids]}, labels.factors)
    return EmbeddingArchive(archive.dim, archive.ids + new_ids, vecs), out_labels


def make_trials(labels: LabelTable, ids, n_target: int, n_nontarget: int,
                condition: tuple[str, str] | None = None, seed: int = 0) -> TrialList:
    """Sample target and nontarget trials without replacement.

    Without a condition, pairs are unordered (each utterance pair at most
    once). With ``condition=(factor, class)`` the test side must carry that
    class, and pairs are ordered.
    """
    ids = list(ids)
    spk = np.array(labels.labels(ids, "speaker"))
    n = len(ids)
    if condition is not None:
        factor, cls = condition
        test_ok = np.array([labels.label(u, factor) == cls for u in ids])
    else:
        test_ok = np.ones(n, dtype=bool)
    rng = np.random.default_rng(seed)

    # target candidates enumerated per speaker
    by_spk: dict[str, list[int]] = {}
    for i, s in enumerate(spk):
        by_spk.setdefault(s, []).append(i)
    tgt = []
    for s in sorted(by_spk):
        members = by_spk[s]
        for a in members:
            for b in members:
                if a == b or not test_ok[b]:
                    continue
                if condition is None and a > b:
                    continue
                tgt.append((a, b))
    if n_target > len(tgt):
        raise ValueError(f"only {len(tgt)} target pairs available, {n_target} requested")
    picked_tgt = [tgt[i] for i in np.sort(rng.choice(len(tgt), size=n_target, replace=False))] \
        if n_target else []

    # nontarget candidates are counted, then drawn by rejection
    sizes = {s: len(m) for s, m in by_spk.items()}
    ok_per_spk = {s: int(test_ok[m].sum()) for s, m in by_spk.items()}
    n_ok = int(test_ok.sum())
    if condition is None:
        available = (n * n - sum(v * v for v in sizes.values())) // 2
    else:
        available = sum(sizes[s] * (n_ok - ok_per_spk[s]) for s in sizes)
    if n_nontarget > available:
        raise ValueError(f"only {available} nontarget pairs available, {n_nontarget} requested")
    test_pool = np.flatnonzero(test_ok)
    seen: set[tuple[int, int]] = set()
    non = []
    if n_nontarget and available:
        dense = n_nontarget > available // 2
        if dense:
            cands = [(a, b) for a in range(n) for b in test_pool
                     if spk[a] != spk[b] and (condition is not None or a < b)]
            non = [cands[i] for i in np.sort(rng.choice(len(cands), size=n_nontarget, replace=False))]
        else:
            while len(non) < n_nontarget:
                a = int(rng.integers(n))
                b = int(test_pool[rng.integers(len(test_pool))])
                if spk[a] == spk[b]:
                    continue
                key = (a, b) if condition is not None else (min(a, b), max(a, b))
                if key in seen:
                    continue
                seen.add(key)
                non.append(key)
    trials = [Trial(ids[a], ids[b], True) for a, b in picked_tgt]
    trials += [Trial(ids[a], ids[b], False) for a, b in non]
    return TrialList(trials)

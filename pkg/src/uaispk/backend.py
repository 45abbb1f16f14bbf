"""Verification backend: LDA, two-covariance PLDA, trial scoring, DET/EER."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .dataio import EmbeddingArchive, TrialList

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


def _group(x: np.ndarray, speakers) -> tuple[list, list[np.ndarray]]:
    speakers = np.asarray(speakers)
    names = sorted(set(speakers.tolist()))
    return names, [x[speakers == s] for s in names]


def scatter_matrices(x: np.ndarray, speakers) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Global mean, between-class and within-class scatter (both divided by N)."""
    mean = x.mean(axis=0)
    _, groups = _group(x, speakers)
    d = x.shape[1]
    sb = np.zeros((d, d))
    sw = np.zeros((d, d))
    for g in groups:
        mu = g.mean(axis=0)
        diff = (mu - mean)[:, None]
        sb += len(g) * (diff @ diff.T)
        c = g - mu
        sw += c.T @ c
    return mean, sb / len(x), sw / len(x)


def fisher_objective(projection: np.ndarray, sb: np.ndarray, sw: np.ndarray) -> float:
    """``trace((P Sw P^T)^-1 (P Sb P^T))``; invariant to invertible row mixing of P."""
    pb = projection @ sb @ projection.T
    pw = projection @ sw @ projection.T
    return float(np.trace(np.linalg.solve(pw, pb)))


@dataclass
class LdaModel:
    mean: np.ndarray
    projection: np.ndarray   # [d_out, D]
    eigenvalues: np.ndarray

    @property
    def d_out(self) -> int:
        return self.projection.shape[0]


def fit_lda(embeddings: EmbeddingArchive, speakers, d_out: int) -> LdaModel:
    """Top ``d_out`` generalized eigenvectors of (between, within) scatter."""
    speakers = list(speakers)
    if len(speakers) != len(embeddings):
        raise ValueError("one speaker label per embedding required")
    x = embeddings.vectors
    names, groups = _group(x, speakers)
    if len(names) < 2 or min(len(g) for g in groups) < 2:
        raise ValueError("LDA needs at least 2 speakers with at least 2 utterances each")
    d = x.shape[1]
    if not 1 <= d_out <= min(d, len(names) - 1):
        raise ValueError(f"d_out={d_out} must lie in [1, min(dim={d}, n_speakers-1={len(names) - 1})]")
    mean, sb, sw = scatter_matrices(x, speakers)
    sw = sw + (1e-6 * np.trace(sw) / d) * np.eye(d)
    try:
        evals, evecs = scipy.linalg.eigh(sb, sw)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"within-class scatter is singular after regularization: {exc}") from None
    order = np.argsort(evals)[::-1][:d_out]
    return LdaModel(mean, evecs[:, order].T.copy(), evals[order])


def project_lda(model: LdaModel, embeddings: EmbeddingArchive) -> EmbeddingArchive:
    if embeddings.dim != model.mean.shape[0]:
        raise ValueError(f"archive dim {embeddings.dim} != LDA input dim {model.mean.shape[0]}")
    out = (embeddings.vectors - model.mean) @ model.projection.T
    return EmbeddingArchive(model.d_out, embeddings.ids, out)


def length_normalize(embeddings: EmbeddingArchive) -> EmbeddingArchive:
    x = embeddings.vectors
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return EmbeddingArchive(embeddings.dim, embeddings.ids, x * np.sqrt(x.shape[1]) / norms)


# -- PLDA ---------------------------------------------------------------------

@dataclass
class PldaModel:
    mu: np.ndarray
    between_cov: np.ndarray
    within_cov: np.ndarray
    loglik_history: list[float] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def to_json(self) -> dict:
        return {"mu": self.mu.tolist(), "between_cov": self.between_cov.tolist(),
                "within_cov": self.within_cov.tolist(), "loglik_history": self.loglik_history}


def _logdet(m: np.ndarray) -> float:
    sign, val = np.linalg.slogdet(m)
    if sign <= 0:
        raise np.linalg.LinAlgError("matrix is not positive definite")
    return float(val)


def _speaker_stats(x: np.ndarray, speakers) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-speaker counts, first-order sums and the total second-order sum."""
    names, groups = _group(x, speakers)
    counts = np.array([len(g) for g in groups], dtype=float)
    sums = np.stack([g.sum(axis=0) for g in groups])
    return counts, sums, x.T @ x


def plda_loglik(model: PldaModel, x: np.ndarray, speakers) -> float:
    """Marginal log-likelihood of the data with speaker variables integrated out."""
    counts, sums, second = _speaker_stats(x, speakers)
    return _loglik_from_stats(model, counts, sums, second)


def _loglik_from_stats(model, counts, sums, second) -> float:
    d = model.dim
    mu = model.mu
    n_total = counts.sum()
    b_inv = np.linalg.inv(model.between_cov)
    w_inv = np.linalg.inv(model.within_cov)
    ld_b = _logdet(model.between_cov)
    ld_w = _logdet(model.within_cov)
    # sum over all utterances of z^T W^-1 z with z = x - mu
    centered_second = second - np.outer(sums.sum(axis=0), mu) - np.outer(mu, sums.sum(axis=0)) \
        + n_total * np.outer(mu, mu)
    quad = float(np.sum(w_inv * centered_second))
    total = -0.5 * n_total * d * LOG_2PI - 0.5 * n_total * ld_w - 0.5 * quad
    for n, s in zip(counts, sums):
        f = w_inv @ (s - n * mu)
        prec = b_inv + n * w_inv
        total += -0.5 * ld_b - 0.5 * _logdet(prec) + 0.5 * float(f @ np.linalg.solve(prec, f))
    return total


def _em_step(model: PldaModel, counts, sums, second, floor: float) -> PldaModel:
    d = model.dim
    n_total = counts.sum()
    b_inv = np.linalg.inv(model.between_cov)
    w_inv = np.linalg.inv(model.within_cov)
    k = len(counts)
    # E-step: posterior of each speaker variable given the current mu
    ys = np.empty((k, d))
    covs = np.empty((k, d, d))
    for i, (n, s) in enumerate(zip(counts, sums)):
        cov = np.linalg.inv(b_inv + n * w_inv)
        covs[i] = cov
        ys[i] = cov @ (w_inv @ (s - n * model.mu))
    # M-step (conditional maximization: mu, then covariances)
    mu = (sums.sum(axis=0) - counts @ ys) / n_total
    between = (ys.T @ ys + covs.sum(axis=0)) / k
    # sum_ij (x - mu - y_i)(x - mu - y_i)^T + n_i * cov_i
    r = sums - counts[:, None] * mu[None, :]       # sum_j (x_ij - mu)
    centered_second = second - np.outer(sums.sum(axis=0), mu) - np.outer(mu, sums.sum(axis=0)) \
        + n_total * np.outer(mu, mu)
    within = centered_second - r.T @ ys - ys.T @ r + (ys.T * counts) @ ys \
        + np.einsum("i,ijk->jk", counts, covs)
    within /= n_total
    between = 0.5 * (between + between.T)
    within = 0.5 * (within + within.T)
    within = _floor_eigs(within, floor)
    between = _floor_eigs(between, floor)
    return PldaModel(mu, between, within)


def _floor_eigs(m: np.ndarray, floor: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh(m)
    if vals.min() >= floor:
        return m
    vals = np.maximum(vals, floor)
    out = (vecs * vals) @ vecs.T
    return 0.5 * (out + out.T)


def fit_plda(embeddings: EmbeddingArchive, speakers, em_iters: int = 10,
             init: PldaModel | None = None) -> PldaModel:
    """Two-covariance PLDA ``x = mu + s + e`` fit by EM.

    Initialized from the empirical between/within covariances unless
    ``init`` is given. Eigenvalues are floored at ``1e-10 * trace(total)/d``
    so degenerate data cannot produce a singular covariance.
    """
    speakers = list(speakers)
    if len(speakers) != len(embeddings):
        raise ValueError("one speaker label per embedding required")
    x = embeddings.vectors
    names, groups = _group(x, speakers)
    if len(names) < 2 or min(len(g) for g in groups) < 2:
        raise ValueError("PLDA needs at least 2 speakers with at least 2 utterances each")
    d = x.shape[1]
    total_cov = np.cov(x.T, bias=True).reshape(d, d)
    floor = 1e-10 * max(float(np.trace(total_cov)) / d, 1e-300)
    counts, sums, second = _speaker_stats(x, speakers)
    if init is None:
        mu, sb, sw = scatter_matrices(x, speakers)
        model = PldaModel(mu, _floor_eigs(0.5 * (sb + sb.T), floor), _floor_eigs(0.5 * (sw + sw.T), floor))
    else:
        model = PldaModel(init.mu.copy(), init.between_cov.copy(), init.within_cov.copy())
    history = [_loglik_from_stats(model, counts, sums, second)]
    for _ in range(em_iters):
        model = _em_step(model, counts, sums, second, floor)
        ll = _loglik_from_stats(model, counts, sums, second)
        if not np.isfinite(ll):
            raise FloatingPointError("PLDA EM produced a non-finite log-likelihood; covariances degenerate")
        history.append(ll)
    model.loglik_history = history
    return model


@dataclass
class PldaScorer:
    """Closed-form LLR ``e'Qe + t'Qt + e'Pt + const`` on mean-centered vectors."""
    mu: np.ndarray
    q: np.ndarray
    p: np.ndarray
    const: float

    @classmethod
    def from_model(cls, model: PldaModel) -> "PldaScorer":
        b, w = model.between_cov, model.within_cov
        t = b + w
        t_inv = np.linalg.inv(t)
        schur = t - b @ t_inv @ b
        a = np.linalg.inv(schur)
        q = 0.5 * (t_inv - a)
        p = t_inv @ b @ a
        q = 0.5 * (q + q.T)
        p = 0.5 * (p + p.T)
        const = 0.5 * _logdet(t) - 0.5 * _logdet(schur)
        return cls(model.mu, q, p, const)

    def score_pairs(self, e: np.ndarray, t: np.ndarray) -> np.ndarray:
        e = e - self.mu
        t = t - self.mu
        qe = np.einsum("ij,jk,ik->i", e, self.q, e)
        qt = np.einsum("ij,jk,ik->i", t, self.q, t)
        # symmetric bilinear term computed symmetrically so swapping is exact
        cross = 0.5 * (np.einsum("ij,jk,ik->i", e, self.p, t) + np.einsum("ij,jk,ik->i", t, self.p, e))
        return qe + qt + cross + self.const


@dataclass
class ScoredTrial:
    enroll: str
    test: str
    is_target: bool
    score: float


@dataclass
class ScoreSet:
    trials: list[ScoredTrial]

    def __len__(self):
        return len(self.trials)

    def split(self) -> tuple[np.ndarray, np.ndarray]:
        tar = np.array([t.score for t in self.trials if t.is_target], dtype=float)
        non = np.array([t.score for t in self.trials if not t.is_target], dtype=float)
        return tar, non

    @classmethod
    def from_arrays(cls, tar, non) -> "ScoreSet":
        out = [ScoredTrial(f"t{k}", f"t{k}", True, float(s)) for k, s in enumerate(tar)]
        out += [ScoredTrial(f"n{k}", f"n{k}", False, float(s)) for k, s in enumerate(non)]
        return cls(out)


def score_plda(model: PldaModel, trials: TrialList, enroll: EmbeddingArchive,
               test: EmbeddingArchive | None = None) -> ScoreSet:
    test = enroll if test is None else test
    for arch in (enroll, test):
        if arch.dim != model.dim:
            raise ValueError(f"archive dim {arch.dim} != PLDA dim {model.dim}")
    missing = [t.enroll for t in trials if t.enroll not in enroll] + \
              [t.test for t in trials if t.test not in test]
    if missing:
        raise KeyError(f"trial ids missing from archive: {missing[:5]}")
    scorer = PldaScorer.from_model(model)
    e = enroll.matrix(t.enroll for t in trials)
    t_ = test.matrix(t.test for t in trials)
    scores = scorer.score_pairs(e, t_) if len(trials) else np.zeros(0)
    if not np.all(np.isfinite(scores)):
        raise FloatingPointError("non-finite PLDA score")
    return ScoreSet([ScoredTrial(tr.enroll, tr.test, tr.is_target, float(s))
                     for tr, s in zip(trials, scores)])


def save_scores(scores: ScoreSet, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in scores.trials:
            fh.write(f"{t.enroll} {t.test} {'target' if t.is_target else 'nontarget'} {t.score:.17g}\n")


def load_scores(path) -> ScoreSet:
    out = []
    with open(path, encoding="utf-8") as fh:
        for k, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4 or parts[2] not in ("target", "nontarget"):
                raise ValueError(f"{path}: row {k}: expected '<enroll> <test> target|nontarget <score>'")
            out.append(ScoredTrial(parts[0], parts[1], parts[2] == "target", float(parts[3])))
    return ScoreSet(out)


# -- DET / EER ------------------------------------------------------------------

@dataclass
class DetCurve:
    fpr: np.ndarray
    fnr: np.ndarray
    thresholds: np.ndarray   # accept iff score >= threshold; +inf / -inf at the ends
    eer: float
    n_target: int
    n_nontarget: int

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.fnr.tolist()))

    def summary(self) -> dict:
        return {"eer": self.eer, "n_target": self.n_target, "n_nontarget": self.n_nontarget}


def det_points(tar: np.ndarray, non: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, fnr, thresholds) at every distinct score, plus the two endpoints."""
    scores = np.concatenate([tar, non])
    is_tar = np.concatenate([np.ones(len(tar)), np.zeros(len(non))])
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    lab = is_tar[order]
    # keep the last index of every run of tied scores
    last = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(lab)[last]
    fp = np.cumsum(1 - lab)[last]
    fpr = np.r_[0.0, fp / len(non)]
    fnr = np.r_[1.0, 1.0 - tp / len(tar)]
    thr = np.r_[np.inf, s[last]]
    if fpr[-1] != 1.0 or fnr[-1] != 0.0:
        fpr, fnr, thr = np.r_[fpr, 1.0], np.r_[fnr, 0.0], np.r_[thr, -np.inf]
    return fpr, fnr, thr


def eer_from_points(fpr: np.ndarray, fnr: np.ndarray) -> float:
    """Crossing of fpr == fnr on the polyline through the operating points."""
    diff = fnr - fpr
    # diff starts at +1 and ends at -1 and is non-increasing
    k = int(np.flatnonzero(diff <= 0)[0])
    if diff[k] == 0 or k == 0:
        return float(fpr[k])
    d0, d1 = diff[k - 1], diff[k]
    frac = d0 / (d0 - d1)
    return float(fpr[k - 1] + frac * (fpr[k] - fpr[k - 1]))


def compute_det(scores: ScoreSet) -> DetCurve:
    tar, non = scores.split()
    if len(tar) == 0 or len(non) == 0:
        raise ValueError("DET needs at least one target and one nontarget trial")
    fpr, fnr, thr = det_points(tar, non)
    return DetCurve(fpr, fnr, thr, eer_from_points(fpr, fnr), len(tar), len(non))


def eer_delta(curve_a: DetCurve, curve_b: DetCurve) -> float:
    """Absolute EER difference ``eer_a - eer_b`` (positive: b is better)."""
    return curve_a.eer - curve_b.eer


def is_monotone_staircase(curve: DetCurve) -> bool:
    return bool(np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.fnr) <= 0)
                and curve.fpr[0] == 0.0 and curve.fnr[0] == 1.0
                and curve.fpr[-1] == 1.0 and curve.fnr[-1] == 0.0
                and 0.0 <= curve.eer <= 1.0)


def save_det(curve: DetCurve, csv_path, json_path=None) -> None:
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("fpr,fnr\n")
        for a, b in zip(curve.fpr, curve.fnr):
            fh.write(f"{a:.10g},{b:.10g}\n")
    if json_path is not None:
        with open(json_path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(curve.summary()) + "\n")


# -- pipeline helper --------------------------------------------------------------

@dataclass
class VerificationBackend:
    """LDA (optional) -> optional length norm -> PLDA, fit on training data."""
    lda: LdaModel | None
    plda: PldaModel
    length_norm: bool = False

    @classmethod
    def fit(cls, embeddings: EmbeddingArchive, speakers, lda_dim: int | None,
            plda_iters: int = 10, length_norm: bool = False) -> "VerificationBackend":
        speakers = list(speakers)
        if lda_dim:
            cap = min(embeddings.dim, len(set(speakers)) - 1)
            if lda_dim > cap:
                log.warning("lda_dim %d exceeds rank bound %d; using %d", lda_dim, cap, cap)
                lda_dim = cap
        lda = fit_lda(embeddings, speakers, lda_dim) if lda_dim else None
        x = project_lda(lda, embeddings) if lda is not None else embeddings
        if length_norm:
            x = length_normalize(x)
        return cls(lda, fit_plda(x, speakers, plda_iters), length_norm)

    def transform(self, embeddings: EmbeddingArchive) -> EmbeddingArchive:
        x = project_lda(self.lda, embeddings) if self.lda is not None else embeddings
        return length_normalize(x) if self.length_norm else x

    def score(self, trials: TrialList, embeddings: EmbeddingArchive) -> ScoreSet:
        needed = sorted({t.enroll for t in trials} | {t.test for t in trials})
        missing = [u for u in needed if u not in embeddings]
        if missing:
            raise KeyError(f"trial ids missing from archive: {missing[:5]}")
        return score_plda(self.plda, trials, self.transform(embeddings.subset(needed)))

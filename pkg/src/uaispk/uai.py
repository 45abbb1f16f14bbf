"""Unsupervised adversarial invariance: split an embedding into a speaker
code h1 and a nuisance code h2.

Main networks (encoder, predictor, decoder) minimize speaker cross-entropy
on h1 plus reconstruction of x from [dropout(h1), h2], minus the loss of two
disentanglers that try to predict each code from the other. The
disentanglers are then trained to minimize that same loss.
"""

from __future__ import annotations

import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import nnet
from .dataio import EmbeddingArchive, LabelTable, SplitSpec

log = logging.getLogger(__name__)

NETWORK_NAMES = ("encoder", "predictor", "decoder", "dis_h2_to_h1", "dis_h1_to_h2")
MAIN_GROUP = ("encoder", "predictor", "decoder")
ADV_GROUP = ("dis_h2_to_h1", "dis_h1_to_h2")


@dataclass(frozen=True)
class UaiConfig:
    input_dim: int = 512
    h1_dim: int = 128
    h2_dim: int = 128
    n_speakers: int = 2
    encoder_hidden: tuple[int, ...] = (512,)
    predictor_hidden: tuple[int, ...] = (256,)
    decoder_hidden: tuple[int, ...] = (512,)
    disentangler_hidden: tuple[int, ...] = (128,)
    w_pred: float = 1.0
    w_recon: float = 1.0
    w_adv: float = 1.0
    adv_steps_per_main: int = 5
    keep_prob: float = 0.25
    lr: float = 0.0002
    # learning rate of the disentangler group; None reuses ``lr``
    adv_lr: float | None = 0.005
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    # M2 when True: the caller trains on augmented data
    augmented: bool = False
    code_activation: str = "tanh"
    # disentanglers see per-batch z-scored codes, making their MSE scale-free
    standardize_codes: bool = False

    def __post_init__(self):
        for name in ("encoder_hidden", "predictor_hidden", "decoder_hidden", "disentangler_hidden"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))
        if min(self.input_dim, self.h1_dim, self.h2_dim) <= 0:
            raise ValueError("dimensions must be positive")
        if self.h1_dim + self.h2_dim > 4 * self.input_dim:
            raise ValueError("h1_dim + h2_dim must not exceed 4 * input_dim")
        if self.n_speakers < 2:
            raise ValueError("need at least 2 speakers")
        if min(self.w_pred, self.w_recon, self.w_adv) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.adv_steps_per_main < 1:
            raise ValueError("adv_steps_per_main must be positive")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError("keep_prob must lie in (0, 1]")
        if self.adv_lr is not None and self.adv_lr <= 0:
            raise ValueError("adv_lr must be positive")
        if self.code_activation not in ("tanh", "linear"):
            raise ValueError(f"unknown code_activation {self.code_activation!r}")
        if self.epochs < 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size > 0, lr > 0 required")

    @property
    def adversary_lr(self) -> float:
        return self.lr if self.adv_lr is None else self.adv_lr

    def to_json(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "UaiConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in obj.items() if k in known})


@dataclass
class UaiModel:
    cfg: UaiConfig
    encoder: nnet.Network
    predictor: nnet.Network
    decoder: nnet.Network
    dis_h2_to_h1: nnet.Network
    dis_h1_to_h2: nnet.Network
    main_adam: dict[str, nnet.AdamState]
    adv_adam: dict[str, nnet.AdamState]
    speakers: list[str] = field(default_factory=list)
    epochs_trained: int = 0
    data_fingerprint: str = ""
    # inputs and reconstruction targets are divided by this (train RMS)
    input_scale: float = 1.0

    def networks(self) -> dict[str, nnet.Network]:
        return {name: getattr(self, name) for name in NETWORK_NAMES}


def build_uai(cfg: UaiConfig) -> UaiModel:
    d1, d2 = cfg.h1_dim, cfg.h2_dim
    specs = {
        "encoder": (cfg.input_dim, *cfg.encoder_hidden, d1 + d2),
        "predictor": (d1, *cfg.predictor_hidden, cfg.n_speakers),
        "decoder": (d1 + d2, *cfg.decoder_hidden, cfg.input_dim),
        "dis_h2_to_h1": (d2, *cfg.disentangler_hidden, d1),
        "dis_h1_to_h2": (d1, *cfg.disentangler_hidden, d2),
    }
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(NETWORK_NAMES) + 1)
    nets = {name: nnet.init_network(nnet.NetworkSpec(specs[name]), np.random.default_rng(s))
            for name, s in zip(NETWORK_NAMES, seeds)}
    main_adam = {n: nnet.AdamState.for_network(nets[n], lr=cfg.lr) for n in MAIN_GROUP}
    adv_adam = {n: nnet.AdamState.for_network(nets[n], lr=cfg.adversary_lr) for n in ADV_GROUP}
    return UaiModel(cfg, **nets, main_adam=main_adam, adv_adam=adv_adam)


def encode(model: UaiModel, x: np.ndarray):
    """Encoder output (through the code activation) split into (h1, h2).

    ``x`` is in the model's scaled input space (see ``input_scale``).
    """
    cache, z = nnet.forward(model.encoder, x)
    h = np.tanh(z) if model.cfg.code_activation == "tanh" else z
    d1 = model.cfg.h1_dim
    return cache, h, h[:, :d1], h[:, d1:]


def _code_grad(model: UaiModel, h: np.ndarray, dh: np.ndarray) -> np.ndarray:
    return dh * (1.0 - h * h) if model.cfg.code_activation == "tanh" else dh


def _zscore(h: np.ndarray, eps: float = 1e-5):
    mu = h.mean(axis=0)
    sd = np.sqrt(h.var(axis=0) + eps)
    return (h - mu) / sd, sd


def _zscore_backward(g: np.ndarray, z: np.ndarray, sd: np.ndarray) -> np.ndarray:
    return (g - g.mean(axis=0) - z * (g * z).mean(axis=0)) / sd


def _adversary_losses(model: UaiModel, h1: np.ndarray, h2: np.ndarray):
    """Disentangler losses and gradients w.r.t. (prediction, h1, h2).

    Returns caches, (l21, l12), the upstream gradients for each
    disentangler output, and the direct gradients on h1/h2 coming from
    their use as inputs-to-be-standardized and regression targets.
    """
    if model.cfg.standardize_codes:
        z1, sd1 = _zscore(h1)
        z2, sd2 = _zscore(h2)
    else:
        z1, z2 = h1, h2
    c21, p21 = nnet.forward(model.dis_h2_to_h1, z2)
    c12, p12 = nnet.forward(model.dis_h1_to_h2, z1)
    l21, g21 = nnet.loss_mse(p21, z1)
    l12, g12 = nnet.loss_mse(p12, z2)

    def to_codes(gz1, gz2):
        if not model.cfg.standardize_codes:
            return gz1, gz2
        return _zscore_backward(gz1, z1, sd1), _zscore_backward(gz2, z2, sd2)

    return (c21, c12), (l21, l12), (g21, g12), to_codes


def main_step(model: UaiModel, x: np.ndarray, y: np.ndarray, rng: np.random.Generator,
              update: bool = True) -> dict:
    """One update of encoder/predictor/decoder on a batch; returns the loss terms."""
    cfg = model.cfg
    d1 = cfg.h1_dim
    enc_cache, h, h1, h2 = encode(model, x)

    pred_cache, logits = nnet.forward(model.predictor, h1)
    l_pred, d_logits = nnet.loss_softmax_ce(logits, y)

    mask = nnet.dropout_mask(h1.shape, cfg.keep_prob, rng)
    dec_in = np.concatenate([h1 * mask, h2], axis=1)
    dec_cache, recon = nnet.forward(model.decoder, dec_in)
    l_recon, d_recon = nnet.loss_mse(recon, x)

    (c21, c12), (l21, l12), (g21, g12), to_codes = _adversary_losses(model, h1, h2)
    l_adv = l21 + l12
    total = cfg.w_pred * l_pred + cfg.w_recon * l_recon - cfg.w_adv * l_adv

    g_pred = nnet.backward(model.predictor, pred_cache, cfg.w_pred * d_logits)
    g_dec = nnet.backward(model.decoder, dec_cache, cfg.w_recon * d_recon)
    # the adversary term enters with a negative sign; gradients reach the codes
    # both as disentangler inputs and as regression targets
    g21_in = nnet.backward(model.dis_h2_to_h1, c21, -cfg.w_adv * g21).inputs
    g12_in = nnet.backward(model.dis_h1_to_h2, c12, -cfg.w_adv * g12).inputs
    adv_h1, adv_h2 = to_codes(g12_in + cfg.w_adv * g21, g21_in + cfg.w_adv * g12)
    dh1 = g_pred.inputs + g_dec.inputs[:, :d1] * mask + adv_h1
    dh2 = g_dec.inputs[:, d1:] + adv_h2
    dz = _code_grad(model, h, np.concatenate([dh1, dh2], axis=1))
    g_enc = nnet.backward(model.encoder, enc_cache, dz)

    losses = {"main": total, "pred": l_pred, "recon": l_recon, "adv_h2_to_h1": l21,
              "adv_h1_to_h2": l12, "adv": l_adv,
              "pred_acc": float(np.mean(np.argmax(logits, axis=1) == y))}
    if not np.isfinite(total):
        raise FloatingPointError(f"non-finite main loss: {losses}")
    if update:
        for name, g in (("encoder", g_enc), ("predictor", g_pred), ("decoder", g_dec)):
            nnet.adam_step(getattr(model, name), g, model.main_adam[name])
    return losses


def adversary_step(model: UaiModel, x: np.ndarray, update: bool = True) -> float:
    """One update of both disentanglers; encoder output is held fixed."""
    _, _, h1, h2 = encode(model, x)
    (c21, c12), (l21, l12), (g21, g12), _ = _adversary_losses(model, h1, h2)
    loss = l21 + l12
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite adversary loss {loss}")
    if update:
        nnet.adam_step(model.dis_h2_to_h1, nnet.backward(model.dis_h2_to_h1, c21, g21),
                       model.adv_adam["dis_h2_to_h1"])
        nnet.adam_step(model.dis_h1_to_h2, nnet.backward(model.dis_h1_to_h2, c12, g12),
                       model.adv_adam["dis_h1_to_h2"])
    return loss


@dataclass
class EpochRecord:
    epoch: int
    main: float
    pred: float
    recon: float
    adv: float
    adv_h2_to_h1: float
    adv_h1_to_h2: float
    adversary_objective: float
    heldout_speaker_acc: float

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self.records]


def archive_fingerprint(archive: EmbeddingArchive) -> str:
    h = hashlib.sha256()
    h.update(f"{archive.dim}:{len(archive)}\n".encode())
    for utt in archive.ids:
        h.update(utt.encode("utf-8") + b"\0")
    h.update(np.ascontiguousarray(archive.vectors, dtype="<f8").tobytes())
    return h.hexdigest()


def speaker_accuracy(model: UaiModel, archive: EmbeddingArchive, labels: LabelTable, ids) -> float:
    ids = [u for u in ids if labels.label(u, "speaker") in set(model.speakers)]
    if not ids:
        return float("nan")
    index = {s: k for k, s in enumerate(model.speakers)}
    y = np.array([index[s] for s in labels.labels(ids, "speaker")])
    _, _, h1, _ = encode(model, archive.matrix(ids) / model.input_scale)
    _, logits = nnet.forward(model.predictor, h1)
    return float(np.mean(np.argmax(logits, axis=1) == y))


def train_uai(model: UaiModel, archive: EmbeddingArchive, labels: LabelTable, split: SplitSpec,
              cfg: UaiConfig | None = None,
              on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainLog:
    """Alternating minimax training over the train split.

    Per mini-batch: one main step, then ``adv_steps_per_main`` disentangler
    steps on freshly drawn train batches.
    """
    cfg = cfg or model.cfg
    if archive.dim != cfg.input_dim:
        raise ValueError(f"archive dim {archive.dim} != input_dim {cfg.input_dim}")
    train_ids = list(split.train_ids)
    if not train_ids:
        raise ValueError("empty train split")
    speakers = labels.labels(train_ids, "speaker")
    if not model.speakers:
        model.speakers = sorted(set(speakers))
    if len(model.speakers) != cfg.n_speakers:
        raise ValueError(f"model predicts {cfg.n_speakers} speakers, data has {len(model.speakers)}")
    index = {s: k for k, s in enumerate(model.speakers)}
    unknown = sorted(set(speakers) - set(index))
    if unknown:
        raise KeyError(f"speakers not known to the model: {unknown[:5]}")
    x_all = archive.matrix(train_ids)
    if model.epochs_trained == 0 and cfg.epochs > 0:
        model.input_scale = float(np.sqrt(np.mean(x_all ** 2))) or 1.0
    x_all = x_all / model.input_scale
    y_all = np.array([index[s] for s in speakers])
    heldout = list(split.val_ids) or list(split.test_ids) or train_ids
    model.data_fingerprint = archive_fingerprint(archive)

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, model.epochs_trained, 1]))
    log_ = TrainLog()
    n = len(train_ids)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        sums: dict[str, float] = {}
        adv_obj = 0.0
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            losses = main_step(model, x_all[idx], y_all[idx], rng)
            for k, v in losses.items():
                sums[k] = sums.get(k, 0.0) + v
            for _ in range(cfg.adv_steps_per_main):
                adv_idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
                adv_obj += adversary_step(model, x_all[adv_idx])
            n_batches += 1
        model.epochs_trained += 1
        rec = EpochRecord(
            epoch=model.epochs_trained,
            main=sums["main"] / n_batches,
            pred=sums["pred"] / n_batches,
            recon=sums["recon"] / n_batches,
            adv=sums["adv"] / n_batches,
            adv_h2_to_h1=sums["adv_h2_to_h1"] / n_batches,
            adv_h1_to_h2=sums["adv_h1_to_h2"] / n_batches,
            adversary_objective=adv_obj / (n_batches * cfg.adv_steps_per_main),
            heldout_speaker_acc=speaker_accuracy(model, archive, labels, heldout),
        )
        log_.records.append(rec)
        log.debug("epoch %d: %s", rec.epoch, rec)
        if on_epoch is not None:
            on_epoch(rec)
    return log_


def extract_embeddings(model: UaiModel, archive: EmbeddingArchive,
                       chunk: int = 4096) -> tuple[EmbeddingArchive, EmbeddingArchive]:
    """Noise-free (h1, h2) archives in input order."""
    cfg = model.cfg
    if archive.dim != cfg.input_dim:
        raise ValueError(f"archive dim {archive.dim} != model input dim {cfg.input_dim}")
    parts = [encode(model, archive.vectors[s:s + chunk] / model.input_scale)[1]
             for s in range(0, len(archive), chunk)]
    h = np.vstack(parts) if parts else np.zeros((0, cfg.h1_dim + cfg.h2_dim))
    return (EmbeddingArchive(cfg.h1_dim, archive.ids, h[:, :cfg.h1_dim]),
            EmbeddingArchive(cfg.h2_dim, archive.ids, h[:, cfg.h1_dim:]))


def reconstruct(model: UaiModel, archive: EmbeddingArchive) -> EmbeddingArchive:
    """Decoder output on the clean codes [h1, h2]."""
    h1, h2 = extract_embeddings(model, archive)
    if len(archive) == 0:
        return EmbeddingArchive(model.cfg.input_dim)
    _, out = nnet.forward(model.decoder, np.concatenate([h1.vectors, h2.vectors], axis=1))
    return EmbeddingArchive(model.cfg.input_dim, archive.ids, out * model.input_scale)


def reconstruction_mse(model: UaiModel, archive: EmbeddingArchive) -> float:
    return float(np.mean((reconstruct(model, archive).vectors - archive.vectors) ** 2))


# -- checkpoints ---------------------------------------------------------------

def save_uai(model: UaiModel, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, net in model.networks().items():
        adam = model.main_adam.get(name) or model.adv_adam.get(name)
        nnet.save_network(net, directory / f"{name}.nnet", step_count=adam.step_count, seed=model.cfg.seed)
    manifest = {
        "format": "UAI v1",
        "cfg": model.cfg.to_json(),
        "epochs": model.epochs_trained,
        "seed": model.cfg.seed,
        "data_fingerprint": model.data_fingerprint,
        "speakers": model.speakers,
        "input_scale": model.input_scale,
        "networks": {name: f"{name}.nnet" for name in NETWORK_NAMES},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_uai(directory) -> UaiModel:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    cfg = UaiConfig.from_json(manifest["cfg"])
    model = build_uai(cfg)
    for name in NETWORK_NAMES:
        net, header = nnet.load_network(directory / manifest["networks"][name])
        expected = getattr(model, name).spec.layer_dims
        if net.spec.layer_dims != expected:
            raise ValueError(f"{name}: checkpoint dims {net.spec.layer_dims} != config {expected}")
        setattr(model, name, net)
        group = model.main_adam if name in MAIN_GROUP else model.adv_adam
        lr = cfg.lr if name in MAIN_GROUP else cfg.adversary_lr
        group[name] = nnet.AdamState.for_network(net, lr=lr)
        group[name].step_count = int(header.get("step_count", 0))
    model.speakers = list(manifest.get("speakers", []))
    model.epochs_trained = int(manifest.get("epochs", 0))
    model.data_fingerprint = manifest.get("data_fingerprint", "")
    model.input_scale = float(manifest.get("input_scale", 1.0))
    return model

"""Command-line front end.

Every command takes ``-o/--out`` (all files land there), ``--seed``,
``--config`` (a JSON object keyed by option dest; explicit flags win) and
``--log-json``. Each run writes ``<command>.manifest.json`` recording the
normalized argv, resolved options, input hashes and output names, so
``uaispk rerun MANIFEST -o DIR`` reproduces it.

Exit codes: 0 success, 1 runtime or I/O failure (JSON error on stderr),
2 usage.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, backend, dataio, plotting, probe, synth, uai

log = logging.getLogger("uaispk")

OUT_TOKEN = "{out}"


class CliError(Exception):
    """Runtime failure reported as exit code 1."""


# -- helpers ---------------------------------------------------------------------

def file_sha256(path) -> str:
    path = Path(path)
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(q for q in path.rglob("*") if q.is_file()):
            h.update(p.relative_to(path).as_posix().encode() + b"\0")
            h.update(file_sha256(p).encode())
        return h.hexdigest()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (tuple, set)):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n",
                          encoding="utf-8")


def normalize_argv(argv: list[str]) -> list[str]:
    """Replace the output directory with a placeholder so manifests are relocatable."""
    out = []
    skip = False
    for a in argv:
        if skip:
            out.append(OUT_TOKEN)
            skip = False
        elif a in ("-o", "--out"):
            out.append(a)
            skip = True
        elif a.startswith("--out="):
            out.append("--out=" + OUT_TOKEN)
        elif a.startswith("-o") and len(a) > 2:
            out.append("-o" + OUT_TOKEN)
        else:
            out.append(a)
    return out


class Run:
    """Bookkeeping for one command invocation."""

    def __init__(self, args: argparse.Namespace, argv: list[str]):
        self.args = args
        self.argv = argv
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.extra: dict = {}
        self.manifest_stem = args.command

    def input(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise CliError(f"input not found: {path}")
        self.inputs[str(path)] = file_sha256(path)
        return path

    def output(self, name: str) -> Path:
        if Path(name).name != name:
            raise CliError(f"output name must be a plain file name: {name!r}")
        if name not in self.outputs:
            self.outputs.append(name)
        return self.out / name

    def emit(self, obj: dict) -> None:
        if self.args.log_json:
            print(json.dumps(obj, sort_keys=True, default=_json_default), flush=True)

    def options(self) -> dict:
        skip = {"func", "out", "config", "log_json"}
        return {k: v for k, v in sorted(vars(self.args).items()) if k not in skip}

    def write_manifest(self) -> Path:
        name = f"{self.manifest_stem}.manifest.json"
        path = self.output(name)
        write_json(path, {
            "tool": "uaispk",
            "version": __version__,
            "command": self.args.command,
            "argv": normalize_argv(self.argv),
            "options": self.options(),
            "seed": self.args.seed,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": sorted(self.outputs),
            **self.extra,
        })
        return path


def _load_split(run: Run, path) -> dataio.SplitSpec:
    with open(run.input(path), encoding="utf-8") as fh:
        return dataio.SplitSpec.from_json(json.load(fh))


def _split_ids(split: dataio.SplitSpec, part: str) -> list[str]:
    if part == "all":
        return [*split.train_ids, *split.val_ids, *split.test_ids]
    return list({"train": split.train_ids, "val": split.val_ids, "test": split.test_ids}[part])


def _load_generator(run: Run, path) -> synth.GeneratorSpec:
    with open(run.input(path), encoding="utf-8") as fh:
        obj = json.load(fh)
    # accept either a bare spec or a synth manifest
    if "generator" in obj:
        obj = obj["generator"]
    return synth.GeneratorSpec.from_json(obj)


def _seeds(seed: int, n: int) -> list[int]:
    """Independent per-module seeds derived from one user seed."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


# -- commands --------------------------------------------------------------------

def cmd_synth(run: Run) -> None:
    a = run.args
    factors = tuple(synth.NuisanceFactor.parse(f) for f in (a.factor or ["noise:4:1.0"]))
    spec = synth.GeneratorSpec(dim=a.dim, n_speakers=a.speakers, utts_per_speaker=a.utts,
                               nuisance_factors=factors, speaker_strength=a.speaker_strength,
                               noise_sigma=a.noise_sigma, seed=a.seed, confound=a.confound)
    archive, labels = synth.generate_corpus(spec)
    dataio.save_archive(archive, run.output("embeddings.emb"))
    dataio.save_labels(labels, run.output("labels.tsv"))
    run.extra["generator"] = spec.to_json()
    run.emit({"event": "synth", "utterances": len(archive), "dim": archive.dim})


def cmd_augment(run: Run) -> None:
    a = run.args
    archive = dataio.load_archive(run.input(a.archive))
    labels = dataio.load_labels(run.input(a.labels))
    gen = _load_generator(run, a.generator)
    if a.split:
        archive = archive.subset(_split_ids(_load_split(run, a.split), a.part))
    spec = synth.AugmentSpec(a.copies, a.perturb_factor, a.perturb_strength, a.seed)
    out, out_labels = synth.augment_corpus(archive, labels, spec, gen)
    if a.only_copies:
        keep = out.ids[len(archive):]
        out = out.subset(keep)
        out_labels = dataio.LabelTable({u: out_labels.rows[u] for u in keep}, out_labels.factors)
    dataio.save_archive(out, run.output("augmented.emb"))
    dataio.save_labels(out_labels, run.output("augmented.tsv"))
    run.extra["augment"] = spec.to_json()
    run.emit({"event": "augment", "utterances": len(out)})


def cmd_split(run: Run) -> None:
    a = run.args
    labels = dataio.load_labels(run.input(a.labels))
    ids = list(labels.rows)
    if a.archive:
        ids = dataio.load_archive(run.input(a.archive)).ids
    split = dataio.make_splits(ids, tuple(a.fractions), a.group_by or None, labels, a.seed)
    write_json(run.output("split.json"), split.to_json())
    run.emit({"event": "split", "train": len(split.train_ids), "val": len(split.val_ids),
              "test": len(split.test_ids)})


def cmd_make_trials(run: Run) -> None:
    a = run.args
    labels = dataio.load_labels(run.input(a.labels))
    if a.archive:
        ids = dataio.load_archive(run.input(a.archive)).ids
    elif a.split:
        ids = _split_ids(_load_split(run, a.split), a.part)
    else:
        ids = list(labels.rows)
    condition = None
    if a.condition:
        factor, sep, cls = a.condition.partition("=")
        if not sep:
            raise CliError("--condition must look like factor=class")
        condition = (factor, cls)
    trials = synth.make_trials(labels, ids, a.targets, a.nontargets, condition, a.seed)
    dataio.save_trials(trials, run.output("trials.txt"))
    run.emit({"event": "make-trials", "target": trials.n_target, "nontarget": trials.n_nontarget})


def _uai_config(a, input_dim: int, n_speakers: int, seed: int) -> uai.UaiConfig:
    return uai.UaiConfig(
        input_dim=input_dim, h1_dim=a.h1_dim, h2_dim=a.h2_dim, n_speakers=n_speakers,
        encoder_hidden=tuple(a.encoder_hidden), predictor_hidden=tuple(a.predictor_hidden),
        decoder_hidden=tuple(a.decoder_hidden), disentangler_hidden=tuple(a.disentangler_hidden),
        w_pred=a.w_pred, w_recon=a.w_recon, w_adv=a.w_adv, adv_steps_per_main=a.adv_steps,
        keep_prob=a.keep_prob, lr=a.lr, adv_lr=a.adv_lr, epochs=a.epochs, batch_size=a.batch_size,
        seed=seed, augmented=a.augment_copies > 0, code_activation=a.code_activation,
        standardize_codes=a.standardize_codes)


def cmd_train_uai(run: Run) -> None:
    a = run.args
    archive = dataio.load_archive(run.input(a.archive))
    labels = dataio.load_labels(run.input(a.labels))
    split_seed, aug_seed, model_seed = _seeds(a.seed, 3)
    if a.split:
        split = _load_split(run, a.split)
    else:
        split = dataio.make_splits(archive.ids, (0.8, 0.1, 0.1), "speaker", labels, split_seed)
        write_json(run.output("split.json"), split.to_json())
    if a.augment_copies > 0:
        if not a.generator:
            raise CliError("--augment-copies needs --generator")
        gen = _load_generator(run, a.generator)
        spec = synth.AugmentSpec(a.augment_copies, a.perturb_factor, a.perturb_strength, aug_seed)
        train_aug, aug_labels = synth.augment_corpus(archive.subset(split.train_ids), labels, spec, gen)
        copies = train_aug.ids[len(split.train_ids):]
        archive = archive.concat(train_aug.subset(copies))
        labels = labels.merged(aug_labels)
        split = dataio.SplitSpec(tuple(train_aug.ids), split.val_ids, split.test_ids, split.seed)
        run.extra["augment"] = spec.to_json()
    n_speakers = len(labels.classes("speaker", split.train_ids))
    cfg = _uai_config(a, archive.dim, n_speakers, model_seed)
    model = uai.build_uai(cfg)
    log_path = run.output("train_log.jsonl")
    with open(log_path, "w", encoding="utf-8") as fh:
        def on_epoch(rec: uai.EpochRecord) -> None:
            line = json.dumps(rec.to_json(), sort_keys=True)
            fh.write(line + "\n")
            if a.log_json:
                print(line, flush=True)
            else:
                log.info("epoch %d  pred %.4f  recon %.4f  adv %.4f  heldout-acc %.3f",
                         rec.epoch, rec.pred, rec.recon, rec.adv, rec.heldout_speaker_acc)

        train_log = uai.train_uai(model, archive, labels, split, on_epoch=on_epoch)
    model_dir = run.output("model")
    uai.save_uai(model, model_dir)
    plotting.plot_training_log(train_log, run.output("training.png"))
    run.extra["uai_config"] = cfg.to_json()


def cmd_extract(run: Run) -> None:
    a = run.args
    model = uai.load_uai(run.input(a.model))
    archive = dataio.load_archive(run.input(a.archive))
    h1, h2 = uai.extract_embeddings(model, archive)
    if a.prefix:
        run.manifest_stem = f"{a.prefix}extract"
    dataio.save_archive(h1, run.output(f"{a.prefix}h1.emb"))
    dataio.save_archive(h2, run.output(f"{a.prefix}h2.emb"))
    run.emit({"event": "extract", "utterances": len(archive), "h1_dim": h1.dim, "h2_dim": h2.dim})


PROBE_HEADER = "embedding\tfactor\tn_test\taccuracy"


def cmd_probe(run: Run) -> None:
    a = run.args
    archive = dataio.load_archive(run.input(a.archive))
    labels = dataio.load_labels(run.input(a.labels))
    if a.factor not in labels.factors:
        raise CliError(f"label table has no factor {a.factor!r}")
    split_seed, perm_seed, probe_seed = _seeds(a.seed, 3)
    if a.split:
        split = _load_split(run, a.split)
    else:
        split = dataio.make_splits(archive.ids, (0.8, 0.1, 0.1), a.factor, labels, split_seed)
    if a.permute_labels:
        ids = list(archive.ids)
        perm = np.random.default_rng(perm_seed).permutation(len(ids))
        shuffled = [labels.label(ids[k], a.factor) for k in perm]
        rows = {u: {**labels.rows[u], a.factor: c} for u, c in zip(ids, shuffled)}
        labels = dataio.LabelTable(rows, labels.factors)
    cfg = probe.ProbeConfig(a.hidden_layers, a.hidden_width, a.l2, a.lr, a.batch_size,
                            a.max_epochs, a.patience, not a.no_standardize, probe_seed)
    _, report = probe.train_probe(archive, labels, a.factor, split, cfg)
    name = a.name or Path(a.archive).stem
    run.manifest_stem = f"probe.{name}.{a.factor}"
    tsv = run.output("probe.tsv")
    new = not tsv.exists()
    with open(tsv, "a", encoding="utf-8") as fh:
        if new:
            fh.write(PROBE_HEADER + "\n")
        fh.write(report.tsv_row(name) + "\n")
    Path(run.output(f"probe.{name}.{a.factor}.json")).write_text(
        probe.report_json(report, name) + "\n", encoding="utf-8")
    run.emit({"event": "probe", "embedding": name, "factor": a.factor,
              "accuracy": report.test_accuracy, "epochs": report.epochs_ran})
    if not a.log_json:
        print(report.tsv_row(name))


def read_probe_tsv(paths) -> tuple[np.ndarray, list[str], list[str]]:
    """Assemble probe rows into an (embedding x factor) matrix; later rows win."""
    cells: dict[tuple[str, str], float] = {}
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            for k, line in enumerate(fh, 1):
                parts = line.rstrip("\n").split("\t")
                if k == 1 and line.rstrip("\n") == PROBE_HEADER:
                    continue
                if len(parts) != 4:
                    raise dataio.FormatError(f"{path}: expected 4 tab-separated fields", k)
                cells[(parts[0], parts[1])] = float(parts[3])
    rows = list(dict.fromkeys(e for e, _ in cells))
    cols = list(dict.fromkeys(f for _, f in cells))
    mat = np.full((len(rows), len(cols)), np.nan)
    for (e, f), v in cells.items():
        mat[rows.index(e), cols.index(f)] = v
    return mat, rows, cols


def cmd_report(run: Run) -> None:
    a = run.args
    mat, rows, cols = read_probe_tsv([run.input(p) for p in a.tsv])
    with open(run.output("probe_table.tsv"), "w", encoding="utf-8") as fh:
        fh.write("embedding\t" + "\t".join(cols) + "\n")
        for name, r in zip(rows, mat):
            fh.write(name + "\t" + "\t".join("" if np.isnan(v) else f"{v:.6f}" for v in r) + "\n")
    plotting.plot_probe_matrix(mat, rows, cols, run.output("probe_table.png"))
    run.emit({"event": "report", "embeddings": rows, "factors": cols})


def cmd_score(run: Run) -> None:
    a = run.args
    train = dataio.load_archive(run.input(a.train_archive))
    train_labels = dataio.load_labels(run.input(a.train_labels))
    if a.train_split:
        train = train.subset(_load_split(run, a.train_split).train_ids)
    evaluation = dataio.load_archive(run.input(a.archive))
    trials = dataio.load_trials(run.input(a.trials))
    be = backend.VerificationBackend.fit(train, train_labels.labels(train.ids, "speaker"),
                                         a.lda_dim or None, a.plda_iters, a.length_norm)
    scores = be.score(trials, evaluation)
    run.manifest_stem = f"score.{a.name}"
    backend.save_scores(scores, run.output(f"{a.name}.scores"))
    run.extra["backend"] = {
        "lda_dim": None if be.lda is None else int(be.lda.projection.shape[0]),
        "plda_loglik": list(be.plda.loglik_history),
    }
    run.emit({"event": "score", "trials": len(trials)})


def cmd_det(run: Run) -> None:
    a = run.args
    curves = {}
    for path in a.scores:
        stem = Path(path).name.split(".")[0]
        if stem in curves:
            raise CliError(f"duplicate score file stem {stem!r}")
        curve = backend.compute_det(backend.load_scores(run.input(path)))
        backend.save_det(curve, run.output(f"{stem}.det.csv"), run.output(f"{stem}.det.json"))
        curves[stem] = curve
        run.emit({"event": "det", "name": stem, **curve.summary()})
        if not a.log_json:
            print(f"{stem}\teer={curve.eer:.6f}")
    plotting.plot_det(curves, run.output("det.png"))
    if len(curves) >= 2:
        names = list(curves)
        deltas = {f"{names[0]}-{n}": backend.eer_delta(curves[names[0]], curves[n]) for n in names[1:]}
        write_json(run.output("eer_delta.json"), deltas)


def cmd_chi2(run: Run) -> None:
    a = run.args
    if a.table:
        table = probe.load_table_csv(run.input(a.table))
    elif a.labels and a.factors:
        labels = dataio.load_labels(run.input(a.labels))
        table, _, _ = probe.build_contingency(labels, a.factors[0], a.factors[1])
    else:
        raise CliError("chi2 needs --table or --labels with --factors")
    result = probe.chi_squared_independence(table, a.alpha)
    write_json(run.output("chi2.json"), result.to_json())
    print(json.dumps(result.to_json(), sort_keys=True))


def cmd_rerun(args: argparse.Namespace) -> int:
    with open(args.manifest, encoding="utf-8") as fh:
        manifest = json.load(fh)
    for path, digest in manifest.get("inputs", {}).items():
        if not Path(path).exists() or file_sha256(path) != digest:
            raise CliError(f"input changed or missing since the manifest was written: {path}")
    argv = [x.replace(OUT_TOKEN, args.out) for x in manifest["argv"]]
    return main(argv)


# -- parser ----------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON file of option defaults (flags win)")
    p.add_argument("--log-json", action="store_true", help="JSON lines on stdout")


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t]


REQUIRED = {
    "augment": ("archive", "labels", "generator"),
    "split": ("labels",),
    "make-trials": ("labels",),
    "train-uai": ("archive", "labels"),
    "extract": ("model", "archive"),
    "probe": ("archive", "labels", "factor"),
    "score": ("train_archive", "train_labels", "archive", "trials"),
}


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="uaispk", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        subs[name] = p
        return p

    p = add("synth", cmd_synth, "generate a synthetic corpus")
    _common(p)
    p.add_argument("--dim", type=int, default=512)
    p.add_argument("--speakers", type=int, default=50)
    p.add_argument("--utts", type=int, default=40, help="utterances per speaker")
    p.add_argument("--factor", action="append", help="name:n_classes:strength (repeatable)")
    p.add_argument("--speaker-strength", type=float, default=1.0)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--confound", type=float, default=0.0)

    p = add("augment", cmd_augment, "append nuisance-resampled copies")
    _common(p)
    p.add_argument("--archive")
    p.add_argument("--labels")
    p.add_argument("--generator", help="synth manifest or generator JSON")
    p.add_argument("--split")
    p.add_argument("--part", choices=("train", "val", "test", "all"), default="all")
    p.add_argument("--copies", type=int, default=1)
    p.add_argument("--perturb-factor", default="noise")
    p.add_argument("--perturb-strength", type=float, default=1.0)
    p.add_argument("--only-copies", action="store_true", help="drop the originals from the output")

    p = add("split", cmd_split, "train/val/test split")
    _common(p)
    p.add_argument("--labels")
    p.add_argument("--archive", help="restrict to the ids of this archive")
    p.add_argument("--fractions", type=float, nargs=3, default=[0.8, 0.1, 0.1])
    p.add_argument("--group-by", default="speaker", help="split within each class of this factor")

    p = add("make-trials", cmd_make_trials, "sample verification trials")
    _common(p)
    p.add_argument("--labels")
    p.add_argument("--archive", help="draw ids from this archive")
    p.add_argument("--split")
    p.add_argument("--part", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--targets", type=int, default=500)
    p.add_argument("--nontargets", type=int, default=500)
    p.add_argument("--condition", help="factor=class required on the test side")

    d = uai.UaiConfig()
    p = add("train-uai", cmd_train_uai, "train the disentangling model")
    _common(p)
    p.add_argument("--archive")
    p.add_argument("--labels")
    p.add_argument("--split")
    p.add_argument("--h1-dim", type=int, default=d.h1_dim)
    p.add_argument("--h2-dim", type=int, default=d.h2_dim)
    p.add_argument("--encoder-hidden", type=_ints, default=list(d.encoder_hidden))
    p.add_argument("--predictor-hidden", type=_ints, default=list(d.predictor_hidden))
    p.add_argument("--decoder-hidden", type=_ints, default=list(d.decoder_hidden))
    p.add_argument("--disentangler-hidden", type=_ints, default=list(d.disentangler_hidden))
    p.add_argument("--w-pred", type=float, default=d.w_pred)
    p.add_argument("--w-recon", type=float, default=d.w_recon)
    p.add_argument("--w-adv", type=float, default=d.w_adv)
    p.add_argument("--adv-steps", type=int, default=d.adv_steps_per_main)
    p.add_argument("--keep-prob", type=float, default=d.keep_prob)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--adv-lr", type=float, default=d.adv_lr)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--code-activation", choices=("tanh", "linear"), default=d.code_activation)
    p.add_argument("--standardize-codes", action="store_true", default=d.standardize_codes)
    p.add_argument("--augment-copies", type=int, default=0, help="train on augmented data (M2)")
    p.add_argument("--generator", help="synth manifest, needed with --augment-copies")
    p.add_argument("--perturb-factor", default="noise")
    p.add_argument("--perturb-strength", type=float, default=1.0)

    p = add("extract", cmd_extract, "write h1/h2 archives")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--archive")
    p.add_argument("--prefix", default="")

    c = probe.ProbeConfig()
    p = add("probe", cmd_probe, "probe one factor from an archive")
    _common(p)
    p.add_argument("--archive")
    p.add_argument("--labels")
    p.add_argument("--factor")
    p.add_argument("--split")
    p.add_argument("--name", help="embedding name in probe.tsv (default: archive stem)")
    p.add_argument("--hidden-layers", type=int, default=c.hidden_layers)
    p.add_argument("--hidden-width", type=int, default=c.hidden_width)
    p.add_argument("--l2", type=float, default=c.l2_coeff)
    p.add_argument("--lr", type=float, default=c.lr)
    p.add_argument("--batch-size", type=int, default=c.batch_size)
    p.add_argument("--max-epochs", type=int, default=c.max_epochs)
    p.add_argument("--patience", type=int, default=c.patience)
    p.add_argument("--no-standardize", action="store_true")
    p.add_argument("--permute-labels", action="store_true", help="null run with shuffled labels")

    p = add("report", cmd_report, "assemble probe.tsv rows into a matrix and heatmap")
    _common(p)
    p.add_argument("tsv", nargs="+")

    p = add("score", cmd_score, "LDA + PLDA scoring of a trial list")
    _common(p)
    p.add_argument("--train-archive")
    p.add_argument("--train-labels")
    p.add_argument("--train-split", help="use only the train ids of this split")
    p.add_argument("--archive", help="evaluation embeddings")
    p.add_argument("--trials")
    p.add_argument("--lda-dim", type=int, default=150, help="0 disables LDA")
    p.add_argument("--plda-iters", type=int, default=10)
    p.add_argument("--length-norm", action="store_true")
    p.add_argument("--name", default="scores")

    p = add("det", cmd_det, "DET curves and EER from score files")
    _common(p)
    p.add_argument("scores", nargs="+")

    p = add("chi2", cmd_chi2, "chi-squared independence test")
    _common(p)
    p.add_argument("--table", help="CSV counts matrix")
    p.add_argument("--labels")
    p.add_argument("--factors", nargs=2)
    p.add_argument("--alpha", type=float, default=0.01)

    p = sub.add_parser("rerun", help="re-execute a manifest into a new output directory")
    p.add_argument("manifest")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=None)
    subs["rerun"] = p
    return parser, subs


def _error(exc: BaseException, command: str | None) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc), "command": command}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return 1


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    command = args.command
    try:
        if command == "rerun":
            return cmd_rerun(args)
        sub = subs[command]
        if args.config:
            with open(args.config, encoding="utf-8") as fh:
                cfg = json.load(fh)
            if not isinstance(cfg, dict):
                raise CliError("--config must hold a JSON object")
            known = {a.dest for a in sub._actions} - {"help", "out", "config"}
            unknown = sorted(set(cfg) - known)
            if unknown:
                sub.print_usage(sys.stderr)
                print(f"uaispk {command}: unknown config keys: {', '.join(unknown)}", file=sys.stderr)
                return 2
            sub.set_defaults(**cfg)
            try:
                args = parser.parse_args(argv)
            except SystemExit as exc:
                return int(exc.code or 0)
        missing = [k for k in REQUIRED.get(command, ()) if getattr(args, k, None) in (None, "")]
        if missing:
            sub.print_usage(sys.stderr)
            flags = ", ".join("--" + k.replace("_", "-") for k in missing)
            print(f"uaispk {command}: missing required option(s): {flags}", file=sys.stderr)
            return 2
        logging.basicConfig(level=logging.WARNING if args.log_json else logging.INFO,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        run = Run(args, argv)
        if args.config:
            run.input(args.config)
        args.func(run)
        run.write_manifest()
        return 0
    except Exception as exc:  # every runtime failure becomes a JSON error line
        log.debug("command failed", exc_info=True)
        return _error(exc, command)


if __name__ == "__main__":
    sys.exit(main())

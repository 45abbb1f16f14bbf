import json
import os
from pathlib import Path

import pytest

from uaispk.cli import file_sha256, main, normalize_argv

TRAIN = ["--h1-dim", "8", "--h2-dim", "8", "--encoder-hidden", "64", "--predictor-hidden", "32",
         "--decoder-hidden", "64", "--disentangler-hidden", "16", "--epochs", "15",
         "--batch-size", "32", "--lr", "0.002"]
PROBE = ["--hidden-layers", "1", "--hidden-width", "32", "--lr", "0.005", "--max-epochs", "40"]


def run(*argv):
    return main([str(a) for a in argv])


def outputs(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes()
            for p in sorted(Path(directory).rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def recipe(tmp_path_factory):
    root = tmp_path_factory.mktemp("recipe")
    d = {k: root / k for k in ("data", "split", "aug", "trials", "model", "emb", "probe_raw",
                               "probe_h1", "report", "score_raw", "score_h1", "det", "chi2")}
    assert run("synth", "--dim", 64, "--speakers", 10, "--utts", 20, "--factor", "noise:4:1.0",
               "--seed", 7, "-o", d["data"]) == 0
    emb, lab = d["data"] / "embeddings.emb", d["data"] / "labels.tsv"
    assert run("split", "--labels", lab, "--seed", 1, "-o", d["split"]) == 0
    split = d["split"] / "split.json"
    assert run("augment", "--archive", emb, "--labels", lab, "--generator",
               d["data"] / "synth.manifest.json", "--seed", 2, "-o", d["aug"]) == 0
    assert run("make-trials", "--labels", lab, "--split", split, "--part", "all",
               "--targets", 100, "--nontargets", 100, "--seed", 3, "-o", d["trials"]) == 0
    assert run("train-uai", "--archive", emb, "--labels", lab, "--split", split, *TRAIN,
               "--seed", 4, "-o", d["model"]) == 0
    assert run("extract", "--model", d["model"] / "model", "--archive", emb, "-o", d["emb"]) == 0
    for name, archive in (("raw", emb), ("h1", d["emb"] / "h1.emb")):
        assert run("probe", "--archive", archive, "--labels", lab, "--factor", "noise", "--split", split,
                   "--name", name, *PROBE, "--seed", 5, "-o", d[f"probe_{name}"]) == 0
    assert run("report", d["probe_raw"] / "probe.tsv", d["probe_h1"] / "probe.tsv", "-o", d["report"]) == 0
    for name, archive in (("raw", emb), ("h1", d["emb"] / "h1.emb")):
        assert run("score", "--train-archive", archive, "--train-labels", lab, "--archive", archive,
                   "--trials", d["trials"] / "trials.txt", "--lda-dim", 5, "--name", name,
                   "-o", d[f"score_{name}"]) == 0
    assert run("det", d["score_raw"] / "raw.scores", d["score_h1"] / "h1.scores", "-o", d["det"]) == 0
    assert run("chi2", "--labels", lab, "--factors", "speaker", "noise", "-o", d["chi2"]) == 0
    return d


def test_synth_writes_three_files(tmp_path):
    assert run("synth", "--dim", 512, "--speakers", 50, "--utts", 40, "--factor", "noise:4:1.0",
               "--seed", 7, "-o", tmp_path / "data") == 0
    assert sorted(os.listdir(tmp_path / "data")) == ["embeddings.emb", "labels.tsv", "synth.manifest.json"]


def test_missing_out_is_usage_error(capsys):
    assert run("synth", "--dim", 8) == 2
    assert "usage" in capsys.readouterr().err


def test_missing_required_option_is_usage_error(tmp_path, capsys):
    assert run("probe", "--factor", "noise", "-o", tmp_path) == 2
    assert "--archive" in capsys.readouterr().err


def test_bad_flag_value_is_usage_error(tmp_path):
    assert run("synth", "--dim", "many", "-o", tmp_path) == 2


def test_runtime_failure_is_json_on_stderr(tmp_path, capsys):
    assert run("extract", "--model", tmp_path / "nope", "--archive", tmp_path / "x.emb",
               "-o", tmp_path / "o") == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["command"] == "extract" and "not found" in err["message"]


def test_same_flags_same_hashes(tmp_path):
    for k in (1, 2):
        assert run("synth", "--dim", 16, "--speakers", 4, "--utts", 5, "--seed", 3, "-o", tmp_path / str(k)) == 0
    for name in ("embeddings.emb", "labels.tsv", "synth.manifest.json"):
        assert file_sha256(tmp_path / "1" / name) == file_sha256(tmp_path / "2" / name)


def test_config_defaults_and_flag_override(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"dim": 12, "speakers": 3}))
    assert run("synth", "--config", tmp_path / "c.json", "--speakers", 5, "--utts", 2, "-o", tmp_path / "o") == 0
    m = json.loads((tmp_path / "o" / "synth.manifest.json").read_text())
    assert m["generator"]["dim"] == 12 and m["generator"]["n_speakers"] == 5
    assert str(tmp_path / "c.json") in m["inputs"]
    (tmp_path / "bad.json").write_text(json.dumps({"colour": 1}))
    assert run("synth", "--config", tmp_path / "bad.json", "-o", tmp_path / "p") == 2


def test_normalize_argv_variants():
    assert normalize_argv(["x", "-o", "d", "--out=e", "-of"]) == ["x", "-o", "{out}", "--out={out}", "-o{out}"]


def test_det_perfect_separation(tmp_path, capsys):
    (tmp_path / "p.scores").write_text("a b target 3.0\nc d target 2.0\ne f nontarget -1\ng h nontarget -2\n")
    assert run("det", tmp_path / "p.scores", "-o", tmp_path / "o") == 0
    assert json.loads((tmp_path / "o" / "p.det.json").read_text())["eer"] == 0.0
    assert (tmp_path / "o" / "p.det.csv").exists() and (tmp_path / "o" / "det.png").exists()


def test_chi2_csv(tmp_path, capsys):
    (tmp_path / "t.csv").write_text("20,5\n5,20\n")
    assert run("chi2", "--table", tmp_path / "t.csv", "-o", tmp_path / "o") == 0
    res = json.loads((tmp_path / "o" / "chi2.json").read_text())
    assert res["statistic"] == 18.0 and res["reject"] is True
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1]) == res


def test_recipe_raw_beats_h1_on_nuisance(recipe):
    rows = [line.split("\t") for line in
            (recipe["report"] / "probe_table.tsv").read_text().splitlines()]
    header, body = rows[0], {r[0]: r[1:] for r in rows[1:]}
    col = header.index("noise") - 1
    assert float(body["raw"][col]) > float(body["h1"][col])
    assert (recipe["report"] / "probe_table.png").stat().st_size > 0


def test_recipe_outputs_present(recipe):
    assert (recipe["model"] / "model" / "manifest.json").exists()
    assert (recipe["model"] / "training.png").exists()
    assert len((recipe["model"] / "train_log.jsonl").read_text().splitlines()) == 15
    assert {"h1.emb", "h2.emb"} <= set(os.listdir(recipe["emb"]))
    assert (recipe["det"] / "eer_delta.json").exists()
    assert len((recipe["aug"] / "augmented.tsv").read_text().splitlines()) == 1 + 400


STEPS = ["data", "split", "aug", "trials", "model", "emb", "probe_raw", "probe_h1", "report",
         "score_raw", "score_h1", "det", "chi2"]


@pytest.mark.parametrize("step", STEPS)
def test_rerun_is_byte_identical(recipe, step, tmp_path):
    manifest = next(recipe[step].glob("*.manifest.json"))
    assert run("rerun", manifest, "-o", tmp_path / "again") == 0
    assert outputs(tmp_path / "again") == outputs(recipe[step])


def test_rerun_refuses_changed_input(tmp_path):
    (tmp_path / "t.csv").write_text("20,5\n5,20\n")
    assert run("chi2", "--table", tmp_path / "t.csv", "-o", tmp_path / "o") == 0
    (tmp_path / "t.csv").write_text("20,5\n5,21\n")
    assert run("rerun", tmp_path / "o" / "chi2.manifest.json", "-o", tmp_path / "p") == 1


def test_writes_stay_inside_out_dir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "in").mkdir()
    (tmp_path / "in" / "t.csv").write_text("10,10\n10,10\n")
    before = outputs(tmp_path)
    assert run("chi2", "--table", "in/t.csv", "-o", "out") == 0
    assert run("synth", "--dim", 8, "--speakers", 2, "--utts", 3, "-o", "out2") == 0
    after = {k: v for k, v in outputs(tmp_path).items() if not k.startswith(("out/", "out2/"))}
    assert after == before


def test_runs_sharing_a_directory_keep_their_manifests(recipe, tmp_path):
    data, trials = recipe["data"], recipe["trials"] / "trials.txt"
    for name in ("a", "b"):
        assert run("score", "--train-archive", data / "embeddings.emb", "--train-labels", data / "labels.tsv",
                   "--archive", data / "embeddings.emb", "--trials", trials, "--lda-dim", 5,
                   "--name", name, "-o", tmp_path) == 0
    assert run("extract", "--model", recipe["model"] / "model", "--archive", data / "embeddings.emb",
               "--prefix", "x_", "-o", tmp_path) == 0
    assert sorted(p.name for p in tmp_path.glob("*.manifest.json")) == \
        ["score.a.manifest.json", "score.b.manifest.json", "x_extract.manifest.json"]
    assert run("rerun", tmp_path / "score.a.manifest.json", "-o", tmp_path / "again") == 0
    assert (tmp_path / "again" / "a.scores").read_bytes() == (tmp_path / "a.scores").read_bytes()

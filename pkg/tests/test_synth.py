import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from uaispk.dataio import make_splits
from uaispk.probe import ProbeConfig, build_contingency, chi_squared_independence, train_probe
from uaispk.synth import (AugmentSpec, GeneratorSpec, NuisanceFactor, augment_corpus, generate_corpus,
                          make_trials, mixing_matrices)

SMALL = GeneratorSpec(dim=32, n_speakers=6, utts_per_speaker=8,
                      nuisance_factors=(NuisanceFactor("noise", 3, 1.0),), seed=3)


def test_same_seed_same_corpus():
    a1, l1 = generate_corpus(SMALL)
    a2, l2 = generate_corpus(SMALL)
    assert a1 == a2 and l1 == l2
    assert a1.vectors.tobytes() == a2.vectors.tobytes()
    a3, _ = generate_corpus(GeneratorSpec(**{**SMALL.__dict__, "seed": 4}))
    assert not np.array_equal(a1.vectors, a3.vectors)


def test_degenerate_generator_collapses_speakers():
    spec = GeneratorSpec(dim=16, n_speakers=3, utts_per_speaker=5,
                         nuisance_factors=(NuisanceFactor("noise", 2, 0.0),), noise_sigma=0.0)
    arch, labels = generate_corpus(spec)
    for s in labels.classes("speaker"):
        vs = arch.matrix([u for u in arch.ids if labels.label(u, "speaker") == s])
        assert np.all(vs == vs[0])


def test_corpus_shape_and_labels():
    arch, labels = generate_corpus(SMALL)
    assert len(arch) == 48 and arch.dim == 32
    assert set(labels.factors) == {"speaker", "noise"}
    assert set(labels.classes("noise")) <= {"noise0", "noise1", "noise2"}


def test_mixing_blocks_orthonormal():
    a, bs = mixing_matrices(SMALL)
    q = np.hstack([a, bs["noise"]])
    np.testing.assert_allclose(q.T @ q, np.eye(q.shape[1]), atol=1e-12)


def test_bad_specs():
    with pytest.raises(ValueError):
        NuisanceFactor("noise", 1)
    with pytest.raises(ValueError):
        NuisanceFactor("noise", 2, float("inf"))
    with pytest.raises(ValueError):
        GeneratorSpec(noise_sigma=-1)
    with pytest.raises(ValueError):
        AugmentSpec(copies=0)
    assert NuisanceFactor.parse("mic:3:0.5") == NuisanceFactor("mic", 3, 0.5)


def test_spec_json_round_trip():
    assert GeneratorSpec.from_json(SMALL.to_json()) == SMALL


def test_narrow_dim_still_generates(caplog):
    spec = GeneratorSpec(dim=4, n_speakers=6, utts_per_speaker=2, seed=1)
    arch, _ = generate_corpus(spec)
    assert arch.dim == 4 and "one-hot width" in caplog.text


def test_confound_induces_dependence():
    spec = GeneratorSpec(dim=64, n_speakers=10, utts_per_speaker=40, confound=0.8, seed=2)
    _, labels = generate_corpus(spec)
    t, _, _ = build_contingency(labels, "speaker", "noise")
    assert chi_squared_independence(t).p_value < 1e-3


def test_labels_independent_in_95_of_100_runs():
    kept = 0
    for seed in range(100):
        spec = GeneratorSpec(dim=64, n_speakers=20, utts_per_speaker=40, seed=seed)
        _, labels = generate_corpus(spec)
        t, _, _ = build_contingency(labels, "speaker", "noise")
        kept += not chi_squared_independence(t, alpha=0.01).reject_at_alpha
    assert kept >= 95


# -- augmentation -------------------------------------------------------------------

def test_augment_doubles_and_keeps_speakers():
    arch, labels = generate_corpus(SMALL)
    a2, l2 = augment_corpus(arch, labels, AugmentSpec(copies=1, seed=1), SMALL)
    assert len(a2) == 2 * len(arch)
    assert set(l2.classes("speaker")) == set(labels.classes("speaker"))
    assert a2.ids[len(arch)] == arch.ids[0] + "-aug1"
    assert l2.label(arch.ids[5] + "-aug1", "speaker") == labels.label(arch.ids[5], "speaker")


def test_augment_zero_strength_copies_vectors():
    arch, labels = generate_corpus(SMALL)
    a2, _ = augment_corpus(arch, labels, AugmentSpec(copies=2, perturb_strength=0.0), SMALL)
    np.testing.assert_array_equal(a2.vectors[len(arch):2 * len(arch)], arch.vectors)
    np.testing.assert_array_equal(a2.vectors[2 * len(arch):], arch.vectors)


def test_augment_two_copies_deterministic():
    arch, labels = generate_corpus(SMALL)
    spec = AugmentSpec(copies=2, seed=5)
    a2, l2 = augment_corpus(arch, labels, spec, SMALL)
    b2, m2 = augment_corpus(arch, labels, spec, SMALL)
    assert len(a2) == 3 * len(arch)
    assert a2 == b2 and l2 == m2


def test_augment_unknown_factor():
    arch, labels = generate_corpus(SMALL)
    with pytest.raises(KeyError):
        augment_corpus(arch, labels, AugmentSpec(perturb_factor="mic"), SMALL)


@given(seed=st.integers(0, 10_000), strength=st.floats(0, 5), copies=st.integers(1, 3))
def test_augment_preserves_speaker_component(seed, strength, copies):
    gen = GeneratorSpec(dim=24, n_speakers=4, utts_per_speaker=3, noise_sigma=0.0,
                        nuisance_factors=(NuisanceFactor("noise", 3, 1.3), NuisanceFactor("mic", 2, 0.7)),
                        seed=seed)
    arch, labels = generate_corpus(gen)
    a2, _ = augment_corpus(arch, labels, AugmentSpec(copies, "noise", strength, seed), gen)
    a, _ = mixing_matrices(gen)
    n = len(arch)
    for k in range(1, copies + 1):
        diff = a2.vectors[k * n:(k + 1) * n] - arch.vectors
        assert np.max(np.abs(diff @ a)) < 1e-9


# -- trials ------------------------------------------------------------------------

def test_trials_zero_targets():
    _, labels = generate_corpus(SMALL)
    t = make_trials(labels, list(labels.rows), 0, 30, seed=1)
    assert t.n_target == 0 and t.n_nontarget == 30


def test_trials_condition_filter():
    spec = GeneratorSpec(dim=32, n_speakers=5, utts_per_speaker=12, seed=2,
                         nuisance_factors=(NuisanceFactor("noise", 2, 1.0, ("babble", "none")),))
    _, labels = generate_corpus(spec)
    t = make_trials(labels, list(labels.rows), 20, 20, condition=("noise", "babble"), seed=3)
    assert all(labels.label(tr.test, "noise") == "babble" for tr in t)


def test_trials_default_corpus_counts():
    _, labels = generate_corpus(GeneratorSpec(dim=128))
    t = make_trials(labels, list(labels.rows), 100, 100, seed=0)
    assert t.n_target == 100 and len(t) == 200
    for tr in t:
        same = labels.label(tr.enroll, "speaker") == labels.label(tr.test, "speaker")
        assert same == tr.is_target and tr.enroll != tr.test
    assert len({(tr.enroll, tr.test) for tr in t}) == 200
    assert make_trials(labels, list(labels.rows), 100, 100, seed=0) == t


def test_trials_insufficient_pairs():
    _, labels = generate_corpus(SMALL)
    with pytest.raises(ValueError, match="target pairs"):
        make_trials(labels, list(labels.rows), 10_000, 0)
    with pytest.raises(ValueError, match="nontarget pairs"):
        make_trials(labels, list(labels.rows), 0, 10_000)


# -- the 512-d desk corpus at sigma 0.3 -------------------------------------------------

@pytest.fixture(scope="module")
def desk_03():
    spec = GeneratorSpec(noise_sigma=0.3, seed=7)
    arch, labels = generate_corpus(spec)
    return arch, labels, make_splits(arch.ids, (0.8, 0.1, 0.1), "speaker", labels, seed=0)


@pytest.mark.slow
def test_desk_sigma_03_nuisance_decodable(desk_03):
    arch, labels, split = desk_03
    assert train_probe(arch, labels, "noise", split, ProbeConfig())[1].test_accuracy >= 0.90


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="at sigma 0.3 fifty speakers overlap; even the Bayes "
                                       "classifier stays below 0.90 (acceptance uses 0.1)")
def test_desk_sigma_03_speaker_decodable(desk_03):
    arch, labels, split = desk_03
    assert train_probe(arch, labels, "speaker", split, ProbeConfig())[1].test_accuracy >= 0.90

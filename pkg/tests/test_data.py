import numpy as np
import pytest
from hypothesis import given, strategies as st

from ddlstm.data import (
    DatasetError,
    Sequence,
    SequenceDataset,
    SequenceParseError,
    SynthConfig,
    generate_coupled_markov,
    load_sequences,
    save_sequences,
    split_leave_person_out,
)

SMALL = dict(sequences_per_domain=16, sequence_length=40, persons_per_domain=4)


def test_generator_shapes_and_determinism():
    cfg = SynthConfig(**SMALL, seed=4)
    a1, a2 = generate_coupled_markov(cfg)
    b1, b2 = generate_coupled_markov(cfg)
    assert len(a1.sequences) == 16 and a1.feature_dim == 16
    assert a1.label_count == 8 and a2.label_count == 8
    for x, y in zip(a1.sequences + a2.sequences, b1.sequences + b2.sequences):
        assert np.array_equal(x.features, y.features) and np.array_equal(x.labels, y.labels)


def test_full_relatedness_shares_latent_paths():
    _, _, internals = generate_coupled_markov(SynthConfig(**SMALL, relatedness=1.0),
                                              return_internals=True)
    p1, p2 = internals.paths
    assert all(np.array_equal(a, b) for a, b in zip(p1, p2))


def test_zero_relatedness_decouples_paths():
    _, _, internals = generate_coupled_markov(SynthConfig(**SMALL, relatedness=0.0),
                                              return_internals=True)
    p1, p2 = internals.paths
    agree = np.mean(np.concatenate([a == b for a, b in zip(p1, p2)]))
    assert agree < 0.9


@given(st.floats(0, 1), st.integers(0, 1000))
def test_transitions_are_stochastic(rho, seed):
    cfg = SynthConfig(latent_states=5, labels_per_domain=(3, 4), sequences_per_domain=2,
                      sequence_length=5, persons_per_domain=2, relatedness=rho, seed=seed)
    _, _, internals = generate_coupled_markov(cfg, return_internals=True)
    for P in internals.transitions:
        assert np.all(P >= 0)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
    for mapping, L in zip(internals.state_to_label, (3, 4)):
        assert set(mapping) == set(range(L))


def test_synth_validation():
    with pytest.raises(DatasetError):
        SynthConfig(relatedness=1.5).validate()
    with pytest.raises(DatasetError):
        SynthConfig(latent_states=4, labels_per_domain=(5, 2)).validate()


def test_roundtrip_is_exact(tmp_path):
    d1, _ = generate_coupled_markov(SynthConfig(**SMALL))
    path = tmp_path / "d.seq"
    save_sequences(d1, path)
    back = load_sequences(path)
    assert back.label_count == d1.label_count
    for a, b in zip(d1.sequences, back.sequences):
        assert a.person_id == b.person_id
        assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)


@pytest.mark.parametrize("text, line", [
    ("DDSEQ 1 2 1\nSEQ 0 2\n0 1.0\n", 3),
    ("DDSEQ 1 2 1\nSEQ 0 1\n5 1.0\n", 3),
    ("DDSEQ 1 2 1\nSEQ 0 1\n0 nan\n", 3),
    ("DDSEQ 1 2 1\nSEQ 0 1\n0 1.0 2.0\n", 3),
    ("XX 1 2 1\n", 1),
    ("DDSEQ 1 2 1\n", 1),
    ("DDSEQ 1 2 1\nSEQ 0 1\n0 abc\n", 3),
])
def test_parse_errors_carry_line_numbers(tmp_path, text, line):
    p = tmp_path / "bad.seq"
    p.write_text(text)
    with pytest.raises(SequenceParseError) as info:
        load_sequences(p)
    assert info.value.line_no == line


def test_missing_file():
    with pytest.raises(DatasetError):
        load_sequences("/nonexistent/file.seq")


def test_dataset_invariants():
    with pytest.raises(DatasetError):
        SequenceDataset([Sequence(0, np.zeros((2, 3)), np.array([0, 4]))], 3, 3)
    with pytest.raises(DatasetError):
        SequenceDataset([], 3, 3)


def test_leave_person_out_split():
    d1, _ = generate_coupled_markov(SynthConfig(**SMALL))
    tr, te = split_leave_person_out(d1)
    assert not set(tr.persons) & set(te.persons)
    assert len(tr.sequences) + len(te.sequences) == len(d1.sequences)
    assert len(te.persons) == 1
    with pytest.raises(DatasetError):
        split_leave_person_out(d1, num_splits=5)

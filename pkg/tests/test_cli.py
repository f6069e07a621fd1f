import numpy as np
import pytest

from ddlstm.checkpoint import load_checkpoint
from ddlstm.cli import main
from ddlstm.training import read_runlog_csv

TINY_CFG = """\
# small run
sequences_per_domain = 12
sequence_length = 30
persons_per_domain = 4
batch_size = 8
n1 = 4
hidden = 6
history = 10
iterations = 20
learning_rate = 1.0
"""


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "c.cfg").write_text(TINY_CFG)
    return tmp_path


def _gen(d, *extra):
    return main(["gen", "--config", str(d / "c.cfg"), "--out1", str(d / "a.seq"),
                 "--out2", str(d / "b.seq"), *extra])


def test_gen_writes_files_and_summary(workdir, capsys):
    assert _gen(workdir) == 0
    out = capsys.readouterr().out
    assert "sequences=12" in out and "frames=360" in out and "labels=8" in out
    assert (workdir / "a.seq").exists() and (workdir / "b.seq").exists()


def test_gen_is_deterministic(workdir):
    assert _gen(workdir, "--seed", "7") == 0
    first = (workdir / "a.seq").read_bytes()
    assert _gen(workdir, "--seed", "7") == 0
    assert (workdir / "a.seq").read_bytes() == first


def test_gen_unwritable_path(workdir, capsys):
    rc = main(["gen", "--out1", "/nonexistent/dir/a.seq", "--out2", str(workdir / "b")])
    assert rc == 1 and "cannot write" in capsys.readouterr().err


def test_unknown_key_is_validation_error(workdir):
    assert main(["gen", "--config", str(workdir / "c.cfg"), "--bogus", "1"]) == 1


def _train(d, *extra):
    return main(["train", "--config", str(d / "c.cfg"), "--d1", str(d / "a.seq"),
                 "--checkpoint", str(d / "m.ck"), "--runlog", str(d / "r.csv"), *extra])


def test_train_eval_alphas(workdir, capsys):
    _gen(workdir)
    b = str(workdir / "b.seq")
    assert _train(workdir, "--d2", b, "--test1", str(workdir / "a.seq"), "--test2", b) == 0
    out = capsys.readouterr().out
    assert "acc_d1=" in out and "alphas=" in out
    for row in read_runlog_csv(workdir / "r.csv"):
        assert 0.5 <= float(row["alpha1"]) <= 1 and 0.5 <= float(row["alpha2"]) <= 1
    for flag in ("1", "2"):
        assert main(["eval", "--checkpoint", str(workdir / "m.ck"), "--data", b,
                     "--domain", flag]) == 0
        acc = float(capsys.readouterr().out)
        assert 0 <= acc <= 1
    assert main(["alphas", "--runlog", str(workdir / "r.csv")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "iter,layer,alpha1,alpha2" and len(lines) == 1 + 20 * 2


def test_train_single_with_two_datasets_fails(workdir):
    _gen(workdir)
    rc = _train(workdir, "--protocol", "single", "--cell-kind", "bnlstm",
                "--d2", str(workdir / "b.seq"))
    assert rc == 1 and not (workdir / "m.ck").exists()


def test_train_zero_iterations(workdir):
    _gen(workdir)
    assert _train(workdir, "--iterations", "0", "--d2", str(workdir / "b.seq")) == 0
    m = load_checkpoint(workdir / "m.ck")
    assert all(a.alpha1 == 0.75 and a.alpha2 == 0.75 for a in m.alphas)


def test_eval_corrupted_checkpoint(workdir, capsys):
    _gen(workdir)
    _train(workdir, "--d2", str(workdir / "b.seq"))
    ck = workdir / "m.ck"
    ck.write_bytes(b"XXXX" + ck.read_bytes()[4:])
    assert main(["eval", "--checkpoint", str(ck), "--data", str(workdir / "a.seq")]) == 1
    assert "magic" in capsys.readouterr().err


def test_eval_perfect_memorization(tmp_path, capsys):
    from ddlstm.data import Sequence, SequenceDataset, save_sequences
    rng = np.random.default_rng(0)
    labels = np.repeat([0, 1, 2, 1], 5)
    feats = np.eye(3)[labels] + 0.05 * rng.normal(size=(20, 3))
    save_sequences(SequenceDataset([Sequence(0, feats, labels)], 3, 3), tmp_path / "one.seq")
    assert main(["train", "--protocol", "single", "--cell_kind", "lstm", "--iterations", "300",
                 "--batch_size", "4", "--hidden", "8", "--history", "20", "--layers", "1",
                 "--learning_rate", "1.0", "--d1", str(tmp_path / "one.seq"),
                 "--checkpoint", str(tmp_path / "m.ck")]) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(tmp_path / "m.ck"),
                 "--data", str(tmp_path / "one.seq")]) == 0
    assert capsys.readouterr().out.strip() == "1.0000"


def _check_names(out):
    return {line.split()[0] for line in out.splitlines() if line.startswith("check=")}


def test_verify_grad_passes_and_all_is_superset(capsys):
    assert main(["verify", "--scope", "grad"]) == 0
    grad = _check_names(capsys.readouterr().out)
    assert main(["verify", "--scope", "all"]) == 0
    assert grad < _check_names(capsys.readouterr().out)


def test_verify_catches_alpha_sign_error(monkeypatch, capsys):
    import ddlstm.model as model
    real = model.alpha_gradient
    monkeypatch.setattr(model, "alpha_gradient", lambda *a: tuple(-g for g in real(*a)))
    assert main(["verify", "--scope", "grad"]) != 0
    err = capsys.readouterr().err
    assert "failed checks" in err and "ddbn" in err

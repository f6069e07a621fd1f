import numpy as np
import pytest

from ddlstm.cells import StackConfig
from ddlstm.checkpoint import (
    CheckpointError,
    from_bytes,
    load_checkpoint,
    save_checkpoint,
    to_bytes,
)
from ddlstm.model import Model


def _trained(kind="ddlstm"):
    m = Model.create(StackConfig(2, 4, 5, kind), 3, 5, seed=1, label_layout=(2, 3))
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 5, 3))
    m.update_population(m.forward(x, 3), 3, 6)
    return m, x


@pytest.mark.parametrize("kind", ["lstm", "bnlstm", "ddlstm"])
def test_roundtrip_is_bit_identical(kind, tmp_path):
    m, x = _trained(kind)
    path = tmp_path / "m.ck"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert to_bytes(back) == path.read_bytes()
    for (n1, a), (n2, b) in zip(m.named_parameters(), back.named_parameters()):
        assert n1 == n2 and np.array_equal(a, b)
    assert back.stats == m.stats and back.label_layout == (2, 3)
    if kind != "lstm":
        assert np.array_equal(m.predict_logits(x, 2), back.predict_logits(x, 2))


def test_aux_model_roundtrip():
    m, _ = _trained()
    m.aux = Model.create(StackConfig(1, 3, 5, "lstm"), 3, 2)
    back = from_bytes(to_bytes(m))
    assert back.aux is not None and np.array_equal(back.aux.W_out, m.aux.W_out)


def test_corruptions_are_rejected():
    blob = to_bytes(_trained()[0])
    with pytest.raises(CheckpointError, match="magic"):
        from_bytes(b"X" + blob[1:])
    with pytest.raises(CheckpointError, match="truncated"):
        from_bytes(blob[:-5])
    with pytest.raises(CheckpointError, match="trailing"):
        from_bytes(blob + b"\0")


def test_failed_save_leaves_no_file(tmp_path, monkeypatch):
    import ddlstm.checkpoint as ck
    m, _ = _trained()
    path = tmp_path / "m.ck"
    monkeypatch.setattr(ck, "to_bytes", lambda _m: (_ for _ in ()).throw(RuntimeError("boom")))
    with pytest.raises(RuntimeError):
        save_checkpoint(m, path)
    assert list(tmp_path.iterdir()) == []

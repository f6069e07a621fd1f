import pytest

from ddlstm.config import ConfigFileError, load_config, parse_lines


def test_parse_file_and_overrides(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nprotocol = joint   # trailing\ncell_kind = lstm\n\nseed = 3\n"
                 "relatedness = 0.5\nd1 = a.seq\nfreeze_norm = off\n")
    cfg = load_config(p, [("seed", "9"), ("labels_per_domain", "4,5")])
    assert cfg.train.protocol == "joint" and cfg.train.seed == 9 and cfg.synth.seed == 9
    assert cfg.synth.relatedness == 0.5 and cfg.synth.labels_per_domain == (4, 5)
    assert cfg.paths["d1"] == "a.seq" and cfg.train.freeze_norm is False


@pytest.mark.parametrize("lines", [["bogus = 1"], ["iterations = many"], ["no equals sign"],
                                   ["freeze_norm = maybe"], ["seed ="]])
def test_bad_lines(lines):
    with pytest.raises(ConfigFileError):
        parse_lines(lines)


def test_error_names_line():
    with pytest.raises(ConfigFileError, match="x.cfg:2"):
        parse_lines(["seed = 1", "nope = 2"], "x.cfg")


def test_cross_field_validation():
    with pytest.raises(ConfigFileError):
        load_config(None, [("protocol", "ddlstm"), ("cell_kind", "bnlstm")])
    with pytest.raises(ConfigFileError):
        load_config(None, [("relatedness", "2")])


def test_missing_file():
    with pytest.raises(ConfigFileError):
        load_config("/nonexistent.cfg")

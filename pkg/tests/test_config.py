import pytest

from liloc.config import ConfigError, RunConfig, parse_pairs


def test_defaults_snapshot():
    c = RunConfig()
    assert (c.n_s, c.h_p, c.n_a, c.n_r, c.n_d, c.n_m_r, c.n_m_l, c.h_o) == (20, 20.0, 60, 20, 3, 5, 10, 0.7)
    assert c.mode == "auto" and not c.immediate_update and not c.ab_baseline


def test_text_round_trip(tmp_path):
    c = RunConfig(h_o=0.55, mode="ilm", immediate_update=True, seed=9)
    path = tmp_path / "run.cfg"
    c.save(path)
    assert RunConfig.load(path) == c


def test_comments_and_partial_files():
    c = RunConfig.from_text("# a comment\n\nn_s = 12  # trailing\nab_baseline = yes\n")
    assert c.n_s == 12 and c.ab_baseline
    assert c.h_p == RunConfig().h_p


@pytest.mark.parametrize("text", ["bogus = 1", "n_s = twelve", "n_s", "ab_baseline = maybe"])
def test_bad_lines_rejected(text):
    with pytest.raises(ConfigError):
        parse_pairs(text)


@pytest.mark.parametrize("change", [{"n_s": 0}, {"h_o": -0.1}, {"mode": "fast"},
                                    {"prior_anchor_sigma": 2.0}])
def test_invalid_values_rejected(change):
    with pytest.raises(ConfigError):
        RunConfig(**change)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "absent.cfg")

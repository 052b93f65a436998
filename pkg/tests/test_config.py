import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emma.config import RunConfig, from_text, parse_config, parse_text
from emma.errors import ConfigError


def write(tmp_path, text):
    path = tmp_path / "run.cfg"
    path.write_text(text, encoding="utf-8")
    return path


def test_empty_file_is_default(tmp_path):
    assert parse_config(write(tmp_path, "")) == RunConfig()


def test_comments_and_blank_lines(tmp_path):
    cfg = parse_config(write(tmp_path, "# header\n\nseed = 4  # trailing\n"))
    assert cfg.seed == 4


def test_override_wins(tmp_path):
    cfg = parse_config(write(tmp_path, "adapter = linear\n"), {"adapter": "xattn"})
    assert cfg.adapter == "cross_attention"


def test_none_override_is_ignored(tmp_path):
    assert parse_config(write(tmp_path, "seed = 9\n"), {"seed": None}).seed == 9


@pytest.mark.parametrize(
    "text,line,what",
    [
        ("seed = 1\nbogus = 2\n", 2, "unknown key"),
        ("seed = x\n", 1, "cannot parse"),
        ("seed = 1\nseed = 2\n", 2, "duplicate"),
        ("\n\njust words\n", 3, "key = value"),
        ("adapter =\n", 1, "empty"),
    ],
)
def test_errors_name_the_line(tmp_path, text, line, what):
    with pytest.raises(ConfigError, match=what) as exc:
        parse_config(write(tmp_path, text))
    assert exc.value.line == line
    assert str(exc.value).startswith(f"line {line}:")


def test_invalid_values():
    with pytest.raises(ConfigError):
        RunConfig(adapter="mlp")
    with pytest.raises(ConfigError):
        RunConfig(layer_tap="middle")
    with pytest.raises(ConfigError):
        RunConfig(pretrain_batch=1)


def test_missing_file():
    with pytest.raises(ConfigError):
        parse_config("/nonexistent/run.cfg")


@settings(max_examples=40, deadline=None)
@given(
    st.integers(0, 2**31),
    st.sampled_from(["none", "linear", "xattn", "cross_attention"]),
    st.sampled_from(["final", "penultimate"]),
    st.floats(0, 0.5, allow_nan=False),
    st.floats(1e-5, 1.0, allow_nan=False),
)
def test_round_trip(seed, adapter, tap, noise, lr):
    cfg = RunConfig(seed=seed, adapter=adapter, layer_tap=tap, noise=noise, stage2_lr=lr)
    text = cfg.to_text()
    assert from_text(text) == cfg
    assert from_text(text).to_text() == text


def test_parse_text_reports_lines():
    values = parse_text("seed = 3\n\nd = 16\n")
    assert values["seed"] == (3, 1) and values["d"] == (16, 3)

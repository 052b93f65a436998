import hashlib

import numpy as np
import pytest

from emma import analysis as An
from emma import pipeline as P
from emma import world as W
from emma.errors import ContractError, InputError
from emma.rng import stream


@pytest.fixture(scope="module")
def models(desk):
    stack = desk.pretrained(0)[0]
    cfg = desk.config(0)
    return {
        "init": P.build_model(cfg, stack),
        "none": P.build_model(cfg.replace(adapter="none"), stack),
        "trained": desk.trained(0).model,
    }


@pytest.fixture(scope="module")
def pairs():
    return W.make_confusable_pairs(64, stream(0, "confusable-pairs"), W.WorldConfig())


def test_init_neutrality(models, pairs, desk):
    assert An.distance_shift(models["init"], pairs).shift == 0.0
    report = An.mi_comparison(models["init"], models["none"], desk.splits(0)[1].samples[:300])
    assert report.adapted == report.raw


def test_identical_pair_rejected(models, pairs):
    dup = W.ConfusablePair(pairs[0].a, pairs[0].a, 0, "color")
    with pytest.raises(InputError):
        An.distance_shift(models["init"], [dup, pairs[1]])
    with pytest.raises(InputError):
        An.distance_shift(models["init"], pairs[:1])


def test_encoder_mismatch(models, desk):
    other = P.build_model(desk.config(1, adapter="none"), P.pretrain_encoders(desk.config(1, pretrain_steps=1))[0])
    with pytest.raises(ContractError):
        An.mi_comparison(models["trained"], other, desk.splits(0)[1].samples[:100])


def test_attribution_requires_linear(models, desk):
    with pytest.raises(ContractError):
        An.attribution_report(models["none"].adapter)
    report = An.attribution_report(models["init"].adapter)
    assert report.visual_mean == 1.0 and report.text_mean == 0.0


def test_init_attribution_figure(models, tmp_path):
    An.emit_report([An.attribution_report(models["init"].adapter)], tmp_path)
    svg = (tmp_path / "fig_attribution.svg").read_text()
    heights = [float(h) for h in __import__("re").findall(r'<rect x="[\d.]+" y="[\d.]+" width="[\d.]+" height="([\d.]+)" fill="#', svg)]
    visual, text = heights[:16], heights[16:28]
    assert len(set(visual)) == 1 and visual[0] > 0
    assert all(h == 0 for h in text)
    lines = (tmp_path / "attribution.csv").read_text().splitlines()
    assert lines[0] == "token_index,is_text,l1_norm"
    assert lines[1] == "0,0,1.000000" and lines[-1] == "27,1,0.000000"


def test_empty_report_list(tmp_path):
    out = tmp_path / "nothing"
    assert An.emit_report([], out) == []
    assert not out.exists()


def test_reports_are_deterministic(models, pairs, desk, tmp_path):
    samples = desk.splits(0)[1].samples
    digests = []
    for run in ("a", "b"):
        reports = [
            An.attribution_report(models["trained"].adapter),
            An.mi_comparison(models["trained"], models["none"], samples[:400]),
            An.distance_shift(models["trained"], pairs),
        ]
        paths = An.emit_report(reports, tmp_path / run)
        digests.append([hashlib.sha256(open(p, "rb").read()).hexdigest() for p in paths])
    assert digests[0] == digests[1]
    assert len(digests[0]) == 6
    header = (tmp_path / "a" / "mi.csv").read_text().splitlines()[0]
    assert header == "set,kind,mi_nats,k,n"
    assert (tmp_path / "a" / "distances.csv").read_text().splitlines()[0] == "pair_id,pre_l2,post_l2"


def test_standardize_unit_mean_square_norm():
    x = np.random.default_rng(0).standard_normal((100, 5)) * 7 + 3
    z = An.standardize(x)
    np.testing.assert_allclose(z.mean(axis=0), 0, atol=1e-12)
    assert np.mean(np.sum(z * z, axis=1)) == pytest.approx(1.0)

import itertools
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emma import world as W
from emma.errors import DigestError, FormatError, InputError
from emma.rng import stream

CFG = W.WorldConfig()
QUIET = W.WorldConfig(noise=0.0)


def scene(*objs):
    return W.Scene(tuple(W.Obj(*o) for o in objs))


RED_CIRCLE_BLUE_SQUARE = scene(("circle", "red", 3), ("square", "blue", 9))


def test_render_shape_and_determinism():
    a = W.render(RED_CIRCLE_BLUE_SQUARE, CFG, 11)
    b = W.render(RED_CIRCLE_BLUE_SQUARE, CFG, 11)
    assert a.shape == (16, 48) and a.dtype == np.float32
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != W.render(RED_CIRCLE_BLUE_SQUARE, CFG, 12).tobytes()


def test_noise_free_background_is_zero():
    img = W.render(RED_CIRCLE_BLUE_SQUARE, QUIET, 0)
    background = [c for c in range(16) if c not in (3, 9)]
    assert not img[background].any()
    assert img[3].any() and img[9].any()


def test_out_of_grid_rejected():
    with pytest.raises(InputError):
        W.render(scene(("circle", "red", 16)), CFG, 0)


def test_shared_cell_rejected():
    with pytest.raises(InputError):
        scene(("circle", "red", 2), ("square", "blue", 2))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32))
def test_color_change_is_local(seed):
    rng = stream(seed, "test")
    base = W.random_scene(rng, CFG, two_objects=True)
    idx = int(rng.integers(2))
    used = {o.color for o in base.objects}
    other = base.with_object(idx, color=next(c for c in W.COLORS if c not in used))
    a, b = W.render(base, CFG, seed), W.render(other, CFG, seed)
    cell = base.objects[idx].cell
    rest = [c for c in range(CFG.n) if c != cell]
    assert np.max(np.abs(a[rest] - b[rest])) == 0
    assert np.max(np.abs(a[cell] - b[cell])) > 0


def test_instruction_answers_by_construction():
    rng = np.random.default_rng(0)
    seen = {}
    for _ in range(200):
        ids, answer, ambiguous = W.make_instruction_task(RED_CIRCLE_BLUE_SQUARE, rng)
        seen[W.parse_instruction(ids)] = answer
        assert ambiguous
    assert seen[(W.COLOR_QUERY, "circle")] == W.answer_class("color", "red")
    assert seen[(W.COLOR_QUERY, "square")] == W.answer_class("color", "blue")
    assert len(seen) == 4


def test_single_object_is_unambiguous():
    rng = np.random.default_rng(0)
    for _ in range(20):
        _, _, ambiguous = W.make_instruction_task(scene(("cross", "green", 0)), rng)
        assert not ambiguous


def two_object_scenes():
    for (s1, s2), (c1, c2) in itertools.product(itertools.permutations(W.SHAPES, 2), itertools.permutations(W.COLORS, 2)):
        yield scene((s1, c1, 0), (s2, c2, 1))


def test_image_only_bayes_accuracy_is_exactly_one_quarter():
    for sc in two_object_scenes():
        queries = W.valid_queries(sc)
        answers = [W.answer_for(sc, *q) for q in queries]
        # queries are drawn uniformly, so the best image-only guess is the modal answer
        assert max(answers.count(a) for a in set(answers)) / len(answers) == 0.25
        # with the instruction, the answer is determined
        assert all(len({W.answer_for(sc, *q)}) == 1 for q in queries)


def test_generated_marginals():
    samples = W.generate(CFG, 1, 0, 10_000)
    amb = np.array([s.ambiguous for s in samples])
    assert abs(amb.mean() - CFG.p_ambiguous) < 0.03
    answers = np.array([s.answer for s in samples])[amb]
    freq = np.bincount(answers, minlength=W.NUM_CLASSES) / len(answers)
    np.testing.assert_allclose(freq, 1 / W.NUM_CLASSES, atol=0.03)
    for s in samples[:500]:
        assert s.answer == W.answer_for(s.scene, *W.parse_instruction(s.instruction))


def test_captions_identify_scenes():
    rng = stream(0, "captions-test")
    scenes = []
    while len(scenes) < 100:
        sc = W.random_scene(rng, CFG, bool(rng.random() < 0.5))
        if sc not in scenes:
            scenes.append(sc)
    captions = [W.make_caption(sc) for sc in scenes]
    assert all(len(c) <= CFG.m for c in captions)
    hits = sum(captions.index(W.make_caption(sc)) == i for i, sc in enumerate(scenes))
    assert hits == 100
    assert W.make_caption(scenes[0]) == W.make_caption(W.Scene(scenes[0].objects))


def test_response_names_queried_object():
    ids = W.instruction_ids(W.SHAPE_QUERY, "blue")
    assert W.response_ids(RED_CIRCLE_BLUE_SQUARE, ids) == [W.WORD_TOKEN["the"], W.COLOR_TOKEN["blue"], W.SHAPE_TOKEN["square"]]


def test_confusable_pairs():
    start = time.perf_counter()
    pairs = W.make_confusable_pairs(64, stream(0, "pairs"), CFG)
    assert time.perf_counter() - start < 1.0
    for p in pairs:
        diff = W.differing_attributes(p.a.scene, p.b.scene)
        assert diff == [(p.object_index, p.attribute)]
        assert p.a.patches.tobytes() != p.b.patches.tobytes()
        assert p.a.instruction == p.b.instruction
        kind, key = W.parse_instruction(p.a.instruction)
        assert kind == ("color" if p.attribute == "color" else "shape")
        assert W.referent(p.a.scene, kind, key).cell == p.a.scene.objects[p.object_index].cell


def test_sample_is_pure_function_of_seed():
    assert W.generate(CFG, 4, 10, 5) == W.generate(CFG, 4, 10, 5)
    assert W.generate(CFG, 4, 10, 5) != W.generate(CFG, 5, 10, 5)


def test_dataset_round_trip(tmp_path):
    ds = W.Dataset(CFG, W.generate(CFG, 0, 0, 50))
    path = tmp_path / "d.emmadata"
    digest = W.write_dataset(ds, path)
    back = W.read_dataset(path)
    assert back == ds
    assert W.write_dataset(back, tmp_path / "again.emmadata") == digest


def test_large_dataset_digest_stable(tmp_path):
    ds = W.Dataset(CFG, W.generate(CFG, 2, 0, 10_000))
    first = W.write_dataset(ds, tmp_path / "a")
    assert W.write_dataset(W.read_dataset(tmp_path / "a"), tmp_path / "b") == first


@pytest.fixture(scope="module")
def blob():
    return W.dataset_bytes(W.Dataset(CFG, W.generate(CFG, 0, 0, 5)))


def test_flipped_magic(blob):
    bad = bytearray(blob)
    bad[0] ^= 0xFF
    with pytest.raises(FormatError) as exc:
        W.parse_dataset(bytes(bad))
    assert exc.value.offset == 0


def test_flipped_payload_byte(blob):
    bad = bytearray(blob)
    bad[len(blob) // 2] ^= 0x01
    with pytest.raises(DigestError):
        W.parse_dataset(bytes(bad))


def test_truncation_reports_offset(blob):
    with pytest.raises(FormatError) as exc:
        W.parse_dataset(blob[: len(blob) // 2] + blob[-32:])
    assert exc.value.offset is not None and 0 < exc.value.offset <= len(blob)


def test_unknown_version(blob):
    bad = bytearray(blob)
    bad[8] = 99
    with pytest.raises(FormatError, match="version"):
        W.parse_dataset(bytes(bad))


def test_config_text_round_trip():
    cfg = W.WorldConfig(noise=0.1, p_ambiguous=0.25)
    assert W.WorldConfig.from_text(cfg.to_text()) == cfg

import collections

import numpy as np
import pytest

from mmprotect.data import (COLORS, SHAPES, TEMPLATES, TRIGGER_WORDS, DatasetError, admissible_vocab, gen_toy_data,
                            generate, load_dataset, save_dataset, tree_digest)


def test_six_templates_and_closed_answer_sets():
    assert len(TEMPLATES) == 6
    assert len(COLORS) == 8 and len(SHAPES) == 4


def test_samples_are_well_formed(toy):
    train, evals = toy
    for s in list(train) + list(evals):
        assert s.image.shape == (32, 32, 3)
        assert s.image.min() >= 0 and s.image.max() <= 1
        assert np.array_equal(s.image, np.round(s.image * 255) / 255)
        gold = s.meta["color"] if s.meta["template"] < 3 else s.meta["shape"]
        assert s.answer == gold
        assert s.answer in COLORS or s.answer in SHAPES


def test_train_and_eval_ids_disjoint(toy):
    train, evals = toy
    assert not {s.id for s in train} & {s.id for s in evals}


def test_generation_is_deterministic():
    a, _ = generate(8, 4, 3)
    b, _ = generate(8, 4, 3)
    assert [s.text for s in a] == [s.text for s in b]
    assert all(np.array_equal(x.image, y.image) for x, y in zip(a, b))


def test_color_distribution_near_uniform():
    train, _ = generate(512, 1, 0)
    counts = collections.Counter(s.meta["color"] for s in train)
    assert set(counts) == set(COLORS)
    for c in counts.values():
        assert 0.8 * 64 <= c <= 1.2 * 64


def test_shape_pixels_carry_the_color(toy):
    for s in toy[0]:
        target = np.asarray(COLORS[s.meta["color"]])
        close = np.abs(s.image - target).max(axis=-1) < 0.1
        assert close.sum() >= 40


def test_trigger_vocabulary_excludes_answers(tok):
    words = {tok.token_string(i)[1:] for i in admissible_vocab(tok)}
    assert words and words <= set(TRIGGER_WORDS)
    assert not words & (set(COLORS) | set(SHAPES))
    assert 50 <= len(words) <= 90


def test_save_load_round_trip(tmp_path, toy):
    train = toy[0]
    save_dataset(train, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.tokenizer.hash == train.tokenizer.hash
    for a, b in zip(train, back):
        assert (a.id, a.text, a.answer, a.meta) == (b.id, b.text, b.answer, b.meta)
        assert np.array_equal(a.image, b.image)


def test_refuses_nonempty_dir_unless_forced(tmp_path, toy):
    (tmp_path / "x").mkdir()
    (tmp_path / "x" / "junk").write_text("1")
    with pytest.raises(DatasetError):
        save_dataset(toy[0], tmp_path / "x")
    save_dataset(toy[0], tmp_path / "x", force=True)


def test_gen_toy_data_byte_identical(tmp_path):
    gen_toy_data(6, 3, 1, tmp_path / "a")
    gen_toy_data(6, 3, 1, tmp_path / "b")
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_corrupt_png_skipped_when_requested(tmp_path, toy):
    save_dataset(toy[0], tmp_path / "d")
    bad = toy[0].samples[1].id
    (tmp_path / "d" / "images" / f"{bad}.png").write_bytes(b"not a png")
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "d")
    errors = []
    ds = load_dataset(tmp_path / "d", skip_bad=True, errors=errors)
    assert len(ds) == len(toy[0]) - 1 and errors[0][0] == bad


def test_tampered_tokenizer_hash_rejected(tmp_path, toy):
    save_dataset(toy[0], tmp_path / "d")
    mf = tmp_path / "d" / "manifest.jsonl"
    mf.write_text(mf.read_text().replace(toy[0].tokenizer.hash, "0" * 16, 1))
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "d")

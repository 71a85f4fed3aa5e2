import itertools

import numpy as np
import pytest
import torch

from mmprotect.attack import (accuracy_drop, apply_transforms, blur3, evaluate_accuracy, finetune, mix,
                              normalize_answer, parse_transforms, recipe_parameters, run_attack, transform_text)
from mmprotect.config import AttackConfig
from mmprotect.data import Dataset, Sample, generate
from mmprotect.model import build_model


@pytest.fixture(scope="module")
def base(tok):
    m = build_model(tok.vocab_size, seed=0)
    m.eval()
    return m


def _subset(ds, n):
    return Dataset(ds.samples[:n], ds.tokenizer, ds.header)


def test_text_transform_hand_example():
    s = Sample("x", np.zeros((32, 32, 3)), "What  COLOR?", "Red")
    out = apply_transforms(s, ["punct", "case", "whitespace"])
    assert out.text == "what color" and out.answer == "Red"
    assert apply_transforms(s, []).text == s.text


def test_text_ops_idempotent_and_commuting():
    texts = ["What  COLOR is it?!", " Name, the  SHAPE. ", "a\tb  c"]
    ops = ("punct", "case", "whitespace")
    for t in texts:
        for op in ops:
            once = transform_text(t, op)
            assert transform_text(once, op) == once
        results = set()
        for perm in itertools.permutations(ops):
            x = t
            for op in perm:
                x = transform_text(x, op)
            results.add(x)
        assert len(results) == 1


def test_image_ops():
    const = np.full((32, 32, 3), 0.4)
    assert np.allclose(blur3(const), const)
    rng = np.random.default_rng(0)
    img = rng.random((32, 32, 3))
    q = apply_transforms(Sample("x", img, "", "a"), ["quantize4"]).image
    assert np.allclose(q * 15, np.round(q * 15))
    c = apply_transforms(Sample("x", img, "", "a"), ["croppad2"]).image
    assert np.all(c[:2] == 0) and np.all(c[:, -2:] == 0) and np.array_equal(c[2:-2, 2:-2], img[2:-2, 2:-2])


def test_parse_transforms():
    assert parse_transforms("blur3, case") == ("blur3", "case")
    assert parse_transforms(None) == ()
    with pytest.raises(ValueError):
        parse_transforms("jpeg")


def _tagged(ds, tag):
    return Dataset([Sample(s.id, s.image, s.text + tag, s.answer) for s in ds], ds.tokenizer, ds.header)


def test_mix_counts_and_seed(toy):
    clean = _subset(toy[0], 10)
    prot = _tagged(clean, " X")
    assert [s.text for s in mix(prot, clean, 0.0)] == [s.text for s in clean]
    assert [s.text for s in mix(prot, clean, 1.0)] == [s.text for s in prot]
    half = mix(prot, clean, 0.5, seed=3)
    assert len(half) == 10 and sum(s.text.endswith(" X") for s in half) == 5
    assert [s.text for s in half] == [s.text for s in mix(prot, clean, 0.5, seed=3)]
    for n in (1, 7, 10):
        c = _subset(toy[0], n)
        for p in (0.1, 0.33, 0.5, 0.9):
            got = sum(s.text.endswith(" X") for s in mix(_tagged(c, " X"), c, p))
            assert got == int(np.ceil(p * n - 1e-12))


def test_mix_rejects_id_mismatch(toy):
    clean = _subset(toy[0], 4)
    with pytest.raises(ValueError):
        mix(_subset(toy[0], 3), clean, 0.5)


def test_zero_epochs_unchanged(toy, base):
    m, curve = finetune(base, _subset(toy[0], 4), AttackConfig(epochs=0))
    assert curve == []
    for k, v in m.state_dict().items():
        assert torch.equal(v, base.state_dict()[k])


@pytest.mark.parametrize("recipe", ["projector_only", "low_rank"])
def test_recipe_mask_exact(toy, base, recipe):
    cfg = AttackConfig(recipe=recipe, epochs=2, rank=2)
    m, curve = finetune(base, _subset(toy[0], 8), cfg)
    assert len(curve) == 2
    allowed = set(recipe_parameters(m, cfg))
    before = base.state_dict()
    changed = set()
    for k, v in m.state_dict().items():
        if k not in before or not torch.equal(v, before[k]):
            changed.add(k)
    assert changed and changed <= allowed


def test_memorization_and_memorized_accuracy(toy, base):
    small = _subset(toy[0], 8)
    m, curve = finetune(base, small, AttackConfig(epochs=300, batch_size=8))
    assert len(curve) == 300 and curve[-1] < 0.05
    assert evaluate_accuracy(m, small) == 1.0


def test_untrained_model_near_chance(tok):
    _, evals = generate(8, 128, 5)
    accs = [evaluate_accuracy(build_model(evals.tokenizer.vocab_size, seed=s), evals) for s in range(3)]
    assert max(accs) <= 0.30


def test_finetune_deterministic(toy, base):
    cfg = AttackConfig(epochs=2)
    _, a = finetune(base, _subset(toy[0], 8), cfg)
    _, b = finetune(base, _subset(toy[0], 8), cfg)
    assert a == b


def test_normalization_and_drop():
    assert normalize_answer(" Red. ") == normalize_answer("red") == "red"
    assert accuracy_drop(0.7, 0.7) == 0
    assert accuracy_drop(0.87, 0.58) == pytest.approx(0.29)
    assert accuracy_drop(0.5, 0.6) == pytest.approx(-0.1)
    with pytest.raises(ValueError):
        accuracy_drop(1.2, 0.5)


def test_run_attack_report(toy, base):
    report, _ = run_attack(base, _subset(toy[0], 8), _subset(toy[1], 4),
                           AttackConfig(epochs=1, transforms=("case",)))
    d = report.to_json()
    assert 0 <= d["accuracy"] <= 1 and len(d["loss_curve"]) == 1
    assert d["transforms"] == ["case"] and d["n_train"] == 8 and d["n_eval"] == 4

"""Smoke test for the Python bindings. Run with `python smoke_test.py` or pytest."""

import json
import math
import os
import tempfile

import motbridge


def test_scoring():
    acc, p, r, f1, dis = motbridge.distinction_scores(3, 1, 0, 2)
    assert math.isclose(f1, (p + r) / 2)
    assert round(dis, 3) == 8.542
    assert math.isclose(motbridge.overall(8.21, 8.79), 8.50)


def test_mask_from_states():
    visual = [[1.0, 0.0], [0.0, 1.0], [0.9, 0.1]]
    text = [[1.0, 0.0]]
    m = motbridge.semantic_mask(visual, text, 0.5)
    assert m.visible == [True, False, True]
    assert not m.fallback_applied
    m = motbridge.mask_from_scores([0.1, 0.2, 0.05], 0.9)
    assert m.visible_count() == 1 and m.fallback_applied
    assert sum(motbridge.top_fraction_mask([0.3, 0.1, 0.2], 0.5)) == 2


def test_model_round_trip():
    sample = motbridge.gen_sample("distinction-cross", 7)
    assert sample.task == "distinction-cross"
    assert motbridge.Sample.from_json(sample.to_json()).id == sample.id
    model = motbridge.Model(seed=1)
    mask = model.semantic_mask(sample, 0.88)
    assert len(mask.visible) == len(mask.relevance) > 0
    losses = model.train_phase("stage1", 2, seed=1)
    assert len(losses) == 2 and all(math.isfinite(x) for x in losses)
    scene = json.loads(model.generate(sample, steps=2))
    assert scene["grid_size"] == [6, 6]
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.ckpt")
        model.save(path)
        again = motbridge.Model.load(path)
        assert again.generate(sample, steps=2) == model.generate(sample, steps=2)
    suite = motbridge.gen_suite(["distinction-cross"], 2, seed_start=100)
    report = json.loads(model.evaluate(suite, steps=2))
    assert 0.0 <= report["distinction"] <= 10.0


if __name__ == "__main__":
    for name, f in sorted(globals().items()):
        if name.startswith("test_") and callable(f):
            f()
            print(f"ok {name}")

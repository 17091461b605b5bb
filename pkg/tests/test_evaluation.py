import json
from types import SimpleNamespace

import numpy as np
import pytest

from hxbcos.autograd import Tensor
from hxbcos.data import synth_shapes
from hxbcos.evaluation import (
    Grid,
    accuracy,
    build_grids,
    grad_cam,
    pointing_game,
    quadrant_share,
)
from hxbcos.models import ModelConfig, build_model


class LookupModel:
    """Stand-in classifier: returns stored logits keyed by the encoded image bytes."""

    def __init__(self, manifest, logits_for):
        self.config = SimpleNamespace(input_channels=6, num_classes=manifest.num_classes)
        self.table = {}
        from hxbcos.data import encode_batch

        for i, s in enumerate(manifest.samples):
            key = encode_batch([s.image]).astype(np.float64)[0].tobytes()
            self.table[key] = logits_for(i, s)

    def __call__(self, x):
        return Tensor(np.stack([self.table[row.tobytes()] for row in x.data]))


@pytest.fixture(scope="module")
def manifest():
    return synth_shapes(10, 32, seed=0)


def perfect(manifest, confidence=None):
    def logits(i, s):
        z = np.full(4, -5.0)
        z[s.label] = 5.0 if confidence is None else confidence(i)
        return z
    return LookupModel(manifest, logits)


def tiny_bcos(**kw):
    cfg = dict(stage_widths=(6, 12), stage_strides=(1, 2), image_size=32)
    return build_model(ModelConfig(variant="ph", n=3, **{**cfg, **kw}))


# accuracy ------------------------------------------------------------------------------


def test_accuracy_of_constant_model_is_class_share(manifest):
    model = LookupModel(manifest, lambda i, s: np.array([1.0, 0, 0, 0]))
    labels = [s.label for s in manifest.split("test")]
    assert accuracy(model, manifest) == labels.count(0) / len(labels)


def test_ties_go_to_lowest_index(manifest):
    model = LookupModel(manifest, lambda i, s: np.zeros(4))
    labels = [s.label for s in manifest.split("test")]
    assert accuracy(model, manifest) == labels.count(0) / len(labels)


def test_accuracy_hand_counted(manifest):
    wrong = set(manifest.test_idx[:3])

    def logits(i, s):
        z = np.zeros(4)
        z[(s.label + (i in wrong)) % 4] = 1
        return z

    model = LookupModel(manifest, logits)
    assert accuracy(model, manifest) == pytest.approx(1 - 3 / len(manifest.test_idx))
    assert accuracy(perfect(manifest), manifest, split="train") == 1.0


# grids -----------------------------------------------------------------------------------


def test_grids_hold_four_distinct_correct_classes(manifest):
    grids = build_grids(perfect(manifest), manifest, 12, split="train")
    for g in grids:
        assert len(set(g.classes)) == 4
        assert g.image.shape == (3, 64, 64)
        for q, (idx, cls) in enumerate(zip(g.sample_indices, g.classes)):
            assert manifest.samples[idx].label == cls
            ys, xs = g.quadrant(q)
            np.testing.assert_array_equal(g.image[:, ys, xs], manifest.samples[idx].image)


def test_grids_are_seeded(manifest):
    a = build_grids(perfect(manifest), manifest, 5, seed=3, split="train")
    b = build_grids(perfect(manifest), manifest, 5, seed=3, split="train")
    assert [g.sample_indices for g in a] == [g.sample_indices for g in b]
    c = build_grids(perfect(manifest), manifest, 5, seed=4, split="train")
    assert [g.sample_indices for g in a] != [g.sample_indices for g in c]


def test_pool_keeps_most_confident(manifest):
    model = perfect(manifest, confidence=lambda i: float(i))
    grids = build_grids(model, manifest, 30, pool_size=1, split="train")
    best = {}
    for i in manifest.train_idx:
        best[manifest.samples[i].label] = max(best.get(manifest.samples[i].label, -1), i)
    for g in grids:
        assert all(best[c] == i for c, i in zip(g.classes, g.sample_indices))


def test_too_few_correct_classes(manifest):
    model = LookupModel(manifest, lambda i, s: np.array([1.0, 0, 0, 0]))
    with pytest.raises(ValueError, match="need 4 classes"):
        build_grids(model, manifest, 1)


# scoring ----------------------------------------------------------------------------------


def _grid(size=4):
    return Grid(np.zeros((3, 2 * size, 2 * size)), (0, 1, 2, 3), (0, 1, 2, 3))


def test_quadrant_share_rules():
    g = _grid()
    a = np.zeros((8, 8))
    a[4:, :4] = 2.0
    a[0, 0] = -100.0
    assert quadrant_share(a, g, 2) == (1.0, False)
    assert quadrant_share(a, g, 0) == (0.0, False)
    assert quadrant_share(np.ones((8, 8)), g, 1) == (0.25, False)
    assert quadrant_share(-np.ones((8, 8)), g, 3) == (0.25, True)


def test_uniform_baseline_is_a_quarter(manifest, tmp_path):
    grids = build_grids(perfect(manifest), manifest, 7, split="train")
    report = pointing_game(None, grids, "uniform")
    assert report.localization_accuracy == 0.25
    assert report.method == "uniform_baseline" and report.num_grids == 7
    report.write(tmp_path / "r.json")
    saved = json.loads((tmp_path / "r.json").read_text())
    assert saved["localization_accuracy"] == 0.25 and len(saved["per_grid"]) == 7


def test_unknown_method_rejected():
    with pytest.raises(ValueError):
        pointing_game(None, [], "lime")


def test_inherent_scores_are_shares():
    manifest = synth_shapes(6, 32, seed=1)
    model = tiny_bcos()
    grid = Grid(np.concatenate([np.concatenate([manifest.samples[i].image, manifest.samples[i + 1].image], 2)
                                for i in (0, 2)], 1), (0, 1, 2, 3), (0, 1, 2, 3))
    report = pointing_game(model, [grid], "inherent")
    assert all(0 <= s <= 1 for s in report.per_grid[0])


# Grad-CAM ---------------------------------------------------------------------------------


def test_gradcam_shape_and_sign():
    model = tiny_bcos()
    x = np.random.default_rng(0).random((6, 32, 32))
    cam = grad_cam(model, x, 1)
    assert cam.shape == (32, 32)
    assert cam.min() >= 0
    assert all(p.grad is None for p in model.parameters().values())


def test_gradcam_zero_for_dead_head():
    model = tiny_bcos()
    model.head.weight = Tensor(np.zeros_like(model.head.weight.data))
    x = np.random.default_rng(0).random((6, 32, 32))
    assert not np.any(grad_cam(model, x, 0))

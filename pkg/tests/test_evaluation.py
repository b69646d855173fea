import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from masdt import tensor as T
from masdt.detect import BranchModel
from masdt.evaluation import metrics
from masdt.evaluation.metrics import accuracy, auc, roc_auc, roc_curve
from masdt.evaluation.report import EvalResult, emit_report
from masdt.evaluation.saliency import (SaliencyMap, grad_cam, localization_ratio, pooled_ratio, read_pgm,
                                       region_means, region_to_grid, write_pgm)
from masdt.tensor import Tensor
from masdt.vit import TokenSequence, ViTConfig


def pairs_oracle(scores, labels):
    """P(s_fake > s_real) + 0.5 P(tie) by counting every fake/real pair."""
    s, y = np.asarray(scores), np.asarray(labels)
    pos, neg = s[y == 1], s[y == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def sweep_oracle(scores, labels):
    """Brute-force (fpr, tpr) at +inf, each distinct score descending, -inf."""
    s, y = np.asarray(scores), np.asarray(labels)
    pts = []
    for th in [np.inf, *sorted(set(s.tolist()), reverse=True), -np.inf]:
        pred = s >= th
        pts.append((np.sum(pred & (y == 0)) / np.sum(y == 0), np.sum(pred & (y == 1)) / np.sum(y == 1)))
    return np.array(pts)


def random_instance(seed, n=None, ties=False):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(4, 200))
    y = rng.integers(0, 2, n)
    y[:2] = [0, 1]
    s = rng.integers(0, 6, n) / 5.0 if ties else rng.random(n)
    return s, y


# -- accuracy --------------------------------------------------------------------

def test_accuracy_examples():
    y = np.array([1, 0, 1, 1, 0])
    assert accuracy(y.astype(float), y) == 1.0
    assert accuracy(np.full(5, 0.5), y) == pytest.approx(0.6)
    s = np.array([0.9, 0.2, 0.7, 0.4, 0.6])
    assert accuracy(1 - s, y) == pytest.approx(1 - accuracy(s, y))
    with pytest.raises(ValueError):
        accuracy([], [])
    with pytest.raises(ValueError):
        accuracy([0.1, 0.2], [1])


# -- roc / auc -------------------------------------------------------------------

def test_roc_examples():
    c = roc_curve([0.9, 0.1], [1, 0])
    assert (0.0, 1.0) in set(zip(c.fpr.tolist(), c.tpr.tolist()))
    assert auc(c) == 1.0
    flat = roc_curve(np.full(6, 0.3), [0, 1, 0, 1, 1, 0])
    assert flat.fpr.tolist() == [0.0, 1.0, 1.0] and flat.tpr.tolist() == [0.0, 1.0, 1.0]
    assert auc(flat) == 0.5
    with pytest.raises(ValueError):
        roc_curve([0.2, 0.4], [1, 1])


@pytest.mark.parametrize("ties", [False, True])
def test_roc_points_match_threshold_sweep(ties):
    for seed in range(20):
        s, y = random_instance(seed, 50, ties)
        c = roc_curve(s, y)
        np.testing.assert_array_equal(np.stack([c.fpr, c.tpr], 1), sweep_oracle(s, y))
        assert c.thresholds[0] == np.inf and c.thresholds[-1] == -np.inf
        assert len(c) == len(np.unique(s)) + 2


def test_auc_matches_pair_oracle_on_100_instances():
    for seed in range(100):
        s, y = random_instance(seed, ties=seed % 2 == 1)
        assert abs(roc_auc(s, y) - pairs_oracle(s, y)) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10.0), st.floats(-5.0, 5.0))
def test_auc_invariant_to_increasing_transforms(seed, a, b):
    s, y = random_instance(seed, ties=seed % 3 == 0)
    base = roc_auc(s, y)
    assert abs(roc_auc(a * s + b, y) - base) < 1e-12
    assert abs(roc_auc(np.exp(s), y) - base) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_auc_label_flip_complements(seed):
    s, y = random_instance(seed, ties=seed % 2 == 0)
    assert abs(roc_auc(s, y) + roc_auc(s, 1 - y) - 1.0) < 1e-12
    c = roc_curve(s, y)
    assert np.all(np.diff(c.fpr) >= 0) and np.all(np.diff(c.tpr) >= 0)
    assert (c.fpr[0], c.tpr[0], c.fpr[-1], c.tpr[-1]) == (0, 0, 1, 1)


def test_metrics_module_is_pure():
    s, y = random_instance(3)
    before = s.copy()
    metrics.roc_auc(s, y)
    assert np.array_equal(s, before)


# -- saliency --------------------------------------------------------------------

TOY = ViTConfig(image_size=16, patch_size=4, embed_dim=16, depth=2, num_heads=2)


def test_grad_cam_shape_range_and_determinism():
    branch = BranchModel.create("spatial", TOY, 0)
    img = np.random.default_rng(0).random((3, 16, 16))
    a, b = grad_cam(branch, img), grad_cam(branch, img)
    assert a.shape == (4, 4)
    assert a.values.min() >= 0 and a.values.max() <= 1
    assert np.array_equal(a.values, b.values)
    assert all(p.grad is None or not p.grad.any() for p in branch.model.parameters())


def test_grad_cam_matches_finite_differences():
    branch = BranchModel.create("spatial", TOY, 3)
    model = branch.model
    model.eval()
    enc, last = model.encoder, model.encoder.blocks[-1]
    img = np.random.default_rng(4).random((1, 3, 16, 16))
    with T.no_grad():
        seq = enc.embed(img)
        x = enc.run_blocks(seq.tokens, upto=len(enc.blocks) - 1)
        acts = last.norm1(x).data

    def logit(a):
        with T.no_grad():
            h = x + last.attn(Tensor(a))
            h = h + last.mlp(last.norm2(h))
            return float(model.classify(TokenSequence(enc.norm(h), seq.grid, True)).data[0])

    eps = 1e-5
    grads = np.zeros_like(acts)
    for idx in np.ndindex(acts.shape):
        up, down = acts.copy(), acts.copy()
        up[idx] += eps
        down[idx] -= eps
        grads[idx] = (logit(up) - logit(down)) / (2 * eps)
    cam = np.maximum(grads[0, 1:].mean(axis=1) * acts[0, 1:].sum(axis=1), 0.0)
    expected = (cam / cam.max()).reshape(seq.grid)
    assert np.abs(grad_cam(branch, img[0]).values - expected).max() < 1e-6


def test_grad_cam_rejects_nan_parameters():
    branch = BranchModel.create("spatial", TOY, 0)
    branch.model.parameters()[0].data[...] = np.nan
    with pytest.raises(ValueError, match="not finite"):
        grad_cam(branch, np.zeros((3, 16, 16)))


def test_saliency_map_validation():
    with pytest.raises(ValueError):
        SaliencyMap(np.array([[1.5]]))
    with pytest.raises(ValueError):
        SaliencyMap(np.zeros(4))
    SaliencyMap(np.zeros((2, 2)))  # all-zero map is allowed


def test_region_grid_and_ratio():
    region = np.zeros((16, 16), bool)
    region[:8, :6] = True
    grid = region_to_grid(region, 4)
    assert grid.tolist()[0] == [True, True, False, False]
    vals = np.where(grid, 1.0, 0.25)
    assert localization_ratio(SaliencyMap(vals), grid) == pytest.approx(4.0)
    with pytest.raises(ValueError):
        localization_ratio(SaliencyMap(vals), np.ones_like(grid))


def test_pooled_ratio_averages_before_dividing():
    grid = np.zeros((2, 2), bool)
    grid[0, 0] = True
    maps = [SaliencyMap(np.array([[1.0, 0.0], [0.0, 0.0]])), SaliencyMap(np.array([[0.5, 0.5], [0.5, 0.5]]))]
    means = [region_means(m, grid) for m in maps]
    assert means == [(1.0, 0.0), (0.5, 0.5)]
    assert localization_ratio(maps[0], grid) == float("inf")
    assert pooled_ratio(means) == pytest.approx(0.75 / 0.25)
    assert pooled_ratio([(0.0, 0.0)]) == float("inf")
    with pytest.raises(ValueError):
        pooled_ratio([])


def test_pgm_round_trip(tmp_path):
    vals = np.random.default_rng(1).random((3, 5))
    path = write_pgm(SaliencyMap(vals), tmp_path / "s" / "a.pgm", scale=2)
    assert path.read_bytes().startswith(b"P5\n10 6\n255\n")
    back = read_pgm(path)
    assert back.shape == (6, 10)
    assert np.abs(back[::2, ::2] - vals).max() <= 0.5 / 255 + 1e-12


# -- report ----------------------------------------------------------------------

def test_empty_report(tmp_path):
    written = emit_report([], tmp_path / "r")
    assert json.loads((tmp_path / "r" / "metrics.json").read_text()) == {}
    assert not (tmp_path / "r" / "roc.csv").exists() and "roc.csv" not in written


def test_report_files(tmp_path):
    s, y = random_instance(4, 40, ties=True)
    smap = SaliencyMap(np.eye(4))
    res = [EvalResult("test", "score", s, y, {"fake_x": smap}), EvalResult("test", "spatial_only", s ** 2, y)]
    written = emit_report(res, tmp_path)
    data = json.loads((tmp_path / "metrics.json").read_text())
    assert set(data["test"]) == {"score", "spatial_only"}
    assert data["test"]["score"]["auc"] == pytest.approx(pairs_oracle(s, y), abs=1e-12)
    assert data["test"]["score"]["acc"] == accuracy(s, y)
    rows = list(csv.reader((tmp_path / "roc.csv").open()))
    assert rows[0] == ["fpr", "tpr", "threshold"]
    assert len(rows) - 1 == len(np.unique(s)) + 2
    assert (tmp_path / "roc_test_spatial_only.csv").exists()
    assert np.array_equal(read_pgm(tmp_path / "saliency" / "fake_x.pgm"), np.eye(4))
    assert written["roc.png"].read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_report_surfaces_path_on_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        emit_report([], blocker / "sub")

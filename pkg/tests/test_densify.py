import json
import os
import sys

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

sys.path.insert(0, os.path.dirname(__file__))

from lrsgs.densify import (
    DensifyConfig,
    GradientAccumulator,
    MutationJournal,
    densify_and_prune,
    salient_transform,
    shape_stats,
)
from lrsgs.geometry import axis_angle_matrix_np, matrix_to_quat_np, quat_to_matrix_np
from lrsgs.scene import GaussianCollection, GaussianKind
from util import make_camera, random_collection, random_sky

F64 = torch.float64


def single(kind, scales, quaternion=(1.0, 0, 0, 0), opacity=0.5, mean=(0, 0, 0)):
    return GaussianCollection.single(kind, mean, scales, quaternion=quaternion,
                                     opacity=opacity, dtype=F64)


def rot_quat(axis, angle):
    return matrix_to_quat_np(axis_angle_matrix_np(np.asarray(axis, dtype=np.float64), angle))


def rotation_of(coll, i=0):
    q = coll.quaternions.detach().cpu().numpy()[i].astype(np.float64)
    return quat_to_matrix_np(q / np.linalg.norm(q))


def evaluate(coll, config=None):
    return salient_transform(coll, shape_stats(coll), config)


class TestShapeStats:
    @pytest.mark.parametrize("scales,lin,pla", [
        ((2.0, 1.0, 1.0), 0.5, 0.0),
        ((3.0, 3.0, 0.3), 0.0, 0.9),
        ((1.0, 1.0, 1.0), 0.0, 0.0),
    ])
    def test_nonsalient_examples(self, scales, lin, pla):
        s = shape_stats(single(GaussianKind.NON_SALIENT, scales))
        assert s.linearity[0] == pytest.approx(lin, abs=1e-12)
        assert s.planarity[0] == pytest.approx(pla, abs=1e-12)

    def test_salient_materialization(self):
        edge = shape_stats(single(GaussianKind.EDGE_SALIENT, (2.0, 0.5)))
        assert edge.sorted_scales[0] == pytest.approx([2.0, 0.5, 0.5])
        assert edge.linearity[0] == pytest.approx(0.75)
        assert edge.planarity[0] == pytest.approx(0.0)
        planar = shape_stats(single(GaussianKind.PLANAR_SALIENT, (1.0, 0.1)))
        assert planar.sorted_scales[0] == pytest.approx([1.0, 1.0, 0.1])
        assert planar.linearity[0] == pytest.approx(0.0)
        assert planar.planarity[0] == pytest.approx(0.9)

    @settings(deadline=None, max_examples=60)
    @given(st.tuples(*[st.floats(min_value=-3.0, max_value=3.0) for _ in range(3)]))
    def test_bounds(self, logs):
        coll = single(GaussianKind.NON_SALIENT, tuple(np.exp(logs)))
        s = shape_stats(coll)
        assert 0.0 <= s.linearity[0] <= 1.0
        assert 0.0 <= s.planarity[0] <= 1.0
        assert s.linearity[0] + s.planarity[0] <= 1.0 + 1e-12

    def test_sorted_descending(self):
        coll = random_collection(40, seed=3)
        s = shape_stats(coll)
        assert np.all(np.diff(s.sorted_scales, axis=1) <= 1e-12)


class TestSalientTransform:
    def test_upgrade_edge_after_two(self):
        coll = single(GaussianKind.NON_SALIENT, (2.0, 1.0, 1.0))
        assert evaluate(coll) == []
        assert coll.transform_counters[0] == 1
        assert coll.kinds[0] == GaussianKind.NON_SALIENT
        events = evaluate(coll)
        assert events == [{"event": "upgrade", "parent_id": 0, "child_ids": [],
                           "kind": "EDGE_SALIENT"}]
        assert coll.kinds[0] == GaussianKind.EDGE_SALIENT
        assert coll.transform_counters[0] == 0
        s = torch.exp(coll.log_scales[0]).tolist()
        assert s[0] == pytest.approx(2.0, abs=1e-12)
        assert s[1] == pytest.approx(1.0, abs=1e-12)

    def test_single_crossing_resets(self):
        coll = single(GaussianKind.NON_SALIENT, (2.0, 1.0, 1.0))
        evaluate(coll)
        with torch.no_grad():
            coll.log_scales[0] = 0.0  # isotropic, below threshold
        assert evaluate(coll) == []
        assert coll.transform_counters[0] == 0
        with torch.no_grad():
            coll.log_scales[0] = torch.log(torch.tensor([2.0, 1.0, 1.0], dtype=F64))
        assert evaluate(coll) == []
        assert evaluate(coll)[0]["event"] == "upgrade"

    def test_upgrade_planar_permuted_axes(self):
        # thin axis stored first; upgrade must move it to the third column
        q = rot_quat([1.0, 2.0, 3.0], 0.7)
        coll = single(GaussianKind.NON_SALIENT, (0.3, 3.0, 3.0), quaternion=q)
        r_before = rotation_of(coll)
        cov_before = coll.covariance().detach().numpy()[0]
        evaluate(coll)
        events = evaluate(coll)
        assert events[0]["kind"] == "PLANAR_SALIENT"
        assert coll.kinds[0] == GaussianKind.PLANAR_SALIENT
        s = shape_stats(coll)
        np.testing.assert_allclose(s.sorted_scales[0], [3.0, 3.0, 0.3], atol=1e-9)
        r_after = rotation_of(coll)
        assert np.linalg.det(r_after) == pytest.approx(1.0, abs=1e-9)
        # special direction (third column) is the original thin axis
        assert abs(r_after[:, 2] @ r_before[:, 0]) == pytest.approx(1.0, abs=1e-9)
        cov_after = coll.covariance().detach().numpy()[0]
        np.testing.assert_allclose(cov_after, cov_before, atol=1e-9)

    def test_upgrade_edge_averages_cross_scales(self):
        q = rot_quat([0.0, 1.0, 0.0], 1.1)
        coll = single(GaussianKind.NON_SALIENT, (3.0, 1.0, 0.6), quaternion=q)
        r_before = rotation_of(coll)
        evaluate(coll)
        evaluate(coll)
        assert coll.kinds[0] == GaussianKind.EDGE_SALIENT
        s = shape_stats(coll)
        np.testing.assert_allclose(s.sorted_scales[0], [3.0, 0.8, 0.8], atol=1e-9)
        r_after = rotation_of(coll)
        assert abs(r_after[:, 0] @ r_before[:, 0]) == pytest.approx(1.0, abs=1e-9)

    def test_downgrade_preserves_shape(self):
        coll = single(GaussianKind.EDGE_SALIENT, (1.05, 1.0))
        cov_before = coll.covariance().detach().numpy()[0]
        q_before = coll.quaternions.detach().numpy().copy()
        evaluate(coll)
        assert coll.kinds[0] == GaussianKind.EDGE_SALIENT
        events = evaluate(coll)
        assert events[0]["event"] == "downgrade"
        assert coll.kinds[0] == GaussianKind.NON_SALIENT
        s = torch.exp(coll.log_scales[0]).tolist()
        np.testing.assert_allclose(s, [1.05, 1.0, 1.0], atol=1e-12)
        np.testing.assert_array_equal(coll.quaternions.detach().numpy(), q_before)
        np.testing.assert_allclose(coll.covariance().detach().numpy()[0],
                                   cov_before, atol=1e-12)

    def test_downgrade_hysteresis_reset(self):
        coll = single(GaussianKind.EDGE_SALIENT, (1.05, 1.0))
        evaluate(coll)
        with torch.no_grad():
            coll.log_scales[0, 0] = np.log(2.0)  # elongated again
        assert evaluate(coll) == []
        assert coll.transform_counters[0] == 0
        with torch.no_grad():
            coll.log_scales[0, 0] = np.log(1.05)
        evaluate(coll)
        assert evaluate(coll)[0]["event"] == "downgrade"

    def test_elongated_salient_untouched(self):
        coll = single(GaussianKind.EDGE_SALIENT, (2.0, 0.5))
        assert evaluate(coll) == []
        assert evaluate(coll) == []
        assert coll.kinds[0] == GaussianKind.EDGE_SALIENT
        assert coll.transform_counters[0] == 0

    def test_empty(self):
        coll = GaussianCollection.empty()
        assert evaluate(coll) == []


def run_densify(coll, grad2d, grad3d=None, radius=None, width=64, seed=0,
                config=None):
    n = len(coll)
    g3 = np.zeros((n, 3)) if grad3d is None else np.asarray(grad3d, dtype=np.float64)
    return densify_and_prune(coll, np.asarray(grad2d, dtype=np.float64), g3,
                             radius, config, image_width=width,
                             rng=np.random.default_rng(seed))


class TestDensifyAndPrune:
    def test_edge_split_placement(self):
        coll = single(GaussianKind.EDGE_SALIENT, (2.0, 0.5))
        res = run_densify(coll, [1e-3])
        assert len(res.collection) == 2
        assert not res.kept.any()
        assert res.events == [{"event": "split", "parent_id": 0,
                               "child_ids": [0, 1], "kind": "EDGE_SALIENT"}]
        means = res.collection.means.detach().numpy()
        np.testing.assert_allclose(sorted(means[:, 0]), [-1.0, 1.0], atol=1e-12)
        np.testing.assert_allclose(means[:, 1:], 0.0, atol=1e-12)
        s = torch.exp(res.collection.log_scales).detach().numpy()
        np.testing.assert_allclose(s[:, 0], 2.0 / 1.6, atol=1e-12)
        np.testing.assert_allclose(s[:, 1], 0.5 / 1.6, atol=1e-12)
        assert (res.collection.kinds == GaussianKind.EDGE_SALIENT).all()

    def test_edge_split_displacement_parallel(self):
        q = rot_quat([0.2, 1.0, -0.4], 0.9)
        coll = single(GaussianKind.EDGE_SALIENT, (1.5, 0.3), quaternion=q)
        d_spec = rotation_of(coll)[:, 0]
        res = run_densify(coll, [1e-3])
        off = res.collection.means.detach().numpy()[0]  # parent at origin
        assert np.linalg.norm(np.cross(off, d_spec)) < 1e-9
        assert np.linalg.norm(off) == pytest.approx(0.75, abs=1e-9)

    def test_planar_split_in_plane(self):
        q = rot_quat([1.0, -0.5, 0.8], 1.3)
        coll = single(GaussianKind.PLANAR_SALIENT, (1.0, 0.1), quaternion=q)
        r = rotation_of(coll)
        normal = r[:, 2]
        g = np.array([[0.3, -0.2, 0.7]])
        res = run_densify(coll, [1e-3], grad3d=g)
        assert len(res.collection) == 2
        means = res.collection.means.detach().numpy()
        for off in means:
            assert abs(off @ normal) < 1e-9
            assert np.linalg.norm(off) == pytest.approx(0.5, abs=1e-9)
        ip = g[0] - (g[0] @ normal) * normal
        ip /= np.linalg.norm(ip)
        np.testing.assert_allclose(means[0], 0.5 * ip, atol=1e-9)
        s = torch.exp(res.collection.log_scales).detach().numpy()
        np.testing.assert_allclose(s[:, 0], 1.0 / 1.6, atol=1e-12)
        np.testing.assert_allclose(s[:, 1], 0.1, atol=1e-12)  # normal scale kept

    def test_planar_split_gradient_fallback(self):
        q = rot_quat([0.4, 0.9, -0.1], 0.6)
        coll = single(GaussianKind.PLANAR_SALIENT, (0.8, 0.05), quaternion=q)
        r = rotation_of(coll)
        res = run_densify(coll, [1e-3], grad3d=1e-15 * r[:, 2][None])
        means = res.collection.means.detach().numpy()
        np.testing.assert_allclose(means[0], 0.4 * r[:, 0], atol=1e-9)

    def test_nonsalient_split_sampled(self):
        coll = single(GaussianKind.NON_SALIENT, (0.2, 0.2, 0.2))
        res = run_densify(coll, [1e-3], seed=7)
        assert len(res.collection) == 2
        means = res.collection.means.detach().numpy()
        assert np.linalg.norm(means[0] - means[1]) > 1e-6
        s = torch.exp(res.collection.log_scales).detach().numpy()
        np.testing.assert_allclose(s, 0.2 / 1.6, atol=1e-12)
        # same seed, same children
        coll2 = single(GaussianKind.NON_SALIENT, (0.2, 0.2, 0.2))
        res2 = run_densify(coll2, [1e-3], seed=7)
        np.testing.assert_array_equal(means, res2.collection.means.detach().numpy())

    def test_clone_below_scale_threshold(self):
        coll = single(GaussianKind.NON_SALIENT, (0.01, 0.01, 0.01))
        res = run_densify(coll, [1e-3], grad3d=[[0.0, 0.0, 2.0]])
        assert len(res.collection) == 2
        assert res.kept.all()
        assert res.events[0]["event"] == "clone"
        assert res.events[0]["child_ids"] == [1]
        means = res.collection.means.detach().numpy()
        np.testing.assert_allclose(means[0], 0.0, atol=1e-12)
        np.testing.assert_allclose(means[1], [0, 0, 0.01], atol=1e-12)
        np.testing.assert_array_equal(
            res.collection.log_scales.detach().numpy()[0],
            res.collection.log_scales.detach().numpy()[1])

    def test_clone_zero_gradient_in_place(self):
        coll = single(GaussianKind.NON_SALIENT, (0.01, 0.01, 0.01))
        res = run_densify(coll, [1e-3])
        np.testing.assert_allclose(res.collection.means.detach().numpy()[1],
                                   0.0, atol=1e-12)

    def test_prune_low_opacity(self):
        a = single(GaussianKind.NON_SALIENT, (0.1, 0.1, 0.1), opacity=0.001)
        b = single(GaussianKind.NON_SALIENT, (0.1, 0.1, 0.1), opacity=0.5,
                   mean=(1, 0, 0))
        coll = GaussianCollection.concatenate(a, b)
        res = run_densify(coll, [0.0, 0.0])
        assert len(res.collection) == 1
        assert list(res.kept) == [False, True]
        assert res.events == [{"event": "prune", "parent_id": 0,
                               "child_ids": [], "kind": "NON_SALIENT"}]
        assert res.collection.means.detach().numpy()[0, 0] == 1.0

    def test_prune_screen_radius(self):
        coll = single(GaussianKind.NON_SALIENT, (0.1, 0.1, 0.1))
        res = run_densify(coll, [0.0], radius=np.array([20.0]), width=64)
        assert len(res.collection) == 0
        assert res.events[0]["event"] == "prune"
        # below the fraction, or no radius info: kept
        assert len(run_densify(coll, [0.0], radius=np.array([10.0])).collection) == 1
        assert len(run_densify(coll, [0.0], radius=np.array([np.inf])).collection) == 1
        assert len(run_densify(coll, [0.0]).collection) == 1

    def test_prune_beats_densify(self):
        coll = single(GaussianKind.NON_SALIENT, (0.2, 0.2, 0.2), opacity=0.001)
        res = run_densify(coll, [1e-3])
        assert len(res.collection) == 0
        assert [e["event"] for e in res.events] == ["prune"]

    def test_noop_returns_same_object(self):
        coll = random_collection(20, seed=1)
        res = run_densify(coll, np.zeros(20))
        assert res.collection is coll
        assert res.events == []
        assert not res.changed
        assert res.kept.all()

    def test_threshold_strict(self):
        coll = single(GaussianKind.NON_SALIENT, (0.2, 0.2, 0.2))
        assert not run_densify(coll, [2e-4]).changed
        assert run_densify(coll, [2.0001e-4]).changed

    def test_config_validation(self):
        with pytest.raises(ValueError):
            DensifyConfig(tau_max=0.1, tau_min=0.5)
        with pytest.raises(ValueError):
            DensifyConfig(split_factor=1.0)

    @staticmethod
    def weighted_volume(coll):
        o = coll.opacities().detach().numpy().astype(np.float64)
        s = coll.scales().detach().numpy().astype(np.float64)
        return float((o * s.prod(axis=1)).sum())

    def test_volume_bounded(self):
        for seed in range(4):
            coll = random_collection(60, seed=seed)
            rng = np.random.default_rng(seed + 100)
            g2 = rng.uniform(0, 5e-4, 60)
            g3 = rng.normal(0, 1, (60, 3))
            before = self.weighted_volume(coll)
            res = run_densify(coll, g2, grad3d=g3, seed=seed)
            assert self.weighted_volume(res.collection) <= 2.0 * before + 1e-9

    def test_events_replay_population(self):
        coll = random_collection(50, seed=9)
        with torch.no_grad():
            coll.log_scales[:12] = np.log(0.01)  # small enough to clone
        rng = np.random.default_rng(5)
        g2 = rng.uniform(0, 6e-4, 50)
        res = run_densify(coll, g2, grad3d=rng.normal(0, 1, (50, 3)), seed=2)
        splits = [e for e in res.events if e["event"] == "split"]
        clones = [e for e in res.events if e["event"] == "clone"]
        prunes = [e for e in res.events if e["event"] == "prune"]
        assert splits and clones  # seed chosen to exercise both
        n_keep = int(res.kept.sum())
        assert len(res.collection) == n_keep + 2 * len(splits) + len(clones)
        assert n_keep == 50 - len(splits) - len(prunes)
        # surviving rows keep their order and values
        old = coll.means.detach()[torch.from_numpy(res.kept)]
        assert torch.equal(res.collection.means.detach()[:n_keep], old)
        # children ids tile the appended rows exactly once
        ids = sorted(i for e in splits + clones for i in e["child_ids"])
        assert ids == list(range(n_keep, len(res.collection)))
        kinds = res.collection.kinds.numpy()
        for e in splits + clones:
            for c in e["child_ids"]:
                assert kinds[c] == GaussianKind[e["kind"]]
        assert (res.collection.transform_counters.numpy()[n_keep:] == 0).all()


class TestJournal:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "journal.jsonl"
        with MutationJournal(path) as j:
            j.log(100, [{"event": "split", "parent_id": 3, "child_ids": [7, 8],
                         "kind": "EDGE_SALIENT"}], node="background")
            j.log(200, [{"event": "prune", "parent_id": 1, "child_ids": [],
                         "kind": "NON_SALIENT"}])
        lines = [json.loads(l) for l in path.read_text().splitlines()]
        assert lines[0] == {"iter": 100, "event": "split", "parent_id": 3,
                            "child_ids": [7, 8], "kind": "EDGE_SALIENT",
                            "node": "background"}
        assert lines[1]["iter"] == 200
        with MutationJournal(path) as j:  # append, not truncate
            j.log(300, [{"event": "clone", "parent_id": 0, "child_ids": [9],
                         "kind": "NON_SALIENT"}])
        assert len(path.read_text().splitlines()) == 3


class TestGradientAccumulator:
    def test_accumulates_view_stats(self):
        from lrsgs.raster import render
        coll = random_collection(25, seed=4)
        frame = render(coll.as_world(), make_camera(), random_sky(0))
        (frame.color.sum() + frame.depth.sum()).backward()
        acc = GradientAccumulator(25)
        acc.add_view(frame.aux)
        acc.add_means_grad(0, coll.means.grad)
        vis = frame.aux["visible"].numpy()
        assert len(vis) > 0
        assert (acc.count[vis] == 1).all()
        assert np.isfinite(acc.mean_grad2d()).all()
        assert (acc.max_radius[vis] >= 0).all()
        assert np.abs(acc.grad3d).sum() > 0
        g2, g3, rad = acc.slices(0, 25)
        assert g2.shape == (25,) and g3.shape == (25, 3) and rad.shape == (25,)
        # a second identical view doubles sums, mean unchanged
        sums = acc.sum2d.copy()
        acc.add_view(frame.aux)
        np.testing.assert_allclose(acc.sum2d, 2 * sums)
        np.testing.assert_allclose(acc.mean_grad2d()[vis], sums[vis])
        acc.reset(30)
        assert acc.total == 30 and acc.sum2d.shape == (30,)

    def test_empty_aux_ignored(self):
        acc = GradientAccumulator(5)
        acc.add_view({})
        acc.add_means_grad(0, None)
        assert acc.count.sum() == 0

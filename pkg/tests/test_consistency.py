import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatmap.consistency import (Keyframe, LocalBank, OptimizerConfig, SelectionConfig, covisibility,
                                  global_sampling_probs, map_update_step, maybe_add_keyframe,
                                  optimize_views, post_refine, prune_transparent, refine_pose,
                                  rotation_error_deg, sample_global_views, select_local_views)
from splatmap.errors import EmptyKeyframeSet, NoKeyframes, NoTrackedPoints
from splatmap.gaussians import GaussianMap
from splatmap.geometry import Intrinsics, look_at, project_points, se3_exp
from splatmap.management import FrameInput, densify, seed_from_features
from splatmap.metrics import photometric_loss
from splatmap.rasterizer import WINDOW_Q, render, render_backward
from splatmap.synth import SynthConfig, synth_scene

K = Intrinsics(40.0, 40.0, 23.5, 23.5, 48, 48)
FRONT = look_at([0.0, 0.0, -2.0], [0.0, 0.0, 0.0])
BACK = look_at([0.0, 0.0, -2.0], [0.0, 0.0, -4.0])


def grid_points(n=5, half=0.4):
    g = np.linspace(-half, half, n)
    x, y = np.meshgrid(g, g)
    return np.c_[x.ravel(), y.ravel(), np.zeros(n * n)]


def frame(index, pose=FRONT, world=None):
    world = grid_points() if world is None else np.asarray(world, float)
    pix, d = project_points(pose, K, world)
    return FrameInput(index, pose, K, np.zeros((48, 48, 3)), world, pix, d)


@pytest.fixture(scope="module")
def small_scene():
    return synth_scene(SynthConfig(frames=4, image_size=48, gaussian_count=80, tracker_points=60))


class TestCovisibility:
    def test_self(self):
        f = frame(0)
        assert covisibility(f, f) == 1.0

    def test_facing_away(self):
        assert covisibility(frame(0), frame(1, BACK)) == 0.0

    def test_half_inside(self):
        # frustum half-width at depth 2 is 2 * 23.5 / 40 = 1.175
        inside = np.c_[np.linspace(-0.5, 0.5, 6), np.zeros(6), np.zeros(6)]
        outside = inside + [5.0, 0.0, 0.0]
        a = frame(0, world=np.vstack([inside, outside]))
        assert covisibility(a, frame(1)) == 0.5

    def test_no_points(self):
        with pytest.raises(NoTrackedPoints):
            covisibility(FrameInput(0, FRONT, K, np.zeros((48, 48, 3))), frame(1))


class TestKeyframeAdmission:
    def test_first_frame(self):
        store = []
        assert maybe_add_keyframe(store, frame(0), SelectionConfig())
        assert store[0].err == SelectionConfig().err_init

    def test_same_pose_within_interval(self):
        store = []
        cfg = SelectionConfig(t_k=15)
        maybe_add_keyframe(store, frame(0), cfg)
        assert not maybe_add_keyframe(store, frame(5), cfg)
        assert len(store) == 1

    def test_elapsed_interval(self):
        store = []
        cfg = SelectionConfig(t_k=15)
        maybe_add_keyframe(store, frame(0), cfg)
        assert maybe_add_keyframe(store, frame(15), cfg)
        assert [kf.kf_id for kf in store] == [0, 1]

    def test_low_overlap(self):
        store = []
        maybe_add_keyframe(store, frame(0), SelectionConfig())
        assert maybe_add_keyframe(store, frame(1, BACK, world=[[0.0, 0.0, -4.0]]), SelectionConfig())

    def test_deterministic(self, small_scene):
        runs = []
        for _ in range(2):
            store = []
            runs.append([maybe_add_keyframe(store, f, SelectionConfig(t_k=2)) for f in small_scene.frames])
        assert runs[0] == runs[1]


class TestLocalBank:
    def test_size_and_fifo(self):
        bank = LocalBank(size=3, t_local=1)
        views = [Keyframe(frame(i)) for i in range(7)]
        for v in views:
            bank.offer(v)
            assert len(bank) <= 3
        assert [v.index for v in bank] == [4, 5, 6]

    def test_admits_every_t_local(self):
        bank = LocalBank(size=10, t_local=3)
        admitted = [bank.offer(Keyframe(frame(i))) for i in range(9)]
        assert admitted == [True, False, False] * 3
        assert [v.index for v in bank] == [0, 3, 6]


class TestLocalViews:
    def test_empty_bank(self):
        assert select_local_views(LocalBank(5, 1), frame(9), 1) == []

    def test_picks_cofrustal(self):
        bank = LocalBank(5, 1)
        for i, pose in enumerate([BACK, FRONT, BACK]):
            bank.offer(Keyframe(frame(i, pose)))
        assert [v.index for v in select_local_views(bank, frame(9), 1)] == [1]

    def test_tie_goes_to_newer(self):
        bank = LocalBank(5, 1)
        for i in range(3):
            bank.offer(Keyframe(frame(i)))
        assert [v.index for v in select_local_views(bank, frame(9), 2)] == [2, 1]

    def test_default_single_local_view(self):
        assert SelectionConfig().n_local == 1


class TestSamplingProbs:
    def test_single(self):
        np.testing.assert_array_equal(global_sampling_probs([3], [0.2], 5, 0.05, 10.0), [1.0])

    def test_worked_example(self):
        p = global_sampling_probs([1, 3], [0.0, 0.0], 5, 0.1, 0.0)
        w = np.exp([-0.4, -0.2])
        np.testing.assert_allclose(p, w / w.sum(), rtol=1e-14)
        np.testing.assert_allclose(p, [0.4502, 0.5498], atol=5e-5)

    def test_uniform(self):
        np.testing.assert_allclose(global_sampling_probs([0, 4, 9], [0.1, 0.9, 0.3], 10, 0.0, 0.0),
                                   np.full(3, 1 / 3), rtol=1e-14)

    def test_empty(self):
        with pytest.raises(EmptyKeyframeSet):
            global_sampling_probs([], [], 0, 0.1, 1.0)

    def test_no_overflow_at_large_weights(self):
        p = global_sampling_probs([0, 1], [1.0, 1.0], 1, 0.05, 1000.0)
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p.sum(), 1.0, rtol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=2, max_size=12), st.floats(0.0, 1.0),
           st.floats(0.0, 20.0), st.data())
    def test_positive_normalised_and_err_monotone(self, errs, s1, s2, data):
        idx = np.arange(len(errs))
        p = global_sampling_probs(idx, errs, len(errs), s1, s2)
        assert np.all(p > 0)
        assert abs(p.sum() - 1.0) < 1e-12
        if s2 > 0.01:
            k = data.draw(st.integers(0, len(errs) - 1))
            bumped = np.array(errs)
            bumped[k] += 0.1
            q = global_sampling_probs(idx, bumped, len(errs), s1, s2)
            assert q[k] > p[k]
            others = np.arange(len(errs)) != k
            assert np.all(q[others] <= p[others] * (1 + 1e-12))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 15), st.floats(0.01, 2.0))
    def test_recency_monotone(self, n, s1):
        p = global_sampling_probs(np.arange(n), np.full(n, 0.3), n, s1, 10.0)
        assert np.all(np.diff(p) > 0)


def keyframes(ids, errs=None):
    errs = errs if errs is not None else [0.0] * len(ids)
    return [Keyframe(frame(i), kf_id=i, err=e) for i, e in zip(ids, errs)]


def single_draw_frequencies(kfs, i, s1, s2, trials, seed):
    rng = np.random.default_rng(seed)
    counts = {kf.kf_id: 0 for kf in kfs}
    for _ in range(trials):
        counts[sample_global_views(kfs, i, 1, rng, s1, s2)[0].kf_id] += 1
    return np.array([counts[kf.kf_id] for kf in kfs]) / trials


class TestSampleGlobalViews:
    def test_exhaustion(self):
        kfs = keyframes([0, 1, 2])
        got = sample_global_views(kfs, 3, 5, np.random.default_rng(0), 0.05, 10.0)
        assert {kf.kf_id for kf in got} == {0, 1, 2}

    def test_excludes(self):
        kfs = keyframes([0, 1, 2, 3])
        rng = np.random.default_rng(1)
        for _ in range(50):
            got = sample_global_views(kfs, 3, 2, rng, 0.05, 10.0, exclude=[kfs[3], kfs[1]])
            assert {kf.kf_id for kf in got} == {0, 2}

    def test_without_replacement(self):
        kfs = keyframes(range(8))
        rng = np.random.default_rng(2)
        for _ in range(200):
            got = sample_global_views(kfs, 8, 4, rng, 0.3, 0.0)
            assert len({id(k) for k in got}) == 4

    def test_seeded_determinism(self):
        kfs = keyframes(range(10), list(np.linspace(0, 0.5, 10)))
        runs = []
        for _ in range(2):
            rng = np.random.default_rng(7)
            runs.append([[k.kf_id for k in sample_global_views(kfs, 10, 3, rng, 0.05, 10.0)]
                         for _ in range(20)])
        assert runs[0] == runs[1]

    def test_monte_carlo_worked_example(self):
        f = single_draw_frequencies(keyframes([1, 3]), 5, 0.1, 0.0, 20000, seed=3)
        np.testing.assert_allclose(f, [0.4502, 0.5498], atol=0.015)


class TestLearningRateSchedule:
    def test_halves_per_halflife(self):
        opt = OptimizerConfig(post_lr_halflife=1000.0, post_lr_floor=0.01)
        np.testing.assert_allclose([opt.post_lr_factor(t) for t in (0, 1000, 3000)], [1.0, 0.5, 0.125])

    def test_floor(self):
        opt = OptimizerConfig(post_lr_halflife=10.0, post_lr_floor=0.01)
        assert opt.post_lr_factor(10_000) == 0.01

    def test_disabled(self):
        assert OptimizerConfig(post_lr_halflife=0.0).post_lr_factor(5000) == 1.0

    def test_scaled_touches_every_rate(self):
        opt = OptimizerConfig()
        half = opt.scaled(0.5)
        for name, lr in opt.group_lrs().items():
            assert half.group_lrs()[name] == 0.5 * lr
        assert half.lr_pose_rot == 0.5 * opt.lr_pose_rot
        assert half.lr_pose_trans == 0.5 * opt.lr_pose_trans
        assert half.beta1 == opt.beta1 and half.post_lr_halflife == opt.post_lr_halflife


class TestRefinePose:
    def test_zero_gradient(self):
        kf = Keyframe(frame(0))
        before = kf.pose.matrix()
        refine_pose(kf, np.zeros(6), OptimizerConfig())
        np.testing.assert_array_equal(kf.pose.matrix(), before)

    def test_unit_quaternion_preserved(self):
        kf = Keyframe(frame(0))
        rng = np.random.default_rng(4)
        for _ in range(100):
            refine_pose(kf, rng.normal(size=6), OptimizerConfig(lr_pose_rot=0.05, lr_pose_trans=0.05))
            assert abs(np.linalg.norm(kf.pose.rotation) - 1.0) < 1e-12

    @staticmethod
    def _recover(scene, steps, opt):
        # converged map: the ground-truth Gaussians themselves
        f = scene.frames[1]
        true = scene.true_poses[1]
        twist = np.r_[np.radians(0.5) * np.ones(3) / math.sqrt(3), 0.01 * np.array([1, -1, 1]) / math.sqrt(3)]
        kf = Keyframe(f, pose=se3_exp(twist).compose(true))

        def errors(p):
            return rotation_error_deg(p, true), np.linalg.norm(p.camera_center() - true.camera_center())

        r0, t0 = errors(kf.pose)
        for _ in range(steps):
            out = render(scene.gt_map, kf.pose, f.K, window_q=WINDOW_Q)
            _, g = photometric_loss(out.image, f.image)
            refine_pose(kf, render_backward(scene.gt_map, kf.pose, f.K, (0, 0, 0), g,
                                            forward=out).pose, opt)
        r1, t1 = errors(kf.pose)
        return r1 / r0, t1 / t0

    @pytest.mark.xfail(strict=True, reason="adaptive steps move rotation about lr_pose_rot per "
                                           "iteration, so 0.5 deg needs more than 100 steps")
    def test_recovers_perturbed_pose_in_100_steps(self, small_scene):
        r, t = self._recover(small_scene, 100, OptimizerConfig())
        assert r <= 0.5 and t <= 0.5

    def test_recovers_perturbed_pose(self, small_scene):
        opt = OptimizerConfig()
        # twice the iterations needed to undo 0.5 deg at one learning rate per step
        steps = int(2 * np.radians(0.5) / opt.lr_pose_rot)
        r, t = self._recover(small_scene, steps, opt)
        assert r <= 0.5
        assert t <= 0.5


def seeded_map(scene, frames):
    g = GaussianMap()
    for f in frames:
        densify(g, None, f, seed_from_features(f))
    return g


class TestOptimisation:
    def test_fixed_point_when_exact(self, small_scene):
        g = small_scene.gt_map.copy()
        opt = OptimizerConfig()
        views = []
        for f in small_scene.frames:
            img = render(g, f.pose, f.K, window_q=opt.render_window_q).image
            views.append(Keyframe(FrameInput(f.index, f.pose, f.K, img, f.tracked_world,
                                             f.tracked_pixels, f.tracked_depths)))
        before = {k: v.copy() for k, v in g.params.items()}
        poses = [v.pose.matrix() for v in views]
        for it in range(5):
            optimize_views(g, views, views[:1], opt, (0.0, 0.0, 0.0), it)
        for k in before:
            assert np.max(np.abs(g.params[k] - before[k])) < 1e-6
        for v, p in zip(views, poses):
            assert np.max(np.abs(v.pose.matrix() - p)) < 1e-6

    def test_err_decreases(self, small_scene):
        g = seeded_map(small_scene, small_scene.frames[:1])
        cfg = SelectionConfig(iters_per_keyframe=50)
        store = []
        maybe_add_keyframe(store, small_scene.frames[0], cfg)
        cur = store[0]
        rep = map_update_step(g, store, LocalBank(5, 3), cur, cfg, OptimizerConfig(),
                              np.random.default_rng(0))
        assert len(rep.losses) == 50
        assert rep.err_updates[0] < cfg.err_init
        assert rep.losses[-1] < rep.losses[0]
        assert cur.err == rep.err_updates[0]

    def test_no_keyframes(self, small_scene):
        with pytest.raises(NoKeyframes):
            map_update_step(GaussianMap(), [], LocalBank(5, 3), Keyframe(small_scene.frames[0]),
                            SelectionConfig(), OptimizerConfig(), np.random.default_rng(0))

    def test_current_pose_frozen(self, small_scene):
        g = seeded_map(small_scene, small_scene.frames[:2])
        cfg = SelectionConfig(iters_per_keyframe=5, t_k=1)
        store = []
        for f in small_scene.frames[:2]:
            maybe_add_keyframe(store, f, cfg)
        before = [kf.pose.matrix() for kf in store]
        map_update_step(g, store, LocalBank(5, 3), store[1], cfg, OptimizerConfig(),
                        np.random.default_rng(0))
        np.testing.assert_array_equal(store[1].pose.matrix(), before[1])
        assert np.any(store[0].pose.matrix() != before[0])

    def test_post_refine_zero_steps(self, small_scene):
        g = seeded_map(small_scene, small_scene.frames[:1])
        before = {k: v.copy() for k, v in g.params.items()}
        store = []
        maybe_add_keyframe(store, small_scene.frames[0], SelectionConfig())
        post_refine(g, store, 0, SelectionConfig(), OptimizerConfig(), np.random.default_rng(0))
        for k in before:
            np.testing.assert_array_equal(g.params[k], before[k])

    def test_post_refine_split_matches_single_call(self, small_scene):
        def run(chunks):
            g = seeded_map(small_scene, small_scene.frames[:2])
            store = []
            for f in small_scene.frames[:2]:
                maybe_add_keyframe(store, f, SelectionConfig(t_k=1))
            opt = OptimizerConfig(post_lr_halflife=2.0)
            rng = np.random.default_rng(5)
            done = 0
            for n in chunks:
                post_refine(g, store, n, SelectionConfig(prune_opacity=0.0), opt, rng, start=done)
                done += n
            return g, store

        g1, s1 = run([6])
        g2, s2 = run([2, 4])
        for k in g1.params:
            np.testing.assert_array_equal(g1.params[k], g2.params[k])
        for a, b in zip(s1, s2):
            np.testing.assert_array_equal(a.pose.matrix(), b.pose.matrix())

    def test_prune(self):
        g = GaussianMap.from_arrays(np.zeros((3, 3)), np.full(3, 0.1), None,
                                    np.array([0.001, 0.5, 0.004]), np.full((3, 3), 0.5))
        assert prune_transparent(g, 0.005) == 2
        assert len(g) == 1
        assert all(g.exp_avg[k].shape[0] == 1 for k in g.exp_avg)

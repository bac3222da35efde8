import numpy as np
import pytest

from pasdet import depthspace as dsp
from pasdet import renderer as R
from pasdet import scenes
from pasdet.featvol import FeatureVolume, GridSpec
from pasdet.geometry import AABB, CameraIntrinsics, Pose, pixel_grid_rays, ray_box_intersect_batch
from pasdet.nnet import autodiff as ad
from pasdet.nnet import check_gradients
from pasdet.nnet.layers import Heads, HeadsConfig
from pasdet.nnet.params import ParamStore


def samples_from(sigma, t, far, color=None, logits=None):
    sigma = np.asarray(sigma, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if color is None:
        color = np.zeros(sigma.shape + (3,))
    out = R.SampleOutput(ad.as_tensor(sigma), ad.as_tensor(color),
                         None if logits is None else ad.as_tensor(logits))
    return R.RaySamples(t, R.segment_lengths(t, far), out)


class TestComposite:
    def test_empty_medium(self):
        s = samples_from(np.zeros((2, 5)), np.tile(np.linspace(1, 3, 5), (2, 1)), 4.0,
                         color=np.ones((2, 5, 3)))
        res = R.composite(s, z_fallback=4.0)
        np.testing.assert_array_equal(res.weight_sum.data, 0.0)
        np.testing.assert_array_equal(res.color.data, 0.0)
        np.testing.assert_array_equal(res.depth.data, 4.0)

    def test_opaque_first_sample(self):
        color = np.array([[0.2, 0.4, 0.6], [1, 1, 1], [0, 0, 0]])
        s = samples_from([1e6, 1.0, 1.0], [1.0, 2.0, 3.0], 4.0, color=color)
        res = R.composite(s, 4.0)
        assert abs(res.weights.data[0] - 1) < 1e-12
        np.testing.assert_allclose(res.color.data, color[0], atol=1e-12)
        assert abs(res.depth.data - 1.0) < 1e-12

    def test_constant_sigma_closed_form(self):
        t0, t1, sigma = 0.5, 3.0, 0.8
        t = np.linspace(t0, t1, 257)[:-1]
        res = R.composite(samples_from(np.full(256, sigma), t, t1), 10.0)
        expected = 1 - np.exp(-sigma * (t1 - t0))
        assert abs(res.weight_sum.data - expected) <= 0.01 * expected

    def test_segment_split_invariance(self, rng):
        t = np.sort(rng.uniform(1, 5, 6))
        sigma = rng.uniform(0, 2, 6)
        color = rng.uniform(size=(6, 3))
        a = R.composite(samples_from(sigma, t, 6.0, color), 6.0)
        mid = 0.5 * (t[2] + t[3])
        t2 = np.insert(t, 3, mid)
        b = R.composite(samples_from(np.insert(sigma, 3, sigma[2]), t2, 6.0,
                                     np.insert(color, 3, color[2], axis=0)), 6.0)
        assert abs(a.weight_sum.data - b.weight_sum.data) <= 1e-9
        np.testing.assert_allclose(a.color.data, b.color.data, atol=1e-9)

    def test_weights_bounded_random_rays(self, rng):
        sigma = rng.exponential(3.0, size=(10_000, 24)) * (rng.uniform(size=(10_000, 24)) < 0.5)
        t = np.sort(rng.uniform(0.5, 6, size=(10_000, 24)), axis=1)
        t = t + np.arange(24) * 1e-6
        res = R.composite(samples_from(sigma, t, 6.2), 6.2)
        w = res.weights.data
        assert np.all(w >= 0)
        ws = res.weight_sum.data
        assert np.all((ws >= 0) & (ws <= 1))
        np.testing.assert_allclose(w.sum(-1), ws, atol=1e-12)

    def test_weight_sum_to_one_as_sigma_grows(self):
        t = np.array([1.0, 2.0, 3.0])
        sums = [float(R.composite(samples_from([0.0, s, 0.0], t, 4.0), 4.0).weight_sum.data)
                for s in (1, 10, 100, 1000)]
        assert np.all(np.diff(sums) >= 0) and sums[1] > sums[0] and abs(sums[-1] - 1) < 1e-12

    def test_semantics_distribution(self, rng):
        sigma = rng.exponential(1.0, (50, 8))
        t = np.tile(np.linspace(1, 4, 8), (50, 1))
        logits = rng.normal(size=(50, 8, 4))
        for kw in ({}, {"background": (1, 1, 1), "background_class": 3}):
            res = R.composite(samples_from(sigma, t, 5.0, logits=logits), 5.0, **kw)
            p = res.semantics.data
            assert np.all(p >= 0)
            np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-9)
        empty = R.composite(samples_from(np.zeros((1, 8)), t[:1], 5.0, logits=logits[:1]), 5.0)
        np.testing.assert_allclose(empty.semantics.data, 0.25)

    def test_background_fill(self):
        res = R.composite(samples_from(np.zeros(4), [1, 2, 3, 4], 5.0), 5.0, background=(0.3, 0.5, 0.7))
        np.testing.assert_allclose(res.color.data, [0.3, 0.5, 0.7])

    def test_validation(self):
        with pytest.raises(ValueError):
            samples_from(np.zeros(0), np.zeros(0), 1.0)
        with pytest.raises(ValueError):
            samples_from(np.zeros(3), [1.0, 1.0, 2.0], 3.0)
        with pytest.raises(ValueError):
            R.segment_lengths(np.array([1.0, 2.0]), 2.0)

    def test_gradients(self, rng):
        sig = ad.Tensor(rng.uniform(0.1, 2, (3, 6)), requires_grad=True)
        col = ad.Tensor(rng.uniform(0, 1, (3, 6, 3)), requires_grad=True)
        log = ad.Tensor(rng.normal(size=(3, 6, 4)), requires_grad=True)
        t = np.tile(np.linspace(1, 3, 6), (3, 1))
        ds = dsp.DepthSpace(0.8, 3.5, 5, "LnIS")
        wc, wd, ws = rng.normal(size=(3, 3)), rng.normal(size=3), rng.normal(size=(3, 4))

        def f():
            s = R.RaySamples(t, R.segment_lengths(t, 3.5), R.SampleOutput(sig, col, log))
            res = R.composite(s, 3.5, background=(0.9, 0.9, 0.9), background_class=3)
            bins = R.bin_logits(res, t, ds)
            return (ad.tsum(res.color * wc) + ad.tsum(res.depth * wd) + ad.tsum(res.semantics * ws)
                    + ad.tsum(bins))

        worst, _ = check_gradients(f, {"sigma": sig, "color": col, "logits": log})
        assert worst <= 1e-4


class TestBins:
    def test_bin_probabilities_sum_to_one(self, rng):
        ds = dsp.DepthSpace(0.5, 6.0, 9, "LnIS")
        t = dsp.sample_depths(ds, 16, rng, n_rays=20)
        res = R.composite(samples_from(rng.exponential(1.0, (20, 16)), t, ds.z_max), ds.z_max)
        p = R.bin_probabilities(res, t, ds).data
        np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
        assert np.all(R.bin_assignment(ds, t) <= ds.n_bins - 2)

    def test_empty_ray_goes_to_far_class(self):
        ds = dsp.DepthSpace(0.5, 6.0, 5, "US")
        t = dsp.sample_depths(ds, 8)
        res = R.composite(samples_from(np.zeros(8), t, ds.z_max), ds.z_max)
        np.testing.assert_allclose(R.bin_probabilities(res, t, ds).data, [0, 0, 0, 0, 1])


def gated_heads(bias):
    cfg = HeadsConfig(feature_width=2, n_classes=3, point_freqs=1, dir_freqs=1, hidden=(4, 4),
                      hidden_feature=3)
    heads = Heads(cfg, "h")
    store = ParamStore(0)
    heads.init(store)
    for n in store:
        store[n].data = np.zeros_like(store[n].data)
    store["h/geo/b2"].data[0] = bias
    return store, heads


class TestOpacity:
    GRID = GridSpec((2, 2, 2), 0.5, np.zeros(3))
    VOL = FeatureVolume(GRID, np.zeros((8, 2)), np.ones(8))

    def alpha(self, bias):
        store, heads = gated_heads(bias)
        return R.opacity_at(np.array([[0.3, 0.4, 0.5]]), store, heads, self.VOL).data[0]

    def test_limits(self):
        assert self.alpha(-60.0) < 1e-20
        assert self.alpha(1e3) == 1.0

    def test_unit_optical_depth(self):
        target = 1.0 / self.GRID.edge
        assert abs(self.alpha(np.log(np.expm1(target))) - (1 - np.exp(-1))) < 1e-12
        assert abs(1 - np.exp(-1) - 0.6321) < 1e-4


class TestFineResample:
    T = np.linspace(1.0, 5.0, 9)

    def test_single_segment(self, rng):
        w = np.zeros(9)
        w[3] = 0.7
        out = R.fine_resample(self.T, w, 64, rng)[0]
        assert np.all((out >= self.T[3]) & (out <= self.T[4]))

    def test_uniform_weights_stratified(self):
        out = R.fine_resample(self.T, np.ones(9), 8)[0]
        np.testing.assert_allclose(out, 1.0 + 4.0 * (np.arange(8) + 0.5) / 8, atol=1e-12)

    def test_two_spikes_statistics(self, rng):
        w = np.zeros(9)
        w[1], w[6] = 0.25, 0.75
        out = R.fine_resample(np.tile(self.T, (10_000, 1)), np.tile(w, (10_000, 1)), 1, rng)
        n = out.size
        in_first = np.sum((out >= self.T[1]) & (out <= self.T[2]))
        in_second = np.sum((out >= self.T[6]) & (out <= self.T[7]))
        assert in_first + in_second == n
        sd = np.sqrt(n * 0.25 * 0.75)
        assert abs(in_first - 0.25 * n) <= 3 * sd

    def test_sorted_and_in_range(self, rng):
        w = rng.uniform(size=(30, 9))
        out = R.fine_resample(np.tile(self.T, (30, 1)), w, 16, rng)
        assert np.all(np.diff(out, axis=1) >= 0)
        assert out.min() >= self.T[0] and out.max() <= self.T[-1]

    def test_zero_weights_fall_back(self):
        ds = dsp.DepthSpace(1.0, 5.0, 9, "LgIS")
        out = R.fine_resample(self.T, np.zeros(9), 8, None, ds)[0]
        np.testing.assert_allclose(out, dsp.sample_depths(ds, 8))
        with pytest.raises(ValueError):
            R.fine_resample(self.T, np.zeros(9), 8)

    def test_merge_depths_strictly_increasing(self):
        m = R.merge_depths(np.array([[1.0, 2.0, 3.0]]), np.array([[2.0, 2.0, 2.5]]))
        assert np.all(np.diff(m) > 0) and m.shape == (1, 6)


def one_box_scene():
    box = scenes.LabeledBox(np.array([2.0, 2.0, 0.4]), np.array([0.8, 0.8, 0.8]), 1,
                            (0.8, 0.2, 0.2))
    cam = CameraIntrinsics.from_fov(32, 32, 60.0)
    pose = Pose.look_at([2.0, 0.2, 1.2], [2.0, 2.0, 0.4])
    return scenes.Scene(np.zeros(3), np.array([4.0, 4.0, 2.5]), [box], [scenes.View(cam, pose)],
                        3, scenes.BACKGROUND, 0, "one")


class TestRenderView:
    def test_oracle_depth_matches_intersection(self):
        scene = one_box_scene()
        ds = scenes.depth_space(scene, 64, "LnIS")
        view = scene.views[0]
        field = R.BoxOracleField(scene.boxes, scene.n_classes + 1)
        out = R.render_view(field, view.camera, view.pose, ds,
                            R.RenderConfig(n_coarse=64, jitter=False, background_class=3))
        o, d = pixel_grid_rays(view.camera, view.pose)
        entry, exit_, hit = ray_box_intersect_batch(o.reshape(-1, 3), d.reshape(-1, 3),
                                                    scene.boxes[0].aabb.lo, scene.boxes[0].aabb.hi)
        entry = entry.reshape(32, 32)
        hit = hit.reshape(32, 32)
        assert hit.sum() > 50
        widths = dsp.bin_widths(ds)
        l = np.minimum(np.floor(dsp.bin_coordinate(ds, entry[hit])).astype(int), ds.n_bins - 3)
        tol = np.maximum(widths[l], widths[l + 1])
        ok = np.abs(out["depth"][hit] - entry[hit]) <= tol
        # a chord shorter than the sample spacing can slip between samples entirely
        chord = (exit_.reshape(32, 32) - entry)[hit]
        solid = chord > tol
        assert ok[solid].all()
        assert ok.mean() >= 0.95
        assert np.all(out["label"][hit][solid] == 1)
        assert np.all(out["label"][~hit] == scene.n_classes)

    def test_zero_density_is_background(self):
        scene = one_box_scene()
        ds = scenes.depth_space(scene, 16)
        view = scene.views[0]
        field = R.BoxOracleField([], 4)
        cfg = R.RenderConfig(16, 0, False, scene.background, scene.background_label)
        out = R.render_view(field, view.camera, view.pose, ds, cfg)
        np.testing.assert_allclose(out["color"], np.broadcast_to(scene.background, (32, 32, 3)))
        np.testing.assert_array_equal(out["depth"], ds.z_max)
        np.testing.assert_array_equal(out["label"], 3)

    def test_fine_pass_and_determinism(self):
        scene = one_box_scene()
        ds = scenes.depth_space(scene, 16)
        view = scene.views[0]
        field = R.BoxOracleField(scene.boxes, 4)
        o, d = pixel_grid_rays(view.camera, view.pose)
        cfg = R.RenderConfig(16, 8, True)
        a = R.render_rays(field, o.reshape(-1, 3)[:64], d.reshape(-1, 3)[:64], ds, cfg,
                          np.random.default_rng(3))
        b = R.render_rays(field, o.reshape(-1, 3)[:64], d.reshape(-1, 3)[:64], ds, cfg,
                          np.random.default_rng(3))
        assert set(a) == {"coarse", "fine"}
        assert a["fine"][0].t.shape == (64, 24)
        np.testing.assert_array_equal(a["fine"][1].depth.data, b["fine"][1].depth.data)


def test_near_field_quantization_bound():
    for n in (8, 16, 64):
        us = dsp.bin_widths(dsp.DepthSpace(0.5, 6.0, n, "US"))[0] / 2
        for s in ("LgIS", "LnIS"):
            assert dsp.bin_widths(dsp.DepthSpace(0.5, 6.0, n, s))[0] / 2 < us

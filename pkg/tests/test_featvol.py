import numpy as np
import pytest

from pasdet import featvol as fv
from pasdet.geometry import CameraIntrinsics, Pose
from pasdet.nnet import autodiff as ad
from pasdet.nnet import check_gradients
from pasdet.nnet.layers import Heads, HeadsConfig
from pasdet.nnet.params import ParamStore

CAM = CameraIntrinsics.from_fov(32, 32, 60.0)
GRID = fv.GridSpec((6, 6, 4), 0.25, np.array([-0.75, -0.75, 1.5]))


def const_map(value, channels=2, view=0):
    return fv.FeatureMap(view, np.full((channels, 8, 8), float(value)), (32, 32))


def random_map(rng, channels=2, view=0):
    return fv.FeatureMap(view, rng.normal(size=(channels, 8, 8)), (32, 32))


class TestGrid:
    def test_centers_c_order(self):
        g = fv.GridSpec((2, 3, 4), 0.5, np.zeros(3))
        c = g.centers()
        assert c.shape == (24, 3)
        np.testing.assert_allclose(c[0], [0.25, 0.25, 0.25])
        np.testing.assert_allclose(c[1], [0.25, 0.25, 0.75])
        np.testing.assert_allclose(c[4], [0.25, 0.75, 0.25])
        np.testing.assert_allclose(g.upper, [1.0, 1.5, 2.0])

    def test_covering(self):
        g = fv.GridSpec.covering([0, 0, 0], [4, 4, 2.5], 0.25)
        assert g.dims == (16, 16, 10)
        np.testing.assert_allclose(g.origin, 0.0)

    def test_validation(self):
        with pytest.raises(ValueError):
            fv.GridSpec((0, 1, 1), 1.0, np.zeros(3))
        with pytest.raises(ValueError):
            fv.GridSpec((1, 1, 1), 0.0, np.zeros(3))


class TestExtractor:
    def store(self, seed=0):
        s = ParamStore(seed)
        fv.init_extractor(s, channels=3, hidden=5)
        return s

    def test_zero_image_zero_params(self):
        s = self.store()
        for n in s:
            s[n].data = np.zeros_like(s[n].data)
        fm = fv.extract_features(np.zeros((16, 12, 3)), s)
        assert fm.data.shape == (3, 4, 3)
        np.testing.assert_array_equal(fm.data, 0.0)

    def test_stride_four_equivariance(self, rng):
        s = self.store()
        img = rng.uniform(size=(16, 20, 3))
        shifted = np.roll(img, 4, axis=1)
        a = fv.extract_features(img, s).data
        b = fv.extract_features(shifted, s).data
        np.testing.assert_allclose(b[:, :, 1:], a[:, :, :-1], atol=1e-15)

    def test_bad_dimensions(self, rng):
        with pytest.raises(ValueError):
            fv.extract_features(rng.uniform(size=(10, 12, 3)), self.store())

    def test_gradients(self, rng):
        s = self.store(2)
        imgs = [rng.uniform(size=(8, 8, 3)) for _ in range(2)]
        w = rng.normal(size=(8, 3))
        worst, _ = check_gradients(lambda: ad.tsum(fv.extract_flat(s, imgs) * w), dict(s.items()))
        assert worst <= 1e-4


def facing_pose(z_offset=0.0):
    # identity orientation looks down +z, grid sits in front at z in [1.5, 2.5]
    return Pose(np.eye(3), np.array([0.0, 0.0, z_offset]))


class TestBackproject:
    def test_behind_all_cameras(self):
        grid = fv.GridSpec((2, 2, 2), 0.1, np.array([0.0, 0.0, -3.0]))
        vol = fv.backproject([const_map(1.0)], [CAM], [facing_pose()], grid)
        np.testing.assert_array_equal(vol.hits, 0)
        np.testing.assert_array_equal(vol.array(), 0.0)

    def test_single_constant_view(self):
        wide = fv.GridSpec((16, 6, 4), 0.25, np.array([-2.0, -0.75, 1.5]))
        vol = fv.backproject([const_map(2.5)], [CAM], [facing_pose()], wide)
        seen = vol.hits > 0
        assert seen.any() and (~seen).any()
        np.testing.assert_allclose(vol.array()[seen], 2.5, atol=1e-14)
        np.testing.assert_array_equal(vol.array()[~seen], 0.0)

    def test_two_views_average(self):
        poses = [facing_pose(), facing_pose(-0.2)]
        vol = fv.backproject([const_map(1.0), const_map(3.0, view=1)], [CAM, CAM], poses, GRID)
        both = vol.hits == 2
        assert both.any()
        np.testing.assert_allclose(vol.array()[both], 2.0, atol=1e-14)

    def test_linearity_and_duplicate_views(self, rng):
        a, b = random_map(rng), random_map(rng)
        summed = fv.FeatureMap(0, a.data + b.data, (32, 32))
        pose = [facing_pose()]
        va = fv.backproject([a], [CAM], pose, GRID).array()
        vb = fv.backproject([b], [CAM], pose, GRID).array()
        vs = fv.backproject([summed], [CAM], pose, GRID).array()
        np.testing.assert_allclose(vs, va + vb, atol=1e-12)
        dup = fv.backproject([a, a], [CAM, CAM], pose * 2, GRID).array()
        np.testing.assert_allclose(dup, va, atol=1e-12)

    def test_flat_path_matches(self, rng):
        maps = [random_map(rng), random_map(rng, view=1)]
        poses = [facing_pose(), facing_pose(-0.3)]
        mat, hits = fv.backprojection_matrix(GRID, [CAM, CAM], poses)
        flat = np.concatenate([m.flat() for m in maps])
        a = fv.backproject_flat(mat, hits, GRID, ad.as_tensor(flat)).array()
        np.testing.assert_allclose(a, fv.backproject(maps, [CAM, CAM], poses, GRID).array())

    def test_mismatched_inputs(self, rng):
        with pytest.raises(ValueError):
            fv.backproject([random_map(rng)], [CAM, CAM], [facing_pose()], GRID)


class TestTrilinear:
    def volume(self, rng, channels=3):
        return fv.FeatureVolume(GRID, rng.normal(size=(GRID.n_voxels, channels)), np.ones(GRID.n_voxels))

    def test_voxel_centers(self, rng):
        vol = self.volume(rng)
        np.testing.assert_allclose(fv.trilinear_sample(vol, GRID.centers()), vol.array(), atol=1e-14)

    def test_midpoint_is_mean(self, rng):
        vol = self.volume(rng)
        c = GRID.centers()
        mid = 0.5 * (c[0] + c[1])
        np.testing.assert_allclose(fv.trilinear_sample(vol, mid[None])[0],
                                   0.5 * (vol.array()[0] + vol.array()[1]), atol=1e-14)

    def test_brute_force(self, rng):
        vol = self.volume(rng)
        feats = vol.array().reshape(*GRID.dims, -1)
        pts = rng.uniform(GRID.origin + 0.5 * GRID.edge, GRID.upper - 0.5 * GRID.edge, (200, 3))
        got = fv.trilinear_sample(vol, pts)
        for p, g in zip(pts, got):
            q = (p - GRID.origin) / GRID.edge - 0.5
            i0 = np.floor(q).astype(int)
            f = q - i0
            ref = np.zeros(feats.shape[-1])
            for dx in (0, 1):
                for dy in (0, 1):
                    for dz in (0, 1):
                        w = ((f[0] if dx else 1 - f[0]) * (f[1] if dy else 1 - f[1])
                             * (f[2] if dz else 1 - f[2]))
                        ref += w * feats[i0[0] + dx, i0[1] + dy, i0[2] + dz]
            np.testing.assert_allclose(g, ref, atol=1e-12)

    def test_out_of_bounds_zero(self, rng):
        vol = self.volume(rng)
        out = fv.trilinear_sample(vol, np.array([GRID.upper + 0.01, GRID.origin - 1.0]))
        np.testing.assert_array_equal(out, 0.0)

    def test_continuous_across_voxel_boundary(self, rng):
        vol = self.volume(rng)
        c = GRID.centers()
        boundary = c[0] + np.array([0.0, 0.0, 0.5 * GRID.edge])
        eps = np.array([0.0, 0.0, 1e-9])
        a, b = fv.trilinear_sample(vol, np.stack([boundary - eps, boundary + eps]))
        np.testing.assert_allclose(a, b, atol=1e-7)

    def test_tensor_features_gradient(self, rng):
        feats = ad.Tensor(rng.normal(size=(GRID.n_voxels, 2)), requires_grad=True)
        vol = fv.FeatureVolume(GRID, feats, np.ones(GRID.n_voxels))
        pts = rng.uniform(GRID.origin, GRID.upper, (30, 3))
        w = rng.normal(size=(30, 2))
        worst, _ = check_gradients(lambda: ad.tsum(fv.trilinear_sample(vol, pts) * w), {"f": feats})
        assert worst <= 1e-4


def gate_heads(bias):
    cfg = HeadsConfig(feature_width=3, n_classes=2, point_freqs=1, dir_freqs=1, hidden=(4, 4),
                      hidden_feature=2)
    heads = Heads(cfg, "g")
    store = ParamStore(0)
    heads.init(store)
    for n in store:
        store[n].data = np.zeros_like(store[n].data)
    store["g/geo/b2"].data[0] = bias
    return store, heads


class TestGate:
    def test_limits_and_known_sigma(self, rng):
        vol = fv.FeatureVolume(GRID, rng.normal(size=(GRID.n_voxels, 3)), np.ones(GRID.n_voxels))
        store, heads = gate_heads(-80.0)
        np.testing.assert_allclose(fv.opacity_gate(vol, store, heads).array(), 0.0, atol=1e-30)
        store, heads = gate_heads(1e4)
        np.testing.assert_array_equal(fv.opacity_gate(vol, store, heads).array(), vol.array())
        sigma = 3.0
        store, heads = gate_heads(np.log(np.expm1(sigma)))
        scale = 1 - np.exp(-sigma * GRID.edge)
        np.testing.assert_allclose(fv.opacity_gate(vol, store, heads).array(), vol.array() * scale,
                                   rtol=1e-12)


def test_volume_dump_round_trip(tmp_path, rng):
    vol = fv.FeatureVolume(GRID, rng.normal(size=(GRID.n_voxels, 4)), rng.integers(0, 3, GRID.n_voxels) * 1.0)
    fv.save_volume(tmp_path / "v.bin", vol)
    back = fv.load_volume(tmp_path / "v.bin")
    assert back.grid.dims == GRID.dims and back.grid.edge == GRID.edge
    np.testing.assert_array_equal(back.grid.origin, GRID.origin)
    np.testing.assert_array_equal(back.array(), vol.array())
    np.testing.assert_array_equal(back.hits, vol.hits)
    (tmp_path / "bad.bin").write_bytes(b"nope" * 10)
    with pytest.raises(ValueError):
        fv.load_volume(tmp_path / "bad.bin")

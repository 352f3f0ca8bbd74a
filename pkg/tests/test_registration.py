import numpy as np
import pytest

from voxpatch import (
    Patch,
    RigidTransform,
    apply_transform,
    geometric_distance,
    icp_align,
    resample_patch,
)
from voxpatch.registration import ROTATIONS_24, _kabsch


def random_patch(extent, n_occupied, seed):
    rng = np.random.default_rng(seed)
    occ = np.zeros((extent,) * 3, dtype=bool)
    while occ.sum() < n_occupied:
        idx = rng.integers(0, extent, size=3)
        occ[tuple(idx)] = True
    return Patch((0, 0, 0), occ)


def rotation_about_z(deg):
    a = np.radians(deg)
    return np.array([[np.cos(a), -np.sin(a), 0],
                     [np.sin(a), np.cos(a), 0],
                     [0, 0, 1]])


class TestRigidTransform:
    def test_identity(self):
        pts = np.random.default_rng(0).random((10, 3))
        assert np.allclose(apply_transform(pts, RigidTransform.identity()), pts)

    def test_translation(self):
        T = RigidTransform(np.eye(3), [1, 0, 0])
        assert np.allclose(T.apply([[0, 0, 0]]), [[1, 0, 0]])

    def test_reflection(self):
        T = RigidTransform(np.eye(3), np.zeros(3), reflect=True)
        assert np.allclose(T.apply([[1, 2, 3]]), [[-1, 2, 3]])

    def test_rejects_improper_rotation(self):
        with pytest.raises(ValueError):
            RigidTransform(np.diag([-1.0, 1.0, 1.0]), np.zeros(3))

    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError):
            RigidTransform(np.eye(3) * 2.0, np.zeros(3))

    def test_rotation_bank_is_proper(self):
        assert len(ROTATIONS_24) == 24
        for R in ROTATIONS_24:
            assert np.allclose(R.T @ R, np.eye(3))
            assert np.isclose(np.linalg.det(R), 1.0)


class TestKabsch:
    def test_exact_recovery_noise_free(self):
        rng = np.random.default_rng(1)
        src = rng.random((40, 3)) * 10
        R_true = rotation_about_z(25)
        t_true = np.array([1.0, -2.0, 0.5])
        dst = src @ R_true.T + t_true
        R, t = _kabsch(src, dst)
        assert np.abs(R - R_true).max() < 1e-9
        assert np.abs(t - t_true).max() < 1e-9


class TestIcp:
    def test_self_alignment_converges_immediately(self):
        rng = np.random.default_rng(2)
        pts = rng.random((100, 3)) * 10
        res = icp_align(pts, pts, RigidTransform.identity())
        assert res.converged and res.iterations == 1
        assert res.distance < 1e-12

    def test_translation_recovery(self):
        rng = np.random.default_rng(3)
        src = rng.random((80, 3)) * 10
        dst = src + np.array([3.0, 1.0, -2.0])
        init = RigidTransform(np.eye(3), dst.mean(axis=0) - src.mean(axis=0))
        res = icp_align(src, dst, init)
        assert np.abs(res.transform.rotation - np.eye(3)).max() < 1e-6
        assert np.abs(res.transform.translation - [3, 1, -2]).max() < 1e-6

    def test_rotation_translation_recovery(self):
        rng = np.random.default_rng(4)
        src = rng.random((120, 3)) * 10
        R_true = rotation_about_z(10)
        t_true = np.array([0.5, -1.0, 2.0])
        dst = src @ R_true.T + t_true
        init = RigidTransform(np.eye(3), dst.mean(axis=0) - src.mean(axis=0))
        res = icp_align(src, dst, init, max_iters=50)
        assert np.abs(res.transform.rotation - R_true).max() < 1e-4
        assert np.abs(res.transform.translation - t_true).max() < 1e-4

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            icp_align(np.zeros((0, 3)), np.ones((3, 3)), RigidTransform.identity())


class TestGeometricDistance:
    def test_identity_zero(self):
        p = random_patch(6, 20, 0)
        assert geometric_distance(p, p).distance == 0.0

    def test_translation_zero(self):
        occ1 = np.zeros((8, 8, 8), dtype=bool)
        occ1[1:3, 1:4, 1:2] = True
        occ2 = np.roll(occ1, (2, 1, 3), axis=(0, 1, 2))
        d = geometric_distance(Patch((0, 0, 0), occ1), Patch((0, 0, 0), occ2))
        assert d.distance < 1e-9

    def test_mirror_zero_with_reflect_flag(self):
        occ = np.zeros((6, 6, 6), dtype=bool)
        occ[0, 1, 2] = occ[1, 1, 2] = occ[2, 1, 2] = occ[0, 2, 2] = occ[0, 1, 3] = True
        occ[2, 2, 3] = True
        mirrored = occ[::-1, :, :].copy()
        res = geometric_distance(Patch((0, 0, 0), mirrored), Patch((0, 0, 0), occ))
        assert res.distance < 1e-9

    def test_disjoint_patterns_positive(self):
        p1 = random_patch(6, 20, 1)
        p2 = random_patch(6, 20, 2)
        # lower bound from the 48 axis-aligned maps x integer translations
        oracle = _axis_aligned_lower_bound(p1, p2)
        res = geometric_distance(p1, p2)
        assert oracle > 0
        assert res.distance > 0
        # ICP is local; it should land near the discrete search optimum
        assert res.distance <= 1.5 * oracle

    @pytest.mark.parametrize("seed", range(5))
    def test_invariance_under_axis_aligned_maps(self, seed):
        p = random_patch(6, 15, 100 + seed)
        rng = np.random.default_rng(seed)
        for _ in range(4):
            R = ROTATIONS_24[rng.integers(0, 24)]
            reflect = bool(rng.integers(0, 2))
            g = transform_patch_lattice(p, R, reflect)
            assert geometric_distance(g, p).distance <= 1e-6

    def test_approximate_symmetry(self):
        vals = []
        for seed in range(8):
            p = random_patch(6, 15, 200 + seed)
            q = random_patch(6, 15, 300 + seed)
            vals.append(abs(geometric_distance(p, q).distance -
                            geometric_distance(q, p).distance))
        assert max(vals) <= 0.05

    def test_empty_rejected(self):
        p = random_patch(6, 10, 0)
        e = Patch((0, 0, 0), np.zeros((6, 6, 6), dtype=bool))
        with pytest.raises(ValueError):
            geometric_distance(p, e)


def transform_patch_lattice(p, R, reflect):
    """Apply an axis-aligned orthogonal map to a patch about its center."""
    pts = np.argwhere(p.data).astype(float) + 0.5 - p.extent / 2
    if reflect:
        pts[:, 0] *= -1
    moved = pts @ R.T + p.extent / 2
    occ = np.zeros_like(p.data)
    cells = np.floor(moved).astype(int)
    occ[cells[:, 0], cells[:, 1], cells[:, 2]] = True
    return Patch((0, 0, 0), occ)


def _axis_aligned_lower_bound(p1, p2):
    """Brute-force best normalized chamfer over 48 maps x small integer shifts."""
    from voxpatch.registration import _normalized_distance
    src = np.argwhere(p1.data).astype(float) + 0.5 - p1.extent / 2
    dst = np.argwhere(p2.data).astype(float) + 0.5 - p2.extent / 2
    best = np.inf
    for reflect in (False, True):
        s = src.copy()
        if reflect:
            s[:, 0] *= -1
        for R in ROTATIONS_24:
            rot = s @ R.T
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    for dz in (-1, 0, 1):
                        d = _normalized_distance(rot + [dx, dy, dz], dst)
                        best = min(best, d)
    return best


class TestResamplePatch:
    def test_identity_copies(self):
        p = random_patch(6, 12, 5)
        out = resample_patch(p, RigidTransform.identity(), 6)
        assert np.array_equal(out.data, p.data)

    def test_integer_translation_shifts(self):
        occ = np.zeros((10, 10, 10), dtype=bool)
        occ[1:3, 4:6, 4:6] = True
        p = Patch((0, 0, 0), occ)
        T = RigidTransform(np.eye(3), [4, 0, 0])
        out = resample_patch(p, T, 10)
        assert np.array_equal(out.data, np.roll(occ, 4, axis=0))

    def test_translation_overflow_clipped(self):
        occ = np.zeros((6, 6, 6), dtype=bool)
        occ[4:6, 0:2, 0:2] = True
        T = RigidTransform(np.eye(3), [4, 0, 0])
        out = resample_patch(Patch((0, 0, 0), occ), T, 6)
        assert out.occupied_count == 0

    def test_rotated_bar_90deg(self):
        occ = np.zeros((9, 9, 9), dtype=bool)
        occ[2:7, 4, 4] = True  # bar along x through the center
        p = Patch((0, 0, 0), occ)
        T = RigidTransform(rotation_about_z(90), np.zeros(3))
        out = resample_patch(p, T, 9)
        expected = np.zeros_like(occ)
        expected[4, 2:7, 4] = True  # enumerate rotated voxel centers
        assert out.occupied_count == p.occupied_count
        assert np.array_equal(out.data, expected)

import numpy as np
import pytest

from voxpatch import (
    GridFormatError,
    Patch,
    VoxelGrid,
    downsample,
    export_obj,
    read_grid,
    sample_patches,
    surface_points,
    to_point_set,
    upsample_nearest,
    voxelize_points,
    write_grid,
)


def random_grid(size, density, seed):
    rng = np.random.default_rng(seed)
    return VoxelGrid(rng.random((size, size, size)) < density)


class TestSamplePatches:
    def test_window_count_128(self):
        g = VoxelGrid(np.ones((128, 128, 128), dtype=bool))
        patches = sample_patches(g, 18, 4, keep_empty=True)
        assert len(patches) == 28 ** 3

    def test_all_empty_filtered(self):
        g = VoxelGrid.empty(16)
        assert sample_patches(g, 6, 2, keep_empty=False) == []

    def test_keep_empty_count(self):
        g = VoxelGrid.empty(16)
        assert len(sample_patches(g, 6, 2, keep_empty=True)) == 6 ** 3

    def test_extent_too_large(self):
        with pytest.raises(ValueError):
            sample_patches(VoxelGrid.empty(8), 9, 1)

    @pytest.mark.parametrize("size,extent,stride", [(8, 3, 1), (12, 4, 2),
                                                    (16, 6, 3), (10, 10, 1)])
    def test_position_count_sweep(self, size, extent, stride):
        g = VoxelGrid(np.ones((size, size, size), dtype=bool))
        n = (size - extent) // stride + 1
        assert len(sample_patches(g, extent, stride, keep_empty=True)) == n ** 3

    def test_corner_ordering_and_content(self):
        g = random_grid(12, 0.3, 1)
        patches = sample_patches(g, 4, 2, keep_empty=True)
        corners = [p.corner for p in patches]
        assert corners == sorted(corners)
        for p in patches:
            x, y, z = p.corner
            assert np.array_equal(p.data, g.data[x:x + 4, y:y + 4, z:z + 4])


class TestDownUp:
    def test_full_grid(self):
        g = VoxelGrid(np.ones((128, 128, 128), dtype=bool))
        assert downsample(g, 4).data.all()
        assert downsample(g, 4).size == 32

    def test_single_voxel(self):
        occ = np.zeros((16, 16, 16), dtype=bool)
        occ[5, 5, 5] = True
        d = downsample(VoxelGrid(occ), 4)
        assert d.occupied_count == 1 and d.data[1, 1, 1]

    def test_empty(self):
        assert downsample(VoxelGrid.empty(16), 4).occupied_count == 0
        assert upsample_nearest(VoxelGrid.empty(4), 4).occupied_count == 0

    def test_non_divisor(self):
        with pytest.raises(ValueError):
            downsample(VoxelGrid.empty(10), 4)

    def test_upsample_block(self):
        occ = np.zeros((4, 4, 4), dtype=bool)
        occ[1, 1, 1] = True
        u = upsample_nearest(VoxelGrid(occ), 4)
        assert u.occupied_count == 64
        assert u.data[4:8, 4:8, 4:8].all()

    def test_round_trip_identity(self):
        for seed in range(3):
            g = random_grid(8, 0.4, seed)
            assert np.array_equal(downsample(upsample_nearest(g, 4), 4).data, g.data)

    def test_superset_mask(self):
        g = random_grid(12, 0.2, 7)
        sup = upsample_nearest(downsample(g, 4), 4)
        assert not (g.data & ~sup.data).any()


class TestPointSet:
    def test_empty_patch(self):
        p = Patch((0, 0, 0), np.zeros((4, 4, 4), dtype=bool))
        assert to_point_set(p).points.shape == (0, 3)

    def test_single_voxel_patch_center(self):
        occ = np.zeros((18, 18, 18), dtype=bool)
        occ[0, 0, 0] = True
        pts = to_point_set(Patch((0, 0, 0), occ)).points
        assert np.allclose(pts, [[-8.5, -8.5, -8.5]])

    def test_full_2cube_symmetry(self):
        p = Patch((0, 0, 0), np.ones((2, 2, 2), dtype=bool))
        pts = to_point_set(p).points
        assert sorted(map(tuple, pts)) == sorted(
            [(x, y, z) for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])

    def test_count_matches_occupancy(self):
        g = random_grid(10, 0.3, 3)
        p = Patch((0, 0, 0), g.data)
        assert to_point_set(p).points.shape[0] == p.occupied_count


class TestVoxelizePoints:
    def test_cube_corners(self):
        pts = [(x, y, z) for x in (0, 1) for y in (0, 1) for z in (0, 1)]
        g = voxelize_points(pts, 16)
        assert g.occupied_count == 8

    def test_single_point(self):
        assert voxelize_points([(0.3, 0.4, 0.5)], 8).occupied_count == 1

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            voxelize_points([], 8)

    def test_sphere_is_hollow_shell(self):
        rng = np.random.default_rng(0)
        v = rng.normal(size=(16384, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        g = voxelize_points(v, 64)
        center = np.array(np.nonzero(g.data)).mean(axis=1).round().astype(int)
        assert not g.data[tuple(center)]
        assert g.occupied_count > 1000


class TestSurfacePoints:
    def test_single_voxel_face_balance(self):
        occ = np.zeros((4, 4, 4), dtype=bool)
        occ[1, 1, 1] = True
        pts = surface_points(VoxelGrid(occ), 6000, seed=0)
        for axis in range(3):
            for plane in (1.0, 2.0):
                on = np.isclose(pts[:, axis], plane).sum()
                assert 1000 * 0.9 < on < 1000 * 1.1

    def test_no_points_on_shared_faces(self):
        occ = np.zeros((4, 4, 4), dtype=bool)
        occ[1:3, 1, 1] = True
        pts = surface_points(VoxelGrid(occ), 5000, seed=1)
        # shared face between the two voxels is the x=2 plane inside y/z cell 1
        on_shared = np.isclose(pts[:, 0], 2.0)
        assert not on_shared.any()

    def test_full_cube_points_on_shell(self):
        g = VoxelGrid(np.ones((4, 4, 4), dtype=bool))
        pts = surface_points(g, 9600, seed=2)
        on_boundary = (np.isclose(pts, 0.0) | np.isclose(pts, 4.0)).any(axis=1)
        assert on_boundary.all()

    def test_points_on_exposed_planes(self):
        g = random_grid(8, 0.3, 11)
        pts = surface_points(g, 2000, seed=3)
        frac = pts - np.round(pts)
        on_plane = np.isclose(np.abs(frac), 0.0, atol=1e-9).any(axis=1)
        assert on_plane.all()

    def test_deterministic(self):
        g = random_grid(8, 0.3, 11)
        a = surface_points(g, 500, seed=9)
        b = surface_points(g, 500, seed=9)
        assert np.array_equal(a, b)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            surface_points(VoxelGrid.empty(4), 10, seed=0)


class TestExportObj:
    def _load(self, path):
        verts, faces = [], []
        for ln in open(path):
            if ln.startswith("v "):
                verts.append(tuple(map(float, ln.split()[1:])))
            elif ln.startswith("f "):
                faces.append(tuple(map(int, ln.split()[1:])))
        return verts, faces

    def test_single_voxel(self, tmp_path):
        occ = np.zeros((3, 3, 3), dtype=bool)
        occ[1, 1, 1] = True
        path = tmp_path / "one.obj"
        export_obj(VoxelGrid(occ), 0.5, path)
        verts, faces = self._load(path)
        assert len(verts) == 8
        assert len(faces) == 12

    def test_empty_grid(self, tmp_path):
        path = tmp_path / "empty.obj"
        export_obj(VoxelGrid.empty(4), 0.5, path)
        verts, faces = self._load(path)
        assert faces == []

    def test_two_voxel_bar(self, tmp_path):
        occ = np.zeros((4, 4, 4), dtype=bool)
        occ[1:3, 1, 1] = True
        path = tmp_path / "bar.obj"
        export_obj(VoxelGrid(occ), 0.5, path)
        _, faces = self._load(path)
        assert len(faces) == 10 * 2  # 10 exposed faces, 2 triangles each


class TestGridIO:
    def test_round_trip_binary(self, tmp_path):
        g = random_grid(16, 0.3, 5)
        path = tmp_path / "g.pvox"
        write_grid(g, path)
        assert np.array_equal(read_grid(path).data, g.data)

    def test_round_trip_bit_exact(self, tmp_path):
        g = random_grid(12, 0.5, 6)
        p1, p2 = tmp_path / "a.pvox", tmp_path / "b.pvox"
        write_grid(g, p1)
        write_grid(read_grid(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_round_trip_scalar(self, tmp_path):
        rng = np.random.default_rng(2)
        g = VoxelGrid(rng.random((6, 6, 6)))
        path = tmp_path / "s.pvox"
        write_grid(g, path)
        back = read_grid(path)
        assert not back.is_binary
        assert np.allclose(back.data, g.data, atol=1e-6)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "e.pvox"
        path.write_bytes(b"")
        with pytest.raises(GridFormatError):
            read_grid(path)

    def test_truncated_payload(self, tmp_path):
        import struct
        path = tmp_path / "t.pvox"
        path.write_bytes(b"PVOX1\x00\x00\x00" + struct.pack("<II", 128, 1) + b"\0" * 100)
        with pytest.raises(GridFormatError):
            read_grid(path)

    def test_bad_run_total(self, tmp_path):
        import struct
        path = tmp_path / "r.pvox"
        path.write_bytes(b"PVOX1\x00\x00\x00" + struct.pack("<III", 4, 0, 7))
        with pytest.raises(GridFormatError):
            read_grid(path)

    def test_text_grid(self, tmp_path):
        path = tmp_path / "g.txt"
        path.write_text("4\n0 0 0\n3 3 3\n1 2 3\n")
        g = read_grid(path)
        assert g.size == 4 and g.occupied_count == 3
        assert g.data[1, 2, 3]

    def test_text_grid_bad_voxel(self, tmp_path):
        path = tmp_path / "g.txt"
        path.write_text("4\n9 0 0\n")
        with pytest.raises(GridFormatError):
            read_grid(path)

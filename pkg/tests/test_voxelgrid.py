import numpy as np
import pytest

from dtsdf.voxelgrid import (
    BLOCK_VOXELS,
    BlockBudgetExceeded,
    Direction,
    DIRECTIONAL,
    REGULAR,
    VoxelStore,
    pack_keys,
    unpack_keys,
    voxel_index_of_world,
)


class TestKeyPacking:
    def test_roundtrip_random_keys(self, rng):
        coords = rng.integers(-500_000, 500_000, size=(10_000, 3))
        dirs = rng.integers(0, 7, size=10_000)
        packed = pack_keys(coords, dirs)
        back_coords, back_dirs = unpack_keys(packed)
        np.testing.assert_array_equal(back_coords, coords)
        np.testing.assert_array_equal(back_dirs, dirs)

    def test_distinct_keys_stay_distinct(self, rng):
        coords = rng.integers(-1000, 1000, size=(200_000, 3))
        dirs = rng.integers(0, 7, size=200_000)
        stacked = np.concatenate([coords, dirs[:, None]], axis=1)
        n_unique = np.unique(stacked, axis=0).shape[0]
        assert np.unique(pack_keys(coords, dirs)).size == n_unique

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            pack_keys(np.array([[2 ** 20, 0, 0]]), np.array([0]))


class TestAllocationAndLookup:
    def test_index_holds_a_million_keys(self, rng):
        # hash-index correctness at scale, without allocating voxel payloads
        from dtsdf.voxelgrid import _PackedIndex
        coords = rng.integers(-200, 200, size=(1_100_000, 3))
        dirs = rng.integers(0, 6, size=coords.shape[0])
        packed = np.unique(pack_keys(coords, dirs))
        assert packed.size > 1_000_000
        index = _PackedIndex()
        for row, key in enumerate(packed.tolist()):
            index.insert(key, row)
        rows = index.lookup(packed)
        np.testing.assert_array_equal(rows, np.arange(packed.size))
        missing = pack_keys(np.array([[500, 500, 500]]), np.array([0]))
        assert index.lookup(missing)[0] == -1

    def test_insert_then_read_back_many(self, rng):
        store = VoxelStore(mode=DIRECTIONAL, max_blocks=2_000_000)
        coords = np.unique(rng.integers(-300, 300, size=(100_000, 3)), axis=0)
        dirs = rng.integers(0, 6, size=coords.shape[0])
        packed = pack_keys(coords, dirs)
        created = store.allocate_packed(packed)
        assert created == np.unique(packed).size
        rows = store.rows_of(np.unique(packed))
        assert np.all(rows >= 0)
        # no collision loss: stored keys match what was written
        stored = np.sort(store.all_packed_keys())
        np.testing.assert_array_equal(stored, np.unique(packed))

    def test_absent_block_is_unobserved(self):
        store = VoxelStore()
        assert store.voxel_at((5, 5, 5, Direction.X_POS), (0, 0, 0)) is None

    def test_mode_exclusivity(self):
        reg = VoxelStore(mode=REGULAR)
        with pytest.raises(ValueError):
            reg.allocate(np.array([[0, 0, 0]]), np.array([int(Direction.X_POS)]))
        direc = VoxelStore(mode=DIRECTIONAL)
        with pytest.raises(ValueError):
            direc.allocate(np.array([[0, 0, 0]]), np.array([int(Direction.UNDIRECTED)]))

    def test_budget_enforced(self):
        store = VoxelStore(max_blocks=4)
        coords = np.array([[i, 0, 0] for i in range(5)])
        with pytest.raises(BlockBudgetExceeded, match="budget"):
            store.allocate(coords, np.full(5, int(Direction.X_POS)))

    def test_write_read_voxel(self):
        store = VoxelStore(mode=DIRECTIONAL)
        store.allocate(np.array([[1, 2, 3]]), np.array([int(Direction.Z_NEG)]))
        row = store.rows_of(pack_keys(np.array([[1, 2, 3]]),
                                      np.array([int(Direction.Z_NEG)])))[0]
        flat = 4 + 8 * 5 + 64 * 6
        store.sdf[row, flat] = 0.5
        store.weight[row, flat] = 1.0
        got = store.voxel_at((1, 2, 3, Direction.Z_NEG), (4, 5, 6))
        assert got is not None
        assert got[0] == pytest.approx(0.5)
        assert got[1] == pytest.approx(1.0)

    def test_running_average_of_opposite_measurements(self):
        # two equal-weight updates 0.5 and -0.5 average to zero
        store = VoxelStore(mode=DIRECTIONAL)
        store.allocate(np.array([[0, 0, 0]]), np.array([int(Direction.X_POS)]))
        row = store.rows_of(pack_keys(np.array([[0, 0, 0]]),
                                      np.array([int(Direction.X_POS)])))[0]
        for value in (0.5, -0.5):
            w_old = store.weight[row, 0]
            store.sdf[row, 0] = (store.sdf[row, 0] * w_old + value * 1.0) / (w_old + 1.0)
            store.weight[row, 0] = w_old + 1.0
        assert store.voxel_at((0, 0, 0, Direction.X_POS), (0, 0, 0))[0] == pytest.approx(0.0)


class TestWorldPositions:
    def test_voxel_center_roundtrip(self, rng):
        store = VoxelStore(voxel_size=0.02)
        coords = rng.integers(-50, 50, size=(100, 3))
        store.allocate(coords, np.full(100, int(Direction.Y_POS)))
        rows = store.all_rows()
        centers = store.voxel_centers_world(rows)
        got = voxel_index_of_world(centers.reshape(-1, 3), store.voxel_size)
        expected = np.repeat(store.keys[rows, :3].astype(np.int64), BLOCK_VOXELS,
                             axis=0) * 8
        # recover the per-voxel local offsets from the flat x-fastest order
        k, j, i = np.meshgrid(np.arange(8), np.arange(8), np.arange(8), indexing="ij")
        local = np.stack([i, j, k], axis=-1).reshape(-1, 3)
        expected = expected + np.tile(local, (rows.size, 1))
        np.testing.assert_array_equal(got, expected)


class TestTrilinear:
    def _store_with_values(self, values):
        """Store with one block at the origin whose voxels hold given sdf."""
        store = VoxelStore(mode=DIRECTIONAL, voxel_size=0.01)
        store.allocate(np.array([[0, 0, 0]]), np.array([int(Direction.X_POS)]))
        row = store.all_rows()[0]
        store.sdf[row] = values
        store.weight[row] = 1.0
        return store

    def test_query_at_center_returns_stored(self, rng):
        values = rng.uniform(-1, 1, BLOCK_VOXELS).astype(np.float32)
        store = self._store_with_values(values)
        flat = 3 + 8 * 4 + 64 * 5
        center = (np.array([3, 4, 5]) + 0.5) * store.voxel_size
        got = store.trilinear_sdf(center, Direction.X_POS)
        assert got is not None
        assert got[0] == pytest.approx(values[flat], abs=1e-6)

    def test_midpoint_interpolation(self):
        values = np.zeros(BLOCK_VOXELS, dtype=np.float32)
        # neighbors along x at (3,4,5) and (4,4,5): 0.2 and 0.4
        values[3 + 8 * 4 + 64 * 5] = 0.2
        values[4 + 8 * 4 + 64 * 5] = 0.4
        store = self._store_with_values(values)
        mid = np.array([(3.5 + 0.5), (4 + 0.5), (5 + 0.5)]) * store.voxel_size
        got = store.trilinear_sdf(mid, Direction.X_POS)
        assert got[0] == pytest.approx(0.3, abs=1e-6)

    def test_unobserved_corner_is_conservative(self):
        values = np.full(BLOCK_VOXELS, 0.5, dtype=np.float32)
        store = self._store_with_values(values)
        row = store.all_rows()[0]
        store.weight[row, 3 + 8 * 4 + 64 * 5] = 0.0
        probe = (np.array([3.2, 4.3, 5.1]) + 0.5) * store.voxel_size
        assert store.trilinear_sdf(probe, Direction.X_POS) is None

    def test_other_direction_not_visible(self):
        values = np.full(BLOCK_VOXELS, 0.5, dtype=np.float32)
        store = self._store_with_values(values)
        center = (np.array([3, 4, 5]) + 0.5) * store.voxel_size
        assert store.trilinear_sdf(center, Direction.X_NEG) is None


class TestRecycle:
    def _carved_store(self, sdf_value=1.0, carve_passes=5):
        store = VoxelStore(mode=DIRECTIONAL)
        store.allocate(np.array([[0, 0, 0], [1, 0, 0]]),
                       np.full(2, int(Direction.X_POS)))
        rows = store.all_rows()
        store.sdf[rows] = sdf_value
        store.weight[rows] = 2.0
        store.carve_passes[rows] = carve_passes
        return store

    def test_fully_carved_block_removed(self):
        store = self._carved_store()
        assert store.recycle_free_blocks() == 2
        assert store.block_count() == 0
        assert store.voxel_at((0, 0, 0, Direction.X_POS), (0, 0, 0)) is None

    def test_block_with_surface_kept(self):
        store = self._carved_store()
        row = store.all_rows()[0]
        store.sdf[row, 100] = -0.1
        assert store.recycle_free_blocks() == 1
        assert store.block_count() == 1

    def test_minimum_carve_passes_guard(self):
        store = self._carved_store(carve_passes=1)
        assert store.recycle_free_blocks(min_carve_passes=3) == 0

    def test_idempotent(self):
        store = self._carved_store()
        assert store.recycle_free_blocks() == 2
        assert store.recycle_free_blocks() == 0

    def test_matches_brute_force_scan(self, rng):
        store = VoxelStore(mode=DIRECTIONAL)
        coords = rng.integers(-5, 5, size=(40, 3))
        store.allocate(coords, rng.integers(0, 6, size=40))
        rows = store.all_rows()
        store.weight[rows] = 1.0
        store.carve_passes[rows] = 10
        store.sdf[rows] = rng.uniform(0.9, 1.0, size=(rows.size, BLOCK_VOXELS))
        # poke holes in a random subset
        dirty = rng.choice(rows, size=10, replace=False)
        store.sdf[dirty, 0] = 0.5
        expected = sum(1 for r in rows if np.all(store.sdf[r] >= 0.95))
        assert store.recycle_free_blocks() == expected

    def test_rows_reused_after_recycle(self):
        store = self._carved_store()
        store.recycle_free_blocks()
        created = store.allocate(np.array([[9, 9, 9]]), np.array([int(Direction.Z_POS)]))
        assert created == 1
        got = store.voxel_at((9, 9, 9, Direction.Z_POS), (0, 0, 0))
        assert got is None  # fresh block is unobserved


class TestSnapshot:
    def test_roundtrip(self, tmp_path, rng):
        store = VoxelStore(mode=DIRECTIONAL, voxel_size=0.015, trunc_dist=0.09,
                           dir_threshold=1.3)
        coords = rng.integers(-20, 20, size=(30, 3))
        store.allocate(coords, rng.integers(0, 6, size=30))
        rows = store.all_rows()
        store.sdf[rows] = rng.uniform(-1, 1, size=(rows.size, BLOCK_VOXELS)).astype(np.float32)
        store.weight[rows] = rng.uniform(0, 10, size=(rows.size, BLOCK_VOXELS)).astype(np.float32)
        store.color[rows] = rng.uniform(0, 1, size=(rows.size, BLOCK_VOXELS, 3)).astype(np.float32)
        store.color_weight[rows] = rng.uniform(0, 10, size=(rows.size, BLOCK_VOXELS)).astype(np.float32)

        path = tmp_path / "volume.dtsv"
        store.save_snapshot(path)
        loaded = VoxelStore.load_snapshot(path)

        assert loaded.mode == DIRECTIONAL
        assert loaded.voxel_size == pytest.approx(0.015)
        assert loaded.trunc_dist == pytest.approx(0.09)
        assert loaded.dir_threshold == pytest.approx(1.3)
        assert loaded.block_count() == store.block_count()
        keys = store.all_packed_keys()
        r_orig = store.rows_of(keys)
        r_load = loaded.rows_of(keys)
        np.testing.assert_array_equal(loaded.sdf[r_load], store.sdf[r_orig])
        np.testing.assert_array_equal(loaded.weight[r_load], store.weight[r_orig])
        np.testing.assert_array_equal(loaded.color[r_load], store.color[r_orig])
        np.testing.assert_array_equal(loaded.color_weight[r_load], store.color_weight[r_orig])

    def test_deterministic_bytes(self, tmp_path, rng):
        store = VoxelStore(mode=REGULAR)
        coords = rng.integers(-20, 20, size=(25, 3))
        store.allocate(coords, np.full(25, int(Direction.UNDIRECTED)))
        a, b = tmp_path / "a.dtsv", tmp_path / "b.dtsv"
        store.save_snapshot(a)
        store.save_snapshot(b)
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bogus.dtsv"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            VoxelStore.load_snapshot(path)

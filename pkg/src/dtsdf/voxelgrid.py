"""Sparse voxel-block storage for directional and regular truncated SDFs.

Blocks hold 8x8x8 voxels and are addressed by (bx, by, bz, direction). A
directional store keeps up to six entries per spatial block, one per signed
coordinate axis; a regular store keeps a single undirected entry. Voxel
(i, j, k) of block (bx, by, bz) has its center at
((bx*8 + i) + 0.5, (by*8 + j) + 0.5, (bz*8 + k) + 0.5) * voxel_size, and the
flat in-block order is x-fastest: flat = i + 8*j + 64*k.

SDF values are stored normalized to [-1, 1] in units of the truncation
distance. A voxel with distance weight 0 is unobserved and its SDF must be
ignored by readers.
"""

from __future__ import annotations

import struct
from enum import IntEnum

import numpy as np

BLOCK_SIDE = 8
BLOCK_VOXELS = BLOCK_SIDE ** 3

# bytes per serialized voxel record: sdf, w_d, rgb, w_c as f32
VOXEL_RECORD_BYTES = 4 + 4 + 12 + 4

_SNAPSHOT_MAGIC = b"DTSV"
_SNAPSHOT_VERSION = 1

# packed block keys: 20 bits per coordinate (offset binary), 3 bits direction
_COORD_BITS = 20
_COORD_OFFSET = 1 << (_COORD_BITS - 1)
_COORD_MAX = (1 << _COORD_BITS) - 1


class Direction(IntEnum):
    X_POS = 0
    X_NEG = 1
    Y_POS = 2
    Y_NEG = 3
    Z_POS = 4
    Z_NEG = 5
    UNDIRECTED = 6


DIRECTED = tuple(Direction(d) for d in range(6))

DIRECTION_VECTORS = np.array([
    [1.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.0, 0.0, -1.0],
])

REGULAR = "regular"
DIRECTIONAL = "directional"


class BlockBudgetExceeded(RuntimeError):
    """Raised when allocation would exceed the configured block budget."""


def pack_keys(coords, dirs):
    """Pack (N, 3) block coordinates and (N,) direction codes into int64 keys."""
    coords = np.asarray(coords, dtype=np.int64)
    if coords.size and (coords.min() < -_COORD_OFFSET or coords.max() > _COORD_MAX - _COORD_OFFSET):
        raise ValueError("block coordinate out of packable range")
    d = np.asarray(dirs, dtype=np.int64)
    off = coords + _COORD_OFFSET
    return (((off[..., 0] << _COORD_BITS) | off[..., 1]) << _COORD_BITS | off[..., 2]) << 3 | d


def unpack_keys(packed):
    packed = np.asarray(packed, dtype=np.int64)
    d = packed & 7
    rest = packed >> 3
    bz = (rest & _COORD_MAX) - _COORD_OFFSET
    rest >>= _COORD_BITS
    by = (rest & _COORD_MAX) - _COORD_OFFSET
    bx = (rest >> _COORD_BITS) - _COORD_OFFSET
    return np.stack([bx, by, bz], axis=-1), d


def local_offsets():
    """Centers of the 512 block voxels relative to the block origin, in voxels."""
    k, j, i = np.meshgrid(np.arange(BLOCK_SIDE), np.arange(BLOCK_SIDE),
                          np.arange(BLOCK_SIDE), indexing="ij")
    return np.stack([i, j, k], axis=-1).reshape(-1, 3) + 0.5


_LOCAL_OFFSETS = local_offsets()
_LOCAL_INT_OFFSETS = (_LOCAL_OFFSETS - 0.5).astype(np.int64)
_CORNER_OFFSETS = np.array([[(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1]
                            for c in range(8)], dtype=np.int64)


class _PackedIndex:
    """Sorted packed-key index for vectorized row lookup."""

    def __init__(self):
        self._map: dict[int, int] = {}
        self._sorted_keys = np.empty(0, dtype=np.int64)
        self._sorted_rows = np.empty(0, dtype=np.int64)
        self._dirty = False

    def __len__(self):
        return len(self._map)

    def __contains__(self, key):
        return int(key) in self._map

    def get(self, key, default=-1):
        return self._map.get(int(key), default)

    def insert(self, key, row):
        self._map[int(key)] = row
        self._dirty = True

    def remove(self, key):
        del self._map[int(key)]
        self._dirty = True

    def keys_array(self):
        self._refresh()
        return self._sorted_keys

    def rows_array(self):
        self._refresh()
        return self._sorted_rows

    def _refresh(self):
        if self._dirty:
            keys = np.fromiter(self._map.keys(), dtype=np.int64, count=len(self._map))
            rows = np.fromiter(self._map.values(), dtype=np.int64, count=len(self._map))
            order = np.argsort(keys)
            self._sorted_keys = keys[order]
            self._sorted_rows = rows[order]
            self._dirty = False

    def lookup(self, packed):
        """Rows of packed keys; -1 where absent."""
        self._refresh()
        packed = np.asarray(packed, dtype=np.int64)
        if self._sorted_keys.size == 0:
            return np.full(packed.shape, -1, dtype=np.int64)
        pos = np.searchsorted(self._sorted_keys, packed)
        pos = np.minimum(pos, self._sorted_keys.size - 1)
        rows = self._sorted_rows[pos]
        return np.where(self._sorted_keys[pos] == packed, rows, -1)


class VoxelStore:
    """Block-hashed voxel grid holding SDF, weight, color, and color weight.

    mode is either REGULAR (undirected keys only) or DIRECTIONAL (directed
    keys only). Lookups of unallocated space report unobserved rather than a
    fabricated value.
    """

    # per-row arrays managed by _grow / allocation; subclasses may extend
    _ARRAY_FIELDS = ("keys", "sdf", "weight", "color", "color_weight", "carve_passes")

    def __init__(self, mode: str = DIRECTIONAL, voxel_size: float = 0.01,
                 trunc_dist: float | None = None, dir_threshold: float = 3 * np.pi / 8,
                 max_weight: float = 128.0, max_blocks: int = 100_000):
        if mode not in (REGULAR, DIRECTIONAL):
            raise ValueError(f"unknown mode {mode!r}")
        if not np.pi / 4 < dir_threshold <= np.pi / 2:
            raise ValueError("direction threshold must lie in (pi/4, pi/2]")
        self.mode = mode
        self.voxel_size = float(voxel_size)
        self.trunc_dist = float(trunc_dist) if trunc_dist is not None else 5.0 * voxel_size
        self.dir_threshold = float(dir_threshold)
        self.max_weight = float(max_weight)
        self.max_blocks = int(max_blocks)

        self._index = _PackedIndex()
        cap = 64
        self.keys = np.zeros((cap, 4), dtype=np.int32)
        self.sdf = np.zeros((cap, BLOCK_VOXELS), dtype=np.float32)
        self.weight = np.zeros((cap, BLOCK_VOXELS), dtype=np.float32)
        self.color = np.zeros((cap, BLOCK_VOXELS, 3), dtype=np.float32)
        self.color_weight = np.zeros((cap, BLOCK_VOXELS), dtype=np.float32)
        self.carve_passes = np.zeros(cap, dtype=np.int32)
        self.n_blocks = 0
        self._free_rows: list[int] = []

    # ------------------------------------------------------------------
    # allocation

    @property
    def block_size(self) -> float:
        return BLOCK_SIDE * self.voxel_size

    def block_count(self) -> int:
        return len(self._index)

    def _grow(self, need: int):
        cap = self.keys.shape[0]
        if need <= cap:
            return
        new_cap = max(need, cap * 2)
        for name in self._ARRAY_FIELDS:
            arr = getattr(self, name)
            grown = np.zeros((new_cap,) + arr.shape[1:], dtype=arr.dtype)
            grown[:cap] = arr[:cap]
            setattr(self, name, grown)

    def _reset_rows(self, rows):
        for name in self._ARRAY_FIELDS:
            if name != "keys":
                getattr(self, name)[rows] = 0

    def _check_dir_codes(self, dirs):
        dirs = np.asarray(dirs)
        if self.mode == REGULAR:
            if np.any(dirs != Direction.UNDIRECTED):
                raise ValueError("regular store accepts only undirected keys")
        else:
            if np.any(dirs == Direction.UNDIRECTED):
                raise ValueError("directional store accepts only directed keys")

    def allocate_packed(self, packed) -> int:
        """Allocate blocks for packed keys not yet present; returns new-block count."""
        packed = np.unique(np.asarray(packed, dtype=np.int64))
        rows = self._index.lookup(packed)
        new = packed[rows < 0]
        if new.size == 0:
            return 0
        if len(self._index) + new.size > self.max_blocks:
            raise BlockBudgetExceeded(
                f"allocating {new.size} blocks would exceed the budget of "
                f"{self.max_blocks} (currently {len(self._index)})")
        coords, dirs = unpack_keys(new)
        self._check_dir_codes(dirs)
        n_reuse = min(len(self._free_rows), new.size)
        reuse = [self._free_rows.pop() for _ in range(n_reuse)]
        n_fresh = new.size - n_reuse
        self._grow(self.n_blocks + n_fresh)
        fresh = list(range(self.n_blocks, self.n_blocks + n_fresh))
        self.n_blocks += n_fresh
        target = np.array(reuse + fresh, dtype=np.int64)
        self.keys[target, :3] = coords
        self.keys[target, 3] = dirs
        self._reset_rows(target)
        for key, row in zip(new.tolist(), target.tolist()):
            self._index.insert(key, row)
        return int(new.size)

    def allocate(self, coords, dirs) -> int:
        return self.allocate_packed(pack_keys(coords, dirs))

    # ------------------------------------------------------------------
    # lookup

    def rows_of(self, packed):
        return self._index.lookup(packed)

    def all_rows(self):
        """Row indices of every allocated block (arbitrary but stable order)."""
        return self._index.rows_array()

    def all_packed_keys(self):
        return self._index.keys_array()

    def voxel_at(self, block_key, local):
        """Single stored voxel as (sdf, weight, color, color_weight), or None.

        block_key is (bx, by, bz, direction); local is (i, j, k) in [0, 8).
        Returns None when the block is absent or the voxel is unobserved.
        """
        bx, by, bz, d = block_key
        packed = pack_keys(np.array([[bx, by, bz]]), np.array([int(d)]))
        row = self._index.get(packed[0])
        if row < 0:
            return None
        i, j, k = local
        flat = int(i) + BLOCK_SIDE * int(j) + BLOCK_SIDE * BLOCK_SIDE * int(k)
        if self.weight[row, flat] <= 0:
            return None
        return (float(self.sdf[row, flat]), float(self.weight[row, flat]),
                self.color[row, flat].copy(), float(self.color_weight[row, flat]))

    def block_origin_world(self, rows):
        """World-space origin (corner) of blocks given by row indices."""
        return self.keys[rows, :3].astype(np.float64) * self.block_size

    def voxel_centers_world(self, rows):
        """World centers of all 512 voxels of each row: (len(rows), 512, 3)."""
        origin = self.block_origin_world(rows)
        return origin[:, None, :] + _LOCAL_OFFSETS[None, :, :] * self.voxel_size

    def voxel_indices(self, rows):
        """Integer global voxel indices of all 512 voxels: (len(rows), 512, 3)."""
        base = self.keys[rows, :3].astype(np.int64) * BLOCK_SIDE
        return base[:, None, :] + _LOCAL_INT_OFFSETS[None, :, :]

    def direction_mask_at(self, voxel_indices):
        """Per-voxel 6-bit contributing-direction set; plain stores have none."""
        g = np.asarray(voxel_indices, dtype=np.int64)
        return np.zeros(g.shape[:-1], dtype=np.uint8)

    def _locate(self, voxel_indices, dir_code):
        """Row and in-block flat index of integer global voxel coordinates."""
        g = np.asarray(voxel_indices, dtype=np.int64)
        block = g >> 3
        local = g - (block << 3)
        flat = local[..., 0] | (local[..., 1] << 3) | (local[..., 2] << 6)
        packed = ((((block[..., 0] + _COORD_OFFSET) << _COORD_BITS
                    | (block[..., 1] + _COORD_OFFSET)) << _COORD_BITS
                   | (block[..., 2] + _COORD_OFFSET)) << 3) | int(dir_code)
        return self._index.lookup(packed), flat

    def gather(self, voxel_indices, dir_code):
        """Fetch voxels at integer global voxel indices for one direction.

        voxel_indices: (N, 3) integer voxel coordinates (world voxel grid).
        Returns (sdf, weight, color, observed) with unobserved entries zeroed.
        """
        rows, flat = self._locate(voxel_indices, dir_code)
        present = rows >= 0
        rows_safe = np.where(present, rows, 0)
        sdf = self.sdf[rows_safe, flat]
        w = self.weight[rows_safe, flat]
        col = self.color[rows_safe, flat]
        observed = present & (w > 0)
        sdf = np.where(observed, sdf, 0.0)
        w = np.where(observed, w, 0.0)
        col = np.where(observed[..., None], col, 0.0)
        return sdf, w, col, observed

    def gather_sdf(self, voxel_indices, dir_code):
        """Lean fetch of (sdf, observed) only; the raycast/gradient hot path."""
        rows, flat = self._locate(voxel_indices, dir_code)
        present = rows >= 0
        rows_safe = np.where(present, rows, 0)
        observed = present & (self.weight[rows_safe, flat] > 0)
        return np.where(observed, self.sdf[rows_safe, flat], 0.0), observed

    def any_block_at(self, points, dir_code=Direction.UNDIRECTED):
        """Whether the block containing each world point is allocated.

        The voxel containing a point is always one of its interpolation
        corners, so a missing block here implies the conservative trilinear
        lookup would report unobserved.
        """
        g = voxel_index_of_world(points, self.voxel_size)
        rows, _ = self._locate(g, dir_code)
        return rows >= 0

    def _corner_setup(self, points):
        """Surrounding voxel indices (8, N, 3) and trilinear weights (8, N)."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        grid = p / self.voxel_size - 0.5
        base = np.floor(grid).astype(np.int64)
        frac = grid - base
        corners = base[None, :, :] + _CORNER_OFFSETS[:, None, :]
        lo_hi = np.stack([1.0 - frac, frac])  # (2, N, 3)
        wgts = (lo_hi[_CORNER_OFFSETS[:, 0], :, 0]
                * lo_hi[_CORNER_OFFSETS[:, 1], :, 1]
                * lo_hi[_CORNER_OFFSETS[:, 2], :, 2])
        return corners, wgts

    def trilinear(self, points, dir_code):
        """Trilinear interpolation at world points for one direction slot.

        Conservative: a sample is unobserved if any of its 8 surrounding voxel
        centers is unobserved. Returns (sdf, weight, observed).
        """
        corners, wgts = self._corner_setup(points)
        n = wgts.shape[1]
        rows, flat = self._locate(corners.reshape(-1, 3), dir_code)
        present = rows >= 0
        rows_safe = np.where(present, rows, 0)
        wv = np.where(present, self.weight[rows_safe, flat], 0.0).reshape(8, n)
        sdf = self.sdf[rows_safe, flat].reshape(8, n)
        obs = wv > 0
        observed = np.all(obs, axis=0)
        sdf = np.where(obs, sdf, 0.0)
        return np.sum(wgts * sdf, axis=0), np.sum(wgts * wv, axis=0), observed

    def sample_color(self, points, dir_code):
        """Trilinear color renormalized over the observed corners.

        Less strict than the SDF lookup: color is cosmetic, so any observed
        corner contributes. Returns (color (N, 3), any_observed (N,)).
        """
        corners, wgts = self._corner_setup(points)
        _, _, col, obs = self.gather(corners.reshape(-1, 3), dir_code)
        n = wgts.shape[1]
        col = col.reshape(8, n, 3)
        obs = obs.reshape(8, n)
        w_obs = wgts * obs
        total = w_obs.sum(axis=0)
        any_obs = total > 1e-12
        color = np.sum(w_obs[..., None] * col, axis=0) / np.where(any_obs, total, 1.0)[:, None]
        return np.where(any_obs[:, None], color, 0.0), any_obs

    def trilinear_sdf(self, point, dir_code):
        """(sdf, weight) at one world point, or None if unobserved."""
        s, w, obs = self.trilinear(np.asarray(point, dtype=np.float64)[None, :], dir_code)
        if not obs[0]:
            return None
        return float(s[0]), float(w[0])

    # ------------------------------------------------------------------
    # maintenance

    def recycle_free_blocks(self, eps_free: float = 0.05, min_carve_passes: int = 3) -> int:
        """Drop blocks that carving has driven entirely to free space.

        A block is removed when every voxel is observed with sdf >= 1 - eps_free
        and the block has received at least min_carve_passes carve updates.
        Such blocks contain no zero crossing, so raycast output is unchanged.
        eps_free accommodates the running-average carve path: a voxel observed
        once ends at sdf = n/(n+1) after n carve updates, so 0.99 would be
        unreachable in realistically many passes.
        """
        rows = self.all_rows()
        if rows.size == 0:
            return 0
        fully_carved = (np.all(self.weight[rows] > 0, axis=1)
                        & np.all(self.sdf[rows] >= 1.0 - eps_free, axis=1)
                        & (self.carve_passes[rows] >= min_carve_passes))
        doomed = rows[fully_carved]
        if doomed.size == 0:
            return 0
        packed = pack_keys(self.keys[doomed, :3].astype(np.int64),
                           self.keys[doomed, 3].astype(np.int64))
        for key, row in zip(packed.tolist(), doomed.tolist()):
            self._index.remove(key)
            self.weight[row] = 0.0
            self.color_weight[row] = 0.0
            self._free_rows.append(row)
        return int(doomed.size)

    # ------------------------------------------------------------------
    # snapshot format

    def save_snapshot(self, path):
        """Write the store to the binary volume snapshot format."""
        rows = self.all_rows()
        keys = self.all_packed_keys()
        order = np.argsort(keys)
        rows = rows[order]
        with open(path, "wb") as f:
            mode_byte = 0 if self.mode == REGULAR else 1
            f.write(_SNAPSHOT_MAGIC)
            f.write(struct.pack("<IBfffQ", _SNAPSHOT_VERSION, mode_byte,
                                self.voxel_size, self.trunc_dist,
                                self.dir_threshold, rows.size))
            for row in rows:
                f.write(self.keys[row].astype("<i4").tobytes())
                rec = np.empty((BLOCK_VOXELS, 6), dtype="<f4")
                rec[:, 0] = self.sdf[row]
                rec[:, 1] = self.weight[row]
                rec[:, 2:5] = self.color[row]
                rec[:, 5] = self.color_weight[row]
                f.write(rec.tobytes())

    @classmethod
    def load_snapshot(cls, path, max_blocks: int = 100_000) -> "VoxelStore":
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != _SNAPSHOT_MAGIC:
                raise ValueError(f"{path}: not a volume snapshot (bad magic {magic!r})")
            version, mode_byte, voxel_size, trunc, theta, count = struct.unpack(
                "<IBfffQ", f.read(struct.calcsize("<IBfffQ")))
            if version != _SNAPSHOT_VERSION:
                raise ValueError(f"{path}: unsupported snapshot version {version}")
            mode = REGULAR if mode_byte == 0 else DIRECTIONAL
            store = cls(mode=mode, voxel_size=voxel_size, trunc_dist=trunc,
                        dir_threshold=theta, max_blocks=max(max_blocks, int(count)))
            store._grow(int(count))
            for n in range(int(count)):
                key = np.frombuffer(f.read(16), dtype="<i4")
                rec = np.frombuffer(f.read(BLOCK_VOXELS * VOXEL_RECORD_BYTES),
                                    dtype="<f4").reshape(BLOCK_VOXELS, 6)
                row = store.n_blocks
                store.n_blocks += 1
                store.keys[row] = key
                store.sdf[row] = rec[:, 0]
                store.weight[row] = rec[:, 1]
                store.color[row] = rec[:, 2:5]
                store.color_weight[row] = rec[:, 5]
                packed = pack_keys(key[None, :3].astype(np.int64),
                                   np.array([key[3]], dtype=np.int64))
                store._index.insert(packed[0], row)
        return store


def voxel_index_of_world(points, voxel_size):
    """Integer voxel index containing each world point (voxel centers at +0.5).

    Rounds to the nearest center so that exact voxel centers map back to
    their own index despite floating-point division error.
    """
    return np.rint(np.asarray(points, dtype=np.float64) / voxel_size - 0.5).astype(np.int64)

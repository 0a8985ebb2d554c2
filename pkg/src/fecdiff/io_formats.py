"""Binary file formats: FECTRAJ1 trajectories, FECKV1 caches, FECMASK1 masks.

All integers and floats are little-endian; tensor payloads are row-major.
Float width 32 or 64 applies to payloads only (headers are fixed width);
in-memory state is always float64 and down-conversion happens here.
"""

from __future__ import annotations

import struct

import numpy as np

from .denoiser import KVCache
from .sampling import Trajectory

TRAJ_MAGIC = b"FECTRAJ1"
KV_MAGIC = b"FECKV1"
MASK_MAGIC = b"FECMASK1"

_VERSION = 1


def _dtype(width: int):
    if width == 32:
        return np.dtype("<f4")
    if width == 64:
        return np.dtype("<f8")
    raise ValueError(f"float width must be 32 or 64, got {width}")


def _write_u32s(f, *values: int):
    f.write(struct.pack("<" + "I" * len(values), *values))


def _read_u32s(f, n: int) -> tuple[int, ...]:
    return struct.unpack("<" + "I" * n, f.read(4 * n))


def _write_array(f, arr: np.ndarray, width: int):
    f.write(np.ascontiguousarray(arr, dtype=_dtype(width)).tobytes())


def _read_array(f, shape: tuple[int, ...], width: int) -> np.ndarray:
    n = int(np.prod(shape))
    raw = f.read(n * (width // 8))
    return np.frombuffer(raw, dtype=_dtype(width)).reshape(shape).astype(np.float64)


def _expect_magic(f, magic: bytes, path):
    got = f.read(len(magic))
    if got != magic:
        raise ValueError(f"{path}: bad magic {got!r}, expected {magic!r}")


def write_trajectory(path, traj: Trajectory, float_width: int = 64):
    """Header: version, steps, float width, dims, guidance, seed, timestep
    list; payload: latents by descending t, then t = 0."""
    dims = traj[0].shape
    with open(path, "wb") as f:
        f.write(TRAJ_MAGIC)
        _write_u32s(f, _VERSION, len(traj.timesteps), float_width, len(dims), *dims)
        f.write(struct.pack("<d", traj.guidance))
        f.write(struct.pack("<q", -1 if traj.seed is None else traj.seed))
        _write_u32s(f, *traj.timesteps)
        for t in traj.timesteps:
            _write_array(f, traj[t], float_width)
        _write_array(f, traj[0], float_width)


def read_trajectory(path) -> Trajectory:
    with open(path, "rb") as f:
        _expect_magic(f, TRAJ_MAGIC, path)
        version, steps, width, rank = _read_u32s(f, 4)
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported trajectory version {version}")
        dims = _read_u32s(f, rank)
        (guidance,) = struct.unpack("<d", f.read(8))
        (seed,) = struct.unpack("<q", f.read(8))
        timesteps = _read_u32s(f, steps)
        latents = {t: _read_array(f, dims, width) for t in timesteps}
        latents[0] = _read_array(f, dims, width)
    return Trajectory(
        latents=latents, timesteps=tuple(timesteps), guidance=guidance,
        seed=None if seed < 0 else seed,
    )


def write_kv_cache(path, cache: KVCache, float_width: int = 64):
    """Header: version, steps, layer count, float width, K/V dims, timestep
    list; entries ordered by (t descending, layer ascending), K before V."""
    timesteps = cache.timesteps()
    if not timesteps:
        raise ValueError("cannot serialize an empty KV cache")
    layer_count = cache.layer_count or (len(cache) // len(timesteps))
    k0, v0 = cache.fetch(timesteps[0], 0)
    with open(path, "wb") as f:
        f.write(KV_MAGIC)
        _write_u32s(f, _VERSION, len(timesteps), layer_count, float_width)
        _write_u32s(f, len(k0.shape), *k0.shape)
        _write_u32s(f, len(v0.shape), *v0.shape)
        _write_u32s(f, *timesteps)
        for t in timesteps:
            for layer in range(layer_count):
                k, v = cache.fetch(t, layer)
                _write_array(f, k, float_width)
                _write_array(f, v, float_width)


def read_kv_cache(path) -> KVCache:
    cache = KVCache()
    with open(path, "rb") as f:
        _expect_magic(f, KV_MAGIC, path)
        version, steps, layer_count, width = _read_u32s(f, 4)
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported KV cache version {version}")
        (k_rank,) = _read_u32s(f, 1)
        k_dims = _read_u32s(f, k_rank)
        (v_rank,) = _read_u32s(f, 1)
        v_dims = _read_u32s(f, v_rank)
        timesteps = _read_u32s(f, steps)
        for t in timesteps:
            for layer in range(layer_count):
                k = _read_array(f, k_dims, width)
                v = _read_array(f, v_dims, width)
                cache.store(t, layer, k, v)
    cache.layer_count = layer_count
    return cache


def write_mask(path, mask: np.ndarray, float_width: int = 64):
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise ValueError("mask must be a 2-D spatial grid")
    with open(path, "wb") as f:
        f.write(MASK_MAGIC)
        _write_u32s(f, _VERSION, float_width, *mask.shape)
        _write_array(f, mask, float_width)


def read_mask(path) -> np.ndarray:
    with open(path, "rb") as f:
        _expect_magic(f, MASK_MAGIC, path)
        version, width, h, w = _read_u32s(f, 4)
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported mask version {version}")
        return _read_array(f, (h, w), width)

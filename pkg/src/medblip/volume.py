"""3D volume preparation, sub-volume patching and patch-token embedding."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from . import autodiff as ad
from .layers import trunc_normal

_VOLUME_DTYPE_F32 = 0


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    stride: int
    dim: int

    def __post_init__(self):
        if self.patch_size < 1 or self.stride < 1:
            raise ValueError("patch size and stride must be positive")
        if self.patch_size > self.dim:
            raise ValueError(f"patch size {self.patch_size} exceeds volume dim {self.dim}")

    @property
    def per_axis(self):
        return (self.dim - self.patch_size) // self.stride + 1

    @property
    def num_patches(self):
        return self.per_axis ** 3

    @property
    def patch_len(self):
        return self.patch_size ** 3


def prepare_volume(raw, target):
    """Zero-pad to a cube (centred), rescale to ``target``^3 trilinearly, clamp to [0, 1]."""
    if target <= 0:
        raise ValueError(f"target size must be positive, got {target}")
    raw = np.asarray(raw)
    if raw.ndim != 3 or min(raw.shape) < 1:
        raise ValueError(f"expected a 3D volume with positive dims, got shape {raw.shape}")
    side = max(raw.shape)
    pad = [((side - n) // 2, side - n - (side - n) // 2) for n in raw.shape]
    cube = np.pad(raw, pad, mode="constant") if any(sum(p) for p in pad) else raw
    if side == target:
        out = cube.astype(np.float32, copy=True)
    else:
        out = ndimage.zoom(cube.astype(np.float64), target / side, order=1, mode="nearest", grid_mode=False)
        out = out.astype(np.float32)
    assert out.shape == (target,) * 3, out.shape
    return np.clip(out, 0.0, 1.0)


def patchify(volume, grid):
    """Flattened sub-volumes in (z, y, x) block order, shape (N_v, p^3)."""
    v = np.asarray(volume)
    if v.shape != (grid.dim,) * 3:
        raise ValueError(f"volume shape {v.shape} does not match grid dim {grid.dim}")
    p, s = grid.patch_size, grid.stride
    windows = sliding_window_view(v, (p, p, p))[::s, ::s, ::s]
    n = grid.per_axis
    return np.ascontiguousarray(windows[:n, :n, :n].reshape(n ** 3, p ** 3))


def embed_tokens(patches, w_proj, pos, aggregate=None):
    """Project patches and add positions; prepend the aggregate token if given.

    ``patches`` is (B, N_v, p^3) or (N_v, p^3); returns (B, N_v + a, d) or
    (N_v + a, d) accordingly, with row 0 = aggregate + pos[0] when a = 1.
    """
    squeeze = False
    if not isinstance(patches, ad.Tensor):
        patches = ad.Tensor(np.asarray(patches, dtype=w_proj.dtype))
    if patches.ndim == 2:
        patches = ad.reshape(patches, (1,) + patches.shape)
        squeeze = True
    b, n_v, plen = patches.shape
    if w_proj.shape[0] != plen:
        raise ad.ShapeError(f"embed_tokens: patch length {plen} != projection rows {w_proj.shape[0]}")
    d = w_proj.shape[1]
    a = 0 if aggregate is None else 1
    if pos.shape != (n_v + a, d):
        raise ad.ShapeError(f"embed_tokens: position table {pos.shape} != {(n_v + a, d)}")
    tokens = ad.matmul(patches, w_proj)
    if aggregate is not None:
        agg = ad.reshape(aggregate, (1, 1, d))
        agg = ad.add(agg, ad.Tensor(np.zeros((b, 1, d), dtype=w_proj.dtype)))
        tokens = ad.concat([agg, tokens], axis=1)
    out = ad.add(tokens, pos)
    if squeeze:
        out = ad.reshape(out, out.shape[1:])
    return out


def init_embed(store, rng, grid, d_vis, aggregate=True, dtype=np.float32, std=0.02):
    store.add("embed.proj.w", trunc_normal(rng, (grid.patch_len, d_vis), std).astype(dtype))
    store.add("embed.pos", trunc_normal(rng, (grid.num_patches + int(aggregate), d_vis), std).astype(dtype))
    if aggregate:
        store.add("embed.agg", trunc_normal(rng, (1, d_vis), std).astype(dtype))


def embed_from_store(store, patches):
    agg = store["embed.agg"] if "embed.agg" in store else None
    return embed_tokens(patches, store["embed.proj.w"], store["embed.pos"], agg)


# --------------------------------------------------------------------------
# volume files: dims u32 x3 | dtype u8 | little-endian float32 payload


def write_volume(path, volume):
    v = np.asarray(volume, dtype="<f4")
    if v.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {v.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3IB", *v.shape, _VOLUME_DTYPE_F32))
        fh.write(np.ascontiguousarray(v).tobytes())


def read_volume(path):
    raw = Path(path).read_bytes()
    if len(raw) < 13:
        raise ValueError(f"{path}: too short for a volume header")
    d0, d1, d2, code = struct.unpack_from("<3IB", raw)
    if code != _VOLUME_DTYPE_F32:
        raise ValueError(f"{path}: unsupported volume dtype code {code}")
    n = d0 * d1 * d2
    if len(raw) != 13 + 4 * n:
        raise ValueError(f"{path}: payload has {len(raw) - 13} bytes, expected {4 * n}")
    return np.frombuffer(raw, dtype="<f4", offset=13).reshape(d0, d1, d2).astype(np.float32)

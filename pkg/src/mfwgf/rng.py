"""Counter-based random streams for reproducible particle updates.

The particle engine needs per-particle Gaussian noise that is a pure
function of ``(seed, iteration, particle)`` so that serial and parallel
execution — and re-runs on different machines — agree bit for bit.
Stateful generators cannot provide that cheaply, so this module implements
the Philox-4x32-10 counter-based generator (Salmon et al.'s "parallel
random numbers" construction) vectorized over numpy arrays, plus a
Box–Muller transform on top.

Layout: each 128-bit Philox block is indexed by the four 32-bit counter
words ``(block, row, iteration, purpose)`` and keyed by the 64-bit user
seed split into two words.  One block yields two float64 standard normals,
so row ``r`` of an ``(rows, cols)`` request consumes blocks
``(0..ceil(cols/2)-1, r, iteration, purpose)`` — independent of how many
rows are requested, which is what makes the streams per-particle stable.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "PURPOSE_STEP_NOISE",
    "PURPOSE_INIT",
    "PURPOSE_GENERIC",
    "philox_4x32_10",
    "counter_uniforms",
    "counter_normals",
]

# Distinct stream tags so engine noise, cloud initialization, and ad-hoc
# draws never overlap even under equal (seed, iteration, row).
PURPOSE_STEP_NOISE = 0x6E6F6973  # "nois"
PURPOSE_INIT = 0x696E6974  # "init"
PURPOSE_GENERIC = 0x67656E72  # "genr"

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_WEYL0 = 0x9E3779B9  # golden-ratio increment for key word 0
_WEYL1 = 0xBB67AE85  # sqrt(3)-1 increment for key word 1
_MASK32 = 0xFFFFFFFF
_INV53 = float(2.0**-53)


def philox_4x32_10(c0, c1, c2, c3, key0: int, key1: int):
    """Run ten Philox-4x32 rounds on vectorized counter words.

    Parameters
    ----------
    c0, c1, c2, c3 : uint32 arrays (broadcastable to a common shape)
        The four counter words.
    key0, key1 : int
        The two 32-bit key words.

    Returns
    -------
    Four uint32 arrays of the common broadcast shape: the output block.
    """
    x0, x1, x2, x3 = (np.asarray(c, dtype=np.uint32) for c in (c0, c1, c2, c3))
    x0, x1, x2, x3 = np.broadcast_arrays(x0, x1, x2, x3)
    k0 = key0 & _MASK32
    k1 = key1 & _MASK32
    for rnd in range(10):
        if rnd:
            # Weyl-sequence key schedule; the final round uses the 9th bump.
            k0 = (k0 + _WEYL0) & _MASK32
            k1 = (k1 + _WEYL1) & _MASK32
        p0 = _M0 * x0.astype(np.uint64)
        p1 = _M1 * x2.astype(np.uint64)
        hi0 = (p0 >> np.uint64(32)).astype(np.uint32)
        lo0 = p0.astype(np.uint32)
        hi1 = (p1 >> np.uint64(32)).astype(np.uint32)
        lo1 = p1.astype(np.uint32)
        x0, x1, x2, x3 = (
            hi1 ^ x1 ^ np.uint32(k0),
            lo1,
            hi0 ^ x3 ^ np.uint32(k1),
            lo0,
        )
    return x0, x1, x2, x3


def _split_seed(seed: int) -> tuple[int, int]:
    s = int(seed) & 0xFFFFFFFFFFFFFFFF
    return s & _MASK32, (s >> 32) & _MASK32


def _blocks(seed: int, purpose: int, iteration: int, rows: int, nblocks: int):
    """Evaluate Philox at the (block, row) counter grid; returns 4 uint32 arrays."""
    if iteration < 0 or iteration > _MASK32:
        raise ValueError(f"iteration {iteration} outside the 32-bit counter range")
    key0, key1 = _split_seed(seed)
    j = np.arange(nblocks, dtype=np.uint32)[None, :]
    r = np.arange(rows, dtype=np.uint32)[:, None]
    c0 = np.broadcast_to(j, (rows, nblocks))
    c1 = np.broadcast_to(r, (rows, nblocks))
    c2 = np.full((rows, nblocks), iteration & _MASK32, dtype=np.uint32)
    c3 = np.full((rows, nblocks), purpose & _MASK32, dtype=np.uint32)
    return philox_4x32_10(c0, c1, c2, c3, key0, key1)


def _to_unit(hi: np.ndarray, lo: np.ndarray, open_left: bool) -> np.ndarray:
    """Map two uint32 words to a float64 in [0,1) (or (0,1] if open_left)."""
    v = (hi.astype(np.uint64) << np.uint64(32)) | lo.astype(np.uint64)
    top53 = (v >> np.uint64(11)).astype(np.float64)
    if open_left:
        return (top53 + 1.0) * _INV53
    return top53 * _INV53


def counter_uniforms(
    seed: int, purpose: int, iteration: int, rows: int, cols: int
) -> np.ndarray:
    """(rows, cols) float64 uniforms in [0,1), keyed by (seed, purpose, iteration, row)."""
    nblocks = (cols + 1) // 2
    x0, x1, x2, x3 = _blocks(seed, purpose, iteration, rows, nblocks)
    out = np.empty((rows, 2 * nblocks))
    out[:, 0::2] = _to_unit(x0, x1, open_left=False)
    out[:, 1::2] = _to_unit(x2, x3, open_left=False)
    return out[:, :cols]


def counter_normals(
    seed: int, purpose: int, iteration: int, rows: int, cols: int
) -> np.ndarray:
    """(rows, cols) float64 standard normals, keyed by (seed, purpose, iteration, row).

    Row ``r`` is a pure function of ``(seed, purpose, iteration, r)``: asking
    for more rows or (up to block padding) more columns never changes the
    values already issued, so particle ``b`` sees the same noise whether the
    cloud holds 10 particles or 10000.
    """
    nblocks = (cols + 1) // 2
    x0, x1, x2, x3 = _blocks(seed, purpose, iteration, rows, nblocks)
    # Box–Muller: one 128-bit block -> two normals.
    u1 = _to_unit(x0, x1, open_left=True)  # (0,1]: log is finite
    u2 = _to_unit(x2, x3, open_left=False)
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = (2.0 * np.pi) * u2
    out = np.empty((rows, 2 * nblocks))
    out[:, 0::2] = radius * np.cos(angle)
    out[:, 1::2] = radius * np.sin(angle)
    return out[:, :cols]

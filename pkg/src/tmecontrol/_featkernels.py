"""Lattice statistics on a toroidal grid (8-neighbourhood).

Each statistic has a numba loop kernel and a vectorised numpy version; the
module-level names dispatch on the backend flag.
"""
import numpy as np
from scipy import ndimage

from ._accel import USE_NUMBA, njit

TUMOR, T_NAIVE, T_EFF, T_EXH = 0, 1, 2, 3

_OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


# -- contact counts ----------------------------------------------------------

def _contacts_loop(grid):
    """Returns (tumor-occupied pairs, tumor-T pairs, tumor-tumor pairs,
    effectors touching tumor, exhausted touching tumor)."""
    G = grid.shape[0]
    pairs = 0
    tpairs = 0
    tt = 0
    eff_touch = 0
    exh_touch = 0
    for y in range(G):
        for x in range(G):
            c = grid[y, x]
            if c < 0:
                continue
            touch = False
            for dy in range(-1, 2):
                for dx in range(-1, 2):
                    if dy == 0 and dx == 0:
                        continue
                    nc = grid[(y + dy) % G, (x + dx) % G]
                    if nc < 0:
                        continue
                    if c == 0:
                        pairs += 1
                        if nc == 0:
                            tt += 1
                        elif nc <= 3:
                            tpairs += 1
                    elif nc == 0:
                        touch = True
            if touch:
                if c == 2:
                    eff_touch += 1
                elif c == 3:
                    exh_touch += 1
    return pairs, tpairs, tt, eff_touch, exh_touch


def _neighbour_count(mask):
    m = mask.astype(np.int32)
    total = np.zeros_like(m)
    for dy, dx in _OFFSETS:
        total += np.roll(m, (dy, dx), axis=(0, 1))
    return total


def _contacts_numpy(grid):
    tumor = grid == TUMOR
    occ = grid >= 0
    tcell = (grid >= T_NAIVE) & (grid <= T_EXH)
    n_tum = _neighbour_count(tumor)
    pairs = int(_neighbour_count(occ)[tumor].sum())
    tpairs = int(_neighbour_count(tcell)[tumor].sum())
    tt = int(n_tum[tumor].sum())
    eff_touch = int(np.count_nonzero((grid == T_EFF) & (n_tum > 0)))
    exh_touch = int(np.count_nonzero((grid == T_EXH) & (n_tum > 0)))
    return pairs, tpairs, tt, eff_touch, exh_touch


# -- tumor connected components (8-connected, periodic) ------------------------

def _components_loop(grid):
    G = grid.shape[0]
    seen = np.zeros((G, G), dtype=np.bool_)
    stack = np.empty(G * G, dtype=np.int64)
    n = 0
    for y0 in range(G):
        for x0 in range(G):
            if grid[y0, x0] != 0 or seen[y0, x0]:
                continue
            n += 1
            seen[y0, x0] = True
            top = 0
            stack[0] = y0 * G + x0
            top = 1
            while top > 0:
                top -= 1
                s = stack[top]
                y = s // G
                x = s % G
                for dy in range(-1, 2):
                    for dx in range(-1, 2):
                        yy = (y + dy) % G
                        xx = (x + dx) % G
                        if grid[yy, xx] == 0 and not seen[yy, xx]:
                            seen[yy, xx] = True
                            stack[top] = yy * G + xx
                            top += 1
    return n


def _components_numpy(grid):
    labels, n = ndimage.label(grid == TUMOR, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return 0
    G = grid.shape[0]
    parent = np.arange(n + 1)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    # stitch labels across the periodic seams (rows then columns, with diagonals)
    idx = np.arange(G)
    seams = [
        (labels[G - 1, :], labels[0, :]),
        (labels[G - 1, :], labels[0, (idx + 1) % G]),
        (labels[G - 1, :], labels[0, (idx - 1) % G]),
        (labels[:, G - 1], labels[:, 0]),
        (labels[:, G - 1], labels[(idx + 1) % G, 0]),
        (labels[:, G - 1], labels[(idx - 1) % G, 0]),
    ]
    for a, b in seams:
        for i, j in zip(a[(a > 0) & (b > 0)], b[(a > 0) & (b > 0)]):
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[max(ri, rj)] = min(ri, rj)
    return len({find(i) for i in range(1, n + 1)})


# -- mean Chebyshev distance from tumor to nearest T cell ----------------------

def _tumor_t_distance_loop(grid):
    """Sum over tumor sites of the periodic Chebyshev distance to the nearest T cell, or -1 without T cells."""
    G = grid.shape[0]
    dist = np.full((G, G), -1, dtype=np.int64)
    queue = np.empty(G * G, dtype=np.int64)
    head = 0
    tail = 0
    for y in range(G):
        for x in range(G):
            c = grid[y, x]
            if c >= 1 and c <= 3:
                dist[y, x] = 0
                queue[tail] = y * G + x
                tail += 1
    if tail == 0:
        return -1.0
    while head < tail:
        s = queue[head]
        head += 1
        y = s // G
        x = s % G
        d = dist[y, x] + 1
        for dy in range(-1, 2):
            for dx in range(-1, 2):
                yy = (y + dy) % G
                xx = (x + dx) % G
                if dist[yy, xx] < 0:
                    dist[yy, xx] = d
                    queue[tail] = yy * G + xx
                    tail += 1
    total = 0.0
    for y in range(G):
        for x in range(G):
            if grid[y, x] == 0:
                total += dist[y, x]
    return total


def _tumor_t_distance_numpy(grid):
    reached = (grid >= T_NAIVE) & (grid <= T_EXH)
    if not reached.any():
        return -1.0
    tumor = grid == TUMOR
    dist = np.where(reached, 0, -1)
    d = 0
    while not reached.all():
        d += 1
        grown = ndimage.maximum_filter(reached, size=3, mode="wrap")
        dist[grown & ~reached] = d
        reached = grown
    return float(dist[tumor].sum())


contacts_numba = njit(_contacts_loop)
components_numba = njit(_components_loop)
tumor_t_distance_numba = njit(_tumor_t_distance_loop)

if USE_NUMBA:
    contacts = contacts_numba
    components = components_numba
    tumor_t_distance = tumor_t_distance_numba
else:
    contacts = _contacts_numpy
    components = _components_numpy
    tumor_t_distance = _tumor_t_distance_numpy

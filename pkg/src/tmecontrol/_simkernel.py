"""One lattice update of the surrogate tumor-immune model.

The same source runs compiled (numba) or interpreted (numpy fallback). All
randomness is drawn by the caller, so both paths produce identical grids.
Grid cells hold -1 for empty or a cell-type code 0..6.
"""
from ._accel import USE_NUMBA, njit

# parameter slots (see sim.PARAM_NAMES)
P_MOVE_TUMOR = 0
P_MOVE_T = 1
P_MOVE_MAC = 2
P_PROLIF_TUMOR = 3
P_PROLIF_TEFF = 4
P_DEATH_TUMOR = 5
P_DEATH_TEFF = 6
P_DEATH_TEXH = 7
P_KILL = 8
P_ACT = 9
P_POL = 10
F_M1 = 11
F_M2 = 12
R_EXH = 13
R_ADH = 14

N_UNIFORMS = 6

DY = (-1, -1, -1, 0, 0, 1, 1, 1)
DX = (-1, 0, 1, -1, 1, -1, 0, 1)


def _step(grid, stamp, order_y, order_x, u, p, step):
    G = grid.shape[0]
    ey = [0] * 8
    ex = [0] * 8
    ty = [0] * 8
    tx = [0] * 8
    for i in range(order_y.shape[0]):
        y = order_y[i]
        x = order_x[i]
        c = grid[y, x]
        if c < 0 or stamp[y, x] == step:
            continue
        n_empty = 0
        n_tumor = 0
        n_teff = 0
        has_m1 = False
        has_m2 = False
        for d in range(8):
            yy = (y + DY[d]) % G
            xx = (x + DX[d]) % G
            nc = grid[yy, xx]
            if nc < 0:
                ey[n_empty] = yy
                ex[n_empty] = xx
                n_empty += 1
            elif nc == 0:
                ty[n_tumor] = yy
                tx[n_tumor] = xx
                n_tumor += 1
            elif nc == 2:
                n_teff += 1
            elif nc == 5:
                has_m1 = True
            elif nc == 6:
                has_m2 = True
        u0 = u[i, 0]
        u1 = u[i, 1]
        u2 = u[i, 2]
        u3 = u[i, 3]
        u4 = u[i, 4]
        u5 = u[i, 5]

        move = False
        if c == 0:
            if u0 < p[P_DEATH_TUMOR]:
                grid[y, x] = -1
                continue
            if u4 < p[P_PROLIF_TUMOR]:
                if n_empty > 0:
                    j = int(u5 * n_empty)
                    grid[ey[j], ex[j]] = 0
                    stamp[ey[j], ex[j]] = step
                continue
            if u4 < p[P_PROLIF_TUMOR] + p[P_MOVE_TUMOR] and n_empty > 0:
                j = int(u5 * n_empty)
                # tumor neighbours at the target, not counting the mover itself
                n_after = -1
                for d in range(8):
                    if grid[(ey[j] + DY[d]) % G, (ex[j] + DX[d]) % G] == 0:
                        n_after += 1
                # every broken tumor-tumor bond resists independently
                if n_after < n_tumor and u3 >= (1.0 - p[R_ADH]) ** (n_tumor - n_after):
                    continue
                move = True
        elif c == 1:
            if n_tumor > 0 and u1 < p[P_ACT]:
                grid[y, x] = 2
                stamp[y, x] = step
                continue
            move = u4 < p[P_MOVE_T] and n_empty > 0
        elif c == 2:
            if u0 < p[P_DEATH_TEFF]:
                grid[y, x] = -1
                continue
            if n_tumor > 0:
                pk = p[P_KILL] * p[F_M1] if has_m1 else p[P_KILL]
                if u1 < pk:
                    j = int(u2 * n_tumor)
                    grid[ty[j], tx[j]] = -1
                re = p[R_EXH] * p[F_M2] if has_m2 else p[R_EXH]
                if u3 < re:
                    grid[y, x] = 3
                    stamp[y, x] = step
                    continue
                if u4 < p[P_PROLIF_TEFF] and n_empty > 0:
                    j = int(u5 * n_empty)
                    grid[ey[j], ex[j]] = 2
                    stamp[ey[j], ex[j]] = step
                continue
            move = u4 < p[P_MOVE_T] and n_empty > 0
        elif c == 3:
            # exhausted cells without a supporting niche die faster
            if u0 < p[P_DEATH_TEXH] * (1 + n_tumor * n_tumor * n_tumor / 16.0):
                grid[y, x] = -1
                continue
            move = n_tumor == 0 and u4 < p[P_MOVE_T] and n_empty > 0
        elif c == 4:
            if u1 < p[P_POL]:
                if n_teff > n_tumor:
                    grid[y, x] = 5
                    stamp[y, x] = step
                    continue
                if n_tumor > n_teff:
                    grid[y, x] = 6
                    stamp[y, x] = step
                    continue
            move = u4 < p[P_MOVE_MAC] and n_empty > 0
        else:
            move = u4 < p[P_MOVE_MAC] and n_empty > 0

        if move:
            j = int(u5 * n_empty)
            grid[ey[j], ex[j]] = c
            stamp[ey[j], ex[j]] = step
            grid[y, x] = -1


step_python = _step
step_numba = njit(_step)
step = step_numba if USE_NUMBA else step_python

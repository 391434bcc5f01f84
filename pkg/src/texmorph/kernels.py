"""Hot inner loops, each with a numba kernel and a vectorised numpy twin.

Both variants perform the same floating-point operations in the same order,
so they return bitwise-identical results. ``_accel.USE_NUMBA`` picks which
one the public wrappers call.
"""
import numpy as np

from ._accel import USE_NUMBA, njit


# --------------------------------------------------------------------------
# Linear assignment (minimisation), shortest augmenting path with potentials.
# --------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _hungarian_loops(cost):
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=np.bool_)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    rows_to_cols = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        rows_to_cols[p[j] - 1] = j - 1
    return rows_to_cols


def _hungarian_numpy(cost):
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            upd = free & (cur < minv[1:])
            minv[1:][upd] = cur[upd]
            way[1:][upd] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    rows_to_cols = np.empty(n, dtype=np.int64)
    rows_to_cols[p[1:] - 1] = np.arange(n)
    return rows_to_cols


def min_cost_assignment(cost, use_numba=None):
    """Row -> column indices of a minimum-cost perfect matching on a square matrix."""
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if cost.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    if USE_NUMBA if use_numba is None else use_numba:
        return _hungarian_loops(cost)
    return _hungarian_numpy(cost)


# --------------------------------------------------------------------------
# Z-buffered square splatting.
# --------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _splat_loops(px, py, depth, colors, k, width, height):
    img = np.ones((height, width, 3), dtype=np.float32)
    zbuf = np.full((height, width), np.inf)
    off = k // 2
    for n in range(px.shape[0]):
        for dy in range(k):
            y = py[n] - off + dy
            if y < 0 or y >= height:
                continue
            for dx in range(k):
                x = px[n] - off + dx
                if x < 0 or x >= width:
                    continue
                if depth[n] < zbuf[y, x]:
                    zbuf[y, x] = depth[n]
                    img[y, x, 0] = colors[n, 0]
                    img[y, x, 1] = colors[n, 1]
                    img[y, x, 2] = colors[n, 2]
    return img


def _splat_numpy(px, py, depth, colors, k, width, height):
    img = np.ones((height, width, 3), dtype=np.float32)
    n = px.shape[0]
    if n == 0:
        return img
    off = k // 2
    d = np.arange(k, dtype=np.int64) - off
    ys = (py[:, None, None] + d[None, :, None]) + np.zeros((1, 1, k), dtype=np.int64)
    xs = (px[:, None, None] + d[None, None, :]) + np.zeros((1, k, 1), dtype=np.int64)
    vox = np.broadcast_to(np.arange(n)[:, None, None], ys.shape)
    ys, xs, vox = ys.ravel(), xs.ravel(), vox.ravel()
    keep = (ys >= 0) & (ys < height) & (xs >= 0) & (xs < width)
    ys, xs, vox = ys[keep], xs[keep], vox[keep]
    pix = ys * width + xs
    # nearest depth wins; equal depth keeps the lower voxel index
    order = np.lexsort((vox, depth[vox], pix))
    pix_sorted = pix[order]
    first = np.ones(pix_sorted.shape[0], dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    winners = vox[order][first]
    flat = img.reshape(-1, 3)
    flat[pix_sorted[first]] = colors[winners]
    return img


def splat(px, py, depth, colors, k, width, height, use_numba=None):
    """Splat ``k``x``k`` pixel squares centred at (px, py) with a z-buffer.

    Smaller depth is nearer. Pixels no voxel reaches stay white.
    """
    px = np.ascontiguousarray(px, dtype=np.int64)
    py = np.ascontiguousarray(py, dtype=np.int64)
    depth = np.ascontiguousarray(depth, dtype=np.float64)
    colors = np.ascontiguousarray(colors, dtype=np.float32)
    if USE_NUMBA if use_numba is None else use_numba:
        return _splat_loops(px, py, depth, colors, int(k), int(width), int(height))
    return _splat_numpy(px, py, depth, colors, int(k), int(width), int(height))

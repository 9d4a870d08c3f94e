"""Numba twins of the hot kernels.

Statement order mirrors ``numpy_impl`` so the two backends agree on identical
inputs.  Importing this module requires a working numba; the package selector
falls back to the numpy implementations when it is unavailable.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def sat_gap(
    ax, ay, asin, acos, alen, awid,
    bx, by, bsin, bcos, blen, bwid,
):
    uax = acos
    uay = asin
    vax = -asin
    vay = acos
    ubx = bcos
    uby = bsin
    vbx = -bsin
    vby = bcos
    dx = bx - ax
    dy = by - ay
    hal = 0.5 * alen
    haw = 0.5 * awid
    hbl = 0.5 * blen
    hbw = 0.5 * bwid

    proj = abs(dx * uax + dy * uay)
    rb = hbl * abs(ubx * uax + uby * uay) + hbw * abs(vbx * uax + vby * uay)
    best = proj - hal - rb

    proj = abs(dx * vax + dy * vay)
    rb = hbl * abs(ubx * vax + uby * vay) + hbw * abs(vbx * vax + vby * vay)
    g = proj - haw - rb
    if g > best:
        best = g

    proj = abs(dx * ubx + dy * uby)
    ra = hal * abs(uax * ubx + uay * uby) + haw * abs(vax * ubx + vay * uby)
    g = proj - ra - hbl
    if g > best:
        best = g

    proj = abs(dx * vbx + dy * vby)
    ra = hal * abs(uax * vbx + uay * vby) + haw * abs(vax * vbx + vay * vby)
    g = proj - ra - hbw
    if g > best:
        best = g
    return best


@njit(cache=True)
def route_pose(route_x, route_y, route_cum, s):
    lo = 0
    hi = route_cum.shape[0]
    while lo < hi:
        mid = (lo + hi) // 2
        if route_cum[mid] > s:
            hi = mid
        else:
            lo = mid + 1
    k = lo - 1
    last = route_cum.shape[0] - 2
    if k < 0:
        k = 0
    if k > last:
        k = last
    seg = route_cum[k + 1] - route_cum[k]
    frac = (s - route_cum[k]) / seg
    px = route_x[k] + frac * (route_x[k + 1] - route_x[k])
    py = route_y[k] + frac * (route_y[k + 1] - route_y[k])
    hx = (route_x[k + 1] - route_x[k]) / seg
    hy = (route_y[k + 1] - route_y[k]) / seg
    return px, py, hx, hy


@njit(cache=True)
def drive(
    route_x, route_y, route_cum,
    s0, v0, v_target, dt,
    ego_len, ego_wid,
    tx, ty, tsin, tcos, tvx, tvy, tlen, twid, texist,
    ttc_threshold, decel_limit, accel_limit, standstill_gap,
    horizon, lat_margin,
):
    n_tracks = tx.shape[0]
    n_steps = tx.shape[1]
    ex = np.empty(n_steps)
    ey = np.empty(n_steps)
    esin = np.empty(n_steps)
    ecos = np.empty(n_steps)
    ev = np.empty(n_steps)
    coll_t = -1
    min_clear = np.inf
    s = s0
    v = v0
    for t in range(n_steps):
        px, py, hx, hy = route_pose(route_x, route_y, route_cum, s)
        ex[t] = px
        ey[t] = py
        esin[t] = hy
        ecos[t] = hx
        ev[t] = v
        brake = False
        for n in range(n_tracks):
            if texist[n, t] == 0:
                continue
            g = sat_gap(
                px, py, hy, hx, ego_len, ego_wid,
                tx[n, t], ty[n, t], tsin[n, t], tcos[n, t],
                tlen[n, t], twid[n, t],
            )
            if g < min_clear:
                min_clear = g
            if coll_t < 0 and g <= 0.0:
                coll_t = t
            rx = tx[n, t] - px
            ry = ty[n, t] - py
            fwd = rx * hx + ry * hy
            lat = -rx * hy + ry * hx
            if fwd > 0.0 and fwd < horizon and abs(lat) < 0.5 * (ego_wid + twid[n, t]) + lat_margin:
                gap = fwd - 0.5 * (ego_len + tlen[n, t])
                closing = v - (tvx[n, t] * hx + tvy[n, t] * hy)
                if gap < standstill_gap:
                    brake = True
                elif closing > 1e-9 and gap < ttc_threshold * closing:
                    brake = True
        if t == n_steps - 1:
            break
        if brake:
            a = -decel_limit
        else:
            a = (v_target - v) / dt
            if a > accel_limit:
                a = accel_limit
            if a < -accel_limit:
                a = -accel_limit
        v = v + a * dt
        if v < 0.0:
            v = 0.0
        s = s + v * dt
        smax = route_cum[route_cum.shape[0] - 1]
        if s > smax:
            s = smax
    return ex, ey, esin, ecos, ev, coll_t, min_clear


@njit(cache=True)
def lloyd(points, centroids, max_iter):
    n, dim = points.shape
    m = centroids.shape[0]
    centroids = centroids.copy()
    labels = np.full(n, -1, dtype=np.int64)
    new_labels = np.empty(n, dtype=np.int64)
    counts = np.zeros(m, dtype=np.int64)
    it = 0
    for it in range(max_iter):
        for i in range(n):
            best = np.inf
            bj = 0
            for j in range(m):
                d = 0.0
                for q in range(dim):
                    diff = points[i, q] - centroids[j, q]
                    d += diff * diff
                if d < best:
                    best = d
                    bj = j
            new_labels[i] = bj
        if it > 0:
            same = True
            for i in range(n):
                if new_labels[i] != labels[i]:
                    same = False
                    break
            if same:
                break
        labels[:] = new_labels
        counts[:] = 0
        for i in range(n):
            counts[labels[i]] += 1
        for j in range(m):
            if counts[j] != 0:
                continue
            big = 0
            for q in range(1, m):
                if counts[q] > counts[big]:
                    big = q
            far = -1
            far_d = -1.0
            for i in range(n):
                if labels[i] != big:
                    continue
                d = 0.0
                for q in range(dim):
                    diff = points[i, q] - centroids[big, q]
                    d += diff * diff
                if d > far_d:
                    far_d = d
                    far = i
            labels[far] = j
            counts[big] -= 1
            counts[j] += 1
        centroids[:, :] = 0.0
        for i in range(n):
            for q in range(dim):
                centroids[labels[i], q] += points[i, q]
        for j in range(m):
            for q in range(dim):
                centroids[j, q] /= counts[j]
    return labels, centroids, it + 1


@njit(cache=True)
def draw_clustered(members, sizes, offsets, cumw, uniforms, out, picked0):
    budget = out.shape[0]
    n_uniform = uniforms.shape[0]
    m = sizes.shape[0]
    total_w = cumw[m - 1]
    picked = picked0
    c = 0
    while picked < budget:
        if c + 2 > n_uniform:
            break
        r = uniforms[c] * total_w
        c += 1
        lo = 0
        hi = m
        while lo < hi:
            mid = (lo + hi) // 2
            if cumw[mid] > r:
                hi = mid
            else:
                lo = mid + 1
        j = lo
        if j >= m:
            j = m - 1
        if sizes[j] == 0:
            continue
        k = int(uniforms[c] * sizes[j])
        c += 1
        if k >= sizes[j]:
            k = sizes[j] - 1
        a = offsets[j] + k
        last = offsets[j] + sizes[j] - 1
        out[picked] = members[a]
        members[a] = members[last]
        sizes[j] -= 1
        picked += 1
    return picked, c

"""Pure-numpy implementations of the hot kernels.

These are the reference semantics; the numba twins in ``numba_impl`` follow
the same statement order so both backends produce identical results on
identical inputs (the sampler and replay kernels bit-for-bit, k-means up to
summation order in the vectorized distance path).
"""

from __future__ import annotations

import numpy as np


def sat_gap(
    ax, ay, asin, acos, alen, awid,
    bx, by, bsin, bcos, blen, bwid,
):
    """Separating-axis clearance between two oriented rectangles.

    Positive: the largest gap along any of the four face normals (the boxes
    are disjoint).  Non-positive: the boxes overlap and the value is the
    penetration depth along the least-overlapping axis (negated).
    Accepts scalars or broadcastable arrays.
    """
    uax, uay = acos, asin
    vax, vay = -asin, acos
    ubx, uby = bcos, bsin
    vbx, vby = -bsin, bcos
    dx = bx - ax
    dy = by - ay
    hal = 0.5 * alen
    haw = 0.5 * awid
    hbl = 0.5 * blen
    hbw = 0.5 * bwid

    # axis 1: A's length direction
    proj = np.abs(dx * uax + dy * uay)
    rb = hbl * np.abs(ubx * uax + uby * uay) + hbw * np.abs(vbx * uax + vby * uay)
    best = proj - hal - rb
    # axis 2: A's width direction
    proj = np.abs(dx * vax + dy * vay)
    rb = hbl * np.abs(ubx * vax + uby * vay) + hbw * np.abs(vbx * vax + vby * vay)
    best = np.maximum(best, proj - haw - rb)
    # axis 3: B's length direction
    proj = np.abs(dx * ubx + dy * uby)
    ra = hal * np.abs(uax * ubx + uay * uby) + haw * np.abs(vax * ubx + vay * uby)
    best = np.maximum(best, proj - ra - hbl)
    # axis 4: B's width direction
    proj = np.abs(dx * vbx + dy * vby)
    ra = hal * np.abs(uax * vbx + uay * vby) + haw * np.abs(vax * vbx + vay * vby)
    best = np.maximum(best, proj - ra - hbw)
    return best


def route_pose(route_x, route_y, route_cum, s):
    """Point and unit tangent on a piecewise-linear route at arclength s."""
    k = int(np.searchsorted(route_cum, s, side="right")) - 1
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


def drive(
    route_x, route_y, route_cum,
    s0, v0, v_target, dt,
    ego_len, ego_wid,
    tx, ty, tsin, tcos, tvx, tvy, tlen, twid, texist,
    ttc_threshold, decel_limit, accel_limit, standstill_gap,
    horizon, lat_margin,
):
    """Replay the ego policy along a route against logged agent trajectories.

    Per step: place the ego at its arclength, measure SAT clearance against
    every live agent, then decide braking from the corridor test (agent ahead
    inside the swept lane and either inside the standstill gap or closing with
    time-to-contact under the threshold).  Returns the driven ego states, the
    first collision step (-1 if none), and the minimum clearance over the
    horizon (+inf when no live agent ever appears).
    """
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
        live = texist[:, t] != 0
        if live.any():
            g = sat_gap(
                px, py, hy, hx, ego_len, ego_wid,
                tx[live, t], ty[live, t], tsin[live, t], tcos[live, t],
                tlen[live, t], twid[live, t],
            )
            gmin = g.min()
            if gmin < min_clear:
                min_clear = gmin
            if coll_t < 0 and gmin <= 0.0:
                coll_t = t
            rx = tx[live, t] - px
            ry = ty[live, t] - py
            fwd = rx * hx + ry * hy
            lat = -rx * hy + ry * hx
            in_corridor = (
                (fwd > 0.0)
                & (fwd < horizon)
                & (np.abs(lat) < 0.5 * (ego_wid + twid[live, t]) + lat_margin)
            )
            gap = fwd - 0.5 * (ego_len + tlen[live, t])
            closing = v - (tvx[live, t] * hx + tvy[live, t] * hy)
            danger = in_corridor & (
                (gap < standstill_gap) | ((closing > 1e-9) & (gap < ttc_threshold * closing))
            )
            brake = bool(danger.any())
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
        smax = route_cum[-1]
        if s > smax:
            s = smax
    return ex, ey, esin, ecos, ev, coll_t, min_clear


def lloyd(points, centroids, max_iter):
    """Lloyd iterations with deterministic empty-cluster repair.

    Assignment breaks distance ties toward the lowest cluster index.  An empty
    cluster steals the member farthest from the centroid of the currently
    largest cluster.  Stops when assignments no longer change.
    """
    n, dim = points.shape
    m = centroids.shape[0]
    centroids = centroids.copy()
    labels = np.full(n, -1, dtype=np.int64)
    sq = (points * points).sum(axis=1)
    it = 0
    for it in range(max_iter):
        d2 = sq[:, None] - 2.0 * (points @ centroids.T) + (centroids * centroids).sum(axis=1)[None, :]
        new_labels = np.argmin(d2, axis=1).astype(np.int64)
        if it > 0 and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=m)
        for j in range(m):
            if counts[j] != 0:
                continue
            big = int(np.argmax(counts))
            member_idx = np.nonzero(labels == big)[0]
            diff = points[member_idx] - centroids[big]
            far = member_idx[int(np.argmax((diff * diff).sum(axis=1)))]
            labels[far] = j
            counts[big] -= 1
            counts[j] += 1
        for j in range(m):
            centroids[j] = points[labels == j].sum(axis=0) / counts[j]
    return labels, centroids, it + 1


def draw_clustered(members, sizes, offsets, cumw, uniforms, out, picked0):
    """Weighted cluster draws without replacement, consuming pre-drawn uniforms.

    Each round draws a cluster proportionally to the fixed weights (cumw is
    their cumulative sum), skips it if exhausted without spending budget, else
    draws a member uniformly and removes it.  Returns (picked, consumed); the
    caller refills the uniform buffer until the budget is met.
    """
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

"""Backend parity between the numpy and numba kernel implementations."""

from __future__ import annotations

import os
import subprocess
import sys

import numpy as np
import pytest

from dicekit.kernels import numpy_impl

numba_impl = pytest.importorskip(
    "dicekit.kernels.numba_impl", reason="numba backend unavailable"
)

BACKENDS = [numpy_impl, numba_impl]
BACKEND_IDS = ["numpy", "numba"]


def random_boxes(rng, n):
    theta = rng.uniform(0, 2 * np.pi, size=n)
    return (
        rng.uniform(-10, 10, size=n),
        rng.uniform(-10, 10, size=n),
        np.sin(theta),
        np.cos(theta),
        rng.uniform(0.5, 6.0, size=n),
        rng.uniform(0.5, 3.0, size=n),
    )


class TestSatGap:
    def test_backends_agree_bitwise(self, rng):
        a = random_boxes(rng, 200)
        b = random_boxes(rng, 200)
        got_np = numpy_impl.sat_gap(*a, *b)
        got_nb = np.array(
            [
                numba_impl.sat_gap(*(x[i] for x in a), *(x[i] for x in b))
                for i in range(200)
            ]
        )
        assert np.array_equal(got_np, got_nb)

    def test_identical_boxes_penetrate_fully(self):
        g = numpy_impl.sat_gap(0, 0, 0.0, 1.0, 4.0, 2.0, 0, 0, 0.0, 1.0, 4.0, 2.0)
        assert g == -2.0  # width axis is the least-overlapping one

    def test_symmetry(self, rng):
        # same four axes either way; only the subtraction order differs
        a = random_boxes(rng, 64)
        b = random_boxes(rng, 64)
        np.testing.assert_allclose(
            numpy_impl.sat_gap(*a, *b), numpy_impl.sat_gap(*b, *a), rtol=1e-12, atol=1e-12
        )


class TestRoutePose:
    @pytest.mark.parametrize("impl", BACKENDS, ids=BACKEND_IDS)
    def test_straight_route_interpolation(self, impl):
        x = np.arange(11, dtype=np.float64)
        y = np.zeros(11)
        cum = x.copy()
        px, py, hx, hy = impl.route_pose(x, y, cum, 2.5)
        assert (px, py, hx, hy) == (2.5, 0.0, 1.0, 0.0)
        px, py, _, _ = impl.route_pose(x, y, cum, 0.0)
        assert (px, py) == (0.0, 0.0)
        px, py, _, _ = impl.route_pose(x, y, cum, 10.0)
        assert (px, py) == (10.0, 0.0)

    def test_backends_agree_on_curved_route(self, rng):
        t = np.linspace(0, 2 * np.pi, 40)
        x = np.cumsum(np.abs(rng.normal(1.0, 0.2, size=40)))
        y = np.sin(t) * 3.0
        seg = np.hypot(np.diff(x), np.diff(y))
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        for s in rng.uniform(-1.0, cum[-1] + 1.0, size=50):
            assert numpy_impl.route_pose(x, y, cum, s) == numba_impl.route_pose(x, y, cum, s)


def drive_inputs(rng, n_tracks=4, n_steps=30):
    route_x = np.arange(-10.0, 200.0, 1.0)
    route_y = 0.02 * (route_x - route_x[0]) ** 1.5 / np.sqrt(route_x[-1] - route_x[0])
    seg = np.hypot(np.diff(route_x), np.diff(route_y))
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    tx = rng.uniform(-5, 80, size=(n_tracks, n_steps))
    ty = rng.uniform(-4, 4, size=(n_tracks, n_steps))
    theta = rng.uniform(0, 2 * np.pi, size=(n_tracks, n_steps))
    tsin, tcos = np.sin(theta), np.cos(theta)
    tvx = rng.uniform(-5, 5, size=(n_tracks, n_steps))
    tvy = rng.uniform(-2, 2, size=(n_tracks, n_steps))
    tlen = rng.uniform(1.0, 5.0, size=(n_tracks, n_steps))
    twid = rng.uniform(0.5, 2.0, size=(n_tracks, n_steps))
    texist = (rng.random(size=(n_tracks, n_steps)) > 0.3).astype(np.float64)
    return dict(
        route_x=route_x, route_y=route_y, route_cum=cum,
        s0=10.0, v0=8.0, v_target=12.0, dt=0.5,
        ego_len=4.6, ego_wid=1.9,
        tx=tx, ty=ty, tsin=tsin, tcos=tcos, tvx=tvx, tvy=tvy,
        tlen=tlen, twid=twid, texist=texist,
        ttc_threshold=2.0, decel_limit=6.0, accel_limit=1.5,
        standstill_gap=2.0, horizon=60.0, lat_margin=0.4,
    )


class TestDrive:
    def test_backends_agree_bitwise(self, rng):
        for _ in range(5):
            kw = drive_inputs(rng)
            a = numpy_impl.drive(**kw)
            b = numba_impl.drive(**kw)
            for x, y in zip(a[:5], b[:5]):
                assert np.array_equal(x, y)
            assert a[5] == b[5]
            assert a[6] == b[6]

    @pytest.mark.parametrize("impl", BACKENDS, ids=BACKEND_IDS)
    def test_no_agents_means_infinite_clearance(self, impl, rng):
        kw = drive_inputs(rng, n_tracks=2)
        kw["texist"] = np.zeros_like(kw["texist"])
        ex, ey, esin, ecos, ev, coll_t, min_clear = impl.drive(**kw)
        assert coll_t == -1
        assert min_clear == np.inf
        assert ev[-1] == pytest.approx(kw["v_target"])

    @pytest.mark.parametrize("impl", BACKENDS, ids=BACKEND_IDS)
    def test_brakes_for_stationary_lead(self, impl):
        n_steps = 40
        route_x = np.arange(-10.0, 200.0, 1.0)
        route_y = np.zeros_like(route_x)
        cum = route_x - route_x[0]
        shape = (1, n_steps)
        kw = dict(
            route_x=route_x, route_y=route_y, route_cum=cum,
            s0=10.0, v0=10.0, v_target=10.0, dt=0.5,
            ego_len=4.6, ego_wid=1.9,
            tx=np.full(shape, 40.0), ty=np.zeros(shape),
            tsin=np.zeros(shape), tcos=np.ones(shape),
            tvx=np.zeros(shape), tvy=np.zeros(shape),
            tlen=np.full(shape, 4.5), twid=np.full(shape, 1.8),
            texist=np.ones(shape),
            ttc_threshold=2.5, decel_limit=6.0, accel_limit=1.5,
            standstill_gap=2.0, horizon=60.0, lat_margin=0.4,
        )
        ex, ey, esin, ecos, ev, coll_t, min_clear = impl.drive(**kw)
        assert coll_t == -1
        assert min_clear > 0.0
        assert ev[-1] == 0.0  # came to a stop behind the lead
        # without any braking response the same scene is a collision
        kw["ttc_threshold"] = 0.0
        kw["standstill_gap"] = 0.0
        *_, coll_t2, min_clear2 = impl.drive(**kw)
        assert coll_t2 >= 0
        assert min_clear2 <= 0.0


class TestLloyd:
    def blobs(self, rng, m=4, per=30, dim=3, spread=0.05):
        centers = rng.normal(size=(m, dim)) * 10.0
        pts = np.concatenate(
            [c + rng.normal(scale=spread, size=(per, dim)) for c in centers]
        )
        init = centers + rng.normal(scale=spread, size=centers.shape)
        return pts, init

    def test_backends_agree_on_separated_blobs(self, rng):
        pts, init = self.blobs(rng)
        la, ca, ia = numpy_impl.lloyd(pts, init.copy(), 50)
        lb, cb, ib = numba_impl.lloyd(pts, init.copy(), 50)
        assert np.array_equal(la, lb)
        assert ia == ib
        np.testing.assert_allclose(ca, cb, rtol=1e-12, atol=1e-12)

    def test_converges_to_cluster_means(self, rng):
        pts, init = self.blobs(rng, m=3, per=20)
        labels, centroids, _ = numpy_impl.lloyd(pts, init, 50)
        for j in range(3):
            np.testing.assert_allclose(centroids[j], pts[labels == j].mean(axis=0))

    def test_empty_cluster_is_repaired(self):
        pts = np.array([[0.0, 0.0], [0.1, 0.0], [0.0, 0.1], [5.0, 5.0], [5.1, 5.0]])
        init = np.array([[0.0, 0.0], [100.0, 100.0]])  # nothing lands in cluster 1
        labels, centroids, _ = numpy_impl.lloyd(pts, init, 50)
        counts = np.bincount(labels, minlength=2)
        assert (counts > 0).all()
        labels_nb, _, _ = numba_impl.lloyd(pts, init, 50)
        assert np.array_equal(labels, labels_nb)

    def test_every_point_labeled_in_range(self, rng):
        pts = rng.normal(size=(57, 4))
        init = pts[rng.choice(57, size=5, replace=False)]
        labels, centroids, iters = numpy_impl.lloyd(pts, init, 100)
        assert labels.shape == (57,)
        assert labels.min() >= 0 and labels.max() < 5
        assert iters <= 100


def draw_setup(rng, sizes, weights):
    sizes = np.asarray(sizes, dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    members = np.arange(sizes.sum(), dtype=np.int64)
    rng.shuffle(members)
    cumw = np.cumsum(np.asarray(weights, dtype=np.float64))
    return members, sizes, offsets, cumw


class TestDrawClustered:
    def test_backends_agree_bitwise(self, rng):
        for _ in range(10):
            members, sizes, offsets, cumw = draw_setup(
                rng, [5, 0, 12, 3, 7], [1.3, 0.9, 2.0, 1.1, 1.7]
            )
            budget = 20
            uniforms = rng.random(128)
            out_a = np.zeros(budget, dtype=np.int64)
            out_b = np.zeros(budget, dtype=np.int64)
            pa, ca = numpy_impl.draw_clustered(
                members.copy(), sizes.copy(), offsets, cumw, uniforms, out_a, 0
            )
            pb, cb = numba_impl.draw_clustered(
                members.copy(), sizes.copy(), offsets, cumw, uniforms, out_b, 0
            )
            assert (pa, ca) == (pb, cb)
            assert np.array_equal(out_a, out_b)

    def test_budget_equal_to_population_draws_everything(self, rng):
        members, sizes, offsets, cumw = draw_setup(rng, [4, 6, 5], [1.0, 1.0, 1.0])
        out = np.zeros(15, dtype=np.int64)
        picked = 0
        pool = set(members.tolist())
        while picked < 15:
            uniforms = rng.random(64)
            picked, _ = numpy_impl.draw_clustered(
                members, sizes, offsets, cumw, uniforms, out, picked
            )
        assert set(out.tolist()) == pool  # no repeats, full coverage

    def test_empty_cluster_consumes_one_uniform_without_spending_budget(self):
        members, sizes, offsets, cumw = draw_setup(
            np.random.default_rng(0), [2, 0], [1.0, 1.0]
        )
        # first uniform lands in the empty cluster, the next two draw a member
        uniforms = np.array([0.9, 0.1, 0.5])
        out = np.full(1, -1, dtype=np.int64)
        picked, consumed = numpy_impl.draw_clustered(
            members.copy(), sizes.copy(), offsets, cumw, uniforms, out, 0
        )
        assert picked == 1
        assert consumed == 3
        assert out[0] in members

    def test_weight_zero_cluster_is_never_drawn(self, rng):
        members, sizes, offsets, cumw = draw_setup(rng, [6, 6], [1.0, 0.0])
        first_cluster = set(members[:6].tolist())
        out = np.zeros(6, dtype=np.int64)
        picked = 0
        while picked < 6:
            uniforms = rng.random(64)
            picked, _ = numpy_impl.draw_clustered(
                members, sizes, offsets, cumw, uniforms, out, picked
            )
        assert set(out.tolist()) == first_cluster
        assert sizes[1] == 6  # untouched


class TestBackendSelection:
    def test_default_backend_is_numba_when_available(self):
        from dicekit import kernels

        assert kernels.BACKEND == "numba"

    def test_env_flag_forces_numpy(self):
        env = dict(os.environ, DICEKIT_PURE_NUMPY="1")
        out = subprocess.run(
            [sys.executable, "-c", "import dicekit.kernels as k; print(k.BACKEND)"],
            env=env,
            capture_output=True,
            text=True,
            check=True,
        )
        assert out.stdout.strip() == "numpy"

    def test_selected_functions_match_backend(self):
        from dicekit import kernels

        src = numba_impl if kernels.BACKEND == "numba" else numpy_impl
        assert kernels.drive is src.drive
        assert kernels.lloyd is src.lloyd

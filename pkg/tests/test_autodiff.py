"""Gradient correctness, optimizer behavior, and checkpoint round trips."""

from __future__ import annotations

import numpy as np
import pytest

from dicekit import autodiff as ad
from dicekit.autodiff import NonScalarLossError, Tensor
from dicekit.checkpoint import load_checkpoint, params_digest, save_checkpoint
from dicekit.gradcheck import grad_check
from dicekit.optim import AdamState, adam_step, zero_grad


def assert_all_ok(results):
    for r in results:
        assert r.ok, f"{r.name}: max_abs_err={r.max_abs_err}, checked={r.checked}"
        assert r.checked > 0, f"{r.name}: every coordinate was a kink"


def rand_params(rng, **shapes):
    return {k: Tensor(rng.normal(size=s), requires_grad=True) for k, s in shapes.items()}


class TestElementwiseGrads:
    def test_add_mul_broadcast(self, rng):
        params = rand_params(rng, a=(3, 4), b=(4,), c=(3, 1))
        def fn(p):
            return (p["a"] * p["b"] + p["c"] * 2.0 - p["a"]).sum()
        assert_all_ok(grad_check(fn, params))

    def test_gelu_sigmoid(self, rng):
        params = rand_params(rng, x=(5, 3))
        def fn(p):
            return (ad.gelu(p["x"]) * ad.sigmoid(p["x"])).mean()
        assert_all_ok(grad_check(fn, params))

    def test_abs_subgradient_is_zero_at_zero(self):
        x = Tensor(np.array([0.0, -2.0, 3.0]), requires_grad=True)
        ad.tabs(x).sum().backward()
        assert np.array_equal(x.grad, [0.0, -1.0, 1.0])

    def test_matmul_both_sides(self, rng):
        params = rand_params(rng, a=(2, 3, 4), b=(4, 5))
        def fn(p):
            return (p["a"] @ p["b"]).sum()
        assert_all_ok(grad_check(fn, params))

    def test_matmul_vector_rhs(self, rng):
        params = rand_params(rng, a=(3, 4), b=(4,))
        def fn(p):
            return (p["a"] @ p["b"]).sum()
        assert_all_ok(grad_check(fn, params))

    def test_affine(self, rng):
        params = rand_params(rng, x=(2, 5, 3), w=(3, 4), b=(4,))
        def fn(p):
            return ad.affine(p["x"], p["w"], p["b"]).mean()
        assert_all_ok(grad_check(fn, params))


class TestShapeGrads:
    def test_reshape_transpose_getitem_concat(self, rng):
        params = rand_params(rng, x=(4, 6), y=(4, 2))
        def fn(p):
            z = ad.concat([p["x"], p["y"]], axis=1)       # [4, 8]
            z = z.reshape(4, 2, 4).transpose(1, 0, 2)     # [2, 4, 4]
            return (z[0] * z[1]).sum() + z[:, 1:3].mean()
        assert_all_ok(grad_check(fn, params))

    def test_reductions(self, rng):
        params = rand_params(rng, x=(3, 4, 5))
        def fn(p):
            a = p["x"].sum(axis=1).mean()
            b = p["x"].mean(axis=(0, 2)).sum()
            return a + b
        assert_all_ok(grad_check(fn, params))


class TestPoolGrads:
    def test_mean_pool_weighted(self, rng):
        params = rand_params(rng, x=(3, 5, 4))
        w = (rng.random((3, 5, 1)) > 0.4).astype(float)
        w[1] = 0.0  # one fully-empty pool group exercises the eps floor
        def fn(p):
            return ad.mean_pool(p["x"], axis=1, weights=w).sum()
        assert_all_ok(grad_check(fn, params))

    def test_mean_pool_unweighted_matches_mean(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        out = ad.mean_pool(x, axis=0)
        np.testing.assert_allclose(out.data, x.data.mean(axis=0))

    def test_max_pool_grad(self, rng):
        params = rand_params(rng, x=(4, 6))
        def fn(p):
            return ad.max_pool(p["x"], axis=1).sum()
        assert_all_ok(grad_check(fn, params))

    def test_max_pool_tie_routes_to_first(self):
        x = Tensor(np.array([[2.0, 5.0, 5.0, 1.0]]), requires_grad=True)
        ad.max_pool(x, axis=1).sum().backward()
        assert np.array_equal(x.grad, [[0.0, 1.0, 0.0, 0.0]])


class TestNormalizationAndAttention:
    def test_layer_norm(self, rng):
        params = rand_params(rng, x=(2, 5, 6), g=(6,), b=(6,))
        def fn(p):
            return ad.layer_norm(p["x"], p["g"], p["b"]).sum()
        assert_all_ok(grad_check(fn, params))

    def test_layer_norm_output_is_normalized(self, rng):
        x = Tensor(rng.normal(size=(4, 8)) * 3.0 + 2.0)
        y = ad.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)))
        np.testing.assert_allclose(y.data.mean(axis=-1), 0.0, atol=1e-7)
        np.testing.assert_allclose(y.data.std(axis=-1), 1.0, atol=1e-3)

    def test_softmax(self, rng):
        params = rand_params(rng, x=(3, 5))
        def fn(p):
            return (ad.softmax(p["x"], axis=-1) * np.arange(5.0)).sum()
        assert_all_ok(grad_check(fn, params))
        s = ad.softmax(Tensor(rng.normal(size=(3, 5)) * 50), axis=-1)
        np.testing.assert_allclose(s.data.sum(axis=-1), 1.0)

    def test_softmax_attention(self, rng):
        params = rand_params(rng, q=(2, 4, 3), k=(2, 5, 3), v=(2, 5, 6))
        def fn(p):
            out = ad.softmax_attention(p["q"], p["k"], p["v"], scale=1.0 / np.sqrt(3.0))
            return (out * out).mean()
        assert_all_ok(grad_check(fn, params))

    def test_attention_mask_bias(self, rng):
        q = Tensor(rng.normal(size=(1, 2, 3)))
        k = Tensor(rng.normal(size=(1, 4, 3)))
        v = Tensor(rng.normal(size=(1, 4, 2)))
        mask = np.zeros((1, 2, 4))
        mask[:, :, 2:] = -1e30  # attention sees only the first two slots
        out = ad.softmax_attention(q, k, v, scale=1.0, mask=mask)
        ref = ad.softmax_attention(q, k[:, :2], v[:, :2], scale=1.0)
        np.testing.assert_allclose(out.data, ref.data, atol=1e-12)


class TestFusedLosses:
    def test_masked_l1(self, rng):
        params = rand_params(rng, x=(4, 6))
        target = rng.normal(size=(4, 6))
        w = (rng.random((4, 6)) > 0.3).astype(float)
        def fn(p):
            return ad.masked_l1(p["x"], target, w)
        assert_all_ok(grad_check(fn, params))

    def test_masked_l1_exact_tie_gets_zero_grad(self):
        target = np.array([1.0, 2.0])
        x = Tensor(target.copy(), requires_grad=True)
        loss = ad.masked_l1(x, target, np.ones(2))
        loss.backward()
        assert loss.item() == 0.0
        assert np.array_equal(x.grad, [0.0, 0.0])

    def test_cross_entropy_logits(self, rng):
        params = rand_params(rng, z=(6, 4))
        target = np.eye(4)[rng.integers(0, 4, size=6)]
        w = np.array([1.0, 0.0, 2.0, 1.0, 0.0, 0.5])
        def fn(p):
            return ad.cross_entropy_logits(p["z"], target, w)
        assert_all_ok(grad_check(fn, params))
        # value matches the direct formula
        z = params["z"].data
        p_full = np.exp(z) / np.exp(z).sum(-1, keepdims=True)
        want = -(w * np.log((p_full * target).sum(-1))).sum()
        got = ad.cross_entropy_logits(Tensor(z), target, w).item()
        assert got == pytest.approx(want, rel=1e-12)

    def test_cross_entropy_zero_weight_rows_get_zero_grad(self, rng):
        z = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        target = np.eye(4)[[0, 1, 2]]
        ad.cross_entropy_logits(z, target, np.array([1.0, 0.0, 1.0])).backward()
        assert np.array_equal(z.grad[1], np.zeros(4))

    def test_cross_entropy_is_stable_for_huge_logits(self):
        z = Tensor(np.array([[1000.0, 0.0], [-1000.0, 0.0]]))
        out = ad.cross_entropy_logits(z, np.eye(2), np.ones(2))
        assert np.isfinite(out.item())

    def test_bce_with_logits(self, rng):
        params = rand_params(rng, z=(8,))
        y = (rng.random(8) > 0.5).astype(float)
        def fn(p):
            return ad.bce_with_logits(p["z"], y)
        assert_all_ok(grad_check(fn, params))
        z = np.array([500.0, -500.0])
        assert np.isfinite(ad.bce_with_logits(Tensor(z), np.array([1.0, 0.0])).item())
        assert ad.bce_with_logits(Tensor(z), np.array([1.0, 0.0])).item() == pytest.approx(0.0)

    def test_masked_bce_grads_and_weights(self, rng):
        params = rand_params(rng, z=(4, 6))
        y = (rng.random((4, 6)) > 0.5).astype(float)
        w = rng.random((4, 6))
        w[1] = 0.0
        def fn(p):
            return ad.masked_bce(p["z"], y, w)
        assert_all_ok(grad_check(fn, params))
        # weighted sum matches the unweighted mean scaled by the weights
        z = Tensor(rng.normal(size=(5,)), requires_grad=True)
        ones = ad.masked_bce(z, y[0, :5], np.ones(5))
        mean = ad.bce_with_logits(Tensor(z.data), y[0, :5])
        assert ones.item() == pytest.approx(5.0 * mean.item(), rel=1e-12)
        loss = ad.masked_bce(z, y[0, :5], np.array([1.0, 0.0, 2.0, 0.0, 1.0]))
        loss.backward()
        assert z.grad[1] == 0.0 and z.grad[3] == 0.0


class TestTapeMechanics:
    def test_non_scalar_backward_raises(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        with pytest.raises(NonScalarLossError):
            (x * 2.0).backward()

    def test_no_grad_builds_no_graph(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        with ad.no_grad():
            y = (x * x).sum()
        assert not y.requires_grad
        assert y._parents == ()

    def test_reused_node_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * 3.0
        (y + y * y).sum().backward()  # d/dx (3x + 9x^2) = 3 + 18x
        assert x.grad[0] == pytest.approx(39.0)

    def test_grad_check_flags_kinks_without_failing(self):
        x = Tensor(np.array([0.0, 1.0, -1.0]))
        def fn(p):
            return ad.tabs(p["x"]).sum()
        (res,) = grad_check(fn, {"x": x}, n_samples=3)
        assert res.ok
        assert res.kinks >= 1      # the coordinate at exactly 0
        assert res.checked >= 1    # the smooth ones still checked

    def test_dtype_follows_inputs(self):
        x32 = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        x64 = Tensor(np.ones(3, dtype=np.float64), requires_grad=True)
        assert ad.gelu(x32).dtype == np.float32
        assert ad.gelu(x64).dtype == np.float64


class TestAdam:
    def test_first_step_size_is_lr(self):
        p = {"x": Tensor(np.array([10.0, -3.0]), requires_grad=True)}
        p["x"].grad = np.array([0.02, -40.0])
        st = AdamState(lr=1e-3)
        x0 = p["x"].data.copy()
        adam_step(st, p)
        step = p["x"].data - x0
        np.testing.assert_allclose(np.abs(step), st.lr, rtol=1e-5)
        assert step[0] < 0 and step[1] > 0

    def test_converges_on_quadratic(self, rng):
        target = rng.normal(size=5)
        p = {"x": Tensor(np.zeros(5), requires_grad=True)}
        st = AdamState(lr=0.05)
        for _ in range(800):
            zero_grad(p)
            diff = p["x"] - target
            (diff * diff).sum().backward()
            adam_step(st, p)
        np.testing.assert_allclose(p["x"].data, target, atol=1e-3)

    def test_skips_parameters_without_grads(self):
        p = {"x": Tensor(np.ones(2), requires_grad=True)}
        st = AdamState()
        adam_step(st, p)
        assert np.array_equal(p["x"].data, np.ones(2))
        assert st.step_count == 1


class TestCheckpoint:
    def entries(self, rng):
        return {
            "enc/w": rng.normal(size=(4, 3)).astype(np.float32),
            "enc/b": np.zeros(3, dtype=np.float32),
            "steps": np.array(123, dtype=np.int64),
            "flags": np.array([1, 0, 1], dtype=np.uint8),
        }

    def test_round_trip(self, rng, tmp_path):
        path = tmp_path / "model.dicp"
        entries = self.entries(rng)
        save_checkpoint(path, entries, meta={"step": 123, "loss": 0.5})
        back, meta = load_checkpoint(path)
        assert meta == {"step": 123, "loss": 0.5}
        assert list(back) == list(entries)
        for k in entries:
            assert back[k].dtype == entries[k].dtype
            assert np.array_equal(back[k], entries[k])

    def test_accepts_tensors(self, rng, tmp_path):
        path = tmp_path / "p.dicp"
        save_checkpoint(path, {"w": Tensor(np.ones((2, 2), dtype=np.float32))})
        back, _ = load_checkpoint(path)
        assert np.array_equal(back["w"], np.ones((2, 2)))

    def test_write_is_deterministic(self, rng, tmp_path):
        entries = self.entries(rng)
        a, b = tmp_path / "a.dicp", tmp_path / "b.dicp"
        save_checkpoint(a, entries, meta={"k": 1})
        save_checkpoint(b, entries, meta={"k": 1})
        assert a.read_bytes() == b.read_bytes()

    def test_digest_is_order_independent_but_value_sensitive(self, rng):
        entries = self.entries(rng)
        reordered = dict(reversed(list(entries.items())))
        assert params_digest(entries) == params_digest(reordered)
        mutated = dict(entries)
        mutated["enc/b"] = np.ones(3, dtype=np.float32)
        assert params_digest(mutated) != params_digest(entries)

    def test_rejects_unsupported_dtype(self, tmp_path):
        with pytest.raises(ValueError, match="dtype"):
            save_checkpoint(tmp_path / "x.dicp", {"w": np.ones(2, dtype=np.float16)})


class TestComposite:
    def test_small_network_end_to_end_gradients(self, rng):
        """One function that routes through most of the op set at once."""
        params = rand_params(
            rng,
            w1=(6, 8), b1=(8,), g=(8,), beta=(8,),
            wq=(8, 8), wk=(8, 8), wv=(8, 8), w2=(8, 1), b2=(1,),
        )
        x = rng.normal(size=(2, 5, 6))
        target = rng.normal(size=(2, 5, 1))
        w = np.ones((2, 5, 1))

        def fn(p):
            h = ad.gelu(ad.affine(Tensor(x), p["w1"], p["b1"]))
            h = ad.layer_norm(h, p["g"], p["beta"])
            q = h @ p["wq"]
            k = h @ p["wk"]
            v = h @ p["wv"]
            h = h + ad.softmax_attention(q, k, v, scale=1.0 / np.sqrt(8.0))
            pooled = ad.mean_pool(h, axis=1)           # [2, 8]
            peak = ad.max_pool(h, axis=1)              # [2, 8]
            out = ad.affine(h, p["w2"], p["b2"])
            return (
                ad.masked_l1(out, target, w) / w.sum()
                + 0.1 * (pooled * pooled).mean()
                + 0.1 * peak.mean()
            )

        assert_all_ok(grad_check(fn, params, n_samples=12))

"""Label building, pooled features, head training, scoring, and AUC."""

import numpy as np
import pytest

from dicekit import difficulty as dif
from dicekit import mae
from dicekit.autodiff import Tensor
from dicekit.checkpoint import params_digest
from dicekit.pretrain import write_training_checkpoint
from dicekit.scene import ScenarioDims, TRACK_EXIST
from dicekit.world import SimOutcome, WorldConfig, generate_scenario

FIX_DIMS = ScenarioDims(
    num_steps=6,
    max_tracks=4,
    num_signals=2,
    num_polylines=6,
    points_per_polyline=5,
    embed_width=8,
)
ENC = mae.EncoderConfig(
    hidden=8, heads=2, road_layers=1, fact_layers=1, pointnet_widths=(8, 8)
)


def make_corpus(seed, count):
    cfg = WorldConfig(dims=FIX_DIMS, seed=seed, hazard=0.1, agent_count=(0, 3))
    return [generate_scenario(cfg, i) for i in range(count)]


def outcome(sid, collision, version="v0"):
    return SimOutcome(
        scenario_id=sid,
        collision=collision,
        collision_time=2 if collision else None,
        min_clearance=-0.5 if collision else 1.25,
        policy_version=version,
    )


@pytest.fixture(scope="module")
def corpus():
    return make_corpus(626262, 64)


@pytest.fixture(scope="module")
def backbone():
    return mae.init_params(ENC, FIX_DIMS, np.random.default_rng(8))


@pytest.fixture(scope="module")
def backbone_ckpt(tmp_path_factory, backbone):
    path = tmp_path_factory.mktemp("bb") / "backbone.dicp"
    write_training_checkpoint(path, backbone, ENC, FIX_DIMS, step=0)
    return path


class TestBuildLabels:
    def test_collision_maps_to_one(self):
        ex = dif.build_labels(["a"], [outcome("a", True)])
        assert ex == [dif.LabeledExample("a", 1, "v0")]

    def test_clean_run_maps_to_zero(self):
        ex = dif.build_labels(["a"], [outcome("a", False)])
        assert ex[0].label == 0

    def test_two_versions_share_inputs_with_both_labels(self):
        ex = dif.build_labels(
            ["a"], [outcome("a", True, "v1"), outcome("a", False, "v2")]
        )
        assert len(ex) == 2
        assert {e.scenario_id for e in ex} == {"a"}
        assert {e.label for e in ex} == {0, 1}

    def test_counts_match_collision_totals(self):
        ids = [f"s{i}" for i in range(10)]
        outs = [outcome(sid, i % 3 == 0) for i, sid in enumerate(ids)]
        ex = dif.build_labels(ids, outs)
        collided = sum(1 for o in outs if o.collision)
        assert sum(e.label for e in ex) == collided
        assert sum(1 - e.label for e in ex) == len(ids) - collided

    def test_missing_outcome_raises(self):
        with pytest.raises(dif.MissingOutcome, match="'b'"):
            dif.build_labels(["a", "b"], [outcome("a", False)])

    def test_unknown_scenario_rejected(self):
        with pytest.raises(ValueError, match="unknown scenario"):
            dif.build_labels(["a"], [outcome("z", False)])

    def test_duplicate_version_rejected(self):
        with pytest.raises(ValueError, match="duplicate outcome"):
            dif.build_labels(
                ["a"], [outcome("a", False, "v1"), outcome("a", True, "v1")]
            )

    def test_label_domain_checked(self):
        with pytest.raises(ValueError, match="label"):
            dif.LabeledExample("a", 2, "v0")


def embeddings_of(z_v, z_r, n_tracks):
    zv = Tensor(np.asarray(z_v, dtype=np.float64))
    zr = Tensor(np.asarray(z_r, dtype=np.float64))
    return mae.Embeddings(
        y_r=zr, f_proj=zr, y_v=zv, z_v=zv, z_r=zr, n_tracks=n_tracks
    )


class TestPoolConcat:
    def test_constant_embeddings_repeat_constant(self):
        c = 2.5
        z_v = np.full((1, 3, 2, 2), c)
        z_r = np.full((1, 2, 2), c)
        w = np.ones((1, 2, 2))
        out = dif.pool_concat(embeddings_of(z_v, z_r, 2), w)
        assert out.shape == (1, 8)
        assert np.allclose(out, c)

    def test_width_is_four_d(self, corpus, backbone):
        feats = dif.features_for(corpus[:4], backbone, ENC)
        assert feats.shape == (4, 4 * ENC.hidden)

    def test_hand_case(self):
        z_v = np.array(
            [[[[1.0, 2.0], [3.0, 4.0]],
              [[5.0, 6.0], [7.0, 8.0]],
              [[-1.0, 0.0], [1.0, 2.0]]]]
        )
        z_r = np.array([[[2.0, 4.0], [6.0, 8.0]]])
        w = np.array([[[1.0, 1.0], [1.0, 0.0]]])
        out = dif.pool_concat(embeddings_of(z_v, z_r, 2), w)
        expected = np.array([[2.0, 3.0, 3.0, 4.0, 0.0, 1.0, 4.0, 6.0]])
        np.testing.assert_allclose(out, expected)

    def test_existence_shape_checked(self):
        z_v = np.zeros((1, 3, 2, 2))
        z_r = np.zeros((1, 2, 2))
        with pytest.raises(ValueError, match="track existence"):
            dif.pool_concat(embeddings_of(z_v, z_r, 2), np.ones((1, 3, 2)))

    def test_padded_rows_do_not_dilute(self):
        # track row 1 is huge but dead; the pool must ignore it entirely
        z_v = np.zeros((1, 3, 2, 2))
        z_v[0, 0] = 1.0
        z_v[0, 1] = 1e6
        z_r = np.zeros((1, 1, 2))
        w = np.array([[[1.0, 1.0], [0.0, 0.0]]])
        out = dif.pool_concat(embeddings_of(z_v, z_r, 2), w)
        np.testing.assert_allclose(out[0, 2:4], [1.0, 1.0])


class TestHead:
    def test_zero_head_scores_half(self):
        head = dif.init_head(8, (4,))
        for p in head.params.values():
            p.data = np.zeros_like(p.data)
        s = dif.score_features(head, np.random.default_rng(0).normal(size=(5, 8)))
        assert np.all(s == 0.5)

    def test_scores_strictly_inside_unit_interval(self, corpus, backbone):
        feats = dif.features_for(corpus[:8], backbone, ENC)
        head = dif.init_head(feats.shape[1], (16,), np.random.default_rng(1))
        s = dif.score_features(head, feats)
        assert np.all((s > 0.0) & (s < 1.0))

    def test_feature_width_mismatch_rejected(self):
        head = dif.init_head(8, (4,))
        with pytest.raises(ValueError, match="feature width"):
            dif.head_logits(head, np.zeros((2, 9)))

    def test_head_checkpoint_round_trip(self, tmp_path):
        head = dif.init_head(12, (6, 3), np.random.default_rng(2))
        path = tmp_path / "head.dicp"
        dif.write_head(path, head)
        back = dif.read_head(path)
        assert back.input_width == 12
        assert back.widths == (6, 3)
        for k, p in head.params.items():
            assert np.array_equal(back.params[k].data, p.data)

    def test_score_csv_round_trip(self, tmp_path):
        ids = ["a", "b", "c"]
        vals = np.array([0.125, 0.5, 0.875])
        path = tmp_path / "scores.csv"
        dif.write_scores(path, ids, vals)
        rids, rvals = dif.read_scores(path)
        assert rids == ids
        np.testing.assert_array_equal(rvals, vals)


def synthetic_examples(corpus, backbone, seed):
    """Labels from a hidden linear rule on the pooled features."""
    feats = dif.features_for(corpus, backbone, ENC)
    rng = np.random.default_rng(seed)
    w_true = rng.normal(size=feats.shape[1])
    margin = feats @ w_true
    labels = (margin > np.median(margin)).astype(int)
    ex = [
        dif.LabeledExample(s.scenario_id, int(l), "v0")
        for s, l in zip(corpus, labels)
    ]
    return ex


class TestFinetune:
    def test_zero_steps_is_initialization(self, corpus, backbone_ckpt):
        ex = synthetic_examples(corpus, mae.init_params(ENC, FIX_DIMS, np.random.default_rng(8)), 5)
        cfg = dif.FinetuneConfig(steps=0, seed=9, widths=(16,))
        res = dif.finetune(backbone_ckpt, corpus, ex, cfg)
        rng = np.random.default_rng(9)
        expected = dif.init_head(4 * ENC.hidden, (16,), rng)
        for k, p in expected.params.items():
            assert np.array_equal(res.head.params[k].data, p.data)

    def test_backbone_frozen(self, corpus, backbone, backbone_ckpt):
        ex = synthetic_examples(corpus, backbone, 5)
        cfg = dif.FinetuneConfig(steps=50, lr=1e-2, batch=16, seed=3, widths=(16,))
        before = params_digest({k: p.data for k, p in backbone.items()})
        res = dif.finetune(backbone_ckpt, corpus, ex, cfg)
        assert res.backbone_digest == before

    def test_deterministic_per_seed(self, corpus, backbone, backbone_ckpt):
        ex = synthetic_examples(corpus, backbone, 5)
        cfg = dif.FinetuneConfig(steps=30, lr=1e-2, batch=16, seed=4, widths=(16,))
        a = dif.finetune(backbone_ckpt, corpus, ex, cfg)
        b = dif.finetune(backbone_ckpt, corpus, ex, cfg)
        assert a.auc == b.auc
        for k in a.head.params:
            assert np.array_equal(a.head.params[k].data, b.head.params[k].data)

    def test_single_class_rejected(self, corpus, backbone_ckpt):
        ex = [dif.LabeledExample(s.scenario_id, 1, "v0") for s in corpus]
        with pytest.raises(ValueError, match="both classes"):
            dif.finetune(backbone_ckpt, corpus, ex, dif.FinetuneConfig(steps=1))

    def test_learns_linear_rule(self, corpus, backbone, backbone_ckpt):
        ex = synthetic_examples(corpus, backbone, 5)
        cfg = dif.FinetuneConfig(
            steps=400, lr=1e-2, batch=16, seed=6, holdout=0.25, widths=(16,)
        )
        res = dif.finetune(backbone_ckpt, corpus, ex, cfg)
        assert res.holdout_count == 16
        assert res.auc is not None
        assert res.auc >= 0.8

    def test_scores_order_by_label_after_training(self, corpus, backbone, backbone_ckpt):
        ex = synthetic_examples(corpus, backbone, 5)
        cfg = dif.FinetuneConfig(
            steps=400, lr=1e-2, batch=16, seed=6, holdout=0.25, widths=(16,)
        )
        res = dif.finetune(backbone_ckpt, corpus, ex, cfg)
        feats = dif.features_for(corpus, backbone, ENC)
        scores = dif.score_features(res.head, feats)
        labels = np.array([e.label for e in ex])
        assert scores[labels == 1].mean() > scores[labels == 0].mean()

    def test_score_single_scenario(self, corpus, backbone):
        head = dif.init_head(4 * ENC.hidden, (16,), np.random.default_rng(7))
        d = dif.score(corpus[0], backbone, ENC, head)
        assert 0.0 < d < 1.0
        assert d == dif.score(corpus[0], backbone, ENC, head)


class TestRocAuc:
    def test_perfect_separation(self):
        assert dif.roc_auc([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]) == 1.0

    def test_perfectly_wrong(self):
        assert dif.roc_auc([1, 1, 0, 0], [0.1, 0.2, 0.8, 0.9]) == 0.0

    def test_hand_case(self):
        # pos {0.2, 0.4} vs neg {0.1, 0.3}: three wins out of four pairs
        assert dif.roc_auc([0, 1, 0, 1], [0.1, 0.2, 0.3, 0.4]) == 0.75

    def test_all_tied_scores_half(self):
        assert dif.roc_auc([0, 1, 0, 1], [0.5, 0.5, 0.5, 0.5]) == 0.5

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="each class"):
            dif.roc_auc([1, 1], [0.1, 0.2])

    def test_matches_pair_counting_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            n = int(rng.integers(4, 40))
            y = rng.integers(0, 2, n)
            if y.min() == y.max():
                continue
            # coarse grid forces plenty of ties
            s = rng.integers(0, 5, n) / 4.0
            pos = s[y == 1]
            neg = s[y == 0]
            wins = (pos[:, None] > neg[None, :]).sum()
            ties = (pos[:, None] == neg[None, :]).sum()
            expected = (wins + 0.5 * ties) / (pos.size * neg.size)
            assert dif.roc_auc(y, s) == pytest.approx(expected, rel=1e-12)

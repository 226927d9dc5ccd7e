import ast
import inspect

import numpy as np
import pytest

from cfmia import attack, data, facade, nn
from cfmia.counterfactual import HeomSpace
from cfmia.gbdt import GbdtConfig

FAST_GBDT = GbdtConfig(n_estimators=10, max_depth=3, learning_rate=0.3)


def pool(n=100):
    return data.make_surrogate(n=n, d=3, seed=4)


def tiny_shadow(**kw):
    arch = nn.MlpConfig(input_dim=3, layer_widths=(8,), epochs=3)
    return attack.ShadowConfig(shadow_arch=arch, **kw)


def test_single_shadow_half_split():
    (mem, non), = attack.build_shadow_splits(pool(), tiny_shadow(num_shadows=1))
    assert len(mem) == 50 and len(non) == 50 and not set(mem) & set(non)


def test_shadow_splits_deterministic_and_disjoint():
    a = attack.build_shadow_splits(pool(), tiny_shadow(seed=3))
    b = attack.build_shadow_splits(pool(), tiny_shadow(seed=3))
    assert len(a) == 5
    for (m1, n1), (m2, n2) in zip(a, b):
        np.testing.assert_array_equal(m1, m2)
        np.testing.assert_array_equal(n1, n2)
        assert not set(m1) & set(n1)


def test_shadow_size_too_large():
    with pytest.raises(data.SizeError):
        attack.build_shadow_splits(pool(), tiny_shadow(shadow_size=500))


def test_feature_lengths():
    assert attack.feature_length(2, "no_cf") == 2
    assert attack.feature_length(2, "cf") == 8


@pytest.mark.parametrize("setting", attack.SETTINGS)
def test_assembled_records(setting):
    p = pool()
    cfg = tiny_shadow(num_shadows=2)
    splits = attack.build_shadow_splits(p, cfg)
    shadows = attack.train_shadows(p, splits, cfg)
    recs = attack.assemble_attack_set(shadows, splits, p, setting)
    assert len(recs) == 200
    for r in recs:
        assert len(r.features) == attack.feature_length(2, setting)
        mem, non = splits[r.source_shadow]
        assert (r.row_id in set(mem)) == bool(r.member)
        assert (r.row_id in set(non)) == (not r.member)


class _Const:
    def __init__(self, p):
        self.p = p

    def predict_proba(self, X):
        return np.full(len(X), self.p)


class _QueryOnly:
    """Exposes nothing but the public query surface of a service."""

    def __init__(self, svc):
        self.query_many = svc.query_many
        self.posteriors = svc.posteriors


def test_never_member_predictor(small_model, surrogate_splits):
    svc = _QueryOnly(facade.MlaasService(small_model, surrogate_splits.target_train))
    rows = surrogate_splits.validation.rows
    truth = np.arange(len(rows)) % 2
    space = HeomSpace.from_dataset(surrogate_splits.shadow_pool)
    m, s_hat = attack.attack_target(_Const(0.5 - 1e-6), svc, rows, np.arange(len(rows)), truth, "cf", space)
    assert m["recall"] == 0.0 and s_hat == set() and m["undefined_precision"]


def test_random_guess_near_half():
    rng = np.random.default_rng(0)
    truth = np.repeat([0, 1], 500)
    assert abs(attack.membership_metrics(truth, rng.integers(0, 2, 1000))["accuracy"] - 0.5) <= 0.05


def _suite(model, splits, runs, seed=0):
    svc = facade.MlaasService(model, splits.target_train)
    tt, hold = splits.target_train, splits.shadow_pool
    ev = []
    for r in range(runs):
        idx = np.random.default_rng(r).choice(len(hold), len(tt), replace=False)
        ev.append((np.vstack([tt.rows, hold.rows[idx]]), np.r_[tt.row_ids, hold.row_ids[idx]],
                   np.r_[np.ones(len(tt), int), np.zeros(len(tt), int)]))
    cfg = attack.ShadowConfig(shadow_arch=model.config, num_shadows=2)
    return attack.run_attack_suite(svc, splits.shadow_pool, ev, cfg, FAST_GBDT, runs=runs, seed=seed)


def test_suite_bookkeeping_and_determinism(small_model, surrogate_splits):
    one = _suite(small_model, surrogate_splits, 1)
    for s, rep in one.reports.items():
        assert rep.accuracy == rep.per_run["accuracy"][0]
    two = _suite(small_model, surrogate_splits, 2)
    again = _suite(small_model, surrogate_splits, 2)
    for s in attack.SETTINGS:
        assert two.reports[s].accuracy == pytest.approx(np.mean(two.reports[s].per_run["accuracy"]))
        assert two.reports[s].to_dict() == again.reports[s].to_dict()
        assert two.predicted[s] == again.predicted[s]


def _permuted(model, perm):
    params = [p.copy() for p in model.params]
    params[-2] = params[-2][:, perm]
    params[-1] = params[-1][perm]
    return nn.MlpModel(model.config, params)


def test_sorted_posterior_invariance_under_class_permutation():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(150, 3))
    y = np.argmax(X @ rng.normal(size=(3, 3)), axis=1)
    ds = data.Dataset([data.FeatureMeta(f"f{j}") for j in range(3)], X, y, np.arange(150), 3)
    model, _ = nn.train(nn.MlpConfig(input_dim=3, num_classes=3, layer_widths=(12,), epochs=20), ds, ds)
    perm = np.array([2, 0, 1])
    inv = np.argsort(perm)
    permuted = _permuted(model, perm)
    ds_perm = data.Dataset(ds.schema, X, inv[y], ds.row_ids, 3)
    space = HeomSpace.from_dataset(ds)
    Q = rng.normal(size=(40, 3))
    for setting in attack.SETTINGS:
        a = attack.phi_features(facade.MlaasService(model, ds), Q, space, setting)
        b = attack.phi_features(facade.MlaasService(permuted, ds_perm), Q, space, setting)
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_attack_module_touches_no_service_internals():
    tree = ast.parse(inspect.getsource(attack))
    private = {n.attr for n in ast.walk(tree) if isinstance(n, ast.Attribute) and n.attr.startswith("_")}
    assert not private, private
    imported = {n.module for n in ast.walk(tree) if isinstance(n, ast.ImportFrom)}
    assert not imported & {"pipeline", "active", "dp", "metrics"}


def test_attack_runs_against_query_only_surface(small_model, surrogate_splits):
    svc = _QueryOnly(facade.MlaasService(small_model, surrogate_splits.target_train))
    space = HeomSpace.from_dataset(surrogate_splits.shadow_pool)
    feats = attack.phi_features(svc, surrogate_splits.validation.rows[:20], space, "cf")
    assert feats.shape == (20, 8) and np.all(feats[:, 5] == 0)

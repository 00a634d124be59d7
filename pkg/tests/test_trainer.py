import math

import numpy as np
import pytest

from mckd.data import SynthSpec, make_dataset
from mckd.losses import IWV
from mckd.model import Batch, ModelConfig, init_params
from mckd.optim import SGD, Adam, clip_grad_norm, cosine_lr
from mckd.tensor import Tensor
from mckd.trainer import (NumericalAbort, TrainConfig, all_patterns, dice_scores,
                          drop_modalities, evaluate, evaluate_patterns, feature_distance,
                          format_row, init_state, inner_step, meta_step, metrics_header,
                          model_config_for, probe_imputation, train)

SMALL_MODEL = dict(feature_dim=6, encoder_hidden=(8,), decoder_hidden=(8,))


def quick(**kw):
    base = dict(total_iters=12, inner_iters=4, batch_size=16, seed=3)
    base.update(kw)
    return TrainConfig(**base)


# ----------------------------------------------------------- modality dropout


def full_batch(b, n, rng):
    return Batch([rng.normal(size=(b, 2)) for _ in range(n)], np.ones((b, n), bool),
                 np.zeros(b, dtype=int))


def test_dropout_zero_is_identity(rng):
    batch = full_batch(10, 4, rng)
    assert drop_modalities(batch, rng, 0).present.all()


def test_dropout_keeps_one_and_is_uniform_in_k():
    rng = np.random.default_rng(0)
    batch = Batch([np.zeros((100_000, 1))] * 4, np.ones((100_000, 4), bool), np.zeros(100_000, int))
    present = drop_modalities(batch, rng, 3).present
    assert present.any(axis=1).all()
    counts = np.bincount(4 - present.sum(axis=1), minlength=4)
    expected = len(present) / 4
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < 11.345  # 0.99 quantile of chi-square with 3 dof
    # which modality gets dropped is uniform as well
    per_mod = (~present).sum(axis=0)
    assert np.ptp(per_mod) / per_mod.mean() < 0.03


# ----------------------------------------------------------------- optimizers


def test_sgd_hand_step():
    x = Tensor(np.array([1.0]), requires_grad=True)
    x.grad = x.data.copy()  # d(x^2/2)/dx
    SGD([x], lr=0.1).step()
    assert x.data[0] == pytest.approx(0.9, abs=1e-15)


def test_sgd_nesterov_matches_reference():
    rng = np.random.default_rng(0)
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = SGD([x], lr=0.05, momentum=0.9, nesterov=True)
    ref, buf = x.data.copy(), np.zeros(2)
    for _ in range(20):
        g = rng.normal(size=2)
        x.grad = g.copy()
        opt.step()
        buf = 0.9 * buf + g
        ref = ref - 0.05 * (g + 0.9 * buf)
    np.testing.assert_allclose(x.data, ref, rtol=1e-13)


def test_zero_gradient_is_fixed_point():
    x = Tensor(np.array([0.3, 0.7]), requires_grad=True)
    x.grad = np.zeros(2)
    opt = SGD([x], lr=0.5, momentum=0.99, nesterov=True)
    for _ in range(5):
        opt.step()
    np.testing.assert_array_equal(x.data, [0.3, 0.7])


def test_cosine_schedule():
    assert cosine_lr(0.01, 0, 100) == 0.01
    assert cosine_lr(0.01, 50, 100) == pytest.approx(0.005, rel=1e-14)
    assert cosine_lr(0.01, 100, 100) == pytest.approx(0.0, abs=1e-18)
    lrs = [cosine_lr(0.01, t, 37) for t in range(38)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_adam_first_step_is_lr_sized():
    for g in (3.0, -0.02):
        x = Tensor(np.array([0.5]), requires_grad=True)
        x.grad = np.array([g])
        Adam([x], lr=0.01).step()
        assert x.data[0] - 0.5 == pytest.approx(-0.01 * math.copysign(1, g), rel=1e-5)


def test_adam_decoupled_weight_decay_without_gradient():
    x = Tensor(np.array([2.0]), requires_grad=True)
    x.grad = np.zeros(1)
    Adam([x], lr=0.1, weight_decay=0.5).step()
    assert x.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0, rel=1e-12)


def test_clip_grad_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([30.0, 0.0]), np.array([40.0])
    assert clip_grad_norm([a, b], 10.0) == pytest.approx(50.0)
    assert math.hypot(*a.grad, *b.grad) == pytest.approx(10.0, rel=1e-9)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    clip_grad_norm([a, b], 10.0)
    np.testing.assert_array_equal(a.grad, [3.0, 0.0])


# ---------------------------------------------------------------- the steps


def test_config_validation():
    for bad in (dict(p=3), dict(alpha=-1), dict(lr_model=0), dict(dropout_max=4),
                dict(normalization="max"), dict(ckd_reduction="max"), dict(iwv_init=(0, 0))):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate(4)


def test_meta_step_fixed_point_and_normalization(tiny_cls_dataset):
    mc = model_config_for(tiny_cls_dataset, **SMALL_MODEL)
    state = init_state(quick(wd_iwv=0.0), mc)
    last = max(int(k.split(".")[1]) for k in state.model.params if k.startswith("decoder."))
    state.model.params[f"decoder.{last}.weight"].data[:] = 0.0
    before = state.iwv.raw.data.copy()
    meta_step(state, tiny_cls_dataset.val.batch())
    np.testing.assert_array_equal(state.iwv.raw.data, before)
    state = init_state(quick(), mc)
    for _ in range(3):
        meta_step(state, tiny_cls_dataset.val.batch())
        assert abs(state.iwv.normalized.sum() - 1) < 1e-12


def test_meta_step_leaves_network_untouched(tiny_cls_dataset):
    mc = model_config_for(tiny_cls_dataset, **SMALL_MODEL)
    state = init_state(quick(), mc)
    before = {k: p.data.copy() for k, p in state.model.params.items()}
    meta_step(state, tiny_cls_dataset.val.batch())
    for k, p in state.model.params.items():
        np.testing.assert_array_equal(p.data, before[k])


def test_inner_step_leaves_iwv_untouched(tiny_cls_dataset):
    mc = model_config_for(tiny_cls_dataset, **SMALL_MODEL)
    state = init_state(quick(), mc)
    raw = state.iwv.raw.data.copy()
    lb = inner_step(state, tiny_cls_dataset.train.batch(np.arange(16)))
    np.testing.assert_array_equal(state.iwv.raw.data, raw)
    assert state.iteration == 1 and math.isfinite(lb.total.item())


def test_gauge_invariance_after_first_meta_step(tiny_cls_dataset):
    mc = model_config_for(tiny_cls_dataset, **SMALL_MODEL)
    v = (0.2, -0.1, 0.05, 0.0)
    a = init_state(quick(wd_iwv=0.0, iwv_init=v), mc)
    b = init_state(quick(wd_iwv=0.0, iwv_init=tuple(x + 3.0 for x in v)), mc)
    batch = tiny_cls_dataset.val.batch()
    meta_step(a, batch)
    meta_step(b, batch)
    np.testing.assert_allclose(a.iwv.normalized, b.iwv.normalized, atol=1e-8)


def test_nan_input_aborts_with_diagnostics(tiny_cls_dataset):
    mc = model_config_for(tiny_cls_dataset, **SMALL_MODEL)
    state = init_state(quick(), mc)
    batch = tiny_cls_dataset.train.batch(np.arange(4))
    batch.inputs[0] = batch.inputs[0].copy()
    batch.inputs[0][0, 0] = np.nan
    with pytest.raises(NumericalAbort) as exc:
        inner_step(state, batch)
    assert exc.value.diagnostics["iteration"] == 0
    assert "param_norms" in exc.value.diagnostics


# ------------------------------------------------------------------- train


def test_train_zero_iterations(tiny_cls_dataset):
    mc = model_config_for(tiny_cls_dataset, **SMALL_MODEL)
    state, rows = train(quick(total_iters=0), tiny_cls_dataset.train, tiny_cls_dataset.val, mc)
    assert rows == [] and state.iteration == 0


def test_train_rows_and_determinism(tiny_cls_dataset):
    mc = model_config_for(tiny_cls_dataset, **SMALL_MODEL)
    seen = []
    s1, r1 = train(quick(), tiny_cls_dataset.train, tiny_cls_dataset.val, mc, on_row=seen.append)
    s2, r2 = train(quick(), tiny_cls_dataset.train, tiny_cls_dataset.val, mc)
    header = metrics_header(4)
    assert [format_row(r, header) for r in r1] == [format_row(r, header) for r in r2]
    assert [r["iter"] for r in r1] == [4, 8, 12] and seen == r1
    for k in s1.model.params:
        assert s1.model.params[k].data.tobytes() == s2.model.params[k].data.tobytes()
    assert abs(sum(r1[-1][f"w_{i}"] for i in range(1, 5)) - 1) < 1e-12
    _, r3 = train(quick(seed=4), tiny_cls_dataset.train, tiny_cls_dataset.val, mc)
    assert r3 != r1


def test_train_partial_last_cycle(tiny_cls_dataset):
    mc = model_config_for(tiny_cls_dataset, **SMALL_MODEL)
    state, rows = train(quick(total_iters=10), tiny_cls_dataset.train, tiny_cls_dataset.val, mc)
    assert [r["iter"] for r in rows] == [4, 8, 10] and state.iteration == 10


def test_alpha_zero_without_dropout_has_no_ckd(tiny_cls_dataset):
    mc = model_config_for(tiny_cls_dataset, **SMALL_MODEL)
    _, rows = train(quick(alpha=0.0, dropout_max=0, dropout_val=False),
                    tiny_cls_dataset.train, tiny_cls_dataset.val, mc)
    assert all(r["ckd_loss"] == 0.0 for r in rows)


def test_overlapping_splits_rejected(tiny_cls_dataset):
    mc = model_config_for(tiny_cls_dataset, **SMALL_MODEL)
    with pytest.raises(ValueError):
        train(quick(), tiny_cls_dataset.train, tiny_cls_dataset.train, mc)


def test_segmentation_training_runs(tiny_seg_dataset):
    mc = model_config_for(tiny_seg_dataset, **SMALL_MODEL)
    state, rows = train(quick(total_iters=4, inner_iters=2, batch_size=8),
                        tiny_seg_dataset.train, tiny_seg_dataset.val, mc)
    assert len(rows) == 2
    assert 0.0 <= rows[-1]["val_metric"] <= 1.0


def test_metrics_header_and_row_format():
    header = metrics_header(3)
    assert ",".join(header) == ("iter,task_loss,ckd_loss,meta_loss,val_metric,w_1,w_2,w_3,"
                                "impute_l1,impute_cos")
    row = dict.fromkeys(header, 0.1)
    row["iter"] = 7
    assert format_row(row, header).split(",")[:2] == ["7", "0.1"]


# ---------------------------------------------------------------- evaluation


def test_random_classifier_is_at_chance():
    """Label-free inputs: any fixed classifier scores Binomial(n, 0.1) / n."""
    spec = SynthSpec(n_classes=10, n_train=10, n_val=10, n_test=3000, input_dim=8,
                     snr_informative=1e-12, snr_others=0.0, seed=2)
    ds = make_dataset(spec)
    sigma = math.sqrt(0.09 / 3000)
    for s in range(3):
        acc = evaluate(init_params(model_config_for(ds, **SMALL_MODEL), s), ds.test)
        assert abs(acc - 0.1) < 3 * sigma


def test_pattern_enumeration(tiny_cls_dataset):
    pats = all_patterns(4)
    assert len(pats) == 15 == 2 ** 4 - 1
    assert len(set(pats)) == 15 and () in pats and (0, 1, 2, 3) not in pats
    model = init_params(model_config_for(tiny_cls_dataset, **SMALL_MODEL), 0)
    table = evaluate_patterns(model, tiny_cls_dataset.test)
    for pat, val in table:
        present = np.ones((len(tiny_cls_dataset.test), 4), bool)
        present[:, list(pat)] = False
        from mckd.model import decode, encode
        feats, _ = encode(model, tiny_cls_dataset.test.batch(None, present))
        manual = float(np.mean(decode(model, feats).data.argmax(-1) == tiny_cls_dataset.test.labels))
        assert val == manual
    assert dict(table)[()] == evaluate(model, tiny_cls_dataset.test)


def test_evaluate_rejects_bad_patterns(tiny_cls_dataset):
    model = init_params(model_config_for(tiny_cls_dataset, **SMALL_MODEL), 0)
    with pytest.raises(ValueError):
        evaluate(model, tiny_cls_dataset.test, (0, 1, 2, 3))
    with pytest.raises(ValueError):
        evaluate(model, tiny_cls_dataset.test, (4,))


def test_dice_scores_oracle():
    pred = np.array([[0, 1], [1, 1]])
    target = np.array([[0, 1], [0, 1]])
    s = dice_scores(pred, target, 2)
    assert s[0] == pytest.approx(2 / 3, rel=1e-5)
    assert s[1] == pytest.approx(4 / 5, rel=1e-5)
    assert dice_scores(np.zeros((2, 2), int), np.zeros((2, 2), int), 2)[1] == 1.0


def test_segmentation_evaluate_per_class(tiny_seg_dataset):
    model = init_params(model_config_for(tiny_seg_dataset, **SMALL_MODEL), 0)
    per = evaluate(model, tiny_seg_dataset.test, (), per_class=True)
    assert per.shape == (2,)
    assert evaluate(model, tiny_seg_dataset.test) == pytest.approx(per[1:].mean())


def test_feature_distance_orthogonal():
    l1, cos = feature_distance(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
    assert l1 == 2.0 and cos == 0.0


def test_probe_identical_inputs_shared_encoder():
    cfg = ModelConfig(n_modalities=3, input_dims=(5, 5, 5), feature_dim=4, encoder_hidden=(6,),
                      decoder_hidden=(4,), n_classes=2)
    model = init_params(cfg, 0)
    for i in (1, 2):
        model.params[f"adapter.{i}.weight"].data[:] = model.params["adapter.0.weight"].data
    x = np.random.default_rng(0).normal(size=(7, 5))
    batch = Batch([x, x, x], np.ones((7, 3), bool), np.zeros(7, int))
    l1, cos = probe_imputation(model, batch, 1)
    assert l1 == 0.0 and cos == pytest.approx(1.0, abs=1e-12)


def test_iwv_object_is_updated_in_place(tiny_cls_dataset):
    mc = model_config_for(tiny_cls_dataset, **SMALL_MODEL)
    state = init_state(quick(), mc)
    assert isinstance(state.iwv, IWV)
    raw = state.iwv.raw
    meta_step(state, tiny_cls_dataset.val.batch())
    assert state.iwv.raw is raw

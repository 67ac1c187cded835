import dataclasses
import json
import math

import numpy as np
import pytest
import torch

from stutterdet.data import Label, Manifest, SplitPlan, make_split
from stutterdet.exceptions import DivergenceError, MissingClassError
from stutterdet.metrics import RunReport, average_reports
from stutterdet.model import Checkpoint, ModelSpec, StutterModel
from stutterdet.train import (
    WORKFLOW_FROZEN,
    ArrayData,
    EarlyStopping,
    FeatureStore,
    TrainConfig,
    batch_indices,
    dataset_loss,
    evaluate,
    fit_model,
    holdout_split,
    loss_weights,
    model_loss,
    pretrain_finetune,
    run_cv,
    train_fold,
)


@pytest.fixture(scope="module")
def store():
    return FeatureStore()


@pytest.fixture(scope="module")
def toy_arrays(toy_corpus, store):
    train_m, valid_m = holdout_split(toy_corpus, 0.25, seed=0)
    return store.arrays(train_m)[0], store.arrays(valid_m)[0]


def state_of(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def states_equal(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig(loss_mode="focal")
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 0.1})
    cfg = TrainConfig(variant="mb", lr=0.5)
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_adam_single_step_closed_form():
    cfg = TrainConfig()
    theta0, target = 1.7, -0.4
    theta = torch.tensor([theta0], dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([theta], lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    loss = 0.5 * (theta - target) ** 2
    opt.zero_grad()
    loss.sum().backward()
    opt.step()
    g = theta0 - target
    b1, b2 = cfg.betas
    m_hat = (1 - b1) * g / (1 - b1)
    v_hat = (1 - b2) * g * g / (1 - b2)
    expected = theta0 - cfg.lr * m_hat / (math.sqrt(v_hat) + cfg.eps)
    assert abs(theta.item() - expected) <= 1e-10


def test_batch_indices():
    batches = batch_indices(10, 4, seed=1, epoch=3)
    assert [len(b) for b in batches] == [4, 4, 2]  # partial batch kept
    assert sorted(np.concatenate(batches)) == list(range(10))
    again = batch_indices(10, 4, seed=1, epoch=3)
    assert all(np.array_equal(a, b) for a, b in zip(batches, again))
    other = np.concatenate(batch_indices(10, 4, seed=1, epoch=4))
    assert not np.array_equal(np.concatenate(batches), other)


def test_early_stopping_counter():
    stop = EarlyStopping(3)
    flags = [stop.update(e, loss) for e, loss in enumerate([5, 4, 4, 4.5, 4], start=1)]
    assert flags == [False, False, False, False, True]
    assert (stop.best, stop.best_epoch) == (4, 2)


def scripted(losses):
    return lambda model, epoch: losses[epoch - 1]


@pytest.mark.parametrize("k", [1, 4])
def test_early_stopping_returns_best_checkpoint(toy_arrays, tiny_cfg, k):
    train, valid = toy_arrays
    cfg = tiny_cfg.replace(max_epochs=40)
    losses = [10.0 - e for e in range(k)] + [10.0 - k + 1] * 60
    res = train_fold(cfg, train, valid, validate=scripted(losses))
    assert res.epochs_run == k + 7 and res.stopped_early
    assert res.best_epoch == res.checkpoint.epoch == k
    ref = train_fold(cfg.replace(max_epochs=k), train, valid, validate=scripted(losses))
    assert states_equal(res.checkpoint.state_dict, ref.checkpoint.state_dict)
    assert res.best_val_loss == min(r["val_loss"] for r in res.log)


def test_no_early_stop_when_always_improving(toy_arrays, tiny_cfg):
    train, valid = toy_arrays
    cfg = tiny_cfg.replace(max_epochs=4, patience=1)
    res = train_fold(cfg, train, valid, validate=scripted([4.0, 3.0, 2.0, 1.0]))
    assert res.epochs_run == 4 and not res.stopped_early and res.best_epoch == 4
    assert states_equal(res.checkpoint.state_dict, state_of(res.model))


def test_training_log_and_determinism(toy_arrays, tiny_cfg, tmp_path):
    train, valid = toy_arrays
    a = train_fold(tiny_cfg, train, valid, log_path=tmp_path / "a.log")
    b = train_fold(tiny_cfg, train, valid)
    assert a.loss_log() == b.loss_log()
    assert states_equal(a.checkpoint.state_dict, b.checkpoint.state_dict)
    rows = [json.loads(line) for line in (tmp_path / "a.log").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [1, 2]
    assert set(rows[0]) == {"epoch", "train_loss", "val_loss", "loss_fluent",
                            "loss_disfluent", "elapsed_s"}
    # the joint training loss is the sum of its branch losses
    for r in rows:
        assert r["train_loss"] == pytest.approx(r["loss_fluent"] + r["loss_disfluent"])


def test_validation_loss_uses_training_weights(toy_arrays, tiny_cfg):
    train, valid = toy_arrays
    cfg = tiny_cfg.replace(loss_mode="wce", max_epochs=1)
    res = train_fold(cfg, train, valid)
    weights = loss_weights(cfg, train.y.numpy(), list(res.model.heads))
    expected = dataset_loss(res.model, valid, weights, cfg.batch_size)
    assert res.log[0]["val_loss"] == pytest.approx(expected, rel=1e-6)


def test_wce_weights_follow_training_split():
    cfg = TrainConfig(loss_mode="wce")
    y = np.array([0, 1, 2, 3, 4, 4, 4, 4])
    w = loss_weights(cfg, y, ["fluent", "disfluent"])
    np.testing.assert_allclose(w["disfluent"].numpy(), [1.6, 1.6, 1.6, 1.6, 0.4], rtol=1e-6)
    np.testing.assert_allclose(w["fluent"].numpy(), [1.0, 1.0], rtol=1e-6)
    with pytest.raises(MissingClassError):
        loss_weights(cfg, np.array([0, 1, 2, 4]), ["disfluent"])


def test_joint_gradient_is_sum_of_branch_gradients():
    torch.manual_seed(0)
    model = StutterModel(ModelSpec(variant="mb", dims=(8, 8, 8, 8, 8), bilstm_hidden=4,
                                   bilstm_layers=1, fc_hidden=8, dropout=0.0)).double()
    x = torch.randn(6, 25, 20, dtype=torch.float64)
    y = torch.tensor([0, 1, 2, 3, 4, 4])
    shared = list(model.encoders.parameters())

    def grads(select):
        model.zero_grad()
        _, parts = model_loss(model(x), y, {})
        sum(parts[h] for h in select).backward()
        return [p.grad.clone() for p in shared]

    joint = grads(["fluent", "disfluent"])
    summed = [a + b for a, b in zip(grads(["fluent"]), grads(["disfluent"]))]
    for a, b in zip(joint, summed):
        assert torch.linalg.norm(a - b) <= 1e-6 * max(torch.linalg.norm(a), 1e-30)


def test_divergence_is_reported(toy_arrays, tiny_cfg):
    train, valid = toy_arrays
    bad = ArrayData(train.X.clone(), train.y, train.ids)
    bad.X[0, 0, 0] = float("nan")
    with pytest.raises(DivergenceError, match="lr="):
        train_fold(tiny_cfg, bad, valid)


@pytest.mark.parametrize("workflow", sorted(WORKFLOW_FROZEN))
def test_freeze_workflows_keep_frozen_groups(toy_arrays, tiny_cfg, workflow):
    train, valid = toy_arrays
    cfg = tiny_cfg.replace(max_epochs=2)
    res = pretrain_finetune(cfg, train, valid, workflow)
    frozen = WORKFLOW_FROZEN[workflow]
    assert res.model.frozen == frozenset(frozen)
    pre = res.pretrain.model
    for name in frozen:
        # every frozen group came from the pretrained model unchanged
        assert states_equal(state_of(pre.component(name)),
                            state_of(res.model.component(name))), name
    for name in set(res.model.components()) - set(frozen):
        module = res.model.component(name)
        assert any(p.requires_grad for p in module.parameters())
    if workflow == "enc-frz":
        # the unfrozen, transplanted disfluent branch moves during fine-tuning
        assert not states_equal(state_of(pre.component("disfluent_branch")),
                                state_of(res.model.component("disfluent_branch")))


def test_frozen_groups_stable_every_epoch(toy_arrays, tiny_cfg):
    from stutterdet.model import apply_freeze

    train, valid = toy_arrays
    cfg = tiny_cfg.replace(max_epochs=3)
    torch.manual_seed(0)
    model = apply_freeze(StutterModel(cfg.model_spec()), {"encoder", "disfluent_branch"})
    before = {n: state_of(model.component(n)) for n in ("encoder", "disfluent_branch")}
    checks = []

    def validate(m, epoch):
        checks.append(all(states_equal(before[n], state_of(m.component(n))) for n in before))
        return 1.0 / epoch

    fit_model(model, train, valid, cfg, validate=validate)
    assert checks == [True, True, True]


def test_transplant_fidelity(toy_arrays, tiny_cfg):
    from stutterdet.model import transplant

    train, valid = toy_arrays
    pre_cfg = tiny_cfg.replace(loss_mode="wce", max_epochs=1)
    spec = ModelSpec.from_dict({**pre_cfg.model_spec().to_dict(), "heads": ("disfluent",)})
    torch.manual_seed(0)
    pre = fit_model(StutterModel(spec), train, valid, pre_cfg).model.eval()
    target = StutterModel(tiny_cfg.model_spec()).eval()
    transplant(pre, target, ("encoder", "disfluent_branch"))
    with torch.no_grad():
        assert torch.equal(pre(valid.X)["disfluent"], target(valid.X)["disfluent"])


def test_fold_isolation_and_cv_average(toy_corpus, tiny_cfg, store, tmp_path):
    plan = make_split(toy_corpus, n_folds=4, seed=2)
    cfg = tiny_cfg.replace(max_epochs=1)
    for k, fold in enumerate(plan.folds):
        seen = set()
        one = SplitPlan([fold])
        run_cv(cfg, toy_corpus, one, store, batch_hook=lambda e, ids: seen.update(ids))
        test_ids = {r.id for r in toy_corpus if r.podcast_id in fold.test}
        valid_ids = {r.id for r in toy_corpus if r.podcast_id in fold.valid}
        train_ids = {r.id for r in toy_corpus if r.podcast_id in fold.train}
        assert seen == train_ids and not seen & (test_ids | valid_ids)
    res = run_cv(cfg, toy_corpus, plan, store, out_dir=tmp_path)
    assert len(res.reports) == 4 and not res.failures and not res.average.partial
    assert res.average.macro_f1 == pytest.approx(np.mean([r.macro_f1 for r in res.reports]),
                                                 abs=1e-9)
    shuffled = average_reports([res.reports[i] for i in (2, 0, 3, 1)], expected=4)
    assert shuffled.to_dict() == res.average.to_dict()
    for k in range(4):
        fold_dir = tmp_path / f"fold{k:02d}"
        assert (fold_dir / "model.pt").exists() and (fold_dir / "train.log").exists()
        saved = RunReport.from_dict(json.loads((fold_dir / "report.json").read_text()))
        assert saved == res.reports[k]
    assert Checkpoint.load(tmp_path / "fold00" / "model.pt").config["features"]["n_mfcc"] == 20


def test_cv_shuffled_fold_order(toy_corpus, tiny_cfg, store):
    plan = make_split(toy_corpus, n_folds=4, seed=2)
    cfg = tiny_cfg.replace(max_epochs=1)
    a = run_cv(cfg, toy_corpus, plan, store).average
    b = run_cv(cfg, toy_corpus, SplitPlan(plan.folds[::-1]), store).average
    assert a.to_dict() == b.to_dict()


def test_failed_fold_is_recorded(toy_corpus, tiny_cfg, store):
    plan = make_split(toy_corpus, n_folds=4, seed=2)
    broken = dataclasses.replace(plan.folds[1], train=frozenset())
    res = run_cv(tiny_cfg.replace(max_epochs=1), toy_corpus,
                 SplitPlan([plan.folds[0], broken, plan.folds[2]]), store)
    assert [f["fold"] for f in res.failures] == [1]
    assert res.average.partial and res.average.n_folds == 2


def test_evaluate_coverage_and_determinism(toy_corpus, tiny_cfg, store, tmp_path):
    train, valid = holdout_split(toy_corpus, 0.25, seed=0)
    res = train_fold(tiny_cfg.replace(max_epochs=1), train, valid, store)
    first = evaluate(res.model, toy_corpus, store)
    assert first == evaluate(res.checkpoint, toy_corpus, store)
    assert first.coverage == 1.0 and first.n == len(toy_corpus)
    gone = dataclasses.replace(toy_corpus.records[0], id="gone",
                               audio_path=str(tmp_path / "missing.wav"))
    partial = evaluate(res.model, Manifest(toy_corpus.records[1:] + [gone]), store)
    assert partial.skipped == 1 and partial.coverage < 1.0


def test_single_variant_uses_plain_argmax(toy_arrays, tiny_cfg):
    train, valid = toy_arrays
    res = train_fold(tiny_cfg.replace(variant="single", max_epochs=1), train, valid)
    report = evaluate(res.model, valid)
    with torch.no_grad():
        pred = res.model.eval()(valid.X)["disfluent"].argmax(dim=1).numpy()
    assert report.total_accuracy == pytest.approx(np.mean(pred == valid.y.numpy()))


def test_holdout_split_by_podcast(toy_corpus):
    train, valid = holdout_split(toy_corpus, 0.25, seed=0)
    assert not set(train.podcasts) & set(valid.podcasts)
    assert len(train) + len(valid) == len(toy_corpus)
    assert all(r.label in Label for r in train)

import dataclasses

import numpy as np
import pytest

from copd import datasets as D
from copd import model as M
from copd import numcore as nc
from copd import synthgen
from copd.checkpoint import (CheckpointFormatError, DimensionMismatchError, load_checkpoint,
                             read_checkpoint, save_checkpoint)
from copd.evaluation import evaluate
from copd.graph import build_all_graphs
from copd.training import (TrainConfig, TrainingDivergedError, read_metric_log, step_loss,
                           steps_per_epoch, train, train_baseline, write_metric_log)


@pytest.fixture(scope="module")
def small():
    spec = synthgen.SynthSpec(n_users=30, n_items_a=40, n_items_b=40,
                              interactions_per_user_per_domain=12, seed=2)
    ds = D.leave_one_out_split(D.build_dual_domain(*synthgen.generate(spec), 5, 2), 2)
    return ds, build_all_graphs(ds)


def _cfg(**kw):
    base = dict(d=8, L=2, epochs=2, batch_size=64, eval_every=1, eval_negatives=20, seed=4)
    base.update(kw)
    return TrainConfig(**base)


@pytest.mark.parametrize("bad", [dict(lr=-1), dict(tau=0), dict(batch_size=0),
                                 dict(lambda1=-0.1), dict(dropout=-0.5), dict(beta=-1)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_config_accepts_small_lambda():
    assert TrainConfig(lambda1=0.01, lambda2=1.0).lambda1 == 0.01


def test_zero_epochs_returns_initialization(small):
    ds, graphs = small
    res = train(ds, graphs, _cfg(epochs=0))
    init = M.init_params(ds.n_users, ds.n_items_a, ds.n_items_b, 8, 4)
    assert res.params.checksum() == init.checksum()
    assert res.metric_log == []


def test_loss_decreases_without_auxiliary_terms():
    spec = synthgen.SynthSpec(n_users=10, n_items_a=30, n_items_b=30, n_groups=2,
                              interactions_per_user_per_domain=10, seed=0)
    ds = D.leave_one_out_split(D.build_dual_domain(*synthgen.generate(spec), 3, 1), 0)
    cfg = _cfg(lambda1=0.0, lambda2=0.0, beta=0.0, lr=0.01, batch_size=16, dropout=0.0,
               epochs=50 // steps_per_epoch(ds, 16), eval_every=1000)
    res = train(ds, build_all_graphs(ds), cfg)
    losses = np.array(res.step_losses)
    assert len(losses) >= 45
    slope = np.polyfit(np.arange(len(losses)), losses, 1)[0]
    assert slope < 0
    assert losses[-5:].mean() < losses[:5].mean()


def test_same_seed_bit_identical(small, tmp_path):
    ds, graphs = small
    a, b = train(ds, graphs, _cfg()), train(ds, graphs, _cfg())
    save_checkpoint(a.params, tmp_path / "a.ckpt", 2)
    save_checkpoint(b.params, tmp_path / "b.ckpt", 2)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    write_metric_log(a.metric_log, tmp_path / "a.csv")
    write_metric_log(b.metric_log, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    c = train(ds, graphs, _cfg(seed=5))
    assert c.params.checksum() != a.params.checksum()


def test_metric_log_rows(small, tmp_path):
    ds, graphs = small
    res = train(ds, graphs, _cfg(epochs=3, eval_every=2))
    assert [(r["epoch"], r["domain"]) for r in res.metric_log] == [(2, "A"), (2, "B"),
                                                                   (3, "A"), (3, "B")]
    write_metric_log(res.metric_log, tmp_path / "m.csv")
    header = (tmp_path / "m.csv").read_text().splitlines()[0]
    assert header == "epoch,domain,hr_at_10,ndcg_at_10,l_rec,l_dom,l_cc,l_pd,total"
    back = read_metric_log(tmp_path / "m.csv")
    assert back == res.metric_log
    for r in back:
        assert 0 <= r["ndcg_at_10"] <= r["hr_at_10"] <= 1


def test_best_params_reproduce_best_metrics(small):
    ds, graphs = small
    cfg = _cfg(epochs=3)
    res = train(ds, graphs, cfg)
    rows = [r for r in res.metric_log if r["epoch"] == res.best_epoch]
    for r in rows:
        got = evaluate(res.best_params, ds, r["domain"], cfg, graphs)
        assert got.hr_at_k == r["hr_at_10"] and got.ndcg_at_k == r["ndcg_at_10"]


def test_non_finite_loss_aborts_with_component(small):
    ds, graphs = small
    broken = dataclasses.replace(ds, pop_b=np.full(ds.n_items_b, np.nan))
    with pytest.raises(TrainingDivergedError) as err:
        train(broken, graphs, _cfg())
    assert err.value.component == "l_pd"
    assert err.value.epoch == 1 and err.value.step == 0
    init = M.init_params(ds.n_users, ds.n_items_a, ds.n_items_b, 8, 4)
    assert err.value.last_good.checksum() == init.checksum()


def test_step_changes_only_tensors_with_gradient(small):
    ds, graphs = small
    cfg = _cfg(lambda1=0.0, lambda2=0.0, beta=0.0)
    params = M.init_params(ds.n_users, ds.n_items_a, ds.n_items_b, 8, 0)
    tensors = params.tensors()
    before = [t.values.copy() for t in tensors]
    batch = D.BprSampler(ds).sample_arrays(8, np.random.default_rng(0))
    total, _ = step_loss(params, graphs, ds, batch, cfg, np.random.default_rng(1))
    nc.zero_grad(tensors)
    nc.backward(total)
    nc.adam_step(tensors, [t.grad for t in tensors], nc.AdamState.for_params(tensors))
    for t, old in zip(tensors, before):
        rows_with_grad = np.any(t.grad != 0, axis=tuple(range(1, t.grad.ndim))) \
            if t.grad.ndim > 1 else t.grad != 0
        changed = np.any(t.values != old, axis=tuple(range(1, t.values.ndim))) \
            if t.values.ndim > 1 else t.values != old
        assert np.array_equal(changed, rows_with_grad)


def test_zero_lr_steps_leave_params(small):
    ds, graphs = small
    res_cfg = _cfg(lr=0.0, epochs=1, eval_every=100)
    res = train(ds, graphs, res_cfg)
    init = M.init_params(ds.n_users, ds.n_items_a, ds.n_items_b, 8, 4)
    assert res.params.checksum() == init.checksum()


def test_baseline_learns_and_is_deterministic(small):
    ds, _ = small
    cfg = _cfg(epochs=15, lr=0.01)
    p1, losses = train_baseline(ds, "A", cfg)
    p2, _ = train_baseline(ds, "A", cfg)
    assert np.array_equal(p1.H_u.values, p2.H_u.values)
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


# --- checkpoint ----------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(small, tmp_path):
    ds, graphs = small
    params = train(ds, graphs, _cfg(epochs=1)).params
    save_checkpoint(params, tmp_path / "p.ckpt", 2)
    back = load_checkpoint(tmp_path / "p.ckpt")
    for name, t in params.named().items():
        assert np.array_equal(back.named()[name].values, t.values)
    meta, _ = read_checkpoint(tmp_path / "p.ckpt")
    assert meta == {"d": 8, "L": 2, "n_users": ds.n_users, "n_items_a": ds.n_items_a,
                    "n_items_b": ds.n_items_b}
    cfg = _cfg()
    for dom in D.DOMAINS:
        assert evaluate(params, ds, dom, cfg, graphs) == evaluate(back, ds, dom, cfg, graphs)


def test_checkpoint_errors(tmp_path):
    params = M.init_params(3, 2, 2, 4, 0)
    path = tmp_path / "p.ckpt"
    save_checkpoint(params, path, 1)
    raw = path.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-5])
    with pytest.raises(CheckpointFormatError) as err:
        load_checkpoint(tmp_path / "t.ckpt")
    assert err.value.offset > 0
    (tmp_path / "m.ckpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointFormatError, match="magic"):
        load_checkpoint(tmp_path / "m.ckpt")
    (tmp_path / "v.ckpt").write_bytes(raw[:4] + (9).to_bytes(4, "little") + raw[8:])
    with pytest.raises(CheckpointFormatError, match="version"):
        load_checkpoint(tmp_path / "v.ckpt")
    with pytest.raises(DimensionMismatchError):
        load_checkpoint(path, d=8)
    (tmp_path / "short.ckpt").write_bytes(raw[:10])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path / "short.ckpt")

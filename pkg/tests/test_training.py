import hashlib
import json
import logging

import numpy as np
import pytest
from sklearn.metrics import f1_score

from vdpg import model as M
from vdpg import tensor as T
from vdpg.data import ConfigError, DomainPool, EmbeddingDataset, SyntheticConfig, synth_generate
from vdpg.evaluation import adaptation_split, eval_model, score
from vdpg.losses import LossWeights, dac_loss
from vdpg.training import (
    EpisodeBatch,
    LogEntry,
    NumericalError,
    TrainConfig,
    TrainLog,
    episode_loss,
    optimise_step,
    pretrain_unlabeled,
    train,
    train_erm,
)


@pytest.fixture(scope="module")
def default_bench():
    return synth_generate(SyntheticConfig(seed=0))


@pytest.fixture(scope="module")
def default_model_cfg():
    return M.ModelConfig()


@pytest.fixture(scope="module")
def short_run(default_bench, default_model_cfg):
    cfg = TrainConfig(epochs=1, episodes_per_epoch=200, base_lr=0.05, seed=0)
    return train(default_bench.source, cfg, default_model_cfg)


def test_config_defaults_follow_sampling_table():
    cfg = TrainConfig()
    assert (cfg.n_support, cfg.n_query, cfg.C, cfg.per_domain, cfg.include_query_in_X) == (16, 48, 2, 8, True)
    assert cfg.epochs == 30 and cfg.base_lr == 3e-3 and cfg.batch_size == 64


def test_config_dict_round_trip():
    cfg = TrainConfig(weights=LossWeights(0.2, 0.3), pretrain=True)
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


@pytest.mark.parametrize("kw", [dict(epochs=-1), dict(training_mode="sgd"), dict(n_query=0),
                                dict(val_fraction=1.0), dict(patience=0)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw).validate()


def test_zero_epochs_returns_init(small_bench, toy_cfg, toy_params):
    out, log = train(small_bench.source, TrainConfig(epochs=0), toy_cfg, init=toy_params)
    assert out.checksum() == toy_params.checksum() and len(log) == 0


def test_dataset_model_mismatch_fails_before_training(small_bench):
    with pytest.raises(ConfigError, match="d=8"):
        train(small_bench.source, TrainConfig(epochs=1), M.ModelConfig(d=16))


def test_two_hundred_episodes_beat_chance_by_twenty_points(short_run, default_bench):
    params, _ = short_run
    acc = eval_model(params, default_bench.source, "adapt-per-domain", k=16, seed=0).accuracy
    assert acc >= 1 / 5 + 0.20


def test_loss_curve_trends_down(short_run):
    _, log = short_run
    total = log.column("total")
    tenth = len(total) // 10
    assert np.median(total[-tenth:]) < np.median(total[:tenth])


def test_log_entries_carry_every_component(short_run):
    _, log = short_run
    e = log.entries[0]
    assert isinstance(e, LogEntry) and e.step == 0 and e.lr == 0.05
    np.testing.assert_allclose(log.column("total"), log.column("task") + 0.1 * log.column("corr") + 0.1 * log.column("dac"))
    assert np.all(np.diff(log.column("lr")) <= 0)


def test_log_file_is_line_delimited(tmp_path):
    log = TrainLog([LogEntry(0, 1, 1.0, 0.5, 0.25, 1.075, 0.1, 0.003)])
    log.write(tmp_path / "a.jsonl")
    rec = json.loads((tmp_path / "a.jsonl").read_text().strip())
    assert rec["step"] == 0 and "wall_time" not in rec
    log.write(tmp_path / "b.jsonl", with_time=True)
    assert json.loads((tmp_path / "b.jsonl").read_text())["wall_time"] == 0.003


def _small_train(bench, cfg, **kw):
    tcfg = TrainConfig(epochs=2, episodes_per_epoch=5, base_lr=0.05, n_support=6, n_query=10, per_domain=4, **kw)
    return train(bench.source, tcfg, cfg)


def test_training_is_deterministic(small_bench, toy_cfg):
    a, la = _small_train(small_bench, toy_cfg, seed=3)
    b, lb = _small_train(small_bench, toy_cfg, seed=3)
    assert a.checksum() == b.checksum()
    assert [e.to_dict(False) for e in la.entries] == [e.to_dict(False) for e in lb.entries]
    c, _ = _small_train(small_bench, toy_cfg, seed=4)
    assert c.checksum() != a.checksum()


def test_checkpoints_per_epoch(small_bench, toy_cfg, tmp_path):
    params, _ = _small_train(small_bench, toy_cfg, checkpoint_dir=str(tmp_path))
    assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch_000.ckpt", "epoch_001.ckpt", "final.ckpt"]
    final, meta = M.load_checkpoint(tmp_path / "final.ckpt")
    assert meta["final"] and meta["step"] == 10 and meta["weights"]["tau"] == 0.1
    assert final.checksum() == params.checksum()


def test_frozen_generator_is_bit_stable(small_bench, toy_cfg, toy_params):
    tcfg = TrainConfig(epochs=1, episodes_per_epoch=3, base_lr=0.05, n_support=6, n_query=10, freeze_generator=True)
    out, _ = train(small_bench.source, tcfg, toy_cfg, init=toy_params)
    for name in M.generator_names(toy_params):
        assert np.array_equal(out[name].data, toy_params[name].data)
    assert not np.array_equal(out["head.w2"].data, toy_params["head.w2"].data)


def test_degenerate_weights_match_task_only_step(toy_cfg, toy_params, rng):
    batch = EpisodeBatch(rng.normal(size=(6, 4, 8)), np.zeros(6, dtype=int), slice(0, 3),
                         rng.normal(size=(5, 4, 8)), rng.integers(0, 3, 5), 0)
    w = LossWeights(0.0, 0.0)
    a, _ = optimise_step(toy_params, batch, w, T.OptimizerState(0.1, 0))
    p = toy_params.tensors
    with T.Tape() as tape:
        prompt = M.pool_prompts(M.per_image_prompts(p, toy_cfg, batch.contrastive_tokens[:3]))
        from vdpg.losses import task_loss

        loss = task_loss(M.guide_and_predict(p, toy_cfg, prompt, batch.query_tokens), batch.query_labels)
    b = T.sgd_step(p, tape.backward(loss, p), T.OptimizerState(0.1, 0))
    for name in p:
        assert np.array_equal(a[name].data, b[name].data)


def test_non_finite_loss_aborts(toy_cfg, toy_params, rng):
    batch = EpisodeBatch(rng.normal(size=(4, 4, 8)), np.array([0, 0, 1, 1]), slice(0, 2),
                         np.full((2, 4, 8), np.nan), np.array([0, 1]), 0)
    with pytest.raises(NumericalError, match="step 0"):
        optimise_step(toy_params, batch, LossWeights(), T.OptimizerState(0.1, 0))


def test_episode_loss_components(toy_cfg, toy_params, rng):
    batch = EpisodeBatch(rng.normal(size=(6, 4, 8)), np.repeat([0, 1], 3), slice(0, 3),
                         rng.normal(size=(4, 4, 8)), rng.integers(0, 3, 4), 0)
    total, task, corr, dac = episode_loss(toy_params.tensors, toy_cfg, batch, LossWeights(0.3, 0.2))
    assert float(total.data) == pytest.approx(float(task.data) + 0.3 * float(corr.data) + 0.2 * float(dac.data))


# ---------------------------------------------------------------- ERM and pretraining


def test_erm_beats_untrained(small_bench, toy_cfg):
    tcfg = TrainConfig(epochs=6, base_lr=0.05, batch_size=32, seed=0)
    erm, log = train_erm(small_bench.source, tcfg, toy_cfg)
    assert {e.phase for e in log.entries} == {"erm"}
    fresh = M.init_params(toy_cfg, 0)
    acc = lambda p: eval_model(p, small_bench.target, k=8).accuracy  # noqa: E731
    assert acc(erm) > acc(fresh)


def test_pretraining_lowers_heldout_dac(small_bench, toy_cfg):
    views = [ds.unlabeled_view() for ds in small_bench.source]
    held = np.concatenate([ds.tokens[-12:] for ds in small_bench.target])
    held_dom = np.repeat([ds.domains[0] for ds in small_bench.target], 12)

    def heldout_dac(params):
        return float(dac_loss(M.per_image_prompts(params.tensors, toy_cfg, held), held_dom).data)

    init = M.init_params(toy_cfg, 0)
    tcfg = TrainConfig(pretrain_epochs=6, base_lr=0.05, n_support=8, n_query=12, per_domain=8)
    pre, log = pretrain_unlabeled(views, tcfg, toy_cfg, init=init)
    assert heldout_dac(pre) < heldout_dac(init)
    assert {e.phase for e in log.entries} == {"pretrain"} and all(e.task == 0.0 for e in log.entries)
    # guidance module and head are untouched
    for name in init.names():
        if name not in M.generator_names(init):
            assert np.array_equal(pre[name].data, init[name].data)


def test_pretraining_ignores_labels(small_bench, toy_cfg):
    tcfg = TrainConfig(pretrain_epochs=1, episodes_per_epoch=3, n_support=6, n_query=10)
    scrambled = [EmbeddingDataset(d.tokens, d.domain_ids, np.roll(d.labels, 1), d.task, d.num_classes)
                 for d in small_bench.source]
    a, _ = pretrain_unlabeled(small_bench.source, tcfg, toy_cfg)
    b, _ = pretrain_unlabeled(scrambled, tcfg, toy_cfg)
    c, _ = pretrain_unlabeled([d.unlabeled_view() for d in small_bench.source], tcfg, toy_cfg)
    assert a.checksum() == b.checksum() == c.checksum()
    assert DomainPool.from_datasets([d.unlabeled_view() for d in small_bench.source]).labels is None


def test_pretraining_single_domain_rejected(small_bench, toy_cfg):
    with pytest.raises(ConfigError):
        pretrain_unlabeled([small_bench.source[0].unlabeled_view()], TrainConfig(), toy_cfg)


def test_pretrain_then_train_handoff(small_bench, toy_cfg):
    tcfg = TrainConfig(epochs=1, episodes_per_epoch=2, pretrain=True, pretrain_epochs=1, n_support=6, n_query=10)
    params, log = train(small_bench.source, tcfg, toy_cfg)
    phases = [e.phase for e in log.entries]
    assert phases[0] == "pretrain" and phases[-1] == "train"


def test_early_stopping_returns_best_epoch(small_bench, toy_cfg, tmp_path):
    tcfg = TrainConfig(epochs=8, episodes_per_epoch=3, base_lr=0.05, n_support=6, n_query=10,
                       val_fraction=0.25, patience=2, checkpoint_dir=str(tmp_path))
    params, log = train(small_bench.source, tcfg, toy_cfg)
    epochs = sorted(tmp_path.glob("epoch_*.ckpt"))
    assert len(log) == 3 * len(epochs)
    assert params.checksum() in {M.load_checkpoint(e)[0].checksum() for e in epochs}
    _, meta = M.load_checkpoint(tmp_path / "final.ckpt")
    assert meta["best_val"] is not None


# ---------------------------------------------------------------- evaluation


def test_perfect_and_constant_predictors():
    y = np.repeat(np.arange(4), 25)
    perfect = score(y, y, "classification", 4)
    assert perfect.accuracy == 1.0 and perfect.macro_f1 == 1.0
    const = score(np.zeros_like(y), y, "classification", 4)
    assert const.accuracy == 0.25
    # predicted class has precision 1/K, recall 1; the rest score 0
    assert const.macro_f1 == pytest.approx((1 / 4) * (2 / 5))
    assert const.macro_f1 == pytest.approx(f1_score(y, np.zeros_like(y), average="macro", zero_division=0))


def test_regression_metrics():
    t = np.linspace(-1, 1, 20)
    m = score(t.copy(), t, "regression")
    assert m.pearson_r == pytest.approx(1.0) and m.mse == 0.0


def test_adaptation_split_is_disjoint():
    rng = np.random.default_rng(0)
    a, e = adaptation_split(50, 16, rng)
    assert len(a) == 16 and len(e) == 34 and not set(a) & set(e)


def test_small_domain_uses_all_records_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        a, e = adaptation_split(5, 16, np.random.default_rng(0))
    assert len(a) == 5 and "fewer than k" in caplog.text


def test_eval_reports_per_domain_and_worst_case(small_bench, toy_params):
    m = eval_model(toy_params, small_bench.target, "adapt-per-domain", k=8)
    assert set(m.per_domain) == {d.domain_ids[0] for d in small_bench.target}
    assert m.worst_accuracy == min(d.accuracy for d in m.per_domain.values())
    assert m.n == sum(d.n for d in m.per_domain.values()) == 2 * (60 - 8)


def test_protocols_score_identical_records(small_bench, toy_params):
    ns = {p: eval_model(toy_params, small_bench.target, p, k=8, prompts=np.zeros((3, 8))).n
          for p in ("adapt-per-domain", "zero-prompt", "given-prompt")}
    assert len(set(ns.values())) == 1


def test_given_prompt_zero_matches_zero_protocol(small_bench, toy_params):
    a = eval_model(toy_params, small_bench.target, "zero-prompt", k=8)
    b = eval_model(toy_params, small_bench.target, "given-prompt", k=8, prompts=np.zeros((3, 8)))
    assert a.accuracy == b.accuracy


def test_unknown_protocol(small_bench, toy_params):
    with pytest.raises(ValueError):
        eval_model(toy_params, small_bench.target, "oracle")


def test_checkpoint_hash_stable_across_runs(small_bench, toy_cfg, tmp_path):
    digests = []
    for run in range(2):
        params, _ = _small_train(small_bench, toy_cfg, seed=1)
        M.save_checkpoint(params, {"seed": 1}, tmp_path / f"{run}.ckpt")
        digests.append(hashlib.sha256((tmp_path / f"{run}.ckpt").read_bytes()).hexdigest())
    assert digests[0] == digests[1]

import json
import math

import numpy as np
import pytest

from mpmnav import harness as H
from mpmnav.agent import NavAgent
from mpmnav.metrics import COLUMNS

MICRO = {"d_model": 16, "n_heads": 2, "text_layers": 1, "pano_layers": 1, "temporal_layers": 1, "crossmodal_layers": 1, "dropout": 0.0}
SMALL_WORLD = {"n_train": 2, "n_val_seen": 1, "n_val_unseen": 1, "n_nodes": 20}


@pytest.fixture(scope="module")
def bundle():
    return H.make_bundle(0, 0, 8, 4, world_kwargs=SMALL_WORLD)


def cfg(**kw):
    base = dict(agent=MICRO, batch_size=4, max_steps=3, eval_every=2, eval_limit=4)
    return H.TrainConfig(**{**base, **kw})


def params(agent):
    return {n: p.data.copy() for n, p in agent.store.params.items()}


def same_params(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


# configuration


def test_config_validation():
    for bad in (
        {"stage": "warmup"},
        {"task_mix": {}},
        {"task_mix": {"mpm": 1.0, "vqa": 1.0}},
        {"task_mix": {"mpm": 0.0}},
        {"mask_ratio": 1.5},
        {"batch_size": 0},
        {"mpm_weight": -1.0},
        {"agent": "huge"},
        {"preexplore_mode": "vln"},
    ):
        with pytest.raises(H.HarnessError):
            H.TrainConfig(**bad)
    with pytest.raises(H.HarnessError, match="bogus"):
        H.TrainConfig.from_dict({"bogus": 1})


def test_config_round_trip_and_lr_defaults(tmp_path):
    c = cfg(seed=7, mask_ratio=0.5)
    (tmp_path / "c.json").write_text(json.dumps(c.to_dict()))
    assert H.TrainConfig.load(tmp_path / "c.json") == c
    assert H.TrainConfig(stage="finetune").learning_rate == H.DEFAULT_LR["finetune"]
    assert H.TrainConfig(lr=0.5).learning_rate == 0.5
    assert c.replace(seed=8).seed == 8 and c.seed == 7


def test_task_mix_frequencies():
    mix = H.TrainConfig().normalized_mix()
    assert mix["mpm"] == pytest.approx(2 / 7)
    draws = H.draw_tasks(mix, 10_000, seed=3)
    for task, p in mix.items():
        assert abs(draws.count(task) / 10_000 - p) <= 0.02, task
    assert set(H.draw_tasks({"mpm": 1.0}, 200, 0)) == {"mpm"}


def test_step_rng_streams_differ():
    a = H.step_rng(0, 5, "pretrain").random(4)
    assert np.array_equal(a, H.step_rng(0, 5, "pretrain").random(4))
    assert not np.array_equal(a, H.step_rng(0, 5, "finetune").random(4))
    assert not np.array_equal(a, H.step_rng(0, 6, "pretrain").random(4))


def test_best_step_first_maximum():
    hist = [{"step": s, "val_unseen": {"SR": sr}} for s, sr in ((2, 0.1), (4, 0.3), (6, 0.3), (8, 0.2))]
    assert H.best_step(hist) == 4
    assert H.best_step([]) is None
    m = H.RunManifest(config={}, seeds={})
    assert m.record_eval(2, {"val_unseen": {"SR": 0.0}})
    assert not m.record_eval(4, {"val_unseen": {"SR": 0.0}})
    assert m.record_eval(6, {"val_unseen": {"SR": 0.5}}) and m.best_step == 6


# environment audit


def test_audited_envs_logs_and_refuses(bundle):
    log: set = set()
    envs = H.AuditedEnvs(bundle.envs, bundle.split_env_ids("train"), log)
    assert len(envs) == 2 and not log
    envs["train00"]
    assert log == {"train00"}
    with pytest.raises(KeyError):
        envs["unseen00"]
    assert "unseen00" not in log


def test_training_touches_only_train_envs(bundle):
    m, _ = H.pretrain(cfg(max_steps=4), bundle)
    assert m.env_access and set(m.env_access) <= set(bundle.split_env_ids("train"))
    m, _, _ = H.finetune(cfg(stage="finetune", max_steps=2), bundle)
    assert set(m.env_access) <= set(bundle.split_env_ids("train"))


def test_preexplore_needs_flag_and_uses_unseen(bundle):
    agent = NavAgent(H.TrainConfig(agent=MICRO).agent_config(), seed=0)
    with pytest.raises(H.HarnessError):
        H.preexplore(agent, bundle, cfg(stage="preexplore"), steps=1)
    m, _ = H.preexplore(agent, bundle, cfg(stage="preexplore", preexplore=True), steps=2)
    assert m.env_access == bundle.split_env_ids("val_unseen")
    assert len(m.losses) == 2


def test_joint_preexplore_touches_train_and_unseen(bundle):
    agent = NavAgent(H.TrainConfig(agent=MICRO).agent_config(), seed=1)
    c = cfg(stage="preexplore", preexplore=True, preexplore_mode="joint")
    m, _ = H.preexplore(agent, bundle, c, steps=2)
    assert set(m.env_access) <= set(bundle.split_env_ids("train") + bundle.split_env_ids("val_unseen"))
    assert set(bundle.split_env_ids("val_unseen")) <= set(m.env_access)
    assert not set(m.env_access) & (set(bundle.split_env_ids("val_seen")) - set(bundle.split_env_ids("train")))
    assert len(m.losses) == 2 and all(math.isfinite(x) for x in m.losses)


def test_zero_step_preexplore_is_plain_evaluation(bundle):
    agent = NavAgent(H.TrainConfig(agent=MICRO).agent_config(), seed=2)
    before = params(agent)
    m, out = H.preexplore(agent, bundle, cfg(stage="preexplore", preexplore=True), steps=0)
    assert m.extra["before"] == m.extra["after"]
    _, plain = H.evaluate_split(agent, bundle, "val_unseen", 4)
    assert m.extra["after"] == {k: plain[k] for k in COLUMNS}
    assert same_params(before, params(out))


# training


def test_pretrain_deterministic(bundle):
    c = cfg(max_steps=4, seed=5)
    m1, a1 = H.pretrain(c, bundle)
    m2, a2 = H.pretrain(c, bundle)
    assert m1.losses == m2.losses
    assert same_params(params(a1), params(a2))
    _, a3 = H.pretrain(c.replace(seed=6), bundle)
    assert not same_params(params(a1), params(a3))


@pytest.mark.parametrize("stage", ["pretrain", "finetune"])
def test_resume_is_bit_identical(stage, bundle, tmp_path):
    run = H.pretrain if stage == "pretrain" else H.finetune
    c = cfg(stage=stage, max_steps=4, eval_every=2)
    whole = run(c, bundle, out=tmp_path / "whole")
    run(c.replace(max_steps=2), bundle, out=tmp_path / "split")
    resumed = H.resume_run(tmp_path / "split", bundle, max_steps=4)
    assert same_params(params(whole[1]), params(resumed[1]))
    assert whole[0].losses == resumed[0].losses
    assert whole[0].history == resumed[0].history
    a = (tmp_path / "whole" / "train_log.jsonl").read_bytes()
    assert a == (tmp_path / "split" / "train_log.jsonl").read_bytes()
    assert len(a.splitlines()) == 4


def test_train_log_rows(bundle, tmp_path):
    H.pretrain(cfg(max_steps=3), bundle, out=tmp_path)
    rows = [json.loads(line) for line in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == [0, 1, 2]
    for r in rows:
        assert set(r) == {"step", "task", "loss", "grad_norm", "lr"}
        assert r["task"] in H.TASKS and math.isfinite(r["loss"]) and r["grad_norm"] >= 0
    assert (tmp_path / "last" / "model.mpmn").exists() and (tmp_path / "last" / "config.json").exists()


def test_finetune_history_and_best(bundle, tmp_path):
    m, last, best = H.finetune(cfg(stage="finetune", max_steps=3, eval_every=2), bundle, out=tmp_path)
    assert [h["step"] for h in m.history] == [2, 3]
    assert m.best_step == H.best_step(m.history)
    assert (tmp_path / "best" / "model.mpmn").exists()
    _, summary = H.evaluate_split(best, bundle, "val_unseen", 4)
    expected = next(h for h in m.history if h["step"] == m.best_step)["val_unseen"]
    assert summary["SR"] == expected["SR"]


def test_non_finite_loss_aborts(bundle):
    from mpmnav.neuralcore.tensor import Tensor

    agent = NavAgent(H.TrainConfig(agent=MICRO).agent_config())
    with pytest.raises(H.TrainingError, match="step 3"):
        H.apply_update(agent, Tensor(np.array(np.nan)), 1e-3, 3, "mpm")


# evaluation


def test_untrained_agent_evaluates(bundle):
    agent = NavAgent(H.TrainConfig(agent=MICRO).agent_config(), seed=9)
    records, summary = H.evaluate_split(agent, bundle, "val_unseen")
    assert len(records) == len(bundle.vln["val_unseen"])
    assert all(math.isfinite(summary[c]) for c in COLUMNS)


def test_oracle_policy_is_perfect(bundle):
    agent = NavAgent(H.TrainConfig(agent=MICRO).agent_config())
    _, summary = H.evaluate_split(agent, bundle, "val_seen", policy=H.oracle_policy)
    assert summary["SR"] == 1.0 and summary["SPL"] == pytest.approx(1.0) and summary["NE"] == 0.0


def test_evaluate_checkpoint_csv_reproducible(bundle, tmp_path):
    agent = NavAgent(H.TrainConfig(agent=MICRO).agent_config(), seed=4)
    agent.save(tmp_path / "ck")
    csv1, s1 = H.evaluate_checkpoint(tmp_path / "ck", bundle, "val_seen", tmp_path / "a")
    csv2, s2 = H.evaluate_checkpoint(tmp_path / "ck", bundle, "val_seen", tmp_path / "b")
    assert csv1 == csv2 and s1 == s2
    assert (tmp_path / "a" / "metrics_val_seen.csv").read_bytes() == (tmp_path / "b" / "metrics_val_seen.csv").read_bytes()


def test_bundle_save_load_round_trip(bundle, tmp_path):
    paths = H.write_world_and_data(bundle, tmp_path)
    back = H.load_bundle(paths["world_set"], paths["datasets"])
    for split in ("train", "val_seen", "val_unseen"):
        assert [e.id for e in back.vln[split]] == [e.id for e in bundle.vln[split]]
    assert back.hist.counts == bundle.hist.counts
    with pytest.raises(H.HarnessError, match="vln_train"):
        H.load_bundle(paths["world_set"], {})


# experiments


def test_ablation_table_shape(bundle):
    table = H.ablate_mask_ratio(cfg(), bundle, 1, 1, ratios=(0.0, 0.5), seeds=(0, 1))
    assert [r["ratio"] for r in table] == [0.0, 0.5]
    for row in table:
        assert len(row["sr"]) == 2 and 0.0 <= row["sr_mean"] <= 1.0
    lines = H.mask_ratio_csv(table).splitlines()
    assert lines[0] == "ratio,sr_mean,sr_sd,sr_seed0,sr_seed1" and len(lines) == 3


def test_ratio_ordering_ties_keep_order():
    table = [{"ratio": r, "sr_mean": m} for r, m in ((0.0, 0.2), (0.25, 0.5), (0.5, 0.2), (0.75, 0.4))]
    assert H.ratio_ordering(table) == [0.25, 0.75, 0.0, 0.5]


def test_mean_sd():
    assert H.mean_sd([1.0]) == (1.0, 0.0)
    m, s = H.mean_sd([1.0, 2.0, 3.0])
    assert m == 2.0 and s == pytest.approx(1.0)


def test_path_design_needs_long_sets(bundle):
    with pytest.raises(H.HarnessError):
        H.ablate_path_design(cfg(), bundle, 1, 1)


def test_report_sections(tmp_path):
    table = [{"ratio": r, "seeds": [0], "sr": [m], "sr_mean": m, "sr_sd": 0.0} for r, m in ((0.0, 0.1), (0.25, 0.3))]
    (tmp_path / "mask_ratio.json").write_text(json.dumps(table))
    (tmp_path / "gradcheck.json").write_text(json.dumps({"max_rel_error": 1e-7, "passed": True}))
    text, ordering = H.build_report([tmp_path], tmp_path / "r")
    assert ordering == [0.25, 0.0]
    assert "## Mask-ratio sweep" in text and "## Gradient check" in text
    assert (tmp_path / "r" / "mask_ratio.svg").exists()

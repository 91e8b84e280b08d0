from dataclasses import replace
import hashlib
import json

import numpy as np
import pytest

from kgrl.envs import task_spec
from kgrl.harness.checkpoint import block_digest, load_checkpoint, policy_from_checkpoint, save_checkpoint, trainer_checkpoint
from kgrl.harness.config import EdgePlan, GroupConfig
from kgrl.incremental import (
    ExpansionError,
    LineageRecord,
    TransferError,
    TransferPlan,
    expand_knowledge,
    initial_knowledge,
    learned_id,
    run_group,
    transfer,
)
from kgrl.learner import LearnerConfig, Trainer

CFG = LearnerConfig(total_steps=150, warmup_steps=50, batch_size=16, eval_interval=150, eval_episodes=1,
                    actor_hidden=(8, 8), critic_hidden=(8,), query_hidden=(8,))


def _source(tmp_path, task="NeedlePick", seed=0, steps=150):
    spec = task_spec(task)
    tr = Trainer(spec, CFG, seed, knowledge=initial_knowledge("scripted", seed))
    tr.run(steps)
    path = tmp_path / f"{task}.ckpt"
    save_checkpoint(path, *trainer_checkpoint(tr, include_buffer=False))
    return path, tr


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_keys_only_copies_keys_and_refreshes_networks(tmp_path):
    path, tr = _source(tmp_path, "MisOrient")
    before = _sha(path)
    pol = transfer(TransferPlan("KeysOnly", path, task_spec("ECMReach")), CFG, seed=5)
    src = load_checkpoint(path).blocks
    for j in range(1, 4):
        assert block_digest(pol.params["keys"][j]) == block_digest(src["policy.keys"][j])
    assert pol.params["query"].shape != src["policy.query"].shape or not np.array_equal(pol.params["query"], src["policy.query"])
    assert not np.array_equal(pol.params["keys"][0], src["policy.keys"][0])
    assert _sha(path) == before


def test_keys_and_query_with_selection(tmp_path):
    path, _ = _source(tmp_path, "NeedleRegrasp")
    plan = TransferPlan("KeysAndQuery", path, task_spec("BiPegTransfer"), ("approach", "transport"))
    pol = transfer(plan, CFG, seed=1)
    src = load_checkpoint(path).blocks
    np.testing.assert_array_equal(pol.params["query"], src["policy.query"])
    np.testing.assert_array_equal(pol.params["keys"][1:3], src["policy.keys"][1:3])
    assert not np.array_equal(pol.params["keys"][3], src["policy.keys"][3])
    assert np.all(np.abs(pol.params["keys"][3]) <= 0.5)
    assert not np.array_equal(pol.params["inner"], src["policy.inner"])


def test_all_pipeline_copies_inner_actor(tmp_path):
    path, _ = _source(tmp_path, "NeedlePick")
    pol = transfer(TransferPlan("All", path, task_spec("PegTransfer")), CFG, seed=2)
    src = load_checkpoint(path).blocks
    for k in ("inner", "query", "keys"):
        assert block_digest(pol.params[k]) == block_digest(src[f"policy.{k}"])


def test_copied_parameters_are_independent(tmp_path):
    path, _ = _source(tmp_path)
    pol = transfer(TransferPlan("All", path, task_spec("PegTransfer")), CFG, seed=2)
    pol.params["inner"] += 1.0
    assert not np.array_equal(pol.params["inner"], load_checkpoint(path).blocks["policy.inner"])


def test_dimension_mismatch_names_component(tmp_path):
    path, _ = _source(tmp_path, "MisOrient")
    with pytest.raises(TransferError) as err:
        transfer(TransferPlan("KeysAndQuery", path, task_spec("NeedleReach")), CFG, 0)
    assert err.value.component == "query"
    path2, _ = _source(tmp_path, "ECMReach")
    with pytest.raises(TransferError) as err:
        transfer(TransferPlan("All", path2, task_spec("NeedlePick")), CFG, 0)
    assert err.value.component == "query"
    with pytest.raises(TransferError):
        TransferPlan("KeysOnly", path, task_spec("NeedleReach"), ())
    with pytest.raises(TransferError):
        TransferPlan("Everything", path, task_spec("NeedleReach"))
    with pytest.raises(TransferError):
        transfer(TransferPlan("KeysOnly", path, task_spec("NeedleReach"), ("suture",)), CFG, 0)


def test_fresh_keys_follow_init_law(tmp_path):
    path, _ = _source(tmp_path, "MisOrient")
    fresh = np.stack([transfer(TransferPlan("KeysOnly", path, task_spec("NeedleReach"), ("approach",)), CFG, s)
                      .params["keys"][2:] for s in range(150)])
    assert np.abs(fresh).max() <= 0.5
    assert abs(fresh.mean()) < 0.03
    assert fresh.var() == pytest.approx(0.25 / 3, rel=0.1)


def test_expand_knowledge_grows_set(tmp_path):
    path, tr = _source(tmp_path, "NeedleReach")
    kset = initial_knowledge("scripted", 0)
    bigger = expand_knowledge(kset, path)
    assert bigger.n == 4 and bigger.ids[-1] == learned_id("NeedleReach")
    np.testing.assert_array_equal(bigger.keys[-1].embedding, load_checkpoint(path).blocks["policy.keys"][0])
    path2, _ = _source(tmp_path, "NeedleReach", seed=1)
    with pytest.raises(ExpansionError):
        expand_knowledge(bigger, path2)  # same id again


def test_expand_rejects_action_mismatch(tmp_path):
    path, _ = _source(tmp_path, "MisOrient")
    kset = expand_knowledge(initial_knowledge("scripted", 0), _source(tmp_path, "NeedleReach")[0])
    with pytest.raises(ExpansionError):
        expand_knowledge(kset, path)


def test_expanded_policy_reproduces_source_actions(tmp_path):
    path, tr = _source(tmp_path, "NeedleReach")
    spec = task_spec("NeedleReach")
    plan = TransferPlan("KeysOnly", path, spec, expand_with_inner=True)
    pol = transfer(plan, CFG, seed=3)
    assert pol.n == 4 and pol.params["keys"].shape == (5, 4)
    src_pol = policy_from_checkpoint(load_checkpoint(path))
    obs = np.random.default_rng(0).uniform(-0.2, 0.2, (5, spec.obs_dim))
    loc, _ = pol.knowledge.distributions(obs, spec.layout)
    np.testing.assert_array_equal(np.tanh(loc[:, -1]), np.tanh(src_pol._inner_head(src_pol.params, obs)[0].mean))


def test_group_run_lineage_and_determinism(tmp_path):
    group = GroupConfig([task_spec("StaticTrack"), task_spec("ActiveTrack")], [EdgePlan("All")], CFG, [0, 1], "g4")
    lin = run_group(group, tmp_path / "a")
    assert len(lin) == 2 and lin.entries[1]["plan"]["pipeline"] == "All"
    manifest = json.loads((tmp_path / "a" / "lineage.json").read_text())
    assert manifest["status"] == "complete"
    for e in manifest["records"]:
        assert load_checkpoint(tmp_path / "a" / e["checkpoint"]).content_hash == e["checkpoint_hash"]
    again = run_group(group, tmp_path / "b")
    assert again.hashes == lin.hashes
    assert LineageRecord.read(tmp_path / "a" / "lineage.json").hashes == lin.hashes


def test_single_task_group_matches_plain_training(tmp_path):
    group = GroupConfig([task_spec("NeedleReach")], [], CFG, [4], "one")
    run_group(group, tmp_path)
    tr = Trainer(task_spec("NeedleReach"), CFG, 4, knowledge=initial_knowledge("scripted", 4),
                 metrics_path=tmp_path / "plain.csv")
    tr.run()
    tr.close()
    assert (tmp_path / "00_NeedleReach_metrics.csv").read_bytes() == (tmp_path / "plain.csv").read_bytes()


def test_invalid_group_rejected_before_training(tmp_path):
    group = GroupConfig([task_spec("MisOrient"), task_spec("NeedleReach")], [EdgePlan("All")], CFG, [0, 1])
    with pytest.raises(TransferError):
        run_group(group, tmp_path)
    assert not list(tmp_path.glob("*.ckpt"))


def test_failed_task_keeps_partial_lineage(tmp_path, monkeypatch):
    from kgrl import incremental
    group = GroupConfig([task_spec("NeedlePick"), task_spec("PegTransfer")], [EdgePlan("All")], CFG, [0, 1], "g3")
    real = incremental.transfer

    def broken(*a, **k):
        raise RuntimeError("boom")

    monkeypatch.setattr(incremental, "transfer", broken)
    with pytest.raises(incremental.GroupRunError):
        run_group(group, tmp_path)
    manifest = json.loads((tmp_path / "lineage.json").read_text())
    assert len(manifest["records"]) == 1 and manifest["status"].startswith("failed at task 2")
    monkeypatch.setattr(incremental, "transfer", real)


def test_carried_buffer_keeps_previous_transitions(tmp_path):
    small = replace(CFG, total_steps=120, eval_interval=120)
    group = GroupConfig([task_spec("NeedlePick"), task_spec("PegTransfer")],
                        [EdgePlan("All", carry_buffer=True)], small, [0, 1], "carry")
    trainers = {}
    run_group(group, tmp_path, on_task_done=lambda i, tr: trainers.__setitem__(i, tr))
    first, second = trainers[0].buffer, trainers[1].buffer
    assert second.size == 240
    np.testing.assert_array_equal(second.obs[:120], first.obs[:120])
    lineage = json.loads((tmp_path / "lineage.json").read_text())
    assert lineage["records"][1]["plan"]["carry_buffer"] is True


def test_carried_buffer_needs_equal_dimensions(tmp_path):
    group = GroupConfig([task_spec("MisOrient"), task_spec("NeedleReach")],
                        [EdgePlan("KeysOnly", carry_buffer=True)], CFG, [0, 1])
    with pytest.raises(TransferError) as err:
        run_group(group, tmp_path)
    assert "replay_buffer" in str(err.value)

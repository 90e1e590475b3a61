import json
import math

import numpy as np
import pytest

from david.checkpoint import Checkpoint, manifest
from david.model import FREEZE_AFTER_SDS
from david.neural import EncoderConfig
from david.synthgen import gold_label_space
from david.workflow import (AdaptationPlan, EmptyGuidanceError, MissingAnnotationError, RunLog, ShapeMismatchError,
                            frozen_arrays_equal, from_checkpoint, guidance_subset, initial_checkpoint,
                            read_predictions, run_adaptation, run_finetune, run_inference, write_predictions,
                            write_run)

CFG = EncoderConfig(hidden_dim=16, n_layers=1, n_heads=2, ffn_dim=24, decoder_layers=1, conv_channels=(4, 6))


@pytest.fixture(scope="module")
def init(tiny_split):
    docs = list(tiny_split.d_n) + list(tiny_split.d_g)
    return initial_checkpoint(docs, gold_label_space("form"), CFG, seed=0)


def _groups(ckpt, groups):
    return {n: a for n, a in ckpt.arrays.items() if n.split(".", 1)[0] in groups}


def _same(a, b):
    return a.keys() == b.keys() and all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_plan_validation():
    with pytest.raises(ValueError):
        AdaptationPlan(sds_epochs=-1)
    with pytest.raises(ValueError):
        AdaptationPlan(task_mode="medium")
    with pytest.raises(ValueError):
        AdaptationPlan(batch_size=0)
    plan = AdaptationPlan()
    assert (plan.learning_rate, plan.batch_size, plan.sds_epochs) == (2e-4, 2, 1)
    assert AdaptationPlan.from_json(plan.to_json()) == plan


def test_finetune_step_floor():
    plan = AdaptationPlan(finetune_epochs=10, finetune_min_steps=200, batch_size=2)
    assert plan.finetune_epochs_for(400) == 10
    assert plan.finetune_epochs_for(4) == 100


def test_sds_only_leaves_decoders_untouched(tiny_split, init):
    log = RunLog()
    out = run_adaptation(tiny_split.d_n, AdaptationPlan(sds_epochs=1, sst_epochs=0, sit_epochs=0), init, log)
    assert {r[1] for r in log.rows} == {"sds"}
    untouched = ("token_decoder", "tag_head")
    assert _same(_groups(out, untouched), _groups(init, untouched))
    assert not _same(_groups(out, ("joint_encoder",)), _groups(init, ("joint_encoder",)))
    assert out.stage == "F_n"
    assert out.frozen == {n for n in out.arrays if n.split(".", 1)[0] in FREEZE_AFTER_SDS}


def test_epoch_count_changes_checkpoint(tiny_split, init):
    one = run_adaptation(tiny_split.d_n, AdaptationPlan(sds_epochs=1, sst_epochs=0, sit_epochs=0), init)
    two = run_adaptation(tiny_split.d_n, AdaptationPlan(sds_epochs=2, sst_epochs=0, sit_epochs=0), init)
    assert one.digest() != two.digest()


def test_adaptation_is_deterministic(tiny_split, init):
    plan = AdaptationPlan(sds_epochs=1, sst_epochs=1, sit_epochs=1, seed=3)
    assert run_adaptation(tiny_split.d_n, plan, init).digest() == run_adaptation(tiny_split.d_n, plan, init).digest()


def test_freeze_contract(tiny_split, init):
    plan = AdaptationPlan(sds_epochs=1, sst_epochs=1, sit_epochs=1)
    log = RunLog()
    adapted = run_adaptation(tiny_split.d_n, plan, init, log)
    assert [s for s in dict.fromkeys(r[1] for r in log.rows)] == ["sds", "sst", "sit"]
    for task in ("fine", "coarse"):
        tuned = run_finetune(tiny_split.d_g, adapted, AdaptationPlan(finetune_epochs=1, finetune_min_steps=0), task)
        assert tuned.stage == "F_nt"
        assert frozen_arrays_equal(adapted, tuned)
        head = "tag_head" if task == "fine" else "retrieval_head"
        assert not _same(_groups(adapted, (head,)), _groups(tuned, (head,)))


def test_frozen_decoders_switch(tiny_split, init):
    adapted = run_adaptation(tiny_split.d_n, AdaptationPlan(sds_epochs=1, sst_epochs=1, sit_epochs=1), init)
    plan = AdaptationPlan(finetune_epochs=1, finetune_min_steps=0, finetune_decoders=False)
    tuned = run_finetune(tiny_split.d_g, adapted, plan, "coarse")
    assert frozen_arrays_equal(adapted, tuned, FREEZE_AFTER_SDS + ("token_decoder", "entity_decoder"))


def test_unfrozen_sds_trains_encoders_in_later_stages(tiny_split, init):
    plan = AdaptationPlan(sds_epochs=1, sst_epochs=1, sit_epochs=0, freeze_after_sds=False, task_mode="fine")
    out = run_adaptation(tiny_split.d_n, plan, init)
    assert not out.frozen


def test_zero_learning_rate_is_identity(tiny_split, init):
    plan = AdaptationPlan(sds_epochs=1, sst_epochs=1, sit_epochs=1, learning_rate=0.0, sds_layout_dropout=0.0)
    out = run_adaptation(tiny_split.d_n, plan, init)
    # the pointer nets are re-seeded from the alignment head after SDS; everything else is untouched
    keep = [g for g in ("token_encoder", "l2v", "entity_encoder", "joint_encoder", "alignment", "token_decoder",
                        "tag_head")]
    assert _same(_groups(out, keep), _groups(init, keep))


def test_finetune_from_init_is_f_t(tiny_split, init):
    out = run_finetune(tiny_split.d_g, init, AdaptationPlan(finetune_epochs=1, finetune_min_steps=0), "fine")
    assert out.stage == "F_t" and not out.frozen


def test_guidance_ratio_sizes(tiny_split):
    d_g = list(tiny_split.d_g) * 7  # 42 documents
    for r in (0.1, 0.25, 0.5, 1.0):
        assert len(guidance_subset(d_g, r, seed=0)) == math.ceil(r * 42)
    assert guidance_subset(d_g, 0.3, 1) == guidance_subset(d_g, 0.3, 1)
    with pytest.raises(EmptyGuidanceError):
        guidance_subset(d_g[:5], 0.1, 0)
    with pytest.raises(ValueError):
        guidance_subset(d_g, 0.0, 0)


def test_finetune_rejects_synthetic_guidance(tiny_split, init):
    with pytest.raises(ValueError):
        run_finetune(tiny_split.d_n, init, AdaptationPlan(), "fine")


def test_missing_annotation_named(tiny_split, init):
    from dataclasses import replace

    bad = replace(tiny_split.d_n[0], tokens=tuple(replace(t, synthetic_label=None) for t in tiny_split.d_n[0].tokens))
    with pytest.raises(MissingAnnotationError, match=bad.id):
        run_adaptation([bad], AdaptationPlan(task_mode="fine"), init)
    no_qa = [replace(d, qa_pairs=()) for d in tiny_split.d_n]
    with pytest.raises(MissingAnnotationError, match="SIT"):
        run_adaptation(no_qa, AdaptationPlan(task_mode="coarse"), init)


def test_inference_deterministic_and_empty(tiny_split, init, tmp_path):
    a = run_inference(tiny_split.d_i, init, "both")
    assert a == run_inference(tiny_split.d_i, init, "both")
    assert {r["kind"] for r in a} == {"token", "query"}
    assert run_inference([], init, "both") == []
    write_predictions(tmp_path / "p.jsonl", a)
    assert read_predictions(tmp_path / "p.jsonl") == a


def test_checkpoint_round_trip_byte_stable(tiny_split, init, tmp_path):
    adapted = run_adaptation(tiny_split.d_n, AdaptationPlan(sds_epochs=1, sst_epochs=0, sit_epochs=1), init)
    path = tmp_path / "a.bin"
    adapted.save(path)
    loaded = Checkpoint.load(path)
    assert loaded.to_bytes() == path.read_bytes()
    assert loaded.stage == "F_n" and loaded.frozen == adapted.frozen
    assert {e["name"] for e in manifest(path)} == set(adapted.arrays)
    model, _ = from_checkpoint(loaded)
    assert {n for n, p in model.named_parameters() if not p.requires_grad} == set(adapted.frozen)
    assert run_inference(tiny_split.d_i, loaded, "both") == run_inference(tiny_split.d_i, adapted, "both")


def test_checkpoint_rejects_wrong_shapes(init):
    arrays = dict(init.arrays)
    name = next(iter(arrays))
    arrays[name] = np.zeros((1, 1), dtype=np.float32)
    with pytest.raises(ShapeMismatchError):
        from_checkpoint(Checkpoint(arrays, init.frozen, init.stage, init.plan_hash, init.metrics, init.meta))
    with pytest.raises(ValueError):
        Checkpoint({}, stage="F_x")
    with pytest.raises(ValueError):
        Checkpoint.from_bytes(b"NOTACKPT" + bytes(20))


def test_write_run_layout(tiny_split, init, tmp_path):
    log = RunLog()
    plan = AdaptationPlan(sds_epochs=1, sst_epochs=0, sit_epochs=0)
    ckpt = run_adaptation(tiny_split.d_n, plan, init, log)
    path = write_run(tmp_path / "runs" / "demo", ckpt, log, {"plan": plan.to_json(), "seed": 0})
    assert path.name == "ckpt-F_n.bin"
    record = json.loads((path.parent / "run.json").read_text())
    assert record["plan_hash"] == plan.digest() and record["checkpoint_sha256"] == ckpt.digest()
    lines = (path.parent / "log.csv").read_text().splitlines()
    assert lines[0] == "step,stage,loss" and len(lines) == len(log.rows) + 1
    assert ckpt.meta["corpus_hash"]

import hashlib

import numpy as np
import pytest

from katrec.config import toy_config
from katrec.trainer import (
    CheckpointError,
    Trainer,
    joint_train,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)


def fast_config(**kw):
    base = dict(pretrain_epochs=3, epochs=4)
    base.update(kw)
    return toy_config(**base)


def digest(tensors):
    h = hashlib.sha256()
    for k in sorted(tensors):
        h.update(k.encode())
        h.update(np.ascontiguousarray(tensors[k].data).tobytes())
    return h.hexdigest()


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_checkpoint_save_load_save_is_byte_identical(toy, tmp_path):
    tr = Trainer(fast_config(epochs=1), toy).setup().fit()
    save_checkpoint(tmp_path / "a", tr.checkpoint())
    ck = load_checkpoint(tmp_path / "a")
    save_checkpoint(tmp_path / "b", ck)
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    header = (tmp_path / "a" / "manifest.tsv").read_text().splitlines()[0]
    assert header == "name\tdtype\tshape"


def test_float32_checkpoint_roundtrip_is_lossless(toy, tmp_path):
    tr = Trainer(fast_config(epochs=1, dtype="float32"), toy).setup().fit()
    ck = tr.checkpoint()
    save_checkpoint(tmp_path / "c", ck)
    back = load_checkpoint(tmp_path / "c")
    assert set(back.tensors) == set(ck.tensors)
    for k, v in ck.tensors.items():
        assert back.tensors[k].dtype == np.float32
        np.testing.assert_array_equal(back.tensors[k], v)


def test_mismatched_width_is_rejected(toy, tmp_path):
    tr = Trainer(fast_config(epochs=0), toy).setup()
    save_checkpoint(tmp_path / "ck", tr.checkpoint())
    with pytest.raises(CheckpointError, match="layer_dims"):
        load_checkpoint(tmp_path / "ck", fast_config(layer_dims=(8, 4)))
    with pytest.raises(CheckpointError, match="'d'"):
        load_checkpoint(tmp_path / "ck", fast_config(d=20))


def test_truncated_tensor_file_is_named(toy, tmp_path):
    tr = Trainer(fast_config(epochs=0), toy).setup()
    save_checkpoint(tmp_path / "ck", tr.checkpoint())
    victim = tmp_path / "ck" / "tensors" / "seq.item.bin"
    victim.write_bytes(victim.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="seq.item"):
        load_checkpoint(tmp_path / "ck")


def test_resume_matches_uninterrupted_run(toy, tmp_path):
    cfg = fast_config(epochs=3, dropout=0.1, weight_decay=0.01, lr_decay=True)
    full = Trainer(cfg, toy).setup().fit()
    assert len(full.history) >= 20

    first = Trainer(cfg, toy).setup().fit(max_epochs=1)
    save_checkpoint(tmp_path / "mid", first.checkpoint())
    resumed = Trainer.from_checkpoint(load_checkpoint(tmp_path / "mid", cfg), toy).fit()
    assert resumed.history[19] == full.history[19]
    assert resumed.history == full.history
    assert digest(resumed.model.tensors()) == digest(full.model.tensors())


def test_zero_joint_epochs_keeps_pretrained_state(toy):
    cfg = fast_config(epochs=0)
    tr = Trainer(cfg, toy).setup()
    before = {k: t.data.copy() for k, t in tr.model.tensors().items()}
    ck = joint_train(cfg, toy)
    for k, v in before.items():
        np.testing.assert_array_equal(ck.tensors[k], v)


def test_phases_touch_disjoint_parameters(toy):
    tr = Trainer(fast_config(), toy).setup()
    kg = tr.model.kg.tensors
    seq = tr.model.seq_tensors
    kg0, seq0 = digest(kg()), digest(seq())
    tr.phase_a()
    kg1 = digest(kg())
    assert kg1 != kg0 and digest(seq()) == seq0
    tr.phase_b()
    assert digest(kg()) == kg1 and digest(seq()) != seq0


def test_connected_mode_seeds_item_table_from_kg(toy):
    tr = Trainer(fast_config(), toy).setup()
    n = toy.num_items
    np.testing.assert_array_equal(tr.model.seq.item.data, tr.model.kg_table[:n])
    assert tr.model.kg_table.shape[1] == tr.config.q
    loose = Trainer(fast_config(ablation="connection"), toy).setup()
    assert not np.allclose(loose.model.seq.item.data, loose.model.kg_table[:n])


def test_concat_variant_freezes_fusion(toy):
    tr = Trainer(fast_config(ablation="concat"), toy).setup()
    assert "seq.fuse_w" not in tr.seq_opt.params
    w = tr.model.seq.fuse_w.data.copy()
    tr.fit(max_epochs=1)
    np.testing.assert_array_equal(tr.model.seq.fuse_w.data, w)


def test_dropout_stream_does_not_move_negative_sampling(toy):
    cfg = fast_config(dropout=0.3)
    a = Trainer(cfg, toy).setup()
    b = Trainer(cfg, toy).setup()
    b.streams["dropout"] = np.random.default_rng(987654)
    a.fit(max_epochs=2)
    b.fit(max_epochs=2)
    assert [v for p, v in a.history if p == "kg"] == [v for p, v in b.history if p == "kg"]
    assert a.streams["triplet"].bit_generator.state == b.streams["triplet"].bit_generator.state
    assert [v for p, v in a.history if p == "seq"] != [v for p, v in b.history if p == "seq"]


def test_identical_seeds_give_identical_trajectories(toy):
    cfg = fast_config(epochs=2, dropout=0.2)
    a = Trainer(cfg, toy).setup().fit()
    b = Trainer(cfg, toy).setup().fit()
    assert a.history == b.history
    assert digest(a.model.tensors()) == digest(b.model.tensors())
    c = Trainer(fast_config(epochs=2, dropout=0.2, seed=18), toy).setup().fit()
    assert c.history != a.history


def test_early_stopping_keeps_best_validation_snapshot(toy):
    cfg = fast_config(epochs=30, patience=2, lr=3e-2)
    tr = Trainer(cfg, toy).setup().fit()
    scores = [m for _, m in tr.val_history]
    assert tr.best_metric == max(scores)
    assert tr.best_epoch == 1 + scores.index(max(scores))
    if tr.stopped:
        assert tr.bad_epochs == cfg.patience
        assert tr.epoch - tr.best_epoch == cfg.patience
    model = tr.finalize()
    assert tr.validate() == tr.best_metric
    assert model is tr.model


def test_model_restored_from_checkpoint_scores_identically(toy, tmp_path):
    tr = Trainer(fast_config(epochs=1), toy).setup().fit()
    save_checkpoint(tmp_path / "ck", tr.checkpoint())
    model = model_from_checkpoint(load_checkpoint(tmp_path / "ck"), toy)
    hist = [toy.log.history(u, "test") for u in range(5)]
    np.testing.assert_array_equal(model.score(hist), tr.model.score(hist))


def test_step_counts_per_epoch(toy):
    tr = Trainer(fast_config(), toy).setup()
    a, b = tr.steps_per_epoch()
    tr.run_epoch()
    assert [p for p, _ in tr.history].count("kg") == a
    assert [p for p, _ in tr.history].count("seq") == b
    assert tr.kg_opt.step_count == a and tr.seq_opt.step_count == b

import numpy as np
import pytest

from mccm import evalkit, harness, imgdata, lossfn, net
from mccm.harness import ExperimentConfig, GridSpec

from oracles import mann_whitney_auc

SMALL_NET = net.NetConfig(input_size=16, stem_channels=4, blocks=1, layers_per_block=1, growth=4)


@pytest.fixture(scope="module")
def toy():
    return {
        "pristine": imgdata.build_dataset("pristine", 40, 16, seed=1),
        "freqfake": imgdata.build_dataset("freqfake", 40, 16, seed=2),
        "spatialfake": imgdata.build_dataset("spatialfake", 40, 16, seed=3),
    }


def _splits(toy, gen="freqfake"):
    train = imgdata.concat_datasets([toy["pristine"].select("train"), toy[gen].select("train")])
    val = imgdata.concat_datasets([toy["pristine"].select("val"), toy[gen].select("val")])
    test = imgdata.concat_datasets([toy["pristine"].select("test"), toy[gen].select("test")])
    return train, val, test


def cfg(**kw):
    base = dict(net_cfg=SMALL_NET, epochs=2, batch_size=8, lr=1e-3)
    base.update(kw)
    return ExperimentConfig(**base)


def test_objective_grads_match_lossfn():
    rng = np.random.default_rng(0)
    probs = {h: rng.uniform(0.05, 0.95, 6) for h in net.HEADS}
    y = np.array([1, 0, 1, 0, 1, 0])
    loss, grads = harness.objective("dual_cmfl", probs, y, lossfn.LossConfig())
    g = lossfn.total_loss_grad(lossfn.HeadOutputs(probs["spatial"], probs["frequency"], probs["joint"]), y)
    np.testing.assert_array_equal(grads["joint"], g.r)
    loss, grads = harness.objective("dual_bce", probs, y, lossfn.LossConfig())
    assert set(grads) == {"joint"}
    np.testing.assert_allclose(loss, lossfn.ce(probs["joint"], y))
    _, grads = harness.objective("dual_bce", probs, y, lossfn.LossConfig(bce_all_heads=True))
    assert set(grads) == set(net.HEADS)
    _, grads = harness.objective("one_dft", probs, y, lossfn.LossConfig())
    assert set(grads) == {"frequency"}


def test_fusion_score_arithmetic():
    assert harness.fusion_score(0.8, 0.6) == pytest.approx(0.7)
    assert harness.fusion_score(0.3, 0.3) == 0.3


def test_fusion_auc_matches_pairwise_oracle():
    labels = [1, 1, 1, 0, 0, 0]
    a = evalkit.ScoreSet.from_arrays(labels, [0.9, 0.4, 0.6, 0.5, 0.2, 0.7], list("abcdef"))
    b = evalkit.ScoreSet.from_arrays(labels[::-1], [0.1, 0.3, 0.8, 0.7, 0.5, 0.6], list("fedcba"))
    fused = harness.fuse_scoresets(a, b)
    assert fused.ids == a.ids
    expected = [(0.9 + 0.6) / 2, (0.4 + 0.5) / 2, (0.6 + 0.7) / 2, (0.5 + 0.8) / 2, (0.2 + 0.3) / 2, (0.7 + 0.1) / 2]
    np.testing.assert_allclose(fused.scores, expected)
    assert evalkit.evaluate(fused).auc == pytest.approx(mann_whitney_auc(labels, expected), abs=1e-12)


def test_fuse_rejects_mismatch():
    a = evalkit.ScoreSet.from_arrays([1, 0], [0.1, 0.2], ["a", "b"])
    with pytest.raises(ValueError):
        harness.fuse_scoresets(a, evalkit.ScoreSet.from_arrays([1, 0], [0.1, 0.2], ["a", "c"]))
    with pytest.raises(ValueError):
        harness.fuse_scoresets(a, evalkit.ScoreSet.from_arrays([0, 0], [0.1, 0.2], ["a", "b"]))


def test_config_validation_and_roundtrip():
    with pytest.raises(ValueError):
        ExperimentConfig(protocol="III")
    with pytest.raises(ValueError):
        ExperimentConfig(model_variant="fusion").network_config()
    c = cfg(model_variant="one_dft", seed=4)
    assert c.network_config().mode == "dft_only" and c.network_config().seed == 4
    assert ExperimentConfig.from_dict(c.to_dict()) == c


def test_training_deterministic_and_learns(toy):
    train, val, _ = _splits(toy)
    c = cfg(model_variant="dual_cmfl", epochs=5)
    a = harness.train_model(c, train, val)
    b = harness.train_model(c, train, val)
    assert a.history == b.history
    assert a.best_epoch == min(range(5), key=lambda e: (a.history[e][2], e))
    assert a.history[-1][1] < np.log(2.0)
    assert a.history_csv().splitlines()[0] == "epoch,train_loss,val_loss"


def test_micro_batch_does_not_change_result(toy):
    train, val, _ = _splits(toy)
    a = harness.train_model(cfg(model_variant="one_rgb", epochs=1, micro_batch=8), train, val)
    b = harness.train_model(cfg(model_variant="one_rgb", epochs=1, micro_batch=3), train, val)
    for k in a.best_state.params:
        np.testing.assert_allclose(a.best_state.params[k], b.best_state.params[k], rtol=1e-9, atol=1e-12)


def test_flip_and_protocol_two_counters(toy):
    train, val, _ = _splits(toy)
    r1 = harness.train_model(cfg(model_variant="one_rgb", epochs=1), train, val)
    assert not any(k.startswith("aug_") for k in r1.counters)
    assert r1.counters["flip_0"] > 0 and r1.counters["flip_1"] > 0
    r2 = harness.train_model(cfg(model_variant="one_rgb", epochs=1, protocol="II"), train, val)
    assert r2.counters["aug_0"] + r2.counters["aug_1"] == len(train)


def test_training_needs_both_classes(toy):
    train, val, _ = _splits(toy)
    with pytest.raises(ValueError):
        harness.train_model(cfg(), toy["pristine"].select("train"), val)


def test_evaluation_augmentation_shared_and_repeatable(toy):
    train, val, test = _splits(toy)
    s1 = harness.train_model(cfg(model_variant="one_rgb", epochs=1, seed=0), train, val).best_state
    s2 = harness.train_model(cfg(model_variant="one_dft", epochs=1, seed=1), train, val).best_state
    imgs_a = harness.augmented_images(test, 7)
    imgs_b = harness.augmented_images(test, 7)
    assert harness.inputs_digest(imgs_a) == harness.inputs_digest(imgs_b)
    assert harness.inputs_digest(imgs_a) != harness.inputs_digest(harness.augmented_images(test, None))
    first = evalkit.scores_to_csv(harness.evaluate_model(s1, test, 7))
    assert first == evalkit.scores_to_csv(harness.evaluate_model(s1, test, 7))
    fused = harness.evaluate_model((s1, s2), test, 7)
    direct = harness.fusion_score(harness.evaluate_model(s1, test, 7).scores, harness.evaluate_model(s2, test, 7).scores)
    np.testing.assert_array_equal(fused.scores, direct)


def test_grid_cell_counting():
    cells = harness.grid_cells(["freqfake", "spatialfake"], "II", harness.VARIANTS, [0])
    assert len(cells) == 20
    assert len(harness.grid_cells(["freqfake", "spatialfake"], "I", harness.VARIANTS, [0, 1, 2])) == 30


def test_leave_one_out_grid_and_resume(toy, tmp_path):
    spec = GridSpec(toy, cfg(epochs=1), seeds=(0,), eval_seed=3, out_dir=tmp_path)
    reports = harness.run_leave_one_out(spec)
    assert len(reports) == 10
    keys = {(r.meta["variant"], r.meta["train_gen"], r.meta["test_gen"]) for r in reports}
    assert ("fusion", "freqfake", "spatialfake") in keys
    assert all(r.meta["train_gen"] != r.meta["test_gen"] for r in reports)
    # every test cell of a training cell shares the pristine test images
    scores = evalkit.read_scores(tmp_path / "cells/freqfake/seed0/one_rgb/scores_spatialfake_none.csv")
    pristine_ids = [i for i, y in zip(scores.ids, scores.labels) if y == 1]
    assert pristine_ids == toy["pristine"].select("test").ids

    ckpt = tmp_path / "cells/freqfake/seed0/dual_cmfl/model.ckpt"
    stamp = ckpt.stat().st_mtime_ns
    again = harness.run_leave_one_out(spec)
    assert ckpt.stat().st_mtime_ns == stamp
    assert [r.auc for r in again] == [r.auc for r in reports]
    assert evalkit.report_table(again) == evalkit.report_table(reports)

    # a tampered artifact forces that variant to rerun
    scores_file = tmp_path / "cells/freqfake/seed0/one_dft/scores_spatialfake_none.csv"
    scores_file.write_text(scores_file.read_text().replace("0.", "1.", 1))
    third = harness.run_leave_one_out(spec)
    assert [r.auc for r in third] == [r.auc for r in reports]


def test_protocol_two_grid_has_both_aug_modes(toy):
    spec = GridSpec({k: toy[k] for k in toy}, cfg(epochs=1, protocol="II"),
                    variants=("one_rgb", "one_dft", "fusion"), seeds=(0,))
    reports = harness.run_leave_one_out(spec)
    assert {r.meta["aug"] for r in reports} == {"none", "with"}
    assert len(reports) == 2 * 2 * 3


def test_grid_needs_two_fakes(toy):
    with pytest.raises(ValueError):
        harness.run_leave_one_out(GridSpec({"pristine": toy["pristine"], "freqfake": toy["freqfake"]}, cfg()))


def test_best_value_recomputes(toy):
    train, val, _ = _splits(toy)
    c = cfg(model_variant="dual_bce", epochs=3)
    res = harness.train_model(c, train, val)
    again = harness.validation_loss(res.best_state, "dual_bce", harness.augmented_images(val, None), val.labels,
                                    c.loss_cfg)
    assert abs(again - res.best_state.best_value) <= 1e-12


def test_fusion_leaves_inputs_untouched(toy, tmp_path):
    import shutil

    spec = GridSpec(toy, cfg(epochs=1), variants=("one_rgb", "one_dft", "fusion"), seeds=(0,), out_dir=tmp_path)
    harness.run_leave_one_out(spec)
    cell = tmp_path / "cells/spatialfake/seed0"
    before = {v: (cell / v / "model.ckpt").read_bytes() for v in ("one_rgb", "one_dft")}
    shutil.rmtree(cell / "fusion")
    harness.run_leave_one_out(spec)
    assert (cell / "fusion" / "done.json").is_file()
    assert {v: (cell / v / "model.ckpt").read_bytes() for v in before} == before

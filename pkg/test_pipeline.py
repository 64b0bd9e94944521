"""Tests for training, inference with test-time shifting and the command line."""

import sys
import os
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import numpy as np
import pandas as pd
import pytest

from src.data.labels import ground_truth, segment_locations
from src.data.manifest import read_manifest
from src.data.synthetic import SynthConfig, synth_generate
from src.ensemble.bayes_opt import tune_weights
from src.evaluation.predictions import PredictionTable, read_predictions, write_predictions
from src.models.registry import build_model, family_config
from src.pipeline.cli import main
from src.pipeline.inference import infer, load_model, predict_table, score_segments, tta_shifts
from src.pipeline.trainer import (
    Adam, evaluate_split, finetune, learning_rate, loss_log_path, make_train_config, pretrain, segment_examples,
    select_best,
)
from src.tensor.core import Tensor
from src.utils.config import FULL_SCALE_CONFIGS
from src.utils.errors import ConfigError, FormatError, ShapeError
from src.utils.logging import logger

NETVLAD = {"clusters": 4, "hidden_size": 16}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthetic")
    synth_generate(SynthConfig(classes=5, videos=80, frames=20, visual_dim=8, audio_dim=4, seed=42), out)
    return read_manifest(out / "manifest.txt")


@pytest.fixture(scope="module")
def pretrained(dataset, tmp_path_factory):
    path = tmp_path_factory.mktemp("checkpoints") / "netvlad.sgv"
    config = make_train_config(family="netvlad", model=NETVLAD, batch_size=8, steps=30, frames=10,
                               learning_rate=1e-2, decay_examples=100)
    pretrain(dataset, config, path)
    return path


def test_learning_rate_schedule():
    config = make_train_config(learning_rate=1e-4, lr_decay=0.9, decay_examples=10000)
    assert learning_rate(config, 0) == 1e-4
    assert learning_rate(config, 10000) == pytest.approx(9e-5, rel=1e-12)
    assert learning_rate(config, 5000) == pytest.approx(1e-4 * 0.9 ** 0.5, rel=1e-12)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        make_train_config(learning_rate=0.0)
    with pytest.raises(ConfigError):
        make_train_config(lr_decay=1.5)
    assert make_train_config(pooling="attention", temperature=2.0).model_overrides() == {
        "pooling": "attention", "temperature": 2.0,
    }


def test_adam_first_step_moves_by_learning_rate():
    param = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    Adam([param]).step([np.array([0.5, -2.0])], lr=0.1)
    np.testing.assert_allclose(param.data, [0.9, -0.9], rtol=1e-6)


def test_loss_log_follows_schedule(pretrained):
    log = pd.read_csv(loss_log_path(pretrained), sep="\t")
    assert list(log.columns) == ["step", "examples", "lr", "loss"]
    assert len(log) == 30
    for row in log.itertuples(index=False):
        assert row.lr == pytest.approx(1e-2 * 0.9 ** (row.examples / 100), rel=1e-12)
    assert log["examples"].tolist() == [8 * step for step in range(30)]


def test_pretraining_reduces_loss(dataset, tmp_path):
    config = make_train_config(family="netvlad", model=NETVLAD, batch_size=8, steps=200, frames=10,
                               learning_rate=1e-2, decay_examples=1000)
    result = pretrain(dataset, config, tmp_path / "model.sgv")
    assert np.mean(result.losses[-10:]) < np.mean(result.losses[:10])


def test_checkpoint_round_trip_restores_predictions(dataset, pretrained):
    model = load_model(pretrained)
    sequences = dataset.load_features("test")
    labels = dataset.load_labels("test", sequences)
    first = predict_table(model, sequences, labels, top_k=100)
    again = predict_table(load_model(pretrained), sequences, labels, top_k=100)
    assert first.rankings == again.rankings


def test_tta_shift_range():
    assert tta_shifts(-1, 1) == [-1, 0, 1]
    assert tta_shifts(0, 0) == [0]
    with pytest.raises(ConfigError):
        tta_shifts(1, 0)


def score_inputs(dataset):
    sequences = dataset.load_features("test")
    labels = dataset.load_labels("test", sequences)
    return {seq.video_id: seq for seq in sequences}, segment_locations(labels)


def test_tta_averages_single_shift_runs(dataset, pretrained):
    model = load_model(pretrained)
    by_id, locations = score_inputs(dataset)
    combined = score_segments(model, by_id, locations, shifts=[-1, 0, 1])
    singles = [score_segments(model, by_id, locations, shifts=[shift]) for shift in (-1, 0, 1)]
    np.testing.assert_allclose(combined, sum(singles) / 3.0, rtol=0, atol=1e-12)
    assert np.array_equal(score_segments(model, by_id, locations, shifts=[0]), model.predict(
        np.stack([by_id[v].frames[s:s + 5] for v, s in locations])
    ))


def test_constant_model_is_unchanged_by_tta(dataset):
    model = build_model("netvlad", dataset.visual_dim, dataset.audio_dim, dataset.num_classes, NETVLAD)
    for tensor in model.parameters():
        tensor.data = np.zeros_like(tensor.data)
    by_id, locations = score_inputs(dataset)
    base = score_segments(model, by_id, locations)
    assert np.array_equal(score_segments(model, by_id, locations, shifts=[-2, -1, 0, 1, 2]), base)


def test_parallel_scoring_matches_serial(dataset, pretrained):
    model = load_model(pretrained)
    by_id, locations = score_inputs(dataset)
    serial = score_segments(model, by_id, locations, shifts=[-1, 0, 1], chunk_size=3)
    parallel = score_segments(model, by_id, locations, shifts=[-1, 0, 1], workers=4, chunk_size=3)
    assert np.array_equal(serial, parallel)


def test_infer_zero_range_equals_base_inference(dataset, pretrained, tmp_path):
    table = infer(pretrained, dataset, tmp_path / "pred.tsv", tta_min=0, tta_max=0, top_k=100)
    sequences = dataset.load_features("test")
    base = predict_table(load_model(pretrained), sequences, dataset.load_labels("test", sequences), top_k=100)
    assert table.rankings == base.rankings
    assert read_predictions(tmp_path / "pred.tsv").rankings == base.rankings


def test_segment_examples_mask_verdict_classes(dataset):
    sequences = dataset.load_features("finetune")
    labels = dataset.load_labels("finetune", sequences)
    frames, targets, mask, locations = segment_examples(labels, {s.video_id: s for s in sequences}, 5)
    assert frames.shape == (len(locations), 5, 12)
    assert mask.sum() == len({(l.video_id, l.start, l.class_id) for l in labels})
    assert np.all(targets <= mask)
    with pytest.raises(FormatError):
        segment_examples([], {}, 5)


def test_select_best_takes_first_argmax():
    assert select_best([(0, 0.5), (50, 0.7), (100, 0.7)]) == 1
    with pytest.raises(ConfigError):
        select_best([])


def test_finetune_keeps_best_holdout_checkpoint(dataset, pretrained, tmp_path):
    config = make_train_config(batch_size=8, steps=20, eval_every=5, learning_rate=1e-2, top_k=100)
    result = finetune(dataset, config, tmp_path / "fine.sgv", pretrained)
    assert [step for step, _ in result.history] == [0, 5, 10, 15, 20]
    assert result.best_map == max(value for _, value in result.history)
    assert result.best_map >= result.history[0][1]
    restored = load_model(tmp_path / "fine.sgv")
    assert evaluate_split(restored, dataset, "holdout", 100) == pytest.approx(result.best_map, abs=1e-12)


def test_finetune_rejects_mismatched_checkpoint(pretrained, tmp_path):
    other = synth_generate(SynthConfig(classes=3, videos=20, frames=20, visual_dim=8, audio_dim=4), tmp_path)
    with pytest.raises(FormatError):
        finetune(other, make_train_config(steps=1), tmp_path / "fine.sgv", pretrained)


def test_finetune_keeps_checkpoint_family_and_settings(dataset, pretrained, tmp_path):
    with pytest.raises(ConfigError):
        finetune(dataset, make_train_config(family="bert", steps=1), tmp_path / "bert.sgv", pretrained)
    messages = []
    handler = logger.add(messages.append, level="WARNING")
    try:
        finetune(dataset, make_train_config(model={"clusters": 7}, steps=1, batch_size=4, top_k=100),
                 tmp_path / "fine.sgv", pretrained)
    finally:
        logger.remove(handler)
    assert any("Ignoring model settings {'clusters': 7}" in str(message) for message in messages)
    assert load_model(tmp_path / "fine.sgv").config_dict()["clusters"] == NETVLAD["clusters"]


@pytest.mark.parametrize("split", [(4, 8, 5), (8, 4, 3)])
def test_infer_rejects_checkpoint_that_does_not_fit_manifest(pretrained, tmp_path, split):
    visual_dim, audio_dim, classes = split
    other = synth_generate(
        SynthConfig(classes=classes, videos=20, frames=20, visual_dim=visual_dim, audio_dim=audio_dim), tmp_path
    )
    with pytest.raises(FormatError):
        infer(pretrained, other, tmp_path / "pred.tsv")
    assert run_cli("infer", "--manifest", tmp_path / "manifest.txt", "--checkpoint", pretrained,
                   "--out", tmp_path / "pred.tsv") == 3
    assert not (tmp_path / "pred.tsv").exists()


def test_concat_pooling_runs_through_every_stage(dataset, tmp_path):
    bert = {"layers": 1, "heads": 2, "model_dim": 8, "ff_mult": 2}
    pretrain(dataset, make_train_config(family="bert", pooling="concat", model=bert, batch_size=4, steps=3,
                                        frames=10), tmp_path / "pre.sgv")
    result = finetune(dataset, make_train_config(batch_size=4, steps=2, eval_every=1, top_k=100),
                      tmp_path / "fine.sgv", tmp_path / "pre.sgv")
    assert [step for step, _ in result.history] == [0, 1, 2]
    table = infer(tmp_path / "fine.sgv", dataset, tmp_path / "pred.tsv", tta_min=-1, tta_max=1, top_k=100)
    assert load_model(tmp_path / "fine.sgv").fixed_length == 5
    assert sorted(table.classes) == list(range(dataset.num_classes))


def test_full_scale_configs_validate():
    for family in ("netvlad", "nextvlad_mix", "bert", "bert_cross"):
        assert family_config(family, FULL_SCALE_CONFIGS[family])


def run_cli(*args):
    return main([str(arg) for arg in args])


def test_cli_exit_codes(tmp_path, pretrained, dataset):
    assert run_cli() == 2
    assert run_cli("eval", "--predictions", tmp_path / "missing.tsv", "--truth", tmp_path / "t.tsv") == 3
    assert run_cli("infer", "--manifest", dataset.root + "/manifest.txt", "--checkpoint", pretrained,
                   "--out", tmp_path / "p.tsv", "--tta-min", 1, "--tta-max", 0) == 2
    assert run_cli("pretrain", "--manifest", tmp_path / "none.txt", "--out", tmp_path / "m.sgv") == 2
    assert run_cli("finetune", "--manifest", dataset.root + "/manifest.txt", "--out", tmp_path / "f.sgv") == 2
    assert run_cli("pretrain", "--manifest", dataset.root + "/manifest.txt", "--out", tmp_path / "c.sgv",
                   "--family", "bert", "--pooling", "concat", "--set", "max_len=16", "--steps", 1) == 2


def test_cli_maps_shape_errors_to_data_exit(monkeypatch, tmp_path, pretrained, dataset):
    def mismatched(*args, **kwargs):
        raise ShapeError("netvlad expects 10 features per frame, got 8")

    monkeypatch.setattr("src.pipeline.cli.infer", mismatched)
    assert run_cli("infer", "--manifest", dataset.root + "/manifest.txt", "--checkpoint", pretrained,
                   "--out", tmp_path / "p.tsv") == 3


def test_infer_seed_does_not_change_predictions(tmp_path, pretrained, dataset):
    manifest = dataset.root + "/manifest.txt"
    for seed, name in ((1, "a.tsv"), (7, "b.tsv")):
        assert run_cli("infer", "--manifest", manifest, "--checkpoint", pretrained, "--seed", seed,
                       "--tta-min", -1, "--tta-max", 1, "--out", tmp_path / name) == 0
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()


def test_cli_fuse_needs_every_model_in_weights_file(tmp_path):
    write_predictions(PredictionTable.from_scores(["v:0", "w:0"], np.array([[0.9], [0.1]])), tmp_path / "p.tsv")
    (tmp_path / "weights.tsv").write_text("other.tsv\t1\n")
    assert run_cli("fuse", "--predictions", tmp_path / "p.tsv", "--weights-file", tmp_path / "weights.tsv",
                   "--out", tmp_path / "fused.tsv") == 3
    (tmp_path / "weights.tsv").write_text("p.tsv\tone\n")
    assert run_cli("fuse", "--predictions", tmp_path / "p.tsv", "--weights-file", tmp_path / "weights.tsv",
                   "--out", tmp_path / "fused.tsv") == 3
    assert not (tmp_path / "fused.tsv").exists()


def test_cli_end_to_end(tmp_path):
    data = tmp_path / "data"
    assert run_cli("gen-data", "--out", data, "--classes", 4, "--videos", 40, "--frames", 20,
                   "--visual-dim", 6, "--audio-dim", 2) == 0
    manifest = data / "manifest.txt"
    assert run_cli("pretrain", "--manifest", manifest, "--out", tmp_path / "a.sgv", "--steps", 5,
                   "--batch-size", 4, "--frames", 8, "--set", "clusters=3", "--set", "hidden_size=8") == 0
    assert run_cli("finetune", "--manifest", manifest, "--checkpoint", tmp_path / "a.sgv",
                   "--out", tmp_path / "b.sgv", "--steps", 4, "--batch-size", 4, "--eval-every", 2) == 0
    assert run_cli("finetune", "--manifest", manifest, "--from-scratch", "--family", "nextvlad_mix",
                   "--set", "groups=2", "--set", "clusters=2", "--set", "hidden_size=16",
                   "--out", tmp_path / "c.sgv", "--steps", 2, "--batch-size", 4) == 0
    for name in ("b", "c"):
        assert run_cli("infer", "--manifest", manifest, "--checkpoint", tmp_path / f"{name}.sgv",
                       "--out", tmp_path / f"{name}.tsv", "--tta-min", -1, "--tta-max", 1, "--workers", 2) == 0
    assert run_cli("eval", "--predictions", tmp_path / "b.tsv", "--manifest", manifest, "--per-class") == 0
    assert run_cli("tune-weights", "--predictions", tmp_path / "b.tsv", tmp_path / "c.tsv",
                   "--manifest", manifest, "--split", "test", "--out", tmp_path / "weights.tsv",
                   "--iters", 3, "--init-samples", 2, "--fused-out", tmp_path / "tuned.tsv") == 0
    assert run_cli("fuse", "--predictions", tmp_path / "b.tsv", tmp_path / "c.tsv",
                   "--weights-file", tmp_path / "weights.tsv", "--out", tmp_path / "fused.tsv") == 0
    fused, tuned = read_predictions(tmp_path / "fused.tsv"), read_predictions(tmp_path / "tuned.tsv")
    for class_id in tuned.classes:
        assert [s for s, _ in fused.ranking(class_id)] == [s for s, _ in tuned.ranking(class_id)]

    assert run_cli("fuse", "--predictions", tmp_path / "b.tsv", "--out", tmp_path / "single.tsv") == 0
    single, original = read_predictions(tmp_path / "single.tsv"), read_predictions(tmp_path / "b.tsv")
    for class_id in original.classes:
        assert [s for s, _ in single.ranking(class_id)] == [s for s, _ in original.ranking(class_id)]


def pipeline_bytes(root):
    data = root / "data"
    run_cli("gen-data", "--out", data, "--classes", 4, "--videos", 30, "--frames", 16,
            "--visual-dim", 6, "--audio-dim", 2)
    run_cli("pretrain", "--manifest", data / "manifest.txt", "--out", root / "m.sgv", "--steps", 5,
            "--batch-size", 4, "--frames", 8, "--set", "clusters=3", "--set", "hidden_size=8")
    run_cli("infer", "--manifest", data / "manifest.txt", "--checkpoint", root / "m.sgv",
            "--out", root / "p.tsv", "--tta-min", -1, "--tta-max", 1)
    return (root / "m.sgv").read_bytes(), (root / "p.tsv").read_bytes()


def test_pipeline_is_byte_deterministic(tmp_path):
    assert pipeline_bytes(tmp_path / "one") == pipeline_bytes(tmp_path / "two")


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    out = tmp_path_factory.mktemp("benchmark")
    synth_generate(SynthConfig(seed=42, classes=20, videos=500), out)
    return read_manifest(out / "manifest.txt")


@pytest.mark.slow
def test_fine_tuning_improves_on_pretraining(benchmark, tmp_path):
    pre = make_train_config(family="netvlad", steps=400, learning_rate=3e-3, decay_examples=5000)
    pretrain(benchmark, pre, tmp_path / "pre.sgv")
    holdout_pre = evaluate_split(load_model(tmp_path / "pre.sgv"), benchmark, "holdout", 100_000)

    tune = make_train_config(family="netvlad", steps=150, eval_every=25, learning_rate=3e-3,
                             segment_fraction=0.1, top_k=100_000)
    fine = finetune(benchmark, tune, tmp_path / "fine.sgv", tmp_path / "pre.sgv")
    scratch = finetune(benchmark, tune, tmp_path / "scratch.sgv")
    assert fine.history[0][1] == pytest.approx(holdout_pre, abs=1e-12)
    assert fine.best_map > holdout_pre
    assert fine.best_map > scratch.best_map


@pytest.mark.slow
def test_tuned_ensemble_is_at_least_the_best_single_model(benchmark, tmp_path):
    tables = []
    for family in ("netvlad", "nextvlad_mix"):
        config = make_train_config(family=family, steps=300, learning_rate=3e-3, decay_examples=5000)
        pretrain(benchmark, config, tmp_path / f"{family}.sgv")
        tables.append(infer(tmp_path / f"{family}.sgv", benchmark, tmp_path / f"{family}.tsv", split="holdout"))
    truth = ground_truth(benchmark.load_labels("holdout"))
    singles = [table.map_at_k(truth, 100_000) for table in tables]
    result = tune_weights(tables, truth, k=100_000, n_init=5, n_iter=10, seed=42)
    assert result.standalone == pytest.approx(singles, abs=1e-12)
    assert result.map >= max(singles) - 1e-12
    assert sum(result.weights) == pytest.approx(1.0)


@pytest.mark.slow
def test_shift_augmentation_does_not_hurt(benchmark, tmp_path):
    config = make_train_config(family="netvlad", steps=300, learning_rate=3e-3, decay_examples=5000)
    pretrain(benchmark, config, tmp_path / "pre.sgv")
    finetune(benchmark, make_train_config(steps=100, eval_every=25, learning_rate=3e-3),
             tmp_path / "fine.sgv", tmp_path / "pre.sgv")
    base = infer(tmp_path / "fine.sgv", benchmark, tmp_path / "base.tsv", split="holdout")
    shifted = infer(tmp_path / "fine.sgv", benchmark, tmp_path / "tta.tsv", split="holdout", tta_min=-1, tta_max=1)
    truth = ground_truth(benchmark.load_labels("holdout"))
    assert shifted.map_at_k(truth, 100_000) >= base.map_at_k(truth, 100_000) - 0.002
    assert shifted.rankings != base.rankings

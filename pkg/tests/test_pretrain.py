"""Pre-training loop: schedule, optimizer recurrence, init, determinism."""

import json
import math

import pytest
import torch

from rssl.augment import SslRecipe
from rssl.checkpoint import load_checkpoint, save_checkpoint, state_checksum
from rssl.errors import ConfigurationError, TrainingDiverged
from rssl.models import (
    BACKBONE_TOY,
    BackboneSpec,
    EncoderSpec,
    PredictorSpec,
    build_backbone,
)
from rssl.pretrain import (
    INIT_EXTERNAL,
    MomentumSGD,
    PretrainConfig,
    extract_backbone_state,
    init_model,
    load_backbone_weights,
    lr_at,
    pretrain,
)
from synthdata import two_cluster_dataset

ENC = EncoderSpec(
    backbone=BackboneSpec(kind=BACKBONE_TOY, input_size=16, feature_dim=16,
                          conv_channels=(8,)),
    proj_hidden=(16, 16),
    proj_out_dim=8,
)
PRED = PredictorSpec(in_dim=8, hidden=8, out_dim=8)
NORM = ((0.5, 0.5, 0.5), (0.25, 0.25, 0.25))
RECIPE = SslRecipe(crop_size=16, crop_scale_range=(0.5, 1.0), blur_prob=0.0,
                   color_jitter_strength=2.0, color_jitter_prob=0.9,
                   grayscale_prob=0.5, normalization=NORM)


def short_config(**kw):
    base = dict(batch_size=8, base_lr=0.05, weight_decay=1e-5,
                total_iterations=10, seed=0)
    base.update(kw)
    return PretrainConfig(**base)


class TestSchedule:
    def test_default_milestones_at_60_and_80_percent(self):
        config = PretrainConfig(total_iterations=100_000)
        assert config.resolved_milestones() == (60_000, 80_000)
        assert lr_at(config, 0) == pytest.approx(0.05)
        assert lr_at(config, 59_999) == pytest.approx(0.05)
        assert lr_at(config, 60_000) == pytest.approx(0.005)
        assert lr_at(config, 79_999) == pytest.approx(0.005)
        assert lr_at(config, 80_000) == pytest.approx(0.0005)
        assert lr_at(config, 99_999) == pytest.approx(0.0005)

    def test_explicit_milestones_and_gamma(self):
        config = PretrainConfig(total_iterations=100, milestones=(10, 20, 30),
                                gamma=0.5, base_lr=1.0)
        assert [lr_at(config, i) for i in (0, 10, 20, 30, 99)] == \
            [1.0, 0.5, 0.25, 0.125, 0.125]

    def test_unsorted_milestones_rejected(self):
        with pytest.raises(ConfigurationError):
            PretrainConfig(milestones=(20, 10))

    @pytest.mark.parametrize("kw", [
        dict(batch_size=1),
        dict(total_iterations=0),
        dict(base_lr=0.0),
        dict(momentum=1.0),
        dict(weight_decay=-0.1),
        dict(gamma=0.0),
        dict(init="warm"),
        dict(init=INIT_EXTERNAL),  # missing init_weights
    ])
    def test_config_validation(self, kw):
        with pytest.raises(ConfigurationError):
            PretrainConfig(**kw)


class TestMomentumSGD:
    def test_two_step_hand_recurrence(self):
        p = torch.nn.Parameter(torch.tensor([1.0]))
        opt = MomentumSGD([("p", p)], momentum=0.9, weight_decay=0.1)

        p.grad = torch.tensor([0.5])
        opt.step(lr=0.1)
        # v1 = 0.5 + 0.1*1.0 = 0.6; p = 1.0 - 0.06
        assert p.item() == pytest.approx(0.94, abs=1e-7)

        p.grad = torch.tensor([0.5])
        opt.step(lr=0.1)
        # g = 0.5 + 0.1*0.94 = 0.594; v2 = 0.9*0.6 + 0.594 = 1.134
        assert p.item() == pytest.approx(0.94 - 0.1134, abs=1e-7)

    def test_zero_momentum_zero_decay_is_plain_sgd(self):
        p = torch.nn.Parameter(torch.tensor([2.0]))
        opt = MomentumSGD([("p", p)], momentum=0.0, weight_decay=0.0)
        p.grad = torch.tensor([3.0])
        opt.step(lr=0.5)
        assert p.item() == pytest.approx(0.5)

    def test_frozen_parameters_are_ignored(self):
        a = torch.nn.Parameter(torch.tensor([1.0]))
        b = torch.nn.Parameter(torch.tensor([1.0]), requires_grad=False)
        opt = MomentumSGD([("a", a), ("b", b)], momentum=0.9, weight_decay=0.0)
        assert [n for n, _ in opt.params] == ["a"]

    def test_zero_grad_clears(self):
        p = torch.nn.Parameter(torch.tensor([1.0]))
        p.grad = torch.tensor([1.0])
        opt = MomentumSGD([("p", p)], momentum=0.0, weight_decay=0.0)
        opt.zero_grad()
        assert p.grad is None

    def test_non_finite_gradient_raises(self):
        p = torch.nn.Parameter(torch.tensor([1.0]))
        opt = MomentumSGD([("p", p)], momentum=0.0, weight_decay=0.0)
        p.grad = torch.tensor([float("inf")])
        with pytest.raises(TrainingDiverged) as err:
            opt.step(lr=0.1, iteration=17)
        assert err.value.iteration == 17


class TestInit:
    def test_same_seed_same_weights(self):
        a = init_model(short_config(seed=5), ENC, PRED)
        b = init_model(short_config(seed=5), ENC, PRED)
        assert state_checksum(a.state_dict()) == state_checksum(b.state_dict())

    def test_different_seed_different_weights(self):
        a = init_model(short_config(seed=5), ENC, PRED)
        b = init_model(short_config(seed=6), ENC, PRED)
        assert state_checksum(a.state_dict()) != state_checksum(b.state_dict())

    def test_external_init_replaces_backbone_only(self, tmp_path):
        donor = init_model(short_config(seed=9), ENC, PRED)
        path = tmp_path / "donor.rssl"
        save_checkpoint(path, donor.state_dict(), ENC, PRED, iteration=0)

        config = short_config(seed=5, init=INIT_EXTERNAL, init_weights=str(path))
        model = init_model(config, ENC, PRED)
        fresh = init_model(short_config(seed=5), ENC, PRED)

        donor_backbone = extract_backbone_state(donor.state_dict())
        for key, tensor in model.encoder.backbone.state_dict().items():
            assert torch.equal(tensor, donor_backbone[key])
        assert state_checksum(model.predictor.state_dict()) == \
            state_checksum(fresh.predictor.state_dict())
        assert state_checksum(model.encoder.projector.state_dict()) == \
            state_checksum(fresh.encoder.projector.state_dict())

    def test_external_init_topology_mismatch(self, tmp_path):
        donor = init_model(short_config(), ENC, PRED)
        path = tmp_path / "donor.rssl"
        save_checkpoint(path, donor.state_dict(), ENC, PRED, iteration=0)

        wide = EncoderSpec(
            backbone=BackboneSpec(kind=BACKBONE_TOY, input_size=16, feature_dim=16,
                                  conv_channels=(12,)),
            proj_hidden=(16, 16), proj_out_dim=8)
        config = short_config(init=INIT_EXTERNAL, init_weights=str(path))
        with pytest.raises(ConfigurationError, match="shape"):
            init_model(config, wide, PRED)

    def test_extract_backbone_requires_backbone_keys(self):
        with pytest.raises(ConfigurationError):
            extract_backbone_state({"predictor.layers.0.weight": torch.zeros(1)})

    def test_load_backbone_weights_missing_key(self):
        backbone = build_backbone(ENC.backbone)
        state = {"encoder.backbone.features.0.weight": torch.zeros(8, 3, 3, 3)}
        with pytest.raises(ConfigurationError, match="missing"):
            load_backbone_weights(backbone, state)


class TestPretrainLoop:
    def test_trace_is_deterministic_up_to_wall_time(self):
        dataset = two_cluster_dataset(n_per_class=16, seed=1)
        runs = []
        for _ in range(2):
            model = init_model(short_config(total_iterations=8), ENC, PRED)
            result = pretrain(model, dataset, short_config(total_iterations=8),
                              RECIPE, ENC, PRED)
            runs.append([{k: v for k, v in row.items() if k != "wall_ms"}
                         for row in result.trace])
        assert runs[0] == runs[1]

    def test_trace_rows_are_complete_and_bounded(self):
        dataset = two_cluster_dataset(n_per_class=16, seed=1)
        config = short_config(total_iterations=6)
        result = pretrain(init_model(config, ENC, PRED), dataset, config,
                          RECIPE, ENC, PRED)
        assert [row["iteration"] for row in result.trace] == list(range(6))
        for row in result.trace:
            assert set(row) == {"iteration", "lr", "loss", "collapse_stat", "wall_ms"}
            assert -1.0 - 1e-6 <= row["loss"] <= 1.0 + 1e-6
            assert row["lr"] == pytest.approx(lr_at(config, row["iteration"]))
            assert row["collapse_stat"] >= 0.0

    def test_loss_decreases_over_training(self):
        dataset = two_cluster_dataset(n_per_class=64, seed=11)
        for seed in (0, 1, 2):
            config = PretrainConfig(batch_size=32, base_lr=0.1, weight_decay=1e-5,
                                    total_iterations=500, seed=seed)
            result = pretrain(init_model(config, ENC, PRED), dataset, config,
                              RECIPE, ENC, PRED)
            losses = [row["loss"] for row in result.trace]
            head = sum(losses[:50]) / 50
            tail = sum(losses[-50:]) / 50
            assert tail < head

    def test_checkpoint_cadence_and_final(self, tmp_path):
        dataset = two_cluster_dataset(n_per_class=16, seed=1)
        config = short_config(total_iterations=10, checkpoint_every=4)
        result = pretrain(init_model(config, ENC, PRED), dataset, config,
                          RECIPE, ENC, PRED, out_dir=tmp_path, dataset_name="Synth")
        names = [p.name for p in result.checkpoint_paths]
        assert names == ["checkpoint_00000004.rssl", "checkpoint_00000008.rssl",
                         "checkpoint_final.rssl"]
        final = load_checkpoint(result.final_checkpoint)
        assert final.iteration == 10
        assert final.dataset == "Synth"
        assert final.content_hash == result.content_hash
        mid = load_checkpoint(tmp_path / "checkpoint_00000004.rssl")
        assert mid.iteration == 4

    def test_trace_file_matches_result(self, tmp_path):
        dataset = two_cluster_dataset(n_per_class=16, seed=1)
        config = short_config(total_iterations=5)
        trace_path = tmp_path / "trace.jsonl"
        result = pretrain(init_model(config, ENC, PRED), dataset, config,
                          RECIPE, ENC, PRED, trace_path=trace_path)
        with open(trace_path) as f:
            rows = [json.loads(line) for line in f]
        assert rows == result.trace

    def test_empty_dataset_rejected(self):
        config = short_config()
        model = init_model(config, ENC, PRED)
        with pytest.raises(ConfigurationError):
            pretrain(model, [], config, RECIPE, ENC, PRED)

    def test_divergence_reports_context(self):
        dataset = two_cluster_dataset(n_per_class=16, seed=1)
        config = short_config(total_iterations=3)
        model = init_model(config, ENC, PRED)
        with torch.no_grad():
            next(model.parameters()).fill_(float("nan"))
        with pytest.raises(TrainingDiverged) as err:
            pretrain(model, dataset, config, RECIPE, ENC, PRED)
        assert err.value.iteration == 0
        assert len(err.value.batch_ids) == config.batch_size
        assert err.value.collapse_stat is not None

"""Unit tests for the staged training loop, parameter isolation and the ablation matrix."""
import csv

import numpy as np
import pytest
import torch

import src.training as training
from src.checkpoint import module_checksum
from src.config import DTYPE
from src.dataset import GenConfig, generate_world, sample_instances, split_bundles
from src.errors import (
    ConfigurationError,
    DivergenceError,
    InvariantViolationError,
    PreconditionError,
)
from src.prompting import FUSED, TEXT_ONLY, VOCAB, HybridTokenSequence, PromptMode, Provenance
from src.fusion import FusionConfig
from src.tinylm import BaseLM, LMConfig, build_vocab, pretraining_corpus
from src.training import (
    AblationAxes,
    AblationContext,
    ModelState,
    StageData,
    StageReport,
    TrainConfig,
    ablation_mode,
    parse_modality_subset,
    run_ablation_matrix,
    run_joint,
    run_stage1,
    run_stage2,
    warmup_factor,
    write_losses,
)


@pytest.fixture
def stage_data(small_world, small_splits, small_features):
    train = sample_instances(small_world, small_splits.train, 4, np.random.default_rng(1), n_samples=6)
    return StageData(small_world, small_features, train)


def make_config(stage="S1", **overrides):
    settings = dict(
        stage=stage,
        sample_count=6,
        batch_size=2,
        max_epochs=1,
        peak_lr=1e-2,
        warmup_ratio=0.0,
        n_candidates=4,
        prompt_mode=PromptMode("fusion", "soft"),
        max_steps=3,
        seed=0,
    )
    settings.update(overrides)
    return TrainConfig(**settings)


class TestWarmup:
    """Learning-rate multiplier."""

    @pytest.mark.unit
    @pytest.mark.parametrize("step,expected", [(0, 0.0), (5, 0.5), (10, 1.0), (50, 1.0), (99, 1.0)])
    def test_linear_then_constant(self, step, expected):
        assert warmup_factor(step, 100, 0.1) == pytest.approx(expected)

    @pytest.mark.unit
    def test_no_warmup(self):
        assert warmup_factor(0, 100, 0.0) == 1.0

    @pytest.mark.unit
    def test_short_runs_still_warm_up(self):
        assert warmup_factor(0, 3, 0.1) == 0.0
        assert warmup_factor(1, 3, 0.1) == 1.0

    @pytest.mark.unit
    def test_logged_lr_follows_schedule(self, tiny_state, stage_data):
        config = make_config(warmup_ratio=0.5, max_steps=None, max_epochs=2, batch_size=3)
        _, report = run_stage1(tiny_state, stage_data, config)
        lrs = [entry["lr"] for entry in report.losses]
        assert lrs == pytest.approx([0.0, 5e-3, 1e-2, 1e-2])


class TestTrainConfig:
    """Stage configuration checks."""

    @pytest.mark.unit
    def test_hybrid_stages_reject_text_only(self):
        with pytest.raises(ConfigurationError, match="hybrid"):
            make_config("S2", prompt_mode=TEXT_ONLY).validate()

    @pytest.mark.unit
    def test_stage1_always_uses_text_only(self):
        assert make_config("S1").effective_mode == TEXT_ONLY
        assert make_config("S2").effective_mode == PromptMode("fusion", "soft")

    @pytest.mark.unit
    def test_unknown_optimizer(self):
        with pytest.raises(ConfigurationError, match="optimizer"):
            make_config(optimizer="lion").validate()


class TestModelState:
    """Parameter groups of the trainable model."""

    @pytest.mark.unit
    def test_requires_frozen_base(self, tiny_vocab, fusion_config):
        base = BaseLM(LMConfig(vocab_size=len(tiny_vocab), d_model=16, n_layers=1, n_heads=2, context_length=32))
        with pytest.raises(PreconditionError, match="frozen"):
            ModelState.initial(base, tiny_vocab, fusion_config)

    @pytest.mark.unit
    def test_width_mismatch(self, tiny_base, tiny_vocab, fusion_config):
        fusion_config.lm_dim = 8
        with pytest.raises(ConfigurationError):
            ModelState.initial(tiny_base, tiny_vocab, fusion_config)

    @pytest.mark.unit
    def test_clone_is_independent(self, tiny_state):
        clone = tiny_state.clone()
        with torch.no_grad():
            clone.adapters.query[0].lora_b.add_(1.0)
        assert module_checksum(clone.adapters) != module_checksum(tiny_state.adapters)
        assert clone.base is tiny_state.base

    @pytest.mark.unit
    def test_separator_counts_as_fusion_group(self, tiny_state):
        before = tiny_state.group_checksums()
        with torch.no_grad():
            tiny_state.separator.vec.add_(1.0)
        after = tiny_state.group_checksums()
        assert after["fusion"] != before["fusion"]
        assert after["lora"] == before["lora"]


class TestStageIsolation:
    """Each stage touches only its own parameter groups."""

    @pytest.mark.unit
    def test_stage1_updates_adapters_only(self, tiny_state, stage_data):
        _, report = run_stage1(tiny_state, stage_data, make_config("S1"))
        before, after = report.checksums_before, report.checksums_after
        assert after["lora"] != before["lora"]
        assert after["phi"] == before["phi"]
        assert after["fusion"] == before["fusion"]
        assert len(report.losses) == 3

    @pytest.mark.unit
    def test_stage2_updates_fusion_only(self, tiny_state, stage_data):
        separator_before = module_checksum(tiny_state.separator)
        _, report = run_stage2(tiny_state, stage_data, make_config("S2"))
        before, after = report.checksums_before, report.checksums_after
        assert after["fusion"] != before["fusion"]
        assert after["phi"] == before["phi"]
        assert after["lora"] == before["lora"]
        assert module_checksum(tiny_state.separator) != separator_before

    @pytest.mark.unit
    def test_stage2_without_soft_separator_leaves_it_alone(self, tiny_state, stage_data):
        config = make_config("S2", prompt_mode=PromptMode("fusion", "none"))
        names = [name for name, _ in training._trainable(tiny_state, config)]
        assert not any(name.startswith("separator.") for name in names)
        separator_before = module_checksum(tiny_state.separator)
        run_stage2(tiny_state, stage_data, config)
        assert module_checksum(tiny_state.separator) == separator_before

    @pytest.mark.unit
    def test_joint_updates_both(self, tiny_state, stage_data):
        _, _, report = run_joint(tiny_state, stage_data, make_config("JOINT"))
        before, after = report.checksums_before, report.checksums_after
        assert after["lora"] != before["lora"]
        assert after["fusion"] != before["fusion"]
        assert after["phi"] == before["phi"]

    @pytest.mark.unit
    def test_base_survives_stage1_then_stage2(self, tiny_state, stage_data):
        phi = tiny_state.base.checksum()
        _, first = run_stage1(tiny_state, stage_data, make_config("S1", max_steps=None, max_epochs=2))
        _, second = run_stage2(tiny_state, stage_data, make_config("S2", max_steps=None, max_epochs=2))
        assert len(first.losses) == len(second.losses) == 6
        assert first.checksums_before["phi"] == first.checksums_after["phi"] == phi
        assert second.checksums_before["phi"] == second.checksums_after["phi"] == phi
        assert second.checksums_before["lora"] == first.checksums_after["lora"] == second.checksums_after["lora"]
        assert tiny_state.base.checksum() == phi

    @pytest.mark.unit
    def test_stage2_lowers_hybrid_prompt_loss(self, tiny_state, stage_data):
        run_stage1(tiny_state, stage_data, make_config("S1", max_steps=None, max_epochs=3))
        _, report = run_stage2(tiny_state, stage_data, make_config("S2", max_steps=None, max_epochs=8))
        epoch_losses = report.epoch_mean_losses()
        assert len(epoch_losses) == 8
        assert epoch_losses[-1] < epoch_losses[0]

    @pytest.mark.unit
    def test_zero_steps_change_nothing(self, tiny_state, stage_data):
        _, report = run_stage1(tiny_state, stage_data, make_config("S1", max_steps=0))
        assert report.losses == []
        assert report.checksums_after == report.checksums_before

    @pytest.mark.unit
    def test_parameters_left_without_gradients(self, tiny_state, stage_data):
        run_joint(tiny_state, stage_data, make_config("JOINT", max_steps=1))
        assert not any(p.requires_grad for p in tiny_state.adapters.parameters())
        assert not any(p.requires_grad for p in tiny_state.fusion.parameters())

    @pytest.mark.unit
    def test_frozen_group_change_is_fatal(self):
        before = {"phi": "a", "lora": "b", "fusion": "c"}
        with pytest.raises(InvariantViolationError, match="fusion"):
            training._check_frozen("S1", before, {"phi": "a", "lora": "x", "fusion": "d"})


class TestStageFailures:
    """Purity and divergence checks."""

    @pytest.mark.unit
    def test_stage1_rejects_non_vocabulary_positions(self, tiny_state, stage_data, mocker):
        tainted = HybridTokenSequence(
            embeddings=torch.zeros(2, 16, dtype=DTYPE),
            provenance=[Provenance(VOCAB, token_id=2), Provenance(FUSED, item_id=0)],
            rendered_template="",
        )
        mocker.patch("src.training.build_prompt", return_value=(tainted, [tiny_state.vocab.letter_id(0), tiny_state.vocab.eos_id]))
        with pytest.raises(InvariantViolationError, match="non-vocabulary"):
            run_stage1(tiny_state, stage_data, make_config("S1"))

    @pytest.mark.unit
    def test_non_finite_loss(self, tiny_state, stage_data, mocker):
        mocker.patch(
            "src.training.answer_loss",
            return_value=torch.tensor(float("nan"), dtype=DTYPE, requires_grad=True),
        )
        with pytest.raises(DivergenceError) as excinfo:
            run_stage1(tiny_state, stage_data, make_config("S1"))
        assert excinfo.value.step == 0

    @pytest.mark.unit
    def test_no_training_samples(self, tiny_state, small_world):
        with pytest.raises(PreconditionError):
            run_stage1(tiny_state, StageData(small_world, None, []), make_config("S1"))


class TestStageLoop:
    """Determinism, early stopping and loss logging."""

    @pytest.mark.unit
    def test_same_seed_same_run(self, tiny_base, tiny_vocab, fusion_config, stage_data):
        reports = []
        for _ in range(2):
            state = ModelState.initial(tiny_base, tiny_vocab, fusion_config, seed=0, lora_rank=2, lora_alpha=4.0)
            reports.append(run_joint(state, stage_data, make_config("JOINT"))[2])
        assert reports[0].to_dict() == reports[1].to_dict()

    @pytest.mark.unit
    def test_early_stopping_restores_best_epoch(self, tiny_state, stage_data, mocker):
        scores = [0.5, 0.25, 0.25, 0.9]
        seen = []

        def fake_hit_rate(state, data, mode):
            seen.append(module_checksum(state.adapters))
            return scores[len(seen) - 1]

        mocker.patch("src.training.validation_hit_rate", side_effect=fake_hit_rate)
        config = make_config("S1", max_epochs=5, max_steps=None, patience=2, batch_size=3)
        _, report = run_stage1(tiny_state, stage_data, config)
        assert report.stopped_early
        assert report.epochs_run == 3
        assert report.best_epoch == 0
        assert report.best_valid_hit_rate == 0.5
        assert module_checksum(tiny_state.adapters) == seen[0]

    @pytest.mark.slow
    def test_stage1_loss_falls_over_two_hundred_steps(self, tmp_path):
        world = generate_world(GenConfig(), seed=0)
        splits = split_bundles(world, (0.8, 0.1, 0.1), "random", np.random.default_rng(0))
        vocab = build_vocab(pretraining_corpus(world, splits.train))
        base = BaseLM(LMConfig(vocab_size=len(vocab), d_model=16, n_layers=1, n_heads=2, context_length=320)).freeze()
        fusion = FusionConfig(media_dim=world.gen_config.d_m, relational_dim=8, hidden_dim=8, n_layers=1, lm_dim=16)
        state = ModelState.initial(base, vocab, fusion, seed=0, lora_rank=2, lora_alpha=4.0)
        train = sample_instances(world, splits.train, 4, np.random.default_rng(1), n_samples=40)
        config = make_config("S1", batch_size=4, max_epochs=20, max_steps=None, warmup_ratio=0.1)

        _, report = run_stage1(state, StageData(world, None, train), config)

        assert len(report.losses) >= 200
        epoch_losses = report.epoch_mean_losses()
        assert len(epoch_losses) == 20
        assert epoch_losses[-1] < epoch_losses[0]
        write_losses(tmp_path / "losses.csv", [report], curve_path=tmp_path / "loss_curve.csv")
        with open(tmp_path / "loss_curve.csv", newline="") as handle:
            curve = list(csv.DictReader(handle))
        assert [float(row["mean_loss"]) for row in curve] == pytest.approx(epoch_losses)

    @pytest.mark.unit
    def test_report_dict_omits_wall_clock(self):
        report = StageReport("S1", [], {}, {}, {}, wall_clock=3.2)
        assert "wall_clock" not in report.to_dict()
        assert report.to_dict(include_timing=True)["wall_clock"] == 3.2

    @pytest.mark.unit
    def test_epoch_mean_losses(self):
        losses = [{"epoch": 0, "loss": 1.0}, {"epoch": 0, "loss": 3.0}, {"epoch": 1, "loss": 0.5}]
        assert StageReport("S1", losses, {}, {}, {}).epoch_mean_losses() == [2.0, 0.5]

    @pytest.mark.unit
    def test_write_losses(self, tmp_path):
        report = StageReport("S2", [{"step": 0, "stage": "S2", "epoch": 0, "loss": 1.5, "lr": 0.0}], {}, {}, {})
        path = write_losses(tmp_path / "losses.csv", [report])
        write_losses(path, [report], append=True)
        with open(path, newline="") as handle:
            rows = list(csv.DictReader(handle))
        assert list(rows[0]) == ["step", "stage", "loss", "lr"]
        assert len(rows) == 2
        assert rows[1]["stage"] == "S2"

    @pytest.mark.unit
    def test_loss_curve_summarises_epochs(self):
        losses = [
            {"step": 0, "stage": "S1", "epoch": 0, "loss": 3.0, "lr": 0.0},
            {"step": 1, "stage": "S1", "epoch": 0, "loss": 1.0, "lr": 0.5},
            {"step": 2, "stage": "S1", "epoch": 1, "loss": 0.5, "lr": 1.0},
        ]
        rows = training.loss_curve(StageReport("S1", losses, {}, {}, {}))
        assert rows == [
            {"stage": "S1", "epoch": 0, "steps": 2, "mean_loss": 2.0, "min_loss": 1.0, "max_loss": 3.0, "last_lr": 0.5},
            {"stage": "S1", "epoch": 1, "steps": 1, "mean_loss": 0.5, "min_loss": 0.5, "max_loss": 0.5, "last_lr": 1.0},
        ]

    @pytest.mark.unit
    def test_write_losses_appends_loss_curve(self, tmp_path):
        report = StageReport("S2", [{"step": 0, "stage": "S2", "epoch": 0, "loss": 1.5, "lr": 0.0}], {}, {}, {})
        curve_path = tmp_path / "loss_curve.csv"
        write_losses(tmp_path / "losses.csv", [report], curve_path=curve_path)
        write_losses(tmp_path / "losses.csv", [report], append=True, curve_path=curve_path)
        with open(curve_path, newline="") as handle:
            rows = list(csv.DictReader(handle))
        assert list(rows[0]) == training.LOSS_CURVE_FIELDS
        assert [row["mean_loss"] for row in rows] == ["1.5", "1.5"]


class TestAblation:
    """Ablation axes and the matrix runner."""

    @pytest.mark.unit
    def test_subset_parsing(self):
        assert parse_modality_subset("text+media") == (True, ("media",))
        assert parse_modality_subset("bi+ui") == (False, ("ui", "bi"))
        with pytest.raises(ConfigurationError):
            parse_modality_subset("text+smell")

    @pytest.mark.unit
    def test_modes_per_subset(self):
        assert ablation_mode("text", "fusion", "soft") == TEXT_ONLY
        unimodal = ablation_mode("media", "fusion", "soft")
        assert unimodal.tokenization == "prompt_style"
        assert not unimodal.include_text
        assert ablation_mode("text+ui", "fusion", "none") == PromptMode("fusion", "none", ("ui",))

    @pytest.mark.unit
    def test_row_count(self):
        axes = AblationAxes(
            stages=("S1", "S1+S2", "S1->S2"),
            modalities=("text", "text+media"),
            tokenizations=("fusion", "prompt_style"),
            separators=("soft", "none"),
        )
        axes.validate()
        assert axes.n_rows == len(axes.rows()) == 24

    @pytest.mark.unit
    def test_bad_axis(self):
        with pytest.raises(ConfigurationError):
            AblationAxes(stages=("S3",)).validate()

    @pytest.mark.unit
    def test_matrix_shares_stage1(self, small_world, small_splits, small_features, tiny_base, tiny_vocab, fusion_config, mocker):
        spy = mocker.spy(training, "run_stage1")
        rng = np.random.default_rng(4)
        context = AblationContext(
            world=small_world,
            features=small_features,
            base=tiny_base,
            vocab=tiny_vocab,
            train=sample_instances(small_world, small_splits.train, 4, rng, n_samples=4),
            valid=[],
            test=sample_instances(small_world, small_splits.test, 4, rng, n_samples=5),
            fusion_config=fusion_config,
        )
        axes = AblationAxes(stages=("S1", "S1->S2"), modalities=("text+media+ui+bi",))
        rows, reports = run_ablation_matrix(context, axes, make_config("S1", max_steps=2))
        assert spy.call_count == 1
        assert [r["stage"] for r in rows] == ["S1", "S1->S2"]
        assert [r.stage for r in reports] == ["S1", "S2"]
        assert all(r["n_instances"] == 5 for r in rows)
        assert all(r["hit_rate_at_1"] <= r["valid_ratio"] for r in rows)

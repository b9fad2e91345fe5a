"""Unit tests for hybrid prompt construction and answer parsing."""
import numpy as np
import pytest
import torch

from src.dataset import PromptInstance, sample_instances
from src.errors import (
    ConfigurationError,
    ContextLengthError,
    DataError,
    PreconditionError,
)
from src.features import FeatureTable, ModalityFeatures
from src.fusion import fuse_items
from src.prompting import (
    FUSED,
    INVALID,
    SEP,
    TEXT_ONLY,
    VOCAB,
    PromptEncoder,
    PromptMode,
    build_prompt,
    compare_token_counts,
    count_tokens,
    parse_answer,
    render_template,
)
from src.tinylm import BaseLM, LMConfig


@pytest.fixture
def instance():
    return PromptInstance(seed_items=(0, 1), candidates=(2, 3, 4, 5), positive_index=2, bundle_id=0)


@pytest.fixture
def encoder(tiny_state):
    return tiny_state.encoder


def prompt_length(instance, world, features, mode, encoder):
    with torch.no_grad():
        return count_tokens(build_prompt(instance, world, features, mode, encoder)[0])


class TestBuildPrompt:
    """Sequence layout per tokenization mode."""

    @pytest.mark.unit
    def test_target_is_letter_then_eos(self, instance, small_world, encoder, tiny_vocab):
        _, targets = build_prompt(instance, small_world, None, TEXT_ONLY, encoder)
        assert targets == [tiny_vocab.letter_id(2), tiny_vocab.eos_id]
        assert tiny_vocab.tokens[targets[0]] == "C"

    @pytest.mark.unit
    def test_text_only_is_pure_vocabulary(self, instance, small_world, encoder, tiny_vocab):
        sequence, _ = build_prompt(instance, small_world, None, TEXT_ONLY, encoder)
        assert sequence.non_vocab_positions == []
        assert sequence.provenance[0].token_id == tiny_vocab.bos_id
        ids = [tag.token_id for tag in sequence.provenance]
        assert torch.equal(sequence.embeddings, encoder.base.embed_tokens(ids))

    @pytest.mark.unit
    def test_items_carry_indicators(self, instance, small_world, encoder, tiny_vocab):
        sequence, _ = build_prompt(instance, small_world, None, TEXT_ONLY, encoder)
        text = tiny_vocab.decode(tag.token_id for tag in sequence.provenance)
        assert "1. " + small_world.item_text(0) in text
        assert "2. " + small_world.item_text(1) in text
        assert "A. " + small_world.item_text(2) in text
        assert "D. " + small_world.item_text(5) in text
        assert text.endswith("Answer:")

    @pytest.mark.unit
    def test_soft_separator_precedes_each_fused_token(self, instance, small_world, small_features, encoder, tiny_state):
        mode = PromptMode("fusion", "soft")
        with torch.no_grad():
            sequence, _ = build_prompt(instance, small_world, small_features, mode, encoder)
            fused = fuse_items([0, 1, 2, 3, 4, 5], small_features, tiny_state.fusion, mode.modalities)
        extra = sequence.non_vocab_positions
        assert len(extra) == 12
        for k, (sep_pos, fused_pos) in enumerate(zip(extra[::2], extra[1::2])):
            assert fused_pos == sep_pos + 1
            assert sequence.provenance[sep_pos].kind == SEP
            assert sequence.provenance[fused_pos].kind == FUSED
            assert sequence.provenance[fused_pos].item_id == [0, 1, 2, 3, 4, 5][k]
            assert torch.equal(sequence.embeddings[sep_pos], tiny_state.separator.vec.detach())
            assert torch.allclose(sequence.embeddings[fused_pos], fused[k], atol=1e-14)

    @pytest.mark.unit
    @pytest.mark.parametrize("separator,per_item", [("soft", 2), ("none", 1), ("textual", 4)])
    def test_fusion_overhead_per_item(self, instance, small_world, small_features, encoder, separator, per_item):
        text_only = prompt_length(instance, small_world, small_features, TEXT_ONLY, encoder)
        fusion = prompt_length(instance, small_world, small_features, PromptMode("fusion", separator), encoder)
        assert fusion - text_only == per_item * 6

    @pytest.mark.unit
    def test_prompt_style_overhead(self, instance, small_world, small_features, encoder):
        text_only = prompt_length(instance, small_world, small_features, TEXT_ONLY, encoder)
        style = prompt_length(instance, small_world, small_features, PromptMode("prompt_style", "none"), encoder)
        assert style - text_only == 12 * 6

    @pytest.mark.unit
    def test_unimodal_without_text(self, instance, small_world, small_features, encoder):
        mode = PromptMode("prompt_style", "none", ("media",), include_text=False)
        with torch.no_grad():
            sequence, _ = build_prompt(instance, small_world, small_features, mode, encoder)
        kinds = [sequence.provenance[p] for p in sequence.non_vocab_positions]
        assert [tag.modality for tag in kinds] == ["media"] * 6
        text = encoder.vocab.decode(t.token_id for t in sequence.provenance if t.kind == VOCAB)
        assert small_world.item_text(0) not in text

    @pytest.mark.unit
    def test_same_inputs_same_sequence(self, instance, small_world, small_features, encoder):
        mode = PromptMode("fusion", "soft")
        with torch.no_grad():
            a, _ = build_prompt(instance, small_world, small_features, mode, encoder)
            b, _ = build_prompt(instance, small_world, small_features, mode, encoder)
        assert torch.equal(a.embeddings, b.embeddings)
        assert a.provenance == b.provenance

    @pytest.mark.unit
    def test_rendered_template(self, instance):
        rendered = render_template(instance)
        assert "1. <item:0>" in rendered
        assert "C. <item:4>" in rendered
        assert rendered.rstrip().endswith("Answer:")


class TestBuildPromptErrors:
    """Precondition failures."""

    @pytest.mark.unit
    def test_too_many_candidates(self, small_world, encoder):
        instance = PromptInstance(seed_items=(0,), candidates=tuple(range(1, 28)), positive_index=0)
        with pytest.raises(PreconditionError, match="option letters"):
            build_prompt(instance, small_world, None, TEXT_ONLY, encoder)

    @pytest.mark.unit
    def test_fusion_needs_features(self, instance, small_world, encoder):
        with pytest.raises(PreconditionError, match="feature"):
            build_prompt(instance, small_world, None, PromptMode(), encoder)

    @pytest.mark.unit
    def test_soft_mode_needs_separator(self, instance, small_world, small_features, tiny_state):
        encoder = PromptEncoder(tiny_state.vocab, tiny_state.base, tiny_state.fusion, None)
        with pytest.raises(PreconditionError, match="SoftSeparator"):
            build_prompt(instance, small_world, small_features, PromptMode("fusion", "soft"), encoder)

    @pytest.mark.unit
    def test_missing_feature_row(self, instance, small_world, small_features, encoder):
        short = FeatureTable("ui", np.ones((3, small_features.ui.dim)))
        features = ModalityFeatures(media=small_features.media, ui=short, bi=small_features.bi)
        with pytest.raises(DataError):
            build_prompt(instance, small_world, features, PromptMode("fusion", "none"), encoder)

    @pytest.mark.unit
    def test_context_overflow_names_bundle(self, instance, small_world, tiny_state):
        config = LMConfig(vocab_size=len(tiny_state.vocab), d_model=16, n_layers=1, n_heads=2, context_length=20)
        encoder = PromptEncoder(tiny_state.vocab, BaseLM(config).freeze())
        with pytest.raises(ContextLengthError, match="bundle 0"):
            build_prompt(instance, small_world, None, TEXT_ONLY, encoder)

    @pytest.mark.unit
    def test_bad_mode(self):
        with pytest.raises(ConfigurationError):
            PromptMode("telepathic").validate()
        with pytest.raises(ConfigurationError):
            PromptMode("text_only", "none", (), include_text=False).validate()


class TestPromptMode:
    """Mode metadata."""

    @pytest.mark.unit
    def test_modalities_are_canonically_ordered(self):
        assert PromptMode(modalities=("bi", "media")).modalities == ("media", "bi")

    @pytest.mark.unit
    def test_round_trip_through_dict(self):
        mode = PromptMode("prompt_style", "textual", ("ui",), include_text=False)
        assert PromptMode.from_dict(mode.to_dict()) == mode

    @pytest.mark.unit
    def test_labels(self):
        assert TEXT_ONLY.label == "text_only"
        assert PromptMode("fusion", "soft", ("media",)).label == "fusion[soft]:media"


class TestParseAnswer:
    """Mapping generated text to an option index."""

    @pytest.mark.unit
    @pytest.mark.parametrize("text,expected", [
        ("C", 2),
        (" c. ", 2),
        ("A)", 0),
        ("D\n", 3),
        ("E", INVALID),
        ("Answer: C", INVALID),
        ("CC", INVALID),
        ("xyzzy", INVALID),
        ("", INVALID),
        (None, INVALID),
    ])
    def test_examples(self, text, expected):
        assert parse_answer(text, 4) == expected


class TestTokenComparison:
    """Sequence-length comparison across tokenizations."""

    @pytest.mark.unit
    def test_rows_are_ordered(self, small_world, small_splits, small_features, encoder):
        instances = sample_instances(small_world, small_splits.test, 4, np.random.default_rng(0))
        rows = compare_token_counts(instances, small_world, small_features, encoder)
        assert len(rows) == len(instances)
        for row, inst in zip(rows, instances):
            assert row["text_only"] < row["fusion"] <= row["prompt_style"]
            assert row["fusion"] - row["text_only"] == 2 * row["n_items"]
            assert row["n_items"] == len(inst.seed_items) + 4

    @pytest.mark.unit
    def test_needs_modalities(self, small_world, small_splits, small_features, encoder):
        instances = sample_instances(small_world, small_splits.test, 4, np.random.default_rng(0))
        with pytest.raises(PreconditionError):
            compare_token_counts(instances, small_world, small_features, encoder, modalities=())

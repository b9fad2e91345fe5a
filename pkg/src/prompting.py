"""Render prompt instances as hybrid token sequences and parse answers back to option indices."""
import string
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import torch

from src.constants import (
    ANSWER_CUE,
    BUNDLE_PROMPT_TEMPLATE,
    INSTRUCTION,
    MAX_CANDIDATES,
    MAX_SEED_INDICATOR,
    MODALITY_INDICATORS,
    OPTION_LETTERS,
    TEXTUAL_SEPARATOR,
)
from src.dataset import PromptInstance, World
from src.errors import (
    ConfigurationError,
    ContextLengthError,
    InvariantViolationError,
    PreconditionError,
)
from src.features import MODALITIES, ModalityFeatures
from src.fusion import FusionParams, fuse_items, project_feature
from src.logger import get_logger
from src.tinylm import BaseLM, SoftSeparator, Vocabulary

logger = get_logger(__name__)

INVALID = -1
TOKENIZATIONS = ("text_only", "fusion", "prompt_style")
SEPARATORS = ("textual", "none", "soft")

VOCAB, SEP, FUSED, FEATURE = "vocab_token", "sep", "fused", "feature"


@dataclass(frozen=True)
class PromptMode:
    """
    How each item placeholder expands.

    `separator` only matters for fusion; `modalities` is ignored by
    text_only. `include_text=False` drops item titles (unimodal rows of
    the ablation matrix).
    """
    tokenization: str = "fusion"
    separator: str = "soft"
    modalities: Tuple[str, ...] = MODALITIES
    include_text: bool = True

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(m for m in MODALITIES if m in set(self.modalities)))

    def validate(self):
        if self.tokenization not in TOKENIZATIONS:
            raise ConfigurationError(f"tokenization must be one of {TOKENIZATIONS}, got '{self.tokenization}'")
        if self.separator not in SEPARATORS:
            raise ConfigurationError(f"separator must be one of {SEPARATORS}, got '{self.separator}'")
        if self.tokenization == "text_only" and not self.include_text:
            raise ConfigurationError("text_only prompts need item text")
        if self.tokenization == "prompt_style" and not self.include_text and not self.modalities:
            raise ConfigurationError("prompt_style without text needs at least one modality")

    @property
    def needs_features(self) -> bool:
        return self.tokenization != "text_only"

    @property
    def label(self) -> str:
        if self.tokenization == "text_only":
            return "text_only"
        parts = ([] if self.include_text else ["no_text"]) + list(self.modalities)
        tail = "+".join(parts) or "none"
        if self.tokenization == "fusion":
            return f"fusion[{self.separator}]:{tail}"
        return f"prompt_style:{tail}"

    def to_dict(self) -> Dict:
        return {
            "tokenization": self.tokenization,
            "separator": self.separator,
            "modalities": list(self.modalities),
            "include_text": self.include_text,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "PromptMode":
        return cls(
            tokenization=data.get("tokenization", "fusion"),
            separator=data.get("separator", "soft"),
            modalities=tuple(data.get("modalities", MODALITIES)),
            include_text=bool(data.get("include_text", True)),
        )


TEXT_ONLY = PromptMode(tokenization="text_only", separator="none", modalities=())


class Provenance(NamedTuple):
    """Origin of one position: a vocabulary id, the separator, or an item's non-textual embedding."""
    kind: str
    token_id: Optional[int] = None
    item_id: Optional[int] = None
    modality: Optional[str] = None


@dataclass
class HybridTokenSequence:
    embeddings: torch.Tensor
    provenance: List[Provenance]
    rendered_template: str

    def __len__(self) -> int:
        return len(self.provenance)

    @property
    def non_vocab_positions(self) -> List[int]:
        return [pos for pos, tag in enumerate(self.provenance) if tag.kind != VOCAB]


@dataclass
class PromptEncoder:
    """Everything that turns token ids and features into LM-width embeddings."""
    vocab: Vocabulary
    base: BaseLM
    fusion: Optional[FusionParams] = None
    separator: Optional[SoftSeparator] = None

    @property
    def context_length(self) -> int:
        return self.base.config.context_length


@dataclass
class _Builder:
    encoder: PromptEncoder
    pieces: List[torch.Tensor] = field(default_factory=list)
    provenance: List[Provenance] = field(default_factory=list)
    pending: List[int] = field(default_factory=list)

    def text(self, text: str):
        self.ids(self.encoder.vocab.encode(text))

    def ids(self, ids: Sequence[int]):
        self.pending.extend(int(i) for i in ids)
        self.provenance.extend(Provenance(VOCAB, token_id=int(i)) for i in ids)

    def vector(self, vec: torch.Tensor, tag: Provenance):
        self._flush()
        self.pieces.append(vec.reshape(1, -1))
        self.provenance.append(tag)

    def _flush(self):
        if self.pending:
            self.pieces.append(self.encoder.base.embed_tokens(self.pending))
            self.pending = []

    def finish(self) -> torch.Tensor:
        self._flush()
        if not self.pieces:
            return torch.zeros(0, self.encoder.base.d_model, dtype=self.encoder.base.token_embedding.weight.dtype)
        return torch.cat(self.pieces, dim=0)


def _template_parts(instance: PromptInstance) -> List[Tuple[str, object]]:
    """Template as ("text", str) and ("item", id) parts in reading order."""
    parts = []
    for literal, name, _, _ in string.Formatter().parse(BUNDLE_PROMPT_TEMPLATE):
        if literal:
            parts.append(("text", literal))
        if name is None:
            continue
        if name == "instruction":
            parts.append(("text", INSTRUCTION))
        elif name == "answer_cue":
            parts.append(("text", ANSWER_CUE))
        elif name == "seeds":
            for j, item in enumerate(instance.seed_items):
                parts.append(("text", f" {j + 1}. "))
                parts.append(("item", int(item)))
        elif name == "candidates":
            for j, item in enumerate(instance.candidates):
                parts.append(("text", f" {OPTION_LETTERS[j]}. "))
                parts.append(("item", int(item)))
        else:
            raise ConfigurationError(f"Unknown template placeholder '{{{name}}}'")
    return parts


def render_template(instance: PromptInstance) -> str:
    """Template text with `<item:N>` in place of each item."""
    return BUNDLE_PROMPT_TEMPLATE.format(
        instruction=INSTRUCTION,
        seeds=" ".join(f"{j + 1}. <item:{i}>" for j, i in enumerate(instance.seed_items)),
        candidates=" ".join(f"{OPTION_LETTERS[j]}. <item:{i}>" for j, i in enumerate(instance.candidates)),
        answer_cue=ANSWER_CUE,
    )


def _check_preconditions(instance: PromptInstance, features: Optional[ModalityFeatures], mode: PromptMode, encoder: PromptEncoder):
    mode.validate()
    if instance.n_candidates > MAX_CANDIDATES:
        raise PreconditionError(f"{instance.n_candidates} candidates exceed the {MAX_CANDIDATES} option letters")
    if len(instance.seed_items) > MAX_SEED_INDICATOR:
        raise PreconditionError(f"{len(instance.seed_items)} seed items exceed {MAX_SEED_INDICATOR} numeric indicators")
    if not 0 <= instance.positive_index < instance.n_candidates:
        raise PreconditionError(f"positive_index {instance.positive_index} out of range")
    if mode.needs_features:
        if features is None:
            raise PreconditionError(f"Mode {mode.label} needs feature tables")
        if encoder.fusion is None:
            raise PreconditionError(f"Mode {mode.label} needs fusion parameters")
    if mode.tokenization == "fusion" and mode.separator == "soft" and encoder.separator is None:
        raise PreconditionError("Soft separator mode needs a SoftSeparator")


def _item_vectors(items: List[int], features: ModalityFeatures, mode: PromptMode, encoder: PromptEncoder) -> Dict:
    """Non-textual vectors for every item in the prompt, computed in one batch."""
    if mode.tokenization == "fusion":
        fused = fuse_items(items, features, encoder.fusion, mode.modalities)
        return {"fused": fused}
    if mode.tokenization == "prompt_style":
        return {
            modality: project_feature(features.table(modality).rows(items), modality, encoder.fusion)
            for modality in mode.modalities
        }
    return {}


def build_prompt(
    instance: PromptInstance,
    world: World,
    features: Optional[ModalityFeatures],
    mode: PromptMode,
    encoder: PromptEncoder,
) -> Tuple[HybridTokenSequence, List[int]]:
    """
    Build the hybrid token sequence for one instance.

    Seeds get numeric indicators, candidates get letters; each item expands
    by `mode`: text only, text + separator + one fused token, or text plus
    an indicator and one projected feature per modality.

    Returns:
        (sequence, target ids = [letter of the positive, EOS])

    Raises:
        PreconditionError: Too many candidates or missing model parts
        DataError: Missing feature row
        ContextLengthError: Sequence longer than the LM context
    """
    _check_preconditions(instance, features, mode, encoder)
    vocab = encoder.vocab
    parts = _template_parts(instance)
    items = [value for kind, value in parts if kind == "item"]
    vectors = _item_vectors(items, features, mode, encoder)

    builder = _Builder(encoder)
    builder.ids([vocab.bos_id])
    item_index = 0
    for kind, value in parts:
        if kind == "text":
            builder.text(value)
            continue
        item = value
        if mode.include_text:
            builder.text(world.item_text(item))
        if mode.tokenization == "fusion":
            if mode.separator == "textual":
                builder.text(TEXTUAL_SEPARATOR)
            elif mode.separator == "soft":
                builder.vector(encoder.separator.vec, Provenance(SEP, item_id=item))
            builder.vector(vectors["fused"][item_index], Provenance(FUSED, item_id=item))
        elif mode.tokenization == "prompt_style":
            for modality in mode.modalities:
                builder.text(MODALITY_INDICATORS[modality])
                builder.vector(vectors[modality][item_index], Provenance(FEATURE, item_id=item, modality=modality))
        item_index += 1

    sequence = HybridTokenSequence(
        embeddings=builder.finish(),
        provenance=builder.provenance,
        rendered_template=render_template(instance),
    )
    if len(sequence) > encoder.context_length:
        raise ContextLengthError(
            f"Prompt for bundle {instance.bundle_id} (seeds {list(instance.seed_items)}) has {len(sequence)} "
            f"positions, context length is {encoder.context_length} (mode {mode.label})"
        )
    target_ids = [vocab.letter_id(instance.positive_index), vocab.eos_id]
    return sequence, target_ids


def parse_answer(text: Optional[str], n_candidates: int) -> int:
    """
    Option index from generated text, or INVALID.

    Whitespace and trailing punctuation are trimmed; what remains must be a
    single letter (either case) naming one of the first `n_candidates` options.
    """
    if text is None:
        return INVALID
    cleaned = text.strip().rstrip(string.punctuation).strip()
    if len(cleaned) != 1 or cleaned.upper() not in OPTION_LETTERS:
        return INVALID
    index = ord(cleaned.upper()) - ord("A")
    return index if 0 <= index < n_candidates else INVALID


def count_tokens(sequence: HybridTokenSequence) -> int:
    return len(sequence)


def compare_token_counts(
    instances: Sequence[PromptInstance],
    world: World,
    features: ModalityFeatures,
    encoder: PromptEncoder,
    separator: str = "soft",
    modalities: Sequence[str] = MODALITIES,
) -> List[Dict]:
    """
    Position counts per instance for text_only, fusion and prompt_style.

    Raises:
        InvariantViolationError: If text_only < fusion <= prompt_style fails for an instance
    """
    if not modalities:
        raise PreconditionError("Token comparison needs at least one modality")
    modes = {
        "text_only": TEXT_ONLY,
        "fusion": PromptMode("fusion", separator, tuple(modalities)),
        "prompt_style": PromptMode("prompt_style", separator, tuple(modalities)),
    }
    rows = []
    with torch.no_grad():
        for instance in instances:
            row = {"bundle_id": instance.bundle_id, "n_items": len(instance.seed_items) + instance.n_candidates}
            for name, mode in modes.items():
                row[name] = count_tokens(build_prompt(instance, world, features, mode, encoder)[0])
            if not row["text_only"] < row["fusion"] <= row["prompt_style"]:
                raise InvariantViolationError(f"Token-count ordering violated for bundle {instance.bundle_id}: {row}")
            rows.append(row)
    if rows:
        mean = {name: sum(r[name] for r in rows) / len(rows) for name in modes}
        logger.info(f"Mean positions over {len(rows)} instances: {mean}")
    return rows

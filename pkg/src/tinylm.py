"""A small decoder-only language model with low-rank adapters on query/value projections."""
import copy
import math
import re
import string
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from src.checkpoint import module_checksum
from src.config import (
    CONTEXT_LENGTH,
    DTYPE,
    IS_TESTING,
    LM_DIM,
    LM_FF_MULT,
    LM_HEADS,
    LM_LAYERS,
    LORA_ALPHA,
    LORA_RANK,
    MAX_NEW_TOKENS,
)
from src.constants import (
    ANSWER_CUE,
    BUNDLE_PROMPT_TEMPLATE,
    BUNDLE_SENTENCE_PREFIX,
    INSTRUCTION,
    MAX_SEED_INDICATOR,
    MODALITY_INDICATORS,
    OPTION_LETTERS,
    TEXTUAL_SEPARATOR,
)
from src.dataset import World, item_corpus
from src.errors import (
    ConfigurationError,
    ContextLengthError,
    DivergenceError,
    InvariantViolationError,
    ParseError,
    PreconditionError,
    ValidationError,
)
from src.logger import get_logger

logger = get_logger(__name__)

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
SPECIAL_TOKENS = (PAD, UNK, BOS, EOS)
TOKEN_PATTERN = re.compile(r"[A-Za-z0-9]+|[^\sA-Za-z0-9]")
NO_SPACE_BEFORE = set(".,:;!?")
IGNORE_INDEX = -100


def tokenize(text: str) -> List[str]:
    """Word-level split: alphanumeric runs and single punctuation marks."""
    return TOKEN_PATTERN.findall(text)


def template_sentences() -> List[str]:
    """Fixed strings the prompt template splices around the items."""
    literals = [literal for literal, _, _, _ in string.Formatter().parse(BUNDLE_PROMPT_TEMPLATE) if literal.strip()]
    return [
        *literals,
        INSTRUCTION,
        ANSWER_CUE,
        TEXTUAL_SEPARATOR,
        *MODALITY_INDICATORS.values(),
        BUNDLE_SENTENCE_PREFIX,
        ",",
    ]


def reserved_tokens() -> List[str]:
    """Specials, option letters, numerals and template words, in a fixed order."""
    ordered = list(SPECIAL_TOKENS) + list(OPTION_LETTERS)
    ordered += [str(n) for n in range(MAX_SEED_INDICATOR + 1)]
    for sentence in template_sentences():
        ordered += tokenize(sentence)
    seen, unique = set(), []
    for token in ordered:
        if token not in seen:
            seen.add(token)
            unique.append(token)
    return unique


class Vocabulary:
    """Bijective token <-> id mapping with reserved ids first."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.index = {token: idx for idx, token in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValidationError("Vocabulary tokens must be unique")
        missing = [t for t in SPECIAL_TOKENS if t not in self.index]
        if missing:
            raise ValidationError(f"Vocabulary lacks special tokens {missing}")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    def token_id(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    def letter_id(self, option_index: int) -> int:
        return self.index[OPTION_LETTERS[option_index]]

    def encode(self, text: str) -> List[int]:
        return [self.token_id(token) for token in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> str:
        pieces = []
        for idx in ids:
            token = self.tokens[int(idx)]
            if token in (PAD, BOS, EOS):
                continue
            if pieces and token in NO_SPACE_BEFORE:
                pieces[-1] += token
            else:
                pieces.append(token)
        return " ".join(pieces)

    def save(self, path) -> Path:
        """One token per line; line number (from 0) is the id."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(self.tokens) + "\n", encoding="utf-8")
        logger.info(f"Saved vocabulary ({len(self)} tokens) to {path}")
        return path

    @classmethod
    def load(cls, path) -> "Vocabulary":
        path = Path(path)
        lines = path.read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines = lines[:-1]
        for lineno, token in enumerate(lines, start=1):
            if not token or any(ch.isspace() for ch in token):
                raise ParseError(f"Bad vocabulary token {token!r}", line=lineno)
        return cls(lines)


def build_vocab(corpus: Iterable[str], min_freq: int = 1) -> Vocabulary:
    """
    Reserved tokens first, then corpus words by (frequency desc, lexicographic).

    Words seen fewer than `min_freq` times are left out and encode to UNK.

    Raises:
        PreconditionError: If the corpus has no tokens
    """
    counts = Counter(token for sentence in corpus for token in tokenize(sentence))
    if not counts:
        raise PreconditionError("Cannot build a vocabulary from an empty corpus")
    reserved = reserved_tokens()
    reserved_set = set(reserved)
    words = [w for w, c in counts.items() if c >= min_freq and w not in reserved_set]
    words.sort(key=lambda w: (-counts[w], w))
    vocab = Vocabulary(reserved + words)
    logger.info(f"Built vocabulary: {len(reserved)} reserved + {len(words)} corpus tokens")
    return vocab


def pretraining_corpus(world: World, bundle_ids: Sequence[int]) -> List[str]:
    """Item titles, training-bundle listings and the template sentences."""
    return item_corpus(world, bundle_ids) + template_sentences()


@dataclass
class LMConfig:
    """Shape of the base language model."""
    vocab_size: int
    d_model: int = LM_DIM
    n_layers: int = LM_LAYERS
    n_heads: int = LM_HEADS
    ff_mult: int = LM_FF_MULT
    context_length: int = CONTEXT_LENGTH
    init_std: float = 0.02
    seed: int = 0

    def validate(self):
        if self.vocab_size < len(SPECIAL_TOKENS):
            raise ConfigurationError(f"vocab_size too small: {self.vocab_size}")
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_layers < 1 or self.context_length < 1 or self.ff_mult < 1:
            raise ConfigurationError("n_layers, context_length and ff_mult must be >= 1")


class LoraLinear(nn.Module):
    """Low-rank delta (alpha/r) B A for one d_out x d_in weight; B starts at zero."""

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float, generator: torch.Generator):
        super().__init__()
        if rank < 1:
            raise ConfigurationError(f"LoRA rank must be >= 1, got {rank}")
        self.rank = rank
        self.alpha = alpha
        self.lora_a = nn.Parameter(torch.randn(rank, d_in, generator=generator, dtype=DTYPE) / math.sqrt(d_in))
        self.lora_b = nn.Parameter(torch.zeros(d_out, rank, dtype=DTYPE))

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta_weight(self) -> torch.Tensor:
        return self.scale * (self.lora_b @ self.lora_a)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.scale * F.linear(F.linear(x, self.lora_a), self.lora_b)


class BlockAdapters(NamedTuple):
    query: LoraLinear
    value: LoraLinear


class LoraAdapters(nn.Module):
    """Query and value adapters for every transformer block."""

    def __init__(self, n_layers: int, d_model: int, rank: int = LORA_RANK, alpha: float = LORA_ALPHA, seed: int = 0):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        self.rank = rank
        self.alpha = alpha
        self.query = nn.ModuleList([LoraLinear(d_model, d_model, rank, alpha, generator) for _ in range(n_layers)])
        self.value = nn.ModuleList([LoraLinear(d_model, d_model, rank, alpha, generator) for _ in range(n_layers)])

    @classmethod
    def from_base(cls, base: "BaseLM", rank: int = LORA_RANK, alpha: float = LORA_ALPHA, seed: int = 0) -> "LoraAdapters":
        return cls(base.config.n_layers, base.config.d_model, rank, alpha, seed)

    def block(self, index: int) -> BlockAdapters:
        return BlockAdapters(self.query[index], self.value[index])


class CausalSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.query = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.key = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.value = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.out = nn.Linear(d_model, d_model, dtype=DTYPE)

    def forward(self, x: torch.Tensor, adapters: Optional[BlockAdapters] = None) -> torch.Tensor:
        B, T, C = x.shape
        q, k, v = self.query(x), self.key(x), self.value(x)
        if adapters is not None:
            q = q + adapters.query(x)
            v = v + adapters.value(x)
        head = C // self.n_heads
        q = q.view(B, T, self.n_heads, head).transpose(1, 2)
        k = k.view(B, T, self.n_heads, head).transpose(1, 2)
        v = v.view(B, T, self.n_heads, head).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(head)
        future = torch.triu(torch.ones(T, T, dtype=torch.bool, device=x.device), diagonal=1)
        scores = scores.masked_fill(future, float("-inf"))
        y = torch.softmax(scores, dim=-1) @ v
        return self.out(y.transpose(1, 2).contiguous().view(B, T, C))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, d_model: int, n_heads: int, ff_mult: int):
        super().__init__()
        self.attn_norm = nn.LayerNorm(d_model, dtype=DTYPE)
        self.attn = CausalSelfAttention(d_model, n_heads)
        self.ff_norm = nn.LayerNorm(d_model, dtype=DTYPE)
        self.ff = nn.Sequential(
            nn.Linear(d_model, ff_mult * d_model, dtype=DTYPE),
            nn.GELU(),
            nn.Linear(ff_mult * d_model, d_model, dtype=DTYPE),
        )

    def forward(self, x: torch.Tensor, adapters: Optional[BlockAdapters] = None) -> torch.Tensor:
        x = x + self.attn(self.attn_norm(x), adapters)
        return x + self.ff(self.ff_norm(x))


class BaseLM(nn.Module):
    """Decoder-only LM whose output head is tied to the token embedding table."""

    def __init__(self, config: LMConfig):
        super().__init__()
        config.validate()
        self.config = config
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            self.token_embedding = nn.Embedding(config.vocab_size, config.d_model, dtype=DTYPE)
            self.position_embedding = nn.Parameter(torch.zeros(config.context_length, config.d_model, dtype=DTYPE))
            self.blocks = nn.ModuleList([
                Block(config.d_model, config.n_heads, config.ff_mult) for _ in range(config.n_layers)
            ])
            self.final_norm = nn.LayerNorm(config.d_model, dtype=DTYPE)
            nn.init.normal_(self.token_embedding.weight, std=config.init_std)
            nn.init.normal_(self.position_embedding, std=config.init_std)
        self.frozen = False

    @property
    def d_model(self) -> int:
        return self.config.d_model

    def embed_tokens(self, ids) -> torch.Tensor:
        """Row lookup in the embedding table; shape (*ids.shape, d_model)."""
        ids = torch.as_tensor(ids, dtype=torch.long)
        if ids.numel() == 0:
            return torch.zeros(*ids.shape, self.d_model, dtype=DTYPE)
        return self.token_embedding(ids)

    def forward(self, embeddings: torch.Tensor, adapters: Optional[LoraAdapters] = None) -> torch.Tensor:
        """
        Causal logits for an embedding sequence (T, d) or batch (B, T, d).

        Vocabulary embeddings and injected non-textual embeddings are
        interchangeable here.

        Raises:
            ContextLengthError: If T exceeds the context length
        """
        squeeze = embeddings.dim() == 2
        if squeeze:
            embeddings = embeddings.unsqueeze(0)
        T = embeddings.shape[1]
        if T > self.config.context_length:
            raise ContextLengthError(f"Sequence of {T} positions exceeds context length {self.config.context_length}")
        h = embeddings + self.position_embedding[:T]
        for index, block in enumerate(self.blocks):
            h = block(h, adapters.block(index) if adapters is not None else None)
        logits = self.final_norm(h) @ self.token_embedding.weight.T
        return logits.squeeze(0) if squeeze else logits

    def freeze(self) -> "BaseLM":
        for param in self.parameters():
            param.requires_grad_(False)
        self.frozen = True
        logger.info(f"Base model frozen, checksum {self.checksum()[:16]}")
        return self

    def checksum(self) -> str:
        return module_checksum(self)


class SoftSeparator(nn.Module):
    """Trainable <Sep> embedding placed between an item's text and its fused token."""

    def __init__(self, d_model: int = LM_DIM, init_std: float = 0.02, seed: int = 0):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        self.vec = nn.Parameter(torch.randn(d_model, generator=generator, dtype=DTYPE) * init_std)


def apply_lora(weight: torch.Tensor, adapter: LoraLinear) -> torch.Tensor:
    """Effective weight W + (alpha/r) B A."""
    return weight + adapter.delta_weight()


def merge_lora(base: BaseLM, adapters: LoraAdapters) -> BaseLM:
    """Copy of `base` with every adapted weight replaced by its effective value."""
    merged = copy.deepcopy(base)
    with torch.no_grad():
        for index, block in enumerate(merged.blocks):
            block.attn.query.weight.copy_(apply_lora(block.attn.query.weight, adapters.query[index]))
            block.attn.value.weight.copy_(apply_lora(block.attn.value.weight, adapters.value[index]))
    return merged


def merge_check(base: BaseLM, adapters: LoraAdapters, embeddings: torch.Tensor, tolerance: float = 1e-12) -> float:
    """
    Compare merged-weight logits with adapter-path logits.

    Returns:
        Maximum absolute difference

    Raises:
        InvariantViolationError: If the difference exceeds `tolerance`
    """
    with torch.no_grad():
        adapted = base(embeddings, adapters)
        merged = merge_lora(base, adapters)(embeddings)
    gap = float((adapted - merged).abs().max()) if adapted.numel() else 0.0
    if gap > tolerance:
        raise InvariantViolationError(f"Merged LoRA logits differ from adapter logits by {gap:.3e}")
    return gap


def answer_loss(logits: torch.Tensor, target_ids, target_positions) -> torch.Tensor:
    """
    Mean negative log-likelihood of the answer tokens only.

    Args:
        logits: (T, V) or (B, T, V); logits at position p predict the token at p + 1
        target_ids: Target token ids (a list per batch row when batched)
        target_positions: Positions whose logits predict each target

    Raises:
        PreconditionError: Position out of range or no targets
    """
    if logits.dim() == 2:
        logits = logits.unsqueeze(0)
        target_ids, target_positions = [list(target_ids)], [list(target_positions)]
    T = logits.shape[1]
    rows, positions, targets = [], [], []
    for row, (ids, where) in enumerate(zip(target_ids, target_positions)):
        if len(ids) != len(where):
            raise PreconditionError(f"Row {row}: {len(ids)} targets but {len(where)} positions")
        for token, position in zip(ids, where):
            if not 0 <= int(position) < T:
                raise PreconditionError(f"Target position {position} outside sequence of length {T}")
            rows.append(row)
            positions.append(int(position))
            targets.append(int(token))
    if not targets:
        raise PreconditionError("answer_loss needs at least one target token")
    selected = logits[rows, positions]
    log_probs = torch.log_softmax(selected, dim=-1)
    return -log_probs[torch.arange(len(targets)), torch.as_tensor(targets)].mean()


def generate_answer(
    model,
    prompt_embeddings: torch.Tensor,
    vocab: Vocabulary,
    adapters: Optional[LoraAdapters] = None,
    max_new_tokens: int = MAX_NEW_TOKENS,
) -> str:
    """Greedy decoding until EOS or `max_new_tokens`; returns the decoded text."""
    if max_new_tokens <= 0:
        return ""
    generated = []
    sequence = prompt_embeddings
    context_length = getattr(getattr(model, "config", None), "context_length", None)
    with torch.no_grad():
        for _ in range(max_new_tokens):
            if context_length is not None and sequence.shape[0] >= context_length:
                break
            logits = model(sequence, adapters)
            next_id = int(torch.argmax(logits[-1]))
            if next_id == vocab.eos_id:
                break
            generated.append(next_id)
            sequence = torch.cat([sequence, model.embed_tokens([next_id])], dim=0)
    return vocab.decode(generated)


@dataclass
class PretrainConfig:
    """Next-token pretraining settings for the base model."""
    steps: int = 1500
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    eval_every: int = 250
    holdout_fraction: float = 0.05
    seed: int = 0

    def validate(self):
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigurationError("steps must be >= 0, batch_size and eval_every >= 1")
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigurationError("holdout_fraction must be in [0, 1)")


def _sentence_ids(sentences: Sequence[str], vocab: Vocabulary, context_length: int) -> List[List[int]]:
    # +1 so the shifted input still fits the context
    limit = context_length + 1
    return [([vocab.bos_id] + vocab.encode(s) + [vocab.eos_id])[:limit] for s in sentences]


def _lm_batch(sequences: Sequence[Sequence[int]], pad_id: int) -> Tuple[torch.Tensor, torch.Tensor]:
    width = max(len(seq) for seq in sequences)
    ids = torch.full((len(sequences), width), pad_id, dtype=torch.long)
    for row, seq in enumerate(sequences):
        ids[row, :len(seq)] = torch.as_tensor(seq, dtype=torch.long)
    inputs = ids[:, :-1]
    targets = ids[:, 1:].clone()
    targets[targets == pad_id] = IGNORE_INDEX
    return inputs, targets


def _next_token_loss(base: BaseLM, sequences: Sequence[Sequence[int]], pad_id: int, reduction: str = "mean") -> torch.Tensor:
    inputs, targets = _lm_batch(sequences, pad_id)
    logits = base(base.embed_tokens(inputs))
    return F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=IGNORE_INDEX, reduction=reduction
    )


def perplexity(base: BaseLM, sentences: Sequence[str], vocab: Vocabulary, chunk: int = 64) -> float:
    """exp(mean next-token NLL) over all real (non-pad) target positions."""
    sequences = _sentence_ids(sentences, vocab, base.config.context_length)
    if not sequences:
        raise PreconditionError("perplexity needs at least one sentence")
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(sequences), chunk):
            part = sequences[start:start + chunk]
            total += float(_next_token_loss(base, part, vocab.pad_id, reduction="sum"))
            count += sum(len(seq) - 1 for seq in part)
    return math.exp(total / max(count, 1))


def pretrain_base(
    corpus: Sequence[str], vocab: Vocabulary, lm_config: LMConfig, config: PretrainConfig
) -> Tuple[BaseLM, List[dict]]:
    """
    Next-token cross-entropy pretraining of Φ, which is frozen on return.

    Returns:
        (frozen base model, perplexity log)

    Raises:
        PreconditionError: Empty corpus
        DivergenceError: Non-finite loss, with the step index
    """
    config.validate()
    sentences = [s for s in corpus if s.strip()]
    if not sentences:
        raise PreconditionError("Pretraining corpus is empty")
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(sentences))
    n_holdout = int(len(sentences) * config.holdout_fraction) if len(sentences) > 1 else 0
    if config.holdout_fraction > 0 and len(sentences) > 1:
        n_holdout = max(1, n_holdout)
    holdout = [sentences[i] for i in order[:n_holdout]]
    train = [sentences[i] for i in order[n_holdout:]]
    train_ids = _sentence_ids(train, vocab, lm_config.context_length)

    base = BaseLM(lm_config)
    log = []
    if holdout:
        log.append({"step": 0, "heldout_perplexity": perplexity(base, holdout, vocab)})
    logger.info(
        f"Pretraining base LM: {len(train)} train / {len(holdout)} held-out sentences, "
        f"vocab={len(vocab)}, steps={config.steps}"
    )
    if config.steps > 0:
        optimizer = torch.optim.AdamW(base.parameters(), lr=config.lr, weight_decay=config.weight_decay)
        try:
            for step in tqdm(range(1, config.steps + 1), desc="pretrain", disable=IS_TESTING, leave=False):
                batch = [train_ids[i] for i in rng.integers(len(train_ids), size=config.batch_size)]
                loss = _next_token_loss(base, batch, vocab.pad_id)
                if not torch.isfinite(loss):
                    raise DivergenceError("Non-finite pretraining loss", step)
                optimizer.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(base.parameters(), config.grad_clip)
                optimizer.step()
                if step % config.eval_every == 0 or step == config.steps:
                    entry = {"step": step, "train_loss": float(loss)}
                    if holdout:
                        entry["heldout_perplexity"] = perplexity(base, holdout, vocab)
                    log.append(entry)
                    logger.info(f"pretrain step {step}: {entry}")
        except DivergenceError as e:
            logger.error(f"Pretraining diverged: {e}")
            raise
    base.freeze()
    return base, log

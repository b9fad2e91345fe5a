"""Progressive optimization: adapter-only S1, fusion-only S2, the joint variant and the ablation matrix."""
import copy
import csv
import itertools
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from tqdm import tqdm

from src.checkpoint import module_checksum
from src.config import (
    BATCH_SIZE,
    IS_TESTING,
    LORA_ALPHA,
    LORA_RANK,
    MAX_EPOCHS,
    MAX_NEW_TOKENS,
    N_CANDIDATES,
    PATIENCE,
    PEAK_LR,
    SAMPLE_COUNT,
    WARMUP_RATIO,
    WORKERS,
)
from src.dataset import PromptInstance, World
from src.errors import (
    ConfigurationError,
    DivergenceError,
    InvariantViolationError,
    PreconditionError,
)
from src.evaluation import ModelPredictor, evaluate, report_row
from src.features import MODALITIES, ModalityFeatures
from src.fusion import FusionConfig, FusionParams
from src.logger import get_logger
from src.prompting import TEXT_ONLY, PromptEncoder, PromptMode, build_prompt, parse_answer
from src.seeding import substream
from src.tinylm import BaseLM, LoraAdapters, SoftSeparator, Vocabulary, answer_loss, generate_answer

logger = get_logger(__name__)

STAGES = ("S1", "S2", "JOINT")
GROUPS = ("phi", "lora", "fusion")
FROZEN_GROUPS = {"S1": ("phi", "fusion"), "S2": ("phi", "lora"), "JOINT": ("phi",)}
OPTIMIZERS = ("adam", "adamw", "sgd")


@dataclass
class TrainConfig:
    """Settings for one optimization stage."""
    stage: str = "S1"
    sample_count: int = SAMPLE_COUNT
    batch_size: int = BATCH_SIZE
    max_epochs: int = MAX_EPOCHS
    peak_lr: float = PEAK_LR
    warmup_ratio: float = WARMUP_RATIO
    patience: int = PATIENCE
    optimizer: str = "adam"
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    n_candidates: int = N_CANDIDATES
    prompt_mode: PromptMode = field(default_factory=PromptMode)
    max_steps: Optional[int] = None
    seed: int = 0

    def validate(self):
        if self.stage not in STAGES:
            raise ConfigurationError(f"stage must be one of {STAGES}, got '{self.stage}'")
        if self.sample_count < 1 or self.batch_size < 1 or self.max_epochs < 0:
            raise ConfigurationError("sample_count and batch_size must be >= 1, max_epochs >= 0")
        if self.peak_lr <= 0:
            raise ConfigurationError(f"peak_lr must be > 0, got {self.peak_lr}")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ConfigurationError(f"warmup_ratio must be in [0, 1], got {self.warmup_ratio}")
        if self.patience < 1:
            raise ConfigurationError(f"patience must be >= 1, got {self.patience}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"optimizer must be one of {OPTIMIZERS}, got '{self.optimizer}'")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigurationError("max_steps must be >= 0")
        self.prompt_mode.validate()
        if self.stage != "S1" and self.prompt_mode.tokenization == "text_only":
            raise ConfigurationError(f"Stage {self.stage} needs a hybrid prompt mode, got text_only")

    @property
    def effective_mode(self) -> PromptMode:
        """S1 always trains on text-only prompts."""
        return TEXT_ONLY if self.stage == "S1" else self.prompt_mode

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["prompt_mode"] = self.prompt_mode.to_dict()
        data["betas"] = list(self.betas)
        return data


@dataclass
class ModelState:
    """Φ (frozen base), Θ_LoRA and Θ_F (fusion parameters plus the soft separator)."""
    base: BaseLM
    vocab: Vocabulary
    adapters: LoraAdapters
    fusion: FusionParams
    separator: SoftSeparator

    @classmethod
    def initial(
        cls,
        base: BaseLM,
        vocab: Vocabulary,
        fusion_config: FusionConfig,
        seed: int = 0,
        lora_rank: int = LORA_RANK,
        lora_alpha: float = LORA_ALPHA,
    ) -> "ModelState":
        if not base.frozen:
            raise PreconditionError("The base model must be frozen before adapters are attached")
        if fusion_config.lm_dim != base.d_model:
            raise ConfigurationError(f"Fusion output width {fusion_config.lm_dim} != LM width {base.d_model}")
        return cls(
            base=base,
            vocab=vocab,
            adapters=LoraAdapters.from_base(base, lora_rank, lora_alpha, seed=seed),
            fusion=FusionParams(fusion_config),
            separator=SoftSeparator(base.d_model, init_std=fusion_config.init_std, seed=seed + 1),
        )

    @property
    def encoder(self) -> PromptEncoder:
        return PromptEncoder(self.vocab, self.base, self.fusion, self.separator)

    def theta_f(self) -> torch.nn.ModuleDict:
        """Θ_F as one module, so it checksums and checkpoints as a group."""
        return torch.nn.ModuleDict({"fusion": self.fusion, "separator": self.separator})

    def group_checksums(self) -> Dict[str, str]:
        return {
            "phi": self.base.checksum(),
            "lora": module_checksum(self.adapters),
            "fusion": module_checksum(self.theta_f()),
        }

    def clone(self) -> "ModelState":
        """Copy with independent adapters and fusion parameters; Φ is shared."""
        return ModelState(
            base=self.base,
            vocab=self.vocab,
            adapters=copy.deepcopy(self.adapters),
            fusion=copy.deepcopy(self.fusion),
            separator=copy.deepcopy(self.separator),
        )

    def answer(self, instance: PromptInstance, world: World, features: Optional[ModalityFeatures], mode: PromptMode) -> str:
        """Greedy answer text for one instance."""
        with torch.no_grad():
            sequence, _ = build_prompt(instance, world, features, mode, self.encoder)
            return generate_answer(self.base, sequence.embeddings, self.vocab, self.adapters, MAX_NEW_TOKENS)


@dataclass
class StageData:
    world: World
    features: Optional[ModalityFeatures]
    train: List[PromptInstance]
    valid: List[PromptInstance] = field(default_factory=list)


@dataclass
class StageReport:
    stage: str
    losses: List[Dict]
    checksums_before: Dict[str, str]
    checksums_after: Dict[str, str]
    config: Dict
    wall_clock: float = 0.0
    epochs_run: int = 0
    best_epoch: Optional[int] = None
    best_valid_hit_rate: Optional[float] = None
    stopped_early: bool = False

    def epoch_mean_losses(self) -> List[float]:
        by_epoch: Dict[int, List[float]] = {}
        for entry in self.losses:
            by_epoch.setdefault(entry["epoch"], []).append(entry["loss"])
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]

    def to_dict(self, include_timing: bool = False) -> Dict:
        data = asdict(self)
        if not include_timing:
            # Reports must be bitwise reproducible
            data.pop("wall_clock")
        return data


def warmup_factor(step: int, total_steps: int, warmup_ratio: float = WARMUP_RATIO) -> float:
    """Linear 0 -> 1 over the first `warmup_ratio` of steps, then constant 1."""
    warmup_steps = int(round(total_steps * warmup_ratio))
    if warmup_ratio > 0:
        warmup_steps = max(1, warmup_steps)
    if warmup_steps == 0:
        return 1.0
    return min(1.0, step / warmup_steps)


def _make_optimizer(params: List[torch.nn.Parameter], config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.peak_lr, betas=config.betas, eps=config.eps, weight_decay=config.weight_decay)
    if config.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=config.peak_lr, betas=config.betas, eps=config.eps, weight_decay=config.weight_decay)
    return torch.optim.SGD(params, lr=config.peak_lr, weight_decay=config.weight_decay)


def _trainable(state: ModelState, config: TrainConfig) -> List[Tuple[str, torch.nn.Parameter]]:
    """Named parameters the stage may update; everything else gets requires_grad=False."""
    mode = config.effective_mode
    train_lora = config.stage in ("S1", "JOINT")
    train_fusion = config.stage in ("S2", "JOINT")
    train_separator = train_fusion and mode.tokenization == "fusion" and mode.separator == "soft"
    named = []
    for name, p in state.adapters.named_parameters():
        p.requires_grad_(train_lora)
        if train_lora:
            named.append((f"lora.{name}", p))
    for name, p in state.fusion.named_parameters():
        p.requires_grad_(train_fusion)
        if train_fusion:
            named.append((f"fusion.{name}", p))
    for name, p in state.separator.named_parameters():
        p.requires_grad_(train_separator)
        if train_separator:
            named.append((f"separator.{name}", p))
    return named


def batch_loss(state: ModelState, batch: Sequence[PromptInstance], data: StageData, mode: PromptMode, check_purity: bool) -> torch.Tensor:
    """
    Answer loss for a batch with the gold letter fed back as input.

    Each row is the prompt followed by the embedded answer letter; the
    logits at the last prompt position predict the letter and the next
    ones predict EOS. Rows are right-padded with zeros, which causal
    attention never lets earlier positions see.
    """
    base = state.base
    rows, targets, positions = [], [], []
    for instance in batch:
        sequence, target_ids = build_prompt(instance, data.world, data.features, mode, state.encoder)
        if check_purity and sequence.non_vocab_positions:
            raise InvariantViolationError(
                f"S1 batch contains {len(sequence.non_vocab_positions)} non-vocabulary positions (bundle {instance.bundle_id})"
            )
        T = len(sequence)
        rows.append(torch.cat([sequence.embeddings, base.embed_tokens(target_ids[:-1])], dim=0))
        targets.append(target_ids)
        positions.append(list(range(T - 1, T - 1 + len(target_ids))))
    width = max(r.shape[0] for r in rows)
    padded = torch.stack([
        torch.cat([r, r.new_zeros(width - r.shape[0], r.shape[1])], dim=0) for r in rows
    ])
    logits = base(padded, state.adapters)
    return answer_loss(logits, targets, positions)


def validation_hit_rate(state: ModelState, data: StageData, mode: PromptMode) -> Optional[float]:
    if not data.valid:
        return None
    hits = 0
    for instance in data.valid:
        predicted = parse_answer(state.answer(instance, data.world, data.features, mode), instance.n_candidates)
        hits += int(predicted == instance.positive_index)
    return hits / len(data.valid)


def _snapshot(named: List[Tuple[str, torch.nn.Parameter]]) -> Dict[str, torch.Tensor]:
    return {name: p.detach().clone() for name, p in named}


def _restore(named: List[Tuple[str, torch.nn.Parameter]], snapshot: Dict[str, torch.Tensor]):
    with torch.no_grad():
        for name, p in named:
            p.copy_(snapshot[name])


def _check_frozen(stage: str, before: Dict[str, str], after: Dict[str, str]):
    changed = [g for g in FROZEN_GROUPS[stage] if before[g] != after[g]]
    if changed:
        raise InvariantViolationError(f"Stage {stage} modified frozen parameter groups {changed}")


def _run_stage(state: ModelState, data: StageData, config: TrainConfig) -> StageReport:
    config.validate()
    if not state.base.frozen:
        raise PreconditionError("The base model must be frozen before stage training")
    if not data.train:
        raise PreconditionError(f"Stage {config.stage} has no training instances")
    mode = config.effective_mode
    stage = config.stage
    started = time.perf_counter()
    before = state.group_checksums()
    logger.info(f"Stage {stage} starting: mode={mode.label}, {len(data.train)} samples, checksums {_short(before)}")

    named = _trainable(state, config)
    steps_per_epoch = math.ceil(len(data.train) / config.batch_size)
    total_steps = steps_per_epoch * config.max_epochs
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)

    losses: List[Dict] = []
    report = StageReport(stage=stage, losses=losses, checksums_before=before, checksums_after=before, config=config.to_dict())
    if total_steps == 0 or not named:
        report.wall_clock = time.perf_counter() - started
        logger.info(f"Stage {stage}: nothing to optimize ({total_steps} steps, {len(named)} tensors)")
        return report

    optimizer = _make_optimizer([p for _, p in named], config)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda s: warmup_factor(s, total_steps, config.warmup_ratio)
    )
    best_score, best_state, stale = None, None, 0
    step = 0
    try:
        for epoch in range(config.max_epochs):
            if step >= total_steps:
                break
            order = substream(config.seed, "training", STAGES.index(stage), epoch).permutation(len(data.train))
            batches = [order[i:i + config.batch_size] for i in range(0, len(order), config.batch_size)]
            for indices in tqdm(batches, desc=f"{stage} epoch {epoch}", disable=IS_TESTING, leave=False):
                if step >= total_steps:
                    break
                lr = optimizer.param_groups[0]["lr"]
                loss = batch_loss(state, [data.train[i] for i in indices], data, mode, check_purity=(stage == "S1"))
                if not torch.isfinite(loss):
                    raise DivergenceError(f"Non-finite loss in stage {stage}", step)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                scheduler.step()
                losses.append({"step": step, "stage": stage, "epoch": epoch, "loss": float(loss), "lr": lr})
                step += 1
            report.epochs_run = epoch + 1
            mean_loss = report.epoch_mean_losses()[-1]
            score = validation_hit_rate(state, data, mode)
            logger.info(f"Stage {stage} epoch {epoch}: mean loss {mean_loss:.4f}, valid HitRate@1 {score}")
            if score is None:
                continue
            if best_score is None or score > best_score:
                best_score, best_state, stale = score, _snapshot(named), 0
                report.best_epoch, report.best_valid_hit_rate = epoch, score
            else:
                stale += 1
                if stale >= config.patience:
                    report.stopped_early = True
                    logger.info(f"Stage {stage}: early stop after epoch {epoch} (best epoch {report.best_epoch})")
                    break
        if best_state is not None:
            _restore(named, best_state)
    except (DivergenceError, InvariantViolationError) as e:
        logger.error(f"Stage {stage} failed: {e}")
        raise
    finally:
        for _, p in named:
            p.requires_grad_(False)

    after = state.group_checksums()
    _check_frozen(stage, before, after)
    report.checksums_after = after
    report.wall_clock = time.perf_counter() - started
    logger.info(f"Stage {stage} done in {report.wall_clock:.1f}s, {step} steps, checksums {_short(after)}")
    return report


def _short(checksums: Dict[str, str]) -> Dict[str, str]:
    return {k: v[:12] for k, v in checksums.items()}


def run_stage1(state: ModelState, data: StageData, config: TrainConfig) -> Tuple[LoraAdapters, StageReport]:
    """Adapter-only training on text-only prompts; Φ and Θ_F must come out unchanged."""
    report = _run_stage(state, data, _with_stage(config, "S1"))
    return state.adapters, report


def run_stage2(state: ModelState, data: StageData, config: TrainConfig) -> Tuple[FusionParams, StageReport]:
    """Fusion, projector, missing vectors and (soft mode) separator only; Φ and Θ_LoRA must come out unchanged."""
    report = _run_stage(state, data, _with_stage(config, "S2"))
    return state.fusion, report


def run_joint(state: ModelState, data: StageData, config: TrainConfig) -> Tuple[LoraAdapters, FusionParams, StageReport]:
    """Adapters and fusion parameters optimized together on hybrid prompts."""
    report = _run_stage(state, data, _with_stage(config, "JOINT"))
    return state.adapters, state.fusion, report


def _with_stage(config: TrainConfig, stage: str) -> TrainConfig:
    staged = copy.copy(config)
    staged.stage = stage
    return staged


def write_losses(
    path, reports: Sequence[StageReport], append: bool = False, curve_path=None
) -> Path:
    """
    losses.csv with columns step, stage, loss, lr; `append` adds rows to an existing file.

    With `curve_path`, the per-epoch loss curve of the same reports is
    written there as well (appended under the same rule).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not (append and path.exists())
    with open(path, "w" if fresh else "a", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=["step", "stage", "loss", "lr"], extrasaction="ignore")
        if fresh:
            writer.writeheader()
        for report in reports:
            writer.writerows(report.losses)
    if curve_path is not None:
        write_loss_curve(curve_path, reports, append=append)
    return path


LOSS_CURVE_FIELDS = ["stage", "epoch", "steps", "mean_loss", "min_loss", "max_loss", "last_lr"]


def loss_curve(report: StageReport) -> List[Dict]:
    """One row per epoch: step count, mean/min/max loss and the last learning rate."""
    by_epoch: Dict[int, List[Dict]] = {}
    for entry in report.losses:
        by_epoch.setdefault(entry["epoch"], []).append(entry)
    rows = []
    for epoch in sorted(by_epoch):
        entries = by_epoch[epoch]
        values = [entry["loss"] for entry in entries]
        rows.append({
            "stage": report.stage,
            "epoch": epoch,
            "steps": len(entries),
            "mean_loss": float(np.mean(values)),
            "min_loss": float(np.min(values)),
            "max_loss": float(np.max(values)),
            "last_lr": entries[-1]["lr"],
        })
    return rows


def write_loss_curve(path, reports: Sequence[StageReport], append: bool = False) -> Path:
    """loss_curve.csv, the per-epoch summary of `loss_curve` for every report."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not (append and path.exists())
    with open(path, "w" if fresh else "a", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=LOSS_CURVE_FIELDS)
        if fresh:
            writer.writeheader()
        for report in reports:
            writer.writerows(loss_curve(report))
    logger.info(f"Wrote loss curve for {len(reports)} stage run(s) to {path}")
    return path


ABLATION_STAGES = ("S1", "S1+S2", "S1->S2")
MODALITY_SUBSETS = ("text", "media", "ui", "bi", "text+media", "text+ui", "text+bi", "text+media+ui+bi")


def parse_modality_subset(subset: str) -> Tuple[bool, Tuple[str, ...]]:
    """'text+media' -> (include_text=True, ('media',))."""
    names = [name.strip() for name in subset.split("+") if name.strip()]
    unknown = set(names) - {"text", *MODALITIES}
    if unknown or not names:
        raise ConfigurationError(f"Bad modality subset '{subset}'")
    return "text" in names, tuple(m for m in MODALITIES if m in names)


def ablation_mode(subset: str, tokenization: str, separator: str) -> PromptMode:
    include_text, modalities = parse_modality_subset(subset)
    if not modalities:
        return TEXT_ONLY
    if not include_text:
        # Unimodal non-text rows: the modality's indicator and feature only
        return PromptMode("prompt_style", separator, modalities, include_text=False)
    return PromptMode(tokenization, separator, modalities, include_text=True)


@dataclass
class AblationAxes:
    stages: Tuple[str, ...] = ("S1", "S1->S2")
    modalities: Tuple[str, ...] = ("text+media+ui+bi",)
    tokenizations: Tuple[str, ...] = ("fusion",)
    separators: Tuple[str, ...] = ("soft",)

    def validate(self):
        bad = [s for s in self.stages if s not in ABLATION_STAGES]
        if bad:
            raise ConfigurationError(f"Unknown ablation stages {bad}; choose from {ABLATION_STAGES}")
        for subset in self.modalities:
            parse_modality_subset(subset)
        for name, allowed, values in (
            ("tokenizations", ("fusion", "prompt_style"), self.tokenizations),
            ("separators", ("textual", "none", "soft"), self.separators),
        ):
            if not values or any(v not in allowed for v in values):
                raise ConfigurationError(f"Bad {name} {list(values)}; choose from {allowed}")
        if not self.stages or not self.modalities:
            raise ConfigurationError("Every ablation axis needs at least one value")

    def rows(self):
        return list(itertools.product(self.stages, self.modalities, self.tokenizations, self.separators))

    @property
    def n_rows(self) -> int:
        return len(self.stages) * len(self.modalities) * len(self.tokenizations) * len(self.separators)


@dataclass
class AblationContext:
    """Shared inputs of every ablation row: one world, one base, one set of samples."""
    world: World
    features: ModalityFeatures
    base: BaseLM
    vocab: Vocabulary
    train: List[PromptInstance]
    valid: List[PromptInstance]
    test: List[PromptInstance]
    fusion_config: FusionConfig
    seed: int = 0
    workers: int = WORKERS


def run_ablation_matrix(context: AblationContext, axes: AblationAxes, config: TrainConfig) -> Tuple[List[Dict], List[StageReport]]:
    """
    Train and evaluate every combination of the axes from the same seed.

    S1 is trained once and shared by every row that starts from it.

    Returns:
        (report rows, stage reports)
    """
    axes.validate()
    data = StageData(context.world, context.features, context.train, context.valid)
    initial = ModelState.initial(context.base, context.vocab, context.fusion_config, seed=context.seed)
    reports: List[StageReport] = []
    s1_state: Optional[ModelState] = None
    rows = []
    logger.info(f"Ablation matrix: {axes.n_rows} rows")
    for stage, subset, tokenization, separator in axes.rows():
        mode = ablation_mode(subset, tokenization, separator)
        if stage in ("S1", "S1->S2") and s1_state is None:
            s1_state = initial.clone()
            reports.append(run_stage1(s1_state, data, _with_stage(config, "S1"))[1])
        if stage == "S1":
            state, eval_mode = s1_state, TEXT_ONLY
        elif mode.tokenization == "text_only":
            # No non-textual token to train: the row reduces to text-only adapter training
            eval_mode = TEXT_ONLY
            if stage == "S1->S2":
                state = s1_state
            else:
                state = initial.clone()
                reports.append(run_stage1(state, data, _with_stage(config, "S1"))[1])
        elif stage == "S1->S2":
            state, eval_mode = s1_state.clone(), mode
            staged = _with_stage(config, "S2")
            staged.prompt_mode = mode
            reports.append(run_stage2(state, data, staged)[1])
        else:
            state, eval_mode = initial.clone(), mode
            staged = _with_stage(config, "JOINT")
            staged.prompt_mode = mode
            reports.append(run_joint(state, data, staged)[2])
        predictor = ModelPredictor(state, context.world, context.features, eval_mode)
        metrics = evaluate(predictor, context.test, context.workers)
        rows.append(report_row(
            f"{stage}|{subset}|{tokenization}|{separator}",
            metrics,
            stage=stage,
            modalities=subset,
            tokenization=eval_mode.tokenization,
            separator=separator,
        ))
    return rows, reports

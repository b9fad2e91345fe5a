"""Main entry point for the bundle-forge pipeline."""
import argparse
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from src.checkpoint import CHECKPOINT_HEADER, load_into, save_checkpoint
from src.config import (
    BATCH_SIZE,
    BUNDLE_FORGE_DIR,
    CANDIDATE_SWEEP,
    DEFAULT_SEED,
    EMBED_DIM,
    GRAPH_LAYERS,
    IS_TESTING,
    LOG_FILE,
    LOG_LEVEL,
    MAX_EPOCHS,
    N_CANDIDATES,
    PEAK_LR,
    SAMPLE_COUNT,
    SPLIT_RATIOS,
    WARMUP_RATIO,
    WORKERS,
)
from src.constants import TEMPLATE_VERSION, format_metrics_line, format_table, get_template_hash
from src.dataset import (
    LEARNABILITY_MODES,
    SCHEMA_VERSION,
    SPLIT_MODES,
    GenConfig,
    World,
    generate_world,
    load_splits,
    load_world,
    sample_instances,
    save_splits,
    save_world,
    split_bundles,
)
from src.errors import BundleForgeError, ConfigurationError, DependencyError
from src.evaluation import (
    DotProductPredictor,
    ModelPredictor,
    OraclePredictor,
    PopularityPredictor,
    RandomPredictor,
    candidate_size_sweep,
    cold_evaluation,
    evaluate,
    report_row,
    write_report,
)
from src.features import MODALITIES, ModalityFeatures, load_feature_table, media_features, save_feature_table
from src.fusion import FusionConfig
from src.logger import get_logger, setup_logging
from src.prompting import SEPARATORS, TEXT_ONLY, PromptMode, compare_token_counts
from src.relational import BipartiteGraph, RelationalConfig, export_features, train_relational
from src.seeding import substream, torch_seed
from src.tinylm import BaseLM, LMConfig, PretrainConfig, Vocabulary, build_vocab, pretrain_base, pretraining_corpus
from src.training import (
    ABLATION_STAGES,
    AblationAxes,
    AblationContext,
    ModelState,
    StageData,
    TrainConfig,
    run_ablation_matrix,
    run_joint,
    run_stage1,
    run_stage2,
    write_losses,
)

logger = get_logger(__name__)

COMMON_DEFAULTS = {"run_dir": str(BUNDLE_FORGE_DIR), "seed": DEFAULT_SEED, "workers": WORKERS}

TRAIN_DEFAULTS = {
    "sample_count": SAMPLE_COUNT,
    "valid_samples": 128,
    "batch_size": BATCH_SIZE,
    "max_epochs": MAX_EPOCHS,
    "peak_lr": PEAK_LR,
    "warmup_ratio": WARMUP_RATIO,
    "max_steps": None,
    "n_candidates": N_CANDIDATES,
    "tokenization": "fusion",
    "separator": "soft",
    "modalities": list(MODALITIES),
}

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "gen-world": {f.name: f.default for f in fields(GenConfig)},
    "split": {"ratios": list(SPLIT_RATIOS), "split_mode": "random"},
    "train-relational": {
        "k": GRAPH_LAYERS,
        "embed_dim": EMBED_DIM,
        "epochs": 60,
        "lr": 1e-2,
        "l2": 1e-4,
        "include_layer0": False,
    },
    "pretrain": {f.name: f.default for f in fields(PretrainConfig) if f.name != "seed"},
    "train": {"stage": "s1", **TRAIN_DEFAULTS},
    "eval": {
        "stage": "s1",
        "baseline": "model",
        "sizes": None,
        "cold": False,
        "tokens": False,
        "timing": False,
        "n_samples": None,
        "n_candidates": N_CANDIDATES,
        "separator": "soft",
        "modalities": list(MODALITIES),
    },
    "ablate": {
        **TRAIN_DEFAULTS,
        "stages": ["S1", "S1->S2"],
        "modality_subsets": ["text+media+ui+bi"],
        "tokenizations": ["fusion"],
        "separators": ["soft"],
        "n_samples": None,
    },
    "tokens": {"n_samples": 100, "n_candidates": N_CANDIDATES, "separator": "soft", "modalities": list(MODALITIES)},
}

BASELINES = ("model", "random", "oracle", "dot", "popularity")
CLI_STAGES = ("s1", "s2", "joint")


@dataclass
class RunManifest:
    """Identity of a command run; embedded in every report."""
    command: str
    config_path: Optional[str]
    config_hash: str
    master_seed: int
    template_hash: str
    output_dir: str
    artifact_versions: Dict[str, Any] = field(default_factory=lambda: {
        "world_schema": SCHEMA_VERSION,
        "template": TEMPLATE_VERSION,
        "checkpoint": CHECKPOINT_HEADER,
    })


class RunPaths:
    """File layout of one run directory."""

    def __init__(self, root):
        self.root = Path(root)

    @property
    def world(self) -> Path:
        return self.root / "world.json"

    @property
    def splits(self) -> Path:
        return self.root / "splits.json"

    def features(self, modality: str) -> Path:
        return self.root / "features" / f"{modality}.features"

    @property
    def vocab(self) -> Path:
        return self.root / "vocab.txt"

    def checkpoint(self, group: str, stage: str) -> Path:
        return self.root / "checkpoints" / f"{group}-{stage}.ckpt"

    @staticmethod
    def meta(path: Path) -> Path:
        return path.with_name(path.name + ".meta.json")

    @property
    def losses(self) -> Path:
        return self.root / "losses.csv"

    @property
    def loss_curve(self) -> Path:
        return self.root / "loss_curve.csv"

    @property
    def config(self) -> Path:
        return self.root / "config.json"

    @property
    def reports(self) -> Path:
        return self.root / "reports"


def config_hash(config: Dict[str, Any]) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8")).hexdigest()


def resolve_config(args: argparse.Namespace) -> Dict[str, Any]:
    """
    Defaults, then the JSON config file, then explicitly given flags.

    The file may hold common keys at top level and per-command sections
    keyed by subcommand name.
    """
    command = args.command
    merged = {**COMMON_DEFAULTS, **DEFAULTS[command]}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigurationError(f"Config file {path} does not exist")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Config file {path} is not valid JSON: {e.msg} (line {e.lineno})")
        if not isinstance(data, dict):
            raise ConfigurationError(f"Config file {path} must hold a JSON object")
        section = data.get(command, {})
        flat = {k: v for k, v in data.items() if k not in DEFAULTS}
        for source in (flat, section):
            unknown = set(source) - set(merged)
            if unknown:
                raise ConfigurationError(f"Unknown config keys for '{command}': {sorted(unknown)}")
            merged.update(source)
    for key in merged:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = list(value) if isinstance(value, tuple) else value
    return merged


def _guard(path: Path, force: bool):
    if path.exists() and not force:
        raise ConfigurationError(f"{path} already exists; pass --force to overwrite")


def _require(path: Path, produced_by: str) -> Path:
    if not path.exists():
        raise DependencyError(f"{path} is missing; run '{produced_by}' first")
    return path


def _echo_config(paths: RunPaths, command: str, config: Dict[str, Any]):
    echoed = {}
    if paths.config.exists():
        echoed = json.loads(paths.config.read_text(encoding="utf-8"))
    echoed[command] = config
    paths.root.mkdir(parents=True, exist_ok=True)
    paths.config.write_text(json.dumps(echoed, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _write_json(path: Path, data: Dict[str, Any]):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _report_dir(paths: RunPaths, command: str, force: bool) -> Path:
    if force:
        return paths.reports / command
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    directory = paths.reports / f"{command}-{stamp}"
    suffix = 1
    while directory.exists():
        directory = paths.reports / f"{command}-{stamp}-{suffix}"
        suffix += 1
    return directory


def _load_world_and_splits(paths: RunPaths):
    world = load_world(_require(paths.world, "gen-world"))
    splits = load_splits(_require(paths.splits, "split"))
    return world, splits


def _load_features(paths: RunPaths, world: World) -> ModalityFeatures:
    features = ModalityFeatures(
        media=media_features(world),
        ui=load_feature_table(_require(paths.features("ui"), "train-relational"), name="ui"),
        bi=load_feature_table(_require(paths.features("bi"), "train-relational"), name="bi"),
    )
    features.check_items(world.n_items)
    return features


def _load_base(paths: RunPaths) -> Tuple[BaseLM, Vocabulary]:
    checkpoint = _require(paths.checkpoint("base", "pretrain"), "pretrain")
    vocab = Vocabulary.load(_require(paths.vocab, "pretrain"))
    meta = json.loads(_require(RunPaths.meta(checkpoint), "pretrain").read_text(encoding="utf-8"))
    base = BaseLM(LMConfig(**meta["lm_config"]))
    load_into(base, checkpoint)
    return base.freeze(), vocab


def _fusion_config(world: World, features: Optional[ModalityFeatures], base: BaseLM, seed: int) -> FusionConfig:
    relational_dim = features.ui.dim if features is not None else EMBED_DIM
    return FusionConfig(
        media_dim=world.gen_config.d_m,
        relational_dim=relational_dim,
        lm_dim=base.d_model,
        seed=torch_seed(seed, "init", 2),
    )


def _prompt_mode(config: Dict[str, Any]) -> PromptMode:
    return PromptMode(
        tokenization=config.get("tokenization", "fusion"),
        separator=config["separator"],
        modalities=tuple(config["modalities"]),
    )


def _stage_samples(world: World, splits, config: Dict[str, Any], seed: int):
    C = config["n_candidates"]
    train = sample_instances(world, splits.train, C, substream(seed, "sampling"), n_samples=config["sample_count"])
    valid = []
    if splits.valid and config["valid_samples"]:
        valid = sample_instances(world, splits.valid, C, substream(seed, "sampling", 1), n_samples=config["valid_samples"])
    return train, valid


def _test_instances(world: World, splits, n_candidates: int, n_samples: Optional[int], seed: int):
    return sample_instances(world, splits.test, n_candidates, substream(seed, "eval"), n_samples=n_samples)


def _train_config(config: Dict[str, Any], stage: str, seed: int) -> TrainConfig:
    return TrainConfig(
        stage=stage,
        sample_count=config["sample_count"],
        batch_size=config["batch_size"],
        max_epochs=config["max_epochs"],
        peak_lr=config["peak_lr"],
        warmup_ratio=config["warmup_ratio"],
        n_candidates=config["n_candidates"],
        prompt_mode=_prompt_mode(config) if stage != "S1" else PromptMode(),
        max_steps=config["max_steps"],
        seed=torch_seed(seed, "training"),
    )


def _load_state(paths: RunPaths, world: World, stage: str, seed: int) -> Tuple[ModelState, PromptMode, Optional[ModalityFeatures]]:
    """Rebuild the trained state of `stage` from its checkpoints."""
    base, vocab = _load_base(paths)
    features = None
    if stage != "s1" or paths.features("ui").exists():
        features = _load_features(paths, world)
    state = ModelState.initial(base, vocab, _fusion_config(world, features, base, seed), seed=torch_seed(seed, "init", 1))
    lora_stage = "joint" if stage == "joint" else "s1"
    lora_path = paths.checkpoint("lora", lora_stage)
    load_into(state.adapters, _require(lora_path, f"train --stage {lora_stage}"))
    if stage == "s1":
        return state, TEXT_ONLY, features
    fusion_path = _require(paths.checkpoint("fusion", stage), f"train --stage {stage}")
    load_into(state.theta_f(), fusion_path)
    meta = json.loads(RunPaths.meta(fusion_path).read_text(encoding="utf-8"))
    return state, PromptMode.from_dict(meta["prompt_mode"]), features


def cmd_gen_world(config: Dict[str, Any], paths: RunPaths, force: bool) -> Dict[str, Any]:
    """Generate and save a synthetic world."""
    _guard(paths.world, force)
    gen_config = GenConfig.from_dict({k: config[k] for k in DEFAULTS["gen-world"]})
    world = generate_world(gen_config, torch_seed(config["seed"], "world"))
    save_world(world, paths.world)
    digest = hashlib.sha256(paths.world.read_bytes()).hexdigest()
    logger.info(f"World file hash {digest}")
    return {"world": str(paths.world), "sha256": digest, "n_items": world.n_items, "n_bundles": world.n_bundles}


def cmd_split(config: Dict[str, Any], paths: RunPaths, force: bool) -> Dict[str, Any]:
    _guard(paths.splits, force)
    world = load_world(_require(paths.world, "gen-world"))
    splits = split_bundles(world, config["ratios"], config["split_mode"], substream(config["seed"], "world", 1))
    save_splits(splits, paths.splits)
    return {"train": len(splits.train), "valid": len(splits.valid), "test": len(splits.test), "dropped": splits.dropped}


def cmd_train_relational(config: Dict[str, Any], paths: RunPaths, force: bool) -> Dict[str, Any]:
    """Fit user-level (ui) and bundle-level (bi) relational features."""
    for modality in ("ui", "bi"):
        _guard(paths.features(modality), force)
    world, splits = _load_world_and_splits(paths)
    graphs = [BipartiteGraph.from_world_users(world), BipartiteGraph.from_world_bundles(world, splits.train)]
    summary = {}
    for index, graph in enumerate(graphs):
        rel_config = RelationalConfig(
            embed_dim=config["embed_dim"],
            n_layers=config["k"],
            lr=config["lr"],
            l2=config["l2"],
            epochs=config["epochs"],
            include_layer0=config["include_layer0"],
            seed=torch_seed(config["seed"], "relational", index),
        )
        table = train_relational(graph, rel_config)
        save_feature_table(export_features(table, graph), paths.features(graph.name))
        epochs = [entry["loss"] for entry in table.log if entry["event"] == "epoch"]
        summary[graph.name] = {"first_loss": epochs[0] if epochs else None, "last_loss": epochs[-1] if epochs else None}
    return summary


def cmd_pretrain(config: Dict[str, Any], paths: RunPaths, force: bool) -> Dict[str, Any]:
    """Build the vocabulary and pretrain the base LM on training-split text."""
    checkpoint = paths.checkpoint("base", "pretrain")
    _guard(checkpoint, force)
    world, splits = _load_world_and_splits(paths)
    corpus = pretraining_corpus(world, splits.train)
    vocab = build_vocab(corpus)
    vocab.save(paths.vocab)
    lm_config = LMConfig(vocab_size=len(vocab), seed=torch_seed(config["seed"], "init"))
    pretrain_config = PretrainConfig(
        **{k: config[k] for k in DEFAULTS["pretrain"]},
        seed=torch_seed(config["seed"], "training", 99),
    )
    base, log = pretrain_base(corpus, vocab, lm_config, pretrain_config)
    save_checkpoint(checkpoint, base.named_parameters())
    _write_json(RunPaths.meta(checkpoint), {"lm_config": asdict(lm_config), "log": log})
    return {"vocab_size": len(vocab), "checksum": base.checksum(), "log": log}


def cmd_train(config: Dict[str, Any], paths: RunPaths, force: bool) -> Dict[str, Any]:
    """Run one optimization stage and checkpoint its trainable groups."""
    stage = config["stage"]
    if stage not in CLI_STAGES:
        raise ConfigurationError(f"--stage must be one of {CLI_STAGES}, got '{stage}'")
    seed = config["seed"]
    if stage == "s2":
        _require(paths.checkpoint("lora", "s1"), "train --stage s1")
    world, splits = _load_world_and_splits(paths)
    base, vocab = _load_base(paths)
    features = _load_features(paths, world) if stage != "s1" else None
    state = ModelState.initial(base, vocab, _fusion_config(world, features, base, seed), seed=torch_seed(seed, "init", 1))
    if stage == "s2":
        load_into(state.adapters, paths.checkpoint("lora", "s1"))

    train, valid = _stage_samples(world, splits, config, seed)
    data = StageData(world, features, train, valid)
    train_config = _train_config(config, stage.upper(), seed)
    if stage == "s1":
        _, report = run_stage1(state, data, train_config)
    elif stage == "s2":
        _, report = run_stage2(state, data, train_config)
    else:
        _, _, report = run_joint(state, data, train_config)

    if stage in ("s1", "joint"):
        save_checkpoint(paths.checkpoint("lora", stage), state.adapters.named_parameters())
    if stage in ("s2", "joint"):
        fusion_path = paths.checkpoint("fusion", stage)
        save_checkpoint(fusion_path, state.theta_f().named_parameters())
        _write_json(RunPaths.meta(fusion_path), {
            "prompt_mode": train_config.prompt_mode.to_dict(),
            "fusion_config": asdict(state.fusion.config),
        })
    write_losses(paths.losses, [report], append=True, curve_path=paths.loss_curve)
    return {"stage_report": report.to_dict()}


def _predictor(baseline: str, paths: RunPaths, world: World, splits, stage: str, seed: int):
    if baseline == "random":
        return RandomPredictor(torch_seed(seed, "eval"))
    if baseline == "oracle":
        return OraclePredictor()
    if baseline == "popularity":
        return PopularityPredictor(world, splits.train)
    if baseline == "dot":
        return DotProductPredictor(_load_features(paths, world).bi)
    state, mode, features = _load_state(paths, world, stage, seed)
    return ModelPredictor(state, world, features, mode)


def _token_rows(paths: RunPaths, world: World, splits, config: Dict[str, Any]) -> List[Dict[str, Any]]:
    seed = config["seed"]
    base, vocab = _load_base(paths)
    features = _load_features(paths, world)
    state = ModelState.initial(base, vocab, _fusion_config(world, features, base, seed), seed=torch_seed(seed, "init", 1))
    instances = _test_instances(world, splits, config["n_candidates"], config["n_samples"], seed)
    return compare_token_counts(instances, world, features, state.encoder, config["separator"], config["modalities"])


def cmd_eval(config: Dict[str, Any], paths: RunPaths, force: bool) -> Dict[str, Any]:
    """Evaluate a trained stage or a baseline; sweeps, cold runs and token counts on request."""
    seed = config["seed"]
    world, splits = _load_world_and_splits(paths)
    if config["tokens"]:
        return {"token_counts": _token_rows(paths, world, splits, config)}
    if config["baseline"] not in BASELINES:
        raise ConfigurationError(f"--baseline must be one of {BASELINES}")
    predictor = _predictor(config["baseline"], paths, world, splits, config["stage"], seed)
    if config["cold"] or config["sizes"]:
        sizes = config["sizes"] or list(CANDIDATE_SWEEP)
        sweep_seed = torch_seed(seed, "sweep")
        if config["cold"]:
            sweep = cold_evaluation(
                predictor, world, splits, sizes, sweep_seed, config["n_samples"], config["workers"], config["timing"]
            )
        else:
            sweep = candidate_size_sweep(
                predictor, world, splits.test, sizes, sweep_seed, config["n_samples"], config["workers"], config["timing"]
            )
        rows = [report_row(r["label"], r["metrics"], n_candidates=r["n_candidates"]) for r in sweep]
        records = {r["label"]: r["metrics"].to_dict()["records"] for r in sweep}
    else:
        instances = _test_instances(world, splits, config["n_candidates"], config["n_samples"], seed)
        metrics = evaluate(predictor, instances, config["workers"], config["timing"])
        label = f"{predictor.name}:{config['stage']}" if config["baseline"] == "model" else predictor.name
        rows = [report_row(label, metrics, n_candidates=config["n_candidates"])]
        records = {label: metrics.to_dict()["records"]}
    return {"rows": rows, "records": records}


def cmd_ablate(config: Dict[str, Any], paths: RunPaths, force: bool) -> Dict[str, Any]:
    """Run the ablation matrix over stages, modality subsets, tokenizations and separators."""
    seed = config["seed"]
    world, splits = _load_world_and_splits(paths)
    base, vocab = _load_base(paths)
    features = _load_features(paths, world)
    train, valid = _stage_samples(world, splits, config, seed)
    context = AblationContext(
        world=world,
        features=features,
        base=base,
        vocab=vocab,
        train=train,
        valid=valid,
        test=_test_instances(world, splits, config["n_candidates"], config["n_samples"], seed),
        fusion_config=_fusion_config(world, features, base, seed),
        seed=torch_seed(seed, "init", 1),
        workers=config["workers"],
    )
    axes = AblationAxes(
        stages=tuple(config["stages"]),
        modalities=tuple(config["modality_subsets"]),
        tokenizations=tuple(config["tokenizations"]),
        separators=tuple(config["separators"]),
    )
    rows, reports = run_ablation_matrix(context, axes, _train_config(config, "S1", seed))
    write_losses(paths.losses, reports, append=True, curve_path=paths.loss_curve)
    logger.info("\n" + format_table(rows, ["label", "hit_rate_at_1", "valid_ratio", "n_instances"]))
    return {"rows": rows, "stage_reports": [r.to_dict() for r in reports]}


def cmd_tokens(config: Dict[str, Any], paths: RunPaths, force: bool) -> Dict[str, Any]:
    world, splits = _load_world_and_splits(paths)
    return {"token_counts": _token_rows(paths, world, splits, config)}


COMMANDS = {
    "gen-world": cmd_gen_world,
    "split": cmd_split,
    "train-relational": cmd_train_relational,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "tokens": cmd_tokens,
}


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return value


def _non_negative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected an integer >= 0, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bundle-forge", description="Bundle completion with a hybrid-token language model")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--run-dir", dest="run_dir", help="Artifact directory (default: $BUNDLE_FORGE_DIR)")
    common.add_argument("--seed", type=int, help="Master seed")
    common.add_argument("--config", help="JSON config file; flags override its values")
    common.add_argument("--workers", type=_positive_int, help="Evaluation parallelism")
    common.add_argument("--force", action="store_true", help="Overwrite artifacts and write reports without a timestamp")
    common.add_argument("--log-level", dest="log_level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-world", parents=[common], help="Generate a synthetic world")
    p.add_argument("--n-items", dest="n_items", type=_positive_int)
    p.add_argument("--n-bundles", dest="n_bundles", type=_positive_int)
    p.add_argument("--n-users", dest="n_users", type=_positive_int)
    p.add_argument("--d-m", dest="d_m", type=_positive_int)
    p.add_argument("--mode", dest="learnability_mode", choices=LEARNABILITY_MODES)

    p = sub.add_parser("split", parents=[common], help="Split bundles into train/valid/test")
    p.add_argument("--ratios", type=float, nargs=3)
    p.add_argument("--mode", dest="split_mode", choices=SPLIT_MODES)

    p = sub.add_parser("train-relational", parents=[common], help="Train user-level and bundle-level features")
    p.add_argument("--k", type=_positive_int)
    p.add_argument("--dim", dest="embed_dim", type=_positive_int)
    p.add_argument("--epochs", type=_non_negative_int)
    p.add_argument("--lr", type=float)
    p.add_argument("--include-layer0", dest="include_layer0", action="store_const", const=True)

    p = sub.add_parser("pretrain", parents=[common], help="Pretrain and freeze the base language model")
    p.add_argument("--steps", type=_non_negative_int)
    p.add_argument("--batch-size", dest="batch_size", type=_positive_int)
    p.add_argument("--lr", type=float)

    def add_training_flags(p):
        p.add_argument("--samples", dest="sample_count", type=_positive_int)
        p.add_argument("--valid-samples", dest="valid_samples", type=_non_negative_int)
        p.add_argument("--batch-size", dest="batch_size", type=_positive_int)
        p.add_argument("--epochs", dest="max_epochs", type=_non_negative_int)
        p.add_argument("--lr", dest="peak_lr", type=float)
        p.add_argument("--max-steps", dest="max_steps", type=_non_negative_int)
        p.add_argument("--candidates", dest="n_candidates", type=_positive_int)
        p.add_argument("--separator", choices=SEPARATORS)
        p.add_argument("--modalities", nargs="*", choices=MODALITIES)

    p = sub.add_parser("train", parents=[common], help="Run a training stage")
    p.add_argument("--stage", choices=CLI_STAGES)
    p.add_argument("--tokenization", choices=("fusion", "prompt_style"))
    add_training_flags(p)

    p = sub.add_parser("eval", parents=[common], help="Evaluate a stage or a baseline")
    p.add_argument("--stage", choices=CLI_STAGES)
    p.add_argument("--baseline", choices=BASELINES)
    p.add_argument("--sizes", type=_positive_int, nargs="+")
    p.add_argument("--cold", action="store_const", const=True)
    p.add_argument("--tokens", action="store_const", const=True)
    p.add_argument("--timing", action="store_const", const=True, help="Record per-instance inference time")
    p.add_argument("--n-samples", dest="n_samples", type=_positive_int)
    p.add_argument("--candidates", dest="n_candidates", type=_positive_int)
    p.add_argument("--separator", choices=SEPARATORS)
    p.add_argument("--modalities", nargs="*", choices=MODALITIES)

    p = sub.add_parser("ablate", parents=[common], help="Run the ablation matrix")
    add_training_flags(p)
    p.add_argument("--stages", nargs="+", choices=ABLATION_STAGES)
    p.add_argument("--modality-subsets", dest="modality_subsets", nargs="+")
    p.add_argument("--tokenizations", nargs="+", choices=("fusion", "prompt_style"))
    p.add_argument("--separators", nargs="+", choices=SEPARATORS)
    p.add_argument("--n-samples", dest="n_samples", type=_positive_int)

    p = sub.add_parser("tokens", parents=[common], help="Compare prompt lengths across tokenizations")
    p.add_argument("--n-samples", dest="n_samples", type=_positive_int)
    p.add_argument("--candidates", dest="n_candidates", type=_positive_int)
    p.add_argument("--separator", choices=SEPARATORS)
    p.add_argument("--modalities", nargs="+", choices=MODALITIES)
    return parser


def run(args: argparse.Namespace) -> Path:
    """Execute a parsed command and write its report; returns the report path."""
    config = resolve_config(args)
    paths = RunPaths(config["run_dir"])
    logger.info("=" * 60)
    logger.info(f"bundle-forge {args.command} (seed {config['seed']}, run dir {paths.root})")
    logger.info("=" * 60)
    result = COMMANDS[args.command](config, paths, args.force)
    _echo_config(paths, args.command, config)

    report_dir = _report_dir(paths, args.command, args.force)
    manifest = RunManifest(
        command=args.command,
        config_path=args.config,
        config_hash=config_hash(config),
        master_seed=config["seed"],
        template_hash=get_template_hash(),
        output_dir=str(report_dir.relative_to(paths.root)),
    )
    rows = result.pop("rows", [])
    records = result.pop("records", None)
    for row in rows:
        logger.info(format_metrics_line(row["label"], row))
    return write_report(report_dir, asdict(manifest), config, manifest.template_hash, rows, records, extra=result)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main function; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(log_file=None if IS_TESTING else LOG_FILE, level=args.log_level or LOG_LEVEL)
    try:
        report = run(args)
    except BundleForgeError as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {e}")
        return 1
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return 130
    logger.info(f"✓ {args.command} complete; report at {report}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

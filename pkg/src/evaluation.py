"""HitRate@1 / ValidRatio evaluation, candidate-size sweeps, cold-split runs and reference baselines."""
import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from src.config import CANDIDATE_SWEEP, WORKERS
from src.constants import MAX_CANDIDATES, OPTION_LETTERS, format_metrics_line
from src.dataset import PromptInstance, Splits, World, sample_prompt_instance
from src.errors import (
    InvariantViolationError,
    PreconditionError,
    SamplingError,
    ValidationError,
)
from src.features import FeatureTable
from src.logger import get_logger
from src.prompting import INVALID, parse_answer
from src.seeding import substream

logger = get_logger(__name__)

REPORT_KEYS = ("manifest", "config", "template_hash", "rows")
ROW_KEYS = ("label", "hit_rate_at_1", "valid_ratio", "n_instances")


@dataclass
class InstanceRecord:
    bundle_id: int
    n_candidates: int
    positive_index: int
    predicted: int
    output: Optional[str] = None
    seconds: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        if self.seconds is None:
            data.pop("seconds")
        return data

    @property
    def valid(self) -> bool:
        return self.predicted != INVALID

    @property
    def hit(self) -> bool:
        return self.predicted == self.positive_index


@dataclass
class Metrics:
    """Summary metrics; always recomputable from `records`."""
    hit_rate_at_1: float
    valid_ratio: float
    n_instances: int
    records: List[InstanceRecord] = field(default_factory=list)

    @classmethod
    def from_records(cls, records: Sequence[InstanceRecord]) -> "Metrics":
        if not records:
            raise PreconditionError("Cannot compute metrics over zero instances")
        n = len(records)
        hits = sum(1 for r in records if r.hit)
        valid = sum(1 for r in records if r.valid)
        return cls(hit_rate_at_1=hits / n, valid_ratio=valid / n, n_instances=n, records=list(records))

    @property
    def mean_seconds(self) -> Optional[float]:
        """Mean per-instance inference time, or None unless every record was timed."""
        if not self.records or any(r.seconds is None for r in self.records):
            return None
        return float(np.mean([r.seconds for r in self.records]))

    def summary(self) -> Dict[str, Any]:
        data = {"hit_rate_at_1": self.hit_rate_at_1, "valid_ratio": self.valid_ratio, "n_instances": self.n_instances}
        if self.mean_seconds is not None:
            data["mean_seconds"] = self.mean_seconds
        return data

    def to_dict(self, include_records: bool = True) -> Dict[str, Any]:
        data = self.summary()
        if include_records:
            data["records"] = [r.to_dict() for r in self.records]
        return data


class Predictor:
    """
    Maps a prompt instance to output text (model path) or a candidate
    index (baseline path).
    """
    name = "predictor"

    def predict(self, instance: PromptInstance) -> Union[str, int]:
        raise NotImplementedError


class ModelPredictor(Predictor):
    """Greedy decoding through a trained model state (anything with `answer(...)`)."""
    name = "model"

    def __init__(self, state, world: World, features, mode):
        self.state = state
        self.world = world
        self.features = features
        self.mode = mode

    def predict(self, instance: PromptInstance) -> str:
        return self.state.answer(instance, self.world, self.features, self.mode)


class OraclePredictor(Predictor):
    name = "oracle"

    def predict(self, instance: PromptInstance) -> str:
        return OPTION_LETTERS[instance.positive_index]


class RandomPredictor(Predictor):
    """Uniform guess; the draw depends only on the seed and the instance."""
    name = "random"

    def __init__(self, seed: int = 0):
        self.seed = seed

    def predict(self, instance: PromptInstance) -> int:
        rng = np.random.default_rng([self.seed, instance.bundle_id + 1, *instance.candidates, *instance.seed_items])
        return int(rng.integers(instance.n_candidates))


class DotProductPredictor(Predictor):
    name = "dot_product"

    def __init__(self, bundle_features: FeatureTable):
        self.bundle_features = bundle_features

    def predict(self, instance: PromptInstance) -> int:
        return dot_product_baseline(self.bundle_features, instance)


class PopularityPredictor(Predictor):
    name = "popularity"

    def __init__(self, world: World, train_bundle_ids: Sequence[int]):
        self.degree = training_degrees(world, train_bundle_ids)

    def predict(self, instance: PromptInstance) -> int:
        return _argmax_lowest([float(self.degree[c]) for c in instance.candidates])


def _argmax_lowest(scores: Sequence[float]) -> int:
    # np.argmax returns the first maximal index
    return int(np.argmax(np.asarray(scores, dtype=np.float64)))


def dot_product_baseline(bundle_features: FeatureTable, instance: PromptInstance) -> int:
    """
    Score each candidate by <z_b, z_i>, z_b the mean seed-item bundle-level vector.

    Ties go to the lowest candidate index.
    """
    z_b = bundle_features.rows(list(instance.seed_items)).numpy().mean(axis=0)
    z_c = bundle_features.rows(list(instance.candidates)).numpy()
    return _argmax_lowest(z_c @ z_b)


def training_degrees(world: World, train_bundle_ids: Sequence[int]) -> np.ndarray:
    """Per-item count of training bundles containing it."""
    members = [i for b in train_bundle_ids for i in world.bundles[b]]
    return np.bincount(np.asarray(members, dtype=np.int64), minlength=world.n_items)


def popularity_baseline(world: World, instance: PromptInstance, train_bundle_ids: Sequence[int]) -> int:
    degree = training_degrees(world, train_bundle_ids)
    return _argmax_lowest([float(degree[c]) for c in instance.candidates])


def _score_instance(predictor: Predictor, instance: PromptInstance, timed: bool = False) -> InstanceRecord:
    started = time.perf_counter()
    output = predictor.predict(instance)
    seconds = time.perf_counter() - started if timed else None
    if isinstance(output, str):
        predicted, text = parse_answer(output, instance.n_candidates), output
    else:
        index = int(output)
        predicted = index if 0 <= index < instance.n_candidates else INVALID
        text = None
    return InstanceRecord(
        bundle_id=instance.bundle_id,
        n_candidates=instance.n_candidates,
        positive_index=instance.positive_index,
        predicted=predicted,
        output=text,
        seconds=seconds,
    )


def evaluate(predictor: Predictor, instances: Sequence[PromptInstance], workers: int = WORKERS, timed: bool = False) -> Metrics:
    """
    Score every instance; INVALID outputs are misses and count against ValidRatio.

    Records keep instance order whatever the worker count. With `timed`,
    each record carries its wall-clock inference time in `seconds`; this
    column is the only non-reproducible part of a report.

    Raises:
        PreconditionError: Empty instance list
        InvariantViolationError: hit rate above valid ratio
    """
    instances = list(instances)
    if not instances:
        raise PreconditionError("evaluate needs at least one instance")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(lambda inst: _score_instance(predictor, inst, timed), instances))
    else:
        records = [_score_instance(predictor, inst, timed) for inst in instances]
    metrics = Metrics.from_records(records)
    if metrics.hit_rate_at_1 > metrics.valid_ratio:
        raise InvariantViolationError(f"hit rate {metrics.hit_rate_at_1} exceeds valid ratio {metrics.valid_ratio}")
    logger.info(format_metrics_line(predictor.name, metrics.summary()))
    return metrics


def sweep_instances(
    world: World,
    bundle_ids: Sequence[int],
    size: int,
    seed: int,
    n_samples: Optional[int] = None,
    n_seed: Optional[int] = None,
) -> List[PromptInstance]:
    """
    Instances for one candidate size.

    Bundle choice and each instance's rng depend only on the seed and the
    instance position, so seeds and positives agree across sizes.
    """
    bundle_ids = [int(b) for b in bundle_ids]
    if not bundle_ids:
        raise SamplingError("No bundles to sample from")
    if n_samples is None:
        chosen = bundle_ids
    else:
        chooser = substream(seed, "sweep")
        chosen = [int(b) for b in chooser.choice(bundle_ids, size=n_samples, replace=n_samples > len(bundle_ids))]
    return [
        sample_prompt_instance(world.bundles[b], world, n_seed, size, substream(seed, "sweep", k), bundle_id=b)
        for k, b in enumerate(chosen)
    ]


def candidate_size_sweep(
    predictor: Predictor,
    world: World,
    bundle_ids: Sequence[int],
    sizes: Sequence[int] = CANDIDATE_SWEEP,
    seed: int = 0,
    n_samples: Optional[int] = None,
    workers: int = WORKERS,
    timed: bool = False,
) -> List[Dict[str, Any]]:
    """One Metrics row per candidate size."""
    rows = []
    for size in sizes:
        if not 2 <= size <= MAX_CANDIDATES:
            raise PreconditionError(f"Candidate size {size} outside [2, {MAX_CANDIDATES}]")
        metrics = evaluate(predictor, sweep_instances(world, bundle_ids, size, seed, n_samples), workers, timed)
        rows.append({"label": f"{predictor.name}@C={size}", "n_candidates": size, "metrics": metrics})
    return rows


def check_cold_split(world: World, splits: Splits):
    """Raise if any test-bundle item also appears in a training bundle."""
    train_items = {i for b in splits.train for i in world.bundles[b]}
    test_items = {i for b in splits.test for i in world.bundles[b]}
    shared = train_items & test_items
    if shared:
        raise InvariantViolationError(f"Cold split shares {len(shared)} items between train and test")


def cold_evaluation(
    predictor: Predictor,
    world: World,
    splits: Splits,
    sizes: Sequence[int] = CANDIDATE_SWEEP,
    seed: int = 0,
    n_samples: Optional[int] = None,
    workers: int = WORKERS,
    timed: bool = False,
) -> List[Dict[str, Any]]:
    """Candidate-size sweep over the test bundles of a cold split."""
    if splits.mode != "cold":
        raise PreconditionError(f"cold_evaluation needs a cold split, got '{splits.mode}'")
    check_cold_split(world, splits)
    logger.info(f"Cold evaluation over {len(splits.test)} test bundles, sizes {list(sizes)}")
    return candidate_size_sweep(predictor, world, splits.test, sizes, seed, n_samples, workers, timed)


def report_row(label: str, metrics: Metrics, **extra) -> Dict[str, Any]:
    return {"label": label, **extra, **metrics.summary()}


def validate_report(report: Dict[str, Any]):
    """
    Structural check of a report dictionary.

    Raises:
        ValidationError: Missing keys, wrong types, or hit rate above valid ratio
    """
    for key in REPORT_KEYS:
        if key not in report:
            raise ValidationError(f"Report lacks '{key}'")
    if not isinstance(report["rows"], list):
        raise ValidationError("Report 'rows' must be a list")
    if not isinstance(report["template_hash"], str):
        raise ValidationError("Report 'template_hash' must be a string")
    for index, row in enumerate(report["rows"]):
        for key in ROW_KEYS:
            if key not in row:
                raise ValidationError(f"Report row {index} lacks '{key}'")
        hit, valid = row["hit_rate_at_1"], row["valid_ratio"]
        if not all(isinstance(v, (int, float)) and 0.0 <= v <= 1.0 for v in (hit, valid)):
            raise ValidationError(f"Report row {index} has rates outside [0, 1]")
        if hit > valid:
            raise ValidationError(f"Report row {index}: hit_rate_at_1 {hit} > valid_ratio {valid}")
        if not isinstance(row["n_instances"], int) or row["n_instances"] < 1:
            raise ValidationError(f"Report row {index} has a bad n_instances")


def write_report(
    directory,
    manifest: Dict[str, Any],
    config: Dict[str, Any],
    template_hash: str,
    rows: List[Dict[str, Any]],
    records: Optional[Dict[str, List[Dict]]] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Write report.json plus summary.csv into `directory`.

    Returns:
        Path of report.json
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    report = {
        "manifest": manifest,
        "config": config,
        "template_hash": template_hash,
        "rows": rows,
        "records": records or {},
    }
    if extra:
        report.update(extra)
    validate_report(report)
    path = directory / "report.json"
    path.write_text(json.dumps(report, sort_keys=True, indent=1) + "\n", encoding="utf-8")

    columns = list(ROW_KEYS)
    for row in rows:
        columns += [k for k in row if k not in columns]
    with open(directory / "summary.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in columns})
    logger.info(f"Wrote report with {len(rows)} rows to {path}")
    return path

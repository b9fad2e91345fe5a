"""Synthetic bundle worlds: generation, persistence, splits and prompt sampling."""
import json
import math
from dataclasses import dataclass, field, asdict, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.config import (
    DEFAULT_N_ITEMS,
    DEFAULT_N_BUNDLES,
    DEFAULT_N_USERS,
    DEFAULT_MEAN_BUNDLE_SIZE,
    DEFAULT_MEDIA_DIM,
    MIN_BUNDLE_SIZE,
)
from src.constants import (
    STYLE_WORDS,
    CATEGORY_WORDS,
    FILLER_WORDS,
    BUNDLE_SENTENCE_PREFIX,
)
from src.errors import (
    ConfigurationError,
    InfeasibleSplitError,
    InvariantViolationError,
    ParseError,
    SamplingError,
    ValidationError,
)
from src.logger import get_logger

logger = get_logger(__name__)

SCHEMA_VERSION = 1
LEARNABILITY_MODES = ("text_sufficient", "media_required", "relational_required")
SPLIT_MODES = ("random", "cold")


@dataclass(frozen=True)
class ItemRecord:
    """One catalogue item: title-like text, media vector and latent attributes."""
    item_id: int
    text: str
    media_vec: Tuple[float, ...]
    latent_category: int
    latent_style: int


@dataclass
class GenConfig:
    """Knobs for `generate_world`."""
    n_items: int = DEFAULT_N_ITEMS
    n_bundles: int = DEFAULT_N_BUNDLES
    n_users: int = DEFAULT_N_USERS
    n_categories: int = 8
    n_styles: int = 10
    d_m: int = DEFAULT_MEDIA_DIM
    mean_bundle_size: float = DEFAULT_MEAN_BUNDLE_SIZE
    min_bundle_size: int = MIN_BUNDLE_SIZE
    max_bundle_size: int = 8
    interactions_per_user: int = 12
    user_style_affinity: float = 0.8
    media_noise: float = 0.3
    learnability_mode: str = "text_sufficient"

    def validate(self):
        """Raise ConfigurationError if any field is out of range."""
        problems = []
        if self.n_items < 20:
            problems.append(f"n_items must be >= 20, got {self.n_items}")
        if self.n_bundles < 10:
            problems.append(f"n_bundles must be >= 10, got {self.n_bundles}")
        if self.n_users < 1:
            problems.append(f"n_users must be >= 1, got {self.n_users}")
        if not 2 <= self.n_categories <= len(CATEGORY_WORDS):
            problems.append(f"n_categories must be in [2, {len(CATEGORY_WORDS)}], got {self.n_categories}")
        if not 2 <= self.n_styles <= len(STYLE_WORDS):
            problems.append(f"n_styles must be in [2, {len(STYLE_WORDS)}], got {self.n_styles}")
        if self.d_m < 2:
            problems.append(f"d_m must be >= 2, got {self.d_m}")
        if self.min_bundle_size < 2:
            problems.append(f"min_bundle_size must be >= 2, got {self.min_bundle_size}")
        if self.max_bundle_size < self.min_bundle_size:
            problems.append("max_bundle_size must be >= min_bundle_size")
        if not self.min_bundle_size <= self.mean_bundle_size <= self.max_bundle_size:
            problems.append(f"mean_bundle_size {self.mean_bundle_size} outside [min, max] bundle size")
        if self.n_items // max(self.n_styles, 1) < self.min_bundle_size:
            problems.append("too few items per style to fill a minimum-size bundle")
        if self.interactions_per_user < 1:
            problems.append("interactions_per_user must be >= 1")
        if not 0.0 <= self.user_style_affinity <= 1.0:
            problems.append("user_style_affinity must be in [0, 1]")
        if self.media_noise < 0:
            problems.append("media_noise must be >= 0")
        if self.learnability_mode not in LEARNABILITY_MODES:
            problems.append(f"learnability_mode must be one of {LEARNABILITY_MODES}, got '{self.learnability_mode}'")
        if problems:
            raise ConfigurationError("Invalid world configuration: " + "; ".join(problems))

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GenConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"Unknown world config keys: {sorted(unknown)}")
        return cls(**data)


def _int_field(data: Dict[str, Any], key: str) -> int:
    value = data[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise ParseError(f"Expected an integer, got {value!r}", field=key)
    return value


@dataclass
class World:
    """Items, bundles, users and the user-item edge list of one synthetic world."""
    items: List[ItemRecord]
    bundles: List[Tuple[int, ...]]
    n_users: int
    ui_edges: List[Tuple[int, int]]
    gen_config: GenConfig
    seed: int

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def n_bundles(self) -> int:
        return len(self.bundles)

    @property
    def bi_edges(self) -> List[Tuple[int, int]]:
        """Bundle-item affiliations, always derived from `bundles`."""
        return [(b, i) for b, members in enumerate(self.bundles) for i in members]

    def item_text(self, item_id: int) -> str:
        return self.items[item_id].text

    def media_matrix(self) -> np.ndarray:
        return np.array([item.media_vec for item in self.items], dtype=np.float64)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "gen_config": asdict(self.gen_config),
            "users": self.n_users,
            "items": [
                {
                    "item_id": item.item_id,
                    "text": item.text,
                    "media_vec": list(item.media_vec),
                    "latent_category": item.latent_category,
                    "latent_style": item.latent_style,
                }
                for item in self.items
            ],
            "bundles": [list(members) for members in self.bundles],
            "ui_edges": [list(edge) for edge in self.ui_edges],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "World":
        for key in ("schema_version", "seed", "gen_config", "users", "items", "bundles", "ui_edges"):
            if key not in data:
                raise ParseError("Missing required key in world file", field=key)
        if data["schema_version"] != SCHEMA_VERSION:
            raise ParseError(f"Unsupported schema version {data['schema_version']}", field="schema_version")
        try:
            gen_config = GenConfig.from_dict(data["gen_config"])
        except (TypeError, ConfigurationError) as e:
            raise ParseError(f"Bad gen_config: {e}", field="gen_config")
        for key in ("items", "bundles", "ui_edges"):
            if not isinstance(data[key], list):
                raise ParseError(f"Expected a list, got {type(data[key]).__name__}", field=key)
        n_users, seed = _int_field(data, "users"), _int_field(data, "seed")
        items = []
        for idx, raw in enumerate(data["items"]):
            try:
                items.append(ItemRecord(
                    item_id=int(raw["item_id"]),
                    text=str(raw["text"]),
                    media_vec=tuple(float(v) for v in raw["media_vec"]),
                    latent_category=int(raw["latent_category"]),
                    latent_style=int(raw["latent_style"]),
                ))
            except (KeyError, TypeError, ValueError) as e:
                raise ParseError(f"Malformed item record: {e}", field=f"items[{idx}]")
        try:
            bundles = [tuple(int(i) for i in members) for members in data["bundles"]]
        except (TypeError, ValueError) as e:
            raise ParseError(f"Malformed bundle list: {e}", field="bundles")
        try:
            ui_edges = [(int(u), int(i)) for u, i in data["ui_edges"]]
        except (TypeError, ValueError) as e:
            raise ParseError(f"Malformed edge list: {e}", field="ui_edges")
        return cls(
            items=items,
            bundles=bundles,
            n_users=n_users,
            ui_edges=ui_edges,
            gen_config=gen_config,
            seed=seed,
        )


@dataclass(frozen=True)
class PromptInstance:
    """A partial bundle plus a lettered candidate list with one positive."""
    seed_items: Tuple[int, ...]
    candidates: Tuple[int, ...]
    positive_index: int
    bundle_id: int = -1

    @property
    def n_candidates(self) -> int:
        return len(self.candidates)

    @property
    def positive_item(self) -> int:
        return self.candidates[self.positive_index]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed_items": list(self.seed_items),
            "candidates": list(self.candidates),
            "positive_index": self.positive_index,
            "bundle_id": self.bundle_id,
        }


@dataclass
class Splits:
    """Bundle ids per partition plus the split mode and drop count."""
    train: List[int]
    valid: List[int]
    test: List[int]
    mode: str
    ratios: Tuple[float, float, float]
    dropped: int = 0
    dropped_ids: List[int] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mode": self.mode,
            "ratios": list(self.ratios),
            "train": self.train,
            "valid": self.valid,
            "test": self.test,
            "dropped": self.dropped,
            "dropped_ids": self.dropped_ids,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Splits":
        for key in ("mode", "ratios", "train", "valid", "test", "dropped"):
            if key not in data:
                raise ParseError("Missing required key in splits file", field=key)
        return cls(
            train=[int(b) for b in data["train"]],
            valid=[int(b) for b in data["valid"]],
            test=[int(b) for b in data["test"]],
            mode=str(data["mode"]),
            ratios=tuple(float(r) for r in data["ratios"]),
            dropped=int(data["dropped"]),
            dropped_ids=[int(b) for b in data.get("dropped_ids", [])],
        )


def _item_text(style: int, category: int, fillers: Sequence[str], mode: str) -> str:
    if mode == "text_sufficient":
        return f"{STYLE_WORDS[style]} {fillers[0]} {CATEGORY_WORDS[category]}"
    # The style word is withheld; two fillers keep the title length constant.
    return f"{fillers[0]} {fillers[1]} {CATEGORY_WORDS[category]}"


def _pick_bundle(pool: np.ndarray, categories: np.ndarray, size: int, rng: np.random.Generator) -> Tuple[int, ...]:
    shuffled = pool[rng.permutation(len(pool))]
    chosen, seen = [], set()
    # Distinct categories first, then top up from the remainder
    for item in shuffled:
        if categories[item] not in seen:
            chosen.append(int(item))
            seen.add(categories[item])
        if len(chosen) == size:
            break
    if len(chosen) < size:
        rest = [int(i) for i in shuffled if int(i) not in chosen]
        chosen.extend(rest[:size - len(chosen)])
    return tuple(sorted(chosen))


def generate_world(config: GenConfig, seed: int) -> World:
    """
    Build a synthetic world whose bundles are style-coherent.

    The bundle-defining attribute (style) is visible in item text under
    `text_sufficient`, only in the media vector under `media_required`,
    and only through bundle/user co-occurrence under `relational_required`.

    Args:
        config: Generation settings
        seed: Seed for the world's random stream

    Returns:
        A World that passes `validate_world`

    Raises:
        ConfigurationError: If the config is out of range
    """
    config.validate()
    rng = np.random.default_rng(seed)
    mode = config.learnability_mode
    logger.info(
        f"Generating world: {config.n_items} items, {config.n_bundles} bundles, "
        f"{config.n_users} users, mode={mode}, seed={seed}"
    )

    styles = rng.permutation(np.arange(config.n_items) % config.n_styles)
    categories = rng.integers(0, config.n_categories, size=config.n_items)
    style_protos = rng.normal(size=(config.n_styles, config.d_m))
    category_protos = 0.5 * rng.normal(size=(config.n_categories, config.d_m))

    items = []
    for item_id in range(config.n_items):
        fillers = rng.choice(FILLER_WORDS, size=2, replace=False)
        media = category_protos[categories[item_id]] + config.media_noise * rng.normal(size=config.d_m)
        if mode != "relational_required":
            media = media + style_protos[styles[item_id]]
        items.append(ItemRecord(
            item_id=item_id,
            text=_item_text(int(styles[item_id]), int(categories[item_id]), [str(f) for f in fillers], mode),
            media_vec=tuple(float(v) for v in media),
            latent_category=int(categories[item_id]),
            latent_style=int(styles[item_id]),
        ))

    style_pools = {s: np.flatnonzero(styles == s) for s in range(config.n_styles)}
    eligible = [s for s, pool in style_pools.items() if len(pool) >= config.min_bundle_size]
    extra_mean = config.mean_bundle_size - config.min_bundle_size
    bundles = []
    for _ in range(config.n_bundles):
        style = eligible[int(rng.integers(len(eligible)))]
        pool = style_pools[style]
        size = config.min_bundle_size + int(rng.poisson(extra_mean))
        size = min(size, config.max_bundle_size, len(pool))
        bundles.append(_pick_bundle(pool, categories, size, rng))

    ui_edges = set()
    user_styles = rng.integers(0, config.n_styles, size=config.n_users)
    for user in range(config.n_users):
        pool = style_pools[int(user_styles[user])]
        for _ in range(config.interactions_per_user):
            if len(pool) and rng.random() < config.user_style_affinity:
                item = int(pool[rng.integers(len(pool))])
            else:
                item = int(rng.integers(config.n_items))
            ui_edges.add((user, item))

    world = World(
        items=items,
        bundles=bundles,
        n_users=config.n_users,
        ui_edges=sorted(ui_edges),
        gen_config=config,
        seed=seed,
    )
    validate_world(world)
    mean_size = float(np.mean([len(b) for b in bundles]))
    logger.info(f"World generated: {len(ui_edges)} user-item edges, mean bundle size {mean_size:.3f}")
    return world


def validate_world(world: World):
    """
    Check every World invariant.

    Raises:
        ValidationError: Naming the first offending item, bundle or edge
    """
    d_m = world.gen_config.d_m
    for idx, item in enumerate(world.items):
        if item.item_id != idx:
            raise ValidationError(f"items[{idx}] has item_id {item.item_id}; ids must be unique and equal their position")
        if len(item.media_vec) != d_m:
            raise ValidationError(f"item {item.item_id} media_vec has {len(item.media_vec)} entries, expected {d_m}")
        if not all(math.isfinite(v) for v in item.media_vec):
            raise ValidationError(f"item {item.item_id} media_vec has non-finite entries")
        if not item.text.strip():
            raise ValidationError(f"item {item.item_id} has empty text")

    n_items = world.n_items
    for b, members in enumerate(world.bundles):
        if len(members) < world.gen_config.min_bundle_size:
            raise ValidationError(f"bundle {b} has {len(members)} items, below minimum {world.gen_config.min_bundle_size}")
        if len(set(members)) != len(members):
            raise ValidationError(f"bundle {b} contains duplicate items {list(members)}")
        for i in members:
            if not 0 <= i < n_items:
                raise ValidationError(f"bi edge ({b}, {i}) references missing item {i}")

    if world.n_users < 1:
        raise ValidationError("world has no users")
    for k, (u, i) in enumerate(world.ui_edges):
        if not 0 <= u < world.n_users:
            raise ValidationError(f"ui_edges[{k}] = ({u}, {i}) references missing user {u}")
        if not 0 <= i < n_items:
            raise ValidationError(f"ui_edges[{k}] = ({u}, {i}) references missing item {i}")


def world_to_json(world: World) -> str:
    return json.dumps(world.to_dict(), sort_keys=True, indent=1)


def save_world(world: World, path) -> Path:
    """Write the world as a single JSON document."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(world_to_json(world) + "\n", encoding="utf-8")
    logger.info(f"Saved world to {path}")
    return path


def load_world(path) -> World:
    """
    Read and validate a world file.

    Raises:
        ParseError: Malformed JSON or missing/mistyped fields
        ValidationError: Dangling references or broken invariants
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"Malformed world file {path}: {e.msg}", line=e.lineno)
    if not isinstance(data, dict):
        raise ParseError(f"World file {path} must hold a JSON object", line=1)
    world = World.from_dict(data)
    validate_world(world)
    logger.info(f"Loaded world from {path}: {world.n_items} items, {world.n_bundles} bundles")
    return world


def _check_ratios(ratios: Sequence[float]) -> Tuple[float, float, float]:
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigurationError(f"Split ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"Split ratios must sum to 1, got {sum(ratios)}")
    return tuple(float(r) for r in ratios)


def split_bundles(world: World, ratios: Sequence[float], mode: str, rng: np.random.Generator) -> Splits:
    """
    Partition bundle ids into train/valid/test.

    In cold mode the test bundles are grown greedily around a shared item
    set; remaining bundles touching a test item go to valid while it has
    room, and are dropped otherwise. Train is always item-disjoint from test.

    Raises:
        ConfigurationError: Bad ratios or mode
        InfeasibleSplitError: Cold mode leaves no train or no test bundle
    """
    ratios = _check_ratios(ratios)
    if mode not in SPLIT_MODES:
        raise ConfigurationError(f"Split mode must be one of {SPLIT_MODES}, got '{mode}'")
    n = world.n_bundles
    n_train = int(round(ratios[0] * n))
    n_valid = int(round(ratios[1] * n))
    n_test = n - n_train - n_valid
    order = [int(b) for b in rng.permutation(n)]

    if mode == "random":
        splits = Splits(
            train=sorted(order[:n_train]),
            valid=sorted(order[n_train:n_train + n_valid]),
            test=sorted(order[n_train + n_valid:]),
            mode=mode,
            ratios=ratios,
        )
        logger.info(f"Random split: train={len(splits.train)} valid={len(splits.valid)} test={len(splits.test)}")
        return splits

    members = [set(b) for b in world.bundles]
    rank = {b: pos for pos, b in enumerate(order)}
    remaining = list(order)
    test, test_items = [], set()
    while len(test) < max(n_test, 1) and remaining:
        best = min(remaining, key=lambda b: (len(members[b] - test_items), rank[b]))
        remaining.remove(best)
        test.append(best)
        test_items |= members[best]

    disjoint = [b for b in remaining if not members[b] & test_items]
    overlapping = [b for b in remaining if members[b] & test_items]
    valid = overlapping[:n_valid]
    dropped_ids = overlapping[n_valid:]
    if len(valid) < n_valid:
        take = min(n_valid - len(valid), max(len(disjoint) - 1, 0))
        valid.extend(disjoint[:take])
        disjoint = disjoint[take:]
    train = disjoint

    if not train:
        raise InfeasibleSplitError(
            f"Cold split infeasible: all {len(remaining)} non-test bundles share items with the "
            f"{len(test)} test bundles ({len(test_items)} test items, e.g. {sorted(test_items)[:5]})"
        )
    train_items = set().union(*(members[b] for b in train))
    if train_items & test_items:
        raise InvariantViolationError("Cold split leaked test items into train")
    logger.info(
        f"Cold split: train={len(train)} valid={len(valid)} test={len(test)} "
        f"dropped={len(dropped_ids)} test_items={len(test_items)}"
    )
    return Splits(
        train=sorted(train),
        valid=sorted(valid),
        test=sorted(test),
        mode=mode,
        ratios=ratios,
        dropped=len(dropped_ids),
        dropped_ids=sorted(dropped_ids),
    )


def save_splits(splits: Splits, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(splits.to_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8")
    logger.info(f"Saved splits to {path}")
    return path


def load_splits(path) -> Splits:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(f"Malformed splits file {path}: {e.msg}", line=e.lineno)
    return Splits.from_dict(data)


def default_n_seed(bundle_size: int) -> int:
    return max(1, bundle_size // 2)


def sample_prompt_instance(
    bundle: Sequence[int],
    world: World,
    n_seed: Optional[int],
    n_candidates: int,
    rng: np.random.Generator,
    bundle_id: int = -1,
) -> PromptInstance:
    """
    Draw seed items, one positive and C-1 uniform negatives for a bundle.

    Seeds and the positive are drawn before the negatives, so the same rng
    state yields the same seeds and positive for any candidate count.

    Raises:
        SamplingError: Bundle too small for n_seed, or too few negatives
    """
    members = [int(i) for i in bundle]
    if n_seed is None:
        n_seed = default_n_seed(len(members))
    if n_seed < 1 or len(members) <= n_seed:
        raise SamplingError(f"Bundle of size {len(members)} cannot provide {n_seed} seed items and a positive")
    if n_candidates < 2:
        raise SamplingError(f"Need at least 2 candidates, got {n_candidates}")

    order = rng.permutation(len(members))
    seed_items = tuple(members[j] for j in order[:n_seed])
    rest = [members[j] for j in order[n_seed:]]
    positive = rest[int(rng.integers(len(rest)))]

    member_set = set(members)
    pool = np.array([i for i in range(world.n_items) if i not in member_set], dtype=np.int64)
    if len(pool) < n_candidates - 1:
        raise SamplingError(f"Only {len(pool)} non-bundle items available for {n_candidates - 1} negatives")
    negatives = [int(i) for i in rng.choice(pool, size=n_candidates - 1, replace=False)]
    positive_index = int(rng.integers(n_candidates))
    candidates = negatives[:positive_index] + [positive] + negatives[positive_index:]
    return PromptInstance(
        seed_items=seed_items,
        candidates=tuple(candidates),
        positive_index=positive_index,
        bundle_id=bundle_id,
    )


def sample_instances(
    world: World,
    bundle_ids: Sequence[int],
    n_candidates: int,
    rng: np.random.Generator,
    n_samples: Optional[int] = None,
    n_seed: Optional[int] = None,
) -> List[PromptInstance]:
    """One instance per bundle id, or `n_samples` bundles drawn uniformly."""
    bundle_ids = list(bundle_ids)
    if not bundle_ids:
        raise SamplingError("No bundles to sample from")
    if n_samples is None:
        chosen = bundle_ids
    else:
        chosen = [int(b) for b in rng.choice(bundle_ids, size=n_samples, replace=n_samples > len(bundle_ids))]
    return [
        sample_prompt_instance(world.bundles[b], world, n_seed, n_candidates, rng, bundle_id=b)
        for b in chosen
    ]


def item_corpus(world: World, bundle_ids: Sequence[int]) -> List[str]:
    """Item titles plus one listing sentence per given bundle."""
    sentences = [item.text for item in world.items]
    for b in bundle_ids:
        titles = ", ".join(world.item_text(i) for i in world.bundles[b])
        sentences.append(f"{BUNDLE_SENTENCE_PREFIX} {titles}")
    return sentences

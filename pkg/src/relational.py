"""LightGCN-style relational embeddings over user-item and bundle-item graphs."""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import torch
from tqdm import tqdm

from src.config import DTYPE, EMBED_DIM, GRAPH_LAYERS, RELATIONAL_INIT_STD, IS_TESTING
from src.dataset import World
from src.errors import (
    ConfigurationError,
    DivergenceError,
    PreconditionError,
    ShapeError,
    ValidationError,
)
from src.features import FeatureTable
from src.logger import get_logger

logger = get_logger(__name__)


@dataclass
class BipartiteGraph:
    """Left/right node counts plus a duplicate-free edge array of shape (E, 2)."""
    left_count: int
    right_count: int
    edges: np.ndarray
    name: str = "graph"

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if self.left_count < 0 or self.right_count < 0:
            raise ValidationError(f"Graph '{self.name}' has negative node counts")
        if len(self.edges):
            if self.edges[:, 0].min() < 0 or self.edges[:, 0].max() >= self.left_count:
                raise ValidationError(f"Graph '{self.name}' has a left id out of range [0, {self.left_count})")
            if self.edges[:, 1].min() < 0 or self.edges[:, 1].max() >= self.right_count:
                raise ValidationError(f"Graph '{self.name}' has a right id out of range [0, {self.right_count})")
            if len(np.unique(self.edges, axis=0)) != len(self.edges):
                raise ValidationError(f"Graph '{self.name}' has duplicate edges")

    @classmethod
    def from_edges(cls, left_count: int, right_count: int, edges, name: str = "graph") -> "BipartiteGraph":
        """Build a graph, silently collapsing repeated edges."""
        edges = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
        if len(edges):
            edges = np.unique(edges, axis=0)
        return cls(left_count=left_count, right_count=right_count, edges=edges, name=name)

    @classmethod
    def from_world_users(cls, world: World) -> "BipartiteGraph":
        return cls.from_edges(world.n_users, world.n_items, world.ui_edges, name="ui")

    @classmethod
    def from_world_bundles(cls, world: World, bundle_ids: Optional[Sequence[int]] = None) -> "BipartiteGraph":
        """Bundle-item graph; bundles outside `bundle_ids` stay as isolated nodes."""
        keep = set(range(world.n_bundles)) if bundle_ids is None else set(int(b) for b in bundle_ids)
        edges = [(b, i) for b, i in world.bi_edges if b in keep]
        return cls.from_edges(world.n_bundles, world.n_items, edges, name="bi")

    @property
    def n_nodes(self) -> int:
        return self.left_count + self.right_count

    @property
    def left_degree(self) -> np.ndarray:
        return np.bincount(self.edges[:, 0], minlength=self.left_count)

    @property
    def right_degree(self) -> np.ndarray:
        return np.bincount(self.edges[:, 1], minlength=self.right_count)

    def left_neighbors(self) -> List[set]:
        neighbors = [set() for _ in range(self.left_count)]
        for left, right in self.edges:
            neighbors[left].add(int(right))
        return neighbors


@dataclass
class EmbeddingTable:
    """Layer-0 embeddings of both sides plus the layer count and training log."""
    left_emb: torch.Tensor
    right_emb: torch.Tensor
    n_layers: int = GRAPH_LAYERS
    include_layer0: bool = False
    log: List[Dict] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.left_emb.shape[1]


@dataclass
class RelationalConfig:
    """BPR training settings for one graph."""
    embed_dim: int = EMBED_DIM
    n_layers: int = GRAPH_LAYERS
    lr: float = 1e-2
    l2: float = 1e-4
    epochs: int = 60
    batch_size: int = 1024
    init_std: float = RELATIONAL_INIT_STD
    include_layer0: bool = False
    optimizer: str = "adam"
    seed: int = 0

    def validate(self):
        if self.embed_dim < 1:
            raise ConfigurationError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if self.n_layers < 1:
            raise ConfigurationError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be > 0, got {self.lr}")
        if self.l2 < 0:
            raise ConfigurationError(f"l2 must be >= 0, got {self.l2}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"optimizer must be 'adam' or 'sgd', got '{self.optimizer}'")


def normalized_adjacency(graph: BipartiteGraph) -> torch.Tensor:
    """Symmetric D^{-1/2} A D^{-1/2} over the stacked [left; right] node set."""
    n = graph.n_nodes
    left, right = graph.edges[:, 0], graph.edges[:, 1] + graph.left_count
    rows = np.concatenate([left, right])
    cols = np.concatenate([right, left])
    adj = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()
    degree = np.asarray(adj.sum(axis=1)).ravel()
    inv_sqrt = np.zeros_like(degree)
    nonzero = degree > 0
    inv_sqrt[nonzero] = degree[nonzero] ** -0.5
    norm = (sp.diags(inv_sqrt) @ adj @ sp.diags(inv_sqrt)).tocoo()
    indices = torch.as_tensor(np.vstack([norm.row, norm.col]), dtype=torch.long)
    values = torch.as_tensor(norm.data, dtype=DTYPE)
    return torch.sparse_coo_tensor(indices, values, (n, n)).coalesce()


def _check_table(graph: BipartiteGraph, left_emb: torch.Tensor, right_emb: torch.Tensor):
    if left_emb.dim() != 2 or right_emb.dim() != 2:
        raise ShapeError("Embedding tables must be 2-D")
    if left_emb.shape[0] != graph.left_count or right_emb.shape[0] != graph.right_count:
        raise ShapeError(
            f"Embedding rows ({left_emb.shape[0]}, {right_emb.shape[0]}) do not match graph "
            f"'{graph.name}' ({graph.left_count}, {graph.right_count})"
        )
    if left_emb.shape[1] != right_emb.shape[1]:
        raise ShapeError(f"Left/right embedding widths differ: {left_emb.shape[1]} vs {right_emb.shape[1]}")


def _propagate(
    adjacency: torch.Tensor, left_emb: torch.Tensor, right_emb: torch.Tensor, n_layers: int
) -> List[Tuple[torch.Tensor, torch.Tensor]]:
    n_left = left_emb.shape[0]
    stacked = torch.cat([left_emb, right_emb], dim=0)
    layers = []
    for _ in range(n_layers):
        stacked = torch.sparse.mm(adjacency, stacked)
        layers.append((stacked[:n_left], stacked[n_left:]))
    return layers


def propagate(
    graph: BipartiteGraph, emb0: EmbeddingTable, n_layers: Optional[int] = None
) -> List[Tuple[torch.Tensor, torch.Tensor]]:
    """
    Neighbour aggregation with 1/(sqrt(deg n) sqrt(deg j)) weights.

    Args:
        graph: Bipartite graph
        emb0: Layer-0 embeddings
        n_layers: Number of layers K (defaults to emb0.n_layers)

    Returns:
        [(left_k, right_k) for k = 1..K]; isolated nodes are zero at every layer
    """
    n_layers = emb0.n_layers if n_layers is None else n_layers
    if n_layers < 1:
        raise PreconditionError(f"Propagation needs K >= 1, got {n_layers}")
    _check_table(graph, emb0.left_emb, emb0.right_emb)
    return _propagate(normalized_adjacency(graph), emb0.left_emb, emb0.right_emb, n_layers)


def aggregate_layers(layers: Sequence[torch.Tensor], layer0: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Mean of layers 1..K; with `layer0` given, mean over layers 0..K instead.

    Raises:
        PreconditionError: If no layers are given
    """
    if len(layers) == 0:
        raise PreconditionError("Cannot aggregate an empty layer list")
    total = torch.stack(list(layers), dim=0).sum(dim=0)
    if layer0 is None:
        return total / len(layers)
    return (total + layer0) / (len(layers) + 1)


def _aggregated(
    adjacency: torch.Tensor,
    left_emb: torch.Tensor,
    right_emb: torch.Tensor,
    n_layers: int,
    include_layer0: bool,
) -> Tuple[torch.Tensor, torch.Tensor]:
    layers = _propagate(adjacency, left_emb, right_emb, n_layers)
    z_left = aggregate_layers([l for l, _ in layers], left_emb if include_layer0 else None)
    z_right = aggregate_layers([r for _, r in layers], right_emb if include_layer0 else None)
    return z_left, z_right


def bpr_loss(
    left_emb: torch.Tensor,
    right_emb: torch.Tensor,
    adjacency: torch.Tensor,
    triples: torch.Tensor,
    n_layers: int,
    l2: float,
    include_layer0: bool = False,
) -> torch.Tensor:
    """
    Pairwise ranking loss over (left, positive right, negative right) triples.

    Scores are inner products of layer-aggregated embeddings; the l2 term
    acts on the layer-0 rows touched by the batch.
    """
    z_left, z_right = _aggregated(adjacency, left_emb, right_emb, n_layers, include_layer0)
    u, pos, neg = triples[:, 0], triples[:, 1], triples[:, 2]
    pos_scores = (z_left[u] * z_right[pos]).sum(dim=1)
    neg_scores = (z_left[u] * z_right[neg]).sum(dim=1)
    ranking = -torch.nn.functional.logsigmoid(pos_scores - neg_scores).mean()
    reg = 0.5 * (left_emb[u].pow(2).sum() + right_emb[pos].pow(2).sum() + right_emb[neg].pow(2).sum())
    return ranking + l2 * reg / len(triples)


def sample_bpr_triples(graph: BipartiteGraph, rng: np.random.Generator, neighbors: List[set]) -> np.ndarray:
    """One negative per edge, uniform over right nodes not adjacent to the left node."""
    left, pos = graph.edges[:, 0], graph.edges[:, 1]
    neg = rng.integers(0, graph.right_count, size=len(left))
    saturated = np.array([len(neighbors[l]) >= graph.right_count for l in left], dtype=bool)
    for _ in range(100):
        clash = np.array(
            [not full and int(n) in neighbors[l] for l, n, full in zip(left, neg, saturated)],
            dtype=bool,
        )
        if not clash.any():
            break
        neg[clash] = rng.integers(0, graph.right_count, size=int(clash.sum()))
    return np.stack([left, pos, neg], axis=1)


def score_matrix(graph: BipartiteGraph, table: EmbeddingTable) -> torch.Tensor:
    """Left x right inner products of the aggregated embeddings."""
    with torch.no_grad():
        z_left, z_right = _aggregated(
            normalized_adjacency(graph), table.left_emb, table.right_emb, table.n_layers, table.include_layer0
        )
    return z_left @ z_right.T


def train_relational(graph: BipartiteGraph, config: RelationalConfig) -> EmbeddingTable:
    """
    Fit LightGCN embeddings with BPR on one bipartite graph.

    Args:
        graph: Non-empty bipartite graph
        config: Embedding size, K, optimiser and negative-sampling seed

    Returns:
        EmbeddingTable with per-epoch loss log

    Raises:
        PreconditionError: Empty graph
        DivergenceError: Non-finite loss
    """
    config.validate()
    if len(graph.edges) == 0:
        raise PreconditionError(f"Graph '{graph.name}' has no edges")

    generator = torch.Generator().manual_seed(config.seed)
    left = torch.randn(graph.left_count, config.embed_dim, generator=generator, dtype=DTYPE) * config.init_std
    right = torch.randn(graph.right_count, config.embed_dim, generator=generator, dtype=DTYPE) * config.init_std
    log = [{"event": "init", "distribution": "normal", "init_std": config.init_std, "seed": config.seed}]
    logger.info(
        f"Training relational embeddings on '{graph.name}': {len(graph.edges)} edges, "
        f"d={config.embed_dim}, K={config.n_layers}, epochs={config.epochs}"
    )
    if config.epochs == 0:
        return EmbeddingTable(left, right, config.n_layers, config.include_layer0, log)

    left.requires_grad_(True)
    right.requires_grad_(True)
    if config.optimizer == "adam":
        optimizer = torch.optim.Adam([left, right], lr=config.lr)
    else:
        optimizer = torch.optim.SGD([left, right], lr=config.lr)

    adjacency = normalized_adjacency(graph)
    neighbors = graph.left_neighbors()
    rng = np.random.default_rng(config.seed)
    step = 0
    try:
        for epoch in tqdm(range(config.epochs), desc=f"bpr[{graph.name}]", disable=IS_TESTING, leave=False):
            triples = sample_bpr_triples(graph, rng, neighbors)
            order = rng.permutation(len(triples))
            epoch_losses = []
            for start in range(0, len(order), config.batch_size):
                batch = torch.as_tensor(triples[order[start:start + config.batch_size]], dtype=torch.long)
                loss = bpr_loss(left, right, adjacency, batch, config.n_layers, config.l2, config.include_layer0)
                if not torch.isfinite(loss):
                    raise DivergenceError(f"Non-finite BPR loss on graph '{graph.name}'", step)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                epoch_losses.append(loss.item())
                step += 1
            mean_loss = float(np.mean(epoch_losses))
            log.append({"event": "epoch", "epoch": epoch, "loss": mean_loss, "steps": step})
            if epoch % 10 == 0 or epoch == config.epochs - 1:
                logger.info(f"[{graph.name}] epoch {epoch}: bpr loss {mean_loss:.5f}")
    except DivergenceError as e:
        logger.error(f"Relational training diverged: {e}")
        raise

    return EmbeddingTable(
        left_emb=left.detach(),
        right_emb=right.detach(),
        n_layers=config.n_layers,
        include_layer0=config.include_layer0,
        log=log,
    )


def export_features(table: EmbeddingTable, graph: BipartiteGraph, side: str = "item") -> FeatureTable:
    """
    Aggregated item-side embeddings as a FeatureTable (row = item id).

    Items without edges come out as exact-zero rows (unless layer 0 is
    included), which the fusion module treats as a missing modality.
    """
    if side != "item":
        raise PreconditionError(f"Only item-side export is supported, got '{side}'")
    with torch.no_grad():
        layers = propagate(graph, table, table.n_layers)
        z_items = aggregate_layers(
            [right for _, right in layers],
            table.right_emb if table.include_layer0 else None,
        )
    metadata = {
        "graph": graph.name,
        "k": table.n_layers,
        "include_layer0": table.include_layer0,
        "embed_dim": table.dim,
    }
    return FeatureTable(name=graph.name, matrix=z_items.numpy().copy(), metadata=metadata)

"""Per-item feature tables for the media, user-level and bundle-level modalities."""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import torch

from src.config import DTYPE
from src.dataset import World
from src.errors import DataError, ParseError, ShapeError
from src.logger import get_logger

logger = get_logger(__name__)

MODALITIES = ("media", "ui", "bi")


@dataclass
class FeatureTable:
    """Dense per-item vectors for one modality; row index = item id."""
    name: str
    matrix: np.ndarray
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ShapeError(f"Feature table '{self.name}' must be 2-D, got shape {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise ShapeError(f"Feature table '{self.name}' has non-finite entries")

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def rows(self, item_ids) -> torch.Tensor:
        """Rows for `item_ids` as a float64 tensor."""
        ids = np.asarray(item_ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_rows):
            bad = [int(i) for i in ids if not 0 <= i < self.n_rows]
            raise DataError(f"Feature table '{self.name}' has no row for item(s) {bad[:5]}")
        return torch.as_tensor(self.matrix[ids], dtype=DTYPE)


@dataclass
class ModalityFeatures:
    """The three non-textual feature tables of a world."""
    media: FeatureTable
    ui: FeatureTable
    bi: FeatureTable

    def table(self, modality: str) -> FeatureTable:
        if modality not in MODALITIES:
            raise DataError(f"Unknown modality '{modality}'")
        return getattr(self, modality)

    def check_items(self, n_items: int):
        for modality in MODALITIES:
            table = self.table(modality)
            if table.n_rows < n_items:
                raise DataError(f"Feature table '{modality}' has {table.n_rows} rows, world has {n_items} items")


def media_features(world: World) -> FeatureTable:
    """Media vectors embedded in the world's item records."""
    return FeatureTable(name="media", matrix=world.media_matrix(), metadata={"source": "world"})


def save_feature_table(table: FeatureTable, path) -> Path:
    """
    Write `id,dim=<d>` then one `item_id,v1,...,vd` line per item.

    Floats use repr() so reading them back is bitwise exact. Metadata goes
    to a `.meta.json` sidecar next to the table.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"id,dim={table.dim}"]
    for item_id, row in enumerate(table.matrix):
        lines.append(",".join([str(item_id)] + [repr(float(v)) for v in row]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    meta = {"name": table.name, "rows": table.n_rows, "dim": table.dim, **table.metadata}
    _meta_path(path).write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    logger.info(f"Saved feature table '{table.name}' ({table.n_rows}x{table.dim}) to {path}")
    return path


def load_feature_table(path, name: Optional[str] = None) -> FeatureTable:
    """
    Read a feature table written by `save_feature_table`.

    Raises:
        ParseError: Bad header, wrong column count, unordered ids or bad floats
    """
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("id,dim="):
        raise ParseError(f"Feature table {path} lacks the 'id,dim=<d>' header", line=1)
    try:
        dim = int(lines[0].split("=", 1)[1])
    except ValueError:
        raise ParseError(f"Feature table {path} has a bad dimension header", line=1, field="dim")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != dim + 1:
            raise ParseError(f"Expected {dim + 1} columns, got {len(parts)}", line=lineno)
        try:
            item_id = int(parts[0])
            values = [float(v) for v in parts[1:]]
        except ValueError as e:
            raise ParseError(f"Bad value in feature table: {e}", line=lineno)
        if item_id != len(rows):
            raise ParseError(f"Rows must be in item_id order; expected {len(rows)}, got {item_id}", line=lineno, field="item_id")
        rows.append(values)
    metadata, stored_name = {}, None
    meta_path = _meta_path(path)
    if meta_path.exists():
        metadata = json.loads(meta_path.read_text(encoding="utf-8"))
        stored_name = metadata.pop("name", None)
        metadata.pop("rows", None)
        metadata.pop("dim", None)
    table_name = name or stored_name or path.stem
    matrix = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
    return FeatureTable(name=table_name, matrix=matrix, metadata=metadata)


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")

"""Named-tensor checkpoints and parameter-group checksums."""
import hashlib
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Tuple

import numpy as np
import torch

from src.config import DTYPE
from src.errors import ParseError, ShapeError
from src.logger import get_logger

logger = get_logger(__name__)

CHECKPOINT_HEADER = "# bundle-forge checkpoint v1"


def tensor_checksum(named_tensors: Iterable[Tuple[str, torch.Tensor]]) -> str:
    """SHA-256 over (name, shape, float64 bytes) in the given order."""
    digest = hashlib.sha256()
    for name, tensor in named_tensors:
        values = tensor.detach().to(DTYPE).cpu().contiguous().numpy()
        digest.update(name.encode("utf-8"))
        digest.update(str(tuple(values.shape)).encode("utf-8"))
        digest.update(values.tobytes())
    return digest.hexdigest()


def module_checksum(module: torch.nn.Module) -> str:
    return tensor_checksum(module.named_parameters())


def save_checkpoint(path, named_tensors: Iterable[Tuple[str, torch.Tensor]]) -> Path:
    """
    Write tensors as text: a `tensor <name> shape=<a>x<b>` header per tensor
    followed by one line of repr() floats (exact round-trip).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [CHECKPOINT_HEADER]
    count = 0
    for name, tensor in named_tensors:
        values = tensor.detach().to(DTYPE).cpu().contiguous().numpy()
        shape = "x".join(str(s) for s in values.shape)
        lines.append(f"tensor {name} shape={shape}")
        lines.append(" ".join(repr(float(v)) for v in values.ravel()))
        count += 1
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"Saved checkpoint with {count} tensors to {path}")
    return path


def load_checkpoint(path) -> "OrderedDict[str, torch.Tensor]":
    """
    Read a checkpoint written by `save_checkpoint`.

    Raises:
        ParseError: Missing header, truncated tensor or bad float
    """
    path = Path(path)
    lines = path.read_text(encoding="utf-8").split("\n")
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise ParseError(f"{path} is not a checkpoint file", line=1)
    tensors = OrderedDict()
    lineno = 1
    while lineno < len(lines) and lines[lineno]:
        header = lines[lineno].split(" ")
        if len(header) != 3 or header[0] != "tensor" or not header[2].startswith("shape="):
            raise ParseError("Bad tensor header", line=lineno + 1)
        name = header[1]
        shape_text = header[2][len("shape="):]
        try:
            shape = tuple(int(s) for s in shape_text.split("x")) if shape_text else ()
        except ValueError:
            raise ParseError("Bad tensor shape", line=lineno + 1, field=name)
        if lineno + 1 >= len(lines):
            raise ParseError("Truncated checkpoint", line=lineno + 2, field=name)
        raw = lines[lineno + 1]
        try:
            values = np.array([float(v) for v in raw.split()], dtype=np.float64)
        except ValueError:
            raise ParseError("Bad float in tensor data", line=lineno + 2, field=name)
        expected = int(np.prod(shape)) if shape else 1
        if values.size != expected:
            raise ParseError(f"Expected {expected} values, got {values.size}", line=lineno + 2, field=name)
        tensors[name] = torch.as_tensor(values.reshape(shape), dtype=DTYPE)
        lineno += 2
    return tensors


def load_into(module: torch.nn.Module, path) -> torch.nn.Module:
    """Copy checkpoint tensors into a module's parameters, checking names and shapes."""
    tensors = load_checkpoint(path)
    params = dict(module.named_parameters())
    missing = set(params) - set(tensors)
    unexpected = set(tensors) - set(params)
    if missing or unexpected:
        raise ShapeError(f"Checkpoint {path} mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
    with torch.no_grad():
        for name, param in params.items():
            if tuple(param.shape) != tuple(tensors[name].shape):
                raise ShapeError(f"Checkpoint tensor '{name}' has shape {tuple(tensors[name].shape)}, expected {tuple(param.shape)}")
            param.copy_(tensors[name])
    logger.info(f"Loaded {len(params)} tensors from {path}")
    return module

"""Named random substreams derived from a single master seed."""
import zlib

import numpy as np

from src.logger import get_logger

logger = get_logger(__name__)

STREAMS = ("world", "sampling", "init", "training", "relational", "sweep", "eval")


def _stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(master_seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent numpy generator for `name`, reproducible from the master seed."""
    entropy = [int(master_seed), _stream_key(name), *[int(x) for x in extra]]
    logger.debug(f"Random substream '{name}' seeded from {entropy}")
    return np.random.default_rng(entropy)


def torch_seed(master_seed: int, name: str, *extra: int) -> int:
    """Integer seed for torch.manual_seed derived like `substream`."""
    seed = int(substream(master_seed, name, *extra).integers(0, 2**31 - 1))
    logger.debug(f"Torch seed for '{name}': {seed}")
    return seed

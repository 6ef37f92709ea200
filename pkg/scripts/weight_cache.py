"""
Per-(node, op) weight sharing cache
An entry keeps the weights of the best whole-model evaluation that contained
that op at that node; a commit replaces it only on strict improvement.
"""

import json
import logging
import math
import threading
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from types import MappingProxyType
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from config import CACHE_INDEX_FILE, DEFAULT_CHANNELS
from errors import CheckpointError, ParseError, ShapeMismatch
from model_builder import GeneratorNet, node_parameter_shapes
from tensorkit import DTYPE, load_snapshot, save_snapshot

logger = logging.getLogger(__name__)


@lru_cache(maxsize=None)
def _expected_shapes(op_index: int, channels: int) -> Dict[str, Tuple[int, ...]]:
    return node_parameter_shapes(op_index, channels)


def _entry_stem(node: int, op_index: int) -> str:
    return f"node{node:02d}_op{op_index:02d}"


@dataclass(frozen=True)
class CacheEntry:
    node: int
    op_index: int
    weights: Mapping[str, np.ndarray]     # read-only arrays
    best_metric: float
    step: int


class WeightCache:
    """Thread-safe map (node, op_index) -> CacheEntry"""

    def __init__(self, channels: int = DEFAULT_CHANNELS):
        self.channels = channels
        self._entries: Dict[Tuple[int, int], CacheEntry] = {}
        self._dirty: set = set()
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._entries)

    def entry(self, node: int, op_index: int) -> Optional[CacheEntry]:
        with self._lock:
            return self._entries.get((node, op_index))

    def lookup(self, node: int, op_index: int) -> Optional[Mapping[str, np.ndarray]]:
        """Cached weights, or None on a miss"""
        found = self.entry(node, op_index)
        return None if found is None else found.weights

    def best_metric(self, node: int, op_index: int) -> Optional[float]:
        found = self.entry(node, op_index)
        return None if found is None else found.best_metric

    def entries(self) -> List[CacheEntry]:
        with self._lock:
            return [self._entries[key] for key in sorted(self._entries)]

    def _freeze(self, node: int, op_index: int, weights: Mapping[str, np.ndarray]) -> Mapping[str, np.ndarray]:
        expected = _expected_shapes(op_index, self.channels)
        if set(weights) != set(expected):
            raise ShapeMismatch(f"Node {node} op {op_index}: tensors {sorted(weights)} != {sorted(expected)}")
        frozen = {}
        for name, shape in expected.items():
            value = np.array(weights[name], dtype=DTYPE)
            if value.shape != shape:
                raise ShapeMismatch(f"Node {node} op {op_index}: {name} has shape {value.shape}, expected {shape}")
            value.flags.writeable = False
            frozen[name] = value
        return MappingProxyType(frozen)

    def commit(self, node: int, op_index: int, weights: Mapping[str, np.ndarray],
               metric: float, step: int = 0) -> bool:
        """Replace the entry iff `metric` strictly beats its best; returns whether it did"""
        snapshot = self._freeze(node, op_index, weights)
        if not math.isfinite(metric):
            return False
        key = (node, op_index)
        with self._lock:
            current = self._entries.get(key)
            if current is not None and not metric > current.best_metric:
                return False
            self._entries[key] = CacheEntry(node, op_index, snapshot, float(metric), step)
            self._dirty.add(key)
        return True

    def commit_network(self, net: GeneratorNet, metric: float, step: int = 0) -> List[bool]:
        """Offer every node of an evaluated generator to the cache"""
        accepted = [self.commit(i, op_index, net.node_state(i), metric, step)
                    for i, op_index in enumerate(net.genome.op_choices, start=1)]
        logger.debug(f"  💾 Cache commit at {metric:.3f}: {sum(accepted)}/{len(accepted)} entries improved")
        return accepted

    # ── Persistence ─────────────────────────────────────────────

    def index(self) -> Dict[str, dict]:
        return {_entry_stem(e.node, e.op_index): {"node": e.node, "op": e.op_index,
                                                  "best_metric": e.best_metric, "step": e.step}
                for e in self.entries()}

    def save(self, directory: Path) -> None:
        """Write changed entries, then the index of the same consistent view"""
        directory = Path(directory)
        with self._lock:
            current = dict(self._entries)
            dirty = sorted(self._dirty)
        written = []
        for key in dirty:
            e = current[key]
            save_snapshot(directory / _entry_stem(e.node, e.op_index), dict(e.weights),
                          {"node": e.node, "op": e.op_index, "best_metric": e.best_metric, "step": e.step})
            written.append(key)
        index = {_entry_stem(e.node, e.op_index): {"node": e.node, "op": e.op_index,
                                                   "best_metric": e.best_metric, "step": e.step}
                 for _, e in sorted(current.items())}
        tmp = directory / (CACHE_INDEX_FILE + ".tmp")
        try:
            directory.mkdir(parents=True, exist_ok=True)
            tmp.write_text(json.dumps({"channels": self.channels, "entries": index}, indent=2))
            tmp.replace(directory / CACHE_INDEX_FILE)
        except OSError as e:
            raise CheckpointError(f"Could not write cache index in {directory}: {e}")
        with self._lock:
            # an entry replaced during the save stays dirty
            for key in written:
                if self._entries.get(key) is current[key]:
                    self._dirty.discard(key)
        if written:
            logger.debug(f"  💾 Saved {len(written)} cache entries to {directory}")

    @classmethod
    def load(cls, directory: Path) -> "WeightCache":
        directory = Path(directory)
        index_path = directory / CACHE_INDEX_FILE
        try:
            index = json.loads(index_path.read_text())
        except OSError as e:
            raise CheckpointError(f"Could not read {index_path}: {e}")
        except json.JSONDecodeError as e:
            raise ParseError(str(index_path), f"invalid JSON: {e}")
        cache = cls(channels=index.get("channels", DEFAULT_CHANNELS))
        for stem, info in index.get("entries", {}).items():
            tensors, _ = load_snapshot(directory / stem)
            node, op_index = info["node"], info["op"]
            cache._entries[(node, op_index)] = CacheEntry(
                node, op_index, cache._freeze(node, op_index, tensors), float(info["best_metric"]), info["step"])
        return cache

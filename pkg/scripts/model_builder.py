"""
Network assembly
Generator skeleton + decoded cell, discriminator skeleton + decoded blocks,
and the frozen feature extractor used by the perceptual losses
"""

import copy
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from config import DEFAULT_CHANNELS, INVBLOCK_EXPANSION, NUM_REDUCTION_BLOCKS
from errors import InvalidGenome, ShapeError, ShapeMismatch
from search_space import (
    CellGraph, DiscriminatorGenome, GeneratorGenome, OP_KINDS, OpKind, RedOpKind,
    decode_discriminator, decode_generator, genome_from_dict, genome_to_dict,
)
from tensorkit import (
    Add, BatchNorm2d, CABlock, Conv2d, Flatten, Identity, Layer, Linear, PixelShuffle, PReLU,
    SEBlock, Sequential, SpectralNorm, _ChannelGate, dsep_conv, inverted_bottleneck,
    load_snapshot, save_snapshot,
)

logger = logging.getLogger(__name__)

DISCRIMINATOR_PATCH_MULTIPLE = 2 ** NUM_REDUCTION_BLOCKS
EXTRACTOR_CHANNELS = (8, 16, 32)


def build_op(op: OpKind, channels: int, rng: np.random.Generator) -> Layer:
    """A candidate operation on `channels` feature maps, shape-preserving"""
    if op.family in ("conv", "gconv"):
        return Conv2d(channels, channels, op.kernel, groups=op.groups, rng=rng)
    if op.family == "dsep":
        return dsep_conv(channels, channels, op.kernel, rng=rng)
    if op.family == "invblock":
        return inverted_bottleneck(channels, channels, op.kernel, INVBLOCK_EXPANSION, rng=rng)
    if op.family == "se":
        return SEBlock(channels, rng=rng)
    if op.family == "ca":
        return CABlock(channels, rng=rng)
    if op.family == "identity":
        return Identity()
    raise InvalidGenome(f"Unknown op family {op.family!r}")


def build_node(op: OpKind, channels: int, rng: np.random.Generator) -> Sequential:
    """Cell node: operation followed by PReLU"""
    return Sequential(("op", build_op(op, channels, rng)), ("act", PReLU(channels)))


def node_parameter_shapes(op_index: int, channels: int) -> Dict[str, Tuple[int, ...]]:
    node = build_node(OP_KINDS[op_index], channels, np.random.default_rng(0))
    return {name: p.shape for name, p in node.named_parameters()}


class GeneratorNet(Layer):
    """head conv -> cell -> post-cell conv -> pixel-shuffle stages -> tail conv"""

    kind = "generator"

    def __init__(self, genome: GeneratorGenome, n: int, scale: int, rng: np.random.Generator):
        super().__init__()
        if scale not in (1, 2, 4):
            raise ShapeError(f"Unsupported scale {scale}")
        self.genome, self.n, self.scale = genome, n, scale
        self.cell: CellGraph = decode_generator(genome)
        self.head = Conv2d(3, n, 3, rng=rng)
        self.nodes = [build_node(op, n, rng) for op, _ in self.cell.nodes]
        self.merge = Add()
        self.post = Conv2d(n, n, 3, rng=rng)
        self.stages = [
            Sequential(("conv", Conv2d(n, 4 * n, 3, rng=rng)), ("shuffle", PixelShuffle(2)))
            for _ in range({1: 0, 2: 1, 4: 2}[scale])
        ]
        self.tail = Conv2d(n, 3, 3, rng=rng)

    def children(self):
        layers = [("head", self.head)]
        layers += [(f"node{i}", node) for i, node in enumerate(self.nodes, start=1)]
        layers += [("post", self.post)]
        layers += [(f"up{s}", stage) for s, stage in enumerate(self.stages, start=1)]
        layers += [("tail", self.tail)]
        return layers

    def forward(self, x):
        outputs = {0: self.head.forward(x)}
        for i, ((_, src), node) in enumerate(zip(self.cell.nodes, self.nodes), start=1):
            outputs[i] = node.forward(outputs[src])
        leaves = self.cell.output_nodes
        y = self.merge.forward([outputs[j] for j in leaves]) if len(leaves) > 1 else outputs[leaves[0]]
        y = self.post.forward(y)
        for stage in self.stages:
            y = stage.forward(y)
        self._cache = True
        return self.tail.forward(y)

    def backward(self, grad):
        self._require_cache()
        g = self.tail.backward(grad)
        for stage in reversed(self.stages):
            g = stage.backward(g)
        g = self.post.backward(g)
        leaves = self.cell.output_nodes
        grads: Dict[int, np.ndarray] = {}
        if len(leaves) > 1:
            for j, gj in zip(leaves, self.merge.backward(g)):
                grads[j] = gj
        else:
            grads[leaves[0]] = g
        for i in range(len(self.nodes), 0, -1):
            if i not in grads:
                continue
            src = self.cell.nodes[i - 1][1]
            gi = self.nodes[i - 1].backward(grads.pop(i))
            grads[src] = grads[src] + gi if src in grads else gi
        return self.head.backward(grads[0])

    def node_state(self, node: int) -> Dict[str, np.ndarray]:
        return self.nodes[node - 1].state_dict()

    def load_node_state(self, node: int, state: Dict[str, np.ndarray]) -> None:
        self.nodes[node - 1].load_state_dict(state)

    def clone(self) -> "GeneratorNet":
        return copy.deepcopy(self)

    def provenance(self) -> dict:
        return {"genome": genome_to_dict(self.genome), "digest": self.genome.digest,
                "scale": self.scale, "n": self.n}


@dataclass
class InitSource:
    """Where a generator's weights come from; later sources win per tensor"""

    seed: int = 0
    cache: Optional[object] = None          # anything with lookup(node, op_index)
    snapshot: Optional[Dict[str, np.ndarray]] = None


def build_generator(genome: GeneratorGenome, n: int = DEFAULT_CHANNELS, scale: int = 2,
                    init: Optional[InitSource] = None) -> GeneratorNet:
    init = init or InitSource()
    net = GeneratorNet(genome, n, scale, np.random.default_rng(init.seed))
    if init.snapshot is not None:
        net.load_state_dict(init.snapshot, strict=False)
    if init.cache is not None:
        hits = 0
        for i, op_index in enumerate(genome.op_choices, start=1):
            cached = init.cache.lookup(i, op_index)
            if cached is None:
                continue
            try:
                net.load_node_state(i, cached)
            except ShapeMismatch as e:
                raise ShapeMismatch(f"Weight cache entry (node {i}, op {op_index}) is corrupt: {e}")
            hits += 1
        logger.debug(f"  ♻️  Weight cache: {hits}/{len(net.nodes)} nodes warm-started")
    return net


# ── Discriminator ───────────────────────────────────────────────

def with_spectral_norm(layer: Layer, rng: np.random.Generator) -> Layer:
    """Wrap every Conv2d / Linear inside `layer`"""
    if isinstance(layer, (Conv2d, Linear)):
        return SpectralNorm(layer, rng=rng)
    if isinstance(layer, Sequential):
        layer.layers = [(name, with_spectral_norm(child, rng)) for name, child in layer.layers]
    elif isinstance(layer, _ChannelGate):
        layer.gate = with_spectral_norm(layer.gate, rng)
    return layer


class DiscriminatorNet(Sequential):
    """stem -> 5 reduction blocks -> flatten -> [bottleneck] -> logit"""

    kind = "discriminator"

    def __init__(self, genome: DiscriminatorGenome, n: int, bottleneck: int, patch: int,
                 rng: np.random.Generator):
        self.genome, self.n, self.bottleneck, self.patch = genome, n, bottleneck, patch
        self.blocks_spec: List[Tuple[OpKind, RedOpKind]] = decode_discriminator(genome)
        layers = [("stem", Sequential(("conv", Conv2d(3, n, 3, rng=rng)), ("act", PReLU(n))))]
        channels, spatial = n, patch
        for b, (op, redop) in enumerate(self.blocks_spec, start=1):
            block = Sequential(
                ("op", build_op(op, channels, rng)),
                ("bn1", BatchNorm2d(channels)),
                ("act1", PReLU(channels)),
                ("reduce", Conv2d(channels, 2 * channels, redop.kernel, stride=redop.stride,
                                  groups=redop.groups, rng=rng)),
                ("bn2", BatchNorm2d(2 * channels)),
                ("act2", PReLU(2 * channels)),
            )
            layers.append((f"block{b}", block))
            channels, spatial = channels * 2, spatial // 2
        self.flat_features = channels * spatial * spatial
        layers.append(("flatten", Flatten()))
        features = self.flat_features
        if bottleneck:
            layers.append(("bottleneck", Sequential(("fc", Linear(features, bottleneck, rng=rng)),
                                                    ("act", PReLU(bottleneck)))))
            features = bottleneck
        layers.append(("logit", Linear(features, 1, rng=rng)))
        super().__init__(*[(name, with_spectral_norm(layer, rng)) for name, layer in layers])

    def forward(self, x):
        if x.ndim != 4 or x.shape[1:] != (3, self.patch, self.patch):
            raise ShapeError("Discriminator input", expected=("B", 3, self.patch, self.patch), actual=x.shape)
        return super().forward(x)

    def provenance(self) -> dict:
        return {"genome": genome_to_dict(self.genome), "digest": self.genome.digest,
                "n": self.n, "bottleneck": self.bottleneck, "patch": self.patch}


def build_discriminator(genome: DiscriminatorGenome, n: int = DEFAULT_CHANNELS, bottleneck: int = 0,
                        patch: int = 32, seed: int = 0) -> DiscriminatorNet:
    if patch <= 0 or patch % DISCRIMINATOR_PATCH_MULTIPLE:
        raise ShapeError(f"Discriminator patch must be a positive multiple of {DISCRIMINATOR_PATCH_MULTIPLE}",
                         expected=f"k*{DISCRIMINATOR_PATCH_MULTIPLE}", actual=patch)
    return DiscriminatorNet(genome, n, bottleneck, patch, np.random.default_rng(seed))


# ── Frozen feature extractor ────────────────────────────────────

class FrozenExtractor(Layer):
    """Three stride-2 3x3 convolutions with PReLU between; never trained"""

    kind = "extractor"

    def __init__(self, seed: int):
        super().__init__()
        rng = np.random.default_rng(seed)
        c1, c2, c3 = EXTRACTOR_CHANNELS
        self.convs = [Conv2d(3, c1, 3, stride=2, rng=rng), Conv2d(c1, c2, 3, stride=2, rng=rng),
                      Conv2d(c2, c3, 3, stride=2, rng=rng)]
        self.acts = [PReLU(c1), PReLU(c2)]
        for p in self.parameters():
            p.value.flags.writeable = False
        self.seed = seed
        self._depth = 0

    def children(self):
        return [(f"conv{i}", c) for i, c in enumerate(self.convs, start=1)] + \
               [(f"act{i}", a) for i, a in enumerate(self.acts, start=1)]

    def train(self, mode: bool = True) -> "Layer":
        return super().train(False)

    def forward(self, x, depth: int = 3):
        """Features after conv `depth`, before its activation"""
        if not 1 <= depth <= len(self.convs):
            raise ShapeError("Extractor depth", expected="1..3", actual=depth)
        for i in range(depth):
            if i:
                x = self.acts[i - 1].forward(x)
            x = self.convs[i].forward(x)
        self._depth = depth
        self._cache = True
        return x

    def backward(self, grad):
        self._require_cache()
        for i in range(self._depth - 1, -1, -1):
            grad = self.convs[i].backward(grad)
            if i:
                grad = self.acts[i - 1].backward(grad)
        return grad


def build_frozen_extractor(seed: int = 0) -> FrozenExtractor:
    return FrozenExtractor(seed)


# ── Snapshots ───────────────────────────────────────────────────

def save_generator(net: GeneratorNet, stem: Path, extra: Optional[dict] = None) -> None:
    save_snapshot(stem, net.state_dict(), {"kind": "generator", **net.provenance(), **(extra or {})})


def load_generator(stem: Path) -> Tuple[GeneratorNet, dict]:
    tensors, meta = load_snapshot(stem)
    genome = genome_from_dict(meta["genome"])
    net = GeneratorNet(genome, meta["n"], meta["scale"], np.random.default_rng(0))
    net.load_state_dict(tensors)
    return net, meta


def save_discriminator(net: DiscriminatorNet, stem: Path, extra: Optional[dict] = None) -> None:
    save_snapshot(stem, net.state_dict(), {"kind": "discriminator", **net.provenance(), **(extra or {})})


def load_discriminator(stem: Path) -> Tuple[DiscriminatorNet, dict]:
    tensors, meta = load_snapshot(stem)
    genome = genome_from_dict(meta["genome"])
    net = build_discriminator(genome, meta["n"], meta["bottleneck"], meta["patch"])
    net.load_state_dict(tensors)
    return net, meta

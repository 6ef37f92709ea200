"""
Analytical Mult-Adds and parameter counting
Only convolution / linear multiplies count; biases count as parameters only.
Activations, batch-norm scaling, pooling sums and the attention gate product
are not counted.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

from config import ATTENTION_REDUCTION, INVBLOCK_EXPANSION, REFERENCE_RESOLUTION
from errors import ConfigError, ShapeError
from search_space import CellGraph, OpKind, RedOpKind

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CostItem:
    name: str
    mult_adds: int
    params: int


@dataclass(frozen=True)
class CostReport:
    items: Tuple[CostItem, ...] = field(default_factory=tuple)

    @property
    def mult_adds(self) -> int:
        return sum(item.mult_adds for item in self.items)

    @property
    def params(self) -> int:
        return sum(item.params for item in self.items)

    def to_dict(self) -> dict:
        return {
            "mult_adds": self.mult_adds,
            "params": self.params,
            "breakdown": [
                {"name": item.name, "mult_adds": item.mult_adds, "params": item.params}
                for item in self.items
            ],
        }


@dataclass(frozen=True)
class CostLimit:
    max_mult_adds: float
    ref_resolution: Tuple[int, int] = REFERENCE_RESOLUTION

    def __post_init__(self):
        if not self.max_mult_adds > 0:
            raise ConfigError(f"Mult-Adds limit must be positive, got {self.max_mult_adds}")


@dataclass(frozen=True)
class GateResult:
    passed: bool
    mult_adds: int
    limit: float


def conv_cost(kernel: int, in_channels: int, out_channels: int, spatial: Tuple[int, int],
              groups: int = 1, stride: int = 1,
              strict: bool = True) -> Tuple[int, int, Tuple[int, int]]:
    """(mult_adds, params, output spatial) of one zero-padded convolution"""
    h, w = spatial
    if strict and (kernel > h or kernel > w):
        raise ShapeError("Kernel larger than feature map", expected=(kernel, kernel), actual=(h, w))
    pad = (kernel - 1) // 2
    ho = (h + 2 * pad - kernel) // stride + 1
    wo = (w + 2 * pad - kernel) // stride + 1
    per_output = kernel * kernel * (in_channels // groups)
    mult_adds = ho * wo * per_output * out_channels
    params = per_output * out_channels + out_channels
    return mult_adds, params, (ho, wo)


def linear_cost(in_features: int, out_features: int) -> Tuple[int, int]:
    return in_features * out_features, in_features * out_features + out_features


def op_cost(op: Union[OpKind, RedOpKind], in_channels: int, spatial: Tuple[int, int],
            out_channels: Optional[int] = None, strict: bool = True) -> Tuple[int, int]:
    """Cost of a bare operation (the node's PReLU is accounted for by the caller)

    strict=False accepts kernels wider than the map; zero padding keeps the
    count well defined
    """
    h, w = spatial
    if h <= 0 or w <= 0 or in_channels <= 0:
        raise ShapeError("Operation input must be non-empty", actual=(in_channels, h, w))

    if isinstance(op, RedOpKind):
        madds, params, _ = conv_cost(op.kernel, in_channels, 2 * in_channels, spatial,
                                     groups=op.groups, stride=op.stride, strict=strict)
        return madds, params

    n = out_channels or in_channels
    if op.family in ("conv", "gconv"):
        madds, params, _ = conv_cost(op.kernel, in_channels, n, spatial, groups=op.groups, strict=strict)
        return madds, params
    if op.family == "dsep":
        dm, dp, _ = conv_cost(op.kernel, in_channels, in_channels, spatial, groups=in_channels, strict=strict)
        pm, pp, _ = conv_cost(1, in_channels, n, spatial)
        return dm + pm, dp + pp
    if op.family == "invblock":
        hidden = n * INVBLOCK_EXPANSION
        em, ep, _ = conv_cost(1, in_channels, hidden, spatial)
        dm, dp, _ = conv_cost(op.kernel, hidden, hidden, spatial, groups=hidden, strict=strict)
        pm, pp, _ = conv_cost(1, hidden, n, spatial)
        return em + dm + pm, ep + dp + pp
    if op.family in ("se", "ca"):
        hidden = max(in_channels // ATTENTION_REDUCTION, 1)
        m1, p1 = linear_cost(in_channels, hidden)
        m2, p2 = linear_cost(hidden, in_channels)
        return m1 + m2, p1 + p2
    if op.family == "identity":
        return 0, 0
    raise ShapeError(f"Unknown operation family {op.family!r}")


def _scale_stages(scale: int) -> int:
    if scale not in (1, 2, 4):
        raise ConfigError(f"Scale must be 1 (debug), 2 or 4, got {scale}")
    return {1: 0, 2: 1, 4: 2}[scale]


def generator_cost(cell: CellGraph, n: int, scale: int,
                   ref_resolution: Tuple[int, int] = REFERENCE_RESOLUTION) -> CostReport:
    """Cost of producing one ref_resolution (width, height) output image"""
    out_w, out_h = ref_resolution
    if out_w % scale or out_h % scale:
        raise ShapeError(f"Reference resolution not divisible by scale {scale}", actual=ref_resolution)
    spatial = (out_h // scale, out_w // scale)
    items: List[CostItem] = []

    def add_conv(name, k, cin, cout, where):
        madds, params, _ = conv_cost(k, cin, cout, where)
        items.append(CostItem(name, madds, params))

    add_conv("head", 3, 3, n, spatial)
    for i, (op, _) in enumerate(cell.nodes, start=1):
        madds, params = op_cost(op, n, spatial, out_channels=n)
        items.append(CostItem(f"node{i}:{op.label}", madds, params + n))
    add_conv("post_cell", 3, n, n, spatial)
    for stage in range(_scale_stages(scale)):
        add_conv(f"upsample{stage + 1}", 3, n, 4 * n, spatial)
        spatial = (spatial[0] * 2, spatial[1] * 2)
    add_conv("tail", 3, n, 3, spatial)
    return CostReport(tuple(items))


def discriminator_cost(blocks: Sequence[Tuple[OpKind, RedOpKind]], n: int, bottleneck: int,
                       patch: int) -> CostReport:
    """Reported for information only; the discriminator is never gated"""
    spatial = (patch, patch)
    items: List[CostItem] = []
    madds, params, _ = conv_cost(3, 3, n, spatial)
    items.append(CostItem("stem", madds, params + n))
    channels = n
    for b, (op, redop) in enumerate(blocks, start=1):
        madds, params = op_cost(op, channels, spatial, out_channels=channels, strict=False)
        items.append(CostItem(f"block{b}:{op.label}", madds, params + 3 * channels))
        madds, params, spatial = conv_cost(redop.kernel, channels, 2 * channels, spatial,
                                           groups=redop.groups, stride=redop.stride, strict=False)
        channels *= 2
        items.append(CostItem(f"block{b}:{redop.label}", madds, params + 3 * channels))
    features = channels * spatial[0] * spatial[1]
    if bottleneck:
        madds, params = linear_cost(features, bottleneck)
        items.append(CostItem("bottleneck", madds, params + bottleneck))
        features = bottleneck
    madds, params = linear_cost(features, 1)
    items.append(CostItem("logit", madds, params))
    return CostReport(tuple(items))


def gate(report: CostReport, limit: CostLimit) -> GateResult:
    passed = report.mult_adds <= limit.max_mult_adds
    if not passed:
        logger.debug(f"  ⛔ Gate reject: {report.mult_adds:,} > {limit.max_mult_adds:,.0f} Mult-Adds")
    return GateResult(passed, report.mult_adds, limit.max_mult_adds)

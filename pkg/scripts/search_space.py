"""
Search spaces for the generator cell and the discriminator
Genomes are flat decision vectors; decoding turns them into structures
"""

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, Iterator, List, Optional, Tuple, Union

from config import GENOME_SCHEMA_VERSION, NUM_CELL_NODES, NUM_REDUCTION_BLOCKS
from errors import InvalidGenome, ParseError

GENERATOR = "generator"
DISCRIMINATOR = "discriminator"
SPACE_KINDS = (GENERATOR, DISCRIMINATOR)


@dataclass(frozen=True)
class OpKind:
    """One candidate operation of a cell node; channels are a model-level constant"""

    family: str                     # conv | gconv | dsep | invblock | se | ca | identity
    kernel: Optional[int] = None

    @property
    def groups(self) -> int:
        return 4 if self.family == "gconv" else 1

    @property
    def label(self) -> str:
        names = {
            "conv": "Conv", "gconv": "GroupConv", "dsep": "DSep",
            "invblock": "InvBlock", "se": "SEBlock", "ca": "CABlock", "identity": "Identity",
        }
        name = names[self.family]
        return f"{name}({self.kernel})" if self.kernel else name


@dataclass(frozen=True)
class RedOpKind:
    """Reduction operation: stride 2, output channels doubled"""

    family: str                     # conv | gconv
    kernel: int
    stride: int = 2

    @property
    def groups(self) -> int:
        return 4 if self.family == "gconv" else 1

    @property
    def label(self) -> str:
        name = "Conv" if self.family == "conv" else "GroupConv"
        return f"{name}({self.kernel},s{self.stride})"


OP_KINDS: Tuple[OpKind, ...] = (
    *(OpKind("conv", k) for k in (1, 3, 5, 7)),
    *(OpKind("gconv", k) for k in (3, 5, 7)),
    *(OpKind("dsep", k) for k in (3, 5, 7)),
    *(OpKind("invblock", k) for k in (3, 5, 7)),
    OpKind("se"),
    OpKind("ca"),
    OpKind("identity"),
)

REDOP_KINDS: Tuple[RedOpKind, ...] = (
    *(RedOpKind("conv", k) for k in (1, 3, 5, 7)),
    *(RedOpKind("gconv", k) for k in (3, 5, 7)),
)

# A change to the op sets must break loudly
assert len(OP_KINDS) == 16 and len(set(OP_KINDS)) == 16
assert len(REDOP_KINDS) == 7

IDENTITY_INDEX = OP_KINDS.index(OpKind("identity"))


@dataclass(frozen=True)
class SearchSpace:
    """Shape of a search space; the defaults are the full spaces"""

    kind: str
    size: int = 0           # nodes (generator) or blocks (discriminator); 0 = default
    num_ops: int = len(OP_KINDS)
    num_redops: int = len(REDOP_KINDS)

    def __post_init__(self):
        if self.kind not in SPACE_KINDS:
            raise InvalidGenome(f"Unknown space kind: {self.kind!r}")
        if self.size == 0:
            default = NUM_CELL_NODES if self.kind == GENERATOR else NUM_REDUCTION_BLOCKS
            object.__setattr__(self, "size", default)
        if not 1 <= self.num_ops <= len(OP_KINDS) or not 1 <= self.num_redops <= len(REDOP_KINDS):
            raise InvalidGenome("Reduced op sets must be prefixes of the full sets")

    @property
    def is_full(self) -> bool:
        return self == SearchSpace(self.kind)


SpaceLike = Union[str, SearchSpace]


def as_space(space: SpaceLike) -> SearchSpace:
    return space if isinstance(space, SearchSpace) else SearchSpace(space)


def decision_dims(space: SpaceLike) -> List[int]:
    """Option count of every decision, in sampling order"""
    space = as_space(space)
    dims: List[int] = []
    if space.kind == GENERATOR:
        for i in range(1, space.size + 1):
            dims += [space.num_ops, i]
    else:
        for _ in range(space.size):
            dims += [space.num_ops, space.num_redops]
    return dims


def space_cardinality(space: SpaceLike) -> int:
    return math.prod(decision_dims(space))


def enumerate_genomes(space: SpaceLike) -> Iterator["Genome"]:
    """Every point of a (reduced) space, in lexicographic decision order"""
    space = as_space(space)
    for decisions in itertools.product(*(range(d) for d in decision_dims(space))):
        yield make_genome(space, decisions)


@dataclass(frozen=True)
class Genome:
    decisions: Tuple[int, ...]
    space: SearchSpace = field(default=None)  # type: ignore[assignment]

    kind = ""

    def __post_init__(self):
        object.__setattr__(self, "decisions", tuple(int(d) for d in self.decisions))
        if self.space is None:
            object.__setattr__(self, "space", SearchSpace(self.kind))
        elif self.space.kind != self.kind:
            raise InvalidGenome(f"{type(self).__name__} cannot live in a {self.space.kind} space")
        expected = len(decision_dims(self.space))
        if len(self.decisions) != expected:
            raise InvalidGenome(f"Decision vector has {len(self.decisions)} entries, expected {expected}")

    def validate(self) -> None:
        for position, (choice, dim) in enumerate(zip(self.decisions, decision_dims(self.space))):
            if not 0 <= choice < dim:
                raise InvalidGenome(f"Decision {position} = {choice} outside [0, {dim})")

    @property
    def digest(self) -> str:
        return hashlib.sha256(genome_to_json(self).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class GeneratorGenome(Genome):
    kind = GENERATOR

    @property
    def op_choices(self) -> Tuple[int, ...]:
        return self.decisions[0::2]

    @property
    def input_choices(self) -> Tuple[int, ...]:
        return self.decisions[1::2]

    def validate(self) -> None:
        for i, (op, src) in enumerate(zip(self.op_choices, self.input_choices), start=1):
            if not 0 <= op < self.space.num_ops:
                raise InvalidGenome(f"Node {i}: op index {op} out of range")
            if not 0 <= src < i:
                raise InvalidGenome(f"Node {i}: input {src} must reference an earlier node (< {i})")


@dataclass(frozen=True)
class DiscriminatorGenome(Genome):
    kind = DISCRIMINATOR

    @property
    def op_choices(self) -> Tuple[int, ...]:
        return self.decisions[0::2]

    @property
    def redop_choices(self) -> Tuple[int, ...]:
        return self.decisions[1::2]

    def validate(self) -> None:
        for b, (op, red) in enumerate(zip(self.op_choices, self.redop_choices), start=1):
            if not 0 <= op < self.space.num_ops:
                raise InvalidGenome(f"Block {b}: op index {op} out of range")
            if not 0 <= red < self.space.num_redops:
                raise InvalidGenome(f"Block {b}: reduction index {red} out of range")


def make_genome(space: SpaceLike, decisions) -> Genome:
    space = as_space(space)
    cls = GeneratorGenome if space.kind == GENERATOR else DiscriminatorGenome
    return cls(tuple(decisions), space)


def chain_genome(op_index: int, nodes: int = NUM_CELL_NODES) -> GeneratorGenome:
    """Node i reads node i-1; every node runs the same op"""
    decisions = []
    for i in range(1, nodes + 1):
        decisions += [op_index, i - 1]
    return GeneratorGenome(tuple(decisions), SearchSpace(GENERATOR, nodes))


@dataclass(frozen=True)
class CellGraph:
    """Decoded cell: node i (1-based) applies nodes[i-1].op to input_ref (0 = cell input)"""

    nodes: Tuple[Tuple[OpKind, int], ...]
    leaves: FrozenSet[int]

    @property
    def output_rule(self) -> str:
        return "leaf-sum" if len(self.leaves) > 1 else "last-node"

    @property
    def output_nodes(self) -> Tuple[int, ...]:
        if len(self.leaves) > 1:
            return tuple(sorted(self.leaves))
        return (len(self.nodes),)

    def describe(self) -> str:
        parts = [f"n{i}={op.label}<-{'in' if src == 0 else f'n{src}'}"
                 for i, (op, src) in enumerate(self.nodes, start=1)]
        return ", ".join(parts) + f" | {self.output_rule}{sorted(self.leaves)}"


def decode_generator(genome: GeneratorGenome) -> CellGraph:
    genome.validate()
    nodes = tuple((OP_KINDS[op], src) for op, src in zip(genome.op_choices, genome.input_choices))
    consumed = {src for _, src in nodes if src > 0}
    leaves = frozenset(i for i in range(1, len(nodes) + 1) if i not in consumed)
    # The last node is never consumed, so leaves is never empty
    assert len(nodes) in leaves
    return CellGraph(nodes, leaves)


def decode_discriminator(genome: DiscriminatorGenome) -> List[Tuple[OpKind, RedOpKind]]:
    genome.validate()
    return [(OP_KINDS[op], REDOP_KINDS[red])
            for op, red in zip(genome.op_choices, genome.redop_choices)]


def discriminator_channel_plan(n: int, blocks: int = NUM_REDUCTION_BLOCKS) -> List[int]:
    """Channels entering each block, then the final channel count"""
    return [n * 2 ** b for b in range(blocks + 1)]


# ── JSON artifacts ──────────────────────────────────────────────

def genome_to_dict(genome: Genome) -> Dict[str, Any]:
    data: Dict[str, Any] = {
        "schema": GENOME_SCHEMA_VERSION,
        "space": genome.space.kind,
        "decisions": list(genome.decisions),
    }
    if not genome.space.is_full:
        data["reduced"] = {
            "size": genome.space.size,
            "num_ops": genome.space.num_ops,
            "num_redops": genome.space.num_redops,
        }
    return data


def genome_to_json(genome: Genome) -> str:
    return json.dumps(genome_to_dict(genome), sort_keys=True)


def genome_from_dict(data: Any) -> Genome:
    if not isinstance(data, dict):
        raise ParseError("$", "genome document must be an object")
    if "schema" not in data:
        raise ParseError("schema", "missing")
    if not isinstance(data["schema"], int) or data["schema"] > GENOME_SCHEMA_VERSION:
        raise ParseError("schema", f"unsupported version {data['schema']!r}")
    if "space" not in data:
        raise ParseError("space", "missing")
    if data["space"] not in SPACE_KINDS:
        raise ParseError("space", f"unknown space kind {data['space']!r}")
    decisions = data.get("decisions")
    if not isinstance(decisions, list):
        raise ParseError("decisions", "missing or not a list")
    for i, d in enumerate(decisions):
        if not isinstance(d, int) or isinstance(d, bool):
            raise ParseError(f"decisions[{i}]", f"expected integer, got {d!r}")

    space = SearchSpace(data["space"])
    reduced = data.get("reduced")
    if reduced is not None:
        try:
            space = SearchSpace(data["space"], int(reduced["size"]),
                                int(reduced.get("num_ops", len(OP_KINDS))),
                                int(reduced.get("num_redops", len(REDOP_KINDS))))
        except (KeyError, TypeError, ValueError, InvalidGenome) as e:
            raise ParseError("reduced", str(e))
    try:
        genome = make_genome(space, decisions)
        genome.validate()
    except InvalidGenome as e:
        raise ParseError("decisions", str(e))
    return genome


def genome_from_json(text: str) -> Genome:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError("$", f"invalid JSON: {e}")
    return genome_from_dict(data)

"""Search spaces, genome decoding and the genome JSON artifact"""

import json
import math

import numpy as np
import pytest

from conftest import random_generator_genome
from errors import InvalidGenome, ParseError
from search_space import (
    DISCRIMINATOR, GENERATOR, IDENTITY_INDEX, OP_KINDS, REDOP_KINDS, DiscriminatorGenome,
    GeneratorGenome, SearchSpace, chain_genome, decision_dims, decode_discriminator,
    decode_generator, discriminator_channel_plan, enumerate_genomes, genome_from_dict,
    genome_from_json, genome_to_dict, genome_to_json, make_genome, space_cardinality,
)


class TestOperationSets:
    def test_sixteen_ops_and_seven_reductions(self):
        assert len(OP_KINDS) == 16
        assert len(REDOP_KINDS) == 7
        assert OP_KINDS[IDENTITY_INDEX].label == "Identity"

    def test_labels(self):
        assert [op.label for op in OP_KINDS[:4]] == ["Conv(1)", "Conv(3)", "Conv(5)", "Conv(7)"]
        assert OP_KINDS[4].groups == 4
        assert REDOP_KINDS[0].label == "Conv(1,s2)"
        assert all(r.stride == 2 for r in REDOP_KINDS)


class TestCardinality:
    def test_full_generator_space(self):
        expected = 16 ** 10 * math.factorial(10)
        assert space_cardinality(GENERATOR) == expected == 3_989_907_794_873_548_800

    def test_full_discriminator_space(self):
        assert space_cardinality(DISCRIMINATOR) == 112 ** 5 == 17_623_416_832

    def test_generator_dims_interleave_op_and_input(self):
        dims = decision_dims(GENERATOR)
        assert len(dims) == 20
        assert dims[0::2] == [16] * 10
        assert dims[1::2] == list(range(1, 11))

    def test_reduced_generator_matches_enumeration(self, reduced_space):
        genomes = list(enumerate_genomes(reduced_space))
        assert space_cardinality(reduced_space) == len(genomes) == 48
        assert len({g.decisions for g in genomes}) == 48

    def test_reduced_discriminator_matches_enumeration(self):
        space = SearchSpace(DISCRIMINATOR, size=2, num_ops=3, num_redops=2)
        genomes = list(enumerate_genomes(space))
        assert space_cardinality(space) == len(genomes) == 36

    def test_op_sets_must_be_prefixes(self):
        with pytest.raises(InvalidGenome):
            SearchSpace(GENERATOR, size=3, num_ops=17)


class TestDecodeGenerator:
    def test_random_genomes_decode_acyclic_with_a_leaf(self):
        rng = np.random.default_rng(7)
        for _ in range(10_000):
            cell = decode_generator(random_generator_genome(rng))
            assert cell.leaves
            assert all(src < i for i, (_, src) in enumerate(cell.nodes, start=1))
            assert len(cell.nodes) in cell.leaves

    def test_chain_has_single_leaf(self, conv3_chain):
        cell = decode_generator(conv3_chain)
        assert cell.leaves == frozenset({10})
        assert cell.output_rule == "last-node"
        assert cell.output_nodes == (10,)

    def test_all_nodes_on_input_is_leaf_sum(self):
        decisions = []
        for _ in range(10):
            decisions += [1, 0]
        cell = decode_generator(make_genome(GENERATOR, decisions))
        assert cell.leaves == frozenset(range(1, 11))
        assert cell.output_rule == "leaf-sum"

    def test_forward_reference_is_rejected(self):
        decisions = [0, 0] * 10
        decisions[5] = 2        # node 3 reading node 2 is fine
        decisions[7] = 4        # node 4 reading node 4 is not
        with pytest.raises(InvalidGenome):
            decode_generator(make_genome(GENERATOR, decisions))

    def test_wrong_length_is_rejected(self):
        with pytest.raises(InvalidGenome):
            GeneratorGenome((0, 0, 1))

    def test_describe_names_ops_and_inputs(self):
        text = decode_generator(chain_genome(1, nodes=2)).describe()
        assert text.startswith("n1=Conv(3)<-in, n2=Conv(3)<-n1")


class TestDecodeDiscriminator:
    def test_blocks_pair_op_and_reduction(self):
        genome = DiscriminatorGenome((1, 0, 15, 6, 0, 1, 2, 2, 3, 3))
        blocks = decode_discriminator(genome)
        assert len(blocks) == 5
        assert blocks[0] == (OP_KINDS[1], REDOP_KINDS[0])
        assert blocks[1] == (OP_KINDS[15], REDOP_KINDS[6])

    def test_reduction_out_of_range(self):
        with pytest.raises(InvalidGenome):
            decode_discriminator(DiscriminatorGenome((0, 7) * 5))

    def test_channel_plan_doubles(self):
        assert discriminator_channel_plan(16) == [16, 32, 64, 128, 256, 512]


class TestGenomeJson:
    def test_roundtrip_preserves_genome(self, conv3_chain):
        assert genome_from_json(genome_to_json(conv3_chain)) == conv3_chain

    def test_reduced_space_is_recorded(self, reduced_space):
        genome = next(iter(enumerate_genomes(reduced_space)))
        data = genome_to_dict(genome)
        assert data["reduced"] == {"size": 3, "num_ops": 2, "num_redops": 7}
        assert genome_from_dict(data).space == reduced_space

    def test_unknown_fields_are_ignored(self, conv3_chain):
        data = genome_to_dict(conv3_chain)
        data["comment"] = "hand edited"
        assert genome_from_dict(data) == conv3_chain

    def test_missing_space_names_the_field(self):
        text = json.dumps({"schema": 1, "space_kind": "generator", "decisions": [0, 0] * 10})
        with pytest.raises(ParseError) as err:
            genome_from_json(text)
        assert err.value.path == "space"

    def test_future_schema_rejected(self, conv3_chain):
        data = {**genome_to_dict(conv3_chain), "schema": 99}
        with pytest.raises(ParseError) as err:
            genome_from_dict(data)
        assert err.value.path == "schema"

    def test_non_integer_decision_names_its_index(self):
        decisions = [0, 0] * 10
        decisions[3] = "1"
        with pytest.raises(ParseError) as err:
            genome_from_dict({"schema": 1, "space": "generator", "decisions": decisions})
        assert err.value.path == "decisions[3]"

    def test_invalid_reference_is_a_parse_error(self):
        with pytest.raises(ParseError) as err:
            genome_from_dict({"schema": 1, "space": "generator", "decisions": [0, 1] + [0, 0] * 9})
        assert err.value.path == "decisions"

    def test_invalid_json(self):
        with pytest.raises(ParseError):
            genome_from_json("{not json")

    def test_digest_is_stable_and_distinct(self, conv3_chain, skeleton_genome):
        assert conv3_chain.digest == chain_genome(1).digest
        assert conv3_chain.digest != skeleton_genome.digest

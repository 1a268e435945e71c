import math

import numpy as np
import pytest

from _blockevo.arch import (
    AllLayersDisabled,
    BlockSpec,
    CapExceeded,
    CodecConfig,
    InvalidBlock,
    LengthMismatch,
    NetworkSpec,
    SpatialUnderflow,
    StemSpec,
    TooManyLayers,
    build_network,
    canonical_position,
    count_channels,
    count_parameters,
    decode_block,
    widen_block,
)
from _blockevo.utils import InvariantViolation


class TestDecode:
    def test_drops_sentinel_layers(self):
        codec = CodecConfig(max_layers=10)
        position = [14.2, 7.1, 6.9, 3.0, 5.4, 9.0, 7.0, 20.0, 6.6, 4.1]
        assert decode_block(position, codec).growth_rates == (14, 3, 5, 9, 20, 4)

    def test_all_sentinels(self):
        with pytest.raises(AllLayersDisabled):
            decode_block(np.full(16, 7.0), CodecConfig())

    def test_clamps_before_rounding(self):
        codec = CodecConfig(max_layers=2)
        assert decode_block([40.0, 0.2], codec).growth_rates == (32, 1)

    def test_rounds_half_away_from_zero(self):
        codec = CodecConfig(max_layers=2)
        assert decode_block([2.5, 3.5], codec).growth_rates == (3, 4)

    def test_wrong_length(self):
        with pytest.raises(LengthMismatch):
            decode_block([1.0, 2.0], CodecConfig())

    def test_matches_elementwise_rules(self):
        codec = CodecConfig()
        rng = np.random.default_rng(1)
        for _ in range(2_000):
            # half the coordinates sit exactly on .5 boundaries
            position = np.where(rng.random(16) < 0.5, rng.uniform(-5.0, 40.0, 16), rng.integers(-4, 80, 16) / 2)
            expected = []
            for value in position:
                clamped = min(max(float(value), 1.0), 32.0)
                rounded = math.floor(clamped + 0.5)
                if rounded != 7:
                    expected.append(rounded)
            if expected:
                assert decode_block(position, codec).growth_rates == tuple(expected)
            else:
                with pytest.raises(AllLayersDisabled):
                    decode_block(position, codec)

    def test_decoding_is_idempotent(self):
        codec = CodecConfig()
        rng = np.random.default_rng(2)
        for _ in range(1_000):
            block = decode_block(rng.uniform(0.0, 33.0, 16), codec)
            assert decode_block(canonical_position(block, codec), codec) == block


class TestCanonicalPosition:
    def test_pads_with_sentinel(self):
        codec = CodecConfig(max_layers=5)
        np.testing.assert_array_equal(canonical_position(BlockSpec((14, 3, 5)), codec), [14, 3, 5, 7, 7])

    def test_too_many_layers(self):
        with pytest.raises(TooManyLayers):
            canonical_position(BlockSpec((1,) * 17), CodecConfig())

    def test_sentinel_growth_not_encodable(self):
        with pytest.raises(InvalidBlock):
            canonical_position(BlockSpec((7,)), CodecConfig())

    def test_random_blocks_survive_encoding(self):
        codec = CodecConfig()
        rng = np.random.default_rng(0)
        allowed = np.array([g for g in range(1, 33) if g != 7])
        for _ in range(10_000):
            block = BlockSpec(tuple(rng.choice(allowed, size=rng.integers(1, 17))))
            assert decode_block(canonical_position(block, codec), codec) == block


class TestCodecConfig:
    def test_unreachable_sentinel(self):
        with pytest.raises(InvariantViolation) as e:
            CodecConfig(disable_sentinel=40)
        assert e.value.field == "codec.disable_sentinel"

    def test_empty_growth_range(self):
        with pytest.raises(InvariantViolation):
            CodecConfig(growth_min=5, growth_max=4, disable_sentinel=5)


class TestStacking:
    def test_widen_doubles(self):
        assert widen_block(BlockSpec((5, 5, 5)), 2).growth_rates == (10, 10, 10)

    def test_widen_by_one_is_identity(self):
        block = BlockSpec((3, 8, 2))
        assert widen_block(block, 1) == block

    def test_widen_by_three(self):
        assert widen_block(BlockSpec((3, 8, 2)), 3).growth_rates == (9, 24, 6)

    def test_widening_composes(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            block = BlockSpec(tuple(rng.integers(1, 33, size=rng.integers(1, 17))))
            a, c = (int(f) for f in rng.integers(1, 5, size=2))
            assert widen_block(widen_block(block, a), c) == widen_block(block, a * c)

    def test_widening_scales_added_channels(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            block = BlockSpec(tuple(rng.integers(1, 33, size=rng.integers(1, 17))))
            a = int(rng.integers(1, 9))
            channels = int(rng.integers(1, 64))
            added = count_channels(block, channels) - channels
            assert count_channels(widen_block(block, a), channels) - channels == a * added

    def test_widen_cap(self):
        with pytest.raises(CapExceeded):
            widen_block(BlockSpec((300,)), 2)

    @pytest.mark.parametrize("deepen", [1, 2, 3])
    def test_deepen_counts(self, deepen):
        spec = build_network(BlockSpec((4, 4)), 1, deepen, (1, 16, 16), 10)
        assert len(spec.blocks) == deepen
        assert spec.num_transitions == deepen - 1

    def test_single_block_is_unmodified(self):
        block = BlockSpec((4, 6))
        spec = build_network(block, 1, 1, (1, 8, 8), 10)
        assert spec.blocks == (block,)

    def test_spatial_underflow(self):
        with pytest.raises(SpatialUnderflow):
            build_network(BlockSpec((4,)), 1, 4, (1, 4, 4), 10)

    def test_odd_sizes_round_up(self):
        spec = build_network(BlockSpec((4,)), 1, 3, (1, 7, 5), 10)
        assert spec.spatial_sizes() == ((7, 5), (4, 3), (2, 2))

    def test_document_round_trip(self):
        spec = build_network(BlockSpec((3, 9)), 2, 3, (1, 14, 14), 10, StemSpec(kernel_size=5, out_channels=8))
        assert NetworkSpec.from_dict(spec.to_dict()) == spec
        assert list(spec.to_dict()) == ["stem", "widen", "deepen", "block", "num_classes", "input_shape"]


class TestCounting:
    def test_channels_add_up(self):
        assert count_channels(BlockSpec((14, 3, 5, 9, 20, 4)), 16) == 71
        assert count_channels(BlockSpec((5, 5, 5)), 16) == 31
        assert count_channels(BlockSpec((6,)), 3) == 9

    def test_parameters(self):
        # stem 3*3*1*8 + 8, one layer 3*3*8*2 + 2, head into 10 channels over 10 classes
        spec = build_network(BlockSpec((2,)), 1, 1, (1, 8, 8), 10, StemSpec(out_channels=8))
        assert count_parameters(spec) == 80 + 146 + 110

    def test_default_stem(self):
        spec = build_network(BlockSpec((1,)), 1, 1, (1, 8, 8), 2)
        stem = 3 * 3 * 1 * 16 + 16
        assert stem == 160
        assert count_parameters(spec) == stem + (9 * 16 + 1) + (17 * 2 + 2)

    def test_transitions_counted(self):
        spec = build_network(BlockSpec((2,)), 1, 2, (1, 8, 8), 2, StemSpec(out_channels=4))
        # stem, layer, transition 6x6 1x1 conv, layer on 6 channels, head on 8 channels
        expected = (9 * 4 + 4) + (9 * 4 * 2 + 2) + (6 * 6 + 6) + (9 * 6 * 2 + 2) + (8 * 2 + 2)
        assert count_parameters(spec) == expected

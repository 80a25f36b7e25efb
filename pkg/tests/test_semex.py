import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from semkd.semex import (FeatureMapStack, build_ilfm, channel_decode, channel_encode, compress,
                         feature_map_weights, header_bits, stack_from_features)


def _stack_with_weights(weights, h=2, w=2):
    # constant maps so the spatial mean equals the requested weight exactly
    weights = np.asarray(weights, dtype=np.float64)
    return FeatureMapStack(np.repeat(weights, h * w).reshape(len(weights), h, w))


def brute_force_kept(weights, threshold):
    """Largest index subset whose every member clears the threshold."""
    k = len(weights)
    best = ()
    for r in range(k + 1):
        for subset in itertools.combinations(range(k), r):
            if all(abs(weights[i]) >= threshold for i in subset) and len(subset) > len(best):
                best = subset
    return list(best)


map_weights = st.lists(st.floats(-1.5, 1.5, allow_nan=False, width=32), min_size=1, max_size=8)


class TestWeights:
    def test_activation_mean(self):
        maps = np.arange(8.0).reshape(2, 2, 2)
        assert feature_map_weights(FeatureMapStack(maps)).tolist() == [1.5, 5.5]

    def test_gradient_mode(self):
        stack = stack_from_features(np.ones(8), (2, 2), class_context=1,
                                    head_weights=np.arange(16.0).reshape(8, 2))
        # column 1 of the head is 1, 3, 5, ..., 15
        assert feature_map_weights(stack, "gradient").tolist() == [4.0, 12.0]

    def test_gradient_mode_needs_gradients(self):
        with pytest.raises(ValueError):
            feature_map_weights(_stack_with_weights([0.1]), "gradient")

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            feature_map_weights(_stack_with_weights([0.1]), "variance")

    def test_bad_reshape(self):
        with pytest.raises(ValueError):
            stack_from_features(np.zeros(6), (2, 2))


class TestILFM:
    def test_example(self):
        assert build_ilfm([0.1, -0.9, 0.5, 0.9]) == [1, 3, 2, 0]

    def test_ties_ascending(self):
        assert build_ilfm([0.2, -0.2, 0.2]) == [0, 1, 2]

    @given(map_weights)
    def test_is_sorted_permutation(self, weights):
        order = build_ilfm(weights)
        assert sorted(order) == list(range(len(weights)))
        mags = [abs(weights[i]) for i in order]
        assert mags == sorted(mags, reverse=True)


class TestCompress:
    def test_example(self):
        cs = compress(_stack_with_weights([0.1, -0.9, 0.5, 0.29]), 0.3)
        assert cs.kept == [1, 2]
        assert cs.zeroed == 2 and cs.ratio == 0.5
        assert cs.compressed_bits == 32 * 4 * 4 // 2
        assert np.all(cs.maps[[0, 3]] == 0)

    def test_boundary_is_kept(self):
        assert compress(_stack_with_weights([0.25, 0.5]), 0.25).kept == [0, 1]

    def test_zero_threshold_keeps_all(self):
        cs = compress(_stack_with_weights([0.0, 0.0, 0.4]), 0.0)
        assert cs.zeroed == 0 and cs.compressed_bits == cs.payload_bits

    @pytest.mark.parametrize("threshold", [-0.1, 1.0, 2.0])
    def test_threshold_domain(self, threshold):
        with pytest.raises(ValueError):
            compress(_stack_with_weights([0.5]), threshold)

    def test_payload_rounding(self):
        # 1000 bits with 1 of 3 maps kept: 333.33 rounds to 333
        cs = compress(_stack_with_weights([0.9, 0.0, 0.0]), 0.5, payload_bits=1000)
        assert cs.compressed_bits == 333

    @settings(max_examples=200)
    @given(map_weights, st.floats(0.0, 0.999))
    def test_matches_brute_force(self, weights, threshold):
        cs = compress(_stack_with_weights(weights), threshold)
        assert cs.kept == brute_force_kept(weights, threshold)

    @given(map_weights, st.floats(0.0, 0.999))
    def test_kept_is_ilfm_prefix(self, weights, threshold):
        cs = compress(_stack_with_weights(weights), threshold)
        assert sorted(build_ilfm(weights)[:len(cs.kept)]) == cs.kept

    @given(map_weights, st.floats(0.0, 0.98), st.floats(0.001, 0.5))
    def test_monotone_in_threshold(self, weights, lo, step):
        hi = min(lo + step, 0.999)
        stack = _stack_with_weights(weights)
        assert set(compress(stack, hi).kept) <= set(compress(stack, lo).kept)

    @given(map_weights, st.floats(0.0, 0.999), st.floats(1, 1e7))
    def test_ratio_and_bits(self, weights, threshold, payload):
        cs = compress(_stack_with_weights(weights), threshold, payload_bits=payload)
        k = len(weights)
        assert cs.ratio == cs.zeroed / k
        assert abs(cs.compressed_bits - (1 - cs.ratio) * payload) <= 0.5 + 1e-9 * payload


class TestFrame:
    def test_header_bits(self):
        assert header_bits(1) == 8 * 12
        assert header_bits(16) == 8 * 13
        assert header_bits(17) == 8 * 14

    @settings(max_examples=100)
    @given(arrays(np.float32, st.tuples(st.integers(1, 20), st.integers(1, 3), st.integers(1, 3)),
                  elements=st.floats(-2, 2, width=32)),
           st.floats(0.0, 0.999))
    def test_roundtrip_bit_exact(self, maps, threshold):
        cs = compress(FeatureMapStack(maps), threshold)
        frame = channel_encode(cs)
        decoded, kept = channel_decode(frame)
        assert kept == cs.kept
        assert decoded.tobytes() == cs.maps.astype(np.float32).tobytes()
        k, h, w = maps.shape
        # with the raw float32 payload, frame = header + compressed payload
        assert 8 * len(frame) == header_bits(k) + cs.compressed_bits

    def test_all_dropped(self):
        cs = compress(_stack_with_weights([0.0, 0.1]), 0.5)
        maps, kept = channel_decode(channel_encode(cs))
        assert kept == [] and not maps.any()
        assert len(channel_encode(cs)) == 12

    @pytest.mark.parametrize("mutation", ["magic", "version", "truncate_body", "short"])
    def test_rejects_corrupt(self, mutation):
        frame = bytearray(channel_encode(compress(_stack_with_weights([0.9, 0.8]), 0.5)))
        if mutation == "magic":
            frame[0] = ord("X")
        elif mutation == "version":
            frame[4] = 9
        elif mutation == "truncate_body":
            frame = frame[:-1]
        else:
            frame = frame[:5]
        with pytest.raises(ValueError):
            channel_decode(bytes(frame))

    def test_layout(self):
        frame = channel_encode(compress(_stack_with_weights([0.9, 0.0, 0.7]), 0.5))
        assert frame[:4] == b"SEMX" and frame[4] == 1
        assert frame[5:11] == bytes([3, 0, 2, 0, 2, 0])
        assert frame[11] == 0b101
        assert len(frame) == 12 + 2 * 4 * 4
        assert math.isclose(np.frombuffer(frame[12:16], "<f4")[0], 0.9, rel_tol=1e-7)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hategraph import segmentation as seg


class TestSegmentBoundaries:
    def test_even_split(self):
        layout = seg.segment_boundaries(10.0, 5)
        assert layout.boundaries == ((0.0, 2.0), (2.0, 4.0), (4.0, 6.0), (6.0, 8.0), (8.0, 10.0))

    def test_single_segment(self):
        assert seg.segment_boundaries(1.0, 1).boundaries == ((0.0, 1.0),)

    def test_uneven_duration_sums_back(self):
        layout = seg.segment_boundaries(7.3, 4)
        lengths = [end - start for start, end in layout.boundaries]
        assert all(abs(l - 7.3 / 4) < 1e-12 for l in lengths)
        # oracle: summed lengths reconstruct the duration, intervals are contiguous
        assert abs(sum(lengths) - 7.3) < 1e-12
        for (_, end), (start, _) in zip(layout.boundaries, layout.boundaries[1:]):
            assert end == start
        assert layout.boundaries[0][0] == 0.0
        assert layout.boundaries[-1][1] == 7.3

    @pytest.mark.parametrize("duration,n", [(0.0, 3), (-1.0, 3), (5.0, 0)])
    def test_invalid_inputs(self, duration, n):
        with pytest.raises(ValueError):
            seg.segment_boundaries(duration, n)


class TestAssignSentences:
    def test_straddling_sentence_in_both(self):
        layout = seg.segment_boundaries(4.0, 2)
        assigned = seg.assign_sentences([(1.5, 2.5)], layout)
        assert assigned == [[0], [0]]

    def test_exact_segment_span_single_assignment(self):
        layout = seg.segment_boundaries(4.0, 2)
        assigned = seg.assign_sentences([(0.0, 2.0)], layout)
        assert assigned == [[0], []]

    def test_empty_transcript(self):
        layout = seg.segment_boundaries(4.0, 2)
        assert seg.assign_sentences([], layout) == [[], []]

    def test_point_touch_is_not_overlap(self):
        layout = seg.segment_boundaries(4.0, 2)
        # sentence ends exactly where segment 1 starts
        assert seg.assign_sentences([(1.0, 2.0)], layout) == [[0], []]

    def test_inverted_span_rejected(self):
        layout = seg.segment_boundaries(4.0, 2)
        with pytest.raises(ValueError, match="sentence 0"):
            seg.assign_sentences([(3.0, 1.0)], layout)

    def test_random_sentences_match_bruteforce(self, rng):
        layout = seg.segment_boundaries(33.0, 10)
        sentences = []
        for _ in range(50):
            start = float(rng.uniform(0, 33))
            sentences.append((start, start + float(rng.uniform(0, 6))))
        assigned = seg.assign_sentences(sentences, layout)
        for i, (s0, s1) in enumerate(layout.boundaries):
            expected = [j for j, (a, b) in enumerate(sentences) if max(a, s0) < min(b, s1)]
            assert assigned[i] == expected

    @given(st.floats(0.0, 30.0), st.floats(0.001, 10.0), st.floats(0.0, 5.0))
    @settings(max_examples=60, deadline=None)
    def test_extending_a_sentence_is_monotone(self, start, length, extra):
        layout = seg.segment_boundaries(30.0, 6)
        short = seg.assign_sentences([(start, start + length)], layout)
        longer = seg.assign_sentences([(start - extra, start + length + extra)], layout)
        for got_short, got_long in zip(short, longer):
            assert set(got_short) <= set(got_long)


class TestInstancePartition:
    def test_singleton_instances(self):
        part = seg.instance_partition(10, 10)
        assert part.groups == tuple((i,) for i in range(10))

    def test_grouped(self):
        part = seg.instance_partition(12, 4)
        assert part.groups == ((0, 1, 2), (3, 4, 5), (6, 7, 8), (9, 10, 11))

    def test_degenerate_single_instance(self):
        part = seg.instance_partition(7, 1)
        assert part.groups == (tuple(range(7)),)

    def test_non_divisor_rejected(self):
        with pytest.raises(ValueError, match="does not divide"):
            seg.instance_partition(10, 3)

    @pytest.mark.parametrize("n,k", [(12, 4), (20, 10), (6, 6), (8, 1), (100, 25)])
    def test_partition_properties(self, n, k):
        part = seg.instance_partition(n, k)
        seen = [idx for group in part.groups for idx in group]
        assert sorted(seen) == list(range(n))
        assert len(seen) == len(set(seen))
        assert all(len(g) == n // k for g in part.groups)
        # groups are consecutive runs
        for g in part.groups:
            assert list(g) == list(range(g[0], g[0] + len(g)))

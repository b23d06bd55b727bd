import collections

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uvinpaint import maskgen as mg
from uvinpaint.errors import ParameterError


def _iou(a, b):
    a, b = a[:, :, 0] > 0.5, b[:, :, 0] > 0.5
    return (a & b).sum() / max((a | b).sum(), 1)


def test_spec_validation():
    with pytest.raises(ParameterError):
        mg.MaskSpec(kind="blob")
    with pytest.raises(ParameterError):
        mg.MaskSpec(motion="wobble")
    with pytest.raises(ParameterError):
        mg.MaskSpec(coverage_range=(0.0, 0.2))
    with pytest.raises(ParameterError):
        mg.MaskSpec(coverage_range=(0.3, 0.2))


def test_coverage_trivials():
    assert mg.coverage(np.zeros((8, 8, 1))) == 0.0
    assert mg.coverage(np.ones((8, 8, 1))) == 1.0
    half = np.zeros((8, 8, 1))
    half[:, :4] = 1.0
    assert mg.coverage(half) == 0.5


def test_coverage_rejects_non_binary():
    with pytest.raises(ParameterError):
        mg.coverage(np.full((4, 4, 1), 0.5))


@pytest.mark.parametrize("kind", ["rect", "irregular"])
def test_static_sequences_identical(kind):
    frames = mg.make_mask_sequence(mg.MaskSpec(kind=kind, motion="static",
                                               seed=5, n_frames=6))
    for f in frames[1:]:
        assert np.array_equal(frames[0], f)


@pytest.mark.parametrize("kind", ["rect", "irregular"])
def test_coverage_in_range(kind):
    for seed in range(8):
        for motion in ("static", "shifting"):
            spec = mg.MaskSpec(kind=kind, motion=motion, seed=seed, n_frames=4)
            for f in mg.make_mask_sequence(spec):
                assert 0.08 <= mg.coverage(f) <= 0.20


@pytest.mark.parametrize("kind", ["rect", "irregular"])
def test_shifting_iou_bounds(kind):
    for seed in range(6):
        frames = mg.make_mask_sequence(mg.MaskSpec(kind=kind, motion="shifting",
                                                   seed=seed, n_frames=6))
        for a, b in zip(frames[:-1], frames[1:]):
            iou = _iou(a, b)
            assert 0.2 < iou < 1.0


def test_deterministic_and_distinct_seeds():
    spec = mg.MaskSpec(kind="irregular", motion="shifting", seed=9, n_frames=4)
    a = mg.make_mask_sequence(spec)
    b = mg.make_mask_sequence(spec)
    for fa, fb in zip(a, b):
        assert np.array_equal(fa, fb)
    digests = set()
    for seed in range(1000):
        frames = mg.make_mask_sequence(mg.MaskSpec(kind="rect", seed=seed,
                                                   n_frames=1))
        digests.add(frames[0].tobytes())
    assert len(digests) >= 999


def _component_count(mask):
    m = (mask[:, :, 0] > 0.5).astype(np.int8)
    seen = np.zeros_like(m)
    n = 0
    for y, x in np.argwhere(m):
        if seen[y, x]:
            continue
        n += 1
        queue = collections.deque([(y, x)])
        seen[y, x] = 1
        while queue:
            a, b = queue.popleft()
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                yy, xx = a + dy, b + dx
                if (0 <= yy < m.shape[0] and 0 <= xx < m.shape[1]
                        and m[yy, xx] and not seen[yy, xx]):
                    seen[yy, xx] = 1
                    queue.append((yy, xx))
    return n


def test_irregular_single_connected_component():
    for seed in range(10):
        frames = mg.make_mask_sequence(mg.MaskSpec(kind="irregular", seed=seed,
                                                   n_frames=1))
        assert _component_count(frames[0]) == 1


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_coverage_in_range_property(seed):
    frames = mg.make_mask_sequence(mg.MaskSpec(kind="rect", motion="shifting",
                                               seed=seed, n_frames=2,
                                               image_size=(96, 96)))
    for f in frames:
        assert 0.08 <= mg.coverage(f) <= 0.20

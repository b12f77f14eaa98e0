import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from caoguide.errors import EvenBlockSize, FewerThanFiveClusters
from caoguide.fiducial_extract import (
    adaptive_threshold,
    blob_filter,
    circularity,
    contour_perimeter,
    default_cluster_eps,
    dilate,
    find_blobs,
    fiducial_masks,
    lift_fiducials,
    select_fiducials,
)
from caoguide.registration import order_by_centroid_distance


def brute_threshold(img, block, c):
    h, w = img.shape
    r = block // 2
    out = np.zeros((h, w), dtype=bool)
    for i in range(h):
        for j in range(w):
            s = 0
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    s += int(img[min(max(i + di, 0), h - 1), min(max(j + dj, 0), w - 1)])
            out[i, j] = img[i, j] < s / (block * block) - c
    return out


def brute_dilate(mask):
    h, w = mask.shape
    out = np.zeros_like(mask)
    for i, j in zip(*np.nonzero(mask)):
        out[max(i - 2, 0):i + 3, max(j - 2, 0):j + 3] = True
    return out


def disk(r, size=None):
    size = size or 2 * r + 5
    yy, xx = np.mgrid[:size, :size] - size // 2
    return xx * xx + yy * yy <= r * r


# --- threshold ------------------------------------------------------------


def test_uniform_image_empty():
    assert not adaptive_threshold(np.full((20, 20), 128, np.uint8), 11, 2).any()


def test_single_dark_pixel():
    img = np.full((21, 21), 255, np.uint8)
    img[10, 10] = 0
    m = adaptive_threshold(img, 11, 2)
    assert m[10, 10] and m.sum() == 1


def test_threshold_matches_brute_force():
    rng = np.random.default_rng(0)
    yy, xx = np.mgrid[:30, :40]
    img = (80 + 3 * xx + 2 * yy).clip(0, 255).astype(np.uint8)
    for cy, cx in rng.integers(3, 27, (6, 2)):
        img[(yy - cy) ** 2 + (xx - cx) ** 2 <= 4] = 30
    img = (img.astype(int) + rng.integers(-3, 4, img.shape)).clip(0, 255).astype(np.uint8)
    for block, c in ((3, 0), (11, 2), (7, 5.5)):
        assert np.array_equal(adaptive_threshold(img, block, c), brute_threshold(img, block, c))


@pytest.mark.parametrize("block", [0, 1, 2, 4, 10])
def test_even_or_small_block(block):
    with pytest.raises(EvenBlockSize):
        adaptive_threshold(np.zeros((5, 5)), block, 2)


# --- dilation ---------------------------------------------------------------


def test_dilate_examples():
    assert not dilate(np.zeros((6, 6), bool)).any()
    m = np.zeros((9, 9), bool)
    m[4, 4] = True
    assert np.array_equal(np.argwhere(dilate(m)).min(0), [2, 2]) and dilate(m).sum() == 25
    m = np.zeros((9, 9), bool)
    m[0, 0] = True
    assert dilate(m).sum() == 9


@settings(max_examples=60, deadline=None)
@given(arrays(bool, st.tuples(st.integers(1, 14), st.integers(1, 14))))
def test_dilate_matches_union_oracle(mask):
    d = dilate(mask)
    assert np.array_equal(d, brute_dilate(mask))
    assert (d | mask).sum() == d.sum()  # extensive
    assert (dilate(d) | d).sum() == dilate(d).sum()


@settings(max_examples=40, deadline=None)
@given(arrays(bool, (10, 10)), arrays(bool, (10, 10)))
def test_dilate_increasing(a, b):
    assert not (dilate(a) & ~dilate(a | b)).any()


# --- perimeter and circularity -----------------------------------------------


def test_single_pixel():
    b = find_blobs(np.ones((1, 1), bool))[0]
    assert b.area == 1 and b.perimeter == 4.0
    assert b.circularity == pytest.approx(math.pi / 4)
    assert len(blob_filter(np.ones((1, 1), bool))) == 1


def test_line_removed():
    m = np.zeros((5, 30), bool)
    m[2, 5:25] = True
    b = find_blobs(m)[0]
    assert b.perimeter == 38.0
    assert b.circularity == pytest.approx(4 * math.pi * 20 / 38 ** 2)
    assert b.circularity < 0.5 and blob_filter(m) == []


def test_hand_traced_perimeters():
    assert contour_perimeter(np.ones((2, 2), bool)) == 4.0
    assert contour_perimeter(np.ones((5, 5), bool)) == 16.0
    ring = np.ones((5, 5), bool)
    ring[2, 2] = False
    assert contour_perimeter(ring) == 16.0  # holes do not count
    assert contour_perimeter(np.eye(3, dtype=bool)) == pytest.approx(4 * math.sqrt(2))
    plus = np.zeros((3, 3), bool)
    plus[1, :] = plus[:, 1] = True
    assert contour_perimeter(plus) == pytest.approx(4 * math.sqrt(2))


def test_disk_radius_10():
    b = find_blobs(disk(10))[0]
    assert b.circularity >= 0.9


def test_disk_circularity_converges():
    # under unit/sqrt(2) contour steps, digital disks settle just above 0.9
    vals = [find_blobs(disk(r))[0].circularity for r in (5, 10, 20, 30, 40, 50)]
    assert all(0.89 <= v <= 1.0 for v in vals)
    assert abs(vals[-1] - vals[-2]) < 0.01


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 6), st.integers(0, 6), st.integers(2, 6))
def test_translation_invariance(dy, dx, r):
    base = np.zeros((30, 30), bool)
    base[2:2 + 2 * r + 1, 2:2 + 2 * r + 1] = disk(r, 2 * r + 1)
    moved = np.roll(np.roll(base, dy, 0), dx, 1)
    assert find_blobs(base)[0].circularity == find_blobs(moved)[0].circularity


def test_every_blob_positive():
    rng = np.random.default_rng(4)
    for b in find_blobs(rng.random((40, 40)) < 0.35):
        assert b.area >= 1 and b.circularity > 0


def test_tiny_blob_overshoot():
    # a contour through pixel centres is short for thin blobs, so circularity exceeds 1
    assert find_blobs(np.ones((2, 1), bool))[0].circularity == pytest.approx(2 * math.pi)
    assert find_blobs(np.ones((2, 2), bool))[0].circularity == pytest.approx(math.pi)
    assert find_blobs(np.ones((5, 5), bool))[0].circularity == pytest.approx(4 * math.pi * 25 / 256)


# --- clustering ---------------------------------------------------------------


def clusters(centers, n_each, rng, spread=0.05):
    return np.concatenate([c + rng.normal(0, spread, (n, 3)) for c, n in zip(centers, n_each)])


CENTERS = np.array([[0, 0, 0], [5, 0, 0], [0, 7, 0], [9, 9, 1], [-6, 3, 2]], float)


def test_five_clusters_recovered():
    rng = np.random.default_rng(0)
    pts = clusters(CENTERS, [30] * 5, rng)
    fs = select_fiducials(pts, eps=0.5)
    for c in CENTERS:
        assert np.linalg.norm(fs.points - c, axis=1).min() < 0.25
    assert np.all(np.diff(fs.ordering_key) >= 0)


def test_four_clusters():
    rng = np.random.default_rng(0)
    with pytest.raises(FewerThanFiveClusters) as exc:
        select_fiducials(clusters(CENTERS[:4], [20] * 4, rng), eps=0.5)
    assert exc.value.found_n == 4


def test_tiny_sixth_cluster_dropped():
    rng = np.random.default_rng(1)
    pts = np.concatenate([clusters(CENTERS, [30] * 5, rng), [[20, 20, 20], [20.1, 20, 20]]])
    fs = select_fiducials(pts, eps=0.5)
    assert np.linalg.norm(fs.points - [20, 20, 20], axis=1).min() > 5
    assert fs.cluster_sizes.min() == 30


def test_output_permutation_invariant():
    rng = np.random.default_rng(2)
    pts = clusters(CENTERS, [25, 26, 27, 28, 29], rng)
    a = select_fiducials(pts, 0.5)
    b = select_fiducials(pts[rng.permutation(len(pts))], 0.5)
    assert np.allclose(a.points, b.points, rtol=0, atol=1e-12)
    assert np.array_equal(order_by_centroid_distance(a.points), np.arange(5))


def test_default_eps_is_one_percent_of_diagonal():
    pts = np.array([[0, 0, 0], [30, 40, 0]], float)
    assert default_cluster_eps(pts) == pytest.approx(0.5)


# --- synthetic scene ----------------------------------------------------------


def test_lift_on_synthetic_scene(scene):
    fmasks = fiducial_masks(scene.grays, scene.masks)
    assert all(set(np.unique(m.labels)) <= {0, 3} for m in fmasks.values())
    eps = default_cluster_eps(scene.dense)
    fs = lift_fiducials(fmasks, scene.bundle, scene.dense)
    truth = scene.truth.fiducials_recon
    d = np.linalg.norm(fs.points[:, None] - truth[None], axis=2).min(axis=1)
    assert np.all(d < eps / 2)


def test_threads_do_not_change_masks(scene):
    ids = sorted(scene.grays)[:4]
    grays = {i: scene.grays[i] for i in ids}
    one = fiducial_masks(grays, scene.masks, threads=1)
    four = fiducial_masks(grays, scene.masks, threads=4)
    assert all(np.array_equal(one[i].labels, four[i].labels) for i in ids)

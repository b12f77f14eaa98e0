"""Detect cauterized fiducial marks and lift them to 3D registration points.

Per image: adaptive threshold (dark-on-bright), restriction to the trachea
segmentation, 5x5 dilation, and removal of components with circularity
below 0.5. The surviving blobs become fiducial masks, which are fused onto
the dense cloud; fiducial-labeled points are grouped by single linkage and
the centroids of the five largest groups are the registration points.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .colmap_model import Label, ReconstructionBundle
from .errors import EvenBlockSize, FewerThanFiveClusters
from .label_fusion import MaskCode, MaskImage, fuse_dense

MIN_CIRCULARITY = 0.5
N_FIDUCIALS = 5
_DILATE_KERNEL = np.ones((5, 5), dtype=bool)

# Moore neighbourhood, clockwise in image coordinates (row down) starting east.
_DIRS = [(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)]


@dataclass(frozen=True, eq=False)
class Blob:
    pixels: np.ndarray  # (K, 2) row, col
    area: int
    perimeter: float
    circularity: float


@dataclass(frozen=True, eq=False)
class FiducialSet:
    points: np.ndarray          # (5, 3), ascending distance to their centroid
    ordering_key: np.ndarray    # (5,) distances to the centroid
    cluster_sizes: np.ndarray   # (5,) point counts of the selected clusters


def adaptive_threshold(img, block: int = 11, c: float = 2.0) -> np.ndarray:
    """Foreground where intensity < (block x block mean, edge-replicated) - c."""
    if block < 3 or block % 2 == 0:
        raise EvenBlockSize(block)
    a = np.asarray(img, dtype=np.int64)
    r = block // 2
    padded = np.pad(a, r, mode="edge")
    # integral image with a zero row/column keeps box sums exact in integers
    ii = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1), dtype=np.int64)
    ii[1:, 1:] = padded.cumsum(0).cumsum(1)
    h, w = a.shape
    box = ii[block:block + h, block:block + w] - ii[:h, block:block + w] \
        - ii[block:block + h, :w] + ii[:h, :w]
    n = block * block
    return a * n < box - c * n


def dilate(mask, kernel: np.ndarray = _DILATE_KERNEL) -> np.ndarray:
    """Binary dilation with a full square structuring element, clipped at the border."""
    return ndimage.binary_dilation(np.asarray(mask, dtype=bool), structure=kernel)


def contour_perimeter(component: np.ndarray) -> float:
    """Length of the outer 8-connected boundary of one component.

    The boundary is traced through pixel centres (Moore neighbour tracing);
    edge moves count 1 and diagonal moves sqrt(2). A single pixel has no
    moves and is assigned perimeter 4.
    """
    comp = np.pad(np.asarray(component, dtype=bool), 1)
    rows, cols = np.nonzero(comp)
    if len(rows) == 0:
        return 0.0
    if len(rows) == 1:
        return 4.0
    start_idx = np.lexsort((cols, rows))[0]
    start = (int(rows[start_idx]), int(cols[start_idx]))
    # west of the top-left-most pixel is background: the initial backtrack
    cur, back = start, (start[0], start[1] - 1)
    first_next = None
    length = 0.0
    while True:
        d0 = _DIRS.index((back[0] - cur[0], back[1] - cur[1]))
        prev = back
        for step in range(1, 9):
            d = (d0 + step) % 8
            nxt = (cur[0] + _DIRS[d][0], cur[1] + _DIRS[d][1])
            if comp[nxt]:
                break
            prev = nxt
        # Jacob's criterion: leaving the start pixel the same way as the first time
        if cur == start and nxt == first_next:
            break
        if first_next is None:
            first_next = nxt
        length += math.sqrt(2.0) if d % 2 else 1.0
        cur, back = nxt, prev
    return length


def circularity(area: float, perimeter: float) -> float:
    return 4.0 * math.pi * area / (perimeter * perimeter)


def find_blobs(mask) -> list[Blob]:
    """All 8-connected components with area, traced perimeter and circularity."""
    labeled, n = ndimage.label(np.asarray(mask, dtype=bool), structure=np.ones((3, 3)))
    blobs = []
    for k, sl in enumerate(ndimage.find_objects(labeled), start=1):
        sub = labeled[sl] == k
        area = int(sub.sum())
        perim = contour_perimeter(sub)
        rr, cc = np.nonzero(sub)
        pix = np.stack([rr + sl[0].start, cc + sl[1].start], axis=1)
        blobs.append(Blob(pix, area, perim, circularity(area, perim)))
    return blobs


def blob_filter(mask, min_circularity: float = MIN_CIRCULARITY) -> list[Blob]:
    return [b for b in find_blobs(mask) if b.circularity >= min_circularity]


def fiducial_mask(gray, seg_mask: MaskImage | None, block: int = 11, c: float = 2.0) -> MaskImage:
    """Fiducial mask (codes 0 / 3) for one grayscale image.

    Thresholding is restricted to pixels the segmentation calls trachea.
    """
    fg = adaptive_threshold(gray, block, c)
    if seg_mask is not None:
        fg &= seg_mask.labels == MaskCode.TRACHEA
    fg = dilate(fg)
    out = np.zeros(fg.shape, dtype=np.uint8)
    for b in blob_filter(fg):
        out[b.pixels[:, 0], b.pixels[:, 1]] = MaskCode.FIDUCIAL
    return MaskImage(out)


def fiducial_masks(grays: Mapping[int, np.ndarray], seg_masks: Mapping[int, MaskImage] | None,
                   block: int = 11, c: float = 2.0, threads: int = 1) -> dict[int, MaskImage]:
    ids = sorted(grays)

    def one(iid):
        return fiducial_mask(grays[iid], None if seg_masks is None else seg_masks.get(iid), block, c)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, ids))
    else:
        results = [one(i) for i in ids]
    return dict(zip(ids, results))


def single_linkage_clusters(points: np.ndarray, eps: float) -> np.ndarray:
    """Cluster label per point; points closer than eps are chained together."""
    n = len(points)
    if n == 0:
        return np.zeros(0, dtype=int)
    pairs = cKDTree(points).query_pairs(eps, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    return labels


def default_cluster_eps(cloud_positions: np.ndarray) -> float:
    """1% of the cloud's bounding-box diagonal."""
    extent = cloud_positions.max(axis=0) - cloud_positions.min(axis=0)
    return 0.01 * float(np.linalg.norm(extent))


def select_fiducials(points: np.ndarray, eps: float, n: int = N_FIDUCIALS) -> FiducialSet:
    """Centroids of the n largest single-linkage clusters, ordered by centroid distance."""
    from .registration import order_by_centroid_distance

    labels = single_linkage_clusters(points, eps)
    n_found = int(labels.max()) + 1 if len(labels) else 0
    if n_found < n:
        raise FewerThanFiveClusters(n_found)
    sizes = np.bincount(labels, minlength=n_found)
    centroids = np.stack([points[labels == k].mean(axis=0) for k in range(n_found)])
    # size descending, then centroid coordinates for a permutation-independent order
    order = np.lexsort((centroids[:, 2], centroids[:, 1], centroids[:, 0], -sizes))[:n]
    chosen, chosen_sizes = centroids[order], sizes[order]
    perm = order_by_centroid_distance(chosen)
    chosen, chosen_sizes = chosen[perm], chosen_sizes[perm]
    key = np.linalg.norm(chosen - chosen.mean(axis=0), axis=1)
    return FiducialSet(chosen, key, chosen_sizes)


def lift_fiducials(fid_masks: Mapping[int, MaskImage], bundle: ReconstructionBundle,
                   dense_positions, eps: float | None = None,
                   background_votes: bool = True) -> FiducialSet:
    pts = np.asarray(dense_positions, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise FewerThanFiveClusters(0)
    fused = fuse_dense(pts, bundle, fid_masks, background_votes)
    fid_pts = fused.select(Label.FIDUCIAL)
    if eps is None:
        eps = default_cluster_eps(pts)
    return select_fiducials(fid_pts, eps)

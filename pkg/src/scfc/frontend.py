"""Coupled region detector and attribute predictor over precomputed feature maps.

The convolutional backbone is out of scope: feature maps arrive from files or
are synthesized. Everything downstream of the map (anchor scoring, box deltas,
bilinear region pooling, attribute probabilities, focal losses) is on the tape
so the whole frontend is gradient-checkable, including the dependence of pooled
region features on the box-delta head.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class FeatureMap:
    """H x W x C map of backbone activations."""
    values: Tensor

    def __post_init__(self):
        if self.values.data.ndim != 3:
            raise ValueError(f"feature map must be HxWxC, got {self.values.shape}")
        if not np.all(np.isfinite(self.values.data)):
            raise ValueError("feature map contains non-finite values")

    @property
    def height(self):
        return self.values.data.shape[0]

    @property
    def width(self):
        return self.values.data.shape[1]

    @property
    def channels(self):
        return self.values.data.shape[2]


def random_feature_map(height, width, channels, rng) -> FeatureMap:
    return FeatureMap(Tensor(rng.uniform(-1.0, 1.0, size=(height, width, channels))))


@dataclass
class AnchorSet:
    """Anchor boxes as (cx, cy, w, h) rows in feature-map coordinates."""
    anchors: np.ndarray
    per_location: int

    def __len__(self):
        return self.anchors.shape[0]


@dataclass
class RegionFeatureSet:
    """The visual component: n region descriptors plus geometry and confidence."""
    V: Tensor                      # (n, h)
    boxes: np.ndarray | None = None    # (n, 4) corner form (x0, y0, x1, y1)
    scores: np.ndarray | None = None   # descending

    @property
    def count(self):
        return self.V.data.shape[0]

    @property
    def dim(self):
        return self.V.data.shape[1]


@dataclass
class AttributeCatalog:
    """The c detectable attributes as vocabulary ids; embeddings stay shared."""
    word_ids: list[int]
    vocab_size: int

    def __post_init__(self):
        if len(set(self.word_ids)) != len(self.word_ids):
            raise ValueError("attribute ids must be distinct")
        if any(not (0 <= i < self.vocab_size) for i in self.word_ids):
            raise ValueError("attribute id outside vocabulary")

    @property
    def count(self):
        return len(self.word_ids)

    def one_hot(self) -> np.ndarray:
        """Dense |vocab| x c indicator matrix (one 1 per column)."""
        a = np.zeros((self.vocab_size, self.count))
        a[self.word_ids, np.arange(self.count)] = 1.0
        return a

    def embeddings(self, embedding: Tensor) -> Tensor:
        """Columns of the shared embedding for the catalog words, (e, c)."""
        return ad.take_columns(embedding, self.word_ids)


@dataclass
class AttributeProbabilities:
    raw: Tensor         # (c, n), per-region
    aggregated: Tensor  # (c,), noisy-OR over regions


@dataclass
class DetectionTargets:
    """Supervision for the frontend losses.

    labels: 0/1 objectness per anchor; deltas: regression targets, only rows
    with label 1 are read; attributes: 0/1 presence per catalog attribute,
    derived from the ground-truth captions.
    """
    labels: np.ndarray
    deltas: np.ndarray
    attributes: np.ndarray


# -- anchors and geometry -----------------------------------------------------

def generate_anchors(map_dims, scales, ratios) -> AnchorSet:
    """One anchor per (location, scale, ratio); identical shapes at every location."""
    height, width = map_dims
    scales = list(scales)
    ratios = list(ratios)
    if height < 1 or width < 1:
        raise ValueError("map dims must be positive")
    if not scales or not ratios or min(scales) <= 0 or min(ratios) <= 0:
        raise ValueError("scales and ratios must be non-empty and positive")
    shapes = []
    for s in scales:
        for r in ratios:
            shapes.append((s * np.sqrt(1.0 / r), s * np.sqrt(r)))  # w, h with h/w = r
    rows = []
    for y in range(height):
        for x in range(width):
            for w, h in shapes:
                rows.append((float(x), float(y), w, h))
    return AnchorSet(np.array(rows, dtype=np.float64), per_location=len(shapes))


def _corners(boxes_cxcywh):
    c = boxes_cxcywh
    half = c[:, 2:4] / 2.0
    return np.concatenate([c[:, 0:2] - half, c[:, 0:2] + half], axis=1)


def iou_matrix(corners_a, corners_b):
    """Pairwise IoU of corner-form boxes."""
    ax0, ay0, ax1, ay1 = corners_a.T
    bx0, by0, bx1, by1 = corners_b.T
    ix0 = np.maximum(ax0[:, None], bx0[None, :])
    iy0 = np.maximum(ay0[:, None], by0[None, :])
    ix1 = np.minimum(ax1[:, None], bx1[None, :])
    iy1 = np.minimum(ay1[:, None], by1[None, :])
    inter = np.clip(ix1 - ix0, 0, None) * np.clip(iy1 - iy0, 0, None)
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def nms(corners, scores, iou_threshold):
    """Greedy non-maximum suppression; returns kept indices, best first."""
    order = np.argsort(-scores, kind="stable")
    keep = []
    suppressed = np.zeros(len(scores), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        ious = iou_matrix(corners[i:i + 1], corners)[0]
        suppressed |= ious >= iou_threshold
        suppressed[i] = True
    return keep


# -- differentiable bilinear ROI pooling --------------------------------------

def bilinear_roi_pool(fmap: Tensor, box: Tensor, out_size: int) -> Tensor:
    """Pool a corner-form box (x0, y0, x1, y1) into out_size x out_size x C.

    Each output cell takes one bilinear sample at its center. Gradients flow
    to both the map values and the box corners (sample positions are affine
    in the corners), which is what lets box regression train end to end.
    """
    x = fmap.data
    b = box.data
    if x.ndim != 3 or b.shape != (4,):
        raise ValueError(f"roi pool shapes: map {x.shape}, box {b.shape}")
    if out_size < 1:
        raise ValueError("out_size must be >= 1")
    hgt, wid, chans = x.shape
    bw = b[2] - b[0]
    bh = b[3] - b[1]
    if bw <= 0 or bh <= 0:
        raise ValueError(f"zero-area box: {b.tolist()}")
    p = out_size
    frac = (np.arange(p) + 0.5) / p
    sx = b[0] + frac * bw
    sy = b[1] + frac * bh
    sx_c = np.clip(sx, 0.0, wid - 1.0)
    sy_c = np.clip(sy, 0.0, hgt - 1.0)
    x_live = (sx == sx_c) & (wid > 1)   # where the sample coordinate still moves
    y_live = (sy == sy_c) & (hgt > 1)
    xlo = np.minimum(np.floor(sx_c).astype(np.intp), max(wid - 2, 0))
    ylo = np.minimum(np.floor(sy_c).astype(np.intp), max(hgt - 2, 0))
    xhi = np.minimum(xlo + 1, wid - 1)
    yhi = np.minimum(ylo + 1, hgt - 1)
    fx = sx_c - xlo
    fy = sy_c - ylo

    ylo_g, xlo_g = np.meshgrid(ylo, xlo, indexing="ij")
    yhi_g, xhi_g = np.meshgrid(yhi, xhi, indexing="ij")
    fy_g, fx_g = np.meshgrid(fy, fx, indexing="ij")
    w00 = (1 - fy_g) * (1 - fx_g)
    w01 = (1 - fy_g) * fx_g
    w10 = fy_g * (1 - fx_g)
    w11 = fy_g * fx_g
    v00 = x[ylo_g, xlo_g]
    v01 = x[ylo_g, xhi_g]
    v10 = x[yhi_g, xlo_g]
    v11 = x[yhi_g, xhi_g]
    out_data = (w00[..., None] * v00 + w01[..., None] * v01
                + w10[..., None] * v10 + w11[..., None] * v11)

    def back(g):
        if fmap.requires_grad:
            gm = np.zeros_like(x)
            np.add.at(gm, (ylo_g, xlo_g), w00[..., None] * g)
            np.add.at(gm, (ylo_g, xhi_g), w01[..., None] * g)
            np.add.at(gm, (yhi_g, xlo_g), w10[..., None] * g)
            np.add.at(gm, (yhi_g, xhi_g), w11[..., None] * g)
            fmap._accum(gm)
        if box.requires_grad:
            # d(out)/d(sample coord), then chain into the four corners
            dx_dir = (1 - fy_g)[..., None] * (v01 - v00) + fy_g[..., None] * (v11 - v10)
            dy_dir = (1 - fx_g)[..., None] * (v10 - v00) + fx_g[..., None] * (v11 - v01)
            gsx = np.sum(g * dx_dir, axis=2) * x_live[None, :]
            gsy = np.sum(g * dy_dir, axis=2) * y_live[:, None]
            gsx_col = gsx.sum(axis=0)  # per sample column
            gsy_row = gsy.sum(axis=1)
            gb = np.zeros(4)
            gb[0] = np.sum(gsx_col * (1 - frac))
            gb[2] = np.sum(gsx_col * frac)
            gb[1] = np.sum(gsy_row * (1 - frac))
            gb[3] = np.sum(gsy_row * frac)
            box._accum(gb)

    return Tensor._op(out_data, (fmap, box), back)


# -- region detector ----------------------------------------------------------

@dataclass
class DetectionResult:
    scores: Tensor            # (A,) objectness in (0, 1)
    deltas: Tensor            # (A, 4) box regression outputs
    regions: RegionFeatureSet
    kept: list[int] = field(default_factory=list)


class RegionDetector:
    """Shared 3x3 conv plus score/delta heads over every anchor, NMS, pooling."""

    def __init__(self, store, map_channels, anchors_per_location,
                 mid_channels, pool_size, rng, prefix="detector"):
        k = anchors_per_location
        self.pool_size = pool_size
        self.conv_w = store.add(f"{prefix}.conv_w", ad.uniform_init(
            (3, 3, map_channels, mid_channels), 9 * map_channels, mid_channels, rng))
        self.conv_b = store.add(f"{prefix}.conv_b", np.zeros(mid_channels))
        self.score_w = store.add(f"{prefix}.score_w", ad.uniform_init(
            (mid_channels, k), mid_channels, k, rng))
        self.score_b = store.add(f"{prefix}.score_b", np.zeros(k))
        self.delta_w = store.add(f"{prefix}.delta_w", ad.uniform_init(
            (mid_channels, 4 * k), mid_channels, 4 * k, rng))
        self.delta_b = store.add(f"{prefix}.delta_b", np.zeros(4 * k))

    def forward(self, fmap: FeatureMap, anchors: AnchorSet,
                top_n=36, nms_iou=0.7) -> DetectionResult:
        if fmap.channels != self.conv_w.data.shape[2]:
            raise ValueError(f"map has {fmap.channels} channels, "
                             f"detector expects {self.conv_w.data.shape[2]}")
        k = anchors.per_location
        hgt, wid = fmap.height, fmap.width
        n_anchor = len(anchors)
        shared = ad.relu(ad.conv3x3(fmap.values, self.conv_w, self.conv_b))
        flat = ad.reshape(shared, (hgt * wid, -1))
        scores = ad.reshape(ad.sigmoid(
            ad.add_rowvec(flat @ self.score_w, self.score_b)), (n_anchor,))
        deltas = ad.reshape(
            ad.add_rowvec(flat @ self.delta_w, self.delta_b), (n_anchor, 4))

        # selection runs on values only; chosen boxes re-enter the tape below
        dec = self._decode(anchors.anchors, deltas.data)
        corners = np.clip(_corners(dec),
                          [0, 0, 0, 0], [wid - 1, hgt - 1, wid - 1, hgt - 1])
        valid = (corners[:, 2] > corners[:, 0]) & (corners[:, 3] > corners[:, 1])
        score_vals = np.where(valid, scores.data, -np.inf)
        kept = nms(corners, score_vals, nms_iou)[:top_n]
        kept = [i for i in kept if valid[i]]
        if not kept:
            raise ValueError("no valid regions survived selection")

        rows = []
        for i in kept:
            row = ad.reshape(ad.take_rows(deltas, [i]), (4,))
            a = anchors.anchors[i]
            center = ad.slice1d(row, 0, 2) * a[2:4] + a[0:2]
            size = ad.exp(ad.slice1d(row, 2, 4)) * a[2:4]
            half = size * 0.5
            box = ad.concat([center - half, center + half])
            clipped = ad.clamp(box, np.array([0, 0, 0, 0], dtype=float),
                               np.array([wid - 1, hgt - 1, wid - 1, hgt - 1], dtype=float))
            pooled = bilinear_roi_pool(fmap.values, clipped, self.pool_size)
            rows.append(ad.reshape(pooled, (-1,)))
        v = ad.reshape(ad.concat(rows), (len(kept), -1))
        regions = RegionFeatureSet(V=v, boxes=corners[kept],
                                   scores=scores.data[kept].copy())
        return DetectionResult(scores=scores, deltas=deltas, regions=regions, kept=kept)

    @staticmethod
    def _decode(anchors, deltas):
        out = np.empty_like(anchors)
        out[:, 0:2] = anchors[:, 0:2] + anchors[:, 2:4] * deltas[:, 0:2]
        out[:, 2:4] = anchors[:, 2:4] * np.exp(deltas[:, 2:4])
        return out


# -- attribute predictor --------------------------------------------------------

class AttributePredictor:
    """Scores every catalog attribute against every region in a joint space."""

    def __init__(self, store, embed_dim, region_dim, joint_dim, rng, prefix="attributes"):
        self.w_embed = store.add(f"{prefix}.w_embed", ad.uniform_init(
            (joint_dim, embed_dim), embed_dim, joint_dim, rng))
        self.w_region = store.add(f"{prefix}.w_region", ad.uniform_init(
            (joint_dim, region_dim), region_dim, joint_dim, rng))

    def raw_probabilities(self, regions: RegionFeatureSet, attribute_embeddings: Tensor) -> Tensor:
        """(c, n) matrix of per-region attribute probabilities."""
        a_proj = self.w_embed @ attribute_embeddings        # (d, c)
        r_proj = self.w_region @ regions.V.T                # (d, n)
        return ad.sigmoid(a_proj.T @ r_proj)

    def predict(self, regions: RegionFeatureSet, attribute_embeddings: Tensor) -> AttributeProbabilities:
        raw = self.raw_probabilities(regions, attribute_embeddings)
        return AttributeProbabilities(raw=raw, aggregated=noisy_or_aggregate(raw))


def noisy_or_aggregate(raw: Tensor) -> Tensor:
    """Per-attribute probability that any region supports it: 1 - prod(1 - p)."""
    vals = raw.data
    if np.any(vals < 0) or np.any(vals > 1):
        raise ValueError("noisy-OR inputs must lie in [0, 1]")
    axis = 1 if vals.ndim == 2 else None
    return 1.0 - ad.prod(1.0 - raw, axis=axis)


def focal_loss(p: Tensor, y, alpha: float, gamma: float) -> Tensor:
    """Class-imbalance-aware cross-entropy, elementwise over p.

    y is a 0/1 label (scalar or array matching p). Probabilities are clamped
    to [1e-7, 1 - 1e-7] before the logs so saturated predictions never NaN.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1): {alpha}")
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0: {gamma}")
    y = np.asarray(y, dtype=np.float64)
    pc = ad.clamp(p, 1e-7, 1.0 - 1e-7)
    pos = ad.power(1.0 - pc, gamma) * ad.log(pc) * (-alpha)
    neg = ad.power(pc, gamma) * ad.log(1.0 - pc) * (-(1.0 - alpha))
    return pos * y + neg * (1.0 - y)


@dataclass
class FrontendLosses:
    detector: Tensor
    attributes: Tensor
    combined: Tensor


def frontend_losses(scores: Tensor, deltas: Tensor, attribute_probs: Tensor,
                    targets: DetectionTargets, *, balance=10.0,
                    detector_alpha=0.3, detector_gamma=2.0,
                    attribute_alpha=0.95, attribute_gamma=2.0) -> FrontendLosses:
    """Detector loss, attribute loss, and their fixed 1 + 0.5 combination."""
    labels = np.asarray(targets.labels, dtype=np.float64)
    n_cls = labels.size
    if n_cls == 0:
        raise ValueError("no anchors to score")
    cls_term = focal_loss(scores, labels, detector_alpha, detector_gamma).sum() * (1.0 / n_cls)
    positives = np.flatnonzero(labels == 1)
    if positives.size:
        diff = ad.take_rows(deltas, positives) - targets.deltas[positives]
        reg_term = ad.smooth_l1(diff).sum() * (balance / positives.size)
        detector = cls_term + reg_term
    else:
        detector = cls_term
    attr_labels = np.asarray(targets.attributes, dtype=np.float64)
    n_pos = int(attr_labels.sum())
    if n_pos == 0:
        warnings.warn("no positive attributes in batch; attribute loss set to 0")
        attributes = Tensor(0.0)
    else:
        attributes = focal_loss(attribute_probs, attr_labels,
                                attribute_alpha, attribute_gamma).sum() * (1.0 / n_pos)
    return FrontendLosses(detector=detector, attributes=attributes,
                          combined=detector + attributes * 0.5)

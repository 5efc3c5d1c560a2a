"""Tiny single-scale anchor detector, its loss, decoding with NMS, and mAP."""

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import batched_nms

from ._validation import DimensionError, ParameterError, as_tensor

BOX_VARIANCES = (0.1, 0.2)


@dataclass
class DetectionSet:
    """Boxes ``(x1, y1, x2, y2)`` normalized to [0, 1] with class labels.

    ``scores`` is None for ground truth.
    """

    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    scores: np.ndarray = None

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)

    def __len__(self):
        return len(self.labels)

    def validate(self, num_classes=None):
        b = self.boxes
        if len(b) != len(self.labels):
            raise DimensionError("boxes and labels differ in length")
        if self.scores is not None and len(self.scores) != len(self.labels):
            raise DimensionError("scores and labels differ in length")
        if len(b):
            if not (np.all(b[:, 0] < b[:, 2]) and np.all(b[:, 1] < b[:, 3])):
                raise ParameterError("boxes must satisfy x1 < x2 and y1 < y2")
            if b.min() < 0 or b.max() > 1:
                raise ParameterError("box coordinates must lie in [0, 1]")
            if self.labels.min() < 0:
                raise ParameterError("negative class label")
            if num_classes is not None and self.labels.max() >= num_classes:
                raise ParameterError(f"label >= num_classes ({num_classes})")
        if self.scores is not None and len(self.scores):
            if self.scores.min() < 0 or self.scores.max() > 1:
                raise ParameterError("scores must lie in [0, 1]")
        return self


def box_iou(a, b):
    """Pairwise IoU between (N, 4) and (M, 4) corner-format boxes."""
    a, b = as_tensor(a), as_tensor(b)
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


class AnchorGrid:
    """``A`` anchors centred on every cell of a ``G x G`` grid, ordered (row, col, anchor)."""

    def __init__(self, grid_size=4, sizes=(0.25, 0.4), aspect_ratios=(1.0,)):
        self.grid_size = grid_size
        self.sizes = tuple(sizes)
        self.aspect_ratios = tuple(aspect_ratios)
        shapes = [
            (s * np.sqrt(r), s / np.sqrt(r)) for s in self.sizes for r in self.aspect_ratios
        ]
        self.per_cell = len(shapes)
        cs = (np.arange(grid_size) + 0.5) / grid_size
        cx, cy = np.meshgrid(cs, cs)
        centers = np.stack([cx.ravel(), cy.ravel()], axis=1)
        wh = np.asarray(shapes)
        ctr = np.repeat(centers, self.per_cell, axis=0)
        wh = np.tile(wh, (len(centers), 1))
        self.center_form = torch.tensor(np.concatenate([ctr, wh], axis=1), dtype=torch.float32)

    def __len__(self):
        return self.grid_size * self.grid_size * self.per_cell

    @property
    def corners(self):
        c = self.center_form
        return torch.cat([c[:, :2] - c[:, 2:] / 2, c[:, :2] + c[:, 2:] / 2], dim=1)

    def config(self):
        return dict(
            grid_size=self.grid_size,
            sizes=list(self.sizes),
            aspect_ratios=list(self.aspect_ratios),
        )


def encode_boxes(boxes, anchors_center):
    """SSD offsets of corner boxes relative to centre-form anchors."""
    boxes = as_tensor(boxes, anchors_center.dtype)
    cxcy = (boxes[:, :2] + boxes[:, 2:]) / 2
    wh = boxes[:, 2:] - boxes[:, :2]
    v0, v1 = BOX_VARIANCES
    return torch.cat(
        [
            (cxcy - anchors_center[:, :2]) / (anchors_center[:, 2:] * v0),
            torch.log(wh / anchors_center[:, 2:]) / v1,
        ],
        dim=1,
    )


def decode_boxes(offsets, anchors_center):
    v0, v1 = BOX_VARIANCES
    cxcy = anchors_center[..., :2] + offsets[..., :2] * v0 * anchors_center[..., 2:]
    wh = anchors_center[..., 2:] * torch.exp(offsets[..., 2:] * v1)
    return torch.cat([cxcy - wh / 2, cxcy + wh / 2], dim=-1)


@dataclass
class Assignment:
    """Per-anchor matching result: class target (0 = background) and box offset target."""

    labels: torch.Tensor
    offsets: torch.Tensor

    @property
    def positive(self):
        return self.labels > 0


def match_anchors(anchors, truth, iou_thresh=0.5):
    """SSD-style matching with a best-anchor fallback for every truth box."""
    n = len(anchors)
    if len(truth) == 0:
        return Assignment(torch.zeros(n, dtype=torch.long), torch.zeros(n, 4))
    gt = torch.as_tensor(truth.boxes, dtype=torch.float32)
    iou = box_iou(anchors.corners, gt)
    best_iou, best_gt = iou.max(dim=1)
    # every truth box keeps its best anchor, even below threshold
    forced = iou.argmax(dim=0)
    for j, a in enumerate(forced.tolist()):
        best_gt[a] = j
        best_iou[a] = 2.0
    labels = torch.as_tensor(truth.labels, dtype=torch.long)[best_gt] + 1
    labels[best_iou < iou_thresh] = 0
    offsets = encode_boxes(gt[best_gt], anchors.center_form)
    offsets[labels == 0] = 0
    return Assignment(labels, offsets)


def stack_assignments(assignments):
    return Assignment(
        torch.stack([a.labels for a in assignments]),
        torch.stack([a.offsets for a in assignments]),
    )


def detection_loss(logits, offsets, assignment, neg_ratio=3):
    """Return ``(L_cls, L_loc, L_det)`` for batched predictions.

    ``logits`` is (B, A, C + 1) with column 0 the background, ``offsets`` is
    (B, A, 4). Cross-entropy runs over positives plus the ``neg_ratio``
    hardest negatives per image; smooth-L1 runs over positives. Both sums
    are divided by the number of positives (at least 1).
    """
    labels = assignment.labels
    if logits.ndim == 2:
        logits, offsets = logits[None], offsets[None]
        labels = labels[None]
        target_off = assignment.offsets[None]
    else:
        target_off = assignment.offsets
    pos = labels > 0
    num_pos = int(pos.sum())
    ce = F.cross_entropy(logits.transpose(1, 2), labels, reduction="none")
    with torch.no_grad():
        neg_ce = ce.clone()
        neg_ce[pos] = -1.0
        order = neg_ce.argsort(dim=1, descending=True)
        rank = order.argsort(dim=1)
        n_neg = (neg_ratio * pos.sum(dim=1, keepdim=True)).clamp(min=neg_ratio)
        n_neg = torch.minimum(n_neg, (~pos).sum(dim=1, keepdim=True))
        neg = (rank < n_neg) & ~pos
    denom = max(num_pos, 1)
    l_cls = ce[pos | neg].sum() / denom
    if num_pos:
        l_loc = F.smooth_l1_loss(offsets[pos], target_off[pos], reduction="sum") / denom
    else:
        l_loc = offsets.sum() * 0
    return l_cls, l_loc, l_cls + l_loc


def _groups(channels):
    return 4 if channels % 4 == 0 else 1


class TinyDetector(nn.Module):
    """Strided conv + GroupNorm backbone with per-anchor class logits and box offsets."""

    def __init__(self, num_classes=2, anchors=None, widths=(16, 32, 32), seed=0):
        super().__init__()
        self.num_classes = num_classes
        self.anchors = anchors or AnchorGrid()
        self.widths = tuple(widths)
        self.seed = seed
        a = self.anchors.per_cell
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            layers, c_in = [], 3
            for c_out in widths:
                layers += [
                    nn.Conv2d(c_in, c_out, 3, stride=2, padding=1),
                    nn.GroupNorm(_groups(c_out), c_out),
                    nn.SiLU(),
                ]
                c_in = c_out
            layers += [
                nn.Conv2d(c_in, c_in, 3, padding=1),
                nn.GroupNorm(_groups(c_in), c_in),
                nn.SiLU(),
            ]
            self.backbone = nn.Sequential(*layers)
            self.cls_head = nn.Conv2d(c_in, a * (num_classes + 1), 3, padding=1)
            self.loc_head = nn.Conv2d(c_in, a * 4, 3, padding=1)

    def config(self):
        return dict(
            num_classes=self.num_classes,
            anchors=self.anchors.config(),
            widths=list(self.widths),
            seed=self.seed,
        )

    def forward(self, img):
        feats = self.backbone(img)
        n, _, g, g2 = feats.shape
        if g != self.anchors.grid_size or g2 != g:
            raise DimensionError(
                f"feature map {g}x{g2} does not match anchor grid {self.anchors.grid_size}"
            )
        logits = self.cls_head(feats).permute(0, 2, 3, 1).reshape(n, -1, self.num_classes + 1)
        offsets = self.loc_head(feats).permute(0, 2, 3, 1).reshape(n, -1, 4)
        return logits, offsets


def decode_and_nms(
    logits, offsets, anchors, score_thresh=0.05, nms_iou=0.45, max_detections=50
):
    """Decode one image's predictions into a :class:`DetectionSet`."""
    with torch.no_grad():
        probs = torch.softmax(logits, dim=-1)[:, 1:]
        boxes = decode_boxes(offsets, anchors.center_form.to(offsets.dtype)).clamp(0, 1)
        num_anchors, num_classes = probs.shape
        scores = probs.reshape(-1)
        labels = torch.arange(num_classes).repeat(num_anchors)
        cand = boxes.repeat_interleave(num_classes, dim=0)
        keep = scores > score_thresh
        # degenerate boxes after clamping cannot be valid detections
        keep &= (cand[:, 2] > cand[:, 0]) & (cand[:, 3] > cand[:, 1])
        cand, scores, labels = cand[keep], scores[keep], labels[keep]
        kept = batched_nms(cand.float(), scores.float(), labels, nms_iou)[:max_detections]
    return DetectionSet(
        cand[kept].double().numpy(), labels[kept].numpy(), scores[kept].double().numpy()
    )


def _average_precision(recall, precision, style="all"):
    if style == "voc11":
        ap = 0.0
        for r in np.linspace(0, 1, 11):
            p = precision[recall >= r]
            ap += (p.max() if p.size else 0.0) / 11
        return ap
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def average_precision_per_class(preds, truths, iou=0.5, style="all"):
    """AP for every class present in ``truths``; returns ``{class: ap}``."""
    if len(preds) != len(truths):
        raise DimensionError("preds and truths must be aligned per image")
    classes = sorted({int(c) for t in truths for c in t.labels})
    if not classes:
        raise ParameterError("mAP is undefined without any ground-truth objects")
    result = {}
    for c in classes:
        n_gt = sum(int((t.labels == c).sum()) for t in truths)
        dets = []
        for i, p in enumerate(preds):
            scores = p.scores if p.scores is not None else np.ones(len(p))
            for j in np.nonzero(p.labels == c)[0]:
                dets.append((float(scores[j]), i, p.boxes[j]))
        # stable sort keeps image order among equal scores
        dets.sort(key=lambda d: -d[0])
        used = [np.zeros(int((t.labels == c).sum()), dtype=bool) for t in truths]
        tp = np.zeros(len(dets))
        for k, (_, i, box) in enumerate(dets):
            gt = truths[i].boxes[truths[i].labels == c]
            if len(gt) == 0:
                continue
            ious = box_iou(box[None], gt)[0].numpy()
            j = int(ious.argmax())
            if ious[j] >= iou and not used[i][j]:
                used[i][j] = True
                tp[k] = 1
        if len(dets) == 0:
            result[c] = 0.0
            continue
        ctp = np.cumsum(tp)
        recall = ctp / n_gt
        precision = ctp / np.arange(1, len(dets) + 1)
        result[c] = _average_precision(recall, precision, style)
    return result


def mean_average_precision(preds, truths, iou=0.5, style="all"):
    aps = average_precision_per_class(preds, truths, iou, style)
    return float(np.mean(list(aps.values())))

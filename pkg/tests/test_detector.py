import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from carnet._validation import DimensionError, ParameterError
from carnet.detector import (
    AnchorGrid,
    Assignment,
    DetectionSet,
    TinyDetector,
    box_iou,
    decode_and_nms,
    decode_boxes,
    detection_loss,
    encode_boxes,
    match_anchors,
    mean_average_precision,
)


def test_iou_hand_value():
    iou = float(box_iou([[0, 0, 0.5, 0.5]], [[0.25, 0.25, 0.75, 0.75]])[0, 0])
    assert iou == pytest.approx(0.25**2 / (2 * 0.25 - 0.25**2), abs=1e-12)


def test_anchor_count_and_order():
    grid = AnchorGrid(grid_size=3, sizes=(0.2, 0.4), aspect_ratios=(1.0, 2.0))
    assert len(grid) == 3 * 3 * 4 == grid.center_form.shape[0]
    assert torch.allclose(grid.center_form[0, :2], torch.tensor([1 / 6, 1 / 6]))


def test_match_identical_and_disjoint():
    grid = AnchorGrid()
    idx = 5
    truth = DetectionSet(grid.corners[idx : idx + 1].double().numpy(), [1])
    a = match_anchors(grid, truth)
    assert a.labels[idx] == 2
    far = box_iou(grid.corners, grid.corners[idx : idx + 1])[:, 0] == 0
    assert torch.all(a.labels[far] == 0)


def test_match_threshold_on_hand_iou():
    # anchor 0 overlaps the truth with IoU 1/7, anchor 1 is the forced best match
    grid = AnchorGrid(grid_size=1, sizes=(0.5,))
    grid.center_form = torch.tensor([[0.25, 0.25, 0.5, 0.5], [0.5, 0.5, 0.5, 0.5]])
    truth = DetectionSet([[0.25, 0.25, 0.75, 0.75]], [0])
    iou = 1 / 7
    assert match_anchors(grid, truth, iou_thresh=iou + 1e-6).labels.tolist() == [0, 1]
    assert match_anchors(grid, truth, iou_thresh=iou - 1e-6).labels.tolist() == [1, 1]


def test_every_truth_gets_an_anchor(rng):
    grid = AnchorGrid()
    for _ in range(20):
        boxes = []
        for _ in range(3):
            x1, y1 = rng.uniform(0, 0.8, 2)
            boxes.append([x1, y1, x1 + rng.uniform(0.05, 0.2), y1 + rng.uniform(0.05, 0.2)])
        a = match_anchors(grid, DetectionSet(boxes, [0, 1, 0]))
        assert int((a.labels > 0).sum()) >= 1
        iou = box_iou(grid.corners, torch.tensor(boxes, dtype=torch.float32))
        for j in range(3):
            assert a.labels[int(iou[:, j].argmax())] > 0


def test_empty_truth_all_background():
    a = match_anchors(AnchorGrid(), DetectionSet())
    assert torch.all(a.labels == 0)


def test_encode_decode_round_trip(rng):
    grid = AnchorGrid()
    x1y1 = rng.uniform(0, 0.6, (len(grid), 2))
    boxes = np.concatenate([x1y1, x1y1 + rng.uniform(0.05, 0.4, (len(grid), 2))], 1)
    cf = grid.center_form.double()
    back = decode_boxes(encode_boxes(boxes, cf), cf)
    assert (back - torch.from_numpy(boxes)).abs().max() < 1e-6


def naive_loss(logits, offsets, labels, targets, neg_ratio=3):
    # one image; explicit loops over anchors
    ce = [-(logits[i, labels[i]] - math.log(sum(math.exp(v) for v in logits[i]))) for i in range(len(labels))]
    pos = [i for i in range(len(labels)) if labels[i] > 0]
    negs = sorted((i for i in range(len(labels)) if labels[i] == 0), key=lambda i: -ce[i])
    negs = negs[: min(max(neg_ratio * len(pos), neg_ratio), len(negs))]
    denom = max(len(pos), 1)
    l_cls = (sum(ce[i] for i in pos) + sum(ce[i] for i in negs)) / denom

    def sl1(d):
        return 0.5 * d * d if abs(d) < 1 else abs(d) - 0.5

    l_loc = sum(sl1(offsets[i][k] - targets[i][k]) for i in pos for k in range(4)) / denom
    return l_cls, l_loc


def test_loss_matches_naive_oracle(rng):
    n = 12
    logits = rng.normal(size=(n, 3))
    offsets = rng.normal(size=(n, 4))
    labels = np.zeros(n, dtype=int)
    labels[[2, 7]] = [1, 2]
    targets = np.zeros((n, 4))
    targets[[2, 7]] = rng.normal(size=(2, 4)) * 2
    a = Assignment(torch.from_numpy(labels), torch.from_numpy(targets))
    l_cls, l_loc, l_det = detection_loss(torch.from_numpy(logits), torch.from_numpy(offsets), a)
    e_cls, e_loc = naive_loss(logits, offsets, labels, targets)
    assert float(l_cls) == pytest.approx(e_cls, abs=1e-9)
    assert float(l_loc) == pytest.approx(e_loc, abs=1e-9)
    assert abs(float(l_det) - float(l_cls) - float(l_loc)) < 1e-9


def test_single_anchor_hand_case():
    logits = torch.tensor([[0.3, 1.2, -0.4]], dtype=torch.float64)
    offsets = torch.tensor([[0.5, -1.5, 0.1, 0.0]], dtype=torch.float64)
    a = Assignment(torch.tensor([1]), torch.tensor([[0.0, 0.0, 0.0, 0.5]], dtype=torch.float64))
    l_cls, l_loc, _ = detection_loss(logits, offsets, a)
    ce = -1.2 + math.log(math.exp(0.3) + math.exp(1.2) + math.exp(-0.4))
    assert float(l_cls) == pytest.approx(ce, abs=1e-12)
    assert float(l_loc) == pytest.approx(0.125 + 1.0 + 0.005 + 0.125, abs=1e-12)


def test_perfect_prediction_loss_floor():
    labels = torch.tensor([0, 1, 0, 2, 0, 0, 0, 0])
    targets = torch.randn(8, 4, dtype=torch.float64) * (labels > 0)[:, None]
    logits = F.one_hot(labels, 3).double() * 60
    l_cls, l_loc, l_det = detection_loss(logits, targets.clone(), Assignment(labels, targets))
    assert float(l_det) < 1e-12


def test_no_positives_uses_negatives_only():
    logits = torch.randn(2, 6, 3, dtype=torch.float64)
    a = Assignment(torch.zeros(2, 6, dtype=torch.long), torch.zeros(2, 6, 4, dtype=torch.float64))
    l_cls, l_loc, _ = detection_loss(logits, torch.randn(2, 6, 4), a)
    assert float(l_loc) == 0.0 and float(l_cls) > 0
    ce = F.cross_entropy(logits.reshape(-1, 3), torch.zeros(12, dtype=torch.long), reduction="none")
    top = ce.reshape(2, 6).sort(dim=1, descending=True).values[:, :3].sum()
    assert float(l_cls) == pytest.approx(float(top), abs=1e-12)


def test_detector_shapes():
    det = TinyDetector(num_classes=2)
    logits, offsets = det(torch.rand(3, 3, 32, 32))
    assert logits.shape == (3, 32, 3) and offsets.shape == (3, 32, 4)
    with pytest.raises(DimensionError):
        det(torch.rand(1, 3, 64, 64))


def test_decode_zero_offsets_gives_anchors():
    grid = AnchorGrid()
    boxes = decode_boxes(torch.zeros(len(grid), 4), grid.center_form)
    assert torch.allclose(boxes, grid.corners)


def brute_nms(boxes, scores, thresh):
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    keep = []
    for i in order:
        if all(float(box_iou([boxes[i]], [boxes[j]])[0, 0]) <= thresh for j in keep):
            keep.append(i)
    return keep


def test_nms_cases():
    grid = AnchorGrid(grid_size=1, sizes=(0.5,))
    grid.center_form = torch.tensor([[0.5, 0.5, 0.4, 0.4]] * 2 + [[0.45, 0.5, 0.4, 0.4], [0.2, 0.2, 0.2, 0.2]])
    logit = lambda p: math.log(p / (1 - p))  # noqa: E731
    scores = [0.9, 0.8, 0.7, 0.6]
    logits = torch.tensor([[0.0, logit(s)] for s in scores])
    dets = decode_and_nms(logits, torch.zeros(4, 4), grid, nms_iou=0.45)
    keep = brute_nms(grid.corners.tolist(), scores, 0.45)
    assert sorted(np.round(dets.scores, 6).tolist(), reverse=True) == [round(scores[i], 6) for i in keep]
    assert keep == [0, 3]
    two = decode_and_nms(logits[:2], torch.zeros(2, 4), _first(grid, 2))
    assert len(two) == 1 and two.scores[0] == pytest.approx(0.9, abs=1e-6)


def _first(grid, n):
    g = AnchorGrid(grid_size=1, sizes=(0.5,))
    g.center_form = grid.center_form[:n]
    return g


def test_decoded_boxes_clamped_and_valid():
    grid = AnchorGrid()
    logits = torch.randn(len(grid), 3)
    dets = decode_and_nms(logits, torch.randn(len(grid), 4) * 3, grid, score_thresh=0.0)
    dets.validate(2)


def test_map_examples():
    truth = [DetectionSet([[0.1, 0.1, 0.4, 0.4], [0.5, 0.5, 0.9, 0.9]], [0, 1])]
    exact = [DetectionSet(truth[0].boxes, truth[0].labels, [1.0, 1.0])]
    assert mean_average_precision(exact, truth) == 1.0
    assert mean_average_precision([DetectionSet(scores=[])], truth) == 0.0


def test_map_hand_pr_curve():
    t = [DetectionSet([[0.0, 0.0, 0.2, 0.2], [0.5, 0.5, 0.7, 0.7]], [0, 0])]
    p = [DetectionSet([[0.0, 0.0, 0.2, 0.2], [0.8, 0.8, 0.9, 0.9], [0.5, 0.5, 0.7, 0.7]], [0, 0, 0], [0.9, 0.8, 0.7])]
    assert abs(mean_average_precision(p, t) - 5 / 6) < 1e-9


def test_map_without_truth_is_error():
    with pytest.raises(ParameterError):
        mean_average_precision([DetectionSet()], [DetectionSet()])


def test_voc11_style():
    t = [DetectionSet([[0.0, 0.0, 0.2, 0.2], [0.5, 0.5, 0.7, 0.7]], [0, 0])]
    p = [DetectionSet([[0.0, 0.0, 0.2, 0.2], [0.8, 0.8, 0.9, 0.9], [0.5, 0.5, 0.7, 0.7]], [0, 0, 0], [0.9, 0.8, 0.7])]
    # recall <= 0.5 -> precision 1 (6 points), recall > 0.5 -> 2/3 (5 points)
    assert mean_average_precision(p, t, style="voc11") == pytest.approx((6 + 5 * 2 / 3) / 11, abs=1e-12)


def brute_map(preds, truths, iou=0.5):
    """Independent all-point AP: enumerate thresholds at every distinct score."""
    classes = sorted({int(c) for t in truths for c in t.labels})
    aps = []
    for c in classes:
        dets = [(s, i, b) for i, p in enumerate(preds) for b, lab, s in zip(p.boxes, p.labels, p.scores) if lab == c]
        dets.sort(key=lambda d: -d[0])
        n_gt = sum(int(np.sum(t.labels == c)) for t in truths)
        used = {}
        flags = []
        for s, i, b in dets:
            best, best_j = 0.0, None
            for j, (tb, tl) in enumerate(zip(truths[i].boxes, truths[i].labels)):
                if tl != c:
                    continue
                x1, y1 = max(b[0], tb[0]), max(b[1], tb[1])
                x2, y2 = min(b[2], tb[2]), min(b[3], tb[3])
                inter = max(0, x2 - x1) * max(0, y2 - y1)
                u = (b[2] - b[0]) * (b[3] - b[1]) + (tb[2] - tb[0]) * (tb[3] - tb[1]) - inter
                if inter / u > best:
                    best, best_j = inter / u, j
            ok = best_j is not None and best >= iou and not used.get((i, best_j))
            if ok:
                used[(i, best_j)] = True
            flags.append(ok)
        pts = []
        for k in range(1, len(flags) + 1):
            tp = sum(flags[:k])
            pts.append((tp / n_gt, tp / k))
        ap, prev_r = 0.0, 0.0
        for r, _ in pts:
            if r > prev_r:
                ap += (r - prev_r) * max(p for rr, p in pts if rr >= r)
                prev_r = r
        aps.append(ap)
    return float(np.mean(aps))


def random_scene(rng, n, classes):
    boxes = []
    for _ in range(n):
        x1, y1 = rng.uniform(0, 0.7, 2)
        boxes.append([x1, y1, x1 + rng.uniform(0.1, 0.3), y1 + rng.uniform(0.1, 0.3)])
    return np.array(boxes).reshape(-1, 4), rng.integers(0, classes, n)


def test_map_matches_brute_force_on_random_scenes(rng):
    for _ in range(50):
        k = int(rng.integers(1, 4))
        truths, preds = [], []
        for _ in range(int(rng.integers(1, 4))):
            tb, tl = random_scene(rng, int(rng.integers(1, 6)), k)
            truths.append(DetectionSet(tb, tl))
            pb, pl = random_scene(rng, int(rng.integers(0, 6)), k)
            # jitter some truths into predictions so there are hits
            pb = np.concatenate([pb, np.clip(tb + rng.normal(0, 0.02, tb.shape), 0, 1)])
            pl = np.concatenate([pl, tl])
            preds.append(DetectionSet(pb, pl, rng.random(len(pl))))
        assert abs(mean_average_precision(preds, truths) - brute_map(preds, truths)) < 1e-9


def test_removing_false_positive_never_lowers_map(rng):
    for _ in range(30):
        tb, tl = random_scene(rng, 3, 2)
        truth = [DetectionSet(tb, tl)]
        pb, pl = random_scene(rng, 4, 2)
        pb = np.concatenate([pb, tb])
        pl = np.concatenate([pl, tl])
        scores = rng.random(len(pl))
        full = mean_average_precision([DetectionSet(pb, pl, scores)], truth)
        # index 0 is a random box; drop it only if it matches no truth box
        if float(box_iou(pb[:1], tb).max()) >= 0.5:
            continue
        fewer = mean_average_precision([DetectionSet(pb[1:], pl[1:], scores[1:])], truth)
        assert fewer >= full - 1e-12


def test_detection_set_validation():
    with pytest.raises(ParameterError):
        DetectionSet([[0.5, 0.1, 0.4, 0.2]], [0]).validate()
    with pytest.raises(ParameterError):
        DetectionSet([[0.1, 0.1, 1.4, 0.2]], [0]).validate()
    with pytest.raises(ParameterError):
        DetectionSet([[0.1, 0.1, 0.4, 0.2]], [3]).validate(num_classes=2)
    with pytest.raises(DimensionError):
        DetectionSet([[0.1, 0.1, 0.4, 0.2]], [0, 1]).validate()

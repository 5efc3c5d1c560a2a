"""Clean vs attacked evaluation of a trained pipeline."""

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .attacks import AttackObjective, PerturbationBudget, initial_delta, pgd_attack
from .data import psnr, stack_samples
from .detector import decode_and_nms, mean_average_precision
from .model import frozen


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i : i + size]


def _enhance(model, x, v_hf):
    with torch.no_grad():
        return model.enhance(x, v_hf=v_hf).image


def attack_batch(model, x, z, targets, kind, budget, seed):
    """Run one PGD attack with the model frozen; returns ``(delta, objective)``."""
    obj = AttackObjective(kind, model, x, z=z, targets=targets, latent_seed=seed)
    with frozen(model):
        delta = pgd_attack(x, obj, budget, seed=seed)
    return delta, obj


def evaluate_enhancement(model, samples, budget=None, seed=0, batch_size=25):
    """Vision attack statistics on ``samples``.

    Returns mean PSNR of the clean and attacked enhancements against ``z``,
    the mean absolute attacked-vs-clean output gap, the per-image
    contrastive metric at the random start and after the attack, and the
    largest ``|delta|`` and ``[0, 1]`` box violation seen.
    """
    budget = budget or PerturbationBudget()
    model.eval()
    psnr_clean, psnr_att, gaps, m_start, m_final, max_delta, box = [], [], [], [], [], [], []
    for b, chunk in enumerate(_chunks(samples, batch_size)):
        x, z, targets = stack_samples(chunk)
        s = seed * 7919 + b
        delta, obj = attack_batch(model, x, z, targets, "vision_contrastive", budget, s)
        with torch.no_grad():
            m_start.extend(obj(x + initial_delta(x, budget, s)).tolist())
            m_final.extend(obj(x + delta).tolist())
        u_clean = _enhance(model, x, obj.v_hf).clamp(0, 1)
        u_att = _enhance(model, x + delta, obj.v_hf).clamp(0, 1)
        for i in range(len(chunk)):
            psnr_clean.append(psnr(u_clean[i], z[i]))
            psnr_att.append(psnr(u_att[i], z[i]))
        gaps.extend((u_att - u_clean).abs().flatten(1).mean(1).tolist())
        max_delta.append(float(delta.abs().max()))
        box.append(float(torch.clamp(torch.maximum(-(x + delta), x + delta - 1), min=0).max()))
    m_start, m_final = np.array(m_start), np.array(m_final)
    return dict(
        psnr_clean=_finite_mean(psnr_clean),
        psnr_attacked=_finite_mean(psnr_att),
        l1_gap=float(np.mean(gaps)),
        metric_start=m_start.tolist(),
        metric_final=m_final.tolist(),
        raised_fraction=float(np.mean(m_final > m_start)),
        max_abs_delta=max(max_delta),
        max_box_violation=max(box),
    )


def _finite_mean(values):
    vals = [v for v in values if np.isfinite(v)]
    return float(np.mean(vals)) if vals else float("inf")


def predict(model, x, v_hf, score_thresh=0.05, nms_iou=0.45):
    with torch.no_grad():
        logits, offsets = model.detect(x, v_hf=v_hf)
    return [
        decode_and_nms(logits[i], offsets[i], model.detector.anchors, score_thresh, nms_iou)
        for i in range(x.shape[0])
    ]


def evaluate_detection(model, samples, kinds=("det_full",), budget=None, seed=0, batch_size=25,
                       style="all"):
    """mAP on clean inputs and under each perception attack in ``kinds``."""
    budget = budget or PerturbationBudget()
    model.eval()
    preds = {k: [] for k in ("clean",) + tuple(kinds)}
    truths = []
    for b, chunk in enumerate(_chunks(samples, batch_size)):
        x, z, targets = stack_samples(chunk)
        truths.extend(targets)
        s = seed * 7919 + b
        v_hf = model.sample_latent(x, seed=s)
        preds["clean"].extend(predict(model, x, v_hf))
        for kind in kinds:
            delta, obj = attack_batch(model, x, z, targets, kind, budget, s)
            preds[kind].extend(predict(model, x + delta, obj.v_hf))
    return {k: mean_average_precision(p, truths, style=style) for k, p in preds.items()}


def attacked_variants(model, samples, vision_budget=None, perception_budget=None,
                      perception_kind="det_full", seed=0, batch_size=25):
    """Every sample as clean, vision-attacked and perception-attacked input.

    Returns ``(images, labels)`` with labels 0/1/2.
    """
    images, labels = [], []
    for b, chunk in enumerate(_chunks(samples, batch_size)):
        x, z, targets = stack_samples(chunk)
        s = seed * 7919 + b
        dv, _ = attack_batch(model, x, z, targets, "vision_contrastive",
                             vision_budget or PerturbationBudget(), s)
        dp, _ = attack_batch(model, x, z, targets, perception_kind,
                             perception_budget or PerturbationBudget(), s + 1)
        for j, xa in enumerate((x, x + dv, x + dp)):
            images.append(xa)
            labels.extend([j] * len(chunk))
    return torch.cat(images), np.asarray(labels)


def fit_label_mapping(pred, labels, k=3):
    """Assignment of output indices to labels maximizing agreement (Hungarian)."""
    counts = np.zeros((k, k))
    np.add.at(counts, (pred, labels), 1)
    rows, cols = linear_sum_assignment(-counts)
    mapping = np.arange(k)
    mapping[rows] = cols
    return mapping


def apd_accuracy(model, calib, test, seed=0, **attack_kw):
    """Held-out discriminator accuracy over clean/vision/perception inputs.

    Output indices are tied to labels on ``calib`` first: the triplet
    objective clusters the patterns but does not fix which index each
    one lands on.
    """
    model.eval()
    k = model.apd.num_patterns

    def argmax(samples, s):
        imgs, labels = attacked_variants(model, samples, seed=s, **attack_kw)
        with torch.no_grad():
            pred = torch.cat([model.apd(c) for c in torch.split(imgs, 100)]).argmax(1).numpy()
        return pred, labels

    pc, lc = argmax(calib, seed)
    mapping = fit_label_mapping(pc, lc, k)
    pt, lt = argmax(test, seed + 1)
    return dict(
        accuracy=float(np.mean(mapping[pt] == lt)),
        raw_accuracy=float(np.mean(pt == lt)),
        mapping=mapping.tolist(),
        num_samples=int(len(lt)),
    )

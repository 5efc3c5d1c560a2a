"""Datasets, synthetic underwater degradation, image I/O and full-reference metrics."""

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter

from ._validation import DimensionError, ParameterError, as_tensor, check_same_shape
from .detector import DetectionSet

CLASS_NAMES = ("box", "disc")
IMAGE_SUFFIXES = (".png",)


@dataclass
class DegradationParams:
    """Underwater formation-model parameters: ``x = z * t + B * (1 - t)`` then blur."""

    transmission: tuple = (1.0, 1.0, 1.0)
    background: tuple = (0.0, 0.0, 0.0)
    blur_sigma: float = 0.0
    seed: int = 0

    def validate(self):
        t = np.asarray(self.transmission, dtype=np.float64)
        bg = np.asarray(self.background, dtype=np.float64)
        if t.shape != (3,) or bg.shape != (3,):
            raise DimensionError("transmission and background need 3 entries")
        if np.any(t <= 0) or np.any(t > 1):
            raise ParameterError(f"transmission must lie in (0, 1], got {t.tolist()}")
        if np.any(bg < 0) or np.any(bg > 1):
            raise ParameterError(f"background light must lie in [0, 1], got {bg.tolist()}")
        if self.blur_sigma < 0:
            raise ParameterError("blur_sigma must be >= 0")
        return self

    def to_dict(self):
        return dict(
            transmission=[float(v) for v in self.transmission],
            background=[float(v) for v in self.background],
            blur_sigma=float(self.blur_sigma),
            seed=int(self.seed),
        )


def degrade(z, params, clamp=True):
    """Apply the formation model to ``z`` of shape (3, H, W) or (B, 3, H, W)."""
    params.validate()
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-3] != 3:
        raise DimensionError(f"expected 3 channels, got shape {z.shape}")
    t = np.asarray(params.transmission).reshape(3, 1, 1)
    bg = np.asarray(params.background).reshape(3, 1, 1)
    x = z * t + bg * (1 - t)
    if params.blur_sigma > 0:
        sigma = [0] * (x.ndim - 2) + [params.blur_sigma, params.blur_sigma]
        x = gaussian_filter(x, sigma=sigma, mode="reflect")
    if clamp:
        x = np.clip(x, 0, 1)
    return x


def undo_degradation(x, params):
    """Invert the affine part of :func:`degrade` (valid without blur or clamping)."""
    t = np.asarray(params.transmission, dtype=np.float64).reshape(3, 1, 1)
    bg = np.asarray(params.background, dtype=np.float64).reshape(3, 1, 1)
    return (np.asarray(x, dtype=np.float64) - bg * (1 - t)) / t


@dataclass
class PairedSample:
    x: np.ndarray
    z: np.ndarray
    id: str
    o: DetectionSet = None
    params: DegradationParams = None

    def validate(self, num_classes=None):
        if self.x.shape != self.z.shape:
            raise DimensionError(f"{self.id}: x {self.x.shape} vs z {self.z.shape}")
        if self.x.ndim != 3 or self.x.shape[0] != 3:
            raise DimensionError(f"{self.id}: expected (3, H, W), got {self.x.shape}")
        for name, a in (("x", self.x), ("z", self.z)):
            if not np.all(np.isfinite(a)) or a.min() < 0 or a.max() > 1:
                raise ParameterError(f"{self.id}: {name} must be finite and in [0, 1]")
        if self.o is not None:
            self.o.validate(num_classes)
        return self


@dataclass
class SyntheticConfig:
    image_size: int = 32
    max_objects: int = 2
    min_object: float = 0.25
    max_object: float = 0.45
    transmission_low: tuple = (0.3, 0.55, 0.65)
    transmission_high: tuple = (0.6, 0.85, 0.95)
    background_low: tuple = (0.0, 0.3, 0.4)
    background_high: tuple = (0.15, 0.55, 0.7)
    blur_max: float = 0.8
    class_names: tuple = field(default=CLASS_NAMES)


def _draw_scene(rng, cfg):
    s = cfg.image_size
    top, bottom = rng.uniform(0.2, 0.8, size=3), rng.uniform(0.2, 0.8, size=3)
    ramp = np.linspace(0, 1, s)[:, None]
    z = np.empty((3, s, s))
    for c in range(3):
        z[c] = top[c] + (bottom[c] - top[c]) * ramp
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    boxes, labels = [], []
    for _ in range(rng.integers(1, cfg.max_objects + 1)):
        for _attempt in range(20):
            w = rng.uniform(cfg.min_object, cfg.max_object) * s
            h = w if rng.random() < 0.5 else rng.uniform(cfg.min_object, cfg.max_object) * s
            x0 = rng.uniform(0, s - w)
            y0 = rng.uniform(0, s - h)
            box = np.array([x0, y0, x0 + w, y0 + h])
            if all(_overlap(box, b) < 0.1 for b in boxes):
                break
        else:
            continue
        cls = int(rng.integers(len(cfg.class_names)))
        color = rng.uniform(0, 1, size=3)
        # keep objects visibly distinct from the background
        color[rng.integers(3)] = rng.choice([0.05, 0.95])
        if cls == 0:
            mask = (xx >= box[0]) & (xx <= box[2]) & (yy >= box[1]) & (yy <= box[3])
        else:
            cx, cy = (box[0] + box[2]) / 2, (box[1] + box[3]) / 2
            mask = ((xx - cx) / (w / 2)) ** 2 + ((yy - cy) / (h / 2)) ** 2 <= 1
        if not mask.any():
            continue
        z[:, mask] = color[:, None]
        rows, cols = np.nonzero(mask)
        boxes.append(np.array([cols.min(), rows.min(), cols.max() + 1, rows.max() + 1]))
        labels.append(cls)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4) / s
    return np.clip(z, 0, 1), DetectionSet(boxes, labels)


def _overlap(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    return inter / min((a[2] - a[0]) * (a[3] - a[1]), (b[2] - b[0]) * (b[3] - b[1]))


def sample_degradation(rng, cfg):
    return DegradationParams(
        transmission=tuple(rng.uniform(cfg.transmission_low, cfg.transmission_high)),
        background=tuple(rng.uniform(cfg.background_low, cfg.background_high)),
        blur_sigma=float(rng.uniform(0, cfg.blur_max)),
        seed=int(rng.integers(2**31)),
    )


def make_synthetic_dataset(n, config=None, seed=0):
    """Procedural scenes of shapes on gradient backgrounds, degraded underwater-style.

    Object bounding boxes double as detection labels. Deterministic in ``seed``.
    """
    if n < 1:
        raise ParameterError("n must be >= 1")
    cfg = config or SyntheticConfig()
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        z, o = _draw_scene(rng, cfg)
        params = sample_degradation(rng, cfg)
        x = degrade(z, params)
        out.append(
            PairedSample(
                x=x.astype(np.float32),
                z=z.astype(np.float32),
                id=f"syn_{seed}_{i:05d}",
                o=o,
                params=params,
            )
        )
    return out


def stack_samples(samples):
    x = torch.from_numpy(np.stack([s.x for s in samples]))
    z = torch.from_numpy(np.stack([s.z for s in samples]))
    return x, z, [s.o for s in samples]


def psnr(a, b):
    """PSNR in dB with peak 1; identical inputs give ``inf``."""
    a = as_tensor(a, torch.float64)
    b = as_tensor(b, torch.float64)
    check_same_shape(a, b)
    mse = float(((a - b) ** 2).mean())
    if mse == 0:
        return math.inf
    return 10 * math.log10(1.0 / mse)


def gaussian_window(size=11, sigma=1.5):
    g = np.exp(-((np.arange(size) - (size - 1) / 2) ** 2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, win_size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean SSIM over channels (and batch) with a Gaussian window, valid region only.

    Images smaller than the window use the largest odd window that fits.
    """
    a = as_tensor(a, torch.float64)
    b = as_tensor(b, torch.float64)
    check_same_shape(a, b)
    if a.ndim == 3:
        a, b = a[None], b[None]
    win_size = min(win_size, *(d - (1 - d % 2) for d in a.shape[-2:]))
    n, c, h, w = a.shape
    kernel = torch.from_numpy(gaussian_window(win_size, sigma)).reshape(1, 1, win_size, win_size)
    a = a.reshape(n * c, 1, h, w)
    b = b.reshape(n * c, 1, h, w)

    def filt(t):
        return F.conv2d(t, kernel)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    c1, c2 = k1**2, k2**2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def rgb_difference_profile(u_clean, u_attacked, axis="rows"):
    """Per-channel curve of mean ``|u_clean - u_attacked|``.

    ``axis="rows"`` averages over rows, giving one value per column; the
    result has shape (..., 3, W). ``axis="columns"`` gives (..., 3, H).
    """
    a = np.asarray(u_clean, dtype=np.float64)
    b = np.asarray(u_attacked, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[-3] != 3:
        raise DimensionError(f"expected RGB images, got shape {a.shape}")
    if axis not in ("rows", "columns"):
        raise ParameterError(f"axis must be 'rows' or 'columns', got {axis!r}")
    return np.abs(a - b).mean(axis=-2 if axis == "rows" else -1)


def write_profile_csv(path, profile):
    profile = np.asarray(profile)
    lines = ["column_index,diff_r,diff_g,diff_b"]
    for i in range(profile.shape[-1]):
        lines.append(f"{i}," + ",".join(repr(float(profile[c, i])) for c in range(3)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_profile_csv(path):
    rows = Path(path).read_text().strip().splitlines()[1:]
    vals = np.array([[float(v) for v in r.split(",")[1:]] for r in rows])
    return vals.T


# image I/O -----------------------------------------------------------------


def read_image(path):
    """Read an 8- or 16-bit PNG as float32 (3, H, W) in [0, 1]."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise ParameterError(f"cannot read image {path}")
    if img.dtype == np.uint8:
        scale = 255.0
    elif img.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ParameterError(f"{path}: unsupported dtype {img.dtype}")
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    elif img.shape[2] == 4:
        img = cv2.cvtColor(img, cv2.COLOR_BGRA2BGR)
    img = img[..., ::-1].astype(np.float32) / scale
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def write_image(path, img, bits=16):
    """Write a (3, H, W) array in [0, 1] as an RGB PNG."""
    img = np.clip(np.asarray(img, dtype=np.float64), 0, 1)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionError(f"expected (3, H, W), got {img.shape}")
    if bits == 16:
        data = np.round(img * 65535).astype(np.uint16)
    elif bits == 8:
        data = np.round(img * 255).astype(np.uint8)
    else:
        raise ParameterError("bits must be 8 or 16")
    data = np.ascontiguousarray(data.transpose(1, 2, 0)[..., ::-1])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), data):
        raise ParameterError(f"cannot write image {path}")


def list_images(folder):
    folder = Path(folder)
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


# annotations and dataset layout ---------------------------------------------


def load_annotations(path):
    """Read a detection annotation file; returns ``({file: DetectionSet}, classes)``.

    Boxes are stored in absolute pixels and returned normalized.
    """
    doc = json.loads(Path(path).read_text())
    classes = list(doc["classes"])
    index = {name: i for i, name in enumerate(classes)}
    out = {}
    for entry in doc["images"]:
        w, h = float(entry["width"]), float(entry["height"])
        boxes, labels, scores = [], [], []
        for obj in entry.get("objects", []):
            x1, y1, x2, y2 = obj["bbox"]
            boxes.append([x1 / w, y1 / h, x2 / w, y2 / h])
            if obj["class"] not in index:
                raise ParameterError(f"unknown class {obj['class']!r} in {path}")
            labels.append(index[obj["class"]])
            if "score" in obj:
                scores.append(float(obj["score"]))
        det = DetectionSet(boxes, labels, scores if scores else None)
        if scores and len(scores) != len(labels):
            raise ParameterError(f"{entry['file']}: scores missing for some objects")
        out[entry["file"]] = det.validate(len(classes))
    return out, classes


def dump_annotations(path, dets, classes, sizes):
    """Write ``{file: DetectionSet}`` in the annotation format; ``sizes`` maps file -> (w, h)."""
    images = []
    for fname in sorted(dets):
        det = dets[fname]
        w, h = sizes[fname]
        objects = []
        for k in range(len(det)):
            x1, y1, x2, y2 = det.boxes[k]
            obj = {
                "bbox": [float(x1 * w), float(y1 * h), float(x2 * w), float(y2 * h)],
                "class": classes[int(det.labels[k])],
            }
            if det.scores is not None:
                obj["score"] = float(det.scores[k])
            objects.append(obj)
        images.append({"file": fname, "width": int(w), "height": int(h), "objects": objects})
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps({"images": images, "classes": list(classes)}, indent=1))


def save_dataset(samples, root, classes=CLASS_NAMES):
    """Write samples in the paired layout: ``raw/``, ``reference/``, annotations and manifest."""
    root = Path(root)
    (root / "raw").mkdir(parents=True, exist_ok=True)
    (root / "reference").mkdir(parents=True, exist_ok=True)
    dets, sizes, pairs = {}, {}, []
    for s in samples:
        fname = f"{s.id}.png"
        write_image(root / "raw" / fname, s.x)
        write_image(root / "reference" / fname, s.z)
        h, w = s.x.shape[-2:]
        sizes[fname] = (w, h)
        if s.o is not None:
            dets[fname] = s.o
        pairs.append({"raw": f"raw/{fname}", "reference": f"reference/{fname}"})
    manifest = {"pairs": pairs}
    if dets:
        dump_annotations(root / "annotations.json", dets, classes, sizes)
        manifest["annotations"] = "annotations.json"
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


def load_dataset(root):
    """Load a paired dataset from a manifest or from ``raw/`` + ``reference/`` folders."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    ann_path = None
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        pairs = [(root / p["raw"], root / p["reference"]) for p in manifest["pairs"]]
        if manifest.get("annotations"):
            ann_path = root / manifest["annotations"]
    else:
        raw = list_images(root / "raw")
        ref_dir = root / "reference"
        pairs = [(p, ref_dir / p.name) for p in raw]
        if (root / "annotations.json").exists():
            ann_path = root / "annotations.json"
    dets, classes = ({}, list(CLASS_NAMES))
    if ann_path is not None:
        dets, classes = load_annotations(ann_path)
    for raw, ref in pairs:
        if not ref.exists():
            raise ParameterError(f"missing reference image for {raw.name}")
    xs = read_images([raw for raw, _ in pairs])
    zs = read_images([ref for _, ref in pairs])
    samples = [
        PairedSample(x=x, z=z, id=raw.stem, o=dets.get(raw.name)).validate(len(classes))
        for (raw, _), x, z in zip(pairs, xs, zs)
    ]
    return samples, classes


def read_images(paths):
    """Read many images, in parallel up to :func:`num_workers` threads."""
    paths = list(paths)
    workers = num_workers()
    if workers == 1 or len(paths) < 2:
        return [read_image(p) for p in paths]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(read_image, paths))


def num_workers():
    """Data-loading parallelism cap from ``CARNET_NUM_WORKERS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("CARNET_NUM_WORKERS", "1")))
    except ValueError:
        return 1

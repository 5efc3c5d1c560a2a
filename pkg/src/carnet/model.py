"""The enhance-then-detect pipeline and its checkpoint directory format."""

import hashlib
import json
import os
import shutil
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

from ._validation import ConfigError
from .apd import ATTACK_LABELS, Discriminator
from .detector import AnchorGrid, TinyDetector
from .inn import Enhancer, LatentPrior

MANIFEST = "manifest.json"
FORMAT_VERSION = 1


@dataclass
class Enhanced:
    image: torch.Tensor
    x_lr: torch.Tensor
    x_hf: torch.Tensor
    probs: torch.Tensor


class CARNet(nn.Module):
    """Discriminator-steered invertible enhancer followed by a detector."""

    def __init__(self, enhancer, apd, detector, latent_mode="sample", labels=ATTACK_LABELS):
        super().__init__()
        if apd.num_patterns != enhancer.num_patterns:
            raise ConfigError("discriminator and enhancer disagree on the number of patterns")
        self.enhancer = enhancer
        self.apd = apd
        self.detector = detector
        self.latent_mode = latent_mode
        self.labels = tuple(labels)

    @classmethod
    def from_config(cls, arch):
        """Build from an architecture dict as stored in checkpoint manifests."""
        arch = dict(arch)
        k = arch.get("num_patterns", len(ATTACK_LABELS))
        enh = dict(arch.get("enhancer", {}))
        enh.setdefault("num_patterns", k)
        apd = dict(arch.get("apd", {}))
        apd.setdefault("num_patterns", k)
        det = dict(arch.get("detector", {}))
        anchors = AnchorGrid(**det.pop("anchors", {}))
        return cls(
            Enhancer(**enh),
            Discriminator(**apd),
            TinyDetector(anchors=anchors, **det),
            latent_mode=arch.get("latent_mode", "sample"),
            labels=arch.get("labels", ATTACK_LABELS),
        )

    def architecture(self):
        return dict(
            num_patterns=self.enhancer.num_patterns,
            enhancer=self.enhancer.config(),
            apd=self.apd.config(),
            detector=self.detector.config(),
            latent_mode=self.latent_mode,
            labels=list(self.labels),
        )

    def sample_latent(self, x, seed=None, generator=None):
        n, _, h, w = x.shape
        like = x.new_empty(n, 9, h // 2, w // 2)
        prior = LatentPrior(seed=0 if seed is None else seed, mode=self.latent_mode)
        return prior.sample(like, generator=generator)

    def enhance(self, x, v_hf=None, generator=None, clamp=False, probs=None):
        if probs is None:
            probs = self.apd(x)
        x_lr, x_hf = self.enhancer.decompose(x, probs)
        if v_hf is None:
            v_hf = self.sample_latent(x, generator=generator)
        u = self.enhancer.reconstruct(x_lr, v_hf, probs, clamp=clamp)
        return Enhanced(u, x_lr, x_hf, probs)

    def detect(self, x, v_hf=None, generator=None):
        return self.detector(self.enhance(x, v_hf=v_hf, generator=generator).image)


def parameter_hash(*modules):
    """SHA-256 over every parameter and buffer, in registration order."""
    h = hashlib.sha256()
    for m in modules:
        for name, t in list(m.named_parameters()) + list(m.named_buffers()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@contextmanager
def frozen(*modules):
    """Temporarily disable gradients for every parameter of ``modules``."""
    params = [p for m in modules for p in m.parameters()]
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad_(flag)


def save_checkpoint(path, model, extra=None, blobs=None):
    """Write ``manifest.json`` plus one weights blob per module, atomically.

    ``blobs`` maps additional names to picklable state (e.g. optimizer state).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=path.name + ".tmp-", dir=path.parent))
    weights = {}
    for name, module in (("enhancer", model.enhancer), ("apd", model.apd), ("detector", model.detector)):
        fname = f"{name}.pt"
        torch.save(module.state_dict(), tmp / fname)
        weights[name] = fname
    for name, state in (blobs or {}).items():
        fname = f"{name}.pt"
        torch.save(state, tmp / fname)
        weights[name] = fname
    manifest = dict(
        format_version=FORMAT_VERSION,
        architecture=model.architecture(),
        label_vocabulary={str(i): name for i, name in enumerate(model.labels)},
        weights=weights,
        parameter_hash=parameter_hash(model),
    )
    manifest.update(extra or {})
    (tmp / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    old = None
    if path.exists():
        old = path.with_name(path.name + ".old")
        if old.exists():
            shutil.rmtree(old)
        os.replace(path, old)
    os.replace(tmp, path)
    if old is not None:
        shutil.rmtree(old)
    return path


def read_manifest(path):
    mpath = Path(path) / MANIFEST
    if not mpath.exists():
        raise ConfigError(f"no checkpoint manifest at {mpath}")
    return json.loads(mpath.read_text())


def load_checkpoint(path):
    """Return ``(model, manifest, extra_blobs)`` from a checkpoint directory."""
    path = Path(path)
    manifest = read_manifest(path)
    model = CARNet.from_config(manifest["architecture"])
    blobs = {}
    for name, fname in manifest["weights"].items():
        state = torch.load(path / fname, weights_only=False)
        if name in ("enhancer", "apd", "detector"):
            getattr(model, name).load_state_dict(state)
        else:
            blobs[name] = state
    return model, manifest, blobs

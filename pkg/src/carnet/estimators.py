"""scikit-learn style wrappers around the pipeline and the PGD attack."""

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import ParameterError, check_image_batch
from .attacks import ATTACK_KINDS, AttackObjective, PerturbationBudget, pgd_attack
from .data import PairedSample, psnr
from .evaluation import predict
from .model import frozen
from .trainer import DESK_ITERATIONS, STAGES, TrainConfig, new_state, run_stage


def _images(X, name="X"):
    return check_image_batch(np.asarray(X, dtype=np.float32), name=name)


def _chunks(x, size):
    return torch.split(x, size) if len(x) else []


class CARNetEstimator(TransformerMixin, BaseEstimator):
    """Attack-aware enhance-then-detect pipeline.

    ``fit(X, y, targets=...)`` trains on degraded images ``X`` and clean
    references ``y`` (both ``(n, 3, H, W)`` in [0, 1]). Without ``targets``
    only the enhancement pretraining stage runs. ``transform`` returns
    enhanced images, ``predict`` per-image detections, ``score`` mean PSNR.
    """

    def __init__(
        self,
        num_blocks=6,
        hidden=16,
        num_layers=3,
        hf_log_scale=0.0,
        num_classes=2,
        iterations=None,
        lr=1e-4,
        momentum=0.0,
        batch_size=4,
        lambdas=(2.0, 0.1, 1.0, 5.0),
        attack_mix=(1.0, 1.0, 1.0),
        eps=8 / 255,
        alpha=2 / 255,
        steps=10,
        latent_mode="sample",
        seed=0,
    ):
        self.num_blocks = num_blocks
        self.hidden = hidden
        self.num_layers = num_layers
        self.hf_log_scale = hf_log_scale
        self.num_classes = num_classes
        self.iterations = iterations
        self.lr = lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.lambdas = lambdas
        self.attack_mix = attack_mix
        self.eps = eps
        self.alpha = alpha
        self.steps = steps
        self.latent_mode = latent_mode
        self.seed = seed

    def _architecture(self):
        return dict(
            enhancer=dict(
                num_blocks=self.num_blocks,
                hidden=self.hidden,
                num_layers=self.num_layers,
                hf_log_scale=self.hf_log_scale,
                seed=self.seed,
            ),
            apd=dict(seed=self.seed),
            detector=dict(num_classes=self.num_classes, seed=self.seed),
            latent_mode=self.latent_mode,
        )

    def _train_config(self):
        budget = PerturbationBudget(self.eps, self.alpha, self.steps).to_dict()
        return TrainConfig(
            lambdas=tuple(self.lambdas),
            lr=self.lr,
            momentum=self.momentum,
            iterations={**DESK_ITERATIONS, **(self.iterations or {})},
            batch_size=self.batch_size,
            vision_budget=budget,
            perception_budget=budget,
            attack_mix=tuple(self.attack_mix),
            seed=self.seed,
        )

    def fit(self, X, y, targets=None):
        x = _images(X)
        z = _images(y, "y")
        if x.shape != z.shape:
            raise ParameterError(f"X {tuple(x.shape)} and y {tuple(z.shape)} differ in shape")
        if targets is not None and len(targets) != len(x):
            raise ParameterError("need one DetectionSet per image in targets")
        samples = [
            PairedSample(x=x[i].numpy(), z=z[i].numpy(), id=str(i), o=None if targets is None else targets[i])
            for i in range(len(x))
        ]
        state = new_state(self._architecture(), self._train_config())
        stages = STAGES if targets is not None else STAGES[:1]
        for stage in stages:
            run_stage(stage, state, samples)
        self.state_ = state
        self.model_ = state.model.eval()
        self.log_ = list(state.log_rows)
        self.n_features_in_ = int(np.prod(x.shape[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        x = _images(X)
        out = []
        with torch.no_grad():
            for i, chunk in enumerate(_chunks(x, 64)):
                v = self.model_.sample_latent(chunk, seed=self.seed + i)
                out.append(self.model_.enhance(chunk, v_hf=v, clamp=True).image)
        return torch.cat(out).numpy() if out else np.zeros_like(x.numpy())

    def predict(self, X):
        check_is_fitted(self, "model_")
        x = _images(X)
        dets = []
        for i, chunk in enumerate(_chunks(x, 64)):
            dets.extend(predict(self.model_, chunk, self.model_.sample_latent(chunk, seed=self.seed + i)))
        return dets

    def predict_proba(self, X):
        """Attack-pattern probabilities from the discriminator."""
        check_is_fitted(self, "model_")
        with torch.no_grad():
            return self.model_.apd(_images(X)).numpy()

    def score(self, X, y):
        u = self.transform(X)
        z = _images(y, "y").numpy()
        return float(np.mean([psnr(u[i], z[i]) for i in range(len(u))]))


class PGDAttack(TransformerMixin, BaseEstimator):
    """Perturbs images against a fitted :class:`CARNetEstimator`.

    ``transform(X, y=None, targets=None)``: ``y`` are clean references for the
    vision attack, ``targets`` the detection labels for perception attacks.
    """

    def __init__(self, estimator=None, kind="vision_contrastive", eps=8 / 255, alpha=2 / 255,
                 steps=10, seed=0):
        self.estimator = estimator
        self.kind = kind
        self.eps = eps
        self.alpha = alpha
        self.steps = steps
        self.seed = seed

    def fit(self, X=None, y=None):
        if self.kind not in ATTACK_KINDS:
            raise ParameterError(f"unknown attack kind {self.kind!r}")
        check_is_fitted(self.estimator, "model_")
        self.budget_ = PerturbationBudget(self.eps, self.alpha, self.steps).validate()
        return self

    def transform(self, X, y=None, targets=None):
        check_is_fitted(self, "budget_")
        model = self.estimator.model_
        x = _images(X)
        z = None if y is None else _images(y, "y")
        obj = AttackObjective(self.kind, model, x, z=z, targets=targets, latent_seed=self.seed)
        with frozen(model):
            delta = pgd_attack(x, obj, self.budget_, seed=self.seed)
        return (x + delta).numpy()

    def fit_transform(self, X, y=None, targets=None):
        return self.fit(X, y).transform(X, y, targets)

"""Projected sign-gradient (PGD) attacks on the enhancement/detection pipeline."""

from dataclasses import asdict, dataclass

import torch

from ._validation import NumericError, ParameterError, check_same_shape
from .detector import detection_loss, match_anchors, stack_assignments

ATTACK_KINDS = ("vision_contrastive", "det_cls", "det_loc", "det_full")


@dataclass
class PerturbationBudget:
    """L-inf radius ``eps``, step size ``alpha`` and iteration count ``steps``.

    ``eps == 0`` is accepted and makes every attack a no-op.
    """

    eps: float = 8 / 255
    alpha: float = 2 / 255
    steps: int = 10

    def validate(self):
        if not 0 <= self.eps <= 1:
            raise ParameterError(f"eps must lie in [0, 1], got {self.eps}")
        if self.steps < 1 or int(self.steps) != self.steps:
            raise ParameterError(f"steps must be a positive integer, got {self.steps}")
        if self.eps > 0 and not 0 < self.alpha <= self.eps:
            raise ParameterError(f"need 0 < alpha <= eps, got alpha={self.alpha} eps={self.eps}")
        return self

    def to_dict(self):
        return asdict(self)


def sign_step(delta, grad, alpha):
    """``delta + alpha * sign(grad)`` with ``sign(0) = 0``."""
    if not torch.isfinite(grad).all():
        raise NumericError("non-finite attack gradient")
    return delta + alpha * torch.sign(grad)


def project(delta, x, eps):
    """Clip ``delta`` to the L-inf ball and keep ``x + delta`` inside [0, 1]."""
    check_same_shape(delta, x, ("delta", "x"))
    bound = _floor_to_dtype(eps, delta.dtype)
    delta = delta.clamp(-bound, bound)
    return torch.maximum(torch.minimum(delta, 1 - x), -x)


def _floor_to_dtype(value, dtype):
    """Largest ``dtype`` number not above ``value``, so rounding never loosens the ball."""
    t = torch.tensor(value, dtype=dtype)
    if float(t) > value:
        t = torch.nextafter(t, torch.zeros((), dtype=dtype))
    return float(t)


def metric_contrastive(u_att, x, z, reduction="mean"):
    """Contrastive attack metric ``|u - z|_1 - |u - x|_1`` (mean absolute values).

    With ``reduction="none"`` returns one value per batch element.
    """
    check_same_shape(u_att, x, ("u_att", "x"))
    check_same_shape(u_att, z, ("u_att", "z"))
    per = (u_att - z).abs().flatten(1).mean(1) - (u_att - x).abs().flatten(1).mean(1)
    return per if reduction == "none" else per.mean()


def perception_objective(x_adv, pipeline, targets, kind="det_full", v_hf=None, per_image=False):
    """Detection loss of the enhance-then-detect pipeline against ``targets``.

    ``kind`` selects ``L_cls`` (det_cls), ``L_loc`` (det_loc) or their sum
    (det_full).
    """
    if kind not in ("det_cls", "det_loc", "det_full"):
        raise ParameterError(f"unknown perception objective {kind!r}")
    if targets is None or len(targets) != x_adv.shape[0]:
        raise ParameterError("perception attacks need one target DetectionSet per image")
    logits, offsets = pipeline.detect(x_adv, v_hf=v_hf)
    anchors = pipeline.detector.anchors
    assigns = [match_anchors(anchors, t) for t in targets]
    pick = {"det_cls": 0, "det_loc": 1, "det_full": 2}[kind]
    if per_image:
        return torch.stack(
            [
                detection_loss(logits[i : i + 1], offsets[i : i + 1], stack_assignments([a]))[pick]
                for i, a in enumerate(assigns)
            ]
        )
    return detection_loss(logits, offsets, stack_assignments(assigns))[pick]


class AttackObjective:
    """Differentiable objective ``x_adv -> per-image values`` for one attack kind.

    The high-frequency latent used during reconstruction is fixed once per
    attack (seeded) so the objective is deterministic in ``x_adv``.
    """

    def __init__(self, kind, pipeline, x, z=None, targets=None, latent_seed=0):
        if kind not in ATTACK_KINDS:
            raise ParameterError(f"unknown attack kind {kind!r}")
        if kind == "vision_contrastive" and z is None:
            raise ParameterError("the contrastive vision attack needs reference images z")
        if kind != "vision_contrastive" and targets is None:
            raise ParameterError("perception attacks require detection labels")
        self.kind = kind
        self.pipeline = pipeline
        self.x = x
        self.z = z
        self.targets = targets
        self.v_hf = pipeline.sample_latent(x, seed=latent_seed)

    def __call__(self, x_adv):
        if self.kind == "vision_contrastive":
            u = self.pipeline.enhance(x_adv, v_hf=self.v_hf).image
            return metric_contrastive(u, self.x, self.z, reduction="none")
        return perception_objective(
            x_adv, self.pipeline, self.targets, self.kind, v_hf=self.v_hf, per_image=True
        )


def _objective_grad(objective, x, delta):
    delta = delta.detach().requires_grad_(True)
    with torch.enable_grad():
        value = objective(x + delta)
        total = value.sum() if value.ndim else value
        (grad,) = torch.autograd.grad(total, delta)
    return total.detach(), grad


def _random_start(x, eps, gen):
    start = (torch.rand(x.shape, generator=gen, dtype=x.dtype) * 2 - 1) * eps
    return project(start, x, eps)


def initial_delta(x, budget, seed=0):
    """The projected uniform start ``delta^0`` that :func:`pgd_attack` uses for ``seed``."""
    if budget.eps == 0:
        return torch.zeros_like(x)
    return _random_start(x.detach(), budget.eps, torch.Generator().manual_seed(int(seed)))


def pgd_attack(x, objective, budget=None, seed=0):
    """Maximize ``objective(x + delta)`` over the feasible L-inf ball.

    ``delta`` starts uniform in ``[-eps, eps]`` and takes ``budget.steps``
    sign-gradient steps, each followed by :func:`project`. Only ``delta``
    receives gradients; model parameters are left untouched. A non-finite
    gradient triggers one restart from a fresh ``delta``.
    """
    budget = (budget or PerturbationBudget()).validate()
    x = x.detach()
    if budget.eps == 0:
        return torch.zeros_like(x)
    gen = torch.Generator().manual_seed(int(seed))
    for attempt in range(2):
        delta = _random_start(x, budget.eps, gen)
        try:
            for _ in range(budget.steps):
                value, grad = _objective_grad(objective, x, delta)
                if not (torch.isfinite(value) and torch.isfinite(grad).all()):
                    raise NumericError("attack objective is not differentiable here")
                delta = project(sign_step(delta, grad, budget.alpha), x, budget.eps)
            return delta.detach()
        except NumericError:
            if attempt:
                raise
    raise AssertionError("unreachable")

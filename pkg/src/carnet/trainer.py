"""Staged adversarial training: attack generation (frozen model) then joint update."""

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ._validation import ConfigError, NumericError
from .apd import batch_all_triplet_loss
from .attacks import AttackObjective, PerturbationBudget, pgd_attack
from .data import stack_samples
from .detector import detection_loss, match_anchors, stack_assignments
from .inn import loss_backward, loss_forward
from .model import CARNet, frozen, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

STAGES = ("pretrain_enhance", "pretrain_detect", "joint")
LOG_COLUMNS = ("iteration", "L_forw", "L_back", "L_det", "L_APD", "L_train", "wall_ms")
FULL_ITERATIONS = dict(pretrain_enhance=300_000, pretrain_detect=120_000, joint=200_000)
DESK_ITERATIONS = dict(pretrain_enhance=2000, pretrain_detect=1000, joint=2000)


@dataclass
class TrainConfig:
    lambdas: tuple = (2.0, 0.1, 1.0, 5.0)
    lr: float = 1e-4
    momentum: float = 0.0
    iterations: dict = field(default_factory=lambda: dict(DESK_ITERATIONS))
    batch_size: int = 4
    vision_budget: dict = field(default_factory=lambda: PerturbationBudget().to_dict())
    perception_budget: dict = field(default_factory=lambda: PerturbationBudget().to_dict())
    perception_kind: str = "det_full"
    attack_mix: tuple = (1.0, 1.0, 1.0)
    margin: float = 0.2
    seed: int = 0
    checkpoint_every: int = 0
    record_wall_time: bool = False
    enforce_stage_order: bool = True

    def validate(self):
        if len(self.lambdas) != 4 or any(v < 0 for v in self.lambdas):
            raise ConfigError("lambdas: need four nonnegative weights")
        if self.lr <= 0:
            raise ConfigError("lr: must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum: must lie in [0, 1)")
        for stage in STAGES:
            if self.iterations.get(stage, 0) < 0:
                raise ConfigError(f"iterations.{stage}: must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if len(self.attack_mix) != 3 or any(w < 0 for w in self.attack_mix) or max(self.attack_mix) <= 0:
            raise ConfigError("attack_mix: need three nonnegative weights, not all zero")
        if self.margin < 0:
            raise ConfigError("margin: must be >= 0")
        PerturbationBudget(**self.vision_budget).validate()
        PerturbationBudget(**self.perception_budget).validate()
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        d = dict(d)
        for key in ("lambdas", "attack_mix"):
            if key in d:
                d[key] = tuple(d[key])
        if "iterations" in d:
            d["iterations"] = {**DESK_ITERATIONS, **d["iterations"]}
        return cls(**d).validate()

    def to_dict(self):
        d = asdict(self)
        d["lambdas"] = list(self.lambdas)
        d["attack_mix"] = list(self.attack_mix)
        return d


@dataclass
class TrainState:
    model: CARNet
    config: TrainConfig
    iteration: int = 0
    stage_progress: dict = field(default_factory=lambda: {s: 0 for s in STAGES})
    completed: list = field(default_factory=list)
    optimizer_state: dict = None
    log_rows: list = field(default_factory=list)


def total_loss(components, lambdas=(2.0, 0.1, 1.0, 5.0)):
    """Weighted sum ``l1*L_forw + l2*L_back + l3*L_det + l4*L_APD``.

    ``components`` is a mapping with keys ``L_forw, L_back, L_det, L_APD``.
    Returns the weighted total and the components dict.
    """
    keys = ("L_forw", "L_back", "L_det", "L_APD")
    total = sum(w * components[k] for w, k in zip(lambdas, keys))
    return total, components


def _stage_rng(seed, stage, iteration):
    return np.random.default_rng([int(seed), STAGES.index(stage), int(iteration)])


def _torch_gen(rng):
    return torch.Generator().manual_seed(int(rng.integers(2**62)))


def _batch(samples, rng, batch_size):
    idx = rng.choice(len(samples), size=min(batch_size, len(samples)), replace=False)
    return [samples[i] for i in sorted(idx)]


def lower_level_step(model, x, z, targets, config, rng):
    """Generate attacked variants with the model frozen.

    Returns ``(x_all, z_all, targets_all, labels)`` where labels index
    ``clean / vision / perception``. Variant ``j`` of each sample is kept
    with probability ``attack_mix[j] / max(attack_mix)``.
    """
    mix = np.asarray(config.attack_mix, dtype=np.float64)
    keep = rng.random((x.shape[0], 3)) < (mix / mix.max())[None, :]
    if not keep.any():
        keep[:, int(mix.argmax())] = True
    xs, zs, ts, labels = [], [], [], []
    with frozen(model):
        for j, kind in enumerate((None, "vision_contrastive", config.perception_kind)):
            sel = np.nonzero(keep[:, j])[0]
            if len(sel) == 0:
                continue
            xi, zi = x[sel], z[sel]
            ti = [targets[i] for i in sel]
            if kind is None:
                xa = xi
            else:
                budget = PerturbationBudget(
                    **(config.vision_budget if j == 1 else config.perception_budget)
                )
                obj = AttackObjective(
                    kind, model, xi, z=zi, targets=ti, latent_seed=int(rng.integers(2**31))
                )
                delta = pgd_attack(xi, obj, budget, seed=int(rng.integers(2**31)))
                xa = xi + delta
            xs.append(xa)
            zs.append(zi)
            ts.extend(ti)
            labels.extend([j] * len(sel))
    return torch.cat(xs), torch.cat(zs), ts, labels


def compute_losses(model, x, z, targets, labels, config, gen, stage="joint"):
    """Forward pass for one step; returns the weighted total and raw components."""
    zero = x.new_zeros(())
    comps = dict(L_forw=zero, L_back=zero, L_det=zero, L_APD=zero)
    if stage == "pretrain_detect":
        with torch.no_grad():
            u = model.enhance(x, generator=gen).image
    else:
        probs = model.apd(x)
        if stage == "pretrain_enhance":
            probs = probs.detach()
        enh = model.enhance(x, generator=gen, probs=probs)
        u = enh.image
        comps["L_forw"] = loss_forward(enh.x_lr, z)
        comps["L_back"] = loss_backward(u, z)
        if stage == "joint":
            comps["L_APD"] = batch_all_triplet_loss(probs, labels, config.margin)
    if stage != "pretrain_enhance":
        logits, offsets = model.detector(u)
        assign = stack_assignments([match_anchors(model.detector.anchors, t) for t in targets])
        comps["L_det"] = detection_loss(logits, offsets, assign)[2]
    return total_loss(comps, config.lambdas)


def _stage_params(model, stage):
    if stage == "pretrain_enhance":
        return list(model.enhancer.parameters())
    if stage == "pretrain_detect":
        return list(model.detector.parameters())
    return list(model.parameters())


def _make_optimizer(state, stage):
    opt = torch.optim.SGD(
        _stage_params(state.model, stage), lr=state.config.lr, momentum=state.config.momentum
    )
    if state.optimizer_state is not None and state.optimizer_state.get("stage") == stage:
        opt.load_state_dict(state.optimizer_state["state"])
    return opt


def train_step(state, samples, stage, opt):
    """One optimization step of ``stage``; appends a log row and returns it."""
    cfg = state.config
    it = state.stage_progress[stage]
    rng = _stage_rng(cfg.seed, stage, it)
    batch = _batch(samples, rng, cfg.batch_size)
    x, z, targets = stack_samples(batch)
    t0 = time.perf_counter()
    if stage == "joint":
        x, z, targets, labels = lower_level_step(state.model, x, z, targets, cfg, rng)
    else:
        labels = [0] * x.shape[0]
    gen = _torch_gen(rng)
    where = f"iteration {state.iteration} ({stage}); batch ids {[s.id for s in batch]}"
    try:
        total, comps = compute_losses(state.model, x, z, targets, labels, cfg, gen, stage)
    except NumericError as exc:
        raise NumericError(f"{exc} at {where}") from exc
    values = {k: float(v.detach()) for k, v in comps.items()}
    if not np.isfinite(float(total.detach())) or not all(np.isfinite(list(values.values()))):
        raise NumericError(f"non-finite loss at {where}")
    opt.zero_grad(set_to_none=True)
    total.backward()
    opt.step()
    state.iteration += 1
    state.stage_progress[stage] = it + 1
    wall = (time.perf_counter() - t0) * 1000 if cfg.record_wall_time else 0.0
    row = dict(iteration=state.iteration, L_train=float(total.detach()), wall_ms=wall, **values)
    state.log_rows.append(row)
    return row


def _prerequisites_met(state, stage):
    if stage != "joint" or not state.config.enforce_stage_order:
        return True
    return all(s in state.completed for s in ("pretrain_enhance", "pretrain_detect"))


def run_stage(stage, state, samples, checkpoint_dir=None, log_path=None, stop_after=None):
    """Run (or resume) ``stage`` to its configured iteration count.

    ``stop_after`` halts early after that many stage iterations in total,
    leaving the stage resumable.
    """
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}")
    if not _prerequisites_met(state, stage):
        raise ConfigError("joint training needs both pretraining stages first")
    cfg = state.config
    target = cfg.iterations.get(stage, 0)
    if stop_after is not None:
        target = min(target, stop_after)
    opt = _make_optimizer(state, stage)
    state.model.train()
    start_rows = len(state.log_rows)
    while state.stage_progress[stage] < target:
        row = train_step(state, samples, stage, opt)
        if row["iteration"] % 100 == 0:
            log.info("%s it %d L_train %.4f", stage, row["iteration"], row["L_train"])
        if cfg.checkpoint_every and state.stage_progress[stage] % cfg.checkpoint_every == 0:
            state.optimizer_state = dict(stage=stage, state=opt.state_dict())
            if checkpoint_dir is not None:
                save_state(checkpoint_dir, state)
    state.optimizer_state = dict(stage=stage, state=opt.state_dict())
    if state.stage_progress[stage] >= cfg.iterations.get(stage, 0) and stage not in state.completed:
        state.completed.append(stage)
    if log_path is not None:
        append_log(log_path, state.log_rows[start_rows:])
    if checkpoint_dir is not None:
        save_state(checkpoint_dir, state)
    return state


def run_schedule(state, samples, stages=STAGES, checkpoint_dir=None, log_path=None):
    for stage in stages:
        run_stage(stage, state, samples, checkpoint_dir, log_path)
    return state


# logs and checkpoints ------------------------------------------------------


def format_log(rows, header=True):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if header:
        writer.writerow(LOG_COLUMNS)
    for r in rows:
        writer.writerow([r["iteration"]] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]])
    return buf.getvalue()


def append_log(path, rows):
    path = Path(path)
    new = not path.exists()
    with path.open("a") as fh:
        fh.write(format_log(rows, header=new))


def read_log(path):
    with Path(path).open() as fh:
        return [
            {k: (int(v) if k == "iteration" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def save_state(path, state):
    extra = dict(
        iteration=state.iteration,
        stage_progress=state.stage_progress,
        completed=state.completed,
        train_config=state.config.to_dict(),
        seeds=dict(train=state.config.seed),
    )
    blobs = {}
    if state.optimizer_state is not None:
        blobs["optimizer"] = state.optimizer_state
    return save_checkpoint(path, state.model, extra=extra, blobs=blobs)


def load_state(path, config=None):
    model, manifest, blobs = load_checkpoint(path)
    cfg = config or TrainConfig.from_dict(manifest.get("train_config", {}))
    return TrainState(
        model=model,
        config=cfg,
        iteration=manifest.get("iteration", 0),
        stage_progress={s: manifest.get("stage_progress", {}).get(s, 0) for s in STAGES},
        completed=list(manifest.get("completed", [])),
        optimizer_state=blobs.get("optimizer"),
    )


def new_state(arch, config):
    return TrainState(model=CARNet.from_config(arch), config=config.validate())

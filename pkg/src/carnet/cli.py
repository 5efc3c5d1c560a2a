"""Command-line entry point: ``carnet <subcommand> [options]``.

Every invocation writes ``run.json`` into ``--out``; ``--replay run.json``
re-runs it. Exit codes: 0 success, 2 user or configuration error, 3 numeric
failure, 1 unexpected internal error.
"""

import argparse
import copy
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from . import __version__
from ._validation import CarnetError, ConfigError, NumericError, ParameterError, is_inf
from .attacks import AttackObjective, PerturbationBudget, initial_delta, pgd_attack
from .data import (
    CLASS_NAMES,
    SyntheticConfig,
    dump_annotations,
    list_images,
    load_annotations,
    load_dataset,
    make_synthetic_dataset,
    num_workers,
    psnr,
    read_image,
    read_images,
    rgb_difference_profile,
    save_dataset,
    ssim,
    write_image,
    write_profile_csv,
)
from .detector import DetectionSet, average_precision_per_class
from .evaluation import evaluate_detection, predict
from .model import CARNet, frozen, load_checkpoint, parameter_hash, read_manifest
from .trainer import STAGES, TrainConfig, TrainState, load_state, run_stage

EXIT_OK, EXIT_INTERNAL, EXIT_USER, EXIT_NUMERIC = 0, 1, 2, 3


# configuration ---------------------------------------------------------------


def load_schema():
    return json.loads(resources.files("carnet").joinpath("schema/config.json").read_text())


def _schema_defaults(node, root=None):
    root = root or node
    if "$ref" in node:
        node = root["$defs"][node["$ref"].rsplit("/", 1)[-1]]
    if "default" in node and node.get("type") != "object":
        return copy.deepcopy(node["default"])
    props = node.get("properties")
    if props is None:
        return None
    out = {}
    for key, sub in props.items():
        val = _schema_defaults(sub, root)
        if val is not None:
            out[key] = val
    return out


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def validate_config(doc):
    import jsonschema

    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = ".".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {err.message}")
    return doc


def resolve_config(user=None, seed=None, base=None):
    """Defaults, then ``base`` (e.g. a checkpoint's settings), then ``user``, then ``seed``."""
    user = validate_config(user or {})
    cfg = _merge(_schema_defaults(load_schema()), base or {})
    cfg = _merge(cfg, user)
    if seed is not None:
        cfg["train"]["seed"] = cfg["data"]["seed"] = cfg["attack"]["seed"] = seed
        for part in ("enhancer", "apd", "detector"):
            cfg["architecture"][part]["seed"] = seed
    validate_config(cfg)
    arch = cfg["architecture"]
    for part in ("enhancer", "apd"):
        arch[part].setdefault("num_patterns", arch["num_patterns"])
    TrainConfig.from_dict(cfg["train"])
    for key in ("vision_budget", "perception_budget"):
        PerturbationBudget(**cfg["train"][key]).validate()
    return cfg


def _read_json(path, what):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"{what} not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} {path} is not valid JSON: {exc}") from None


def _dump(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _fmt(v):
    return "inf" if is_inf(v) else v


# helpers -------------------------------------------------------------------


def _out_path(args, value):
    p = Path(value)
    return p if p.is_absolute() else Path(args.out) / p


def _require(value, flag):
    if value is None:
        raise ConfigError(f"{flag} is required for this subcommand")
    return value


def _need_dir(path, flag):
    p = Path(_require(path, flag))
    if not p.is_dir():
        raise ConfigError(f"{flag}: no such directory {p}")
    return p


def _load_model(args):
    model, manifest, _ = load_checkpoint(_need_dir(args.checkpoint, "--checkpoint"))
    return model.eval(), manifest


def _image_seed(seed, index):
    return int(seed) * 1_000_003 + index


def quantize_within(x, x_adv, eps, levels=65535):
    """Round ``x_adv`` to the 16-bit grid without leaving the eps-ball around ``x``.

    ``x`` is assumed to lie on the grid (it was read from a PNG).
    """
    q = np.round(np.clip(x_adv, 0, 1) * levels)
    base = np.round(np.asarray(x, dtype=np.float64) * levels)
    lim = np.floor(eps * levels + 1e-9)
    while lim > 0 and lim / levels > eps:
        lim -= 1
    q = np.clip(np.clip(q, base - lim, base + lim), 0, levels)
    return q / levels, float(np.abs(q - base).max() / levels)


def _map_parallel(fn, items):
    workers = num_workers()
    if workers == 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _aligned(pred_dir, truth_dir):
    pred = {p.name: p for p in list_images(pred_dir)}
    truth = {p.name: p for p in list_images(truth_dir)}
    orphans = sorted(set(pred) ^ set(truth))
    if orphans:
        raise ConfigError("unmatched files: " + ", ".join(orphans))
    return [(pred[k], truth[k]) for k in sorted(pred)]


# subcommands -----------------------------------------------------------------


def cmd_gen_data(args, cfg):
    d = cfg["data"]
    n = args.n if args.n is not None else d["n"]
    syn = SyntheticConfig(image_size=d["image_size"], max_objects=d["max_objects"])
    samples = make_synthetic_dataset(n, syn, seed=d["seed"])
    save_dataset(samples, args.out, CLASS_NAMES)
    print(f"wrote {len(samples)} pairs to {args.out}")
    return dict(num_samples=len(samples))


def _train_state(args, cfg):
    tcfg = TrainConfig.from_dict(cfg["train"])
    if args.checkpoint:
        state = load_state(_need_dir(args.checkpoint, "--checkpoint"), config=tcfg)
        if state.model.architecture() != CARNet.from_config(cfg["architecture"]).architecture():
            raise ConfigError("architecture in --config differs from the checkpoint")
        return state
    return TrainState(model=CARNet.from_config(cfg["architecture"]), config=tcfg.validate())


def cmd_train(args, cfg):
    samples, _ = load_dataset(_need_dir(args.data, "--data"))
    state = _train_state(args, cfg)
    stages = STAGES if args.stage == "all" else (args.stage,)
    ckpt = _out_path(args, args.save)
    log_path = _out_path(args, args.log)
    for stage in stages:
        run_stage(stage, state, samples, checkpoint_dir=ckpt, log_path=log_path)
    print(f"trained to iteration {state.iteration}; checkpoint {ckpt}")
    return dict(iteration=state.iteration, completed=state.completed,
                parameter_hash=parameter_hash(state.model))


def cmd_attack(args, cfg):
    model, manifest = _load_model(args)
    a = cfg["attack"]
    kind = args.kind or a["kind"]
    budget = PerturbationBudget(
        eps=a["eps"] if args.eps is None else args.eps,
        alpha=a["alpha"] if args.alpha is None else args.alpha,
        steps=a["steps"] if args.steps is None else args.steps,
    ).validate()
    files = list_images(_need_dir(args.input, "--input"))
    dets = None
    if kind == "vision_contrastive":
        ref_dir = _need_dir(args.reference, "--reference")
        missing = [f.name for f in files if not (ref_dir / f.name).exists()]
        if missing:
            raise ConfigError("no reference image for: " + ", ".join(missing))
    else:
        if not args.annotations:
            raise ConfigError(f"{kind} attacks need --annotations")
        dets, _ = load_annotations(args.annotations)
        missing = [f.name for f in files if f.name not in dets]
        if missing:
            raise ConfigError("no annotations for: " + ", ".join(missing))
    h0 = parameter_hash(model)
    results = []
    for i, f in enumerate(files):
        x = torch.from_numpy(read_image(f))[None]
        z = torch.from_numpy(read_image(Path(args.reference) / f.name))[None] if dets is None else None
        targets = None if dets is None else [dets[f.name]]
        seed = _image_seed(a["seed"], i)
        obj = AttackObjective(kind, model, x, z=z, targets=targets, latent_seed=seed)
        with frozen(model):
            delta = pgd_attack(x, obj, budget, seed=seed)
        adv, max_delta = quantize_within(x.numpy()[0], (x + delta).numpy()[0], budget.eps)
        out_img = Path(args.out) / f.name
        write_image(out_img, adv)
        adv_t = torch.from_numpy(adv).float()[None]
        with torch.no_grad():
            before = float(obj(x)[0])
            start = float(obj(x + initial_delta(x, budget, seed))[0])
            after = float(obj(adv_t)[0])
        side = dict(
            file=f.name,
            source=str(f),
            kind=kind,
            budget=budget.to_dict(),
            seed=seed,
            objective_clean=before,
            objective_start=start,
            objective_after=after,
            max_abs_delta=max_delta,
            checkpoint_hash=manifest["parameter_hash"],
        )
        _dump(out_img.with_suffix(".json"), side)
        results.append(side)
    if parameter_hash(model) != h0:
        raise NumericError("model parameters changed during the attack")
    print(f"attacked {len(results)} images ({kind}, eps={budget.eps:.5f})")
    return dict(num_images=len(results), kind=kind, budget=budget.to_dict())


def cmd_enhance(args, cfg):
    model, manifest = _load_model(args)
    files = list_images(_need_dir(args.input, "--input"))
    seed = cfg["attack"]["seed"]
    for i, (f, img) in enumerate(zip(files, read_images(files))):
        x = torch.from_numpy(img)[None]
        s = _image_seed(seed, i)
        with torch.no_grad():
            enh = model.enhance(x, v_hf=model.sample_latent(x, seed=s), clamp=True)
        out = Path(args.out) / f.name
        write_image(out, enh.image[0].numpy())
        _dump(out.with_suffix(".json"), dict(
            file=f.name, source=str(f), latent_seed=s,
            attack_probs=dict(zip(model.labels, enh.probs[0].tolist())),
            checkpoint_hash=manifest["parameter_hash"],
        ))
    print(f"enhanced {len(files)} images")
    return dict(num_images=len(files))


def cmd_detect(args, cfg):
    model, _ = _load_model(args)
    e = cfg["eval"]
    files = list_images(_need_dir(args.input, "--input"))
    seed = cfg["attack"]["seed"]
    dets, sizes = {}, {}
    for i, (f, img) in enumerate(zip(files, read_images(files))):
        x = torch.from_numpy(img)[None]
        v = model.sample_latent(x, seed=_image_seed(seed, i))
        dets[f.name] = predict(model, x, v, e["score_thresh"], e["nms_iou"])[0]
        sizes[f.name] = (img.shape[2], img.shape[1])
    classes = args.classes.split(",") if args.classes else list(CLASS_NAMES)
    out = Path(args.out) / "predictions.json"
    dump_annotations(out, dets, classes, sizes)
    print(f"wrote detections for {len(files)} images to {out}")
    return dict(num_images=len(files))


def _eval_enhance(args, cfg):
    pairs = _aligned(_need_dir(args.pred, "--pred"), _need_dir(args.truth, "--truth"))

    def one(pair):
        a, b = read_image(pair[0]), read_image(pair[1])
        if a.shape != b.shape:
            raise ParameterError(f"{pair[0].name}: shape {a.shape} vs {b.shape}")
        return pair[0].name, psnr(a, b), ssim(a, b)

    rows = _map_parallel(one, pairs)
    finite = [p for _, p, _ in rows if not is_inf(p)]
    mean_psnr = float(np.mean(finite)) if finite else float("inf")
    mean_ssim = float(np.mean([s for _, _, s in rows])) if rows else float("nan")
    print(f"{'file':<24} {'PSNR':>9} {'SSIM':>7}")
    for name, p, s in rows:
        print(f"{name:<24} {_fmt(p) if is_inf(p) else f'{p:9.4f}':>9} {s:7.4f}")
    print(f"{'mean':<24} {_fmt(mean_psnr) if is_inf(mean_psnr) else f'{mean_psnr:9.4f}':>9} {mean_ssim:7.4f}")
    return dict(
        task="enhance",
        per_image={n: dict(psnr=_fmt(p), ssim=s) for n, p, s in rows},
        mean=dict(psnr=_fmt(mean_psnr), ssim=mean_ssim),
    )


def _eval_detect(args, cfg):
    e = cfg["eval"]
    truths, classes = load_annotations(_require(args.truth, "--truth"))
    preds, _ = load_annotations(_require(args.pred, "--pred"))
    if preds:
        orphans = sorted(set(preds) ^ set(truths))
        if orphans:
            raise ConfigError("unmatched files: " + ", ".join(orphans))
    names = sorted(truths)
    plist = [preds.get(n, DetectionSet(scores=np.zeros(0))) for n in names]
    aps = average_precision_per_class(plist, [truths[n] for n in names], e["iou"], e["ap_style"])
    result = dict(
        task="detect",
        ap_style=e["ap_style"],
        per_class={classes[c]: ap for c, ap in aps.items()},
        mAP=float(np.mean(list(aps.values()))),
    )
    for name, ap in result["per_class"].items():
        print(f"{name:<12} AP {ap:.4f}")
    print(f"{'mAP':<12}    {result['mAP']:.4f}")
    return result


def _eval_grid(args, cfg):
    """Rows = models, columns = clean and each perception attack (mAP)."""
    samples, _ = load_dataset(_need_dir(args.data, "--data"))
    models = dict(m.split("=", 1) for m in (args.models or []))
    if args.checkpoint:
        models.setdefault("model", args.checkpoint)
    if not models:
        raise ConfigError("grid evaluation needs --models name=checkpoint or --checkpoint")
    a, e = cfg["attack"], cfg["eval"]
    budget = PerturbationBudget(a["eps"], a["alpha"], a["steps"]).validate()
    kinds = ("det_cls", "det_loc", "det_full")
    columns = dict(clean="clean", det_cls="A_cls", det_loc="A_loc", det_full="det_full")
    grid = {}
    for name, path in models.items():
        model, _, _ = load_checkpoint(_need_dir(path, f"--models {name}"))
        res = evaluate_detection(model, samples, kinds, budget, seed=a["seed"], style=e["ap_style"])
        grid[name] = {columns[k]: v for k, v in res.items()}
    cols = list(columns.values())
    print(f"{'model':<16}" + "".join(f"{c:>10}" for c in cols))
    for name, row in grid.items():
        print(f"{name:<16}" + "".join(f"{row[c]:10.4f}" for c in cols))
    lines = ["model," + ",".join(cols)] + [
        name + "," + ",".join(repr(row[c]) for c in cols) for name, row in grid.items()
    ]
    (Path(args.out) / "grid.csv").write_text("\n".join(lines) + "\n")
    return dict(task="grid", metric="mAP", budget=budget.to_dict(), grid=grid)


def cmd_eval(args, cfg):
    task = {"enhance": _eval_enhance, "detect": _eval_detect, "grid": _eval_grid}[args.task]
    result = task(args, cfg)
    _dump(Path(args.out) / "metrics.json", result)
    return result


def cmd_report(args, cfg):
    pairs = _aligned(_need_dir(args.clean, "--clean"), _need_dir(args.attacked, "--attacked"))
    prof_dir = Path(args.out) / "profiles"
    prof_dir.mkdir(parents=True, exist_ok=True)

    def one(pair):
        a, b = read_image(pair[0]), read_image(pair[1])
        prof = rgb_difference_profile(a, b, axis=args.axis)
        write_profile_csv(prof_dir / (pair[0].stem + ".csv"), prof)
        return prof

    profiles = _map_parallel(one, pairs)
    summary = {}
    if profiles:
        widths = {p.shape[-1] for p in profiles}
        if len(widths) == 1:
            mean = np.mean(profiles, axis=0)
            write_profile_csv(Path(args.out) / "profile_mean.csv", mean)
            _plot_profile(mean, Path(args.out) / "profile_mean.png")
            summary = dict(mean_abs_diff=[float(v) for v in mean.mean(axis=1)])
    print(f"wrote {len(profiles)} profiles to {prof_dir}")
    return dict(num_images=len(profiles), axis=args.axis, **summary)


def _plot_profile(profile, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3))
    for c, color in enumerate(("r", "g", "b")):
        ax.plot(profile[c], color=color, label=f"|diff| {color.upper()}")
    ax.set_xlabel("column index")
    ax.set_ylabel("mean |clean - attacked|")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attack": cmd_attack,
    "enhance": cmd_enhance,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "report": cmd_report,
}


# parser --------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config validated against schema/config.json")
    common.add_argument("--checkpoint", help="checkpoint directory to read")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--out", help="output directory (default: current directory)")
    common.add_argument("--replay", help="re-run the invocation recorded in a run.json")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="carnet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"carnet {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic paired dataset")
    p.add_argument("--n", type=int, help="number of pairs (default from config)")

    p = sub.add_parser("train", parents=[common], help="run the staged training schedule")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--stage", choices=STAGES + ("all",), default="all")
    p.add_argument("--save", default="checkpoint", help="checkpoint output (relative to --out)")
    p.add_argument("--log", default="train_log.csv", help="training log (relative to --out)")

    p = sub.add_parser("attack", parents=[common], help="perturb images with PGD")
    p.add_argument("--kind", choices=("vision_contrastive", "det_cls", "det_loc", "det_full"))
    p.add_argument("--eps", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--input", help="directory of input images")
    p.add_argument("--reference", help="clean references (vision attack)")
    p.add_argument("--annotations", help="annotation JSON (perception attacks)")

    p = sub.add_parser("enhance", parents=[common], help="enhance a directory of images")
    p.add_argument("--input", help="directory of input images")

    p = sub.add_parser("detect", parents=[common], help="detect objects in a directory of images")
    p.add_argument("--input", help="directory of input images")
    p.add_argument("--classes", help="comma-separated class names (default: box,disc)")

    p = sub.add_parser("eval", parents=[common], help="compute quality or detection metrics")
    p.add_argument("--task", choices=("enhance", "detect", "grid"), default="enhance")
    p.add_argument("--pred", help="prediction directory (enhance) or file (detect)")
    p.add_argument("--truth", help="reference directory (enhance) or annotation file (detect)")
    p.add_argument("--data", help="dataset directory (grid)")
    p.add_argument("--models", nargs="+", metavar="NAME=CKPT", help="models for the grid")
    p.add_argument("--ap-style", choices=("all", "voc11"), dest="ap_style")

    p = sub.add_parser("report", parents=[common], help="RGB difference profiles")
    p.add_argument("--clean", help="directory of clean enhanced images")
    p.add_argument("--attacked", help="directory of attacked enhanced images")
    p.add_argument("--axis", choices=("rows", "columns"), default="rows")
    return parser


def _prepare(args):
    """Resolve the config for ``args``; returns ``(args, cfg)``."""
    if args.replay:
        record = _read_json(args.replay, "replay file")
        out = args.out
        args = argparse.Namespace(**record["args"])
        args.replay = None
        if out is not None:
            args.out = out
        return args, resolve_config(record["config"])
    args.out = args.out or "."
    user = _read_json(args.config, "config") if args.config else {}
    base = {}
    if args.command == "train" and args.checkpoint and Path(args.checkpoint, "manifest.json").exists():
        manifest = read_manifest(args.checkpoint)
        base = dict(architecture=manifest["architecture"], train=manifest.get("train_config", {}))
    if getattr(args, "ap_style", None):
        user = _merge(user, {"eval": {"ap_style": args.ap_style}})
    return args, resolve_config(user, seed=args.seed, base=base)


def run(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USER
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s"
    )
    args, cfg = _prepare(args)
    if args.command not in HANDLERS:
        raise ConfigError(f"replay file names unknown command {args.command!r}")
    Path(args.out).mkdir(parents=True, exist_ok=True)
    record = dict(
        command=args.command,
        args={k: v for k, v in sorted(vars(args).items()) if k not in ("replay",)},
        config=cfg,
        version=__version__,
    )
    _dump(Path(args.out) / "run.json", record)
    result = HANDLERS[args.command](args, cfg)
    summary = dict(record, result=result)
    _dump(Path(args.out) / "run.json", summary)
    return EXIT_OK


def main(argv=None):
    try:
        return run(argv)
    except NumericError as exc:
        print(f"carnet: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CarnetError, ValueError, FileNotFoundError) as exc:
        print(f"carnet: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USER
    except Exception as exc:  # noqa: BLE001 - last-resort guard, reported with a code
        print(f"carnet: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

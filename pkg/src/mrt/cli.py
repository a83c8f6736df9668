"""``mrt`` command-line entry point.

Exit codes: 0 ok, 2 config error, 3 input error, 4 numeric abort. On failure
a JSON error object is printed to stderr and written to ``error.json`` under
``--out``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .canvas import DesignError, compose, from_straight_u8, load_bundle, save_bundle, visible_crop
from .config import RESOLVED_NAME, ConfigError, RunConfig, load_config
from .costmodel import BENCH_PARAMS, bench_efficiency, write_rows
from .distill import distill
from .evaluate import evaluate_i2l, evaluate_predictions
from .packing import TaskSpec, assemble_layer_prompt, layer_latent, restyle_prompt
from .sampler import run_task
from .synth import Layout, derive_layout, global_caption, load_dataset, restyle, write_dataset
from .train import NumericError, load_checkpoint, save_checkpoint, train

log = logging.getLogger("mrt")

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3, 4
CKPT_NAME = "model.ckpt"


class InputError(ValueError):
    pass


def _configure_threads() -> int:
    raw = os.environ.get("MRT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MRT_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("MRT_THREADS must be >= 1")
    torch.set_num_threads(n)
    return n


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    try:
        if getattr(args, "guidance", None) is not None:
            cfg = dataclasses.replace(cfg, sample=dataclasses.replace(cfg.sample,
                                                                     guidance=args.guidance))
        if args.steps is not None:
            steps = args.steps
            if args.command == "train":
                cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, steps=steps))
            elif args.command == "distill":
                cfg = dataclasses.replace(cfg, distill=dataclasses.replace(
                    cfg.distill, iterations=steps))
            else:
                cfg = dataclasses.replace(cfg, sample=dataclasses.replace(cfg.sample, steps=steps))
        if getattr(args, "count", None) is not None:
            cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, count=args.count))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _invocation(args) -> dict:
    """Arguments that determine the artifacts; ``--out`` is excluded."""
    skip = {"out", "config", "func"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _write_resolved(cfg: RunConfig, args, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = cfg.to_dict()
    doc["invocation"] = _invocation(args)
    (out / RESOLVED_NAME).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _need(path: str | None, what: str) -> Path:
    if path is None:
        raise InputError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} not found: {p}")
    return p


def _load_ckpt(path):
    p = _need(path, "--ckpt")
    try:
        return load_checkpoint(p)
    except (ValueError, OSError, KeyError) as exc:
        raise InputError(f"cannot load checkpoint {p}: {exc}") from exc


def _load_data(path):
    p = _need(path, "--data")
    try:
        ds = load_dataset(p)
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot load dataset {p}: {exc}") from exc
    if not ds:
        raise InputError(f"dataset {p} is empty")
    return ds


# -- commands -----------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig, out: Path) -> dict:
    write_dataset(cfg.data.seed, cfg.data.count, out, cfg.data.params)
    return {"designs": cfg.data.count}


def cmd_train(args, cfg: RunConfig, out: Path) -> dict:
    data = _load_data(args.data)
    resume = _load_ckpt(args.resume) if args.resume else None
    model_cfg = resume.model_config if resume else cfg.model
    ckpt = train(model_cfg, cfg.train, data, resume=resume, loss_log=out / "losses.csv")
    save_checkpoint(ckpt, out / CKPT_NAME)
    return {"step": ckpt.step, "final_loss": ckpt.losses[-1] if ckpt.losses else None}


def _targets(args, k: int) -> frozenset[int]:
    if not args.targets:
        raise InputError("--targets is required for layer-to-layer editing")
    try:
        t = frozenset(int(x) for x in args.targets.split(","))
    except ValueError:
        raise InputError(f"bad --targets {args.targets!r}") from None
    if not t or min(t) < 1 or max(t) > k:
        raise InputError(f"--targets must lie in 1..{k}")
    return t


def _read_layout(args, design) -> Layout:
    if args.layout:
        try:
            return Layout.from_json(json.loads(_need(args.layout, "--layout").read_text()))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"bad layout file: {exc}") from exc
    if design is not None:
        return derive_layout(design)
    raise InputError("--layout or --design is required")


def cmd_sample(args, cfg: RunConfig, out: Path) -> dict:
    ckpt = _load_ckpt(args.ckpt)
    model = ckpt.build_model()
    model.eval()
    task_kind = args.task
    design = load_bundle(_need(args.design, "--design")) if args.design else None
    s = cfg.train.patch
    if task_kind == "t2l":
        layout = _read_layout(args, design)
        caption = args.caption if args.caption is not None else (
            global_caption(design, "short") if design else "")
        task, inputs = TaskSpec("t2l", caption=caption), {"layout": layout}
    elif task_kind == "i2l":
        layout = _read_layout(args, design)
        if args.image:
            with Image.open(_need(args.image, "--image")) as im:
                image = from_straight_u8(np.asarray(im.convert("RGBA")))
        elif design is not None:
            image = visible_crop(compose(design), design.bg_rect)
        else:
            raise InputError("--image or --design is required for image-to-layers")
        caption = args.caption if args.caption is not None else (
            global_caption(design, "short") if design else "")
        task, inputs = TaskSpec("i2l", caption=caption), {"image": image, "layout": layout}
    else:
        if design is None:
            raise InputError("--design is required for layer-to-layer editing")
        targets = _targets(args, design.num_foreground)
        if task_kind == "l2l-add":
            caption = args.caption if args.caption is not None else assemble_layer_prompt(
                [l.caption for l in design.foregrounds], targets)
            task = TaskSpec(task_kind, targets, caption=caption)
        else:
            rng = np.random.default_rng(cfg.sample.seed)
            conds = {i: layer_latent(restyle(design.layers[i].image, rng),
                                     design.layers[i].rect, s).grid for i in sorted(targets)}
            caption = args.caption if args.caption is not None else restyle_prompt()
            task = TaskSpec(task_kind, targets, conds=conds, caption=caption)
        inputs = {"design": design}
    result, report = run_task(model, task, inputs, cfg.sample, s)
    save_bundle(result, out / "design")
    _write_json(out / "report.json", report)
    return report


def cmd_distill(args, cfg: RunConfig, out: Path) -> dict:
    teacher = _load_ckpt(args.ckpt)
    data = _load_data(args.data)
    rows = []
    student, _ = distill(teacher, data, cfg.distill, callback=lambda i, c, g: rows.append((i, c, g)))
    save_checkpoint(student, out / CKPT_NAME)
    with (out / "losses.csv").open("w") as fh:
        fh.write("iteration,critic_loss,student_grad_rms\n")
        for i, c, g in rows:
            fh.write(f"{i},{c!r},{g!r}\n")
    return {"iterations": cfg.distill.iterations, "student_steps": cfg.distill.student_steps}


def cmd_eval(args, cfg: RunConfig, out: Path) -> dict:
    truths = _load_data(args.data)
    if args.pred:
        preds = _load_data(args.pred)
        if len(preds) != len(truths):
            raise InputError(f"{len(preds)} predictions for {len(truths)} designs")
        report = evaluate_predictions(preds, truths)
    else:
        model = _load_ckpt(args.ckpt).build_model()
        model.eval()
        report = evaluate_i2l(model, truths, cfg.sample, s=cfg.train.patch)
    report.write_json(out / "metrics.json")
    report.write_csv(out / "metrics.csv")
    return {k: v for k, v in report.to_dict().items() if k != "per_design"}


def _layer_range(text: str) -> list[int]:
    try:
        if ".." in text:
            lo, hi = (int(x) for x in text.split(".."))
            return list(range(lo, hi + 1))
        return [int(x) for x in text.split(",")]
    except ValueError:
        raise InputError(f"bad --layers {text!r}; use LO..HI or a comma list") from None


def cmd_bench(args, cfg: RunConfig, out: Path) -> dict:
    if args.area_dist != "synth":
        raise InputError(f"unsupported --area-dist {args.area_dist!r}")
    layers = _layer_range(args.layers)
    params = dataclasses.replace(BENCH_PARAMS, bg_size=(args.bg_size, args.bg_size),
                                 patch=cfg.train.patch)
    rows = bench_efficiency(layers, samples=args.samples, seed=cfg.data.seed,
                            s=cfg.train.patch, params=params)
    path = Path(args.report) if args.report else out / "report.csv"
    write_rows(rows, path)
    return {"rows": len(rows), "report": path.name}


# -- argument parsing ---------------------------------------------------------

def _common(p: argparse.ArgumentParser, steps_help: str | None = None) -> None:
    p.add_argument("--config", help="JSON or YAML run config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override every seed in the config")
    p.add_argument("--steps", type=int, help=steps_help or argparse.SUPPRESS)


def _sample_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ckpt", help="checkpoint file")
    p.add_argument("--layout", help="layout JSON (rects and z order)")
    p.add_argument("--design", help="design bundle directory")
    p.add_argument("--image", help="visible composite PNG for image-to-layers")
    p.add_argument("--targets", help="comma-separated 1-based foreground indices")
    p.add_argument("--caption", help="override the prompt")
    p.add_argument("--guidance", type=float, help="classifier-free guidance scale")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mrt", description="Layered design generation toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic layered-design dataset")
    _common(p)
    p.add_argument("--count", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="flow-matching training")
    _common(p, "training steps")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    tasks = ("t2l", "i2l", "l2l-add", "l2l-restyle")
    p = sub.add_parser("sample", help="run one task with a trained model")
    _common(p, "Euler steps")
    p.add_argument("--task", choices=tasks, required=True)
    _sample_args(p)
    p.set_defaults(func=cmd_sample)
    for name, task, choices in (("sample-t2l", "t2l", ("t2l",)),
                                ("decompose-i2l", "i2l", ("i2l",)),
                                ("edit-l2l", "l2l-add", ("l2l-add", "l2l-restyle"))):
        p = sub.add_parser(name, help=f"shorthand for sample --task {task}")
        _common(p, "Euler steps")
        p.add_argument("--task", choices=choices, default=task)
        _sample_args(p)
        p.set_defaults(func=cmd_sample)

    p = sub.add_parser("distill", help="distribution-matching distillation")
    _common(p, "distillation iterations")
    p.add_argument("--ckpt", help="teacher checkpoint")
    p.add_argument("--data", help="dataset directory")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="image-to-layers metrics binned by layer count")
    _common(p, "Euler steps")
    p.add_argument("--data", help="ground-truth dataset directory")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--ckpt", help="model checkpoint")
    g.add_argument("--pred", help="dataset directory of predictions")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench-efficiency", help="analytic token/FLOP/memory comparison")
    _common(p)
    p.add_argument("--layers", default="1..32", help="LO..HI or comma list")
    p.add_argument("--area-dist", default="synth")
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--bg-size", type=int, default=BENCH_PARAMS.bg_size[0],
                   help="visible-region side in pixels for the synthetic layouts")
    p.add_argument("--report", help="report path (.csv or .json); default OUT/report.csv")
    p.set_defaults(func=cmd_bench)
    return ap


def _fail(code: int, exc: BaseException, out: Path | None) -> int:
    doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            _write_json(out / "error.json", doc)
        except OSError:
            pass
    return code


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("MRT_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        _configure_threads()
        cfg = _resolve(args)
        _write_resolved(cfg, args, out)
        summary = args.func(args, cfg, out)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc, out)
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, exc, out)
    except (InputError, DesignError, FileNotFoundError, ValueError, KeyError) as exc:
        return _fail(EXIT_INPUT, exc, out)
    print(json.dumps({"command": args.command, **(summary or {})}, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

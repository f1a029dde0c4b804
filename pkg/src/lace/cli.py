"""Command-line entry point.

Every failure prints one JSON line to stderr of the form
``{"error": <name>, "code": <int>, "message": <text>}`` and exits with the
matching code from :data:`EXIT_CODES`.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from typing import Any, Sequence

import numpy as np

EXIT_CODES = {
    "ok": 0,
    "internal": 1,
    "usage": 2,
    "missing_file": 3,
    "invalid_input": 4,
    "checkpoint": 5,
    "config": 6,
    "training": 7,
    "io": 8,
}

log = logging.getLogger("lace")


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind
        self.code = EXIT_CODES[kind]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


# Per-command defaults; flags override --config values, which override these.
DEFAULTS: dict[str, dict[str, Any]] = {
    "synth": {"cols": "1,2", "rows": "2,5", "count": 1000, "seed": 0, "num_classes": 5, "max_len": 25},
    "ingest": {"num_classes": None, "max_len": 25, "permissive": False, "out": None},
    "train": {
        "num_classes": None,
        "max_len": 25,
        "batch_size": 32,
        "learning_rate": 1e-3,
        "warmup_steps": 200,
        "phase2_learning_rate": 3e-5,
        "phase2_warmup_steps": 0,
        "mse_weighting": "min-snr",
        "positional": "on",
        "phase1_steps": 3000,
        "phase2_steps": 2000,
        "seed": 0,
        "alignment": "global",
        "overlap": "on",
        "beta_w": None,
        "constraint_orientation": None,
        "complete_frac_max": 0.2,
        "embed_dim": 64,
        "layers": 2,
        "heads": 4,
        "ffn_dim": 256,
        "checkpoint_every": 0,
        "log_every": 100,
        "out_dir": "run",
    },
    "sample": {"task": "uncond", "cond": None, "count": 100, "steps": 100, "eta": 0.0, "seed": 0, "complete_frac_max": 0.2},
    "refine": {"tau_from_omega": None, "tau": None, "steps": 100, "seed": 0},
    "post": {"delta": 1.0 / 64, "overlap": "off", "max_iters": 200},
    "eval": {"ref": None, "out": None},
    "render": {"out_dir": "svg", "limit": None},
}


def _add_config(p):
    p.add_argument("--config", help="JSON file of option values (flags take precedence)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lace", description="Constrained layout diffusion.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="write a synthetic grid corpus")
    p.add_argument("--cols", help="allowed column counts, e.g. '2' or '1,2'")
    p.add_argument("--rows", help="row range 'lo,hi'")
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--out", required=True)
    _add_config(p)

    p = sub.add_parser("ingest", help="validate and summarize a JSONL corpus")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--permissive", action="store_true", default=None, help="skip the on-canvas extent check")
    p.add_argument("--out", help="write the cleaned corpus here")
    _add_config(p)

    p = sub.add_parser("train", help="two-phase training")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out-dir")
    p.add_argument("--num-classes", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--warmup-steps", type=int)
    p.add_argument("--phase2-learning-rate", type=float)
    p.add_argument("--phase2-warmup-steps", type=int)
    p.add_argument("--mse-weighting", choices=("literal", "min-snr"))
    p.add_argument("--positional", choices=("on", "off"))
    p.add_argument("--phase1-steps", type=int)
    p.add_argument("--phase2-steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--alignment", choices=("local", "global"))
    p.add_argument("--overlap", choices=("on", "off"))
    p.add_argument("--beta-w", type=float)
    p.add_argument("--constraint-orientation", choices=("small-t-active", "paper-literal"))
    p.add_argument("--complete-frac-max", type=float)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--ffn-dim", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--log-every", type=int)
    _add_config(p)

    p = sub.add_parser("sample", help="generate layouts")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", choices=("uncond", "c", "csz", "complete"))
    p.add_argument("--cond", help="JSONL condition layouts (conditional tasks)")
    p.add_argument("--count", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--complete-frac-max", type=float)
    p.add_argument("--out", required=True)
    _add_config(p)

    p = sub.add_parser("refine", help="denoise noisy layouts from an intermediate step")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau-from-omega", type=float, help="start where the constraint weight equals this value")
    p.add_argument("--tau", type=int, help="explicit start step")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    _add_config(p)

    p = sub.add_parser("post", help="alignment post-processing")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--delta", type=float)
    p.add_argument("--overlap", choices=("on", "off"))
    p.add_argument("--max-iters", type=int)
    _add_config(p)

    p = sub.add_parser("eval", help="metrics as JSON")
    p.add_argument("--gen", required=True)
    p.add_argument("--ref")
    p.add_argument("--out")
    _add_config(p)

    p = sub.add_parser("render", help="one SVG per layout")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out-dir")
    p.add_argument("--limit", type=int)
    _add_config(p)
    return parser


def resolve_options(command: str, args: argparse.Namespace) -> dict[str, Any]:
    """Merge defaults, the ``--config`` file and explicit flags, in that order."""
    opts = dict(DEFAULTS.get(command, {}))
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        _require(cfg_path)
        try:
            with open(cfg_path, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CliError("config", f"{cfg_path}: invalid JSON ({exc.msg})") from None
        if not isinstance(cfg, dict):
            raise CliError("config", f"{cfg_path}: expected a JSON object")
        known = set(opts) | {k for k in vars(args) if k not in ("command", "config", "verbose")}
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise CliError("config", f"unknown option(s) for {command}: {', '.join(unknown)}")
        opts.update(cfg)
    for k, v in vars(args).items():
        if k in ("command", "config", "verbose"):
            continue
        if v is not None or k not in opts:
            opts[k] = v
    return opts


def _require(path: str) -> None:
    if not path or not os.path.exists(path):
        raise CliError("missing_file", f"file not found: {path}")


def _read_layouts(path: str, num_classes: int | None = None, max_len: int = 25, permissive: bool = True):
    from .corpus import EmptyCorpusError, infer_num_classes, ingest

    _require(path)
    try:
        n = num_classes if num_classes is not None else infer_num_classes(path)
        return ingest(path, n, max_len, eps_geom=None if permissive else 0.0)
    except EmptyCorpusError as exc:
        raise CliError("invalid_input", str(exc)) from None


def _load_model(path: str):
    from .denoiser import CheckpointError, load_checkpoint
    from .diffusion import NoiseSchedule, make_linear_schedule

    _require(path)
    try:
        model, extra = load_checkpoint(path)
    except CheckpointError as exc:
        raise CliError("checkpoint", str(exc)) from None
    schedule = NoiseSchedule.from_json(extra["schedule"]) if "schedule" in extra else make_linear_schedule()
    return model, schedule, extra


def _write(layouts, path: str) -> None:
    from .corpus import write_corpus

    write_corpus(layouts, path)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def cmd_synth(o):
    from .synthetic import DEFAULT_LABEL_WEIGHTS, InfeasibleSpecError, SyntheticGridSpec, generate_synthetic

    try:
        cols = tuple(int(c) for c in str(o["cols"]).split(","))
        rows = tuple(int(r) for r in str(o["rows"]).split(","))
        if len(rows) == 1:
            rows = (rows[0], rows[0])
        spec = SyntheticGridSpec(
            columns=cols, rows=rows, num_classes=o["num_classes"], max_len=o["max_len"], seed=o["seed"],
            label_weights=DEFAULT_LABEL_WEIGHTS if o["num_classes"] == len(DEFAULT_LABEL_WEIGHTS) else None,
        )
        layouts = generate_synthetic(spec, o["count"])
    except (ValueError, InfeasibleSpecError) as exc:
        raise CliError("config", str(exc)) from None
    _write(layouts, o["out"])
    _emit({"written": len(layouts), "out": o["out"]})


def cmd_ingest(o):
    layouts, stats = _read_layouts(o["input"], o["num_classes"], o["max_len"], bool(o["permissive"]))
    if o["out"]:
        _write(layouts, o["out"])
    _emit(stats.to_json())


def cmd_train(o):
    from . import constraints as C
    from .denoiser import DenoiserConfig
    from .training import TrainConfig, TrainingError, train

    layouts, stats = _read_layouts(o["corpus"], o["num_classes"], o["max_len"])
    kw = {}
    if o["beta_w"] is not None:
        kw["beta_w"] = o["beta_w"]
    if o["constraint_orientation"] is not None:
        kw["orientation"] = o["constraint_orientation"]
    for name in ("phase2_learning_rate", "phase2_warmup_steps"):
        if o[name] is not None:
            kw[name] = o[name]
    try:
        cfg = TrainConfig(
            batch_size=o["batch_size"],
            learning_rate=o["learning_rate"],
            warmup_steps=o["warmup_steps"],
            phase1_steps=o["phase1_steps"],
            phase2_steps=o["phase2_steps"],
            seed=o["seed"],
            alignment_kind=o["alignment"],
            use_overlap=o["overlap"] == "on",
            complete_frac_max=o["complete_frac_max"],
            mse_weighting=o["mse_weighting"],
            checkpoint_every=o["checkpoint_every"],
            log_every=o["log_every"],
            **kw,
        )
        mcfg = DenoiserConfig(
            layouts[0].num_classes,
            o["max_len"],
            o["embed_dim"],
            o["layers"],
            o["heads"],
            o["ffn_dim"],
            positional=o["positional"] == "on",
        )
    except (ValueError, TypeError) as exc:
        raise CliError("config", str(exc)) from None
    try:
        res = train(layouts, cfg, mcfg, out_dir=o["out_dir"], canvas=layouts[0].canvas)
    except TrainingError as exc:
        raise CliError("training", str(exc)) from None
    last = res.history[-1] if res.history else {}
    _emit(
        {
            "checkpoint": os.path.join(o["out_dir"], "final.ckpt"),
            "phase1_checkpoint": os.path.join(o["out_dir"], "phase1.ckpt"),
            "layouts": stats.count,
            "steps": len(res.history),
            "tau": C.solve_tau(cfg.weight_schedule(), 0.1),
            "final_loss": last.get("total"),
        }
    )


def cmd_sample(o):
    from .generate import generate

    model, schedule, extra = _load_model(o["ckpt"])
    canvas = tuple(extra.get("canvas", (1, 1)))
    conds = None
    if o["task"] != "uncond":
        if not o["cond"]:
            raise CliError("config", f"--task {o['task']} needs --cond")
        conds, _ = _read_layouts(o["cond"], model.config.num_classes, model.config.seq_len)
    elif o["cond"]:
        raise CliError("config", "--cond is only valid for conditional tasks")
    try:
        out = generate(
            model, schedule, o["task"], count=o["count"], conditions=conds, num_steps=o["steps"],
            seed=o["seed"], eta=o["eta"], canvas=canvas, complete_frac_max=o["complete_frac_max"],
        )
    except ValueError as exc:
        raise CliError("config", str(exc)) from None
    _write(out, o["out"])
    _emit({"written": len(out), "out": o["out"], "task": o["task"]})


def cmd_refine(o):
    from .constraints import DEFAULT_BETA_W, SMALL_T_ACTIVE, ConstraintWeightSchedule, solve_tau
    from .generate import refine

    if o["tau"] is not None and o["tau_from_omega"] is not None:
        raise CliError("config", "--tau and --tau-from-omega are mutually exclusive")
    model, schedule, extra = _load_model(o["ckpt"])
    layouts, _ = _read_layouts(o["input"], model.config.num_classes, model.config.seq_len)
    ws = ConstraintWeightSchedule(schedule.T, extra.get("beta_w", DEFAULT_BETA_W), extra.get("orientation", SMALL_T_ACTIVE))
    tau = o["tau"]
    if tau is None:
        omega = 0.1 if o["tau_from_omega"] is None else o["tau_from_omega"]
        try:
            tau = solve_tau(ws, omega)
        except ValueError as exc:
            raise CliError("config", str(exc)) from None
    if not 1 <= tau <= schedule.T:
        raise CliError("config", f"tau must lie in [1, {schedule.T}], got {tau}")
    out = refine(model, schedule, layouts, ws, num_steps=o["steps"], seed=o["seed"], tau=tau)
    _write(out, o["out"])
    _emit({"written": len(out), "out": o["out"], "tau": int(tau)})


def cmd_post(o):
    from .postprocess import PostConfig, postprocess

    layouts, _ = _read_layouts(o["input"])
    try:
        cfg = PostConfig(delta=o["delta"], max_iters=o["max_iters"], use_overlap=o["overlap"] == "on")
    except ValueError as exc:
        raise CliError("config", str(exc)) from None
    results = [postprocess(lay, cfg) for lay in layouts]
    _write([r.layout for r in results], o["out"])
    _emit(
        {
            "written": len(results),
            "out": o["out"],
            "loss_before": float(np.sum([r.loss_before for r in results])),
            "loss_after": float(np.sum([r.loss_after for r in results])),
            "aborted": sum(r.aborted for r in results),
        }
    )


def cmd_eval(o):
    from .metrics import evaluate

    gen, _ = _read_layouts(o["gen"])
    ref = None
    if o["ref"]:
        ref, _ = _read_layouts(o["ref"], gen[0].num_classes, gen[0].max_len)
    report = asdict(evaluate(gen, ref))
    if o["out"]:
        from .denoiser import atomic_write_bytes

        atomic_write_bytes(o["out"], (json.dumps(report, sort_keys=True) + "\n").encode())
    _emit(report)


def cmd_render(o):
    from .denoiser import atomic_write_bytes
    from .render import render_svg

    layouts, _ = _read_layouts(o["input"])
    if o["limit"] is not None:
        layouts = layouts[: o["limit"]]
    os.makedirs(o["out_dir"], exist_ok=True)
    for i, lay in enumerate(layouts):
        atomic_write_bytes(os.path.join(o["out_dir"], f"layout_{i:05d}.svg"), render_svg(lay).encode())
    _emit({"written": len(layouts), "out_dir": o["out_dir"]})


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "sample": cmd_sample,
    "refine": cmd_refine,
    "post": cmd_post,
    "eval": cmd_eval,
    "render": cmd_render,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
        )
        opts = resolve_options(args.command, args)
        COMMANDS[args.command](opts)
        return 0
    except CliError as exc:
        err = {"error": exc.kind, "code": exc.code, "message": str(exc)}
    except FileNotFoundError as exc:
        err = {"error": "missing_file", "code": EXIT_CODES["missing_file"], "message": str(exc)}
    except OSError as exc:
        err = {"error": "io", "code": EXIT_CODES["io"], "message": str(exc)}
    except Exception as exc:  # noqa: BLE001
        err = {"error": "internal", "code": EXIT_CODES["internal"], "message": f"{type(exc).__name__}: {exc}"}
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return err["code"]


if __name__ == "__main__":
    sys.exit(main())

"""``dsplat`` command line: generate | fit | render | classify | eval | prune-report.

Every command prints a tab-delimited report on stdout (``key<TAB>value``
lines, or a header plus rows for tables) and, where useful, writes figures
next to its other outputs.  Exit codes: 0 ok, 1 usage/config, 2 I/O,
3 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DsplatError, FormatError, NumericalAbort
from .render import psnr, read_ppm, ssim, write_ppm

log = logging.getLogger("dsplat")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NAN = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _setup_logging():
    level = os.environ.get("DSPLAT_LOG", "WARNING").upper()
    if level.isdigit():
        level = int(level)
    elif level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr,
                        force=True)


def _emit(pairs):
    for k, v in pairs:
        if isinstance(v, float):
            v = f"{v:.6g}"
        print(f"{k}\t{v}")


# ---------------------------------------------------------------------------
# configuration resolution
# ---------------------------------------------------------------------------

def resolve_config(args):
    """defaults(preset) <- config file <- flags."""
    from .training import TrainConfig, preset

    cfg = preset(getattr(args, "preset", None) or "mini")
    if args.config:
        text = Path(args.config).read_text()
        cfg = TrainConfig.from_text(text, base=cfg)
    over = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip()] = v.strip()
    if args.seed is not None:
        over["seed"] = str(args.seed)
    if args.threads is not None:
        over["threads"] = str(args.threads)
    for key in ("steps", "data"):
        val = getattr(args, key, None)
        if val is not None:
            over[key] = str(val)
    if getattr(args, "no_separation", False):
        over["separation"] = "false"
    cfg = cfg.with_overrides(over)
    return cfg.validate()


def _echo_config(cfg, out):
    text = cfg.to_text()
    log.info("resolved config:\n%s", text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config_resolved.txt").write_text(text)


def _load_dataset(cfg):
    from .scenegen import Dataset, generate
    from .scenegen import preset as scene_preset

    if cfg.data:
        return Dataset.load(cfg.data)
    return Dataset.from_generated(generate(scene_preset(cfg.scene_preset, seed=cfg.seed)))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args):
    from .scenegen import generate, render_dataset
    from .scenegen import preset as scene_preset
    from .training import TrainConfig

    cfg = resolve_config(args) if args.config else None
    name = args.preset or (cfg.scene_preset if cfg else "mini")
    seed = args.seed if args.seed is not None else (cfg.seed if cfg else 0)
    out = Path(args.out or "data")
    spec = scene_preset(name, seed=seed)
    gen = generate(spec)
    manifest = render_dataset(gen, out)
    echo = (cfg or TrainConfig()).with_overrides({"scene_preset": name, "seed": str(seed)})
    _echo_config(echo, None)
    _emit([("command", "generate"), ("preset", name), ("seed", seed), ("out", str(out)),
           ("gaussians", len(gen.scene)), ("dynamic", int(gen.dynamic.sum())),
           ("views", spec.n_views), ("frames", spec.n_frames), ("manifest", str(manifest))])
    return EXIT_OK


def cmd_fit(args):
    from . import plotting
    from .training import fit, load_checkpoint

    cfg = resolve_config(args)
    out = Path(args.out or "run")
    _echo_config(cfg, out)
    dataset = _load_dataset(cfg)
    state = None
    if args.resume:
        state, _ = load_checkpoint(args.resume)
        state.config = cfg
    state, final = fit(cfg, dataset, out, state=state)
    plotting.training_curves(state.history, out / "training_curves.png")
    if state.partition is not None:
        plotting.partition_scatter(state.partition, out / "partition.png", cfg.tau_var, cfg.gamma)
    _emit([("command", "fit"), ("out", str(out)), ("steps", state.step), ("stage", state.stage),
           ("heldout_psnr", final.get("psnr", float("nan"))),
           ("heldout_ssim", final.get("ssim", float("nan"))),
           ("gaussians", len(state.scene)), ("dynamic", state.n_dynamic),
           ("pruned", len(state.prune_log)), ("checkpoint", str(out / "checkpoint.dsckpt"))])
    return EXIT_OK


def _state_and_spec(path):
    from .scenegen import SceneSpec
    from .training import load_checkpoint

    state, meta = load_checkpoint(path)
    spec = SceneSpec.from_lines(state.scene_spec) if state.scene_spec else None
    return state, spec


def cmd_render(args):
    from .scenegen import generate, rig_camera
    from .training import render_at

    if not args.checkpoint:
        raise UsageError("render needs --checkpoint")
    state, spec = _state_and_spec(args.checkpoint)
    if args.threads is not None:
        state.config.threads = args.threads
    if spec is None:
        raise ConfigError("checkpoint carries no camera rig description")
    if not 0.0 <= args.t <= 1.0:
        raise UsageError("--t must lie in [0, 1]")
    views = range(spec.n_views) if args.view is None else [args.view]
    out = Path(args.out or "renders")
    out.mkdir(parents=True, exist_ok=True)
    gen = generate(spec) if args.oracle else None
    rows = []
    for v in views:
        cam = rig_camera(spec, v, args.t)
        img = render_at(state, cam, args.t).image
        path = out / f"view{v}_t{args.t:.3f}.ppm"
        write_ppm(path, img)
        row = [("view", v), ("file", str(path)), ("width", cam.width), ("height", cam.height)]
        if gen is not None:
            ref = np.round(np.clip(gen.render(v, args.t).image, 0, 1) * 255) / 255
            row += [("psnr_vs_oracle", psnr(img, ref)), ("ssim_vs_oracle", ssim(img, ref))]
        rows.append(row)
    print("\t".join(k for k, _ in rows[0]))
    for row in rows:
        print("\t".join(f"{v:.6g}" if isinstance(v, float) else str(v) for _, v in row))
    return EXIT_OK


def cmd_classify(args):
    from . import plotting
    from .scenegen import Dataset, generate
    from .scenegen import preset as scene_preset
    from .separation import classify
    from .training import classify_state

    cfg = resolve_config(args)
    out = Path(args.out or "classify")
    _echo_config(cfg, out)
    if args.checkpoint:
        state, _ = _state_and_spec(args.checkpoint)
        state.config = cfg
        dataset = _load_dataset(cfg)
        part = classify_state(state, dataset)
        truth = None
    else:
        # ground-truth trajectories of the oracle scene
        gen = generate(scene_preset(cfg.scene_preset, seed=cfg.seed))
        dataset = Dataset.from_generated(gen)
        traj, proj, flows = oracle_separation_inputs(gen, dataset)
        part = classify(gen.scene.ids, traj, proj, flows, cfg.tau_var, cfg.epsilon, cfg.gamma)
        truth = gen.dynamic
    part.write(out / "partition.txt")
    plotting.partition_scatter(part, out / "partition.png", cfg.tau_var, cfg.gamma)
    pairs = [("command", "classify"), ("gaussians", len(part.ids)),
             ("dynamic", int(part.dynamic.sum())), ("partition", str(out / "partition.txt"))]
    if truth is not None:
        tp = int(np.sum(part.dynamic & truth))
        pairs += [("precision", tp / max(int(part.dynamic.sum()), 1)),
                  ("recall", tp / max(int(truth.sum()), 1))]
    _emit(pairs)
    return EXIT_OK


def oracle_separation_inputs(gen, dataset, background=(0.0, 0.0, 0.0)):
    """Trajectories, projections and motion flows built from ground truth."""
    from .separation import camera_flow, motion_flow

    offs = gen.offsets()
    traj = offs[:, :, 0:3].transpose(1, 0, 2)
    V, T = dataset.n_views, dataset.n_frames
    proj = np.full((V, T, len(gen.scene), 2), np.nan)
    flows = []
    for v in range(V):
        row = []
        for f in range(T):
            cam = dataset.cameras[v][f]
            uv, z = cam.project_points(gen.scene.means + offs[f][:, 0:3])
            proj[v, f] = np.where((z > 1e-4)[:, None], uv, np.nan)
            if f + 1 < T and dataset.flows[v][f] is not None:
                depth = gen.render(v, dataset.times[f]).depth
                row.append(motion_flow(dataset.flows[v][f],
                                       camera_flow(depth, cam, dataset.cameras[v][f + 1])))
            else:
                row.append(None)
        flows.append(row)
    return traj, proj, flows


def cmd_eval(args):
    from . import plotting

    if not args.pred or not args.gt:
        raise UsageError("eval needs --pred DIR and --gt DIR")
    pred, gt = Path(args.pred), Path(args.gt)
    for d in (pred, gt):
        if not d.is_dir():
            raise FileNotFoundError(f"no such directory: {d}")
    names = sorted(p.relative_to(gt).as_posix() for p in gt.rglob("*.ppm"))
    if not names:
        raise FileNotFoundError(f"no .ppm images under {gt}")
    print("image\tpsnr\tssim")
    ps, ss = [], []
    for name in names:
        a, b = read_ppm(pred / name), read_ppm(gt / name)
        p, s = psnr(a, b), ssim(a, b)
        ps.append(p)
        ss.append(s)
        print(f"{name}\t{p:.6g}\t{s:.6g}")
    print(f"mean\t{np.mean(ps):.6g}\t{np.mean(ss):.6g}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        plotting.eval_bars(names, ps, out / "eval_psnr.png")
    return EXIT_OK


def cmd_prune_report(args):
    from .opacity import write_prune_report
    from .training import importance_table

    if not args.checkpoint:
        raise UsageError("prune-report needs --checkpoint")
    cfg = resolve_config(args)
    state, _ = _state_and_spec(args.checkpoint)
    state.config = cfg
    dataset = _load_dataset(cfg)
    table = importance_table(state, dataset)
    tau = cfg.tau_prune if args.tau is None else args.tau
    removed = [int(i) for i, w in zip(table.ids, table.w) if w < tau]
    out = Path(args.out or "prune")
    out.mkdir(parents=True, exist_ok=True)
    write_prune_report(out / "prune_report.txt", removed, table)
    _emit([("command", "prune-report"), ("tau", tau), ("gaussians", len(table.ids)),
           ("would_remove", len(removed)), ("report", str(out / "prune_report.txt"))])
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value config file")
    common.add_argument("--seed", type=int, help="random seed (overrides config)")
    common.add_argument("--threads", type=int, help="worker threads for rendering")
    common.add_argument("--out", metavar="DIR", help="output directory")

    parser = _Parser(prog="dsplat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic oracle dataset")
    p.add_argument("--preset", help="scene preset (mini, tiny, static)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("fit", parents=[common], help="train on a dataset")
    p.add_argument("--preset", help="training preset (mini, paper-shape, smoke)")
    p.add_argument("--data", help="dataset directory (default: generate the preset scene)")
    p.add_argument("--steps", type=int)
    p.add_argument("--no-separation", action="store_true", help="disable the separation stage")
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("render", parents=[common], help="render novel views/times")
    p.add_argument("--checkpoint", required=False)
    p.add_argument("--t", type=float, default=0.5, help="normalized time in [0, 1]")
    p.add_argument("--view", type=int, help="rig view index (default: all)")
    p.add_argument("--oracle", action="store_true", help="also score against the oracle scene")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("classify", parents=[common], help="run dynamic/static separation")
    p.add_argument("--preset", help="training preset supplying thresholds")
    p.add_argument("--data")
    p.add_argument("--checkpoint", help="use learned trajectories (default: ground truth)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM between image directories")
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("prune-report", parents=[common], help="list Gaussians below tau")
    p.add_argument("--checkpoint")
    p.add_argument("--preset")
    p.add_argument("--data")
    p.add_argument("--tau", type=float)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_prune_report)
    return parser


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError(parser.format_usage().strip())
        return args.func(args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except NumericalAbort as e:
        extra = f" (last checkpoint: {e.checkpoint})" if e.checkpoint else ""
        print(f"dsplat: numerical abort: {e}{extra}", file=sys.stderr)
        return EXIT_NAN
    except (OSError, FormatError) as e:
        print(f"dsplat: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, DsplatError, ValueError) as e:
        print(f"dsplat: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

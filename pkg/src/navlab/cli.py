"""``navlab`` command-line entry point.

Exit codes: 0 success, 1 validation error (bad flags, config or inputs),
2 runtime failure. Logging goes to standard error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from navlab import experiments as ex
from navlab.baselines import train_method
from navlab.checkpoint import load_model
from navlab.config import config_to_text, parse_config
from navlab.errors import NavlabError, ValidationError
from navlab.gridworld import generate_scene, load_scene_dir, save_scene
from navlab.trainer import TrainConfig, World, evaluate_agent, ModelAgent, tasks_for, train

log = logging.getLogger("navlab")

SUBCOMMANDS = ("gen-scenes", "train", "eval", "baseline", "exp", "analyze-embedding", "plot")
BASELINE_METHODS = ("random", "shortest", "q1", "a3c1", "a3c4", "single-branch")


class UsageError(ValidationError):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2; usage problems are exit 1
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def build_parser() -> Parser:
    p = Parser(prog="navlab", description="Target-driven grid-world navigation laboratory.")
    p.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}", parser_class=Parser)

    g = sub.add_parser("gen-scenes", help="generate random scenes as .navscn files")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--width", type=int, default=10)
    g.add_argument("--height", type=int, default=10)
    g.add_argument("--density", type=float, default=0.15, help="obstacle density in [0, 0.4]")
    g.add_argument("--targets", type=int, default=5)
    g.add_argument("--percept-dim", type=int, default=64)
    g.add_argument("--smoothing", type=float, default=0.5)

    t = sub.add_parser("train", help="train the target-driven model")
    t.add_argument("--config", required=True)
    t.add_argument("--scenes", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--freeze-core", action="store_true")
    t.add_argument("--init", metavar="CKPT")

    e = sub.add_parser("eval", help="evaluate a checkpoint on every target of the scenes")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--scenes", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config")
    e.add_argument("--seed", type=int, default=0)

    b = sub.add_parser("baseline", help="train and evaluate one comparison method")
    b.add_argument("--method", required=True, choices=BASELINE_METHODS)
    b.add_argument("--config", required=True)
    b.add_argument("--scenes", required=True)
    b.add_argument("--out", required=True)

    x = sub.add_parser("exp", help="run an experiment")
    x.add_argument("kind", choices=ex.KINDS)
    x.add_argument("--config", required=True)
    x.add_argument("--out", required=True)

    a = sub.add_parser("analyze-embedding", help="embedding geometry of a checkpoint on one scene")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--scenes", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--max-pairs", type=int, default=2000)
    a.add_argument("--seed", type=int, default=0)

    pl = sub.add_parser("plot", help="render CSV outputs as SVG charts")
    pl.add_argument("inputs", nargs="+", help="CSV files or directories searched for known CSVs")
    pl.add_argument("--out", required=True)
    return p


def _configs(path: str | None) -> tuple[TrainConfig, ex.ExperimentConfig, str]:
    if path is None:
        cfg, ecfg = TrainConfig(), ex.ExperimentConfig()
    else:
        cfg, ecfg = parse_config(path, ex.ExperimentConfig)
    text = config_to_text(cfg, ecfg)
    log.info("effective config:\n%s", text.rstrip())
    return cfg, ecfg, text


def _scenes(directory: str):
    if not Path(directory).is_dir():
        raise ValidationError(f"--scenes: no such directory: {directory}")
    return load_scene_dir(directory)


def _finish(manifest: ex.Manifest, out: Path, patterns: Sequence[str]) -> None:
    for pat in patterns:
        for f in sorted(out.rglob(pat)):
            manifest.add_output(f)


def cmd_gen_scenes(args, argv) -> None:
    if args.count < 1:
        raise ValidationError("--count must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    m = ex.Manifest(out, " ".join(argv), seeds=[args.seed])
    for i in range(args.count):
        sc = generate_scene(args.seed + i, args.width, args.height, args.density, args.targets,
                            args.percept_dim, args.smoothing, scene_id=f"scene{args.seed + i:05d}")
        path = out / f"{sc.scene_id}.navscn"
        save_scene(sc, path)
        m.add_output(path)
    log.info("wrote %d scenes to %s", args.count, out)
    m.finish()


def cmd_train(args, argv) -> None:
    cfg, _, text = _configs(args.config)
    scenes = _scenes(args.scenes)
    params = load_model(args.init) if args.init else None
    out = Path(args.out)
    m = ex.Manifest(out, " ".join(argv), text, [cfg.seed])
    m.add_scenes(scenes)
    if args.init:
        m.add_input(f"checkpoint:{args.init}", Path(args.init).read_bytes())
    try:
        res = train(cfg, tasks_for(scenes), params_in=params, freeze_core=args.freeze_core, out_dir=out)
    except BaseException as exc:
        m.finish("failed", str(exc))
        raise
    log.info("trained %d frames, %d episodes", res.frames, len(res.metrics))
    _finish(m, out, ["metrics.csv", "final.ckpt"])
    m.finish()


def cmd_eval(args, argv) -> None:
    _, ecfg, text = _configs(args.config)
    scenes = _scenes(args.scenes)
    params = load_model(args.checkpoint)
    out = Path(args.out)
    m = ex.Manifest(out, " ".join(argv), text, [args.seed])
    m.add_scenes(scenes)
    m.add_input(f"checkpoint:{args.checkpoint}", Path(args.checkpoint).read_bytes())
    tasks = tasks_for(scenes)
    rep = evaluate_agent(ModelAgent(params), tasks, ecfg.eval_episodes, ecfg.eval_cap, ecfg.success_cap,
                         seed=args.seed, world=World.for_tasks(tasks))
    _write_report(out / "eval.csv", rep)
    _summary(rep)
    _finish(m, out, ["eval.csv"])
    m.finish()


def _write_report(path: Path, rep) -> None:
    rows = [(r.task_id, r.mean_length, r.success_rate, r.sp_ratio, r.mean_shortest) for r in rep.per_task]
    rows.append(("ALL", rep.mean_length, rep.success_rate, rep.sp_ratio, rep.mean_shortest))
    ex.write_csv(path, ("task_id", "mean_length", "success_rate", "sp_ratio", "mean_shortest"), rows)


def _summary(rep) -> None:
    log.info("mean length %.2f (shortest %.2f), success %.3f, shortest-path ratio %.2f",
             rep.mean_length, rep.mean_shortest, rep.success_rate, rep.sp_ratio)


def cmd_baseline(args, argv) -> None:
    cfg, ecfg, text = _configs(args.config)
    scenes = _scenes(args.scenes)
    out = Path(args.out)
    m = ex.Manifest(out, " ".join(argv), text, [cfg.seed])
    m.add_scenes(scenes)
    tasks = tasks_for(scenes)
    try:
        run = train_method(args.method, cfg, tasks, out / "train")
        rep = evaluate_agent(run.agent, tasks, ecfg.eval_episodes, ecfg.eval_cap, ecfg.success_cap,
                             seed=cfg.seed, label=args.method, world=World.for_tasks(tasks))
    except BaseException as exc:
        m.finish("failed", str(exc))
        raise
    _write_report(out / "eval.csv", rep)
    _summary(rep)
    _finish(m, out, ["eval.csv", "final.ckpt"])
    m.finish()


def cmd_exp(args, argv) -> None:
    cfg, ecfg, _ = _configs(args.config)
    ecfg.kind = args.kind
    text = config_to_text(cfg, ecfg)
    out = Path(args.out)
    m = ex.Manifest(out, " ".join(argv), text, ecfg.seeds)
    if len(ecfg.seeds) == 1:
        m.data["note"] = "single-seed run"
    progress = lambda msg: log.info("%s: %s", args.kind, msg)  # noqa: E731
    try:
        if args.kind == "baseline-comparison":
            m.add_scenes(ex.make_scenes(ecfg))
            res = ex.run_baseline_comparison(cfg, ecfg, out, progress=progress)
            for r in res.table:
                log.info("%-24s mean length %8.2f  success %.3f", r["label"], r["mean_length"], r["success_rate"])
        elif args.kind == "target-gen":
            m.add_scenes(ex.make_scenes(ecfg, count=1, n_targets=ecfg.gen_targets))
            ex.run_target_generalization(cfg, ecfg, out, progress=progress)
        elif args.kind == "scene-gen":
            n = max(ecfg.pretrain_scene_counts) + ecfg.test_scenes
            m.add_scenes(ex.make_scenes(ecfg, count=n))
            ex.run_scene_generalization(cfg, ecfg, out, progress=progress)
        else:
            m.add_scenes(ex.make_scenes(ecfg, count=1))
            ex.run_embedding(cfg, ecfg, out, progress=progress)
        ex.emit_plots(ex.plottable_csvs(out), out / "plots")
    except BaseException as exc:
        m.finish("failed", str(exc))
        raise
    _finish(m, out, ["*.csv", "final.ckpt", "*.svg"])
    m.finish()


def cmd_analyze_embedding(args, argv) -> None:
    params = load_model(args.checkpoint)
    scenes = _scenes(args.scenes)
    out = Path(args.out)
    m = ex.Manifest(out, " ".join(argv), seeds=[args.seed])
    m.add_scenes(scenes[:1])
    m.add_input(f"checkpoint:{args.checkpoint}", Path(args.checkpoint).read_bytes())
    res = ex.embedding_geometry(params, scenes[0], args.max_pairs, args.seed)
    for p in ex.write_embedding(res, out):
        m.add_output(p)
    log.info("pearson r = %.4f, p = %.3g over %d pairs", res.r, res.p, res.n_pairs)
    m.finish()


def cmd_plot(args, argv) -> None:
    csvs = []
    for item in args.inputs:
        p = Path(item)
        if p.is_dir():
            csvs.extend(ex.plottable_csvs(p))
        elif p.is_file():
            csvs.append(p)
        else:
            raise ValidationError(f"no such file or directory: {item}")
    out = Path(args.out)
    m = ex.Manifest(out, " ".join(argv))
    for c in csvs:
        m.add_input(str(c), c.read_bytes())
    for svg in ex.emit_plots(csvs, out):
        m.add_output(svg)
    log.info("wrote %d plots to %s", len(csvs), out)
    m.finish()


HANDLERS = {
    "gen-scenes": cmd_gen_scenes,
    "train": cmd_train,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "exp": cmd_exp,
    "analyze-embedding": cmd_analyze_embedding,
    "plot": cmd_plot,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        HANDLERS[args.command](args, ["navlab"] + argv)
    except ValidationError as exc:
        log.error("%s", exc)
        return 1
    except (NavlabError, OSError, RuntimeError, ValueError, ArithmeticError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

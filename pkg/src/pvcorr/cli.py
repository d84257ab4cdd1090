"""Command-line entry point: ``pvcorr gen | train | eval | corr-dump``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .config import SEED_ENV, ConfigError, dump, load_model_config, read_config_file, resolve, train_fields
from .correlation import dump_fields
from .metrics import aggregate, evaluate
from .network import ModelParams, SceneGraphs, iterate
from .scenes_io import load_dataset, load_scene, save_dataset, scene_dirs
from .synthetic import gen_dataset
from .training import predict, train_main, train_refine


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"{self.prog}: error: {message}\n")


def sidecar(ckpt):
    return Path(str(ckpt) + ".config.json")


def _env_seed():
    raw = os.environ.get(SEED_ENV, "").strip()
    if not raw:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def cmd_gen(args):
    seed = _env_seed() if args.seed is None else args.seed
    if args.scenes < 1:
        raise CliError("--scenes must be >= 1")
    samples = gen_dataset(args.scenes, args.points, args.motion_scale, args.noise, seed)
    try:
        dirs = save_dataset(args.out, samples)
    except OSError as e:
        raise CliError(f"cannot write {e.filename or args.out}: {e.strerror or e}") from e
    print(json.dumps({"scenes": len(dirs), "out": str(args.out)}))


def _overrides(args):
    return {name: getattr(args, name) for name in train_fields() if getattr(args, name, None) is not None}


def load_params(ckpt, cfg):
    try:
        state = checkpoint.load(ckpt)
    except OSError as e:
        raise CliError(f"cannot read checkpoint {ckpt}: {e.strerror or e}") from e
    params = ModelParams.init(cfg.model_config(), seed=cfg.seed)
    try:
        params.load_state(state)
    except (KeyError, ValueError) as e:
        raise CliError(f"checkpoint {ckpt} does not match the model configuration: {e}") from e
    return params, state


def cmd_train(args):
    file_values = read_config_file(args.config) if args.config else {}
    cfg, paths = resolve(file_values, _overrides(args))
    data = args.data or paths["data"]
    out = args.out or paths["out"]
    frozen = args.frozen or paths["frozen"]
    if not data or not out:
        raise CliError("train needs --data and --out (flag or config file)")
    dataset = load_dataset(data)
    log_path = Path(args.log or paths["log"] or str(out) + ".log.jsonl")
    log_path.write_text("")

    def log(record):
        with log_path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    if args.stage == "main":
        params, _ = train_main(dataset, cfg, callback=log)
        params.save(out, exclude="refine.")
    else:
        if not frozen:
            raise CliError("the refine stage needs --frozen CKPT from a main-stage run")
        if not Path(frozen).is_file():
            raise CliError(f"frozen checkpoint not found: {frozen}")
        params, _ = load_params(frozen, cfg)
        params, _ = train_refine(dataset, params, cfg, callback=log)
        params.save(out)
    dump(cfg, sidecar(out))
    print(json.dumps({"checkpoint": str(out), "log": str(log_path), "stage": args.stage}))


def _eval_config(args):
    path = Path(args.config) if args.config else sidecar(args.ckpt)
    if not path.is_file():
        raise CliError(f"no configuration for {args.ckpt} (expected {path}; pass --config)")
    return load_model_config(path)


def cmd_eval(args):
    if args.iters < 1:
        raise CliError("--iters must be >= 1")
    if args.jobs < 1:
        raise CliError("--jobs must be >= 1")
    dataset = load_dataset(args.data)
    if args.oracle:
        def run(s):
            return evaluate(s.gt_flow, s.gt_flow)
    else:
        cfg = _eval_config(args)
        params, state = load_params(args.ckpt, cfg)
        use_refine = any(n.startswith("refine.") for n in state)

        def run(s):
            return evaluate(predict(s.p1, s.p2, params, cfg, iters=args.iters, use_refine=use_refine), s.gt_flow)
    if args.jobs == 1:
        per_scene = [run(s) for s in dataset]
    else:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            per_scene = list(pool.map(run, dataset))
    metrics = aggregate(per_scene, [len(s.p1) for s in dataset])
    print(json.dumps(metrics.to_dict(), sort_keys=True))


def cmd_corr_dump(args):
    dirs = scene_dirs(args.data)
    if not 0 <= args.scene < len(dirs):
        raise CliError(f"scene index {args.scene} outside 0..{len(dirs) - 1}")
    s = load_scene(dirs[args.scene])
    if not 0 <= args.point < len(s.p1):
        raise CliError(f"point index {args.point} outside 0..{len(s.p1) - 1}")
    if args.iters < 0:
        raise CliError("--iters must be >= 0")
    cfg = _eval_config(args)
    mcfg = cfg.model_config()
    params, _ = load_params(args.ckpt, cfg)
    with ad.no_grad():
        graphs = SceneGraphs.build(s.p1, s.p2, mcfg.graph_k)
        flows, (lookup, _, _) = iterate(s.p1, s.p2, params, max(args.iters, 1), mcfg, graphs, return_state=True)
    flow = flows[args.iters - 1].data if args.iters else np.zeros_like(s.p1)
    q = s.p1 + flow
    record = dump_fields(args.point, q, s.p2, lookup.corr, mcfg.cube, mcfg.k)
    record["scene"] = args.scene
    record["iters"] = args.iters
    text = json.dumps(record, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)


def _add_train_overrides(p):
    g = p.add_argument_group("config overrides (take precedence over --config)")
    for name, f in train_fields().items():
        kind = f.type if isinstance(f.type, str) else f.type.__name__
        conv = {"int": int, "float": float}.get(kind, str)
        g.add_argument("--" + name.replace("_", "-"), dest=name, type=conv, default=None, metavar=kind.upper())


def build_parser():
    parser = _Parser(prog="pvcorr", description="Point-voxel correlation scene flow.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="write synthetic scene pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--points", type=int, default=256)
    p.add_argument("--noise", type=float, default=0.005)
    p.add_argument("--motion-scale", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=None, help=f"defaults to ${SEED_ENV}, then 0")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the main or the refinement stage")
    p.add_argument("--data")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--stage", choices=("main", "refine"), default="main")
    p.add_argument("--frozen", help="main-stage checkpoint (refine stage)")
    p.add_argument("--log", help="JSON-lines log path, default <out>.log.jsonl")
    _add_train_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print aggregate flow metrics as JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--config", help="defaults to <ckpt>.config.json")
    p.add_argument("--iters", type=int, default=32)
    p.add_argument("--oracle", action="store_true", help="score the ground truth against itself")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("corr-dump", help="write the correlation field seen by one source point")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", help="defaults to <ckpt>.config.json")
    p.add_argument("--scene", type=int, required=True)
    p.add_argument("--point", type=int, required=True)
    p.add_argument("--iters", type=int, default=0, help="flow updates before the dump (0 = zero flow)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_corr_dump)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "eval" and not args.oracle and not args.ckpt:
        parser.error("eval needs --ckpt unless --oracle is given")
    try:
        args.func(args)
    except (CliError, ConfigError, ValueError, OSError, checkpoint.CheckpointError) as e:
        msg = " ".join(str(e).split()) or type(e).__name__
        print(f"pvcorr {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

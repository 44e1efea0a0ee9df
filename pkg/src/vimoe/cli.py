"""``vimoe`` command line.  Every command ends with one JSON summary line on stdout.

Exit codes: 0 ok, 1 usage or configuration error, 2 data/format error or
missing file, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError, NumericError, VimoeError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _emit(summary: dict):
    print(json.dumps(summary, sort_keys=True))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _int_list(text: str) -> list:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


# -- data ------------------------------------------------------------------------

def cmd_data_gen(args):
    from .data import (SyntheticConfig, gen_cluster_classification, gen_region_segmentation,
                       save_dataset)
    cfg = SyntheticConfig(image_size=args.image_size, noise=args.noise, split=args.split)
    gen = gen_cluster_classification if args.task == "cls" else gen_region_segmentation
    ds = gen(args.classes, args.count, args.seed, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out, ds)
    _emit({"command": "data gen", "path": str(out), "task": ds.task, "count": len(ds),
           "classes": ds.num_classes, "split": ds.split, "seed": args.seed,
           "fingerprint": ds.fingerprint()})


# -- training --------------------------------------------------------------------

def _load_train_inputs(args):
    from .data import load_dataset
    from .train import parse_config_file
    text = Path(args.config).read_text(encoding="utf-8")
    mcfg, tcfg = parse_config_file(text)
    if args.seed is not None:
        tcfg = tcfg.replace(seed=args.seed)
    train_set = load_dataset(args.data)
    eval_set = load_dataset(args.eval_data) if args.eval_data else train_set
    return mcfg, tcfg, train_set, eval_set


def cmd_train(args):
    from .analysis import RoutingLog, expert_load
    from .model import build
    from .plotting import plot_curves
    from .train import train
    mcfg, tcfg, train_set, eval_set = _load_train_inputs(args)
    out = _out_dir(args)
    model = build(mcfg, seed=tcfg.seed)
    try:
        rec = train(model, train_set, tcfg, eval_set, out_dir=out)
    except NumericError as exc:
        _emit({"command": "train", "status": "diverged", "error": str(exc),
               "run_csv": str(out / "run.csv")})
        raise
    plot_curves(rec, out / "curves.png")
    logs = sorted(out.glob("routing_e*.vimr"))
    summary = {"command": "train", "status": rec.status, "config_hash": mcfg.config_hash(),
               "seed": tcfg.seed, "epochs": tcfg.epochs, "final_metric": rec.final_metric,
               "final_task_loss": rec.task_loss[-1] if rec.task_loss else None,
               "final_aux_loss": rec.aux_loss[-1] if rec.aux_loss else None,
               "checkpoint": str(out / "model.vimo"), "run_csv": str(out / "run.csv"),
               "curves": str(out / "curves.png"), "routing_logs": [str(p) for p in logs]}
    if logs:
        last = RoutingLog.load(logs[-1])
        summary["expert_load"] = {str(l): expert_load(last, l).tolist() for l in last.layers}
    _emit(summary)


def cmd_eval(args):
    from .data import load_dataset
    from .model import load_model
    from .train import evaluate
    model = load_model(args.model)
    ds = load_dataset(args.data)
    out = _out_dir(args)
    ev = evaluate(model, ds)
    summary = {"command": "eval", "metric": ev.metric, "loss": ev.loss,
               "aux_loss": ev.aux_loss(), "config_hash": model.config.config_hash()}
    if ev.routing_log is not None:
        path = out / "routing.vimr"
        ev.routing_log.save(path)
        summary["routing_log"] = str(path)
        summary["expert_load"] = {str(model.config.paper_layer(b)): f.tolist()
                                  for b, f in ev.expert_loads().items()}
    _emit(summary)


def cmd_scan(args):
    from .plotting import plot_scan
    from .train import layer_scan, write_scan_csv
    mcfg, tcfg, train_set, eval_set = _load_train_inputs(args)
    out = _out_dir(args)
    seeds = args.seeds if args.seeds else [tcfg.seed]
    cells = layer_scan(mcfg, tcfg, train_set, eval_set, args.L, args.N,
                       [bool(s) for s in args.shared], seeds)
    write_scan_csv(out / "scan.csv", cells)
    plot_scan(cells, out / "scan.png")
    _emit({"command": "scan", "cells": len(cells),
           "failed": sum(c.status != "ok" for c in cells),
           "csv": str(out / "scan.csv"), "figure": str(out / "scan.png")})


# -- counting --------------------------------------------------------------------

def _count_config(args):
    from .model import ModelConfig
    overrides = {"moe_last_L": args.last_l, "shared_expert": args.shared, "top_k": args.topk}
    if args.experts is not None:
        overrides["num_experts"] = args.experts
    return ModelConfig.preset(args.preset, **overrides)


def cmd_count(args):
    from .counting import CSV_FIELDS, count_flops, count_params
    cfg = _count_config(args)
    include_head = not args.no_head
    if args.what == "params":
        rep = count_params(cfg, include_head)
    else:
        rep = count_flops(cfg, args.resolution, include_head)
    summary = {"command": f"count {args.what}", "preset": args.preset,
               "config_hash": cfg.config_hash(), "N": cfg.num_experts if cfg.moe_last_L else 0,
               "L": cfg.moe_last_L, "shared": cfg.shared_expert, "k": cfg.top_k,
               "include_head": include_head, "total": rep.total_params,
               "activated": rep.activated_params,
               "total_M": round(rep.total_params / 1e6, 1),
               "activated_M": round(rep.activated_params / 1e6, 1)}
    if rep.flops is not None:
        summary.update(flops=rep.flops, flops_G=round(rep.flops / 1e9, 2),
                       resolution=rep.resolution)
    if args.out:
        path = Path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_FIELDS)
            w.writerow(rep.csv_row(cfg))
        summary["csv"] = str(path)
    _emit(summary)


def cmd_degree(args):
    from .counting import routing_degree
    d = routing_degree(args.experts, args.topk, args.last_l)
    _emit({"command": "degree", "N": args.experts, "k": args.topk, "L": args.last_l,
           "degree": d})


# -- analysis --------------------------------------------------------------------

def _log_layers(log, layer):
    return log.layers if layer is None else [layer]


def cmd_analyze(args):
    from . import analysis as an
    from .plotting import plot_heatmap, plot_load
    log = an.RoutingLog.load(args.log)
    out = _out_dir(args)
    summary = {"command": f"analyze {args.what}", "log": str(args.log)}
    if args.what == "heatmap":
        files, scores = [], {}
        for l in _log_layers(log, args.layer):
            h = an.build_heatmap(log, l)
            h.to_csv(out / f"heatmap_l{l}.csv")
            plot_heatmap(h, out / f"heatmap_l{l}.png")
            files += [str(out / f"heatmap_l{l}.csv"), str(out / f"heatmap_l{l}.png")]
            scores[str(l)] = an.specialization_score(h)
        summary.update(specialization=scores, files=files)
    elif args.what == "load":
        loads = {l: an.expert_load(log, l) for l in _log_layers(log, args.layer)}
        with open(out / "load.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer"] + [f"e{e}" for e in range(log.num_experts)])
            for l, v in loads.items():
                w.writerow([l] + [repr(float(x)) for x in v])
        plot_load(loads, out / "load.png")
        summary.update(load={str(l): v.tolist() for l, v in loads.items()},
                       files=[str(out / "load.csv"), str(out / "load.png")])
    elif args.what == "recommend":
        rec = an.layer_reports(log, args.threshold)
        with open(out / "recommend.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "score", "keep", "degree", "load"])
            for r in rec.reports:
                w.writerow([r.layer, repr(r.score), int(r.keep), r.degree,
                            ";".join(repr(float(x)) for x in r.load)])
        summary.update(keep=rec.keep, moe_last_L=rec.moe_last_L, degree=rec.degree,
                       low_degree=rec.low_degree, note=rec.note,
                       scores={str(r.layer): r.score for r in rec.reports},
                       files=[str(out / "recommend.csv")])
    elif args.what == "degree":
        layers = None if args.layer is None else list(range(1, args.layer + 1))
        emp = an.empirical_degree(log, layers)
        used = log.layers if layers is None else layers
        summary.update(empirical_degree=emp, layers=used,
                       routing_degree=an.routing_degree(log.num_experts, log.top_k, len(used)))
    elif args.what == "allocmap":
        files = []
        for l in _log_layers(log, args.layer):
            grid = an.allocation_map(log, args.image, l)
            path = out / f"alloc_i{args.image}_l{l}.ppm"
            path.write_bytes(an.to_ppm(grid, args.scale))
            files.append(str(path))
        summary.update(image=args.image, files=files)
    _emit(summary)


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vimoe", description="Sparse MoE vision transformer lab.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    data = sub.add_parser("data", help="dataset generation")
    dsub = data.add_subparsers(dest="action", required=True, parser_class=_Parser)
    gen = dsub.add_parser("gen", help="generate a synthetic VIMD dataset")
    gen.add_argument("--task", choices=("cls", "seg"), required=True)
    gen.add_argument("--classes", type=int, required=True)
    gen.add_argument("--count", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--split", choices=("train", "test", "val"), default="train")
    gen.add_argument("--noise", type=float, default=0.3)
    gen.add_argument("--image-size", type=int, default=28)
    gen.add_argument("--out", required=True, help="output .vimd path")
    gen.set_defaults(func=cmd_data_gen)

    def train_inputs(sp):
        sp.add_argument("--config", required=True, help="key=value config file")
        sp.add_argument("--data", required=True, help="training VIMD file")
        sp.add_argument("--eval-data", help="held-out VIMD file (default: training data)")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", required=True, help="output directory")

    tr = sub.add_parser("train", help="train one model")
    train_inputs(tr)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint and log routing")
    ev.add_argument("--model", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", default=".")
    ev.set_defaults(func=cmd_eval)

    sc = sub.add_parser("scan", help="grid of runs over MoE layer counts")
    train_inputs(sc)
    sc.add_argument("--L", type=_int_list, default=[0, 1, 2, 4, 6])
    sc.add_argument("--N", type=_int_list, default=[4])
    sc.add_argument("--shared", type=_int_list, default=[0, 1])
    sc.add_argument("--seeds", type=_int_list)
    sc.set_defaults(func=cmd_scan)

    cnt = sub.add_parser("count", help="parameter or FLOPs count")
    cnt.add_argument("what", choices=("params", "flops"))
    cnt.add_argument("--preset", default="vit-s-14")
    cnt.add_argument("--experts", type=int)
    cnt.add_argument("--last-l", type=int, default=0)
    cnt.add_argument("--shared", action="store_true")
    cnt.add_argument("--topk", type=int, default=1)
    cnt.add_argument("--resolution", type=int)
    cnt.add_argument("--no-head", action="store_true")
    cnt.add_argument("--out", help="optional CSV row output path")
    cnt.set_defaults(func=cmd_count)

    deg = sub.add_parser("degree", help="routing degree C(N,k)^L")
    deg.add_argument("--experts", type=int, required=True)
    deg.add_argument("--topk", type=int, default=1)
    deg.add_argument("--last-l", type=int, required=True)
    deg.set_defaults(func=cmd_degree)

    an = sub.add_parser("analyze", help="routing log forensics")
    an.add_argument("what", choices=("heatmap", "load", "recommend", "degree", "allocmap"))
    an.add_argument("--log", required=True, help="VIMR routing log")
    an.add_argument("--layer", type=int, help="layer index, 1 = deepest (default: all)")
    an.add_argument("--out", default=".")
    an.add_argument("--threshold", type=float, default=0.5)
    an.add_argument("--image", type=int, default=0, help="item id for allocmap")
    an.add_argument("--scale", type=int, default=1, help="pixels per patch for allocmap")
    an.set_defaults(func=cmd_analyze)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:      # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"vimoe: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"vimoe: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"vimoe: missing file: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FormatError, ContractError, VimoeError) as exc:
        print(f"vimoe: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

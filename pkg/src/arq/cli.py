"""Command-line driver.

Subcommands: gen-data, train, certify, search, evaluate, report.  Every run
writes its artifacts plus a fully resolved config snapshot under one output
directory and is byte-reproducible given the same config and seed.  Exit
codes: 0 success, 1 usage error, 2 config error, 3 runtime error, each with a
one-line diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, certify, data, io, nn, quantize, search
from .agent import save_agent
from .cost import policy_cost
from .quantize import uniform_policy


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="arq", description=__doc__, add_help=True)
    parser.add_argument("--version", action="store_true",
                        help="print artifact and file-format versions")
    sub = parser.add_subparsers(dest="command")

    def common(p, model=False, data_dir=False, policy=False):
        p.add_argument("--config", default=None, help="INI config file")
        p.add_argument("--out", required=True, help="run output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override every seed in the config")
        p.add_argument("--threads", type=int, default=os.cpu_count(),
                       help="certification worker threads")
        if model:
            p.add_argument("--model", required=True, help="ARQNET model file")
        if data_dir:
            p.add_argument("--data", required=True,
                           help="directory holding the gen-data splits")
        if policy:
            p.add_argument("--policy", required=True, help="policy text file")

    common(sub.add_parser("gen-data", help="write a synthetic dataset"))
    common(sub.add_parser("train", help="train a Gaussian-augmented classifier"),
           data_dir=True)
    common(sub.add_parser("certify", help="full randomized-smoothing certification"),
           model=True, data_dir=True)
    common(sub.add_parser("search", help="run the quantization policy search"),
           model=True, data_dir=True)
    common(sub.add_parser("evaluate", help="fully evaluate one policy"),
           model=True, data_dir=True, policy=True)
    rep = sub.add_parser("report", help="certified-accuracy-vs-radius tables")
    rep.add_argument("--records", nargs="+", required=True,
                     help="certification records CSV files")
    rep.add_argument("--out", required=True)
    return parser


def _load_splits(data_dir):
    root = Path(data_dir)
    splits = {}
    for name in ("train", "cert", "eval"):
        xs, ys, num_classes = data.load_dataset(root / f"{name}.arqdata")
        splits[name] = (xs, ys)
        splits["num_classes"] = num_classes
    return splits


def _build_network(cfg: io.RunConfig, num_classes: int):
    t = cfg["train"]
    d = cfg["data"]
    if t["arch"] == "tiny":
        return nn.tiny_convnet(in_channels=d["channels"], image_size=d["image_size"],
                               num_classes=num_classes,
                               conv_channels=io.int_tuple(t["conv_channels"]),
                               seed=t["seed"])
    if t["arch"] == "mlp":
        dim = d["channels"] * d["image_size"] ** 2
        return nn.mlp(dim, hidden=io.int_tuple(t["hidden"]),
                      num_classes=num_classes, seed=t["seed"])
    raise io.ConfigError(f"unknown arch {t['arch']!r} (tiny or mlp)")


def _resolve_budget(cfg: io.RunConfig, net) -> int:
    s = cfg["search"]
    if s["c0"] > 0:
        return s["c0"]
    ref = uniform_policy(net, s["budget_bits"], s["bit_min"], s["bit_max"])
    return policy_cost(net, ref).total_bops


def _cmd_gen_data(args, cfg: io.RunConfig) -> int:
    d = cfg["data"]
    out = io.make_run_dir(args.out)
    xs, ys = data.gen_blobs(num_classes=d["classes"], image_size=d["image_size"],
                            channels=d["channels"], per_class=d["per_class"],
                            margin=d["margin"], noise=d["noise"], seed=d["seed"])
    fractions = (d["train_fraction"], d["cert_fraction"],
                 1.0 - d["train_fraction"] - d["cert_fraction"])
    splits = data.split_dataset(xs, ys, fractions, seed=d["seed"])
    for name, (sx, sy) in zip(("train", "cert", "eval"), splits):
        data.save_dataset(out / f"{name}.arqdata", sx, sy, d["classes"])
    cfg.dump(out / "config.ini")
    print(f"wrote {len(xs)} samples into {out}")
    return 0


def _cmd_train(args, cfg: io.RunConfig) -> int:
    out = io.make_run_dir(args.out)
    splits = _load_splits(args.data)
    xs, ys = splits["train"]
    net = _build_network(cfg, splits["num_classes"])
    net, losses = nn.train_gaussian(net, xs, ys, cfg.train_config())
    io.save_model(net, out / "model.arqnet")
    lines = ["epoch,loss"] + [f"{i + 1},{loss!r}" for i, loss in enumerate(losses)]
    (out / "train_log.csv").write_text("\n".join(lines) + "\n")
    cfg.dump(out / "config.ini")
    print(f"final training loss {losses[-1]:.4f}; model at {out / 'model.arqnet'}")
    return 0


def _cmd_certify(args, cfg: io.RunConfig) -> int:
    out = io.make_run_dir(args.out)
    c = cfg["certify"]
    splits = _load_splits(args.data)
    xs, ys = splits["cert"]
    net = io.load_model(args.model)
    report, cache = certify.certify_dataset(
        search.make_classifier(net), xs, ys, c["sigma"], c["n0"], c["alpha"],
        c["seed"], net.num_classes,
        n_sel=c["n_sel"] or None, trace_n=c["trace_n"], threads=args.threads)
    (out / "records.csv").write_text(certify.records_to_csv(report.records))
    certify.save_cache(cache, out / "cache.arqcache")
    cfg.dump(out / "config.ini")
    print(f"ACR {report.acr:.6f}, clean accuracy {report.clean_accuracy:.4f} "
          f"over {len(report.records)} inputs")
    return 0


def _cmd_search(args, cfg: io.RunConfig) -> int:
    out = io.make_run_dir(args.out)
    splits = _load_splits(args.data)
    net = io.load_model(args.model)
    scfg = cfg.search_config(threads=args.threads)
    scfg.c0 = _resolve_budget(cfg, net)
    scfg.agent = cfg.agent_config(seed=search._derived_seed(scfg.seed, 0xA9E7))
    cert_x, cert_y = splits["cert"]
    pool_x, pool_y = splits["train"]
    result = search.run_search(scfg, net, cert_x, cert_y, pool_x, pool_y)
    (out / "history.csv").write_text(search.history_to_csv(result.history))
    if result.policy_optimal is not None:
        quantize.save_policy(result.policy_optimal, out / "best_policy.txt")
        io.save_model(result.best_model.base, out / "best_model.arqnet")
    if result.agent is not None:
        save_agent(result.agent, out / "agent.arqddpg")
    cfg.dump(out / "config.ini")
    best = "none" if result.best_reward is None else f"{result.best_reward:.6f}"
    print(f"original ACR {result.acr_orig:.6f}; best reward {best} "
          f"over {len(result.history)} episodes")
    return 0


def _cmd_evaluate(args, cfg: io.RunConfig) -> int:
    out = io.make_run_dir(args.out)
    splits = _load_splits(args.data)
    net = io.load_model(args.model)
    policy = quantize.load_policy(args.policy)
    scfg = cfg.search_config(threads=args.threads)
    scfg.c0 = _resolve_budget(cfg, net)
    cert_x, cert_y = splits["cert"]
    pool_x, pool_y = splits["train"]
    report, cost = search.evaluate_policy(net, policy, cert_x, cert_y,
                                          pool_x, pool_y, scfg)
    (out / "records.csv").write_text(certify.records_to_csv(report.records))
    (out / "cost.csv").write_text(cost.to_csv())
    cfg.dump(out / "config.ini")
    print(f"policy ACR {report.acr:.6f}, clean accuracy {report.clean_accuracy:.4f}, "
          f"BitOPs {cost.total_bops}")
    return 0


def _cmd_report(args) -> int:
    out = io.make_run_dir(args.out)
    lines = ["source,radius,certified_accuracy"]
    for path in args.records:
        records = certify.records_from_csv(Path(path).read_text())
        stem = Path(path).stem
        for r in certify.RADIUS_GRID:
            lines.append(f"{stem},{r!r},{certify.certified_accuracy(records, r)!r}")
    (out / "report.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {out / 'report.csv'}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    if args.version:
        formats = " ".join(f"{k}v{v}" for k, v in io.FORMAT_VERSIONS.items())
        print(f"arq {__version__} ({formats})")
        return 0
    if args.command is None:
        print("usage error: no subcommand given (see --help)", file=sys.stderr)
        return 1
    try:
        if args.command == "report":
            return _cmd_report(args)
        cfg = io.RunConfig.load(args.config, seed_override=args.seed)
        handler = {
            "gen-data": _cmd_gen_data,
            "train": _cmd_train,
            "certify": _cmd_certify,
            "search": _cmd_search,
            "evaluate": _cmd_evaluate,
        }[args.command]
        return handler(args, cfg)
    except io.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - single CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

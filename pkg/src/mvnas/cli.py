"""Command-line front end for the whole pipeline.

Subcommands: synth (render the synthetic dataset to disk), search (run the
alternating optimization and write the derived genotype), derive (re-derive
a genotype from a search checkpoint), cost (params/MACs for a genotype),
retrain (train the discrete network from scratch), eval (metrics for a
trained model), export (genotype as JSON or DOT), and seeds (repeat the
full pipeline across seeds and report the spread).

Exit codes: 0 success, 1 validation or configuration problem, 2 I/O
problem.
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .cost import cost_model
from .data import SynthConfig, export_directory, load_directory, synth_generate
from .errors import MvnasError
from .evaluate import RetrainConfig, evaluate, load_model, retrain, save_model
from .genotype import derive_genotype, from_json, to_dot, to_json
from .loss_balance import rescale_for_retrain
from .search import SearchConfig, load_checkpoint, run_search, write_log_csv
from .supernet import SupernetConfig

__all__ = ["main"]


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; the contract here is usage + exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def _load_config_file(path):
    if path is None:
        return {}
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise MvnasError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise MvnasError(f"config file {path} must hold a JSON object")
    unknown = sorted(set(doc) - {"synth", "search", "retrain", "net"})
    if unknown:
        raise MvnasError(
            f"unknown config sections in {path}: {', '.join(unknown)} "
            f"(expected synth/search/retrain/net)"
        )
    return doc


def _build(cls, section, **overrides):
    """Dataclass from a config-file section plus non-None flag overrides."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(section) - names)
    if unknown:
        raise MvnasError(f"unknown {cls.__name__} fields in config: {', '.join(unknown)}")
    merged = dict(section)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    for key in ("alpha_betas", "loss_weights"):
        if isinstance(merged.get(key), list):
            merged[key] = tuple(merged[key])
    return cls(**merged)


def _net_config_for(dataset, section):
    merged = {
        "n_views": dataset.n_views,
        "num_classes": len(dataset.class_names),
        "input_resolution": dataset.resolution,
        **section,
    }
    return _build(SupernetConfig, merged)


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_synth(args, config):
    synth = _build(SynthConfig, config.get("synth", {}), seed=args.seed)
    train, test = synth_generate(synth)
    out = _out_dir(args)
    export_directory(train, out / "train")
    export_directory(test, out / "test")
    print(f"wrote {len(train)} train and {len(test)} test shapes under {out}")
    return 0


def _search_pipeline(args, config, dataset, seed, checkpoint_path=None):
    search_cfg = _build(
        SearchConfig, config.get("search", {}),
        seed=seed, epochs=args.epochs, batch_size=getattr(args, "batch_size", None),
        warmup_epochs=getattr(args, "warmup", None),
    )
    net_cfg = _net_config_for(dataset, config.get("net", {}))
    result = run_search(search_cfg, dataset, net_config=net_cfg,
                        checkpoint_path=checkpoint_path)
    return search_cfg, result


def _cmd_search(args, config):
    dataset = load_directory(args.data)
    out = _out_dir(args)
    _, result = _search_pipeline(args, config, dataset, args.seed,
                                 checkpoint_path=out / "checkpoint.npz")
    write_log_csv(result.log, out / "search_log.csv")
    genotype = derive_genotype(result.final, result.state.net.config)
    (out / "genotype.json").write_text(to_json(genotype))
    if result.log:
        w = result.log[-1].loss_weights
        print(f"final loss weights: ({w[0]:.3f}, {w[1]:.3f}, {w[2]:.3f}), "
              f"alpha entropy {result.log[-1].alpha_entropy:.3f}")
    print(f"wrote {out / 'genotype.json'} and {out / 'search_log.csv'}")
    return 0


def _cmd_derive(args, config):
    state, _ = load_checkpoint(args.checkpoint)
    genotype = derive_genotype(state.arch, state.net.config)
    out = _out_dir(args)
    (out / "genotype.json").write_text(to_json(genotype))
    print(f"wrote {out / 'genotype.json'} (from epoch {state.epoch} checkpoint)")
    return 0


def _cmd_cost(args, config):
    genotype = from_json(Path(args.genotype).read_text())
    overrides = {}
    if args.channels is not None:
        overrides = {"init_channels": args.channels}
    base = SupernetConfig(**{**genotype.net_config.to_dict(), **overrides})
    report = cost_model(genotype, config=base, resolution=args.resolution,
                        n_views=args.views)
    print(report.format_table())
    if args.out is not None:
        out = _out_dir(args)
        (out / "cost.json").write_text(report.to_json())
        print(f"wrote {out / 'cost.json'}")
    return 0


def _retrain_pipeline(args, config, genotype, dataset, seed):
    section = dict(config.get("retrain", {}))
    if "loss_weights" not in section:
        section["loss_weights"] = rescale_for_retrain(genotype.loss_weights)
    retrain_cfg = _build(
        RetrainConfig, section,
        seed=seed, epochs=args.epochs, init_channels=getattr(args, "channels", None),
    )
    net, log = retrain(genotype, dataset, retrain_cfg)
    return retrain_cfg, net, log


def _cmd_retrain(args, config):
    genotype = from_json(Path(args.genotype).read_text())
    dataset = load_directory(args.data)
    out = _out_dir(args)
    retrain_cfg, net, log = _retrain_pipeline(args, config, genotype, dataset, args.seed)
    save_model(out / "model.npz", net, genotype, retrain_cfg.seed)
    with open(out / "retrain_log.csv", "w") as f:
        f.write("epoch,L1,L2,L3,total\n")
        for row in log:
            f.write(f"{row.epoch},"
                    + ",".join(f"{v:.6f}" for v in row.losses)
                    + f",{row.total:.6f}\n")
    if log:
        print(f"train loss {log[0].total:.4f} -> {log[-1].total:.4f} "
              f"over {len(log)} epochs")
    print(f"wrote {out / 'model.npz'} and {out / 'retrain_log.csv'}")
    return 0


def _cmd_eval(args, config):
    net, genotype_json, seed = load_model(args.model)
    dataset = load_directory(args.data)
    report = evaluate(net, dataset, genotype_json=genotype_json, seed=seed)
    print(report.format_table())
    if args.out is not None:
        out = _out_dir(args)
        (out / "metrics.json").write_text(report.to_json())
        print(f"wrote {out / 'metrics.json'}")
    return 0


def _cmd_export(args, config):
    genotype = from_json(Path(args.genotype).read_text())
    text = to_json(genotype) if args.format == "json" else to_dot(genotype)
    if args.out is not None:
        out = _out_dir(args)
        path = out / f"genotype.{args.format}"
        path.write_text(text)
        print(f"wrote {path}")
    else:
        print(text, end="")
    return 0


def _cmd_seeds(args, config):
    if args.data is not None:
        if args.test_data is None:
            raise MvnasError("--test-data is required when --data is given")
        train = load_directory(args.data)
        test = load_directory(args.test_data)
    else:
        synth = _build(SynthConfig, config.get("synth", {}), seed=args.seed)
        train, test = synth_generate(synth)

    base = 0 if args.seed is None else args.seed
    rows = []
    for k in range(args.n):
        seed = base + k
        _, result = _search_pipeline(args, config, train, seed)
        genotype = derive_genotype(result.final, result.state.net.config)
        _, net, _ = _retrain_pipeline(args, config, genotype, train, seed)
        report = evaluate(net, test, genotype_json=to_json(genotype), seed=seed)
        rows.append((seed, report))
        print(f"seed {seed}: accuracy {report.overall_accuracy:.4f}, "
              f"per-class {report.per_class_accuracy:.4f}, "
              f"mAP {report.mAP:.4f}, AUC {report.auc:.4f}")
    acc = [r.overall_accuracy for _, r in rows]
    maps = [r.mAP for _, r in rows]
    print(f"accuracy: mean {np.mean(acc):.4f}, spread {max(acc) - min(acc):.4f} "
          f"(min {min(acc):.4f}, max {max(acc):.4f})")
    print(f"mAP: mean {np.mean(maps):.4f}, spread {max(maps) - min(maps):.4f}")
    if args.out is not None:
        out = _out_dir(args)
        doc = [
            {"seed": s, **json.loads(r.to_json())}
            for s, r in rows
        ]
        (out / "seeds.json").write_text(json.dumps(doc, indent=2))
        print(f"wrote {out / 'seeds.json'}")
    return 0


def _add_common(sub, out_required=True):
    sub.add_argument("--seed", type=int, default=None, help="RNG seed")
    sub.add_argument("--config", default=None, help="JSON config file")
    sub.add_argument("--out", default=None, required=out_required, help="output directory")


def build_parser():
    parser = _Parser(prog="mvnas", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = subs.add_parser("synth", help="render the synthetic dataset to a directory")
    _add_common(p)

    p = subs.add_parser("search", help="run the architecture search")
    p.add_argument("--data", required=True, help="training data directory")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--warmup", type=int, default=None)
    _add_common(p)

    p = subs.add_parser("derive", help="derive a genotype from a search checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_common(p)

    p = subs.add_parser("cost", help="params and MACs for a genotype")
    p.add_argument("--genotype", required=True)
    p.add_argument("--views", type=int, default=None)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--channels", type=int, default=None)
    _add_common(p, out_required=False)

    p = subs.add_parser("retrain", help="train the discrete network from scratch")
    p.add_argument("--genotype", required=True)
    p.add_argument("--data", required=True, help="training data directory")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--channels", type=int, default=None)
    _add_common(p)

    p = subs.add_parser("eval", help="metrics for a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="test data directory")
    _add_common(p, out_required=False)

    p = subs.add_parser("export", help="genotype as JSON or DOT")
    p.add_argument("--genotype", required=True)
    p.add_argument("--format", choices=("json", "dot"), default="json")
    _add_common(p, out_required=False)

    p = subs.add_parser("seeds", help="repeat the pipeline across seeds")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--data", default=None, help="training data directory")
    p.add_argument("--test-data", dest="test_data", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--channels", type=int, default=None)
    _add_common(p, out_required=False)

    return parser


_COMMANDS = {
    "synth": _cmd_synth,
    "search": _cmd_search,
    "derive": _cmd_derive,
    "cost": _cmd_cost,
    "retrain": _cmd_retrain,
    "eval": _cmd_eval,
    "export": _cmd_export,
    "seeds": _cmd_seeds,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config_file(args.config)
        return _COMMANDS[args.command](args, config)
    except MvnasError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

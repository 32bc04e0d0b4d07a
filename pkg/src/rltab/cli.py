"""Command-line entry point: discover, pretrain, train, generate, audit.

Every subcommand reads one JSON or TOML config (``--config``); flags override
individual settings. Artifacts go to ``paths.output_dir`` (or the
``RLTAB_OUTPUT_DIR`` environment variable).

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 training or
generation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__, pipeline
from .checkpoint import FORMAT_VERSION, atomic_write, dumps, load_checkpoint, save_checkpoint
from .config import config_hash, load_config, ppo_config
from .constraints import CriticalPairs, auto_rules
from .data import load_csv, schema_to_json
from .errors import ConfigError, NonFiniteError, RltabError
from .evaluation import audit

log = logging.getLogger("rltab")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAINING = 0, 1, 2, 3

PCRIT_FILE = "pcrit.json"
ASSOCIATION_FILE = "association.csv"
PRETRAIN_CKPT = "pretrain.ckpt.json"
PRETRAIN_LOG = "pretrain_log.jsonl"
TRAIN_CKPT = "checkpoint.json"
TRAIN_LOG = "train_log.jsonl"
SYNTHETIC_FILE = "synthetic.csv"
AUDIT_FILE = "audit.json"
AUDIT_FEATURES_FILE = "audit_features.csv"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


class GenerationIncomplete(RltabError):
    pass


# -- helpers -----------------------------------------------------------------

class Context:
    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.seed = cfg["seed"]
        self.hash = config_hash(cfg)
        self.out = Path(cfg["paths"]["output_dir"])

    def meta(self, **extra) -> dict:
        return {"config_hash": self.hash, "seed": self.seed, "format_version": FORMAT_VERSION, **extra}

    def path(self, name) -> Path:
        return self.out / name

    def write_json(self, name_or_path, doc: dict) -> Path:
        return atomic_write(self._resolve(name_or_path), dumps({"meta": self.meta(), **doc}))

    def write_csv(self, name_or_path, text: str, **extra) -> Path:
        path = atomic_write(self._resolve(name_or_path), text)
        atomic_write(path.with_name(path.name + ".meta.json"), dumps(self.meta(**extra)))
        return path

    def write_jsonl(self, name_or_path, records) -> Path:
        lines = [json.dumps({"meta": self.meta()}, sort_keys=True)]
        lines += [json.dumps(r, sort_keys=True) for r in records]
        return atomic_write(self._resolve(name_or_path), "\n".join(lines) + "\n")

    def _resolve(self, name_or_path) -> Path:
        p = Path(name_or_path)
        return p if p.is_absolute() or p.parent != Path(".") else self.out / p

    def prepared(self) -> pipeline.Prepared:
        paths = self.cfg["paths"]
        data = pipeline.load_input(paths["input"], paths["schema"])
        return pipeline.prepare(data, self.cfg["data"]["holdout_fraction"], self.seed)

    def pcrit(self, required: bool) -> CriticalPairs:
        path = self.path(PCRIT_FILE)
        if not path.exists():
            if required:
                raise FileNotFoundError(f"{path} not found; run the discover subcommand first")
            return None
        with open(path, encoding="utf-8") as fh:
            return CriticalPairs.from_json(json.load(fh))


def _csv_text(ds) -> str:
    import io
    import csv
    from .data import format_value
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ds.names)
    for row in ds.records:
        writer.writerow([format_value(s, v) for s, v in zip(ds.schema, row)])
    return buf.getvalue()


# -- subcommands -------------------------------------------------------------

def cmd_discover(ctx: Context, args) -> int:
    prep = ctx.prepared()
    d = ctx.cfg["discovery"]
    C, pcrit = pipeline.discover_pairs(prep, d["delta_thresh"], d["k"])
    ctx.write_json(PCRIT_FILE, pcrit.to_json(names=C.names))
    ctx.write_csv(ASSOCIATION_FILE, C.to_csv())
    if not len(pcrit):
        log.warning("no feature pair reaches |C| >= %s; the feature-level scorer will be inactive",
                    d["delta_thresh"])
    print(f"{len(pcrit)} critical pair(s) at |C| >= {d['delta_thresh']} (cap {d['k']})")
    for a, b, s in pcrit.pairs:
        print(f"  {C.names[a]} ~ {C.names[b]}: {s:+.4f} ({C.methods[a][b]})")
    return EXIT_OK


def cmd_pretrain(ctx: Context, args) -> int:
    prep = ctx.prepared()
    p = ctx.cfg["policy"]
    result = pipeline.pretrain(prep, ctx.seed, epochs=p["mle_epochs"], lr=p["mle_lr"],
                               batch_size=p["mle_batch_size"], patience=p["patience"],
                               val_fraction=p["val_fraction"], embed_dim=p["embed_dim"],
                               hidden=p["hidden"])
    save_checkpoint(ctx.path(PRETRAIN_CKPT), result.policy,
                    meta=ctx.meta(stage="pretrain", best_epoch=result.best_epoch))
    ctx.write_jsonl(PRETRAIN_LOG, [
        {"epoch": i + 1, "train_loss": loss, "val_perplexity": ppl}
        for i, (loss, ppl) in enumerate(zip(result.train_loss, result.val_perplexity))])
    print(f"pretrained {len(result.train_loss)} epoch(s); best epoch {result.best_epoch}, "
          f"validation perplexity {min(result.val_perplexity):.4f}")
    return EXIT_OK


def cmd_train(ctx: Context, args) -> int:
    from .rl import TrainingAborted
    pcrit = ctx.pcrit(required=True)
    ckpt = ctx.path(PRETRAIN_CKPT)
    if not ckpt.exists():
        raise FileNotFoundError(f"{ckpt} not found; run the pretrain subcommand first")
    policy, _, _ = load_checkpoint(ckpt)
    prep = ctx.prepared()
    config = ppo_config(ctx.cfg)
    d = ctx.cfg["discriminators"]
    records = []

    def on_epoch(epoch, pol, ens, record):
        records.append(record)
        save_checkpoint(ctx.path(TRAIN_CKPT), pol, ens, meta=ctx.meta(stage="train", epoch=epoch))
        ctx.write_jsonl(TRAIN_LOG, records)

    try:
        policy, ens, run_log = pipeline.rl_train(
            policy, prep, pcrit, config, ctx.seed, lam=d["lam"], mu=d["mu"], on_epoch=on_epoch,
            disc_kwargs={"embed_dim": d["embed_dim"], "rnn_hidden": d["rnn_hidden"], "head": tuple(d["head"])})
    except TrainingAborted as exc:
        save_checkpoint(ctx.path(TRAIN_CKPT), exc.last_good,
                        meta=ctx.meta(stage="train", aborted=str(exc), epoch=len(exc.log)))
        ctx.write_jsonl(TRAIN_LOG, exc.log)
        raise
    save_checkpoint(ctx.path(TRAIN_CKPT), policy, ens, meta=ctx.meta(stage="train", epoch=len(run_log)))
    ctx.write_jsonl(TRAIN_LOG, run_log)
    if run_log:
        last = run_log[-1]
        print(f"trained {len(run_log)} epoch(s); final mean R_raw {last['mean_R_raw']:.4f}, "
              f"KL {last['kl']:.4f}, well-formed {last['well_formed']:.3f}")
    else:
        print("trained 0 epochs; checkpoint holds the pretrained policy")
    return EXIT_OK


def cmd_generate(ctx: Context, args) -> int:
    ckpt = Path(args.checkpoint) if args.checkpoint else ctx.path(TRAIN_CKPT)
    if not args.checkpoint and not ckpt.exists():
        ckpt = ctx.path(PRETRAIN_CKPT)
    if not ckpt.exists():
        raise FileNotFoundError(f"no checkpoint at {ckpt}; run pretrain or train first")
    policy, _, _ = load_checkpoint(ckpt)
    count = ctx.cfg["generate"]["count"] if args.count is None else args.count
    if count < 0:
        raise ConfigError("count must be non-negative")
    temperature = ctx.cfg["policy"]["generation_temperature"]
    result = pipeline.generate(policy, count, ctx.seed, temperature)
    summary = result.summary()
    summary["requested"] = count
    out = Path(args.out) if args.out else ctx.path(SYNTHETIC_FILE)
    ctx.write_csv(out, _csv_text(result.data), generation=summary)
    print(f"wrote {len(result.data)} of {count} row(s) to {out}; "
          f"malformed rate {result.malformed_rate:.4f} over {result.attempts} attempt(s)")
    if not result.complete:
        raise GenerationIncomplete(f"retry cap of {pipeline.RETRY_FACTOR}x count reached")
    return EXIT_OK


def cmd_audit(ctx: Context, args) -> int:
    prep = ctx.prepared()
    syn_path = Path(args.synthetic) if args.synthetic else ctx.path(SYNTHETIC_FILE)
    if not syn_path.exists():
        raise FileNotFoundError(f"{syn_path}: synthetic file not found")
    _check_header(syn_path, prep.train.names)
    syn = load_csv(syn_path, schema_to_json(prep.train), require_classes=False)
    paths = ctx.cfg["paths"]
    rules = auto_rules(prep.train, paths["rules"]) if paths["rules"] else None
    pcrit = ctx.pcrit(required=False)
    if pcrit is None:
        d = ctx.cfg["discovery"]
        pcrit = pipeline.discover_pairs(prep, d["delta_thresh"], d["k"])[1]
    e = ctx.cfg["evaluation"]
    report = audit(prep.train, syn, prep.holdout, pcrit=pcrit, rules=rules,
                   baselines=e["baselines"] or None, bins=e["bins"], folds=e["folds"],
                   eps_priv=None if e["eps_priv"] == "auto" else float(e["eps_priv"]),
                   weights=e["faith_weights"], seed=ctx.seed)
    report.meta = ctx.meta(synthetic=str(syn_path))
    out = Path(args.out) if args.out else ctx.path(AUDIT_FILE)
    atomic_write(out if out.is_absolute() else ctx.out / out, report.dumps() + "\n")
    ctx.write_csv(out.with_name(AUDIT_FEATURES_FILE) if args.out else AUDIT_FEATURES_FILE,
                  report.features_csv())
    f = report.faith
    print(f"mean KS {_fmt(report.mean_ks)}  mean JSD {report.mean_jsd:.4f}  "
          f"correlation fidelity {_fmt(report.correlation_fidelity)}")
    print(f"FAITH {f.composite:.4f} (fact {f.fact:.4f}, align {f.align:.4f}, "
          f"integ {f.integ:.4f}, track {f.track:.4f})")
    if report.tstr:
        print(f"TSTR macro-F1 {report.tstr['mean']:.4f}" +
              ("" if report.delta is None else f", delta {report.delta:+.4f}"))
    for note in report.notes:
        print(f"note: {note}")
    return EXIT_OK


def _fmt(v):
    return "n/a" if v is None else f"{v:.4f}"


def _check_header(path: Path, names):
    import csv
    with open(path, newline="", encoding="utf-8") as fh:
        header = [h.strip() for h in next(csv.reader(fh), [])]
    missing = [n for n in names if n not in header]
    extra = [h for h in header if h not in names]
    if missing or extra or header != list(names):
        from .errors import SchemaError
        raise SchemaError(f"synthetic columns differ from the real schema: missing {missing}, "
                          f"unexpected {extra}" + ("" if missing or extra else ", order differs"))


# -- argument parsing --------------------------------------------------------

COMMANDS = {
    "discover": cmd_discover,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "generate": cmd_generate,
    "audit": cmd_audit,
    "evaluate": cmd_audit,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or TOML run configuration")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--output-dir", help="override paths.output_dir")
    common.add_argument("--input", help="override paths.input (CSV)")
    common.add_argument("--delta-thresh", type=float, help="association threshold for critical pairs")
    common.add_argument("--k", type=int, help="maximum number of critical pairs")
    common.add_argument("--alpha", type=float, help="inverse-frequency reward scale")
    common.add_argument("--epochs", type=int, help="number of RL epochs")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging")

    parser = _Parser(prog="rltab", description=__doc__.split("\n\n")[0],
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("discover", parents=[common], help="find critical feature pairs")
    sub.add_parser("pretrain", parents=[common], help="maximum-likelihood pretraining")
    sub.add_parser("train", parents=[common], help="adversarial PPO fine-tuning")
    gen = sub.add_parser("generate", parents=[common], help="sample synthetic rows to CSV")
    gen.add_argument("--count", type=int, help="number of rows (default generate.count)")
    gen.add_argument("--out", help="output CSV (default <output_dir>/synthetic.csv)")
    gen.add_argument("--checkpoint", help="checkpoint to sample from")
    for name in ("audit", "evaluate"):
        p = sub.add_parser(name, parents=[common], help="audit a synthetic CSV against the real data")
        p.add_argument("--synthetic", help="synthetic CSV (default <output_dir>/synthetic.csv)")
        p.add_argument("--out", help="report path (default <output_dir>/audit.json)")
    return parser


def _overrides(args) -> dict:
    out = {}

    def put(section, key, value):
        if value is not None:
            out.setdefault(section, {})[key] = value

    if args.seed is not None:
        out["seed"] = args.seed
    put("paths", "output_dir", str(Path(args.output_dir).resolve()) if args.output_dir else None)
    put("paths", "input", str(Path(args.input).resolve()) if args.input else None)
    put("discovery", "delta_thresh", args.delta_thresh)
    put("discovery", "k", args.k)
    put("ppo", "alpha", args.alpha)
    put("ppo", "epochs", args.epochs)
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        ctx = Context(load_config(args.config, _overrides(args)))
        return COMMANDS[args.command](ctx, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, GenerationIncomplete) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (RltabError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

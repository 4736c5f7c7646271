"""Command-line entry point: ``sista {gen,train,eval,ablate,gradcheck,export-heatmap}``.

Configuration is an INI file with one section per component ([corpus],
[model], [train], [loss], [sta], [paths], [export], [gradcheck]). Values are
resolved as defaults < file < ``--paper-preset`` < other flags, and the
resolved configuration is written to every output directory.

Exit codes: 0 success, 1 usage/config error, 2 numeric or contract failure.
"""

import argparse
import configparser
import dataclasses
import datetime
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from . import autodiff as ad
from .corpus import CorpusSpec, generate_corpus, read_corpus, write_corpus
from .errors import ConfigError, ContractError, NumericError, ParseError, SistaError, UsageError
from .evaluate import ablation_sweep, alignment_eval, evaluate_retrieval, write_table
from .features import SistaModel, cosine_sim, encode
from .instance import (InstanceLossConfig, build_semantic_matrix, sia_aug_loss, sia_loss,
                       sila_loss, siva_loss)
from .sta import StaConfig, alignment_map, export_alignment_map, sta_loss, write_heatmap
from .train import (LOSS_NAMES, LossToggles, TrainConfig, compute_losses, read_checkpoint, train,
                    write_checkpoint, write_metrics)

log = logging.getLogger("sista")

SECTIONS = ("corpus", "model", "train", "loss", "sta", "paths", "export", "gradcheck")
PATH_KEYS = ("corpus", "checkpoint", "out")
GRADCHECK_TOLERANCE = 1e-4


@dataclass
class RunConfig:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: InstanceLossConfig = field(default_factory=InstanceLossConfig)
    sta: StaConfig = field(default_factory=StaConfig)
    dim: int = 16
    hidden_dim: Optional[int] = None
    paths: dict = field(default_factory=dict)
    export_instance: int = 0
    gradcheck_seeds: int = 3
    has_corpus_seed: bool = False


def _cast(kind, key, text):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("on", "true", "yes", "1"):
                return True
            if low in ("off", "false", "no", "0"):
                return False
            raise ValueError
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is Optional[int]:
            return None if text.lower() == "none" else int(text)
        return text
    except ValueError:
        raise ConfigError(f"invalid value {text!r} for key '{key}'") from None


def _apply(obj, section, items):
    types = {f.name: f.type for f in fields(obj)}
    updates = {}
    for key, text in items.items():
        if key not in types or types[key] is LossToggles:
            raise ConfigError(f"unknown key '{key}' in [{section}]")
        updates[key] = _cast(types[key], key, text)
    return dataclasses.replace(obj, **updates)


def load_config(path=None, text=None):
    """Parse an INI config into a :class:`RunConfig` (no preset/flags applied)."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        if path is not None:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        elif text is not None:
            parser.read_string(text)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None

    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
    cfg = RunConfig()
    get = lambda s: dict(parser.items(s)) if parser.has_section(s) else {}

    corpus_items = get("corpus")
    cfg.has_corpus_seed = "seed" in corpus_items
    cfg.corpus = _apply(cfg.corpus, "corpus", corpus_items)

    train_items = get("train")
    toggles = {k: train_items.pop(k) for k in list(train_items) if k in LOSS_NAMES}
    cfg.train = _apply(cfg.train, "train", train_items)
    if toggles:
        cfg.train = dataclasses.replace(cfg.train, toggles=_apply(cfg.train.toggles, "train", toggles))

    for name in ("loss", "sta"):
        items = get(name)
        if "temperature" in items:
            raise ConfigError(f"key 'temperature' belongs in [train], not [{name}]")
        setattr(cfg, name, _apply(getattr(cfg, name), name, items))

    for key, text in get("model").items():
        if key == "dim":
            cfg.dim = _cast(int, key, text)
        elif key == "hidden_dim":
            cfg.hidden_dim = _cast(Optional[int], key, text)
        else:
            raise ConfigError(f"unknown key '{key}' in [model]")
    for key, text in get("paths").items():
        if key not in PATH_KEYS:
            raise ConfigError(f"unknown key '{key}' in [paths]")
        cfg.paths[key] = text.strip()
    for key, text in get("export").items():
        if key != "instance":
            raise ConfigError(f"unknown key '{key}' in [export]")
        cfg.export_instance = _cast(int, key, text)
    for key, text in get("gradcheck").items():
        if key != "seeds":
            raise ConfigError(f"unknown key '{key}' in [gradcheck]")
        cfg.gradcheck_seeds = _cast(int, key, text)
    return cfg


def apply_paper_preset(cfg):
    cfg.train = TrainConfig.paper(seed=cfg.train.seed, toggles=cfg.train.toggles,
                                  soft_labels=cfg.train.soft_labels)
    cfg.loss = dataclasses.replace(cfg.loss, temperature=0.2)
    cfg.sta = dataclasses.replace(cfg.sta, temperature=0.2)
    cfg.dim = 128
    return cfg


def parse_toggle(text):
    name, sep, state = text.partition("=")
    if not sep or name not in LOSS_NAMES or state not in ("on", "off"):
        raise UsageError(f"--toggle expects NAME=on|off with NAME in {LOSS_NAMES}, got {text!r}")
    return name, state == "on"


def resolve(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.paper_preset:
        cfg = apply_paper_preset(cfg)
    if args.seed is not None:
        cfg.corpus = dataclasses.replace(cfg.corpus, seed=args.seed)
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
        cfg.has_corpus_seed = True
    if args.toggle:
        flags = dict(parse_toggle(t) for t in args.toggle)
        cfg.train = dataclasses.replace(cfg.train,
                                        toggles=dataclasses.replace(cfg.train.toggles, **flags))
    if args.out:
        cfg.paths["out"] = args.out
    # all temperatures follow [train] so the dump has a single source of truth
    cfg.loss = dataclasses.replace(cfg.loss, temperature=cfg.train.temperature)
    cfg.sta = dataclasses.replace(cfg.sta, temperature=cfg.train.temperature)
    return cfg


def _fmt(value):
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg, command, timestamp=True):
    """Resolved configuration as INI text."""
    lines = []
    if timestamp:
        lines.append(f"# generated {datetime.datetime.now(datetime.timezone.utc).isoformat()}")
    lines.append(f"# command {command}")

    def section(name, pairs):
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {_fmt(v)}" for k, v in pairs)
        lines.append("")

    section("corpus", dataclasses.asdict(cfg.corpus).items())
    section("model", [("dim", cfg.dim), ("hidden_dim", cfg.hidden_dim)])
    train_pairs = [(f.name, getattr(cfg.train, f.name)) for f in fields(cfg.train) if f.name != "toggles"]
    train_pairs += [(k, getattr(cfg.train.toggles, k)) for k in LOSS_NAMES]
    section("train", train_pairs)
    # loss and sta temperatures always equal [train] temperature, so they are not repeated
    section("loss", [(k, v) for k, v in dataclasses.asdict(cfg.loss).items() if k != "temperature"])
    section("sta", [(k, v) for k, v in dataclasses.asdict(cfg.sta).items() if k != "temperature"])
    section("paths", sorted(cfg.paths.items()))
    section("export", [("instance", cfg.export_instance)])
    section("gradcheck", [("seeds", cfg.gradcheck_seeds)])
    return "\n".join(lines)


def _out_dir(cfg):
    out = cfg.paths.get("out", ".")
    os.makedirs(out, exist_ok=True)
    return out


def _write_resolved(cfg, command, args):
    out = _out_dir(cfg)
    with open(os.path.join(out, "resolved_config.ini"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump_config(cfg, command, timestamp=not args.no_timestamp))
    return out


def _load_corpus(cfg):
    path = cfg.paths.get("corpus")
    if not path:
        raise ConfigError("missing key 'corpus' in [paths]")
    if not os.path.exists(path):
        raise ConfigError(f"corpus file not found: {path}")
    return read_corpus(path)


def _load_model(cfg, args, corpus):
    if getattr(args, "untrained", False):
        return SistaModel.init(corpus[0].image_global.size, cfg.dim, cfg.train.seed, cfg.hidden_dim)
    path = cfg.paths.get("checkpoint")
    if not path:
        raise ConfigError("missing key 'checkpoint' in [paths] (or pass --untrained)")
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint file not found: {path}")
    model, _, _ = read_checkpoint(path)
    return model


def corpus_summary(corpus, threshold=0.9):
    """Planted-structure statistics on raw features."""
    same, above = 0, 0
    reports = np.vstack([r.report_global for r in corpus]) if corpus else np.zeros((0, 1))
    clusters = np.array([r.cluster_id for r in corpus])
    for i in range(len(corpus)):
        for k in range(i + 1, len(corpus)):
            if clusters[i] == clusters[k]:
                same += 1
                above += cosine_sim(reports[i], reports[k]) >= threshold
    hits, n_path = 0, 0
    for r in corpus:
        for l, p in enumerate(r.token_pathology):
            if p >= 0:
                n_path += 1
                hits += r.patch_pathology[int(np.argmax(r.patches @ r.tokens[l]))] == p
    return {
        "instances": len(corpus),
        "clusters": len(set(clusters.tolist())),
        "same_cluster_pairs_above_threshold": above / same if same else 0.0,
        "pathology_recoverability": hits / n_path if n_path else 0.0,
    }


def cmd_gen(cfg, args):
    if not cfg.has_corpus_seed:
        raise ConfigError("missing key 'seed' in [corpus]")
    out = _write_resolved(cfg, "gen", args)
    path = cfg.paths.get("corpus") or os.path.join(out, "corpus.txt")
    corpus = generate_corpus(cfg.corpus)
    write_corpus(corpus, path, cfg.corpus)
    summary = corpus_summary(corpus)
    print(f"wrote {path}")
    for key, value in summary.items():
        print(f"{key}: {value}")
    return 0


def cmd_train(cfg, args):
    corpus = _load_corpus(cfg)
    out = _write_resolved(cfg, "train", args)
    raw_dim = corpus[0].image_global.size
    model = SistaModel.init(raw_dim, cfg.dim, cfg.train.seed, cfg.hidden_dim)
    result = train(corpus, model, cfg.train, cfg.loss, cfg.sta)
    write_checkpoint(os.path.join(out, "checkpoint.txt"), result.model, result.state, result.step)
    write_metrics(result.metrics, os.path.join(out, "metrics.csv"))
    last = [r for r in result.metrics if r.split == "train"][-1]
    print(f"epochs run: {last.epoch}  best epoch: {result.best_epoch}  final train total: {last.total:.6f}")
    return 0


def cmd_eval(cfg, args):
    corpus = _load_corpus(cfg)
    model = _load_model(cfg, args, corpus)
    out = _write_resolved(cfg, "eval", args)
    metrics = evaluate_retrieval(model, corpus).as_dict()
    align = alignment_eval(model, corpus, cfg.sta)
    metrics.update(pathology_hit_rate=align.pathology_hit_rate, chance_hit_rate=align.chance,
                   mean_retained=align.mean_retained)
    with open(os.path.join(out, "eval.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("metric,value\n")
        for key, value in metrics.items():
            fh.write(f"{key},{value!r}\n")
            print(f"{key}: {value:.4f}")
    return 0


def cmd_ablate(cfg, args):
    corpus = _load_corpus(cfg)
    out = _write_resolved(cfg, "ablate", args)
    rows = ablation_sweep(corpus, cfg.train, cfg.dim, cfg.loss, cfg.sta, workers=thread_cap())
    write_table(rows, os.path.join(out, "ablation.csv"))
    for row in rows:
        print(f"{row['row']:<14} cluster_recall@1={row['cluster_recall@1']:.3f} "
              f"hit_rate={row['pathology_hit_rate']:.3f}")
    return 0


def gradcheck_suite(cfg, seeds=None):
    """Finite-difference checks of every loss w.r.t. features and head parameters.

    Returns a list of ``(loss, target, seed, max_rel_error)``.
    """
    seeds = cfg.gradcheck_seeds if seeds is None else seeds
    results = []
    spec = CorpusSpec(num_instances=4, raw_dim=8, num_clusters=2, cluster_spread=0.5,
                      patches_per_image=6, tokens_per_report=4, num_pathology_tokens_per_instance=1,
                      num_pathologies=2, seed=cfg.corpus.seed)
    for seed in range(seeds):
        corpus = generate_corpus(dataclasses.replace(spec, seed=spec.seed + seed))
        model = SistaModel.init(spec.raw_dim, 8, cfg.train.seed + seed)
        batch = encode(model, corpus)
        img, rep = batch.image_global.value, batch.report_global.value
        img_aug, rep_aug = batch.image_global_aug.value, batch.report_global_aug.value
        semantic = build_semantic_matrix(rep, cfg.loss)
        lc, tau, b = cfg.loss, cfg.loss.temperature, len(corpus)
        feature_checks = {
            "sia": lambda x: sia_loss(x[:b], x[b:], semantic, tau, lc),
            "sia_aug": lambda x: sia_aug_loss(x[:b], x[b:], semantic, tau, lc),
            "siva": lambda x: siva_loss(x[:b], x[b:], semantic, tau, lc),
            "sila": lambda x: sila_loss(x[:b], x[b:], semantic, tau, lc),
        }
        inputs = {"sia": (img, rep), "sia_aug": (img_aug, rep_aug), "siva": (img, img_aug),
                  "sila": (rep, rep_aug)}
        for name, fn in feature_checks.items():
            err = ad.grad_check(fn, np.vstack(inputs[name]))
            results.append((name, "features", seed, err))
        pair = batch.pairs[0]
        n_tok = pair.tokens.rows

        def sta_fn(x, pair=pair, n_tok=n_tok):
            p = dataclasses.replace(pair, tokens=x[:n_tok], patches=x[n_tok:])
            return sta_loss([p], cfg.sta)

        results.append(("sta", "features", seed,
                        ad.grad_check(sta_fn, np.vstack([pair.tokens.value, pair.patches.value]))))
        # one parameter per head through the full pipeline
        for name in LOSS_NAMES:
            tcfg = dataclasses.replace(cfg.train, toggles=LossToggles(
                **{k: k == name for k in LOSS_NAMES}))
            for pname in ("image_global.ws", "image_local.w1", "text_global.w2", "text_local.b1"):
                head, key = pname.split(".")
                if name == "sta" and head.endswith("global"):
                    continue
                if name != "sta" and head.endswith("local"):
                    continue

                def param_fn(x, pname=pname, tcfg=tcfg):
                    params = dict(model.named_params())
                    params[pname] = x
                    return compute_losses(model, corpus, tcfg, cfg.loss, cfg.sta, params)[1]

                err = ad.grad_check(param_fn, model.named_params()[pname])
                results.append((name, pname, seed, err))
    return results


def cmd_gradcheck(cfg, args):
    out = _write_resolved(cfg, "gradcheck", args)
    results = gradcheck_suite(cfg)
    worst = max(r[3] for r in results)
    with open(os.path.join(out, "gradcheck.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("loss,target,seed,max_rel_error,pass\n")
        for loss, target, seed, err in results:
            fh.write(f"{loss},{target},{seed},{err!r},{'yes' if err <= GRADCHECK_TOLERANCE else 'no'}\n")
    print(f"{len(results)} checks, worst relative error {worst:.3e}")
    if worst > GRADCHECK_TOLERANCE:
        print("gradient check FAILED", file=sys.stderr)
        return 2
    return 0


def cmd_export_heatmap(cfg, args):
    corpus = _load_corpus(cfg)
    model = _load_model(cfg, args, corpus)
    idx = cfg.export_instance
    if not 0 <= idx < len(corpus):
        raise ConfigError(f"key 'instance' in [export] out of range: {idx}")
    out = _write_resolved(cfg, "export-heatmap", args)
    pair = encode(model, [corpus[idx]]).pairs[0]
    dense = export_alignment_map(alignment_map(pair.tokens.value, pair.patches.value, cfg.sta))
    path = os.path.join(out, f"heatmap_{idx}.txt")
    write_heatmap(dense, path)
    print(f"wrote {path} ({dense.shape[0]} tokens x {dense.shape[1]} patches)")
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "export-heatmap": cmd_export_heatmap,
}


def thread_cap():
    text = os.environ.get("SISTA_THREADS")
    if not text:
        return 1
    try:
        value = int(text)
    except ValueError:
        raise ConfigError(f"SISTA_THREADS must be a positive integer, got {text!r}") from None
    if value < 1:
        raise ConfigError("SISTA_THREADS must be a positive integer")
    return value


def build_parser():
    parser = argparse.ArgumentParser(prog="sista", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", metavar="PATH")
        p.add_argument("--seed", type=int, metavar="N")
        p.add_argument("--paper-preset", action="store_true")
        p.add_argument("--toggle", action="append", metavar="NAME=on|off")
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--no-timestamp", action="store_true")
        if name in ("eval", "export-heatmap"):
            p.add_argument("--untrained", action="store_true",
                           help="use a freshly initialized model instead of a checkpoint")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg, args)
    except (NumericError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, UsageError, ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SistaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

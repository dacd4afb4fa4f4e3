"""Command-line entry point: ``byolab <subcommand> [options]``.

Exit status is 0 on success, 1 for usage errors and 2 for runtime errors.
Log verbosity comes from the BYOLAB_LOG_LEVEL environment variable.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import __version__
from .audio_io import load_manifest, read_wav
from .config import ExperimentConfig
from .features import FeatureConfig, extract_features, feature_names, read_features_csv, write_features_csv
from .frontend import NormStats
from .probe import probe_table
from .report import build_report
from .rsa import RsaDataset, inter_model_similarity, rsa_report, save_similarity_csv
from .synth import (SynthSpec, band_noise_spec, mixed_all_spec, mixed_noise_spec, synth_dataset,
                    tone_am_spec, tone_chirp_spec)
from .trainer import EmbeddingTable, embed, fit_stats_from_manifest, pretrain

log = logging.getLogger("byolab")

PRESETS = {"bandnoise": band_noise_spec, "tonechirp": tone_chirp_spec, "toneam": tone_am_spec,
           "mixednoise": mixed_noise_spec, "mixedall": mixed_all_spec}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p):
    # accepted both before and after the subcommand
    p.add_argument("--config", default=argparse.SUPPRESS, help="experiment config JSON")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global seed")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="byolab", description="BYOL-A pretraining, probing and RSA on a desk budget.")
    parser.add_argument("--version", action="version", version=f"byolab {__version__}")
    _common(parser)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate a labelled synthetic corpus")
    _common(p)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--spec", help="SynthSpec JSON file")
    g.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--clips-per-class", type=int)

    p = sub.add_parser("stats", help="fit log-mel normalization statistics on train clips")
    _common(p)
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--stats", help="NormStats JSON from the stats subcommand")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--width", type=int, help="encoder width W (embedding dim is 2W)")

    p = sub.add_parser("embed", help="extract frozen embeddings")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--window", type=float, help="window length in seconds")
    p.add_argument("--hop", type=float, help="window hop in seconds")
    p.add_argument("--output", help="embedding file (default OUT/embeddings.bin)")

    p = sub.add_parser("features", help="compute acoustic descriptors")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--include-pitch", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--output", help="CSV file (default OUT/features.csv)")

    p = sub.add_parser("probe", help="linear probe on stored embeddings")
    _common(p)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--dataset", help="dataset name in the config (epochs preset, metric)")
    p.add_argument("--binary", action="store_true")
    p.add_argument("--positive-label")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("rsa", help="representational similarity analysis")
    _common(p)
    p.add_argument("--embeddings", action="append", required=True, metavar="DATASET:MODEL=PATH")
    p.add_argument("--features", action="append", required=True, metavar="DATASET=PATH")
    p.add_argument("--p-method", choices=["t", "permutation"])

    p = sub.add_parser("report", help="render stored results into CSV/JSON/SVG")
    _common(p)
    p.add_argument("--probe", action="append", default=[], metavar="PROBE_JSON")
    p.add_argument("--rsa", metavar="RSA_JSON")
    p.add_argument("--similarity", metavar="SIMILARITY_CSV")
    return parser


# --------------------------------------------------------------------------


def _resolve(args) -> tuple[ExperimentConfig, Path]:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    out = Path(getattr(args, "out", None) or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def _snapshot(out: Path, command: str, cfg: ExperimentConfig, options: dict) -> None:
    doc = {"command": command, "version": __version__, "seed": cfg.seed,
           "options": options, "config": cfg.to_dict()}
    (out / f"{command}.config.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _require(path, what) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def cmd_synth(args, cfg, out):
    if args.spec:
        spec = SynthSpec.from_json(_require(args.spec, "synth spec"))
    else:
        kw = {} if args.clips_per_class is None else {"clips_per_class": args.clips_per_class}
        spec = PRESETS[args.preset](**kw)
    if getattr(args, "seed", None) is not None:
        spec = replace(spec, seed=args.seed)
    synth_dataset(spec, out)
    _snapshot(out, "synth", cfg, {"spec": spec.to_dict()})


def cmd_stats(args, cfg, out):
    m = load_manifest(_require(args.manifest, "manifest"))
    stats = fit_stats_from_manifest(m, cfg.frontend, cfg.pretrain.norm_samples, cfg.pretrain.seed)
    (out / "norm_stats.json").write_text(json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n")
    _snapshot(out, "stats", cfg, {"manifest": args.manifest})


def cmd_pretrain(args, cfg, out):
    m = load_manifest(_require(args.manifest, "manifest"))
    pc = cfg.pretrain
    if args.epochs is not None:
        pc = replace(pc, epochs=args.epochs)
    if args.batch_size is not None:
        pc = replace(pc, batch_size=args.batch_size)
    if args.width is not None:
        pc = replace(pc, encoder=replace(pc.encoder, width=args.width))
    stats = None
    if args.stats:
        stats = NormStats.from_dict(json.loads(_require(args.stats, "stats file").read_text()))
    cfg = replace(cfg, pretrain=pc)
    res = pretrain(m, cfg.frontend, cfg.augment, pc, out, stats)
    log.info("final epoch loss %.5f", res.epoch_losses[-1])
    _snapshot(out, "pretrain", cfg, {"manifest": args.manifest, "stats": args.stats})


def cmd_embed(args, cfg, out):
    m = load_manifest(_require(args.manifest, "manifest"))
    ck = _require(args.checkpoint, "checkpoint")
    target = Path(args.output) if args.output else out / "embeddings.bin"
    table = embed(m, ck, args.window, args.hop, target)
    log.info("wrote %d embeddings of dim %d to %s", len(table), table.embeddings.shape[1], target)
    _snapshot(out, "embed", cfg, {"manifest": args.manifest, "checkpoint": args.checkpoint,
                                  "window": args.window, "hop": args.hop, "output": str(target)})


def _features_one(job):
    path, fcfg, frontend = job
    return extract_features(read_wav(path), fcfg, frontend)


def cmd_features(args, cfg, out):
    m = load_manifest(_require(args.manifest, "manifest"))
    fcfg = FeatureConfig(include_pitch=args.include_pitch)
    jobs = [(m.resolve(e), fcfg, cfg.frontend) for e in m.entries]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            rows = list(ex.map(_features_one, jobs, chunksize=8))
    else:
        rows = [_features_one(j) for j in jobs]
    target = Path(args.output) if args.output else out / "features.csv"
    write_features_csv(target, [e.path for e in m.entries], rows, feature_names(fcfg))
    _snapshot(out, "features", cfg, {"manifest": args.manifest, "include_pitch": args.include_pitch,
                                     "output": str(target)})


def cmd_probe(args, cfg, out):
    table = EmbeddingTable.load(_require(args.embeddings, "embedding file"))
    pc = cfg.probe
    if args.dataset:
        pc = cfg.dataset(args.dataset).probe_config(pc)
    if args.binary:
        pc = replace(pc, binary=True)
    if args.positive_label is not None:
        pc = replace(pc, positive_label=args.positive_label)
    if args.epochs is not None:
        pc = replace(pc, epochs=args.epochs)
    res = probe_table(table, pc)
    res.save(out / "probe.json", out / "probe_curve.csv")
    log.info("%s = %.4f (accuracy %.4f)", res.metric_name, res.metric, res.accuracy)
    _snapshot(out, "probe", replace(cfg, probe=pc), {"embeddings": args.embeddings,
                                                    "dataset": args.dataset})


def _split_spec(text, sep, what):
    head, _, tail = text.partition(sep)
    if not head or not tail:
        raise UsageError(f"malformed {what} argument {text!r}")
    return head, tail


def cmd_rsa(args, cfg, out):
    rc = cfg.rsa if args.p_method is None else replace(cfg.rsa, p_method=args.p_method)
    feats = dict(_split_spec(f, "=", "--features") for f in args.features)
    embs: dict[str, dict[str, str]] = {}
    for e in args.embeddings:
        key, path = _split_spec(e, "=", "--embeddings")
        ds, model = _split_spec(key, ":", "--embeddings")
        embs.setdefault(ds, {})[model] = path
    if set(embs) != set(feats):
        raise UsageError(f"datasets with embeddings {sorted(embs)} differ from datasets with features {sorted(feats)}")

    datasets, shared = [], []
    for ds in sorted(feats):
        paths, names, matrix = read_features_csv(_require(feats[ds], "feature file"))
        row = {p: i for i, p in enumerate(paths)}
        tables = {}
        for model, path in sorted(embs[ds].items()):
            t = EmbeddingTable.load(_require(path, "embedding file"))
            missing = [p for p in t.paths if p not in row]
            if missing:
                raise ValueError(f"{ds}: {len(missing)} embedded clips lack features, e.g. {missing[0]}")
            tables[model] = t
        order = next(iter(tables.values())).paths
        for model, t in tables.items():
            if t.paths != order:
                raise ValueError(f"{ds}: embedding files list different clips ({model})")
        idx = [row[p] for p in order]
        datasets.append(RsaDataset(ds, {m: t.embeddings for m, t in tables.items()},
                                   {n: matrix[idx, k] for k, n in enumerate(names)}, order))
        shared.append({m: t.embeddings for m, t in tables.items()})
    report = rsa_report(datasets, rc)
    report.save(out / "rsa.csv", out / "rsa.json")
    if len(shared[0]) > 1:
        models, mat = inter_model_similarity(shared)
        save_similarity_csv(out / "similarity.csv", models, mat)
    _snapshot(out, "rsa", replace(cfg, rsa=rc), {"embeddings": args.embeddings, "features": args.features})


def cmd_report(args, cfg, out):
    if not (args.probe or args.rsa or args.similarity):
        raise UsageError("report needs at least one of --probe, --rsa, --similarity")
    build_report(out, args.probe, args.rsa, args.similarity)
    _snapshot(out, "report", cfg, {"probe": args.probe, "rsa": args.rsa, "similarity": args.similarity})


COMMANDS = {"synth": cmd_synth, "stats": cmd_stats, "pretrain": cmd_pretrain, "embed": cmd_embed,
            "features": cmd_features, "probe": cmd_probe, "rsa": cmd_rsa, "report": cmd_report}


def run_command(argv: list[str] | None = None) -> int:
    level = os.environ.get("BYOLAB_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        cfg, out = _resolve(args)
        COMMANDS[args.command](args, cfg, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # module diagnostics surface as runtime errors
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()

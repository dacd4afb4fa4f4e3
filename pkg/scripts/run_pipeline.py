"""End-to-end desk experiment through the CLI.

synth -> stats -> pretrain -> embed -> features -> probe -> rsa -> report

    python scripts/run_pipeline.py --out runs/desk --seed 0
    python scripts/run_pipeline.py --out runs/tiny --epochs 1 --width 8 --clips-per-class 20
"""
import argparse
import sys
from pathlib import Path

from byolab.cli import run_command

# corpora get distinct synthesis seeds so no clip is shared between them
CORPORA = {"bandnoise": 0, "tonechirp": 1, "mixednoise": 2}


def step(*argv):
    print("byolab", " ".join(argv), flush=True)
    status = run_command(list(argv))
    if status != 0:
        sys.exit(status)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", help="experiment config JSON passed to every step")
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--width", type=int, default=64)
    ap.add_argument("--batch-size", type=int, default=32)
    ap.add_argument("--clips-per-class", type=int, default=100)
    args = ap.parse_args(argv)

    out = Path(args.out)
    common = ["--seed", str(args.seed)] + (["--config", args.config] if args.config else [])
    manifests = {}
    for name, offset in CORPORA.items():
        d = out / "corpora" / name
        step("synth", "--preset", name, "--clips-per-class", str(args.clips_per_class),
             "--seed", str(1000 * args.seed + offset), "--out", str(d))
        manifests[name] = str(d / "manifest.jsonl")

    train = manifests["bandnoise"]
    step("stats", *common, "--manifest", train, "--out", str(out / "stats"))
    step("pretrain", *common, "--manifest", train, "--stats", str(out / "stats" / "norm_stats.json"),
         "--epochs", str(args.epochs), "--width", str(args.width), "--batch-size", str(args.batch_size),
         "--out", str(out / "pretrain"))
    ckpt = str(out / "pretrain" / "checkpoint.bin")
    for name, manifest in manifests.items():
        step("embed", *common, "--manifest", manifest, "--checkpoint", ckpt, "--out", str(out / "embed" / name))
    step("features", *common, "--manifest", manifests["mixednoise"], "--out", str(out / "features" / "mixednoise"))
    for name in ("bandnoise", "tonechirp"):
        step("probe", *common, "--embeddings", str(out / "embed" / name / "embeddings.bin"),
             "--out", str(out / "probe" / name))
    step("rsa", *common, "--embeddings", f"mixednoise:byola={out / 'embed' / 'mixednoise' / 'embeddings.bin'}",
         "--features", f"mixednoise={out / 'features' / 'mixednoise' / 'features.csv'}",
         "--p-method", "permutation", "--out", str(out / "rsa"))
    step("report", *common, "--probe", str(out / "probe" / "bandnoise" / "probe.json"),
         "--probe", str(out / "probe" / "tonechirp" / "probe.json"),
         "--rsa", str(out / "rsa" / "rsa.json"), "--out", str(out / "report"))
    print(f"done: {out / 'report'}")


if __name__ == "__main__":
    main()

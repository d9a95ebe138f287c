"""Command-line entry point: ``hgd <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 invalid input or configuration,
4 runtime failure (including a non-finite loss).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import trainer as T
from .config import ABLATE_TOKENS, ConfigError, RunConfig
from .data import DatasetManifest, ImageSlice, LoadError, ValidationError, check_disjoint, load_corpus, \
    make_phantom_corpus, rescale_minmax, save_array
from .evaluator import ClassScore, MetricReport, ToySegmenter, class_scores, psnr, ssim, write_metric_rows

log = logging.getLogger("hgd")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3, 4

# ablation rows in table order: (name, ablated tokens)
VARIANTS = [
    ("baseline", ("pgd", "sgd", "ggd", "bank")),
    ("+PGD", ("sgd", "ggd")),
    ("+PGD+SGD", ("ggd",)),
    ("full", ()),
]


class UsageError(Exception):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | None, overrides=()) -> RunConfig:
    """JSON config file (any subset of keys) plus ``key.sub=value`` overrides."""
    data = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise LoadError(f"config not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: not valid JSON ({exc})") from exc
        base = p.parent
        for key in ("train_manifest", "test_manifest"):
            if data.get(key) and not Path(data[key]).is_absolute():
                data[key] = str(base / data[key])
    config = RunConfig.from_dict(data)
    pairs = {}
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        pairs[key.strip()] = _parse_value(value)
    config = config.with_overrides(pairs) if pairs else config
    config.validate()
    return config


def parse_ablate(text: str | None) -> list[str]:
    if not text:
        return []
    tokens = [t.strip() for t in text.split(",") if t.strip()]
    bad = [t for t in tokens if t not in ABLATE_TOKENS]
    if bad:
        raise UsageError(f"unknown --ablate token(s) {bad}; choose from {sorted(ABLATE_TOKENS)}")
    return tokens


def apply_ablation(config: RunConfig, tokens) -> RunConfig:
    config = RunConfig.from_dict(config.to_dict())
    for t in tokens:
        setattr(config.train.ablation, ABLATE_TOKENS[t], False)
    return config


def _corpora(config: RunConfig, need_test: bool = False):
    if not config.train_manifest:
        raise ConfigError("config has no train_manifest (set it in the file or with --set train_manifest=...)")
    train_man = DatasetManifest.load(config.train_manifest)
    mans = [train_man]
    test = None
    if config.test_manifest:
        test_man = DatasetManifest.load(config.test_manifest)
        mans.append(test_man)
        test = load_corpus(test_man, config.class_names)
    elif need_test:
        raise ConfigError("config has no test_manifest")
    check_disjoint(*mans)
    return load_corpus(train_man, config.class_names), test


def _progress(every: int):
    def report(row):
        if every and (row["step"] + 1) % every == 0:
            log.info("step %d total %.4f", row["step"] + 1, row["total"])
    return report


# ------------------------------------------------------------------ commands

def cmd_make_phantoms(args) -> int:
    train, test = make_phantom_corpus(args.seed, args.subjects, args.resolution, args.out)
    print(f"wrote {len(train.entries)} train and {len(test.entries)} test images to {args.out}")
    return EXIT_OK


def train_run(config: RunConfig, out: Path, corpus=None, test=None) -> T.TrainState:
    if corpus is None:
        corpus, test = _corpora(config)
    out.mkdir(parents=True, exist_ok=True)
    state, _ = T.fit(config, corpus, out_dir=out, test_corpus=test,
                     progress=_progress(config.train.log_every * 100))
    return state


def cmd_train(args) -> int:
    config = apply_ablation(load_config(args.config, args.set), parse_ablate(args.ablate))
    config.out_dir = str(args.out)
    train_run(config, Path(args.out))
    print(f"trained {config.train.steps} steps; checkpoint {Path(args.out) / 'final.npz'}")
    return EXIT_OK


def _read_inputs(path: Path, source: int):
    """An ``.npy`` image, a directory of them, or a manifest (entries of ``source`` only)."""
    if not path.exists():
        raise LoadError(f"input not found: {path}")
    if path.suffix == ".json":
        man = DatasetManifest.load(path)
        man.entries = [e for e in man.entries if e.modality_id == source]
        return [sl for sl, _ in load_corpus(man)]
    files = sorted(path.glob("*.npy")) if path.is_dir() else [path]
    out = []
    for f in files:
        arr = np.load(f, allow_pickle=False)
        if arr.ndim != 2:
            raise ValidationError(f"{f}: expected a 2D image, got shape {arr.shape}")
        out.append(ImageSlice(rescale_minmax(arr), f.stem, source))
    return out


def _load_checkpoint(path) -> T.TrainState:
    p = Path(path)
    if not p.exists():
        raise LoadError(f"checkpoint not found: {p}")
    return T.load_state(p)


def cmd_translate(args) -> int:
    state = _load_checkpoint(args.checkpoint)
    k = state.config.net.num_modalities
    for m in (args.source, args.target):
        if not 0 <= m < k:
            raise ValidationError(f"modality {m} outside [0, {k})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = _read_inputs(Path(args.input), args.source)
    for sl in inputs:
        res = T.translate(state, sl, args.source, args.target)
        stem = f"{sl.subject_id}_{sl.slice_index:03d}_{args.source}to{args.target}"
        save_array(out / f"{stem}.npy", res.pixels.astype(np.float32))
        T.save_snapshot(res.pixels, out / f"{stem}.png")
    print(f"translated {len(inputs)} image(s) into {out}")
    return EXIT_OK


def _directions(text: str, k: int):
    if text == "both":
        return [(0, 1), (1, 0)]
    try:
        src, tgt = (int(v) for v in text.replace("->", ",").split(","))
    except ValueError:
        raise UsageError(f"--direction must look like '0->1' or 'both', got {text!r}") from None
    if not (0 <= src < k and 0 <= tgt < k) or src == tgt:
        raise ValidationError(f"invalid direction {text!r} for {k} modalities")
    return [(src, tgt)]


def _score_pair(job):
    sid, direction, ref, out, labels, seg, names = job
    row = {"subject_id": sid, "direction": direction, "psnr_db": psnr(ref, out), "ssim": ssim(ref, out)}
    scores = None
    if labels is not None and seg is not None:
        scores = class_scores(labels.classes, seg(out), names)
        for name, sc in scores.items():
            row[f"dice_{name}_fraction"] = sc.dice
            row[f"vs_{name}_fraction"] = sc.vol_similarity
    return row, scores


def evaluate_rows(state: T.TrainState, corpus, directions, workers: int = 1):
    """Translate every subject, then score the pairs (optionally on a thread pool)."""
    names = state.config.class_names
    jobs = []
    for sid, mods in sorted(T._by_subject(corpus).items()):
        for src, tgt in directions:
            if src not in mods or tgt not in mods:
                continue
            (s_img, s_lab), (t_img, _) = mods[src], mods[tgt]
            seg = ToySegmenter(state.segmenters[tgt]) if tgt in state.segmenters else None
            jobs.append((sid, f"{src}->{tgt}", t_img, T.translate(state, s_img, src, tgt), s_lab, seg, names))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_score_pair, jobs))
    return [_score_pair(j) for j in jobs]


def summarize(results, names) -> dict[str, MetricReport]:
    """One averaged :class:`MetricReport` per direction."""
    by_dir: dict[str, list] = {}
    for row, scores in results:
        by_dir.setdefault(row["direction"], []).append((row, scores))
    reports = {}
    for direction, items in by_dir.items():
        rep = MetricReport(psnr_db=float(np.mean([r["psnr_db"] for r, _ in items])),
                           ssim=float(np.mean([r["ssim"] for r, _ in items])), n_samples=len(items))
        scored = [s for _, s in items if s is not None]
        for name in names if scored else []:
            rep.per_class[name] = ClassScore(
                dice=float(np.mean([s[name].dice for s in scored])),
                vol_similarity=float(np.mean([s[name].vol_similarity for s in scored])),
                absent=all(s[name].absent for s in scored))
        reports[direction] = rep
    return reports


def _workers() -> int:
    text = os.environ.get("HGD_NUM_WORKERS", "1")
    try:
        n = int(text)
    except ValueError:
        raise ConfigError(f"HGD_NUM_WORKERS must be an integer, got {text!r}") from None
    return max(1, n)


def cmd_evaluate(args) -> int:
    state = _load_checkpoint(args.checkpoint)
    directions = _directions(args.direction, state.config.net.num_modalities)
    man = DatasetManifest.load(args.manifest)
    corpus = load_corpus(man, state.config.class_names)
    results = evaluate_rows(state, corpus, directions, _workers())
    if not results:
        raise ValidationError("no subject in the manifest has both modalities of the requested direction")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = state.config.class_names
    write_metric_rows([r for r, _ in results], out / "metrics.csv", names)
    reports = summarize(results, names)
    (out / "metrics.json").write_text(
        json.dumps({d: json.loads(r.to_json()) for d, r in sorted(reports.items())}, indent=2, sort_keys=True) + "\n")
    for d, r in sorted(reports.items()):
        print(f"{d}: PSNR {r.psnr_db:.3f} dB  SSIM {r.ssim:.4f}  mean Dice {r.mean_dice:.4f}")
    return EXIT_OK


ABLATION_COLUMNS = ["variant", "direction", "psnr_db", "ssim", "mean_dice_fraction"]


def run_ablation(config: RunConfig, out: Path, variants=VARIANTS) -> list[dict]:
    """Train and evaluate every variant with the same seed; returns the table rows."""
    corpus, test = _corpora(config, need_test=True)
    rows = []
    for name, tokens in variants:
        vcfg = apply_ablation(config, tokens)
        vdir = out / name.replace("+", "plus_").strip("_")
        state = train_run(vcfg, vdir, corpus, test)
        reports = summarize(evaluate_rows(state, test, [(0, 1), (1, 0)], _workers()), vcfg.class_names)
        for direction, rep in sorted(reports.items()):
            rows.append({"variant": name, "direction": direction, "psnr_db": rep.psnr_db,
                         "ssim": rep.ssim, "mean_dice_fraction": rep.mean_dice})
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return rows


def cmd_ablate(args) -> int:
    config = load_config(args.config, args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_ablation(config, out)
    for r in rows:
        print(f"{r['variant']:<10} {r['direction']}  PSNR {r['psnr_db']:.3f}  SSIM {r['ssim']:.4f}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hgd", description="Structure-preserving unpaired translation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-phantoms", help="write a two-modality phantom dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subjects", type=int, default=20)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_phantoms)

    def with_config(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-key override, e.g. train.steps=200 (repeatable)")

    p = sub.add_parser("train", help="train one model")
    with_config(p)
    p.add_argument("--out", required=True)
    p.add_argument("--ablate", help=f"comma-separated subset of {','.join(ABLATE_TOKENS)}")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="translate images with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help=".npy image, directory of .npy images, or manifest")
    p.add_argument("--source", type=int, required=True)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="PSNR/SSIM/Dice/VS on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--direction", default="both", help="'0->1', '1->0' or 'both'")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="baseline, +PGD, +PGD+SGD and full on one seed")
    with_config(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"hgd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except T.NonFiniteLossError as exc:
        print(f"hgd: aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, ValidationError, LoadError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"hgd: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (RuntimeError, FloatingPointError, OSError) as exc:
        print(f"hgd: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

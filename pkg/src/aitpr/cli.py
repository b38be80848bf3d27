"""Command line tying the pipeline together.

Subcommands: ``synth`` writes a scene dataset, ``train`` fits a model and
leaves a checkpoint plus loss trace, ``eval`` decodes a dataset and scores
it, ``gradcheck`` verifies analytic gradients against finite differences.

Every run derives all randomness from one root seed (flag, else the
AITPR_SEED environment variable, else 0) and writes a manifest.json next
to its outputs.  Exit codes: 0 success, 1 verification failure, 2 usage,
3 IO or format trouble.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import decoder as dec
from . import figures, metrics, scenes, training
from .errors import (AitprError, CompatibilityError, ConfigError, FormatError,
                     ParseError, TrainingDiverged, VersionError)

VOCAB_FILE = "vocabulary.txt"
FEATURES_PATTERN = "scene_{:04d}.features.json"
CAPTIONS_PATTERN = "scene_{:04d}.captions.txt"
GRADCHECK_THRESHOLD = 1e-4
GRADCHECK_PARAM_BUDGET = 10_000

TRAIN_CONFIG_KEYS = ("epochs", "learning_rate", "batch_size", "seed", "variant",
                     "fusion", "grad_clip", "hidden", "embed", "att",
                     "attribute_only_fallback")
TRAIN_DEFAULTS = {
    "epochs": 200, "learning_rate": 1e-2, "batch_size": 8, "seed": None,
    "variant": 3, "fusion": "late", "grad_clip": 5.0,
    "hidden": 64, "embed": 32, "att": 32, "attribute_only_fallback": False,
}


def config_hash(config: dict) -> str:
    """Stable under key reordering: canonical JSON, then sha256."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def write_manifest(directory, command, config, seed, artifacts, started):
    payload = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "started_at": datetime.datetime.fromtimestamp(
            started, datetime.timezone.utc).isoformat(),
        "finished_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "artifacts": [str(a) for a in artifacts],
    }
    path = Path(directory) / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def root_seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    return int(os.environ.get("AITPR_SEED", "0"))


# ---------------------------------------------------------------------------
# dataset directory layout
# ---------------------------------------------------------------------------

def load_dataset(data_dir):
    """Vocabulary plus per-scene (features, references) in filename order."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"dataset directory {data_dir} does not exist")
    vocab_path = data_dir / VOCAB_FILE
    if not vocab_path.is_file():
        raise FileNotFoundError(f"{data_dir} has no {VOCAB_FILE}")
    vocab = scenes.load_vocabulary(vocab_path)

    entries = []
    dim = None
    for fpath in sorted(data_dir.glob("scene_*.features.json")):
        stem = fpath.name[:-len(".features.json")]
        cpath = data_dir / f"{stem}.captions.txt"
        if not cpath.is_file():
            raise FileNotFoundError(f"{fpath} has no matching captions file")
        feats = scenes.load_features(fpath)
        if dim is None:
            dim = feats.dim
        elif feats.dim != dim:
            raise CompatibilityError(
                f"{fpath} has feature dim {feats.dim}, earlier files have {dim}")
        refs = scenes.load_captions(cpath, vocab)
        entries.append((stem, feats, refs))
    return vocab, entries


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    started = time.time()
    if args.scenes < 1:
        raise ConfigError(f"--scenes must be positive, got {args.scenes}")
    seed = root_seed(args)
    cfg = scenes.SceneConfig(
        grid_w=args.grid, grid_h=args.grid,
        n_categories=args.categories, n_attributes=args.attributes,
        min_objects=args.min_objects, max_objects=args.max_objects,
        relation_density=args.relation_density,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    vocab = scenes.build_vocabulary(cfg)
    scenes.save_vocabulary(vocab, out / VOCAB_FILE)
    artifacts = [VOCAB_FILE]

    rng = np.random.default_rng(seed)
    scene_seeds = rng.integers(0, 2 ** 62, size=args.scenes)
    feat_seeds = rng.integers(0, 2 ** 62, size=args.scenes)
    for i in range(args.scenes):
        scene = scenes.generate_scene(int(scene_seeds[i]), cfg)
        feats = scenes.scene_to_features(scene, args.feat_dim, args.noise,
                                         int(feat_seeds[i]))
        refs = scenes.caption_oracle(scene, vocab)
        fname = FEATURES_PATTERN.format(i)
        cname = CAPTIONS_PATTERN.format(i)
        scenes.save_features(feats, out / fname)
        scenes.save_captions(refs, vocab, out / cname)
        artifacts.extend([fname, cname])

    config = {"scenes": args.scenes, "feat_dim": args.feat_dim,
              "noise": args.noise, "grid": args.grid,
              "categories": args.categories, "attributes": args.attributes,
              "min_objects": args.min_objects, "max_objects": args.max_objects,
              "relation_density": args.relation_density}
    write_manifest(out, "synth", config, seed, artifacts, started)
    print(f"wrote {args.scenes} scenes to {out} "
          f"(vocab {len(vocab)} ids, feat dim {args.feat_dim})")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _merge_train_config(args) -> dict:
    merged = dict(TRAIN_DEFAULTS)
    if args.config is not None:
        with open(args.config, "r", encoding="utf-8") as fh:
            try:
                file_cfg = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ParseError(f"config file {args.config}: {exc.msg} "
                                 f"at line {exc.lineno}") from None
        unknown = sorted(set(file_cfg) - set(TRAIN_CONFIG_KEYS))
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}; "
                              f"expected a subset of {sorted(TRAIN_CONFIG_KEYS)}")
        merged.update(file_cfg)
    # flags beat file values; argparse leaves them None when absent
    for key in TRAIN_CONFIG_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = val
    if merged["seed"] is None:
        merged["seed"] = int(os.environ.get("AITPR_SEED", "0"))
    return merged


def _training_pairs(entries):
    # First oracle caption is the canonical target; a scene with several
    # templated sentences would otherwise hand the optimizer conflicting
    # targets for identical features, putting the overfit floor above zero.
    return [(feats, refs[0]) for _stem, feats, refs in entries]


def cmd_train(args) -> int:
    started = time.time()
    merged = _merge_train_config(args)
    vocab, entries = load_dataset(args.data)
    if not entries:
        raise ConfigError(f"dataset {args.data} contains no scenes")

    dims = dec.ModelDims(
        feat_dim=entries[0][1].dim,
        hidden=merged["hidden"], embed=merged["embed"], att=merged["att"],
        vocab_size=len(vocab),
    )
    config = training.TrainConfig(
        dims=dims, epochs=merged["epochs"],
        learning_rate=merged["learning_rate"], batch_size=merged["batch_size"],
        seed=merged["seed"], mode=dec.FusionMode.parse(merged["fusion"]),
        variant=merged["variant"], grad_clip=merged["grad_clip"],
        attribute_only_fallback=merged["attribute_only_fallback"],
    )

    resume_from = None
    start_epoch = 0
    if args.resume is not None:
        resume_from = training.load_checkpoint(args.resume)
        start_epoch = resume_from.epoch

    result = training.train(_training_pairs(entries), config,
                            resume_from=resume_from)

    ckpt_path = Path(args.out)
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    training.save_checkpoint(result.checkpoint, ckpt_path)

    stem = ckpt_path.with_suffix("")
    csv_path = Path(f"{stem}_loss.csv")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for i, loss in enumerate(result.loss_trace):
            writer.writerow([start_epoch + i, f"{loss:.10f}"])
    png_path = figures.loss_curve_figure(result.loss_trace, f"{stem}_loss.png",
                                         start_epoch=start_epoch)

    echo = training.config_echo(config)
    write_manifest(ckpt_path.parent, "train", echo, config.seed,
                   [ckpt_path.name, csv_path.name, Path(png_path).name],
                   started)
    final = result.loss_trace[-1] if result.loss_trace else float("nan")
    print(f"trained {config.epochs - start_epoch} epochs on {len(entries)} scenes; "
          f"final loss {final:.6f}; checkpoint {ckpt_path}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    started = time.time()
    ckpt = training.load_checkpoint(args.ckpt)
    config = training.config_from_echo(ckpt.config)
    vocab, entries = load_dataset(args.data)
    if not entries:
        raise ConfigError(f"dataset {args.data} contains no scenes")
    if len(vocab) != config.dims.vocab_size:
        raise CompatibilityError(
            f"checkpoint was trained with vocab size {config.dims.vocab_size}, "
            f"dataset has {len(vocab)}")
    if entries[0][1].dim != config.dims.feat_dim:
        raise CompatibilityError(
            f"checkpoint expects feature dim {config.dims.feat_dim}, "
            f"dataset has {entries[0][1].dim}")

    params = dec.ModelParams(config.dims, ckpt.arrays)
    flags = config.flags
    ids, cands, refs = [], [], []
    with ad.no_grad():
        for stem, feats, scene_refs in entries:
            seq = dec.generate_caption(feats, config.mode, flags, params,
                                       args.max_len,
                                       config.attribute_only_fallback)
            ids.append(stem)
            cands.append(" ".join(seq.words(vocab)))
            refs.append([" ".join(r.words(vocab)) for r in scene_refs])

    report = metrics.evaluate_corpus(cands, refs, ids=ids)
    exact = sum(c in r for c, r in zip(cands, refs)) / len(cands)

    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    stem = report_path.with_suffix("")
    cap_path = Path(f"{stem}_captions.txt")
    with open(cap_path, "w", encoding="utf-8") as fh:
        for sid, cand in zip(ids, cands):
            fh.write(f"{sid}\t{cand}\n")
    png_path = figures.metrics_figure(report.to_dict(), f"{stem}_metrics.png")

    write_manifest(report_path.parent, "eval",
                   {"ckpt": str(args.ckpt), "data": str(args.data),
                    "max_len": args.max_len, "model": ckpt.config},
                   config.seed,
                   [report_path.name, cap_path.name, Path(png_path).name],
                   started)
    print(f"evaluated {len(cands)} scenes: BLEU-4 {report.bleu4:.4f}, "
          f"ROUGE-L {report.rouge_l:.4f}, CIDEr-D {report.cider_d:.4f}, "
          f"exact match {exact:.2%}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def parse_dims(text: str) -> dec.ModelDims:
    """\"D=16,d=6,e=5,V=12[,a=4]\" with a defaulting to 4."""
    keys = {}
    for part in text.split(","):
        if "=" not in part:
            raise ConfigError(f"bad dims fragment {part!r}, expected key=value")
        k, v = part.split("=", 1)
        k = k.strip()
        if k not in ("D", "d", "e", "V", "a"):
            raise ConfigError(f"unknown dims key {k!r}, expected D,d,e,V,a")
        try:
            keys[k] = int(v)
        except ValueError:
            raise ConfigError(f"dims value for {k} must be an integer, got {v!r}") from None
    missing = [k for k in ("D", "d", "e", "V") if k not in keys]
    if missing:
        raise ConfigError(f"dims string is missing {missing}")
    return dec.ModelDims(feat_dim=keys["D"], hidden=keys["d"], embed=keys["e"],
                         att=keys.get("a", 4), vocab_size=keys["V"])


def _param_count(dims: dec.ModelDims) -> int:
    params = dec.init_params(dims, seed=0)
    return sum(p.data.size for _n, p in params.named_params())


def gradcheck_once(dims, mode, flags, seed=0, eps=1e-5, corrupt=0.0):
    """Per-parameter max relative error for one variant/fusion combination."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((3, dims.feat_dim))
    v_prime = rng.standard_normal((2, dims.feat_dim))
    feats = scenes.RegionFeatureSet(v=v, v_prime=v_prime, v_bar=v.mean(axis=0))
    interior = rng.integers(4, dims.vocab_size, size=3)
    target = scenes.TokenSequence(
        ids=(scenes.BOS_ID,) + tuple(int(t) for t in interior) + (scenes.EOS_ID,))
    params = dec.init_params(dims, seed=seed + 1)

    def loss():
        return training.teacher_forced_loss(feats, target, mode, flags, params)

    errors = {}
    for name, tensor in params.named_params():
        errors[name] = ad.grad_check(loss, [tensor], eps=eps, _corrupt=corrupt)
    return errors


def cmd_gradcheck(args) -> int:
    started = time.time()
    dims = parse_dims(args.dims)
    n_params = _param_count(dims)
    if n_params >= GRADCHECK_PARAM_BUDGET:
        raise ConfigError(
            f"dims give {n_params} parameters; finite differences need fewer "
            f"than {GRADCHECK_PARAM_BUDGET} (roughly 2*{n_params} forward "
            f"passes per combination)")
    seed = root_seed(args)

    if args.variant is None and args.fusion is None:
        combos = [(v, m) for v in (1, 2, 3)
                  for m in (dec.FusionMode.EARLY, dec.FusionMode.LATE)]
    else:
        variants = (args.variant,) if args.variant is not None else (1, 2, 3)
        modes = ((dec.FusionMode.parse(args.fusion),) if args.fusion is not None
                 else (dec.FusionMode.EARLY, dec.FusionMode.LATE))
        combos = [(v, m) for v in variants for m in modes]

    worst_overall = 0.0
    all_errors = {}
    for variant, mode in combos:
        flags = dec.VariantFlags.variant(variant)
        errors = gradcheck_once(dims, mode, flags, seed=seed,
                                eps=args.eps, corrupt=args.corrupt)
        label = f"variant {variant} {mode.value}"
        worst = max(errors.values())
        worst_overall = max(worst_overall, worst)
        status = "ok" if worst <= GRADCHECK_THRESHOLD else "FAIL"
        print(f"{label}: max relative error {worst:.3e} [{status}]")
        if args.verbose:
            for name, err in sorted(errors.items(), key=lambda kv: -kv[1]):
                print(f"  {name:24s} {err:.3e}")
        for name, err in errors.items():
            key = f"{label}/{name}"
            all_errors[key] = max(all_errors.get(key, 0.0), err)

    passed = worst_overall <= GRADCHECK_THRESHOLD
    print(f"overall max relative error {worst_overall:.3e} over "
          f"{len(combos)} combination(s): {'PASS' if passed else 'FAIL'}")

    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        per_param = {}
        for key, err in all_errors.items():
            name = key.rsplit("/", 1)[1]
            per_param[name] = max(per_param.get(name, 0.0), err)
        png = figures.gradcheck_figure(per_param, GRADCHECK_THRESHOLD,
                                       out / "gradcheck.png")
        with open(out / "gradcheck.json", "w", encoding="utf-8") as fh:
            json.dump({k: float(v) for k, v in sorted(all_errors.items())},
                      fh, indent=2)
            fh.write("\n")
        write_manifest(out, "gradcheck",
                       {"dims": args.dims, "eps": args.eps,
                        "combos": [f"{v}/{m.value}" for v, m in combos]},
                       seed, ["gradcheck.json", Path(png).name], started)
    return 0 if passed else 1


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aitpr",
        description="synthetic-scene caption pipeline: generate, train, "
                    "evaluate, verify gradients")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene dataset")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--feat-dim", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--grid", type=int, default=4)
    p.add_argument("--categories", type=int, default=3)
    p.add_argument("--attributes", type=int, default=3)
    p.add_argument("--min-objects", type=int, default=1)
    p.add_argument("--max-objects", type=int, default=4)
    p.add_argument("--relation-density", type=float, default=0.5)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a decoder on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", default=None, help="JSON file, flags override it")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--variant", type=int, choices=(1, 2, 3), default=None)
    p.add_argument("--fusion", choices=("early", "late"), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--grad-clip", type=float, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--embed", type=int, default=None)
    p.add_argument("--att", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="decode a dataset and score it")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="output JSON path")
    p.add_argument("--max-len", type=int, default=20)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--dims", default="D=16,d=6,e=5,V=12")
    p.add_argument("--variant", type=int, choices=(1, 2, 3), default=None)
    p.add_argument("--fusion", choices=("early", "late"), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--corrupt", type=float, default=0.0,
                   help="offset analytic gradients (negative control)")
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--out", default=None, help="directory for report artifacts")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ParseError, FormatError, VersionError, CompatibilityError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except AitprError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

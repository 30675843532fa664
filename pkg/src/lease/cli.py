"""Command-line entry point: ``lease <subcommand> --flag value ...``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
Every subcommand writes ``<out>.manifest.json`` before doing any work.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from lease import __version__
from lease.errors import DataError, NumericError

log = logging.getLogger("lease")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _probability(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"{value} is outside [0, 1]")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"{value} must be >= 1")
    return value


def write_manifest(args: argparse.Namespace, resolved: dict, out: str | Path | None) -> Path:
    if out is None:
        # no output file: keep the manifest beside the main input
        anchor = getattr(args, "ckpt", None) or getattr(args, "data", None) or "lease"
        out = f"{anchor}.{args.command}"
    path = Path(f"{out}.manifest.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    inputs = {k: v for k, v in vars(args).items() if k != "func" and not callable(v)}
    manifest = {"subcommand": args.command, "artifact_version": __version__,
                "seed": getattr(args, "seed", None), "arguments": inputs, "resolved": resolved}
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


# subcommands ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    from lease.tokenstore import synth_dataset, synth_features, write_dataset, write_features

    write_manifest(args, {}, args.out)
    ds = synth_dataset(args.classes, args.per_class, args.ss, args.vgen, args.kdisc, args.eps, args.delta, args.seed)
    write_dataset(ds, args.out)
    if args.features_out:
        feats, _ = synth_features(ds, args.feature_dim, args.feature_noise, args.seed)
        write_features(feats, args.features_out)
    print(f"wrote {len(ds)} samples to {args.out}")
    return 0


def cmd_kmeans(args) -> int:
    from lease.codebook import build_neighbor_table, kmeans_fit, neighbor_path_for, normalize, save_codebook, save_neighbors
    from lease.tokenstore import read_features

    write_manifest(args, {}, args.out)
    feats = read_features(args.features)
    res = kmeans_fit(feats.reshape(-1, feats.shape[-1]), args.k, args.iters, args.seed)
    cb = normalize(res.codebook)
    save_codebook(cb, args.out)
    nn_path = neighbor_path_for(args.out)
    save_neighbors(build_neighbor_table(cb, args.ksel), nn_path)
    print(f"k-means: K={args.k} inertia={res.inertia:.6g} iterations={res.iterations} "
          f"converged={res.converged}; wrote {args.out} and {nn_path}")
    return 0


def cmd_assign(args) -> int:
    from lease.codebook import load_codebook
    from lease.tokenstore import TokenDataset, assign_disc_tokens, read_dataset, read_features, write_dataset

    write_manifest(args, {}, args.out)
    ds = read_dataset(args.data)
    feats = read_features(args.features)
    if feats.shape[:2] != ds.gen.shape:
        raise DataError(f"features {feats.shape[:2]} do not align with dataset {ds.gen.shape}")
    cb = load_codebook(args.codebook)
    disc = assign_disc_tokens(feats, cb)
    write_dataset(TokenDataset(ds.gen, disc, ds.v_max, cb.K, ds.labels), args.out)
    print(f"assigned {disc.size} discriminative tokens -> {args.out}")
    return 0


def _train_configs(args, ds, cb):
    from lease.net import ModelConfig
    from lease.trainer import TrainConfig

    if args.preset == "paper":
        mc = ModelConfig.paper(seq_len=ds.seq_len, v_max=ds.v_max, contrast_dim=cb.D)
        tc = TrainConfig.paper()
    else:
        mc = ModelConfig(seq_len=ds.seq_len, v_max=ds.v_max, contrast_dim=cb.D)
        tc = TrainConfig.desk()
    model_over = {k: v for k, v in dict(embed_dim=args.embed_dim, enc_layers=args.enc_layers,
                                        dec_layers=args.dec_layers, heads=args.heads,
                                        dropout=args.dropout).items() if v is not None}
    if args.contrast_on != "encoder":
        model_over["decoder_contrast"] = True
    train_over = {k: v for k, v in dict(lam=args.lam, total_epochs=args.epochs, warmup_epochs=args.warmup,
                                        batch_size=args.batch_size, base_lr=args.base_lr, K_sel=args.ksel,
                                        tau=args.tau, alpha=args.alpha, seed=args.seed,
                                        contrast_on=args.contrast_on, log_every=args.log_every).items()
                  if v is not None}
    if "total_epochs" in train_over and "warmup_epochs" not in train_over:
        train_over["warmup_epochs"] = min(tc.warmup_epochs, train_over["total_epochs"])
    mc = ModelConfig(**{**asdict(mc), **model_over})
    tc_dict = asdict(tc)
    tc_dict.update(train_over)
    return mc, TrainConfig(**tc_dict)


def cmd_train(args) -> int:
    from lease.codebook import build_neighbor_table, load_codebook, load_neighbors, neighbor_path_for
    from lease.tokenstore import read_dataset
    from lease.trainer import train

    ds = read_dataset(args.data)
    cb = load_codebook(args.codebook)
    if ds.K != cb.K:
        raise DataError(f"dataset K={ds.K} does not match codebook K={cb.K}")
    mc, tc = _train_configs(args, ds, cb)
    write_manifest(args, {"model": asdict(mc), "train": asdict(tc)}, args.out)
    if args.dry_run:
        print(json.dumps({"model": asdict(mc), "train": asdict(tc)}, indent=2, default=str))
        return 0
    nn_path = Path(args.neighbors) if args.neighbors else neighbor_path_for(args.codebook)
    table = load_neighbors(nn_path) if nn_path.exists() and load_neighbors(nn_path).K_sel == tc.K_sel \
        else build_neighbor_table(cb, tc.K_sel)
    log_path = args.log or f"{args.out}.metrics.log"
    res = train(ds, cb, table, mc, tc, checkpoint_path=args.out, log_path=log_path, resume_from=args.resume)
    last = res.metrics[-1] if res.metrics else {}
    print(f"trained {res.epochs_done} epochs; final total={last.get('total', float('nan')):.6f}; "
          f"checkpoint {args.out}; log {log_path}")
    return 0


def _labeled(path):
    from lease.tokenstore import read_dataset

    ds = read_dataset(path)
    if ds.labels is None:
        raise DataError(f"{path} has no labels")
    return ds


def cmd_probe(args) -> int:
    from lease.trainer import linear_probe, pooled_features

    write_manifest(args, {}, args.out)
    ds = _labeled(args.data)
    feats = pooled_features(args.ckpt, ds, args.pooling)
    acc = linear_probe(feats, ds.labels, args.epochs, args.lr, args.test_fraction, args.seed, args.shots)
    _report(args.out, f"probe_top1={acc:.6f}")
    return 0


def cmd_knn(args) -> int:
    from lease.trainer import knn_eval, pooled_features, split_indices

    write_manifest(args, {}, args.out)
    ds = _labeled(args.data)
    feats = pooled_features(args.ckpt, ds, args.pooling)
    tr, te = split_indices(len(ds), args.test_fraction, args.seed)
    acc = knn_eval(feats[tr], ds.labels[tr], feats[te], ds.labels[te], args.k)
    _report(args.out, f"knn_top1={acc:.6f}")
    return 0


def _report(out, line: str) -> None:
    print(line)
    if out:
        Path(out).write_text(line + "\n")


def cmd_finetune_cond(args) -> int:
    from lease.codebook import load_codebook
    from lease.net import load_model
    from lease.sampler import finetune_conditional_decoder, save_conditional
    from lease.trainer import TrainConfig

    write_manifest(args, {}, args.out)
    ds = _labeled(args.data)
    model, _, _ = load_model(args.ckpt)
    cb = load_codebook(args.codebook)
    warm = min(5, args.epochs)
    cfg = TrainConfig.desk(total_epochs=args.epochs, warmup_epochs=warm, seed=args.seed)
    cond, metrics = finetune_conditional_decoder(model, ds, cb, cfg, args.classes, args.class_embeddings)
    save_conditional(args.out, model, cond)
    print(f"conditional fine-tune: final L_R={metrics[-1]['L_R']:.6f}; wrote {args.out}")
    return 0


def cmd_generate(args) -> int:
    from lease.sampler import DecodeSchedule, generate_conditional, generate_unconditional, load_conditional
    from lease.tokenstore import TokenDataset, write_dataset

    write_manifest(args, {}, args.out)
    model, cond = load_conditional(args.ckpt)
    schedule = DecodeSchedule(args.steps, args.temp)
    if args.class_id is not None:
        if cond is None:
            raise DataError("--class needs a conditional checkpoint (see `lease finetune-cond`)")
        tokens = generate_conditional(model, cond, args.class_id, schedule, args.seed, args.n)
        labels = np.full(args.n, args.class_id)
    else:
        tokens = generate_unconditional(model, schedule, args.seed, args.n)
        labels = None
    out = TokenDataset(tokens, np.zeros_like(tokens), model.config.v_max, 1, labels, generated=True)
    write_dataset(out, args.out)
    print(f"generated {args.n} sequences -> {args.out}")
    return 0


def cmd_analyze(args) -> int:
    from lease.analysis import write_report
    from lease.tokenstore import read_dataset

    write_manifest(args, {}, args.out)
    ds = read_dataset(args.data)
    report = write_report(args.out, ds, args.top_pairs, args.top_k)
    ent = report["entropy"]
    print(f"H_gen_given_disc={ent['H_gen_given_disc']:.6f} H_disc_given_gen={ent['H_disc_given_gen']:.6f} "
          f"-> {args.out}")
    return 0


# parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lease", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="torch intra-op threads (env LEASE_THREADS); 1 is bit-reproducible")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic class-prototype token dataset")
    s.add_argument("--classes", type=_positive_int, default=10)
    s.add_argument("--per-class", type=int, default=200)
    s.add_argument("--ss", type=_positive_int, default=16)
    s.add_argument("--vgen", type=int, default=64)
    s.add_argument("--kdisc", type=int, default=128)
    s.add_argument("--eps", type=_probability, default=0.25)
    s.add_argument("--delta", type=_probability, default=0.3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--features-out", help="also write a matching LSFT feature dump")
    s.add_argument("--feature-dim", type=_positive_int, default=32)
    s.add_argument("--feature-noise", type=float, default=0.1)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("kmeans", help="cluster a feature dump into a codebook + neighbor table")
    s.add_argument("--features", required=True)
    s.add_argument("--k", type=_positive_int, required=True)
    s.add_argument("--iters", type=_positive_int, default=50)
    s.add_argument("--ksel", type=_positive_int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_kmeans)

    s = sub.add_parser("assign", help="replace a dataset's disc tokens by nearest-centroid assignment")
    s.add_argument("--data", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--codebook", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_assign)

    s = sub.add_parser("train", help="pretrain with reconstruction + codebook contrast")
    s.add_argument("--data", required=True)
    s.add_argument("--codebook", required=True)
    s.add_argument("--neighbors", help="LSNN file (default: codebook path with .lsnn)")
    s.add_argument("--preset", choices=("desk", "paper"), default="desk")
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--epochs", type=_positive_int)
    s.add_argument("--warmup", type=int)
    s.add_argument("--batch-size", type=_positive_int)
    s.add_argument("--base-lr", type=float)
    s.add_argument("--ksel", type=_positive_int)
    s.add_argument("--tau", type=float)
    s.add_argument("--alpha", type=float)
    s.add_argument("--embed-dim", type=_positive_int)
    s.add_argument("--enc-layers", type=_positive_int)
    s.add_argument("--dec-layers", type=_positive_int)
    s.add_argument("--heads", type=_positive_int)
    s.add_argument("--dropout", type=float)
    s.add_argument("--contrast-on", choices=("encoder", "decoder", "both"), default="encoder")
    s.add_argument("--log-every", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", help="continue from a training checkpoint")
    s.add_argument("--log", help="metrics log path (default: <out>.metrics.log)")
    s.add_argument("--out", default="lease.lsck")
    s.add_argument("--dry-run", action="store_true", help="resolve and print the config only")
    s.set_defaults(func=cmd_train)

    for name, func, help_ in (("probe", cmd_probe, "linear probe on frozen features"),
                              ("knn", cmd_knn, "cosine k-NN on frozen features")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--ckpt", required=True)
        s.add_argument("--data", required=True)
        s.add_argument("--pooling", choices=("mean", "cls"), default="mean")
        s.add_argument("--test-fraction", type=_probability, default=0.2)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--out")
        if name == "probe":
            s.add_argument("--epochs", type=_positive_int, default=100)
            s.add_argument("--lr", type=float, default=1.0)
            s.add_argument("--shots", type=_positive_int, help="few-shot: labeled samples per class")
        else:
            s.add_argument("--k", type=_positive_int, default=20)
        s.set_defaults(func=func)

    s = sub.add_parser("finetune-cond", help="class-conditional decoder fine-tune (encoder frozen)")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--codebook", required=True)
    s.add_argument("--classes", type=_positive_int)
    s.add_argument("--class-embeddings", help=".npy of shape (classes, embed_dim)")
    s.add_argument("--epochs", type=_positive_int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_finetune_cond)

    s = sub.add_parser("generate", help="iterative masked decoding to an LSTK file")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--steps", type=_positive_int, default=8)
    s.add_argument("--temp", type=float, default=1.0)
    s.add_argument("--n", type=_positive_int, default=16)
    s.add_argument("--class", dest="class_id", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("analyze", help="entropy / PMI / class-curve report")
    s.add_argument("--data", required=True)
    s.add_argument("--top-pairs", type=_positive_int, default=40)
    s.add_argument("--top-k", type=_positive_int, default=20)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads or (int(os.environ["LEASE_THREADS"]) if os.environ.get("LEASE_THREADS") else None)
    if threads:
        torch.set_num_threads(threads)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"lease: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError) as exc:
        print(f"lease: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

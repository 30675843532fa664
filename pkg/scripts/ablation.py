"""Reconstruction-only vs reconstruction + contrast on the synthetic token task.

Trains the desk model for each (seed, lambda), freezes it, and reports
linear-probe accuracy under the few-shot split (25 per class) and the 80/20
split, plus cosine k-NN. Writes one CSV row per run.

    python scripts/ablation.py --seeds 0 1 2 --lams 0 0.1 --out ablation.csv
"""
import argparse
import csv
import time

import numpy as np
import torch

from lease.codebook import build_neighbor_table, random_codebook
from lease.net import ModelConfig
from lease.tokenstore import synth_dataset
from lease.trainer import TrainConfig, knn_eval, linear_probe, pooled_features, split_indices, train


def run(seed, lam, args):
    ds = synth_dataset(args.classes, args.per_class, 16, 64, 128, args.eps, args.delta, seed=seed)
    cb = random_codebook(128, 32, seed)
    mc = ModelConfig(seq_len=16, v_max=64, contrast_dim=32, dropout=args.dropout)
    cfg = TrainConfig.desk(lam=lam, seed=seed, total_epochs=args.epochs, contrast_on=args.contrast_on)
    if args.contrast_on != "encoder":
        mc = ModelConfig(**{**mc.__dict__, "decoder_contrast": True})
    res = train(ds, cb, build_neighbor_table(cb, cfg.K_sel), mc, cfg)
    f = pooled_features(res.model, ds, "mean")
    tr, te = split_indices(len(ds), 0.2, seed)
    return dict(seed=seed, lam=lam, final_total=res.metrics[-1]["total"],
                probe_25shot=linear_probe(f, ds.labels, seed=seed, shots_per_class=25),
                probe_80_20=linear_probe(f, ds.labels, seed=seed),
                knn_80_20=knn_eval(f[tr], ds.labels[tr], f[te], ds.labels[te], k=20))


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--lams", type=float, nargs="+", default=[0.0, 0.1])
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--eps", type=float, default=0.25)
    p.add_argument("--delta", type=float, default=0.3)
    p.add_argument("--contrast-on", choices=("encoder", "decoder", "both"), default="encoder")
    p.add_argument("--out", default="ablation.csv")
    args = p.parse_args()
    torch.set_num_threads(1)

    rows = []
    for seed in args.seeds:
        for lam in args.lams:
            t0 = time.perf_counter()
            row = run(seed, lam, args)
            rows.append(row)
            print(f"seed={seed} lam={lam:g} 25shot={row['probe_25shot']:.4f} 80/20={row['probe_80_20']:.4f} "
                  f"knn={row['knn_80_20']:.4f} ({time.perf_counter() - t0:.0f}s)", flush=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for lam in args.lams:
        sel = [r for r in rows if r["lam"] == lam]
        means = {k: np.mean([r[k] for r in sel]) for k in ("probe_25shot", "probe_80_20", "knn_80_20")}
        print(f"lam={lam:g} mean " + " ".join(f"{k}={v:.4f}" for k, v in means.items()))


if __name__ == "__main__":
    main()

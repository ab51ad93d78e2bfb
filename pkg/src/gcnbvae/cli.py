"""Command-line entry point: ``gcnbvae <command> [options]``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis
from .checkpoint import load_checkpoint, save_checkpoint
from .experiment import (ExperimentConfig, extrapolate, generation_summary, hierarchy_for,
                         interpolate, load_config, pca_baseline, run_experiment)
from .mesh import Mesh, load_mesh, save_mesh, validate_shared_topology
from .model import build_model, encode, decode
from .procaug import alignment_report, choose_reference, fit_policy
from .rng import stream
from .synthetic import generate_corpus
from .training import METRIC_FIELDS, train


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, synthetic=replace(cfg.synthetic, seed=args.seed))
    return cfg


def _corpus(args, cfg: ExperimentConfig) -> list[Mesh]:
    if getattr(args, "data", None):
        paths = sorted(p for p in Path(args.data).iterdir() if p.suffix.lower() in (".off", ".obj"))
        if not paths:
            raise SystemExit(f"no .off/.obj files in {args.data}")
        corpus = [load_mesh(p) for p in paths]
    else:
        corpus = generate_corpus(cfg.synthetic)
    validate_shared_topology(corpus)
    return corpus


def _rows(dicts, fields):
    return [[d[k] for k in fields] for d in dicts]


def cmd_gen_data(args, cfg):
    out = Path(args.out) / "corpus"
    out.mkdir(parents=True, exist_ok=True)
    corpus = generate_corpus(cfg.synthetic)
    for i, m in enumerate(corpus):
        save_mesh(m, out / f"mesh_{i:03d}.off")
    (out / "spec.json").write_text(json.dumps(cfg.synthetic.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(corpus)} meshes to {out}")


def cmd_align_report(args, cfg):
    corpus = _corpus(args, cfg)
    ref = choose_reference(corpus)
    rows = alignment_report(corpus, corpus[ref], proper=cfg.proper, center=cfg.center)
    fields = ("mesh_id", "l2_before", "l2_after", "chamfer_before", "chamfer_after")
    analysis.write_csv(Path(args.out) / "alignment.csv", fields, _rows(rows, fields))
    pol = fit_policy(corpus, corpus[ref], proper=cfg.proper, center=cfg.center)
    analysis.write_csv(Path(args.out) / "policy.csv", ("param", "low", "high"),
                       [("psi", *pol.psi), ("xi", *pol.xi), ("gamma", *pol.gamma), ("scale", *pol.scale)])
    print(f"reference mesh {ref}; report in {args.out}")


def cmd_train(args, cfg):
    corpus = _corpus(args, cfg)
    hier = hierarchy_for(corpus, cfg.model.pool_factor)
    policy = None
    if args.arm != "none":
        ref = corpus[choose_reference(corpus)]
        policy = fit_policy(corpus, ref, proper=cfg.proper, center=cfg.center).with_mode(args.arm)
    template = np.mean([m.vertices for m in corpus], axis=0)
    params = build_model(cfg.model, hier, cfg.seed, template=template)
    tcfg = cfg.train if args.epochs is None else replace(cfg.train, epochs=args.epochs)
    params, history = train(params, corpus, policy, tcfg, cfg.seed, val=corpus)
    out = Path(args.out)
    analysis.write_csv(out / "train_metrics.csv", METRIC_FIELDS, _rows(history, METRIC_FIELDS))
    save_checkpoint(out / "model.ckpt", params, seed=cfg.seed, epoch=tcfg.epochs)
    print(f"trained {tcfg.epochs} epochs; checkpoint at {out / 'model.ckpt'}")


def cmd_eval(args, cfg):
    ck = load_checkpoint(args.checkpoint)
    corpus = _corpus(args, cfg)
    out = Path(args.out)
    rows = []
    mus = []
    for i, m in enumerate(corpus):
        mu, log_var = encode(ck.params, m.vertices)
        rec = decode(ck.params, mu)
        kl = float(-0.5 * np.sum(1 + log_var - mu**2 - np.exp(log_var)))
        r = analysis.evaluate_pair(rec, m.vertices, kl=kl, with_map=True)
        rows.append((i, r.E_percent, r.chamfer, r.rcd, r.l2_rms, r.kl))
        analysis.export_per_vertex(out / "rcd" / f"mesh_{i:03d}.txt", r.per_vertex)
        mus.append(mu)
    analysis.write_csv(out / "eval.csv", ("mesh_id", "E", "chamfer", "RCD", "L2", "kl"), rows)
    mus = np.stack(mus)
    if len(mus) >= 2:
        r, det100 = analysis.correlation_det(mus)
        analysis.export_correlation(out / "correlation.csv", r)
        analysis.write_csv(out / "det.csv", ("det100",), [(det100,)])
    if len(mus) >= args.bins:
        analysis.export_histograms(out / "latent_hist.csv", analysis.latent_histograms(mus, args.bins))
    print(f"evaluated {len(corpus)} meshes; mean E {np.mean([r[1] for r in rows]):.3f}%")


def _experiment(args, cfg, **overrides):
    corpus = _corpus(args, cfg)
    if args.epochs is not None:
        overrides["train"] = replace(cfg.train, epochs=args.epochs)
    if args.folds is not None:
        overrides["folds"] = args.folds
    cfg = replace(cfg, **overrides)
    rep = run_experiment(cfg, corpus, out_dir=args.out,
                         progress=lambda r: print(f"{r['arm']} d={r['latent']} beta={r['beta']} "
                                                  f"fold {r['fold']}: RCD {r['RCD']:.4f}", flush=True))
    for row in rep.aggregate_rows:
        print(f"{row['arm']} d={row['latent']} beta={row['beta']}: RCD {row['RCD_mean']:.4f} "
              f"+- {row['RCD_std']:.4f}, E {row['E_mean']:.3f}")


def cmd_ablate(args, cfg):
    _experiment(args, cfg, arms=tuple(args.arms))


def cmd_sweep(args, cfg):
    over = {}
    if args.latents:
        over["latents"] = tuple(args.latents)
    if args.betas:
        over["betas"] = tuple(args.betas)
    _experiment(args, cfg, **over)


def cmd_rank_modes(args, cfg):
    ck = load_checkpoint(args.checkpoint)
    corpus = _corpus(args, cfg)
    ranking = analysis.rank_modes(lambda m: encode(ck.params, m)[0],
                                  lambda z: decode(ck.params, z), corpus)
    analysis.export_mode_curve(Path(args.out) / "mode_ranking.csv", ranking)
    print("mode order:", ranking.order)


def cmd_extrapolate(args, cfg):
    ck = load_checkpoint(args.checkpoint)
    corpus = _corpus(args, cfg)
    target = corpus[args.index]
    out = Path(args.out)
    (out / "extrapolate").mkdir(parents=True, exist_ok=True)
    meshes, maps = extrapolate(ck.params, target, args.scale, args.count,
                               stream(cfg.seed, "sampling", args.index))
    for j, (v, rmap) in enumerate(zip(meshes, maps)):
        save_mesh(target.with_vertices(v), out / "extrapolate" / f"sample_{j:03d}.off")
        analysis.export_per_vertex(out / "extrapolate" / f"sample_{j:03d}_rcd.txt", rmap)
    rows = generation_summary(ck.params, target, args.scales, args.count, cfg.seed)
    analysis.write_csv(out / "extrapolate_summary.csv", ("S", "count", "mean_RCD", "max_vertex_RCD"),
                       _rows(rows, ("S", "count", "mean_RCD", "max_vertex_RCD")))
    print(f"wrote {len(meshes)} samples at S={args.scale}")


def cmd_interpolate(args, cfg):
    ck = load_checkpoint(args.checkpoint)
    corpus = _corpus(args, cfg)
    a, b = corpus[args.a], corpus[args.b]
    frames = interpolate(ck.params, a, b, args.steps)
    out = Path(args.out) / "interpolate"
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, v in enumerate(frames):
        save_mesh(a.with_vertices(v), out / f"step_{i:03d}.off")
        rows.append((i, analysis.metric_rcd(v, a.vertices), analysis.metric_rcd(v, b.vertices)))
    analysis.write_csv(Path(args.out) / "interpolate.csv", ("step", "RCD_to_a", "RCD_to_b"), rows)
    print(f"wrote {len(frames)} frames to {out}")


def cmd_pca_baseline(args, cfg):
    corpus = _corpus(args, cfg)
    folds = args.folds if args.folds is not None else cfg.folds
    rows = pca_baseline(corpus, args.latents or list(cfg.latents), folds, cfg.seed)
    fields = ("latent", "fold", "L2", "RCD", "chamfer", "E")
    analysis.write_csv(Path(args.out) / "pca_baseline.csv", fields, _rows(rows, fields))
    for d in sorted({r["latent"] for r in rows}):
        sel = [r for r in rows if r["latent"] == d]
        print(f"d={d}: chamfer {np.mean([r['chamfer'] for r in sel]):.4f}, "
              f"E {np.mean([r['E'] for r in sel]):.3f}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gcnbvae", description=__doc__)
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--seed", type=int, help="master seed (overrides the configuration)")
    p.add_argument("--out", default="out", help="output directory")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, data=True, ckpt=False):
        s = sub.add_parser(name)
        s.set_defaults(fn=fn)
        if data:
            s.add_argument("--data", help="directory of OFF/OBJ meshes (default: synthetic corpus)")
        if ckpt:
            s.add_argument("--checkpoint", required=True)
        return s

    add("gen-data", cmd_gen_data, data=False)
    add("align-report", cmd_align_report)
    s = add("train", cmd_train)
    s.add_argument("--epochs", type=int)
    s.add_argument("--arm", default="procaug", choices=["procaug", "scale-only", "rotation-only", "none"])
    s = add("eval", cmd_eval, ckpt=True)
    s.add_argument("--bins", type=int, default=20)
    for name, fn in (("ablate", cmd_ablate), ("sweep", cmd_sweep)):
        s = add(name, fn)
        s.add_argument("--epochs", type=int)
        s.add_argument("--folds", type=int)
        if name == "ablate":
            s.add_argument("--arms", nargs="+", default=["procaug", "scale-only", "rotation-only", "none"])
        else:
            s.add_argument("--latents", type=int, nargs="+")
            s.add_argument("--betas", type=float, nargs="+")
    add("rank-modes", cmd_rank_modes, ckpt=True)
    s = add("extrapolate", cmd_extrapolate, ckpt=True)
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--scale", type=float, default=0.5)
    s.add_argument("--count", type=int, default=32)
    s.add_argument("--scales", type=float, nargs="+", default=[0.25, 0.5, 0.75])
    s = add("interpolate", cmd_interpolate, ckpt=True)
    s.add_argument("--a", type=int, default=0)
    s.add_argument("--b", type=int, default=1)
    s.add_argument("--steps", type=int, default=8)
    s = add("pca-baseline", cmd_pca_baseline)
    s.add_argument("--latents", type=int, nargs="+")
    s.add_argument("--folds", type=int)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = _config(args)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    args.fn(args, cfg)
    return 0


if __name__ == "__main__":
    sys.exit(main())

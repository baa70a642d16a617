"""Command-line entry point: ``umdr <command> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from .config import RunConfig, preset


def _global_flags(defaults: bool) -> argparse.ArgumentParser:
    # shared by the top-level parser and every subcommand, so flags work on either side
    p = argparse.ArgumentParser(add_help=False)
    kw = {} if defaults else {"default": argparse.SUPPRESS}
    p.add_argument("--config", help="JSON file of dotted config keys", **({"default": None} if defaults else kw))
    p.add_argument("--seed", type=int, **({"default": None} if defaults else kw))
    p.add_argument("--out", help="output path", **({"default": None} if defaults else kw))
    p.add_argument("-v", "--verbose", action="store_true", **({"default": False} if defaults else kw))
    return p


def _parse_set(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def _run_config(args, **extra) -> RunConfig:
    cfg = preset(args.preset)
    if args.config:
        cfg = RunConfig.load(args.config, cfg)
    flat = _parse_set(getattr(args, "set", None))
    flat.update({k: v for k, v in extra.items() if v is not None})
    if args.seed is not None:
        flat["seed"] = args.seed
    return RunConfig.from_flat(flat, cfg) if flat else cfg


def _need_out(args, what):
    if not args.out:
        raise SystemExit(f"{what} needs --out")
    return args.out


def _dump(obj):
    print(json.dumps(obj, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(args):
    from .data import generate_synthetic_dataset
    out = _need_out(args, "synth-data")
    seed = 0 if args.seed is None else args.seed
    man = generate_synthetic_dataset(out, num_classes=args.classes, n_per_class=args.n_per_class,
                                     T=args.frames, H=args.size, W=args.size, seed=seed,
                                     n_val_per_class=args.n_val_per_class)
    _dump({"root": out, "classes": man.class_names, "train_samples": len(man.sample_ids), "seed": seed})


def cmd_train(args):
    from .train import load_checkpoint, train
    cfg = _run_config(args, dataset=args.dataset, modality=args.modality, epochs=args.epochs)
    out = _need_out(args, "train")
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None:
        cfg = resume.config
    res = train(cfg, out_dir=out, resume=resume, stop_after=args.stop_after)
    last = res.metrics[-1] if res.metrics else {}
    _dump({"checkpoint": out, "epoch": res.checkpoint.epoch,
           "train_top1": last.get("train_top1"), "val_top1": last.get("val_top1")})


def cmd_eval(args):
    from .train import evaluate, load_checkpoint
    ckpt = load_checkpoint(args.ckpt)
    dataset = args.dataset or ckpt.config.dataset
    acc = evaluate(ckpt, dataset, args.split, args.modality)
    _dump({"checkpoint": args.ckpt, "dataset": dataset, "split": args.split, "top1": acc})


def cmd_augment(args):
    from .augment import MixParams, shufflemix_plus
    from .data import load_manifest, load_sample
    from .tensor_io import write_tensor
    out = _need_out(args, "augment")
    man = load_manifest(args.input, args.split)
    params = MixParams(alpha_m=args.alpha_m, alpha_s=args.alpha_s, rho=args.rho,
                       mix_geometry=args.geometry, granularity=args.granularity)
    rng = np.random.default_rng(0 if args.seed is None else args.seed)
    order = rng.permutation(len(man.sample_ids))
    samples, labels = [], {}
    k = 0
    for b in range(0, len(order), args.batch_size):
        idx = order[b:b + args.batch_size]
        if len(idx) < 2:
            break  # mixing needs a partner
        batch = [load_sample(man, man.sample_ids[i]) for i in idx]
        for i, m in zip(idx, shufflemix_plus(batch, params, rng)):
            sid = f"mix_{k:05d}"
            k += 1
            write_tensor(m.rgb.frames, os.path.join(out, sid, "rgb.umdt"))
            write_tensor(m.depth.frames, os.path.join(out, sid, "depth.umdt"))
            samples.append({"id": sid, "label": int(np.argmax(m.label)), "T": int(m.rgb.frames.shape[0]),
                            "split": args.split})
            labels[sid] = {"label": [float(v) for v in m.label], "kind": m.kind,
                           "source": man.sample_ids[i], "partner": man.sample_ids[idx[m.partner]],
                           "lam": float(m.lam)}
    H, W = batch[0].rgb.frames.shape[-2:]
    with open(os.path.join(out, "manifest.json"), "w") as f:
        json.dump({"classes": man.class_names, "samples": samples, "seed": args.seed, "H": int(H),
                   "W": int(W)}, f, indent=1, sort_keys=True)
    with open(os.path.join(out, "labels.json"), "w") as f:
        json.dump(labels, f, indent=1, sort_keys=True)
    _dump({"out": out, "samples": len(samples)})


def cmd_fuse(args):
    from .fusion import save_fusion, train_fusion
    from .train import load_checkpoint, load_data
    rgb, depth = load_checkpoint(args.rgb_ckpt), load_checkpoint(args.depth_ckpt)
    cfg = rgb.config
    if args.config:
        cfg = RunConfig.load(args.config, cfg)
    dataset = args.dataset or cfg.dataset
    res = train_fusion(rgb, depth, load_data(dataset, "train"), load_data(dataset, "val"),
                       strategy=args.strategy, epochs=args.epochs, seed=args.seed, cfg=cfg)
    report = {"strategy": args.strategy, "val_top1": res.val_top1, "unimodal_val_top1": res.unimodal_val_top1}
    if args.out and res.model is not None:
        save_fusion(res.model, args.out, args.rgb_ckpt, args.depth_ckpt,
                    extra={"dataset": dataset, "metrics": res.metrics})
        report["checkpoint"] = args.out
    _dump(report)


def cmd_analyze_similarity(args):
    from .diagnostics import cosine_similarity_report, pca_project
    from .fusion import fusion_forward, load_fusion, unimodal_outputs
    from .train import load_checkpoint, load_data
    model, meta = load_fusion(args.ckpt)
    rgb, depth = load_checkpoint(meta["rgb_ckpt"]), load_checkpoint(meta["depth_ckpt"])
    dataset = args.dataset or meta["extra"].get("dataset") or rgb.config.dataset
    data = load_data(dataset, args.split)
    u_r, u_d = unimodal_outputs(rgb, data.rgb), unimodal_outputs(depth, data.depth)
    import torch
    with torch.no_grad():
        fo = fusion_forward(u_r, u_d, model)
    tok = cosine_similarity_report(u_r.cls_token.numpy(), u_d.cls_token.numpy())
    comp = cosine_similarity_report(fo.comp_r.numpy(), fo.comp_d.numpy())
    out = args.out or "similarity.json"
    report = {
        "dataset": dataset, "split": args.split, "n": len(data),
        "labels": [int(v) for v in data.labels],
        "class_token": {"cosines": tok.cosines.tolist(), "mean": tok.mean, "mean_abs": tok.mean_abs,
                        "zero_vector_warning": tok.warning},
        "complementary": {"cosines": comp.cosines.tolist(), "mean": comp.mean, "mean_abs": comp.mean_abs,
                          "zero_vector_warning": comp.warning},
        "pca": {
            "class_token": pca_project(np.concatenate([u_r.cls_token.numpy(), u_d.cls_token.numpy()])).tolist(),
            "complementary": pca_project(np.concatenate([fo.comp_r.numpy(), fo.comp_d.numpy()])).tolist(),
            "rows": "first n rows are rgb / color-oriented, last n depth / depth-oriented",
        },
    }
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    with open(out, "w") as f:
        json.dump(report, f, indent=1)
    csv_path = os.path.splitext(out)[0] + ".csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["index", "label", "cos_class_token", "cos_complementary"])
        for i in range(len(data)):
            w.writerow([i, int(data.labels[i]), repr(float(tok.cosines[i])), repr(float(comp.cosines[i]))])
    _dump({"report": out, "csv": csv_path, "class_token_mean_abs": tok.mean_abs,
           "complementary_mean_abs": comp.mean_abs})


def cmd_gradcheck(args):
    from .gradcheck import PRESETS, gradcheck
    mods = PRESETS if args.module == "all" else [args.module]
    reports = [gradcheck(m, epsilon=args.epsilon, tol=args.tol, seed=args.seed or 0).as_dict()
               for m in mods]
    if args.out:
        with open(args.out, "w") as f:
            json.dump(reports, f, indent=1)
    for r in reports:
        print(f"{r['module']:10s} max_rel_err={r['max_rel_err']:.3e} {'PASS' if r['passed'] else 'FAIL'}")
    return 0 if all(r["passed"] for r in reports) else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="umdr", parents=[_global_flags(True)],
                                description="Unimodal training, ShuffleMix+ augmentation and CFCer fusion on RGB-D clips.")
    sub = p.add_subparsers(dest="command", required=True)
    g = [_global_flags(False)]

    s = sub.add_parser("synth-data", parents=g, help="generate the synthetic RGB-D dataset")
    s.add_argument("--classes", type=int, default=8)
    s.add_argument("--n-per-class", type=int, default=32)
    s.add_argument("--n-val-per-class", type=int, default=None)
    s.add_argument("--frames", type=int, default=16)
    s.add_argument("--size", type=int, default=32)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", parents=g, help="train a unimodal network")
    s.add_argument("--preset", default="umdr-tiny")
    s.add_argument("--dataset")
    s.add_argument("--modality", choices=("rgb", "depth"))
    s.add_argument("--epochs", type=int)
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    s.add_argument("--resume", help="checkpoint directory to continue from")
    s.add_argument("--stop-after", type=int, help="stop after this many epochs")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=g, help="top-1 of a unimodal checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--dataset")
    s.add_argument("--split", default="val")
    s.add_argument("--modality", choices=("rgb", "depth"))
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("augment", parents=g, help="write ShuffleMix+ mixed samples")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--alpha-m", type=float, default=0.8)
    s.add_argument("--alpha-s", type=float, default=0.2)
    s.add_argument("--rho", type=float, default=0.5)
    s.add_argument("--geometry", choices=("discrete", "continuous"), default="discrete")
    s.add_argument("--granularity", choices=("batch", "pair"), default="batch")
    s.add_argument("--batch-size", type=int, default=16)
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("fuse", parents=g, help="fuse rgb and depth checkpoints")
    s.add_argument("--rgb-ckpt", required=True)
    s.add_argument("--depth-ckpt", required=True)
    s.add_argument("--strategy", choices=("add", "mul", "cfcer"), default="cfcer")
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--dataset")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("analyze-similarity", parents=g, help="cosine curves and PCA of fused features")
    s.add_argument("--ckpt", required=True, help="CFCer checkpoint written by 'fuse'")
    s.add_argument("--dataset")
    s.add_argument("--split", default="val")
    s.set_defaults(func=cmd_analyze_similarity)

    s = sub.add_parser("gradcheck", parents=g, help="finite-difference gradient checks")
    s.add_argument("--module", default="all")
    s.add_argument("--epsilon", type=float, default=1e-5)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = args.func(args)
    except (FileNotFoundError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())

"""Command-line pipeline: gen-data, split, train-ccnet, train, eval, baseline, cam, report.

Every subcommand accepts --config (JSON run configuration) and --seed (which
overrides the config's seed). All outputs land under the configured output
directory. Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch

from shufa import corpus as corpus_mod
from shufa.cam import compute_cam, render_overlay
from shufa.config import ConfigError, RunConfig, load_config, save_config
from shufa.corpus import ManifestError, TripletSamplingError, load_manifest, write_manifest
from shufa.fewshot import (
    BASELINE_ARCHS,
    confusion_matrix,
    make_baseline,
    shot_sweep,
    train_baseline,
    write_confusion_csv,
)
from shufa.nets import ConvNet, load_checkpoint, preprocess, save_checkpoint
from shufa.reporting import generate_report
from shufa.synthesis import base_glyphs, synthesize_corpus
from shufa.trainer import (
    hold_out_validation,
    load_bundle,
    train_ccnet,
    train_shufanet,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the contract wants 1
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="shufa", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def common(p):
        p.add_argument("--config", type=Path, help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out-dir", type=Path, help="override the config output directory")

    p = sub.add_parser("gen-data", help="synthesize the glyph corpus and its manifest")
    common(p)
    p.add_argument("--emit-config", type=Path, metavar="PATH",
                   help="also write the effective config JSON to PATH")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("split", help="split a manifest into s1/s2/squery")
    common(p)
    p.add_argument("--manifest", type=Path, help="input manifest (default: <out>/corpus/manifest.jsonl)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train-ccnet", help="pretrain the script-category network on s2")
    common(p)
    p.add_argument("--s2", type=Path, help="s2 manifest (default: <out>/splits/s2.jsonl)")
    p.add_argument("--epochs", type=int, help="override ccnet_epochs")
    p.set_defaults(func=cmd_train_ccnet)

    p = sub.add_parser("train", help="train the triplet embedder on s1")
    common(p)
    p.add_argument("--sa", dest="sa", action="store_true", default=True,
                   help="enable nine-palace attention (default)")
    p.add_argument("--no-sa", dest="sa", action="store_false", help="disable attention")
    p.add_argument("--s1", type=Path, help="s1 manifest (default: <out>/splits/s1.jsonl)")
    p.add_argument("--ccnet", type=Path, help="category-net checkpoint (default: <out>/ccnet/ccnet.pt)")
    p.add_argument("--resume", type=Path, help="resume from a checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="N-way K-shot evaluation on squery")
    common(p)
    p.add_argument("--squery", type=Path, help="query manifest (default: <out>/splits/squery.jsonl)")
    p.add_argument("--model", type=Path, help="embedder checkpoint (default: <out>/shufanet-sa/model.pt)")
    p.add_argument("--shots", type=str, help="comma-separated shot counts, e.g. 5,10,20")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="end-to-end writer classifier on the full manifest")
    common(p)
    p.add_argument("--arch", choices=BASELINE_ARCHS, default="vgg_small")
    p.add_argument("--manifest", type=Path, help="full manifest (default: <out>/corpus/manifest.jsonl)")
    p.add_argument("--epochs", type=int, help="override baseline_epochs")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("cam", help="class activation map overlay for a classifier checkpoint")
    common(p)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--class-index", type=int, required=True)
    p.add_argument("--colormap", default="jet")
    p.add_argument("--interp", choices=("bilinear", "nearest"), default="bilinear")
    p.add_argument("--out", type=Path, help="output PNG (default: <out>/cam/<image>_c<k>.png)")
    p.set_defaults(func=cmd_cam)

    p = sub.add_parser("report", help="aggregate CSVs into summary tables and figures")
    common(p)
    p.set_defaults(func=cmd_report)

    return parser


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "out_dir", None) is not None:
        cfg.out_dir = str(args.out_dir)
    cfg.validate()
    return cfg


def _out(cfg: RunConfig) -> Path:
    return Path(cfg.out_dir)


def cmd_gen_data(args) -> int:
    cfg = _load_run_config(args)
    syn = cfg.synthesis
    syn.seed = cfg.seed
    glyphs = base_glyphs(syn.chars_per_writer, syn.image_size, syn.seed)
    corpus_dir = _out(cfg) / "corpus"
    manifest = synthesize_corpus(syn, glyphs, corpus_dir)
    manifest_path = corpus_dir / "manifest.jsonl"
    write_manifest(manifest, manifest_path)
    save_config(cfg, _out(cfg) / "config.json")
    if args.emit_config:
        save_config(cfg, args.emit_config)
    print(f"wrote {len(manifest)} records to {manifest_path}")
    return 0


def cmd_split(args) -> int:
    cfg = _load_run_config(args)
    manifest_path = args.manifest or _out(cfg) / "corpus" / "manifest.jsonl"
    manifest = load_manifest(manifest_path)
    result = corpus_mod.split_dataset(
        manifest, seed=cfg.seed, query_ways=cfg.split.query_ways,
        s1_fraction=cfg.split.s1_fraction,
    )
    splits_dir = _out(cfg) / "splits"
    for name, part in (("s1", result.s1), ("s2", result.s2), ("squery", result.s_query)):
        write_manifest(part, splits_dir / f"{name}.jsonl")
    print(
        f"split {len(manifest)} records -> s1={len(result.s1)} s2={len(result.s2)} "
        f"squery={len(result.s_query)} ({cfg.split.query_ways} query writers)"
    )
    return 0


def cmd_train_ccnet(args) -> int:
    cfg = _load_run_config(args)
    s2_path = args.s2 or _out(cfg) / "splits" / "s2.jsonl"
    s2 = load_manifest(s2_path)
    epochs = args.epochs if args.epochs is not None else cfg.ccnet_epochs
    model, log = train_ccnet(s2, epochs=epochs, seed=cfg.seed, backbone_cfg=cfg.backbone)
    ccnet_dir = _out(cfg) / "ccnet"
    save_checkpoint(
        ccnet_dir / "ccnet.pt",
        backbone_cfg=cfg.backbone,
        seed=cfg.seed,
        step=epochs,
        state=model.state_dict(),
        extra_meta={"kind": "ccnet", "classes": list(corpus_mod.CATEGORIES)},
    )
    log.write_epoch_csv(ccnet_dir / "ccnet_curve.csv")
    _, valid = hold_out_validation(list(s2), cfg.seed)
    mat = confusion_matrix(
        model, valid, corpus_mod.CATEGORIES, lambda r: r.category,
        input_size=cfg.backbone.input_size,
    )
    write_confusion_csv(mat, corpus_mod.CATEGORIES, ccnet_dir / "ccnet_confusion.csv")
    acc = log.epochs[-1].accuracy
    print(f"ccnet trained ({epochs} epochs), validation accuracy {acc:.3f}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    s1_path = args.s1 or _out(cfg) / "splits" / "s1.jsonl"
    ccnet_path = args.ccnet or _out(cfg) / "ccnet" / "ccnet.pt"
    s1 = load_manifest(s1_path)
    state, _, net_cfg = load_checkpoint(ccnet_path, expected_cfg=cfg.backbone)
    ccnet = ConvNet(net_cfg, out_dim=5)
    ccnet.load_state_dict(state)
    model_id = "shufanet-sa" if args.sa else "shufanet-nosa"
    model_dir = _out(cfg) / model_id
    bundle, log = train_shufanet(
        s1,
        ccnet,
        sa_enabled=args.sa,
        cfg=cfg.train,
        backbone_cfg=cfg.backbone,
        seed=cfg.seed,
        checkpoint_dir=model_dir / "checkpoints",
        resume_from=args.resume,
    )
    from shufa.trainer import save_bundle

    save_bundle(model_dir / "model.pt", bundle, seed=cfg.seed, step=cfg.train.total_batches)
    log.write_step_csv(model_dir / "trainlog.csv")
    print(
        f"{model_id} trained for {cfg.train.total_batches} batches; "
        f"final loss {log.steps[-1].loss_total:.4f}" if log.steps else f"{model_id}: no steps run"
    )
    return 0


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    squery_path = args.squery or _out(cfg) / "splits" / "squery.jsonl"
    model_path = args.model or _out(cfg) / "shufanet-sa" / "model.pt"
    s_query = load_manifest(squery_path)
    bundle, _, meta = load_bundle(model_path, expected_cfg=cfg.backbone)
    model_id = "shufanet-sa" if meta.get("sa_enabled") else "shufanet-nosa"
    spec = cfg.episodes
    spec.seed = cfg.seed if spec.seed is None else spec.seed
    shots = spec.shots
    if args.shots:
        try:
            shots = tuple(int(s) for s in args.shots.split(","))
        except ValueError:
            raise UsageError(f"--shots expects comma-separated integers, got {args.shots!r}")
    report = shot_sweep(s_query, bundle, shots, spec, model_id=model_id)
    eval_dir = _out(cfg) / "eval"
    report.write_episode_csv(eval_dir / f"{model_id}_episodes.csv")
    report.write_summary_csv(eval_dir / f"{model_id}_summary.csv")
    for res in report.results:
        print(f"{model_id} {spec.ways}-way {res.shots}-shot: {res.mean:.4f} +/- {res.std:.4f}")
    return 0


def cmd_baseline(args) -> int:
    cfg = _load_run_config(args)
    manifest_path = args.manifest or _out(cfg) / "corpus" / "manifest.jsonl"
    manifest = load_manifest(manifest_path)
    epochs = args.epochs if args.epochs is not None else cfg.baseline_epochs
    model, log, classes, accuracy = train_baseline(
        manifest, arch=args.arch, epochs=epochs, seed=cfg.seed, cfg=cfg.backbone
    )
    base_dir = _out(cfg) / "baseline"
    save_checkpoint(
        base_dir / f"{args.arch}.pt",
        backbone_cfg=cfg.backbone,
        seed=cfg.seed,
        step=epochs,
        state=model.state_dict(),
        extra_meta={"kind": "baseline", "arch": args.arch, "classes": classes},
    )
    log.write_epoch_csv(base_dir / f"{args.arch}_curve.csv")
    print(f"{args.arch} trained ({epochs} epochs), validation accuracy {accuracy:.3f}")
    return 0


def _load_classifier(path: Path):
    state, meta, net_cfg = load_checkpoint(path)
    kind = meta.get("kind")
    if kind == "ccnet":
        model = ConvNet(net_cfg, out_dim=5)
    elif kind == "baseline":
        model = make_baseline(meta["arch"], len(meta["classes"]), net_cfg)
    else:
        raise ValueError(
            f"checkpoint kind {kind!r} has no classifier head; cam needs ccnet or baseline"
        )
    model.load_state_dict(state)
    model.eval()
    return model, meta, net_cfg


def cmd_cam(args) -> int:
    cfg = _load_run_config(args)
    model, meta, net_cfg = _load_classifier(args.checkpoint)
    image = preprocess(args.image, net_cfg.input_size)
    heatmap = compute_cam(image, model, args.class_index, mode=args.interp)
    out_path = args.out or _out(cfg) / "cam" / f"{args.image.stem}_c{args.class_index}.png"
    render_overlay(image, heatmap, out_path, colormap=args.colormap)
    print(f"wrote {out_path}")
    return 0


def cmd_report(args) -> int:
    cfg = _load_run_config(args)
    written = generate_report(_out(cfg))
    if not written:
        print(f"no report inputs found under {cfg.out_dir}")
        return 0
    for path in written:
        print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "command", None) is None:
            parser.print_usage(sys.stderr)
            return 1
        torch.manual_seed(0)  # commands reseed from their own config
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (
        ConfigError,
        ManifestError,
        TripletSamplingError,
        FileNotFoundError,
        OSError,
        ValueError,
        RuntimeError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()

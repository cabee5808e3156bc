"""Command-line front end.

Subcommands: gen-data, train, eval, ablate, metrics, geometry align. Every
command accepts --config <json> and --seed; results are printed as JSON to
stdout or written to --out. Exit codes: 0 success, 1 invalid input or
runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import data, dsp, geometry, harness
from .errors import PiaveError
from .model import ExtractionModel, ModelConfig


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _emit(obj: dict | list, out: str | None) -> None:
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _corpus_config(cfg_dict: dict, seed: int | None) -> data.CorpusConfig:
    cfg = data.CorpusConfig.from_json_dict(cfg_dict) if cfg_dict else data.CorpusConfig()
    if seed is not None:
        cfg.seed = seed
    cfg.validate()
    return cfg


def _model_config(cfg_dict: dict) -> ModelConfig:
    return ModelConfig.from_json_dict(cfg_dict.get("model", {})) if cfg_dict.get("model") \
        else ModelConfig()


def _train_config(cfg_dict: dict, seed: int | None) -> harness.TrainConfig:
    cfg = harness.TrainConfig.from_json_dict(cfg_dict.get("train", {}))
    if seed is not None:
        cfg.seed = seed
    cfg.validate()
    return cfg


def _cmd_gen_data(args) -> int:
    cfg = _corpus_config(_load_config(args.config), args.seed)
    manifest = data.build_corpus(cfg, args.out_dir)
    _emit(
        {
            "out_dir": str(args.out_dir),
            "n_items": len(manifest["items"]),
            "seed": cfg.seed,
            "splits": {
                s: sum(1 for it in manifest["items"] if it["split"] == s)
                for s in ("train", "val", "test")
            },
        },
        args.out,
    )
    return 0


def _cmd_train(args) -> int:
    cfg_dict = _load_config(args.config)
    corpus = data.Corpus(args.corpus)
    model_cfg = _model_config(cfg_dict)
    model_cfg.sample_rate = corpus.config.sample_rate
    model_cfg.fps = corpus.config.fps
    train_cfg = _train_config(cfg_dict, args.seed)
    if args.init_from:
        model = ExtractionModel.load(args.init_from)
        if "train" not in cfg_dict or "lr_init" not in cfg_dict.get("train", {}):
            train_cfg.lr_init = 1e-4  # fine-tune default
    else:
        model = ExtractionModel(model_cfg, seed=train_cfg.seed)

    def log(record):
        sys.stderr.write(
            f"epoch {record['epoch']}: loss {record['train_loss']:.3f} "
            f"val SI-SDR {record['val_si_sdr']:.3f} lr {record['lr']:.2e}\n"
        )

    model, history = harness.train(model, corpus, train_cfg, log=log if args.verbose else None)
    model.save(args.model_out)
    _emit({"checkpoint": str(args.model_out), "history": history}, args.out)
    return 0


def _cmd_eval(args) -> int:
    corpus = data.Corpus(args.corpus)
    model = ExtractionModel.load(args.model)
    report = harness.evaluate(
        model, corpus, split=args.split, view=args.view, seed=args.seed or 0
    )
    _emit(report.to_json_dict(), args.out)
    return 0


def _cmd_ablate(args) -> int:
    cfg_dict = _load_config(args.config)
    corpus = data.Corpus(args.corpus)
    model_cfg = _model_config(cfg_dict)
    model_cfg.sample_rate = corpus.config.sample_rate
    model_cfg.fps = corpus.config.fps
    train_cfg = _train_config(cfg_dict, args.seed)
    seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    report = harness.run_ablation(corpus, model_cfg, train_cfg, seeds=seeds)
    _emit(report, args.out)
    return 0


def _cmd_metrics(args) -> int:
    est = dsp.read_wav(args.est)
    ref = dsp.read_wav(args.ref)
    records = [
        dsp.si_sdr(est, ref).to_json_dict(),
        dsp.sdr(est, ref).to_json_dict(),
        dsp.stoi(est, ref).to_json_dict(),
    ]
    _emit(records, args.out)
    return 0


def _cmd_geometry_align(args) -> int:
    posed, _ = geometry.load_mesh(args.posed)
    reference, _ = geometry.load_mesh(args.reference)
    if args.landmarks:
        indices = [int(i) for i in args.landmarks.split(",") if i != ""]
    else:
        indices = list(range(reference.m))
    pose = geometry.self_align(posed, reference, indices)
    _emit(pose.to_json_dict(), args.out)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="piave", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", help="write result JSON here instead of stdout")

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="train the extraction model")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--model-out", required=True)
    p.add_argument("--init-from", help="checkpoint to fine-tune from (lr 1e-4)")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument(
        "--view", default="all", choices=["all"] + [v.value for v in data.ALL_VIEWS]
    )
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("ablate", help="train and compare ablation variants")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--seeds", default="0", help="comma-separated training seeds")
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("metrics", help="compare two WAV files")
    common(p)
    p.add_argument("--est", required=True)
    p.add_argument("--ref", required=True)
    p.set_defaults(fn=_cmd_metrics)

    p = sub.add_parser("geometry", help="geometry utilities")
    geo_sub = p.add_subparsers(dest="geometry_command", required=True)
    g = geo_sub.add_parser("align", help="align a posed mesh to a reference mesh")
    common(g)
    g.add_argument("--posed", required=True, help="pose-dependent mesh JSON")
    g.add_argument("--reference", required=True, help="pose-invariant mesh JSON")
    g.add_argument("--landmarks", help="comma-separated vertex indices (default: all)")
    g.set_defaults(fn=_cmd_geometry_align)

    return parser


def cli(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (PiaveError, OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()

"""Command-line driver: train / encode / decode / eval / ablate / bench.

Config files are INI key=value sections; ``--set section.key=value``
overrides win.  Every run writes a manifest JSON with the full effective
configuration so it can be reproduced byte-for-byte in deterministic mode
(env var DIFFCODEC_DETERMINISTIC=1).

Exit codes: 0 success, 2 config error, 3 stream error, 4 invariant
violation.
"""

import argparse
import configparser
import dataclasses
import json
import os
import sys

import torch

from . import __version__
from .config import ModelConfig
from .errors import (ConfigError, InvariantError, RejectedInputError,
                     StreamExhaustedError)
from .metrics import RdCurve, bd_metric, bd_rate, rows_to_csv, rows_to_markdown

_KNOWN_SECTIONS = {
    "model": set(f.name for f in dataclasses.fields(ModelConfig)),
    "sequence": {"intra_period", "lambda_index", "DS", "D", "seed"},
    "train": {"steps_per_epoch", "n_clips", "clip_frames", "clip_size", "seed"},
}


def _load_config(path, overrides):
    cfg = {s: {} for s in _KNOWN_SECTIONS}
    if path is not None:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise ConfigError(f"cannot read config file {path}")
        for section in parser.sections():
            if section not in _KNOWN_SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, val in parser.items(section):
                if key not in _KNOWN_SECTIONS[section]:
                    raise ConfigError(f"unknown key {section}.{key}")
                cfg[section][key] = val
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must be section.key=value: {item!r}")
        target, val = item.split("=", 1)
        section, key = target.split(".", 1)
        if section not in _KNOWN_SECTIONS or key not in _KNOWN_SECTIONS[section]:
            raise ConfigError(f"unknown override {target}")
        cfg[section][key] = val
    return cfg


def _coerce(section):
    out = {}
    for k, v in section.items():
        try:
            out[k] = json.loads(v)
        except (json.JSONDecodeError, TypeError):
            out[k] = v
    return out


def _write_manifest(out_dir, args, cfg):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "version": __version__,
        "deterministic": _deterministic(),
        "argv": sys.argv[1:],
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "config": cfg,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True, default=str)
    return path


def _deterministic():
    return os.environ.get("DIFFCODEC_DETERMINISTIC", "") == "1"


def _setup_determinism(seed):
    if _deterministic():
        torch.manual_seed(seed)
        torch.set_num_threads(1)


def _model_config(cfg):
    return ModelConfig.from_dict(_coerce(cfg["model"])) if cfg["model"] \
        else ModelConfig()


def _load_model(path):
    from .model import CodecModel
    if path is None:
        raise ConfigError("--model checkpoint path is required")
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint not found: {path}")
    return CodecModel.load(path)


def _load_frames(args):
    from . import pipeline
    if args.yuv_size:
        w, h = (int(v) for v in args.yuv_size.lower().split("x"))
        if not args.frames:
            raise ConfigError("--frames is required for yuv input")
        return pipeline.load_yuv420(args.input, w, h, args.frames)
    frames = pipeline.load_png_folder(args.input)
    if args.frames:
        frames = frames[:args.frames]
    return frames


# -- subcommands -----------------------------------------------------------

def _parse_stages(spec):
    if "-" in spec:
        lo, hi = spec.split("-")
        stages = list(range(int(lo), int(hi) + 1))
    else:
        stages = [int(s) for s in spec.split(",")]
    if any(s < 0 or s > 8 for s in stages) or not stages:
        raise ConfigError(f"stages out of range 0-8: {spec!r}")
    return stages


def cmd_train(args, cfg):
    from .model import CodecModel
    from . import training
    tr = _coerce(cfg["train"])
    seed = args.seed if args.seed is not None else tr.get("seed", 0)
    _setup_determinism(seed)
    stages = _parse_stages(args.stages)
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "train_log.csv")

    if args.data == "synthetic":
        dataset = training.make_dataset(n_clips=tr.get("n_clips", 8),
                                        seed=seed,
                                        frames=tr.get("clip_frames", 7),
                                        size=tr.get("clip_size", 64))
    else:
        from . import pipeline
        frames = pipeline.load_png_folder(args.data)
        dataset = [frames]

    first = stages[0]
    if first == 0:
        model = CodecModel(_model_config(cfg))
    else:
        prev = os.path.join(args.out, f"stage{first - 1}.pt")
        if args.resume:
            prev = args.resume
        if not os.path.exists(prev):
            raise ConfigError(f"stage {first} needs the stage {first - 1} "
                              f"checkpoint ({prev}); run earlier stages first")
        model = CodecModel.load(prev)

    for sid in stages:
        if sid == 0:
            training.run_stage0(model, dataset, seed=seed, log_path=log_path)
        else:
            scfg = training.STAGE_TABLE[sid]
            training.run_stage(model, scfg, dataset,
                               steps_per_epoch=tr.get("steps_per_epoch", 50),
                               seed=seed + sid, log_path=log_path,
                               epochs=args.epochs_per_stage)
        model.save(os.path.join(args.out, f"stage{sid}.pt"))
        print(f"stage {sid} done")
    return 0


def cmd_encode(args, cfg):
    from . import pipeline
    model = _load_model(args.model)
    frames = _load_frames(args)
    seq = _coerce(cfg["sequence"])
    scfg = pipeline.SequenceConfig(
        width=frames.shape[-1], height=frames.shape[-2],
        frame_count=frames.shape[0],
        intra_period=args.intra_period or seq.get("intra_period", 32),
        lambda_index=args.lambda_index if args.lambda_index is not None
        else seq.get("lambda_index", 3.0),
        DS=args.DS or seq.get("DS", 50), D=args.D or seq.get("D", 25),
        seed=args.seed if args.seed is not None else seq.get("seed", 0))
    _setup_determinism(scfg.seed)
    want = args.recon_dir is not None
    result = pipeline.encode_sequence(frames, scfg, model,
                                      want_reconstructions=want)
    with open(args.output, "wb") as f:
        f.write(result.container.to_bytes())
    if want:
        pipeline.save_png_folder(result.reconstructions, args.recon_dir)
    print(f"bpp {result.bpp():.6f}")
    for t, bits in enumerate(result.frame_bits):
        print(f"frame {t}: {bits} bits")
    return 0


def cmd_decode(args, cfg):
    from . import pipeline
    model = _load_model(args.model)
    with open(args.input, "rb") as f:
        box = pipeline.BitstreamContainer.from_bytes(f.read())
    _setup_determinism(box.config.seed)
    frames = pipeline.decode_sequence(box, model,
                                      use_diffusion=not args.no_diffusion)
    pipeline.save_png_folder(frames, args.output)
    print(f"decoded {len(frames)} frames to {args.output}")
    return 0


def _bd_pair(pair):
    anchor_path, test_path = pair
    with open(anchor_path) as f:
        anchor = RdCurve.from_json(f.read())
    with open(test_path) as f:
        test = RdCurve.from_json(f.read())
    return {"anchor": anchor_path, "test": test_path,
            "bd_rate": str(bd_rate(anchor, test)),
            "bd_metric": str(bd_metric(anchor, test))}


def cmd_eval(args, cfg):
    pairs = [(args.anchor, args.test)] if args.anchor else []
    for spec in args.pair or []:
        if ":" not in spec:
            raise ConfigError(f"--pair needs anchor.json:test.json, got {spec!r}")
        pairs.append(tuple(spec.split(":", 1)))
    if not pairs:
        raise ConfigError("eval needs --anchor/--test or --pair")
    if args.jobs > 1 and len(pairs) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=args.jobs) as ex:
            rows = list(ex.map(_bd_pair, pairs))
    else:
        rows = [_bd_pair(p) for p in pairs]
    header = ["anchor", "test", "bd_rate", "bd_metric"]
    print(rows_to_markdown(rows, header))
    return 0


def cmd_ablate(args, cfg):
    from . import bench, training, pipeline
    import numpy as np
    model = _load_model(args.model)
    seq = _coerce(cfg["sequence"])
    seed = args.seed if args.seed is not None else seq.get("seed", 0)
    _setup_determinism(seed)
    if args.input:
        frames = pipeline.load_png_folder(args.input)
    else:
        frames = training.make_clip(np.random.default_rng(seed), frames=7,
                                    size=64)
    d_sweep = []
    if args.sweep:
        key, vals = args.sweep.split("=", 1)
        if key != "D":
            raise ConfigError(f"only D sweeps are supported, got {key!r}")
        d_sweep = [int(v) for v in vals.split(",")]
    scfg = pipeline.SequenceConfig(
        width=frames.shape[-1], height=frames.shape[-2],
        frame_count=frames.shape[0],
        intra_period=seq.get("intra_period", 32),
        lambda_index=seq.get("lambda_index", 3.0),
        DS=args.DS or seq.get("DS", 50),
        D=max(1, (args.DS or seq.get("DS", 50)) // 2), seed=seed)
    rows = bench.ablation_suite(model, frames, scfg, d_sweep=d_sweep)
    header = list(rows[0])
    print(rows_to_markdown(rows, header))
    if args.report:
        with open(args.report, "w") as f:
            f.write(rows_to_csv(rows, header))
    return 0


def cmd_bench(args, cfg):
    from .model import CodecModel
    from . import bench
    model = CodecModel.load(args.model) if args.model \
        else CodecModel(_model_config(cfg))
    _setup_determinism(args.seed or 0)
    w, h = (int(v) for v in args.frame_size.lower().split("x"))
    rep = bench.timing_report(model, frame_hw=(h, w), DS=args.DS,
                              repeats=args.repeats)
    for k, v in rep.items():
        print(f"{k}: {v:.6g}")
    return 0


# -- parser ----------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--set", action="append", dest="overrides",
                        metavar="SECTION.KEY=VALUE", help="config override")
    p = argparse.ArgumentParser(prog="diffcodec",
                                description="Learned conditional video codec "
                                            "with a diffusion decoder.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run training stages", parents=[common])
    t.add_argument("--stages", default="0-8")
    t.add_argument("--data", default="synthetic")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to start from")
    t.add_argument("--epochs-per-stage", type=int,
                   help="override table epochs (smoke runs)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", parents=[common], help="encode frames to a bitstream")
    e.add_argument("--model", required=True)
    e.add_argument("--input", required=True, help="png folder or yuv file")
    e.add_argument("--output", required=True)
    e.add_argument("--yuv-size", help="WxH for raw yuv input")
    e.add_argument("--frames", type=int)
    e.add_argument("--lambda-index", type=float, dest="lambda_index")
    e.add_argument("--intra-period", type=int)
    e.add_argument("--DS", type=int)
    e.add_argument("--D", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--recon-dir", help="also write encoder reconstructions")
    e.add_argument("--out", default=".")
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", parents=[common], help="decode a bitstream to png frames")
    d.add_argument("--model", required=True)
    d.add_argument("--input", required=True)
    d.add_argument("--output", required=True)
    d.add_argument("--no-diffusion", action="store_true")
    d.add_argument("--out", default=".")
    d.set_defaults(func=cmd_decode)

    v = sub.add_parser("eval", parents=[common], help="BD-rate / BD-metric between RD curves")
    v.add_argument("--anchor")
    v.add_argument("--test")
    v.add_argument("--pair", action="append",
                   metavar="ANCHOR.json:TEST.json")
    v.add_argument("--jobs", type=int, default=1)
    v.add_argument("--out", default=".")
    v.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="decode-mode ablation table")
    a.add_argument("--model", required=True)
    a.add_argument("--input", help="png folder (default: synthetic clip)")
    a.add_argument("--sweep", metavar="D=5,15,25")
    a.add_argument("--DS", type=int)
    a.add_argument("--seed", type=int)
    a.add_argument("--report", help="CSV output path")
    a.add_argument("--out", default=".")
    a.set_defaults(func=cmd_ablate)

    b = sub.add_parser("bench", parents=[common], help="step/trajectory timing report")
    b.add_argument("--model")
    b.add_argument("--frame-size", default="832x480")
    b.add_argument("--DS", type=int, default=50)
    b.add_argument("--repeats", type=int, default=20)
    b.add_argument("--seed", type=int)
    b.add_argument("--out", default=".")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args.config, args.overrides)
        _write_manifest(getattr(args, "out", "."), args, cfg)
        return args.func(args, cfg)
    except (ConfigError, RejectedInputError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except StreamExhaustedError as e:
        print(f"stream error: {e}", file=sys.stderr)
        return 3
    except InvariantError as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

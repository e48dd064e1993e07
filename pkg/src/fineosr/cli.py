"""Command-line entry point: ``fineosr {gen-data,train,eval,sample,ablate}``.

Exit codes: 0 success, 1 I/O failure, 2 usage/validation error,
3 numeric divergence.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, evaluation, experiment, synthdata, trainer
from .numkit import DivergenceError, Rng

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, inputs: dict, outputs, config_path=None, extra=None) -> Path:
    out_dir = Path(out_dir)
    outputs = [Path(p) for p in outputs]
    cfg_hash = sha256_file(config_path) if config_path else None
    ids = json.dumps({"cmd": command, "inputs": inputs, "config": cfg_hash}, sort_keys=True)
    man = {
        "run_id": hashlib.sha256(ids.encode()).hexdigest()[:16],
        "command": command,
        "version": f"fineosr {__version__}",
        "config_path": str(config_path) if config_path else None,
        "config_sha256": cfg_hash,
        "inputs": inputs,
        "output_dir": str(out_dir),
        "files": {p.name: sha256_file(p) for p in outputs},
        "created_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    if extra:
        man.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return path


def _say(args, msg):
    if not args.quiet:
        print(msg)


# ---------------------------------------------------------------------------
# config handling


_SCALAR_FIELDS = [f for f in dataclasses.fields(trainer.TrainConfig) if f.name not in ("sgld", "restart_epochs")]


def _bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training config overrides (mirror config keys)")
    for f in _SCALAR_FIELDS:
        if f.name == "seed":
            continue
        typ = {"int": int, "float": float, "bool": _bool}[f.type if isinstance(f.type, str) else f.type.__name__]
        names = [f"--{f.name}"]
        if f.name == "T":
            names.append("--epochs")
        if f.name == "B":
            names.append("--batch-size")
        g.add_argument(*names, dest=f"cfg_{f.name}", type=typ, default=None)
    g.add_argument("--restart_epochs", dest="cfg_restart_epochs", type=int, nargs=2, default=None)
    g.add_argument("--sgld_steps", dest="cfg_sgld_steps", type=int, default=None)
    g.add_argument("--sgld_step_size", dest="cfg_sgld_step_size", type=float, default=None)
    g.add_argument("--sgld_noise_on", dest="cfg_sgld_noise_on", type=_bool, default=None)


def resolve_config(args) -> trainer.TrainConfig:
    base = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from exc
        except ValueError as exc:
            raise UsageError(f"config parse error: {exc}") from exc
        if not isinstance(base, dict):
            raise UsageError("config must be a JSON object")
    over = {}
    for k, v in vars(args).items():
        if k.startswith("cfg_") and v is not None:
            over[k[4:]] = v
    sgld = dict(base.get("sgld", {}))
    for k in ("steps", "step_size", "noise_on"):
        if f"sgld_{k}" in over:
            sgld[k] = over.pop(f"sgld_{k}")
    merged = {**base, **over}
    if sgld:
        merged["sgld"] = sgld
    if args.seed is not None:
        merged["seed"] = args.seed
    try:
        return trainer.TrainConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = synthdata.DataConfig(K_total=args.classes, n_known=args.known, M=args.attrs, D=args.dim,
                               n_per_class=args.per_class, n_test_per_class=args.test_per_class,
                               noise_scale=args.noise, groups=args.groups,
                               seed=0 if args.seed is None else args.seed)
    if cfg.n_known > cfg.K_total or cfg.K_total < 2 * cfg.n_known:
        raise UsageError("--classes must be at least twice --known")
    try:
        data = synthdata.make_openset_data(cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    files = synthdata.save_openset_data(data, out)
    write_manifest(out, "gen-data", {"config": vars(cfg)}, files)
    _say(args, f"wrote {len(files)} files to {out}")
    return EXIT_OK


def _load_data(path, need_unknown=True) -> synthdata.OpenSetData:
    d = Path(path)
    if not (d / "dataset.json").exists():
        raise UsageError(f"{d} has no dataset.json manifest")
    names = synthdata.SPLIT_FILES if need_unknown else ("train", "known_test")
    missing = [n for n in names if not (d / f"{n}.csv").exists()]
    if missing:
        raise UsageError(f"missing split files: {', '.join(missing)}")
    try:
        return synthdata.load_openset_data(d)
    except synthdata.ParseError as exc:
        raise UsageError(str(exc)) from exc


def _data_hashes(path) -> dict:
    d = Path(path)
    return {p.name: sha256_file(p) for p in sorted(d.glob("*.csv"))}


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    data = _load_data(args.data, need_unknown=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_path = out / "config.json"
    cfg.save(cfg_path)
    resume = None
    if args.resume:
        resume = trainer.load_checkpoint(args.resume)
        if resume.config != cfg.to_dict():
            raise UsageError("--resume checkpoint was trained with a different config")
    td = experiment.train_data(data)

    def progress(state, rec):
        _say(args, f"epoch {rec['epoch']:4d}  cls {rec.get('cls', float('nan')):.4f}  "
                   f"recon {rec.get('recon', float('nan')):.4f}")

    ckpt_path = out / "checkpoint.bin"
    try:
        ckpt, log = trainer.train(cfg, td, resume=resume, stop_after=args.stop_after, callback=progress)
    except DivergenceError as exc:
        partial = out / "checkpoint.partial.bin"
        trainer.save_checkpoint(exc.checkpoint, partial)
        print(f"diverged: {exc}; partial checkpoint at {partial}", file=sys.stderr)
        return EXIT_DIVERGED
    known_test = data.known_test
    acc = float(np.mean(ckpt.model.logits(known_test.x).argmax(1) == data.known_index(known_test.y)))
    ckpt.meta = {"known_classes": data.split.known, "final_acc": acc}
    trainer.save_checkpoint(ckpt, ckpt_path)
    log_path = out / "train_log.csv"
    log.write_csv(log_path)
    write_manifest(out, "train", {"data": _data_hashes(args.data), "resume": args.resume},
                   [ckpt_path, log_path, cfg_path], cfg_path, {"final_acc": acc})
    _say(args, f"final closed-set ACC {acc:.4f}; checkpoint {ckpt_path}")
    return EXIT_OK


def _load_ckpt(path) -> trainer.Checkpoint:
    try:
        return trainer.load_checkpoint(path)
    except trainer.CheckpointError as exc:
        raise UsageError(f"cannot load checkpoint: {exc}") from exc


def cmd_eval(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    data = _load_data(args.data)
    dims = ckpt.model.dims
    if data.train.x.shape[1] != dims.D or data.cfg.n_known != dims.K or data.train.a.shape[1] != dims.M:
        raise UsageError(f"dataset shape (D={data.train.x.shape[1]}, K={data.cfg.n_known}) "
                         f"does not match checkpoint (D={dims.D}, K={dims.K})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = experiment.report_for(ckpt.model, data)
    bundle = evaluation.metrics_bundle(report)
    files = [out / "scores.csv", out / "metrics.json", out / "metrics.txt"]
    report.write_csv(files[0])
    evaluation.write_metrics(bundle, files[1], files[2])
    for kind in evaluation.SCORE_KINDS:
        p = out / f"hist_{kind}.svg"
        p.write_text(evaluation.score_histogram_svg(report, kind))
        files.append(p)
    write_manifest(out, "eval", {"checkpoint": sha256_file(args.checkpoint), "data": _data_hashes(args.data)}, files)
    _say(args, evaluation.metrics_text(bundle).rstrip())
    return EXIT_OK


def cmd_sample(args) -> int:
    if args.mode == "posterior" and not args.input:
        raise UsageError("--mode posterior requires --input")
    ckpt = _load_ckpt(args.checkpoint)
    x_in = None
    if args.input:
        try:
            x_in = synthdata.load_features_csv(args.input)
        except synthdata.ParseError as exc:
            raise UsageError(str(exc)) from exc
        if x_in.shape[1] != ckpt.model.dims.D:
            raise UsageError("--input feature width does not match the checkpoint")
    seed = 0 if args.seed is None else args.seed
    rng = Rng(seed).child("sample")
    sgld = trainer.TrainConfig.from_dict(ckpt.config).sgld_config()
    x = evaluation.generate(ckpt.model, args.mode, args.n, rng, x_in, sgld)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = [out / "samples.csv"]
    synthdata.write_features_csv(x, files[0])
    inputs = {"checkpoint": sha256_file(args.checkpoint), "mode": args.mode, "n": args.n, "seed": seed}
    if args.ref:
        ref = synthdata.load_features_csv(args.ref)
        ffd = evaluation.frechet_feature_distance(ref, x)
        p = out / "ffd.json"
        p.write_text(json.dumps({"mode": args.mode, "ffd": ffd, "n": args.n, "ref": str(args.ref)},
                                indent=2, sort_keys=True) + "\n")
        files.append(p)
        inputs["ref"] = sha256_file(args.ref)
        _say(args, f"FFD({args.mode}) = {ffd:.6f}")
    write_manifest(out, "sample", inputs, files)
    _say(args, f"wrote {args.n} samples to {files[0]}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = resolve_config(args)
    seed0 = 0 if args.seed is None else args.seed
    seeds = list(range(seed0, seed0 + args.seeds))
    dcfg = synthdata.DataConfig()

    def progress(seed, variant, res):
        _say(args, f"seed {seed} {variant:<8} medium AUROC "
                   f"{res.metrics['splits']['medium']['max_joint_energy']['auroc']:.4f}")

    table = experiment.ablation(base, seeds, dcfg, progress=progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = experiment.summarize(table)
    files = [out / "ablation.csv", out / "ablation.txt", out / "ablation_raw.json"]
    experiment.write_ablation(rows, files[0], files[1])
    files[2].write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    cfg_path = out / "config.json"
    base.save(cfg_path)
    files.append(cfg_path)
    write_manifest(out, "ablate", {"seeds": seeds, "data": vars(dcfg)}, files, cfg_path)
    _say(args, files[1].read_text().rstrip())
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default="out")
    common.add_argument("--config", default=None)
    common.add_argument("--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="fineosr", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"fineosr {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic open-set dataset")
    g.add_argument("--classes", type=int, default=16)
    g.add_argument("--known", type=int, default=8)
    g.add_argument("--attrs", type=int, default=16)
    g.add_argument("--dim", type=int, default=32)
    g.add_argument("--per-class", type=int, default=128)
    g.add_argument("--test-per-class", type=int, default=32)
    g.add_argument("--noise", type=float, default=0.3)
    g.add_argument("--groups", type=int, default=4)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--resume", default=None)
    t.add_argument("--stop-after", type=int, default=None, help="stop after this many epochs (for resumable runs)")
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", parents=[common], help="generate features from a trained model")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--mode", choices=("random", "posterior", "prior"), required=True)
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--input", default=None)
    s.add_argument("--ref", default=None)
    s.set_defaults(func=cmd_sample)

    a = sub.add_parser("ablate", parents=[common], help="run the ablation table")
    a.add_argument("--seeds", type=int, default=5)
    _add_config_flags(a)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

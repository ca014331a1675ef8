"""Command-line front end.

Verbs: ``synth`` renders a synthetic dataset to a directory of frames,
``train`` fits a network and writes a checkpoint plus a loss CSV, ``eval``
scores a checkpoint as a CMC curve, ``ablate`` runs one experiment grid, and
``gradcheck`` / ``oracle-check`` run the verification suites.  Every run
writes ``manifest.json`` (resolved config, seed, SHA-256 of each artifact) to
its output directory; identical commands on identical inputs produce
byte-identical CSVs.  The ``TSCN_THREADS`` environment variable caps worker
threads for ablation grids.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checks, config as cfgmod, data as datamod, evaluation as evalmod, network as nw
from .network import ConfigError
from .training import desk_config, trace_to_csv, train

PRESETS = ("baseline", "two_stream_multiscale", "three_stream_multiscale")


def _resolve_config(spec: str | None) -> cfgmod.ExperimentConfig:
    """A config argument is a file path or a named architecture preset."""
    if spec is None:
        spec = "baseline"
    path = Path(spec)
    if path.is_file():
        return cfgmod.load_config(path)
    if spec in PRESETS:
        return cfgmod.ExperimentConfig(network=nw.default_config(spec), train=desk_config())
    raise ConfigError(
        f"config {spec!r} is neither a file nor one of the presets {PRESETS}"
    )


def _finalize_config(args) -> cfgmod.ExperimentConfig:
    cfg = _resolve_config(getattr(args, "config", None))
    overrides = list(getattr(args, "override", None) or [])
    if getattr(args, "epochs", None) is not None:
        overrides.append(f"train.epochs={args.epochs}")
    if overrides:
        cfg = cfgmod.apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir: Path, verb: str, args_summary: dict,
                    cfg: cfgmod.ExperimentConfig | None, artifacts: list[Path]) -> None:
    manifest = {
        "verb": verb,
        "arguments": args_summary,
        "config": None if cfg is None else cfgmod.to_flat(cfg),
        "artifacts": {str(p.relative_to(out_dir)): _sha256(p) for p in sorted(artifacts)},
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _threads() -> int:
    raw = os.environ.get("TSCN_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"TSCN_THREADS must be an integer, got {raw!r}")


def _load_split(args, cfg: cfgmod.ExperimentConfig) -> datamod.DatasetSplit:
    if getattr(args, "data", None):
        samples = datamod.load_dataset(args.data)
        if not samples:
            raise datamod.DataError(f"no sequences found under {args.data}")
    else:
        samples = datamod.synth_generate(cfg.synth.num_ids, cfg.synth.cams,
                                         cfg.synth.frames_per_seq, cfg.synth.extent,
                                         seed=args.seed)
    return datamod.split(samples, seed=args.seed)


# ---------------------------------------------------------------------------
# Verbs
# ---------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    out = _out_dir(args)
    samples = datamod.synth_generate(args.ids, args.cams, args.frames, args.extent,
                                     seed=args.seed)
    datamod.export_dataset(samples, out)
    written = sorted(out.glob("person_*/cam_*/*.png"))
    print(f"wrote {len(samples)} sequences ({len(written)} frames) under {out}")
    _write_manifest(out, "synth",
                    {"ids": args.ids, "cams": args.cams, "frames": args.frames,
                     "extent": args.extent, "seed": args.seed},
                    None, written)
    return 0


def _cmd_train(args) -> int:
    cfg = _finalize_config(args)
    out = _out_dir(args)
    cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    ds = _load_split(args, cfg)
    net = nw.build(cfg.network, seed=args.seed)
    trace = train(net, ds, cfg.train)
    loss_csv = out / "loss.csv"
    loss_csv.write_text(trace_to_csv(trace), encoding="utf-8")
    ckpt = out / "checkpoint.npz"
    nw.save_checkpoint(net, ckpt)
    last = trace[-1]
    print(f"trained {cfg.network.architecture} for {last.epoch} epochs; "
          f"final total loss {last.total:.4f}")
    _write_manifest(out, "train", {"seed": args.seed, "data": args.data}, cfg,
                    [loss_csv, ckpt])
    return 0


def _cmd_eval(args) -> int:
    cfg = _finalize_config(args)
    out = _out_dir(args)
    ds = _load_split(args, cfg)
    net = nw.build(cfg.network, seed=args.seed)
    nw.load_checkpoint(net, args.checkpoint)
    curve = evalmod.evaluate(net, ds.test, replace(cfg.train, seed=args.seed))
    lines = ["rank,rate"]
    lines += [f"{r},{v:.12g}" for r, v in enumerate(curve.ranks, start=1)]
    cmc_csv = out / "cmc.csv"
    cmc_csv.write_text("\n".join(lines) + "\n", encoding="utf-8")
    cmc_svg = out / "cmc.svg"
    cmc_svg.write_text(evalmod.curves_svg({"test": curve}), encoding="utf-8")
    s = curve.summary()
    print("rank-1 %.3f  rank-5 %.3f  rank-10 %.3f  rank-20 %.3f" %
          (s[1], s[5], s[10], s[20]))
    _write_manifest(out, "eval",
                    {"seed": args.seed, "data": args.data, "checkpoint": str(args.checkpoint)},
                    cfg, [cmc_csv, cmc_svg])
    return 0


def _cmd_ablate(args) -> int:
    cfg = _finalize_config(args)
    out = _out_dir(args)
    seeds = [args.seed + i for i in range(args.seeds)]

    def progress(label: str, seed: int) -> None:
        print(f"[{args.kind}] {label} seed={seed}", flush=True)

    report = evalmod.run_ablation(args.kind, cfg, seeds, progress=progress,
                                  max_workers=_threads())
    csv_path = out / "report.csv"
    csv_path.write_text(evalmod.report_to_csv(report), encoding="utf-8")
    json_path = out / "report.json"
    json_path.write_text(evalmod.report_to_json(report), encoding="utf-8")
    artifacts = [csv_path, json_path]
    ok_cells = [c for c in report.cells if c.curves]
    if ok_cells:
        bars = evalmod.bars_svg([c.label for c in ok_cells],
                                [c.mean_summary()[1] for c in ok_cells])
        bars_path = out / "rank1.svg"
        bars_path.write_text(bars, encoding="utf-8")
        curves = {f"{c.label} s{report.seeds[i]}": curve
                  for c in ok_cells[:4] for i, curve in enumerate(c.curves)}
        curves_path = out / "curves.svg"
        curves_path.write_text(evalmod.curves_svg(curves), encoding="utf-8")
        artifacts += [bars_path, curves_path]
    for row in report.rows():
        tag = row["error"] or f"rank1={row['rank1']}"
        print(f"{row['label']:<24} {tag}")
    _write_manifest(out, "ablate", {"kind": args.kind, "seeds": seeds}, cfg, artifacts)
    failed = [c for c in report.cells if c.error]
    return 1 if len(failed) == len(report.cells) else 0


def _cmd_gradcheck(args) -> int:
    ok, results = checks.run_gradcheck(instances=args.instances, seed=args.seed)
    text = "\n".join(r.line() for r in results) + "\n"
    print(text, end="")
    out = _out_dir(args)
    report = out / "gradcheck.txt"
    report.write_text(text, encoding="utf-8")
    _write_manifest(out, "gradcheck", {"instances": args.instances, "seed": args.seed},
                    None, [report])
    print("gradcheck:", "ok" if ok else "FAILED")
    return 0 if ok else 1


def _cmd_oracle_check(args) -> int:
    ok, results = checks.run_oracle_check(instances=args.instances, seed=args.seed)
    text = "\n".join(r.line() for r in results) + "\n"
    print(text, end="")
    out = _out_dir(args)
    report = out / "oracle-check.txt"
    report.write_text(text, encoding="utf-8")
    _write_manifest(out, "oracle-check", {"instances": args.instances, "seed": args.seed},
                    None, [report])
    print("oracle-check:", "ok" if ok else "FAILED")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser, config: bool = True) -> None:
    p.add_argument("--out", default="out", help="output directory (default: ./out)")
    p.add_argument("--seed", type=int, default=0, help="base random seed")
    if config:
        p.add_argument("--config", default=None,
                       help="config file path or preset name "
                            "(baseline, two_stream_multiscale, three_stream_multiscale)")
        p.add_argument("--override", action="append", metavar="K=V",
                       help="config override like train.lr=0.001 (repeatable)")
        p.add_argument("--epochs", type=int, default=None, help="shortcut for train.epochs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streamfuse",
        description="Multi-stream fusion networks for sequence re-identification",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", help="render a synthetic dataset to a frame directory")
    p.add_argument("--ids", type=int, required=True, help="number of identities")
    p.add_argument("--cams", type=int, default=2)
    p.add_argument("--frames", type=int, default=20, help="frames per sequence")
    p.add_argument("--extent", type=int, default=32, help="square frame size in pixels")
    _add_common(p, config=False)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a network, writing checkpoint.npz and loss.csv")
    p.add_argument("--data", default=None, help="dataset root (omit to use synth.* config)")
    _add_common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on the test split as a CMC curve")
    p.add_argument("--data", default=None, help="dataset root (omit to use synth.* config)")
    p.add_argument("--checkpoint", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run one experiment grid")
    p.add_argument("kind", choices=list(evalmod.ABLATION_KINDS))
    p.add_argument("--seeds", type=int, default=3, help="number of seeds per cell")
    _add_common(p)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--instances", type=int, default=20)
    _add_common(p, config=False)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("oracle-check", help="brute-force oracle equivalence suite")
    p.add_argument("--instances", type=int, default=25)
    _add_common(p, config=False)
    p.set_defaults(func=_cmd_oracle_check)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, datamod.DataError, evalmod.EvalError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()

"""Command-line entry point: ``orformer <subcommand> ...``.

Exit status is 0 on success, 1 for invalid input (bad config, files, shapes)
and 2 when training or checking hits a numerical failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .autodiff import NonFiniteError
from .checkpoint import CheckpointError
from .heatmaps import (MAPPING_LANDMARKS, EdgeMapping, dump_heatmap, generate, read_annotations,
                       write_annotations, write_pgm, write_raw_f32)
from .model import ABLATION_MODES
from .synth import make_dataset, synthetic_mapping
from .train import (TrainConfig, TrainingAborted, evaluate, gradcheck_tiny, heldout_set, make_eval_set,
                    metrics_csv, model_from, train_stage1, train_stage2, training_set)

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


def _log(msg: str) -> None:
    print(msg, flush=True)


def _config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "mode", None):
        overrides["mode"] = args.mode
    return TrainConfig.from_dict({**cfg.to_dict(), **overrides}) if overrides else cfg


def _require_out(args) -> Path:
    if not args.out:
        raise ValueError(f"{args.command}: --out is required")
    return Path(args.out)


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _require_out(args)
    n = args.n if args.n is not None else cfg.n_train
    seed = args.seed if args.seed is not None else cfg.data_seed
    data = make_dataset(n, seed)
    ev = make_eval_set(data, seed, cfg.occ_area, args.occlude_p)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    write_raw_f32(out / "images.f32", data.images)
    write_raw_f32(out / "occluded.f32", ev.occluded)
    names = [f"img_{k:05d}" for k in range(n)]
    write_annotations(out / "annotations.txt", zip(names, data.landmarks))
    for name, mask in zip(names, ev.masks):
        write_pgm(out / "masks" / f"{name}.pgm", mask.astype(np.float64))
    (out / "mapping.txt").write_text(synthetic_mapping().format())
    _log(f"wrote {n} samples to {out}")
    return EXIT_OK


def _mapping(spec: str, n_landmarks: int | None) -> EdgeMapping:
    if spec.lower() in MAPPING_LANDMARKS:
        return EdgeMapping.bundled(spec)
    path = Path(spec)
    if not path.is_file():
        raise ValueError(f"mapping {spec!r} is neither a bundled name nor a file")
    edges = EdgeMapping.parse(path.read_text(), 10 ** 9).edges
    if not edges:
        raise ValueError(f"mapping file {spec} has no edges")
    # without --n-landmarks, the largest referenced index fixes the count
    return EdgeMapping(edges, n_landmarks or 1 + max(max(e) for e in edges), path.stem)


def cmd_gen_heatmaps(args) -> int:
    cfg = _config(args)
    out = _require_out(args)
    mapping = _mapping(args.mapping, args.n_landmarks)
    rows = read_annotations(args.annotations, mapping.n_landmarks)
    for name, lm in rows:
        dump_heatmap(out, Path(name).stem, generate(lm, mapping, cfg.h, cfg.w))
    _log(f"wrote {len(rows)} heatmaps ({mapping.n_edges} edges) to {out}")
    return EXIT_OK


def _save_aborted(exc: TrainingAborted, out: Path) -> int:
    if exc.checkpoint is not None:
        ckpt_io.save(exc.checkpoint, out)
        print(f"error: {exc}; last good checkpoint written to {out}", file=sys.stderr)
    else:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_NUMERIC


def cmd_train_stage1(args) -> int:
    cfg = _config(args)
    out = _require_out(args)
    data = training_set(cfg)
    try:
        result = train_stage1(data, cfg, log=_log)
    except TrainingAborted as exc:
        return _save_aborted(exc, out)
    ckpt_io.save(result.checkpoint, out)
    _log(f"stage1 checkpoint written to {out}")
    return EXIT_OK


def cmd_train_stage2(args) -> int:
    cfg = _config(args)
    out = _require_out(args)
    if not args.stage1:
        raise ValueError("train-stage2: --stage1 <checkpoint> is required")
    stage1 = ckpt_io.load(args.stage1)
    stage1.require_stage("stage1")
    data = training_set(cfg, cfg.n_train_stage2)
    try:
        result = train_stage2(stage1, data, cfg, cfg.mode, log=_log)
    except TrainingAborted as exc:
        return _save_aborted(exc, out)
    ckpt_io.save(result.checkpoint, out)
    _log(f"stage2 checkpoint written to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    rows = []
    sets = {}
    for path in args.checkpoints:
        ck = ckpt_io.load(path)
        model = model_from(ck)
        cfg = model.cfg
        if args.config:
            cfg = TrainConfig.load(args.config)
        key = (cfg.n_eval, cfg.eval_seed, cfg.occ_area)
        if key not in sets:
            sets[key] = heldout_set(cfg)
        tag = Path(path).stem if len(args.checkpoints) > 1 else ""
        rows.append(evaluate(model, sets[key], dump_alpha=_subdir(args.dump_alpha, tag),
                             dump_heatmaps=_subdir(args.dump_heatmaps, tag)))
    text = metrics_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def _subdir(base, tag):
    if not base:
        return None
    return Path(base) / tag if tag else Path(base)


def cmd_gradcheck(args) -> int:
    reports = gradcheck_tiny(args.seed or 0)
    ok = True
    for stage, rep in reports.items():
        _log(f"[{stage}] {rep}")
        ok &= rep.passed
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_dump_mapping(args) -> int:
    text = EdgeMapping.bundled(args.name).format()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Usage errors are validation errors: exit 1, not argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="orformer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, config=True):
        p = sub.add_parser(name, help=help_)
        if config:
            p.add_argument("--config", help="text config of 'key = value' lines")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.set_defaults(func=fn)
        return p

    p = add("gen-data", cmd_gen_data, "write a synthetic dataset")
    p.add_argument("--n", type=int, help="number of samples (default: n_train)")
    p.add_argument("--occlude-p", type=float, default=1.0, help="occluder probability per image")

    p = add("gen-heatmaps", cmd_gen_heatmaps, "edge heatmaps from an annotation file")
    p.add_argument("annotations")
    p.add_argument("--mapping", default="synthetic", help="bundled mapping name or mapping file")
    p.add_argument("--n-landmarks", type=int)

    add("train-stage1", cmd_train_stage1, "pre-train the quantized heatmap generator")

    p = add("train-stage2", cmd_train_stage2, "train ORFormer against a stage-1 checkpoint")
    p.add_argument("--stage1")
    p.add_argument("--mode", choices=ABLATION_MODES)

    p = add("eval", cmd_eval, "metrics CSV for stage-2 checkpoints")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--dump-alpha")
    p.add_argument("--dump-heatmaps")

    add("gradcheck", cmd_gradcheck, "finite-difference check of both training losses", config=False)

    p = add("dump-mapping", cmd_dump_mapping, "print a bundled edge mapping", config=False)
    p.add_argument("name", choices=sorted(MAPPING_LANDMARKS))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``dereflect <subcommand> ...``.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import cv2
import numpy as np
import yaml

from dereflect import __version__
from dereflect.errors import DereflectError, StageOrderError, ValidationError

log = logging.getLogger("dereflect")


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------- helpers


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file not found: {p}")
    data = yaml.safe_load(p.read_text()) or {}
    if not isinstance(data, dict):
        raise ValidationError(f"config {p} must be a mapping")
    return data


def _require_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise ValidationError(f"{what} directory not found: {p}")
    return p


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"{what} not found: {p}")
    return p


def write_run_manifest(out: Path, args: argparse.Namespace, config: dict, started: float, extra: dict | None = None):
    skip = {"func", "out"}
    arguments = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    manifest = {
        "subcommand": args.command,
        "arguments": arguments,
        "config": config,
        "seed": args.seed,
        "code_version": __version__,
        "wall_time_s": round(time.time() - started, 3),
    }
    if extra:
        manifest.update(extra)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _fit(img: np.ndarray, size: int) -> np.ndarray:
    """Resize the short side to ``size`` and centre-crop to a square."""
    h, w = img.shape[:2]
    if (h, w) == (size, size):
        return img
    s = size / min(h, w)
    resized = cv2.resize(img, (max(size, round(w * s)), max(size, round(h * s))), interpolation=cv2.INTER_AREA)
    top = (resized.shape[0] - size) // 2
    left = (resized.shape[1] - size) // 2
    return resized[top:top + size, left:left + size]


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------- synth / filter


def cmd_synth(args, config) -> int:
    from dereflect.datagen import ManifestRecord, generate_scene, write_manifest
    from dereflect.images import list_images, read_image, write_image
    from dereflect.textures import procedural_texture, reflection_texture

    if (args.t_dir is None) != (args.r_dir is None):
        raise ValidationError("--t-dir and --r-dir must be given together")
    if args.n < 1 or args.reflections < 1:
        raise ValidationError("--n and --reflections must be positive")
    out = Path(args.out)
    if args.t_dir is not None:
        t_paths = list_images(_require_dir(args.t_dir, "transmission"))
        r_paths = list_images(_require_dir(args.r_dir, "reflection"))
        if not t_paths or not r_paths:
            raise ValidationError("transmission and reflection directories must contain images")
    else:
        t_paths = r_paths = None

    def make_scene(i: int):
        rng = np.random.default_rng([args.seed, i])
        if t_paths is None:
            t = procedural_texture(rng, args.size)
            refl = [reflection_texture(rng, args.size) for _ in range(args.reflections)]
        else:
            t = _fit(read_image(t_paths[rng.integers(len(t_paths))]), args.size)
            refl = [_fit(read_image(r_paths[j]), args.size) for j in rng.integers(len(r_paths), size=args.reflections)]
        group = generate_scene(t, refl, rng, scene_id=f"scene{i:05d}")
        records = []
        write_image(out / "T" / f"{group.scene_id}.png", t)
        for k, tr in enumerate(group.triples):
            stem = f"{group.scene_id}_{k}"
            write_image(out / "R" / f"{stem}.png", tr.reflection)
            write_image(out / "M" / f"{stem}.png", tr.mixed)
            records.append(ManifestRecord(group.scene_id, f"T/{group.scene_id}.png", f"R/{stem}.png",
                                          f"M/{stem}.png", tr.coeffs.gamma1, tr.coeffs.gamma2))
        return records

    records = [r for recs in _map(make_scene, range(args.n), args.jobs) for r in recs]
    write_manifest(out / "manifest.jsonl", records)
    print(f"wrote {len(records)} triples from {args.n} scenes to {out}")
    return 0


def _load_triples(manifest: Path):
    from dereflect.datagen import MixCoefficients, MixTriple, read_manifest
    from dereflect.images import read_image

    base = manifest.parent
    out = []
    for rec in read_manifest(manifest):
        t, r, m = (read_image(base / p) for p in (rec.transmission, rec.reflection, rec.mixed))
        out.append((rec, MixTriple(t, r, m, MixCoefficients(rec.gamma1, rec.gamma2), rec.scene_id)))
    return out


def cmd_filter(args, config) -> int:
    from dereflect.datagen import ClipRealismScorer, HeuristicRealismScorer, filter_by_realism, write_manifest

    manifest = _require_file(args.manifest, "manifest")
    pairs = _load_triples(manifest)
    scorer = HeuristicRealismScorer() if args.scorer == "heuristic" else ClipRealismScorer()
    by_id = {id(tr): rec for rec, tr in pairs}
    kept = filter_by_realism([tr for _, tr in pairs], scorer, args.keep_fraction, args.threshold, with_scores=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for score, tr in kept:
        rec = by_id[id(tr)]
        moved = {k: os.path.relpath((manifest.parent / getattr(rec, k)).resolve(), out.resolve())
                 for k in ("transmission", "reflection", "mixed")}
        records.append(type(rec)(rec.scene_id, gamma1=rec.gamma1, gamma2=rec.gamma2, score=score, **moved))
    write_manifest(out / "manifest.jsonl", records)
    print(f"kept {len(records)} of {len(pairs)} triples")
    return 0


# --------------------------------------------------------------------------- align


def cmd_align(args, config) -> int:
    from dereflect.align import align_pair
    from dereflect.images import list_images, read_image, write_image

    mixed_dir = _require_dir(args.mixed, "mixed")
    gt_dir = _require_dir(args.gt, "ground-truth")
    gts = {p.stem: p for p in list_images(gt_dir)}
    pairs = [(p, gts[p.stem]) for p in list_images(mixed_dir) if p.stem in gts]
    if not pairs:
        raise ValidationError("no mixed/ground-truth pairs with matching file names")
    out = Path(args.out)
    cfg = config.get("align", {})

    def run(item):
        i, (mp, gp) = item
        rng = np.random.default_rng([args.seed, i])
        try:
            warped, valid, h, rep = align_pair(read_image(mp), read_image(gp), rng,
                                                ratio_threshold=cfg.get("ratio_threshold", 0.75),
                                                max_iters=cfg.get("max_iters", 2000),
                                                inlier_tol=cfg.get("inlier_tol", 2.0))
        except DereflectError as exc:
            return {"name": mp.stem, "error": str(exc)}
        write_image(out / "aligned" / f"{mp.stem}.png", warped)
        write_image(out / "masks" / f"{mp.stem}.png", np.repeat(valid[..., None].astype(float), 3, 2), bits=8)
        return {"name": mp.stem, "n_matches": rep.n_matches, "n_inliers": rep.n_inliers,
                "corner_shift_px": rep.corner_shift_px, "homography": h.matrix.tolist()}

    reports = _map(run, list(enumerate(pairs)), args.jobs)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "report.jsonl").open("w") as fh:
        for r in reports:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    failed = [r for r in reports if "error" in r]
    for r in failed:
        print(f"alignment failed for {r['name']}: {r['error']}", file=sys.stderr)
    return 2 if failed else 0


# --------------------------------------------------------------------------- train / infer


def load_scene_groups(manifest: Path):
    from dereflect.datagen import SceneGroup

    groups: OrderedDict[str, SceneGroup] = OrderedDict()
    for _, tr in _load_triples(manifest):
        g = groups.setdefault(tr.scene_id, SceneGroup(tr.transmission, [], tr.scene_id))
        g.triples.append(tr)
    if not groups:
        raise ValidationError(f"manifest {manifest} is empty")
    return list(groups.values())


def cmd_train(args, config) -> int:
    import torch

    from dereflect import trainer as T
    from dereflect.diffusion import NoiseSchedule
    from dereflect.network import ModelConfig, build_model

    manifest = _require_file(args.data, "training manifest")
    torch.set_num_threads(max(1, args.jobs))
    stage_overrides = dict(config.get("stages", {}))
    if args.steps is not None:
        for st in T.Stage:
            stage_overrides.setdefault(st.value, {})["steps"] = args.steps
    configs = T.default_stage_configs(args.seed, **stage_overrides)
    stages = list(T.Stage) if args.stage == "all" else [T.Stage(args.stage)]

    if args.checkpoint:
        model, sched, _ = T.load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    else:
        model = build_model(ModelConfig(**config.get("model", {})), seed=args.seed)
        sched = None
    if sched is None:
        sched = NoiseSchedule.scaled_linear(**config.get("schedule", {"t_max": 64}))
    # fail on ordering before any expensive data loading
    first = stages[0]
    need = T.PREREQUISITE[first]
    if need is not None and need.value not in model.completed_stages and not configs[first].allow_skip:
        raise StageOrderError(f"stage {first.value!r} requires completed stage {need.value!r}; "
                              f"pass --checkpoint from a {need.value!r} run")

    groups = load_scene_groups(manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    log_path.write_text("")
    sink = T.jsonl_sink(log_path)
    for st in stages:
        T.run_stage(groups, model, configs[st], sched, sink)
    T.save_checkpoint(model, out / "checkpoint.pt", sched,
                      extra={"stage_configs": {s.value: configs[s].to_dict() for s in stages}, "seed": args.seed})
    print(f"completed stages {model.completed_stages}; checkpoint at {out / 'checkpoint.pt'}")
    return 0


def cmd_infer(args, config) -> int:
    import torch

    from dereflect import trainer as T
    from dereflect.images import list_images, read_image, write_image
    from dereflect.network import infer

    torch.set_num_threads(max(1, args.jobs))
    model, sched, _ = T.load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    paths = list_images(_require_dir(args.input, "input"))
    if not paths:
        raise ValidationError(f"no images in {args.input}")
    out = Path(args.out)
    for p in paths:
        write_image(out / f"{p.stem}.png", infer(read_image(p), model, sched))
    print(f"wrote {len(paths)} images to {out}")
    return 0


# --------------------------------------------------------------------------- eval / preview


def cmd_eval(args, config) -> int:
    from dereflect.metrics import evaluate_benchmark

    report = evaluate_benchmark(_require_dir(args.pred, "prediction"), _require_dir(args.gt, "ground-truth"), args.name)
    report.write(args.out)
    sys.stdout.write(report.table())
    if report.errors:
        print(f"{len(report.errors)} file(s) could not be evaluated", file=sys.stderr)
        return 1
    return 0


def build_preview(mixed_dir, output_dir, gt_dir=None, cell: int | None = None) -> np.ndarray:
    from dereflect.images import list_images, read_image

    dirs = [Path(mixed_dir), Path(output_dir)] + ([Path(gt_dir)] if gt_dir else [])
    indexes = [{p.stem: p for p in list_images(d)} for d in dirs]
    stems = sorted(set.intersection(*(set(ix) for ix in indexes)))
    if not stems:
        raise ValidationError("no images shared by all preview directories")
    rows = []
    for stem in stems:
        imgs = [read_image(ix[stem]) for ix in indexes]
        size = cell or imgs[0].shape[0]
        rows.append(np.concatenate([_fit(im, size) for im in imgs], axis=1))
    return np.concatenate(rows, axis=0)


def cmd_preview(args, config) -> int:
    from dereflect.images import write_image

    for d, what in ((args.mixed, "mixed"), (args.output, "output")):
        _require_dir(d, what)
    if args.gt:
        _require_dir(args.gt, "ground-truth")
    grid = build_preview(args.mixed, args.output, args.gt, args.cell)
    path = write_image(Path(args.out) / "preview.png", grid, bits=8)
    print(f"wrote {path} ({grid.shape[0]}x{grid.shape[1]})")
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", default=None, help="YAML or JSON config file")
    common.add_argument("--jobs", type=int, default=1, help="worker count (1 keeps runs bitwise reproducible)")
    common.add_argument("--out", required=True, help="output directory")

    parser = _Parser(prog="dereflect", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic mixed images")
    p.add_argument("--t-dir")
    p.add_argument("--r-dir")
    p.add_argument("--n", type=int, required=True, help="number of scenes")
    p.add_argument("--reflections", type=int, default=3, help="mixed images per scene")
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("filter", parents=[common], help="keep the most realistic synthetic triples")
    p.add_argument("--manifest", required=True)
    p.add_argument("--keep-fraction", type=float, default=20833 / 69443)
    p.add_argument("--threshold", type=float, default=None, help="absolute score cut instead of rank")
    p.add_argument("--scorer", choices=("heuristic", "clip"), default="heuristic")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("align", parents=[common], help="register mixed images to their ground truth")
    p.add_argument("--mixed", required=True)
    p.add_argument("--gt", required=True)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("train", parents=[common], help="run one training stage or the whole schedule")
    p.add_argument("--data", required=True, help="manifest.jsonl produced by synth or filter")
    p.add_argument("--stage", default="all",
                   choices=("all", "prior", "foundation", "invariant_finetune", "decoder"))
    p.add_argument("--checkpoint", help="checkpoint to resume from")
    p.add_argument("--steps", type=int, default=None, help="override step count of every selected stage")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="remove reflections from a directory of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM of predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--name", default="benchmark")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("preview", parents=[common], help="side-by-side comparison grid")
    p.add_argument("--mixed", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--gt")
    p.add_argument("--cell", type=int, default=None, help="cell size in pixels")
    p.set_defaults(func=cmd_preview)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    started = time.time()
    try:
        config = load_config(args.config)
        code = args.func(args, config)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    write_run_manifest(Path(args.out), args, config, started, {"exit_code": code})
    return code


if __name__ == "__main__":
    sys.exit(main())

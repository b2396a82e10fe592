"""Command-line entry point: ``nvfi <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

log = logging.getLogger("nvfi")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _limit_threads(n):
    # BLAS reads these when numpy is first imported, which happens lazily below
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _read_toml(path):
    with open(path, "rb") as f:
        return tomllib.load(f)


# ----------------------------------------------------------------------------
# subcommands


def cmd_gen_scene(args):
    from . import scene_io as S

    spec = _read_toml(args.spec)
    preset = spec.pop("preset", "sliding_box")
    if preset not in S.PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(S.PRESETS)}")
    scene = S.PRESETS[preset](**spec.pop("preset_args", {}))
    cams = spec.pop("cameras", {})
    n_train = cams.pop("train", 8)
    n_test = cams.pop("test", 2)
    cameras = S.orbit_cameras(n_train, **cams)
    test = S.orbit_cameras(n_test, start_id=n_train, phase=0.5, **cams) if n_test else []
    S.generate_scene(scene, cameras, spec.pop("n_stamps", 30), spec.pop("samples_per_ray", 256),
                     spec.pop("train_fraction", 0.75), test, args.out)
    if spec:
        log.warning("ignored scene keys: %s", sorted(spec))
    print(f"wrote {args.out}")
    return 0


def cmd_train(args):
    from .trainer import TrainConfig, train

    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.iters is not None:
        cfg.iters = args.iters
    log_path = args.log or Path(args.out).with_suffix(".csv")
    train(args.data, cfg, log_path=log_path, ckpt_path=args.out)
    print(f"wrote {args.out} and {log_path}")
    return 0


def _load_model(path):
    from .trainer import NVFiModel

    return NVFiModel.load(path)


def _check_time(model, t):
    if not 0 <= t <= model.config.t_max:
        raise ValueError(f"t={t} outside the supported range [0, {model.config.t_max}]")


def _camera(args, model):
    from .scene_io import load_manifest, orbit_cameras

    if args.data:
        return load_manifest(args.data).camera(args.cam)
    # without a manifest fall back to the default orbit rig
    cams = orbit_cameras(max(args.cam + 1, 8))
    return cams[args.cam]


def cmd_render(args):
    from .renderer import render_image
    from .scene_io import write_image

    model = _load_model(args.ckpt)
    _check_time(model, args.t)
    img = render_image(model, _camera(args, model), args.t, args.samples)
    write_image(img, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args):
    from .evaluation import evaluate
    from .metrics import write_eval_csv
    from .scene_io import load_manifest

    model = _load_model(args.ckpt)
    scores = evaluate(model, load_manifest(args.data), args.split, args.samples)
    write_eval_csv([(args.split, k, [v]) for k, v in scores.items()], args.out)
    for k, v in scores.items():
        print(f"{args.split} {k} {v:.4f}")
    return 0


def cmd_decompose(args):
    from .decomposition import DecompositionConfig, attach_objects, export_points_csv, train_decomposition

    model = _load_model(args.ckpt)
    if model.velocity is None:
        raise ValueError("decomposition needs a checkpoint with a velocity field")
    cfg = DecompositionConfig.from_dict(_read_toml(args.config)) if args.config else DecompositionConfig()
    res = train_decomposition(model, cfg)
    attach_objects(model, res.objects)
    model.save(args.out)
    if args.points:
        export_points_csv(args.points, res.points, res.labels())
    print(f"wrote {args.out} ({len(res.points)} valid points)")
    return 0


def cmd_render_masks(args):
    from .renderer import render_object_masks
    from .scene_io import write_labels

    model = _load_model(args.ckpt)
    if model.objects is None:
        raise ValueError("checkpoint carries no object field; run `decompose` first")
    _check_time(model, args.t)
    labels = render_object_masks(model, model.objects, _camera(args, model), args.t, args.samples)
    write_labels(labels, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_transfer(args):
    from .trainer import attach_velocity

    combined = attach_velocity(_load_model(args.static), _load_model(args.velocity))
    combined.save(args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_selftest(args):
    from .selftest import run_all

    results = run_all()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


# ----------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="nvfi", description="Dynamic radiance fields with a learned velocity field.")
    p.add_argument("--threads", type=int, default=0, help="cap numeric worker threads (0 = library default)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-scene", help="render a synthetic multi-view video")
    s.add_argument("--spec", required=True, help="scene TOML (preset, n_stamps, cameras, ...)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_gen_scene)

    s = sub.add_parser("train", help="train fields on a generated scene")
    s.add_argument("--data", required=True, help="scene directory or manifest.json")
    s.add_argument("--config", help="train TOML; defaults apply when omitted")
    s.add_argument("--out", required=True, help="checkpoint path (.nvck)")
    s.add_argument("--log", help="loss CSV (default: next to the checkpoint)")
    s.add_argument("--iters", type=int, help="override the iteration count")
    s.set_defaults(func=cmd_train)

    def view_args(s):
        s.add_argument("--ckpt", required=True, help="checkpoint (.nvck)")
        s.add_argument("--cam", type=int, required=True, help="camera id")
        s.add_argument("--t", type=float, required=True, help="normalized time in [0, t_max]")
        s.add_argument("--data", help="scene directory supplying the camera (default: orbit rig)")
        s.add_argument("--samples", type=int, default=64, help="samples per ray")
        s.add_argument("--out", required=True, help="output image")

    s = sub.add_parser("render", help="render one view")
    view_args(s)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", help="PSNR/SSIM over a test split")
    s.add_argument("--ckpt", required=True, help="checkpoint (.nvck)")
    s.add_argument("--data", required=True, help="scene directory")
    s.add_argument("--split", choices=["interp", "extrap"], required=True, help="test split")
    s.add_argument("--samples", type=int, default=64, help="samples per ray")
    s.add_argument("--out", required=True, help="output CSV")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("decompose", help="fit the object field on a trained checkpoint")
    s.add_argument("--ckpt", required=True, help="trained checkpoint")
    s.add_argument("--config", help="decomposition TOML")
    s.add_argument("--out", required=True, help="checkpoint with the object field appended")
    s.add_argument("--points", help="optional CSV of labelled valid points (x,y,z,label)")
    s.set_defaults(func=cmd_decompose)

    s = sub.add_parser("render-masks", help="render object labels for one view (PGM)")
    view_args(s)
    s.set_defaults(func=cmd_render_masks)

    s = sub.add_parser("transfer", help="attach a velocity field to a single-keyframe static model")
    s.add_argument("--static", required=True, help="static checkpoint (one keyframe)")
    s.add_argument("--velocity", required=True, help="checkpoint providing the velocity field")
    s.add_argument("--out", required=True, help="combined checkpoint")
    s.set_defaults(func=cmd_transfer)

    s = sub.add_parser("selftest", help="run the analytic oracles")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    _limit_threads(args.threads)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: synth, train, render, eval, verify.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Thread count is taken from --threads or THERMALSPLAT_THREADS and applied
to the BLAS pools before numpy loads, so it must be resolved before any
heavy import.
"""

from __future__ import annotations

import argparse
import os
import sys


def _apply_thread_limit(argv: list) -> None:
    """Set BLAS thread env vars from --threads/THERMALSPLAT_THREADS.

    Runs before numpy is imported anywhere in this process.
    """
    threads = os.environ.get("THERMALSPLAT_THREADS")
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif arg.startswith("--threads="):
            threads = arg.split("=", 1)[1]
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        from . import UsageError
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="thermalsplat",
                     description="Thermal-infrared Gaussian splatting toolkit")
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS worker threads (default: hardware)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic thermal dataset")
    p.add_argument("--spec", required=True, help="generator spec file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="optimize a scene")
    p.add_argument("--data", required=True, help="COLMAP dataset directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--no-atf", action="store_true",
                   help="disable the attenuation field")
    p.add_argument("--no-tcm", action="store_true",
                   help="disable the conduction refinement")
    p.add_argument("--no-dis", action="store_true",
                   help="disable the discontinuous loss term")
    p.add_argument("--background", type=float, default=None)
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="config override (repeatable; highest precedence)")

    p = sub.add_parser("render", help="render views from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="dataset whose split supplies the cameras")
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.add_argument("--camera-path", help="camera path file (overrides --data)")
    p.add_argument("--no-tcm", action="store_true",
                   help="diagnostic: skip the refinement stage")
    p.add_argument("--no-atf", action="store_true",
                   help="diagnostic: skip radiance attenuation")

    p = sub.add_parser("eval", help="PSNR/SSIM report on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="report file (default: stdout)")

    p = sub.add_parser("verify", help="run the oracle/property suites")
    p.add_argument("--suite", action="append", default=[],
                   choices=("gradients", "physics", "identity", "loss",
                            "metrics"),
                   help="suite selection (repeatable; default: all)")
    p.add_argument("--quick", action="store_true",
                   help="reduced probe counts for a fast sanity pass")
    return parser


def _read_config_file(path) -> dict:
    from . import UsageError
    overrides = {}
    try:
        with open(path, "r") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{lineno}: expected key = value")
                key, value = (part.strip() for part in line.split("=", 1))
                overrides[key] = value
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}")
    return overrides


def _load_dataset(data_dir):
    from .dataset import load_views, parse_colmap, split_train_test
    scene = parse_colmap(data_dir)
    views = load_views(data_dir, scene)
    train_views, test_views = split_train_test(views)
    return scene, views, train_views, test_views


def cmd_synth(args) -> int:
    from .synth import parse_synth_spec, synth_scene_generate
    spec = parse_synth_spec(args.spec)
    manifest = synth_scene_generate(spec, args.out, seed=args.seed)
    print(f"wrote {manifest['views']} views to {args.out}")
    return 0


def cmd_train(args) -> int:
    from pathlib import Path
    from .train import TrainConfig, apply_overrides, train

    config = TrainConfig()
    overrides = {}
    if args.config:
        overrides.update(_read_config_file(args.config))
    for item in args.set:
        if "=" not in item:
            from . import UsageError
            raise UsageError(f"--set expects KEY=VALUE, got '{item}'")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    apply_overrides(config, overrides)
    if args.seed is not None:
        config.seed = args.seed
    if args.iterations is not None:
        config.total_iterations = args.iterations
    if args.background is not None:
        config.background = args.background
    if args.no_atf:
        config.atf = False
    if args.no_tcm:
        config.tcm = False
    if args.no_dis:
        config.dis_loss = False

    scene, _, train_views, test_views = _load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    result = train(train_views, test_views, scene.points,
                   scene.point_radiance, config, out_dir=out)

    log_path = out / "metrics.log"
    with open(log_path, "w") as fh:
        fh.write("# thermalsplat train log\n")
        for key, value in sorted(config.as_dict().items()):
            fh.write(f"# config {key} = {value}\n")
        for line in result.log_lines:
            fh.write(line + "\n")
    for line in result.log_lines:
        print(line)
    print(f"log written to {log_path}")
    return 0


def _load_checkpoint_state(path):
    import numpy as np
    from .checkpoint import load_checkpoint
    from .pipeline import SceneBox

    ckpt = load_checkpoint(path)
    box_vals = ckpt.config.get("scene_box")
    if box_vals is None:
        raise RuntimeError("checkpoint missing scene_box record")
    box = SceneBox(center=np.array(box_vals[:3]), half_extent=float(box_vals[3]))
    background = float(ckpt.config.get("background", 0.0))
    return ckpt, box, background


def _parse_camera_path(path):
    from . import DataError
    import numpy as np
    from .dataset import qvec_to_rot
    from .scene import Camera

    views = []
    intrinsics = None
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if intrinsics is None:
                if len(parts) != 6:
                    raise DataError(
                        f"{path}:{lineno}: expected 'fx fy cx cy width height'")
                intrinsics = [float(v) for v in parts[:4]] + \
                    [int(parts[4]), int(parts[5])]
                continue
            if len(parts) != 9:
                raise DataError(
                    f"{path}:{lineno}: expected 'name time qw qx qy qz tx ty tz'")
            name = parts[0]
            time_norm = float(parts[1])
            qvec = np.array([float(v) for v in parts[2:6]])
            tvec = np.array([float(v) for v in parts[6:9]])
            camera = Camera(fx=intrinsics[0], fy=intrinsics[1],
                            cx=intrinsics[2], cy=intrinsics[3],
                            width=intrinsics[4], height=intrinsics[5],
                            rotation=qvec_to_rot(qvec), translation=tvec)
            views.append((name, time_norm, camera))
    if intrinsics is None:
        raise DataError(f"{path}: empty camera path file")
    return views


def cmd_render(args) -> int:
    from pathlib import Path
    from . import UsageError
    from .dataset import save_image
    from .pipeline import render_view_clamped

    ckpt, box, background = _load_checkpoint_state(args.checkpoint)
    atf_net = None if args.no_atf else ckpt.atf
    tcm_net = None if args.no_tcm else ckpt.tcm

    if args.camera_path:
        targets = _parse_camera_path(args.camera_path)
    elif args.data:
        _, views, train_views, test_views = _load_dataset(args.data)
        chosen = {"test": test_views, "train": train_views,
                  "all": views}[args.split]
        targets = [(f"frame_{v.frame_index:04d}.png", v.time_norm, v.camera)
                   for v in chosen]
    else:
        raise UsageError("render needs --camera-path or --data")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stats: dict = {}
    for name, time_norm, camera in targets:
        img = render_view_clamped(ckpt.cloud, camera, time_norm, box,
                                  atf_net=atf_net, tcm_net=tcm_net,
                                  background=background, diagnostics=stats)
        if not name.endswith(".png"):
            name += ".png"
        save_image(img, out / name)
    print(f"rendered {len(targets)} views to {out}")
    print(f"stats: culled_near {stats.get('culled_near', 0)} "
          f"culled_degenerate {stats.get('culled_degenerate', 0)} "
          f"skipped {stats.get('skipped', 0)} "
          f"max_contributors {stats.get('max_contributors', 0)}")
    return 0


def cmd_eval(args) -> int:
    import math
    import numpy as np
    from .losses import psnr, ssim
    from .pipeline import render_view_clamped

    ckpt, box, background = _load_checkpoint_state(args.checkpoint)
    _, _, _, test_views = _load_dataset(args.data)

    rows = []
    for view in test_views:
        render = render_view_clamped(ckpt.cloud, view.camera, view.time_norm,
                                     box, atf_net=ckpt.atf, tcm_net=ckpt.tcm,
                                     background=background)
        rows.append((view.frame_index, psnr(render, view.image.data),
                     ssim(render, view.image.data)))

    lines = ["# thermalsplat eval",
             f"# checkpoint: {args.checkpoint}",
             f"# dataset: {args.data}",
             "frame psnr ssim"]
    for frame, p, s in rows:
        lines.append(f"{frame} {p:.17g} {s:.17g}")
    mean_psnr = float(np.mean([r[1] for r in rows]))
    mean_ssim = float(np.mean([r[2] for r in rows]))
    lines.append(f"mean {mean_psnr:.17g} {mean_ssim:.17g}")
    report = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report)
        print(f"report written to {args.out}")
    else:
        sys.stdout.write(report)
    return 0


def cmd_verify(args) -> int:
    from .verify import run_suites
    results = run_suites(args.suite or None, quick=args.quick)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name}: {r.detail} [{r.elapsed:.1f}s]")
        failed += 0 if r.passed else 1
    if failed:
        print(f"{failed} check(s) failed")
        return 3
    print(f"all {len(results)} checks passed")
    return 0


def main(argv: list | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    _apply_thread_limit(argv)
    from . import DataError, NumericalError, UsageError

    try:
        args = build_parser().parse_args(argv)
        handler = {
            "synth": cmd_synth, "train": cmd_train, "render": cmd_render,
            "eval": cmd_eval, "verify": cmd_verify,
        }[args.command]
        return handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

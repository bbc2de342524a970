"""Command-line entry point: ``tmlp {train,eval,probe,truncate,render}``.

Runs are described by a flat key/value config file with dotted section keys::

    task = image
    seed = 0
    model.hidden_width = 256
    train.iterations = 10000
    signal.path = photo.png
    eval.levels = 3, 4, 5

Exit codes: 0 success, 1 configuration error, 2 runtime/numeric error, 3 I/O error.
"""

import argparse
import logging
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, IntegrityError, TmlpError, UnderflowError
from .lod import (
    LodLevel,
    MetricReport,
    chamfer_and_normals,
    eval_levels,
    marching_cubes,
    marching_squares,
    psnr,
    render_grid,
    sample_mesh,
    sample_segments,
    ssim,
    supervised_levels,
    write_obj_mesh,
    write_obj_segments,
)
from .model import Architecture, ModelConfig
from .signals import (
    ImageSampler,
    ImageSignal,
    SdfSampler,
    SdfShape,
    add_gaussian_noise,
    analytic_sdf,
    grid_points,
    image_coords,
    load_image,
    save_image,
    surface_points,
)
from .stream import read_container, truncate_bytes, write_container
from .training import (
    IMAGE_WEIGHTS,
    L1_SDF,
    L2_IMAGE,
    SDF_SCHEDULE,
    SDF_WEIGHTS,
    TrainConfig,
    probe_retrain_heads,
    train,
)

log = logging.getLogger("tmlp")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3
TASKS = ("image", "sdf2d", "sdf3d")

# per-consumer seed streams
INIT_STREAM, TRAIN_STREAM, NOISE_STREAM, EVAL_STREAM, PROBE_STREAM = range(5)


def derive_seed(seed, stream):
    return int(np.random.SeedSequence([int(seed), stream]).generate_state(1, np.uint64)[0])


def parse_config_text(text):
    """Parse ``key = value`` lines; ``#`` starts a comment. Returns a flat dict."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def _num_list(text, kind=float):
    return [kind(v) for v in text.replace(";", ",").split(",") if v.strip()]


@dataclass
class RunConfig:
    task: str
    model: ModelConfig
    train: TrainConfig
    image_path: Path = None
    shape: SdfShape = None
    noise_sigma: float = 0.0
    out_dir: Path = Path("out")
    levels: list = field(default_factory=list)
    resolution: int = 128
    surface_samples: int = 4096
    probe_iterations: int = 2000
    probe_lr: float = 1e-3
    seed: int = 0

    def load_signal(self):
        if self.task == "image":
            return load_image(self.image_path)
        return self.shape

    def sampler(self, signal):
        if self.task == "image":
            return ImageSampler(signal, self.train.batch_size)
        return SdfSampler(signal, self.train.batch_size or 100_000)


_SHAPE_KEYS = {"radius", "center", "half_extents", "vertices", "major_radius", "minor_radius"}


def _shape_from(kv):
    kind = kv.pop("signal.shape")
    args = {}
    for key in list(kv):
        if not key.startswith("signal."):
            continue
        name = key[len("signal."):]
        if name not in _SHAPE_KEYS:
            continue
        raw = kv.pop(key)
        if name == "vertices":
            pts = [p for p in raw.split(";") if p.strip()]
            args[name] = tuple(tuple(_num_list(p)) for p in pts)
        elif name in ("center", "half_extents"):
            args[name] = tuple(_num_list(raw))
        else:
            args[name] = float(raw)
    return SdfShape(kind, **args)


def build_run_config(kv, base_dir=Path("."), seed=None, out_dir=None):
    """Validate a parsed config dict into a :class:`RunConfig`."""
    kv = dict(kv)
    try:
        task = kv.pop("task", "image")
        if task not in TASKS:
            raise ConfigError(f"task: must be one of {TASKS}, got {task!r}")
        run_seed = int(kv.pop("seed", 0))
        if seed is not None:
            run_seed = int(seed)

        image_path = shape = None
        if task == "image":
            if "signal.path" not in kv:
                raise ConfigError("signal.path: required for image tasks")
            image_path = Path(kv.pop("signal.path"))
            if not image_path.is_absolute():
                image_path = base_dir / image_path
            if not image_path.exists():
                raise ConfigError(f"signal.path: file {image_path} does not exist")
            in_dim = 2
        else:
            if "signal.shape" not in kv:
                raise ConfigError("signal.shape: required for sdf tasks")
            shape = _shape_from(kv)
            in_dim = 2 if task == "sdf2d" else 3
            if shape.dim != in_dim:
                raise ConfigError(f"signal.shape: {shape.kind} is {shape.dim}-d but task is {task}")
        noise = float(kv.pop("signal.noise_sigma", 0.0))

        out_dim = int(kv.pop("model.output_dim", 0)) or None
        if out_dim is None:
            out_dim = load_image(image_path).channels if task == "image" else 1
        model = ModelConfig(
            input_dim=in_dim,
            output_dim=out_dim,
            hidden_width=int(kv.pop("model.hidden_width", 256)),
            num_hidden_layers=int(kv.pop("model.num_hidden_layers", 5)),
            omega0=float(kv.pop("model.omega0", 30.0)),
            architecture=Architecture(kv.pop("model.architecture", "tmlp")),
            seed=derive_seed(run_seed, INIT_STREAM),
        )

        k = model.num_outputs
        if "train.weights" in kv:
            weights = _num_list(kv.pop("train.weights"))
        elif model.architecture.single_head:
            weights = [1.0]
        elif k == 5:
            weights = list(IMAGE_WEIGHTS if task == "image" else SDF_WEIGHTS)
        else:
            weights = [1.0] * k
        if len(weights) != k:
            raise ConfigError(f"train.weights: {len(weights)} entries, model has {k} outputs")
        if "train.schedule" in kv:
            schedule = []
            for item in kv.pop("train.schedule").split(","):
                if item.strip():
                    step, mult = item.split(":")
                    schedule.append((int(step), float(mult)))
        else:
            schedule = [] if task == "image" else list(SDF_SCHEDULE)
        batch = kv.pop("train.batch_size", None)
        train_cfg = TrainConfig(
            iterations=int(kv.pop("train.iterations", 10_000)),
            batch_size=int(batch) if batch else (None if task == "image" else 100_000),
            initial_lr=float(kv.pop("train.lr", 3e-4)),
            schedule=tuple(schedule),
            loss_kind=kv.pop("train.loss", L2_IMAGE if task == "image" else L1_SDF),
            weights=tuple(weights),
            seed=derive_seed(run_seed, TRAIN_STREAM),
            dtype=kv.pop("train.dtype", "float32"),
        )

        if "eval.levels" in kv:
            levels = [LodLevel(v) for v in _num_list(kv.pop("eval.levels"))]
        else:
            levels = [LodLevel(v) for v in supervised_levels(train_cfg.weights)]
        for lv in levels:
            if lv.l > k:
                raise ConfigError(f"eval.levels: level {lv.l} exceeds the model's {k} outputs")
        default_res = 64 if task == "sdf3d" else 128
        resolution = int(kv.pop("eval.resolution", default_res))
        surface_samples = int(kv.pop("eval.surface_samples", 4096))
        probe_iterations = int(kv.pop("probe.head_iterations", 2000))
        probe_lr = float(kv.pop("probe.head_lr", 1e-3))
        out = Path(kv.pop("output.dir", "out"))
        if out_dir is not None:
            out = Path(out_dir)
        elif not out.is_absolute():
            out = base_dir / out
    except (ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    if kv:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(kv))}")
    return RunConfig(
        task=task,
        model=model,
        train=train_cfg,
        image_path=image_path,
        shape=shape,
        noise_sigma=noise,
        out_dir=out,
        levels=levels,
        resolution=resolution,
        surface_samples=surface_samples,
        probe_iterations=probe_iterations,
        probe_lr=probe_lr,
        seed=run_seed,
    )


def load_run_config(path, seed=None, out_dir=None):
    path = Path(path)
    text = path.read_text()
    return build_run_config(parse_config_text(text), base_dir=path.parent, seed=seed, out_dir=out_dir)


# --------------------------------------------------------------------------
# evaluation


def evaluate(run, params, levels=None):
    """Metric report for ``params`` against the run's clean signal."""
    levels = run.levels if levels is None else levels
    for lv in levels:
        lv.check(params.config.num_outputs)
    report = MetricReport()
    signal = run.load_signal()
    if run.task == "image":
        if params.config.input_dim != 2 or params.config.output_dim != signal.channels:
            raise ConfigError(
                f"model maps {params.config.input_dim}-d -> {params.config.output_dim} channels, "
                f"image has {signal.channels}"
            )
        coords = image_coords(signal)
        for lv, out in zip(levels, eval_levels(params, coords, levels)):
            pred = np.clip(out.reshape(signal.pixels.shape).astype(np.float64), 0.0, 1.0)
            report.add(lv, psnr=psnr(pred, signal.pixels), ssim=ssim(pred, signal.pixels))
        return report

    shape = signal
    dim = shape.dim
    if params.config.input_dim != dim or params.config.output_dim != 1:
        raise ConfigError(f"model maps {params.config.input_dim}-d -> {params.config.output_dim}, shape is {dim}-d SDF")
    rng = np.random.default_rng(derive_seed(run.seed, EVAL_STREAM))
    gt_pts, gt_normals = surface_points(shape, run.surface_samples, rng)
    res = run.resolution
    pts = image_coords((res, res)) if dim == 2 else grid_points(res, 3)
    gt = analytic_sdf(shape, pts)
    for lv, out in zip(levels, eval_levels(params, pts, levels)):
        pred = out[:, 0].astype(np.float64)
        mae = float(np.mean(np.abs(pred - gt)))
        chamfer = nc = float("nan")
        if dim == 2:
            segs = marching_squares(pred.reshape(res, res))
            if len(segs):
                pa, na = sample_segments(segs, run.surface_samples)
                chamfer, nc = chamfer_and_normals(pa, na, gt_pts, gt_normals)
        else:
            verts, faces = marching_cubes(pred.reshape(res, res, res))
            if len(faces):
                pa, na = sample_mesh(verts, faces, run.surface_samples, rng)
                chamfer, nc = chamfer_and_normals(pa, na, gt_pts, gt_normals)
        report.add(lv, mae=mae, chamfer=chamfer, normal_consistency=nc)
    return report


def _level_tag(level):
    return f"{level.l:g}".replace(".", "_")


def export_renders(run, params, out_dir, bits=8):
    """Write one PNG (and OBJ geometry for SDF tasks) per configured level."""
    written = []
    for lv in run.levels:
        tag = _level_tag(lv)
        if run.task == "image":
            sig = run.load_signal()
            img = eval_levels(params, image_coords(sig), [lv])[0].reshape(sig.pixels.shape)
            path = out_dir / f"lod_{tag}.png"
            save_image(path, img, bits=bits)
            written.append(path)
        elif run.task == "sdf2d":
            field_ = render_grid(params, run.resolution, lv)[:, :, 0]
            # zero level maps to mid-gray
            save_image(out_dir / f"lod_{tag}.png", np.clip(0.5 + field_, 0.0, 1.0))
            path = out_dir / f"contour_{tag}.obj"
            write_obj_segments(path, marching_squares(field_))
            written += [out_dir / f"lod_{tag}.png", path]
        else:
            field_ = render_grid(params, run.resolution, lv)
            verts, faces = marching_cubes(field_)
            path = out_dir / f"mesh_{tag}.obj"
            write_obj_mesh(path, verts, faces)
            written.append(path)
    return written


# --------------------------------------------------------------------------
# commands


def _training_sampler(run):
    signal = run.load_signal()
    if run.task == "image" and run.noise_sigma > 0:
        signal = add_gaussian_noise(signal, run.noise_sigma, np.random.default_rng(derive_seed(run.seed, NOISE_STREAM)))
    return run.sampler(signal)


def cmd_train(run):
    run.out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    params, history = train(run.train, run.model, _training_sampler(run))
    log.info("trained %d steps in %.1fs", run.train.iterations, time.perf_counter() - t0)
    write_container(run.out_dir / "model.tmlp", params)
    (run.out_dir / "history.csv").write_text(history.to_csv())
    report = evaluate(run, params)
    (run.out_dir / "metrics.csv").write_text(report.to_csv())
    export_renders(run, params, run.out_dir)
    return report


def cmd_eval(run, model_path, levels=None, max_layers=None):
    params, j = read_container(model_path, max_layers)
    levels = run.levels if levels is None else levels
    for lv in levels:
        if lv.l > params.config.num_outputs:
            raise ConfigError(f"level {lv.l} needs more than the {j} decoded layers")
    report = evaluate(run, params, levels)
    run.out_dir.mkdir(parents=True, exist_ok=True)
    (run.out_dir / "eval_metrics.csv").write_text(report.to_csv())
    return report


def cmd_probe(run):
    """Head-probe a plain MLP and compare with a T-MLP of the same size and budget."""
    if run.task != "image":
        raise ConfigError("probe runs on image tasks")
    run.out_dir.mkdir(parents=True, exist_ok=True)
    sampler = _training_sampler(run)
    signal = run.load_signal()
    k = run.model.num_hidden_layers

    plain_cfg = replace(run.model, architecture=Architecture.PLAIN_MLP)
    trunk, _ = train(replace(run.train, weights=(1.0,)), plain_cfg, sampler)
    head_cfg = replace(
        run.train,
        iterations=run.probe_iterations,
        initial_lr=run.probe_lr,
        schedule=(),
        seed=derive_seed(run.seed, PROBE_STREAM),
    )
    heads, _ = probe_retrain_heads(trunk, sampler, head_cfg)

    tmlp_cfg = replace(run.model, architecture=Architecture.TMLP)
    weights = run.train.weights if len(run.train.weights) == k else (1.0,) * k
    tmlp, _ = train(replace(run.train, weights=weights), tmlp_cfg, sampler)

    coords = image_coords(signal)
    rows = []
    tmlp_outs = eval_levels(tmlp, coords, [LodLevel(j) for j in range(1, k + 1)])
    for j in range(1, k + 1):
        probe_img = eval_levels(heads[j - 1], coords, [LodLevel(1)])[0].reshape(signal.pixels.shape)
        tmlp_img = tmlp_outs[j - 1].reshape(signal.pixels.shape)
        rows.append((j, psnr(np.clip(probe_img, 0, 1), signal.pixels), psnr(np.clip(tmlp_img, 0, 1), signal.pixels)))
    lines = ["level,probe_psnr,tmlp_psnr"] + [f"{j},{p!r},{t!r}" for j, p, t in rows]
    (run.out_dir / "probe.csv").write_text("\n".join(lines) + "\n")
    return rows


def cmd_truncate(model_path, j, output):
    data = Path(model_path).read_bytes()
    try:
        prefix = truncate_bytes(data, j)
    except ValueError as exc:
        if isinstance(exc, (FormatError, IntegrityError, UnderflowError)):
            raise
        raise ConfigError(str(exc)) from exc
    Path(output).write_bytes(prefix)
    return len(prefix)


def cmd_render(model_path, level, resolution, output, bits=8):
    params, _ = read_container(model_path)
    level = LodLevel(level)
    if level.l > params.config.num_outputs:
        raise ConfigError(f"level {level.l} exceeds the model's {params.config.num_outputs} outputs")
    grid = render_grid(params, resolution, level)
    if grid.ndim == 3 and params.config.input_dim == 3:
        verts, faces = marching_cubes(grid)
        write_obj_mesh(output, verts, faces)
    else:
        save_image(output, ImageSignal(np.clip(grid, 0.0, 1.0)), bits=bits)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config file")
    common.add_argument("--out", help="output directory (overrides output.dir)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tmlp", description=__doc__.split("\n")[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="train a model and export artifacts")

    p = sub.add_parser("eval", parents=[common], help="evaluate a .tmlp file against the config signal")
    p.add_argument("--model", required=True)
    p.add_argument("--levels", help="comma-separated levels, e.g. 1,1.5,2")
    p.add_argument("--max-layers", type=int)

    sub.add_parser("probe", parents=[common], help="plain-MLP head probing vs T-MLP")

    p = sub.add_parser("truncate", parents=[common], help="keep the first J layer chunks")
    p.add_argument("--model", required=True)
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--output", required=True)

    p = sub.add_parser("render", parents=[common], help="render one level to PNG (or OBJ for 3-d)")
    p.add_argument("--model", required=True)
    p.add_argument("--level", type=float, default=None)
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--output", required=True)
    p.add_argument("--bits", type=int, choices=(8, 16), default=8)
    return parser


def _require_config(args):
    if not args.config:
        raise ConfigError("--config is required for this command")
    return load_run_config(args.config, seed=args.seed, out_dir=args.out)


def run_command(args):
    if args.command == "train":
        report = cmd_train(_require_config(args))
        sys.stdout.write(report.to_csv())
    elif args.command == "eval":
        run = _require_config(args)
        levels = None
        if args.levels:
            try:
                levels = [LodLevel(v) for v in _num_list(args.levels)]
            except ValueError as exc:
                raise ConfigError(f"--levels: {exc}") from exc
        report = cmd_eval(run, args.model, levels, args.max_layers)
        sys.stdout.write(report.to_csv())
    elif args.command == "probe":
        rows = cmd_probe(_require_config(args))
        for j, p, t in rows:
            sys.stdout.write(f"level {j}: probe {p:.2f} dB, tmlp {t:.2f} dB\n")
    elif args.command == "truncate":
        n = cmd_truncate(args.model, args.layers, args.output)
        sys.stdout.write(f"wrote {n} bytes to {args.output}\n")
    elif args.command == "render":
        params, _ = read_container(args.model)
        level = args.level if args.level is not None else params.config.num_outputs
        cmd_render(args.model, level, args.resolution, args.output, args.bits)
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return run_command(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, IntegrityError, UnderflowError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TmlpError, FloatingPointError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

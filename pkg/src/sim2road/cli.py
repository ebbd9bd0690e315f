"""Command-line entry point: ``sim2road <command> [options]``.

Commands
    synth    generate a synthetic roadside scene with teacher and 2D detector output
    match    fuse 3D boxes with 2D detections into pseudo-label files
    losses   score 3D predictions against pseudo-labels with the consistency losses
    eval     3D detection evaluation with a Precision/Recall/mAP table
    sweep    match and evaluate over a range of matching thresholds
    stats    class, labels-per-frame and yaw histograms of a label directory
    adapt    run the teacher-student adaptation loop on a scene directory

Every command writes ``manifest.json`` into its ``--out`` directory.  Options
can also come from a TOML file given with ``--config``: top-level keys apply
to every command, a ``[<command>]`` table to that command only, and flags on
the command line win over both.  Keys use the long option names with either
dashes or underscores.

Exit status
    0  success
    1  unexpected internal error
    2  configuration or usage error
    3  data error (missing, misaligned or malformed input)
    4  numerical failure
"""

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone

from . import __version__
from ._validation import wrap_angle
from .adapt import LoopConfig, ToyModel, run_adaptation
from .ema import EmaConfig
from .evaluation import EvalConfig, evaluate
from .exceptions import (
    BehindCameraError,
    CalibrationError,
    ConfigError,
    DegenerateGeometryError,
    GenerationError,
    InvalidArgumentError,
    NumericalError,
    ParseError,
)
from .kitti_io import CATEGORIES, dataset_stats, write_stats
from .losses import LossWeights, coplanar_loss, overall_loss, projective_consistency_loss
from .matching import MatchWeights
from .pipeline import load_frames, match_frames, sweep_values, threshold_sweep, write_pseudo_labels
from .synth import (
    Detector2DNoise,
    Frame,
    Scene,
    SceneConfig,
    TeacherNoise,
    corrupt_2d,
    corrupt_teacher,
    generate_scene,
    write_scene,
)

logger = logging.getLogger("sim2road")

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

MANIFEST_NAME = "manifest.json"

# keys never copied into the manifest's config snapshot
_NOT_CONFIG = {"func", "config", "out", "verbose", "jobs"}


# -- manifest -----------------------------------------------------------------


@dataclass
class RunManifest:
    """Provenance record written next to every command's outputs.

    ``wall_clock`` honours ``SOURCE_DATE_EPOCH`` so that reruns can be made
    byte-identical.
    """

    command: str
    config: dict
    inputs: dict = field(default_factory=dict)
    seed: int = None
    version: str = __version__
    wall_clock: str = None

    def __post_init__(self):
        if self.wall_clock is None:
            epoch = os.environ.get("SOURCE_DATE_EPOCH")
            stamp = float(epoch) if epoch else time.time()
            self.wall_clock = datetime.fromtimestamp(stamp, tz=timezone.utc).isoformat()

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, MANIFEST_NAME)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)
            f.write("\n")
        return path


def _manifest(args, inputs, seed=None):
    snapshot = {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_CONFIG}
    paths = {k: os.path.abspath(v) for k, v in inputs.items() if v}
    if args.config:
        paths["config"] = os.path.abspath(args.config)
    return RunManifest(args.command, snapshot, paths, seed)


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _require(args, *names):
    missing = [n for n in names if getattr(args, n) in (None, "")]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise ConfigError(f"{args.command}: missing required option(s) {flags}")


def _match_weights(args):
    return MatchWeights(args.lambda_class, args.lambda_giou, args.lambda_conf, args.threshold)


def _parse_bins(text):
    try:
        edges = [float(v) for v in str(text).replace(" ", "").split(",") if v]
    except ValueError as exc:
        raise ConfigError(f"--bins must be comma-separated numbers, got {text!r}") from exc
    if len(edges) < 2:
        raise ConfigError(f"--bins needs at least two edges, got {text!r}")
    return tuple(zip(edges[:-1], edges[1:])), edges[-1]


def _eval_config(args):
    bins, max_range = _parse_bins(args.bins)
    return EvalConfig(args.iou, args.recall_points or None, max_range, bins)


# -- commands -----------------------------------------------------------------


def cmd_synth(args):
    teacher_noise = TeacherNoise(
        location_sigma=(args.loc_sigma, args.loc_sigma, args.loc_sigma_z),
        yaw_sigma=args.yaw_sigma,
        size_sigma=args.size_sigma,
        drop_rate=args.teacher_drop,
        false_positive_rate=args.teacher_fp,
    )
    detector_noise = Detector2DNoise(
        jitter=args.jitter,
        drop_rate=args.det_drop,
        false_positive_rate=args.det_fp,
        class_flip=args.class_flip,
    )
    cfg = SceneConfig(
        seed=args.seed,
        n_frames=args.frames,
        objects_per_frame=(args.min_objects, args.max_objects),
        teacher_noise=teacher_noise,
        detector_noise=detector_noise,
    )
    scene = generate_scene(cfg)
    teacher = corrupt_teacher(scene, teacher_noise, args.seed)
    dets = corrupt_2d(scene, detector_noise, args.seed)
    write_scene(scene, args.out, teacher, dets)
    _manifest(args, {}, args.seed).write(args.out)
    n = sum(len(f.gt) for f in scene.frames)
    print(f"wrote {len(scene)} frame(s) with {n} object(s) to {args.out}")


def cmd_match(args):
    _require(args, "labels_3d", "dets_2d", "calib")
    weights = _match_weights(args)
    frames = load_frames(args.calib, labels_3d=args.labels_3d, dets_2d=args.dets_2d, jobs=args.jobs)
    results = match_frames(frames, weights, args.jobs)
    summary = write_pseudo_labels(os.path.join(args.out, "pseudo_labels"), frames, results)
    _write_json(os.path.join(args.out, "summary.json"), summary)
    _manifest(args, {"labels_3d": args.labels_3d, "dets_2d": args.dets_2d, "calib": args.calib}).write(args.out)
    t = summary["totals"]
    print(f"frames={summary['frames']} matched={t['matched']} kept_2d={t['kept_2d']} discarded_3d={t['discarded_3d']}")


def cmd_losses(args):
    _require(args, "labels_3d", "dets_2d", "calib")
    weights = _match_weights(args)
    loss_w = LossWeights(
        lambda_3d=args.lambda_3d,
        lambda_pc=args.lambda_pc,
        lambda_moc=args.lambda_moc,
        lambda_giou_pc=args.lambda_giou_pc,
        lambda_center_pc=args.lambda_center_pc,
    )
    frames = load_frames(args.calib, labels_3d=args.labels_3d, dets_2d=args.dets_2d, jobs=args.jobs)
    results = match_frames(frames, weights, args.jobs)
    preds = [f.labels_3d for f in frames]
    if args.preds:
        pred_frames = load_frames(args.calib, labels_3d=args.preds, jobs=args.jobs)
        if [f.name for f in pred_frames] != [f.name for f in frames]:
            raise ParseError("prediction frames do not match the teacher frames")
        preds = [f.labels_3d for f in pred_frames]
        for f, p in zip(frames, preds):
            if len(p) != len(f.labels_3d):
                raise ParseError(
                    f"frame {f.name}: {len(p)} prediction(s) but {len(f.labels_3d)} teacher box(es); "
                    "predictions must be index-aligned with the teacher"
                )

    per_frame = {}
    pc_pred, pc_tgt, l3, mask = [], [], [], []
    pc_total = 0.0
    n_pairs = 0
    for frame, plabels, pred in zip(frames, results, preds):
        matched = {p.index_3d: p for p in plabels.matched_3d}
        fp = [pred[i] for i in sorted(matched)]
        ft = [matched[i].box2d for i in sorted(matched)]
        l_pc = projective_consistency_loss(fp, ft, frame.calib.plane, frame.calib.camera, loss_w)
        pc_total += l_pc * len(fp)
        n_pairs += len(fp)
        for i, box in enumerate(pred):
            if i in matched:
                t = matched[i].box3d
                diffs = [abs(a - b) for a, b in zip(box.location, t.location)]
                diffs.append(abs(wrap_angle(box.yaw - t.yaw)))
                l3.append(sum(diffs) / 4.0)
                mask.append(True)
            else:
                l3.append(0.0)
                mask.append(False)
        per_frame[frame.name] = {"l_pc": l_pc, "l_moc": coplanar_loss([pred]), "pairs": len(fp)}
    l_pc = pc_total / n_pairs if n_pairs else 0.0
    l_moc = coplanar_loss(preds)
    report = overall_loss(0.0, l3, mask, 0.0, l_pc, l_moc, loss_w)
    payload = {"overall": report.as_dict(), "per_frame": per_frame}
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "losses.json"), payload)
    inputs = {"labels_3d": args.labels_3d, "dets_2d": args.dets_2d, "calib": args.calib, "preds": args.preds}
    _manifest(args, inputs).write(args.out)
    print(" ".join(f"{k}={v:.6g}" for k, v in report.as_dict().items()))


def cmd_eval(args):
    _require(args, "dets", "gt", "calib")
    cfg = _eval_config(args)
    frames = load_frames(args.calib, labels_3d=args.dets, ground_truth=args.gt, jobs=args.jobs)
    report = evaluate([f.labels_3d for f in frames], [f.ground_truth for f in frames], cfg)
    table = report.format_table()
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as f:
        f.write(report.to_json() + "\n")
    with open(os.path.join(args.out, "table.txt"), "w", encoding="utf-8") as f:
        f.write(table)
    _manifest(args, {"dets": args.dets, "gt": args.gt, "calib": args.calib}).write(args.out)
    print(table, end="")


def cmd_sweep(args):
    _require(args, "labels_3d", "dets_2d", "calib", "gt")
    if args.param != "threshold":
        raise ConfigError(f"unsupported sweep parameter {args.param!r}")
    taus = sweep_values(args.sweep_from, args.sweep_to, args.steps)
    for tau in taus:
        MatchWeights(threshold=tau)  # validates the range before any work
    cfg = _eval_config(args)
    frames = load_frames(
        args.calib, labels_3d=args.labels_3d, dets_2d=args.dets_2d, ground_truth=args.gt, jobs=args.jobs
    )
    rows = threshold_sweep(frames, taus, _match_weights(args), cfg, args.jobs)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "sweep.csv"), "w", encoding="utf-8") as f:
        f.write("threshold,precision,recall,map,matched\n")
        for r in rows:
            f.write(f"{r.threshold:.6f},{r.precision:.6f},{r.recall:.6f},{r.map_overall:.4f},{r.matched}\n")
    inputs = {"labels_3d": args.labels_3d, "dets_2d": args.dets_2d, "calib": args.calib, "gt": args.gt}
    _manifest(args, inputs).write(args.out)
    best = max(rows, key=lambda r: r.map_overall)
    print(f"{len(rows)} threshold(s); best mAP {best.map_overall:.2f} at threshold {best.threshold:g}")


def cmd_stats(args):
    _require(args, "labels", "calib")
    frames = load_frames(args.calib, ground_truth=args.labels, jobs=args.jobs)
    stats = dataset_stats([f.ground_truth for f in frames])
    write_stats(stats, args.out)
    _manifest(args, {"labels": args.labels, "calib": args.calib}).write(args.out)
    print(f"{stats['num_frames']} frame(s), {stats['num_labels']} label(s): {stats['class_counts']}")


def _parse_bias(items):
    biases = {}
    for item in items or []:
        name, sep, values = str(item).partition(":")
        if not sep or name not in CATEGORIES:
            raise ConfigError(f"--bias expects CLASS:dx,dy,dz,dyaw with CLASS in {CATEGORIES}, got {item!r}")
        try:
            nums = [float(v) for v in values.split(",")]
        except ValueError as exc:
            raise ConfigError(f"--bias values must be numbers, got {item!r}") from exc
        if not 1 <= len(nums) <= 5:
            raise ConfigError(f"--bias takes 1 to 5 numbers, got {item!r}")
        biases[name] = nums
    return biases


def cmd_adapt(args):
    if args.data:
        args.calib = args.calib or os.path.join(args.data, "calib")
        args.raw_3d = args.raw_3d or os.path.join(args.data, "label_2")
        args.dets_2d = args.dets_2d or os.path.join(args.data, "dets_2d")
    _require(args, "calib", "raw_3d", "dets_2d")
    teacher = ToyModel.with_bias(_parse_bias(args.bias))
    cfg = LoopConfig(
        steps=args.steps,
        learning_rate=args.lr,
        fd_epsilon=args.fd_epsilon,
        ema=EmaConfig(args.ema_momentum, args.ema_interval),
        match=_match_weights(args),
        loss=LossWeights(lambda_3d=args.lambda_3d, lambda_pc=args.lambda_pc, lambda_moc=args.lambda_moc),
    )
    frames = load_frames(args.calib, labels_3d=args.raw_3d, dets_2d=args.dets_2d, jobs=args.jobs)
    scene = Scene([Frame(f.name, f.labels_3d, f.calib.plane, f.calib.camera) for f in frames])
    history = run_adaptation(scene, teacher, [f.dets_2d for f in frames], cfg)
    os.makedirs(args.out, exist_ok=True)
    history.write_csv(os.path.join(args.out, "history.csv"), args.ema_interval)
    totals = history.totals
    result = {
        "initial_total": float(totals[0]),
        "final_total": float(totals[-1]),
        "ema_steps": history.ema_steps,
        "teacher": {c: history.teacher.bias(c).tolist() for c in CATEGORIES},
        "student": {c: history.student.bias(c).tolist() for c in CATEGORIES},
    }
    _write_json(os.path.join(args.out, "result.json"), result)
    _manifest(args, {"calib": args.calib, "raw_3d": args.raw_3d, "dets_2d": args.dets_2d}).write(args.out)
    print(f"total loss {totals[0]:.6g} -> {totals[-1]:.6g} over {args.steps} step(s)")


# -- parser -------------------------------------------------------------------


def _add_match_options(p):
    p.add_argument("--threshold", type=float, default=2.2, help="matching gate tau in [0, 3] (default 2.2)")
    p.add_argument("--lambda-class", type=float, default=1.0)
    p.add_argument("--lambda-giou", type=float, default=1.0)
    p.add_argument("--lambda-conf", type=float, default=1.0)


def _add_eval_options(p):
    p.add_argument("--iou", type=float, default=0.1, help="3D IoU threshold in (0, 1] (default 0.1)")
    p.add_argument("--bins", default="0,40,80,120", help="difficulty distance edges in metres")
    p.add_argument("--recall-points", type=int, default=40, help="interpolation points; 0 for continuous AP")


def build_parser():
    parser = argparse.ArgumentParser(prog="sim2road", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file with option defaults")
    common.add_argument("--out", help="output directory (required)")
    common.add_argument("--jobs", type=int, default=1, help="worker threads for per-frame work")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic scene")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--min-objects", type=int, default=4)
    p.add_argument("--max-objects", type=int, default=12)
    p.add_argument("--loc-sigma", type=float, default=0.0, help="teacher x/y location noise, metres")
    p.add_argument("--loc-sigma-z", type=float, default=0.0, help="teacher z location noise, metres")
    p.add_argument("--yaw-sigma", type=float, default=0.0, help="teacher yaw noise, radians")
    p.add_argument("--size-sigma", type=float, default=0.0, help="teacher relative size noise")
    p.add_argument("--teacher-drop", type=float, default=0.0)
    p.add_argument("--teacher-fp", type=float, default=0.0, help="mean teacher false positives per frame")
    p.add_argument("--jitter", type=float, default=0.0, help="2D edge jitter, pixels")
    p.add_argument("--det-drop", type=float, default=0.0)
    p.add_argument("--det-fp", type=float, default=0.0, help="mean 2D false positives per frame")
    p.add_argument("--class-flip", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("match", parents=[common], help="build pseudo-labels")
    p.add_argument("--labels-3d", help="directory of 3D boxes with scores")
    p.add_argument("--dets-2d", help="directory of 2D detections")
    p.add_argument("--calib", help="calibration directory or shared file")
    _add_match_options(p)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("losses", parents=[common], help="consistency losses over matched sets")
    p.add_argument("--labels-3d", help="teacher 3D boxes")
    p.add_argument("--dets-2d")
    p.add_argument("--calib")
    p.add_argument("--preds", help="student predictions index-aligned with the teacher (default: the teacher)")
    _add_match_options(p)
    for name in ("3d", "pc", "moc", "giou-pc", "center-pc"):
        p.add_argument(f"--lambda-{name}", type=float, default=1.0)
    p.set_defaults(func=cmd_losses)

    p = sub.add_parser("eval", parents=[common], help="evaluate 3D detections")
    p.add_argument("--dets", help="directory of scored 3D detections")
    p.add_argument("--gt", help="ground-truth label directory")
    p.add_argument("--calib")
    _add_eval_options(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="evaluate pseudo-labels over matching thresholds")
    p.add_argument("--labels-3d")
    p.add_argument("--dets-2d")
    p.add_argument("--calib")
    p.add_argument("--gt")
    p.add_argument("--param", default="threshold", help="swept parameter (only 'threshold')")
    p.add_argument("--from", dest="sweep_from", type=float, default=0.0)
    p.add_argument("--to", dest="sweep_to", type=float, default=3.0)
    p.add_argument("--steps", type=int, default=31)
    _add_match_options(p)
    _add_eval_options(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("stats", parents=[common], help="label statistics")
    p.add_argument("--labels")
    p.add_argument("--calib")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("adapt", parents=[common], help="teacher-student adaptation loop")
    p.add_argument("--data", help="scene directory holding calib/, label_2/ and dets_2d/")
    p.add_argument("--calib")
    p.add_argument("--raw-3d", help="raw 3D detections the toy model biases (default DATA/label_2)")
    p.add_argument("--dets-2d")
    p.add_argument("--bias", action="append", help="initial teacher bias CLASS:dx,dy,dz,dyaw (repeatable)")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--fd-epsilon", type=float, default=1e-4)
    p.add_argument("--ema-momentum", type=float, default=0.999)
    p.add_argument("--ema-interval", type=int, default=200)
    _add_match_options(p)
    for name in ("3d", "pc", "moc"):
        p.add_argument(f"--lambda-{name}", type=float, default=1.0)
    p.set_defaults(func=cmd_adapt)

    parser._command_parsers = sub.choices
    return parser


def _load_toml(path):
    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _apply_config(parser, args, argv):
    """Re-parse ``argv`` with TOML values installed as defaults."""
    data = _load_toml(args.config)
    sub = parser._command_parsers[args.command]
    known = {a.dest for a in sub._actions}
    values = {k: v for k, v in data.items() if not isinstance(v, dict)}
    section = data.get(args.command, {})
    if not isinstance(section, dict):
        raise ConfigError(f"{args.config}: '{args.command}' must be a table")
    values.update(section)
    defaults = {}
    for key, value in values.items():
        dest = key.replace("-", "_")
        dest = {"from": "sweep_from", "to": "sweep_to"}.get(dest, dest)
        if dest not in known or dest in ("config", "help"):
            raise ConfigError(f"{args.config}: unknown option '{key}' for command '{args.command}'")
        defaults[dest] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


_EXIT_CODES = (
    ((ConfigError, InvalidArgumentError), EXIT_CONFIG),
    ((NumericalError,), EXIT_NUMERICAL),
    ((ParseError, CalibrationError, GenerationError, DegenerateGeometryError, BehindCameraError, OSError), EXIT_DATA),
)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        if args.config:
            args = _apply_config(parser, args, argv)
        if not args.out:
            raise ConfigError(f"{args.command}: missing required option --out")
        if args.jobs < 1:
            raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
        args.func(args)
    except Exception as exc:  # mapped to documented exit codes
        for types, code in _EXIT_CODES:
            if isinstance(exc, types):
                print(f"sim2road {args.command}: error: {exc}", file=sys.stderr)
                return code
        logger.exception("unexpected failure")
        return EXIT_UNEXPECTED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

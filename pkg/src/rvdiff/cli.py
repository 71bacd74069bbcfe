"""Command-line front end.

    rvdiff synth     --out DIR [--n N] [--seed S] [--kitti]
    rvdiff train     --corpus DIR --out MODEL [--log FILE]
    rvdiff generate  (--model MODEL | --oracle SCENE.rvs) --n N --out DIR [--closed-loop BOOL]
    rvdiff evaluate  --real DIR --gen DIR --report FILE
    rvdiff project   --bin SCAN.bin [--label SCAN.label] --out SCENE.rvs
    rvdiff export    --rvs SCENE.rvs --bin SCAN.bin [--label SCAN.label]
    rvdiff report    FILE

Every command accepts ``--config FILE`` and repeated ``--set section.key=value``.
Exit codes: 0 success, 2 usage or config error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from rvdiff import formats
from rvdiff.codec import Palette, SensorConfig, project_cloud
from rvdiff.config import RunConfig, load_config
from rvdiff.denoiser import OracleDenoiser, ToyDenoiser, load_checkpoint, save_checkpoint
from rvdiff.diffusion import TrainSample, generate, probe_loss, train
from rvdiff.errors import FormatError, RvdiffError, UsageError
from rvdiff.metrics import REPORT_KEYS, evaluate_sets
from rvdiff.synth import corpus

log = logging.getLogger("rvdiff")

MANIFEST = "manifest.json"


def _jsonl(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def _manifest(kind, cfg: RunConfig, files, **extra) -> dict:
    out = {
        "kind": kind,
        "count": len(files),
        "files": files,
        "sensor": cfg.sensor.to_json(),
        "palette": cfg.palette.to_json(),
    }
    out.update(extra)
    return out


def load_dir(path, cfg: RunConfig):
    """Scenes of a corpus directory plus the sensor and palette they were written with."""
    path = Path(path)
    if not path.is_dir():
        raise UsageError(f"{path}: not a directory")
    man_path = path / MANIFEST
    sensor, palette = cfg.sensor, cfg.palette
    if man_path.exists():
        try:
            man = json.loads(man_path.read_text())
            files = man["files"]
            sensor = SensorConfig(**man["sensor"])
            palette = Palette.from_json(man["palette"])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"{man_path}: malformed manifest ({exc})") from exc
    else:
        files = sorted(p.name for p in path.glob("*.rvs"))
    scenes = []
    for name in files:
        scene, sem, _ = formats.load_scene(path / name, sensor, palette)
        scenes.append((scene, sem))
    return scenes, sensor, palette


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, args) -> int:
    n = args.n if args.n is not None else int(cfg.synth["n"])
    seed = args.seed if args.seed is not None else int(cfg.synth["seed"])
    if n < 1:
        raise UsageError("--n must be >= 1")
    out = Path(args.out)
    worlds = corpus(n, cfg.world, seed, cfg.sensor, cfg.synth["shift"], cfg.synth["scale"])
    files = []
    for i, (cloud, spec) in enumerate(worlds):
        proj = project_cloud(cloud, cfg.sensor, cfg.palette)
        name = f"scene_{i:04d}.rvs"
        formats.write_rvs(out / name, proj.scene, proj.semantics)
        files.append(name)
        if args.kitti:
            pts = np.column_stack([cloud.xyz, cloud.reflectance]).astype("<f4")
            formats.write_kitti_scan(out / f"scene_{i:04d}.bin", pts)
            formats.write_kitti_label(out / f"scene_{i:04d}.label",
                                      cfg.palette.class_to_raw(cloud.labels).astype("<u4"))
    formats.write_json(out / MANIFEST, _manifest(
        "corpus", cfg, files, seed=seed, worlds=[w.to_json() for _, w in worlds]))
    log.info("wrote %d scenes to %s", n, out)
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    scenes, sensor, palette = load_dir(args.corpus, cfg)
    if not scenes:
        raise UsageError(f"{args.corpus}: corpus is empty")
    tc = cfg.train
    n_unlabeled = int(round(tc.unlabeled_fraction * len(scenes)))
    samples = []
    for i, (scene, sem) in enumerate(scenes):
        samples.append(TrainSample(scene.tensor(), None if i < n_unlabeled else sem))
    if any(s.semantics is not None and s.semantics.num_classes != palette.num_classes
           for s in samples):
        raise UsageError("corpus class count does not match the palette")

    model = ToyDenoiser(palette.num_classes, tc.hidden, tc.n_buckets, sensor, tc.fourier, tc.seed)
    records = []
    before = probe_loss(model, samples, cfg.schedule, seed=tc.seed)
    records.append({"event": "probe", "when": "initial", **before})

    def on_step(step, res):
        records.append(res.to_json(step))

    train(samples, model, tc, cfg.schedule, on_step)
    after = probe_loss(model, samples, cfg.schedule, seed=tc.seed)
    records.append({"event": "probe", "when": "final", **after})

    save_checkpoint(args.out, model, {
        "schedule": cfg.schedule.to_json(),
        "palette_classes": palette.num_classes,
        "train": cfg.raw["train"],
    })
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".jsonl")
    formats.atomic_write_text(log_path, _jsonl(records))
    log.info("probe loss %.4f -> %.4f", before["total"], after["total"])
    return 0


def _load_denoiser(cfg: RunConfig, args):
    if bool(args.model) == bool(args.oracle):
        raise UsageError("give exactly one of --model or --oracle")
    if args.oracle:
        scene, sem, _ = formats.load_scene(args.oracle, cfg.sensor, cfg.palette)
        if sem is None:
            raise UsageError(f"{args.oracle}: oracle scene needs semantics")
        return OracleDenoiser(scene.tensor(), sem, cfg.schedule)
    model, header = load_checkpoint(args.model)
    if header.get("schedule") != cfg.schedule.to_json():
        raise UsageError(f"{args.model}: checkpoint schedule {header.get('schedule')} "
                         f"does not match config {cfg.schedule.to_json()}")
    if model.num_classes != cfg.palette.num_classes:
        raise UsageError(f"{args.model}: checkpoint has {model.num_classes} classes, "
                         f"palette has {cfg.palette.num_classes}")
    if model.sensor is not None and model.sensor.shape != cfg.sensor.shape:
        raise UsageError(f"{args.model}: checkpoint sensor {model.sensor.shape} "
                         f"does not match config {cfg.sensor.shape}")
    return model


def cmd_generate(cfg: RunConfig, args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    loop = cfg.loop
    if args.closed_loop is not None:
        loop = type(loop)(loop.confidence_threshold, args.closed_loop, loop.alpha)
    denoiser = _load_denoiser(cfg, args)
    seed = args.seed if args.seed is not None else cfg.sampler.seed
    out = Path(args.out)
    files = []
    for i in range(args.n):
        rng = np.random.default_rng([seed, i])
        g = generate(denoiser, cfg.sensor, cfg.palette, cfg.sampler, loop, rng, cfg.schedule)
        name = f"gen_{i:04d}.rvs"
        formats.write_rvs(out / name, g.scene, g.semantics)
        formats.atomic_write_text(out / f"gen_{i:04d}.trace.jsonl", _jsonl(g.trace))
        files.append(name)
    formats.write_json(out / MANIFEST, _manifest(
        "generated", cfg, files, seed=seed, sampler=cfg.sampler.to_json(), loop=loop.to_json()))
    log.info("wrote %d generated scenes to %s", args.n, out)
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    real, sensor_r, _ = load_dir(args.real, cfg)
    gen, sensor_g, _ = load_dir(args.gen, cfg)
    if not real or not gen:
        raise UsageError("both scene sets must be non-empty")
    if sensor_r.shape != sensor_g.shape:
        raise UsageError(f"real {sensor_r.shape} and generated {sensor_g.shape} resolutions differ")
    report = evaluate_sets(real, gen, config=cfg.metrics)
    payload = report.to_json()
    payload["config"] = cfg.to_json()
    formats.write_json(args.report, payload)
    if not args.quiet:
        print(render_report(payload))
    return 0


def cmd_project(cfg: RunConfig, args) -> int:
    pts, raw = formats.load_kitti_cloud(args.bin, args.label)
    cloud = formats.cloud_from_kitti(pts, raw, cfg.palette)
    proj = project_cloud(cloud, cfg.sensor, cfg.palette)
    src = proj.source_index
    has = src >= 0
    extras = {}
    for k, col in (("x", 0), ("y", 1), ("z", 2), ("remission", 3)):
        plane = np.zeros(cfg.sensor.shape, dtype=np.float32)
        plane[has] = pts[src[has], col]
        extras[k] = plane
    lab = np.zeros(cfg.sensor.shape, dtype=np.float32)
    if raw is not None:
        lab[has] = raw[src[has]]
    extras["raw_label"] = lab
    formats.write_rvs(args.out, proj.scene, proj.semantics, extras)
    print(json.dumps({"points": len(pts), "kept": int(has.sum()), "dropped": proj.dropped,
                      "collisions": int(len(pts) - proj.dropped - has.sum())}))
    return 0


def cmd_export(cfg: RunConfig, args) -> int:
    rec = formats.read_rvs(args.rvs)
    pts, labels = formats.rvs_to_kitti(rec)
    formats.write_kitti_scan(args.bin, pts)
    if args.label:
        formats.write_kitti_label(args.label, labels)
    return 0


def render_report(payload: dict) -> str:
    rows = [f"{'metric':<14}{'value':>16}"]
    for k in REPORT_KEYS:
        rows.append(f"{k:<14}{payload[k]:>16.6g}")
    rows.append(f"{'n_real':<14}{payload['n_real']:>16d}")
    rows.append(f"{'n_gen':<14}{payload['n_gen']:>16d}")
    return "\n".join(rows)


def cmd_report(cfg: RunConfig, args) -> int:
    try:
        payload = json.loads(Path(args.path).read_text())
        print(render_report(payload))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{args.path}: not a metric report ({exc})") from exc
    return 0


# ---------------------------------------------------------------------------


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. train.steps=100")

    p = _Parser(prog="rvdiff", description=__doc__.split("\n\n")[0])
    p.add_argument("--json", action="store_true", help="machine-readable errors on stderr")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic labeled corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--kitti", action="store_true", help="also write .bin/.label files")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train the toy denoiser")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", parents=[common], help="sample labeled scenes")
    s.add_argument("--model")
    s.add_argument("--oracle")
    s.add_argument("--n", type=int, default=1)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--closed-loop", type=_bool, default=None)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("evaluate", parents=[common], help="compare two scene sets")
    s.add_argument("--real", required=True)
    s.add_argument("--gen", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("project", parents=[common], help="KITTI .bin/.label to RVS")
    s.add_argument("--bin", required=True)
    s.add_argument("--label")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_project)

    s = sub.add_parser("export", parents=[common], help="RVS with raw planes to KITTI .bin/.label")
    s.add_argument("--rvs", required=True)
    s.add_argument("--bin", required=True)
    s.add_argument("--label")
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("report", parents=[common], help="pretty-print a metric report")
    s.add_argument("path")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    json_errors = "--json" in (argv if argv is not None else sys.argv[1:])
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config, args.set)
        return args.func(cfg, args)
    except UsageError as exc:
        return _fail(exc, 2, json_errors)
    except (RvdiffError, OSError, ValueError) as exc:
        return _fail(exc, 1, json_errors)


def _fail(exc, code: int, json_errors: bool) -> int:
    if json_errors:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                     "exit_code": code}) + "\n")
    else:
        sys.stderr.write(f"rvdiff: error: {exc}\n")
    return code


if __name__ == "__main__":
    sys.exit(main())

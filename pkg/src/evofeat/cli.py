"""Shell front end for the evofeat library.

Subcommands: ``train``, ``detect``, ``describe``, ``match``,
``eval-homography``, ``maps`` and ``selftest``.  Exit codes: 0 success,
2 configuration error, 3 data error (unreadable images, bad checkpoints),
4 numeric failure.

Training configuration is a flat YAML mapping of dotted keys
(``desc.margin: 0.8``); nested mappings are flattened.  Precedence is
command-line flags > config file > built-in defaults, and unknown keys are
rejected.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys

import numpy as np
import torch
import yaml

from . import detect as det
from . import geometry, io, match_eval, reliability
from .describe_train import sample_descriptors
from .evolve import EvolveConfig, run_self_evolve
from .model import CheckpointError, forward, load_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("evofeat")


class ConfigError(ValueError):
    pass


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _parse_set(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = yaml.safe_load(value)
    return out


def build_config(path=None, overrides=None, seed=None) -> EvolveConfig:
    """Defaults, then the YAML file, then ``overrides`` and ``seed``."""
    flat = {}
    if path is not None:
        try:
            with open(path) as fp:
                doc = yaml.safe_load(fp) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must be a mapping")
        flat.update(_flatten(doc))
    flat.update(overrides or {})
    if seed is not None:
        flat["seed"] = seed
    try:
        return EvolveConfig.from_flat(flat)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc


def _load_net(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise io.DataError(f"checkpoint not found: {path}") from exc


def _open_out(path):
    if path in (None, "-"):
        return contextlib.nullcontext(sys.stdout)
    return open(path, "w")


def _extract(net, img, top_k, min_score=0.0):
    return det.detect(net, img, det.NMSConfig(4, top_k, min_score), with_descriptors=True)


# ---------------------------------------------------------------------------
# subcommands

def cmd_train(args) -> int:
    cfg = build_config(args.config, _parse_set(args.set), args.seed)
    if args.data:
        cfg = EvolveConfig.from_flat({"data_dir": args.data}, base=cfg)
    if args.synthetic:
        from .synthetic import synthetic_dataset
        images = synthetic_dataset(args.synthetic, cfg.seed)
    elif cfg.data_dir:
        images = io.load_image_dir(cfg.data_dir, cfg.max_side)
    else:
        raise ConfigError("no training data: pass --data, --synthetic or set data_dir")
    torch.manual_seed(cfg.seed)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.yaml"), "w") as fp:
        yaml.safe_dump(cfg.to_flat(), fp, sort_keys=True)
    _, report = run_self_evolve(cfg, images, out_dir=args.out, resume_from=args.resume)
    print(json.dumps({"config_hash": report.config_hash, "checkpoints": report.checkpoints,
                      "seconds": round(report.timings.get("total", 0.0), 1)}))
    return EXIT_OK


def cmd_detect(args) -> int:
    net = _load_net(args.ckpt)
    with _open_out(args.out) as fp:
        for path in args.images:
            kps = _extract(net, io.read_image(path), args.top_k, args.min_score)
            if len(args.images) > 1:
                fp.write(json.dumps({"v": det.KEYPOINT_SCHEMA_VERSION, "image": path,
                                     "count": len(kps)}) + "\n")
            det.write_jsonl(kps, fp)
    return EXIT_OK


def cmd_describe(args) -> int:
    net = _load_net(args.ckpt)
    img = io.read_image(args.image)
    if args.keypoints:
        with open(args.keypoints) as fp:
            try:
                kps = det.read_jsonl(fp)
            except (ValueError, KeyError) as exc:
                raise io.DataError(f"{args.keypoints}: {exc}") from exc
        with det.inference(net):
            _, desc = forward(net, geometry.to_luminance(img))
        try:
            kps.descriptors = sample_descriptors(desc[0].double(), kps.points).numpy()
        except IndexError as exc:
            raise io.DataError(f"{args.keypoints}: {exc}") from exc
    else:
        kps = _extract(net, img, args.top_k)
    with _open_out(args.out) as fp:
        det.write_jsonl(kps, fp)
    return EXIT_OK


def _match_image(img_a, img_b, kp_a, kp_b, m):
    import cv2

    def rgb(x):
        x = np.clip(x, 0, 1)
        return np.repeat(x[..., None], 3, axis=2) if x.ndim == 2 else x

    a, b = rgb(img_a), rgb(img_b)
    h = max(a.shape[0], b.shape[0])
    canvas = np.zeros((h, a.shape[1] + b.shape[1], 3))
    canvas[: a.shape[0], : a.shape[1]] = a
    canvas[: b.shape[0], a.shape[1]:] = b
    for i, j in zip(m.idx_a, m.idx_b):
        ra, ca = kp_a.points[i]
        rb, cb = kp_b.points[j]
        cv2.line(canvas, (int(ca), int(ra)), (int(cb) + a.shape[1], int(rb)), (0.1, 0.9, 0.2), 1,
                 cv2.LINE_AA)
    return canvas


def cmd_match(args) -> int:
    net = _load_net(args.ckpt)
    img_a, img_b = io.read_image(args.image_a), io.read_image(args.image_b)
    kp_a = _extract(net, img_a, args.top_k)
    kp_b = _extract(net, img_b, args.top_k)
    if args.ratio is not None:
        m = match_eval.ratio_test_match(kp_a.descriptors, kp_b.descriptors, args.ratio)
    else:
        m = match_eval.nn_match(kp_a.descriptors, kp_b.descriptors, cross_check=True)
    with _open_out(args.out) as fp:
        for i, j, d in zip(m.idx_a, m.idx_b, m.distances):
            (ya, xa), (yb, xb) = kp_a.points[i], kp_b.points[j]
            fp.write(json.dumps({"v": det.KEYPOINT_SCHEMA_VERSION, "xa": int(xa), "ya": int(ya),
                                 "xb": int(xb), "yb": int(yb), "distance": float(d)}) + "\n")
    if args.viz:
        io.write_image(args.viz, _match_image(img_a, img_b, kp_a, kp_b, m))
    return EXIT_OK


def cmd_eval(args) -> int:
    net = _load_net(args.ckpt)
    if not os.path.isdir(args.data):
        raise io.DataError(f"not a directory: {args.data}")
    seqs = match_eval.load_hpatches(args.data, args.max_side)
    if not seqs:
        raise io.DataError(f"no sequences found under {args.data}")
    cfg = match_eval.EvalConfig(top_k=args.top_k, ransac=match_eval.RansacConfig(seed=args.seed))
    report = match_eval.evaluate_sequences(net, seqs, cfg)
    report.write(args.report)
    plot = args.plot or os.path.splitext(args.report)[0] + ".png"
    report.plot(plot)
    summ = report.summary()
    print(json.dumps({"avg_ha": summ["avg"], "pairs": len(report.rows), "report": args.report,
                      "plot": plot}))
    return EXIT_OK


def cmd_maps(args) -> int:
    net = _load_net(args.ckpt)
    img = io.crop_to_multiple(io.read_image(args.image))
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    p = det.keypoint_probability(net, img)
    cfg = reliability.ReliabilityConfig(m=args.m)
    rmap, rounds = reliability.averaged_ratio_map(net, img, cfg, rng, return_rounds=True)
    first = rounds[0]
    maps = {"probability": p, "d_rep": np.where(first.valid, first.d_rep_fine, np.nan),
            "d_dis": np.where(first.valid, first.d_dis_fine, np.nan), "reliability": rmap.ratio}
    written = []
    for name, values in maps.items():
        path = os.path.join(args.out, f"{name}.png")
        io.write_heatmap(path, np.nan_to_num(values, nan=np.nanmin(values)))
        np.save(os.path.join(args.out, f"{name}.npy"), values)
        written.append(path)
    print(json.dumps({"maps": written}))
    return EXIT_OK


def cmd_selftest(args) -> int:
    import pytest

    here = os.path.dirname(os.path.abspath(__file__))
    tests = args.tests or os.path.join(here, "..", "..", "tests")
    if not os.path.isdir(tests):
        raise io.DataError(f"test directory not found: {tests}")
    marker = [] if args.slow else ["-m", "not slow"]
    return int(pytest.main([tests, "-q", *marker]))


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evofeat", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--device", choices=["cpu"], default="cpu",
                   help="compute device (CPU only in this build)")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the self-evolving training loop")
    t.add_argument("--config", help="YAML file of (dotted) config keys")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    t.add_argument("--seed", type=int)
    t.add_argument("--data", help="directory of training images")
    t.add_argument("--synthetic", type=int, metavar="N", help="train on N procedural images")
    t.add_argument("--resume", help="phase checkpoint to resume from")
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("detect", help="export keypoints as JSON lines")
    d.add_argument("--ckpt", required=True)
    d.add_argument("images", nargs="+")
    d.add_argument("--top-k", type=int, default=500)
    d.add_argument("--min-score", type=float, default=0.0)
    d.add_argument("--out", help="output file (default stdout)")
    d.set_defaults(func=cmd_detect)

    s = sub.add_parser("describe", help="export descriptors for given or detected keypoints")
    s.add_argument("--ckpt", required=True)
    s.add_argument("image")
    s.add_argument("--keypoints", help="JSON-lines keypoint file")
    s.add_argument("--top-k", type=int, default=500)
    s.add_argument("--out")
    s.set_defaults(func=cmd_describe)

    m = sub.add_parser("match", help="match two images")
    m.add_argument("--ckpt", required=True)
    m.add_argument("image_a")
    m.add_argument("image_b")
    m.add_argument("--top-k", type=int, default=500)
    m.add_argument("--ratio", type=float, help="use the ratio test instead of cross-checked NN")
    m.add_argument("--out")
    m.add_argument("--viz", help="write a side-by-side match image")
    m.set_defaults(func=cmd_match)

    e = sub.add_parser("eval-homography", help="homography accuracy on an HPatches-style tree")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--top-k", type=int, default=500)
    e.add_argument("--report", required=True, help="JSON-lines report path")
    e.add_argument("--plot", help="HA curve image (default: report path with .png)")
    e.add_argument("--max-side", type=int, help="downscale images (homographies adjusted)")
    e.add_argument("--seed", type=int, default=0, help="RANSAC seed")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("maps", help="dump probability, repeatability, distinctness and "
                                    "reliability heatmaps")
    r.add_argument("--ckpt", required=True)
    r.add_argument("image")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--m", type=int, default=5, help="number of random warps")
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_maps)

    st = sub.add_parser("selftest", help="run the test suite")
    st.add_argument("--tests", help="tests directory")
    st.add_argument("--slow", action="store_true", help="include the training smoke run")
    st.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (io.DataError, CheckpointError, geometry.GeometryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, match_eval.EstimationError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

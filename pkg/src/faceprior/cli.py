"""Command-line entry point: ``faceprior <subcommand> ...``.

Exit codes: 0 success, 1 user error (bad flags, config, inputs), 2 internal error.
Every run writes ``manifest.json`` into its output directory before starting and
again when it finishes.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import subprocess
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("faceprior")


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(f"{self.prog}: {message}")


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_json_atomic(path, payload) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
    with os.fdopen(fd, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    os.replace(tmp, path)


class RunManifest:
    def __init__(self, run_dir, command: str, seed: int, config_hash: str):
        self.path = Path(run_dir) / "manifest.json"
        self.data = {
            "command": command,
            "config_hash": config_hash,
            "seed": seed,
            "version": _version(),
            "started": _now(),
            "finished": None,
            "status": "running",
            "outputs": [],
        }
        write_json_atomic(self.path, self.data)

    def finish(self, outputs, status="ok"):
        self.data.update(finished=_now(), status=status, outputs=[str(o) for o in outputs])
        write_json_atomic(self.path, self.data)


def _args_hash(args) -> str:
    d = {k: str(v) for k, v in sorted(vars(args).items()) if k != "func"}
    return hashlib.sha256(json.dumps(d).encode()).hexdigest()[:16]


def _need_dir(path, flag):
    p = Path(path)
    if not p.is_dir():
        raise UserError(f"{flag}: {p} is not a directory")
    return p


# ---------------------------------------------------------------------------


def cmd_degrade(args):
    from .config import load_recipe
    from .degrade import example_rng, degrade
    from .imageio import load_dir, write_png

    src = _need_dir(args.in_dir, "--in")
    recipe = load_recipe(args.recipe)
    out = Path(args.out)
    manifest = RunManifest(out, "degrade", args.seed, _args_hash(args))
    names, imgs = load_dir(src)
    if not imgs:
        raise UserError(f"--in: no readable images in {src}")
    written = []
    for i, (name, img) in enumerate(zip(names, imgs)):
        seed = int(example_rng(args.seed, i).integers(0, 2**63 - 1))
        r = dataclasses.replace(recipe, seed=seed)
        p = out / (Path(name).stem + ".png")
        write_png(p, degrade(img, r, double_pass=args.double_pass))
        written.append(p)
    manifest.finish(written)
    print(f"degraded {len(written)} images -> {out}")


def cmd_train(args):
    from .config import load_config
    from .plotting import loss_curves
    from .train import read_metrics, train

    config = load_config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if args.steps is not None:
        config = dataclasses.replace(config, steps=args.steps)
    _need_dir(args.data, "--data")
    out = Path(args.out)
    manifest = RunManifest(out, "train", config.seed, config.digest())
    ckpt = train(args.data, config, out, resume=args.resume)
    metrics = read_metrics(out / "metrics.jsonl")
    outputs = [ckpt, out / "metrics.jsonl"]
    if metrics:
        outputs.append(loss_curves(metrics, out / "loss_curves.png"))
    manifest.finish(outputs)
    print(f"checkpoint: {ckpt}")


def _load_state(path):
    from .train import load_checkpoint

    if not Path(path).is_file():
        raise UserError(f"--checkpoint: {path} does not exist")
    return load_checkpoint(path)


def cmd_restore(args):
    import torch

    from .imageio import load_dir, to_numpy, to_tensor, write_png
    from .train import images_to_tensor

    src = _need_dir(args.in_dir, "--in")
    state = _load_state(args.checkpoint)
    if state.config.regime != args.regime:
        raise UserError(f"--regime {args.regime} does not match checkpoint regime {state.config.regime}")
    out = Path(args.out)
    manifest = RunManifest(out, "restore", args.seed, _args_hash(args))
    names, imgs = load_dir(src)
    written = []
    for name, img in zip(names, imgs):
        h, w = img.shape[:2]
        x = images_to_tensor([img], state.config.image_size)
        y = state.restore(x, seed=args.seed)
        if (h, w) != tuple(y.shape[-2:]):
            y = torch.nn.functional.interpolate(y, size=(h, w), mode="bilinear", align_corners=False).clamp(0, 1)
        p = out / (Path(name).stem + ".png")
        write_png(p, to_numpy(y))
        written.append(p)
    manifest.finish(written)
    print(f"restored {len(written)} images -> {out}")


def cmd_eval(args):
    from .evaluation import BrightestCornerDetector, evaluate
    from .losses import ToyIdentity
    from .plotting import psnr_histogram

    _need_dir(args.pred, "--pred")
    _need_dir(args.gt, "--gt")
    out = Path(args.out)
    run_dir = out.parent
    manifest = RunManifest(run_dir, "eval", args.seed, _args_hash(args))
    report = evaluate(args.pred, args.gt, ToyIdentity(), BrightestCornerDetector())
    report.config["seed"] = args.seed
    write_json_atomic(out, report.to_dict())
    table = out.with_suffix(".txt")
    table.write_text(report.to_table() + "\n")
    csv_path = out.with_suffix(".csv")
    csv_path.write_text(report.to_csv())
    fig = psnr_histogram([r["psnr"] for r in report.rows], out.with_suffix(".png"))
    manifest.finish([out, table, csv_path, fig])
    print(report.to_table())


def cmd_fuse_viz(args):
    import torch

    from .encoder import resize_for_backend
    from .imageio import load_dir, write_png
    from .plotting import gate_figure
    from .sdfm import gate_heatmap
    from .train import images_to_tensor

    src = _need_dir(args.in_dir, "--in")
    state = _load_state(args.checkpoint)
    if state.config.condition_mode != "sdfm":
        raise UserError(f"checkpoint uses condition mode {state.config.condition_mode!r}; gates exist only for 'sdfm'")
    out = Path(args.out)
    manifest = RunManifest(out, "fuse-viz", args.seed, _args_hash(args))
    names, imgs = load_dir(src)
    enc = state.encoder
    g = enc.native_size // enc.patch_size
    written = []
    csv_path = out / "gates.csv"
    out.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "token", "row", "col", "token_gate", "combined_mean"])
        for name, img in zip(names, imgs):
            lq = images_to_tensor([img], state.config.image_size)
            with torch.no_grad():
                mid = state.intermediate(lq)
                f_face = enc(resize_for_backend(mid, enc))
                f_lr = enc(resize_for_backend(lq, enc))
                _, gate = state.condition(f_face, f_lr)
            heat = gate_heatmap(gate, (g, g))
            stem = Path(name).stem
            big = np.kron(heat, np.ones((8, 8, 1)))
            p = out / f"{stem}_gate.png"
            write_png(p, big)
            comb = gate.combined[0].mean(-1).numpy().reshape(g, g)
            tok = gate.token[0, :, 0].numpy().reshape(g, g)
            fig = gate_figure({"combined gate": comb, "token gate": tok}, out / f"{stem}_gates_fig.png")
            written += [p, fig]
            for t in range(g * g):
                w.writerow([name, t, t // g, t % g, f"{tok.flat[t]:.6f}", f"{comb.flat[t]:.6f}"])
    written.append(csv_path)
    manifest.finish(written)
    print(f"wrote gate heatmaps for {len(names)} images -> {out}")


def cmd_ablate(args):
    from .ablate import VARIANTS, ablate
    from .config import load_config
    from .imageio import load_dir
    from .plotting import metric_bars
    from .train import images_to_tensor

    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    bad = [v for v in variants if v not in VARIANTS]
    if bad or not variants:
        raise UserError(f"--variants: unknown variant(s) {bad}; choose from {', '.join(VARIANTS)}")
    config = load_config(args.config)
    if args.steps is not None:
        config = dataclasses.replace(config, steps=args.steps)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [args.seed]
    _need_dir(args.data, "--data")
    _, imgs = load_dir(args.data)
    if not imgs:
        raise UserError(f"--data: no readable images in {args.data}")
    images = images_to_tensor(imgs, config.image_size)
    heldout = None
    if args.heldout:
        _, himgs = load_dir(_need_dir(args.heldout, "--heldout"))
        heldout = images_to_tensor(himgs, config.image_size)
    out = Path(args.out)
    manifest = RunManifest(out, "ablate", seeds[0], config.digest())
    report = ablate(config, variants, images, seeds=seeds, streams=args.streams, heldout=heldout)
    write_json_atomic(out / "ablation.json", report.to_dict())
    (out / "ablation.txt").write_text(report.to_table() + "\n")
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["variant", "streams", "seed", "psnr", "ssim", "id_degree", "lmd", "final_total"])
        w.writeheader()
        w.writerows(report.runs)
    fig = metric_bars(report.table, out / "ablation_psnr.png")
    manifest.finish([out / "ablation.json", out / "ablation.txt", out / "ablation.csv", fig])
    print(report.to_table())


def cmd_synth(args):
    from .synth import write_faces

    out = Path(args.out)
    manifest = RunManifest(out, "synth", args.seed, _args_hash(args))
    paths = write_faces(out, args.count, args.size, args.seed)
    manifest.finish(paths)
    print(f"wrote {len(paths)} faces -> {out}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="faceprior", description="Representation-conditioned one-step face restoration (toy scale).")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    s = sub.add_parser("degrade", help="synthesize LQ images from HQ images")
    s.add_argument("--in", dest="in_dir", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--recipe", required=True, help="YAML file with blur_sigma, down_factor, noise_sigma, jpeg_quality")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--double-pass", action="store_true", help="apply the degradation chain twice")
    s.set_defaults(func=cmd_degrade)

    s = sub.add_parser("train", help="train a one-step restorer")
    s.add_argument("--data", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    s.add_argument("--steps", type=int, default=None, help="overrides the config step count")
    s.add_argument("--resume", default=None, help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("restore", help="restore LQ images with a trained checkpoint")
    s.add_argument("--in", dest="in_dir", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--regime", choices=("epsilon", "rf"), required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_restore)

    s = sub.add_parser("eval", help="PSNR/SSIM/identity angle/landmark distance report")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True, help="report JSON path; .txt/.csv/.png written alongside")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("fuse-viz", help="render fusion gate heatmaps")
    s.add_argument("--in", dest="in_dir", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_fuse_viz)

    s = sub.add_parser("ablate", help="compare condition pathways under matched seeds")
    s.add_argument("--data", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--variants", default="placeholder,raw,sdfm")
    s.add_argument("--streams", choices=("both", "lr", "sr"), default="both",
                   help="input streams fed to the condition path")
    s.add_argument("--seeds", default=None, help="comma-separated seeds (default: --seed)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--heldout", default=None, help="directory of held-out GT faces")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("synth", help="write procedural toy faces")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=4)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    from .config import ConfigError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        print("error: a subcommand is required", file=sys.stderr)
        return 1
    try:
        args.func(args)
    except (UserError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

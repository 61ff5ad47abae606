"""fsnet command line: gen-data, train, eval, infer, gradcheck, ablate.

Settings come from a plain key=value file (``--config``), then the
``FSN_SEED`` environment variable, then ``--set KEY=VALUE`` flags. Every
command that writes outputs also writes ``<command>.config.txt`` with the
effective settings, which can be fed back through ``--config``.

Exit codes: 0 success, 1 usage or missing input, 2 verification failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .model import DetectorConfig

log = logging.getLogger("fsnet")

EXIT_OK, EXIT_USAGE, EXIT_VERIFY = 0, 1, 2

# run settings beyond the detector's own
RUN_DEFAULTS = {
    "data": "",
    "out": "",
    "checkpoint": "",
    "image": "",
    "proposals": "",
    "split": "test",
    "n_train": 200,
    "n_test": 50,
    "gradcheck_seeds": 20,
    "ablate_seeds": "0",
    "baseline_seeds": "1,2",
    "jobs": 1,
}


class UsageError(Exception):
    pass


def _detector_defaults() -> dict:
    return DetectorConfig().to_dict()


def _parse_value(key: str, text: str, default):
    text = text.strip()
    try:
        if key == "head_width":
            return None if text.lower() in ("", "none") else int(text)
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, (list, tuple)):
            return [int(v) for v in text.replace(",", " ").split()]
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {text!r}") from exc
    return text


def read_config_file(path) -> dict[str, str]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    out = {}
    for n, line in enumerate(p.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{p}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_settings(config_file=None, overrides=(), env=None) -> dict:
    """Merge defaults, config file, FSN_SEED and --set overrides; reject unknown keys."""
    env = os.environ if env is None else env
    defaults = {**_detector_defaults(), **RUN_DEFAULTS}
    raw: dict[str, str] = {}
    if config_file:
        raw.update(read_config_file(config_file))
    if env.get("FSN_SEED", "") != "":
        raw["seed"] = env["FSN_SEED"]
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    settings = dict(defaults)
    for k, v in raw.items():
        settings[k] = _parse_value(k, v, defaults[k])
    return settings


def detector_config(settings: dict) -> DetectorConfig:
    names = {f.name for f in dataclasses.fields(DetectorConfig)}
    try:
        return DetectorConfig(**{k: v for k, v in settings.items() if k in names})
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def format_settings(settings: dict) -> str:
    lines = []
    for k in sorted(settings):
        v = settings[k]
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k}={'none' if v is None else v}")
    return "\n".join(lines) + "\n"


def echo_config(out_dir: Path, command: str, settings: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{command}.config.txt").write_text(format_settings(settings))


def _require(settings, key, what):
    if not settings[key]:
        raise UsageError(f"{what} required (--{key.replace('_', '-')} or --set {key}=...)")
    return Path(settings[key])


def _split_dir(data: Path, split: str) -> Path:
    """A dataset root from gen-data holds train/ and test/; a split dir is used as is."""
    if (data / split / "annotations.jsonl").exists():
        return data / split
    if (data / "annotations.jsonl").exists():
        return data
    raise FileNotFoundError(f"no {split} dataset under {data}")


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in str(text).replace(",", " ").split()]
    except ValueError as exc:
        raise UsageError(f"bad seed list {text!r}") from exc


# --- commands ------------------------------------------------------------------

def cmd_gen_data(settings: dict) -> int:
    from .synth import TEST_OFFSET, generate_dataset, save_dataset
    out = _require(settings, "out", "output directory")
    seed = settings["seed"]
    for split, n, start in (("train", settings["n_train"], 0), ("test", settings["n_test"], TEST_OFFSET)):
        scenes = generate_dataset(n, seed, start=start)
        save_dataset(out / split, scenes, seed)
        print(f"{split}: {len(scenes)} scenes, {sum(len(s.boxes) for s in scenes)} objects -> {out / split}")
    echo_config(out, "gen-data", settings)
    return EXIT_OK


def cmd_train(settings: dict) -> int:
    from .synth import load_dataset
    from .train import Trainer, save_checkpoint
    cfg = detector_config(settings)
    data = _split_dir(_require(settings, "data", "dataset"), "train")
    out = _require(settings, "out", "output directory")
    scenes = load_dataset(data)
    trainer = Trainer(cfg)
    train_log = trainer.fit(scenes, log_every=50)
    save_checkpoint(out, trainer.net)
    (out / "loss.tsv").write_text("step\tcls_loss\treg_loss\n" + "\n".join(train_log.lines()) + "\n")
    echo_config(out, "train", settings)
    first, last = train_log.cls_loss[0], float(np.mean(train_log.cls_loss[-10:]))
    print(f"trained {cfg.iterations} steps on {len(scenes)} scenes in {train_log.seconds:.1f}s")
    print(f"cls loss {first:.4f} -> {last:.4f} (last 10 mean), reg loss {train_log.reg_loss[-1]:.4f}")
    print(f"checkpoint: {out} ({trainer.net.num_params} parameters)")
    return EXIT_OK


def _load_net(settings):
    from .train import load_checkpoint
    ckpt = _require(settings, "checkpoint", "checkpoint directory")
    return ckpt, load_checkpoint(ckpt)


def cmd_eval(settings: dict) -> int:
    from .evaluate import evaluate_scenes
    from .synth import load_dataset
    ckpt, net = _load_net(settings)
    data = _split_dir(_require(settings, "data", "dataset"), settings["split"])
    result = evaluate_scenes(net, load_dataset(data))
    text = "\n".join(result.lines()) + "\n"
    print(text, end="")
    out = Path(settings["out"]) if settings["out"] else ckpt
    echo_config(out, "eval", settings)
    (out / f"eval_{settings['split']}.txt").write_text(text)
    return EXIT_OK


def _infer_proposals(settings, image_path: Path, image: np.ndarray, cfg) -> np.ndarray:
    from .synth import Scene, generate_proposals, load_dataset
    if settings["proposals"]:
        p = Path(settings["proposals"])
        if not p.exists():
            raise FileNotFoundError(f"proposal file not found: {p}")
        return np.loadtxt(p, ndmin=2).reshape(-1, 4)
    # an image inside a dataset gets the same synthetic proposals as training
    root = image_path.parent.parent
    if (root / "annotations.jsonl").exists():
        for sc in load_dataset(root):
            if sc.name == image_path.stem:
                return generate_proposals(sc, cfg.proposals_per_image, seed=cfg.seed)
    blank = Scene(image, np.zeros((0, 4)), np.zeros(0, dtype=np.int64), cfg.seed)
    return generate_proposals(blank, cfg.proposals_per_image, seed=cfg.seed)


def cmd_infer(settings: dict) -> int:
    from .evaluate import infer
    from .synth import read_ppm
    ckpt, net = _load_net(settings)
    image_path = _require(settings, "image", "input image")
    if not image_path.exists():
        raise FileNotFoundError(f"image not found: {image_path}")
    image = read_ppm(image_path)
    dets = infer(net, image, _infer_proposals(settings, image_path, image, net.cfg))
    text = "".join(d.line() + "\n" for d in dets)
    print(text, end="")
    out = Path(settings["out"]) if settings["out"] else ckpt
    echo_config(out, "infer", settings)
    (out / f"detections_{image_path.stem}.txt").write_text(text)
    return EXIT_OK


def cmd_gradcheck(settings: dict) -> int:
    from .gradsuite import run_suite
    reports, seconds = run_suite(range(settings["gradcheck_seeds"]))
    lines = [line for r in reports for line in r.lines()]
    failed = [r for r in reports if not r.passed]
    summary = (f"{len(reports)} checks, {len(failed)} failed, max rel err "
               f"{max(r.max_rel_error for r in reports):.3e}, {seconds:.1f}s")
    print("\n".join(lines))
    print(summary)
    if settings["out"]:
        out = Path(settings["out"])
        echo_config(out, "gradcheck", settings)
        (out / "gradcheck.txt").write_text("\n".join(lines + [summary]) + "\n")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_ablate(settings: dict) -> int:
    from .ablation import baseline_gap, format_table, run_ablation, write_tsv
    base = detector_config(settings)
    data = _require(settings, "data", "dataset")
    train_dir, test_dir = _split_dir(data, "train"), _split_dir(data, settings["split"])
    out = _require(settings, "out", "output directory")
    echo_config(out, "ablate", settings)
    rows = run_ablation(base, train_dir, test_dir, _seeds(settings["ablate_seeds"]),
                        _seeds(settings["baseline_seeds"]), settings["jobs"], out)
    table = format_table(rows)
    (out / "ablation.txt").write_text(table)
    write_tsv(rows, out / "ablation.tsv")
    full, none = baseline_gap(rows)
    print(table, end="")
    print(f"full model mean mAP {full:.4f} vs no attention {none:.4f} (difference {full - none:+.4f})")
    return EXIT_OK


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic train/test sets"),
    "train": (cmd_train, "train a detector and write a checkpoint"),
    "eval": (cmd_eval, "per-class AP and mAP of a checkpoint on a split"),
    "infer": (cmd_infer, "detections for one image (class score x1 y1 x2 y2)"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of every backward pass"),
    "ablate": (cmd_ablate, "attention variant x shift direction grid"),
}

# flags that are shorthands for --set KEY=VALUE
SHORTHANDS = ("data", "out", "checkpoint", "image", "proposals", "split", "seed", "iterations", "jobs")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fsnet", description="Feature-selective detection on synthetic scenes.")
    parser.add_argument("--version", action="version", version=f"fsnet {__version__} ({kernels.BACKEND} kernels)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key=value settings file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one setting")
        for key in SHORTHANDS:
            p.add_argument(f"--{key}", dest=f"short_{key}", metavar=key.upper())
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    overrides = list(args.set)
    overrides += [f"{k}={getattr(args, f'short_{k}')}" for k in SHORTHANDS if getattr(args, f"short_{k}") is not None]
    func = COMMANDS[args.command][0]
    start = time.perf_counter()
    try:
        settings = resolve_settings(args.config, overrides)
        detector_config(settings)  # validate early
        code = func(settings)
    except (UsageError, FileNotFoundError) as exc:
        print(f"fsnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())

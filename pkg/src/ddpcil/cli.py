"""Command-line interface: ``ddpcil {datagen,run,ablate,gradcheck}``.

Settings resolve in this order, later winning: built-in defaults, a manifest
file given with ``--manifest``, ``DDP_<KEY>`` environment variables, explicit
flags. The resolved manifest is written next to the outputs, and rerunning
from it reproduces the reports byte for byte.

Exit codes: 0 success, 2 configuration or usage error, 3 numeric failure,
4 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__, kernels
from .datagen import SyntheticSpec, generate, load_dataset, load_external_manifest, save_dataset
from .errors import ConfigError, DDPError, FormatError, NumericError, UsageError
from .gradcheck import run_battery
from .protocol import TrainConfig, build_schedule, config_hash, parse_schedule, run_sequence
from .prompting import BRANCH_MODES, PROMPT_MODES, save_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

# manifest key -> (default, parser); every key has a documented default
MANIFEST_KEYS = {
    "schedule": ("20:B4-C2", str),
    "pcd": ("tau_max=7,gamma=0.2", str),
    "prompt_mode": ("class-specific", str),
    "branch_mode": ("both", str),
    "attach_depth": (3, int),
    "epochs": (20, int),
    "seed": (0, int),
    "lr": (TrainConfig.lr, float),
    "batch_size": (16, int),
    "prompt_len": (16, int),
    "init_std": (0.02, float),
    "threshold": (0.5, float),
    "high_conf_delta": (0.05, float),
    "num_layers": (6, int),
    "text_layers": (4, int),
    "num_heads": (4, int),
    "embed_dim": (64, int),
    "ff_width": (128, int),
    "patch_size": (2, int),
    "data": ("synthetic", str),
    "data_seed": (0, int),
    "kernels": (kernels.BACKEND, str),
    "out": ("runs/latest", str),
}

ABLATION_AXES = ("prompt-mode", "branch-mode", "pcd", "attach-depth")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stdout)
        print(f"{self.prog}: error: {message}")
        raise SystemExit(EXIT_CONFIG)


# --- manifest -----------------------------------------------------------------


def parse_pcd(text: str):
    """``"tau_max=7,gamma=0.2"`` -> (7.0, 0.2); ``"off"`` -> None."""
    text = text.strip()
    if text.lower() == "off":
        return None
    vals = {}
    for part in text.split(","):
        key, sep, val = part.partition("=")
        if not sep or key.strip() not in ("tau_max", "gamma"):
            raise ConfigError(f"--pcd must be 'tau_max=F,gamma=F' or 'off', got {text!r}")
        try:
            vals[key.strip()] = float(val)
        except ValueError:
            raise ConfigError(f"--pcd value {val!r} is not a number") from None
    if set(vals) != {"tau_max", "gamma"}:
        raise ConfigError("--pcd needs both tau_max and gamma")
    return vals["tau_max"], vals["gamma"]


def format_pcd(pcd) -> str:
    return "off" if pcd is None else f"tau_max={pcd[0]!r},gamma={pcd[1]!r}"


def read_manifest(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        key = key.strip()
        if not sep or key not in MANIFEST_KEYS:
            raise ConfigError(f"{path}:{n}: unknown manifest entry {line!r}")
        out[key] = val.strip()
    return out


def write_manifest(m: dict, path) -> None:
    lines = ["# ddpcil resolved run manifest"]
    lines += [f"{k} = {m[k]}" for k in MANIFEST_KEYS]
    Path(path).write_text("\n".join(lines) + "\n")


def resolve_manifest(args, env=None) -> dict:
    env = os.environ if env is None else env
    raw = {k: v[0] for k, v in MANIFEST_KEYS.items()}
    if getattr(args, "manifest", None):
        raw.update(read_manifest(args.manifest))
    for k in MANIFEST_KEYS:
        if f"DDP_{k.upper()}" in env:
            raw[k] = env[f"DDP_{k.upper()}"]
    for k in MANIFEST_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            raw[k] = v
    out = {}
    for k, (_, typ) in MANIFEST_KEYS.items():
        try:
            out[k] = typ(raw[k])
        except (TypeError, ValueError):
            raise ConfigError(f"manifest entry {k} = {raw[k]!r} is not a valid {typ.__name__}") from None
    out["pcd"] = format_pcd(parse_pcd(str(out["pcd"])))
    if out["prompt_mode"] not in PROMPT_MODES:
        raise ConfigError(f"prompt mode must be one of {', '.join(PROMPT_MODES)}")
    if out["branch_mode"] not in BRANCH_MODES:
        raise ConfigError(f"branch mode must be one of {', '.join(BRANCH_MODES)}")
    if out["kernels"] not in ("python", "compiled"):
        raise ConfigError("kernels must be 'python' or 'compiled'")
    if out["epochs"] < 0 or out["batch_size"] < 1 or not out["lr"] > 0:
        raise ConfigError("epochs must be >= 0, batch_size >= 1 and lr > 0")
    return out


def train_config(m: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    kw = {k: v for k, v in m.items() if k in names and k != "pcd"}
    return TrainConfig(pcd=parse_pcd(m["pcd"]), **kw)


def manifest_digest(m: dict) -> str:
    """Hash of the resolved manifest, ignoring where outputs go."""
    body = {k: v for k, v in m.items() if k != "out"}
    return config_hash(TrainConfig(), build_schedule(1, 1, 1), json.dumps(body, sort_keys=True))


def load_data(m: dict):
    if m["data"] == "synthetic":
        return generate(SyntheticSpec(seed=m["data_seed"]))
    root = Path(m["data"])
    out = []
    for split in ("train", "test"):
        if (root / f"{split}.ddpd").exists():
            out.append(load_dataset(root / f"{split}.ddpd"))
        elif (root / f"{split}.json").exists():
            out.append(load_external_manifest(root / f"{split}.json"))
        else:
            raise FileNotFoundError(f"no {split}.ddpd or {split}.json in {root}")
    return out[0], out[1]


# --- output -------------------------------------------------------------------


def _pct(x: float) -> str:
    return f"{100 * x:6.2f}"


def summary_table(report) -> str:
    rows = ["view  operating point     mAP    CF1    OF1    FPR"]
    for view in ("last", "avg"):
        for op in sorted(report.last):
            m = report.view(view, op)
            rows.append(f"{view.capitalize():<5} {op:<16} " + " ".join(_pct(m[k]) for k in ("mAP", "CF1", "OF1", "FPR")))
    return "\n".join(rows)


def _progress(total):
    def show(t, recs):
        r = recs[0]
        print(f"task {t}/{total}  classes={r.num_classes:<3d} tau={r.tau:.4f}  mAP={_pct(r.mAP).strip()}", flush=True)

    return show


def _execute(m: dict, train, test, verbose=True):
    total, base, inc = parse_schedule(m["schedule"])
    if train.num_classes != total:
        raise ConfigError(f"schedule covers {total} classes but the dataset has {train.num_classes}")
    schedule = build_schedule(total, base, inc)
    with kernels.backend(m["kernels"]):
        return run_sequence(train_config(m), train, test, schedule, manifest_digest(m),
                            progress=_progress(schedule.num_tasks) if verbose else None)


# --- commands -----------------------------------------------------------------


def cmd_datagen(args) -> int:
    grid = tuple(int(g) for g in args.grid.split(","))
    if len(grid) != 3:
        raise ConfigError(f"--grid must be ROWS,COLS,CH, got {args.grid!r}")
    spec = SyntheticSpec(
        num_classes=args.num_classes, grid=grid, noise_std=args.noise_std,
        train_per_class=args.train_per_class, test_per_class=args.test_per_class, seed=args.seed,
    )
    train, test = generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(train, out / "train.ddpd")
    save_dataset(test, out / "test.ddpd")
    (out / "synthetic.json").write_text(json.dumps(spec.to_dict(), sort_keys=True, indent=2) + "\n")
    print(f"wrote {len(train)} train and {len(test)} test images ({spec.num_classes} classes) to {out}")
    return EXIT_OK


def run_to_dir(m: dict, train, test, verbose=True):
    """Run one resolved manifest and write its manifest, report, curves and checkpoint."""
    out = Path(m["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(m, out / "manifest.txt")
    result = _execute(m, train, test, verbose)
    report = result.report
    (out / "report.json").write_text(report.to_json())
    (out / "curves.csv").write_text(report.to_csv())
    save_checkpoint(result.state.store, out / "prompts.ckpt", report.manifest_hash)
    return result


def cmd_run(args) -> int:
    m = resolve_manifest(args)
    train, test = load_data(m)
    result = run_to_dir(m, train, test)
    print(summary_table(result.report))
    print(f"outputs in {m['out']}")
    return EXIT_OK


def ablation_rows(axis: str, m: dict):
    """(label, manifest overrides) pairs for one ablation axis."""
    if axis == "prompt-mode":
        return [(p, {"prompt_mode": p}) for p in ("none", "global", "task-specific", "class-specific")]
    if axis == "branch-mode":
        return [("none", {"prompt_mode": "none"})] + [
            (b, {"branch_mode": b}) for b in ("neg-only", "pos-only", "both")
        ]
    if axis == "pcd":
        on = m["pcd"] if m["pcd"] != "off" else MANIFEST_KEYS["pcd"][0]
        return [("pcd-off", {"pcd": "off"}), ("pcd-on", {"pcd": on})]
    if axis == "attach-depth":
        return [(f"k={k}", {"attach_depth": k}) for k in range(1, m["num_layers"] + 1)]
    raise UsageError(f"unknown ablation axis {axis!r}; choose from {', '.join(ABLATION_AXES)}")


def cmd_ablate(args) -> int:
    m = resolve_manifest(args)
    rows = ablation_rows(args.axis, m)
    train, test = load_data(m)
    out = Path(m["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(m, out / "manifest.txt")
    results = {}
    for label, override in rows:
        print(f"== {args.axis}: {label}", flush=True)
        mm = dict(m, **override)
        results[label] = _execute(mm, train, test).report
    lines = [f"{args.axis:<16} Last mAP   CF1    OF1    FPR   | Avg mAP   CF1    OF1"]
    for label, rep in results.items():
        la, av = rep.view("last", "default"), rep.view("avg", "default")
        lines.append(f"{label:<16} {_pct(la['mAP'])} {_pct(la['CF1'])} {_pct(la['OF1'])} {_pct(la['FPR'])} |"
                     f" {_pct(av['mAP'])} {_pct(av['CF1'])} {_pct(av['OF1'])}")
    table = "\n".join(lines)
    doc = {"axis": args.axis, "rows": {k: r.to_dict() for k, r in results.items()}}
    (out / f"ablate_{args.axis}.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    (out / f"ablate_{args.axis}.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_battery(tol=args.tol)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<20} rel_err={r.rel_err:.3e}  (tol {r.tol:.0e})")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}")
        return EXIT_NUMERIC
    print(f"all {len(results)} gradient checks passed")
    return EXIT_OK


# --- argument parsing -----------------------------------------------------------


def _run_flags(p):
    p.add_argument("--manifest", help="key = value file; flags and DDP_* variables override it")
    p.add_argument("--schedule", help="TOTAL:Bx-Cy (default 20:B4-C2)")
    p.add_argument("--pcd", help="tau_max=F,gamma=F or off (default tau_max=7,gamma=0.2)")
    p.add_argument("--prompt-mode", dest="prompt_mode", choices=PROMPT_MODES)
    p.add_argument("--branch-mode", dest="branch_mode", choices=BRANCH_MODES)
    p.add_argument("--attach-depth", dest="attach_depth", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--data", help="directory with train/test .ddpd files, or 'synthetic'")
    p.add_argument("--data-seed", dest="data_seed", type=int)
    p.add_argument("--kernels", choices=("python", "compiled"))
    p.add_argument("--out", help="output directory (default runs/latest)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="ddpcil", description="Prompt-based multi-label class-incremental learning on a frozen dual encoder.")
    ap.add_argument("--version", action="version", version=f"ddpcil {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("datagen", help="write a seeded synthetic dataset")
    p.add_argument("--out", default="data/synth-20")
    p.add_argument("--num-classes", dest="num_classes", type=int, default=20)
    p.add_argument("--grid", default="8,8,4", help="ROWS,COLS,CH")
    p.add_argument("--noise-std", dest="noise_std", type=float, default=1.0)
    p.add_argument("--train-per-class", dest="train_per_class", type=int, default=40)
    p.add_argument("--test-per-class", dest="test_per_class", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("run", help="train and evaluate one incremental sequence")
    _run_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run one ablation sweep side by side")
    p.add_argument("--axis", required=True, choices=ABLATION_AXES)
    _run_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as e:
        print(f"numeric failure: {e}")
        return EXIT_NUMERIC
    except (FormatError, OSError) as e:
        print(f"i/o error: {e}")
        return EXIT_IO
    except (DDPError, ValueError) as e:
        print(f"configuration error: {e}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

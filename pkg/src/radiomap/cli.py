"""Command line interface: ``radiomap <subcommand> [--config FILE] [flags]``.

Settings resolve as flag > config file > built-in default.  The config file
is INI; keys are read from the section named after the subcommand and from
``[DEFAULT]``.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from pathlib import Path

import numpy as np

from .coverage import (CoverageProblem, RelaxationConfig, floor_dbm, gradient_descent_angles, random_search,
                       received_power_maps, sinr_map, total_power_map)
from .dataset import generate_dataset, load_manifest, load_samples, load_scene, verify_dataset
from .features import PRESETS, assemble_input_stack, manifest_for
from .model import ModelConfig, build_model, load_checkpoint, predict, save_checkpoint
from .propagation import TxConfig, sample_transmitters
from .raster_io import read_png_gray, write_png_gray, write_raw
from .scaling import ScalingConfig, gray_to_db
from .training import TrainConfig, evaluate, metrics_report, train


class CLIError(Exception):
    pass


# name -> (type, default); default None means required
SETTINGS = {
    "gen-data": {"out": (str, None), "seed": (int, 0), "n": (int, 16), "size": (int, 64),
                 "tx_per_scene": (int, 4)},
    "encode": {"data": (str, None), "out": (str, None), "preset": (str, "image"), "split": (str, "all"),
               "seed": (int, 0)},
    "train": {"data": (str, None), "out": (str, None), "preset": (str, "image"), "seed": (int, 0),
              "width": (int, 8), "depth": (int, 2), "block": (str, "deformable"), "kernel": (int, 3),
              "epochs": (int, 20), "batch_size": (int, 8), "lr": (float, 1e-3), "patience_lr": (int, 3),
              "patience_early": (int, 6), "augment": (bool, True)},
    "eval": {"data": (str, None), "checkpoint": (str, None), "out": (str, None), "split": (str, "test"),
             "seed": (int, 0)},
    "predict": {"data": (str, None), "checkpoint": (str, None), "out": (str, None), "map_id": (int, 0),
                "seed": (int, 0)},
    "optimize": {"data": (str, None), "checkpoint": (str, None), "out": (str, None), "scene": (int, 0),
                 "scenario": (str, "macro_diversity"), "method": (str, "both"), "iters": (int, 500),
                 "n_bs": (int, 3), "threshold": (float, 20.0), "noise": (float, -104.0), "alpha": (float, -2.0),
                 "kappa": (float, 4.0), "lr": (float, 0.15), "seed": (int, 0)},
    "metrics": {"pred": (str, None), "target": (str, None), "out": (str, ""), "seed": (int, 0)},
}

SCENARIO_ALIASES = {"macro_diversity": "macro_diversity", "power": "macro_diversity", "sinr": "max_sinr",
                    "max_sinr": "max_sinr"}


def _parse_bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="radiomap", description="Radio map prediction and antenna orientation tools")
    sub = p.add_subparsers(dest="command", required=True)
    for name, spec in SETTINGS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None, help="INI file with a [%s] section" % name)
        for key, (typ, _) in spec.items():
            flag = "--" + key.replace("_", "-")
            conv = _parse_bool if typ is bool else typ
            sp.add_argument(flag, dest=key, type=conv, default=argparse.SUPPRESS)
    return p


def resolve(command: str, args: argparse.Namespace) -> dict:
    spec = SETTINGS[command]
    values = {}
    if getattr(args, "config", None):
        cp = configparser.ConfigParser()
        if not cp.read(args.config):
            raise CLIError(f"cannot read config file {args.config}")
        section = cp[command] if cp.has_section(command) else cp.defaults()
        for key, raw in section.items():
            key_n = key.replace("-", "_")
            if key_n not in spec:
                raise CLIError(f"unknown config key {key!r} for {command}")
            typ = spec[key_n][0]
            try:
                values[key_n] = _parse_bool(raw) if typ is bool else typ(raw)
            except ValueError as exc:
                raise CLIError(f"bad value for config key {key!r}: {exc}") from exc
    for key in spec:
        if hasattr(args, key):
            values[key] = getattr(args, key)
    for key, (_, default) in spec.items():
        if key not in values:
            if default is None:
                raise CLIError(f"missing required setting {key!r} (flag --{key.replace('_', '-')} or config key)")
            values[key] = default
    return values


def _preset(name: str):
    if name not in PRESETS:
        raise CLIError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]


def _out(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_run_manifest(out: Path, command: str, settings: dict, extra: dict | None = None):
    doc = {"command": command, "settings": settings}
    doc.update(extra or {})
    (out / f"run_{command}.json").write_text(json.dumps(doc, indent=1, sort_keys=True))


# ------------------------------------------------------------------ subcommands
def cmd_gen_data(s):
    man = generate_dataset(s["out"], s["n"], s["seed"], s["size"], s["tx_per_scene"])
    print(f"wrote {len(man.maps)} maps over {len(man.scenes)} scenes to {s['out']}")


def cmd_encode(s):
    out = _out(s["out"])
    preset = _preset(s["preset"])
    man = load_manifest(s["data"])
    verify_dataset(s["data"], man)
    split = None if s["split"] == "all" else s["split"]
    data = load_samples(s["data"], preset, split, man)
    write_raw(out / "inputs.raw", data.inputs, units="normalized")
    write_raw(out / "targets.raw", data.targets, units="gray")
    _write_run_manifest(out, "encode", s, {"channel_manifest": list(manifest_for(preset))})
    print(f"encoded {len(data)} samples with {data.inputs.shape[1]} channels")


def cmd_train(s):
    out = _out(s["out"])
    (out / "checkpoints").mkdir(exist_ok=True)
    preset = _preset(s["preset"])
    man = load_manifest(s["data"])
    verify_dataset(s["data"], man)
    tr = load_samples(s["data"], preset, "train", man)
    try:
        va = load_samples(s["data"], preset, "val", man)
    except ValueError:
        va = None
    cfg = ModelConfig(width=s["width"], depth=s["depth"], block_type=s["block"], kernel=s["kernel"],
                      in_channels=preset.n_channels, seed=s["seed"])
    tcfg = TrainConfig(batch_size=s["batch_size"], lr=s["lr"], max_epochs=s["epochs"], patience_lr=s["patience_lr"],
                       patience_early=s["patience_early"], augment=s["augment"], seed=s["seed"])
    model = build_model(cfg)
    result = train(model, tr, va, tcfg, log=print)
    save_checkpoint(out / "checkpoints" / "model.ckpt", model, {
        "channel_manifest": list(manifest_for(preset)), "preset": s["preset"],
        "scaling": ScalingConfig.from_dict(man.scaling).to_dict(), "train_config": tcfg.to_dict(),
        "train_mean": float(np.mean(tr.targets))})
    result.write_csv(out / "history.csv")
    _write_run_manifest(out, "train", s, {"best_epoch": result.best_epoch, "best_val_rmse": result.best_val_rmse})


def _load_ckpt(path):
    model, header = load_checkpoint(path)
    return model, header, _preset(header.get("preset", "image"))


def cmd_eval(s):
    out = _out(s["out"])
    model, header, preset = _load_ckpt(s["checkpoint"])
    man = load_manifest(s["data"])
    data = load_samples(s["data"], preset, None if s["split"] == "all" else s["split"], man)
    scaling = ScalingConfig.from_dict(man.scaling)
    report = evaluate(model, data, scaling, header.get("train_mean"))
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    _write_run_manifest(out, "eval", s)
    print(json.dumps(report.to_dict(), sort_keys=True))


def cmd_predict(s):
    out = _out(s["out"])
    model, header, preset = _load_ckpt(s["checkpoint"])
    man = load_manifest(s["data"])
    rec = next((m for m in man.maps if m.map_id == s["map_id"]), None)
    if rec is None:
        raise CLIError(f"map id {s['map_id']} not in dataset")
    scene = load_scene(s["data"], next(x for x in man.scenes if x.scene == rec.scene))
    stack = assemble_input_stack(scene, TxConfig.from_dict(rec.tx), preset)
    pred = np.clip(predict(model, stack.channels[None])[0, 0], 0.0, 1.0)
    scaling = ScalingConfig.from_dict(man.scaling)
    stem = f"pred_{rec.map_id:06d}"
    write_png_gray(out / f"{stem}.png", pred)
    write_raw(out / f"{stem}.raw", pred, units="gray")
    db = gray_to_db(pred, scaling)
    np.savetxt(out / f"{stem}_db.csv", db, delimiter=",", fmt="%.4f")
    _write_run_manifest(out, "predict", s)
    print(f"wrote {stem}.png")


def cmd_optimize(s):
    out = _out(s["out"])
    (out / "traces").mkdir(exist_ok=True)
    scenario = SCENARIO_ALIASES.get(s["scenario"])
    if scenario is None:
        raise CLIError(f"unknown scenario {s['scenario']!r}")
    if s["method"] not in ("gd", "rs", "both"):
        raise CLIError("method must be gd, rs or both")
    model, header, preset = _load_ckpt(s["checkpoint"])
    man = load_manifest(s["data"])
    rec = next((x for x in man.scenes if x.scene == s["scene"]), None)
    if rec is None:
        raise CLIError(f"scene {s['scene']} not in dataset")
    scene = load_scene(s["data"], rec)
    txs = sample_transmitters(scene, s["n_bs"], np.random.default_rng([s["seed"], 2]))
    problem = CoverageProblem(scene, txs, scene.building == 0, preset, scenario, s["noise"], s["threshold"],
                              ScalingConfig.from_dict(man.scaling))
    relax = RelaxationConfig(alpha=s["alpha"], kappa=s["kappa"])
    summary = {}
    runs = []
    if s["method"] in ("rs", "both"):
        runs.append(("random_search", random_search(problem, model, s["iters"], s["seed"])))
    if s["method"] in ("gd", "both"):
        runs.append(("gradient_descent", gradient_descent_angles(problem, model, relax, s["iters"], s["lr"])))
    for name, res in runs:
        res.write_csv(out / "traces" / f"{name}.csv")
        maps = received_power_maps(problem, model, res.angles)
        cov = total_power_map(maps, floor_dbm(problem)) if scenario == "macro_diversity" \
            else sinr_map(maps, problem.noise_dbm)
        write_raw(out / f"{name}_coverage.raw", cov, units="dBm" if scenario == "macro_diversity" else "dB")
        np.savetxt(out / f"{name}_coverage.csv", cov, delimiter=",", fmt="%.4f")
        summary[name] = {"initial": res.initial_score, "final": res.score, "angles": res.angles.tolist()}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    _write_run_manifest(out, "optimize", s, {"transmitters": [t.to_dict() for t in txs]})
    print(json.dumps(summary, sort_keys=True))


def cmd_metrics(s):
    pred = read_png_gray(s["pred"])
    target = read_png_gray(s["target"])
    report = metrics_report(pred, target, float(np.mean(target)))
    if s.get("out"):
        out = _out(s["out"])
        (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    print(json.dumps(report.to_dict(), sort_keys=True))


COMMANDS = {"gen-data": cmd_gen_data, "encode": cmd_encode, "train": cmd_train, "eval": cmd_eval,
            "predict": cmd_predict, "optimize": cmd_optimize, "metrics": cmd_metrics}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = resolve(args.command, args)
        COMMANDS[args.command](settings)
    except (CLIError, ValueError, OSError, KeyError, RuntimeError, FloatingPointError) as exc:
        print(f"radiomap {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``tempered-nilm <command> [--config FILE] [--key value ...]``.

Settings resolve as defaults, then the command's section of a ``key = value``
config file (a ``[common]`` section applies to every command), then flags.
The output directory is ``--out``, else ``$TEMPERED_NILM_OUT``, else the
config file's ``out``, else ``runs/<command>``.

Exit codes: 0 ok, 1 usage, 2 data, 3 numeric divergence.
"""

import argparse
import configparser
import csv
import hashlib
import io
import json
import logging
import os
import statistics
import sys
import time
from dataclasses import asdict

import numpy as np

from . import __version__
from .attention import SMOOTHING_LOGITS, AttentionMode, smoothing_csv, smoothing_study
from .data import (ApplianceSpec, NormStats, SyntheticSpec, build_datasets,
                   build_synthetic_datasets, load_manifest, make_windows, split_pairs,
                   synthetic_split, write_synthetic_dataset)
from .errors import DataError, DivergenceError, DomainError, NilmError, NumericError, ShapeError
from .gradcheck import ALL_MODES, model_gradcheck
from .model import ModelConfig, NilmModel, checkpoint_bytes, embed, encode, load_checkpoint
from .training import (LossConfig, MaskingScheme, TrainConfig, epoch_log_csv, evaluate, train)

log = logging.getLogger("tempered_nilm")

OUT_ENV = "TEMPERED_NILM_OUT"

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

_MODEL_KEYS = {
    "window_len": 480, "hidden": 16, "layers": 2, "heads": 2, "dropout": 0.5,
    "mode": "meta", "ffn_mult": 4, "meta_hidden": 0, "precision": "float32",
}
_DATA_KEYS = {
    "data": "",  # manifest path; empty -> in-memory synthetic house
    "synth_seed": 0, "synth_duration": 50_000, "train_fraction": 0.8,
}
_TRAIN_KEYS = {
    "epochs": 100, "batch_size": 64, "lr": 1e-4, "weight_decay": 0.01, "clip_norm": 1.0,
    "mask_ratio": 0.3, "mask_value": -1.0, "kl_weight": 0.1, "margin_weight": 1.0,
    "l1_on_weight": 1e-3, "kl_temperature": 0.1, "log_wallclock": False,
}

DEFAULTS = {
    "train": {"appliance": "pump", "seed": 0, **_MODEL_KEYS, **_DATA_KEYS, **_TRAIN_KEYS},
    "eval": {"checkpoint": "", "split": "test", "data": "", "synth_seed": 0,
             "synth_duration": 50_000, "train_fraction": 0.8,
             "window_len": 0, "hidden": 0, "layers": 0, "heads": 0, "mode": "",
             "ffn_mult": 0, "meta_hidden": -1},
    "ablate": {"appliances": "heater,pump", "seed": 0, **_MODEL_KEYS, **_DATA_KEYS,
               **_TRAIN_KEYS},
    "bench": {"window_len": 480, "hidden": 16, "layers": 2, "heads": 2, "ffn_mult": 4,
              "batch": 8, "reps": 100, "warmup": 5, "seed": 0, "fixed_multiplier": "1/2",
              "precision": "float32"},
    "inspect": {"x": ",".join(str(v) for v in SMOOTHING_LOGITS), "dk": "1,4,16,64,256",
                "checkpoint": "", "window": 0, "split": "test", "data": "", "synth_seed": 0,
                "synth_duration": 50_000, "train_fraction": 0.8},
    "synth": {"seed": 0, "duration": 50_000, "train_fraction": 0.8, "house": 1},
    "gradcheck": {"modes": ",".join(ALL_MODES), "window_len": 32, "hidden": 8, "batch": 2,
                  "seed": 0, "eps": 1e-5, "tol": 1e-4},
}

# Eval keys that pin the architecture; 0 / "" / -1 mean "take it from the checkpoint".
_EVAL_ARCH = ("window_len", "hidden", "layers", "heads", "mode", "ffn_mult", "meta_hidden")

# Row order: baseline, fixed multipliers in TAU_MULTIPLIERS order, free tau, meta tau.
_MULTIPLIER_TEXT = ("1", "1/8", "1/4", "1/2", "2", "4", "8")
ABLATION_VARIANTS = (
    [("standard tau=sqrt(dk)", "standard")]
    + [(f"masked tau={c}*sqrt(dk)", "fixed:" + c) for c in _MULTIPLIER_TEXT]
    + [("masked learned tau", "raw"), ("masked meta-network tau", "meta")]
)

BENCH_ROWS = (
    ("standard attention", "standard"),
    ("+ masking", "fixed:1"),
    ("+ masking + fixed tau", None),  # mode filled from fixed_multiplier
    ("+ masking + learned tau", "raw"),
    ("+ masking + meta-network tau", "meta"),
)


class UsageError(NilmError):
    pass


# -- config resolution ------------------------------------------------------

def _convert(key, text, default):
    try:
        if isinstance(default, bool):
            low = str(text).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return str(text)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None


def read_config_file(path, command):
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as e:
        raise UsageError(f"cannot read config {path}: {e}") from None
    values = {}
    for section in ("common", command):
        if parser.has_section(section):
            values.update(parser.items(section))
    return values


def resolve_config(command, file_values=None, flag_values=None):
    """defaults <- file <- flags; unknown keys are usage errors."""
    defaults = DEFAULTS[command]
    cfg = dict(defaults)
    for source in (file_values or {}, flag_values or {}):
        for key, value in source.items():
            if key == "out":
                continue
            if key not in defaults:
                raise UsageError(f"unknown setting {key!r} for {command}")
            cfg[key] = _convert(key, value, defaults[key]) if isinstance(value, str) else value
    return cfg


def config_hash(command, cfg):
    blob = json.dumps({"command": command, **cfg}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def config_text(command, cfg):
    lines = [f"# config_hash = {config_hash(command, cfg)}", f"[{command}]"]
    lines += [f"{k} = {cfg[k]}" for k in sorted(cfg)]
    return "\n".join(lines) + "\n"


def _hash_comment(h):
    return f"# config_hash={h}\n"


def _write(path, text):
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _model_config(cfg, mode=None):
    try:
        return ModelConfig(window_len=cfg["window_len"], hidden=cfg["hidden"], layers=cfg["layers"],
                           heads=cfg["heads"], dropout=cfg["dropout"],
                           mode=AttentionMode.parse(mode or cfg["mode"]),
                           ffn_mult=cfg["ffn_mult"], seed=cfg["seed"],
                           meta_hidden=cfg["meta_hidden"], precision=cfg["precision"])
    except (DomainError, ShapeError) as e:
        raise UsageError(str(e)) from None


def _train_config(cfg):
    try:
        return TrainConfig(
            batch_size=cfg["batch_size"], lr=cfg["lr"], weight_decay=cfg["weight_decay"],
            clip_norm=cfg["clip_norm"], seed=cfg["seed"], log_wallclock=cfg["log_wallclock"],
            loss=LossConfig(cfg["kl_weight"], cfg["margin_weight"], cfg["l1_on_weight"],
                            cfg["kl_temperature"]),
            masking=MaskingScheme(cfg["mask_ratio"], cfg["mask_value"]))
    except DomainError as e:
        raise UsageError(str(e)) from None


def _synthetic_spec(cfg):
    return SyntheticSpec(duration_sec=cfg["synth_duration"], seed=cfg["synth_seed"])


def _datasets(cfg, appliance, L):
    if cfg["data"]:
        return build_datasets(load_manifest(cfg["data"]), appliance, L)
    return build_synthetic_datasets(_synthetic_spec(cfg), appliance, L, cfg["train_fraction"])


# -- commands ---------------------------------------------------------------

def _checkpoint_meta(h, dataset, appliance):
    return {"config_hash": h, "appliance": asdict(dataset.appliance) | {"key": appliance},
            "norm_stats": asdict(dataset.stats), "data_hash": dataset.data_hash()}


def cmd_train(cfg, out, h):
    mcfg = _model_config(cfg)
    train_set, _ = _datasets(cfg, cfg["appliance"], mcfg.window_len)
    model = NilmModel(mcfg)
    meta = _checkpoint_meta(h, train_set, cfg["appliance"])

    def progress(e):
        log.info("epoch %d loss %.5f taus %s", e.epoch, e.total_loss,
                 " ".join(f"{t:.3f}" for t in e.taus))

    os.makedirs(out, exist_ok=True)
    _write(os.path.join(out, "config.txt"), config_text("train", cfg))
    try:
        model, logs = train(model, train_set, cfg["epochs"], _train_config(cfg), on_epoch=progress)
    except DivergenceError as e:
        if e.last_good is not None:
            good = NilmModel(mcfg, e.last_good)
            with open(os.path.join(out, "last_good.ckpt"), "wb") as fh:
                fh.write(checkpoint_bytes(good, {**meta, "diverged_epoch": e.epoch}))
        raise
    with open(os.path.join(out, "model.ckpt"), "wb") as fh:
        fh.write(checkpoint_bytes(model, meta))
    _write(os.path.join(out, "epoch_log.csv"), _hash_comment(h) + epoch_log_csv(logs, mcfg.layers))
    print(f"trained {cfg['appliance']} ({mcfg.mode}) for {cfg['epochs']} epochs; "
          f"final loss {logs[-1].total_loss:.6f}; outputs in {out}")
    return EXIT_OK


def _eval_dataset(cfg, model_cfg, meta):
    """Windows for ``cfg['split']`` normalised with the checkpoint's training stats."""
    app = dict(meta.get("appliance") or {})
    key = app.pop("key", None)
    if key is None or "norm_stats" not in meta:
        raise DataError("checkpoint does not record its appliance and normalisation")
    spec = ApplianceSpec(**app)
    stats = NormStats(**meta["norm_stats"])
    split = cfg["split"]
    if split not in ("train", "test"):
        raise UsageError(f"split must be train or test, got {split!r}")
    L = model_cfg.window_len
    if cfg["data"]:
        pairs = split_pairs(load_manifest(cfg["data"]), key, split, L)
    else:
        _, pairs = synthetic_split(_synthetic_spec(cfg), key, split, cfg["train_fraction"])
    return make_windows(pairs, spec, L, norm_stats=stats, split="eval"), spec


def _check_arch(cfg, model_cfg):
    requested = {k: cfg[k] for k in _EVAL_ARCH if cfg[k] not in (0, "", -1)}
    if not requested:
        return
    have = model_cfg.to_dict()
    if "mode" in requested:
        try:
            requested["mode"] = str(AttentionMode.parse(requested["mode"]))
        except DomainError as e:
            raise UsageError(str(e)) from None
    merged = ModelConfig.from_dict({**have, **requested})
    if merged.architecture_hash() != model_cfg.architecture_hash():
        raise UsageError(f"checkpoint architecture {model_cfg.architecture_hash()} does not match "
                         f"requested {merged.architecture_hash()}")


def cmd_eval(cfg, out, h):
    if not cfg["checkpoint"]:
        raise UsageError("eval needs --checkpoint")
    if not os.path.exists(cfg["checkpoint"]):
        raise DataError(f"checkpoint {cfg['checkpoint']} not found")
    model, meta = load_checkpoint(cfg["checkpoint"])
    _check_arch(cfg, model.config)
    dataset, spec = _eval_dataset(cfg, model.config, dict(meta))
    rep = evaluate(model, dataset, spec)
    os.makedirs(out, exist_ok=True)
    doc = {"config_hash": h, "checkpoint_config_hash": meta.get("config_hash"),
           "split": cfg["split"], "report": rep.to_dict()}
    _write(os.path.join(out, "report.json"), json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(rep.to_json())
    return EXIT_OK


def run_ablation(cfg):
    """Train and evaluate every variant; returns ``(header, rows)``."""
    apps = [a.strip() for a in cfg["appliances"].split(",") if a.strip()]
    if not apps:
        raise UsageError("ablate needs at least one appliance")
    datasets = {a: _datasets(cfg, a, cfg["window_len"]) for a in apps}
    tcfg = _train_config(cfg)
    header = ["variant", "mode", "status", "data_hash"]
    for a in apps:
        header += [f"{a}_acc", f"{a}_f1", f"{a}_mre", f"{a}_mae"]
    rows = []
    for label, mode in ABLATION_VARIANTS:
        mcfg = _model_config(cfg, mode)
        hasher = hashlib.sha256(str(cfg["seed"]).encode())
        row = {"variant": label, "mode": str(mcfg.mode), "status": "ok"}
        failures = []
        for a in apps:
            tr, te = datasets[a]
            hasher.update(tr.data_hash().encode())
            try:
                model, _ = train(NilmModel(mcfg), tr, cfg["epochs"], tcfg)
                rep = evaluate(model, te)
                row.update({f"{a}_acc": rep.acc, f"{a}_f1": rep.f1, f"{a}_mre": rep.mre,
                            f"{a}_mae": rep.mae})
            except (NumericError, DataError, ShapeError) as e:
                log.warning("variant %s on %s failed: %s", label, a, e)
                failures.append(f"{a}: {type(e).__name__}")
                row.update({f"{a}_{m}": "" for m in ("acc", "f1", "mre", "mae")})
        if failures:
            row["status"] = "failed (" + "; ".join(failures) + ")"
        row["data_hash"] = hasher.hexdigest()[:16]
        rows.append(row)
        log.info("variant %s done", label)
    return header, rows


def _csv_text(header, rows, h):
    buf = io.StringIO()
    buf.write(_hash_comment(h))
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v
                    for k, v in r.items()})
    return buf.getvalue()


def cmd_ablate(cfg, out, h):
    header, rows = run_ablation(cfg)
    os.makedirs(out, exist_ok=True)
    text = _csv_text(header, rows, h)
    _write(os.path.join(out, "ablation.csv"), text)
    sys.stdout.write(text)
    return EXIT_OK


def bench_timings(cfg):
    """Median seconds per encoder forward for each row of :data:`BENCH_ROWS`."""
    from threadpoolctl import threadpool_limits

    base = dict(window_len=cfg["window_len"], hidden=cfg["hidden"], layers=cfg["layers"],
                heads=cfg["heads"], ffn_mult=cfg["ffn_mult"], seed=cfg["seed"], dropout=0.0,
                precision=cfg["precision"])
    models = []
    for label, mode in BENCH_ROWS:
        mode = mode or "fixed:" + cfg["fixed_multiplier"]
        try:
            models.append((label, NilmModel(ModelConfig(mode=mode, **base))))
        except (DomainError, ShapeError) as e:
            raise UsageError(str(e)) from None
    rng = np.random.default_rng(cfg["seed"])
    agg = rng.standard_normal((cfg["batch"], cfg["window_len"])).astype(cfg["precision"])
    tokens, _ = embed(agg, models[0][1])
    samples = {label: [] for label, _ in models}
    with threadpool_limits(limits=1):
        for rep in range(cfg["warmup"] + cfg["reps"]):
            # rotate the starting variant so drift hits every row equally
            k = rep % len(models)
            for label, model in models[k:] + models[:k]:
                t0 = time.perf_counter()
                encode(tokens, model)
                dt = time.perf_counter() - t0
                if rep >= cfg["warmup"]:
                    samples[label].append(dt)
    medians = [(label, statistics.median(samples[label])) for label, _ in models]
    return medians


def cmd_bench(cfg, out, h):
    if cfg["reps"] < 1:
        raise UsageError("reps must be positive")
    medians = bench_timings(cfg)
    base = medians[0][1]
    rows = [{"type": label, "seconds": sec, "ratio": sec / base} for label, sec in medians]
    os.makedirs(out, exist_ok=True)
    text = _csv_text(["type", "seconds", "ratio"], rows, h)
    _write(os.path.join(out, "bench.csv"), text)
    sys.stdout.write(text)
    return EXIT_OK


def _float_list(key, text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{key}: expected comma-separated numbers, got {text!r}") from None


def inspect_rows(model, window):
    """``(attention_rows, tau_rows)`` for one normalised input window."""
    res = model.forward(np.asarray(window, dtype=model.config.dtype)[None, :])
    att, taus = [], []
    for li, tr in enumerate(res.traces):
        a = tr.attention[0]
        for hi in range(a.shape[0]):
            for r in range(a.shape[1]):
                for c in range(a.shape[2]):
                    att.append({"layer": li + 1, "head": hi + 1, "row": r, "col": c,
                                "weight": float(a[hi, r, c])})
        taus.append({"layer": li + 1, "tau": float(np.mean(tr.tau))})
    return att, taus


def cmd_inspect(cfg, out, h):
    x = np.array(_float_list("x", cfg["x"]))
    dks = [int(v) for v in _float_list("dk", cfg["dk"])]
    if x.size < 1 or not dks or min(dks) < 1:
        raise UsageError("inspect needs a non-empty x and positive dk values")
    os.makedirs(out, exist_ok=True)
    _write(os.path.join(out, "smoothing.csv"), _hash_comment(h) + smoothing_csv(smoothing_study(x, dks)))
    written = ["smoothing.csv"]
    if cfg["checkpoint"]:
        if not os.path.exists(cfg["checkpoint"]):
            raise DataError(f"checkpoint {cfg['checkpoint']} not found")
        model, meta = load_checkpoint(cfg["checkpoint"])
        dataset, _ = _eval_dataset(cfg, model.config, dict(meta))
        if not 0 <= cfg["window"] < len(dataset):
            raise UsageError(f"window {cfg['window']} out of range (dataset has {len(dataset)})")
        att, taus = inspect_rows(model, dataset.aggregate[cfg["window"]])
        _write(os.path.join(out, "attention.csv"),
               _csv_text(["layer", "head", "row", "col", "weight"], att, h))
        _write(os.path.join(out, "tau.csv"), _csv_text(["layer", "tau"], taus, h))
        written += ["attention.csv", "tau.csv"]
    print("wrote " + ", ".join(os.path.join(out, w) for w in written))
    return EXIT_OK


def cmd_synth(cfg, out, h):
    spec = SyntheticSpec(duration_sec=cfg["duration"], seed=cfg["seed"])
    path = write_synthetic_dataset(spec, out, house=cfg["house"], train_fraction=cfg["train_fraction"])
    with open(path) as fh:
        manifest = json.load(fh)
    manifest["config_hash"] = h
    _write(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote synthetic house to {out}")
    return EXIT_OK


def cmd_gradcheck(cfg, out, h):
    modes = [m.strip() for m in cfg["modes"].split(",") if m.strip()]
    worst = 0.0
    rows = []
    for mode in modes:
        try:
            AttentionMode.parse(mode)
        except DomainError as e:
            raise UsageError(str(e)) from None
        r = model_gradcheck(mode, cfg["window_len"], cfg["hidden"], cfg["batch"], cfg["seed"], cfg["eps"])
        print(f"{r.mode}: max relative error {r.worst:.3e} ({r.worst_param})")
        rows.append({"mode": r.mode, "max_rel_error": r.worst, "worst_param": r.worst_param})
        worst = max(worst, r.worst)
    print(f"max relative error {worst:.3e}")
    os.makedirs(out, exist_ok=True)
    _write(os.path.join(out, "gradcheck.csv"), _csv_text(["mode", "max_rel_error", "worst_param"], rows, h))
    return EXIT_OK if worst <= cfg["tol"] else EXIT_NUMERIC


COMMANDS = {
    "train": (cmd_train, "train one appliance model"),
    "eval": (cmd_eval, "evaluate a checkpoint"),
    "ablate": (cmd_ablate, "run the attention-variant ablation grid"),
    "bench": (cmd_bench, "time encoder forward passes per attention variant"),
    "inspect": (cmd_inspect, "dump smoothing table and attention maps"),
    "synth": (cmd_synth, "write a synthetic dataset"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of model gradients"),
}


# -- argument parsing -------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="tempered-nilm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--out", help=f"output directory (overrides ${OUT_ENV})")
        p.add_argument("-v", "--verbose", action="store_true")
        for key, default in DEFAULTS[name].items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar=type(default).__name__.upper(),
                           help=f"default: {default}")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    command = args.command
    flags = {k: v for k, v in vars(args).items()
             if k in DEFAULTS[command] and v is not None}
    try:
        file_values = read_config_file(args.config, command) if args.config else {}
        cfg = resolve_config(command, file_values, flags)
        out = args.out or os.environ.get(OUT_ENV) or file_values.get("out") or os.path.join("runs", command)
        h = config_hash(command, cfg)
        return COMMANDS[command][0](cfg, out, h)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

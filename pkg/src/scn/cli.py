"""Command-line front end: ``scn train|eval|gradcheck``.

Runs are described by INI-style config files (see ``scn/configs``). Every
key is checked against the schema below; unknown sections or keys are an
error rather than silently ignored.
"""

import argparse
import configparser
import os
import sys

import numpy as np

from .data import Dataset, compute_per_pixel_mean, load_dataset, synthetic_dataset
from .exceptions import ConfigError, FormatError, TrainingDiverged
from .network import NetworkConfig, build_scn, load_checkpoint, scn_config
from .solver import TIGHT_SOLVER
from .training import AugmentSpec, TrainConfig, evaluate, gradcheck, train

DONE_MARKER = "DONE"
RESOLVED_CONFIG = "config.cfg"


def _ints(text):
    return tuple(int(t) for t in text.replace(",", " ").split())


def _sections(text):
    # "16x3, 32x2" -> ((16, 3), (32, 2))
    out = []
    for item in text.split(","):
        m, _, p = item.strip().partition("x")
        out.append((int(m), int(p or 1)))
    return tuple(out)


def _shape(text):
    # "1x8x8" or "1 8 8"
    return tuple(int(t) for t in text.lower().replace("x", " ").split())


def _bool(text):
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _tolerance(text):
    return None if text.strip() == "default" else float(text)


# section -> key -> (parser, default)
SCHEMA = {
    "model": {
        "type": (str, "scn"),
        "width": (int, 4),
        "sections": (_sections, ((16, 3), (32, 2), (64, 2))),
        "first_layer_channels": (int, 0),
        "lambda1": (float, 0.1),
        "lambda2": (float, 0.01),
        "window": (int, 3),
    },
    "solver": {
        "max_iter": (int, 50),
        "rel_tol": (float, 1e-4),
        "refine": (_bool, True),
    },
    "data": {
        "dataset": (str, "mnist"),
        "dir": (str, "data/mnist"),
        "train_subset": (int, 0),
        "test_subset": (int, 0),
        "subset_seed": (int, 0),
        "synthetic_shape": (_shape, (1, 8, 8)),
        "synthetic_classes": (int, 10),
        "synthetic_size": (int, 64),
    },
    "train": {
        "batch_size": (int, 128),
        "epochs": (int, 160),
        "base_lr": (float, 0.1),
        "lr_drop_epochs": (_ints, (80, 160)),
        "lr_drop_factor": (float, 0.1),
        "weight_decay": (float, 5e-4),
        "momentum": (float, 0.9),
        "horizontal_flip": (_bool, False),
        "max_translate_px": (int, 0),
        "seed": (int, 0),
    },
    "gradcheck": {
        "batch": (int, 4),
        "samples": (int, 200),
        "eps": (float, 1e-5),
        "tolerance": (_tolerance, None),
    },
}


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "default"
    if isinstance(value, tuple) and value and isinstance(value[0], tuple):
        return ", ".join(f"{m}x{p}" for m, p in value)
    if isinstance(value, tuple):
        return " ".join(str(v) for v in value)
    return str(value)


def read_config(path):
    """Parse a config file into ``{section: {key: value}}`` with defaults filled in."""
    if not os.path.isfile(path):
        raise FileNotFoundError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    unknown = [s for s in cp.sections() if s not in SCHEMA]
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {', '.join(unknown)}")
    out = {}
    for section, keys in SCHEMA.items():
        given = dict(cp[section]) if cp.has_section(section) else {}
        bad = [k for k in given if k not in keys]
        if bad:
            raise ConfigError(f"{path}: unknown key(s) in [{section}]: {', '.join(bad)}")
        vals = {}
        for key, (parse, default) in keys.items():
            if key in given:
                try:
                    vals[key] = parse(given[key])
                except ValueError as exc:
                    raise ConfigError(f"{path}: [{section}] {key}: {exc}") from None
            else:
                vals[key] = default
        out[section] = vals
    return out


def write_config(conf, path):
    cp = configparser.ConfigParser(interpolation=None)
    for section, vals in conf.items():
        cp[section] = {k: _format(v) for k, v in vals.items()}
    with open(path, "w") as f:
        cp.write(f)


def input_shape_for(data):
    name = data["dataset"]
    if name == "mnist":
        return (1, 28, 28)
    if name in ("cifar10", "cifar100"):
        return (3, 32, 32)
    if name == "synthetic":
        return data["synthetic_shape"]
    raise ConfigError(f"unknown dataset {name!r}")


def classes_for(data):
    return {"mnist": 10, "cifar10": 10, "cifar100": 100}.get(data["dataset"], data["synthetic_classes"])


def network_config(conf, tight=False):
    m, s, d = conf["model"], dict(conf["solver"]), conf["data"]
    if tight:
        s.update(TIGHT_SOLVER)
    common = dict(input_shape=input_shape_for(d), num_classes=classes_for(d), lambda1=m["lambda1"],
                  lambda2=m["lambda2"], max_iter=s["max_iter"], rel_tol=s["rel_tol"],
                  refine=s["refine"], window=m["window"])
    if m["type"] == "linear":
        cfg = NetworkConfig((), **common, model="linear")
        cfg.validate()
        return cfg
    if m["type"] != "scn":
        raise ConfigError(f"unknown model type {m['type']!r}")
    return scn_config(m["width"], m["sections"], first_layer_channels=m["first_layer_channels"], **common)


def train_config(conf):
    t = conf["train"]
    aug = AugmentSpec(t["horizontal_flip"], t["max_translate_px"])
    return TrainConfig(t["batch_size"], t["epochs"], t["base_lr"], t["lr_drop_epochs"], t["lr_drop_factor"],
                       t["weight_decay"], t["momentum"], aug, t["seed"])


def load_data(data):
    """``(train, test)`` per the [data] section, subsets applied."""
    if data["dataset"] == "synthetic":
        n = data["synthetic_size"]
        both = synthetic_dataset(2 * n, data["synthetic_shape"], data["synthetic_classes"], data["subset_seed"])
        train = both.subset(np.arange(n))
        test = Dataset(both.images[n:], both.labels[n:], "test", both.class_count)
        mean = compute_per_pixel_mean(train.images)
        return train.with_mean(mean), test.with_mean(mean)
    if not os.path.isdir(data["dir"]):
        raise FileNotFoundError(f"dataset directory not found: {data['dir']}")
    train, test = load_dataset(data["dataset"], data["dir"])
    rng = np.random.default_rng(data["subset_seed"])
    if data["train_subset"]:
        train = train.subset(np.sort(rng.permutation(len(train))[:data["train_subset"]]))
    if data["test_subset"]:
        test = test.subset(np.arange(min(data["test_subset"], len(test))))
    return train, test


def workers_from_env():
    text = os.environ.get("SCN_THREADS", "1")
    try:
        n = int(text)
    except ValueError:
        raise ConfigError(f"SCN_THREADS must be an integer, got {text!r}") from None
    return max(1, n)


def apply_overrides(conf, args):
    if getattr(args, "seed", None) is not None:
        conf["train"]["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        conf["train"]["epochs"] = args.epochs
    if getattr(args, "data", None) is not None:
        conf["data"]["dir"] = args.data
    return conf


# ---------------------------------------------------------------- commands

def cmd_train(args):
    conf = apply_overrides(read_config(args.config), args)
    net_cfg = network_config(conf)
    tcfg = train_config(conf)
    train_ds, test_ds = load_data(conf["data"])
    out = args.out or os.path.join("runs", os.path.splitext(os.path.basename(args.config))[0])
    os.makedirs(out, exist_ok=True)
    marker = os.path.join(out, DONE_MARKER)
    if os.path.exists(marker):
        os.remove(marker)
    write_config(conf, os.path.join(out, RESOLVED_CONFIG))
    net = build_scn(net_cfg, seed=tcfg.seed, workers=workers_from_env())
    print(f"training {net.num_parameters()} parameters on {len(train_ds)} images -> {out}")
    meta = {"data": {k: _format(v) for k, v in conf["data"].items()}}
    train(net, train_ds, test_ds, tcfg, out_dir=out, log=print, meta=meta)
    with open(marker, "w") as f:
        f.write("ok\n")
    return 0


def cmd_eval(args):
    expected = network_config(read_config(args.config)) if args.config else None
    net, manifest = load_checkpoint(args.checkpoint, expected=expected, workers=workers_from_env())
    stored = manifest.get("meta", {}).get("data")
    if args.config:
        data = read_config(args.config)["data"]
    elif stored:
        defaults = {k: v for k, (_, v) in SCHEMA["data"].items()}
        data = {**defaults, **{k: SCHEMA["data"][k][0](v) for k, v in stored.items() if k in SCHEMA["data"]}}
    else:
        raise ConfigError(f"{args.checkpoint}: no dataset recorded; pass --config")
    if args.data is not None:
        data["dir"] = args.data
    _, test_ds = load_data(data)
    print(f"test_error {evaluate(net, test_ds):.6f}")
    return 0


def cmd_gradcheck(args):
    conf = apply_overrides(read_config(args.config), args)
    g = conf["gradcheck"]
    net = build_scn(network_config(conf, tight=True), seed=conf["train"]["seed"], workers=workers_from_env())
    train_ds, _ = load_data(conf["data"])
    rng = np.random.default_rng(conf["train"]["seed"])
    idx = np.sort(rng.choice(len(train_ds), size=min(g["batch"], len(train_ds)), replace=False))
    tol = args.tolerance if args.tolerance is not None else g["tolerance"]
    report = gradcheck(net, train_ds.centered(idx), train_ds.labels[idx], samples=g["samples"],
                       eps=g["eps"], seed=conf["train"]["seed"], tolerance=tol)
    for line in report.lines():
        print(line)
    print("gradcheck " + ("passed" if report.passed else "FAILED: " + ", ".join(report.failures())))
    return 0 if report.passed else 1


def build_parser():
    p = argparse.ArgumentParser(prog="scn", description="Sparse coding network tools")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a network from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--out")
    t.add_argument("--data", help="dataset directory (overrides the config)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="report test error of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--config", help="expected architecture and dataset")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient check")
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--data")
    g.add_argument("--tolerance", type=float, help="override every group's tolerance")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, ConfigError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        for key, val in exc.diagnostics.items():
            print(f"  {key}: {val}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

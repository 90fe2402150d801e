"""Command-line front end.

Every command reads an optional ``key=value`` config file (``--config``),
applies command-line flags on top, writes the resolved configuration next
to its outputs and exits with 0 (success), 2 (usage or config error),
3 (data or I/O error) or 4 (numeric failure).
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import os
import sys
from dataclasses import dataclass

import numpy as np

from .constructions import (
    CenterCollapseError,
    PolynomialSpecError,
    compile_polynomial,
    parse_polynomial_spec,
    refine_sigma,
    sup_error,
)
from .kernels import (
    InadmissibleKernelError,
    Kernel1D,
    KernelFamily,
    SingularSystemError,
    conditioning_diagnostic,
    flat_limit_interpolant,
)
from .network import NotRealizableError, forward, init_model
from .serialize import ModelFormatError, load_model, save_model
from .training import (
    DatasetError,
    TrainConfig,
    TrainingDivergedError,
    load_dataset,
    mse_loss,
    select_centers,
    train,
    write_metrics,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
COMMANDS = ("train", "eval", "compile-poly", "flat-limit-study", "diagnose-conditioning")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass
class RunConfig:
    command: str = ""
    # paths
    data: str | None = None
    model: str | None = None
    out_dir: str = "."
    metrics: str | None = None
    report: str | None = None
    study: str | None = None
    echo: str | None = None
    poly: str | None = None
    nodes_file: str | None = None
    # architecture
    d_in: int = 1
    d_out: int = 1
    widths: tuple = (8, 8)
    kernel: str = "gaussian"
    epsilon: float = 1.0
    num_centers: int = 16
    # training
    center_rule: str = "first"
    seed: int = 0
    epochs: int = 100
    batch_size: int = 0
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    reg_weights: tuple = (0.0,)
    record_time: bool = False
    # constructions and studies
    sigma: float = 1e-3
    refine: bool = False
    box: tuple = (0.0, 1.0)
    grid_points: int = 0
    nodes: tuple = ()
    values: tuple = ()
    eps_list: tuple = (1.0, 0.1, 0.01, 0.001)
    interval: tuple = ()


def _to_int(text):
    return int(text.strip())


def _to_float(text):
    v = float(text.strip())
    if not math.isfinite(v):
        raise ValueError("not finite")
    return v


def _to_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true/false")


def _list_of(conv):
    def parse(text):
        parts = [p for p in text.replace(",", " ").split() if p]
        return tuple(conv(p) for p in parts)

    return parse


def _to_str(text):
    return text.strip()


_TYPE_NAMES = {_to_int: "integer", _to_float: "number", _to_bool: "boolean", _to_str: "string"}
_INT_LIST, _FLOAT_LIST = _list_of(_to_int), _list_of(_to_float)
_TYPE_NAMES[_INT_LIST] = "list of integers"
_TYPE_NAMES[_FLOAT_LIST] = "list of numbers"

CONVERTERS = {
    "d_in": _to_int, "d_out": _to_int, "num_centers": _to_int, "seed": _to_int, "epochs": _to_int,
    "batch_size": _to_int, "grid_points": _to_int,
    "epsilon": _to_float, "learning_rate": _to_float, "momentum": _to_float, "beta1": _to_float,
    "beta2": _to_float, "adam_eps": _to_float, "sigma": _to_float,
    "record_time": _to_bool, "refine": _to_bool,
    "widths": _INT_LIST, "reg_weights": _FLOAT_LIST, "box": _FLOAT_LIST, "nodes": _FLOAT_LIST,
    "values": _FLOAT_LIST, "eps_list": _FLOAT_LIST, "interval": _FLOAT_LIST,
}
KEYS = [f.name for f in dataclasses.fields(RunConfig) if f.name != "command"]
REQUIRED = {
    "train": ("data",),
    "eval": ("data", "model"),
    "compile-poly": ("poly",),
    "flat-limit-study": ("nodes", "values"),
    "diagnose-conditioning": ("nodes_file",),
}
HELP = {
    "data": "CSV dataset (header row, inputs then targets)",
    "model": "model file (written by train/compile-poly, read by eval)",
    "out_dir": "directory for outputs",
    "metrics": "metrics JSON-lines path (train)",
    "report": "grid-error report path (compile-poly)",
    "study": "two-column eps/error output path (flat-limit-study)",
    "echo": "resolved-config echo path",
    "poly": "polynomial spec, one 'coeff : n1 ... nd' per line",
    "nodes_file": "whitespace-separated node coordinates",
    "widths": "hidden widths, one per activation layer, e.g. 8,8",
    "kernel": "activation kernel family: " + ", ".join(k.value for k in KernelFamily),
    "reg_weights": "penalty weight per layer, or one value for all layers",
    "box": "domain box as lo,hi pairs (one pair is used for every coordinate)",
    "grid_points": "grid points per dimension (0 picks a default)",
    "batch_size": "minibatch size (0 = full batch)",
    "eps_list": "shape parameters scanned by flat-limit-study and diagnose-conditioning",
    "interval": "lo,hi of the flat-limit-study error grid (default: node range)",
}


def _convert(key: str, text: str):
    conv = CONVERTERS.get(key, _to_str)
    try:
        return conv(text)
    except ValueError:
        raise ConfigError(f"invalid value for '{key}': expected {_TYPE_NAMES[conv]}, got {text.strip()!r}") from None


def _norm_key(key: str) -> str:
    return key.strip().replace("-", "_")


def read_config_file(path) -> dict:
    """Parse ``key=value`` lines into raw strings; ``#`` starts a comment."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    raw: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        key = _norm_key(key)
        if key not in KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
        if key in raw:
            raise ConfigError(f"{path}:{lineno}: duplicate key '{key}'")
        raw[key] = value
    return raw


def parse_config(path, command: str, overrides: dict | None = None) -> RunConfig:
    """Typed config from a file (may be ``None``) with ``overrides`` winning."""
    raw = read_config_file(path) if path else {}
    for key, value in (overrides or {}).items():
        key = _norm_key(key)
        if key not in KEYS:
            raise ConfigError(f"unknown key '{key}'")
        raw[key] = value
    values = {key: _convert(key, text) for key, text in raw.items()}
    cfg = RunConfig(command=command, **values)
    _validate(cfg, set(raw))
    return cfg


def _validate(cfg: RunConfig, given: set) -> None:
    if cfg.command not in COMMANDS:
        raise ConfigError(f"unknown command '{cfg.command}'")
    for key in REQUIRED[cfg.command]:
        if key not in given:
            raise ConfigError(f"missing required key '{key}' for {cfg.command}")
    for key in ("d_in", "d_out", "num_centers", "epochs"):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"'{key}' must be at least 1")
    for key in ("batch_size", "grid_points"):
        if getattr(cfg, key) < 0:
            raise ConfigError(f"'{key}' must be nonnegative")
    if not cfg.widths or any(w < 1 for w in cfg.widths):
        raise ConfigError("'widths' must be a nonempty list of positive integers")
    try:
        KernelFamily(cfg.kernel.lower())
    except ValueError:
        raise ConfigError(f"invalid value for 'kernel': unknown family {cfg.kernel!r}") from None
    for key in ("epsilon", "learning_rate", "sigma"):
        if not getattr(cfg, key) > 0:
            raise ConfigError(f"'{key}' must be positive")
    if cfg.optimizer not in ("sgd", "adam"):
        raise ConfigError(f"invalid value for 'optimizer': {cfg.optimizer!r} (sgd or adam)")
    if cfg.center_rule not in ("first", "random"):
        raise ConfigError(f"invalid value for 'center_rule': {cfg.center_rule!r} (first or random)")
    if len(cfg.box) % 2 or not cfg.box:
        raise ConfigError("'box' needs lo,hi pairs")
    if any(e <= 0 for e in cfg.eps_list) or not cfg.eps_list:
        raise ConfigError("'eps_list' must hold positive numbers")
    if any(w < 0 for w in cfg.reg_weights):
        raise ConfigError("'reg_weights' must be nonnegative")
    if cfg.interval and (len(cfg.interval) != 2 or cfg.interval[1] <= cfg.interval[0]):
        raise ConfigError("'interval' must be lo,hi with lo < hi")
    if len(cfg.nodes) != len(cfg.values):
        raise ConfigError("'nodes' and 'values' differ in length")


def format_config(cfg: RunConfig) -> str:
    lines = [f"# resolved configuration for {cfg.command}"]
    for key in KEYS:
        v = getattr(cfg, key)
        if v is None:
            continue
        if isinstance(v, tuple):
            v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{key}={v}")
    return "\n".join(lines) + "\n"


def _out(cfg: RunConfig, name: str | None, default: str) -> str:
    return name if name else os.path.join(cfg.out_dir, default)


def _kernel(cfg: RunConfig) -> Kernel1D:
    return Kernel1D(KernelFamily(cfg.kernel.lower()), cfg.epsilon)


def _write_echo(cfg: RunConfig) -> str:
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = _out(cfg, cfg.echo, f"{cfg.command}.resolved.cfg")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_config(cfg))
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: RunConfig) -> int:
    data = load_dataset(cfg.data, cfg.d_in, cfg.d_out)
    reg = cfg.reg_weights[0] if len(cfg.reg_weights) == 1 else list(cfg.reg_weights)
    try:
        tcfg = TrainConfig(
            reg_weights=reg, optimizer=cfg.optimizer, learning_rate=cfg.learning_rate, momentum=cfg.momentum,
            beta1=cfg.beta1, beta2=cfg.beta2, adam_eps=cfg.adam_eps, batch_size=cfg.batch_size or None,
            epochs=cfg.epochs, num_centers=cfg.num_centers, center_rule=cfg.center_rule, seed=cfg.seed,
            record_time=cfg.record_time,
        )
        tcfg.layer_weights(2 * len(cfg.widths) + 1)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    centers = select_centers(data, tcfg)
    model = init_model(cfg.d_in, cfg.widths, cfg.d_out, centers, _kernel(cfg), cfg.seed)
    model, history = train(model, data, tcfg)
    save_model(model, _out(cfg, cfg.model, "model.txt"))
    write_metrics(history, _out(cfg, cfg.metrics, "metrics.jsonl"))
    print(f"final loss {history[-1]['loss']:.17g}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    model = load_model(cfg.model)
    data = load_dataset(cfg.data, model.d_in, model.d_out)
    pred, _ = forward(model, data.inputs)
    print(f"mse {mse_loss(pred, data.targets):.17g}")
    return EXIT_OK


def _default_points(d: int) -> int:
    return {1: 1000, 2: 50, 3: 15}.get(d, 6)


def cmd_compile_poly(cfg: RunConfig) -> int:
    try:
        with open(cfg.poly, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise DatasetError(f"cannot read polynomial spec {cfg.poly}: {exc.strerror}") from None
    spec = parse_polynomial_spec(text)
    box = np.asarray(cfg.box, dtype=float).reshape(-1, 2)
    if box.shape[0] == 1:
        box = np.tile(box, (spec.dim, 1))
    if box.shape[0] != spec.dim:
        raise ConfigError(f"'box' has {box.shape[0]} intervals for a {spec.dim}-variable polynomial")
    spec = type(spec)(spec.terms, spec.dim, box)
    kernel = _kernel(cfg)
    n = cfg.grid_points or _default_points(spec.dim)

    def build(sigma):
        return compile_polynomial(spec, sigma=sigma, kernel=kernel)

    def error(model):
        return sup_error(model, spec, spec.box, n)

    if cfg.refine:
        model, sigma, history = refine_sigma(build, error, cfg.sigma)
    else:
        model, sigma = build(cfg.sigma), cfg.sigma
        history = [(sigma, error(model))]
    err = error(model)
    save_model(model, _out(cfg, cfg.model, "compiled_model.txt"))
    lines = [
        f"terms={len(spec.terms)}",
        f"dim={spec.dim}",
        f"sigma={sigma!r}",
        f"depth={model.depth}",
        f"width={model.width}",
        f"num_centers={model.num_centers}",
        f"grid_points={n}",
        f"grid_size={n ** spec.dim}",
        f"sup_error={err:.17g}",
    ]
    lines += [f"refine sigma={s!r} sup_error={e:.17g}" for s, e in history]
    with open(_out(cfg, cfg.report, "compile_report.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"sup_error {err:.17g}")
    return EXIT_OK


def cmd_flat_limit_study(cfg: RunConfig) -> int:
    kernel = _kernel(cfg)
    nodes = np.asarray(cfg.nodes, dtype=float)
    values = np.asarray(cfg.values, dtype=float)
    if nodes.size not in (2, 3):
        raise ConfigError("'nodes' must hold 2 or 3 points")
    lo, hi = cfg.interval if cfg.interval else (nodes.min(), nodes.max())
    x = np.linspace(lo, hi, cfg.grid_points or 1000)
    poly = np.polynomial.Polynomial.fit(nodes, values, nodes.size - 1)
    rows = []
    for eps in cfg.eps_list:
        s = flat_limit_interpolant(kernel, nodes, values, eps)
        rows.append((eps, float(np.max(np.abs(s(x) - poly(x))))))
    with open(_out(cfg, cfg.study, "flat_limit_study.txt"), "w", encoding="utf-8") as fh:
        fh.write("# eps sup_error\n")
        for eps, err in rows:
            fh.write(f"{eps!r} {err:.17g}\n")
    for eps, err in rows:
        print(f"{eps!r} {err:.6g}")
    return EXIT_OK


def cmd_diagnose_conditioning(cfg: RunConfig) -> int:
    try:
        with open(cfg.nodes_file, encoding="utf-8") as fh:
            tokens = [t for line in fh for t in line.split("#", 1)[0].replace(",", " ").split()]
    except OSError as exc:
        raise DatasetError(f"cannot read node file {cfg.nodes_file}: {exc.strerror}") from None
    try:
        nodes = np.array([float(t) for t in tokens])
    except ValueError as exc:
        raise DatasetError(f"{cfg.nodes_file}: {exc}") from None
    if nodes.size < 2:
        raise DatasetError(f"{cfg.nodes_file}: need at least two nodes")
    for eps in cfg.eps_list:
        cond = conditioning_diagnostic(_kernel(cfg).with_epsilon(eps), nodes)
        print(f"eps={eps!r} cond={cond:.6g}")
    return EXIT_OK


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "compile-poly": cmd_compile_poly,
    "flat-limit-study": cmd_flat_limit_study,
    "diagnose-conditioning": cmd_diagnose_conditioning,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdkn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run {name}", argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="key=value config file; flags override its values")
        for key in KEYS:
            default = getattr(RunConfig, key, None)
            extra = " (required)" if key in REQUIRED[name] else f" (default: {default})"
            p.add_argument("--" + key.replace("_", "-"), dest=key, metavar="V", help=HELP.get(key, key) + extra)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = vars(parser.parse_args(argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    command = args.pop("command")
    config_path = args.pop("config", None)
    try:
        cfg = parse_config(config_path, command, args)
        _write_echo(cfg)
        return HANDLERS[command](cfg)
    except (ConfigError, InadmissibleKernelError) as exc:
        print(f"sdkn: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, CenterCollapseError, SingularSystemError, NotRealizableError,
            FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"sdkn: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, ModelFormatError, PolynomialSpecError, OSError, ValueError) as exc:
        print(f"sdkn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

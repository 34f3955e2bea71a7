"""Plain-text experiment configuration.

The format is one ``section.key = value`` pair per line, with ``#``
comments and blank lines ignored.  Parsing is strict: unknown or
duplicate keys are rejected, every seed must be spelled out, and all
other keys have defaults.  ``format_config`` renders the effective
configuration in a canonical key order, so equal configurations have
equal text and equal digests.
"""

from __future__ import annotations

import hashlib

from . import continual as CL
from . import data as D
from . import nn
from .branch import BranchShape
from .selfsup import SslConfig


class ConfigError(ValueError):
    """Raised for malformed, unknown, or missing configuration keys."""


_REQUIRED = object()

# key -> (type tag, default); _REQUIRED means the user must write the key
SCHEMA: dict[str, tuple[str, object]] = {
    "dataset.kind": ("str", "synthetic"),          # synthetic | npz | cifar100
    "dataset.path": ("str", ""),
    "dataset.classes": ("int", 8),
    "dataset.per_class": ("int", 64),
    "dataset.size": ("int", 32),
    "dataset.noise": ("float", 0.05),
    "dataset.seed": ("int", _REQUIRED),
    "stream.kind": ("str", "class_incremental"),
    "stream.tasks": ("int", 2),
    "stream.eval_fraction": ("float", 0.25),
    "stream.seed": ("int", _REQUIRED),
    "model.widths": ("ints", (8, 16)),
    "model.blocks": ("ints", (1, 1)),
    "model.embed_dim": ("int", 0),                 # 0: use the last width
    "model.seed": ("int", _REQUIRED),
    "train.method": ("str", "infonce"),
    "train.temperature": ("float", 0.2),
    "train.epochs": ("int", 10),
    "train.batch_size": ("int", 32),
    "train.lr": ("float", 0.05),
    "train.momentum": ("float", 0.9),
    "train.weight_decay": ("float", 1e-4),
    "train.seed": ("int", _REQUIRED),
    "strategy.kind": ("str", "branchtune"),
    "strategy.branch": ("str", "1x3"),
    "strategy.fix_bn": ("tribool", None),          # auto | true | false
    "strategy.freeze": ("str", "fine_tune_all"),
    "probe.epochs": ("int", 50),
    "probe.lr": ("float", 0.2),
    "probe.momentum": ("float", 0.9),
    "probe.batch_size": ("int", 64),
    "probe.weight_decay": ("float", 0.0),
    "probe.seed": ("int", _REQUIRED),
    "cka.enabled": ("bool", True),
    "cka.joint": ("bool", True),
    "cka.samples": ("int", 256),
    "cka.seed": ("int", _REQUIRED),
    "output.dir": ("str", "out"),
}

SEED_KEYS = tuple(k for k in SCHEMA if k.endswith(".seed"))


def _parse_value(key: str, kind: str, text: str):
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            if text in ("true", "false"):
                return text == "true"
            raise ValueError("expected true or false")
        if kind == "tribool":
            if text == "auto":
                return None
            if text in ("true", "false"):
                return text == "true"
            raise ValueError("expected auto, true, or false")
        if kind == "ints":
            return tuple(int(part.strip()) for part in text.split(","))
        return text
    except ValueError as err:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind}: {err}") \
            from err


def _render_value(kind: str, value) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind == "tribool":
        return "auto" if value is None else ("true" if value else "false")
    if kind == "ints":
        return ",".join(str(v) for v in value)
    if kind == "float":
        return repr(float(value))
    return str(value)


def parse_config(text: str) -> dict:
    """Parse configuration text into a complete key/value dict."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value_text = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', "
                              f"got {raw.strip()!r}")
        key = key.strip()
        value_text = value_text.strip()
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, SCHEMA[key][0], value_text)
    missing = [k for k, (_, default) in SCHEMA.items()
               if default is _REQUIRED and k not in values]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)} "
                          f"(every seed must be explicit)")
    for key, (_, default) in SCHEMA.items():
        values.setdefault(key, default)
    return values


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    return parse_config(text)


def format_config(cfg: dict) -> str:
    """Render the effective configuration in canonical order."""
    unknown = set(cfg) - set(SCHEMA)
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}")
    lines = [f"{key} = {_render_value(SCHEMA[key][0], cfg[key])}"
             for key in SCHEMA]
    return "\n".join(lines) + "\n"


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(format_config(cfg).encode("utf-8")).hexdigest()


def override_seeds(cfg: dict, base: int) -> dict:
    """Derive every seed from one base value; returns a new dict."""
    out = dict(cfg)
    for offset, key in enumerate(SEED_KEYS):
        out[key] = base + offset
    return out


# -- turning a config into runnable objects ----------------------------------


def build_dataset(cfg: dict) -> D.Dataset:
    kind = cfg["dataset.kind"]
    if kind == "synthetic":
        return D.gen_synthetic(classes=cfg["dataset.classes"],
                               per_class=cfg["dataset.per_class"],
                               size=cfg["dataset.size"],
                               seed=cfg["dataset.seed"],
                               noise=cfg["dataset.noise"])
    path = cfg["dataset.path"]
    if not path:
        raise ConfigError(f"dataset.kind = {kind} needs dataset.path")
    if kind == "npz":
        return D.load_npz(path)
    if kind == "cifar100":
        return D.load_cifar100_binary(path)
    raise ConfigError(f"unknown dataset.kind {kind!r}")


def build_stream(cfg: dict, dataset: D.Dataset) -> CL.TaskStream:
    kind = cfg["stream.kind"]
    if kind == "class_incremental":
        return CL.split_class_incremental(
            dataset, cfg["stream.tasks"], cfg["stream.seed"],
            eval_fraction=cfg["stream.eval_fraction"])
    if kind == "data_incremental":
        return CL.split_data_incremental(
            dataset, cfg["stream.tasks"], cfg["stream.seed"],
            eval_fraction=cfg["stream.eval_fraction"])
    raise ConfigError(f"unknown stream.kind {kind!r}")


def build_run_config(cfg: dict, dataset: D.Dataset) -> CL.RunConfig:
    """Assemble a run configuration; geometry comes from the data itself."""
    n, channels, height, width = dataset.images.shape
    if height != width:
        raise ConfigError(f"need square images, got {height}x{width}")
    widths = cfg["model.widths"]
    embed = cfg["model.embed_dim"] or widths[-1]
    spec = nn.BackboneSpec(stage_widths=tuple(widths),
                           blocks_per_stage=tuple(cfg["model.blocks"]),
                           in_channels=channels,
                           input_size=height,
                           embed_dim=embed)
    try:
        spec.validate()
    except ValueError as err:
        raise ConfigError(f"model geometry: {err}") from err
    try:
        shape = BranchShape.parse(cfg["strategy.branch"])
    except ValueError as err:
        raise ConfigError(f"strategy.branch: {err}") from err
    freeze_name = cfg["strategy.freeze"].upper()
    if freeze_name not in nn.Strategy.__members__:
        raise ConfigError(
            f"strategy.freeze: unknown setting {cfg['strategy.freeze']!r}, "
            f"expected one of "
            f"{sorted(m.lower() for m in nn.Strategy.__members__)}")
    strategy = CL.StrategySpec(kind=cfg["strategy.kind"],
                               branch_shape=shape,
                               fix_bn=cfg["strategy.fix_bn"],
                               freeze=nn.Strategy[freeze_name])
    try:
        strategy.validate()
    except ValueError as err:
        raise ConfigError(str(err)) from err
    ssl = SslConfig(method=cfg["train.method"],
                    temperature=cfg["train.temperature"],
                    epochs=cfg["train.epochs"],
                    batch_size=cfg["train.batch_size"],
                    lr=cfg["train.lr"],
                    momentum=cfg["train.momentum"],
                    weight_decay=cfg["train.weight_decay"],
                    seed=cfg["train.seed"])
    try:
        ssl.validate()
    except ValueError as err:
        raise ConfigError(f"train: {err}") from err
    probe = CL.ProbeConfig(epochs=cfg["probe.epochs"],
                           lr=cfg["probe.lr"],
                           momentum=cfg["probe.momentum"],
                           batch_size=cfg["probe.batch_size"],
                           weight_decay=cfg["probe.weight_decay"],
                           seed=cfg["probe.seed"])
    try:
        probe.validate()
    except ValueError as err:
        raise ConfigError(f"probe: {err}") from err
    return CL.RunConfig(spec=spec,
                        strategy=strategy,
                        ssl=ssl,
                        probe=probe,
                        model_seed=cfg["model.seed"],
                        profile_cka=cfg["cka.enabled"],
                        joint_reference=cfg["cka.joint"],
                        cka_samples=cfg["cka.samples"],
                        cka_seed=cfg["cka.seed"],
                        output_dir=cfg["output.dir"],
                        config_text=format_config(cfg),
                        config_digest=config_digest(cfg))

"""Scenario files: a strict YAML schema that fully determines a run.

Four sections (graph, channel, model, protocol) with nested subsections
channel.radio and model.train.  Unknown keys are hard errors — a typo
must never silently fall back to a default — and every missing default
is materialized, so the resolved mapping in a run manifest replays the
exact same configuration.

Keys that can be switched off (quantizer_bits, delay_budget_s,
target_loss) accept the literal ``off``.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .channel import ChannelParams, DeviceRadio
from .graph import NetworkGraph, build_topology, load_edge_list_file, with_base_station
from .model import TrainConfig
from .protocol import DataSpec, ScenarioConfig, SchedulePolicy


class ConfigError(Exception):
    """A scenario file problem, reported with the offending field."""


_NUM = (int, float)


def _is_off(value: Any) -> bool:
    # YAML 1.1 reads a bare `off` as boolean False
    return value is None or value is False or value == "off"


@dataclass(frozen=True)
class _Key:
    types: tuple[type, ...]
    required: bool = False
    default: Any = None
    off_ok: bool = False  # literal `off` selects None
    choices: tuple | None = None


_SCHEMA: dict[str, dict[str, Any]] = {
    "graph": {
        "topology": _Key((str,), required=True,
                         choices=("path", "grid", "complete", "star", "custom")),
        "n_devices": _Key((int,), required=True),
        "grid_rows": _Key((int,), off_ok=True),
        "grid_cols": _Key((int,), off_ok=True),
        "edges": _Key((list,), off_ok=True),
        "edge_list_file": _Key((str,), off_ok=True),
        "positions": _Key((list,), off_ok=True),
        "bs": _Key((bool,), default=False),
        "bs_position": _Key((list,), off_ok=True),
        "bs_links": _Key((list,), default=[]),
    },
    "channel": {
        "bandwidth_hz": _Key(_NUM, required=True),
        "noise_density_w_per_hz": _Key(_NUM, required=True),
        "pathloss_exponent": _Key(_NUM, required=True),
        "ref_gain": _Key(_NUM, required=True),
        "waterfall_m": _Key(_NUM, default=0.0),
        "default_distance_m": _Key(_NUM, default=100.0),
        "downlink_errors": _Key((bool,), default=False),
        "bs_aggregation_energy_j": _Key(_NUM, default=0.0),
        "radio": {
            "tx_power_w": _Key(_NUM, required=True),
            "bs_tx_power_w": _Key(_NUM, default=0.1),
            "cpu_cycles_per_sample": _Key(_NUM, required=True),
            "cpu_freq_hz": _Key(_NUM, required=True),
            "eff_capacitance": _Key(_NUM, required=True),
        },
    },
    "model": {
        "data": _Key((str,), default="synthetic", choices=("synthetic", "mnist")),
        "dim": _Key((int,), default=12),
        "classes": _Key((int,), default=12),
        "hidden": _Key((int,), default=50),
        "samples_per_device": _Key((int,), default=500),
        "shards_per_device": _Key((int,), default=2),
        "spread": _Key(_NUM, default=3.0),
        "test_samples": _Key((int,), default=1200),
        "data_seed": _Key((int,), default=0),
        "images_path": _Key((str,), off_ok=True),
        "labels_path": _Key((str,), off_ok=True),
        "test_images_path": _Key((str,), off_ok=True),
        "test_labels_path": _Key((str,), off_ok=True),
        "train": {
            "lr": _Key(_NUM, required=True),
            "local_steps": _Key((int,), default=1),
        },
    },
    "protocol": {
        "mode": _Key((str,), required=True, choices=("cfl", "ofl", "hybrid")),
        "mixing": _Key((str,), default="lazy-metropolis",
                       choices=("metropolis", "lazy-metropolis", "uniform")),
        "mix_order": _Key((str,), default="train-then-mix",
                          choices=("train-then-mix", "mix-then-train")),
        "rounds": _Key((int,), required=True),
        "seed": _Key((int,), default=0),
        "init_seed": _Key((int,), default=0),
        "quantizer_bits": _Key((int,), off_ok=True),
        "delay_budget_s": _Key(_NUM, off_ok=True),
        "target_loss": _Key(_NUM, off_ok=True),
        "schedule": _Key((str,), default="all",
                         choices=("all", "uniform-k", "probabilistic",
                                  "sample-weighted")),
        "schedule_k": _Key((int,), off_ok=True),
        "schedule_p": _Key((int, float, list), off_ok=True),
    },
}


def _check_value(path: str, key: _Key, value: Any) -> Any:
    if key.off_ok and _is_off(value):
        return None
    if bool in key.types:
        if not isinstance(value, bool):
            raise ConfigError(f"field '{path}' must be a boolean")
        return value
    if isinstance(value, bool):  # YAML happily coerces on/off/yes/no
        raise ConfigError(f"field '{path}' must not be a boolean")
    if not isinstance(value, key.types):
        names = "/".join(t.__name__ for t in key.types)
        raise ConfigError(f"field '{path}' must be of type {names}")
    if float in key.types and isinstance(value, int):
        value = float(value)
    if key.choices is not None and value not in key.choices:
        raise ConfigError(
            f"field '{path}' must be one of {', '.join(map(str, key.choices))}")
    return value


def _resolve_section(section_path: str, schema: dict, data: Any) -> dict:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"section '{section_path}' must be a mapping")
    unknown = set(data) - set(schema)
    if unknown:
        name = sorted(unknown)[0]
        raise ConfigError(f"unknown key '{section_path}.{name}'")
    out: dict[str, Any] = {}
    for name, spec in schema.items():
        path = f"{section_path}.{name}"
        if isinstance(spec, dict):
            out[name] = _resolve_section(path, spec, data.get(name))
            continue
        if name not in data:
            if spec.required:
                raise ConfigError(f"missing required field '{path}'")
            out[name] = spec.default
        else:
            out[name] = _check_value(path, spec, data[name])
    return out


def resolve(raw: Any) -> dict:
    """Validate a parsed scenario mapping and materialize every default."""
    if not isinstance(raw, dict):
        raise ConfigError("scenario must be a mapping of sections")
    unknown = set(raw) - set(_SCHEMA)
    if unknown:
        raise ConfigError(f"unknown section '{sorted(unknown)[0]}'")
    for section in ("graph", "channel", "model", "protocol"):
        if section not in raw:
            raise ConfigError(f"missing section '{section}'")
    return {name: _resolve_section(name, schema, raw.get(name))
            for name, schema in _SCHEMA.items()}


def parse_scenario(text: str) -> dict:
    """YAML text -> resolved scenario mapping (strict)."""
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse scenario: {exc}") from exc
    return resolve(raw)


def _build_graph(g: dict, base_dir: Path | None) -> NetworkGraph:
    kind = g["topology"]
    n = g["n_devices"]
    try:
        if kind == "custom":
            if g["edge_list_file"] is not None:
                path = Path(g["edge_list_file"])
                if base_dir is not None and not path.is_absolute():
                    path = base_dir / path
                loaded = load_edge_list_file(path)
                if loaded.n_devices > n:
                    raise ConfigError(
                        f"edge list references vertex {loaded.n_devices - 1} "
                        f">= n_devices={n}")
                graph = build_topology("custom", n, edges=loaded.edges,
                                       positions=loaded.positions)
            elif g["edges"] is not None:
                graph = build_topology("custom", n,
                                       edges=[tuple(e) for e in g["edges"]],
                                       positions=g["positions"])
            else:
                raise ConfigError(
                    "custom topology needs 'graph.edges' or 'graph.edge_list_file'")
        elif kind == "grid":
            if g["grid_rows"] is None or g["grid_cols"] is None:
                raise ConfigError("grid topology needs grid_rows and grid_cols")
            graph = build_topology("grid", n,
                                   grid_shape=(g["grid_rows"], g["grid_cols"]),
                                   positions=g["positions"])
        else:
            graph = build_topology(kind, n, positions=g["positions"])
        if g["bs"]:
            pos = tuple(g["bs_position"]) if g["bs_position"] is not None else None
            graph = with_base_station(graph, position=pos, links=g["bs_links"])
        return graph
    except ValueError as exc:
        raise ConfigError(f"graph: {exc}") from exc


def build_config(resolved: dict, base_dir: Path | None = None) -> ScenarioConfig:
    """Resolved mapping -> runnable ScenarioConfig.

    Relative data-file paths are taken against ``base_dir`` (normally the
    scenario file's directory).
    """
    g = resolved["graph"]
    c = resolved["channel"]
    m = resolved["model"]
    p = resolved["protocol"]

    graph = _build_graph(g, base_dir)

    def _data_path(key: str) -> str | None:
        value = m[key]
        if value is None:
            return None
        path = Path(value)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return str(path)

    kind = p["schedule"]
    if kind in ("uniform-k", "sample-weighted") and p["schedule_k"] is None:
        raise ConfigError(f"schedule '{kind}' needs 'protocol.schedule_k'")
    if kind == "probabilistic" and p["schedule_p"] is None:
        raise ConfigError("schedule 'probabilistic' needs 'protocol.schedule_p'")
    sched_p = p["schedule_p"]
    if isinstance(sched_p, list):
        sched_p = tuple(float(x) for x in sched_p)

    try:
        return ScenarioConfig(
            graph=graph,
            channel=ChannelParams(
                bandwidth_hz=c["bandwidth_hz"],
                noise_density_w_per_hz=c["noise_density_w_per_hz"],
                pathloss_exponent=c["pathloss_exponent"],
                ref_gain=c["ref_gain"],
                waterfall_m=c["waterfall_m"]),
            radio=DeviceRadio(
                tx_power_w=c["radio"]["tx_power_w"],
                cpu_cycles_per_sample=c["radio"]["cpu_cycles_per_sample"],
                cpu_freq_hz=c["radio"]["cpu_freq_hz"],
                eff_capacitance=c["radio"]["eff_capacitance"]),
            data=DataSpec(
                kind=m["data"], dim=m["dim"], classes=m["classes"],
                samples_per_device=m["samples_per_device"],
                shards_per_device=m["shards_per_device"],
                spread=m["spread"], test_samples=m["test_samples"],
                data_seed=m["data_seed"],
                images_path=_data_path("images_path"),
                labels_path=_data_path("labels_path"),
                test_images_path=_data_path("test_images_path"),
                test_labels_path=_data_path("test_labels_path")),
            train=TrainConfig(lr=m["train"]["lr"],
                              local_steps=m["train"]["local_steps"]),
            hidden=m["hidden"],
            mode=p["mode"],
            mixing=p["mixing"],
            mix_order=p["mix_order"],
            schedule=SchedulePolicy(kind=kind, k=p["schedule_k"], p=sched_p),
            quantizer_bits=p["quantizer_bits"],
            delay_budget_s=p["delay_budget_s"],
            rounds=p["rounds"],
            seed=p["seed"],
            init_seed=p["init_seed"],
            bs_tx_power_w=c["radio"]["bs_tx_power_w"],
            bs_aggregation_energy_j=c["bs_aggregation_energy_j"],
            downlink_errors=c["downlink_errors"],
            default_distance_m=c["default_distance_m"],
            target_loss=p["target_loss"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_scenario_file(path) -> tuple[dict, ScenarioConfig]:
    """Parse, validate and build a scenario file; returns (resolved, config)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read scenario file: {exc}") from exc
    resolved = parse_scenario(text)
    return resolved, build_config(resolved, base_dir=path.parent)


def bundled_scenario_path(name: str) -> Path:
    """Path of a scenario shipped with the package (e.g. 'fig3')."""
    base = importlib.resources.files("cflsim") / "scenarios"
    candidate = base / (name if name.endswith(".scenario") else f"{name}.scenario")
    path = Path(str(candidate))
    if not path.exists():
        raise ConfigError(f"no bundled scenario named {name!r}")
    return path

"""JSON network configuration files.

Three variants are understood::

    {"variant": "generic",
     "nodes": [{"kind": "single", "rate": 1.0, "capacity": "inf"}, ...],
     "routing": [[...], ...]            # or {"triplets": [[i, j, p], ...]}
     "policy": "standard", "customers": 4}

    {"variant": "bikeshare-detailed",
     "stations": [{"rate": 1.0, "capacity": 10}, ...],
     "Q": [[...]], "ride_rates": [[...]], "W": {"0": [[...]], ...}}

    {"variant": "bikeshare-aggregated",
     "stations": [...], "popularities": [...], "route_rate": 2.0}

Capacities are integers or the string ``"inf"``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

from . import bikeshare
from .errors import JacksonError
from .netmodel import (NetworkSpec, NodeKind, NodeSpec, Policy, invariant_vector, routing_from_triplets,
                       validate_network)

VARIANTS = ("generic", "bikeshare-detailed", "bikeshare-aggregated")


class ConfigError(JacksonError):
    """Malformed configuration; the message names the offending field."""


@dataclass(frozen=True)
class LoadedConfig:
    spec: NetworkSpec
    theta: Optional[np.ndarray]  # None when the network itself is invalid
    bike: Optional[bikeshare.BikeNetwork] = None
    source: str = ""
    problems: tuple = ()  # structural problems, population checks excluded


def _field(obj: dict, key: str, where: str, default: Any = ...):
    if key in obj:
        return obj[key]
    if default is ...:
        raise ConfigError(f"{where}: missing field '{key}'")
    return default


def _number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    return float(value)


def _capacity(value, where: str) -> float:
    if value == "inf":
        return math.inf
    c = _number(value, where)
    if c < 0 or c != int(c):
        raise ConfigError(f"{where}: capacity must be a nonnegative integer or \"inf\"")
    return c


def _matrix(value, where: str, shape: Optional[tuple] = None) -> np.ndarray:
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: not a numeric matrix") from exc
    if arr.ndim != 2 or (shape is not None and arr.shape != shape):
        raise ConfigError(f"{where}: expected shape {shape}, got {arr.shape}")
    return arr


def _policy(value, where: str) -> Optional[Policy]:
    if value is None:
        return None
    try:
        return Policy(value)
    except ValueError as exc:
        choices = ", ".join(p.value for p in Policy)
        raise ConfigError(f"{where}: unknown policy {value!r} (choose from {choices})") from exc


def _customers(doc: dict) -> int:
    M = _field(doc, "customers", "config", 0)
    if isinstance(M, bool) or not isinstance(M, int) or M < 0:
        raise ConfigError("config.customers: expected a nonnegative integer")
    return M


def _generic(doc: dict) -> LoadedConfig:
    raw_nodes = _field(doc, "nodes", "config")
    if not isinstance(raw_nodes, list) or not raw_nodes:
        raise ConfigError("config.nodes: expected a nonempty list")
    nodes = []
    for k, nd in enumerate(raw_nodes):
        where = f"nodes[{k}]"
        if not isinstance(nd, dict):
            raise ConfigError(f"{where}: expected an object")
        kind_s = _field(nd, "kind", where, "single")
        try:
            kind = NodeKind(kind_s)
        except ValueError as exc:
            raise ConfigError(f"{where}.kind: unknown kind {kind_s!r}") from exc
        rate = _number(_field(nd, "rate", where), f"{where}.rate")
        cap = _capacity(_field(nd, "capacity", where, "inf"), f"{where}.capacity")
        nodes.append(NodeSpec(kind, rate, cap))
    n = len(nodes)
    raw_routing = _field(doc, "routing", "config")
    if isinstance(raw_routing, dict):
        trip = _field(raw_routing, "triplets", "routing")
        try:
            P = routing_from_triplets(n, trip)
        except (TypeError, ValueError, IndexError) as exc:
            raise ConfigError(f"routing.triplets: malformed ({exc})") from exc
    else:
        P = _matrix(raw_routing, "routing", (n, n))
    policy = _policy(_field(doc, "policy", "config", "standard"), "config.policy")
    if policy is Policy.STATE_DEPENDENT:
        raise ConfigError("config.policy: state-dependent routing is only configurable through bikeshare W matrices")
    spec = NetworkSpec(nodes, P, _customers(doc), policy)
    problems = tuple(validate_network(spec.with_customers(0)))
    theta = None if problems else invariant_vector(P).theta
    return LoadedConfig(spec, theta, problems=problems)


def _stations(doc: dict) -> tuple[np.ndarray, np.ndarray]:
    raw = _field(doc, "stations", "config")
    if not isinstance(raw, list) or not raw:
        raise ConfigError("config.stations: expected a nonempty list")
    rates, caps = [], []
    for k, st in enumerate(raw):
        where = f"stations[{k}]"
        if not isinstance(st, dict):
            raise ConfigError(f"{where}: expected an object")
        rates.append(_number(_field(st, "rate", where), f"{where}.rate"))
        caps.append(_capacity(_field(st, "capacity", where, "inf"), f"{where}.capacity"))
    return np.array(rates), np.array(caps)


def _bike(doc: dict, variant: str) -> LoadedConfig:
    rates, caps = _stations(doc)
    J1 = len(rates)
    policy = _policy(_field(doc, "policy", "config", None), "config.policy")
    try:
        if variant == "bikeshare-detailed":
            Q = _matrix(_field(doc, "Q", "config"), "Q", (J1, J1))
            rides = _matrix(_field(doc, "ride_rates", "config"), "ride_rates", (J1, J1))
            bs = bikeshare.BikeShareSpec.detailed(rates, caps, Q, rides)
            net = bikeshare.build_detailed(bs, _customers(doc), policy)
            raw_w = _field(doc, "W", "config", None)
            if raw_w is not None:
                if not isinstance(raw_w, dict):
                    raise ConfigError("config.W: expected an object keyed by station index")
                Ws = []
                for j in range(J1):
                    if str(j) in raw_w:
                        Ws.append(_matrix(raw_w[str(j)], f"W[{j}]", (J1, J1)))
                    else:
                        Ws.append(bikeshare.rerouting_solutions(Q, net.nu, j, "q-rows"))
                provider = bikeshare.build_rerouting_provider(net, Ws)
                net = net.with_policy(Policy.STATE_DEPENDENT, provider)
        else:
            q = np.array(_field(doc, "popularities", "config"), dtype=float)
            mu_route = _number(_field(doc, "route_rate", "config"), "config.route_rate")
            bs = bikeshare.BikeShareSpec.aggregated(rates, caps, q, mu_route)
            net = bikeshare.build_aggregated(bs, _customers(doc), policy)
    except ConfigError:
        raise
    except (ValueError, JacksonError) as exc:
        raise ConfigError(f"{variant}: {exc}") from exc
    return LoadedConfig(net.spec, net.theta, net, problems=tuple(validate_network(net.spec.with_customers(0))))


def parse_config(doc: Any, source: str = "<config>") -> LoadedConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be an object")
    variant = _field(doc, "variant", "config", "generic")
    if variant not in VARIANTS:
        raise ConfigError(f"config.variant: unknown variant {variant!r}")
    loaded = _generic(doc) if variant == "generic" else _bike(doc, variant)
    return LoadedConfig(loaded.spec, loaded.theta, loaded.bike, source, loaded.problems)


def load_config(path: str) -> LoadedConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return parse_config(doc, path)

"""Command line interface.

Every numeric output is one record ``{quantity, node, k, value, method}``
where ``method`` is one of ``exact-dp``, ``grand-canonical``, ``llt`` or
``mc``. Records are written as JSON (with free-text messages alongside) or as
flat CSV.

Exit codes: 0 success, 1 other library error, 2 invalid configuration,
3 product form not guaranteed, 4 infeasible population, 5 exact-computation
cap exceeded, 6 absorbing state.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from typing import Optional, Sequence

import numpy as np

from . import bikeshare, dists, dynamics, ensemble
from .config import ConfigError, LoadedConfig, load_config
from .errors import (AbsorbingStateError, DomainError, DPCapExceeded, InfeasibleError, JacksonError,
                     ProductFormError, StateSpaceTooLarge)
from .netmodel import INF, Policy, check_reversibility

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_PRODUCT_FORM = 3
EXIT_INFEASIBLE = 4
EXIT_CAP = 5
EXIT_ABSORBING = 6

METHODS = ("exact-dp", "grand-canonical", "llt", "mc")
FIELDS = ("quantity", "node", "k", "value", "method")


class Report:
    """Accumulates tagged numeric records and free-text messages."""

    def __init__(self, command: str):
        self.command = command
        self.records: list[dict] = []
        self.messages: list[str] = []

    def add(self, quantity: str, value, method: str, node: Optional[int] = None, k: Optional[int] = None):
        if method not in METHODS:
            raise ValueError(f"unknown method tag {method!r}")
        self.records.append({"quantity": quantity, "node": node, "k": k, "value": _num(value), "method": method})

    def note(self, message: str):
        self.messages.append(message)

    def render(self, fmt: str) -> str:
        if fmt == "json":
            doc = {"command": self.command, "records": self.records, "messages": self.messages}
            return json.dumps(doc, indent=1) + "\n"
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=FIELDS, lineterminator="\n")
        writer.writeheader()
        for rec in self.records:
            writer.writerow({k: ("" if rec[k] is None else _csv_value(rec[k])) for k in FIELDS})
        return buf.getvalue()


def _num(value):
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    v = float(value)
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if math.isnan(v):
        return "nan"
    return v


def _csv_value(v):
    return repr(v) if isinstance(v, float) else v


class CliFailure(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _load(path: str) -> LoadedConfig:
    cfg = load_config(path)
    if cfg.problems:
        raise CliFailure(EXIT_CONFIG, "; ".join(cfg.problems))
    return cfg


def _population(cfg: LoadedConfig, customers: Optional[int]) -> int:
    M = cfg.spec.customers if customers is None else customers
    if M < 0:
        raise CliFailure(EXIT_INFEASIBLE, "customer count must be nonnegative")
    return M


def _check_product_form(cfg: LoadedConfig):
    if cfg.spec.policy is Policy.BLOCKING and not check_reversibility(cfg.spec.routing, cfg.theta):
        raise ProductFormError("product form not guaranteed: non-reversible routing")


def _parse_nodes(text: Optional[str], size: int) -> list[int]:
    if text is None:
        return list(range(size))
    try:
        nodes = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise CliFailure(EXIT_CONFIG, f"--nodes: expected comma-separated integers, got {text!r}") from exc
    bad = [j for j in nodes if not 0 <= j < size]
    if bad:
        raise CliFailure(EXIT_CONFIG, f"--nodes: index {bad[0]} out of range 0..{size - 1}")
    return nodes


def _bike_net(cfg: LoadedConfig) -> bikeshare.BikeNetwork:
    if cfg.bike is None:
        raise CliFailure(EXIT_CONFIG, "config.variant: bikeshare command needs a bikeshare variant")
    return cfg.bike


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_validate(args) -> Report:
    rep = Report("validate")
    cfg = load_config(args.config)
    for p in cfg.problems:
        rep.note(p)
    if cfg.problems:
        raise CliFailure(EXIT_CONFIG, "; ".join(cfg.problems))
    _check_product_form(cfg)
    M = cfg.spec.customers
    caps = cfg.spec.capacities
    if np.all(np.isfinite(caps)) and caps.sum() < M:
        raise InfeasibleError(f"M exceeds total capacity ({M} > {int(caps.sum())})")
    rep.add("nodes", cfg.spec.size, "exact-dp")
    rep.add("reversible", check_reversibility(cfg.spec.routing, cfg.theta), "exact-dp")
    rep.note("valid")
    return rep


def cmd_gamma(args) -> Report:
    rep = Report("gamma")
    cfg = _load(args.config)
    _check_product_form(cfg)
    M = _population(cfg, args.customers)
    gamma = ensemble.solve_gamma(cfg.spec, cfg.theta, M)
    rep.add("gamma", gamma, "grand-canonical")
    if M == 0:
        rep.add("a", 0.0, "grand-canonical")
        rep.add("b2", 0.0, "grand-canonical")
        rep.add("residual", 0.0, "grand-canonical")
        return rep
    gc = ensemble.grand_canonical(cfg.spec, cfg.theta, gamma)
    rep.add("a", gc.a, "grand-canonical")
    rep.add("b2", gc.b2, "grand-canonical")
    rep.add("residual", abs(gc.a - M), "grand-canonical")
    diag = ensemble.condition_diagnostics(cfg.spec, cfg.theta, gamma, K=args.prefix)
    for key, val in diag.as_dict().items():
        if key not in ("gamma", "b", "flags"):
            rep.add(key, val, "grand-canonical")
    for flag in diag.flags:
        rep.note(flag)
    return rep


def _llt_marginal(gc: ensemble.GrandCanonical, j: int, M: int) -> np.ndarray:
    """Node law from the free pmf times a Gaussian density for the other nodes."""
    d = gc.marginals[j]
    mom = dists.moments(d)
    a_rest = gc.a - mom.mean
    b2_rest = gc.b2 - mom.var
    top = M if not isinstance(d, dists.TruncatedGeometric) else min(M, d.cap)
    k = np.arange(top + 1)
    if b2_rest <= 0:
        raise JacksonError("local approximation needs variance in the other nodes")
    w = dists.pmf_array(d, top) * ensemble.gaussian_density(M - k, a_rest, math.sqrt(b2_rest))
    return w / w.sum()


def cmd_marginals(args) -> Report:
    rep = Report("marginals")
    cfg = _load(args.config)
    _check_product_form(cfg)
    M = _population(cfg, args.customers)
    nodes = _parse_nodes(args.nodes, cfg.spec.size)
    gamma = ensemble.solve_gamma(cfg.spec, cfg.theta, M) if M > 0 else None
    free = ensemble.free_marginals(cfg.spec, cfg.theta, gamma) if gamma else None
    if args.mode == "exact":
        try:
            law = ensemble.canonical_law(cfg.spec, cfg.theta, M, gamma)
            # a second admissible gamma must give the same law
            law2 = ensemble.canonical_law(cfg.spec, cfg.theta, M, 0.5 * law.gamma)
        except DPCapExceeded as exc:
            raise DPCapExceeded(f"{exc}; use --mode gc") from exc
        rep.add("gamma", law.gamma, "exact-dp")
        rep.add("gauge_gamma", law2.gamma, "exact-dp")
        worst = 0.0
        for j in nodes:
            p, p2 = law.marginal(j), law2.marginal(j)
            worst = max(worst, float(np.max(np.abs(p - p2))))
            for k, v in enumerate(p):
                rep.add("pmf", v, "exact-dp", j, k)
            if free is not None:
                q = dists.pmf_array(free[j], len(p) - 1)
                rep.add("tv_exact_vs_gc", ensemble.total_variation(p, q) + 0.5 * max(0.0, 1.0 - q.sum()),
                        "exact-dp", j)
        rep.add("gauge_discrepancy", worst, "exact-dp")
        return rep
    if M == 0:
        for j in nodes:
            rep.add("pmf", 1.0, "grand-canonical" if args.mode == "gc" else "llt", j, 0)
        return rep
    if args.mode == "gc":
        rep.add("gamma", gamma, "grand-canonical")
        for j in nodes:
            d = free[j]
            top = d.cap if isinstance(d, dists.TruncatedGeometric) else M
            for k, v in enumerate(dists.pmf_array(d, top)):
                rep.add("pmf", v, "grand-canonical", j, k)
        return rep
    gc = ensemble.grand_canonical(cfg.spec, cfg.theta, gamma)
    rep.add("gamma", gamma, "llt")
    for j in nodes:
        for k, v in enumerate(_llt_marginal(gc, j, M)):
            rep.add("pmf", v, "llt", j, k)
    return rep


def cmd_simulate(args) -> Report:
    rep = Report("simulate")
    cfg = _load(args.config)
    _check_product_form(cfg)
    M = _population(cfg, args.customers)
    spec = cfg.spec.with_customers(M)
    res = dynamics.simulate(spec, cfg.theta, args.events, seed=args.seed, replicas=args.replicas,
                            batches=args.batches, hist_levels=0)
    for j in range(spec.size):
        rep.add("mean", res.mean[j], "mc", j)
        rep.add("mean_se", res.mean_se[j], "mc", j)
        rep.add("empty", res.empty[j], "mc", j)
        rep.add("empty_se", res.empty_se[j], "mc", j)
    rep.add("events", res.events, "mc")
    rep.add("null_events", res.null_events, "mc")
    return rep


def _station_records(rep: Report, res: bikeshare.SizingResult):
    for j, st in enumerate(res.stations):
        rep.add("empty_prob", st.empty_prob, "grand-canonical", j)
        rep.add("full_prob", st.full_prob, "grand-canonical", j)
        rep.add("capacity", st.capacity, "grand-canonical", j)


def cmd_bikeshare(args) -> Report:
    rep = Report(f"bikeshare {args.task}")
    cfg = _load(args.config)
    net = _bike_net(cfg)
    if args.task == "size-fleet":
        fs = bikeshare.fleet_from_delta(net, args.delta)
        rep.add("gamma", fs.gamma, "grand-canonical")
        rep.add("M_real", fs.M_real, "grand-canonical")
        rep.add("M", fs.M, "grand-canonical")
        _station_records(rep, bikeshare.sizing_report(net, fs.gamma))
        return rep
    if args.task == "size-capacity":
        r = net.utilizations
        if args.kappa is not None:
            for j in net.stations:
                res = bikeshare.capacity_for_both(args.kappa * net.spec.size * r[j], args.epsilon)
                rep.add("feasible", res.feasible, "grand-canonical", int(j))
                rep.add("capacity", res.capacity if res.feasible else "inf", "grand-canonical", int(j))
                rep.add("floor", res.floor, "grand-canonical", int(j))
                if not res.feasible:
                    rep.note(f"station {j}: infeasible, {res.binding} probability cannot drop below {res.floor:.6g}")
            return rep
        inf_net = bikeshare.build(
            bikeshare.BikeShareSpec(net.bike.station_rates, np.full(net.bike.stations, INF), net.bike.variant,
                                    net.bike.Q, net.bike.ride_rates, net.bike.popularities, net.bike.route_rate))
        fs = bikeshare.fleet_from_delta(inf_net, args.delta)
        rep.add("gamma", fs.gamma, "grand-canonical")
        for j in net.stations:
            cap = bikeshare.capacity_for_overflow(fs.gamma * r[j], args.epsilon)
            rep.add("capacity", cap, "grand-canonical", int(j))
        return rep
    if args.task == "failure-rate":
        M = _population(cfg, args.customers)
        gamma = ensemble.solve_gamma(net.spec, net.theta, M)
        rep.add("gamma", gamma, "grand-canonical")
        rep.add("tau", bikeshare.failure_rate(net, gamma), "grand-canonical")
        try:
            ex = bikeshare.failure_rate_exact(net, M)
            rep.add("tau", ex.tau, "exact-dp")
        except DPCapExceeded as exc:
            rep.note(f"exact failure rate skipped: {exc}")
        if args.events:
            mc = bikeshare.failure_rate_mc(net, M, seed=args.seed, events=args.events, replicas=args.replicas)
            rep.add("tau", mc.tau, "mc")
            rep.add("tau_se", mc.se, "mc")
        return rep
    res = bikeshare.optimize_fleet(net)
    rep.add("gamma", res.gamma, "grand-canonical")
    rep.add("M_real", res.M_real, "grand-canonical")
    rep.add("M", res.M, "grand-canonical")
    rep.add("tau", res.tau, "grand-canonical")
    rep.add("gamma_roundtrip_error", res.gamma_roundtrip_error, "grand-canonical")
    _station_records(rep, res)
    return rep


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jacksonnet", description="Closed Jackson network toolkit.")
    output = argparse.ArgumentParser(add_help=False)
    output.add_argument("--format", choices=("json", "csv"), default="json")
    output.add_argument("--out", help="write the report here instead of stdout")
    common = argparse.ArgumentParser(add_help=False, parents=[output])
    common.add_argument("config", help="JSON network configuration")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("validate", parents=[common], help="check a configuration")

    p = sub.add_parser("gamma", parents=[common], help="chemical potential and diagnostics")
    p.add_argument("--customers", type=int)
    p.add_argument("--prefix", type=int, default=1, help="prefix length for the diagnostics")

    p = sub.add_parser("marginals", parents=[common], help="per-node occupancy laws")
    p.add_argument("--customers", type=int)
    p.add_argument("--nodes", help="comma-separated node indices (default all)")
    p.add_argument("--mode", choices=("exact", "gc", "llt"), default="exact")

    p = sub.add_parser("simulate", parents=[common], help="Monte Carlo occupancy estimates")
    p.add_argument("--customers", type=int)
    p.add_argument("--events", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--replicas", type=int, default=1)
    p.add_argument("--batches", type=int, default=20)

    p = sub.add_parser("bikeshare", parents=[output], help="bike-share sizing")
    p.add_argument("task", choices=("size-fleet", "size-capacity", "failure-rate", "optimize-fleet"))
    p.add_argument("config", help="JSON bike-share configuration")
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--epsilon", type=float, default=0.01)
    p.add_argument("--kappa", type=float, help="size capacities for both ends at gamma = kappa * N")
    p.add_argument("--customers", type=int)
    p.add_argument("--events", type=int, default=0, help="Monte Carlo events for failure-rate (0 skips)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--replicas", type=int, default=1)
    return parser


COMMANDS = {
    "validate": cmd_validate,
    "gamma": cmd_gamma,
    "marginals": cmd_marginals,
    "simulate": cmd_simulate,
    "bikeshare": cmd_bikeshare,
}


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, CliFailure):
        return exc.code
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, ProductFormError):
        return EXIT_PRODUCT_FORM
    if isinstance(exc, (InfeasibleError, DomainError)):
        return EXIT_INFEASIBLE
    if isinstance(exc, (DPCapExceeded, StateSpaceTooLarge)):
        return EXIT_CAP
    if isinstance(exc, AbsorbingStateError):
        return EXIT_ABSORBING
    if isinstance(exc, ValueError):
        return EXIT_CONFIG
    return EXIT_ERROR


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        report = COMMANDS[args.command](args)
    except (CliFailure, JacksonError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    text = report.render(args.format)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

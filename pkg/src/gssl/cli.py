"""Command-line entry point: ``gssl <subcommand> [--config FILE] --out DIR``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConvergenceError, GSSLError
from . import experiments as ex

SUBCOMMANDS = ("graph", "solve", "walk", "consistency", "sweep", "mnist", "rates", "spike")


class UsageError(Exception):
    pass


def log(level: str, code: str, message: str):
    sys.stderr.write(json.dumps({"level": level, "code": code, "message": message}) + "\n")
    sys.stderr.flush()


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# per-command configuration
# ---------------------------------------------------------------------------

class _Config:
    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class GraphConfig(_Config):
    domain: str = "unit-cube"
    dimension: int = 2
    n: int = 1000
    seed: int = 0
    construction: str = "epsilon"
    kernel: str = "gaussian"
    epsilon: Optional[float] = None
    k: int = 10


@dataclass
class SolveConfig(_Config):
    domain: str = "unit-ball"
    dimension: int = 2
    n: int = 2000
    seed: int = 0
    model: str = "model2"
    beta: float = 1.0
    delta: Optional[float] = None
    radius: float = 0.5
    kernel: str = "gaussian"
    epsilon: Optional[float] = None
    method: str = "hard"
    lam: float = 1e4
    p: float = 3.0


@dataclass
class WalkCliConfig(SolveConfig):
    n: int = 200
    starts: int = 20
    trials: int = 10_000
    max_steps: Optional[int] = None


@dataclass
class ConsistencyConfig(_Config):
    dimension: int = 2
    eps_grid: list = field(default_factory=lambda: [0.2, 0.14, 0.1])
    ref_n: int = 5000
    samples: int = 100
    trials: int = 60
    min_dist: Optional[float] = 0.4
    boundary_eps: float = 0.1
    boundary_n: int = 1_000_000
    boundary_samples: int = 200
    kernel: str = "gaussian"
    seed: int = 0
    coefficient_ts: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 1.0, 1.5, 2.0, 3.0])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _cloud_and_graph(cfg):
    from .graph import KernelSpec, build_eps_graph, build_knn_graph, eps_scale
    from .sampling import DomainSpec, sample_points

    dom = DomainSpec(cfg.domain, cfg.dimension)
    cloud = sample_points(dom, cfg.n, cfg.seed)
    if getattr(cfg, "construction", "epsilon") == "knn":
        return cloud, build_knn_graph(cloud, cfg.k)
    eps = cfg.epsilon or eps_scale(cfg.n, cfg.dimension)
    return cloud, build_eps_graph(cloud, KernelSpec(cfg.kernel, eps))


def cmd_graph(cfg: GraphConfig, out, args):
    from .graph import connected_components, save_graph, write_edge_csv
    from .sampling import write_cloud_csv

    cloud, graph = _cloud_and_graph(cfg)
    save_graph(os.path.join(out, "graph.gssl"), graph)
    write_edge_csv(os.path.join(out, "edges.csv"), graph)
    write_cloud_csv(os.path.join(out, "points.csv"), cloud)
    comp = connected_components(graph)
    ex.write_json(os.path.join(out, "graph.json"),
                  {"n": graph.n, "nnz": graph.nnz, "epsilon": graph.epsilon,
                   "construction": graph.construction, "k": graph.k,
                   "components": int(comp.max() + 1)})


def _labels(cfg: SolveConfig, cloud, graph):
    from .sampling import LabelModelSpec, label_function, select_labels

    g = label_function(cfg.model, cfg.dimension)
    if cfg.model == "model1":
        spec = LabelModelSpec("subset", cfg.beta, radius=cfg.radius)
    else:
        spec = LabelModelSpec("boundary-band", cfg.beta, delta=cfg.delta or graph.epsilon)
    label_seed = int(np.random.SeedSequence([cfg.seed, 1]).generate_state(1)[0])
    return g, select_labels(cloud, spec, g, label_seed)


def cmd_solve(cfg: SolveConfig, out, args):
    from .solvers import degeneracy_report, solve_hard, solve_plap, solve_soft, write_solution

    cloud, graph = _cloud_and_graph(cfg)
    g, labels = _labels(cfg, cloud, graph)
    if cfg.method == "hard":
        res = solve_hard(graph, labels)
    elif cfg.method == "soft":
        res = solve_soft(graph, labels, cfg.lam)
    elif cfg.method == "plap":
        res = solve_plap(graph, labels, cfg.p)
    else:
        raise ValueError(f"unknown method {cfg.method!r}")
    rep = degeneracy_report(graph, labels, res.u, g(cloud.points))
    write_solution(os.path.join(out, "solution.csv"), os.path.join(out, "stats.json"),
                   res, labels, cloud.points, rep)


def cmd_walk(cfg: WalkCliConfig, out, args):
    from .random_walk import WalkConfig, estimate_solution
    from .solvers import solve_hard

    cloud, graph = _cloud_and_graph(cfg)
    _, labels = _labels(cfg, cloud, graph)
    exact = solve_hard(graph, labels).u
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    starts = np.sort(rng.choice(graph.n, size=min(cfg.starts, graph.n), replace=False))
    wc = WalkConfig(trials=cfg.trials, seed=cfg.seed, max_steps=cfg.max_steps)
    rows = []
    for s in starts:
        st = estimate_solution(graph, labels, int(s), wc, cloud.points)
        row = {"start": int(s)}
        row.update(dataclasses.asdict(st))
        row["solver_u"] = float(exact[s])
        row["within_3se"] = bool(abs(st.mean_payoff - exact[s]) <= 3 * st.standard_error
                                 or st.standard_error == 0 and st.mean_payoff == exact[s])
        rows.append(row)
    ex.write_rows(os.path.join(out, "hitting.csv"), rows)


def cmd_consistency(cfg: ConsistencyConfig, out, args):
    from .consistency import (BoundaryCoefficients, boundary_consistency, coefficient_table,
                              interior_consistency, n_for_scale, write_coefficient_csv)
    from .graph import KernelSpec
    from .sampling import DomainSpec, label_function

    dom = DomainSpec("unit-ball", cfg.dimension)
    phi = label_function("model2", cfg.dimension)
    eps0 = max(cfg.eps_grid)
    rows = []
    for eps in sorted(cfg.eps_grid, reverse=True):
        n = n_for_scale(eps, cfg.dimension, cfg.ref_n, eps0)
        err = interior_consistency(phi, dom, eps, n, cfg.samples, cfg.seed, cfg.kernel, cfg.trials,
                                   cfg.min_dist)
        rows.append({"eps": eps, "n": n, "sup_error": err})
        log("info", "progress", f"interior eps={eps} n={n} sup_error={err:.4g}")
    ex.write_rows(os.path.join(out, "interior.csv"), rows)
    cmp = boundary_consistency(phi, dom, cfg.boundary_eps, cfg.boundary_n, cfg.boundary_samples,
                               cfg.seed, cfg.kernel)
    ex.write_rows(os.path.join(out, "boundary.csv"),
                  [{"node": int(i), "graph": float(a), "uncorrected": float(b), "corrected": float(c)}
                   for i, a, b, c in zip(cmp.rows, cmp.graph_value, cmp.uncorrected, cmp.corrected)])
    coeffs = BoundaryCoefficients(KernelSpec(cfg.kernel, cfg.boundary_eps), dom)
    write_coefficient_csv(os.path.join(out, "coefficients.csv"),
                          coefficient_table(coeffs, cfg.coefficient_ts))
    ex.write_json(os.path.join(out, "consistency.json"),
                  {"interior_monotone": all(b["sup_error"] < a["sup_error"]
                                            for a, b in zip(rows, rows[1:])),
                   "boundary_improvement": cmp.improvement,
                   "sigma_eta": coeffs.moments.sigma_eta, "c_eta": coeffs.moments.c_eta})


def cmd_sweep(cfg: ex.SweepConfig, out, args):
    if cfg.model not in ("model1", "model2"):
        raise ValueError("sweep expects model 'model1' or 'model2'")
    progress = lambda n, t: log("info", "progress", f"n={n} trial={t} done")
    res = ex.run_sweep(cfg, progress=progress)
    usable = [s for s in ex.summarize(res.records) if s["trials"] > 0 and s["mean_error"] > 0]
    fit = ex.fit_power_law(res.records) if len(usable) >= 3 else None
    ex.write_sweep_outputs(out, res, fit)
    if res.failures:
        log("warning", "failed-instances", f"{res.failures} instance(s) had no reachable labels")
    if cfg.beta_rule["kind"] == "eps-power" and float(cfg.beta_rule["a"]) >= 2:
        verdict = ex.illposed_check(cfg, result=res)
        ex.write_json(os.path.join(out, "verdict.json"), verdict.to_dict())


def cmd_rates(cfg: ex.SweepConfig, out, args):
    res = ex.lattice_rate(cfg.dimension, cfg.lattice_eps, cfg.m_grid, cfg.lattice_g,
                          cfg.trials, cfg.seed)
    rows = []
    for m, rs in sorted(res.rows.items()):
        for r in rs:
            row = {"m": m, "start": " ".join(map(str, r.start))}
            row.update({k: v for k, v in dataclasses.asdict(r).items() if k != "start"})
            rows.append(row)
    ex.write_rows(os.path.join(out, "lattice.csv"), rows)
    ex.write_rows(os.path.join(out, "lattice_summary.csv"), res.summary())
    ex.write_json(os.path.join(out, "ratefit.json"),
                  {"error": res.error_fit.to_dict(), "hitting_time": res.time_fit.to_dict()})


def cmd_spike(cfg: ex.SweepConfig, out, args):
    from .sampling import LabelSet
    from .solvers import write_solution

    n = cfg.n_grid[-1]
    eps = None if cfg.eps_rule == "spike" else cfg.eps(n)
    cloud, graph, cases = ex.spike_demo(n, cfg.label_counts, cfg.seed, eps, cfg.kernel)
    summary = []
    for case in cases:
        labels = LabelSet(case.label_indices, np.cos(cloud.points[case.label_indices, 0]), n=n)
        write_solution(os.path.join(out, f"spike_{case.labels}.csv"),
                       os.path.join(out, f"spike_{case.labels}.json"), case.result, labels,
                       cloud.points, case.report)
        summary.append({"labels": case.labels, "iterations": case.result.iterations,
                        "degenerate_mean": case.report.degenerate_mean,
                        "index": case.report.index, "spike_count": case.report.spike_count})
    ex.write_rows(os.path.join(out, "spike_summary.csv"), summary)


def cmd_mnist(cfg: ex.SweepConfig, out, args):
    from .mnist import default_data_dir, fetch_mnist, load_mnist, mnist_pipeline, write_mnist_records

    data_dir = cfg.data_dir or default_data_dir()
    if args.fetch_url:
        fetch_mnist(args.fetch_url, data_dir, cfg.checksums)
    X, y = load_mnist(data_dir)
    sub = None if cfg.full_data else cfg.subsample
    res = mnist_pipeline(X, y, cfg.k, cfg.m_grid, cfg.trials, cfg.seed, sub)
    write_mnist_records(os.path.join(out, "records.csv"), res.records)
    ex.write_rows(os.path.join(out, "error_vs_m.csv"), res.summary())
    ex.write_json(os.path.join(out, "ratefit.json"), None if res.fit is None else res.fit.to_dict())


COMMANDS = {
    "graph": (GraphConfig, cmd_graph, {}),
    "solve": (SolveConfig, cmd_solve, {}),
    "walk": (WalkCliConfig, cmd_walk, {}),
    "consistency": (ConsistencyConfig, cmd_consistency, {}),
    "sweep": (ex.SweepConfig, cmd_sweep, {"model": "model2", "n_grid": [256, 512, 1024, 2048],
                                          "trials": 2}),
    "rates": (ex.SweepConfig, cmd_rates, {"model": "lattice", "trials": 2000}),
    "spike": (ex.SweepConfig, cmd_spike, {"model": "spike-demo", "n_grid": [10_000],
                                          "eps_rule": "spike", "domain": "unit-cube"}),
    "mnist": (ex.SweepConfig, cmd_mnist, {"model": "mnist", "m_grid": [4, 16, 64],
                                          "trials": 10}),
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gssl", description="Graph-based semi-supervised learning laboratory")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--threads", type=int, help="worker threads for compiled kernels")
        sp.add_argument("--force", action="store_true", help="overwrite an existing run")
        if name == "mnist":
            sp.add_argument("--fetch-url", help="base URL of the gzip IDX archives")
    return p


def _load(name, path, seed):
    cls, _, defaults = COMMANDS[name]
    data = dict(defaults)
    if path:
        with open(path) as fh:
            user = json.load(fh)
        if not isinstance(user, dict):
            raise ValueError("config must be a JSON object")
        data.update(user)
    if seed is not None:
        data["seed"] = seed
    return cls.from_dict(data)


def _set_threads(k):
    import numba

    if k is not None:
        if k < 1:
            raise UsageError("--threads must be >= 1")
        numba.set_num_threads(min(k, numba.config.NUMBA_NUM_THREADS))


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        log("error", "usage", str(exc))
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        cfg = _load(args.command, args.config, args.seed)
        _set_threads(args.threads)
        os.makedirs(args.out, exist_ok=True)
        cfg_path = os.path.join(args.out, "config.json")
        if os.path.exists(cfg_path) and not args.force:
            raise UsageError(f"{cfg_path} exists; pass --force to overwrite")
        ex.write_json(cfg_path, {"command": args.command, **cfg.to_dict()})
        COMMANDS[args.command][1](cfg, args.out, args)
    except UsageError as exc:
        log("error", "usage", str(exc))
        return 1
    except FileNotFoundError as exc:
        if args.config and exc.filename == args.config:
            log("error", "config", str(exc))
            return 1
        log("error", "data-error", str(exc))
        return 2
    except (ValueError, TypeError) as exc:
        log("error", "config", str(exc))
        return 1
    except ConvergenceError as exc:
        log("error", exc.code, str(exc))
        return 3
    except GSSLError as exc:
        log("error", exc.code, str(exc))
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())

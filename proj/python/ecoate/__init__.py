"""Federated ATE estimation with covariate and outcome shift between sites."""

import json

import numpy as np

from . import _core
from ._core import (
    ConfigError,
    DomainError,
    EmptyArm,
    Error,
    IoError,
    NoConvergence,
    SchemaError,
    SiteDataset,
    SyntaxError,
    UsageError,
    build_id,
    read_csv,
    true_basis,
    write_csv,
)

__all__ = [
    "ConfigError", "DomainError", "EmptyArm", "Error", "IoError", "NoConvergence", "SchemaError",
    "SiteDataset", "SyntaxError", "UsageError", "build_id", "read_csv", "true_basis", "write_csv",
    "site", "eco_ate", "oracle_pooled", "naive_fusion", "aipw_target_only", "sample_scenario",
    "run_monte_carlo", "summarize_results", "cli",
]


def _opts(options):
    return json.dumps(options) if options else ""


def _xi(xi, count):
    if isinstance(xi, str) or (xi and isinstance(xi[0], str) and count != len(xi)):
        xi = [xi] * count
    return [[x] if isinstance(x, str) else list(x) for x in xi]


def site(site_id, x, a, y):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return SiteDataset(site_id, np.ascontiguousarray(x), np.asarray(a, dtype=np.int32), np.asarray(y, dtype=float))


def eco_ate(target, sources, xi, options=None):
    """xi: one expression list per source, or a single list shared by all."""
    return json.loads(_core.eco_ate(target, list(sources), _xi(xi, len(sources)), _opts(options)))


def oracle_pooled(target, sources, xi, options=None):
    return json.loads(_core.oracle_pooled(target, list(sources), _xi(xi, len(sources)), _opts(options)))


def naive_fusion(target, sources, options=None):
    return json.loads(_core.naive_fusion(target, list(sources), _opts(options)))


def aipw_target_only(target, options=None):
    return json.loads(_core.aipw_target_only(target, _opts(options)))


def sample_scenario(epsilon, n=500, seed=1, replicate=0, sources=3):
    return _core.sample_scenario(epsilon, n, seed, replicate, sources)


def run_monte_carlo(epsilons, n, reps, seed=1, estimators=None, workers=1, options=None):
    return _core.run_monte_carlo(list(epsilons), n, reps, seed, list(estimators or []), workers, _opts(options))


def summarize_results(path, truth=1.0):
    return _core.summarize_results(str(path), truth)


def cli(*args):
    """Runs the command-line tool in-process and returns (exit code, stdout, log)."""
    return _core.cli([str(a) for a in args])

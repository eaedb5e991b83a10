"""Marginal means and ICCs for cluster-randomized binary outcomes with missing data."""

import json

from . import _iccgee
from ._iccgee import ConfigError, Error, ParseError, StageError, __version__

__all__ = ["ConfigError", "Error", "ParseError", "StageError", "__version__",
           "bench", "fit", "generate", "simulate", "truth"]


def truth(config=None, method=None):
    """Treatment-model truth (beta0, beta_a, alpha0, alpha_a) by quadrature."""
    return json.loads(_iccgee.truth(config=_path(config), method=method))


def generate(path, config=None, clusters=None, n_min=None, n_max=None, seed=None, replicate=0):
    """Write one generated replicate as long-format CSV; returns the cluster count."""
    return _iccgee.generate(str(path), config=_path(config), clusters=clusters, n_min=n_min,
                            n_max=n_max, seed=seed, replicate=replicate)


def fit(path, estimator="dr", solver="full", psm="full", om="full", p_a=None, config=None,
        seed=None, pi_s=None, sandwich=True, threads=1):
    """Fit PSM, OM and TM to a CSV file and return the report as a dict."""
    return json.loads(_iccgee.fit(str(path), estimator=estimator, solver=solver, psm=psm, om=om,
                                  p_a=p_a, config=_path(config), seed=seed, pi_s=pi_s,
                                  sandwich=sandwich, threads=threads))


def simulate(config=None, replicates=None, clusters=None, n_min=None, n_max=None, estimators=None,
             solver="full", y_method=None, seed=None, sandwich=True, threads=1):
    """Replicate simulation; returns the bias / SE summary as a dict."""
    return json.loads(_iccgee.simulate(config=_path(config), replicates=replicates, clusters=clusters,
                                       n_min=n_min, n_max=n_max,
                                       estimators=list(estimators) if estimators else None,
                                       solver=solver, y_method=y_method, seed=seed,
                                       sandwich=sandwich, threads=threads))


def bench(sizes=None, repetitions=None, upsilon=None, structures=None):
    """Per-iteration timings and log-log slopes."""
    return json.loads(_iccgee.bench(sizes=list(sizes) if sizes else None, repetitions=repetitions,
                                    upsilon=upsilon,
                                    structures=list(structures) if structures else None))


def _path(p):
    return None if p is None else str(p)

"""Finite-difference check of the full training objective on a tiny model.

Actions and returns are sampled once and then frozen, so the objective is a
smooth function of the weights and central differences apply.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import ExperimentConfig
from .envdata import FrameSequence, make_rng
from .learn import build_objective
from .sampler import ModelDims, ModelParameters

TINY_DIMS = ModelDims(D=4, d_o=6, H=8, C=3, M=1)
TINY_CONFIG = ExperimentConfig(F=8, N_train=2, N_test=2, M=1, T_max=3, K=2, d_o=6, H=8, C=3, D=4)


@dataclass
class GradcheckResult:
    max_rel_err: float
    worst_param: str
    n_entries: int
    t_stops: list[int]

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol


def tiny_problem(seed: int = 0, scale: float = 1.0):
    """Random tiny model and sequence; ``scale`` widens the weight init."""
    rng = make_rng([seed, 505])
    params = ModelParameters.init(TINY_DIMS, seed)
    values = {k: v * scale + 0.1 * rng.standard_normal(v.shape) for k, v in params.values.items()}
    params = ModelParameters(TINY_DIMS, values)
    frames = rng.uniform(-1, 1, size=(TINY_CONFIG.F, TINY_DIMS.D))
    seq = FrameSequence("tiny", int(rng.integers(TINY_DIMS.C)), frames)
    return params, seq


def check_objective(params: ModelParameters, seq: FrameSequence, cfg: ExperimentConfig,
                    seeds, step: float = 1e-5, floor: float = 1e-6) -> GradcheckResult:
    tape, total, traces, tables, _ = build_objective(params, seq, cfg, seeds)
    analytic = tape.backward(total)
    forced = [tr.actions for tr in traces]
    frozen = [t.returns for t in tables]

    def f(values):
        _, tot, *_ = build_objective(ModelParameters(params.dims, values), seq, cfg, seeds,
                                     forced=forced, frozen_returns=frozen)
        return tot.item()

    numeric = nx.numeric_gradient(f, params.values, step)
    err, where = nx.max_relative_error(analytic, numeric, floor)
    return GradcheckResult(err, where, sum(v.size for v in params.values.values()),
                           [tr.t_stop for tr in traces])


def run_gradcheck(seed: int = 0) -> GradcheckResult:
    params, seq = tiny_problem(seed)
    seeds = [[seed, 606, k] for k in range(TINY_CONFIG.K)]
    return check_objective(params, seq, TINY_CONFIG, seeds)

"""Hand-crafted sampling baselines, the exhaustive oracle and the comparison harness."""
from __future__ import annotations

import csv
import io
import itertools
import math
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .classify import MetricsReport, frame_logits, mean_average_precision, pooled_prediction
from .config import ExperimentConfig
from .envdata import Dataset, FrameSequence, make_rng
from .sampler import ModelParameters, init_positions, run_episode

CSV_HEADER = ["strategy", "K", "top1", "mAP", "frames_observed", "seconds"]
DEFAULT_ORACLE_CAP = 2_000_000


class EnumerationCapError(ValueError):
    pass


@dataclass
class StrategyResult:
    name: str
    K: int | str
    metrics: MetricsReport
    frames_observed: float
    seconds: float
    # per-video selected positions (first repeat for random)
    positions: list[np.ndarray] | None = None

    def row(self) -> list:
        return [self.name, self.K, f"{self.metrics.top1:.6f}", f"{self.metrics.mAP:.6f}",
                f"{self.frames_observed:.3f}", f"{self.seconds:.3f}"]


def uniform_positions(F: int, K: int) -> np.ndarray:
    if K < 1:
        raise ValueError("K must be >= 1")
    return init_positions(F, K)


def _average_metrics(reports: Sequence[MetricsReport]) -> MetricsReport:
    return MetricsReport(
        top1=float(np.mean([r.top1 for r in reports])),
        mAP=float(np.mean([r.mAP for r in reports])),
        per_class_ap=np.mean([r.per_class_ap for r in reports], axis=0),
    )


class LogitCache:
    """Per-video frame logits; every fixed-position strategy pools rows of these."""

    def __init__(self, params: ModelParameters):
        self.params = params
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, seq: FrameSequence) -> np.ndarray:
        out = self._cache.get(seq.id)
        if out is None:
            out = self._cache[seq.id] = frame_logits(self.params, seq.frames)
        return out


def _fixed_strategy(name, K, ds: Dataset, choose, logits: LogitCache) -> StrategyResult:
    t0 = time.perf_counter()
    preds, positions = [], []
    for seq in ds:
        pos = np.asarray(choose(seq), dtype=np.int64)
        preds.append(pooled_prediction(seq.id, logits(seq)[pos], pos))
        positions.append(pos)
    metrics = mean_average_precision(preds, ds.labels)
    observed = float(np.mean([np.unique(p).size for p in positions]))
    return StrategyResult(name, K, metrics, observed, time.perf_counter() - t0, positions)


def uniform_strategy(params: ModelParameters, ds: Dataset, K: int,
                     logits: LogitCache | None = None) -> StrategyResult:
    logits = logits or LogitCache(params)
    return _fixed_strategy(f"U{K}", K, ds, lambda s: uniform_positions(s.num_frames, K), logits)


def all_frames_strategy(params: ModelParameters, ds: Dataset,
                        logits: LogitCache | None = None) -> StrategyResult:
    logits = logits or LogitCache(params)
    return _fixed_strategy("All", "All", ds, lambda s: np.arange(s.num_frames), logits)


def random_strategy(params: ModelParameters, ds: Dataset, K: int, repeats: int = 3, seed: int = 0,
                    logits: LogitCache | None = None) -> StrategyResult:
    """K distinct frames per video drawn without replacement; metrics averaged over repeats."""
    logits = logits or LogitCache(params)
    t0 = time.perf_counter()
    runs = []
    for r in range(repeats):
        rng = make_rng([seed, 404, r])

        def choose(seq, rng=rng):
            if K > seq.num_frames:
                raise ValueError(f"K={K} exceeds F={seq.num_frames} for {seq.id}")
            return np.sort(rng.choice(seq.num_frames, size=K, replace=False))

        runs.append(_fixed_strategy(f"R{K}", K, ds, choose, logits))
    return StrategyResult(f"R{K}", K, _average_metrics([r.metrics for r in runs]),
                          float(np.mean([r.frames_observed for r in runs])),
                          time.perf_counter() - t0, runs[0].positions)


def marl_strategy(params: ModelParameters, ds: Dataset, N: int, M: int, delta: int, T_max: int,
                  name: str | None = None) -> StrategyResult:
    """Greedy episodes; predictions pool the final-step logits of the N agents."""
    t0 = time.perf_counter()
    preds, positions, observed = [], [], []
    for seq in ds:
        tr = run_episode(params, seq, N, M, delta, T_max, mode="greedy")
        preds.append(pooled_prediction(seq.id, tr.logits[-1], tr.final_positions))
        positions.append(tr.final_positions.copy())
        observed.append(tr.observed_frames())
    metrics = mean_average_precision(preds, ds.labels)
    return StrategyResult(name or f"MARL{N}", N, metrics, float(np.mean(observed)),
                          time.perf_counter() - t0, positions)


def _block_gt(logits: np.ndarray, block: np.ndarray, label: int) -> np.ndarray:
    pooled = logits[block].mean(axis=1)
    pooled -= pooled.max(axis=1, keepdims=True)
    e = np.exp(pooled)
    return e[:, label] / e.sum(axis=1)


def gt_probability(logits: np.ndarray, positions, label: int) -> float:
    """Ground-truth probability of the average-pooled logits at ``positions``.

    Positions are sorted first, so any ordering of one selection scores
    bit-identically to the oracle's own evaluation of it.
    """
    block = np.sort(np.asarray(positions, dtype=np.int64))[None, :]
    return float(_block_gt(np.asarray(logits), block, label)[0])


def subset_count(F: int, K: int, repeats: bool = False) -> int:
    return math.comb(F + K - 1, K) if repeats else math.comb(F, K)


def oracle_best_subset(params: ModelParameters, seq: FrameSequence, K: int,
                       cap: int = DEFAULT_ORACLE_CAP, logits: np.ndarray | None = None,
                       repeats: bool = False) -> tuple[np.ndarray, float]:
    """Exhaustive search over K-subsets for the highest ground-truth probability.

    Subsets are visited in lexicographic order and only a strictly better
    score replaces the incumbent, so ties resolve to the smallest subset.
    With ``repeats`` the search runs over multisets, which also covers
    selections where several agents sit on one frame.
    """
    F = seq.num_frames
    if not 1 <= K <= F:
        raise ValueError(f"K={K} must lie in [1, F={F}]")
    count = subset_count(F, K, repeats)
    if count > cap:
        raise EnumerationCapError(
            f"{count} candidate subsets (F={F}, K={K}) exceed the cap {cap}; use a smaller F or K")
    if logits is None:
        logits = frame_logits(params, seq.frames)
    best_pos, best_p = None, -1.0
    # score a block of subsets at a time to keep the loop vectorised
    enum = itertools.combinations_with_replacement if repeats else itertools.combinations
    combos = enum(range(F), K)
    while True:
        block = np.array(list(itertools.islice(combos, 65536)), dtype=np.int64)
        if block.size == 0:
            break
        p = _block_gt(logits, block, seq.label)
        i = int(np.argmax(p))
        if p[i] > best_p:
            best_p, best_pos = float(p[i]), block[i]
    return best_pos, best_p


def saliency_hit_rate(ds: Dataset, positions: Sequence[np.ndarray]) -> float:
    """Fraction of selected positions that fall on saliency-marked frames."""
    hits = total = 0
    for seq, pos in zip(ds, positions):
        if seq.saliency is None:
            raise ValueError(f"{seq.id} carries no saliency mask")
        hits += int(seq.saliency[np.asarray(pos)].sum())
        total += len(pos)
    return hits / total


def compare(params: ModelParameters, ds: Dataset, cfg: ExperimentConfig, K: int | None = None,
            repeats: int = 3, seed: int | None = None, n_sweep: Sequence[int] = (),
            oracle_cap: int = DEFAULT_ORACLE_CAP, oracle: bool = True) -> list[StrategyResult]:
    """R-K, U-K, All and greedy MARL (N = K) on one checkpoint, plus optional extras.

    ``n_sweep`` adds greedy MARL rows at other agent counts (no retraining).
    An oracle row is added only when every video's enumeration fits the cap.
    """
    K = cfg.N_test if K is None else K
    seed = cfg.seed if seed is None else seed
    cache = LogitCache(params)
    rows = [
        random_strategy(params, ds, K, repeats, seed, cache),
        uniform_strategy(params, ds, K, cache),
        all_frames_strategy(params, ds, cache),
        marl_strategy(params, ds, K, params.dims.M, cfg.delta, cfg.T_max),
    ]
    for n in n_sweep:
        if n != K:
            rows.append(marl_strategy(params, ds, n, params.dims.M, cfg.delta, cfg.T_max))
    if oracle and all(K <= s.num_frames and subset_count(s.num_frames, K) <= oracle_cap for s in ds):
        t0 = time.perf_counter()
        preds, positions = [], []
        for seq in ds:
            pos, _ = oracle_best_subset(params, seq, K, oracle_cap, cache(seq))
            preds.append(pooled_prediction(seq.id, cache(seq)[pos], pos))
            positions.append(pos)
        rows.append(StrategyResult(f"Oracle{K}", K, mean_average_precision(preds, ds.labels),
                                   float(K), time.perf_counter() - t0, positions))
    return rows


def results_csv(rows: Sequence[StrategyResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow(r.row())
    return buf.getvalue()

"""Rewards, returns, the hybrid REINFORCE + classification objective, training."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .classify import mean_average_precision, pooled_prediction, top1
from .config import ExperimentConfig
from .envdata import Dataset, FrameSequence, make_rng, pad_dataset
from .sampler import EpisodeTrace, ModelDims, ModelParameters, classifier_head, run_episode, trunk

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    def __init__(self, batch_id: str, what: str = "loss"):
        super().__init__(f"non-finite {what} at batch {batch_id}")
        self.batch_id = batch_id


@dataclass
class RewardTable:
    rewards: np.ndarray  # (T_stop - 1) x N; row j holds r at step j + 2
    returns: np.ndarray  # (T_stop - 1) x N; row t credits the action taken at step t + 1
    gamma: float


@dataclass
class LossBreakdown:
    L_J: float
    L_H: float
    L_MARL: float
    L_Cls: float
    total: float


@dataclass
class EpochStats:
    epoch: int
    loss: float
    reward_sum: float
    t_stop: float
    train_top1: float
    val_top1: float
    val_mAP: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    best_val_top1: float = float("-inf")

    CSV_HEADER = "epoch,loss,reward_sum,t_stop,train_top1,val_top1,val_mAP,seconds"

    def csv_lines(self) -> list[str]:
        out = [self.CSV_HEADER]
        for e in self.epochs:
            out.append(f"{e.epoch},{e.loss:.6f},{e.reward_sum:.6f},{e.t_stop:.4f},"
                       f"{e.train_top1:.4f},{e.val_top1:.4f},{e.val_mAP:.4f},{e.seconds:.2f}")
        return out


# --- rewards and returns -----------------------------------------------------

def gt_probabilities(trace: EpisodeTrace, label: int) -> np.ndarray:
    """T_stop x N probability of ``label`` under each agent's per-step logits."""
    logits = trace.logits
    if not 0 <= label < logits.shape[-1]:
        raise IndexError(f"label {label} outside [0, {logits.shape[-1]})")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e[..., label] / e.sum(axis=-1)


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """G_t = r_{t+1} + gamma G_{t+1}, computed backwards over the reward rows."""
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1:]) if rewards.ndim > 1 else 0.0
    for t in range(rewards.shape[0] - 1, -1, -1):
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def step_rewards(trace: EpisodeTrace, label: int, gamma: float = 0.9) -> RewardTable:
    p = gt_probabilities(trace, label)
    rewards = p[1:] - p[:-1]
    return RewardTable(rewards, discounted_returns(rewards, gamma), gamma)


# --- losses (tape nodes) -----------------------------------------------------

def _episode_graph(trace: EpisodeTrace):
    if trace.graph is None:
        raise ValueError("trace has no recorded graph; run the episode with a tape")
    return trace.graph


def reinforce_loss(traces: Sequence[EpisodeTrace], returns: Sequence[np.ndarray]) -> nx.Node:
    """-(1/K) sum over episodes, agents and credited steps of log pi(u) * G."""
    graphs = [_episode_graph(tr) for tr in traces]
    tape = graphs[0].tape
    terms = []
    for tr, g, G in zip(traces, graphs, returns):
        for t in range(tr.t_stop - 1):
            terms.append(nx.sum_all(nx.hadamard(g.chosen_logp[t], tape.const(G[t][:, None]))))
    return nx.scale(_sum(tape, terms), -1.0 / len(traces))


def entropy_loss(traces: Sequence[EpisodeTrace]) -> nx.Node:
    """Negative entropy summed over agents and acting steps, averaged over episodes."""
    graphs = [_episode_graph(tr) for tr in traces]
    tape = graphs[0].tape
    terms = [nx.sum_all(g.entropy[t]) for tr, g in zip(traces, graphs) for t in range(tr.t_stop - 1)]
    return nx.scale(_sum(tape, terms), -1.0 / len(traces))


def classification_loss(trace: EpisodeTrace, label: int, all_steps: bool = False) -> nx.Node:
    """Cross-entropy of the agent-averaged final-step logits.

    With ``all_steps`` the per-step losses are averaged over every step.
    """
    g = _episode_graph(trace)
    if not all_steps:
        return nx.cross_entropy_from_logits(nx.mean_rows(g.logits[-1]), label)
    terms = [nx.cross_entropy_from_logits(nx.mean_rows(l), label) for l in g.logits]
    return nx.scale(_sum(g.tape, terms), 1.0 / len(terms))


def total_loss(l_cls: nx.Node, l_j: nx.Node, l_h: nx.Node, lambda1: float, lambda2: float) -> nx.Node:
    marl = nx.add(l_j, nx.scale(l_h, lambda1))
    return nx.add(l_cls, nx.scale(marl, lambda2))


def _sum(tape: nx.Tape, terms: list[nx.Node]) -> nx.Node:
    if not terms:
        return tape.const(0.0)
    acc = terms[0]
    for t in terms[1:]:
        acc = nx.add(acc, t)
    return acc


@dataclass
class UpdateResult:
    grads: dict[str, np.ndarray]
    losses: LossBreakdown
    traces: list[EpisodeTrace]
    reward_tables: list[RewardTable]


def episode_seeds(base: int, epoch: int, index: int, K: int) -> list[list[int]]:
    return [[base, 101, epoch, index, k] for k in range(K)]


def build_objective(params: ModelParameters, seq: FrameSequence, cfg: ExperimentConfig,
                    seeds: Sequence, forced: Sequence[np.ndarray] | None = None,
                    frozen_returns: Sequence[np.ndarray] | None = None, batch_id: str = "?"):
    """Roll out K episodes on one tape and assemble every loss term.

    ``forced`` replays given action sequences; ``frozen_returns`` replaces
    the returns computed from the rollouts (both exist for gradient checks,
    where returns must stay constant under parameter perturbation).
    """
    tape = nx.Tape()
    traces = []
    for k, s in enumerate(seeds):
        traces.append(run_episode(params, seq, cfg.N_train, params.dims.M, cfg.delta, cfg.T_max,
                                  mode="sample", seed=s, tape=tape,
                                  forced_actions=None if forced is None else forced[k]))
    tables = [step_rewards(tr, seq.label, cfg.gamma) for tr in traces]
    if not all(np.all(np.isfinite(t.returns)) for t in tables):
        raise DivergenceError(batch_id, "reward")
    returns = [t.returns for t in tables] if frozen_returns is None else list(frozen_returns)
    l_j = reinforce_loss(traces, returns)
    l_h = entropy_loss(traces)
    l_cls_terms = [classification_loss(tr, seq.label, cfg.aux_step_cls) for tr in traces]
    l_cls = nx.scale(_sum(tape, l_cls_terms), 1.0 / len(traces))
    total = total_loss(l_cls, l_j, l_h, cfg.lambda1, cfg.lambda2)
    breakdown = LossBreakdown(
        L_J=l_j.item(), L_H=l_h.item(), L_MARL=l_j.item() + cfg.lambda1 * l_h.item(),
        L_Cls=l_cls.item(), total=total.item())
    return tape, total, traces, tables, breakdown


def loss_and_grads(params: ModelParameters, seq: FrameSequence, cfg: ExperimentConfig,
                   seeds: Sequence, batch_id: str = "?") -> UpdateResult:
    tape, total, traces, tables, breakdown = build_objective(params, seq, cfg, seeds, batch_id=batch_id)
    if not math.isfinite(breakdown.total):
        raise DivergenceError(batch_id)
    grads = tape.backward(total)
    return UpdateResult(grads, breakdown, traces, tables)


# --- training ---------------------------------------------------------------

def model_dims(cfg: ExperimentConfig, train_ds: Dataset) -> ModelDims:
    C = cfg.C or train_ds.num_classes
    D = cfg.D or train_ds.dim
    if C != train_ds.num_classes or D != train_ds.dim:
        raise ValueError(f"config C={C}, D={D} disagree with data C={train_ds.num_classes}, D={train_ds.dim}")
    return ModelDims(D=D, d_o=cfg.d_o, H=cfg.H, C=C, M=cfg.M)


def greedy_predictions(params: ModelParameters, ds: Dataset, cfg: ExperimentConfig, N: int | None = None):
    """Greedy episodes over ``ds``; returns (predictions, traces)."""
    N = cfg.N_test if N is None else N
    preds, traces = [], []
    for seq in ds:
        tr = run_episode(params, seq, N, params.dims.M, cfg.delta, cfg.T_max, mode="greedy")
        preds.append(pooled_prediction(seq.id, tr.logits[-1], tr.final_positions))
        traces.append(tr)
    return preds, traces


def pretrain_classifier(params: ModelParameters, ds: Dataset, cfg: ExperimentConfig,
                        epochs: int, segments: int | None = None) -> ModelParameters:
    """Segment-sampled warm-up of the trunk and classifier head.

    Each update picks one random frame inside each of ``segments`` equal
    segments (every frame when ``segments`` is 0 or at least F) and
    minimises the cross-entropy of the averaged logits.  The context cell
    and policy head are not touched.
    """
    segments = cfg.pretrain_segments if segments is None else segments
    state = nx.AdamState()
    for epoch in range(epochs):
        rng = make_rng([cfg.seed, 202, epoch])
        for idx in rng.permutation(len(ds)):
            seq = ds.sequences[idx]
            F = seq.num_frames
            if segments == 0 or segments >= F:
                picks = np.arange(F)
            else:
                edges = np.linspace(0, F, segments + 1)
                lo = np.floor(edges[:-1]).astype(int)
                hi = np.maximum(np.floor(edges[1:]).astype(int), lo + 1)
                picks = np.minimum(lo + (rng.random(segments) * (hi - lo)).astype(int), F - 1)
            tape = nx.Tape()
            w = params.bind(tape)
            logits = classifier_head(w, trunk(w, tape.const(seq.frames[picks])))
            loss = nx.cross_entropy_from_logits(nx.mean_rows(logits), seq.label)
            if not math.isfinite(loss.item()):
                raise DivergenceError(f"pretrain epoch {epoch} video {seq.id}")
            grads = tape.backward(loss)
            grads = {k: g for k, g in grads.items() if k.startswith(("trunk.", "cls."))}
            nx.clip_global_norm(grads, cfg.clip_norm)
            params = ModelParameters(params.dims, nx.adam_step(params.values, grads, state, cfg.pretrain_lr))
    return params


def train(cfg: ExperimentConfig, train_ds: Dataset, val_ds: Dataset | None = None,
          params: ModelParameters | None = None, on_epoch=None) -> tuple[ModelParameters, TrainReport]:
    """Joint REINFORCE + classification training with per-video Adam updates.

    Returns the parameters of the epoch with the best greedy validation
    top-1 (the last epoch when there is no validation set).
    """
    cfg.validate()
    train_ds = pad_dataset(train_ds, cfg.F)
    if val_ds is not None:
        val_ds = pad_dataset(val_ds, cfg.F)
        if val_ds.num_classes != train_ds.num_classes or val_ds.dim != train_ds.dim:
            raise ValueError("train and val datasets disagree on C or D")
    dims = model_dims(cfg, train_ds)
    if params is None:
        params = ModelParameters.init(dims, cfg.seed)
    if cfg.pretrain_epochs:
        params = pretrain_classifier(params, train_ds, cfg, cfg.pretrain_epochs)

    state = nx.AdamState()
    report = TrainReport()
    best = params.copy()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = make_rng([cfg.seed, 303, epoch]).permutation(len(train_ds))
        losses, reward_sums, t_stops, correct = [], [], [], 0
        pending: dict[str, np.ndarray] = {}
        n_pending = 0
        for step, idx in enumerate(order):
            seq = train_ds.sequences[idx]
            batch_id = f"epoch {epoch} step {step} ({seq.id})"
            res = loss_and_grads(params, seq, cfg, episode_seeds(cfg.seed, epoch, int(idx), cfg.K), batch_id)
            for k, g in res.grads.items():
                pending[k] = pending[k] + g if k in pending else g
            n_pending += 1
            if n_pending == cfg.batch_videos or step == len(order) - 1:
                if n_pending > 1:
                    pending = {k: g / n_pending for k, g in pending.items()}
                try:
                    nx.clip_global_norm(pending, cfg.clip_norm)
                except nx.NonFiniteGradientError as exc:
                    raise DivergenceError(batch_id, f"gradient ({exc.name})") from exc
                params = ModelParameters(dims, nx.adam_step(params.values, pending, state, cfg.lr))
                pending, n_pending = {}, 0
            losses.append(res.losses.total)
            for tr, tab in zip(res.traces, res.reward_tables):
                reward_sums.append(float(tab.rewards.sum()))
                t_stops.append(tr.t_stop)
                pred = pooled_prediction(seq.id, tr.logits[-1], tr.final_positions)
                correct += pred.predicted == seq.label
        val_top1 = val_map = float("nan")
        is_eval = (epoch + 1) % cfg.eval_interval == 0 or epoch == cfg.epochs - 1
        if val_ds is not None and is_eval:
            preds, _ = greedy_predictions(params, val_ds, cfg)
            metrics = mean_average_precision(preds, val_ds.labels)
            val_top1, val_map = metrics.top1, metrics.mAP
            if val_top1 > report.best_val_top1:
                report.best_val_top1, report.best_epoch = val_top1, epoch
                best = params.copy()
        elif val_ds is None:
            best, report.best_epoch = params.copy(), epoch
        stats = EpochStats(epoch, float(np.mean(losses)), float(np.mean(reward_sums)),
                           float(np.mean(t_stops)), correct / (len(order) * cfg.K),
                           val_top1, val_map, time.perf_counter() - t0)
        report.epochs.append(stats)
        log.info("epoch %d loss %.4f reward %.4f T_stop %.2f train %.3f val %.3f mAP %.3f (%.1fs)",
                 epoch, stats.loss, stats.reward_sum, stats.t_stop, stats.train_top1,
                 stats.val_top1, stats.val_mAP, stats.seconds)
        if on_epoch is not None:
            on_epoch(stats, params)
    if cfg.epochs == 0:
        best = params
    return best, report

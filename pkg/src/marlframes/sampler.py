"""Agents that move over a frame sequence.

All agents share one set of weights.  An episode is evaluated with the N
agents stacked as the rows of each matrix, so one tape op covers every agent
at a step; the single-agent helpers below go through the same functions
with a one-row batch.

Weights use the row-vector convention ``y = x @ W + b``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import numerics as nx
from .envdata import FrameSequence, make_rng


class Action(IntEnum):
    MoveBackward = 0
    Stay = 1
    MoveForward = 2


NUM_ACTIONS = len(Action)


@dataclass(frozen=True)
class ModelDims:
    D: int
    d_o: int
    H: int
    C: int
    M: int = 1

    @property
    def context_width(self) -> int:
        return (2 * self.M + 1) * self.d_o

    def shapes(self) -> dict[str, tuple[int, int]]:
        D, d_o, H, C, S = self.D, self.d_o, self.H, self.C, self.context_width
        return {
            "trunk.w1": (D, d_o), "trunk.b1": (1, d_o),
            "trunk.w2": (d_o, d_o), "trunk.b2": (1, d_o),
            "gru.w_z": (S, H), "gru.u_z": (H, H), "gru.b_z": (1, H),
            "gru.w_r": (S, H), "gru.u_r": (H, H), "gru.b_r": (1, H),
            "gru.w_h": (S, H), "gru.u_h": (H, H), "gru.b_h": (1, H),
            "policy.w": (H, NUM_ACTIONS), "policy.b": (1, NUM_ACTIONS),
            "cls.w": (d_o, C), "cls.b": (1, C),
        }


POLICY_PARAMS = ("policy.w", "policy.b")
CONTEXT_PARAMS = tuple(n for n in ModelDims(1, 1, 1, 1).shapes() if n.startswith("gru."))


@dataclass
class ModelParameters:
    dims: ModelDims
    values: dict[str, np.ndarray]

    def __post_init__(self):
        expected = self.dims.shapes()
        if set(expected) != set(self.values):
            missing = set(expected) - set(self.values)
            extra = set(self.values) - set(expected)
            raise ValueError(f"parameter names mismatch (missing {sorted(missing)}, extra {sorted(extra)})")
        for name, shape in expected.items():
            v = np.asarray(self.values[name], dtype=np.float64)
            if v.shape != shape:
                raise ValueError(f"{name}: shape {v.shape} != {shape}")
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name}: non-finite values")
            self.values[name] = v

    @classmethod
    def zeros(cls, dims: ModelDims) -> "ModelParameters":
        return cls(dims, {n: np.zeros(s) for n, s in dims.shapes().items()})

    @classmethod
    def init(cls, dims: ModelDims, seed: int) -> "ModelParameters":
        """Uniform fan-in scaled weights, zero biases; deterministic in ``seed``."""
        rng = make_rng(seed)
        values = {}
        for name, shape in dims.shapes().items():
            if name.split(".")[1].startswith("b"):
                values[name] = np.zeros(shape)
            else:
                bound = 1.0 / np.sqrt(shape[0])
                values[name] = rng.uniform(-bound, bound, size=shape)
        return cls(dims, values)

    def copy(self) -> "ModelParameters":
        return ModelParameters(self.dims, {k: v.copy() for k, v in self.values.items()})

    def bind(self, tape: nx.Tape) -> dict[str, nx.Node]:
        """Parameter nodes on ``tape``; reuses them if already registered there."""
        if tape.params:
            return {name: tape.params[name] for name in self.values}
        return {name: tape.param(name, v) for name, v in self.values.items()}


# --- network pieces (operate on tape nodes, one row per agent) ---------------

def affine(w: dict[str, nx.Node], prefix: str, x: nx.Node, suffix: str = "") -> nx.Node:
    return nx.add(nx.matmul(x, w[f"{prefix}.w{suffix}"]), w[f"{prefix}.b{suffix}"])


def trunk(w: dict[str, nx.Node], x: nx.Node) -> nx.Node:
    h = nx.tanh(affine(w, "trunk", x, "1"))
    return nx.tanh(affine(w, "trunk", h, "2"))


def classifier_head(w: dict[str, nx.Node], o: nx.Node) -> nx.Node:
    return affine(w, "cls", o)


def gru_cell(w: dict[str, nx.Node], s: nx.Node, h: nx.Node) -> nx.Node:
    def gate(tag, hidden):
        return nx.add(nx.add(nx.matmul(s, w[f"gru.w_{tag}"]), nx.matmul(hidden, w[f"gru.u_{tag}"])),
                      w[f"gru.b_{tag}"])

    z = nx.sigmoid(gate("z", h))
    r = nx.sigmoid(gate("r", h))
    cand = nx.tanh(gate("h", nx.hadamard(r, h)))
    return nx.add(nx.hadamard(nx.one_minus(z), h), nx.hadamard(z, cand))


def policy_head(w: dict[str, nx.Node], h: nx.Node) -> tuple[nx.Node, nx.Node, nx.Node]:
    """(log-probs, probs, entropy column) for each row of ``h``."""
    logp = nx.log_softmax_rows(affine(w, "policy", h))
    probs = nx.exp(logp)
    entropy = nx.scale(nx.sum_cols(nx.hadamard(probs, logp)), -1.0)
    return logp, probs, entropy


def context_index(N: int, M: int) -> np.ndarray:
    """Rows of ``[o_first; o_1..o_N; o_last]`` forming each agent's window.

    Result has shape (2M+1, N): entry [j, a] is the row for neighbour
    ``a + j - M`` (0-based agents), padded with the first/last-frame rows.
    """
    a = np.arange(N)
    rows = []
    for off in range(-M, M + 1):
        nb = a + off
        rows.append(np.where(nb < 0, 0, np.where(nb >= N, N + 1, nb + 1)))
    return np.stack(rows)


def context_from_extended(ext: nx.Node, N: int, M: int) -> nx.Node:
    idx = context_index(N, M)
    return nx.concat_cols(*(nx.take_rows(ext, row) for row in idx))


# --- public single-call helpers (plain arrays in and out) --------------------

def init_positions(F: int, N: int) -> np.ndarray:
    """Segment centres: agent a (1-based) starts at floor((2a-1) F / 2N)."""
    if N < 1 or F < 1:
        raise ValueError("need N >= 1 and F >= 1")
    a = np.arange(1, N + 1, dtype=np.int64)
    return (2 * a - 1) * F // (2 * N)


def apply_action(position, action, delta: int, F: int):
    """Vectorised move with clamping to [0, F-1]; works on scalars or arrays."""
    pos = np.asarray(position, dtype=np.int64)
    act = np.asarray(action, dtype=np.int64)
    step = np.where(act == Action.MoveForward, delta, np.where(act == Action.MoveBackward, -delta, 0))
    out = np.clip(pos + step, 0, F - 1)
    return int(out) if out.ndim == 0 else out


def observe(params: ModelParameters, frames: np.ndarray, position: int) -> np.ndarray:
    tape = nx.Tape()
    w = params.bind(tape)
    x = tape.const(np.asarray(frames)[position:position + 1])
    return trunk(w, x).value.copy()


def context_state(observations: np.ndarray, a: int, M: int,
                  boundary_obs: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    """Window of 2M+1 observations around agent ``a`` (1-based), as one row."""
    obs = np.atleast_2d(np.asarray(observations, dtype=np.float64))
    N = obs.shape[0]
    if not 1 <= a <= N:
        raise ValueError(f"agent index {a} outside 1..{N}")
    first, last = (np.atleast_2d(b) for b in boundary_obs)
    ext = np.vstack([first, obs, last])
    return ext[context_index(N, M)[:, a - 1]].reshape(1, -1)


def gru_step(params: ModelParameters, s: np.ndarray, h_prev: np.ndarray) -> np.ndarray:
    tape = nx.Tape()
    w = params.bind(tape)
    return gru_cell(w, tape.const(s), tape.const(h_prev)).value.copy()


def policy_distribution(params: ModelParameters, h: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    tape = nx.Tape()
    w = params.bind(tape)
    logp, probs, ent = policy_head(w, tape.const(h))
    return probs.value[0].copy(), logp.value[0].copy(), float(ent.value[0, 0])


# --- episodes ---------------------------------------------------------------

@dataclass
class EpisodeGraph:
    """Tape nodes an episode leaves behind for the losses."""
    tape: nx.Tape
    weights: dict[str, nx.Node]
    chosen_logp: list[nx.Node] = field(default_factory=list)   # per step, N x 1
    entropy: list[nx.Node] = field(default_factory=list)       # per step, N x 1
    logits: list[nx.Node] = field(default_factory=list)        # per step, N x C


@dataclass
class EpisodeTrace:
    positions: np.ndarray   # T_stop x N, positions observed at each step
    probs: np.ndarray       # T_stop x N x 3
    actions: np.ndarray     # T_stop x N
    log_probs: np.ndarray   # T_stop x N, log-prob of the chosen action
    logits: np.ndarray      # T_stop x N x C
    entropies: np.ndarray   # T_stop x N
    t_stop: int
    stopped_early: bool
    graph: EpisodeGraph | None = field(default=None, repr=False)

    @property
    def num_agents(self) -> int:
        return self.positions.shape[1]

    @property
    def final_positions(self) -> np.ndarray:
        return self.positions[-1]

    def observed_frames(self) -> int:
        """Distinct frame indices looked at during the episode."""
        return int(np.unique(self.positions).size)


def run_episode(params: ModelParameters, seq: FrameSequence, N: int, M: int | None = None,
                delta: int = 1, T_max: int = 10, mode: str = "greedy", seed: int | None = None,
                tape: nx.Tape | None = None, forced_actions: np.ndarray | None = None) -> EpisodeTrace:
    """Roll out N agents until all of them Stay or ``T_max`` steps pass.

    ``mode`` is ``"greedy"`` (argmax, lowest index wins ties) or ``"sample"``
    (needs ``seed``).  ``forced_actions`` (T x N) replays a fixed action
    sequence, which the gradient checks use.  Pass ``tape`` to keep the graph
    for training; the returned trace then carries it in ``graph``.
    """
    if mode not in ("greedy", "sample"):
        raise ValueError(f"mode must be 'greedy' or 'sample', got {mode!r}")
    if T_max < 1 or N < 1 or delta < 1:
        raise ValueError("need T_max >= 1, N >= 1, delta >= 1")
    dims = params.dims
    if M is None:
        M = dims.M
    if M != dims.M:
        raise ValueError(f"context range M={M} does not match the model's M={dims.M}")
    if seq.dim != dims.D:
        raise ValueError(f"sequence feature dim {seq.dim} != model D={dims.D}")
    rng = make_rng(seed) if mode == "sample" else None
    if mode == "sample" and seed is None:
        raise ValueError("sample mode needs a seed")

    keep_graph = tape is not None
    tape = tape if keep_graph else nx.Tape()
    w = params.bind(tape)
    graph = EpisodeGraph(tape, w)
    F = seq.num_frames
    frames = tape.const(seq.frames)
    pos = init_positions(F, N)
    h = tape.const(np.zeros((N, dims.H)))

    rec_pos, rec_probs, rec_act, rec_logp, rec_logits, rec_ent = [], [], [], [], [], []
    stopped = False
    for t in range(T_max):
        ext_obs = trunk(w, nx.take_rows(frames, np.concatenate(([0], pos, [F - 1]))))
        s = context_from_extended(ext_obs, N, M)
        h = gru_cell(w, s, h)
        logp, probs, ent = policy_head(w, h)
        agent_obs = nx.take_rows(ext_obs, np.arange(1, N + 1))
        logits = classifier_head(w, agent_obs)

        p = probs.value
        if forced_actions is not None:
            act = np.asarray(forced_actions[t], dtype=np.int64)
        elif mode == "greedy":
            act = np.argmax(logp.value, axis=1)
        else:
            cdf = np.cumsum(p, axis=1)
            u = rng.random(N)[:, None] * cdf[:, -1:]
            act = np.minimum((u >= cdf).sum(axis=1), NUM_ACTIONS - 1)
        chosen = nx.pick_cols(logp, act)

        rec_pos.append(pos.copy())
        rec_probs.append(p.copy())
        rec_act.append(act.copy())
        rec_logp.append(chosen.value[:, 0].copy())
        rec_logits.append(logits.value.copy())
        rec_ent.append(ent.value[:, 0].copy())
        graph.chosen_logp.append(chosen)
        graph.entropy.append(ent)
        graph.logits.append(logits)

        if np.all(act == Action.Stay):
            stopped = True
            break
        if t + 1 < T_max:
            pos = apply_action(pos, act, delta, F)

    return EpisodeTrace(
        positions=np.array(rec_pos), probs=np.array(rec_probs), actions=np.array(rec_act),
        log_probs=np.array(rec_logp), logits=np.array(rec_logits), entropies=np.array(rec_ent),
        t_stop=len(rec_pos), stopped_early=stopped, graph=graph if keep_graph else None,
    )

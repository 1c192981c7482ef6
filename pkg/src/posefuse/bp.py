"""Loopy sum-product belief propagation over a person's factor graph.

One iteration updates messages grouped by factor type: data factors first,
then a temporal sweep that walks factors forward through the sequence and
back again (so temporal evidence crosses the whole clip in one iteration),
then collision factors, and finally the stored variable-to-factor messages.
Factor updates always read the freshest incoming products, computed on the
fly from the current factor-to-variable messages.

Messages are kept in the linear domain and renormalized after every update;
factor-table flooring upstream guarantees they stay strictly positive.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .crf import FactorGraph
from .errors import NumericalUnderflow

UNDERFLOW_LIMIT = 1e-300
DEFAULT_ITERATIONS = 5


@dataclass
class MessageStore:
    """Directed messages: factor->variable and variable->factor, per edge slot."""

    f2v: list[list[np.ndarray]]
    v2f: list[list[np.ndarray]]


def init_messages(graph: FactorGraph) -> MessageStore:
    """Uniform messages (1/M per entry) on every directed edge."""
    f2v = []
    v2f = []
    for f in graph.factors:
        rows_f = []
        rows_v = []
        for v in f.var_ids:
            n = graph.variables[v].n_states
            rows_f.append(np.full(n, 1.0 / n))
            rows_v.append(np.full(n, 1.0 / n))
        f2v.append(rows_f)
        v2f.append(rows_v)
    return MessageStore(f2v=f2v, v2f=v2f)


def _normalized(raw: np.ndarray, context: str) -> np.ndarray:
    total = float(raw.sum())
    if total < UNDERFLOW_LIMIT:
        raise NumericalUnderflow(f"{context}: message mass {total:.3e}")
    return raw / total


def _incoming(
    graph: FactorGraph, store: MessageStore, var: int, exclude_factor: int
) -> np.ndarray:
    """Fresh variable->factor message: product of the other factors' messages.

    Data-factor messages are constant (equal to the factor table), so the
    product always reflects current evidence even before the first sweep.
    """
    out = np.ones(graph.variables[var].n_states)
    for fi, slot in graph.adjacency[var]:
        if fi == exclude_factor:
            continue
        f = graph.factors[fi]
        out *= f.table() if f.kind == "data" else store.f2v[fi][slot]
    return _normalized(out, f"variable {var} -> factor {exclude_factor}")


def _set_message(
    slot_store: list[np.ndarray], slot: int, new: np.ndarray, damping: float
) -> float:
    if damping > 0.0:
        new = _normalized((1.0 - damping) * new + damping * slot_store[slot], "damped message")
    delta = float(np.max(np.abs(new - slot_store[slot])))
    slot_store[slot] = new
    return delta


def _update_factor(
    graph: FactorGraph, store: MessageStore, fi: int, damping: float
) -> float:
    """Recompute all outgoing messages of one factor from fresh incoming ones."""
    f = graph.factors[fi]
    table = f.table()
    inc = [_incoming(graph, store, v, fi) for v in f.var_ids]
    max_delta = 0.0
    if len(f.var_ids) == 1:
        raw = table
        max_delta = max(max_delta, _set_message(store.f2v[fi], 0, _normalized(raw.copy(), "data"), damping))
    elif len(f.var_ids) == 2:
        raw_a = table @ inc[1]
        raw_b = table.T @ inc[0]
        max_delta = max(max_delta, _set_message(store.f2v[fi], 0, _normalized(raw_a, "pair"), damping))
        max_delta = max(max_delta, _set_message(store.f2v[fi], 1, _normalized(raw_b, "pair"), damping))
    else:
        # ternary (prev, center, next): contract one axis at a time
        pc = table @ inc[2]  # (P, C), next summed out
        raw_p = pc @ inc[1]
        raw_c = pc.T @ inc[0]
        cn = np.tensordot(inc[0], table, axes=(0, 0))  # (C, N), prev summed out
        raw_n = cn.T @ inc[1]
        for slot, raw in enumerate((raw_p, raw_c, raw_n)):
            max_delta = max(
                max_delta, _set_message(store.f2v[fi], slot, _normalized(raw, "ternary"), damping)
            )
    return max_delta


def sweep_iteration(graph: FactorGraph, store: MessageStore, damping: float = 0.0) -> float:
    """One full type-grouped iteration; returns the max L-infinity message change.

    Stages: (a) data-factor messages, (b) temporal factors in ascending
    center-frame order then descending, (c) collision factors, (d) stored
    variable->factor messages.
    """
    max_delta = 0.0
    for fi in graph.factors_of_kind("data"):
        max_delta = max(max_delta, _update_factor(graph, store, fi, damping))

    temporal = graph.factors_of_kind("temporal")
    temporal.sort(key=lambda fi: (graph.factors[fi].joint, graph.factors[fi].center_frame))
    for fi in temporal:
        max_delta = max(max_delta, _update_factor(graph, store, fi, damping))
    for fi in reversed(temporal):
        max_delta = max(max_delta, _update_factor(graph, store, fi, damping))

    for fi in graph.factors_of_kind("collision"):
        max_delta = max(max_delta, _update_factor(graph, store, fi, damping))

    for fi, f in enumerate(graph.factors):
        for slot, v in enumerate(f.var_ids):
            new = _incoming(graph, store, v, fi)
            max_delta = max(max_delta, _set_message(store.v2f[fi], slot, new, 0.0))
    return max_delta


def beliefs(graph: FactorGraph, store: MessageStore) -> list[np.ndarray]:
    """Per-variable posteriors: normalized product of incoming factor messages.

    Data factors contribute their (constant) tables directly, so beliefs are
    meaningful even before any sweep.
    """
    out = []
    for v in graph.variables:
        b = np.ones(v.n_states)
        for fi, slot in graph.adjacency[v.index]:
            f = graph.factors[fi]
            b *= f.table() if f.kind == "data" else store.f2v[fi][slot]
        out.append(_normalized(b, f"belief of variable {v.index}"))
    return out


@dataclass
class BPResult:
    beliefs: list[np.ndarray]
    map_indices: list[int]
    deltas: list[float] = field(default_factory=list)  # per-iteration max message change

    @property
    def converged_to(self) -> float:
        return self.deltas[-1] if self.deltas else 0.0


def run(
    graph: FactorGraph,
    iterations: int = DEFAULT_ITERATIONS,
    damping: float = 0.0,
    early_exit_tol: float | None = None,
) -> BPResult:
    """Run the full schedule and return beliefs, MAP indices and diagnostics."""
    store = init_messages(graph)
    deltas = []
    for _ in range(iterations):
        delta = sweep_iteration(graph, store, damping)
        deltas.append(delta)
        if early_exit_tol is not None and delta < early_exit_tol:
            break
    b = beliefs(graph, store)
    return BPResult(beliefs=b, map_indices=[int(np.argmax(x)) for x in b], deltas=deltas)


def select_map(
    graph: FactorGraph, result: BPResult, n_joints: int
) -> dict[int, np.ndarray]:
    """Most probable 3D state per variable, assembled as per-frame skeletons.

    Ties break toward the lowest state index.  Joints without a variable at a
    frame stay NaN.
    """
    frames = sorted({v.frame for v in graph.variables})
    out = {f: np.full((n_joints, 3), np.nan) for f in frames}
    for v, idx in zip(graph.variables, result.map_indices):
        out[v.frame][v.joint] = v.states[idx]
    return out


def top_states_json(graph: FactorGraph, result: BPResult, k: int = 5) -> list[dict]:
    """Debug dump: per variable, the k most probable states and their beliefs."""
    entries = []
    for v, b in zip(graph.variables, result.beliefs):
        order = np.argsort(-b, kind="stable")[:k]
        entries.append(
            {
                "person_id": v.person_id,
                "frame": v.frame,
                "joint": v.joint,
                "top": [
                    {
                        "state_index": int(i),
                        "belief": float(b[i]),
                        "xyz_mm": [float(c) for c in v.states[i]],
                    }
                    for i in order
                ],
            }
        )
    return entries

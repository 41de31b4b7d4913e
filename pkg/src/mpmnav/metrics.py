"""VLN evaluation metrics over graph trajectories.

Distances are geodesic (shortest path over edge lengths), so every metric is
defined on the navigation graph rather than in Euclidean space.
"""

from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass

import numpy as np

from .world import Environment, WorldError, geodesic_distance

SUCCESS_RADIUS = 3.0
COLUMNS = ("TL", "NE", "SR", "SPL", "CLS", "nDTW", "sDTW")


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class EvalRecord:
    episode: str
    TL: float
    NE: float
    SR: float
    SPL: float
    CLS: float
    nDTW: float
    sDTW: float


def _check(path) -> None:
    if len(path) == 0:
        raise MetricError("empty path")


def trajectory_length(env: Environment, path) -> float:
    _check(path)
    try:
        return float(sum(env.edge_length(u, v) for u, v in zip(path, path[1:])))
    except WorldError as exc:
        raise MetricError(str(exc)) from exc


def navigation_error(env: Environment, path, goal: int) -> float:
    _check(path)
    return geodesic_distance(env, path[-1], goal)


def success(ne: float, d_th: float = SUCCESS_RADIUS) -> float:
    return 1.0 if ne <= d_th else 0.0


def spl(sr: float, shortest_len: float, tl: float) -> float:
    if shortest_len < 0 or tl < 0:
        raise MetricError("negative path length")
    if shortest_len == 0 and tl == 0:
        return float(sr)
    return float(sr) * shortest_len / max(shortest_len, tl)


def _dist_matrix(env: Environment, p, r) -> np.ndarray:
    return np.array([[geodesic_distance(env, a, b) for b in r] for a in p])


def cls(env: Environment, path, ref, d_th: float = SUCCESS_RADIUS) -> float:
    _check(path)
    _check(ref)
    d = _dist_matrix(env, path, ref)
    pc = float(np.mean(np.exp(-d.min(axis=0) / d_th)))
    epl = pc * trajectory_length(env, ref)
    tl = trajectory_length(env, path)
    denom = epl + abs(epl - tl)
    ls = 1.0 if denom == 0 else epl / denom
    return pc * ls


def dtw_from_costs(cost: np.ndarray) -> float:
    n, m = cost.shape
    table = np.full((n + 1, m + 1), np.inf)
    table[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            table[i, j] = cost[i - 1, j - 1] + min(table[i - 1, j], table[i, j - 1], table[i - 1, j - 1])
    return float(table[n, m])


def dtw(env: Environment, path, ref) -> float:
    _check(path)
    _check(ref)
    return dtw_from_costs(_dist_matrix(env, path, ref))


def ndtw(env: Environment, path, ref, d_th: float = SUCCESS_RADIUS) -> float:
    return math.exp(-dtw(env, path, ref) / (len(ref) * d_th))


def sdtw(sr: float, ndtw_value: float) -> float:
    return float(sr) * ndtw_value


def evaluate_episode(env: Environment, episode_id: str, path, ref, d_th: float = SUCCESS_RADIUS) -> EvalRecord:
    """All metrics for one trajectory against its reference path."""
    path = [int(x) for x in path]
    ref = [int(x) for x in ref]
    tl = trajectory_length(env, path)
    ne = navigation_error(env, path, ref[-1])
    sr = success(ne, d_th)
    nd = ndtw(env, path, ref, d_th)
    return EvalRecord(
        episode=episode_id,
        TL=tl,
        NE=ne,
        SR=sr,
        SPL=spl(sr, geodesic_distance(env, ref[0], ref[-1]), tl),
        CLS=cls(env, path, ref, d_th),
        nDTW=nd,
        sDTW=sdtw(sr, nd),
    )


def aggregate(records) -> dict:
    if not records:
        raise MetricError("cannot aggregate zero records")
    out = {c: float(np.mean([getattr(r, c) for r in records])) for c in COLUMNS}
    out["SR_pct"] = 100.0 * out["SR"]
    out["SPL_pct"] = 100.0 * out["SPL"]
    out["n"] = len(records)
    return out


def metrics_csv(split: str, records) -> str:
    buf = io.StringIO(newline="")
    buf.write("split,episode," + ",".join(COLUMNS) + "\n")
    for r in records:
        buf.write(f"{split},{r.episode}," + ",".join(f"{getattr(r, c):.6f}" for c in COLUMNS) + "\n")
    summary = aggregate(records)
    buf.write(f"{split},MEAN," + ",".join(f"{summary[c]:.6f}" for c in COLUMNS) + "\n")
    return buf.getvalue()


def record_dict(r: EvalRecord) -> dict:
    return asdict(r)

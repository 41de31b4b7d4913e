"""Synthetic navigation worlds: seeded geometric graphs with procedural panoramas.

Every node carries a handful of object placements. A view feature is the
normalized sum of the codebook vectors of objects visible in a 60 degree
window around the view heading, plus a small deterministic perturbation.
"""

from __future__ import annotations

import heapq
import json
import math
import os
import zlib
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path as FsPath

import numpy as np

K_VIEWS = 36
D_VIEW = 64
N_OBJECT_TYPES = 32
VIEW_WINDOW = math.radians(30.0)
FEATURE_SIGMA = 0.05
MIN_EDGE = 1.0
MAX_EDGE = 4.0
MAX_ELEVATION = 0.5
SCHEMA_VERSION = 1
DEFAULT_CODEBOOK_SEED = 20230710
STOP = -1
SPLITS = ("train", "val_seen", "val_unseen")


class WorldError(ValueError):
    pass


class SchemaError(WorldError):
    pass


def wrap_angle(a):
    """Wrap radians into (-pi, pi]."""
    w = math.remainder(a, 2 * math.pi)
    if w == -math.pi:
        w = math.pi
    return w


def bin_heading(k: int) -> float:
    return 2 * math.pi * k / K_VIEWS


def nearest_bin(heading: float) -> int:
    return int(round((heading % (2 * math.pi)) / (2 * math.pi / K_VIEWS))) % K_VIEWS


def angle_quad(theta: float, phi: float) -> np.ndarray:
    return np.array([math.sin(theta), math.cos(theta), math.sin(phi), math.cos(phi)])


def stable_hash(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


@dataclass(frozen=True)
class ObjectPlacement:
    object_type: int
    heading: float


@dataclass(frozen=True)
class Viewpoint:
    id: int
    position: tuple[float, float, float]
    objects: tuple[ObjectPlacement, ...]


@dataclass(frozen=True)
class CandidateAction:
    target_node: int
    view_feature: np.ndarray = field(compare=False)
    angle_feature: np.ndarray = field(compare=False)
    edge_length: float

    @property
    def is_stop(self) -> bool:
        return self.target_node == STOP


@dataclass(frozen=True)
class PanoramicObservation:
    node: int
    heading: float
    view_features: np.ndarray  # (K, d_v)
    angle_features: np.ndarray  # (K, 4)
    candidates: tuple[CandidateAction, ...]


def make_codebook(codebook_seed: int) -> np.ndarray:
    rng = np.random.default_rng([codebook_seed, 0xC0DE])
    cb = rng.standard_normal((N_OBJECT_TYPES, D_VIEW))
    return cb / np.linalg.norm(cb, axis=1, keepdims=True)


@dataclass
class Environment:
    id: str
    seed: int
    nodes: list[Viewpoint]
    edges: list[tuple[int, int]]
    codebook_seed: int = DEFAULT_CODEBOOK_SEED

    def __post_init__(self):
        ids = [v.id for v in self.nodes]
        if ids != list(range(len(ids))):
            raise WorldError(f"{self.id}: node ids must be 0..n-1 in order")
        seen = set()
        for u, v in self.edges:
            if u == v:
                raise WorldError(f"{self.id}: self-loop at {u}")
            key = (min(u, v), max(u, v))
            if key in seen:
                raise WorldError(f"{self.id}: duplicate edge {key}")
            if not (0 <= u < len(ids) and 0 <= v < len(ids)):
                raise WorldError(f"{self.id}: edge {key} references unknown node")
            seen.add(key)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @cached_property
    def positions(self) -> np.ndarray:
        return np.array([v.position for v in self.nodes], dtype=np.float64)

    @cached_property
    def neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in self.nodes]
        for u, v in self.edges:
            adj[u].append(v)
            adj[v].append(u)
        return [sorted(a) for a in adj]

    @cached_property
    def _edge_len(self) -> dict[tuple[int, int], float]:
        out = {}
        for u, v in self.edges:
            d = float(np.linalg.norm(self.positions[u] - self.positions[v]))
            out[(u, v)] = out[(v, u)] = d
        return out

    def edge_length(self, u: int, v: int) -> float:
        try:
            return self._edge_len[(u, v)]
        except KeyError:
            raise WorldError(f"{self.id}: nodes {u} and {v} are not adjacent") from None

    def adjacent(self, u: int, v: int) -> bool:
        return (u, v) in self._edge_len

    def edge_heading(self, u: int, v: int) -> float:
        d = self.positions[v] - self.positions[u]
        return math.atan2(d[1], d[0]) % (2 * math.pi)

    def edge_elevation(self, u: int, v: int) -> float:
        d = self.positions[v] - self.positions[u]
        return math.atan2(d[2], math.hypot(d[0], d[1]))

    def check_node(self, node: int) -> None:
        if not isinstance(node, (int, np.integer)) or not 0 <= node < self.n_nodes:
            raise WorldError(f"{self.id}: invalid node {node!r}")

    @cached_property
    def codebook(self) -> np.ndarray:
        return make_codebook(self.codebook_seed)

    @cached_property
    def features(self) -> np.ndarray:
        """All view features, shape (n_nodes, K, d_v)."""
        out = np.empty((self.n_nodes, K_VIEWS, D_VIEW))
        for n in range(self.n_nodes):
            for k in range(K_VIEWS):
                out[n, k] = view_feature(self, n, k)
        out.flags.writeable = False
        return out

    @cached_property
    def _dist_cache(self) -> dict[int, np.ndarray]:
        return {}

    def distances_from(self, src: int) -> np.ndarray:
        self.check_node(src)
        cache = self._dist_cache
        if src not in cache:
            d = _dijkstra(self.neighbors, self.edge_length, src, self.n_nodes)
            d.flags.writeable = False
            cache[src] = d
        return cache[src]

    @cached_property
    def candidate_table(self) -> list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]:
        """Per node: (neighbour ids, edge headings, edge elevations, facing view features)."""
        table = []
        for u in range(self.n_nodes):
            nbs = np.array(self.neighbors[u], dtype=np.int64)
            heads = np.array([self.edge_heading(u, v) for v in nbs])
            elevs = np.array([self.edge_elevation(u, v) for v in nbs])
            feats = self.features[u, [nearest_bin(h) for h in heads]] if len(nbs) else np.zeros((0, D_VIEW))
            table.append((nbs, heads, elevs, feats))
        return table

    def salient_object(self, node: int) -> int:
        counts: dict[int, int] = {}
        for o in self.nodes[node].objects:
            counts[o.object_type] = counts.get(o.object_type, 0) + 1
        return min(counts, key=lambda t: (-counts[t], t))

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "id": self.id,
            "seed": self.seed,
            "codebook_seed": self.codebook_seed,
            "nodes": [
                {
                    "id": v.id,
                    "pos": list(v.position),
                    "objects": [{"type": o.object_type, "heading": o.heading} for o in v.objects],
                }
                for v in self.nodes
            ],
            "edges": [list(e) for e in self.edges],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), separators=(",", ":"))

    @classmethod
    def from_json(cls, raw: dict) -> "Environment":
        if not isinstance(raw, dict):
            raise SchemaError("world file must hold a JSON object")
        if raw.get("schema_version") != SCHEMA_VERSION:
            raise SchemaError(f"unsupported schema_version {raw.get('schema_version')!r}")
        try:
            nodes = [
                Viewpoint(
                    id=int(n["id"]),
                    position=tuple(float(c) for c in n["pos"]),
                    objects=tuple(
                        ObjectPlacement(int(o["type"]), float(o["heading"])) for o in n["objects"]
                    ),
                )
                for n in raw["nodes"]
            ]
            edges = [(int(u), int(v)) for u, v in raw["edges"]]
            return cls(
                id=str(raw["id"]),
                seed=int(raw["seed"]),
                nodes=nodes,
                edges=edges,
                codebook_seed=int(raw["codebook_seed"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, WorldError):
                raise
            raise SchemaError(f"malformed world file: {exc}") from exc


def _dijkstra(neighbors, edge_length, src: int, n: int) -> np.ndarray:
    dist = np.full(n, np.inf)
    dist[src] = 0.0
    heap = [(0.0, src)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for v in neighbors[u]:
            nd = d + edge_length(u, v)
            if nd < dist[v]:
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return dist


def generate_environment(
    seed: int,
    n_nodes: int,
    connect_radius: float,
    env_id: str | None = None,
    codebook_seed: int = DEFAULT_CODEBOOK_SEED,
) -> Environment:
    """Grow a random geometric graph.

    Nodes are added one at a time within [1, 3] m of an existing node and at
    least 1 m from all of them, so the growth tree alone certifies that some
    bridging set with edges <= 4 m exists.
    """
    if n_nodes < 4:
        raise WorldError(f"n_nodes must be >= 4, got {n_nodes}")
    if not connect_radius > 0:
        raise WorldError(f"connect_radius must be positive, got {connect_radius}")
    rng = np.random.default_rng(seed)
    xy = np.zeros((n_nodes, 2))
    placed = 1
    while placed < n_nodes:
        anchor = xy[int(rng.integers(placed))]
        r = rng.uniform(MIN_EDGE + 0.1, 3.0)
        a = rng.uniform(0, 2 * math.pi)
        cand = anchor + r * np.array([math.cos(a), math.sin(a)])
        if np.sqrt(((xy[:placed] - cand) ** 2).sum(axis=1)).min() >= MIN_EDGE + 0.05:
            xy[placed] = cand
            placed += 1
    z = rng.uniform(-MAX_ELEVATION, MAX_ELEVATION, size=n_nodes)
    pos = np.column_stack([xy, z])

    dmat = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(axis=-1))
    iu, ju = np.triu_indices(n_nodes, k=1)
    pairs = sorted(zip(dmat[iu, ju].tolist(), iu.tolist(), ju.tolist()))

    parent = list(range(n_nodes))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    limit = min(connect_radius, MAX_EDGE)
    edges = []
    for d, i, j in pairs:
        if d <= limit and d >= MIN_EDGE:
            edges.append((i, j))
            parent[find(i)] = find(j)
    # deterministic bridging: shortest admissible pair joining two components
    for d, i, j in pairs:
        if find(i) != find(j) and MIN_EDGE <= d <= MAX_EDGE:
            edges.append((i, j))
            parent[find(i)] = find(j)
    if len({find(i) for i in range(n_nodes)}) != 1:
        raise WorldError("could not connect environment")  # unreachable by construction
    edges.sort()

    nodes = []
    for i in range(n_nodes):
        n_obj = int(rng.integers(3, 7))
        objs = tuple(
            ObjectPlacement(int(rng.integers(N_OBJECT_TYPES)), float(rng.uniform(0, 2 * math.pi)))
            for _ in range(n_obj)
        )
        nodes.append(Viewpoint(i, tuple(float(c) for c in pos[i]), objs))
    return Environment(
        id=env_id if env_id is not None else f"env{seed}",
        seed=int(seed),
        nodes=nodes,
        edges=edges,
        codebook_seed=codebook_seed,
    )


def view_feature(env: Environment, node: int, heading_bin: int, sigma: float = FEATURE_SIGMA) -> np.ndarray:
    env.check_node(node)
    if not isinstance(heading_bin, (int, np.integer)) or not 0 <= heading_bin < K_VIEWS:
        raise WorldError(f"invalid heading bin {heading_bin!r}")
    center = bin_heading(int(heading_bin))
    acc = np.zeros(D_VIEW)
    for o in env.nodes[node].objects:
        if abs(wrap_angle(o.heading - center)) <= VIEW_WINDOW + 1e-12:
            acc += env.codebook[o.object_type]
    if sigma > 0:
        rng = np.random.default_rng([env.codebook_seed, stable_hash(env.id), int(node), int(heading_bin)])
        acc = acc + sigma * rng.standard_normal(D_VIEW)
    norm = np.linalg.norm(acc)
    return acc / norm if norm > 0 else acc


def panoramic_observation(env: Environment, node: int, agent_heading: float) -> PanoramicObservation:
    env.check_node(node)
    thetas = np.array([wrap_angle(bin_heading(k) - agent_heading) for k in range(K_VIEWS)])
    angles = np.column_stack([np.sin(thetas), np.cos(thetas), np.zeros(K_VIEWS), np.ones(K_VIEWS)])
    feats = env.features[node]
    cands = []
    for nb in env.neighbors[node]:
        h = env.edge_heading(node, nb)
        cands.append(
            CandidateAction(
                target_node=nb,
                view_feature=feats[nearest_bin(h)],
                angle_feature=angle_quad(wrap_angle(h - agent_heading), env.edge_elevation(node, nb)),
                edge_length=env.edge_length(node, nb),
            )
        )
    cands.append(CandidateAction(STOP, np.zeros(D_VIEW), np.zeros(4), 0.0))
    return PanoramicObservation(node, agent_heading, feats, angles, tuple(cands))


def geodesic_distance(env: Environment, a: int, b: int) -> float:
    env.check_node(b)
    d = env.distances_from(a)[b]
    if not np.isfinite(d):
        raise WorldError(f"{env.id}: node {b} unreachable from {a}")
    return float(d)


def shortest_path(env: Environment, a: int, b: int) -> list[int]:
    """Shortest route from a to b; among equal-length routes the
    lexicographically smallest node sequence wins."""
    total = geodesic_distance(env, a, b)
    to_goal = env.distances_from(b)
    path = [a]
    cur = a
    while cur != b:
        remaining = to_goal[cur]
        nxt = None
        for nb in env.neighbors[cur]:
            if math.isclose(env.edge_length(cur, nb) + to_goal[nb], remaining, rel_tol=1e-12, abs_tol=1e-12):
                nxt = nb
                break
        assert nxt is not None, "shortest-path predecessor missing"
        path.append(nxt)
        cur = nxt
    assert math.isclose(sum(env.edge_length(u, v) for u, v in zip(path, path[1:])), total, abs_tol=1e-9)
    return path


def save_environment(env: Environment, path) -> None:
    FsPath(path).write_text(env.dumps())


def load_environment(path) -> Environment:
    try:
        raw = json.loads(FsPath(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: malformed JSON ({exc})") from exc
    try:
        return Environment.from_json(raw)
    except SchemaError as exc:
        raise SchemaError(f"{path}: {exc}") from exc


@dataclass
class WorldSet:
    """Environments grouped by split. val_seen reuses training environments."""

    root: str | None
    splits: dict[str, list[Environment]]

    def envs(self, split: str) -> list[Environment]:
        return self.splits[split]

    def by_id(self) -> dict[str, Environment]:
        out = {}
        for envs in self.splits.values():
            for e in envs:
                out[e.id] = e
        return out

    def manifest(self) -> dict:
        return {s: [e.id for e in self.splits[s]] for s in SPLITS}


def generate_world_set(
    seed: int,
    n_train: int = 8,
    n_val_seen: int = 3,
    n_val_unseen: int = 3,
    n_nodes: int = 60,
    connect_radius: float = 2.5,
) -> WorldSet:
    if n_val_seen > n_train:
        raise WorldError("val_seen environments are drawn from the training environments")
    ss = np.random.SeedSequence(seed)
    seeds = [int(s.generate_state(1, dtype=np.uint64)[0] >> 1) for s in ss.spawn(n_train + n_val_unseen)]
    train = [
        generate_environment(seeds[i], n_nodes, connect_radius, env_id=f"train{i:02d}")
        for i in range(n_train)
    ]
    unseen = [
        generate_environment(seeds[n_train + i], n_nodes, connect_radius, env_id=f"unseen{i:02d}")
        for i in range(n_val_unseen)
    ]
    return WorldSet(None, {"train": train, "val_seen": train[:n_val_seen], "val_unseen": unseen})


def save_world_set(ws: WorldSet, root) -> None:
    root = FsPath(root)
    for split in SPLITS:
        d = root / split
        d.mkdir(parents=True, exist_ok=True)
        for env in ws.splits[split]:
            save_environment(env, d / f"{env.id}.json")
    (root / "manifest.json").write_text(json.dumps(ws.manifest(), indent=1, sort_keys=True) + "\n")
    ws.root = os.fspath(root)


def load_world_set(root) -> WorldSet:
    root = FsPath(root)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"{root}: unreadable manifest ({exc})") from exc
    loaded: dict[str, Environment] = {}
    splits = {}
    for split in SPLITS:
        envs = []
        for env_id in manifest.get(split, []):
            if env_id not in loaded:
                loaded[env_id] = load_environment(root / split / f"{env_id}.json")
            envs.append(loaded[env_id])
        splits[split] = envs
    return WorldSet(os.fspath(root), splits)

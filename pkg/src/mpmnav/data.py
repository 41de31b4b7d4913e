"""Exploration paths, masking, synthetic instructions and dataset files."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path as FsPath

import numpy as np

from .world import (
    N_OBJECT_TYPES,
    Environment,
    WorldSet,
    angle_quad,
    bin_heading,
    nearest_bin,
    shortest_path,
    stable_hash,
    wrap_angle,
)

MIN_PATH_LEN = 4
MAX_PATH_LEN = 16
MAX_INSTR_LEN = 64
WALK_RETRIES = 20
START_HEADING = 0.0

CONTROL_TOKENS = ["[PAD]", "[MASK]", "[CLS]", "[SEP]", "[STOP]"]
DIRECTION_TOKENS = ["FORWARD", "LEFT", "RIGHT", "HARD_LEFT", "HARD_RIGHT"]


class DataError(ValueError):
    pass


class Vocabulary:
    def __init__(self):
        self.tokens = CONTROL_TOKENS + DIRECTION_TOKENS + [f"OBJ_{i}" for i in range(N_OBJECT_TYPES)]
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self.index[token]

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.index[t] for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    @property
    def control_ids(self) -> frozenset[int]:
        return frozenset(self.index[t] for t in CONTROL_TOKENS)


VOCAB = Vocabulary()
PAD_ID = VOCAB["[PAD]"]
MASK_ID = VOCAB["[MASK]"]


@dataclass(frozen=True)
class Path:
    env_id: str
    nodes: tuple[int, ...]
    headings: tuple[float, ...]

    @property
    def n(self) -> int:
        return len(self.nodes)

    @classmethod
    def from_nodes(cls, env: Environment, nodes, check_unique: bool = True) -> "Path":
        nodes = tuple(int(n) for n in nodes)
        if len(nodes) < 2:
            raise DataError("a path needs at least 2 nodes")
        if check_unique and len(set(nodes)) != len(nodes):
            raise DataError(f"path revisits a node: {nodes}")
        for u, v in zip(nodes, nodes[1:]):
            if not env.adjacent(u, v):
                raise DataError(f"{env.id}: {u} -> {v} is not an edge")
        return cls(env.id, nodes, tuple(env.edge_heading(u, v) for u, v in zip(nodes, nodes[1:])))


@dataclass(frozen=True)
class MaskedPath:
    env_id: str
    retained: tuple[int, ...]
    positions: tuple[int, ...]  # index of each retained viewpoint in source.nodes
    mask_ratio: float
    source: Path

    @property
    def n_masked(self) -> int:
        return self.source.n - len(self.retained)


@dataclass
class LengthHistogram:
    counts: dict[int, int]

    def __post_init__(self):
        self.counts = {int(k): int(v) for k, v in sorted(self.counts.items()) if v > 0}
        if any(v < 0 for v in self.counts.values()):
            raise DataError("negative histogram count")
        bad = [k for k in self.counts if not MIN_PATH_LEN <= k <= MAX_PATH_LEN]
        if bad:
            raise DataError(f"path lengths {bad} outside [{MIN_PATH_LEN}, {MAX_PATH_LEN}]")

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def support(self) -> list[int]:
        return list(self.counts)

    def probs(self) -> np.ndarray:
        return np.array(list(self.counts.values()), dtype=np.float64) / self.total

    def cdf(self, length: int) -> float:
        return sum(c for k, c in self.counts.items() if k <= length) / self.total

    def sample(self, rng: np.random.Generator) -> int:
        if not self.counts:
            raise DataError("empty length histogram")
        return int(self.support[int(rng.choice(len(self.counts), p=self.probs()))])

    def mean(self) -> float:
        return sum(k * c for k, c in self.counts.items()) / self.total

    def save(self, path) -> None:
        FsPath(path).write_text(json.dumps({str(k): v for k, v in self.counts.items()}) + "\n")

    @classmethod
    def load(cls, path) -> "LengthHistogram":
        return cls({int(k): v for k, v in json.loads(FsPath(path).read_text()).items()})


@dataclass(frozen=True)
class VLNEpisode:
    id: str
    env_id: str
    instruction: tuple[int, ...]
    path: Path
    split: str

    @property
    def goal(self) -> int:
        return self.path.nodes[-1]

    @property
    def start(self) -> int:
        return self.path.nodes[0]


def fit_length_histogram(episodes) -> LengthHistogram:
    if not episodes:
        raise DataError("cannot fit a length histogram to zero episodes")
    counts: dict[int, int] = {}
    for ep in episodes:
        counts[ep.path.n] = counts.get(ep.path.n, 0) + 1
    return LengthHistogram(counts)


def ks_distance(lengths, hist: LengthHistogram) -> float:
    """Kolmogorov-Smirnov distance between an empirical sample and a histogram."""
    lengths = np.asarray(lengths)
    grid = sorted(set(lengths.tolist()) | set(hist.support))
    return max(abs(float(np.mean(lengths <= g)) - hist.cdf(g)) for g in grid)


def random_walk(env: Environment, start: int, max_len: int, rng: np.random.Generator) -> list[int]:
    """Self-avoiding walk choosing uniformly among unvisited neighbours."""
    walk = [start]
    visited = {start}
    while len(walk) < max_len:
        options = [n for n in env.neighbors[walk[-1]] if n not in visited]
        if not options:
            break
        nxt = options[int(rng.integers(len(options)))]
        walk.append(nxt)
        visited.add(nxt)
    return walk


def sample_path(env: Environment, hist: LengthHistogram, rng_seed) -> Path:
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    target = hist.sample(rng)
    best: list[int] = []
    for _ in range(1 + WALK_RETRIES):
        walk = random_walk(env, int(rng.integers(env.n_nodes)), target, rng)
        if len(walk) == target:
            return Path.from_nodes(env, walk)
        if len(walk) > len(best):
            best = walk
    if len(best) < MIN_PATH_LEN:
        raise DataError(f"{env.id}: no walk of >= {MIN_PATH_LEN} nodes after {WALK_RETRIES} retries")
    return Path.from_nodes(env, best)


def n_masked(n: int, ratio: float) -> int:
    # round half up
    return max(0, min(int(math.floor(ratio * n + 0.5)), n - 2))


def mask_path(path: Path, mask_ratio: float, rng_seed) -> MaskedPath:
    if path.n < 2:
        raise DataError("cannot mask a path shorter than 2 nodes")
    if not 0.0 <= mask_ratio <= 1.0:
        raise DataError(f"mask_ratio must lie in [0, 1], got {mask_ratio}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    m = n_masked(path.n, mask_ratio)
    hidden = set(rng.choice(np.arange(1, path.n - 1), size=m, replace=False).tolist()) if m else set()
    positions = tuple(i for i in range(path.n) if i not in hidden)
    return MaskedPath(path.env_id, tuple(path.nodes[i] for i in positions), positions, mask_ratio, path)


def facing_heading(path: Path, index: int) -> float:
    """Outgoing heading at a path position; the last node keeps its incoming heading."""
    return path.headings[min(index, path.n - 2)]


def facing_view_sequence(env: Environment, masked: MaskedPath) -> list[tuple[np.ndarray, np.ndarray]]:
    if masked.env_id != env.id:
        raise DataError(f"masked path from {masked.env_id} used with {env.id}")
    out = []
    for node, pos in zip(masked.retained, masked.positions):
        k = nearest_bin(facing_heading(masked.source, pos))
        out.append((env.features[node, k], angle_quad(bin_heading(k), 0.0)))
    return out


def direction_token(delta: float) -> str:
    deg = round(math.degrees(delta), 9)  # keep exact bucket edges stable under radian round-off
    if abs(deg) < 30.0:
        return "FORWARD"
    if deg > 0:
        return "LEFT" if deg < 100.0 else "HARD_LEFT"
    return "RIGHT" if deg > -100.0 else "HARD_RIGHT"


def generate_instruction(env: Environment, path: Path, rng_seed=None) -> tuple[int, ...]:
    """Template instruction: a direction and a landmark per step.

    The template is deterministic; rng_seed is accepted so callers can treat
    every generator uniformly.
    """
    body = []
    prev = START_HEADING
    for j, h in enumerate(path.headings):
        body += [direction_token(wrap_angle(h - prev)), f"OBJ_{env.salient_object(path.nodes[j + 1])}"]
        prev = h
    body = body[: MAX_INSTR_LEN - 3]
    return tuple(VOCAB.encode(["[CLS]"] + body + ["[STOP]", "[SEP]"]))


def _env_rng(seed: int, *tags) -> np.random.Generator:
    return np.random.default_rng([int(seed)] + [stable_hash(str(t)) for t in tags])


def _vln_for_env(env, split, n, rng, lengths, exclude, long_paths):
    episodes = []
    seen = set(exclude)
    budget = 2000 * n
    while len(episodes) < n:
        budget -= 1
        if budget < 0:
            raise DataError(f"{env.id}: sampling budget exhausted for split {split}")
        a, b = (int(x) for x in rng.choice(env.n_nodes, size=2, replace=False))
        nodes = shortest_path(env, a, b)
        if long_paths:
            c = int(rng.integers(env.n_nodes))
            tail = shortest_path(env, b, c)
            nodes = nodes + tail[1:]
            if len(set(nodes)) != len(nodes):
                continue
        if len(nodes) not in lengths or (env.id, nodes[0], nodes[-1]) in seen:
            continue
        seen.add((env.id, nodes[0], nodes[-1]))
        path = Path.from_nodes(env, nodes)
        episodes.append(
            VLNEpisode(f"{split}:{env.id}:{len(episodes)}", env.id, generate_instruction(env, path), path, split)
        )
    return episodes


def make_vln_dataset(
    world_set: WorldSet,
    episodes_per_env: int,
    rng_seed: int,
    split: str = "train",
    lengths=range(MIN_PATH_LEN, 9),
    exclude=(),
    long_paths: bool = False,
) -> list[VLNEpisode]:
    """Shortest-path episodes between random node pairs with template instructions.

    With long_paths, two shortest paths are joined tail to head, which roughly
    doubles the reference length. `exclude` holds (env_id, start, goal) keys
    that must not be reused, e.g. the training pairs when building val_seen.
    """
    envs = world_set.envs(split)
    if not envs:
        raise DataError(f"split {split!r} has no environments")
    lengths = set(lengths.support if isinstance(lengths, LengthHistogram) else lengths)
    out = []
    for env in sorted(envs, key=lambda e: e.id):
        rng = _env_rng(rng_seed, "vln", split, env.id, int(long_paths))
        out += _vln_for_env(env, split, episodes_per_env, rng, lengths, exclude, long_paths)
    return out


def episode_keys(episodes) -> set:
    return {(ep.env_id, ep.path.nodes[0], ep.path.nodes[-1]) for ep in episodes}


def make_mpm_dataset(
    world_set: WorldSet,
    split: str,
    hist: LengthHistogram,
    n_paths: int,
    mask_ratio: float,
    rng_seed: int,
    preexplore: bool = False,
) -> list[MaskedPath]:
    if split != "train" and not preexplore:
        raise DataError(f"exploring {split!r} environments requires the pre-exploration flag")
    envs = sorted(world_set.envs(split), key=lambda e: e.id)
    if not envs:
        raise DataError(f"split {split!r} has no environments")
    out = []
    for i, env in enumerate(envs):
        share = n_paths // len(envs) + (1 if i < n_paths % len(envs) else 0)
        rng = _env_rng(rng_seed, "mpm", split, env.id)
        for _ in range(share):
            out.append(mask_path(sample_path(env, hist, rng), mask_ratio, rng))
    return out


def vln_row(ep: VLNEpisode) -> dict:
    return {"type": "vln", "env": ep.env_id, "instr": list(ep.instruction), "path": list(ep.path.nodes), "split": ep.split}


def mpm_row(mp: MaskedPath) -> dict:
    return {
        "type": "mpm",
        "env": mp.env_id,
        "path": list(mp.source.nodes),
        "retained": list(mp.positions),
        "ratio": mp.mask_ratio,
    }


def write_jsonl(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def save_episodes(path, items) -> None:
    write_jsonl(path, [vln_row(x) if isinstance(x, VLNEpisode) else mpm_row(x) for x in items])


def load_episodes(path, envs: dict[str, Environment]) -> list:
    out = []
    counters: dict[tuple[str, str], int] = {}
    for row in read_jsonl(path):
        env = envs.get(row["env"])
        if env is None:
            raise DataError(f"{path}: unknown environment {row['env']!r}")
        if row["type"] == "vln":
            key = (row["split"], row["env"])
            k = counters.get(key, 0)
            counters[key] = k + 1
            p = Path.from_nodes(env, row["path"])
            out.append(VLNEpisode(f"{row['split']}:{env.id}:{k}", env.id, tuple(row["instr"]), p, row["split"]))
        elif row["type"] == "mpm":
            p = Path.from_nodes(env, row["path"])
            pos = tuple(row["retained"])
            out.append(MaskedPath(env.id, tuple(p.nodes[i] for i in pos), pos, float(row["ratio"]), p))
        else:
            raise DataError(f"{path}: unknown row type {row['type']!r}")
    return out

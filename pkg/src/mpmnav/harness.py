"""Training orchestration: pretraining task mixtures, joint finetuning,
evaluation, checkpoint/resume, pre-exploration and the ablation sweeps."""

from __future__ import annotations

import json
import math
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import objectives as O
from .agent import TINY, AgentConfig, NavAgent
from .data import (
    LengthHistogram,
    MaskedPath,
    VLNEpisode,
    episode_keys,
    fit_length_histogram,
    load_episodes,
    make_vln_dataset,
    mask_path,
    sample_path,
    save_episodes,
)
from .metrics import COLUMNS, EvalRecord, aggregate, evaluate_episode, metrics_csv
from .neuralcore.params import adamw_step, grad_norm
from .neuralcore.tensor import backward
from .world import STOP, WorldSet, load_world_set, save_world_set, generate_world_set

TASKS = ("mlm", "itm", "sap", "sar", "sprel", "mpm")
DEFAULT_MIX = {"mlm": 1.0, "itm": 1.0, "sap": 1.0, "sar": 1.0, "sprel": 1.0, "mpm": 2.0}
DEFAULT_LR = {"pretrain": 1e-3, "finetune": 3e-4, "preexplore": 3e-4}
PREEXPLORE_MODES = ("mpm", "joint")
EVAL_CHUNK = 64


class HarnessError(ValueError):
    pass


class TrainingError(FloatingPointError):
    pass


AGENT_PRESETS = {"default": AgentConfig(), "tiny": TINY}


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    task_mix: dict = field(default_factory=lambda: dict(DEFAULT_MIX))
    mask_ratio: float = 0.25
    lr: float | None = None
    batch_size: int = 16
    max_steps: int = 2000
    eval_every: int = 500
    seed: int = 0
    world_set: str | None = None
    datasets: dict = field(default_factory=dict)
    preexplore: bool = False
    agent: str | dict = "default"
    mpm_weight: float = 1.0
    rl_weight: float = 1.0
    init_checkpoint: str | None = None
    eval_limit: int | None = None
    preexplore_steps: int = 0
    preexplore_mode: str = "mpm"

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune", "preexplore"):
            raise HarnessError(f"unknown stage {self.stage!r}")
        if not self.task_mix:
            raise HarnessError("task_mix is empty")
        for task, ratio in self.task_mix.items():
            if task not in TASKS:
                raise HarnessError(f"unknown task {task!r}")
            if not ratio > 0:
                raise HarnessError(f"task ratio for {task} must be positive")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise HarnessError(f"mask_ratio must lie in [0, 1], got {self.mask_ratio}")
        if self.batch_size < 1 or self.max_steps < 0 or self.eval_every < 1:
            raise HarnessError("batch_size and eval_every must be positive, max_steps non-negative")
        if self.mpm_weight < 0 or self.rl_weight < 0:
            raise HarnessError("loss weights must be non-negative")
        if self.preexplore_mode not in PREEXPLORE_MODES:
            raise HarnessError(f"preexplore_mode must be one of {PREEXPLORE_MODES}")
        self.agent_config()

    @property
    def learning_rate(self) -> float:
        return float(self.lr) if self.lr is not None else DEFAULT_LR[self.stage]

    def agent_config(self) -> AgentConfig:
        if isinstance(self.agent, str):
            if self.agent not in AGENT_PRESETS:
                raise HarnessError(f"unknown agent preset {self.agent!r}")
            return AGENT_PRESETS[self.agent]
        return AgentConfig.from_dict(self.agent)

    def normalized_mix(self) -> dict[str, float]:
        total = sum(self.task_mix.values())
        return {t: self.task_mix[t] / total for t in TASKS if t in self.task_mix}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise HarnessError(f"unknown config fields: {unknown}")
        return cls(**raw)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig.from_dict({**self.to_dict(), **kw})


@dataclass
class RunManifest:
    config: dict
    seeds: dict
    checkpoint: str | None = None
    history: list = field(default_factory=list)
    best_step: int | None = None
    losses: list = field(default_factory=list)
    env_access: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def record_eval(self, step: int, metrics: dict) -> bool:
        """Append an evaluation; True when it is the new best by val_unseen SR."""
        self.history.append({"step": step, **metrics})
        self.best_step = best_step(self.history)
        return self.best_step == step

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))


def best_step(history) -> int | None:
    """Step of the first maximum of val_unseen SR."""
    if not history:
        return None
    srs = [h["val_unseen"]["SR"] for h in history]
    return history[int(np.argmax(srs))]["step"]


# data bundle


class AuditedEnvs(Mapping):
    """Environment lookup that logs every accessed id and refuses ids
    outside its allowed set."""

    def __init__(self, envs: dict, allowed, log: set):
        self._envs = {k: envs[k] for k in allowed}
        self.log = log

    def __getitem__(self, key):
        if key not in self._envs:
            raise KeyError(key)
        self.log.add(key)
        return self._envs[key]

    def __iter__(self):
        return iter(self._envs)

    def __len__(self):
        return len(self._envs)


@dataclass
class DataBundle:
    world: WorldSet
    vln: dict  # split -> episodes
    hist: LengthHistogram
    long_vln: dict = field(default_factory=dict)
    long_hist: LengthHistogram | None = None

    @property
    def envs(self) -> dict:
        return self.world.by_id()

    def split_env_ids(self, split: str) -> list[str]:
        return [e.id for e in self.world.envs(split)]


def build_datasets(
    world: WorldSet, data_seed: int = 0, train_per_env: int = 200, val_per_env: int = 100, long_sets: bool = False
) -> DataBundle:
    train = make_vln_dataset(world, train_per_env, data_seed, "train")
    vln = {
        "train": train,
        "val_seen": make_vln_dataset(world, val_per_env, data_seed, "val_seen", exclude=episode_keys(train)),
        "val_unseen": make_vln_dataset(world, val_per_env, data_seed, "val_unseen"),
    }
    bundle = DataBundle(world, vln, fit_length_histogram(train))
    if long_sets:
        long_lengths = range(5, 17)
        long_train = make_vln_dataset(world, train_per_env, data_seed, "train", lengths=long_lengths, long_paths=True)
        bundle.long_vln = {
            "train": long_train,
            "val_unseen": make_vln_dataset(world, val_per_env, data_seed, "val_unseen", lengths=long_lengths, long_paths=True),
        }
        bundle.long_hist = fit_length_histogram(long_train)
    return bundle


def make_bundle(
    world_seed: int = 0,
    data_seed: int = 0,
    train_per_env: int = 200,
    val_per_env: int = 100,
    long_sets: bool = False,
    world_kwargs: dict | None = None,
) -> DataBundle:
    world = generate_world_set(world_seed, **(world_kwargs or {}))
    return build_datasets(world, data_seed, train_per_env, val_per_env, long_sets)


DATASET_FILES = {
    "vln_train": "vln_train.jsonl",
    "vln_val_seen": "vln_val_seen.jsonl",
    "vln_val_unseen": "vln_val_unseen.jsonl",
    "vln_train_long": "vln_train_long.jsonl",
    "vln_val_unseen_long": "vln_val_unseen_long.jsonl",
    "hist": "hist.json",
    "hist_long": "hist_long.json",
}


def save_bundle_data(bundle: DataBundle, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    for split in ("train", "val_seen", "val_unseen"):
        save_episodes(out / DATASET_FILES[f"vln_{split}"], bundle.vln[split])
        written[f"vln_{split}"] = str(out / DATASET_FILES[f"vln_{split}"])
    bundle.hist.save(out / DATASET_FILES["hist"])
    written["hist"] = str(out / DATASET_FILES["hist"])
    for split, eps in bundle.long_vln.items():
        key = f"vln_{split}_long"
        save_episodes(out / DATASET_FILES[key], eps)
        written[key] = str(out / DATASET_FILES[key])
    if bundle.long_hist is not None:
        bundle.long_hist.save(out / DATASET_FILES["hist_long"])
        written["hist_long"] = str(out / DATASET_FILES["hist_long"])
    return written


def load_bundle(world_dir, datasets: dict) -> DataBundle:
    if world_dir is None:
        raise HarnessError("config needs a world_set path")
    world = load_world_set(world_dir)
    envs = world.by_id()

    def need(key):
        if key not in datasets or not Path(datasets[key]).exists():
            raise HarnessError(f"missing dataset {key!r}")
        return datasets[key]

    vln = {s: load_episodes(need(f"vln_{s}"), envs) for s in ("train", "val_seen", "val_unseen")}
    bundle = DataBundle(world, vln, LengthHistogram.load(need("hist")))
    for split in ("train", "val_unseen"):
        key = f"vln_{split}_long"
        if key in datasets:
            bundle.long_vln[split] = load_episodes(datasets[key], envs)
    if "hist_long" in datasets:
        bundle.long_hist = LengthHistogram.load(datasets["hist_long"])
    return bundle


# batching


def step_rng(seed: int, step: int, tag: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(step), sum(map(ord, tag))])


def draw_task(mix: dict[str, float], rng: np.random.Generator) -> str:
    names = list(mix)
    return names[int(rng.choice(len(names), p=np.array([mix[n] for n in names])))]


def draw_tasks(mix: dict[str, float], n: int, seed: int) -> list[str]:
    return [draw_task(mix, step_rng(seed, i, "pretrain")) for i in range(n)]


def vln_batch(episodes, size: int, rng) -> list[VLNEpisode]:
    if not episodes:
        raise HarnessError("no VLN episodes to draw from")
    idx = rng.choice(len(episodes), size=min(size, len(episodes)), replace=False)
    return [episodes[i] for i in sorted(idx)]


def mpm_batch(envs: list, hist: LengthHistogram, size: int, ratio: float, rng) -> list[MaskedPath]:
    """Freshly sampled exploration paths, masked at the given ratio."""
    out = []
    for _ in range(size):
        env = envs[int(rng.integers(len(envs)))]
        out.append(mask_path(sample_path(env, hist, rng), ratio, rng))
    return out


# training primitives


def apply_update(agent: NavAgent, loss, lr: float, step: int, task: str) -> dict:
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(f"non-finite {task} loss ({value}) at step {step}")
    agent.store.zero_grad()
    backward(loss)
    grads = {n: p.grad for n, p in agent.store.params.items() if p.grad is not None}
    gn = grad_norm(grads)
    adamw_step(agent.store, grads, lr)
    return {"step": step, "task": task, "loss": value, "grad_norm": gn, "lr": lr}


def task_loss(task, agent, bundle, envs, train_envs, config, rng, hist=None):
    if task == "mpm":
        batch = mpm_batch(train_envs, hist or bundle.hist, config.batch_size, config.mask_ratio, rng)
        return O.loss_mpm(batch, agent, envs)
    batch = vln_batch(bundle.vln["train"], config.batch_size, rng)
    if task == "mlm":
        return O.loss_mlm(batch, agent, envs, rng)
    if task == "itm":
        return O.loss_itm(batch, agent, envs, rng)
    if task == "sap":
        return O.loss_sap(batch, agent, envs, rng)
    if task == "sar":
        return O.loss_sar(batch, agent, envs, rng)
    if task == "sprel":
        return O.loss_sprel(batch, agent, envs, rng)
    raise HarnessError(f"unknown task {task!r}")


def init_agent(config: TrainConfig, agent: NavAgent | None = None) -> NavAgent:
    if agent is not None:
        return agent
    if config.init_checkpoint:
        loaded = NavAgent.load(config.init_checkpoint, config.agent_config())
        loaded.store.m, loaded.store.v, loaded.store.step_count = {}, {}, 0
        return loaded
    return NavAgent(config.agent_config(), config.seed)


def _train_envs(bundle: DataBundle, log: set, split: str = "train"):
    ids = bundle.split_env_ids(split)
    audited = AuditedEnvs(bundle.envs, ids, log)
    return audited, [bundle.envs[i] for i in sorted(ids)]


def _new_manifest(config: TrainConfig) -> RunManifest:
    return RunManifest(config=config.to_dict(), seeds={"seed": config.seed, "init": config.seed})


def pretrain(
    config: TrainConfig,
    bundle: DataBundle,
    agent: NavAgent | None = None,
    out=None,
    start_step: int = 0,
    manifest: RunManifest | None = None,
    hist: LengthHistogram | None = None,
):
    """One task per mini-batch, drawn by the configured ratios."""
    agent = init_agent(config, agent)
    manifest = manifest or _new_manifest(config)
    log = set(manifest.env_access)
    envs, train_envs = _train_envs(bundle, log)
    mix = config.normalized_mix()
    rows = []
    for step in range(start_step, config.max_steps):
        rng = step_rng(config.seed, step, "pretrain")
        task = draw_task(mix, rng)
        agent.train(rng)
        loss = task_loss(task, agent, bundle, envs, train_envs, config, rng, hist)
        rows.append(apply_update(agent, loss, config.learning_rate, step, task))
    agent.eval()
    manifest.losses += [r["loss"] for r in rows]
    manifest.env_access = sorted(log)
    if out is not None:
        _persist(out, agent, manifest, rows, config, best=None)
    return manifest, agent


def oracle_policy(episode: VLNEpisode, visited) -> int:
    nodes = episode.path.nodes
    return nodes[len(visited)] if len(visited) < len(nodes) else STOP


def rollout_records(agent, episodes, envs, policy=None) -> list[EvalRecord]:
    records = []
    for i in range(0, len(episodes), EVAL_CHUNK):
        chunk = episodes[i : i + EVAL_CHUNK]
        rolls = O.rollout_batch(chunk, agent, envs, "greedy", policy=policy)
        for ep, roll in zip(chunk, rolls):
            records.append(evaluate_episode(envs[ep.env_id], ep.id, roll.nodes, ep.path.nodes))
    return records


def evaluate_split(agent, bundle: DataBundle, split: str, limit=None, policy=None, long: bool = False):
    episodes = (bundle.long_vln if long else bundle.vln)[split]
    if limit is not None:
        episodes = episodes[:limit]
    records = rollout_records(agent, episodes, bundle.envs, policy)
    return records, aggregate(records)


def _summary(metrics: dict) -> dict:
    return {k: metrics[k] for k in COLUMNS}


def finetune(
    config: TrainConfig,
    bundle: DataBundle,
    agent: NavAgent | None = None,
    out=None,
    start_step: int = 0,
    manifest: RunManifest | None = None,
    hist: LengthHistogram | None = None,
):
    """Joint IL + A2C + MPM finetuning with periodic val evaluation.

    Returns the manifest, the final agent and the best-by-val-unseen agent.
    """
    agent = init_agent(config, agent)
    manifest = manifest or _new_manifest(config)
    log = set(manifest.env_access)
    envs, train_envs = _train_envs(bundle, log)
    lr = config.learning_rate
    rows = []
    best_state = None
    task = "vln+mpm" if config.mpm_weight > 0 else "vln"
    for step in range(start_step, config.max_steps):
        rng = step_rng(config.seed, step, "finetune")
        batch = vln_batch(bundle.vln["train"], config.batch_size, rng)
        agent.train(rng)
        l_il = O.loss_vln_il(batch, agent, envs)
        rolls = O.rollout_batch(batch, agent, envs, "sample", rng)
        l_rl = O.loss_vln_rl(rolls, batch, agent, envs).combined
        if config.mpm_weight > 0:
            l_mpm = O.loss_mpm(
                mpm_batch(train_envs, hist or bundle.hist, config.batch_size, config.mask_ratio, rng), agent, envs
            )
        else:
            l_mpm = 0.0
        total = O.combine_finetune(l_il, l_rl, l_mpm, config.rl_weight, config.mpm_weight)
        rows.append(apply_update(agent, total, lr, step, task))
        done = step + 1
        if done % config.eval_every == 0 or done == config.max_steps:
            agent.eval()
            metrics = {s: _summary(evaluate_split(agent, bundle, s, config.eval_limit)[1]) for s in ("val_seen", "val_unseen")}
            if manifest.record_eval(done, metrics):
                best_state = {n: p.data.copy() for n, p in agent.store.params.items()}
    agent.eval()
    manifest.losses += [r["loss"] for r in rows]
    manifest.env_access = sorted(log)
    best = agent
    if best_state is not None:
        best = NavAgent(agent.config)
        best.store.load_arrays(best_state)
    if out is not None:
        _persist(out, agent, manifest, rows, config, best=best if best_state is not None else None)
    return manifest, agent, best


def preexplore(agent: NavAgent, bundle: DataBundle, config: TrainConfig, steps: int | None = None, hist=None):
    """MPM training on paths sampled in the val_unseen environments,
    followed by re-evaluation there. Requires the explicit opt-in flag.

    Mode "mpm" trains on those paths alone. Mode "joint" keeps the
    finetuning objective: IL + A2C on training episodes plus MPM, with the
    MPM paths drawn from the unseen environments instead.
    """
    if not config.preexplore:
        raise HarnessError("exploring unseen environments requires preexplore=true")
    steps = config.preexplore_steps if steps is None else steps
    joint = config.preexplore_mode == "joint"
    manifest = _new_manifest(config)
    before = evaluate_split(agent, bundle, "val_unseen", config.eval_limit)[1]
    log: set = set()
    allowed = bundle.split_env_ids("val_unseen") + (bundle.split_env_ids("train") if joint else [])
    envs = AuditedEnvs(bundle.envs, allowed, log)
    unseen = bundle.world.envs("val_unseen")
    lr = config.learning_rate
    for step in range(steps):
        rng = step_rng(config.seed, step, "preexplore")
        agent.train(rng)
        if joint:
            batch = vln_batch(bundle.vln["train"], config.batch_size, rng)
            l_il = O.loss_vln_il(batch, agent, envs)
            l_rl = O.loss_vln_rl(O.rollout_batch(batch, agent, envs, "sample", rng), batch, agent, envs).combined
        paths = mpm_batch(unseen, hist or bundle.hist, config.batch_size, config.mask_ratio, rng)
        l_mpm = O.loss_mpm(paths, agent, envs)
        if joint:
            loss = O.combine_finetune(l_il, l_rl, l_mpm, config.rl_weight, config.mpm_weight)
        else:
            loss = l_mpm
        row = apply_update(agent, loss, lr, step, "vln+mpm" if joint else "mpm")
        manifest.losses.append(row["loss"])
    agent.eval()
    after = evaluate_split(agent, bundle, "val_unseen", config.eval_limit)[1]
    manifest.env_access = sorted(log)
    manifest.extra = {"steps": steps, "before": _summary(before), "after": _summary(after)}
    return manifest, agent


# persistence and resume


def _persist(out, agent, manifest, rows, config, best):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    agent.save(out / "last", with_optimizer=True)
    if best is not None:
        best.save(out / "best", with_optimizer=False)
    has_best = (out / "best" / "model.mpmn").exists()
    manifest.checkpoint = str(out / ("best" if has_best else "last"))
    log_path = out / "train_log.jsonl"
    existing = log_path.read_text() if log_path.exists() and rows and rows[0]["step"] > 0 else ""
    with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(existing)
        for r in rows:
            fh.write(json.dumps(r, separators=(",", ":")) + "\n")
    (out / "train_config.json").write_text(json.dumps(config.to_dict(), sort_keys=True, indent=1))
    (out / "manifest.json").write_text(manifest.to_json())


def save_run(out, agent: NavAgent, manifest: RunManifest, config: TrainConfig) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    agent.save(out / "last", with_optimizer=True)
    (out / "train_config.json").write_text(json.dumps(config.to_dict(), sort_keys=True, indent=1))
    (out / "manifest.json").write_text(manifest.to_json())


def resume_run(out, bundle: DataBundle, max_steps: int | None = None):
    """Continue a saved run from its last checkpoint, optimizer state included."""
    out = Path(out)
    config = TrainConfig.load(out / "train_config.json")
    if max_steps is not None:
        config = config.replace(max_steps=max_steps)
    manifest = RunManifest.from_json((out / "manifest.json").read_text())
    agent = NavAgent.load(out / "last", config.agent_config())
    start = agent.store.step_count
    if config.stage == "pretrain":
        return pretrain(config, bundle, agent, out, start, manifest)
    return finetune(config, bundle, agent, out, start, manifest)


def evaluate_checkpoint(checkpoint, bundle: DataBundle, split: str, out=None, expected: AgentConfig | None = None):
    agent = NavAgent.load(checkpoint, expected)
    agent.eval()
    records, summary = evaluate_split(agent, bundle, split)
    csv = metrics_csv(split, records)
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        with open(Path(out) / f"metrics_{split}.csv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write(csv)
    return csv, summary


# experiments


def pt_ft(config: TrainConfig, bundle: DataBundle, pt_steps: int, ft_steps: int, use_mpm: bool, hist=None):
    """Pretrain then finetune one seed; MPM enters both stages or neither."""
    mix = dict(config.task_mix)
    if not use_mpm:
        mix.pop("mpm", None)
    pt_cfg = config.replace(stage="pretrain", task_mix=mix, max_steps=pt_steps, lr=None)
    _, agent = pretrain(pt_cfg, bundle, hist=hist)
    ft_cfg = config.replace(
        stage="finetune",
        task_mix=mix,
        max_steps=ft_steps,
        mpm_weight=config.mpm_weight if use_mpm else 0.0,
        lr=None,
    )
    manifest, last, best = finetune(ft_cfg, bundle, agent, hist=hist)
    return manifest, best


def mean_sd(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def ablate_mask_ratio(config: TrainConfig, bundle: DataBundle, pt_steps: int, ft_steps: int,
                      ratios=(0.0, 0.25, 0.5, 0.75, 1.0), seeds=(0, 1, 2)) -> list[dict]:
    table = []
    for ratio in ratios:
        srs = []
        for seed in seeds:
            cfg = config.replace(mask_ratio=float(ratio), seed=int(seed))
            manifest, _ = pt_ft(cfg, bundle, pt_steps, ft_steps, use_mpm=True)
            best = next(h for h in manifest.history if h["step"] == manifest.best_step)
            srs.append(best["val_unseen"]["SR"])
        mean, sd = mean_sd(srs)
        table.append({"ratio": ratio, "seeds": list(seeds), "sr": srs, "sr_mean": mean, "sr_sd": sd})
    return table


def ratio_ordering(table) -> list[float]:
    """Ratios sorted by mean val_unseen SR, best first (ties keep input order)."""
    return [row["ratio"] for row in sorted(table, key=lambda r: -r["sr_mean"])]


def mask_ratio_csv(table) -> str:
    lines = ["ratio,sr_mean,sr_sd," + ",".join(f"sr_seed{s}" for s in table[0]["seeds"])]
    for row in table:
        vals = ",".join(f"{v:.6f}" for v in row["sr"])
        lines.append(f"{row['ratio']:g},{row['sr_mean']:.6f},{row['sr_sd']:.6f},{vals}")
    return "\n".join(lines) + "\n"


def mask_ratio_svg(table, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "mpmnav"
    x = [r["ratio"] for r in table]
    y = [100 * r["sr_mean"] for r in table]
    err = [100 * r["sr_sd"] for r in table]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(x, y, yerr=err, marker="o", capsize=3)
    ax.set_xlabel("mask ratio")
    ax.set_ylabel("val_unseen SR (%)")
    ax.set_xticks(x)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def ablate_path_design(config: TrainConfig, bundle: DataBundle, pt_steps: int, ft_steps: int, seeds=(0,)) -> list[dict]:
    """Finetune with MPM paths from the short or the long length histogram,
    then evaluate on short and long val_unseen sets (2 x 2 cells)."""
    if bundle.long_hist is None or "val_unseen" not in bundle.long_vln:
        raise HarnessError("path-design ablation needs the long-path datasets")
    hists = {"short": bundle.hist, "long": bundle.long_hist}
    table = []
    for hname, hist in hists.items():
        scores = {"short": [], "long": []}
        for seed in seeds:
            cfg = config.replace(seed=int(seed))
            _, agent = pt_ft(cfg, bundle, pt_steps, ft_steps, use_mpm=True, hist=hist)
            for eval_set in scores:
                _, m = evaluate_split(agent, bundle, "val_unseen", config.eval_limit, long=eval_set == "long")
                scores[eval_set].append(m["SR"])
        for eval_set, srs in scores.items():
            table.append({"mpm_paths": hname, "eval_set": eval_set, "seeds": list(seeds), "sr": srs, "sr_mean": mean_sd(srs)[0]})
    return table


def path_design_csv(table) -> str:
    lines = ["mpm_paths,eval_set,sr_mean,seeds"]
    for row in table:
        lines.append(f"{row['mpm_paths']},{row['eval_set']},{row['sr_mean']:.6f},{' '.join(map(str, row['seeds']))}")
    return "\n".join(lines) + "\n"


def build_report(inputs, out) -> tuple[str, list]:
    """Collect sweep tables, run manifests and gradient audits found in the
    input directories into report.md (plus the mask-ratio plot)."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# Run report", ""]
    ordering: list = []
    for d in inputs:
        d = Path(d)
        sweep = d / "mask_ratio.json"
        if sweep.exists():
            table = json.loads(sweep.read_text())
            ordering = ratio_ordering(table)
            lines += ["## Mask-ratio sweep", "", "| ratio | SR mean | SR sd |", "|---|---|---|"]
            lines += [f"| {r['ratio']:g} | {100 * r['sr_mean']:.2f} | {100 * r['sr_sd']:.2f} |" for r in table]
            lines += ["", "Observed ordering (best first): " + ", ".join(f"{r:g}" for r in ordering), ""]
            mask_ratio_svg(table, out / "mask_ratio.svg")
        design = d / "path_design.json"
        if design.exists():
            lines += ["## Path design", "", "| MPM paths | eval set | SR mean |", "|---|---|---|"]
            lines += [f"| {r['mpm_paths']} | {r['eval_set']} | {100 * r['sr_mean']:.2f} |" for r in json.loads(design.read_text())]
            lines.append("")
        manifest = d / "manifest.json"
        if manifest.exists():
            m = json.loads(manifest.read_text())
            lines += [f"## Run {d.name}", "", f"- stage: {m['config']['stage']}", f"- best step: {m['best_step']}"]
            if m.get("extra", {}).get("after"):
                lines.append(f"- val_unseen SR before/after pre-exploration: {m['extra']['before']['SR']:.4f} / {m['extra']['after']['SR']:.4f}")
            lines.append("")
        grad = d / "gradcheck.json"
        if grad.exists():
            g = json.loads(grad.read_text())
            lines += ["## Gradient check", "", f"- max relative error: {g['max_rel_error']:.3e} (passed: {g['passed']})", ""]
    text = "\n".join(lines).rstrip() + "\n"
    (out / "report.md").write_text(text)
    return text, ordering


def write_world_and_data(bundle: DataBundle, out) -> dict:
    out = Path(out)
    save_world_set(bundle.world, out / "world")
    return {"world_set": str(out / "world"), "datasets": save_bundle_data(bundle, out / "data")}



# gradient audit


GRADCHECK_TOLERANCE = 1e-4


def _block_cases(rng):
    from .neuralcore import nn
    from .neuralcore import tensor as T

    def arr(*shape):
        return rng.standard_normal(shape)

    mask2 = np.array([[True, True, False, True, True], [True, False, True, True, True]])
    attn_mask = np.ones((2, 3, 4), dtype=bool)
    attn_mask[0, :, 3] = False
    enc = {}
    d, hidden = 4, 8
    for part in ("q", "k", "v", "o"):
        enc[f"l.attn.{part}.W"] = arr(d, d) / 2
        enc[f"l.attn.{part}.b"] = arr(d) / 10
    enc["l.attn.ln.g"] = 1 + arr(d) / 10
    enc["l.attn.ln.b"] = arr(d) / 10
    enc["l.ffn.fc1.W"], enc["l.ffn.fc1.b"] = arr(d, hidden) / 2, arr(hidden) / 10
    enc["l.ffn.fc2.W"], enc["l.ffn.fc2.b"] = arr(hidden, d) / 2, arr(d) / 10
    enc["l.ffn.ln.g"], enc["l.ffn.ln.b"] = 1 + arr(d) / 10, arr(d) / 10
    enc_mask = np.ones((2, 1, 3), dtype=bool)
    enc_mask[1, 0, 2] = False

    def encoder(x, **params):
        return nn.encoder_layer(params, "l", x, enc_mask, 2)

    targets = np.array([0, 3, 1, 4])
    cmask = np.ones((4, 5), dtype=bool)
    cmask[0, 4] = False
    return {
        "linear": (lambda x, W, b: nn.linear(x, W, b), {"x": arr(3, 4), "W": arr(4, 5), "b": arr(5)}),
        "layer_norm": (lambda x, g, b: nn.layer_norm(x, g, b), {"x": arr(3, 6), "g": arr(6), "b": arr(6)}),
        "softmax": (lambda x: nn.softmax(x, -1, mask2), {"x": arr(2, 5)}),
        "log_softmax": (lambda x: T.getitem(T.log_softmax(x, -1, mask2), np.nonzero(mask2)), {"x": arr(2, 5)}),
        "gelu": (lambda x: T.gelu(x), {"x": arr(3, 5)}),
        "feed_forward": (
            lambda x, W1, b1, W2, b2: nn.feed_forward(x, W1, b1, W2, b2),
            {"x": arr(2, 3, 4), "W1": arr(4, 8), "b1": arr(8), "W2": arr(8, 4), "b2": arr(4)},
        ),
        "multi_head_attention": (
            lambda q, k, v: nn.multi_head_attention(q, k, v, 2, attn_mask),
            {"q": arr(2, 3, 4), "k": arr(2, 4, 4), "v": arr(2, 4, 4)},
        ),
        "encoder_layer": (encoder, {"x": arr(2, 3, 4), **enc}),
        "cross_entropy": (lambda z: nn.cross_entropy(z, targets, cmask), {"z": arr(4, 5)}),
        "bce_with_logits": (lambda z: nn.binary_cross_entropy_with_logits(z, np.array([1, 0, 1, 1, 0, 0.0])), {"z": arr(6)}),
    }


MICRO_AGENT = AgentConfig(
    d_model=8, n_heads=2, text_layers=1, pano_layers=1, temporal_layers=1, crossmodal_layers=1, dropout=0.0
)
AGENT_CHECK_PARAMS = ("stream_emb", "xm.null", "cand.stop", "cand.type", "hist.cls", "pool.b", "path.proj.b", "head.value.b")


def _agent_cases():
    from .data import mask_path, Path as DataPath
    from .neuralcore import tensor as T
    from .world import generate_environment, shortest_path

    env = generate_environment(7, 12, 2.5, env_id="gc")
    nodes = shortest_path(env, 0, max(range(env.n_nodes), key=lambda n: env.distances_from(0)[n]))[:4]
    agent = NavAgent(MICRO_AGENT, 3)
    instr = [2, 5, 10, 6, 11, 4, 3]
    masked = mask_path(DataPath.from_nodes(env, nodes), 0.25, 0)
    envs = {env.id: env}

    def run(kind):
        def block(**params):
            saved = dict(agent.store.params)
            agent.store.params.update(params)
            try:
                cond = agent.encode_instruction(instr) if kind == "text" else agent.encode_masked_paths(envs, [masked])
                out = agent.forward(cond, [(env, nodes)])
                return T.concat([T.reshape(out.action_logits, (-1,)), out.value_estimate], axis=0)
            finally:
                agent.store.params = saved

        return block

    inputs = {n: agent.store.params[n].data.copy() for n in AGENT_CHECK_PARAMS}
    text_inputs = {k: v for k, v in inputs.items() if k != "path.proj.b"}
    return {"agent_text": (run("text"), text_inputs), "agent_path": (run("path"), inputs)}


def gradcheck_all(seed: int = 0) -> dict:
    """Finite-difference check of every building block; errors are maximum
    relative errors per block."""
    from .neuralcore.gradcheck import gradient_check

    cases = {**_block_cases(np.random.default_rng(seed)), **_agent_cases()}
    errors = {name: gradient_check(fn, inputs, eps=1e-5, seed=seed) for name, (fn, inputs) in cases.items()}
    worst = max(errors.values())
    return {"errors": errors, "max_rel_error": worst, "tolerance": GRADCHECK_TOLERANCE, "passed": worst <= GRADCHECK_TOLERANCE}

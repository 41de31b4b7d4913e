"""End-to-end acceptance suite. Each test reports one PASS/FAIL line, collected
into the terminal summary. The training criteria are marked slow."""

import itertools
import math
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import line_env, record_criterion, star_env
from mpmnav import harness as H
from mpmnav import metrics as M
from mpmnav import objectives as O
from mpmnav.data import LengthHistogram, Path, ks_distance, mask_path, random_walk, sample_path
from mpmnav.world import generate_environment

SEEDS = (0, 1, 2, 3, 4)
PT_STEPS, FT_STEPS = 500, 600
PREEXPLORE_STEPS = 300


def cpu_minutes(start):
    return (time.process_time() - start) / 60.0


# criterion 1


def test_c01_gradient_correctness():
    t0 = time.process_time()
    report = H.gradcheck_all(0)
    minutes = cpu_minutes(t0)
    ok = report["passed"] and report["max_rel_error"] <= 1e-4 and minutes < 1.0
    worst = max(report["errors"], key=report["errors"].get)
    record_criterion(1, ok, f"max rel error {report['max_rel_error']:.2e} ({worst}) over {len(report['errors'])} blocks, {minutes * 60:.1f}s CPU")
    assert ok


# criterion 2


def brute_dtw(cost):
    n, m = cost.shape
    best = math.inf

    def walk(i, j, acc):
        nonlocal best
        if i == n - 1 and j == m - 1:
            best = min(best, acc)
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            a, b = i + di, j + dj
            if a < n and b < m:
                walk(a, b, acc + cost[a, b])

    walk(0, 0, 0.0 + cost[0, 0])
    return best


def random_walk_path(env, rng, length):
    start = int(rng.integers(env.n_nodes))
    path = [start]
    for _ in range(length - 1):
        path.append(int(rng.choice(env.neighbors[path[-1]])))
    return path


def test_c02_dtw_oracle_equivalence():
    t0 = time.process_time()
    rng = np.random.default_rng(2)
    mismatches = 0
    pairs = 0
    for k in range(40):
        env = generate_environment(1000 + k, int(rng.integers(6, 25)), float(rng.uniform(1.5, 3.5)))
        for _ in range(6):
            p = random_walk_path(env, rng, int(rng.integers(1, 7)))
            r = random_walk_path(env, rng, int(rng.integers(1, 7)))
            cost = M._dist_matrix(env, p, r)
            mismatches += M.dtw(env, p, r) != brute_dtw(cost)
            pairs += 1
    # every shape in [1, 6] x [1, 6] with random costs
    for n, m in itertools.product(range(1, 7), repeat=2):
        cost = rng.uniform(0, 5, size=(n, m))
        mismatches += M.dtw_from_costs(cost) != brute_dtw(cost)
        pairs += 1
    env = line_env(4)
    d = M.dtw(env, [0, 2], [0, 1, 2])
    nd = M.ndtw(env, [0, 2], [0, 1, 2])
    example_ok = abs(d - 1.0) <= 1e-12 and abs(nd - math.exp(-1 / 9)) <= 1e-12
    minutes = cpu_minutes(t0)
    ok = mismatches == 0 and pairs >= 200 and example_ok and minutes < 1.0
    record_criterion(2, ok, f"{pairs} pairs, {mismatches} mismatches, worked example dtw={d} nDTW={nd:.12f}, {minutes * 60:.1f}s CPU")
    assert ok


# criterion 3


def test_c03_metric_invariants():
    rng = np.random.default_rng(3)
    envs = [generate_environment(s, 30, 2.5) for s in range(5)]
    violations = []
    for i in range(10_000):
        env = envs[i % len(envs)]
        p = random_walk_path(env, rng, int(rng.integers(1, 10)))
        r = random_walk_path(env, rng, int(rng.integers(2, 10)))
        rec = M.evaluate_episode(env, str(i), p, r)
        if not (rec.SPL <= rec.SR and rec.sDTW == rec.SR * rec.nDTW and 0 <= rec.CLS <= 1 and 0 <= rec.nDTW <= 1):
            violations.append(i)
        if i % 10 == 0:
            same = M.evaluate_episode(env, "id", r, r)
            if not (same.CLS == 1.0 and same.nDTW == 1.0):
                violations.append(("identical", i))
    record_criterion(3, not violations, f"10000 random pairs, {len(violations)} violations")
    assert not violations


# criterion 4


def test_c04_sampler_fidelity():
    env = generate_environment(4, 60, 2.5)
    hist = LengthHistogram({4: 30, 5: 25, 6: 20, 7: 15, 8: 10})
    rng = np.random.default_rng(4)
    paths = [sample_path(env, hist, rng) for _ in range(10_000)]
    revisits = sum(len(set(p.nodes)) != p.n for p in paths)
    ks = ks_distance([p.n for p in paths], hist)
    from scipy.stats import chisquare

    star = star_env(5)
    counts = np.bincount([random_walk(star, 0, 2, rng)[1] for _ in range(10_000)], minlength=6)[1:]
    p_value = chisquare(counts).pvalue
    ok = revisits == 0 and ks <= 0.05 and p_value > 0.01
    record_criterion(4, ok, f"revisits={revisits}, KS={ks:.4f}, star chi-square p={p_value:.3f}")
    assert ok


# criterion 5


def test_c05_masking_contract():
    failures = []
    cases = 0
    for n in range(3, 17):
        env = line_env(n, 2.0)
        path = Path.from_nodes(env, range(n))
        for ratio in (0.0, 0.25, 0.5, 0.75, 1.0):
            expected = min(round_half_up(ratio * n), n - 2)
            seen = set()
            for seed in range(60):
                m = mask_path(path, ratio, seed)
                cases += 1
                hidden = tuple(sorted(set(range(n)) - set(m.positions)))
                seen.add(hidden)
                if (
                    m.n_masked != expected
                    or m.positions[0] != 0
                    or m.positions[-1] != n - 1
                    or list(m.positions) != sorted(set(m.positions))
                    or m.retained != tuple(path.nodes[i] for i in m.positions)
                ):
                    failures.append((n, ratio, seed))
            if math.comb(n - 2, expected) <= 6 and len(seen) != math.comb(n - 2, expected):
                failures.append((n, ratio, "support"))
    record_criterion(5, not failures, f"{cases} masks over n in [3, 16] x 5 ratios, {len(failures)} failures")
    assert not failures


def round_half_up(x):
    return int(math.floor(x + 0.5))


# criterion 6


@pytest.mark.slow
def test_c06_mpm_learnability():
    t0 = time.process_time()
    bundle = H.make_bundle(0, 0, 200, 100)
    cfg = H.TrainConfig(stage="pretrain", task_mix={"mpm": 1.0}, agent="tiny", max_steps=2000, seed=0)
    _, agent = H.pretrain(cfg, bundle)
    envs = bundle.envs
    rng = np.random.default_rng(6)
    batch = H.mpm_batch(bundle.world.envs("train"), bundle.hist, 512, 0.25, rng)
    acc = np.mean([O.mpm_accuracy(batch[i : i + 64], agent, envs) for i in range(0, len(batch), 64)])
    minutes = cpu_minutes(t0)
    ok = acc >= 0.90 and minutes < 15
    record_criterion(6, ok, f"teacher-forced MPM accuracy {acc:.3f} (target 0.90) after 2000 steps, {minutes:.1f} CPU-min")
    assert ok


# criteria 7 and 8 share the trained models


@pytest.fixture(scope="module")
def comparison_runs():
    t0 = time.process_time()
    bundle = H.make_bundle(0, 0, 200, 100)
    base = H.TrainConfig(agent="tiny", eval_every=200, batch_size=16)
    runs = {}
    for seed in SEEDS:
        cfg = base.replace(seed=seed)
        m_mpm, best_mpm = H.pt_ft(cfg, bundle, PT_STEPS, FT_STEPS, use_mpm=True)
        m_base, _ = H.pt_ft(cfg, bundle, PT_STEPS, FT_STEPS, use_mpm=False)
        runs[seed] = {"mpm": m_mpm, "base": m_base, "agent": best_mpm}
    return bundle, base, runs, cpu_minutes(t0)


def best_unseen_sr(manifest):
    return next(h["val_unseen"]["SR"] for h in manifest.history if h["step"] == manifest.best_step)


@pytest.mark.slow
def test_c07_mpm_beats_baseline(comparison_runs):
    _, _, runs, minutes = comparison_runs
    mpm = np.array([best_unseen_sr(runs[s]["mpm"]) for s in SEEDS])
    base = np.array([best_unseen_sr(runs[s]["base"]) for s in SEEDS])
    wins = int(np.sum(mpm > base))
    ok = mpm.mean() >= base.mean() and wins >= 4 and minutes < 120
    detail = ", ".join(f"s{s}: {a:.3f} vs {b:.3f}" for s, a, b in zip(SEEDS, mpm, base))
    record_criterion(7, ok, f"val_unseen SR with MPM {mpm.mean():.3f} vs baseline {base.mean():.3f}, wins {wins}/5 ({detail}), {minutes:.0f} CPU-min")
    assert ok


@pytest.mark.slow
def test_c08_preexplore_improves(comparison_runs):
    bundle, base, runs, _ = comparison_runs
    before, after = [], []
    for seed in SEEDS:
        cfg = base.replace(seed=seed, stage="preexplore", preexplore=True)
        manifest, _ = H.preexplore(runs[seed]["agent"], bundle, cfg, PREEXPLORE_STEPS)
        assert manifest.extra["before"]["SR"] == best_unseen_sr(runs[seed]["mpm"])
        before.append(manifest.extra["before"]["SR"])
        after.append(manifest.extra["after"]["SR"])
    wins = int(np.sum(np.array(after) > np.array(before)))
    detail = ", ".join(f"s{s}: {a:.3f} vs {b:.3f}" for s, a, b in zip(SEEDS, after, before))
    record_criterion(8, wins >= 4, f"pre-explored val_unseen SR beats the MPM model in {wins}/5 seeds ({detail})")
    assert wins >= 4


# criterion 9


@pytest.mark.slow
def test_c09_mask_ratio_sweep(tmp_path):
    bundle = H.make_bundle(0, 0, 60, 20)
    cfg = H.TrainConfig(agent="tiny", eval_every=1000, batch_size=8, eval_limit=20)
    outputs = []
    for run in ("a", "b"):
        table = H.ablate_mask_ratio(cfg, bundle, 10, 10, (0.0, 0.25, 0.5, 0.75, 1.0), (0, 1, 2))
        out = tmp_path / run
        out.mkdir()
        (out / "mask_ratio_table.csv").write_text(H.mask_ratio_csv(table))
        H.mask_ratio_svg(table, out / "mask_ratio.svg")
        import json

        (out / "mask_ratio.json").write_text(json.dumps(table, sort_keys=True))
        text, ordering = H.build_report([out], out)
        outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    same = outputs[0] == outputs[1]
    shape_ok = len(table) == 5 and [row["ratio"] for row in table] == [0.0, 0.25, 0.5, 0.75, 1.0]
    ok = same and shape_ok and "ordering" in text.lower()
    record_criterion(9, ok, f"5-row sweep table, reruns byte-identical={same}, observed ordering {ordering}")
    assert ok


# criterion 10


def run_cli(*args):
    proc = subprocess.run([sys.executable, "-m", "mpmnav.cli", *map(str, args)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    return proc.stdout.strip().splitlines()[-1]


@pytest.mark.slow
def test_c10_cli_reproducibility(tmp_path):
    import json

    def pipeline(root):
        world = root / "world"
        data = root / "data"
        run_cli("gen-world", "--seed", 5, "--out", world, "--config", write(root / "w.json", {"n_train": 2, "n_val_seen": 1, "n_val_unseen": 1, "n_nodes": 20}))
        run_cli("make-data", "--seed", 5, "--out", data, "--config", write(root / "d.json", {"world_set": str(world), "train_per_env": 20, "val_per_env": 8, "mpm_paths": 30}))
        datasets = {k: str(data / v) for k, v in H.DATASET_FILES.items() if (data / v).exists()}
        common = {"world_set": str(world), "datasets": datasets, "agent": "tiny", "batch_size": 4}
        run_cli("pretrain", "--seed", 5, "--out", root / "pt", "--config", write(root / "p.json", {**common, "max_steps": 4}))
        ft = {**common, "max_steps": 3, "eval_every": 3, "init_checkpoint": str(root / "pt" / "last")}
        run_cli("finetune", "--seed", 5, "--out", root / "ft", "--config", write(root / "f.json", ft))
        ev = {**common, "checkpoint": str(root / "ft" / "best"), "split": "val_unseen"}
        run_cli("evaluate", "--seed", 5, "--out", root / "ev", "--config", write(root / "e.json", ev))
        files = [p for p in sorted(root.rglob("*")) if p.is_file() and p.suffix in (".jsonl", ".csv", ".mpmn", ".json")]
        # configs and manifests embed their own directory; normalise it away
        return {str(p.relative_to(root)): p.read_bytes().replace(str(root).encode(), b"<root>") for p in files if p.parent != root}

    def write(path, obj):
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(obj))
        return path

    a = pipeline(tmp_path / "a")
    b = pipeline(tmp_path / "b")
    differing = sorted(k for k in a if a[k] != b.get(k)) + sorted(set(b) - set(a))
    kinds = {k.rsplit(".", 1)[1] for k in a}
    ok = not differing and {"jsonl", "csv", "mpmn", "json"} <= kinds
    record_criterion(10, ok, f"{len(a)} output files compared across two CLI pipelines, differing files: {differing}")
    assert ok


# criterion 11


def test_c11_oracle_ceiling():
    bundle = H.make_bundle(0, 0, 30, 20, long_sets=True)
    agent = H.init_agent(H.TrainConfig(agent="tiny"))
    rows = []
    for split, long in [("train", False), ("val_seen", False), ("val_unseen", False), ("train", True), ("val_unseen", True)]:
        _, summary = H.evaluate_split(agent, bundle, split, policy=H.oracle_policy, long=long)
        rows.append((split + ("_long" if long else ""), summary["SR"], summary["SPL"], summary["nDTW"]))
    # joined long references are not shortest paths, so SPL < 1 is expected there
    ok = all(sr == 1.0 and nd == 1.0 and (spl == 1.0 or name.endswith("_long")) for name, sr, spl, nd in rows)
    record_criterion(11, ok, "; ".join(f"{s}: SR {a:.3f} SPL {b:.3f} nDTW {c:.3f}" for s, a, b, c in rows))
    assert ok

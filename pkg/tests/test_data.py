import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from conftest import make_env, star_env
from mpmnav.data import (
    VOCAB,
    DataError,
    LengthHistogram,
    Path,
    VLNEpisode,
    facing_view_sequence,
    fit_length_histogram,
    generate_instruction,
    ks_distance,
    load_episodes,
    make_mpm_dataset,
    make_vln_dataset,
    mask_path,
    n_masked,
    random_walk,
    sample_path,
    save_episodes,
)
from mpmnav.world import ObjectPlacement, angle_quad, bin_heading, generate_environment, nearest_bin


def episode(env, nodes, split="train"):
    return VLNEpisode("e", env.id, (), Path.from_nodes(env, nodes), split)


@pytest.fixture(scope="module")
def env60():
    return generate_environment(11, 60, 2.5)


def straight_path(n):
    env = make_env([(2.0 * i, 0, 0) for i in range(n)], [(i, i + 1) for i in range(n - 1)])
    return env, Path.from_nodes(env, range(n))


def test_vocabulary_is_fixed():
    assert len(VOCAB) == 42
    assert VOCAB.decode(VOCAB.encode(["[CLS]", "LEFT", "OBJ_31"])) == ["[CLS]", "LEFT", "OBJ_31"]
    assert VOCAB["[PAD]"] == 0


def test_fit_histogram_counts():
    env, _ = straight_path(8)
    eps = [episode(env, range(5)), episode(env, range(5)), episode(env, range(7))]
    h = fit_length_histogram(eps)
    assert h.counts == {5: 2, 7: 1} and h.total == 3
    assert fit_length_histogram(eps[:1]).counts == {5: 1}
    with pytest.raises(DataError):
        fit_length_histogram([])


def test_histogram_rejects_out_of_support():
    with pytest.raises(DataError):
        LengthHistogram({3: 1})
    with pytest.raises(DataError):
        LengthHistogram({17: 1})


def test_histogram_samples_match_within_ks(rng):
    h = LengthHistogram({4: 5, 6: 20, 9: 3, 12: 7})
    draws = [h.sample(rng) for _ in range(10_000)]
    assert ks_distance(draws, h) <= 0.05
    # independent oracle: scipy two-sample KS against the exact multinomial expansion
    ref = np.repeat(h.support, [int(round(p * 10_000)) for p in h.probs()])
    assert stats.ks_2samp(draws, ref).statistic <= 0.05


def test_histogram_file_round_trip(tmp_path):
    h = LengthHistogram({4: 2, 10: 5})
    h.save(tmp_path / "h.json")
    assert LengthHistogram.load(tmp_path / "h.json").counts == h.counts


def test_sampled_paths_never_revisit_and_follow_lengths(env60):
    h = LengthHistogram({4: 3, 5: 4, 6: 4, 7: 3, 8: 2})
    rng = np.random.default_rng(0)
    paths = [sample_path(env60, h, rng) for _ in range(10_000)]
    assert all(len(set(p.nodes)) == p.n for p in paths)
    assert all(env60.adjacent(u, v) for p in paths[:500] for u, v in zip(p.nodes, p.nodes[1:]))
    assert ks_distance([p.n for p in paths], h) <= 0.05


def test_sample_path_deterministic(env60):
    h = LengthHistogram({6: 1})
    assert sample_path(env60, h, 42) == sample_path(env60, h, 42)


def test_sample_path_too_small_environment():
    with pytest.raises(DataError):
        sample_path(star_env(4), LengthHistogram({5: 1}), 0)


def test_star_walk_is_uniform():
    env = star_env(4)
    rng = np.random.default_rng(3)
    first = Counter(random_walk(env, 0, 2, rng)[1] for _ in range(8000))
    assert stats.chisquare([first[k] for k in range(1, 5)]).pvalue > 0.01
    # from a leaf the walk must pass the hub and then pick among the three unvisited leaves
    third = Counter(random_walk(env, 1, 3, rng)[2] for _ in range(6000))
    assert set(third) == {2, 3, 4}
    assert stats.chisquare([third[k] for k in (2, 3, 4)]).pvalue > 0.01


def test_walk_stops_when_stuck():
    env = star_env(3)
    walk = random_walk(env, 1, 10, np.random.default_rng(0))
    assert len(walk) == 3 and walk[1] == 0


@pytest.mark.parametrize("n", range(3, 17))
@pytest.mark.parametrize("ratio", [0.0, 0.25, 0.5, 0.75, 1.0])
def test_masking_contract(n, ratio):
    _, path = straight_path(n)
    expected = min(int(math.floor(ratio * n + 0.5)), n - 2)
    for seed in range(20):
        m = mask_path(path, ratio, seed)
        assert m.n_masked == expected
        assert m.retained[0] == path.nodes[0] and m.retained[-1] == path.nodes[-1]
        assert list(m.positions) == sorted(m.positions)
        assert m.retained == tuple(path.nodes[i] for i in m.positions)


def test_masking_examples():
    _, p8 = straight_path(8)
    assert mask_path(p8, 0.25, 0).n_masked == 2
    assert mask_path(p8, 0.0, 0).retained == p8.nodes
    _, p10 = straight_path(10)
    assert mask_path(p10, 1.0, 0).retained == (0, 9)
    assert n_masked(6, 0.25) == 2  # 1.5 rounds half up


def test_masking_draws_interior_uniformly():
    _, path = straight_path(6)
    counts = Counter(i for s in range(4000) for i in set(range(6)) - set(mask_path(path, 0.25, s).positions))
    assert set(counts) == {1, 2, 3, 4}
    assert stats.chisquare([counts[i] for i in range(1, 5)]).pvalue > 0.01


def test_masking_rejects_bad_ratio():
    _, path = straight_path(5)
    with pytest.raises(DataError):
        mask_path(path, 1.5, 0)


@settings(max_examples=200, deadline=None)
@given(n=st.integers(2, 16), ratio=st.floats(0, 1), seed=st.integers(0, 2**32))
def test_masking_invariants(n, ratio, seed):
    _, path = straight_path(n)
    m = mask_path(path, ratio, seed)
    assert m.n_masked == n_masked(n, ratio) <= max(n - 2, 0)
    assert m.positions[0] == 0 and m.positions[-1] == n - 1
    assert all(a < b for a, b in zip(m.positions, m.positions[1:]))


def test_facing_views_straight_line():
    env, path = straight_path(5)
    seq = facing_view_sequence(env, mask_path(path, 0.25, 1))
    assert len(seq) == 4
    for (f, a), node in zip(seq, mask_path(path, 0.25, 1).retained):
        assert np.array_equal(f, env.features[node, 0])
        assert np.allclose(a, [0, 1, 0, 1])


def test_facing_views_l_shape():
    env = make_env([(0, 0, 0), (2, 0, 0), (2, 2, 0)], [(0, 1), (1, 2)])
    path = Path.from_nodes(env, [0, 1, 2])
    seq = facing_view_sequence(env, mask_path(path, 0.0, 0))
    k = nearest_bin(math.pi / 2)
    assert k == 9
    assert np.array_equal(seq[1][0], env.features[1, 9])
    assert np.allclose(seq[1][1], angle_quad(bin_heading(9), 0.0))
    # the last node keeps its incoming heading
    assert np.array_equal(seq[2][0], env.features[2, 9])


def test_instruction_template():
    objs = {1: [ObjectPlacement(3, 0.0), ObjectPlacement(3, 1.0), ObjectPlacement(1, 2.0)]}
    env = make_env([(0, 0, 0), (2, 0, 0)], [(0, 1)], objs)
    toks = generate_instruction(env, Path.from_nodes(env, [0, 1]), 0)
    assert VOCAB.decode(toks) == ["[CLS]", "FORWARD", "OBJ_3", "[STOP]", "[SEP]"]


def test_instruction_left_turn_and_tie():
    objs = {2: [ObjectPlacement(7, 0.0), ObjectPlacement(4, 1.0)]}
    env = make_env([(0, 0, 0), (2, 0, 0), (2, 2, 0)], [(0, 1), (1, 2)], objs)
    toks = VOCAB.decode(generate_instruction(env, Path.from_nodes(env, [0, 1, 2])))
    assert toks[3:5] == ["LEFT", "OBJ_4"]


@pytest.mark.parametrize(
    "deg, token", [(0, "FORWARD"), (29.9, "FORWARD"), (30, "LEFT"), (99.9, "LEFT"), (100, "HARD_LEFT"),
                   (-30, "RIGHT"), (-100, "HARD_RIGHT"), (180, "HARD_LEFT")]
)
def test_direction_buckets(deg, token):
    from mpmnav.data import direction_token

    assert direction_token(math.radians(deg)) == token


def test_instructions_capped(env60):
    eps = make_vln_dataset_small(env60)
    assert all(len(e.instruction) <= 64 for e in eps)


def make_vln_dataset_small(env):
    from mpmnav.world import WorldSet

    return make_vln_dataset(WorldSet(None, {"train": [env]}), 20, 0, lengths=range(4, 17), long_paths=True)


def test_vln_dataset_counts(small_world):
    from mpmnav.world import WorldSet

    eps = make_vln_dataset(small_world, 30, 5)
    assert len(eps) == 30 * len(small_world.envs("train"))
    envs = small_world.by_id()
    for e in eps:
        assert 4 <= e.path.n <= 8
        Path.from_nodes(envs[e.env_id], e.path.nodes)
        assert e.instruction[0] == VOCAB["[CLS]"]
    five = WorldSet(None, {"train": [generate_environment(s, 30, 2.5, env_id=f"t{s}") for s in range(5)]})
    assert len(make_vln_dataset(five, 200, 0)) == 1000


def test_long_paths_double_reference():
    from mpmnav.world import generate_world_set

    world = generate_world_set(3, n_train=2, n_val_seen=1, n_val_unseen=1)
    short = make_vln_dataset(world, 100, 0)
    long = make_vln_dataset(world, 100, 0, lengths=range(5, 17), long_paths=True)
    ratio = np.mean([e.path.n - 1 for e in long]) / np.mean([e.path.n - 1 for e in short])
    assert 1.5 <= ratio <= 2.5


def test_jsonl_is_byte_identical(tmp_path, small_world):
    h = LengthHistogram({4: 1, 6: 1})
    for tag in "ab":
        save_episodes(tmp_path / f"vln_{tag}.jsonl", make_vln_dataset(small_world, 10, 9))
        save_episodes(tmp_path / f"mpm_{tag}.jsonl", make_mpm_dataset(small_world, "train", h, 20, 0.25, 9))
    assert (tmp_path / "vln_a.jsonl").read_bytes() == (tmp_path / "vln_b.jsonl").read_bytes()
    assert (tmp_path / "mpm_a.jsonl").read_bytes() == (tmp_path / "mpm_b.jsonl").read_bytes()
    first = (tmp_path / "mpm_a.jsonl").read_text().splitlines()[0]
    assert first.startswith('{"type":"mpm","env":') and '"retained":' in first


def test_jsonl_round_trip(tmp_path, small_world):
    eps = make_vln_dataset(small_world, 5, 1)
    mpm = make_mpm_dataset(small_world, "train", LengthHistogram({5: 1}), 6, 0.5, 1)
    save_episodes(tmp_path / "x.jsonl", eps + mpm)
    back = load_episodes(tmp_path / "x.jsonl", small_world.by_id())
    assert back[: len(eps)] == eps
    assert back[len(eps):] == mpm


def test_mpm_dataset_length_fidelity(env60):
    from mpmnav.world import WorldSet

    h = LengthHistogram({4: 2, 5: 3, 6: 3, 7: 2, 8: 1})
    mpm = make_mpm_dataset(WorldSet(None, {"train": [env60]}), "train", h, 10_000, 0.25, 0)
    assert ks_distance([m.source.n for m in mpm], h) <= 0.05


def test_mpm_refuses_unseen_without_flag(small_world):
    h = LengthHistogram({4: 1})
    with pytest.raises(DataError):
        make_mpm_dataset(small_world, "val_unseen", h, 4, 0.25, 0)
    assert len(make_mpm_dataset(small_world, "val_unseen", h, 4, 0.25, 0, preexplore=True)) == 4


def test_path_validation(env60):
    with pytest.raises(DataError):
        Path.from_nodes(env60, [0])
    a = env60.neighbors[0][0]
    with pytest.raises(DataError):
        Path.from_nodes(env60, [0, a, 0])
    far = next(v for v in range(60) if v != 0 and not env60.adjacent(0, v))
    with pytest.raises(DataError):
        Path.from_nodes(env60, [0, far])

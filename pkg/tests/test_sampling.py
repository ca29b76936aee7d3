import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from oarl import data, learner, sampling
from oarl.learner import EnsembleQ
from oarl.net import AdamState, MlpArch, MlpParams
from oarl.sampling import AcquisitionKind, SamplerConfig, ScoreTable, SumTree

from conftest import random_batch


def row_member(rows_w, bias):
    return MlpParams([np.asarray(rows_w, np.float64)], [np.asarray(bias, np.float64)])


def ensemble_of(members):
    return EnsembleQ(members, [m.copy() for m in members], [AdamState.zeros_like(m) for m in members])


def one_hot_batch(states, actions, rewards=None, next_states=None, dones=None, n_states=3):
    eye = np.eye(n_states)
    k = len(states)
    return data.Batch(
        eye[states],
        np.asarray(actions),
        np.zeros(k) if rewards is None else np.asarray(rewards, float),
        eye[next_states if next_states is not None else states],
        np.ones(k, bool) if dones is None else np.asarray(dones, bool),
    )


# -- config ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [dict(mode="online"), dict(recompute_every=0), dict(alpha_per=-1), dict(eps_per=0), dict(beta=0.4), dict(beta_increment=1e-3), dict(episodic="mean"), dict(mode="batch", episodic="max"), dict(source="other"), dict(warm_start_epochs=-1)],
)
def test_sampler_config_rejects(kwargs):
    with pytest.raises(sampling.SamplerConfigError):
        SamplerConfig(**kwargs)


def test_sampler_config_from_strings():
    c = SamplerConfig(kind="variance_data")
    assert c.kind is AcquisitionKind.VARIANCE_DATA and c.recompute_every == 4 and c.alpha_per == 0.6 and c.eps_per == 1e-6


# -- scores ---------------------------------------------------------------------------


def test_td_error_zero_when_consistent():
    ens = ensemble_of([row_member(np.zeros((2, 3)), [2.0, -1.0])])
    b = one_hot_batch([0, 1], [0, 1], rewards=[2.0, -1.0])
    assert np.all(sampling.score_td_error(ens, b) == 0)


def test_td_error_hand_trace():
    ens = ensemble_of([row_member(np.zeros((2, 3)), [2.0, 0.0])])
    b = one_hot_batch([0, 1], [0, 0], rewards=[0.5, 0.5], dones=[True, False])
    # |2 - 0.5| and |2 - (0.5 + 0.9 * 2)|
    assert np.allclose(sampling.score_td_error(ens, b, gamma=0.9), [1.5, 0.3])


def test_td_error_mean_over_members():
    ens = ensemble_of([row_member(np.zeros((2, 3)), [2.0, 0.0]), row_member(np.zeros((2, 3)), [4.0, 0.0])])
    b = one_hot_batch([0], [0], rewards=[1.0])
    assert sampling.score_td_error(ens, b)[0] == pytest.approx((1.0 + 3.0) / 2)


def test_td_error_permutation_invariant():
    rng = np.random.default_rng(0)
    ens = EnsembleQ.create(MlpArch(5, 2, (8,)), 3, seed=0)
    b = random_batch(rng, 20, 5, 2)
    perm = rng.permutation(20)
    pb = data.Batch(b.obs[perm], b.actions[perm], b.rewards[perm], b.next_obs[perm], b.dones[perm])
    assert np.allclose(sampling.score_td_error(ens, b)[perm], sampling.score_td_error(ens, pb))


def test_variance_identical_members_zero():
    m = MlpParams([np.random.default_rng(0).normal(size=(2, 3))], [np.zeros(2)])
    ens = ensemble_of([m, m.copy(), m.copy()])
    b = one_hot_batch([0, 1, 2], [0, 1, 0])
    assert np.all(sampling.score_variance(ens, b, "data") == 0)
    assert np.all(sampling.score_variance(ens, b, "greedy") == 0)


def test_variance_matches_closed_form():
    # rows (a_i, 0): advantage of action 0 is a / (e^a + 1)
    a = np.array([0.5, 2.0, -1.0])
    ens = ensemble_of([row_member(np.zeros((2, 3)), [x, 0.0]) for x in a])
    adv = a / (np.exp(a) + 1)
    b = one_hot_batch([0], [0])
    assert sampling.score_variance(ens, b, "data")[0] == pytest.approx(np.mean((adv - adv.mean()) ** 2), abs=1e-12)


def test_population_variance_two_members():
    adv = np.array([0.1, 0.2])
    # solve a / (e^a + 1) = target numerically for each member
    from scipy.optimize import brentq

    a = [brentq(lambda x, t=t: x / (np.exp(x) + 1) - t, 0, 1) for t in adv]
    ens = ensemble_of([row_member(np.zeros((2, 3)), [x, 0.0]) for x in a])
    assert sampling.score_variance(ens, one_hot_batch([0], [0]), "data")[0] == pytest.approx(0.0025, abs=1e-9)


def test_variance_offset_invariant():
    rng = np.random.default_rng(1)
    ens = EnsembleQ.create(MlpArch(5, 3, (8,)), 3, seed=2, dtype=np.float64)
    b = random_batch(rng, 30, 5, 3)
    before = sampling.score_variance(ens, b, "data")
    for k, m in enumerate(ens.members):
        m.biases[-1] += 5.0 * (k + 1)
    assert np.allclose(sampling.score_variance(ens, b, "data"), before, atol=1e-10)


def test_variance_greedy_uses_mean_argmax():
    members = [row_member(np.zeros((2, 3)), [3.0, 0.0]), row_member(np.zeros((2, 3)), [-2.0, 0.0])]
    ens = ensemble_of(members)  # mean row (0.5, 0): greedy action 0
    b = one_hot_batch([0], [1])
    greedy = sampling.score_variance(ens, b, "greedy")
    forced = sampling.score_variance(ens, one_hot_batch([0], [0]), "data")
    assert greedy[0] == pytest.approx(forced[0])


def test_variance_needs_two_members():
    ens = ensemble_of([row_member(np.zeros((2, 3)), [1.0, 0.0])])
    with pytest.raises(sampling.SamplerConfigError):
        sampling.score_variance(ens, one_hot_batch([0], [0]))


def test_dedup_matches_direct(small_traffic_dataset):
    ds = small_traffic_dataset
    ens = EnsembleQ.create(MlpArch(ds.obs_dim, 2, (16,)), 3, seed=0)
    for kind in (AcquisitionKind.TD_ERROR, AcquisitionKind.VARIANCE_DATA, AcquisitionKind.VARIANCE_GREEDY):
        direct = sampling.compute_scores(kind, ens, ds.as_batch())
        fast = sampling.compute_scores(kind, ens, ds.as_batch(), unique=ds.unique)
        assert np.allclose(direct, fast, rtol=1e-6, atol=1e-9)


# -- multinomial ----------------------------------------------------------------------


def test_probabilities_normalized():
    t = ScoreTable.empty(3)
    t.set_scores(np.array([2.0, 2.0]), 0)
    assert np.allclose(t.probabilities(), [0.5, 0.5])
    t.set_scores(np.random.default_rng(0).random(1000), 0)
    assert abs(t.probabilities().sum() - 1) < 1e-9


def test_point_mass():
    t = ScoreTable.empty(3)
    t.set_scores(np.array([1.0, 0.0, 0.0]), 0)
    assert np.all(sampling.normalize_and_sample(t, 4, np.random.default_rng(0)) == 0)


def test_multinomial_proportionality():
    t = ScoreTable.empty(2)
    t.set_scores(np.array([1.0, 3.0]), 0)
    idx = sampling.normalize_and_sample(t, 100_000, np.random.default_rng(0))
    assert abs(np.mean(idx == 1) - 0.75) < 0.01


def test_zero_scores_fall_back_to_uniform():
    t = ScoreTable.empty(5)
    idx = sampling.normalize_and_sample(t, 50_000, np.random.default_rng(0))
    assert stats.chisquare(np.bincount(idx, minlength=5)).pvalue > 0.01


def test_negative_scores_rejected():
    with pytest.raises(ValueError):
        ScoreTable.empty(2).set_scores(np.array([1.0, -1.0]), 0)


def test_scale_invariance():
    scores = np.random.default_rng(2).random(6)
    a, b = ScoreTable.empty(6), ScoreTable.empty(6)
    a.set_scores(scores, 0)
    b.set_scores(scores * 37.0, 0)
    assert np.allclose(a.probabilities(), b.probabilities())
    ia = sampling.normalize_and_sample(a, 20_000, np.random.default_rng(3))
    ib = sampling.normalize_and_sample(b, 20_000, np.random.default_rng(4))
    table = np.stack([np.bincount(ia, minlength=6), np.bincount(ib, minlength=6)])
    assert stats.chi2_contingency(table).pvalue > 0.01


def test_uniform_matches_constant_scores():
    n = 7
    u = sampling.uniform_sample(n, 100_000, np.random.default_rng(0))
    t = ScoreTable.empty(n)
    t.set_scores(np.full(n, 0.3), 0)
    c = sampling.normalize_and_sample(t, 100_000, np.random.default_rng(1))
    table = np.stack([np.bincount(u, minlength=n), np.bincount(c, minlength=n)])
    assert stats.chi2_contingency(table).pvalue > 0.01


# -- dataset-mode schedule ------------------------------------------------------------


def test_rescore_schedule(small_traffic_dataset):
    ds = small_traffic_dataset
    ens = EnsembleQ.create(MlpArch(ds.obs_dim, 2, (8,)), 3, seed=0)
    cfg = SamplerConfig(kind="variance_data", recompute_every=4)
    t = ScoreTable.empty(len(ds))
    sampling.maybe_rescore(t, ens, ds, 10, cfg)
    assert t.last_full_rescore_step == 10
    sampling.maybe_rescore(t, ens, ds, 13, cfg)
    assert t.last_full_rescore_step == 10
    sampling.maybe_rescore(t, ens, ds, 14, cfg)
    assert t.last_full_rescore_step == 14


def test_rescore_rejects_batch_mode(small_traffic_dataset):
    ens = EnsembleQ.create(MlpArch(small_traffic_dataset.obs_dim, 2, (8,)), 2, seed=0)
    with pytest.raises(sampling.SamplerConfigError):
        sampling.maybe_rescore(ScoreTable.empty(1), ens, small_traffic_dataset, 0, SamplerConfig(mode="batch"))


def test_staleness_bound_during_training(small_traffic_dataset):
    ds = small_traffic_dataset
    cfg = learner.CqlConfig(batch_size=64)
    ens = EnsembleQ.create(MlpArch(ds.obs_dim, 2, (16,)), 3, seed=0)
    sc = SamplerConfig(kind="variance_data", recompute_every=3, warm_start_epochs=0)
    s = sampling.BatchSampler(ds, sc, 64, np.random.default_rng(0))
    for step in range(20):
        idx = s.sample(step, 0, ens)
        assert step - s.table.last_full_rescore_step < 3
        learner.train_step(ens, ds.batch(idx), cfg)


def test_episodic_scores_in_dataset_mode(small_traffic_dataset):
    ds = small_traffic_dataset
    ens = EnsembleQ.create(MlpArch(ds.obs_dim, 2, (8,)), 3, seed=0)
    t = ScoreTable.empty(len(ds))
    sampling.maybe_rescore(t, ens, ds, 0, SamplerConfig(kind="variance_data", episodic="max"))
    for e in range(5):
        seg = t.scores[ds.episode_offsets[e] : ds.episode_offsets[e + 1]]
        assert np.all(seg == seg[0])


# -- episodic -------------------------------------------------------------------------


def test_episodic_examples():
    offsets = np.array([0, 3, 5])
    assert np.array_equal(sampling.episodic_aggregate(np.array([1.0, 5.0, 2.0, 0.0, 4.0]), offsets), [5, 5, 5, 4, 4])
    const = np.full(5, 2.0)
    assert np.array_equal(sampling.episodic_aggregate(const, offsets), const)


@settings(max_examples=50, deadline=None)
@given(lengths=st.lists(st.integers(1, 6), min_size=1, max_size=8), seed=st.integers(0, 1000))
def test_episodic_idempotent(lengths, seed):
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    s = np.random.default_rng(seed).random(offsets[-1])
    once = sampling.episodic_aggregate(s, offsets)
    assert np.array_equal(sampling.episodic_aggregate(once, offsets), once)
    assert np.all(once >= s)


# -- sum tree -------------------------------------------------------------------------


def brute_force_ok(tree: SumTree) -> bool:
    expect = tree.tree.copy()
    for node in range(tree.cap - 1, 0, -1):
        expect[node] = expect[2 * node] + expect[2 * node + 1]
    return np.allclose(tree.tree[1 : tree.cap], expect[1 : tree.cap], rtol=1e-6, atol=0)


def test_sum_tree_proportionality():
    tree = SumTree(2)
    tree.set(np.array([0, 1]), np.array([1.0, 3.0]))
    rng = np.random.default_rng(0)
    idx = np.concatenate([sampling.priority_sample(tree, 100, rng) for _ in range(1000)])
    assert abs(np.mean(idx == 1) - 0.75) < 0.01


def test_sum_tree_single_nonzero():
    tree = SumTree(9, 0.0)
    tree.set(np.array([6]), np.array([2.0]))
    assert np.all(sampling.priority_sample(tree, 64, np.random.default_rng(0)) == 6)


def test_sum_tree_uniform_coverage():
    tree = SumTree(13)
    rng = np.random.default_rng(0)
    idx = np.concatenate([sampling.priority_sample(tree, 50, rng) for _ in range(200)])
    assert stats.chisquare(np.bincount(idx, minlength=13)).pvalue > 0.01


def test_sum_tree_update_arithmetic():
    tree = SumTree(5)
    tree.set(np.array([2]), np.array([1.0]))
    assert tree.total == pytest.approx(5.0)
    sampling.priority_update(tree, np.array([2]), np.array([4.0]), alpha=1.0, eps=1e-300)
    assert tree.total == pytest.approx(8.0)
    before = tree.tree.copy()
    tree.set(np.arange(5), tree.leaves.copy())
    assert np.allclose(tree.tree, before, rtol=1e-12)


def test_sum_tree_interleaved_invariant():
    rng = np.random.default_rng(0)
    tree = SumTree(1000)
    for _ in range(1000):
        if rng.random() < 0.5:
            idx = rng.integers(0, 1000, size=rng.integers(1, 64))
            tree.set(idx, rng.random(len(idx)) * 10 ** rng.uniform(-3, 3))
        else:
            sampling.priority_sample(tree, 32, rng)
        assert brute_force_ok(tree)
    assert tree.total == pytest.approx(tree.leaves.sum(), rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 40), seed=st.integers(0, 10_000))
def test_sum_tree_find_matches_cumsum(n, seed):
    rng = np.random.default_rng(seed)
    pri = rng.random(n) * (rng.random(n) < 0.7)
    if pri.sum() == 0:
        pri[0] = 1.0
    tree = SumTree(n, 0.0)
    tree.set(np.arange(n), pri)
    values = rng.random(100) * tree.total
    expect = np.searchsorted(np.cumsum(pri), values, side="right")
    assert np.array_equal(tree.find(values), np.minimum(expect, n - 1))
    assert np.all(pri[tree.find(values)] > 0)


def test_sum_tree_errors():
    with pytest.raises(ValueError):
        SumTree(0)
    tree = SumTree(4)
    with pytest.raises(IndexError):
        tree.set(np.array([4]), np.array([1.0]))
    with pytest.raises(ValueError):
        sampling.priority_sample(SumTree(3, 0.0), 2, np.random.default_rng(0))


def test_priority_transform():
    assert np.allclose(sampling.to_priority(np.array([0.0, 1.0]), 0.6, 1e-6), [(1e-6) ** 0.6, (1 + 1e-6) ** 0.6])


# -- schedule -------------------------------------------------------------------------


def test_effective_sampler():
    active = SamplerConfig(kind="variance_data")
    assert sampling.effective_sampler(0, 0, active) == "uniform"
    assert sampling.effective_sampler(100, 1, active) == "active"
    assert sampling.effective_sampler(100, 5, SamplerConfig()) == "uniform"
    assert sampling.effective_sampler(0, 0, SamplerConfig(kind="td_error", warm_start_epochs=0)) == "active"


def test_batch_mode_refreshes_only_sampled(small_traffic_dataset):
    ds = small_traffic_dataset
    ens = EnsembleQ.create(MlpArch(ds.obs_dim, 2, (8,)), 3, seed=0)
    cfg = SamplerConfig(kind="variance_data", mode="batch", warm_start_epochs=0)
    s = sampling.BatchSampler(ds, cfg, 32, np.random.default_rng(0))
    idx = s.sample(0, 0, ens)
    assert np.all(s.current_scores() == 1.0)  # every leaf starts at the initial (max) priority
    s.after_step(0, 0, ens)
    changed = np.flatnonzero(s.current_scores() != 1.0)
    assert set(changed) <= set(idx) and len(changed) > 0
    assert brute_force_ok(s.tree)


def test_warm_start_is_uniform(small_traffic_dataset):
    ds = small_traffic_dataset
    ens = EnsembleQ.create(MlpArch(ds.obs_dim, 2, (8,)), 3, seed=0)
    s = sampling.BatchSampler(ds, SamplerConfig(kind="variance_data"), 32, np.random.default_rng(0))
    s.sample(0, 0, ens)
    assert s.table.last_full_rescore_step is None
    s.sample(1, 1, ens)
    assert s.table.last_full_rescore_step == 1


def test_identical_members_sample_uniformly(small_traffic_dataset):
    ds = small_traffic_dataset
    base = EnsembleQ.create(MlpArch(ds.obs_dim, 2, (8,)), 1, seed=0)
    m = base.members[0]
    ens = ensemble_of([m, m.copy(), m.copy()])
    for kind in ("variance_data", "variance_greedy"):
        s = sampling.BatchSampler(ds, SamplerConfig(kind=kind, warm_start_epochs=0), 1000, np.random.default_rng(1))
        idx = np.concatenate([s.sample(i, 0, ens) for i in range(100)])
        assert np.all(s.table.scores == 0)
        bins = np.bincount(idx * 20 // len(ds), minlength=20)
        expected = np.bincount(np.arange(len(ds)) * 20 // len(ds), minlength=20) / len(ds) * len(idx)
        assert stats.chisquare(bins, expected).pvalue > 0.01


def test_export_scores_csv(tmp_path):
    sampling.export_scores_csv(tmp_path / "s.csv", np.array([0.5, 1.0]), np.array([0, 0]))
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == ["transition_index", "episode_id", "score"] and rows[2] == ["1", "0", "1.0"]

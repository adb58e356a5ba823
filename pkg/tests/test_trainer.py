import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cutlearn.rlenv import N_CUT_OPS, N_OPS, OBS_LEN, EnvConfig, Rollout
from cutlearn.ruleset import NUM_DIMS, RuleSet, generate_rules
from cutlearn.trainer import (PARAM_NAMES, Batch, Learner, PolicySampler, TrainConfig, init_params,
                              load_checkpoint, loss_and_grads, make_batch, masked_log_softmax,
                              policy_forward, ppo_update, sample_action, train)
from cutlearn.tree import DecisionTree


def random_params(obs_len, hidden, seed, scale=0.5):
    rng = np.random.default_rng(seed)
    p = init_params(obs_len, hidden, seed=seed, dtype="float64")
    return {k: v + scale * rng.standard_normal(v.shape) for k, v in p.items()}


def random_masks(rng, n):
    masks = rng.random((n, NUM_DIMS, N_OPS)) < 0.5
    masks[:, 0, 0] = True  # at least one legal pair per node
    return masks


def toy_batch(params, n, seed, obs_len):
    """Experiences sampled from ``params`` itself so the old log-probs are consistent."""
    rng = np.random.default_rng(seed)
    obs = (rng.random((n, obs_len)) < 0.5).astype(np.float64)
    masks = random_masks(rng, n)
    ro = Rollout(DecisionTree(RuleSet([])), False)
    for i in range(n):
        pa, pb, v = policy_forward(params, obs[i], masks[i])
        d, o = sample_action(pa, pb, rng)
        ro.node_ids.append(i)
        ro.obs.append(obs[i])
        ro.masks.append(masks[i])
        ro.dims.append(d)
        ro.ops.append(o)
        ro.logp.append(float(np.log(pa[d]) + np.log(pb[d, o])))
        ro.values.append(v + rng.normal())
        ro.probs_a.append(pa)
        ro.probs_b.append(pb[d])
    ro.rewards = rng.normal(size=n) * 3
    return make_batch([ro], normalize=False, dtype="float64")


# -- policy -------------------------------------------------------------------

def test_initial_policy_is_uniform():
    p = init_params(hidden=(32, 32), seed=1)
    mask = np.zeros((NUM_DIMS, N_OPS), bool)
    mask[[0, 2], :N_CUT_OPS] = True
    mask[2, N_CUT_OPS] = True
    pa, pb, v = policy_forward(p, np.ones(OBS_LEN), mask)
    assert np.allclose(pa, [0.5, 0, 0.5, 0, 0])
    assert np.allclose(pb[0, :N_CUT_OPS], 0.2) and np.allclose(pb[2, :N_CUT_OPS + 1], 1 / 6)
    assert v == 0.0


def test_masked_entries_have_zero_probability():
    p = random_params(OBS_LEN, (16, 16), 3, scale=3.0)
    mask = np.zeros((NUM_DIMS, N_OPS), bool)
    mask[:, :N_CUT_OPS] = True  # no partitions
    pa, pb, _ = policy_forward(p, np.ones(OBS_LEN), mask)
    assert np.all(pb[:, N_CUT_OPS:] == 0.0)


def test_fully_masked_head_rejected():
    with pytest.raises(ValueError):
        masked_log_softmax(np.zeros(3), np.zeros(3, bool))


@settings(max_examples=1000)
@given(st.integers(0, 2**31))
def test_probabilities_normalised(seed):
    rng = np.random.default_rng(seed)
    p = random_params(24, (8, 8), seed % 7, scale=2.0)
    mask = random_masks(rng, 1)[0]
    pa, pb, _ = policy_forward(p, rng.random(24), mask)
    assert abs(pa.sum() - 1) < 1e-6
    for d in np.flatnonzero(mask.any(axis=1)):
        assert abs(pb[d].sum() - 1) < 1e-6
        assert np.all(pb[d][~mask[d]] == 0)


def test_forward_deterministic():
    p = random_params(24, (8, 8), 0)
    mask = np.ones((NUM_DIMS, N_OPS), bool)
    a = policy_forward(p, np.ones(24), mask)
    b = policy_forward(p, np.ones(24), mask)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1]) and a[2] == b[2]


# -- sampling -----------------------------------------------------------------

def test_point_mass_sampling():
    rng = np.random.default_rng(0)
    pa = np.array([0, 0, 1.0, 0, 0])
    pb = np.zeros(N_OPS)
    pb[7] = 1.0
    assert all(sample_action(pa, pb, rng) == (2, 7) for _ in range(100))


def test_uniform_two_ops_binomial():
    rng = np.random.default_rng(12345)
    n = 10_000
    hits = sum(sample_action([1.0], [0.5, 0.5], rng)[1] for _ in range(n))
    assert abs(hits - n / 2) <= 3 * np.sqrt(n * 0.25)


def test_sampling_deterministic_under_seed():
    pa, pb = np.full(5, 0.2), np.full((5, N_OPS), 1 / N_OPS)
    a = [sample_action(pa, pb, np.random.default_rng(9)) for _ in range(3)]
    r1, r2 = np.random.default_rng(4), np.random.default_rng(4)
    assert [sample_action(pa, pb, r1) for _ in range(50)] == [sample_action(pa, pb, r2) for _ in range(50)]
    assert a[0] == a[1] == a[2]


def test_sampler_agrees_with_forward():
    p = random_params(OBS_LEN, (16, 16), 5, scale=1.0)
    p = {k: v.astype(np.float32) for k, v in p.items()}
    rng = np.random.default_rng(0)
    mask = random_masks(rng, 1)[0]
    obs = (rng.random(OBS_LEN) < 0.5).astype(np.uint8)
    pa, pb, v = policy_forward(p, obs, mask)
    dec = PolicySampler(p, np.random.default_rng(1))(obs, mask)
    assert np.allclose(dec.probs_a, pa, atol=1e-6) and np.allclose(dec.probs_b, pb[dec.dim], atol=1e-6)
    assert dec.value == pytest.approx(v, abs=1e-5)
    assert dec.logp == pytest.approx(np.log(pa[dec.dim] * pb[dec.dim, dec.op]), abs=1e-5)


# -- loss and gradients -------------------------------------------------------

@pytest.mark.parametrize("algo", ["ppo", "a2c"])
def test_gradients_match_finite_differences(algo):
    obs_len = 12
    params = random_params(obs_len, (8, 8), 0)
    batch = toy_batch(params, 10, 1, obs_len)
    # perturb so the ratio is away from 1 but mostly inside the clip range
    rng = np.random.default_rng(2)
    params = {k: v + 0.05 * rng.standard_normal(v.shape) for k, v in params.items()}
    cfg = TrainConfig(algo=algo, vf_clip=0.5, batch=10, minibatch=10)
    _, grads, _ = loss_and_grads(params, batch, cfg, kl_coeff=0.3)
    worst = 0.0
    h = 1e-6
    for k in PARAM_NAMES:
        for idx in np.ndindex(params[k].shape):
            old = params[k][idx]
            params[k][idx] = old + h
            up = loss_and_grads(params, batch, cfg, 0.3)[0]
            params[k][idx] = old - h
            down = loss_and_grads(params, batch, cfg, 0.3)[0]
            params[k][idx] = old
            fd = (up - down) / (2 * h)
            an = grads[k][idx]
            worst = max(worst, abs(fd - an) / max(1e-3, abs(fd), abs(an)))
    assert worst < 1e-4


def test_zero_advantage_leaves_only_entropy():
    params = random_params(12, (8, 8), 4)
    batch = toy_batch(params, 10, 5, 12)
    batch.adv[:] = 0.0
    batch.rewards[:] = batch.v_old  # no value error either
    batch.v_old = np.asarray(batch.v_old)
    cfg = TrainConfig(batch=10, minibatch=10)
    _, g, st = loss_and_grads(params, batch, cfg, kl_coeff=0.2)
    assert st["policy_loss"] == 0.0 and st["kl"] == pytest.approx(0.0, abs=1e-12)
    _, g0, _ = loss_and_grads(params, batch, TrainConfig(batch=10, minibatch=10, entropy_coeff=0.0), 0.2)
    # value head sees V(s) - R from the perturbed old values, so only policy heads are checked
    assert np.abs(g0["Wa"]).max() < 1e-12 and np.abs(g0["Wb"]).max() < 1e-12
    assert np.abs(g["Wa"]).max() > 0


def single_experience(adv):
    params = random_params(12, (8, 8), 7)
    b = toy_batch(params, 1, 8, 12)
    b.adv[:] = adv
    b.rewards[:] = b.v_old
    return params, b


def test_positive_advantage_raises_probability():
    params, b = single_experience(1.0)
    cfg = TrainConfig(lr=1e-3, sgd_iters=1, batch=1, minibatch=1, entropy_coeff=0.0)
    before = policy_forward(params, b.obs[0], _full_mask(b))
    new, diag = ppo_update(params, b, cfg)
    after = policy_forward(new, b.obs[0], _full_mask(b))
    d, o = b.dims[0], b.ops[0]
    assert after[0][d] * after[1][d, o] > before[0][d] * before[1][d, o]
    assert not diag["aborted"]


def _full_mask(b):
    m = np.zeros((NUM_DIMS, N_OPS), bool)
    m[b.mask_a[0]] = True
    m[b.dims[0]] = b.mask_b[0]
    return m


def test_bandit_converges():
    params, b = single_experience(1.0)
    cfg = TrainConfig(lr=1e-2, sgd_iters=1, batch=1, minibatch=1, entropy_coeff=0.0, kl_coeff=0.0)
    learner = Learner(params, cfg)
    d, o = b.dims[0], b.ops[0]
    for _ in range(200):
        pa, pb, _ = policy_forward(learner.params, b.obs[0], _full_mask(b))
        b.logp_old[:] = np.log(pa[d] * pb[d, o])
        b.pa_old[:] = pa
        b.pb_old[:] = pb[d]
        learner.update(b)
    pa, pb, _ = policy_forward(learner.params, b.obs[0], _full_mask(b))
    assert pa[d] * pb[d, o] > 0.99


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_restores_params():
    params, b = single_experience(1.0)
    b.rewards[:] = np.inf
    learner = Learner({k: v.copy() for k, v in params.items()}, TrainConfig(batch=1, minibatch=1))
    diag = learner.update(b)
    assert diag["aborted"]
    assert all(np.array_equal(learner.params[k], params[k]) for k in params)
    assert learner.t == 0


def test_adaptive_kl_coefficient():
    params = random_params(12, (8, 8), 1)
    b = toy_batch(params, 20, 2, 12)
    big = Learner(dict(params), TrainConfig(lr=0.05, sgd_iters=5, batch=20, minibatch=20, kl_target=1e-6))
    big.update(b)
    assert big.kl_coeff == pytest.approx(0.3)
    small = Learner(dict(params), TrainConfig(lr=1e-9, sgd_iters=1, batch=20, minibatch=20, kl_target=1.0))
    small.update(b)
    assert small.kl_coeff == pytest.approx(0.1)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(workers=0)
    with pytest.raises(ValueError):
        TrainConfig(minibatch=10, batch=5)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)


# -- training loop -------------------------------------------------------------

SMALL = dict(hidden=(16, 16), batch=200, minibatch=100, sgd_iters=2, lr=1e-3)
ENV = EnvConfig(binth=4, max_actions=300)


@pytest.fixture(scope="module")
def small_rules():
    return generate_rules(40, 11, "fw")


def test_train_is_deterministic(small_rules):
    cfg = TrainConfig(total_timesteps=1000, seed=7, **SMALL)
    a, b = train(small_rules, ENV, cfg), train(small_rules, ENV, cfg)
    assert a.deterministic_rows() == b.deterministic_rows()
    assert a.to_csv() == b.to_csv()
    assert all(np.array_equal(a.params[k], b.params[k]) for k in PARAM_NAMES)
    assert a.best_stats == b.best_stats


def test_budget_below_one_batch_does_one_update(small_rules):
    report = train(small_rules, ENV, TrainConfig(total_timesteps=1, seed=1, **SMALL))
    assert report.updates == 1
    assert report.timesteps >= SMALL["batch"]


def test_max_rollouts_bound(small_rules):
    report = train(small_rules, ENV, TrainConfig(max_rollouts=5, seed=1, **SMALL))
    assert report.rollouts == 5


def test_best_never_worsens(small_rules):
    env = EnvConfig(binth=4, max_actions=300, c=0.5, reward_scale="log")
    rows = []
    report = train(small_rules, env, TrainConfig(total_timesteps=3000, seed=3, **SMALL), progress=rows.append)
    assert len(rows) > 3
    keys = [(r["best_truncated"], r["best_objective"]) for r in rows]
    assert all(b <= a for a, b in zip(keys, keys[1:]))
    assert keys[-1] == (int(report.best_key[0]), report.best_key[1])


def test_terminal_root_trains_nothing(fig1):
    report = train(fig1, EnvConfig(binth=3), TrainConfig(total_timesteps=100, **SMALL))
    assert report.updates == 0 and report.best_stats["time"] == 0


def test_empty_rules_rejected():
    with pytest.raises(ValueError):
        train(RuleSet([]), ENV, TrainConfig(**SMALL))


def test_checkpoint_round_trip(small_rules, tmp_path):
    report = train(small_rules, ENV, TrainConfig(max_rollouts=2, seed=2, **SMALL))
    path = tmp_path / "ck.npz"
    report.save_checkpoint(path)
    params, meta = load_checkpoint(path)
    assert all(np.array_equal(params[k], report.params[k]) for k in PARAM_NAMES)
    assert meta["env"]["binth"] == 4 and meta["train"]["seed"] == 2


def test_workers_do_not_change_results(small_rules):
    one = train(small_rules, ENV, TrainConfig(total_timesteps=600, seed=5, **SMALL))
    many = train(small_rules, ENV, TrainConfig(total_timesteps=600, seed=5, workers=3, **SMALL))
    assert one.deterministic_rows() == many.deterministic_rows()
    assert all(np.array_equal(one.params[k], many.params[k]) for k in PARAM_NAMES)


def test_masked_probability_stays_zero_after_training(small_rules):
    report = train(small_rules, ENV, TrainConfig(total_timesteps=600, seed=5, **SMALL))
    mask = np.zeros((NUM_DIMS, N_OPS), bool)
    mask[1, :3] = True
    pa, pb, _ = policy_forward(report.params, np.zeros(OBS_LEN), mask)
    assert pa[1] == 1.0 and np.all(pb[1, 3:] == 0)

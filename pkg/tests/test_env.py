import numpy as np
import pytest

from micod.core import Driver, EpisodeConfig, Location, OdPair, Order
from micod.env import (F_BATCH, F_BIAS, F_PATIENCE, F_PICKUP, F_PRICE, F_WAIT,
                       BatchEnd, DispatchEnv, IllegalActionError, OuterState,
                       SubAction, apply_subaction, features_of, global_info_dim,
                       initial_substate)
from micod.scenario import Dataset
from micod.simulator import SimState


def make_dataset(drivers, orders, **cfg_kwargs):
    cfg_kwargs.setdefault("match_radius_m", 3000.0)
    return Dataset(config=EpisodeConfig(**cfg_kwargs), drivers=drivers, orders=orders)


def order(oid, origin, price=10.0, appear=0.0, patience=600.0, trip=100.0,
          dest=Location(3000, 3000)):
    return Order(oid, origin, dest, price, appear, patience, trip)


def pool_state(pairs_spec):
    """OuterState with synthetic feature rows; pairs_spec = [(order, driver)]."""
    n = len(pairs_spec)
    feats = np.arange(n * 12, dtype=float).reshape(n, 12) / 100.0
    pool = [OdPair(order_id=o, driver_id=d, features=feats[i])
            for i, (o, d) in enumerate(pairs_spec)]
    return OuterState(global_info=np.zeros(4), pool=pool, feature_matrix=feats)


# -- reset / outer state -------------------------------------------------------

def test_reset_empty_dataset():
    env = DispatchEnv(make_dataset([], []), seed=0)
    s = env.reset()
    assert s.n_pairs == 0
    assert s.global_info.shape == (global_info_dim(env.config),)
    assert np.all(np.isfinite(s.global_info))


def test_reset_deterministic():
    ds = make_dataset([Driver(0, Location(0, 0), 0.0)], [order(0, Location(10, 10))])
    a = DispatchEnv(ds, seed=5).reset()
    b = DispatchEnv(ds, seed=5).reset()
    assert np.array_equal(a.feature_matrix, b.feature_matrix)
    assert np.array_equal(a.global_info, b.global_info)


def test_reset_cross_product_pool():
    drivers = [Driver(i, Location(100 * i, 0), 0.0) for i in range(3)]
    orders = [order(j, Location(0, 100 * j)) for j in range(2)]
    env = DispatchEnv(make_dataset(drivers, orders), seed=0)
    s = env.reset()
    assert s.n_pairs == 6
    keys = [(p.order_id, p.driver_id) for p in s.pool]
    assert keys == sorted(keys)


# -- features -------------------------------------------------------------------

def test_features_colocated_pair_distance_zero():
    ds = make_dataset([Driver(0, Location(50, 50), 0.0)], [order(0, Location(50, 50))])
    sim = SimState(ds, seed=0)
    f = features_of(0, 0, sim)
    assert f[F_PICKUP] == 0.0
    assert f[F_BIAS] == 1.0


def test_features_fresh_order():
    ds = make_dataset([Driver(0, Location(0, 0), 0.0)], [order(0, Location(10, 0))])
    sim = SimState(ds, seed=0)
    f = features_of(0, 0, sim)
    assert f[F_WAIT] == 0.0
    assert f[F_PATIENCE] == 1.0
    assert f[F_BATCH] == 0.0


def test_features_pair_at_exact_radius():
    ds = make_dataset([Driver(0, Location(0, 0), 0.0)], [order(0, Location(0, 3000))])
    sim = SimState(ds, seed=0)
    assert features_of(0, 0, sim)[F_PICKUP] == 1.0


# -- sub-state transitions --------------------------------------------------------

def test_apply_subaction_masks_related_rows():
    s = pool_state([(1, 1), (2, 1), (1, 2), (2, 2)])
    sub = initial_substate(s)
    out = apply_subaction(sub, SubAction(h=0, c=0))  # pick (o1, d1)
    assert not isinstance(out, BatchEnd)
    assert list(out.remaining_indices()) == [3]  # only (o2, d2) survives
    assert out.selected == [0]


def test_apply_subaction_hold_defers_everything():
    s = pool_state([(1, 1), (2, 1), (1, 2), (2, 2)])
    out = apply_subaction(initial_substate(s), SubAction(h=1))
    assert isinstance(out, BatchEnd)
    assert out.held == [0, 1, 2, 3]
    assert out.selected == []


def test_apply_subaction_disjoint_sequence_ends_with_zero_held():
    s = pool_state([(1, 1), (2, 2)])
    sub = apply_subaction(initial_substate(s), SubAction(h=0, c=0))
    out = apply_subaction(sub, SubAction(h=0, c=1))
    assert isinstance(out, BatchEnd)
    assert out.selected == [0, 1]
    assert out.held == []


def test_apply_subaction_rejects_masked_row():
    s = pool_state([(1, 1), (1, 2)])
    sub = apply_subaction(initial_substate(s), SubAction(h=0, c=0))
    assert isinstance(sub, BatchEnd)  # picking (1,1) masks (1,2): pool empty
    with pytest.raises(IllegalActionError):
        apply_subaction(initial_substate(s), SubAction(h=0, c=5))


def test_apply_subaction_hold_with_selection_rejected():
    s = pool_state([(1, 1)])
    with pytest.raises(IllegalActionError):
        apply_subaction(initial_substate(s), SubAction(h=1, c=0))


# -- finalize / rewards -------------------------------------------------------------

def _two_pair_env(reward_mode):
    drivers = [Driver(0, Location(0, 0), 0.0), Driver(1, Location(4000, 0), 0.0)]
    orders = [order(0, Location(0, 500), price=10.0),
              order(1, Location(4000, 1500), price=15.0)]
    ds = make_dataset(drivers, orders)
    env = DispatchEnv(ds, reward_mode=reward_mode, seed=0)
    s = env.reset()
    rows = {(p.order_id, p.driver_id): i for i, p in enumerate(s.pool)}
    return env, s, rows


def test_finalize_tdi_reward_sums_prices():
    env, s, rows = _two_pair_env("TDI")
    reward, _, done = env.finalize_batch([rows[(0, 0)], rows[(1, 1)]], [], state=s)
    assert reward == 25.0
    assert not done


def test_finalize_apd_reward_negative_km():
    env, s, rows = _two_pair_env("APD")
    reward, _, _ = env.finalize_batch([rows[(0, 0)], rows[(1, 1)]], [], state=s)
    assert reward == -2.0  # (500 + 1500) m -> 2.0 km


def test_finalize_zero_assignments_zero_reward():
    env, s, _ = _two_pair_env("TDI")
    reward, _, _ = env.finalize_batch([], list(range(s.n_pairs)), state=s)
    assert reward == 0.0


def test_episode_return_matches_ledger_tdi():
    env, s, _ = _two_pair_env("TDI")
    total = 0.0
    done = False
    state = s
    rng = np.random.default_rng(0)
    while not done:
        take = [int(rng.integers(0, state.n_pairs))] if state.n_pairs else []
        reward, state, done = env.finalize_batch(take, [])
        total += reward
    ledger = env.sim.ledger
    assert total == sum(ledger.batch_income_sums)
    assert env.metrics().tdi == ledger.sum_income


def test_done_after_episode_length():
    ds = make_dataset([], [], episode_length_s=6.0, batch_window_s=2.0)
    env = DispatchEnv(ds, seed=0)
    env.reset()
    flags = []
    for _ in range(3):
        _, _, done = env.finalize_batch([], [])
        flags.append(done)
    assert flags == [False, False, True]
    assert env.sim.terminated


def test_pool_size_varies_across_batches():
    # two disjoint windows with different entity counts -> differing pool sizes
    drivers = [Driver(0, Location(0, 0), 0.0), Driver(1, Location(60, 0), 2.5),
               Driver(2, Location(0, 60), 2.5)]
    orders = [order(0, Location(30, 0), appear=0.0), order(1, Location(0, 30), appear=2.5)]
    env = DispatchEnv(make_dataset(drivers, orders), seed=0)
    s0 = env.reset()
    assert s0.n_pairs == 1
    _, s1, _ = env.finalize_batch([], [0], state=s0)
    assert s1.n_pairs == 6  # 3 drivers x 2 orders after the second window

"""Step through the two-layer decision process by hand: observe a batch's
candidate pool, pick pairs one at a time (watching related rows vanish),
hold the rest, and see the episode metrics at the end.

Run:  python3 demos/03_two_layer_environment.py
"""

from micod.core import Driver, EpisodeConfig, Location, Order
from micod.env import BatchEnd, DispatchEnv, SubAction, apply_subaction, initial_substate
from micod.scenario import Dataset

cfg = EpisodeConfig(episode_length_s=20.0, batch_window_s=2.0)
drivers = [Driver(0, Location(500, 500), 0.0),
           Driver(1, Location(600, 480), 0.0)]
orders = [Order(0, Location(520, 700), Location(2000, 2000), 6.0, 0.0, 60.0, 120.0),
          Order(1, Location(800, 500), Location(2500, 900), 9.0, 0.0, 60.0, 150.0)]
env = DispatchEnv(Dataset(config=cfg, drivers=drivers, orders=orders), seed=0)
state = env.reset()

print(f"batch 0 pool ({state.n_pairs} candidate pairs):")
for i, pair in enumerate(state.pool):
    print(f"  row {i}: order {pair.order_id} x driver {pair.driver_id} "
          f"pickup={pair.features[0]:.3f} price={pair.features[1]:.3f}")

# Inner layer: select row 0, then hold whatever remains.
sub = initial_substate(state)
sub = apply_subaction(sub, SubAction(h=0, c=0))
print(f"\nafter selecting row 0, available rows: {list(sub.remaining_indices())}")
end = apply_subaction(sub, SubAction(h=1))
assert isinstance(end, BatchEnd)
print(f"hold ends the batch: selected={end.selected} held={end.held}")

reward, state, done = env.finalize_batch(end.selected, end.held)
print(f"\nbatch reward (order prices, income task): {reward}")

# Let the rest of the episode run with nothing else dispatched.
while not done:
    reward, state, done = env.finalize_batch([], list(range(state.n_pairs)))

report = env.metrics()
print("\nepisode metrics:")
for key, value in report.to_flat_dict().items():
    print(f"  {key:>18}: {value}")

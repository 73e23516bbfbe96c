"""DDIM inversion followed by resampling should give the source video back.

Editing starts from the inverted latent, so if the round trip drifts, every
edit inherits that drift. More steps means a smaller discretization error.
"""
from _common import model
from attnedit.data import make_dataset
from attnedit.experiments import round_trip_error
from attnedit.scheduler import default_schedule

m = model()
held, _ = make_dataset(4, seed=77)
for steps in (10, 25, 50, 100):
    err = round_trip_error(m, held, default_schedule(), steps)
    print(f"{steps:4d} steps: relative L2 error {err:.4f}")

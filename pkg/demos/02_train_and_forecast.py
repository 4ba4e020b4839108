"""Train both stages on a small synthetic set and forecast a held-out walk.

Sizes are scaled down so the script finishes in about a minute on one core.
"""
from dataclasses import replace

import numpy as np

from contact_forecast.synth import SynthSpec, generate_synthetic
from contact_forecast.train import (TrainConfig, evaluate, prepare_samples,
                                    train_contact_stage, train_motion_stage)

cfg = TrainConfig(past=10, future=20, dct_l=20, sample_count=256, voxel_res=8, hidden=32,
                  window_stride=20, epochs=3, seed=0)


def pairs(seeds):
    out = []
    for i in seeds:
        motion = ("straight-walk", "turn")[i % 2]
        scene = "corridor" if motion == "straight-walk" else "room-with-box"
        out.append(generate_synthetic(SynthSpec(scene=scene, motion=motion, frames=90, seed=i)))
    return out


train = prepare_samples(pairs(range(8)), cfg)
test = prepare_samples(pairs(range(100, 104)), cfg)
print(f"{len(train)} training windows, {len(test)} test windows")

contact = train_contact_stage(train, cfg)
print("contact stage epoch losses:", np.round(contact.epoch_losses, 5))
# the motion stage is cheap per step, so it gets more epochs
motion = train_motion_stage(train, replace(cfg, epochs=30))
print("motion stage epoch losses:", np.round(motion.epoch_losses, 4))

for mode in ("predicted", "gt", "none"):
    rep = evaluate(test, contact.net, motion.net, cfg, mode=mode)
    print(rep.to_table())

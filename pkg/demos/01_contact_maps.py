"""Contact maps on a synthetic corridor walk.

Generates a scene and a walk, computes per-frame contact maps, extracts
contact points and reports which joints touch the scene over time.
"""
import numpy as np

from contact_forecast.geom import contact_sequence, extract_contact_points, sample_scene_points
from contact_forecast.synth import JOINT_NAMES, SynthSpec, generate_synthetic

scene, motion = generate_synthetic(SynthSpec(scene="corridor", motion="straight-walk", frames=60))
print(f"scene: {len(scene)} points, motion: {motion.num_frames} frames x {motion.num_joints} joints")

# keep the points within 2.5 m of the last pelvis position, as the networks do
pts = sample_scene_points(scene, motion.roots[-1], count=2000, seed=0)
maps = contact_sequence(motion, pts)
Q = extract_contact_points(maps, pts)
print(f"contact maps: {maps.shape}, values in [{maps.min():.3g}, {maps.max():.3g}]")

share = Q[..., 3].mean(axis=0)
for j in np.flatnonzero(share):
    print(f"  {JOINT_NAMES[j]:<10s} in contact on {100 * share[j]:5.1f}% of frames")

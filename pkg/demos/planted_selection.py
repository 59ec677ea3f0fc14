"""Which visual tokens does self-reflection keep?

We plant an event in a synthetic video: a block of frames and patches whose
features are shifted along one direction. The direction is chosen so that
the prompt's reflection token attends to it. Then we sweep the shift size
``beta`` and watch how many of the planted tokens survive top-k selection.
At ``beta = 0`` the selection is essentially a coin flip; past the
calibrated value nearly every planted token is kept.
"""

import numpy as np

from selfres import ModelConfig, init_weights, run_pipeline
from selfres.oracle import PlantedWorkload, calibrate_beta, pipeline_recall, planted_labels

weights = init_weights(ModelConfig())
workload = PlantedWorkload()          # 64 frames, 8 patches, T=16, S=8 -> R=2
direction = workload.direction(weights)

print(f"R = {workload.num_paths} paths, keep K = {workload.keep_count()} "
      f"of {workload.num_paths * workload.visual_per_path} visual tokens")
print(f"chance recall = {workload.chance_recall():.3f}\n")

print(" beta   recall (seeds 100..109)")
for beta in (0.0, 0.5, 1.0, 2.0, 3.0, 4.0):
    recalls = []
    for seed in range(100, 110):
        video = workload.video(weights, seed, beta, direction)
        res = run_pipeline(video, workload.prompt, weights, workload.frames,
                           workload.segment, max_new=1)
        recalls.append(pipeline_recall(res, workload, video))
    print(f"{beta:5.2f}   {np.mean(recalls):.3f}")

cal = calibrate_beta(workload, weights, 0.99, range(20))
print(f"\nsmallest beta with pooled recall >= 0.99 on seeds 0..19: {cal.beta}")
print("search trace (beta, recall):")
for b, r in cal.trace:
    print(f"  {b:8.5f}  {r:.4f}")

# How many planted tokens survive, and how many background tokens fill the rest?
video = workload.video(weights, 100, cal.beta, direction)
res = run_pipeline(video, workload.prompt, weights, workload.frames, workload.segment)
planted = planted_labels(workload, video)
kept = np.isin(planted, res.selected).sum()
print(f"\nseed 100, beta={cal.beta}: kept {kept}/{len(planted)} planted tokens, "
      f"{len(res.selected) - kept} background tokens fill the remaining slots")

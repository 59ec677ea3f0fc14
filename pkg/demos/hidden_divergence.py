"""Do the paths agree about the text?

Every path starts with the same system tokens, so under causal attention
their hidden states are identical at every layer. The query tokens come
after each path's own visual tokens, so they can drift apart. We measure
that drift per layer and write the full table to CSV.
"""

import sys

import numpy as np

from selfres import ModelConfig, build_path_sequence, init_weights, self_reflect, split_paths
from selfres.oracle import PlantedWorkload, hidden_divergence
from selfres.vision import encode_and_project, sample_frames_uniform

weights = init_weights(ModelConfig())
wl = PlantedWorkload(frames=32, segment=8)   # R = 4
video = wl.video(weights, seed=0, beta=2.0)
visual = encode_and_project(video, sample_frames_uniform(video.num_frames, wl.frames), weights)
base_paths = [build_path_sequence(weights, wl.prompt, v, i)
              for i, v in enumerate(split_paths(visual, wl.segment))]

print(" l   system max L2   query mean L2   query min cosine")
for layer in range(1, weights.config.num_layers + 1):
    paths, _ = self_reflect(base_paths, weights, layer)
    report = hidden_divergence(paths, layer)
    sys_l2 = max(r.l2 for r in report.for_segment("system"))
    q = report.for_segment("query")
    print(f"{layer:2d}   {sys_l2:13.3g}   {np.mean([r.l2 for r in q]):13.4f}   "
          f"{min(r.cosine for r in q):16.4f}")
    if layer == weights.config.reflection_layer:
        out = sys.argv[1] if len(sys.argv) > 1 else "divergence.csv"
        report.to_csv(out)
        print(f"     (layer {layer} table written to {out})")

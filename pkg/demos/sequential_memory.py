"""Batch versus sequential execution of reflection paths.

Batch runs every path at once, so all their activations and caches are live
together. Sequential runs one path at a time and keeps only what
convergence needs from the finished ones. Results are bit-identical; the
counted peak of live activation bytes is lower when running sequentially.
Regular mode keeps only scores from a finished path, while smooth mode must
keep its layer-l hidden states and lower-layer cache, so the saving is
smaller there.
"""

import numpy as np

from selfres import ModelConfig, init_weights, run_pipeline
from selfres.oracle import PlantedWorkload

weights = init_weights(ModelConfig())

print(" R  mode      batch peak   seq peak   identical")
for R in (2, 3, 4):
    wl = PlantedWorkload(frames=8 * R, segment=8)
    video = wl.video(weights, seed=R, beta=2.5)
    for mode in ("regular", "smooth"):
        a = run_pipeline(video, wl.prompt, weights, 8 * R, 8, mode=mode, execution="batch")
        b = run_pipeline(video, wl.prompt, weights, 8 * R, 8, mode=mode, execution="seq")
        same = a.output_ids == b.output_ids and np.array_equal(a.final_logits, b.final_logits)
        print(f"{R:2d}  {mode:8s} {a.counters.peak_live_activation_bytes:11d} "
              f"{b.counters.peak_live_activation_bytes:10d}   {same}")

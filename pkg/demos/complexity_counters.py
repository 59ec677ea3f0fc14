"""Attention work and layer invocations, counted rather than timed.

Splitting T frames into R paths of S frames shrinks every attention map
from n^2 to R * (n/R)^2 = n^2 / R. We compare the counted
multiply-accumulates of one dense baseline context against the reflective
prefill, then show how many layer invocations each convergence mode needs.
"""

from selfres import ModelConfig, Prompt, init_weights, run_pipeline
from selfres.oracle import PlantedWorkload, baseline_run

weights = init_weights(ModelConfig())
L = weights.config.num_layers
prompt = Prompt((1,), (10,))  # tiny prompt so visual tokens dominate

print("per-layer attention MACs, 16 patches per frame, S = 8")
print(" R   baseline      reflective    ratio")
for R in (1, 2, 4):
    wl = PlantedWorkload(num_frames=64, patches=16, frames=8 * R, segment=8, prompt=prompt)
    video = wl.video(weights, seed=0, beta=2.0)
    base = baseline_run(video, prompt, weights, 8 * R, max_new=1)
    res = run_pipeline(video, prompt, weights, 8 * R, 8, layer=1, max_new=1)
    b = base.counters.attention_macs // L
    r = res.reflection_counters.attention_macs
    print(f"{R:2d}  {b:12d}  {r:12d}   {b / r:.3f}")

print("\nlayer invocations with R = 2, L = 8")
print(" l   regular (2l+L)   smooth (2l+L-l)")
wl = PlantedWorkload()
video = wl.video(weights, seed=0, beta=2.0)
for layer in range(1, L + 1):
    counts = [run_pipeline(video, wl.prompt, weights, 16, 8, layer=layer, mode=m,
                           max_new=1).counters.layer_invocations
              for m in ("regular", "smooth")]
    print(f"{layer:2d}   {counts[0]:14d}   {counts[1]:15d}")

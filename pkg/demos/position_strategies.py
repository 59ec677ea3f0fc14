"""Four ways to number the converged sequence.

After selection the kept visual tokens come from different paths, each of
which numbered its tokens from zero. The converged context can renumber
everything (reassigned), keep the path-local numbers (dup, which collides
across paths), offset them by path (inc), or collapse all visual tokens onto
one position (single). Selection happens first, so the kept tokens are the
same under every strategy. Only the numbering changes, and through the
rotary encoding it may change the decoded ids.
"""

from selfres import ModelConfig, init_weights, run_pipeline
from selfres.oracle import PlantedWorkload

weights = init_weights(ModelConfig())
wl = PlantedWorkload(frames=24, segment=8)   # R = 3
video = wl.video(weights, seed=3, beta=2.0)

for strategy in ("reassigned", "dup", "inc", "single"):
    res = run_pipeline(video, wl.prompt, weights, wl.frames, wl.segment,
                       position_strategy=strategy, max_new=6)
    pos = res.context.positions
    print(f"{strategy:>10}: first 12 positions {pos[:12].tolist()}")
    print(f"{'':>10}  distinct {len(set(pos.tolist()))} of {len(pos)}, "
          f"output ids {res.output_ids}")

"""Train the desk-scale model for a few epochs and denoise held-out spheres and tori.

Takes a minute or two on a laptop. Pass an epoch count to change the budget.
"""

import sys
import time

from heatflow import ResampleRequest, SynthSpec, compare, resample, synth_shape, train
from heatflow.pipeline import smoke_config

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 20
t0 = time.perf_counter()
model = train(smoke_config(epochs=epochs))
print(f"trained {epochs} epochs in {time.perf_counter() - t0:.1f}s")
print("epoch losses:", " ".join(f"{v:.4g}" for v in model.epoch_losses))

print("\nshape   noise   CD in      CD out")
for i, shape in enumerate(("sphere", "torus") * 2):
    spec = SynthSpec(shape, n=128, noise=0.02, seed=9000 + i)
    clean, noisy = synth_shape(spec)
    out = resample(model, ResampleRequest(noisy, seed=i))
    before = compare(noisy, clean).chamfer
    after = compare(out, clean).chamfer
    print(f"{shape:7s} {spec.noise:5.2f}  {before:.3e}  {after:.3e}")

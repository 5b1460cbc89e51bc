# %% [markdown]
# # A tour of one instance
#
# Plant a small pyramid, run the untrained engine on it, then look at what
# the trace records: per-tick confidence, the regions kept at each
# transition, and the encoder bill.

# %%
import numpy as np

from pathseek.dynamics import ModelConfig, ModelParams
from pathseek.pyramid import EncoderStub, PyramidConfig, plant_instance
from pathseek.reasoner import ReasonerConfig, confidence, infer

# %%
pc = PyramidConfig(coarse_grid=4, num_scales=3)
inst = plant_instance(pc, 7)
print("label", inst.label, "informative finest regions", len(inst.informative_set))
print("regions per scale", [pc.coarse_grid ** 2 * 4 ** s for s in range(pc.num_scales)])

# %% [markdown]
# Confidence is one minus the normalised entropy: zero for a uniform guess,
# one for a certain one.

# %%
for p in ([1 / 3] * 3, [0.8, 0.1, 0.1], [1.0, 0.0, 0.0]):
    print(p, round(confidence(np.array(p)), 4))

# %%
params = ModelParams(ModelConfig(seed=0))
stub = EncoderStub(pc)
traj = infer(inst, params, ReasonerConfig(confidence_threshold=0.9, top_k=4), stub=stub)
print("stop:", traj.stop, "at scale", traj.stop_scale)
print("encoder calls per scale:", traj.budget.encoder_calls)
print("kept at each transition:", [len(s) for s in traj.selections])

# %%
curve = [r.confidence for r in traj.records]
print("confidence by tick:", np.round(curve, 3))

# %% [markdown]
# With a threshold above one the engine can never stop early, so the bill is
# the full coarse grid plus K children of each kept region at every finer scale.

# %%
full = infer(inst, params, ReasonerConfig(confidence_threshold=1.01, top_k=4), stub=stub)
print(full.budget.encoder_calls, "of", pc.total_regions)

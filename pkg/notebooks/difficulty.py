# %% [markdown]
# # Threshold and difficulty
#
# Train the desk engine, then sweep the confidence threshold and
# compare stopping depth on an easy and a hard benchmark. Takes a few
# minutes on a laptop CPU.

# %%
from dataclasses import replace

from pathseek.bench import run_inference, scale_histogram
from pathseek.budget import total
from pathseek.config import build_config
from pathseek.dynamics import ModelParams
from pathseek.pyramid import EncoderStub, FeatureBank, make_manifest
from pathseek.training import train

# %%
cfg = build_config("desk")
pc = cfg.pyramid
manifest = make_manifest(pc, cfg.bench.num_instances, cfg.bench.fractions)
split = {k: [i for _, i in manifest.instances(k)] for k in ("train", "val", "test")}
stub, bank = EncoderStub(pc), FeatureBank()

params = ModelParams(cfg.model)
train(split["train"], params, cfg.training, cfg.reasoner, val=split["val"], bank=bank, stub=stub)
params.eval()

# %% [markdown]
# Raising the threshold can only make the engine look further, so the mean
# number of encoded regions climbs with it.

# %%
for delta in (0.1, 0.5, 0.8, 0.9, 1.0):
    rc = replace(cfg.reasoner, confidence_threshold=delta)
    trajs = run_inference(split["test"], params, rc, stub, bank=bank)
    mean = total(t.budget for t in trajs).total_encoder_calls / len(trajs)
    print(f"delta {delta:.1f}: {mean:6.1f} regions, {scale_histogram(trajs, pc.num_scales)}")

# %% [markdown]
# Lower coarse-scale signal means fewer instances can be settled early.

# %%
for snr in (0.8, 0.1):
    hard = replace(pc, coarse_snr=snr)
    test = [i for _, i in make_manifest(hard, cfg.bench.num_instances, cfg.bench.fractions).instances("test")]
    hist = scale_histogram(run_inference(test, params, cfg.reasoner, EncoderStub(hard)), pc.num_scales)
    print(f"snr {snr}: {hist}")

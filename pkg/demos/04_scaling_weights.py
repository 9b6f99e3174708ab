# Train a small model for a few epochs and watch alpha/beta/lambda drift from 1.
from vbb.harness.config import RunConfig
from vbb.harness.training import train

cfg = RunConfig.from_text("""
task=quadrant
image_size=16
patch_size=4
depths=1,1
channels=12,24
heads=3,3
window_sizes=4,2
pool_sizes=2,2
downsample=0,1
samples=128
test_samples=64
epochs=6
""")
result = train(cfg)
print("train accuracy per epoch:", [round(a, 3) for a in result.train_accuracy])
for i, (a, b, l) in enumerate(result.model.scaling_weight_stats()):
    print(f"stage {i}: alpha={a:.3f} beta={b:.3f} lambda={l:.3f}")

# %% [markdown]
# # Train on field scenes, test on degraded "aerial" scenes
#
# Synthetic field images stand in for the ground-level training set.
# The aerial domain is imitated by downsampling, blurring and a slight colour
# cast on held-out scenes. Runs in under a minute on one CPU core.

# %%
import numpy as np

from cfsg import imaging
from cfsg import network as net
from cfsg.cli import deterministic_preprocess, tiles_from_scenes
from cfsg.evaluation import ConfusionMatrix, metrics, report
from cfsg.training import TrainConfig, compute_class_weights, dataset_class_counts, train

CLASSES = ["soil", "crop", "weed"]
spec = imaging.SceneSpec(width=128, height=128)
params = imaging.PreprocessParams()

# %% data
train_scenes = [imaging.synth_scene(spec.with_seed(s)) for s in range(60)]
val_scenes = [imaging.synth_scene(spec.with_seed(10_000 + s)) for s in range(12)]
train_tiles = tiles_from_scenes(train_scenes, params, seed=0)
val_tiles = tiles_from_scenes(val_scenes, params, seed=1)
counts = dataset_class_counts(train_tiles, 3)
print("pixel counts:", dict(zip(CLASSES, counts.tolist())))
print("class weights:", np.round(compute_class_weights(counts), 3))

# %% training
def show(record, _model):
    print(f"epoch {record.epoch}: train {record.train_loss:.4f}  val {record.val_loss:.4f}  "
          f"mIoU {record.val_miou:.3f}  lr {record.lr:g}")

model, history = train(train_tiles, val_tiles, TrainConfig(batch_size=16, max_epochs=4),
                       net.ArchitectureConfig(), on_epoch=show)

# %% in-domain vs shifted evaluation
def score(scenes, shift):
    cm = ConfusionMatrix(3)
    for image, mask in scenes:
        if shift:
            image = imaging.domain_shift(image)
        img, msk = deterministic_preprocess(image, mask, params)
        probs = net.forward(model, img.transpose(2, 0, 1)[None].astype(np.float32)).probabilities
        cm.accumulate(probs[0].argmax(0), msk)
    return cm

test_scenes = [imaging.synth_scene(spec.with_seed(20_000 + s)) for s in range(12)]
for label, shift in (("field", False), ("aerial-like", True)):
    cm = score(test_scenes, shift)
    print(f"\n{label}: mIoU {metrics(cm).mean_iou:.3f}")
    print(report(cm, CLASSES, fmt="text"))

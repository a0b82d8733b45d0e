# %% [markdown]
# # Layers and the encoder-decoder
#
# A walk through the building blocks: convolution, pooling with stored
# argmax offsets, unpooling, and the full 29-convolution network.

# %%
import numpy as np

from cfsg import tensor as T
from cfsg import network as net

rng = np.random.default_rng(0)

# %% a 3x3 convolution keeps the spatial size (pad 1)
x = rng.random((1, 3, 8, 8), dtype=np.float32)
w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
y = T.conv2d(x, w, np.zeros(4, np.float32))
print("conv:", x.shape, "->", y.shape)

# %% max pooling remembers where each maximum came from
pooled, offsets = T.max_pool_2x2(y)
restored = T.max_unpool_2x2(pooled, offsets)
print("pool:", pooled.shape, "offsets dtype:", offsets.dtype)
print("non-zeros after unpooling:", np.count_nonzero(restored), "of", restored.size)

# %% the desk-scale network
cfg = net.ArchitectureConfig()
model = net.build_model(cfg, seed=0)
weights, bn, total = net.parameter_count(model)
print(f"trainable={weights:,} running stats={bn:,} total={total:,}")

for spec in net.conv_plan(cfg)[:3] + net.conv_plan(cfg)[-3:]:
    print(spec)

# %% forward pass on one 64x64 tile
tile = rng.random((1, 3, 64, 64), dtype=np.float32)
trace = net.forward(model, tile)
probs = trace.probabilities
print("probabilities:", probs.shape, "sum over classes:", float(probs.sum(axis=1).mean()))

# %% the same architecture at full width
big = net.ArchitectureConfig.paper_scale()
print("full-width parameter count:", net.parameter_count(net.build_model(big, seed=0)))

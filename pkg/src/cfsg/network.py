"""Encoder-decoder segmentation network with index unpooling and skip concatenation.

Layout (paper-default counts): five encoder stages of 3x3 conv + BN + ReLU
blocks, each followed by a 2x2 max pool whose argmax offsets are kept.
The decoder visits the stages deepest-first: unpool with the stage's
indices, concatenate the stage's last pre-pool activation, then run its
conv blocks. The last conv of each decoder stage narrows the channel count
to the next (shallower) stage's width; the very last conv emits class
logits and has no batch norm.

Convs are numbered ``conv1`` .. ``conv29`` in execution order. Capturable
activation names are ``convK`` (post-ReLU; logits for the final conv),
``poolS`` / ``unpoolS`` for stage S in 1..5, and ``bottleneck`` (= pool5).
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import DTYPE, BatchNormState

NUM_STAGES = 5


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ArchitectureConfig:
    stage_widths: tuple = (8, 16, 32, 32, 32)
    convs_per_encoder_stage: tuple = (2, 2, 3, 3, 4)
    convs_per_decoder_stage: tuple = (4, 3, 3, 2, 3)
    num_classes: int = 3
    skip_connections: bool = True
    in_channels: int = 3

    def __post_init__(self):
        for name in ("stage_widths", "convs_per_encoder_stage", "convs_per_decoder_stage"):
            value = tuple(int(v) for v in getattr(self, name))
            object.__setattr__(self, name, value)
            if len(value) != NUM_STAGES:
                raise ConfigError(f"{name} needs {NUM_STAGES} entries, got {len(value)}")
            if min(value) < 1:
                raise ConfigError(f"{name} entries must be positive, got {value}")
        if sum(self.convs_per_encoder_stage) != 14:
            raise ConfigError("encoder must have 14 convolutions in total")
        if sum(self.convs_per_decoder_stage) != 15:
            raise ConfigError("decoder must have 15 convolutions in total")
        if self.num_classes < 1 or self.in_channels < 1:
            raise ConfigError("num_classes and in_channels must be positive")

    @classmethod
    def paper_scale(cls, **kw) -> "ArchitectureConfig":
        return cls(stage_widths=(64, 128, 256, 512, 512), **kw)

    @classmethod
    def desk_scale(cls, **kw) -> "ArchitectureConfig":
        return cls(**kw)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "ArchitectureConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**data)

    @property
    def layer_count(self) -> int:
        return sum(self.convs_per_encoder_stage) + sum(self.convs_per_decoder_stage) + 2 * NUM_STAGES


@dataclass(frozen=True)
class ConvSpec:
    index: int          # 1-based execution order
    in_channels: int
    out_channels: int
    stage: int          # 0-based resolution stage
    decoder: bool
    has_bn: bool

    @property
    def name(self) -> str:
        return f"conv{self.index}"


def conv_plan(config: ArchitectureConfig) -> list[ConvSpec]:
    widths = config.stage_widths
    specs = []
    cin = config.in_channels
    k = 1
    for s in range(NUM_STAGES):
        for _ in range(config.convs_per_encoder_stage[s]):
            specs.append(ConvSpec(k, cin, widths[s], s, False, True))
            cin = widths[s]
            k += 1
    for i, count in enumerate(config.convs_per_decoder_stage):
        s = NUM_STAGES - 1 - i
        if config.skip_connections:
            cin += widths[s]
        for j in range(count):
            last = j == count - 1
            if not last:
                cout = widths[s]
            elif s > 0:
                cout = widths[s - 1]
            else:
                cout = config.num_classes
            is_final = last and s == 0
            specs.append(ConvSpec(k, cin, cout, s, True, not is_final))
            cin = cout
            k += 1
    return specs


@dataclass
class Model:
    config: ArchitectureConfig
    params: dict            # name -> float32 array, trainable, insertion-ordered
    buffers: dict           # batch-norm running statistics, non-trainable
    seed: int = 0
    plan: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.plan:
            self.plan = conv_plan(self.config)

    def bn_state(self, index: int) -> BatchNormState:
        # shares storage with params/buffers so running-stat updates land in the model
        return BatchNormState(
            gamma=self.params[f"bn{index}.gamma"],
            beta=self.params[f"bn{index}.beta"],
            running_mean=self.buffers[f"bn{index}.running_mean"],
            running_var=self.buffers[f"bn{index}.running_var"],
        )

    def copy(self) -> "Model":
        return Model(self.config, copy.deepcopy(self.params), copy.deepcopy(self.buffers), self.seed)

    def layer_names(self) -> list[str]:
        names = [spec.name for spec in self.plan]
        names += [f"pool{s}" for s in range(1, NUM_STAGES + 1)]
        names += [f"unpool{s}" for s in range(1, NUM_STAGES + 1)]
        return names + ["bottleneck"]


def build_model(config: ArchitectureConfig, seed: int = 0) -> Model:
    """He-initialised model: weights ~ N(0, 2 / (9 * Cin)), biases 0, BN identity."""
    rng = np.random.default_rng(seed)
    params, buffers = {}, {}
    for spec in conv_plan(config):
        std = np.sqrt(2.0 / (spec.in_channels * 9))
        shape = (spec.out_channels, spec.in_channels, 3, 3)
        params[f"{spec.name}.weight"] = (rng.standard_normal(shape) * std).astype(DTYPE)
        params[f"{spec.name}.bias"] = np.zeros(spec.out_channels, DTYPE)
        if spec.has_bn:
            params[f"bn{spec.index}.gamma"] = np.ones(spec.out_channels, DTYPE)
            params[f"bn{spec.index}.beta"] = np.zeros(spec.out_channels, DTYPE)
            buffers[f"bn{spec.index}.running_mean"] = np.zeros(spec.out_channels, DTYPE)
            buffers[f"bn{spec.index}.running_var"] = np.ones(spec.out_channels, DTYPE)
    return Model(config, params, buffers, seed)


def parameter_count(model: Model) -> tuple[int, int, int]:
    trainable = sum(int(p.size) for p in model.params.values())
    non_trainable = sum(int(b.size) for b in model.buffers.values())
    return trainable, non_trainable, trainable + non_trainable


@dataclass
class ForwardTrace:
    logits: np.ndarray
    probabilities: np.ndarray
    activations: dict
    mode: str
    cache: dict = field(default_factory=dict, repr=False)


def _check_batch(model: Model, batch: np.ndarray) -> None:
    if batch.ndim != 4:
        raise T.ShapeError("forward", "batch rank", 4, batch.ndim)
    if batch.shape[1] != model.config.in_channels:
        raise T.ShapeError("forward", "input channels", model.config.in_channels, batch.shape[1])
    for axis, name in ((2, "height"), (3, "width")):
        if batch.shape[axis] % 32 or batch.shape[axis] == 0:
            raise T.ShapeError("forward", f"{name} divisibility by 32", "multiple of 32",
                               batch.shape[axis])


def forward(model: Model, batch: np.ndarray, mode: str = "infer", capture=()) -> ForwardTrace:
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    _check_batch(model, batch)
    capture = set(capture)
    unknown = capture - set(model.layer_names())
    if unknown:
        raise KeyError(f"unknown layer names: {sorted(unknown)}")
    keep = mode == "train"
    acts, cache = {}, {"convs": {}, "indices": {}, "skips": {}}
    # float32 unless the caller deliberately passes float64 (gradient checks)
    x = np.ascontiguousarray(batch, dtype=np.result_type(batch.dtype, DTYPE))

    def block(spec: ConvSpec, x: np.ndarray) -> np.ndarray:
        z = T.conv2d(x, model.params[f"{spec.name}.weight"], model.params[f"{spec.name}.bias"])
        if not spec.has_bn:
            if keep:
                cache["convs"][spec.index] = (x, z, None)
            return z
        y = T.batch_norm(z, model.bn_state(spec.index), mode)
        if keep:
            cache["convs"][spec.index] = (x, z, y)
        a = T.relu(y)
        if spec.name in capture:
            acts[spec.name] = a
        return a

    specs = iter(model.plan)
    for s in range(NUM_STAGES):
        for _ in range(model.config.convs_per_encoder_stage[s]):
            x = block(next(specs), x)
        cache["skips"][s] = x
        x, idx = T.max_pool_2x2(x)
        cache["indices"][s] = idx
        if f"pool{s + 1}" in capture:
            acts[f"pool{s + 1}"] = x
    if "bottleneck" in capture:
        acts["bottleneck"] = x
    for i, count in enumerate(model.config.convs_per_decoder_stage):
        s = NUM_STAGES - 1 - i
        x = T.max_unpool_2x2(x, cache["indices"][s])
        if f"unpool{s + 1}" in capture:
            acts[f"unpool{s + 1}"] = x
        if model.config.skip_connections:
            x = T.concat_channels(x, cache["skips"][s])
        for _ in range(count):
            x = block(next(specs), x)
    logits = x
    if model.plan[-1].name in capture:
        acts[model.plan[-1].name] = logits
    if not keep:
        cache = {}
    return ForwardTrace(logits, T.softmax_channels(logits), acts, mode, cache)


def backward(model: Model, trace: ForwardTrace, grad_logits: np.ndarray) -> dict:
    """Gradients of every trainable parameter, keyed and shaped like ``model.params``."""
    if trace.mode != "train" or not trace.cache:
        raise ValueError("backward needs a trace produced by forward(..., mode='train')")
    if grad_logits.shape != trace.logits.shape:
        raise T.ShapeError("backward", "grad_logits shape", trace.logits.shape, grad_logits.shape)
    grads = {}
    convs = trace.cache["convs"]

    def block_grad(spec: ConvSpec, g: np.ndarray) -> np.ndarray:
        x, z, y = convs[spec.index]
        if spec.has_bn:
            g = T.relu_grad(y, g)
            g, dgamma, dbeta = T.batch_norm_grad(z, model.bn_state(spec.index), g)
            grads[f"bn{spec.index}.gamma"] = dgamma
            grads[f"bn{spec.index}.beta"] = dbeta
        gx, gw, gb = T.conv2d_grad(x, model.params[f"{spec.name}.weight"], g,
                                   need_input_grad=spec.index > 1)
        grads[f"{spec.name}.weight"] = gw
        grads[f"{spec.name}.bias"] = gb
        return gx

    plan = model.plan
    n_enc = sum(model.config.convs_per_encoder_stage)
    dec_specs = plan[n_enc:]
    skip_grads = {}
    g = np.asarray(grad_logits, dtype=trace.logits.dtype)
    pos = len(dec_specs)
    for i in reversed(range(NUM_STAGES)):
        s = NUM_STAGES - 1 - i
        count = model.config.convs_per_decoder_stage[i]
        for spec in reversed(dec_specs[pos - count:pos]):
            g = block_grad(spec, g)
        pos -= count
        if model.config.skip_connections:
            g, skip_grads[s] = T.split_channels(g, g.shape[1] - model.config.stage_widths[s])
        g = T.max_unpool_2x2_grad(g, trace.cache["indices"][s])
    pos = n_enc
    for s in reversed(range(NUM_STAGES)):
        g = T.max_pool_2x2_grad(g, trace.cache["indices"][s])
        if s in skip_grads:
            g = g + skip_grads[s]
        count = model.config.convs_per_encoder_stage[s]
        for spec in reversed(plan[pos - count:pos]):
            g = block_grad(spec, g)
        pos -= count
    return {name: grads[name] for name in model.params}


def extract_feature_maps(model: Model, image: np.ndarray, layer_name: str) -> list[np.ndarray]:
    """Per-channel activation rasters of one image, each min-max scaled to [0, 1].

    ``image`` is (H, W, 3) in [0, 1]. A constant channel maps to all zeros.
    """
    if layer_name not in model.layer_names():
        raise KeyError(f"unknown layer {layer_name!r}")
    batch = np.asarray(image, dtype=DTYPE).transpose(2, 0, 1)[None]
    act = forward(model, batch, "infer", capture=[layer_name]).activations[layer_name][0]
    rasters = []
    for channel in act:
        lo, hi = float(channel.min()), float(channel.max())
        if hi > lo:
            rasters.append(((channel - lo) / (hi - lo)).astype(DTYPE))
        else:
            rasters.append(np.zeros_like(channel, dtype=DTYPE))
    return rasters

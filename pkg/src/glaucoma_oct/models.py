"""Model construction, execution and weight transport.

A :class:`ModelSpec` is a declarative layer list; a :class:`ModelState`
binds it to parameter values and a per-layer trainable mask. Two families
are provided: the four-block network trained from scratch and the VGG16/19
conv bases with a global-max-pool top model for fine-tuning.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .errors import (
    ConfigurationError,
    DimensionError,
    MissingTensorError,
    TensorShapeError,
    UnexpectedTensorError,
)
from .tensor import DTYPE, random_init

NUM_CLASSES = 2
SCRATCH_INPUT = (496, 768, 1)
VGG_INPUT = (248, 384, 3)
VGG_BLOCKS = {
    16: (2, 2, 3, 3, 3),
    19: (2, 2, 4, 4, 4),
}
VGG_WIDTHS = (64, 128, 256, 512, 512)
SCRATCH_WIDTHS = (32, 64, 128, 256)


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | pool | gmp | dropout | dense
    name: str
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 3
    rate: float = 0.0
    block: int = 0

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv", "dense")

    def param_shapes(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        if self.kind == "conv":
            k = self.kernel_size
            return (k, k, self.in_channels, self.out_channels), (self.out_channels,)
        if self.kind == "dense":
            return (self.in_channels, self.out_channels), (self.out_channels,)
        raise ValueError(f"{self.kind} layer has no parameters")


@dataclass(frozen=True)
class ModelSpec:
    arch: str  # scratch | vgg16 | vgg19
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    frozen_blocks: int = 0

    @property
    def param_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.has_params]

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def shape_table(self) -> list[tuple[str, tuple[int, ...]]]:
        """(layer name, output shape) for the input and every layer, in order."""
        h, w, c = self.input_shape
        rows: list[tuple[str, tuple[int, ...]]] = [("input", (h, w, c))]
        vec = None
        for l in self.layers:
            if l.kind == "conv":
                if vec is not None or l.in_channels != c:
                    raise ConfigurationError(f"{l.name}: expects {l.in_channels} channels, gets {c}")
                c = l.out_channels
                rows.append((l.name, (h, w, c)))
            elif l.kind == "pool":
                if h < 2 or w < 2:
                    raise ConfigurationError(f"{l.name}: cannot pool a {h}x{w} map")
                h, w = h // 2, w // 2
                rows.append((l.name, (h, w, c)))
            elif l.kind == "gmp":
                vec = c
                rows.append((l.name, (c,)))
            elif l.kind == "dropout":
                rows.append((l.name, rows[-1][1]))
            elif l.kind == "dense":
                if vec != l.in_channels:
                    raise ConfigurationError(f"{l.name}: expects {l.in_channels} inputs, gets {vec}")
                vec = l.out_channels
                rows.append((l.name, (vec,)))
        return rows

    def parameter_count(self, trainable_only: bool = False) -> int:
        total = 0
        for l in self.param_layers:
            if trainable_only and not self.default_trainable(l):
                continue
            ks, bs = l.param_shapes()
            total += int(np.prod(ks)) + int(np.prod(bs))
        return total

    def default_trainable(self, l: LayerSpec) -> bool:
        return l.kind == "dense" or l.block > self.frozen_blocks

    @property
    def head(self) -> LayerSpec:
        return self.layers[-1]

    @property
    def tensor_names(self) -> list[str]:
        return [f"{l.name}/{part}" for l in self.param_layers for part in ("kernel", "bias")]


def _check_head(layers: list[LayerSpec]) -> None:
    if layers[-1].kind != "dense" or layers[-1].out_channels != NUM_CLASSES:
        raise ConfigurationError("model head must end in a 2-way dense layer")


def build_scratch_cnn(
    input_shape: tuple[int, int, int] = SCRATCH_INPUT, width_divisor: int = 1
) -> ModelSpec:
    """Four conv blocks (32, 64, 128, 256 filters), 2x2 pooling after the first
    three, global max pooling and a 2-way softmax dense layer."""
    h, w, c = input_shape
    if h < 8 or w < 8:
        raise ConfigurationError(f"input {h}x{w} is too small for three pooling stages")
    if width_divisor < 1 or any(f % width_divisor for f in SCRATCH_WIDTHS):
        raise ConfigurationError(f"width divisor {width_divisor} does not divide the filter counts")
    widths = [f // width_divisor for f in SCRATCH_WIDTHS]
    layers: list[LayerSpec] = []
    cin = c
    for b, cout in enumerate(widths, start=1):
        layers.append(LayerSpec("conv", f"conv{b}_1", cin, cout, block=b))
        if b < len(widths):
            layers.append(LayerSpec("pool", f"pool{b}", block=b))
        cin = cout
    layers.append(LayerSpec("gmp", "gmp"))
    layers.append(LayerSpec("dense", "dense", cin, NUM_CLASSES))
    _check_head(layers)
    spec = ModelSpec("scratch", (h, w, c), tuple(layers), frozen_blocks=0)
    spec.shape_table()
    return spec


def build_vgg(
    variant: int = 16,
    input_shape: tuple[int, int, int] = VGG_INPUT,
    freeze_through_block: int = 3,
    width_divisor: int = 1,
    dropout: float = 0.4,
) -> ModelSpec:
    """VGG16/19 conv base (each block closed by 2x2 pooling) with a
    GMP -> dropout -> 2-way softmax top model. Blocks up to and including
    ``freeze_through_block`` are frozen."""
    if variant not in VGG_BLOCKS:
        raise ConfigurationError(f"unknown VGG variant {variant!r}; expected 16 or 19")
    h, w, c = input_shape
    if c != 3:
        raise ConfigurationError(f"VGG input needs 3 channels, got {c}")
    if h < 32 or w < 32:
        raise ConfigurationError(f"input {h}x{w} is too small for five pooling stages")
    if not 0 <= freeze_through_block <= 5:
        raise ConfigurationError("freeze_through_block must lie in 0..5")
    if width_divisor < 1 or any(f % width_divisor for f in VGG_WIDTHS):
        raise ConfigurationError(f"width divisor {width_divisor} does not divide the filter counts")
    layers: list[LayerSpec] = []
    cin = c
    for b, (n_conv, width) in enumerate(zip(VGG_BLOCKS[variant], VGG_WIDTHS), start=1):
        cout = width // width_divisor
        for i in range(1, n_conv + 1):
            layers.append(LayerSpec("conv", f"block{b}_conv{i}", cin, cout, block=b))
            cin = cout
        layers.append(LayerSpec("pool", f"block{b}_pool", block=b))
    layers.append(LayerSpec("gmp", "gmp"))
    layers.append(LayerSpec("dropout", "dropout", rate=dropout))
    layers.append(LayerSpec("dense", "dense", cin, NUM_CLASSES))
    _check_head(layers)
    spec = ModelSpec(f"vgg{variant}", (h, w, c), tuple(layers), frozen_blocks=freeze_through_block)
    spec.shape_table()
    return spec


@dataclass
class ModelState:
    spec: ModelSpec
    params: dict[str, L.LayerParams]
    trainable: dict[str, bool]

    @property
    def arch(self) -> str:
        return self.spec.arch

    def copy(self) -> "ModelState":
        return ModelState(
            self.spec,
            {k: L.LayerParams(p.kernel.copy(), p.bias.copy()) for k, p in self.params.items()},
            dict(self.trainable),
        )


def _init_layer(l: LayerSpec, rng: np.random.Generator) -> L.LayerParams:
    ks, bs = l.param_shapes()
    if l.kind == "conv":
        k = l.kernel_size * l.kernel_size
        fan_in, fan_out = k * l.in_channels, k * l.out_channels
    else:
        fan_in, fan_out = l.in_channels, l.out_channels
    return L.LayerParams(random_init(ks, rng, fan_in, fan_out), np.zeros(bs, dtype=DTYPE))


def init_state(spec: ModelSpec, rng: np.random.Generator) -> ModelState:
    """Glorot-uniform kernels, zero biases, trainable mask from the spec's frozen blocks."""
    params = {l.name: _init_layer(l, rng) for l in spec.param_layers}
    trainable = {l.name: spec.default_trainable(l) for l in spec.param_layers}
    return ModelState(spec, params, trainable)


# -- execution ---------------------------------------------------------------


@dataclass
class ForwardCache:
    inputs: list = field(default_factory=list)  # per-layer input tensors
    records: list = field(default_factory=list)  # per-layer pool record / dropout mask / pre-activation
    features: np.ndarray | None = None  # final conv maps (GMP input)
    logits: np.ndarray | None = None
    single: bool = False


def forward(
    state: ModelState,
    x: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    """Run the model on one image (H x W x C) or a batch (N x H x W x C).

    Returns class probabilities ([2] or [N, 2]) and a cache holding every
    layer input plus the final conv feature maps.
    """
    spec = state.spec
    single = x.ndim == 3
    xb = x[None] if single else x
    if xb.ndim != 4 or tuple(xb.shape[1:]) != tuple(spec.input_shape):
        raise DimensionError(f"input shape {x.shape} does not match model input {spec.input_shape}")
    h = xb.astype(DTYPE, copy=False)
    cache = ForwardCache(single=single)
    for l in spec.layers:
        cache.inputs.append(h)
        if l.kind == "conv":
            pre = L.conv2d_forward(h, state.params[l.name])
            cache.records.append(pre)
            h = L.relu(pre)
        elif l.kind == "pool":
            h, rec = L.maxpool2x2_forward(h)
            cache.records.append(rec)
        elif l.kind == "gmp":
            cache.features = h
            h, rec = L.global_max_pool(h)
            cache.records.append(rec)
        elif l.kind == "dropout":
            h, mask = L.dropout_forward(h, l.rate, rng, training)
            cache.records.append(mask)
        elif l.kind == "dense":
            h = L.dense_forward(h, state.params[l.name])
            cache.records.append(None)
    cache.logits = h
    probs = L.softmax(h)
    return (probs[0] if single else probs), cache


def backward(state: ModelState, cache: ForwardCache, d_logits: np.ndarray) -> dict[str, L.LayerGrads]:
    """Gradients of a loss w.r.t. every trainable layer's parameters.

    Propagation stops at the earliest trainable layer, so frozen prefixes
    cost nothing.
    """
    spec = state.spec
    g = d_logits[None] if cache.single else d_logits
    g = g.astype(DTYPE, copy=False)
    idx = [i for i, l in enumerate(spec.layers) if l.has_params and state.trainable[l.name]]
    grads: dict[str, L.LayerGrads] = {}
    if not idx:
        return grads
    first = idx[0]
    for i in range(len(spec.layers) - 1, first - 1, -1):
        l = spec.layers[i]
        x, rec = cache.inputs[i], cache.records[i]
        need_dx = i > first
        if l.kind == "dense":
            lg = L.dense_backward(x, state.params[l.name], g)
            if state.trainable[l.name]:
                grads[l.name] = lg
            g = lg.d_input
        elif l.kind == "dropout":
            g = L.dropout_backward(g, rec)
        elif l.kind == "gmp":
            g = L.global_max_pool_backward(g, rec)
        elif l.kind == "pool":
            g = L.maxpool2x2_backward(g, rec)
        elif l.kind == "conv":
            g = L.relu_backward(rec, g)
            lg = L.conv2d_backward(x, state.params[l.name], g, need_input_grad=need_dx)
            if state.trainable[l.name]:
                grads[l.name] = lg
            g = lg.d_input
    return grads


def predict(state: ModelState, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Evaluation-mode class probabilities for a stack of model-ready inputs."""
    out = []
    for s in range(0, len(images), batch_size):
        p, _ = forward(state, images[s:s + batch_size], training=False)
        out.append(p)
    return np.concatenate(out, axis=0) if out else np.zeros((0, NUM_CLASSES), DTYPE)


# -- weights -----------------------------------------------------------------


def save_weights(state: ModelState) -> dict[str, np.ndarray]:
    """Named tensor map in spec order: ``<layer>/kernel`` and ``<layer>/bias``."""
    archive: dict[str, np.ndarray] = {}
    for l in state.spec.param_layers:
        p = state.params[l.name]
        archive[f"{l.name}/kernel"] = p.kernel.copy()
        archive[f"{l.name}/bias"] = p.bias.copy()
    return archive


def load_weights(
    spec: ModelSpec,
    archive: dict[str, np.ndarray],
    strict: bool = True,
    rng: np.random.Generator | None = None,
) -> ModelState:
    """Bind archive tensors to ``spec``.

    Strict loading requires every tensor, with matching shapes, and nothing
    extra. Non-strict loading tolerates a missing head (initialised from
    ``rng``) and ignores unknown tensors; missing base tensors still fail.
    """
    head = spec.head.name
    state_params: dict[str, L.LayerParams] = {}
    for l in spec.param_layers:
        ks, bs = l.param_shapes()
        kname, bname = f"{l.name}/kernel", f"{l.name}/bias"
        present = [n in archive for n in (kname, bname)]
        if not all(present):
            if not strict and l.name == head and not any(present):
                if rng is None:
                    raise ConfigurationError("non-strict load with a missing head needs an rng")
                state_params[l.name] = _init_layer(l, rng)
                continue
            missing = kname if not present[0] else bname
            raise MissingTensorError(f"archive lacks tensor {missing!r}")
        for name, want in ((kname, ks), (bname, bs)):
            got = tuple(archive[name].shape)
            if got != tuple(want):
                raise TensorShapeError(f"tensor {name!r} has shape {got}, model expects {tuple(want)}")
        state_params[l.name] = L.LayerParams(
            np.array(archive[kname], dtype=DTYPE), np.array(archive[bname], dtype=DTYPE)
        )
    if strict:
        extra = sorted(set(archive) - set(spec.tensor_names))
        if extra:
            raise UnexpectedTensorError(f"archive has tensors the model does not use: {extra}")
    trainable = {l.name: spec.default_trainable(l) for l in spec.param_layers}
    return ModelState(spec, state_params, trainable)

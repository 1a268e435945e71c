"""
Minimal dense-block CNN on numpy: forward and reverse-mode passes for the stem conv, dense blocks, transitions and
the pooled linear head, softmax cross-entropy, Adam, and the training loop that produces TrainingCurves.

Tensors are plain numpy arrays in (N, C, H, W) or (N, D) layout. Parameters are kept in an ordered dict whose
insertion order is the network traversal order (stem, blocks and transitions interleaved, head).
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from _blockevo.arch import NetworkSpec, SpatialUnderflow
from _blockevo.surrogate import TrainingCurve
from _blockevo.utils import InvariantViolation, UserError

_logger = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]

CHECKPOINT_MAGIC = b"BEVO"
CHECKPOINT_VERSION = 1
_CHECKPOINT_HEADER = struct.Struct("<4sIQ")
EVAL_CHUNK = 256


class NNError(UserError):
    pass


class ShapeMismatch(NNError):
    pass


class NonFiniteError(NNError):
    pass


class NonFiniteLoss(NonFiniteError):
    def __init__(self, message: str, epoch: Optional[int] = None):
        self.epoch = epoch
        if epoch is not None:
            message = f"epoch {epoch}: {message}"
        super().__init__(message)


class ZeroEpochs(NNError):
    pass


class BadCheckpoint(NNError):
    pass


@dataclass(frozen=True)
class DenseLayerParams:
    kernel: np.ndarray
    bias: np.ndarray


@dataclass(frozen=True)
class TransitionParams:
    kernel: np.ndarray
    bias: np.ndarray


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.lr < 0:
            raise InvariantViolation("train.lr", "must be >= 0")
        if not 0.0 <= self.beta1 < 1.0:
            raise InvariantViolation("train.beta1", "must lie in [0, 1)")
        if not 0.0 <= self.beta2 < 1.0:
            raise InvariantViolation("train.beta2", "must lie in [0, 1)")
        if self.eps <= 0:
            raise InvariantViolation("train.eps", "must be > 0")


@dataclass(frozen=True)
class AdamState:
    hyper: AdamHyper
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)
    t: int = 0


def _check_finite(array: np.ndarray, stage: str) -> None:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"non-finite values after {stage}")


# Primitive ops. Convolutions are stride 1 with "same" zero padding.


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    k = weight.shape[2]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))
    out = np.tensordot(windows, weight, axes=([1, 4, 5], [1, 2, 3]))
    return out.transpose(0, 3, 1, 2) + bias[None, :, None, None]


def conv2d_backward(
    dout: np.ndarray, x: np.ndarray, weight: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    k = weight.shape[2]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))

    dweight = np.tensordot(dout, windows, axes=([0, 2, 3], [0, 2, 3]))
    dbias = dout.sum(axis=(0, 2, 3))

    h, w = dout.shape[2:]
    dxp = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            contribution = np.tensordot(dout, weight[:, :, i, j], axes=([1], [0]))
            dxp[:, :, i : i + h, j : j + w] += contribution.transpose(0, 3, 1, 2)

    dx = dxp[:, :, pad : pad + x.shape[2], pad : pad + x.shape[3]] if pad else dxp
    return dx, dweight, dbias


def avg_pool2_forward(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    # Odd sizes are zero-padded on the right/bottom.
    if h % 2 or w % 2:
        x = np.pad(x, ((0, 0), (0, 0), (0, h % 2), (0, w % 2)))
    h2, w2 = x.shape[2] // 2, x.shape[3] // 2
    return x.reshape(n, c, h2, 2, w2, 2).mean(axis=(3, 5))


def avg_pool2_backward(dout: np.ndarray, input_shape: Tuple[int, ...]) -> np.ndarray:
    dx = np.repeat(np.repeat(dout, 2, axis=2), 2, axis=3) / 4.0
    return dx[:, :, : input_shape[2], : input_shape[3]]


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample losses and the gradient of their mean w.r.t. the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    n = logits.shape[0]
    losses = -log_probs[np.arange(n), labels]
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), labels] -= 1.0
    return losses, dlogits / n


# Dense blocks and transitions


def _dense_block_forward(
    x: np.ndarray, layers: Sequence[DenseLayerParams]
) -> Tuple[np.ndarray, List[np.ndarray]]:
    features = [x]
    activations = []
    width = x.shape[1]
    for index, layer in enumerate(layers):
        if layer.kernel.ndim != 4 or layer.kernel.shape[1] != width:
            raise ShapeMismatch(
                f"dense layer {index} expects {layer.kernel.shape[1] if layer.kernel.ndim == 4 else '?'} input "
                f"channels, the running concatenation has {width}"
            )
        concatenated = np.concatenate(features, axis=1) if len(features) > 1 else x
        activation = np.maximum(concatenated, 0.0)
        features.append(conv2d_forward(activation, layer.kernel, layer.bias))
        activations.append(activation)
        width += layer.kernel.shape[0]
    return np.concatenate(features, axis=1), activations


def _dense_block_backward(
    dout: np.ndarray, x: np.ndarray, layers: Sequence[DenseLayerParams], activations: Sequence[np.ndarray]
) -> Tuple[np.ndarray, List[Tuple[np.ndarray, np.ndarray]]]:
    widths = [x.shape[1]] + [layer.kernel.shape[0] for layer in layers]
    offsets = np.cumsum(widths)
    dfeatures = [chunk.copy() for chunk in np.split(dout, offsets[:-1], axis=1)]

    grads = []
    for index in reversed(range(len(layers))):
        layer, activation = layers[index], activations[index]
        dactivation, dkernel, dbias = conv2d_backward(dfeatures[index + 1], activation, layer.kernel)
        dconcatenated = dactivation * (activation > 0.0)
        # Every earlier feature map fed this layer, so its gradient accumulates here.
        for m, part in enumerate(np.split(dconcatenated, offsets[: index + 1][:-1], axis=1)):
            dfeatures[m] += part
        grads.append((dkernel, dbias))

    grads.reverse()
    return dfeatures[0], grads


def dense_block_forward(x: np.ndarray, layers: Sequence[DenseLayerParams]) -> np.ndarray:
    out, _ = _dense_block_forward(x, layers)
    _check_finite(out, "dense block")
    return out


def transition_forward(x: np.ndarray, params: TransitionParams) -> np.ndarray:
    if x.shape[2] < 2 or x.shape[3] < 2:
        raise SpatialUnderflow(f"cannot pool a {x.shape[2]}x{x.shape[3]} feature map")
    out = avg_pool2_forward(conv2d_forward(x, params.kernel, params.bias))
    _check_finite(out, "transition")
    return out


# Whole networks


def param_shapes(spec: NetworkSpec) -> Dict[str, Tuple[int, ...]]:
    """Parameter names and shapes in traversal order."""
    shapes: Dict[str, Tuple[int, ...]] = {}
    k = spec.stem.kernel_size
    channels = spec.stem.out_channels
    shapes["stem.weight"] = (channels, spec.input_shape[0], k, k)
    shapes["stem.bias"] = (channels,)

    for b, block in enumerate(spec.blocks):
        for l, g in enumerate(block.growth_rates):
            shapes[f"block{b}.layer{l}.weight"] = (g, channels, 3, 3)
            shapes[f"block{b}.layer{l}.bias"] = (g,)
            channels += g
        if b < spec.num_transitions:
            shapes[f"transition{b}.weight"] = (channels, channels, 1, 1)
            shapes[f"transition{b}.bias"] = (channels,)

    shapes["head.weight"] = (spec.num_classes, channels)
    shapes["head.bias"] = (spec.num_classes,)
    return shapes


def init_params(spec: NetworkSpec, rng: np.random.Generator, dtype=np.float64) -> Params:
    """Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    params: Params = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def zero_params(spec: NetworkSpec, dtype=np.float64) -> Params:
    return {name: np.zeros(shape, dtype=dtype) for name, shape in param_shapes(spec).items()}


def _block_layers(params: Params, spec: NetworkSpec, b: int) -> List[DenseLayerParams]:
    return [
        DenseLayerParams(params[f"block{b}.layer{l}.weight"], params[f"block{b}.layer{l}.bias"])
        for l in range(spec.blocks[b].num_layers)
    ]


def _check_input(spec: NetworkSpec, params: Params, x: np.ndarray) -> None:
    if x.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeMismatch(f"input of shape {x.shape[1:]} does not match network input {spec.input_shape}")
    for name, shape in param_shapes(spec).items():
        if name not in params:
            raise ShapeMismatch(f"missing parameter {name}")
        if params[name].shape != shape:
            raise ShapeMismatch(f"parameter {name} has shape {params[name].shape}, expected {shape}")


def _network_forward(spec: NetworkSpec, params: Params, x: np.ndarray):
    cache = {"input": x}
    h = conv2d_forward(x, params["stem.weight"], params["stem.bias"])
    _check_finite(h, "stem")

    for b in range(spec.deepen):
        cache[f"block{b}.input"] = h
        h, cache[f"block{b}.activations"] = _dense_block_forward(h, _block_layers(params, spec, b))
        _check_finite(h, f"block {b}")
        if b < spec.num_transitions:
            cache[f"transition{b}.input"] = h
            conv = conv2d_forward(h, params[f"transition{b}.weight"], params[f"transition{b}.bias"])
            cache[f"transition{b}.conv"] = conv
            h = avg_pool2_forward(conv)
            _check_finite(h, f"transition {b}")

    cache["head.input"] = h
    pooled = h.mean(axis=(2, 3))
    cache["head.pooled"] = pooled
    logits = pooled @ params["head.weight"].T + params["head.bias"]
    _check_finite(logits, "head")
    return logits, cache


def forward(spec: NetworkSpec, params: Params, x: np.ndarray) -> np.ndarray:
    _check_input(spec, params, x)
    logits, _ = _network_forward(spec, params, x)
    return logits


def loss_and_grad(
    spec: NetworkSpec, params: Params, x: np.ndarray, labels: np.ndarray
) -> Tuple[float, Params]:
    _check_input(spec, params, x)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (x.shape[0],) or labels.min() < 0 or labels.max() >= spec.num_classes:
        raise ShapeMismatch(f"labels must be {x.shape[0]} integers in [0, {spec.num_classes})")

    logits, cache = _network_forward(spec, params, x)
    losses, dlogits = softmax_cross_entropy(logits, labels)
    loss = float(losses.mean())
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss}")

    grads: Params = {}
    grads["head.weight"] = dlogits.T @ cache["head.pooled"]
    grads["head.bias"] = dlogits.sum(axis=0)
    head_input = cache["head.input"]
    area = head_input.shape[2] * head_input.shape[3]
    dh = np.broadcast_to(
        (dlogits @ params["head.weight"])[:, :, None, None] / area, head_input.shape
    ).copy()

    for b in reversed(range(spec.deepen)):
        if b < spec.num_transitions:
            dconv = avg_pool2_backward(dh, cache[f"transition{b}.conv"].shape)
            dh, grads[f"transition{b}.weight"], grads[f"transition{b}.bias"] = conv2d_backward(
                dconv, cache[f"transition{b}.input"], params[f"transition{b}.weight"]
            )
        layers = _block_layers(params, spec, b)
        dh, layer_grads = _dense_block_backward(
            dh, cache[f"block{b}.input"], layers, cache[f"block{b}.activations"]
        )
        for l, (dkernel, dbias) in enumerate(layer_grads):
            grads[f"block{b}.layer{l}.weight"] = dkernel
            grads[f"block{b}.layer{l}.bias"] = dbias

    _, grads["stem.weight"], grads["stem.bias"] = conv2d_backward(dh, cache["input"], params["stem.weight"])

    return loss, {name: grads[name] for name in params}


def adam_step(params: Params, grads: Params, state: AdamState) -> Tuple[Params, AdamState]:
    hyper = state.hyper
    t = state.t + 1
    bc1 = 1.0 - hyper.beta1**t
    bc2 = 1.0 - hyper.beta2**t

    new_params, m, v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m_prev = state.m.get(name, np.zeros_like(p))
        v_prev = state.v.get(name, np.zeros_like(p))
        m[name] = hyper.beta1 * m_prev + (1.0 - hyper.beta1) * g
        v[name] = hyper.beta2 * v_prev + (1.0 - hyper.beta2) * (g * g)
        m_hat = m[name] / bc1
        v_hat = v[name] / bc2
        new_params[name] = p - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)

    return new_params, AdamState(hyper=hyper, m=m, v=v, t=t)


def predict(spec: NetworkSpec, params: Params, images: np.ndarray) -> np.ndarray:
    predictions = []
    for start in range(0, len(images), EVAL_CHUNK):
        predictions.append(forward(spec, params, images[start : start + EVAL_CHUNK]).argmax(axis=1))
    return np.concatenate(predictions) if predictions else np.zeros(0, dtype=np.int64)


def accuracy(spec: NetworkSpec, params: Params, images: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict(spec, params, images) == np.asarray(labels)))


def train(
    spec: NetworkSpec,
    train_set,
    test_set,
    epochs: int,
    hyper: AdamHyper = AdamHyper(),
    batch_size: int = 32,
    seed: int = 0,
    dtype=np.float64,
) -> Tuple[TrainingCurve, Params]:
    """
    Minibatch Adam on train_set with a fresh shuffle every epoch; test accuracy on the full test_set after each epoch.

    Returns the curve and the final parameters.
    """
    if epochs < 1:
        raise ZeroEpochs("training needs at least one epoch")
    if len(train_set.labels) == 0 or len(test_set.labels) == 0:
        raise NNError("training and test sets must be non-empty")
    if batch_size < 1:
        raise InvariantViolation("train.batch_size", "must be >= 1")

    rng = np.random.default_rng(seed)
    params = init_params(spec, rng, dtype=dtype)
    state = AdamState(hyper=hyper)
    x_train = np.asarray(train_set.images, dtype=dtype)
    y_train = np.asarray(train_set.labels, dtype=np.int64)
    x_test = np.asarray(test_set.images, dtype=dtype)
    y_test = np.asarray(test_set.labels, dtype=np.int64)

    losses, accuracies = [], []
    for epoch in range(epochs):
        order = rng.permutation(len(y_train))
        total = 0.0
        try:
            for start in range(0, len(order), batch_size):
                batch = order[start : start + batch_size]
                loss, grads = loss_and_grad(spec, params, x_train[batch], y_train[batch])
                params, state = adam_step(params, grads, state)
                total += loss * len(batch)
        except NonFiniteError as e:
            raise NonFiniteLoss(e.args[0], epoch=epoch) from e

        losses.append(total / len(y_train))
        accuracies.append(accuracy(spec, params, x_test, y_test))
        _logger.debug("epoch %d: loss %.4f, test accuracy %.4f", epoch, losses[-1], accuracies[-1])

    return TrainingCurve(tuple(losses), tuple(accuracies)), params


def train_and_curve(
    spec: NetworkSpec,
    train_set,
    test_set,
    epochs: int,
    hyper: AdamHyper = AdamHyper(),
    batch_size: int = 32,
    seed: int = 0,
    dtype=np.float64,
) -> TrainingCurve:
    curve, _ = train(spec, train_set, test_set, epochs, hyper, batch_size, seed, dtype)
    return curve


def save_checkpoint(params: Params, path: Path) -> None:
    flat = (
        np.concatenate([p.ravel() for p in params.values()]).astype("<f8")
        if params
        else np.zeros(0, dtype="<f8")
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, flat.size))
        f.write(flat.tobytes())


def load_checkpoint(path: Path, spec: NetworkSpec) -> Params:
    data = Path(path).read_bytes()
    if len(data) < _CHECKPOINT_HEADER.size:
        raise BadCheckpoint(f"{path}: truncated header")
    magic, version, count = _CHECKPOINT_HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise BadCheckpoint(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise BadCheckpoint(f"{path}: unsupported version {version}")

    shapes = param_shapes(spec)
    expected = sum(int(np.prod(shape)) for shape in shapes.values())
    if count != expected:
        raise BadCheckpoint(f"{path}: holds {count} parameters, network has {expected}")
    if len(data) - _CHECKPOINT_HEADER.size < count * 8:
        raise BadCheckpoint(f"{path}: truncated parameter data")
    flat = np.frombuffer(data, dtype="<f8", count=count, offset=_CHECKPOINT_HEADER.size)

    params: Params = {}
    offset = 0
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        params[name] = flat[offset : offset + size].reshape(shape).astype(np.float64)
        offset += size
    return params

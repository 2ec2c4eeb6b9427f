"""Per-DoF encoder/decoder MLPs with manual backprop, Adam, and joint training.

The encoder maps a flattened flow field (2*H*W values) to a D-dimensional
feature; the decoder is a three-layer MLP regressing one pose component from
that feature.  Everything is plain numpy in float64.
"""

from __future__ import annotations

import base64
import json
import math
import time
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import NonFiniteLossError, ShapeMismatchError
from .pose import EulerPose6D, wrap_angle
from .rank import LossHyper, RankingBatch, suprnc_batch
from .synth import FlowField, augment, derive_seed

ACTIVATIONS = ("relu", "identity")
CHECKPOINT_FORMAT = "rank-odo-model/1"

# stream ids for derive_seed
_INIT_STREAM = 1
_SHUFFLE_STREAM = 2
_AUGMENT_STREAM = 3


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    biases: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64).reshape(-1)
        if self.weights.ndim != 2 or self.biases.shape[0] != self.weights.shape[0]:
            raise ShapeMismatchError(
                f"layer weights {self.weights.shape} and biases {self.biases.shape} disagree"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class Model:
    encoder: List[DenseLayer]
    decoder: List[DenseLayer]
    dof_index: int = 2

    def __post_init__(self):
        if not self.encoder:
            raise ShapeMismatchError("encoder needs at least one layer")
        if len(self.decoder) != 3:
            raise ShapeMismatchError(f"decoder must have exactly 3 layers, got {len(self.decoder)}")
        layers = self.layers
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeMismatchError(f"layer output {a.out_dim} feeds input {b.in_dim}")
        if self.decoder[-1].out_dim != 1 or self.decoder[-1].activation != "identity":
            raise ShapeMismatchError("decoder must end in a single identity unit")

    @property
    def layers(self) -> List[DenseLayer]:
        return [*self.encoder, *self.decoder]

    @property
    def input_dim(self) -> int:
        return self.encoder[0].in_dim

    @property
    def feature_dim(self) -> int:
        return self.encoder[-1].out_dim

    def parameters(self) -> List[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weights, layer.biases]
        return out

    def with_parameters(self, params: Sequence[np.ndarray]) -> "Model":
        params = list(params)
        rebuilt = []
        for k, layer in enumerate(self.layers):
            rebuilt.append(DenseLayer(params[2 * k].copy(), params[2 * k + 1].copy(), layer.activation))
        n_enc = len(self.encoder)
        return Model(rebuilt[:n_enc], rebuilt[n_enc:], self.dof_index)


def _init_layer(rng: np.random.Generator, n_in: int, n_out: int, activation: str) -> DenseLayer:
    if activation == "relu":
        limit = math.sqrt(6.0 / n_in)  # He-uniform
    else:
        limit = math.sqrt(6.0 / (n_in + n_out))  # Xavier-uniform
    return DenseLayer(rng.uniform(-limit, limit, size=(n_out, n_in)), np.zeros(n_out), activation)


def init_model(
    input_dim: int,
    feature_dim: int = 32,
    encoder_hidden: Sequence[int] = (128,),
    decoder_hidden: Sequence[int] = (64, 64),
    seed: int = 0,
    dof_index: int = 2,
    zero_head: bool = False,
) -> Model:
    """Randomly initialised model.

    The encoder's hidden layers use ReLU and its output layer is linear.
    ``zero_head`` zeroes the final decoder layer so the initial prediction is
    exactly 0.
    """
    if len(decoder_hidden) != 2:
        raise ValueError("decoder_hidden must list exactly two widths")
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, dof_index, _INIT_STREAM)))
    dims = [input_dim, *encoder_hidden, feature_dim]
    encoder = [
        _init_layer(rng, a, b, "relu" if k < len(dims) - 2 else "identity")
        for k, (a, b) in enumerate(zip(dims, dims[1:]))
    ]
    h1, h2 = decoder_hidden
    decoder = [
        _init_layer(rng, feature_dim, h1, "relu"),
        _init_layer(rng, h1, h2, "relu"),
        _init_layer(rng, h2, 1, "identity"),
    ]
    if zero_head:
        decoder[-1].weights[:] = 0.0
    return Model(encoder, decoder, dof_index)


def zero_model(input_dim: int, feature_dim: int = 1, hidden: int = 1, dof_index: int = 0) -> Model:
    def z(n_in, n_out, act):
        return DenseLayer(np.zeros((n_out, n_in)), np.zeros(n_out), act)

    return Model(
        [z(input_dim, feature_dim, "identity")],
        [z(feature_dim, hidden, "relu"), z(hidden, hidden, "relu"), z(hidden, 1, "identity")],
        dof_index,
    )


def forward_layers(layers: Sequence[DenseLayer], x: np.ndarray) -> tuple:
    """Run ``x`` of shape (B, in) through ``layers``; cache (input, pre-activation) per layer."""
    cache = []
    for layer in layers:
        if x.shape[1] != layer.in_dim:
            raise ShapeMismatchError(f"input width {x.shape[1]} != layer input {layer.in_dim}")
        pre = x @ layer.weights.T + layer.biases
        cache.append((x, pre))
        x = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
    return x, cache


def backward_layers(layers: Sequence[DenseLayer], cache: list, d_out: np.ndarray) -> tuple:
    """Gradients ``[(dW, db), ...]`` and the gradient w.r.t. the layers' input."""
    grads = [None] * len(layers)
    for k in range(len(layers) - 1, -1, -1):
        layer = layers[k]
        x, pre = cache[k]
        if layer.activation == "relu":
            d_out = d_out * (pre > 0)  # derivative at exactly 0 is 0
        grads[k] = (d_out.T @ x, d_out.sum(axis=0))
        d_out = d_out @ layer.weights
    return grads, d_out


def flatten_flows(flows, input_dim: int) -> np.ndarray:
    if isinstance(flows, FlowField):
        flows = [flows]
    if isinstance(flows, np.ndarray):
        x = np.asarray(flows, dtype=np.float64)
        x = x.reshape(x.shape[0], -1) if x.ndim > 1 else x.reshape(1, -1)
    else:
        x = np.stack([np.asarray(f.data, dtype=np.float64).ravel() for f in flows])
    if x.shape[1] != input_dim:
        raise ShapeMismatchError(f"flow has {x.shape[1]} values, model expects {input_dim}")
    return x


def encoder_forward(model: Model, flow) -> tuple:
    """Feature(s) for one FlowField (returns a D-vector) or a batch (returns B x D)."""
    single = isinstance(flow, FlowField)
    x = flatten_flows(flow, model.input_dim)
    feats, cache = forward_layers(model.encoder, x)
    return (feats[0] if single else feats), cache


def decoder_forward(model: Model, feature) -> tuple:
    feature = np.asarray(feature, dtype=np.float64)
    single = feature.ndim == 1
    x = feature.reshape(1, -1) if single else feature
    out, cache = forward_layers(model.decoder, x)
    out = out[:, 0]
    return (float(out[0]) if single else out), cache


def backward(model: Model, caches: tuple, d_feature, d_prediction) -> list:
    """Parameter gradients in :meth:`Model.parameters` order.

    ``caches`` is ``(encoder_cache, decoder_cache)`` from the matching forward
    passes.  The decoder's input gradient is added to ``d_feature`` before
    backpropagating through the encoder.
    """
    enc_cache, dec_cache = caches
    batch = enc_cache[0][0].shape[0]
    d_feature = np.asarray(d_feature, dtype=np.float64).reshape(batch, model.feature_dim)
    d_prediction = np.asarray(d_prediction, dtype=np.float64).reshape(batch, 1)
    dec_grads, d_from_dec = backward_layers(model.decoder, dec_cache, d_prediction)
    enc_grads, _ = backward_layers(model.encoder, enc_cache, d_feature + d_from_dec)
    flat = []
    for dw, db in [*enc_grads, *dec_grads]:
        flat += [dw, db]
    return flat


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> tuple:
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    step = state.step + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeMismatchError(f"parameter {p.shape} vs gradient {g.shape}")
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**step)
        v_hat = v / (1 - beta2**step)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, step)


def clip_by_global_norm(grads: list, max_norm: float) -> list:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return [g * scale for g in grads]


@dataclass
class TrainConfig:
    batch_n: int = 32
    epochs: int = 125
    learning_rate: float = 3e-3
    tau: float = 2.0
    lam: float = 2.0
    feature_dim: int = 32
    encoder_hidden: tuple = (128,)
    decoder_hidden: tuple = (64, 64)
    sigma_noise: float = 0.05
    seed: int = 0
    dof_index: int = 2
    grad_clip: float = 10.0
    zero_head: bool = False
    max_steps: Optional[int] = None

    def __post_init__(self):
        self.encoder_hidden = tuple(self.encoder_hidden)
        self.decoder_hidden = tuple(self.decoder_hidden)
        if self.batch_n < 1 or self.epochs < 1 or self.feature_dim < 1:
            raise ValueError("batch_n, epochs and feature_dim must be positive")
        if not self.learning_rate > 0 or not self.tau > 0 or self.lam < 0 or self.sigma_noise < 0:
            raise ValueError("learning_rate and tau must be positive; lam and sigma_noise non-negative")
        if not 0 <= self.dof_index < 6:
            raise ValueError("dof_index must be in [0, 6)")
        if len(self.decoder_hidden) != 2:
            raise ValueError("decoder_hidden must list exactly two widths")

    def hyper(self) -> LossHyper:
        return LossHyper(self.tau, self.lam)


@dataclass
class TrainReport:
    losses: list
    model: Model
    seconds: float = 0.0


def build_batch(model: Model, anchors: Sequence, labels: np.ndarray, sigma: float, seeds: Sequence[int]):
    """Forward 2N interleaved anchor/augmentation inputs; returns (batch, caches)."""
    inputs = []
    for flow, s in zip(anchors, seeds):
        inputs += [flow, augment(flow, sigma, s)]
    features, enc_cache = encoder_forward(model, inputs)
    preds, dec_cache = decoder_forward(model, features)
    if not (np.all(np.isfinite(features)) and np.all(np.isfinite(preds))):
        raise NonFiniteLossError("non-finite features or predictions in forward pass")
    targets = np.repeat(np.asarray(labels, dtype=np.float64), 2)
    return RankingBatch(features, targets, preds, targets), (enc_cache, dec_cache)


def loss_and_grads(model: Model, batch_inputs: tuple, hyper: LossHyper) -> tuple:
    batch, caches = batch_inputs
    result = suprnc_batch(batch, hyper)
    return result.value, backward(model, caches, result.d_features, result.d_predictions)


def train_dof(dataset: Sequence, config: TrainConfig, model: Optional[Model] = None) -> TrainReport:
    """Jointly train one DoF's encoder and decoder with the SupRNC loss.

    Each step draws ``batch_n`` anchors (shuffled per epoch, remainder
    dropped), pairs each with a freshly augmented copy and takes one Adam step.
    """
    if len(dataset) < config.batch_n:
        raise ValueError(f"dataset has {len(dataset)} samples, batch_n is {config.batch_n}")
    start = time.perf_counter()
    if model is None:
        model = init_model(
            2 * dataset[0].flow.width * dataset[0].flow.height,
            config.feature_dim,
            config.encoder_hidden,
            config.decoder_hidden,
            config.seed,
            config.dof_index,
            config.zero_head,
        )
    hyper = config.hyper()
    labels = np.array([s.state[config.dof_index] for s in dataset])
    params = model.parameters()
    state = AdamState.zeros_like(params)
    losses = []
    n_batches = len(dataset) // config.batch_n
    step = 0
    for epoch in range(config.epochs):
        rng = np.random.Generator(np.random.PCG64(derive_seed(config.seed, epoch, _SHUFFLE_STREAM)))
        order = rng.permutation(len(dataset))
        for b in range(n_batches):
            if config.max_steps is not None and step >= config.max_steps:
                break
            idx = order[b * config.batch_n:(b + 1) * config.batch_n]
            seeds = [derive_seed(config.seed, step, k, _AUGMENT_STREAM) for k in range(len(idx))]
            try:
                batch = build_batch(model, [dataset[i].flow for i in idx], labels[idx], config.sigma_noise, seeds)
            except NonFiniteLossError as exc:
                raise NonFiniteLossError(f"{exc} at step {step} (epoch {epoch})") from None
            value, grads = loss_and_grads(model, batch, hyper)
            if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads):
                raise NonFiniteLossError(f"non-finite loss or gradient at step {step} (epoch {epoch}): {value!r}")
            losses.append(value)
            grads = clip_by_global_norm(grads, config.grad_clip)
            params, state = adam_step(params, grads, state, config.learning_rate)
            model = model.with_parameters(params)
            step += 1
    return TrainReport(losses, model, time.perf_counter() - start)


def infer(model: Model, flow) -> float:
    feature, _ = encoder_forward(model, flow)
    pred, _ = decoder_forward(model, feature)
    return pred


def infer_batch(model: Model, flows) -> np.ndarray:
    features, _ = encoder_forward(model, list(flows))
    preds, _ = decoder_forward(model, features)
    return preds


def infer_all(models: Sequence[Model], flow) -> EulerPose6D:
    if len(models) != 6:
        raise ValueError(f"infer_all needs 6 models, got {len(models)}")
    values = [infer(m, flow) for m in models]
    for k in (3, 4, 5):
        values[k] = wrap_angle(values[k])
    return EulerPose6D.from_array(values)


def _encode_array(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode_array(s: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").reshape(shape).astype(np.float64)


def model_to_json(model: Model, config: Optional[TrainConfig] = None) -> str:
    layers = []
    for role, group in (("encoder", model.encoder), ("decoder", model.decoder)):
        for layer in group:
            layers.append({
                "role": role,
                "activation": layer.activation,
                "shape": list(layer.weights.shape),
                "weights": _encode_array(layer.weights),
                "biases": _encode_array(layer.biases),
            })
    doc = {
        "format": CHECKPOINT_FORMAT,
        "dof_index": model.dof_index,
        "input_dim": model.input_dim,
        "feature_dim": model.feature_dim,
        "config": asdict(config) if config is not None else None,
        "layers": layers,
    }
    return json.dumps(doc, indent=1) + "\n"


def model_from_json(text: str) -> Model:
    doc = json.loads(text)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    groups = {"encoder": [], "decoder": []}
    for entry in doc["layers"]:
        out_dim, in_dim = entry["shape"]
        groups[entry["role"]].append(DenseLayer(
            _decode_array(entry["weights"], (out_dim, in_dim)),
            _decode_array(entry["biases"], (out_dim,)),
            entry["activation"],
        ))
    return Model(groups["encoder"], groups["decoder"], int(doc["dof_index"]))

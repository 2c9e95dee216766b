"""From-scratch MLP encoder + three-layer classifier head.

The network is a chain of linear layers; the first ``n_encoder_layers``
form the encoder (the desk-scale stand-in for a large pretrained
backbone), the remainder the classifier head. Dropout is inverted
(surviving activations are rescaled at train time), so evaluation is a
pure pass-through and deterministic. Training follows the standard
protocol: sigmoid binary cross-entropy, Adam, reduce-on-plateau learning
rate, early stopping with best-epoch weight restoration, all seeded.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .errors import (
    EmptySet,
    InvalidConfig,
    ShapeMismatch,
    StaleCache,
)
from .mathutil import sigmoid, softplus
from .losses import total_loss_and_grad
from .validation import check_multihot, flatten_rasters

NET_MAGIC = b"NET1"
_ACT_CODES = {"identity": 0, "relu": 1}
_ACT_NAMES = {code: name for name, code in _ACT_CODES.items()}


@dataclass
class LayerDef:
    """One linear layer: y = act(x @ W + b), optional dropout after act."""

    in_dim: int
    out_dim: int
    activation: str = "relu"
    dropout: float = 0.0

    def validate(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise InvalidConfig("layer dimensions must be >= 1")
        if self.activation not in _ACT_CODES:
            raise InvalidConfig(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfig("dropout must lie in [0, 1)")


@dataclass
class ForwardCache:
    """Intermediate state recorded by forward for the matching backward."""

    version: int
    mode: str
    start: int
    stop: int
    inputs: list
    preacts: list
    masks: list


class Network:
    """MLP with explicit parameters and hand-written backpropagation."""

    def __init__(self, layers: list[LayerDef], n_encoder_layers: int, seed: int = 0):
        if not layers:
            raise InvalidConfig("network needs at least one layer")
        if not 0 <= n_encoder_layers <= len(layers):
            raise InvalidConfig("n_encoder_layers out of range")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise InvalidConfig(
                    f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}"
                )
        for layer in layers:
            layer.validate()
        self.layers = [LayerDef(l.in_dim, l.out_dim, l.activation, l.dropout)
                       for l in layers]
        self.n_encoder_layers = n_encoder_layers
        self.trainable = [True] * len(layers)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            self.weights.append(_kaiming_uniform(rng, layer.in_dim, layer.out_dim))
            self.biases.append(np.zeros(layer.out_dim))
        self._dropout_rng = np.random.default_rng(seed)
        self._version = 0

    # -- basic introspection -------------------------------------------------

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def encoder_dim(self) -> int:
        """Width of the embedding the encoder produces."""
        if self.n_encoder_layers == 0:
            return self.input_dim
        return self.layers[self.n_encoder_layers - 1].out_dim

    def parameters(self) -> list:
        """Flat [W0, b0, W1, b1, ...]; arrays are the live parameters."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def trainable_flags(self) -> list:
        out = []
        for flag in self.trainable:
            out.extend((flag, flag))
        return out

    def snapshot(self) -> list:
        return [p.copy() for p in self.parameters()]

    def load_parameters(self, params: list) -> None:
        own = self.parameters()
        if len(own) != len(params):
            raise ShapeMismatch("parameter list length mismatch")
        for dst, src in zip(own, params):
            if dst.shape != src.shape:
                raise ShapeMismatch("parameter shape mismatch")
            dst[...] = src
        self._version += 1

    def reseed_dropout(self, seed) -> None:
        self._dropout_rng = np.random.default_rng(seed)

    # -- forward / backward ----------------------------------------------------

    def forward(self, inputs, mode: str = "eval"):
        """Run the full network; returns (logits, cache).

        Eval mode is deterministic. Train mode draws dropout masks from the
        network's seeded generator and records them in the cache.
        """
        x = self._check_inputs(inputs, self.input_dim)
        return self._forward_range(x, 0, len(self.layers), mode)

    def encoder_forward(self, inputs, mode: str = "eval"):
        if self.n_encoder_layers == 0:
            raise InvalidConfig("network has no encoder layers")
        x = self._check_inputs(inputs, self.input_dim)
        return self._forward_range(x, 0, self.n_encoder_layers, mode)

    def backward(self, cache: ForwardCache, dlogits):
        """Gradients for every parameter given dL/dlogits.

        Returns (param_grads, input_grad) where param_grads aligns with
        ``parameters()``. Dropout masks recorded in the cache are reused.
        """
        if cache.start != 0 or cache.stop != len(self.layers):
            raise StaleCache("cache does not cover the full network")
        return self._backward_range(cache, dlogits)

    def encoder_backward(self, cache: ForwardCache, d_embedding):
        """Gradients for encoder parameters given dL/d(embedding)."""
        if cache.start != 0 or cache.stop != self.n_encoder_layers:
            raise StaleCache("cache does not cover the encoder")
        return self._backward_range(cache, d_embedding)

    def apply_gradients(self, optimizer: "Adam", grads: list,
                        layer_lo: int = 0, layer_hi: int | None = None) -> None:
        """One optimizer step over the layers in [layer_lo, layer_hi).

        Frozen layers are skipped entirely; their values never change.
        """
        hi = len(self.layers) if layer_hi is None else layer_hi
        params = self.parameters()[2 * layer_lo:2 * hi]
        flags = self.trainable_flags()[2 * layer_lo:2 * hi]
        optimizer.step(params, grads, trainable=flags)
        self._version += 1

    def _check_inputs(self, inputs, dim):
        x = np.asarray(inputs, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != dim:
            raise ShapeMismatch(f"expected (n, {dim}) inputs, got {x.shape}")
        return x

    def _forward_range(self, x, start, stop, mode):
        if mode not in ("train", "eval"):
            raise InvalidConfig(f"mode must be 'train' or 'eval', got {mode!r}")
        cache = ForwardCache(self._version, mode, start, stop, [], [], [])
        out = x
        for li in range(start, stop):
            layer = self.layers[li]
            pre = out @ self.weights[li] + self.biases[li]
            act = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
            mask = None
            if layer.dropout > 0.0 and mode == "train":
                keep = self._dropout_rng.random(act.shape) >= layer.dropout
                mask = keep / (1.0 - layer.dropout)
                act = act * mask
            cache.inputs.append(out)
            cache.preacts.append(pre)
            cache.masks.append(mask)
            out = act
        return out, cache

    def _backward_range(self, cache, upstream):
        if cache.version != self._version:
            raise StaleCache("parameters changed since this cache was produced")
        g = np.asarray(upstream, dtype=np.float64)
        expected = self.layers[cache.stop - 1].out_dim
        if g.ndim != 2 or g.shape[1] != expected:
            raise ShapeMismatch(f"upstream gradient must be (n, {expected})")
        grads = []
        for pos in range(cache.stop - cache.start - 1, -1, -1):
            li = cache.start + pos
            layer = self.layers[li]
            if cache.masks[pos] is not None:
                g = g * cache.masks[pos]
            if layer.activation == "relu":
                g = g * (cache.preacts[pos] > 0.0)
            grads.append((cache.inputs[pos].T @ g, g.sum(axis=0)))
            g = g @ self.weights[li].T
        flat = []
        for dw, db in reversed(grads):
            flat.extend((dw, db))
        return flat, g


def _kaiming_uniform(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def build_classifier(input_dim: int, n_classes: int,
                     encoder_hidden=(256, 128), head_hidden=(512, 256),
                     dropout=(0.4, 0.3), seed: int = 0) -> Network:
    """Standard topology: ReLU MLP encoder, then a three-layer head with
    dropout between the head's hidden layers (rates must not increase)."""
    if len(head_hidden) != 2:
        raise InvalidConfig("head needs exactly two hidden widths (three layers)")
    if len(dropout) != 2:
        raise InvalidConfig("need one dropout rate per head gap (two)")
    if dropout[1] > dropout[0]:
        raise InvalidConfig("dropout rates must not increase with depth")
    layers = []
    width = input_dim
    for hidden in encoder_hidden:
        layers.append(LayerDef(width, hidden, "relu", 0.0))
        width = hidden
    layers.append(LayerDef(width, head_hidden[0], "relu", float(dropout[0])))
    layers.append(LayerDef(head_hidden[0], head_hidden[1], "relu", float(dropout[1])))
    layers.append(LayerDef(head_hidden[1], n_classes, "identity", 0.0))
    return Network(layers, n_encoder_layers=len(encoder_hidden), seed=seed)


def replace_first_layer(net: Network, new_input_dim: int, seed: int = 0) -> Network:
    """Swap the first layer for a randomly initialised one of a new width.

    Used when loading encoder weights trained at a different input
    dimension (for example 13 bands vs 3 after reduction).
    """
    if new_input_dim < 1:
        raise InvalidConfig("new_input_dim must be >= 1")
    old = net.layers[0]
    rng = np.random.default_rng(seed)
    net.layers[0] = LayerDef(new_input_dim, old.out_dim, old.activation, old.dropout)
    net.weights[0] = _kaiming_uniform(rng, new_input_dim, old.out_dim)
    net.biases[0] = np.zeros(old.out_dim)
    net._version += 1
    return net


def freeze_encoder(net: Network, keep_first_trainable: bool = False) -> Network:
    """Lock encoder layers out of optimizer updates.

    ``keep_first_trainable`` leaves layer 0 updatable, the convention for a
    replaced input layer whose pretrained weights could not be reused.
    """
    for i in range(net.n_encoder_layers):
        net.trainable[i] = keep_first_trainable and i == 0
    return net


def count_params(net: Network) -> int:
    return int(sum(p.size for p in net.parameters()))


# -- losses over logits ------------------------------------------------------

def bce_loss(logits, targets) -> float:
    """Mean sigmoid binary cross-entropy over all N*C entries."""
    x, t = _check_logit_pair(logits, targets)
    return float((softplus(x) - t * x).mean())


def bce_loss_grad(logits, targets) -> np.ndarray:
    """Gradient of bce_loss with respect to the logits."""
    x, t = _check_logit_pair(logits, targets)
    return (sigmoid(x) - t) / x.size


def _check_logit_pair(logits, targets):
    x = np.asarray(logits, dtype=np.float64)
    t = check_multihot(targets, "targets")
    if x.shape != t.shape:
        raise ShapeMismatch(f"logits {x.shape} vs targets {t.shape}")
    if x.size == 0:
        raise EmptySet("empty batch")
    return x, t


def predict_proba(net: Network, inputs, batch_size: int = 1024) -> np.ndarray:
    """Sigmoid class probabilities in eval mode; accepts rasters or flat rows."""
    x = flatten_rasters(inputs)
    chunks = []
    for s in range(0, x.shape[0], batch_size):
        logits, _ = net.forward(x[s:s + batch_size], mode="eval")
        chunks.append(sigmoid(logits))
    if not chunks:
        return np.zeros((0, net.output_dim))
    return np.concatenate(chunks, axis=0)


# -- optimizer and schedule state machines -----------------------------------

class Adam:
    """Adam with bias correction; state shapes mirror the parameter list."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: list | None = None
        self.v: list | None = None

    def step(self, params: list, grads: list, trainable=None) -> None:
        """Update params in place; frozen entries are left untouched."""
        if len(params) != len(grads):
            raise ShapeMismatch("params and grads differ in length")
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        if len(self.m) != len(params):
            raise ShapeMismatch("optimizer state sized for a different parameter list")
        self.t += 1
        bias1 = 1.0 - self.beta1**self.t
        bias2 = 1.0 - self.beta2**self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            if trainable is not None and not trainable[i]:
                continue
            if p.shape != g.shape:
                raise ShapeMismatch(f"param {i}: shape {p.shape} vs grad {g.shape}")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g**2
            p -= self.lr * (self.m[i] / bias1) / (np.sqrt(self.v[i] / bias2) + self.eps)


class ReduceLROnPlateau:
    """Multiply lr by ``factor`` after ``patience`` epochs without a new best.

    The counter resets on every strict improvement and after every
    reduction.
    """

    def __init__(self, lr: float, patience: int = 2, factor: float = 0.1):
        if patience < 1:
            raise InvalidConfig("patience must be >= 1")
        if not 0.0 < factor < 1.0:
            raise InvalidConfig("factor must lie in (0, 1)")
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.best = np.inf
        self.wait = 0

    def step(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr *= self.factor
                self.wait = 0
        return self.lr


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without strict improvement."""

    def __init__(self, patience: int = 5):
        if patience < 1:
            raise InvalidConfig("patience must be >= 1")
        self.patience = patience
        self.best = np.inf
        self.wait = 0

    def step(self, loss: float) -> bool:
        """Record one epoch's loss; returns True if it is a new best."""
        if loss < self.best:
            self.best = loss
            self.wait = 0
            return True
        self.wait += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.wait >= self.patience


# -- training ------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 100
    early_stop_patience: int = 5
    plateau_patience: int = 2
    plateau_factor: float = 0.1
    initial_lr: float = 1e-3
    seed: int = 0
    pca_enabled: bool = False
    loss_mode: str = "bce"          # "bce" | "softcon_pretrain"
    pretrain_epochs: int = 10
    temperature: float = 0.1
    soft_weight: float = 1.0
    augment_noise: float = 0.1
    augment_band_dropout: float = 0.1

    def validate(self):
        if min(self.batch_size, self.max_epochs, self.early_stop_patience,
               self.plateau_patience) < 1:
            raise InvalidConfig("all counts must be positive")
        if not 0.0 < self.plateau_factor < 1.0:
            raise InvalidConfig("plateau_factor must lie in (0, 1)")
        if self.initial_lr < 0:
            raise InvalidConfig("initial_lr must be >= 0")
        if self.loss_mode not in ("bce", "softcon_pretrain"):
            raise InvalidConfig(f"unknown loss_mode {self.loss_mode!r}")
        if self.pretrain_epochs < 0:
            raise InvalidConfig("pretrain_epochs must be >= 0")
        if self.temperature <= 0:
            raise InvalidConfig("temperature must be > 0")
        if self.soft_weight < 0 or self.augment_noise < 0:
            raise InvalidConfig("soft_weight and augment_noise must be >= 0")
        if not 0.0 <= self.augment_band_dropout < 1.0:
            raise InvalidConfig("augment_band_dropout must lie in [0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    improved: bool


@dataclass
class TrainResult:
    net: Network
    history: list
    pretrain_history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = np.inf
    stopped_early: bool = False


def augment_rasters(rasters, rng, noise_sigma: float = 0.1,
                    band_dropout: float = 0.1) -> np.ndarray:
    """Additive Gaussian noise plus per-sample whole-band zeroing."""
    arr = np.asarray(rasters, dtype=np.float64)
    if arr.ndim != 4:
        raise ShapeMismatch("augmentation needs (N, B, H, W) rasters")
    out = arr + noise_sigma * rng.standard_normal(arr.shape)
    if band_dropout > 0:
        keep = rng.random(arr.shape[:2]) >= band_dropout
        out = out * keep[:, :, None, None]
    return out


def train(net: Network, x_train, y_train, x_val, y_val,
          config: TrainConfig) -> TrainResult:
    """Run the full training protocol and restore the best-epoch weights.

    Runs at most ``max_epochs`` epochs of Adam on mean sigmoid BCE, batches
    drawn in a seeded shuffle. Validation loss drives both the plateau
    scheduler and early stopping; the returned network carries the
    parameters of the best validation epoch. Deterministic for a fixed
    seed at a fixed thread count.

    With ``loss_mode="softcon_pretrain"`` the encoder is first trained for
    ``pretrain_epochs`` on the combined contrastive loss over augmented
    views (requires 4-d raster input), then the BCE phase runs as usual.
    Frozen layers are respected in both phases.
    """
    config.validate()
    y_tr = check_multihot(y_train, "y_train")
    y_va = check_multihot(y_val, "y_val")
    x_tr_raw = np.asarray(x_train, dtype=np.float64)
    x_tr = flatten_rasters(x_tr_raw)
    x_va = flatten_rasters(x_val)
    if x_tr.shape[0] == 0 or x_va.shape[0] == 0:
        raise EmptySet("training and validation sets must be non-empty")
    if x_tr.shape[0] != y_tr.shape[0] or x_va.shape[0] != y_va.shape[0]:
        raise ShapeMismatch("inputs and labels disagree on sample count")
    if y_tr.shape[1] != net.output_dim:
        raise ShapeMismatch(
            f"labels have {y_tr.shape[1]} classes, network outputs {net.output_dim}"
        )

    shuffle_seed, dropout_seed, augment_seed = np.random.SeedSequence(
        config.seed).spawn(3)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    net.reseed_dropout(dropout_seed)

    pretrain_history = []
    if config.loss_mode == "softcon_pretrain":
        if x_tr_raw.ndim != 4:
            raise ShapeMismatch("softcon_pretrain needs (N, B, H, W) raster input")
        pretrain_history = _pretrain_encoder(
            net, x_tr_raw, y_tr, config, shuffle_rng,
            np.random.default_rng(augment_seed))

    optimizer = Adam(lr=config.initial_lr)
    scheduler = ReduceLROnPlateau(config.initial_lr, config.plateau_patience,
                                  config.plateau_factor)
    stopper = EarlyStopping(config.early_stop_patience)
    n = x_tr.shape[0]
    best_params = net.snapshot()
    best_epoch = 0
    best_val = np.inf
    history = []
    stopped_early = False

    for epoch in range(1, config.max_epochs + 1):
        optimizer.lr = scheduler.lr
        order = shuffle_rng.permutation(n)
        total = 0.0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            logits, cache = net.forward(x_tr[idx], mode="train")
            total += bce_loss(logits, y_tr[idx]) * len(idx)
            grads, _ = net.backward(cache, bce_loss_grad(logits, y_tr[idx]))
            net.apply_gradients(optimizer, grads)
        train_loss = total / n
        val_loss = _dataset_loss(net, x_va, y_va, config.batch_size)

        improved = stopper.step(val_loss)
        if improved:
            best_params = net.snapshot()
            best_epoch = epoch
            best_val = val_loss
        scheduler.step(val_loss)
        history.append(EpochRecord(epoch, train_loss, val_loss, optimizer.lr,
                                   improved))
        if stopper.should_stop:
            stopped_early = True
            break

    net.load_parameters(best_params)
    return TrainResult(net, history, pretrain_history, best_epoch, best_val,
                       stopped_early)


def _dataset_loss(net, x, y, batch_size):
    total = 0.0
    for s in range(0, x.shape[0], batch_size):
        logits, _ = net.forward(x[s:s + batch_size], mode="eval")
        total += bce_loss(logits, y[s:s + batch_size]) * (logits.shape[0])
    return total / x.shape[0]


def _pretrain_encoder(net, rasters, labels, config, shuffle_rng, augment_rng):
    """Contrastive encoder warm-up over augmented views; returns epoch losses."""
    optimizer = Adam(lr=config.initial_lr)
    n = rasters.shape[0]
    epoch_losses = []
    for _ in range(config.pretrain_epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            batch = rasters[idx]
            view = augment_rasters(batch, augment_rng, config.augment_noise,
                                   config.augment_band_dropout)
            flat = batch.reshape(len(idx), -1)
            flat_view = view.reshape(len(idx), -1)
            emb, cache_a = net.encoder_forward(flat, mode="train")
            emb_view, cache_b = net.encoder_forward(flat_view, mode="train")
            loss, d_emb, d_view = total_loss_and_grad(
                emb, emb_view, labels[idx], temperature=config.temperature,
                soft_weight=config.soft_weight, normalize=True)
            grads_a, _ = net.encoder_backward(cache_a, d_emb)
            # A parameter step between the two backward passes would
            # invalidate cache_b, so combine gradients first.
            grads_b, _ = net.encoder_backward(cache_b, d_view)
            combined = [ga + gb for ga, gb in zip(grads_a, grads_b)]
            net.apply_gradients(optimizer, combined,
                                layer_lo=0, layer_hi=net.n_encoder_layers)
            total += loss
        epoch_losses.append(total / n)
    return epoch_losses


# -- checkpoint format ---------------------------------------------------------

def serialize_network(net: Network, optimizer: Adam | None = None) -> bytes:
    """NET1 layout: magic, u32 layer count, u32 encoder layer count, then per
    layer u32 in_dim, u32 out_dim, u8 activation code, f64 dropout; one u8
    optimizer flag; all weights then biases per layer as float64
    little-endian; optionally u64 step count, four f64 hyperparameters, and
    the first/second moment arrays in parameter order."""
    parts = [NET_MAGIC, struct.pack("<II", len(net.layers), net.n_encoder_layers)]
    for layer in net.layers:
        parts.append(struct.pack("<IIBd", layer.in_dim, layer.out_dim,
                                 _ACT_CODES[layer.activation], layer.dropout))
    parts.append(struct.pack("<B", 1 if optimizer is not None else 0))
    for w, b in zip(net.weights, net.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    if optimizer is not None:
        if optimizer.m is None:
            raise InvalidConfig("optimizer has no state to serialize")
        parts.append(struct.pack("<Qdddd", optimizer.t, optimizer.lr,
                                 optimizer.beta1, optimizer.beta2, optimizer.eps))
        for moment in (optimizer.m, optimizer.v):
            for arr in moment:
                parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def deserialize_network(raw: bytes, seed: int = 0):
    """Inverse of serialize_network; returns (net, optimizer-or-None)."""
    if raw[:4] != NET_MAGIC:
        raise InvalidConfig("not a NET1 checkpoint")
    n_layers, n_enc = struct.unpack_from("<II", raw, 4)
    offset = 12
    layers = []
    for _ in range(n_layers):
        in_dim, out_dim, act, drop = struct.unpack_from("<IIBd", raw, offset)
        offset += struct.calcsize("<IIBd")
        layers.append(LayerDef(in_dim, out_dim, _ACT_NAMES[act], drop))
    (has_adam,) = struct.unpack_from("<B", raw, offset)
    offset += 1
    net = Network(layers, n_encoder_layers=n_enc, seed=seed)

    def read_block(shape):
        nonlocal offset
        size = int(np.prod(shape)) * 8
        block = np.frombuffer(raw, dtype="<f8", count=int(np.prod(shape)),
                              offset=offset).reshape(shape).copy()
        offset += size
        return block

    params = []
    for layer in layers:
        params.append(read_block((layer.in_dim, layer.out_dim)))
        params.append(read_block((layer.out_dim,)))
    net.load_parameters(params)

    optimizer = None
    if has_adam:
        t, lr, b1, b2, eps = struct.unpack_from("<Qdddd", raw, offset)
        offset += struct.calcsize("<Qdddd")
        optimizer = Adam(lr=lr, beta1=b1, beta2=b2, eps=eps)
        optimizer.t = t
        optimizer.m = [read_block(p.shape) for p in net.parameters()]
        optimizer.v = [read_block(p.shape) for p in net.parameters()]
    if offset != len(raw):
        raise InvalidConfig("checkpoint has trailing bytes")
    return net, optimizer


def save_network(net: Network, path, optimizer: Adam | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_network(net, optimizer))


def load_network(path, seed: int = 0):
    with open(path, "rb") as fh:
        return deserialize_network(fh.read(), seed=seed)


def model_size_bytes(net: Network) -> int:
    """Checkpoint size: 8 bytes per parameter plus the NET1 header overhead."""
    return len(serialize_network(net))


# -- sklearn-style surface -------------------------------------------------------

class MultiLabelMLP(BaseEstimator):
    """Estimator wrapper around the network and training protocol.

    fit accepts (N, B, H, W) rasters or flat (N, D) rows plus a multi-hot
    label matrix. When no validation data is passed, a seeded fraction of
    the training samples is held out to drive the schedule and early
    stopping. predict thresholds sigmoid probabilities at ``threshold``.
    """

    def __init__(self, encoder_hidden=(256, 128), head_hidden=(512, 256),
                 dropout=(0.4, 0.3), lr=1e-3, batch_size=64, max_epochs=100,
                 early_stop_patience=5, plateau_patience=2, plateau_factor=0.1,
                 threshold=0.5, val_fraction=1 / 6, seed=0):
        self.encoder_hidden = encoder_hidden
        self.head_hidden = head_hidden
        self.dropout = dropout
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.early_stop_patience = early_stop_patience
        self.plateau_patience = plateau_patience
        self.plateau_factor = plateau_factor
        self.threshold = threshold
        self.val_fraction = val_fraction
        self.seed = seed

    def fit(self, X, y, X_val=None, y_val=None):
        labels = check_multihot(y, "y")
        flat = flatten_rasters(X)
        if flat.shape[0] != labels.shape[0]:
            raise ShapeMismatch("X and y disagree on sample count")
        if X_val is None:
            rng = np.random.default_rng(self.seed)
            order = rng.permutation(flat.shape[0])
            n_val = max(1, int(round(self.val_fraction * flat.shape[0])))
            n_val = min(n_val, flat.shape[0] - 1) if flat.shape[0] > 1 else 1
            val_idx, tr_idx = order[:n_val], order[n_val:]
            if len(tr_idx) == 0:
                tr_idx = val_idx
            x_tr, y_tr = flat[tr_idx], labels[tr_idx]
            x_va, y_va = flat[val_idx], labels[val_idx]
        else:
            x_tr, y_tr = flat, labels
            x_va, y_va = flatten_rasters(X_val), check_multihot(y_val, "y_val")
        net = build_classifier(
            x_tr.shape[1], labels.shape[1], encoder_hidden=self.encoder_hidden,
            head_hidden=self.head_hidden, dropout=self.dropout, seed=self.seed)
        config = TrainConfig(
            batch_size=self.batch_size, max_epochs=self.max_epochs,
            early_stop_patience=self.early_stop_patience,
            plateau_patience=self.plateau_patience,
            plateau_factor=self.plateau_factor, initial_lr=self.lr,
            seed=self.seed)
        self.result_ = train(net, x_tr, y_tr, x_va, y_va, config)
        self.net_ = self.result_.net
        self.n_classes_ = labels.shape[1]
        return self

    def predict_proba(self, X):
        if not hasattr(self, "net_"):
            raise InvalidConfig("MultiLabelMLP is not fitted")
        return predict_proba(self.net_, X)

    def predict(self, X):
        return (self.predict_proba(X) >= self.threshold).astype(np.uint8)

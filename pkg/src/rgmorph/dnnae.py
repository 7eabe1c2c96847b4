"""Dense autoencoder with a classification head on its code layer.

The encoder (hidden ReLU layers, BN or dropout) maps 40x40 images to a
non-negative code; a mirrored decoder maps codes back to images through a
sigmoid output layer. A softmax head on the code supplies class
probabilities for the cross-entropy branch. Training alternates the two
losses per batch: cross-entropy reaches only the encoder side and the
head, squared error reaches encoder and decoder.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_codes, check_images, check_labels
from .exceptions import ConfigurationError, ShapeError, ValidationError
from .neural import (
    AdamState,
    DenseLayer,
    dense_forward,
    deterministic,
    layer_backward,
    adam_update,
    lr_schedule,
)
from .rng import TAG_DROPOUT, TAG_INIT, RngStream

logger = logging.getLogger(__name__)

REGULARIZERS = ("bn", "dropout", "none")
LOSS_MODES = ("mse_only", "mse_plus_ce")
LOSS_SELECTORS = ("mse", "ce", "combined")
PROB_FLOOR = 1e-12
_LN2 = math.log(2.0)


@dataclass(frozen=True)
class ArchSpec:
    input_side: int = 40
    encoder_widths: tuple = (2048, 1024, 1024)
    code_len: int = 256
    decoder_widths: tuple | None = None
    regularizer: str = "bn"
    keep_prob: float = 0.5
    n_classes: int = 2

    def __post_init__(self):
        enc = tuple(int(w) for w in self.encoder_widths)
        object.__setattr__(self, "encoder_widths", enc)
        dec = enc[::-1] if self.decoder_widths is None else tuple(int(w) for w in self.decoder_widths)
        object.__setattr__(self, "decoder_widths", dec)
        if not enc:
            raise ConfigurationError("encoder_widths must not be empty")
        if dec != enc[::-1]:
            raise ConfigurationError("decoder widths must mirror the encoder widths")
        if min(enc) < 1 or self.code_len < 1 or self.input_side < 1:
            raise ConfigurationError("all widths must be >= 1")
        if self.regularizer not in REGULARIZERS:
            raise ConfigurationError(f"regularizer must be one of {REGULARIZERS}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ConfigurationError("keep_prob must lie in (0, 1]")
        if self.n_classes < 2:
            raise ConfigurationError("n_classes must be >= 2")

    @property
    def n_pixels(self):
        return self.input_side * self.input_side


@dataclass
class LossReport:
    mse: float
    ce: float
    per_class_mse: dict
    accuracy: float = float("nan")
    n_samples: int = 0

    @property
    def combined(self):
        return self.mse + self.ce


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 100
    seed: int = 0
    loss_mode: str = "mse_plus_ce"
    determinism: bool = True

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ConfigurationError(f"loss_mode must be one of {LOSS_MODES}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_mse: float
    train_ce: float
    val_mse: float
    val_ce: float


class DnnaeModel:
    """Parameter container: layers in chain order plus per-block Adam state."""

    def __init__(self, arch, encoder_layers, code_layer, decoder_layers, output_layer, head):
        self.arch = arch
        self.encoder_layers = list(encoder_layers)
        self.code_layer = code_layer
        self.decoder_layers = list(decoder_layers)
        self.output_layer = output_layer
        self.head = head
        self.adam = {name: AdamState.zeros_like(layer.parameters()) for name, layer in self.blocks()}
        self.epochs_done = 0

    # block bookkeeping -----------------------------------------------------
    def encoder_blocks(self):
        names = [f"enc{i + 1}" for i in range(len(self.encoder_layers))]
        return list(zip(names, self.encoder_layers)) + [("code", self.code_layer)]

    def decoder_blocks(self):
        names = [f"dec{i + 1}" for i in range(len(self.decoder_layers))]
        return list(zip(names, self.decoder_layers)) + [("output", self.output_layer)]

    def blocks(self):
        return self.encoder_blocks() + self.decoder_blocks() + [("head", self.head)]

    def block(self, name):
        return dict(self.blocks())[name]

    def parameters(self):
        return {
            f"{name}.{k}": p for name, layer in self.blocks() for k, p in layer.parameters().items()
        }

    def n_parameters(self):
        return sum(p.size for p in self.parameters().values())

    # hooks for neural.grad_check ------------------------------------------
    def loss(self, batch, loss_selector="combined"):
        return self.loss_and_grads(batch, loss_selector, need_grads=False)[0]

    def loss_and_grads(self, batch, loss_selector="combined", need_grads=True, rng=None):
        images, labels = batch
        X = check_images(images, self.arch.input_side)
        onehot = one_hot(check_labels(labels, X.shape[0], self.arch.n_classes), self.arch.n_classes)
        if rng is None:
            rng = RngStream(0, TAG_DROPOUT)
        return gradients(self, X, onehot, loss_selector, rng, need_grads=need_grads)


def build_dnnae(arch=None, seed=0):
    """Allocate a freshly initialized autoencoder for ``arch``."""
    arch = ArchSpec() if arch is None else arch
    use_bn = arch.regularizer == "bn"
    keep = arch.keep_prob if arch.regularizer == "dropout" else None
    root = RngStream(seed, TAG_INIT)
    widths = [arch.n_pixels, *arch.encoder_widths]
    encoder = [
        DenseLayer.create(widths[i], widths[i + 1], "relu", root.child(i), bn=use_bn, keep_prob=keep)
        for i in range(len(arch.encoder_widths))
    ]
    k = len(encoder)
    code = DenseLayer.create(widths[-1], arch.code_len, "relu", root.child(k))
    widths = [arch.code_len, *arch.decoder_widths]
    decoder = [
        DenseLayer.create(widths[i], widths[i + 1], "relu", root.child(k + 1 + i), bn=use_bn, keep_prob=keep)
        for i in range(len(arch.decoder_widths))
    ]
    k += 1 + len(decoder)
    output = DenseLayer.create(widths[-1], arch.n_pixels, "sigmoid", root.child(k))
    head = DenseLayer.create(arch.code_len, arch.n_classes, "softmax", root.child(k + 1))
    return DnnaeModel(arch, encoder, code, decoder, output, head)


@dataclass
class ForwardResult:
    recon: np.ndarray
    codes: np.ndarray
    probs: np.ndarray
    caches: dict = field(default_factory=dict)


def forward(model, images, mode="infer", rng=None):
    """Run the whole network; images may be ``(N, H, W)`` or flattened."""
    X = check_images(images, model.arch.input_side)
    caches = {}
    h = X
    for i, (name, layer) in enumerate(model.encoder_blocks() + model.decoder_blocks()):
        if name == "dec1" or name == "output" and not model.decoder_layers:
            codes = h
        h, caches[name] = dense_forward(h, layer, mode, None if rng is None else rng.child(i))
    probs, caches["head"] = dense_forward(codes, model.head, mode)
    return ForwardResult(recon=h, codes=codes, probs=probs, caches=caches)


def one_hot(labels, n_classes=2):
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def loss_mse(I, O):
    """Per-image summed squared error averaged over the batch."""
    I = np.asarray(I, dtype=np.float64)
    O = np.asarray(O, dtype=np.float64)
    if I.shape != O.shape:
        raise ShapeError(f"input shape {I.shape} != reconstruction shape {O.shape}")
    d = (I - O).reshape(I.shape[0], -1)
    return float(np.sum(d * d) / I.shape[0])


def loss_ce(labels_onehot, probs):
    """Batch-mean cross-entropy in bits; probabilities floored at 1e-12."""
    Y = np.asarray(labels_onehot, dtype=np.float64)
    P = np.asarray(probs, dtype=np.float64)
    if Y.shape != P.shape or Y.ndim != 2:
        raise ShapeError(f"labels shape {Y.shape} != probabilities shape {P.shape}")
    if not (np.all((Y == 0) | (Y == 1)) and np.all(Y.sum(axis=1) == 1)):
        raise ValidationError("labels must be one-hot rows")
    return float(-np.sum(Y * np.log2(np.maximum(P, PROB_FLOOR))) / Y.shape[0])


def _backward_chain(blocks, caches, grad, out=None, through_first=True):
    """Backprop ``grad`` down a list of (name, layer) blocks, last first."""
    out = {} if out is None else out
    for j, (name, _) in enumerate(reversed(blocks)):
        grad, g = layer_backward(caches[name], grad, through_activation=through_first or j > 0)
        out[name] = g
    return grad, out


def backward_mse(model, fwd, X):
    """Gradients of the squared-error loss for encoder and decoder blocks."""
    grad = 2.0 * (fwd.recon - X) / X.shape[0]
    blocks = model.encoder_blocks() + model.decoder_blocks()
    return _backward_chain(blocks, fwd.caches, grad)[1]


def backward_ce(model, fwd, onehot):
    """Gradients of the cross-entropy loss for the head and encoder blocks."""
    # fused softmax + base-2 cross-entropy gradient w.r.t. the head logits
    grad = (fwd.probs - onehot) / (onehot.shape[0] * _LN2)
    grad, grads = _backward_chain([("head", model.head)], fwd.caches, grad, through_first=False)
    return _backward_chain(model.encoder_blocks(), fwd.caches, grad, out=grads)[1]


def _add_grads(a, b):
    out = {name: dict(g) for name, g in a.items()}
    for name, g in b.items():
        if name in out:
            out[name] = {k: out[name][k] + v for k, v in g.items()}
        else:
            out[name] = dict(g)
    return out


def gradients(model, X, onehot, loss_selector, rng, need_grads=True):
    """Train-mode loss and per-block gradients for one selector.

    Returns ``(loss, grads)`` where grads are flattened to
    ``"block.param"`` keys (the layout :func:`neural.grad_check` expects).
    """
    if loss_selector not in LOSS_SELECTORS:
        raise ConfigurationError(f"loss_selector must be one of {LOSS_SELECTORS}")
    fwd = forward(model, X, "train", rng)
    mse = loss_mse(X, fwd.recon)
    ce = loss_ce(onehot, fwd.probs)
    loss = {"mse": mse, "ce": ce, "combined": mse + ce}[loss_selector]
    if not need_grads:
        return loss, None
    grads = {}
    if loss_selector in ("mse", "combined"):
        grads = _add_grads(grads, backward_mse(model, fwd, X))
    if loss_selector in ("ce", "combined"):
        grads = _add_grads(grads, backward_ce(model, fwd, onehot))
    flat = {f"{name}.{k}": v for name, g in grads.items() for k, v in g.items()}
    return loss, flat


def apply_updates(model, grads, lr):
    """Adam-step every block named in ``grads`` (block -> param -> array)."""
    for name, g in grads.items():
        layer = model.block(name)
        new, model.adam[name] = adam_update(layer.parameters(), g, model.adam[name], lr, block=name)
        layer.set_parameters(new)


def train_step(model, Xb, onehot_b, lr, loss_mode, rng):
    """One batch of the alternating schedule.

    A single train-mode forward feeds both losses. The cross-entropy
    gradients (head + encoder side) and squared-error gradients (encoder +
    decoder) are both taken at that point; the cross-entropy update is
    applied first, then the squared-error update.

    Returns ``(mse, ce)`` at the forward point.
    """
    fwd = forward(model, Xb, "train", rng)
    mse = loss_mse(Xb, fwd.recon)
    ce = loss_ce(onehot_b, fwd.probs)
    ce_grads = backward_ce(model, fwd, onehot_b) if loss_mode == "mse_plus_ce" else None
    mse_grads = backward_mse(model, fwd, Xb)
    if ce_grads is not None:
        apply_updates(model, ce_grads, lr)
    apply_updates(model, mse_grads, lr)
    return mse, ce


def _as_xy(data, side, n_classes, name):
    if data is None:
        return None, None
    X, y = data
    X = check_images(X, side, name=name)
    y = check_labels(y, X.shape[0], n_classes, name=name)
    return X, y


def train(model, train_set, val_set, cfg=None, on_epoch_end=None):
    """Train in place for epochs ``model.epochs_done .. cfg.epochs - 1``.

    Parameters
    ----------
    train_set, val_set : (images, labels) tuples
        ``val_set`` may be None, in which case validation columns are NaN.
    cfg : TrainConfig
    on_epoch_end : callable, optional
        Called as ``on_epoch_end(model, metrics)`` after each epoch; the
        CLI uses it for metrics rows and checkpoints.

    Returns
    -------
    model, history : DnnaeModel, list of EpochMetrics
    """
    cfg = TrainConfig() if cfg is None else cfg
    arch = model.arch
    X, y = _as_xy(train_set, arch.input_side, arch.n_classes, "train_set")
    Xv, yv = _as_xy(val_set, arch.input_side, arch.n_classes, "val_set")
    n = X.shape[0]
    if cfg.batch_size > n:
        raise ConfigurationError(f"batch_size {cfg.batch_size} exceeds training set size {n}")
    if arch.regularizer == "bn" and cfg.batch_size < 2:
        raise ConfigurationError("batch normalization needs batch_size >= 2")
    onehot = one_hot(y, arch.n_classes)
    n_batches = n // cfg.batch_size
    history = []
    with deterministic(cfg.determinism):
        for epoch in range(model.epochs_done, cfg.epochs):
            lr = lr_schedule(epoch)
            mse_sum = ce_sum = 0.0
            for j in range(n_batches):
                sl = slice(j * cfg.batch_size, (j + 1) * cfg.batch_size)
                rng = RngStream(cfg.seed, (TAG_DROPOUT, epoch, j))
                mse, ce = train_step(model, X[sl], onehot[sl], lr, cfg.loss_mode, rng)
                mse_sum += mse
                ce_sum += ce
            model.epochs_done = epoch + 1
            if Xv is not None:
                rep = evaluate(model, (Xv, yv))
                val_mse, val_ce = rep.mse, rep.ce
            else:
                val_mse = val_ce = float("nan")
            m = EpochMetrics(epoch + 1, lr, mse_sum / n_batches, ce_sum / n_batches, val_mse, val_ce)
            history.append(m)
            logger.info(
                "epoch %d lr=%.3g train_mse=%.4f (per-pixel %.3e) train_ce=%.4f val_mse=%.4f",
                m.epoch, lr, m.train_mse, m.train_mse / arch.n_pixels, m.train_ce, m.val_mse,
            )
            if on_epoch_end is not None:
                on_epoch_end(model, m)
    return model, history


def _infer_chain(blocks, h, batch=1024):
    outs = []
    for start in range(0, h.shape[0], batch):
        z = h[start : start + batch]
        for _, layer in blocks:
            z, _ = dense_forward(z, layer, "infer")
        outs.append(z)
    return np.concatenate(outs, axis=0)


def encode(model, images):
    """Inference-mode codes, shape ``(N, code_len)``."""
    X = check_images(images, model.arch.input_side)
    return _infer_chain(model.encoder_blocks(), X)


def decode(model, codes):
    """Inference-mode reconstructions, shape ``(N, side, side)``."""
    F = check_codes(codes, model.arch.code_len)
    out = _infer_chain(model.decoder_blocks(), F)
    s = model.arch.input_side
    return out.reshape(-1, s, s)


def head_probs(model, codes):
    F = check_codes(codes, model.arch.code_len)
    return _infer_chain([("head", model.head)], F)


def evaluate(model, test_set):
    """Inference-mode losses over a labeled set, overall and per class."""
    arch = model.arch
    X, y = _as_xy(test_set, arch.input_side, arch.n_classes, "test_set")
    codes = encode(model, X)
    recon = _infer_chain(model.decoder_blocks(), codes)
    probs = head_probs(model, codes)
    d = X - recon
    per_image = np.sum(d * d, axis=1)
    onehot = one_hot(y, arch.n_classes)
    per_class = {int(c): float(per_image[y == c].mean()) for c in np.unique(y)}
    return LossReport(
        mse=float(per_image.mean()),
        ce=loss_ce(onehot, probs),
        per_class_mse=per_class,
        accuracy=float(np.mean(np.argmax(probs, axis=1) == y)),
        n_samples=int(X.shape[0]),
    )


def write_metrics_csv(path, history, append=False):
    """Write epoch rows; a header is emitted unless appending to a non-empty file."""
    import os

    write_header = not (append and os.path.exists(path) and os.path.getsize(path) > 0)
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if write_header:
            w.writerow(["epoch", "lr", "train_mse", "train_ce", "val_mse", "val_ce"])
        for m in history:
            w.writerow([m.epoch] + [_fmt(v) for v in (m.lr, m.train_mse, m.train_ce, m.val_mse, m.val_ce)])


def _fmt(v):
    if not math.isfinite(v):
        return "nan"
    return np.format_float_positional(v, trim="-")


class DNNAE(TransformerMixin, BaseEstimator):
    """Scikit-learn style wrapper around the autoencoder.

    ``transform`` encodes images to codes, ``inverse_transform`` decodes
    codes to images and ``predict`` returns the head's class decisions.

    Parameters
    ----------
    input_side : int, default=40
    encoder_widths : tuple of int, default=(2048, 1024, 1024)
        Hidden widths of the encoder; the decoder mirrors them.
    code_len : int, default=256
    regularizer : {'bn', 'dropout', 'none'}, default='bn'
    keep_prob : float, default=0.5
        Only used with ``regularizer='dropout'``.
    loss_mode : {'mse_plus_ce', 'mse_only'}, default='mse_plus_ce'
    epochs : int, default=200
    batch_size : int, default=100
    random_state : int, default=0
    determinism : bool, default=True
        Pin BLAS to one thread during training.
    """

    def __init__(
        self,
        input_side=40,
        encoder_widths=(2048, 1024, 1024),
        code_len=256,
        regularizer="bn",
        keep_prob=0.5,
        loss_mode="mse_plus_ce",
        epochs=200,
        batch_size=100,
        random_state=0,
        determinism=True,
    ):
        self.input_side = input_side
        self.encoder_widths = encoder_widths
        self.code_len = code_len
        self.regularizer = regularizer
        self.keep_prob = keep_prob
        self.loss_mode = loss_mode
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state
        self.determinism = determinism

    def _arch(self):
        return ArchSpec(
            input_side=self.input_side,
            encoder_widths=tuple(self.encoder_widths),
            code_len=self.code_len,
            regularizer=self.regularizer,
            keep_prob=self.keep_prob,
        )

    def _config(self):
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.random_state,
            loss_mode=self.loss_mode,
            determinism=self.determinism,
        )

    def fit(self, X, y, validation_data=None):
        """Build a fresh network and train it on ``(X, y)``."""
        self.model_ = build_dnnae(self._arch(), seed=self.random_state)
        _, self.history_ = train(self.model_, (X, y), validation_data, self._config())
        self.n_features_in_ = self.input_side * self.input_side
        return self

    def partial_fit(self, X, y, validation_data=None, epochs=None):
        """Continue training the current network up to ``epochs`` total."""
        if not hasattr(self, "model_"):
            return self.fit(X, y, validation_data)
        cfg = self._config()
        if epochs is not None:
            cfg.epochs = epochs
        _, hist = train(self.model_, (X, y), validation_data, cfg)
        self.history_ = list(self.history_) + hist
        return self

    @classmethod
    def from_model(cls, model):
        """Wrap an existing (e.g. loaded) :class:`DnnaeModel`."""
        a = model.arch
        est = cls(
            input_side=a.input_side,
            encoder_widths=a.encoder_widths,
            code_len=a.code_len,
            regularizer=a.regularizer,
            keep_prob=a.keep_prob,
        )
        est.model_ = model
        est.history_ = []
        est.n_features_in_ = a.n_pixels
        return est

    def transform(self, X):
        check_is_fitted(self, "model_")
        return encode(self.model_, X)

    def inverse_transform(self, codes):
        check_is_fitted(self, "model_")
        return decode(self.model_, codes)

    def reconstruct(self, X):
        return self.inverse_transform(self.transform(X))

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return head_probs(self.model_, encode(self.model_, X))

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def evaluate(self, X, y):
        check_is_fitted(self, "model_")
        return evaluate(self.model_, (X, y))

    def score(self, X, y=None):
        """Negative reconstruction loss (higher is better)."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.input_side)
        return -loss_mse(X, self.reconstruct(X).reshape(X.shape))

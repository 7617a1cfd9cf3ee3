"""scikit-learn style wrappers around the backbone and the memory module.

``SequenceClassifier`` trains any variant on user sequences with per-position
labels; ``MemoryScanTransformer`` maps feature sequences through one freshly
initialised memory scan.  Both follow the estimator contract: constructor
arguments are stored untouched, learned state ends in an underscore.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .autodiff.params import ParamStore, child_rng
from .autodiff.tensor import Tensor, no_grad
from .backbone import VARIANTS, BlockConfig, IOSpec, build_variant
from .errors import ConfigError, DimensionError
from .memory import MemoryConfig, TensorMemory
from .trainer import AdamState, TrainConfig, adam_step, cosine_warmup_lr

IGNORE = -1


# --------------------------------------------------------------------------
# validation helpers
# --------------------------------------------------------------------------
def check_sequences(X, *, dtype=None) -> np.ndarray:
    """Validate a batch of sequences.

    Integer arrays of shape (n, N) are token ids; float arrays of shape
    (n, N, F) are feature vectors.  Both must be non-empty and finite.
    """
    X = np.asarray(X)
    if X.ndim not in (2, 3):
        raise DimensionError(f"expected (n, N) ids or (n, N, F) features, got shape {X.shape}")
    if X.size == 0 or X.shape[0] == 0 or X.shape[1] == 0:
        raise DimensionError("empty input")
    if X.ndim == 2:
        if not np.issubdtype(X.dtype, np.integer):
            raise DimensionError("2-D input must hold integer token ids")
        if X.min() < 0:
            raise ConfigError("token ids must be non-negative", key="X")
        return X.astype(np.int64, copy=False)
    X = X.astype(dtype or np.float64, copy=False)
    if not np.all(np.isfinite(X)):
        raise ConfigError("features contain NaN or Inf", key="X")
    return X


def check_targets(y, X: np.ndarray) -> np.ndarray:
    """Per-position labels (n, N) with ``-1`` for unlabelled positions.

    A 1-D ``y`` of length n labels the last position of each sequence.
    """
    y = np.asarray(y)
    n, N = X.shape[:2]
    if y.ndim == 1:
        if y.shape[0] != n:
            raise DimensionError(f"y has {y.shape[0]} labels for {n} sequences")
        full = np.full((n, N), IGNORE, dtype=np.int64)
        full[:, -1] = y
        y = full
    if y.shape != (n, N):
        raise DimensionError(f"y must have shape {(n, N)} or ({n},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise DimensionError("labels must be integers")
    if y.min() < IGNORE:
        raise ConfigError("labels must be >= -1", key="y")
    if not np.any(y != IGNORE):
        raise ConfigError("y has no labelled positions", key="y")
    return y.astype(np.int64, copy=False)


# --------------------------------------------------------------------------
# estimators
# --------------------------------------------------------------------------
class SequenceClassifier(ClassifierMixin, BaseEstimator):
    """Per-position classifier built from one backbone variant.

    Parameters mirror the block, memory and training configs.  ``fit``
    draws minibatches with replacement from the training set for
    ``n_steps`` Adam updates under a warmup-cosine schedule.
    """

    def __init__(self, variant="tensor", d_model=32, n_heads=4, n_layers=2, mlp_mult=4.0,
                 channels=8, grid=(4, 4, 4), chunk_size=1, n_slots=8, causal=True,
                 n_steps=200, batch_size=32, lr=1e-3, warmup_steps=20, grad_clip_norm=1.0,
                 random_state=0):
        self.variant = variant
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.mlp_mult = mlp_mult
        self.channels = channels
        self.grid = grid
        self.chunk_size = chunk_size
        self.n_slots = n_slots
        self.causal = causal
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.grad_clip_norm = grad_clip_norm
        self.random_state = random_state

    def _io(self, X, n_classes):
        if X.ndim == 2:
            return IOSpec(n_classes=n_classes, max_len=X.shape[1], vocab_size=int(X.max()) + 1)
        return IOSpec(n_classes=n_classes, max_len=X.shape[1], feature_dim=X.shape[2])

    def fit(self, X, y):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}", key="variant")
        X = check_sequences(X)
        y = check_targets(y, X)
        self.classes_ = np.unique(y[y != IGNORE])
        if self.classes_.min() < 0:
            raise ConfigError("labels must be >= 0 apart from the -1 marker", key="y")
        n_classes = int(self.classes_.max()) + 1
        memory = MemoryConfig(channels=self.channels, grid=tuple(self.grid),
                              chunk_size=self.chunk_size, d_model=self.d_model)
        cfg = BlockConfig(d_model=self.d_model, n_heads=self.n_heads, mlp_mult=self.mlp_mult,
                          n_layers=self.n_layers, variant=self.variant, n_slots=self.n_slots,
                          memory=memory if self.variant == "tensor" else None, causal=self.causal)
        self.io_ = self._io(X, n_classes)
        self.model_ = build_variant(cfg, self.io_, seed=self.random_state, memory=memory)
        total = max(self.n_steps, 1)
        # short fits shrink the warmup so the schedule still reaches its decay phase
        train = TrainConfig(lr_peak=self.lr, warmup_steps=min(self.warmup_steps, total - 1),
                            total_steps=total, batch_size=self.batch_size,
                            grad_clip_norm=self.grad_clip_norm, seed=self.random_state)
        rng = child_rng(self.random_state, "estimator/batches")
        drop_rng = child_rng(self.random_state, "estimator/dropout")
        params, state = self.model_.params, AdamState()
        self.loss_curve_ = []
        for step in range(1, self.n_steps + 1):
            idx = rng.integers(0, X.shape[0], size=min(self.batch_size, X.shape[0]))
            yb = y[idx]
            mask = yb != IGNORE
            if not mask.any():
                continue
            params.zero_grad()
            loss = self.model_.loss(X[idx], yb[mask], mask, training=True, rng=drop_rng)
            loss.backward()
            grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
                     for n, t in params.items()}
            adam_step(params, grads, state, step, cosine_warmup_lr(step, train), train)
            self.loss_curve_.append(float(loss.data))
        self.n_features_in_ = X.shape[2] if X.ndim == 3 else 1
        return self

    def _logits(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_sequences(X)
        if X.ndim == 2 and self.io_.vocab_size is not None and X.max() >= self.io_.vocab_size:
            raise ConfigError(f"token id {X.max()} unseen during fit", key="X")
        with no_grad():
            return self.model_.forward(X).data

    def predict_proba(self, X) -> np.ndarray:
        """Class probabilities at every position, shape (n, N, n_classes)."""
        z = self._logits(X)
        z = z - z.max(axis=-1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=-1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        """Predicted class at every position, shape (n, N)."""
        return self._logits(X).argmax(axis=-1)

    def score(self, X, y, sample_weight=None) -> float:
        """Accuracy over labelled positions."""
        X = check_sequences(X)
        y = check_targets(y, X)
        mask = y != IGNORE
        return float(np.mean(self.predict(X)[mask] == y[mask]))


class MemoryScanTransformer(TransformerMixin, BaseEstimator):
    """Map (n, N, F) features through an untrained memory scan.

    ``fit`` only initialises the module for the feature width; the output
    is the gated residual stream, same shape as the input.
    """

    def __init__(self, channels=8, grid=(4, 4, 4), chunk_size=1, gamma_init=0.0,
                 write_mode="gaussian", random_state=0):
        self.channels = channels
        self.grid = grid
        self.chunk_size = chunk_size
        self.gamma_init = gamma_init
        self.write_mode = write_mode
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_sequences(X)
        if X.ndim != 3:
            raise DimensionError("MemoryScanTransformer needs (n, N, F) float features")
        self.config_ = MemoryConfig(channels=self.channels, grid=tuple(self.grid),
                                    chunk_size=self.chunk_size, d_model=X.shape[2],
                                    gamma_init=self.gamma_init, write_mode=self.write_mode)
        self.params_ = ParamStore()
        self.memory_ = TensorMemory(self.config_, self.params_, "mem.", seed=self.random_state)
        self.n_features_in_ = X.shape[2]
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "memory_")
        X = check_sequences(X)
        if X.ndim != 3 or X.shape[2] != self.n_features_in_:
            raise DimensionError(f"expected (n, N, {self.n_features_in_}) features")
        with no_grad():
            out, _, _ = self.memory_.scan(Tensor(X))
        return out.data

    def final_state(self, X) -> np.ndarray:
        """Hidden volume (n, C, D, H, W) after scanning each sequence."""
        check_is_fitted(self, "memory_")
        X = check_sequences(X)
        with no_grad():
            _, state, _ = self.memory_.scan(Tensor(X))
        return state.h.data


__all__ = ["IGNORE", "MemoryScanTransformer", "SequenceClassifier", "check_sequences",
           "check_targets"]

"""Scikit-learn style wrapper around the U-Net training loop.

UNetSegmenter gives the segmentation engine the familiar estimator
surface: constructor hyperparameters stored verbatim, fit(X, y) on image
stacks, predict/predict_proba for masks and probability maps, and a
Dice-based score. It trains on whatever 2-D slices it is given and knows
nothing about patients, modalities, or windowing; the trainer module owns
that protocol.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .errors import DivergenceError, NotFittedError
from .layers import UNetSpec, build_unet
from .losses import LossKind, loss_fn
from .metrics import binarize
from .optim import Adam, AdamConfig
from .tensor import Tensor, no_grad
from .validation import (check_image_stack, check_mask_stack,
                         check_spatial_divisibility)


class UNetSegmenter(BaseEstimator):
    """2-D U-Net segmenter for binary masks.

    Parameters
    ----------
    depth : encoder/decoder stages (each halves resolution once).
    base_filters : channels of the first encoder stage; doubles per stage.
    loss : "dice" or "cross_entropy".
    learning_rate, beta1, beta2, epsilon : Adam settings.
    batch_size : slices per optimization step.
    epochs : passes over the training stack.
    threshold : probability cutoff used by predict().
    random_state : seed for weight init and shuffling.

    Attributes (after fit)
    ----------------------
    model_ : the trained network.
    in_channels_ : channel count fit expects at predict time.
    loss_curve_ : per-epoch mean training loss.
    n_iter_ : number of completed epochs.
    """

    def __init__(self, depth=2, base_filters=8, loss="dice",
                 learning_rate=1e-4, beta1=0.9, beta2=0.999, epsilon=1e-8,
                 batch_size=8, epochs=40, threshold=0.5, random_state=0):
        self.depth = depth
        self.base_filters = base_filters
        self.loss = loss
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.batch_size = batch_size
        self.epochs = epochs
        self.threshold = threshold
        self.random_state = random_state

    def fit(self, X, y):
        """Train a fresh network on image stack X (N, C, H, W) and binary
        masks y (N, H, W) or (N, 1, H, W)."""
        X = check_image_stack(X)
        y = check_mask_stack(y, X)
        check_spatial_divisibility(X.shape, self.depth)
        kind = LossKind(self.loss)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

        spec = UNetSpec(in_channels=X.shape[1], depth=self.depth,
                        base_filters=self.base_filters)
        model = build_unet(spec, seed=self.random_state)
        optimizer = Adam([p for _, p in model.named_parameters()],
                         AdamConfig(learning_rate=self.learning_rate,
                                    beta1=self.beta1, beta2=self.beta2,
                                    epsilon=self.epsilon))
        compute_loss = loss_fn(kind)
        rng = np.random.default_rng(self.random_state)

        curve = []
        for epoch in range(self.epochs):
            model.train()
            order = rng.permutation(X.shape[0])
            batch_losses = []
            for start in range(0, len(order), self.batch_size):
                index = order[start:start + self.batch_size]
                loss = compute_loss(model.forward(Tensor(X[index])),
                                    Tensor(y[index]))
                value = float(loss.data)
                if not np.isfinite(value):
                    raise DivergenceError(f"non-finite loss at epoch {epoch + 1}")
                loss.backward()
                optimizer.step()
                batch_losses.append(value)
            curve.append(float(np.mean(batch_losses)))

        self.model_ = model
        self.in_channels_ = int(X.shape[1])
        self.loss_curve_ = curve
        self.n_iter_ = self.epochs
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "this UNetSegmenter instance is not fitted yet; "
                "call fit before using predict/predict_proba/score")

    def predict_proba(self, X) -> np.ndarray:
        """Per-pixel foreground probabilities, shape (N, H, W)."""
        self._require_fitted()
        X = check_image_stack(X)
        if X.shape[1] != self.in_channels_:
            raise ValueError(f"X has {X.shape[1]} channels, the fitted model "
                             f"takes {self.in_channels_}")
        check_spatial_divisibility(X.shape, self.depth)
        self.model_.eval()
        out = np.zeros((X.shape[0],) + X.shape[2:], dtype=np.float32)
        with no_grad():
            for start in range(0, X.shape[0], max(1, self.batch_size)):
                chunk = X[start:start + max(1, self.batch_size)]
                probs = self.model_.forward(Tensor(chunk))
                out[start:start + chunk.shape[0]] = probs.data[:, 0]
        return out

    def predict(self, X) -> np.ndarray:
        """Binary masks, shape (N, H, W), thresholded probabilities."""
        return binarize(self.predict_proba(X), self.threshold)

    def score(self, X, y) -> float:
        """Mean per-sample Dice overlap of predict(X) against y."""
        X = check_image_stack(X)
        y = check_mask_stack(y, X)[:, 0]
        pred = self.predict(X)
        values = []
        for mask, truth in zip(pred, y):
            inter = float(np.sum((mask == 1) & (truth == 1)))
            total = float(mask.sum() + truth.sum())
            values.append(1.0 if total == 0 else 2.0 * inter / total)
        return float(np.mean(values))

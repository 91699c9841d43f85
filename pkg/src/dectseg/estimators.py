"""scikit-learn style wrappers around mixing and the two-stage cascade.

    >>> seg = CascadeSegmenter(alpha=0.6, random_state=0)
    >>> seg.fit(pairs, labels).predict(new_pairs)   # doctest: +SKIP
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .cascade import StagePlan, check_cascade, fit_cascade, predict_stage1, predict_stage2, prepare_case
from .evaluation import organ_dice
from .preprocessing import DEFAULT_ROI_MARGIN, DEFAULT_SKIN_THRESHOLD_HU, MixConfig, mix
from .unet import Checkpoint, UNetConfig, load_checkpoint
from .validation import check_alpha, check_labels, check_pairs


class DectMixer(TransformerMixin, BaseEstimator):
    """Blend low/high-kV volumes into one image: ``alpha * low + (1 - alpha) * high``."""

    def __init__(self, alpha=0.6):
        self.alpha = alpha

    def fit(self, X=None, y=None):
        self.alpha_ = check_alpha(self.alpha)
        return self

    def transform(self, X):
        alpha = check_alpha(self.alpha)
        return [mix(pair, MixConfig(alpha)) for pair in check_pairs(X)]


def _plan(value, stage):
    if value is None:
        return StagePlan(stage=stage, downsample=2 if stage == 1 else 1)
    if isinstance(value, dict):
        return StagePlan(**{"stage": stage, **value})
    if value.stage != stage:
        raise ValueError(f"stage{stage} plan has stage id {value.stage}")
    return value


def _checkpoint(value):
    if value is None or isinstance(value, Checkpoint):
        return value
    return load_checkpoint(value)


class CascadeSegmenter(BaseEstimator):
    """Two-stage coarse-to-fine organ segmenter.

    ``fit`` takes DECT pairs and label volumes; ``predict`` returns one
    :class:`~dectseg.volume.LabelVolume` per pair; ``score`` is the mean
    Dice over cases and organs.  ``pretrained`` is an optional pair of
    stage checkpoints (or paths) to fine-tune from.
    """

    def __init__(
        self,
        alpha=0.6,
        unet=None,
        stage1=None,
        stage2=None,
        skin_threshold=DEFAULT_SKIN_THRESHOLD_HU,
        roi_margin=DEFAULT_ROI_MARGIN,
        pretrained=None,
        random_state=0,
    ):
        self.alpha = alpha
        self.unet = unet
        self.stage1 = stage1
        self.stage2 = stage2
        self.skin_threshold = skin_threshold
        self.roi_margin = roi_margin
        self.pretrained = pretrained
        self.random_state = random_state

    def _config(self):
        if self.unet is None:
            return UNetConfig()
        return self.unet if isinstance(self.unet, UNetConfig) else UNetConfig(**self.unet)

    def _seed(self):
        if self.random_state is None or not isinstance(self.random_state, (int, np.integer)):
            raise ValueError("random_state must be an explicit integer seed")
        return int(self.random_state)

    def _cases(self, X, y=None, alpha=None):
        pairs = check_pairs(X)
        labels = check_labels(y, pairs) if y is not None else [None] * len(pairs)
        alpha = self.alpha if alpha is None else alpha
        return [prepare_case(p, alpha, lab, self.skin_threshold) for p, lab in zip(pairs, labels)]

    def fit(self, X, y, X_val=None, y_val=None):
        alpha = check_alpha(self.alpha)
        config = self._config()
        plan1 = replace(_plan(self.stage1, 1), alpha_training=alpha)
        plan2 = replace(_plan(self.stage2, 2), alpha_training=alpha, roi_margin=int(self.roi_margin))
        init = (None, None)
        if self.pretrained is not None:
            init = tuple(_checkpoint(c) for c in self.pretrained)
        cases = self._cases(X, y)
        validation = self._cases(X_val, y_val) if X_val is not None else None
        ckpt1, ckpt2, info = fit_cascade(cases, plan1, plan2, self._seed(), config, validation, init)
        check_cascade(ckpt1, ckpt2)
        self.checkpoint1_, self.checkpoint2_ = ckpt1, ckpt2
        self.training_losses_ = {1: info["stage1"].losses, 2: info["stage2"].losses}
        self.alpha_ = alpha
        return self

    def _fitted(self):
        if not hasattr(self, "checkpoint2_"):
            raise NotFittedError("CascadeSegmenter is not fitted yet; call fit first")

    def predict(self, X, alpha=None):
        """Label volumes for each pair; ``alpha`` overrides the mixing weight used at test time."""
        self._fitted()
        alpha = check_alpha(self.alpha if alpha is None else alpha)
        net1, net2 = self.checkpoint1_.network(), self.checkpoint2_.network()
        out = []
        for case in self._cases(X, alpha=alpha):
            s1 = predict_stage1(case, self.checkpoint1_, self.roi_margin, net=net1)
            out.append(predict_stage2(case, s1, self.checkpoint2_, net=net2))
        return out

    def score(self, X, y, alpha=None):
        pairs = check_pairs(X)
        truth = check_labels(y, pairs)
        preds = self.predict(pairs, alpha)
        return float(np.mean([np.mean(list(organ_dice(p, t).values())) for p, t in zip(preds, truth)]))

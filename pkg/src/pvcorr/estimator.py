"""scikit-learn style wrapper around the two training stages."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .metrics import aggregate, evaluate
from .synthetic import SceneSample
from .training import TrainConfig, predict, train_main, train_refine
from .validation import check_scene_pairs


class SceneFlowEstimator(BaseEstimator):
    """Iterative point-voxel scene flow model.

    ``X`` is a sequence of ``(p1, p2)`` point-cloud pairs, each ``(N, 3)``;
    ``y`` holds one ``(N1, 3)`` flow per pair. ``fit`` trains the main stage
    and then the refinement stage on the same scenes. Predictions are lists
    of float32 arrays because scenes may differ in size.

    Examples
    --------
    >>> from pvcorr.synthetic import gen_dataset
    >>> data = gen_dataset(2, 64, seed=0)
    >>> X = [(s.p1, s.p2) for s in data]
    >>> est = SceneFlowEstimator(m=32, k=8, graph_k=8, epochs_main=1, epochs_refine=0, t_train=2, t_eval=2)
    >>> flows = est.fit(X, [s.gt_flow for s in data]).predict(X)
    >>> flows[0].shape
    (64, 3)
    """

    def __init__(self, t_train=8, t_eval=32, gamma=0.8, lr=0.001, epochs_main=20, epochs_refine=10,
                 m=512, k=32, cube_resolution=3, cube_side=0.25, cube_levels=3, graph_k=32,
                 corr_mode="both", h0_from_context=True, detach_flow=True, scale_corr=False,
                 loss_weighting="exponential", grad_clip=0.0, warmup_steps=0, lr_decay="constant", augment=False,
                 seed=0):
        self.t_train = t_train
        self.t_eval = t_eval
        self.gamma = gamma
        self.lr = lr
        self.epochs_main = epochs_main
        self.epochs_refine = epochs_refine
        self.m = m
        self.k = k
        self.cube_resolution = cube_resolution
        self.cube_side = cube_side
        self.cube_levels = cube_levels
        self.graph_k = graph_k
        self.corr_mode = corr_mode
        self.h0_from_context = h0_from_context
        self.detach_flow = detach_flow
        self.scale_corr = scale_corr
        self.loss_weighting = loss_weighting
        self.grad_clip = grad_clip
        self.warmup_steps = warmup_steps
        self.lr_decay = lr_decay
        self.augment = augment
        self.seed = seed

    def _config(self):
        return TrainConfig(**self.get_params())

    def fit(self, X, y):
        pairs, flows = check_scene_pairs(X, y)
        config = self._config()
        data = [SceneSample(p1, p2, f) for (p1, p2), f in zip(pairs, flows)]
        params, main_hist = train_main(data, config)
        params, refine_hist = train_refine(data, params, config)
        self.params_ = params
        self.config_ = config
        self.history_ = {"main": main_hist, "refine": refine_hist}
        self.n_scenes_ = len(data)
        return self

    def predict(self, X, iters=None, use_refine=True):
        check_is_fitted(self, "params_")
        pairs, _ = check_scene_pairs(X)
        return [predict(p1, p2, self.params_, self.config_, iters=iters, use_refine=use_refine)
                for p1, p2 in pairs]

    def evaluate(self, X, y, iters=None, use_refine=True):
        """Point-weighted aggregate metrics over the given scenes."""
        pairs, flows = check_scene_pairs(X, y)
        est = self.predict(pairs, iters=iters, use_refine=use_refine)
        per_scene = [evaluate(e, f) for e, f in zip(est, flows)]
        return aggregate(per_scene, [len(f) for f in flows])

    def score(self, X, y):
        """Negative mean end-point error, so that larger is better."""
        return -self.evaluate(X, y).epe


def as_xy(samples):
    """Split scene samples into estimator inputs ``X`` and targets ``y``."""
    samples = list(samples)
    return [(s.p1, s.p2) for s in samples], [np.asarray(s.gt_flow) for s in samples]

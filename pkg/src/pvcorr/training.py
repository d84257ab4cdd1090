"""Losses, Adam, and the two training stages."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .geometry import CubeSpec
from .metrics import evaluate
from .network import ModelConfig, ModelParams, SceneGraphs, iterate, neighbor_graph, refine

log = logging.getLogger(__name__)

LOSS_WEIGHTINGS = ("exponential", "linear")
LR_DECAYS = ("constant", "linear")


@dataclass
class TrainConfig:
    t_train: int = 8
    t_eval: int = 32
    gamma: float = 0.8
    lr: float = 0.001
    epochs_main: int = 20
    epochs_refine: int = 10
    m: int = 512
    k: int = 32
    cube_resolution: int = 3
    cube_side: float = 0.25
    cube_levels: int = 3
    graph_k: int = 32
    corr_mode: str = "both"
    h0_from_context: bool = True
    detach_flow: bool = True
    scale_corr: bool = False
    loss_weighting: str = "exponential"
    grad_clip: float = 0.0
    warmup_steps: int = 0
    lr_decay: str = "constant"
    augment: bool = False
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0 < self.gamma < 1:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        for name in ("t_train", "t_eval", "m", "k", "graph_k"):
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        for name in ("epochs_main", "epochs_refine"):
            if int(getattr(self, name)) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if self.loss_weighting not in LOSS_WEIGHTINGS:
            raise ValueError(f"loss_weighting must be one of {LOSS_WEIGHTINGS}")
        if isinstance(self.warmup_steps, bool) or int(self.warmup_steps) != self.warmup_steps \
                or self.warmup_steps < 0:
            raise ValueError(f"warmup_steps must be a non-negative integer, got {self.warmup_steps!r}")
        if self.lr_decay not in LR_DECAYS:
            raise ValueError(f"lr_decay must be one of {LR_DECAYS}")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0 (0 disables clipping)")
        self.model_config()

    def model_config(self):
        return ModelConfig(
            m=int(self.m), k=int(self.k),
            cube=CubeSpec(int(self.cube_resolution), float(self.cube_side), int(self.cube_levels)),
            graph_k=int(self.graph_k), corr_mode=self.corr_mode,
            h0_from_context=bool(self.h0_from_context), detach_flow=bool(self.detach_flow),
            scale_corr=bool(self.scale_corr),
        )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def _l1(est, gt):
    """Per-point l1 error summed over coordinates, averaged over points."""
    est = ad._as_tensor(est)
    gt = ad.Tensor(np.asarray(getattr(gt, "data", gt), dtype=est.dtype))
    if est.shape != gt.shape:
        raise ValueError(f"flow shapes differ: {est.shape} vs {gt.shape}")
    return ad.scale(ad.sum_all(ad.abs_(ad.sub(est, gt))), 1.0 / est.shape[0])


def iteration_weights(n_iters, gamma, weighting="exponential"):
    """Weight of iterate t = 1..T; exponential gives gamma**(T - t)."""
    t = np.arange(1, n_iters + 1)
    if weighting == "exponential":
        return gamma ** (n_iters - t)
    if weighting == "linear":
        return gamma * (n_iters - t - 1)
    raise ValueError(f"unknown weighting {weighting!r}")


def loss_iter(flows, gt, gamma=0.8, weighting="exponential"):
    """Weighted sum of l1 errors of every iterate against the ground truth."""
    flows = list(flows)
    if not flows:
        raise ValueError("need at least one flow estimate")
    weights = iteration_weights(len(flows), gamma, weighting)
    total = None
    for w, f in zip(weights, flows):
        term = ad.scale(_l1(f, gt), w)
        total = term if total is None else ad.add(total, term)
    return total


def loss_refine(refined, gt):
    return _l1(refined, gt)


class AdamState:
    """First/second moment estimates and the step counter."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = 0


def adam_step(params, grads, state, lr):
    """One Adam update with bias correction, applied in place.

    ``params`` maps names to tensors (or arrays); ``grads`` maps the same names
    to gradient arrays. Names without a gradient are left untouched.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        data = getattr(p, "data", p)
        if g.shape != data.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} vs parameter {data.shape}")
        dt = data.dtype.type
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(data)
            state.v[name] = np.zeros_like(data)
        v = state.v[name]
        m *= dt(b1)
        m += dt(1 - b1) * g
        v *= dt(b2)
        v += dt(1 - b2) * g * g
        step = dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(state.eps))
        data -= step
    return params, state


def learning_rate(config, step, total_steps):
    """Step size for optimizer step ``step`` (0-based) out of ``total_steps``."""
    lr = float(config.lr)
    if config.warmup_steps:
        lr *= min(1.0, (step + 1) / config.warmup_steps)
    if config.lr_decay == "linear" and total_steps > 0:
        lr *= 1.0 - step / total_steps
    return lr


def augment_scene(sample, rng, shift=1.0):
    """Random rotation about the z axis plus a random shift, applied to both frames.

    The flow rotates with the points; distances inside each cloud are unchanged
    up to rounding, so cached neighbor graphs stay valid.
    """
    angle = rng.uniform(0.0, 2 * np.pi)
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    t = rng.uniform(-shift, shift, size=3)
    p1 = (sample.p1 @ rot.T + t).astype(np.float32)
    p2 = (sample.p2 @ rot.T + t).astype(np.float32)
    return p1, p2, (sample.gt_flow @ rot.T).astype(np.float32)


def _clip(grads, max_norm):
    if not max_norm:
        return grads
    total = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if total <= max_norm:
        return grads
    f = max_norm / total
    return {n: (g * g.dtype.type(f)) for n, g in grads.items()}


def _collect_grads(params, names):
    grads = {}
    for n in names:
        t = params[n]
        if t.grad is not None:
            grads[n] = t.grad
            t.grad = None
    return grads


def _log_epoch(history, callback, epoch, loss, epe, split="train"):
    record = {"epoch": epoch, "split": split, "loss": float(loss), "epe": float(epe)}
    history.append(record)
    log.info(json.dumps(record))
    if callback is not None:
        callback(record)


def main_param_names(params):
    return [n for n in params if not n.startswith("refine.")]


def refine_param_names(params):
    return params.names("refine.")


def train_main(dataset, config, params=None, callback=None):
    """Train extractors, correlation branches and the update block.

    Returns ``(params, history)``; ``history`` holds one record per epoch.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("training set is empty")
    mcfg = config.model_config()
    if params is None:
        params = ModelParams.init(mcfg, seed=config.seed)
    names = main_param_names(params)
    graphs = [SceneGraphs.build(s.p1, s.p2, mcfg.graph_k) for s in dataset]
    state = AdamState()
    rng = np.random.default_rng(config.seed)
    history = []
    total = int(config.epochs_main) * len(dataset)
    for epoch in range(1, int(config.epochs_main) + 1):
        losses, epes = [], []
        for i in rng.permutation(len(dataset)):
            s = dataset[i]
            p1, p2, gt = augment_scene(s, rng) if config.augment else (s.p1, s.p2, s.gt_flow)
            with ad.Tape():
                flows = iterate(p1, p2, params, config.t_train, mcfg, graphs[i])
                loss = loss_iter(flows, gt, config.gamma, config.loss_weighting)
            loss.backward()
            grads = _clip(_collect_grads(params, names), config.grad_clip)
            adam_step({n: params[n] for n in grads}, grads, state, learning_rate(config, state.t, total))
            losses.append(float(loss.data))
            epes.append(evaluate(flows[-1].data, gt).epe)
        _log_epoch(history, callback, epoch, np.mean(losses), np.mean(epes))
    return params, history


def train_refine(dataset, params, config, callback=None):
    """Train only the refinement weights on flows from the frozen main stage.

    The main-stage flows are computed once with ``t_eval`` iterations.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("training set is empty")
    mcfg = config.model_config()
    names = refine_param_names(params)
    graphs = [SceneGraphs.build(s.p1, s.p2, mcfg.graph_k) for s in dataset]
    with ad.no_grad():
        coarse = [iterate(s.p1, s.p2, params, config.t_eval, mcfg, g)[-1].data for s, g in zip(dataset, graphs)]
    state = AdamState()
    rng = np.random.default_rng(config.seed + 1)
    history = []
    total = int(config.epochs_refine) * len(dataset)
    for epoch in range(1, int(config.epochs_refine) + 1):
        losses, epes = [], []
        for i in rng.permutation(len(dataset)):
            s = dataset[i]
            with ad.Tape():
                out = refine(ad.Tensor(coarse[i]), s.p1, params, graphs[i].p1)
                loss = loss_refine(out, s.gt_flow)
            loss.backward()
            grads = _clip(_collect_grads(params, names), config.grad_clip)
            adam_step({n: params[n] for n in grads}, grads, state, learning_rate(config, state.t, total))
            losses.append(float(loss.data))
            epes.append(evaluate(out.data, s.gt_flow).epe)
        _log_epoch(history, callback, epoch, np.mean(losses), np.mean(epes))
    return params, history


def predict(p1, p2, params, config, iters=None, use_refine=True, graphs=None):
    """Flow estimate for one scene pair as a float array (no gradient recording)."""
    mcfg = config.model_config()
    iters = config.t_eval if iters is None else iters
    with ad.no_grad():
        if graphs is None:
            graphs = SceneGraphs.build(p1, p2, mcfg.graph_k)
        flow = iterate(p1, p2, params, iters, mcfg, graphs)[-1]
        if use_refine:
            flow = refine(flow, p1, params, graphs.p1)
    return flow.data


__all__ = [
    "AdamState",
    "TrainConfig",
    "adam_step",
    "iteration_weights",
    "learning_rate",
    "loss_iter",
    "loss_refine",
    "neighbor_graph",
    "predict",
    "train_main",
    "train_refine",
]

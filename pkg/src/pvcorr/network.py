"""Learnable blocks and the iterative flow estimator.

Parameter names are dotted paths, for example ``feat.setconv0.fc1.w``,
``corr.voxel.fc2.b``, ``gru.Wz`` or ``refine.fc.w``; see
:func:`param_shapes` for the full list. Everything under ``refine.`` belongs
to the refinement stage, everything else to the main stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .correlation import (
    POINT_OUT,
    branch_shapes,
    build_correlation,
    combine,
    point_branch,
    truncate,
    voxel_branch,
)
from .geometry import CubeSpec, KDTree

FEATURE_DIMS = (3, 32, 64, 128)
HIDDEN = 128
MOTION = 64
GN_GROUPS = 8
LEAKY_SLOPE = 0.1
PRELU_INIT = 0.25
CORR_MODES = ("both", "point", "voxel")
# first flow residuals start near zero instead of jumping by tenths of a meter
HEAD_OUT_SCALE = 0.01


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and lookup settings shared by training and inference."""

    m: int = 512
    k: int = 32
    cube: CubeSpec = field(default_factory=CubeSpec)
    graph_k: int = 32
    corr_mode: str = "both"
    h0_from_context: bool = True
    detach_flow: bool = True
    scale_corr: bool = False

    def __post_init__(self):
        if self.corr_mode not in CORR_MODES:
            raise ValueError(f"corr_mode must be one of {CORR_MODES}, got {self.corr_mode!r}")
        if self.k > self.m:
            raise ValueError(f"k={self.k} must not exceed the truncation number M={self.m}")
        if self.k < 1 or self.m < 1 or self.graph_k < 1:
            raise ValueError("k, M and graph_k must be positive")


def mid_dim(d_in, d_out):
    return d_out // 2 if d_in == 3 else (d_in + d_out) // 2


def _setconv_shapes(prefix, d_in, d_out):
    mid = mid_dim(d_in, d_out)
    shapes = {}
    for name, (a, b) in (("fc1", (2 * d_in, mid)), ("fc2", (mid, d_out)), ("fc3", (d_out, d_out))):
        shapes[f"{prefix}.{name}.w"] = (a, b)
        shapes[f"{prefix}.{name}.b"] = (b,)
        shapes[f"{prefix}.{name}.gamma"] = (b,)
        shapes[f"{prefix}.{name}.beta"] = (b,)
    return shapes


def param_shapes(config):
    """Ordered name -> shape map of every learnable tensor."""
    shapes = {}
    for prefix in ("feat", "ctx"):
        for i, (a, b) in enumerate(zip(FEATURE_DIMS[:-1], FEATURE_DIMS[1:])):
            shapes.update(_setconv_shapes(f"{prefix}.setconv{i}", a, b))
    shapes.update({f"corr.{k}": v for k, v in branch_shapes(config.cube).items()})
    ctx = FEATURE_DIMS[-1]
    shapes.update({
        "motion.corr.w": (POINT_OUT, MOTION), "motion.corr.b": (MOTION,),
        "motion.flow.w": (3, MOTION), "motion.flow.b": (MOTION,),
        "motion.merge.w": (2 * MOTION, MOTION), "motion.merge.b": (MOTION,),
    })
    gru_in = HIDDEN + MOTION + 3 + ctx
    for gate in ("z", "r", "h"):
        shapes[f"gru.W{gate}"] = (gru_in, HIDDEN)
        shapes[f"gru.b{gate}"] = (HIDDEN,)
    shapes["head.fc.w"] = (HIDDEN, HIDDEN)
    shapes["head.fc.b"] = (HIDDEN,)
    shapes.update(_setconv_shapes("head.setconv", HIDDEN, HIDDEN))
    shapes["head.out.w"] = (2 * HIDDEN, 3)
    shapes["head.out.b"] = (3,)
    for i, (a, b) in enumerate(zip(FEATURE_DIMS[:-1], FEATURE_DIMS[1:])):
        shapes.update(_setconv_shapes(f"refine.setconv{i}", a, b))
    shapes["refine.fc.w"] = (FEATURE_DIMS[-1], 3)
    shapes["refine.fc.b"] = (3,)
    return shapes


class ModelParams:
    """Ordered collection of named parameter tensors."""

    def __init__(self, tensors):
        self._t = dict(tensors)

    @classmethod
    def init(cls, config, seed=0):
        """Uniform fan-in initialization; the refinement output layer starts at zero
        so the refinement stage begins as the identity."""
        rng = np.random.default_rng(seed)
        tensors = {}
        fan_in = 1
        for name, shape in param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "gamma":
                arr = np.ones(shape)
            elif leaf == "beta":
                arr = np.zeros(shape)
            elif leaf == "prelu":
                arr = np.full(shape, PRELU_INIT)
            else:
                # biases follow their weight in declaration order and share its fan-in
                if len(shape) == 2:
                    fan_in = shape[0]
                bound = 1 / np.sqrt(fan_in)
                arr = rng.uniform(-bound, bound, size=shape)
            if name.startswith("refine.fc."):
                arr = np.zeros(shape)
            elif name.startswith("head.out."):
                arr = arr * HEAD_OUT_SCALE
            tensors[name] = ad.Tensor(arr.astype(np.float32), requires_grad=True, name=name)
        return cls(tensors)

    def __getitem__(self, name):
        return self._t[name]

    def __contains__(self, name):
        return name in self._t

    def __iter__(self):
        return iter(self._t)

    def __len__(self):
        return len(self._t)

    def names(self, prefix=""):
        return [n for n in self._t if n.startswith(prefix)]

    def items(self):
        return self._t.items()

    def scope(self, prefix):
        """Sub-mapping of the tensors under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {n[len(p):]: t for n, t in self._t.items() if n.startswith(p)}

    def astype(self, dtype):
        with ad.precision(dtype):
            return ModelParams({n: ad.Tensor(t.data.astype(dtype), requires_grad=True, name=n)
                                for n, t in self._t.items()})

    def copy(self):
        return ModelParams({n: ad.Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in self._t.items()})

    def state_dict(self, prefix=None, exclude=None):
        return {n: t.data for n, t in self._t.items()
                if (prefix is None or n.startswith(prefix)) and (exclude is None or not n.startswith(exclude))}

    def load_state(self, state, strict=True):
        """Overwrite tensors from a name -> array mapping (shapes must agree)."""
        for name, arr in state.items():
            if name not in self._t:
                if strict:
                    raise KeyError(f"unknown parameter {name!r}")
                continue
            if tuple(arr.shape) != self._t[name].shape:
                raise ValueError(f"{name}: checkpoint shape {tuple(arr.shape)} vs model {self._t[name].shape}")
            self._t[name] = ad.Tensor(np.array(arr, dtype=self._t[name].dtype), requires_grad=True, name=name)

    def save(self, path, prefix=None, exclude=None):
        checkpoint.save(path, self.state_dict(prefix=prefix, exclude=exclude))


def neighbor_graph(cloud, k):
    """Indices of the ``k`` nearest points of each point within its own cloud (itself first)."""
    cloud = np.asarray(cloud)
    if k > len(cloud):
        raise ValueError(f"feature graph needs k={k} neighbors but the cloud has {len(cloud)} points")
    idx, _ = KDTree(cloud).query(cloud, k)
    return idx


def fc_block(x, w, name):
    x = ad.pointwise_linear(x, w[f"{name}.w"], w[f"{name}.b"])
    x = ad.group_norm(x, GN_GROUPS, w[f"{name}.gamma"], w[f"{name}.beta"])
    return ad.leaky_relu(x, LEAKY_SLOPE)


def set_conv(feats, graph, w):
    """Point-set convolution over a precomputed neighbor graph.

    Each point sees ``concat(F_nb - F_p, F_nb)`` for its graph neighbors,
    followed by FC -> max-pool -> FC -> FC.
    """
    feats = ad._as_tensor(feats)
    graph = np.asarray(graph)
    n, k = graph.shape
    if feats.shape[0] != n:
        raise ValueError(f"{feats.shape[0]} feature rows for a {n}-point graph")
    fn = ad.gather_rows(feats, graph)
    fp = ad.repeat_rows(feats, k)
    x = ad.concat([ad.sub(fn, fp), fn], axis=-1)
    x = fc_block(x, w, "fc1")
    x = ad.max_pool_neighbors(x)
    x = fc_block(x, w, "fc2")
    return fc_block(x, w, "fc3")


def extract(cloud, graph, params, prefix):
    """Stacked SetConvs lifting coordinates 3 -> 32 -> 64 -> 128."""
    x = ad.Tensor(np.asarray(cloud))
    for i in range(len(FEATURE_DIMS) - 1):
        x = set_conv(x, graph, params.scope(f"{prefix}.setconv{i}"))
    return x


def extract_features(cloud, graph, params):
    return extract(cloud, graph, params, "feat")


def extract_context(cloud, graph, params):
    return extract(cloud, graph, params, "ctx")


def motion_encoder(corr, flow, w):
    """Encode correlation and current flow; output is ``concat(f'', flow)``, 64 + 3 channels."""
    corr, flow = ad._as_tensor(corr), ad._as_tensor(flow)
    if corr.shape[0] != flow.shape[0] or flow.shape[1] != 3:
        raise ValueError(f"motion encoder inputs disagree: corr {corr.shape}, flow {flow.shape}")
    c = ad.relu(ad.pointwise_linear(corr, w["corr.w"], w["corr.b"]))
    f = ad.relu(ad.pointwise_linear(flow, w["flow.w"], w["flow.b"]))
    m = ad.relu(ad.pointwise_linear(ad.concat([c, f], axis=1), w["merge.w"], w["merge.b"]))
    return ad.concat([m, flow], axis=1)


def gru_cell(h, x, w):
    """One convolutional GRU update over per-point features."""
    h, x = ad._as_tensor(h), ad._as_tensor(x)
    if h.shape[0] != x.shape[0]:
        raise ValueError(f"hidden state has {h.shape[0]} rows, input {x.shape[0]}")
    hx = ad.concat([h, x], axis=1)
    z = ad.sigmoid(ad.pointwise_linear(hx, w["Wz"], w["bz"]))
    r = ad.sigmoid(ad.pointwise_linear(hx, w["Wr"], w["br"]))
    rhx = ad.concat([ad.mul(r, h), x], axis=1)
    h_new = ad.tanh(ad.pointwise_linear(rhx, w["Wh"], w["bh"]))
    return ad.add(ad.mul(ad.one_minus(z), h), ad.mul(z, h_new))


def flow_head(h, graph, w):
    """Decode the per-iteration flow residual (N x 3) from the hidden state."""
    h1 = ad.pointwise_linear(h, w["fc.w"], w["fc.b"])
    h2 = set_conv(h, graph, {k[len("setconv."):]: v for k, v in w.items() if k.startswith("setconv.")})
    return ad.pointwise_linear(ad.concat([h1, h2], axis=1), w["out.w"], w["out.b"])


@dataclass
class SceneGraphs:
    """Per-scene neighbor graphs; depend only on geometry so they are built once."""

    p1: np.ndarray
    p2: np.ndarray

    @classmethod
    def build(cls, p1, p2, k):
        return cls(neighbor_graph(p1, k), neighbor_graph(p2, k))


@dataclass
class Lookup:
    """State fixed for the whole iteration: features, context and truncated correlation."""

    features1: ad.Tensor
    features2: ad.Tensor
    context: ad.Tensor
    corr: object


def prepare(p1, p2, params, config, graphs=None):
    if graphs is None:
        graphs = SceneGraphs.build(p1, p2, config.graph_k)
    f1 = extract_features(p1, graphs.p1, params)
    f2 = extract_features(p2, graphs.p2, params)
    ctx = extract_context(p1, graphs.p1, params)
    m = min(config.m, len(p2))
    if config.k > m:
        raise ValueError(f"k={config.k} exceeds the {m} retained targets")
    tc = truncate(build_correlation(f1, f2, config.scale_corr), m)
    return Lookup(f1, f2, ctx, tc), graphs


def correlation_features(q, p2, tc, params, config):
    if config.corr_mode == "point":
        return point_branch(q, p2, tc, config.k, params.scope("corr.point"))
    if config.corr_mode == "voxel":
        return voxel_branch(q, p2, tc, config.cube, params.scope("corr.voxel"))
    cp = point_branch(q, p2, tc, config.k, params.scope("corr.point"))
    cv = voxel_branch(q, p2, tc, config.cube, params.scope("corr.voxel"))
    return combine(cp, cv)


def iterate(p1, p2, params, iters, config, graphs=None, return_state=False):
    """Run ``iters`` recurrent updates starting from zero flow.

    Returns the list of flow estimates f_1..f_T (tensors, N1 x 3). With
    ``return_state`` also returns ``(lookup, graphs, deltas)``.
    """
    if iters < 1:
        raise ValueError(f"need at least one iteration, got {iters}")
    p1 = np.asarray(p1)
    p2 = np.asarray(p2)
    lookup, graphs = prepare(p1, p2, params, config, graphs)
    ctx = lookup.context
    h = ad.tanh(ctx) if config.h0_from_context else ad.Tensor(np.zeros((len(p1), HIDDEN)))
    p1_t = ad.Tensor(p1)
    flow = ad.Tensor(np.zeros_like(p1_t.data))
    motion_w = params.scope("motion")
    gru_w = params.scope("gru")
    head_w = params.scope("head")
    flows, deltas = [], []
    for _ in range(iters):
        if config.detach_flow:
            flow = flow.detach()
        q = ad.add(p1_t, flow)
        c = correlation_features(q, p2, lookup.corr, params, config)
        x = ad.concat([motion_encoder(c, flow, motion_w), ctx], axis=1)
        h = gru_cell(h, x, gru_w)
        delta = flow_head(h, graphs.p1, head_w)
        flow = ad.add(flow, delta)
        flows.append(flow)
        deltas.append(delta)
    if return_state:
        return flows, (lookup, graphs, deltas)
    return flows


def refine(flow, p1, params, graph=None, graph_k=32):
    """Residual smoothing of a converged flow on the source cloud's graph."""
    flow = ad._as_tensor(flow)
    p1 = np.asarray(p1)
    if flow.shape != p1.shape:
        raise ValueError(f"flow {flow.shape} does not match cloud {p1.shape}")
    if graph is None:
        graph = neighbor_graph(p1, graph_k)
    x = flow
    for i in range(len(FEATURE_DIMS) - 1):
        x = set_conv(x, graph, params.scope(f"refine.setconv{i}"))
    residual = ad.pointwise_linear(x, params["refine.fc.w"], params["refine.fc.b"])
    return ad.add(flow, residual)

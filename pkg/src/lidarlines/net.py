"""EdgeConv segmentation + description network in plain numpy.

Architecture (per cloud of N points):

* three EdgeConv encoders, each ``N x C``; layer 1 runs on coordinates (or on
  scale-invariant features with Euclidean neighborhoods), layers 2-3 rebuild
  the neighbor graph in their input feature space;
* the three encodings plus their global max-pool (broadcast) form an
  ``N x 6C`` head input;
* a segmentation head (``6C -> C -> C -> 2``, softmax) and a descriptor head
  (``6C -> C -> C -> d``, row L2-normalized).

Neighbor graphs use skip encoding: the ``S*k`` nearest neighbors are gathered
and every ``S``-th one is kept.

Gradients are computed by hand. Neighbor graphs are treated as constants, as
they are piecewise constant in the parameters.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional

import numpy as np

from .features import si_features_from_neighbors
from .geometry import SpatialIndex

CHECKPOINT_MAGIC = b"LLNT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    k: int = 20
    stride: int = 4
    channels: int = 16
    d: int = 16
    scale_invariant_first_layer: bool = False

    def __post_init__(self):
        for name in ("k", "stride", "channels", "d"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def _pairwise_sq_dist(x: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", x, x)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    return np.maximum(d, 0.0)


def skip_gather_all(features: np.ndarray, k: int, stride: int) -> np.ndarray:
    """``(N, k)`` strided neighbor table in the space of ``features``.

    Ranks by squared distance, self excluded, ties by ascending index; keeps
    ranks ``S-1, 2S-1, ..., kS-1``. Candidates come from the expanded-norm
    distance matrix and are re-ranked with exact differences.
    """
    x = np.asarray(features, dtype=np.float64)
    n = len(x)
    m = stride * k
    if n <= m:
        raise ValueError(f"need more than S*k = {m} points, got {n}")
    dist = _pairwise_sq_dist(x)
    np.fill_diagonal(dist, np.inf)
    width = min(m + 4, n - 1)
    if width < n - 1:
        cand = np.argpartition(dist, width, axis=1)[:, :width + 1]
    else:
        cand = np.argsort(dist, axis=1, kind="stable")[:, :n - 1]
    diff = x[cand] - x[:, None, :]
    cd = (diff ** 2).sum(axis=2)
    order = np.lexsort((cand, cd), axis=1)
    cand = np.take_along_axis(cand, order, axis=1)
    cd = np.take_along_axis(cd, order, axis=1)
    out = cand[:, :m]
    if m < cand.shape[1]:
        tied = cd[:, m - 1] >= cd[:, m]
        for i in np.flatnonzero(tied):
            out[i] = _exact_row(x, int(i), m)
    return out[:, stride - 1::stride]


def _exact_row(x: np.ndarray, i: int, m: int) -> np.ndarray:
    dist = ((x - x[i]) ** 2).sum(axis=1)
    dist[i] = np.inf
    return np.argsort(dist, kind="stable")[:m]


def skip_gather(features: np.ndarray, point_index: int, k: int, stride: int) -> np.ndarray:
    """Strided neighbors of a single point (see :func:`skip_gather_all`)."""
    x = np.asarray(features, dtype=np.float64)
    n = len(x)
    m = stride * k
    if n <= m:
        raise ValueError(f"need more than S*k = {m} points, got {n}")
    return _exact_row(x, int(point_index), m)[stride - 1::stride]


def euclidean_graph(points: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Strided neighbor table from a KD-tree over coordinates."""
    n = len(points)
    if n <= stride * k:
        raise ValueError(f"need more than S*k = {stride * k} points, got {n}")
    return SpatialIndex(points).knn_all(stride * k)[:, stride - 1::stride]


def edgeconv_forward(weight: np.ndarray, bias: np.ndarray, x: np.ndarray,
                     neighbors: np.ndarray, cache: Optional[dict] = None) -> np.ndarray:
    """Max over neighbors of ``relu([x_j, x_i - x_j] @ W + b)``.

    ``weight`` is ``(2*C_in, C_out)``: its top half acts on the center
    feature and its bottom half on the neighbor offset, so the edge map
    factorizes into ``x_j (W_top - W_bot) + x_i W_bot``.
    """
    c_in = x.shape[1]
    w_top, w_bot = weight[:c_in], weight[c_in:]
    center = x @ (w_top - w_bot) + bias
    nbr = x @ w_bot
    z = center[:, None, :] + nbr[neighbors]
    arg = z.argmax(axis=1)
    zmax = np.take_along_axis(z, arg[:, None, :], axis=1)[:, 0, :]
    if cache is not None:
        cache.update(x=x, neighbors=neighbors, arg=arg, zmax=zmax)
    return np.maximum(zmax, 0)


def edgeconv_backward(weight: np.ndarray, cache: dict, d_out: np.ndarray):
    x, neighbors, arg, zmax = cache["x"], cache["neighbors"], cache["arg"], cache["zmax"]
    c_in = x.shape[1]
    w_top, w_bot = weight[:c_in], weight[c_in:]
    dz = d_out * (zmax > 0)
    n, c_out = dz.shape
    src = np.take_along_axis(neighbors, arg, axis=1)
    flat = (src * c_out + np.arange(c_out)).ravel()
    d_nbr = np.bincount(flat, weights=dz.ravel(), minlength=n * c_out).reshape(n, c_out).astype(dz.dtype)
    d_p = x.T @ dz
    d_bias = dz.sum(axis=0)
    d_wbot = x.T @ d_nbr - d_p
    d_weight = np.vstack([d_p, d_wbot])
    d_x = dz @ (w_top - w_bot).T + d_nbr @ w_bot.T
    return d_weight, d_bias, d_x


@dataclass
class ForwardResult:
    seg_logits: np.ndarray
    seg_probs: np.ndarray
    descriptors: np.ndarray
    cache: dict


class MicroNet:
    """Parameter container with forward/backward passes.

    Args:
        cfg: architecture.
        seed: parameter initialization seed.
        dtype: computation dtype; float32 for training, float64 for
            gradient checks.
    """

    EDGE = ("edge1", "edge2", "edge3")
    SEG = ("seg1", "seg2", "seg3")
    DESC = ("desc1", "desc2", "desc3")

    def __init__(self, cfg: NetConfig = NetConfig(), seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        c = cfg.channels
        shapes = {
            "edge1": (6, c), "edge2": (2 * c, c), "edge3": (2 * c, c),
            "seg1": (6 * c, c), "seg2": (c, c), "seg3": (c, 2),
            "desc1": (6 * c, c), "desc2": (c, c), "desc3": (c, cfg.d),
        }
        self.params: Dict[str, np.ndarray] = {}
        for name, (fan_in, fan_out) in shapes.items():
            bound = np.sqrt(6.0 / fan_in)
            self.params[f"{name}.weight"] = rng.uniform(-bound, bound, (fan_in, fan_out)).astype(self.dtype)
            b = 1.0 / np.sqrt(fan_in)
            self.params[f"{name}.bias"] = rng.uniform(-b, b, fan_out).astype(self.dtype)

    # -- graph / input preparation ---------------------------------------
    def prepare(self, points: np.ndarray) -> dict:
        """Layer-1 input features and neighbor graph for a cloud.

        These depend only on the coordinates, so training loops cache them.
        """
        cfg = self.cfg
        pts = np.asarray(points, dtype=np.float64)
        graph = euclidean_graph(pts, cfg.k, cfg.stride)
        if cfg.scale_invariant_first_layer:
            feat_nbrs = SpatialIndex(pts).knn_all(cfg.k)
            x0, _ = si_features_from_neighbors(pts, feat_nbrs)
        else:
            x0 = pts
        return {"x0": x0.astype(self.dtype), "graph1": graph}

    def astype(self, dtype) -> "MicroNet":
        other = MicroNet.__new__(MicroNet)
        other.cfg = self.cfg
        other.dtype = np.dtype(dtype)
        other.params = {k: v.astype(dtype) for k, v in self.params.items()}
        return other

    # -- forward / backward ------------------------------------------------
    def forward(self, points: Optional[np.ndarray] = None, prepared: Optional[dict] = None,
                graphs: Optional[List[np.ndarray]] = None) -> ForwardResult:
        """Run the network on one cloud.

        Args:
            points: ``(N, 3)`` coordinates (ignored if ``prepared`` is given).
            prepared: output of :meth:`prepare`.
            graphs: optional fixed neighbor tables for layers 2 and 3.
        """
        if prepared is None:
            prepared = self.prepare(points)
        p = self.params
        cfg = self.cfg
        cache: dict = {"edge": [], "graphs": []}
        x = prepared["x0"]
        feats = []
        for li, name in enumerate(self.EDGE):
            if li == 0:
                nbrs = prepared["graph1"]
            elif graphs is not None:
                nbrs = graphs[li - 1]
            else:
                nbrs = skip_gather_all(x, cfg.k, cfg.stride)
            cache["graphs"].append(nbrs)
            ec: dict = {}
            x = edgeconv_forward(p[f"{name}.weight"], p[f"{name}.bias"], x, nbrs, ec)
            cache["edge"].append(ec)
            feats.append(x)
        local = np.concatenate(feats, axis=1)
        gmax_arg = local.argmax(axis=0)
        gmax = local[gmax_arg, np.arange(local.shape[1])]
        head_in = np.concatenate([local, np.broadcast_to(gmax, local.shape)], axis=1)
        cache.update(local=local, gmax_arg=gmax_arg, head_in=head_in)

        logits, cache["seg_acts"] = self._head(self.SEG, head_in)
        raw, cache["desc_acts"] = self._head(self.DESC, head_in)
        norm = np.linalg.norm(raw, axis=1, keepdims=True)
        norm = np.maximum(norm, np.finfo(self.dtype).tiny)
        desc = raw / norm
        cache.update(desc_norm=norm, desc_out=desc)

        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        probs = e / e.sum(axis=1, keepdims=True)
        return ForwardResult(logits, probs, desc, cache)

    def _head(self, names, x):
        p = self.params
        acts = [x]
        for i, name in enumerate(names):
            x = x @ p[f"{name}.weight"] + p[f"{name}.bias"]
            if i < len(names) - 1:
                x = np.maximum(x, 0)
            acts.append(x)
        return x, acts

    def _head_backward(self, names, acts, d_out, grads):
        p = self.params
        d = d_out
        for i in reversed(range(len(names))):
            name = names[i]
            if i < len(names) - 1:
                d = d * (acts[i + 1] > 0)
            grads[f"{name}.weight"] = acts[i].T @ d
            grads[f"{name}.bias"] = d.sum(axis=0)
            d = d @ p[f"{name}.weight"].T
        return d

    def backward(self, result: ForwardResult, d_logits: Optional[np.ndarray] = None,
                 d_descriptors: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
        """Parameter gradients given upstream gradients of the network outputs."""
        cache = result.cache
        dt = self.dtype
        n = result.seg_logits.shape[0]
        if d_logits is None:
            d_logits = np.zeros((n, 2), dt)
        if d_descriptors is None:
            d_descriptors = np.zeros((n, self.cfg.d), dt)
        d_logits = np.asarray(d_logits, dtype=dt)
        d_descriptors = np.asarray(d_descriptors, dtype=dt)
        grads: Dict[str, np.ndarray] = {}

        d_head = self._head_backward(self.SEG, cache["seg_acts"], d_logits, grads)
        desc = cache["desc_out"]
        d_raw = (d_descriptors - desc * (desc * d_descriptors).sum(axis=1, keepdims=True)) / cache["desc_norm"]
        d_head = d_head + self._head_backward(self.DESC, cache["desc_acts"], d_raw, grads)

        width = cache["local"].shape[1]
        d_local = d_head[:, :width].copy()
        d_g = d_head[:, width:].sum(axis=0)
        d_local[cache["gmax_arg"], np.arange(width)] += d_g

        c = self.cfg.channels
        d_x = None
        for li in reversed(range(3)):
            name = self.EDGE[li]
            d_out = d_local[:, li * c:(li + 1) * c]
            if d_x is not None:
                d_out = d_out + d_x
            dw, db, d_x = edgeconv_backward(self.params[f"{name}.weight"], cache["edge"][li], d_out)
            grads[f"{name}.weight"] = dw
            grads[f"{name}.bias"] = db
        return {k: grads[k].astype(dt) for k in self.params}

    def predict(self, points: np.ndarray, prepared: Optional[dict] = None) -> np.ndarray:
        res = self.forward(points, prepared)
        return (res.seg_probs[:, 1] > res.seg_probs[:, 0]).astype(np.uint8)

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


class Adam:
    """Adam with the step-decay schedule ``lr * 0.5 ** (epoch // 15)``."""

    def __init__(self, params: Dict[str, np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, decay_every: int = 15,
                 decay: float = 0.5):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.decay_every, self.decay = decay_every, decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay ** (epoch // self.decay_every)

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
             epoch: int = 0) -> None:
        self.t += 1
        lr = self.lr_at(epoch)
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            params[k] -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[k].dtype)


def adam_step(net: MicroNet, grads: Dict[str, np.ndarray], optimizer: Adam, epoch: int = 0) -> MicroNet:
    optimizer.step(net.params, grads, epoch)
    return net


# -- checkpoints -------------------------------------------------------------

def checkpoint_bytes(net: MicroNet, meta: Optional[dict] = None) -> bytes:
    names = sorted(net.params)
    header = {
        "config": asdict(net.cfg),
        "params": [{"name": n, "shape": list(net.params[n].shape)} for n in names],
        "meta": meta or {},
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    blobs = b"".join(np.ascontiguousarray(net.params[n], dtype="<f4").tobytes() for n in names)
    return CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(hdr)) + hdr + blobs


def checkpoint_from_bytes(data: bytes) -> MicroNet:
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a network checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    net = MicroNet(NetConfig(**header["config"]), seed=0)
    off = 12 + hlen
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
        net.params[entry["name"]] = arr.astype(np.float32)
        off += 4 * count
    if off != len(data):
        raise ValueError(f"checkpoint has {len(data) - off} trailing bytes")
    return net

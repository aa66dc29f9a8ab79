"""The trainable SMHGC pipeline.

Per view, three MLPs map the normalized adjacency and the normalized features
into similarity subspaces (``f_a``, ``f_x``) and a feature latent (``f_phi``,
decoded by ``g_xi``). Each epoch the two learned Gram matrices are mixed by
their agreement with the consensus Gram, discretized to a top-k graph,
propagated over the latent, and the per-view embeddings are fused into the
consensus embedding used for clustering.

Gradient flow: ``f_a``/``f_x`` only see the similarity loss; ``f_phi`` sees
reconstruction and KL; ``g_xi`` only reconstruction; centroids only KL. Graph
discretization and all fusion weights are computed on detached values.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from smhgc import numcore as nc
from smhgc.errors import ContractError, LoadError, NumericError
from smhgc.graphdata import MultiViewDataset
from smhgc.homophily import default_k, discretize_topk, l2_normalize_rows, normalized_adjacency
from smhgc.metrics import kmeans
from smhgc.numcore import AdamState, Rng, Tape, Var, adam_step, backward

log = logging.getLogger(__name__)

SCORE_EPS = 1e-8


@dataclass
class SmhgcConfig:
    k: int | None = None  # None -> 10% of N
    order: int = 4
    rho: float = 2.0
    gamma_sim: float = 1.0
    gamma_r: float = 1.0
    epochs: int = 400
    lr: float = 1e-3
    d_z: int = 64
    d_f: int = 64
    hidden: int = 256
    warmup_fraction: float = 0.2
    restarts: int = 10
    seed: int = 0
    # ablations
    use_sim_loss: bool = True
    use_recon_loss: bool = True
    use_kl: bool = True
    use_ax: bool = True
    use_aa: bool = True
    uniform_fusion: bool = False
    per_view_centroids: bool = False

    def validate(self, n_nodes: int, n_clusters: int) -> None:
        k = self.resolved_k(n_nodes)
        if n_clusters < 2:
            raise ContractError("need K >= 2 clusters")
        if not 1 <= k <= n_nodes:
            raise ContractError(f"k must lie in [1, {n_nodes}], got {k}")
        if self.order < 0:
            raise ContractError("order must be >= 0")
        if self.rho <= 0:
            raise ContractError("rho must be > 0")
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if not (self.use_ax or self.use_aa):
            raise ContractError("at least one of the feature / neighbor similarity branches must be enabled")

    def resolved_k(self, n_nodes: int) -> int:
        return default_k(n_nodes) if self.k is None else int(self.k)


# --------------------------------------------------------------------------
# encoders


@dataclass
class MLP:
    """Linear -> ReLU -> ... -> Linear. ``params`` alternates weight, bias."""

    params: list[np.ndarray]

    @classmethod
    def init(cls, sizes: list[int], rng: Rng) -> "MLP":
        params = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            params.append(rng.spawn(i).uniform(-bound, bound, size=(fan_in, fan_out)))
            params.append(np.zeros((1, fan_out)))
        return cls(params)

    def forward(self, x, leaves: list[Var]):
        h = x
        n_layers = len(leaves) // 2
        for i in range(n_layers):
            h = nc.add_row(nc.matmul(h, leaves[2 * i]), leaves[2 * i + 1])
            if i < n_layers - 1:
                h = nc.relu(h)
        return h

    def __call__(self, x):
        return self.forward(x, self.params)


ENCODER_NAMES = ("f_a", "f_x", "f_phi", "g_xi")


@dataclass
class ViewEncoders:
    f_a: MLP
    f_x: MLP
    f_phi: MLP
    g_xi: MLP

    @classmethod
    def init(cls, n_nodes: int, d_in: int, cfg: SmhgcConfig, rng: Rng) -> "ViewEncoders":
        return cls(
            MLP.init([n_nodes, cfg.hidden, cfg.d_z], rng.spawn(0)),
            MLP.init([d_in, cfg.hidden, cfg.d_z], rng.spawn(1)),
            MLP.init([d_in, cfg.hidden, cfg.d_f], rng.spawn(2)),
            MLP.init([cfg.d_f, cfg.hidden, d_in], rng.spawn(3)),
        )

    def mlps(self):
        return [(name, getattr(self, name)) for name in ENCODER_NAMES]


@dataclass
class SmhgcModel:
    config: SmhgcConfig
    encoders: list[ViewEncoders]
    centroids: np.ndarray | None = None
    view_centroids: list[np.ndarray] | None = None

    @classmethod
    def init(cls, dataset: MultiViewDataset, config: SmhgcConfig) -> "SmhgcModel":
        config.validate(dataset.n_nodes, dataset.num_clusters)
        rng = Rng(config.seed, 1)
        encoders = [
            ViewEncoders.init(dataset.n_nodes, v.features.shape[1], config, rng.spawn(i))
            for i, v in enumerate(dataset.views)
        ]
        return cls(config, encoders)

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for v, enc in enumerate(self.encoders):
            for name, mlp in enc.mlps():
                for j, p in enumerate(mlp.params):
                    out.append((f"view{v}.{name}.{'W' if j % 2 == 0 else 'b'}{j // 2}", p))
        if self.centroids is not None:
            out.append(("centroids", self.centroids))
        if self.view_centroids is not None:
            out.extend((f"view{v}.centroids", c) for v, c in enumerate(self.view_centroids))
        return out


# --------------------------------------------------------------------------
# per-view constant inputs


@dataclass
class ViewInputs:
    a_norm: np.ndarray
    x_hat: np.ndarray
    neighbor_target: np.ndarray
    feature_target: np.ndarray
    recon_target: np.ndarray


def minmax_columns(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = hi - lo
    const = span == 0
    if const.any():
        log.info("%d constant feature columns scaled to 0.5", int(const.sum()))
    return np.where(const[None, :], 0.5, (x - lo) / np.where(const, 1.0, span))


def prepare_inputs(dataset: MultiViewDataset) -> list[ViewInputs]:
    out = []
    for view in dataset.views:
        a = normalized_adjacency(view)
        xh = l2_normalize_rows(view.features)
        out.append(ViewInputs(a, xh, a @ a.T, xh @ xh.T, minmax_columns(xh)))
    return out


# --------------------------------------------------------------------------
# losses and fusion steps


def similarity_loss(z_a, z_x, neighbor_target, feature_target):
    """Gram-matching MSE for the neighbor-pattern and feature subspaces."""
    return nc.mse_gram(z_a, neighbor_target) + nc.mse_gram(z_x, feature_target)


def reconstruction_loss(logits, target):
    return nc.sigmoid_cross_entropy(logits, target)


def soft_assign(h, centroids):
    return nc.student_t(h, centroids)


def target_distribution(q: np.ndarray) -> np.ndarray:
    """Square-and-renormalize sharpening, weighted by inverse cluster frequency."""
    q = nc.as_matrix(q, "q")
    f = q.sum(axis=0)
    if np.any(f == 0):
        log.warning("empty cluster(s) in soft assignment: %s", np.nonzero(f == 0)[0].tolist())
    w = np.where(f > 0, q * q / np.where(f > 0, f, 1.0), 0.0)
    s = w.sum(axis=1, keepdims=True)
    return np.where(s > 0, w / np.where(s > 0, s, 1.0), 1.0 / q.shape[1])


def kl_loss(p_bar: np.ndarray, q_bar, views_q):
    loss = nc.kl_divergence(p_bar, q_bar)
    for q in views_q:
        loss = loss + nc.kl_divergence(p_bar, q)
    return loss


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float((a * b).sum() / (na * nb))


def intra_view_fuse(a_x: np.ndarray, a_a: np.ndarray, h_bar: np.ndarray) -> tuple[float, float, np.ndarray]:
    """Weights from clamped cosine agreement with the consensus Gram, normalized to sum 1."""
    g = h_bar @ h_bar.T
    c_x = max(_cosine(a_x, g), 0.0)
    c_a = max(_cosine(a_a, g), 0.0)
    if c_x + c_a == 0:
        log.info("both similarity branches orthogonal to consensus; using equal weights")
        w_x = w_a = 0.5
    else:
        w_x, w_a = c_x / (c_x + c_a), c_a / (c_x + c_a)
    return w_x, w_a, w_x * a_x + w_a * a_a


def aggregate(s, z_f, order: int):
    """Sum of ``S~^t Z_f`` for t = 0..order with S~ the row-normalized graph."""
    if order < 0:
        raise ContractError("order must be >= 0")
    p = nc.row_normalize(nc.as_matrix(s, "graph"))
    h = z_f
    out = z_f
    for _ in range(order):
        h = nc.matmul(p, h)
        out = nc.add(out, h)
    return out


def inter_view_fuse(views_h: list[np.ndarray], h_prev: np.ndarray, rho: float) -> tuple[np.ndarray, np.ndarray]:
    """Consensus embedding as a weighted sum of views, weights ``(score/max)^rho``."""
    for h in views_h:
        if h.shape != h_prev.shape:
            raise ContractError(f"view embedding {h.shape} does not match consensus {h_prev.shape}")
    scores = np.array([max(_cosine(h, h_prev), SCORE_EPS) for h in views_h])
    w = (scores / scores.max()) ** rho
    return sum(wv * h for wv, h in zip(w, views_h)), w


def fuse_weights(scores, rho: float) -> np.ndarray:
    s = np.maximum(np.asarray(scores, dtype=np.float64), SCORE_EPS)
    return (s / s.max()) ** rho


# --------------------------------------------------------------------------
# forward / training


@dataclass
class FusionState:
    epoch: int
    omega_x: list[float]
    omega_a: list[float]
    omega_h: list[float]
    graphs: list[np.ndarray] | None = None
    consensus: np.ndarray | None = None


@dataclass
class Assignments:
    views_q: list[np.ndarray]
    q_bar: np.ndarray
    p_bar: np.ndarray


@dataclass
class ForwardPass:
    tape: Tape
    leaves: dict[str, Var]
    losses: dict[str, Var | None]
    total: Var | None
    consensus: Var
    views_h: list[np.ndarray]
    fusion: FusionState
    assignments: Assignments | None


def _leaf_map(tape: Tape, model: SmhgcModel, track: bool) -> dict[str, Var]:
    return {name: tape.leaf(p, trainable=track, name=name) for name, p in model.named_parameters()}


def forward(
    model: SmhgcModel,
    inputs: list[ViewInputs],
    h_prev: np.ndarray | None,
    epoch: int = 0,
    kl_active: bool = False,
    gamma_sim: float | None = None,
    gamma_r: float | None = None,
    track: bool = True,
) -> ForwardPass:
    cfg = model.config
    gamma_sim = (cfg.gamma_sim if cfg.use_sim_loss else 0.0) if gamma_sim is None else gamma_sim
    gamma_r = (cfg.gamma_r if cfg.use_recon_loss else 0.0) if gamma_r is None else gamma_r
    n = inputs[0].a_norm.shape[0]
    k = cfg.resolved_k(n)
    tape = Tape()
    leaves = _leaf_map(tape, model, track)

    def mlp_leaves(v, name):
        return [leaves[key] for key in leaves if key.startswith(f"view{v}.{name}.")]

    sim_terms, rec_terms, z_fs = [], [], []
    omega_x, omega_a, graphs = [], [], []
    for v, (enc, inp) in enumerate(zip(model.encoders, inputs)):
        z_a = enc.f_a.forward(inp.a_norm, mlp_leaves(v, "f_a"))
        z_x = enc.f_x.forward(inp.x_hat, mlp_leaves(v, "f_x"))
        z_f = enc.f_phi.forward(inp.x_hat, mlp_leaves(v, "f_phi"))
        logits = enc.g_xi.forward(z_f, mlp_leaves(v, "g_xi"))
        if gamma_sim:
            sim_terms.append(similarity_loss(z_a, z_x, inp.neighbor_target, inp.feature_target))
        if gamma_r:
            rec_terms.append(reconstruction_loss(logits, inp.recon_target))

        a_x = z_x.value @ z_x.value.T
        a_a = z_a.value @ z_a.value.T
        if not cfg.use_ax:
            w_x, w_a, s_dense = 0.0, 1.0, a_a
        elif not cfg.use_aa:
            w_x, w_a, s_dense = 1.0, 0.0, a_x
        elif h_prev is None or cfg.uniform_fusion:
            w_x, w_a = 0.5, 0.5
            s_dense = 0.5 * a_x + 0.5 * a_a
        else:
            w_x, w_a, s_dense = intra_view_fuse(a_x, a_a, h_prev)
        s = discretize_topk(s_dense, k)
        omega_x.append(w_x)
        omega_a.append(w_a)
        graphs.append(s)
        z_fs.append(aggregate(s, z_f, cfg.order))

    views_h = [h.value for h in z_fs]
    reference = h_prev if h_prev is not None else sum(views_h) / len(views_h)
    _, w_h = inter_view_fuse(views_h, reference, cfg.rho)
    consensus = z_fs[0] * float(w_h[0])
    for wv, h in zip(w_h[1:], z_fs[1:]):
        consensus = consensus + h * float(wv)

    assignments = None
    kl = None
    if kl_active and model.centroids is not None:
        mu = leaves["centroids"]
        q_bar = soft_assign(consensus, mu)
        # views live on the 1/sum(w_h) scale of the consensus
        scale = float(w_h.sum())
        views_q = []
        for v, h in enumerate(z_fs):
            mu_v = leaves[f"view{v}.centroids"] if model.view_centroids is not None else mu
            views_q.append(soft_assign(h * scale, mu_v))
        p_bar = target_distribution(q_bar.value)
        kl = kl_loss(p_bar, q_bar, views_q)
        assignments = Assignments([q.value for q in views_q], q_bar.value, p_bar)

    losses = {
        "sim": _sum(sim_terms),
        "recon": _sum(rec_terms),
        "kl": kl,
    }
    total = None
    for weight, term in ((gamma_sim, losses["sim"]), (gamma_r, losses["recon"]), (1.0, kl)):
        if term is None or weight == 0:
            continue
        part = term * weight if weight != 1.0 else term
        total = part if total is None else total + part
    fusion = FusionState(epoch, omega_x, omega_a, [float(w) for w in w_h], graphs)
    return ForwardPass(tape, leaves, losses, total, consensus, views_h, fusion, assignments)


def _sum(terms):
    if not terms:
        return None
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def embed(model: SmhgcModel, inputs: list[ViewInputs], h_prev: np.ndarray | None) -> np.ndarray:
    """Consensus embedding for the current parameters (no loss, no gradient).

    Without a previous consensus this is the plain mean of the view embeddings.
    """
    fp = forward(model, inputs, h_prev, gamma_sim=0.0, gamma_r=0.0, track=False)
    if h_prev is None:
        return sum(fp.views_h) / len(fp.views_h)
    return fp.consensus.value


@dataclass
class TrainResult:
    consensus: np.ndarray
    fusion_history: list[FusionState] = field(default_factory=list)
    loss_history: list[dict] = field(default_factory=list)
    assignments: Assignments | None = None
    final_fusion: FusionState | None = None


def warmup_epoch(cfg: SmhgcConfig) -> int:
    return int(round(cfg.warmup_fraction * cfg.epochs))


def train(dataset: MultiViewDataset, model: SmhgcModel, callback=None) -> TrainResult:
    cfg = model.config
    cfg.validate(dataset.n_nodes, dataset.num_clusters)
    inputs = prepare_inputs(dataset)
    names = [n for n, _ in model.named_parameters()]
    opt = AdamState.for_params([p for _, p in model.named_parameters()], learning_rate=cfg.lr)
    result = TrainResult(consensus=np.empty(0))
    h_prev = None
    warm = warmup_epoch(cfg)
    epoch = 0
    try:
        for epoch in range(cfg.epochs):
            opt, names, h_prev = _epoch(model, dataset, inputs, opt, names, h_prev, epoch, warm, result, callback)
        epoch = cfg.epochs
        final = forward(model, inputs, h_prev, cfg.epochs, track=False, gamma_sim=0.0, gamma_r=0.0)
    except NumericError as exc:
        raise NumericError(f"epoch {epoch}: {exc}") from None
    result.consensus = embed(model, inputs, None) if h_prev is None else final.consensus.value
    final.fusion.consensus = result.consensus
    result.final_fusion = final.fusion
    return result


def _epoch(model, dataset, inputs, opt, names, h_prev, epoch, warm, result, callback):
    cfg = model.config
    if cfg.use_kl and epoch == warm and model.centroids is None:
        _init_centroids(model, inputs, h_prev, dataset.num_clusters)
        opt = _extend_adam(opt, model, names)
        names = [n for n, _ in model.named_parameters()]
    fp = forward(model, inputs, h_prev, epoch, kl_active=model.centroids is not None and cfg.use_kl)
    record = {"epoch": epoch}
    for key, term in fp.losses.items():
        record[key] = float(term.value[0, 0]) if term is not None else 0.0
    record["total"] = float(fp.total.value[0, 0]) if fp.total is not None else 0.0
    if not np.isfinite(record["total"]):
        raise NumericError("non-finite total loss")
    result.loss_history.append(record)
    result.fusion_history.append(FusionState(epoch, fp.fusion.omega_x, fp.fusion.omega_a, fp.fusion.omega_h))
    if fp.assignments is not None:
        result.assignments = fp.assignments
    if callback is not None:
        callback(epoch, fp)
    if fp.total is not None:
        grads = backward(fp.tape, fp.total)
        params = [p for _, p in model.named_parameters()]
        new = adam_step(opt, params, [grads[fp.leaves[n]] for n in names])
        for name, value in zip(names, new):
            if not np.all(np.isfinite(value)):
                raise NumericError(f"non-finite values in parameter {name} after update")
        _set_parameters(model, new)
    return opt, names, fp.consensus.value


def _init_centroids(model: SmhgcModel, inputs, h_prev, n_clusters: int) -> None:
    h = embed(model, inputs, h_prev)
    res = kmeans(h, n_clusters, model.config.restarts, Rng(model.config.seed, 2))
    model.centroids = res.centroids.copy()
    if model.config.per_view_centroids:
        model.view_centroids = [res.centroids.copy() for _ in model.encoders]


def _extend_adam(opt: AdamState, model: SmhgcModel, old_names: list[str]) -> AdamState:
    known = dict(zip(old_names, zip(opt.first_moment, opt.second_moment)))
    first, second = [], []
    for name, p in model.named_parameters():
        m, v = known.get(name, (np.zeros_like(p), np.zeros_like(p)))
        first.append(m)
        second.append(v)
    opt.first_moment, opt.second_moment = first, second
    return opt


def _set_parameters(model: SmhgcModel, values: list[np.ndarray]) -> None:
    it = iter(values)
    for enc in model.encoders:
        for _, mlp in enc.mlps():
            mlp.params = [next(it) for _ in mlp.params]
    if model.centroids is not None:
        model.centroids = next(it)
    if model.view_centroids is not None:
        model.view_centroids = [next(it) for _ in model.view_centroids]


def gradients(model: SmhgcModel, dataset: MultiViewDataset, h_prev=None, kl_active=False, gamma_sim=None, gamma_r=None) -> dict[str, np.ndarray]:
    """Named parameter gradients of the total loss for one forward pass."""
    fp = forward(model, prepare_inputs(dataset), h_prev, kl_active=kl_active, gamma_sim=gamma_sim, gamma_r=gamma_r)
    if fp.total is None:
        return {name: np.zeros_like(leaf.value) for name, leaf in fp.leaves.items()}
    grads = backward(fp.tape, fp.total)
    return {name: grads[leaf] for name, leaf in fp.leaves.items()}


# --------------------------------------------------------------------------
# checkpoint: <u64 LE header length><JSON header><f64 LE blocks in header order>


def save_checkpoint(
    path, model: SmhgcModel, epoch: int, consensus: np.ndarray | None = None, n_clusters: int | None = None
) -> None:
    blocks = model.named_parameters()
    if consensus is not None:
        blocks = blocks + [("consensus", consensus)]
    header = {
        "format": "smhgc-checkpoint/1",
        "hyperparams": asdict(model.config),
        "seed": model.config.seed,
        "epoch": epoch,
        "n_clusters": n_clusters,
        "views": [
            {name: [list(p.shape) for p in mlp.params] for name, mlp in enc.mlps()} for enc in model.encoders
        ],
        "blocks": [{"name": n, "shape": list(a.shape)} for n, a in blocks],
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for _, a in blocks:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[SmhgcModel, dict, np.ndarray | None]:
    data = Path(path).read_bytes()
    try:
        (hlen,) = struct.unpack_from("<Q", data, 0)
        header = json.loads(data[8 : 8 + hlen])
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise LoadError(f"{path}: not a checkpoint ({exc})") from None
    offset = 8 + hlen
    arrays = {}
    for b in header["blocks"]:
        count = int(np.prod(b["shape"]))
        if offset + 8 * count > len(data):
            raise LoadError(f"{path}: truncated at block {b['name']!r}")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(b["shape"])
        arrays[b["name"]] = arr.astype(np.float64)
        offset += 8 * count
    if offset != len(data):
        raise LoadError(f"{path}: {len(data) - offset} trailing bytes")
    cfg = SmhgcConfig(**header["hyperparams"])
    encoders = []
    for v, shapes in enumerate(header["views"]):
        mlps = {}
        for name in ENCODER_NAMES:
            params = []
            for j in range(len(shapes[name])):
                params.append(arrays[f"view{v}.{name}.{'W' if j % 2 == 0 else 'b'}{j // 2}"])
            mlps[name] = MLP(params)
        encoders.append(ViewEncoders(**mlps))
    model = SmhgcModel(cfg, encoders, arrays.get("centroids"))
    if "view0.centroids" in arrays:
        model.view_centroids = [arrays[f"view{v}.centroids"] for v in range(len(encoders))]
    return model, header, arrays.get("consensus")

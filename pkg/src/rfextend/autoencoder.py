"""Geometry-regularized autoencoders for out-of-sample extension.

All networks are fully connected with hand-written backpropagation. The
training objective is

    MSE(target, f_d(f_e(x))) + lam * MSE(f_e(x), G) [+ gamma * MSE(P, head(f_e(x)))]

where ``G`` is the reference embedding of the training rows and the last
term exists only for the proximity-head variant.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .data import feature_stats
from .embed import Embedding
from .proximity import ProximityMatrix, extend_proximities, select_prototypes, train_proximities

MODEL_FORMAT_VERSION = 1

RF_GRAE = "RF-GRAE"
RF_PROX_IN = "RF-PROX-IN"
RF_PROX_REG = "RF-PROX-REG"
RF_PRN = "RF-PRN"
RF_PRN_PRO = "RF-PRN-PRO"
VARIANTS = (RF_GRAE, RF_PROX_IN, RF_PROX_REG, RF_PRN, RF_PRN_PRO)
FEATURE_INPUT = (RF_GRAE, RF_PROX_REG)


class AEError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


def canonical_variant(name: str) -> str:
    """Accept ``rf-prn``, ``RF_PRN`` etc. and return the canonical spelling."""
    key = name.strip().upper().replace("_", "-")
    if key not in VARIANTS:
        raise AEError(f"unknown variant '{name}'; choose from {', '.join(VARIANTS)}")
    return key


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: str = "relu"

    def __call__(self, a):
        s = a @ self.W + self.b
        return np.maximum(s, 0.0) if self.activation == "relu" else s


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    lr_decay: float | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise AEError("epochs must be >= 0")
        if self.batch_size < 1:
            raise AEError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise AEError(f"unknown optimizer '{self.optimizer}'")


@dataclass
class AEModel:
    variant: str
    encoder: list
    decoder: list
    lam: float = 1.0
    gamma: float = 1.0
    prox_head: Layer | None = None
    prototypes: np.ndarray | None = None
    input_shift: np.ndarray | None = None
    input_scale: np.ndarray | None = None
    g_shift: np.ndarray | None = None
    g_scale: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def bottleneck_dim(self) -> int:
        return self.encoder[-1].W.shape[1]

    @property
    def input_dim(self) -> int:
        return self.encoder[0].W.shape[0]

    @property
    def output_dim(self) -> int:
        return self.decoder[-1].W.shape[1]

    def layers(self):
        return self.encoder + self.decoder + ([self.prox_head] if self.prox_head else [])

    def parameters(self):
        """Flat list ``[W0, b0, W1, b1, ...]`` over encoder, decoder, head."""
        return [p for layer in self.layers() for p in (layer.W, layer.b)]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def encode(self, inputs) -> np.ndarray:
        a = np.asarray(inputs, dtype=np.float64)
        if a.ndim != 2 or a.shape[1] != self.input_dim:
            raise AEError(f"encoder expects width {self.input_dim}, got shape {a.shape}")
        for layer in self.encoder:
            a = layer(a)
        return a

    def to_embedding_frame(self, Z) -> np.ndarray:
        """Undo the per-dimension standardization applied to ``G`` during training."""
        if self.g_shift is None:
            return Z
        return Z * self.g_scale + self.g_shift

    # -- serialization -------------------------------------------------

    def to_json(self) -> str:
        def pack(layer):
            return {
                "shape": list(layer.W.shape),
                "weights": layer.W.ravel(order="C").tolist(),
                "bias": layer.b.tolist(),
                "activation": layer.activation,
            }

        def vec(a):
            return None if a is None else np.asarray(a).tolist()

        doc = {
            "format": "rfextend.autoencoder",
            "format_version": MODEL_FORMAT_VERSION,
            "variant": self.variant,
            "lambda": self.lam,
            "gamma": self.gamma,
            "encoder": [pack(lay) for lay in self.encoder],
            "decoder": [pack(lay) for lay in self.decoder],
            "prox_head": pack(self.prox_head) if self.prox_head else None,
            "prototypes": vec(self.prototypes),
            "input_shift": vec(self.input_shift),
            "input_scale": vec(self.input_scale),
            "g_shift": vec(self.g_shift),
            "g_scale": vec(self.g_scale),
            "meta": self.meta,
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "AEModel":
        doc = json.loads(text)
        if doc.get("format_version") != MODEL_FORMAT_VERSION:
            raise AEError(f"unsupported model format version {doc.get('format_version')}")

        def unpack(d):
            W = np.asarray(d["weights"], dtype=np.float64).reshape(d["shape"])
            return Layer(W, np.asarray(d["bias"], dtype=np.float64), d["activation"])

        def arr(v, dtype=np.float64):
            return None if v is None else np.asarray(v, dtype=dtype)

        return cls(
            variant=doc["variant"],
            encoder=[unpack(d) for d in doc["encoder"]],
            decoder=[unpack(d) for d in doc["decoder"]],
            lam=doc["lambda"],
            gamma=doc["gamma"],
            prox_head=unpack(doc["prox_head"]) if doc["prox_head"] else None,
            prototypes=arr(doc["prototypes"], np.int64),
            input_shift=arr(doc["input_shift"]),
            input_scale=arr(doc["input_scale"]),
            g_shift=arr(doc["g_shift"]),
            g_scale=arr(doc["g_scale"]),
            meta=doc.get("meta", {}),
        )


class TrainingIO(NamedTuple):
    inputs: np.ndarray
    targets: np.ndarray
    prox_targets: np.ndarray | None = None


def _values(P):
    return P.values if isinstance(P, ProximityMatrix) else np.asarray(P, dtype=np.float64)


def build_io(variant, X, P, protos=None) -> TrainingIO:
    """Encoder inputs and decoder targets for a variant.

    RF-GRAE and RF-PROX-REG map features to features (the latter adds the
    proximity rows as head targets), RF-PROX-IN maps proximities to
    features, RF-PRN maps proximities to proximities, and RF-PRN-PRO does
    the same on the prototype columns only.
    """
    variant = canonical_variant(variant)
    X = np.asarray(X, dtype=np.float64)
    V = _values(P) if P is not None else None
    if variant != RF_GRAE:
        if V is None:
            raise AEError(f"{variant} needs the training proximity matrix")
        if V.shape[0] != X.shape[0]:
            raise AEError("proximity rows do not match feature rows")
    if variant in (RF_PRN, RF_PRN_PRO, RF_PROX_REG, RF_PROX_IN) and V.shape[0] != V.shape[1]:
        raise AEError(f"{variant} needs a square training proximity matrix")
    if variant == RF_PRN_PRO and protos is None:
        raise AEError("RF-PRN-PRO needs a prototype set")
    if variant == RF_GRAE:
        return TrainingIO(X, X)
    if variant == RF_PROX_IN:
        return TrainingIO(V, X)
    if variant == RF_PROX_REG:
        return TrainingIO(X, X, V)
    if variant == RF_PRN:
        return TrainingIO(V, V)
    cols = np.asarray(getattr(protos, "indices", protos), dtype=np.int64)
    return TrainingIO(V[:, cols], V[:, cols])


def init_model(variant, input_dim, output_dim, k, hidden=(800, 400, 100), *,
               lam=1.0, gamma=1.0, prox_dim=None, seed=0) -> AEModel:
    """Fresh network with He-uniform weights and zero biases.

    The decoder mirrors the encoder's hidden widths. Hidden layers use ReLU;
    the bottleneck, the reconstruction and the proximity head are linear.
    """
    variant = canonical_variant(variant)
    rng = np.random.default_rng(seed)

    def make(widths, last_linear=True):
        layers = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            bound = np.sqrt(6.0 / a)
            act = "linear" if (last_linear and i == len(widths) - 2) else "relu"
            layers.append(Layer(rng.uniform(-bound, bound, size=(a, b)), np.zeros(b), act))
        return layers

    hidden = list(hidden)
    encoder = make([input_dim] + hidden + [k])
    decoder = make([k] + hidden[::-1] + [output_dim])
    head = None
    if variant == RF_PROX_REG:
        if prox_dim is None:
            raise AEError("RF-PROX-REG needs prox_dim for its proximity head")
        head = make([k, prox_dim])[0]
    return AEModel(variant, encoder, decoder, lam=lam, gamma=gamma, prox_head=head,
                   meta={"hidden": hidden, "init_seed": seed})


def _run(layers, a):
    cache = [a]
    for layer in layers:
        a = layer(a)
        cache.append(a)
    return cache


def forward(m: AEModel, batch):
    """``(Z, reconstruction, prox_prediction)``; the last is None without a head."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != m.input_dim:
        raise AEError(f"batch width {np.shape(batch)[-1]} != encoder input width {m.input_dim}")
    Z = _run(m.encoder, batch)[-1]
    recon = _run(m.decoder, Z)[-1]
    prox = m.prox_head(Z) if m.prox_head is not None else None
    return Z, recon, prox


def _mse(a, b):
    return float(np.mean((a - b) ** 2))


def loss(m: AEModel, batch, target, G_batch, prox_target=None):
    """Total loss and its ``{"recon", "geom", "prox"}`` breakdown (unweighted terms)."""
    Z, recon, prox = forward(m, batch)
    G_batch = np.asarray(G_batch, dtype=np.float64)
    if G_batch.shape != Z.shape:
        raise AEError(f"G rows/width {G_batch.shape} do not align with latent {Z.shape}")
    terms = {"recon": _mse(recon, target), "geom": _mse(Z, G_batch), "prox": 0.0}
    if prox is not None:
        if prox_target is None:
            raise AEError("proximity head present but no proximity targets given")
        terms["prox"] = _mse(prox, prox_target)
    total = terms["recon"] + m.lam * terms["geom"] + m.gamma * terms["prox"]
    return total, terms


def _backprop(layers, cache, grad_out, grads):
    """Accumulate ``(dW, db)`` for ``layers`` into ``grads``; return grad w.r.t. the input."""
    g = grad_out
    for layer, a_in, a_out in zip(layers[::-1], cache[-2::-1], cache[:0:-1]):
        if layer.activation == "relu":
            g = g * (a_out > 0)
        grads.append((a_in.T @ g, g.sum(axis=0)))
        g = g @ layer.W.T
    return g


def backward(m: AEModel, batch, target, G_batch, prox_target=None):
    """Analytic gradients of :func:`loss`, aligned with ``m.parameters()``."""
    batch = np.asarray(batch, dtype=np.float64)
    enc = _run(m.encoder, batch)
    Z = enc[-1]
    dec = _run(m.decoder, Z)
    recon = dec[-1]
    dec_grads, enc_grads, head_grads = [], [], []
    g_recon = 2.0 * (recon - target) / recon.size
    dZ = _backprop(m.decoder, dec, g_recon, dec_grads)
    dZ = dZ + m.lam * 2.0 * (Z - G_batch) / Z.size
    if m.prox_head is not None:
        H = m.prox_head(Z)
        dH = m.gamma * 2.0 * (H - prox_target) / H.size
        head_grads.append((Z.T @ dH, dH.sum(axis=0)))
        dZ = dZ + dH @ m.prox_head.W.T
    _backprop(m.encoder, enc, dZ, enc_grads)
    ordered = enc_grads[::-1] + dec_grads[::-1] + head_grads
    return [g for pair in ordered for g in pair]


class _Optimizer:
    def __init__(self, params, cfg: TrainConfig):
        self.cfg = cfg
        self.lr = cfg.learning_rate
        self.step_count = 0
        if cfg.optimizer == "adam":
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        cfg = self.cfg
        if cfg.optimizer == "sgd":
            for p, g in zip(params, grads):
                p -= self.lr * g
            return
        self.step_count += 1
        c1 = 1.0 - cfg.beta1**self.step_count
        c2 = 1.0 - cfg.beta2**self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def train(m: AEModel, inputs, targets, G, cfg: TrainConfig | None = None, prox_targets=None):
    """Mini-batch training in place. Returns ``(m, history)``.

    ``history`` maps ``total``, ``recon``, ``geom`` and ``prox`` to per-epoch
    averages over batches (weighted by batch size), plus ``initial`` (the
    full-data loss before any update) and ``seconds`` (wall-clock time).
    """
    cfg = cfg or TrainConfig()
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    n = inputs.shape[0]
    if G.shape[0] != n or targets.shape[0] != n:
        raise AEError("inputs, targets and G must have the same number of rows")
    if m.prox_head is not None and prox_targets is None:
        raise AEError("proximity head present but no proximity targets given")
    initial, _ = loss(m, inputs, targets, G, prox_targets)
    history = {"total": [], "recon": [], "geom": [], "prox": [], "initial": initial}
    rng = np.random.default_rng(cfg.seed)
    opt = _Optimizer(m.parameters(), cfg)
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums = dict.fromkeys(("total", "recon", "geom", "prox"), 0.0)
        for bi, s in enumerate(range(0, n, cfg.batch_size)):
            idx = order[s : s + cfg.batch_size]
            pt = prox_targets[idx] if prox_targets is not None else None
            total, terms = loss(m, inputs[idx], targets[idx], G[idx], pt)
            if not np.isfinite(total):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {bi}; lower the learning rate"
                )
            grads = backward(m, inputs[idx], targets[idx], G[idx], pt)
            opt.step(m.parameters(), grads)
            w = len(idx) / n
            sums["total"] += w * total
            for key in ("recon", "geom", "prox"):
                sums[key] += w * terms[key]
        for key, val in sums.items():
            history[key].append(val)
        if cfg.lr_decay is not None:
            opt.lr *= cfg.lr_decay
    history["seconds"] = time.perf_counter() - start
    m.meta["train"] = asdict(cfg)
    return m, history


@dataclass
class ExtensionFit:
    """A trained model with the artifacts it was trained from."""

    model: AEModel
    history: dict
    train_latent: np.ndarray
    recon_mse: float
    seconds: float


def fit_extension(variant, f, ds_train, G, *, lam=1.0, gamma=1.0, proto_frac=None,
                  hidden=(800, 400, 100), train_cfg: TrainConfig | None = None,
                  P=None, standardize_g=True) -> ExtensionFit:
    """Train one extension network on a forest's training rows.

    ``G`` is the reference embedding of those rows. Features are z-scored
    with training statistics; ``G`` is z-scored per dimension unless
    ``standardize_g`` is False. ``P`` may carry precomputed training
    proximities (``mode="zero"``) to share across variants.
    """
    variant = canonical_variant(variant)
    train_cfg = train_cfg or TrainConfig()
    G = G.coords if isinstance(G, Embedding) else np.asarray(G, dtype=np.float64)
    if G.shape[0] != ds_train.n:
        raise AEError("G rows must match the training rows")
    shift, scale = feature_stats(ds_train.features)
    X = (ds_train.features - shift) / scale
    if variant != RF_GRAE and P is None:
        P = train_proximities(f, ds_train, mode="zero")
    protos = None
    if variant == RF_PRN_PRO:
        if proto_frac is None:
            raise AEError("RF-PRN-PRO needs proto_frac")
        protos = select_prototypes(P, ds_train.labels, proto_frac)
    io = build_io(variant, X, P, protos)
    if standardize_g:
        g_shift, g_scale = feature_stats(G)
    else:
        g_shift, g_scale = np.zeros(G.shape[1]), np.ones(G.shape[1])
    Gs = (G - g_shift) / g_scale
    prox_dim = io.prox_targets.shape[1] if io.prox_targets is not None else None
    m = init_model(variant, io.inputs.shape[1], io.targets.shape[1], G.shape[1], hidden,
                   lam=lam, gamma=gamma, prox_dim=prox_dim, seed=train_cfg.seed)
    if variant in FEATURE_INPUT:
        m.input_shift, m.input_scale = shift, scale
    m.g_shift, m.g_scale = g_shift, g_scale
    if protos is not None:
        m.prototypes = protos.indices
        m.meta["proto_frac"] = proto_frac
    m.meta.update({"standardize_g": standardize_g, "n_train": ds_train.n,
                   "feature_names": list(ds_train.feature_names)})
    m, history = train(m, io.inputs, io.targets, Gs, train_cfg, io.prox_targets)
    Z, recon, _ = forward(m, io.inputs)
    return ExtensionFit(
        model=m,
        history=history,
        train_latent=m.to_embedding_frame(Z),
        recon_mse=_mse(recon, io.targets),
        seconds=history["seconds"],
    )


def encoder_inputs(m: AEModel, f, ds_train, new_points) -> np.ndarray:
    """Per-variant encoder inputs for unlabeled points."""
    X = np.asarray(new_points, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != ds_train.d:
        raise AEError(f"new points need {ds_train.d} features, got shape {np.shape(new_points)}")
    if m.variant in FEATURE_INPUT:
        return (X - m.input_shift) / m.input_scale
    P = extend_proximities(f, ds_train, X).values
    if m.variant == RF_PRN_PRO:
        P = P[:, m.prototypes]
    return P


def extend(m: AEModel, f, ds_train, new_points) -> Embedding:
    """Embed unlabeled points with the trained encoder.

    Coordinates are returned in the frame of the reference embedding the
    model was regularized towards.
    """
    Z = m.encode(encoder_inputs(m, f, ds_train, new_points))
    return Embedding(m.to_embedding_frame(Z), "encoder", {"variant": m.variant, "lambda": m.lam})

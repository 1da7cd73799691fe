"""Interpolatory autoencoder (IAE) and projections onto its learned manifold.

The encoder and decoder are stacks of constant-width fully connected
layers ``y <- tanh(W y + b) + skip * y``. A sample is encoded, expressed as
the affine (sum-to-one) combination of the encoded anchor points that best
fits its code, and decoded back. The generator is ``g(lam) = decode(Phi lam)``
where ``Phi`` holds the encoded anchors as columns.

Everything is plain numpy with hand-written backpropagation, so the
training loss and the projection objective expose analytic gradients that
the test-suite checks against finite differences.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sgmca.matops import NumericalError, as_matrix, pinv, rng_from_seed

log = logging.getLogger(__name__)

FORMAT_NAME = "sgmca-iae"
FORMAT_VERSION = 1


class TrainingDivergedError(NumericalError):
    def __init__(self, epoch: int):
        super().__init__(f"IAE training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


# --------------------------------------------------------------------------
# Data types
# --------------------------------------------------------------------------


@dataclass
class AnchorSet:
    """Anchor spectra, one per row."""

    anchors: np.ndarray

    def __post_init__(self):
        self.anchors = as_matrix(self.anchors, "anchors")
        n = self.anchors.shape[0]
        if n < 2:
            raise ValueError("an anchor set needs at least two anchors")
        unit = self.anchors / np.linalg.norm(self.anchors, axis=1, keepdims=True)
        cos = np.clip(unit @ unit.T, -1.0, 1.0)
        iu = np.triu_indices(n, 1)
        if np.any(np.arccos(np.abs(cos[iu])) <= 1e-6):
            raise ValueError("anchor spectra must be pairwise non-collinear")

    def __len__(self):
        return self.anchors.shape[0]


@dataclass
class IAEModel:
    anchors: AnchorSet
    layers_enc: list  # [(W, b), ...], W is (J, J)
    layers_dec: list
    skip_param: float = 0.1
    name: str = ""

    def __post_init__(self):
        if not self.layers_enc or not self.layers_dec:
            raise ValueError("encoder and decoder need at least one layer each")
        if not 0.0 <= self.skip_param < 1.0:
            raise ValueError("skip_param must lie in [0, 1)")
        J = self.input_dim
        for W, b in self.layers_enc + self.layers_dec:
            if W.shape != (J, J) or b.shape != (J,):
                raise ValueError(f"all layers must be {J}x{J} (constant width)")
        self._phi = None

    @property
    def input_dim(self) -> int:
        return self.anchors.anchors.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.input_dim

    @property
    def n_anchors(self) -> int:
        return len(self.anchors)

    @property
    def encoded_anchors(self) -> np.ndarray:
        """``Phi``, shape (latent_dim, n_anchors); cached."""
        if self._phi is None:
            self._phi = _forward(self.layers_enc, self.anchors.anchors, self.skip_param)[0].T
        return self._phi

    def invalidate(self) -> None:
        self._phi = None

    def params(self) -> list:
        return [p for layer in self.layers_enc + self.layers_dec for p in layer]


@dataclass
class IAETrainConfig:
    epochs: int = 1000
    batch_size: int = 25
    learning_rate: float = 1e-4
    seed: int = 0
    validation_fraction: float = 0.25
    n_layers: int = 4
    skip_param: float = 0.1
    stop_gradient_lambda: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.n_layers < 1:
            raise ValueError("epochs, batch_size and n_layers must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")


@dataclass
class TrainResult:
    model: IAEModel
    loss: list = field(default_factory=list)  # per-epoch mean training loss
    val_loss: list = field(default_factory=list)


@dataclass
class ProjectionResult:
    lam: np.ndarray
    rho: float
    projected: np.ndarray
    residual: float
    converged: bool = True
    fallback: bool = False
    iterations: int = 0


# --------------------------------------------------------------------------
# Network primitives
# --------------------------------------------------------------------------


def _forward(layers, Y, skip):
    """Row-batch forward pass. Returns output and per-layer (input, tanh) cache."""
    cache = []
    for W, b in layers:
        t = np.tanh(Y @ W.T + b)
        cache.append((Y, t))
        Y = t + skip * Y
    return Y, cache


def _backward(layers, cache, G, skip, grads=None):
    """Backpropagate ``G = dL/dout``. Accumulates weight grads into ``grads``
    (list of (dW, db) aligned with ``layers``) when given; returns dL/din."""
    for idx in range(len(layers) - 1, -1, -1):
        W, _ = layers[idx]
        Y, t = cache[idx]
        dpre = G * (1.0 - t * t)
        if grads is not None:
            dW, db = grads[idx]
            dW += dpre.T @ Y
            db += dpre.sum(axis=0)
        G = dpre @ W + skip * G
    return G


def _check_vec(model, x, what="input"):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.input_dim:
        raise ValueError(f"{what} has length {x.shape[-1]}, model expects {model.input_dim}")
    return x


def encode(model: IAEModel, x) -> np.ndarray:
    x = _check_vec(model, x)
    return _forward(model.layers_enc, np.atleast_2d(x), model.skip_param)[0].reshape(x.shape)


def decode(model: IAEModel, code) -> np.ndarray:
    code = _check_vec(model, code, "code")
    return _forward(model.layers_dec, np.atleast_2d(code), model.skip_param)[0].reshape(code.shape)


def _kkt_matrix(Phi):
    n = Phi.shape[1]
    K = np.zeros((n + 1, n + 1))
    K[:n, :n] = Phi.T @ Phi
    K[:n, n] = 1.0
    K[n, :n] = 1.0
    return K


def _solve_kkt(K, R, name="", check=True):
    try:
        Z = np.linalg.solve(K, R)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"barycentric system is singular for anchor set {name!r}") from exc
    if check and np.linalg.cond(K) > 1e14:
        raise NumericalError(f"barycentric system is singular for anchor set {name!r}")
    return Z


def barycentric_weights(model: IAEModel, code) -> np.ndarray:
    """Sum-to-one weights minimising ``||code - Phi lam||``.

    Solves the KKT system ``[[Phi'Phi, 1], [1', 0]] [lam; nu] = [Phi' code; 1]``.
    Accepts a single code or a row-stack of codes.
    """
    code = _check_vec(model, code, "code")
    Phi = model.encoded_anchors
    C = np.atleast_2d(code)
    R = np.vstack([Phi.T @ C.T, np.ones((1, C.shape[0]))])
    Z = _solve_kkt(_kkt_matrix(Phi), R, model.name)
    lam = Z[:-1].T
    return lam.reshape(code.shape[:-1] + (model.n_anchors,))


def generate(model: IAEModel, lam) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)
    if lam.shape[-1] != model.n_anchors:
        raise ValueError(f"lambda has length {lam.shape[-1]}, model has {model.n_anchors} anchors")
    if np.any(np.abs(lam.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("barycentric weights must sum to one")
    return decode(model, lam @ model.encoded_anchors.T)


def reconstruct(model: IAEModel, x) -> np.ndarray:
    """Encode, fit barycentric weights, decode."""
    return generate(model, barycentric_weights(model, encode(model, x)))


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


def init_model(anchors: AnchorSet, n_layers=4, skip_param=0.1, seed=0, name="") -> IAEModel:
    """Glorot-uniform weights, zero biases."""
    rng = rng_from_seed(seed)
    J = anchors.anchors.shape[1]
    bound = np.sqrt(6.0 / (2 * J))

    def stack():
        return [(rng.uniform(-bound, bound, (J, J)), np.zeros(J)) for _ in range(n_layers)]

    enc = stack()
    dec = stack()
    return IAEModel(anchors, enc, dec, skip_param, name)


def loss_and_grads(model: IAEModel, X, stop_gradient_lambda=False):
    """Mean squared reconstruction error over the rows of ``X`` and its
    gradient with respect to every weight and bias.

    Returns ``(loss, enc_grads, dec_grads)`` with grads shaped like the layers.
    """
    X = np.atleast_2d(X)
    B = X.shape[0]
    n = model.n_anchors
    skip = model.skip_param
    stacked = np.vstack([model.anchors.anchors, X])
    E, enc_cache = _forward(model.layers_enc, stacked, skip)
    Phi = E[:n].T
    C = E[n:]

    K = _kkt_matrix(Phi)
    R = np.vstack([Phi.T @ C.T, np.ones((1, B))])
    Zk = _solve_kkt(K, R, model.name, check=False)
    Lam = Zk[:n].T  # (B, n)
    Zc = Lam @ Phi.T  # (B, J')
    Xh, dec_cache = _forward(model.layers_dec, Zc, skip)
    diff = Xh - X
    loss = float(np.sum(diff * diff) / B)

    enc_grads = [(np.zeros_like(W), np.zeros_like(b)) for W, b in model.layers_enc]
    dec_grads = [(np.zeros_like(W), np.zeros_like(b)) for W, b in model.layers_dec]
    dZc = _backward(model.layers_dec, dec_cache, 2.0 * diff / B, skip, dec_grads)

    dLam = dZc @ Phi  # (B, n)
    dPhi = dZc.T @ Lam  # (J', n)
    dC = np.zeros_like(C)
    if not stop_gradient_lambda:
        # K Zk = R  =>  dR = K^{-T} dZk, dK = -dR Zk^T (K symmetric)
        dZk = np.vstack([dLam.T, np.zeros((1, B))])
        dR = np.linalg.solve(K, dZk)
        dK = -dR @ Zk.T
        dG = dK[:n, :n]
        dPhi += Phi @ (dG + dG.T)
        dRtop = dR[:n]  # (n, B); R_top = Phi^T C^T
        dPhi += C.T @ dRtop.T
        dC = dRtop.T @ Phi.T
    dE = np.vstack([dPhi.T, dC])
    _backward(model.layers_enc, enc_cache, dE, skip, enc_grads)
    return loss, enc_grads, dec_grads


class _Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def split_dataset(n_samples: int, validation_fraction: float, seed) -> tuple:
    """Disjoint (train, validation) index arrays from a seeded permutation."""
    perm = rng_from_seed(seed).permutation(n_samples)
    n_val = int(round(validation_fraction * n_samples))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train_iae(dataset, anchors: AnchorSet, config: IAETrainConfig | None = None,
              name: str = "", validation=None) -> TrainResult:
    """Fit encoder and decoder with Adam on the barycentric reconstruction loss.

    ``dataset`` rows are training spectra. When ``validation`` is None and
    ``config.validation_fraction > 0``, a held-out split is carved from
    ``dataset``.
    """
    config = config or IAETrainConfig()
    X = as_matrix(dataset, "dataset")
    if validation is None and config.validation_fraction > 0:
        tr, va = split_dataset(X.shape[0], config.validation_fraction, config.seed)
        X, validation = X[tr], X[va]
    if X.shape[0] < config.batch_size:
        raise ValueError(f"need at least batch_size={config.batch_size} samples, got {X.shape[0]}")
    if X.shape[1] != anchors.anchors.shape[1]:
        raise ValueError("dataset and anchors have different spectral lengths")

    model = init_model(anchors, config.n_layers, config.skip_param, config.seed, name)
    params = model.params()
    opt = _Adam(params, config.learning_rate)
    rng = rng_from_seed([config.seed, 1])
    n_batches = X.shape[0] // config.batch_size
    result = TrainResult(model)

    for epoch in range(config.epochs):
        order = rng.permutation(X.shape[0])
        total = 0.0
        for k in range(n_batches):
            batch = X[order[k * config.batch_size:(k + 1) * config.batch_size]]
            loss, ge, gd = loss_and_grads(model, batch, config.stop_gradient_lambda)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            grads = [g for pair in ge + gd for g in pair]
            opt.step(params, grads)
            model.invalidate()
            total += loss
        result.loss.append(total / n_batches)
        if validation is not None and len(validation):
            rec = reconstruct(model, validation)
            result.val_loss.append(float(np.sum((rec - validation) ** 2) / len(validation)))
        if not np.isfinite(result.loss[-1]):
            raise TrainingDivergedError(epoch)
        if epoch % max(1, config.epochs // 10) == 0:
            log.debug("epoch %d loss %.3e", epoch, result.loss[-1])
    return result


def farthest_point_anchors(dataset, n_anchors: int) -> list:
    """Indices of mutually contrasting rows (greedy farthest-point sampling
    on angular distance), starting from the row farthest from the mean."""
    X = as_matrix(dataset, "dataset")
    U = X / np.linalg.norm(X, axis=1, keepdims=True)
    mean = U.mean(axis=0)
    first = int(np.argmin(U @ mean / np.linalg.norm(mean)))
    chosen = [first]
    dist = np.arccos(np.clip(U @ U[first], -1, 1))
    while len(chosen) < n_anchors:
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.arccos(np.clip(U @ U[nxt], -1, 1)))
    return chosen


# --------------------------------------------------------------------------
# Projections
# --------------------------------------------------------------------------


def project_fast_batch(model: IAEModel, A, exact_affine: bool = False) -> tuple:
    """Vectorised fast projection of the rows of ``A``.

    By default the weights are the unconstrained least-squares fit of the
    code on the encoded anchors, rescaled to sum to one. ``exact_affine``
    instead solves the sum-to-one constrained fit (the barycentric weights),
    which is slightly more expensive but often much closer to the manifold.

    Returns ``(lam, rho, projected, residual, fallback)`` arrays. Inputs are
    normalised before encoding; ``rho`` refers to the original scale.
    """
    A = np.atleast_2d(_check_vec(model, A))
    norms = np.linalg.norm(A, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    codes = _forward(model.layers_enc, A / safe[:, None], model.skip_param)[0]
    Phi = model.encoded_anchors
    if exact_affine:
        lam_ls = barycentric_weights(model, codes)
        fallback = np.zeros(len(A), dtype=bool)
    else:
        lam_ls = codes @ pinv(Phi).T
        fallback = np.abs(lam_ls.sum(axis=1)) <= 1e-9
    sums = lam_ls.sum(axis=1)
    lam = lam_ls / np.where(fallback, 1.0, sums)[:, None]
    if np.any(fallback):
        lam[fallback] = barycentric_weights(model, codes[fallback])
    # exact sum-to-one after rescaling round-off
    lam[:, -1] = 1.0 - lam[:, :-1].sum(axis=1)
    gen = decode(model, lam @ Phi.T)
    gg = np.sum(gen * gen, axis=1)
    rho = np.maximum(0.0, np.sum(A * gen, axis=1) / np.where(gg > 0, gg, 1.0))
    proj = rho[:, None] * gen
    resid = np.linalg.norm(A - proj, axis=1)
    return lam, rho, proj, resid, fallback


def project_fast(model: IAEModel, a, exact_affine: bool = False) -> ProjectionResult:
    a = np.asarray(a, dtype=np.float64)
    if not np.any(a):
        raise ValueError("cannot project a zero spectrum")
    lam, rho, proj, resid, fb = project_fast_batch(model, a, exact_affine)
    return ProjectionResult(lam[0], float(rho[0]), proj[0], float(resid[0]), True, bool(fb[0]), 0)


def _full_lambda(free):
    return np.append(free, 1.0 - free.sum())


def projection_objective(model: IAEModel, a, lam_free, rho):
    """``||a - rho g(lam)||^2`` with ``lam = (lam_free, 1 - sum(lam_free))``.

    Returns ``(value, grad_lam_free, grad_rho, g)``.
    """
    Phi = model.encoded_anchors
    lam = _full_lambda(np.asarray(lam_free, dtype=np.float64))
    z = (Phi @ lam)[None, :]
    gen, cache = _forward(model.layers_dec, z, model.skip_param)
    gen = gen[0]
    r = rho * gen - a
    value = float(r @ r)
    dgen = 2.0 * rho * r
    dz = _backward(model.layers_dec, cache, dgen[None, :], model.skip_param)[0]
    dlam = Phi.T @ dz
    grad_free = dlam[:-1] - dlam[-1]
    grad_rho = float(2.0 * gen @ r)
    return value, grad_free, grad_rho, gen


def project_manifold(model: IAEModel, a, max_iters: int = 300, lr: float = 0.01,
                     tol: float = 1e-8, init: ProjectionResult | None = None,
                     patience: int = 10) -> ProjectionResult:
    """Iterative projection ``argmin_{lam in T, rho >= 0} ||a - rho g(lam)||``.

    Adam on ``(lam_1..lam_{N-1}, rho)`` with the last weight eliminated by the
    sum-to-one constraint and ``rho`` clamped at zero after every step. The
    step size is halved whenever the best objective has not improved for
    ``patience`` iterations. The problem is solved on ``a / ||a||`` and
    rescaled. Starts from whichever fits best among the two fast projections
    and ``init``. Returns the best iterate seen.
    """
    a = np.asarray(a, dtype=np.float64)
    scale = float(np.linalg.norm(a))
    if scale == 0.0:
        raise ValueError("cannot project a zero spectrum")
    an = a / scale
    start = min(project_fast(model, a), project_fast(model, a, exact_affine=True),
                key=lambda r: r.residual)
    if init is not None:
        cand_gen = generate(model, init.lam)
        gg = cand_gen @ cand_gen
        cand_rho = max(0.0, float(a @ cand_gen) / gg) if gg > 0 else 0.0
        if np.linalg.norm(a - cand_rho * cand_gen) < start.residual:
            start = ProjectionResult(init.lam, cand_rho, cand_rho * cand_gen,
                                     float(np.linalg.norm(a - cand_rho * cand_gen)))
    x = np.append(start.lam[:-1], start.rho / scale)
    best_x = x.copy()
    best_val = (start.residual / scale) ** 2
    opt = _Adam([x], lr)
    step_lr = lr
    stall = 0
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        val, g_free, g_rho, _ = projection_objective(model, an, x[:-1], x[-1])
        if val < best_val:
            improvement = best_val - val
            best_val, best_x = val, x.copy()
            stall = 0 if improvement > tol * max(val, 1e-300) else stall + 1
        else:
            stall += 1
        grad = np.append(g_free, g_rho)
        if np.linalg.norm(grad) <= tol or step_lr < lr * 1e-4:
            converged = True
            break
        if stall >= patience:
            step_lr *= 0.5
            opt.lr = step_lr
            stall = 0
        opt.step([x], [grad])
        x[-1] = max(x[-1], 0.0)

    lam = _full_lambda(best_x[:-1])
    gen = generate(model, lam)
    gg = gen @ gen
    rho = best_x[-1] * scale
    # closed-form amplitude for the retained weights never increases the residual
    rho_ls = max(0.0, float(a @ gen) / gg) if gg > 0 else 0.0
    if np.linalg.norm(a - rho_ls * gen) <= np.linalg.norm(a - rho * gen):
        rho = rho_ls
    proj = rho * gen
    resid = float(np.linalg.norm(a - proj))
    if resid > start.residual:
        return ProjectionResult(start.lam, start.rho, start.projected, start.residual,
                                converged, start.fallback, it)
    return ProjectionResult(lam, rho, proj, resid, converged, start.fallback, it)


# --------------------------------------------------------------------------
# Serialisation: JSON header + raw little-endian float64 blob
# --------------------------------------------------------------------------


def save_model(model: IAEModel, path) -> tuple:
    """Write ``<path>.json`` and ``<path>.bin``. Returns both paths.

    The blob is the concatenation, in order, of the anchor matrix
    (row-major), then for each encoder layer W (row-major) and b, then the
    same for each decoder layer, all as little-endian IEEE-754 float64.
    The JSON header records shapes and byte offsets.
    """
    path = Path(path)
    json_path = path.with_suffix(".json")
    bin_path = path.with_suffix(".bin")
    arrays = [("anchors", model.anchors.anchors)]
    for k, (W, b) in enumerate(model.layers_enc):
        arrays += [(f"enc{k}.W", W), (f"enc{k}.b", b)]
    for k, (W, b) in enumerate(model.layers_dec):
        arrays += [(f"dec{k}.W", W), (f"dec{k}.b", b)]
    entries = []
    offset = 0
    chunks = []
    for key, arr in arrays:
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": key, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        offset += len(data)
        chunks.append(data)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "name": model.name,
        "input_dim": model.input_dim,
        "latent_dim": model.latent_dim,
        "n_anchors": model.n_anchors,
        "n_layers_enc": len(model.layers_enc),
        "n_layers_dec": len(model.layers_dec),
        "skip_param": model.skip_param,
        "dtype": "<f8",
        "blob": bin_path.name,
        "arrays": entries,
    }
    bin_path.write_bytes(b"".join(chunks))
    json_path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return json_path, bin_path


def load_model(path) -> IAEModel:
    path = Path(path)
    json_path = path.with_suffix(".json")
    header = json.loads(json_path.read_text())
    if header.get("format") != FORMAT_NAME:
        raise ValueError(f"{json_path} is not an IAE model file")
    blob = (json_path.parent / header["blob"]).read_bytes()
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"]))
        vals = np.frombuffer(blob, dtype="<f8", count=count, offset=e["offset"])
        arrays[e["name"]] = vals.astype(np.float64).reshape(e["shape"])
    enc = [(arrays[f"enc{k}.W"], arrays[f"enc{k}.b"]) for k in range(header["n_layers_enc"])]
    dec = [(arrays[f"dec{k}.W"], arrays[f"dec{k}.b"]) for k in range(header["n_layers_dec"])]
    return IAEModel(AnchorSet(arrays["anchors"]), enc, dec, header["skip_param"], header["name"])

"""Minimal from-scratch feedforward network.

Dense layers with ReLU activations, trained by Adam on one of three losses:
mean squared error, pinball loss at a fixed level, or the negative
log-likelihood of a Gaussian mixture whose parameters (component logits,
means, Cholesky factors of the covariances) are emitted by the network's
last layer.  All gradients are hand-derived and verified against central
finite differences by :func:`grad_check`.

Weight container format (little-endian, used by ``save_weights``):

    magic   4 bytes  b"RCPN"
    version u16      1
    flags   u16      bit 0: softplus applied to the network output
    nlayers u32      number of dense layers L
    widths  u32*(L+1)
    layers  L blocks of W (f64, fan_in*fan_out, C order) then b (f64, fan_out)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from rcp.core import Rng

_MAGIC = b"RCPN"
_VERSION = 1


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


class ShapeError(ValueError):
    """Input width does not match the network."""


@dataclass(frozen=True)
class NetConfig:
    """Architecture and optimizer settings.

    ``hidden`` of (100, 100, 100) mirrors the benchmark architecture; tests
    scale it down.  Learning rate, batch size and epoch counts are our
    defaults, not externally prescribed values.
    """

    hidden: tuple[int, ...] = (100, 100, 100)
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 20
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if any(w < 1 for w in self.hidden):
            raise ValueError("hidden widths must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class MLP:
    """Dense ReLU network; optionally squashes its output through softplus
    so that predictions are strictly positive."""

    def __init__(self, widths: list[int], rng: Rng, positive_output: bool = False):
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ValueError("need at least input and output widths, all >= 1")
        self.widths = list(widths)
        self.positive_output = positive_output
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            scale = math.sqrt(2.0 / fan_in)
            self.weights.append(rng.normal(size=(fan_in, fan_out)) * scale)
            self.biases.append(np.zeros(fan_out))

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def forward(self, x: np.ndarray, want_cache: bool = False):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"expected input width {self.in_dim}, got {x.shape[1]}")
        acts = [x]
        pre = []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pre.append(z)
            h = z if i == last else np.maximum(z, 0.0)
            acts.append(h)
        if self.positive_output:
            h = _softplus(pre[-1])
        if want_cache:
            return h, (acts, pre)
        return h

    def backward(self, cache, dout: np.ndarray):
        """Gradients of a scalar loss given d(loss)/d(output)."""
        acts, pre = cache
        if self.positive_output:
            dout = dout * _sigmoid(pre[-1])
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        delta = dout
        for i in range(len(self.weights) - 1, -1, -1):
            grads_w[i] = acts[i].T @ delta
            grads_b[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (pre[i - 1] > 0)
        return grads_w, grads_b

    # -- flat parameter access (used by Adam and grad_check) ----------------
    def get_params(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def set_params(self, flat: np.ndarray) -> None:
        pos = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = flat[pos : pos + w.size].reshape(w.shape).copy()
            pos += w.size
            self.biases[i] = flat[pos : pos + b.size].copy()
            pos += b.size
        if pos != flat.size:
            raise ShapeError("flat parameter vector has wrong length")

    def copy_params(self) -> list[np.ndarray]:
        return [w.copy() for w in self.weights] + [b.copy() for b in self.biases]

    def restore_params(self, snapshot: list[np.ndarray]) -> None:
        k = len(self.weights)
        self.weights = [a.copy() for a in snapshot[:k]]
        self.biases = [a.copy() for a in snapshot[k:]]


# ---------------------------------------------------------------------------
# Gaussian mixture head
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MixtureDensity:
    """A single Gaussian mixture: weights via softmax(logits), covariances
    Sigma_k = L_k L_k^T with lower-triangular L_k of positive diagonal."""

    logits: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    chols: np.ndarray  # (K, d, d)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def weights(self) -> np.ndarray:
        z = self.logits - self.logits.max()
        w = np.exp(z)
        return w / w.sum()

    def log_density(self, y: np.ndarray) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        d = self.dim
        logw = np.log(self.weights() + 1e-300)
        comp = np.empty((y.shape[0], self.n_components))
        for k in range(self.n_components):
            L = self.chols[k]
            e = y - self.means[k]
            u = np.linalg.solve(L, e.T).T
            logdet = np.log(np.diag(L)).sum()
            comp[:, k] = -0.5 * d * math.log(2 * math.pi) - logdet - 0.5 * (u * u).sum(axis=1)
        total = comp + logw
        m = total.max(axis=1, keepdims=True)
        return (np.log(np.exp(total - m).sum(axis=1, keepdims=True)) + m).ravel()

    def density(self, y: np.ndarray) -> np.ndarray:
        return np.exp(self.log_density(y))

    def sample(self, size: int, rng: Rng) -> np.ndarray:
        w = self.weights()
        ks = rng.gen.choice(self.n_components, size=size, p=w)
        z = rng.normal(size=(size, self.dim))
        out = np.empty((size, self.dim))
        for k in range(self.n_components):
            rows = ks == k
            if rows.any():
                out[rows] = self.means[k] + z[rows] @ self.chols[k].T
        return out


@dataclass(frozen=True)
class GaussianMixture:
    """Batch of per-input mixture parameters as produced by a mixture net."""

    logits: np.ndarray  # (n, K)
    means: np.ndarray  # (n, K, d)
    chols: np.ndarray  # (n, K, d, d)

    @property
    def n(self) -> int:
        return self.logits.shape[0]

    def row(self, i: int) -> MixtureDensity:
        return MixtureDensity(self.logits[i], self.means[i], self.chols[i])

    def weights(self) -> np.ndarray:
        z = self.logits - self.logits.max(axis=1, keepdims=True)
        w = np.exp(z)
        return w / w.sum(axis=1, keepdims=True)

    def log_density(self, y: np.ndarray) -> np.ndarray:
        """log p(y_i | x_i) for matched rows; y is (n, d)."""
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        d = self.means.shape[2]
        e = y[:, None, :] - self.means
        u = np.linalg.solve(self.chols, e[..., None])[..., 0]
        logdet = np.log(np.diagonal(self.chols, axis1=2, axis2=3)).sum(axis=2)
        logn = -0.5 * d * math.log(2 * math.pi) - logdet - 0.5 * (u * u).sum(axis=2)
        logz = self.logits - _logsumexp(self.logits)
        a = logz + logn
        return _logsumexp(a).ravel()


def _logsumexp(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1, keepdims=True)
    return m + np.log(np.exp(a - m).sum(axis=1, keepdims=True))


def mixture_head_width(n_components: int, d: int) -> int:
    return n_components * (1 + d + d * (d + 1) // 2)


def unpack_mixture(raw: np.ndarray, n_components: int, d: int) -> GaussianMixture:
    """Interpret raw network outputs as mixture parameters.

    Layout per row: K logits, K*d means, then K row-major lower-triangular
    blocks of d(d+1)/2 Cholesky entries whose diagonal passes through
    softplus (+1e-6 floor) so every covariance is SPD.
    """
    raw = np.atleast_2d(raw)
    k, nt = n_components, d * (d + 1) // 2
    if raw.shape[1] != mixture_head_width(k, d):
        raise ShapeError(
            f"mixture head expects width {mixture_head_width(k, d)}, got {raw.shape[1]}"
        )
    b = raw.shape[0]
    logits = raw[:, :k]
    means = raw[:, k : k + k * d].reshape(b, k, d)
    tril = raw[:, k + k * d :].reshape(b, k, nt)
    rows, cols = np.tril_indices(d)
    chols = np.zeros((b, k, d, d))
    chols[:, :, rows, cols] = tril
    diag = np.arange(d)
    chols[:, :, diag, diag] = _softplus(chols[:, :, diag, diag]) + 1e-6
    return GaussianMixture(logits, means, chols)


# ---------------------------------------------------------------------------
# Losses: value and gradient w.r.t. the raw network output
# ---------------------------------------------------------------------------


class MseLoss:
    name = "mse"

    def value_and_grad(self, raw: np.ndarray, y: np.ndarray):
        r = raw - y
        return float((r * r).mean()), 2.0 * r / r.size

    def value(self, raw: np.ndarray, y: np.ndarray) -> float:
        r = raw - y
        return float((r * r).mean())


class PinballLoss:
    """Mean pinball loss of (y - raw) at level beta.

    The subgradient at a zero residual is taken to be beta, which keeps the
    gradient right-continuous.
    """

    name = "pinball"

    def __init__(self, beta: float):
        if not 0.0 < beta < 1.0:
            raise ValueError("beta must be in (0, 1)")
        self.beta = beta

    def value(self, raw: np.ndarray, y: np.ndarray) -> float:
        u = y - raw
        return float(np.where(u > 0, self.beta * u, (self.beta - 1.0) * u).mean())

    def value_and_grad(self, raw: np.ndarray, y: np.ndarray):
        u = y - raw
        val = float(np.where(u > 0, self.beta * u, (self.beta - 1.0) * u).mean())
        dldu = np.where(u > 0, self.beta, np.where(u < 0, self.beta - 1.0, self.beta))
        return val, -dldu / u.size


class MixtureNllLoss:
    """Mean negative log-likelihood of a Gaussian mixture head."""

    name = "mixture_nll"

    def __init__(self, n_components: int, d: int):
        self.k = n_components
        self.d = d

    def _terms(self, raw: np.ndarray, y: np.ndarray):
        mix = unpack_mixture(raw, self.k, self.d)
        y = np.atleast_2d(y)
        e = y[:, None, :] - mix.means  # (B, K, d)
        u = np.linalg.solve(mix.chols, e[..., None])[..., 0]
        logdet = np.log(np.diagonal(mix.chols, axis1=2, axis2=3)).sum(axis=2)
        logn = -0.5 * self.d * math.log(2 * math.pi) - logdet - 0.5 * (u * u).sum(axis=2)
        logz = mix.logits - _logsumexp(mix.logits)
        a = logz + logn
        return mix, u, a

    def value(self, raw: np.ndarray, y: np.ndarray) -> float:
        _, _, a = self._terms(raw, y)
        return float(-_logsumexp(a).mean())

    def value_and_grad(self, raw: np.ndarray, y: np.ndarray):
        mix, u, a = self._terms(raw, y)
        b = raw.shape[0]
        val = float(-_logsumexp(a).mean())
        resp = np.exp(a - _logsumexp(a))  # (B, K)
        pi = mix.weights()
        dlogits = (pi - resp) / b
        lt_u = np.linalg.solve(np.swapaxes(mix.chols, 2, 3), u[..., None])[..., 0]  # (B,K,d)
        dmeans = -(resp[..., None] * lt_u) / b
        # d logN / dL = (L^-T u) u^T - diag(1/L_ii), lower triangle only
        outer = lt_u[..., :, None] * u[..., None, :]
        dlogn_dl = outer.copy()
        diag = np.arange(self.d)
        dgl = np.diagonal(mix.chols, axis1=2, axis2=3)
        dlogn_dl[:, :, diag, diag] -= 1.0 / dgl
        dl = -(resp[..., None, None] * dlogn_dl) / b
        # chain through softplus on the diagonal of the raw entries
        rows, cols = np.tril_indices(self.d)
        nt = rows.size
        tril_raw = raw[:, self.k + self.k * self.d :].reshape(b, self.k, nt)
        dtril = dl[:, :, rows, cols]
        is_diag = rows == cols
        dtril[:, :, is_diag] *= _sigmoid(tril_raw[:, :, is_diag])
        grad = np.concatenate(
            [dlogits, dmeans.reshape(b, -1), dtril.reshape(b, -1)], axis=1
        )
        return val, grad


# ---------------------------------------------------------------------------
# Optimizer and training loop
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


@dataclass
class TrainResult:
    history: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    final_train_loss: float = math.nan


def train(net: MLP, x: np.ndarray, y: np.ndarray, loss, config: NetConfig, rng: Rng) -> TrainResult:
    """Minibatch Adam with early stopping on a held-out fifth of the data.

    Returns the weights attaining the best validation loss.  A non-finite
    loss aborts with the last finite state reported in the error.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if y.shape[0] != x.shape[0]:
        raise ShapeError("x and y row counts differ")
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least 2 rows to train")
    perm = rng.permutation(n)
    n_val = max(1, int(round(config.val_fraction * n)))
    n_val = min(n_val, n - 1)
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    xtr, ytr, xval, yval = x[tr_idx], y[tr_idx], x[val_idx], y[val_idx]

    opt = Adam(config.learning_rate)
    result = TrainResult()
    best = net.copy_params()
    patience_left = config.patience
    last_finite = math.inf
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(xtr))
        for start in range(0, len(xtr), config.batch_size):
            idx = order[start : start + config.batch_size]
            out, cache = net.forward(xtr[idx], want_cache=True)
            val, dout = loss.value_and_grad(out, ytr[idx])
            if not math.isfinite(val):
                raise TrainingError(
                    f"training loss became non-finite at epoch {epoch}; "
                    f"last finite loss {last_finite:.6g}"
                )
            last_finite = val
            gw, gb = net.backward(cache, dout)
            opt.step(net.weights + net.biases, gw + gb)
        vl = loss.value(net.forward(xval), yval)
        if not math.isfinite(vl):
            raise TrainingError(
                f"validation loss became non-finite at epoch {epoch}; "
                f"last finite loss {last_finite:.6g}"
            )
        result.history.append(vl)
        if vl < result.best_val_loss - 1e-12:
            result.best_val_loss = vl
            result.best_epoch = epoch
            best = net.copy_params()
            patience_left = config.patience
        else:
            patience_left -= 1
            if patience_left <= 0:
                break
    net.restore_params(best)
    result.final_train_loss = loss.value(net.forward(xtr), ytr)
    return result


def grad_check(net: MLP, loss, x: np.ndarray, y: np.ndarray, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error is ``|analytic - fd| / (|analytic| + |fd| + 1e-8)`` maximized over
    every parameter; intended for small probe batches (<= 8 rows).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    out, cache = net.forward(x, want_cache=True)
    _, dout = loss.value_and_grad(out, y)
    gw, gb = net.backward(cache, dout)
    analytic = np.concatenate([g.ravel() for pair in zip(gw, gb) for g in pair])
    theta = net.get_params()
    fd = np.empty_like(theta)
    for i in range(theta.size):
        for sign, slot in ((1.0, 0), (-1.0, 1)):
            t = theta.copy()
            t[i] += sign * step
            net.set_params(t)
            v = loss.value(net.forward(x), y)
            fd[i] = v if slot == 0 else (fd[i] - v) / (2 * step)
    net.set_params(theta)
    rel = np.abs(analytic - fd) / (np.abs(analytic) + np.abs(fd) + 1e-8)
    return float(rel.max())


# ---------------------------------------------------------------------------
# Weight snapshots
# ---------------------------------------------------------------------------


def weights_to_bytes(net: MLP) -> bytes:
    parts = [_MAGIC, np.uint16(_VERSION).astype("<u2").tobytes()]
    flags = 1 if net.positive_output else 0
    parts.append(np.uint16(flags).astype("<u2").tobytes())
    parts.append(np.uint32(len(net.weights)).astype("<u4").tobytes())
    parts.append(np.asarray(net.widths, dtype="<u4").tobytes())
    for w, b in zip(net.weights, net.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def weights_from_bytes(buf: bytes, offset: int = 0) -> tuple[MLP, int]:
    """Parse a weight container; returns the net and the next offset."""
    if buf[offset : offset + 4] != _MAGIC:
        raise ValueError("bad magic; not a weight container")
    offset += 4
    version = int(np.frombuffer(buf, "<u2", 1, offset)[0])
    if version != _VERSION:
        raise ValueError(f"unsupported container version {version}")
    offset += 2
    flags = int(np.frombuffer(buf, "<u2", 1, offset)[0])
    offset += 2
    nlayers = int(np.frombuffer(buf, "<u4", 1, offset)[0])
    offset += 4
    widths = np.frombuffer(buf, "<u4", nlayers + 1, offset).astype(int).tolist()
    offset += 4 * (nlayers + 1)
    net = MLP(widths, Rng(0), positive_output=bool(flags & 1))
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        w = np.frombuffer(buf, "<f8", fan_in * fan_out, offset).reshape(fan_in, fan_out)
        offset += 8 * fan_in * fan_out
        b = np.frombuffer(buf, "<f8", fan_out, offset)
        offset += 8 * fan_out
        net.weights[i] = w.copy()
        net.biases[i] = b.copy()
    return net, offset


def save_weights(net: MLP, path) -> None:
    with open(path, "wb") as fh:
        fh.write(weights_to_bytes(net))


def load_weights(path) -> MLP:
    with open(path, "rb") as fh:
        net, _ = weights_from_bytes(fh.read())
    return net

"""Network layers: sparse coding, batch normalization, pooling, classifier.

Feature maps travel as ``(N, C, H, W)`` float64 arrays. Patch matrices have
one column per output location, ordered by image, then row, then column;
each column is the ``C x k x k`` neighbourhood flattened channel-major.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import linalg, solver
from .exceptions import ContractViolation, NumericalError
from .solver import ElasticNetParams


# ---------------------------------------------------------------- patches

def output_size(size, stride):
    return -(-size // stride)


def extract_patches(x, window, stride=1, pad=None):
    """Gather every ``window x window`` neighbourhood into a column.

    ``x`` is ``(C, H, W)`` or ``(N, C, H, W)``. Borders are zero padded;
    the output grid has ``ceil(H / stride)`` rows.
    """
    if x.ndim == 3:
        x = x[None]
    if pad is None:
        pad = (window - 1) // 2
    N, C, H, W = x.shape
    Ho, Wo = output_size(H, stride), output_size(W, stride)
    if stride * (Ho - 1) + window > H + 2 * pad or stride * (Wo - 1) + window > W + 2 * pad:
        raise ContractViolation(f"window {window}, stride {stride}, pad {pad} do not tile {H}x{W}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((C, window, window, N, Ho, Wo), dtype=x.dtype)
    for di in range(window):
        for dj in range(window):
            sl = xp[:, :, di:di + stride * (Ho - 1) + 1:stride, dj:dj + stride * (Wo - 1) + 1:stride]
            cols[:, di, dj] = sl.transpose(1, 0, 2, 3)
    return cols.reshape(C * window * window, N * Ho * Wo)


def scatter_patches(cols, input_shape, window, stride=1, pad=None):
    """Adjoint of :func:`extract_patches`: sum each column back onto its window."""
    if len(input_shape) == 3:
        input_shape = (1,) + tuple(input_shape)
    if pad is None:
        pad = (window - 1) // 2
    N, C, H, W = input_shape
    Ho, Wo = output_size(H, stride), output_size(W, stride)
    if cols.shape != (C * window * window, N * Ho * Wo):
        raise ContractViolation(f"patch matrix {cols.shape} does not match input {input_shape}")
    cols = cols.reshape(C, window, window, N, Ho, Wo)
    out = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for di in range(window):
        for dj in range(window):
            out[:, :, di:di + stride * (Ho - 1) + 1:stride, dj:dj + stride * (Wo - 1) + 1:stride] += \
                cols[:, di, dj].transpose(1, 0, 2, 3)
    return out[:, :, pad:pad + H, pad:pad + W]


def to_columns(fmap):
    """``(N, n, H, W)`` -> ``(n, N*H*W)`` in patch-column order."""
    n = fmap.shape[1]
    return fmap.transpose(1, 0, 2, 3).reshape(n, -1)


def from_columns(cols, N, H, W):
    return cols.reshape(cols.shape[0], N, H, W).transpose(1, 0, 2, 3)


# ---------------------------------------------------------- sparse coding

@dataclass(frozen=True)
class SCLayerConfig:
    in_channels: int
    out_channels: int
    window: int = 3
    stride: int = 1
    pad: int = None
    params: ElasticNetParams = ElasticNetParams(0.1)

    def __post_init__(self):
        if self.pad is None:
            object.__setattr__(self, "pad", (self.window - 1) // 2)
        if self.out_channels < 1 or self.in_channels < 1:
            raise ContractViolation("layer widths must be positive")
        if self.stride not in (1, 2):
            raise ContractViolation(f"stride must be 1 or 2, got {self.stride}")

    @property
    def input_dim(self):
        return self.in_channels * self.window * self.window


@dataclass
class SCLayerCache:
    input_shape: tuple
    output_shape: tuple
    patches: np.ndarray          # (m, P)
    codes: np.ndarray            # (n, P)
    gram_factorizations: list    # solver.ActiveSetGroup per active-set cardinality
    params: ElasticNetParams
    consumed: bool = False


def _solve_columns(D, X, p, kappa, G, workers):
    DtX = D.T @ X
    P = X.shape[1]
    if workers > 1 and P >= 2 * workers:
        bounds = np.linspace(0, P, workers + 1).astype(int)

        def run(i):
            sl = slice(bounds[i], bounds[i + 1])
            return solver.fista_batch(D, X[:, sl], p, kappa=kappa, gram=G, DtX=DtX[:, sl])

        with ThreadPoolExecutor(workers) as pool:
            A = np.concatenate(list(pool.map(run, range(workers))), axis=1)
    else:
        A = solver.fista_batch(D, X, p, kappa=kappa, gram=G, DtX=DtX)
    return solver.finish_codes(G, DtX, A, p)


def sc_forward(x, D, cfg, kappa=None, workers=1):
    """Sparse-code every patch of ``x`` against dictionary ``D``.

    Returns the code map ``(N, n, Ho, Wo)`` and the cache for
    :func:`sc_backward`.
    """
    if x.ndim == 3:
        x = x[None]
    if D.shape != (cfg.input_dim, cfg.out_channels):
        raise ContractViolation(f"dictionary {D.shape} does not match layer "
                                f"({cfg.input_dim}, {cfg.out_channels})")
    if x.shape[1] != cfg.in_channels:
        raise ContractViolation(f"input has {x.shape[1]} channels, layer expects {cfg.in_channels}")
    N, _, H, W = x.shape
    Ho, Wo = output_size(H, cfg.stride), output_size(W, cfg.stride)
    X = extract_patches(x, cfg.window, cfg.stride, cfg.pad)
    G = D.T @ D
    if kappa is None:
        kappa = linalg.dominant_eigenvalue(D, cfg.params.lambda2, gram=G)
    try:
        A, groups = _solve_columns(D, X, cfg.params, kappa, G, workers)
    except NumericalError as exc:
        bad = np.flatnonzero(~np.isfinite(X).all(axis=0))
        where = f" at patch columns {bad[:5].tolist()}" if bad.size else ""
        raise NumericalError(f"{exc}{where}") from None
    out = from_columns(A, N, Ho, Wo)
    cache = SCLayerCache(x.shape, out.shape, X, A, groups, cfg.params)
    return out, cache


def sc_backward(cache, D, cfg, grad_out):
    """Gradients through the sparse-coding layer by fixed-point differentiation.

    With ``g = dL/dalpha`` per location, ``gamma`` solves the active-set
    system ``(D_L^T D_L + lambda2 I) gamma_L = g_L`` (zero off the support),
    and

        dL/dD       = sum_p  (x_p - D a_p) gamma_p^T - D gamma_p a_p^T
        dL/dlambda1 = -sum_p sum_j gamma_pj
        dL/dx_p     = D gamma_p        (scattered back through the patches)
    """
    if cache.consumed:
        raise ContractViolation("layer cache was already used by a backward pass")
    if grad_out.shape != cache.output_shape:
        raise ContractViolation(f"gradient {grad_out.shape} does not match output {cache.output_shape}")
    if D.shape != (cache.patches.shape[0], cache.codes.shape[0]):
        raise ContractViolation("dictionary shape changed between forward and backward")
    cache.consumed = True
    g = to_columns(grad_out)
    gamma = solver.solve_on_active_sets(cache.gram_factorizations, g)
    A = cache.codes
    X = cache.patches
    grad_D = X @ gamma.T - D @ (A @ gamma.T + gamma @ A.T)
    grad_lambda1 = -float(gamma.sum())
    grad_in = scatter_patches(D @ gamma, cache.input_shape, cfg.window, cfg.stride, cfg.pad)
    return grad_D, grad_lambda1, grad_in


# ------------------------------------------------------ batch normalization

@dataclass
class BatchNormState:
    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5

    @classmethod
    def create(cls, channels, momentum=0.9, epsilon=1e-5):
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels),
                   momentum, epsilon)


def batchnorm_forward(x, state, train=True, update_stats=True):
    """Per-channel normalization over batch and spatial axes."""
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if update_stats:
            state.running_mean[:] = state.momentum * state.running_mean + (1 - state.momentum) * mean
            state.running_var[:] = state.momentum * state.running_var + (1 - state.momentum) * var
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = xhat * state.scale[None, :, None, None] + state.shift[None, :, None, None]
    return y, (xhat, inv_std, train)


def batchnorm_backward(cache, grad_out, state):
    """Returns ``(grad_in, grad_scale, grad_shift)``."""
    xhat, inv_std, train = cache
    grad_shift = grad_out.sum(axis=(0, 2, 3))
    grad_scale = (grad_out * xhat).sum(axis=(0, 2, 3))
    gxhat = grad_out * state.scale[None, :, None, None]
    if not train:
        return gxhat * inv_std[None, :, None, None], grad_scale, grad_shift
    count = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    mean_g = gxhat.sum(axis=(0, 2, 3)) / count
    mean_gx = (gxhat * xhat).sum(axis=(0, 2, 3)) / count
    grad_in = (gxhat - mean_g[None, :, None, None] - xhat * mean_gx[None, :, None, None]) \
        * inv_std[None, :, None, None]
    return grad_in, grad_scale, grad_shift


# ------------------------------------------------------ pooling, classifier

def global_avg_pool_forward(x):
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(grad_out, input_shape):
    N, C, H, W = input_shape
    return np.broadcast_to(grad_out[:, :, None, None] / (H * W), input_shape).copy()


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(labels)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - log_norm[:, None]
    N = logits.shape[0]
    loss = -float(logp[np.arange(N), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(N), labels] -= 1.0
    return loss, grad / N


def linear_softmax_ce(features, weights, bias, labels):
    """Linear classifier followed by softmax cross-entropy.

    ``features`` is ``(N, C)`` (or a single ``(C,)`` vector), ``weights``
    ``(K, C)``. Returns ``(loss, grads)`` with gradient keys ``features``,
    ``weights``, ``bias``, plus the ``logits``.
    """
    single = features.ndim == 1
    F = np.atleast_2d(features)
    logits = F @ weights.T + bias
    loss, g = softmax_cross_entropy(logits, labels)
    grads = {
        "features": (g @ weights)[0] if single else g @ weights,
        "weights": g.T @ F,
        "bias": g.sum(axis=0),
        "logits": logits[0] if single else logits,
    }
    return loss, grads


# ------------------------------------------------------------ layer objects

class SparseCodingLayer:
    """Sparse-coding layer holding a dictionary and a learnable ``lambda1``."""

    kind = "sc"

    def __init__(self, cfg, D, workers=1):
        self.cfg = cfg
        self.D = D
        self.lambda1 = np.array(float(cfg.params.lambda1))
        self.workers = workers
        self.eigvec = None
        self.grads = {}

    def params(self):
        return {"D": self.D, "lambda1": self.lambda1}

    def buffers(self):
        # the power-iteration warm start fixes kappa, so it is saved too
        return {} if self.eigvec is None else {"eigvec": self.eigvec}

    def solver_params(self):
        return self.cfg.params.with_lambda1(self.lambda1)

    def forward(self, x, train=False, update_state=True):
        p = self.solver_params()
        kappa, v = linalg.dominant_eigenvalue(self.D, p.lambda2, v0=self.eigvec, return_vector=True)
        if train and update_state:
            if self.eigvec is None:
                self.eigvec = v
            else:
                self.eigvec[...] = v
        cfg = SCLayerConfig(self.cfg.in_channels, self.cfg.out_channels, self.cfg.window,
                            self.cfg.stride, self.cfg.pad, p)
        return sc_forward(x, self.D, cfg, kappa=kappa, workers=self.workers)

    def backward(self, cache, grad_out):
        grad_D, grad_l1, grad_in = sc_backward(cache, self.D, self.cfg, grad_out)
        self.grads = {"D": grad_D, "lambda1": np.array(grad_l1)}
        return grad_in


class BatchNorm2d:
    kind = "bn"

    def __init__(self, channels, momentum=0.9, epsilon=1e-5):
        self.state = BatchNormState.create(channels, momentum, epsilon)
        self.grads = {}

    def params(self):
        return {"scale": self.state.scale, "shift": self.state.shift}

    def buffers(self):
        return {"running_mean": self.state.running_mean, "running_var": self.state.running_var}

    def forward(self, x, train=False, update_state=True):
        return batchnorm_forward(x, self.state, train, update_stats=train and update_state)

    def backward(self, cache, grad_out):
        gx, gs, gb = batchnorm_backward(cache, grad_out, self.state)
        self.grads = {"scale": gs, "shift": gb}
        return gx


class GlobalAvgPool:
    kind = "pool"

    def __init__(self):
        self.grads = {}

    def params(self):
        return {}

    def buffers(self):
        return {}

    def forward(self, x, train=False, update_state=True):
        return global_avg_pool_forward(x), x.shape

    def backward(self, cache, grad_out):
        return global_avg_pool_backward(grad_out, cache)


class Linear:
    """Fully connected classifier on pooled (or flattened) features."""

    kind = "fc"

    def __init__(self, weight, bias):
        self.weight = weight
        self.bias = bias
        self.grads = {}

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def buffers(self):
        return {}

    def forward(self, x, train=False, update_state=True):
        F = x.reshape(x.shape[0], -1)
        return F @ self.weight.T + self.bias, (F, x.shape)

    def backward(self, cache, grad_out):
        F, shape = cache
        self.grads = {"weight": grad_out.T @ F, "bias": grad_out.sum(axis=0)}
        return (grad_out @ self.weight).reshape(shape)

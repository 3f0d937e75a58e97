"""Differentiable primitives with hand-written backward passes.

Every forward returns ``(out, cache)`` and the matching backward consumes
``(dout, cache)``; the model composes these into a fixed graph, so no tape
or general autodiff is involved.  All math is float64: gradients are meant
to be checked against central finite differences, and double precision is
what makes that comparison decisive.

`finite_diff_check` is the independent verifier: it re-derives every
parameter gradient numerically from a pure loss callable and reports the
worst relative error per array.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import backend as B
from .errors import ContractError, InvalidInputError, VerificationError


# ------------------------------------------------------------ conv 3x3/s2 ----

def _pad1(x: np.ndarray, mode: str) -> np.ndarray:
    if mode == "zeros":
        return np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    if mode == "wrap":
        return np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="wrap")
    raise ContractError(f"unknown pad mode {mode!r}")


def _fold_pad(dxp: np.ndarray, mode: str) -> np.ndarray:
    """Collapse the one-pixel pad ring of an input gradient.

    Zero padding discards the ring; wraparound padding adds each ring cell
    back onto the interior cell it aliased.
    """
    core = dxp[:, 1:-1, 1:-1, :]
    if mode == "zeros":
        return core
    core[:, -1, :, :] += dxp[:, 0, 1:-1, :]
    core[:, 0, :, :] += dxp[:, -1, 1:-1, :]
    core[:, :, -1, :] += dxp[:, 1:-1, 0, :]
    core[:, :, 0, :] += dxp[:, 1:-1, -1, :]
    core[:, -1, -1, :] += dxp[:, 0, 0, :]
    core[:, -1, 0, :] += dxp[:, 0, -1, :]
    core[:, 0, -1, :] += dxp[:, -1, 0, :]
    core[:, 0, 0, :] += dxp[:, -1, -1, :]
    return core


def conv3x3s2_forward(x: np.ndarray, w: np.ndarray, pad_mode: str = "zeros"):
    """3x3 convolution, stride 2, pad 1, no bias (a following batch-norm
    would absorb any bias, so the blocks do not carry one).

    Input (N, H, W, Ci) with H, W even; output (N, H/2, W/2, Co).
    """
    if x.shape[1] % 2 or x.shape[2] % 2:
        raise ContractError(f"conv3x3s2 needs even spatial dims, got {x.shape[1:3]}")
    xp = _pad1(np.asarray(x, dtype=np.float64), pad_mode)
    out = B.conv3x3s2_forward(xp, w)
    return out, (xp, w, pad_mode)


def conv3x3s2_backward(dout: np.ndarray, cache):
    xp, w, pad_mode = cache
    dxp = B.conv3x3s2_backward_dx(dout, w, xp.shape)
    dx = _fold_pad(dxp, pad_mode)
    dw = B.conv3x3s2_backward_dw(xp, dout)
    return dx, dw


# ----------------------------------------------------------------- linear ----

def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """out = x @ w + b over the last axis; any leading shape.

    A (N, H, W, C) input with a (C, K) weight is exactly a 1x1 convolution,
    which is how the residual score head uses this.
    """
    if x.shape[-1] != w.shape[0]:
        raise ContractError(f"linear: input dim {x.shape[-1]} != weight dim {w.shape[0]}")
    x = np.asarray(x, dtype=np.float64)
    out = x.reshape(-1, w.shape[0]) @ w + b
    return out.reshape(x.shape[:-1] + (w.shape[1],)), (x, w)


def linear_backward(dout: np.ndarray, cache):
    x, w = cache
    d2 = dout.reshape(-1, w.shape[1])
    x2 = x.reshape(-1, w.shape[0])
    dx = (d2 @ w.T).reshape(x.shape)
    dw = x2.T @ d2
    db = d2.sum(axis=0)
    return dx, dw, db


# ------------------------------------------------------------- batch norm ----

def batchnorm_forward(x, gamma, beta, running_mean, running_var,
                      mode: str, momentum: float = 0.1, eps: float = 1e-5):
    """Channel-wise batch normalization over (N, H, W, C).

    Train mode normalizes with batch statistics (biased variance) and
    returns updated running statistics; eval mode uses the running ones
    unchanged.  Returns (out, cache, running_mean, running_var).
    """
    x = np.asarray(x, dtype=np.float64)
    m = x.shape[0] * x.shape[1] * x.shape[2]
    if mode == "train":
        mu = x.mean(axis=(0, 1, 2))
        xhat = x - mu
        # biased variance from the centered copy; avoids a second full pass
        var = np.einsum("nhwc,nhwc->c", xhat, xhat) / m
        inv = 1.0 / np.sqrt(var + eps)
        xhat *= inv
        out = gamma * xhat
        out += beta
        new_mean = (1.0 - momentum) * running_mean + momentum * mu
        new_var = (1.0 - momentum) * running_var + momentum * var
        cache = (xhat, inv, gamma, x.shape)
        return out, cache, new_mean, new_var
    if mode == "eval":
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = x - running_mean
        xhat *= inv
        out = gamma * xhat
        out += beta
        return out, (xhat, inv, gamma, x.shape), running_mean, running_var
    raise ContractError(f"batchnorm mode must be train or eval, got {mode!r}")


def batchnorm_backward(dout: np.ndarray, cache, mode: str = "train"):
    """Backward for batchnorm_forward.

    Train mode accounts for the dependence of the batch mean/variance on x;
    eval mode treats the running statistics as constants.
    """
    xhat, inv, gamma, shape = cache
    m = shape[0] * shape[1] * shape[2]
    dgamma = np.einsum("nhwc,nhwc->c", dout, xhat)
    dbeta = dout.sum(axis=(0, 1, 2))
    if mode == "eval":
        return dout * (gamma * inv), dgamma, dbeta
    # closed form dx = inv/m * (m*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
    # with dxhat = dout*gamma; both sums factor through gamma, so they are
    # gamma*dbeta and gamma*dgamma and need no extra full-size passes
    dx = dout * (gamma * inv)
    dx -= xhat * ((inv / m) * gamma * dgamma)
    dx -= (inv / m) * gamma * dbeta
    return dx, dgamma, dbeta


# ------------------------------------------------------------------- relu ----

def relu_forward(x: np.ndarray):
    out = np.maximum(x, 0.0)
    return out, (x > 0.0)


def relu_backward(dout: np.ndarray, cache):
    return dout * cache


# ------------------------------------------------------------------ pooling --

def global_avg_pool_forward(x: np.ndarray):
    """(N, H, W, C) -> (N, C) spatial mean."""
    return x.mean(axis=(1, 2)), x.shape


def global_avg_pool_backward(dout: np.ndarray, shape):
    n, h, w, c = shape
    return np.broadcast_to(dout[:, None, None, :] / (h * w), shape).copy()


# -------------------------------------------------------------- logsumexp ----

def _check_scores(scores: np.ndarray) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise InvalidInputError("logsumexp_mean: empty score vector")
    if not np.all(np.isfinite(s)):
        raise InvalidInputError("logsumexp_mean: non-finite score")
    return s


def logsumexp_mean(scores, tau: float) -> float:
    """tau * log(mean(exp(s / tau))), computed max-shifted.

    Smoothly interpolates between max (tau -> 0) and mean (tau -> inf);
    the result always lies in [max(s) - tau*ln N, max(s)].
    """
    if tau <= 0:
        raise ContractError("tau must be positive")
    s = _check_scores(scores).ravel()
    m = s.max()
    return float(tau * np.log(np.mean(np.exp((s - m) / tau))) + m)


def logsumexp_mean_grad(scores, tau: float) -> np.ndarray:
    """d logsumexp_mean / d s_i = softmax(s / tau); positive, sums to 1."""
    if tau <= 0:
        raise ContractError("tau must be positive")
    s = _check_scores(scores).ravel()
    e = np.exp((s - s.max()) / tau)
    return e / e.sum()


def lse_mean_rows(scores: np.ndarray, tau: float) -> np.ndarray:
    """Row-wise logsumexp_mean for a (B, N) batch; same math, one pass."""
    if tau <= 0:
        raise ContractError("tau must be positive")
    s = _check_scores(scores)
    m = s.max(axis=1, keepdims=True)
    return (tau * np.log(np.mean(np.exp((s - m) / tau), axis=1)) + m[:, 0])


def lse_mean_rows_grad(scores: np.ndarray, tau: float) -> np.ndarray:
    s = _check_scores(scores)
    e = np.exp((s - s.max(axis=1, keepdims=True)) / tau)
    return e / e.sum(axis=1, keepdims=True)


# ------------------------------------------------------- logistic loss bits --

def sigmoid(z):
    return expit(z)


def bce_from_logit(z: float, y: int) -> float:
    """Binary cross-entropy of label y against logit z.

    Uses the overflow-free form max(z,0) - z*y + log(1+exp(-|z|)) rather
    than passing through the sigmoid, so saturated logits stay finite.
    """
    if y not in (0, 1):
        raise ContractError(f"label must be 0 or 1, got {y!r}")
    if not np.isfinite(z):
        raise InvalidInputError("bce_from_logit: non-finite logit")
    z = float(z)
    return max(z, 0.0) - z * y + float(np.log1p(np.exp(-abs(z))))


def bce_from_logits_mean(z: np.ndarray, y: np.ndarray) -> float:
    """Mean BCE over a batch of logits, same stable form."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("bce_from_logits_mean: non-finite logit")
    return float(np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))))


# ------------------------------------------------------- gradient checking --

@dataclass
class ArrayCheck:
    name: str
    max_rel_err: float
    worst_index: int
    analytic: float
    numeric: float


@dataclass
class GradReport:
    """Per-array outcome of an analytic-vs-numeric gradient comparison."""

    checks: list = field(default_factory=list)

    def add(self, c: ArrayCheck) -> None:
        self.checks.append(c)

    @property
    def max_rel_err(self) -> float:
        return max((c.max_rel_err for c in self.checks), default=0.0)

    def worst(self) -> ArrayCheck:
        return max(self.checks, key=lambda c: c.max_rel_err)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol

    def summary(self) -> str:
        lines = []
        for c in sorted(self.checks, key=lambda c: -c.max_rel_err):
            lines.append(
                f"{c.name:24s} max_rel_err={c.max_rel_err:.3e} at flat[{c.worst_index}]"
                f" analytic={c.analytic:+.6e} numeric={c.numeric:+.6e}")
        return "\n".join(lines)


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def finite_diff_check(loss_fn, params: dict, grads: dict,
                      step: float = 1e-5, exclude: dict | None = None) -> GradReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn()`` must be a pure, deterministic function of the arrays in
    ``params`` (it is called with no arguments and reads them by reference;
    elements are perturbed in place and restored).  ``grads`` maps the same
    names to analytic gradients.  ``exclude`` optionally maps names to
    boolean masks of elements to skip, e.g. ReLU inputs sitting exactly on
    the kink where no two-sided derivative exists.

    Raises VerificationError if two unperturbed evaluations disagree.
    """
    base1 = loss_fn()
    base2 = loss_fn()
    if base1 != base2:
        raise VerificationError(
            f"loss function is not deterministic: {base1!r} != {base2!r}")
    report = GradReport()
    for name, arr in params.items():
        if name not in grads:
            raise ContractError(f"no analytic gradient supplied for {name!r}")
        g = np.asarray(grads[name], dtype=np.float64).ravel()
        if g.size != arr.size:
            raise ContractError(f"gradient shape mismatch for {name!r}")
        mask = None if exclude is None else exclude.get(name)
        flat = arr.reshape(-1)
        worst = ArrayCheck(name, 0.0, -1, 0.0, 0.0)
        for i in range(flat.size):
            if mask is not None and mask.reshape(-1)[i]:
                continue
            orig = flat[i]
            flat[i] = orig + step
            fp = loss_fn()
            flat[i] = orig - step
            fm = loss_fn()
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            err = _rel_err(g[i], num)
            if err > worst.max_rel_err:
                worst = ArrayCheck(name, err, i, float(g[i]), float(num))
        if worst.worst_index < 0:
            worst = ArrayCheck(name, 0.0, 0, float(g[0]) if g.size else 0.0, 0.0)
        report.add(worst)
    return report

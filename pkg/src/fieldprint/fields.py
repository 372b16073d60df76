"""Sine-activated MLP fields with analytic spatial derivatives.

This module is the numerical core shared by every trainable field in the
package: a small fully-connected network with sine activations whose value,
spatial gradient and spatial Hessian are propagated in closed form
(forward-mode), plus a hand-written reverse pass that turns cotangents on
(value, gradient, Hessian) into parameter gradients. Training uses a plain
Adam loop. Everything is float64 numpy; no autodiff framework is involved.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from ._accel import sincos

logger = logging.getLogger(__name__)

Array = np.ndarray

# Evaluation outside the normalized cube plus this margin is legal but logged.
DOMAIN_MARGIN = 0.2


class FieldShapeError(ValueError):
    """Layer shapes do not chain or do not match the evaluation request."""


class NumericError(FloatingPointError):
    """Non-finite values encountered in parameters or gradients."""


@dataclass
class FieldParams:
    """Parameters of one sine-activated MLP.

    ``weights[k]`` has shape (out_k, in_k) and ``biases[k]`` shape (out_k,).
    All layers except the last apply ``sin(omega0 * z)``; the last layer is
    linear. ``in_dim`` of the first layer is 3 for spatial fields (4 for the
    partition classifier, which lives elsewhere and uses ReLU).
    """

    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    omega0: float = 30.0

    def __post_init__(self):
        self.validate()

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def validate(self):
        if not self.weights or len(self.weights) != len(self.biases):
            raise FieldShapeError("weights/biases must be non-empty and parallel")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise FieldShapeError(f"layer {k}: weight {w.shape} / bias {b.shape}")
            if k > 0 and w.shape[1] != self.weights[k - 1].shape[0]:
                raise FieldShapeError(
                    f"layer {k}: in_dim {w.shape[1]} != previous out_dim "
                    f"{self.weights[k - 1].shape[0]}"
                )
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise NumericError(f"layer {k}: non-finite parameter")

    def copy(self) -> "FieldParams":
        return FieldParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.omega0,
        )

    def ravel(self) -> Array:
        """Flatten all parameters into one vector (test/debug helper)."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def with_ravel(self, vec: Array) -> "FieldParams":
        """Inverse of :meth:`ravel`."""
        out = self.copy()
        i = 0
        for k, (w, b) in enumerate(zip(out.weights, out.biases)):
            out.weights[k] = vec[i : i + w.size].reshape(w.shape).copy()
            i += w.size
            out.biases[k] = vec[i : i + b.size].copy()
            i += b.size
        return out


@dataclass
class FieldEval:
    """Evaluation of a field at one point.

    ``value`` has shape (out_dim,), ``grad`` (out_dim, 3) and ``hessian``
    (out_dim, 3, 3); the latter two are ``None`` unless requested.
    """

    value: Array
    grad: Array | None = None
    hessian: Array | None = None


def siren_init(layer_sizes, omega0: float = 30.0, rng=None, final_bias=None) -> FieldParams:
    """Initialize a sine MLP following the standard sine-network scheme.

    First layer uniform in +-1/in_dim, later layers +-sqrt(6/in_dim)/omega0.
    ``layer_sizes`` lists all widths, e.g. (3, 256, 256, 256, 256, 1) for the
    default 5-layer field. ``final_bias`` optionally seeds the last bias
    (used to bias the quaternion field toward the identity rotation).
    """
    rng = np.random.default_rng(rng)
    weights, biases = [], []
    n = len(layer_sizes) - 1
    for k in range(n):
        fan_in, fan_out = layer_sizes[k], layer_sizes[k + 1]
        if k == 0:
            bound = 1.0 / fan_in
        else:
            bound = np.sqrt(6.0 / fan_in) / omega0
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    if final_bias is not None:
        biases[-1] = np.asarray(final_bias, dtype=float).copy()
    return FieldParams(weights, biases, omega0)


def _check_domain(x: Array):
    lim = 1.0 + DOMAIN_MARGIN
    if np.abs(x).max(initial=0.0) > lim:
        logger.warning("field evaluated outside [-%.1f, %.1f]^3", lim, lim)


def _lin(t: Array, w: Array) -> Array:
    """Contract the trailing (width) axis with w.T in one flat GEMM."""
    lead = t.shape[:-1]
    out = t.reshape(-1, t.shape[-1]) @ w.T
    return out.reshape(*lead, w.shape[0])


def forward(params: FieldParams, x: Array, order: int = 0, want_cache: bool = False):
    """Batched forward pass with analytic spatial derivatives.

    Parameters
    ----------
    x : (N, in_dim) points.
    order : 0 value only, 1 adds gradients, 2 adds Hessians.

    Returns
    -------
    (value, grad, hess[, cache]) with shapes (N, out), (N, out, in),
    (N, out, in, in); ``grad``/``hess`` are None below the requested order.
    The cache holds per-layer intermediates for :func:`backward`.

    Derivative tensors are carried internally with the spatial axes ahead of
    the width axis — (N, d, width) and (N, d, d, width) — so every layer is a
    single flat GEMM; the public axes order is restored on return.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise FieldShapeError(f"input shape {x.shape}, expected (N, {params.in_dim})")
    _check_domain(x)
    n, d = x.shape
    om = params.omega0

    a = x
    ja = np.broadcast_to(np.eye(d), (n, d, d)).copy() if order >= 1 else None
    ha = np.zeros((n, d, d, d)) if order >= 2 else None
    cache = []

    last = params.n_layers - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.T + b
        jz = _lin(ja, w) if order >= 1 else None
        hz = _lin(ha, w) if order >= 2 else None
        if k == last:
            if want_cache:
                cache.append((a, ja, ha, None, None, jz, hz))
            a, ja, ha = z, jz, hz
            break
        s, c = sincos(om * z)
        if want_cache:
            cache.append((a, ja, ha, c, s, jz, hz))
        a = s
        if order >= 1:
            ja = om * c[:, None, :] * jz
        if order >= 2:
            outer = jz[:, :, None, :] * jz[:, None, :, :]
            ha = om * c[:, None, None, :] * hz - om * om * s[:, None, None, :] * outer
    # restore public axis order: (N, out, d[, d])
    jout = None if ja is None else np.ascontiguousarray(np.moveaxis(ja, -1, 1))
    hout = None if ha is None else np.ascontiguousarray(np.moveaxis(ha, -1, 1))
    if want_cache:
        return a, jout, hout, cache
    return a, jout, hout


def backward(
    params: FieldParams,
    cache,
    cot_value: Array | None,
    cot_grad: Array | None = None,
    cot_hess: Array | None = None,
):
    """Reverse pass: cotangents on (value, grad, hessian) -> parameter grads.

    Cotangent shapes mirror the forward outputs: (N, out), (N, out, in),
    (N, out, in, in). Returns ``(grad_weights, grad_biases)`` lists shaped
    like ``params``. A cotangent supplied for an order that was not evaluated
    in the cached forward is a contract error.
    """
    om = params.omega0
    last = params.n_layers - 1
    gw = [np.zeros_like(w) for w in params.weights]
    gb = [np.zeros_like(b) for b in params.biases]

    a_in, ja_in, ha_in, _, _, _, _ = cache[last]
    n = a_in.shape[0]
    if cot_grad is not None and ja_in is None:
        raise FieldShapeError("gradient cotangent supplied but forward had order < 1")
    if cot_hess is not None and ha_in is None:
        raise FieldShapeError("hessian cotangent supplied but forward had order < 2")

    zbar = np.zeros((n, params.weights[last].shape[0])) if cot_value is None else cot_value
    # internal layout keeps spatial axes ahead of the width axis
    jbar = None if cot_grad is None else np.moveaxis(cot_grad, 1, -1)
    hbar = None if cot_hess is None else np.moveaxis(cot_hess, 1, -1)

    def flat(t):
        return t.reshape(-1, t.shape[-1])

    for k in range(last, -1, -1):
        w = params.weights[k]
        a_in, ja_in, ha_in, c, s, jz, hz = cache[k]

        if k != last:
            # Undo the sine activation: outputs were s = sin(om*z),
            # js = om*c*jz, hs = om*c*hz - om^2*s*(jz x jz).
            new_zbar = np.zeros_like(c)
            new_jbar = None
            new_hbar = None
            if zbar is not None:
                new_zbar += om * c * zbar
            if jbar is not None:
                new_zbar += -om * om * s * (jbar * jz).sum(axis=1)
                new_jbar = om * c[:, None, :] * jbar
            if hbar is not None:
                outer = jz[:, :, None, :] * jz[:, None, :, :]
                new_zbar += (hbar * (
                    -om * om * s[:, None, None, :] * hz
                    - om ** 3 * c[:, None, None, :] * outer
                )).sum(axis=(1, 2))
                hsym = hbar + np.swapaxes(hbar, 1, 2)
                if new_jbar is None:
                    new_jbar = np.zeros_like(jz)
                new_jbar += -om * om * s[:, None, :] * (hsym * jz[:, None, :, :]).sum(axis=2)
                new_hbar = om * c[:, None, None, :] * hbar
            zbar, jbar, hbar = new_zbar, new_jbar, new_hbar

        # Linear layer z = a_in @ w.T + b, jz = ja_in @ w.T, hz = ha_in @ w.T.
        gw[k] += zbar.T @ a_in
        gb[k] += zbar.sum(axis=0)
        abar = zbar @ w
        jabar = habar = None
        if jbar is not None:
            gw[k] += flat(jbar).T @ flat(ja_in)
            jabar = _lin(jbar, w.T)
        if hbar is not None:
            gw[k] += flat(hbar).T @ flat(ha_in)
            habar = _lin(hbar, w.T)
        if k == 0:
            break
        zbar, jbar, hbar = abar, jabar, habar

    return gw, gb


def eval_field(params: FieldParams, x: Array, order: int = 0) -> FieldEval:
    """Evaluate the field at a single point (see :func:`forward` for batches)."""
    v, g, h = forward(params, np.asarray(x, dtype=float)[None, :], order)
    return FieldEval(
        value=v[0],
        grad=None if g is None else g[0],
        hessian=None if h is None else h[0],
    )


def backward_params(params: FieldParams, x: Array, cot_value=None, cot_grad=None, cot_hess=None):
    """One-shot forward+reverse for a batch: returns (grad_weights, grad_biases)."""
    order = 2 if cot_hess is not None else (1 if cot_grad is not None else 0)
    *_, cache = forward(params, x, order=order, want_cache=True)
    return backward(params, cache, cot_value, cot_grad, cot_hess)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Adam moment buffers; shapes mirror the FieldParams they train."""

    m_w: list
    m_b: list
    v_w: list
    v_b: list
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: FieldParams, lr: float = 1e-4) -> "AdamState":
        return cls(
            m_w=[np.zeros_like(w) for w in params.weights],
            m_b=[np.zeros_like(b) for b in params.biases],
            v_w=[np.zeros_like(w) for w in params.weights],
            v_b=[np.zeros_like(b) for b in params.biases],
            lr=lr,
        )


def adam_step(params: FieldParams, grads, state: AdamState, context: str = "") -> None:
    """One in-place Adam update. ``grads`` is (grad_weights, grad_biases).

    Raises NumericError naming ``context`` if any gradient is non-finite.
    """
    gw, gb = grads
    for g in gw + gb:
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {context or 'adam_step'}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for buf_m, buf_v, g, p in (
        (state.m_w, state.v_w, gw, params.weights),
        (state.m_b, state.v_b, gb, params.biases),
    ):
        for i in range(len(p)):
            buf_m[i] *= b1
            buf_m[i] += (1 - b1) * g[i]
            buf_v[i] *= b2
            buf_v[i] += (1 - b2) * g[i] * g[i]
            p[i] -= state.lr * (buf_m[i] / bc1) / (np.sqrt(buf_v[i] / bc2) + state.eps)


# ---------------------------------------------------------------------------
# Field interface used by the geometry/toolpath/motion layers


class ScalarField:
    """Minimal field interface: batched values / gradients / hessians.

    Consumers (iso-curve extraction, collision evaluation) only need this,
    which lets tests substitute closed-form fields for trained networks.
    """

    def values(self, x: Array) -> Array:
        raise NotImplementedError

    def gradients(self, x: Array) -> Array:
        raise NotImplementedError

    def hessians(self, x: Array) -> Array:
        raise NotImplementedError


class SirenField(ScalarField):
    """Scalar view of trained FieldParams (first output channel)."""

    def __init__(self, params: FieldParams):
        self.params = params

    def values(self, x):
        v, _, _ = forward(self.params, x, order=0)
        return v[:, 0]

    def gradients(self, x):
        _, g, _ = forward(self.params, x, order=1)
        return g[:, 0, :]

    def hessians(self, x):
        _, _, h = forward(self.params, x, order=2)
        return h[:, 0, :, :]


class AnalyticField(ScalarField):
    """Closed-form scalar field; missing derivatives fall back to central FD."""

    def __init__(self, fn, grad_fn=None, hess_fn=None, h: float = 1e-5):
        self.fn = fn
        self.grad_fn = grad_fn
        self.hess_fn = hess_fn
        self.h = h

    def values(self, x):
        return np.asarray(self.fn(np.asarray(x, dtype=float)))

    def gradients(self, x):
        x = np.asarray(x, dtype=float)
        if self.grad_fn is not None:
            return np.asarray(self.grad_fn(x))
        g = np.empty_like(x)
        for d in range(x.shape[1]):
            e = np.zeros(x.shape[1])
            e[d] = self.h
            g[:, d] = (self.fn(x + e) - self.fn(x - e)) / (2 * self.h)
        return g

    def hessians(self, x):
        x = np.asarray(x, dtype=float)
        if self.hess_fn is not None:
            return np.asarray(self.hess_fn(x))
        n, dim = x.shape
        out = np.empty((n, dim, dim))
        for d in range(dim):
            e = np.zeros(dim)
            e[d] = self.h
            gp = self.gradients(x + e)
            gm = self.gradients(x - e)
            out[:, d, :] = (gp - gm) / (2 * self.h)
        return 0.5 * (out + np.swapaxes(out, 1, 2))


# ---------------------------------------------------------------------------
# Checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: FieldParams, state: AdamState | None = None,
                    config_digest: str = "", extra: dict | None = None) -> None:
    """Serialize params (+ optional Adam state) to an .npz; bit-exact round trip."""
    payload = {
        "format_version": np.int64(CHECKPOINT_VERSION),
        "n_layers": np.int64(params.n_layers),
        "omega0": np.float64(params.omega0),
        "config_digest": np.bytes_(config_digest.encode()),
    }
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        payload[f"w{k}"] = w
        payload[f"b{k}"] = b
    if state is not None:
        payload["adam_step"] = np.int64(state.step)
        payload["adam_lr"] = np.float64(state.lr)
        payload["adam_beta1"] = np.float64(state.beta1)
        payload["adam_beta2"] = np.float64(state.beta2)
        payload["adam_eps"] = np.float64(state.eps)
        for k in range(params.n_layers):
            payload[f"mw{k}"] = state.m_w[k]
            payload[f"mb{k}"] = state.m_b[k]
            payload[f"vw{k}"] = state.v_w[k]
            payload[f"vb{k}"] = state.v_b[k]
    for key, val in (extra or {}).items():
        payload[f"x_{key}"] = np.asarray(val)
    np.savez(path, **payload)


def load_checkpoint(path):
    """Load a checkpoint; returns (params, adam_state_or_None, meta dict)."""
    with np.load(path) as z:
        version = int(z["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        n = int(z["n_layers"])
        params = FieldParams(
            [z[f"w{k}"] for k in range(n)],
            [z[f"b{k}"] for k in range(n)],
            float(z["omega0"]),
        )
        meta = {"config_digest": bytes(z["config_digest"]).decode()}
        for key in z.files:
            if key.startswith("x_"):
                meta[key[2:]] = z[key]
        state = None
        if "adam_step" in z.files:
            state = AdamState(
                m_w=[z[f"mw{k}"] for k in range(n)],
                m_b=[z[f"mb{k}"] for k in range(n)],
                v_w=[z[f"vw{k}"] for k in range(n)],
                v_b=[z[f"vb{k}"] for k in range(n)],
                step=int(z["adam_step"]),
                lr=float(z["adam_lr"]),
                beta1=float(z["adam_beta1"]),
                beta2=float(z["adam_beta2"]),
                eps=float(z["adam_eps"]),
            )
    return params, state, meta


def params_digest(params: FieldParams) -> str:
    """Stable content hash of the parameters (used in artifact provenance)."""
    h = hashlib.sha256()
    for w, b in zip(params.weights, params.biases):
        h.update(w.tobytes())
        h.update(b.tobytes())
    h.update(np.float64(params.omega0).tobytes())
    return h.hexdigest()[:16]

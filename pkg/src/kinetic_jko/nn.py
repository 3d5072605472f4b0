"""A small MLP engine for the velocity-space control field.

The network is evaluated together with forward-mode tangents along selected
input directions (one per velocity coordinate for the divergence).  The
reverse pass then differentiates through both the primal values and the
tangents, which gives exact parameter gradients of losses that involve
``∇_v · u_θ``.

Parameters live in one flat float64 buffer laid out as
``W1 (row-major), b1, W2, b2, ...``; weight/bias arrays are views into it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import NonFiniteError, first_nonfinite

ACTIVATIONS = ("tanh", "leaky_relu", "none")


@dataclass(frozen=True)
class FeatureMap:
    """Input embedding of ``(x, v)``.

    ``omega=None`` passes ``(x, v)`` through unchanged.  Otherwise each
    position coordinate is replaced by ``(sin(ωx_i), cos(ωx_i))``.
    """

    omega: float | None = None

    def width(self, dim_x: int, dim_v: int) -> int:
        return dim_v + (dim_x if self.omega is None else 2 * dim_x)

    def __call__(self, x, v):
        if self.omega is None:
            return np.concatenate([x, v], axis=1)
        wx = self.omega * x
        return np.concatenate([np.sin(wx), np.cos(wx), v], axis=1)

    def velocity_slots(self, dim_x: int, dim_v: int) -> np.ndarray:
        offset = dim_x if self.omega is None else 2 * dim_x
        return offset + np.arange(dim_v)

    def position_tangents(self, x) -> np.ndarray:
        """``∂features/∂x_i`` for every particle, shape ``(N, dim_x, width - dim_v)``."""
        n, dx = x.shape
        if self.omega is None:
            return np.broadcast_to(np.eye(dx), (n, dx, dx))
        out = np.zeros((n, dx, 2 * dx))
        idx = np.arange(dx)
        out[:, idx, idx] = self.omega * np.cos(self.omega * x)
        out[:, idx, dx + idx] = -self.omega * np.sin(self.omega * x)
        return out


@dataclass(frozen=True)
class MlpArchitecture:
    """Layer widths ``m_0..m_L`` (input first) and the hidden activation."""

    widths: tuple[int, ...]
    activation: str = "tanh"
    alpha: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ValueError("need at least an input and an output width, all positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.activation == "none" and len(self.widths) != 2:
            raise ValueError("the affine variant has exactly one layer")

    @classmethod
    def build(cls, n_in: int, hidden, n_out: int, activation="tanh", alpha=0.01):
        hidden = tuple(hidden)
        if not hidden:
            activation = "none"
        return cls((n_in, *hidden, n_out), activation, alpha)

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def n_params(self) -> int:
        w = self.widths
        return sum(w[k] * w[k - 1] + w[k] for k in range(1, len(w)))

    def shapes(self):
        w = self.widths
        return [((w[k], w[k - 1]), (w[k],)) for k in range(1, len(w))]

    # activation and its first two derivatives
    def sigma(self, h):
        if self.activation == "tanh":
            return np.tanh(h)
        if self.activation == "leaky_relu":
            return np.where(h > 0, h, self.alpha * h)
        return h

    def activate(self, h):
        """``(σ(h), σ'(h), σ''(h) or None)``; may overwrite ``h``."""
        if self.activation == "tanh":
            a = np.tanh(h, out=h)
            d1 = 1.0 - a * a
            d2 = a * d1
            d2 *= -2.0
            return a, d1, d2
        if self.activation == "leaky_relu":
            d1 = (h > 0).astype(float)
            d1 *= 1.0 - self.alpha
            d1 += self.alpha
            return h * d1, d1, None
        return h, np.ones_like(h), None

    def sigma_derivs(self, h, a):
        """``(σ'(h), σ''(h))`` given ``a = σ(h)``."""
        if self.activation == "tanh":
            d1 = 1.0 - a * a
            return d1, -2.0 * a * d1
        if self.activation == "leaky_relu":
            return np.where(h > 0, 1.0, self.alpha), None
        return np.ones_like(h), None


@dataclass(frozen=True)
class MlpParams:
    arch: MlpArchitecture
    flat: np.ndarray = field(repr=False)

    def __post_init__(self):
        flat = np.array(self.flat, dtype=float).reshape(-1)
        if flat.size != self.arch.n_params:
            raise ValueError(f"expected {self.arch.n_params} parameters, got {flat.size}")
        flat.setflags(write=False)
        object.__setattr__(self, "flat", flat)

    def layers(self):
        out, i = [], 0
        for (wshape, bshape) in self.arch.shapes():
            nw = wshape[0] * wshape[1]
            W = self.flat[i:i + nw].reshape(wshape)
            b = self.flat[i + nw:i + nw + bshape[0]]
            out.append((W, b))
            i += nw + bshape[0]
        return out

    def with_flat(self, flat) -> "MlpParams":
        return MlpParams(self.arch, flat)


def init_params(arch: MlpArchitecture, seed: int, scheme: str = "uniform") -> MlpParams:
    """Fan-in scaled uniform weights in ``±sqrt(1/m_{k-1})``, zero biases.

    ``scheme="zeros"`` returns the all-zero network.
    """
    flat = np.zeros(arch.n_params)
    if scheme == "zeros":
        return MlpParams(arch, flat)
    if scheme != "uniform":
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.Generator(np.random.Philox(key=seed))
    i = 0
    for (wshape, bshape) in arch.shapes():
        nw = wshape[0] * wshape[1]
        bound = np.sqrt(1.0 / wshape[1])
        flat[i:i + nw] = rng.uniform(-bound, bound, size=nw)
        i += nw + bshape[0]
    return MlpParams(arch, flat)


# ---------------------------------------------------------------------------
# forward with tangents / reverse pass


def _mm(t, M):
    """``t @ M`` for a 3D tangent stack as one 2D product (batched matmul is slow)."""
    n, q, m = t.shape
    return (t.reshape(n * q, m) @ M).reshape(n, q, M.shape[1])


@dataclass
class _Trace:
    inputs: list          # a_{k-1} per layer
    tangents: list        # ȧ_{k-1} per layer, (N, q, m) or None
    d1: list              # σ'(h_k) per hidden layer
    d2: list              # σ''(h_k) per hidden layer (None when it vanishes a.e.)
    pre_tangents: list    # ḣ_k per hidden layer
    out: np.ndarray
    out_tangent: np.ndarray | None


def _forward(params: MlpParams, z0, t0=None) -> _Trace:
    arch = params.arch
    layers = params.layers()
    a, ta = z0, t0
    tr = _Trace([], [], [], [], [], None, None)
    for k, (W, b) in enumerate(layers):
        tr.inputs.append(a)
        tr.tangents.append(ta)
        h = a @ W.T
        h += b
        th = None if ta is None else _mm(ta, W.T)
        if k == len(layers) - 1:
            tr.out, tr.out_tangent = h, th
            break
        a, d1, d2 = arch.activate(h)
        tr.d1.append(d1)
        tr.d2.append(d2)
        tr.pre_tangents.append(th)
        if ta is not None:
            ta = th * d1[:, None, :]
    return tr


def _backward(params: MlpParams, tr: _Trace, g_out, g_tan=None) -> np.ndarray:
    """Parameter gradient given cotangents on the output and its tangents."""
    layers = params.layers()
    grads = []
    gh, gth = g_out, g_tan
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        a, ta = tr.inputs[k], tr.tangents[k]
        dW = gh.T @ a
        if gth is not None:
            dW += gth.reshape(-1, gth.shape[-1]).T @ ta.reshape(-1, ta.shape[-1])
        grads.append((dW, gh.sum(axis=0)))
        if k == 0:
            break
        gh = gh @ W
        d1, d2 = tr.d1[k - 1], tr.d2[k - 1]
        gh *= d1
        if gth is not None:
            gta = _mm(gth, W)
            if d2 is not None:
                # ȧ = σ'(h)·ḣ, so σ'' couples the tangent cotangent back into h
                gta_th = gta * tr.pre_tangents[k - 1]
                gh += d2 * (gta_th[:, 0] if gta_th.shape[1] == 1 else gta_th.sum(axis=1))
            gta *= d1[:, None, :]
            gth = gta
    grads.reverse()
    return np.concatenate([np.concatenate([dW.ravel(), db]) for dW, db in grads])


def _velocity_tangents(fm: FeatureMap, n, dim_x, dim_v):
    m0 = fm.width(dim_x, dim_v)
    t0 = np.zeros((n, dim_v, m0))
    t0[:, np.arange(dim_v), fm.velocity_slots(dim_x, dim_v)] = 1.0
    return t0


def _check_shapes(params, fm, x, v):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    if x.shape[0] != v.shape[0]:
        raise ValueError("x and v hold different numbers of particles")
    if fm.width(x.shape[1], v.shape[1]) != params.arch.widths[0]:
        raise ValueError(
            f"feature width {fm.width(x.shape[1], v.shape[1])} does not match input width {params.arch.widths[0]}")
    return x, v


def mlp_forward(params: MlpParams, fm: FeatureMap, x, v) -> np.ndarray:
    """``u_θ(x, v)`` for a batch, shape ``(N, m_L)``."""
    x, v = _check_shapes(params, fm, x, v)
    return _forward(params, fm(x, v)).out


def forward_with_divergence(params: MlpParams, fm: FeatureMap, x, v):
    """Return ``(u, ∇_v·u)``; requires the output width to equal ``dim_v``."""
    x, v = _check_shapes(params, fm, x, v)
    dv = v.shape[1]
    if params.arch.widths[-1] != dv:
        raise ValueError("divergence needs an output of width dim_v")
    tr = _forward(params, fm(x, v), _velocity_tangents(fm, x.shape[0], x.shape[1], dv))
    idx = np.arange(dv)
    return tr.out, tr.out_tangent[:, idx, idx].sum(axis=1)


def divergence_v(params: MlpParams, fm: FeatureMap, x, v) -> np.ndarray:
    """Exact ``∇_v · u_θ(x, v)`` per particle (forward mode, one tangent per v_i)."""
    return forward_with_divergence(params, fm, x, v)[1]


def input_jacobian(params: MlpParams, fm: FeatureMap, x, v) -> tuple[np.ndarray, np.ndarray]:
    """``(∂u/∂x, ∂u/∂v)`` with shapes ``(N, dim_x, m_L)`` and ``(N, dim_v, m_L)``."""
    x, v = _check_shapes(params, fm, x, v)
    n, dx = x.shape
    dv = v.shape[1]
    m0 = fm.width(dx, dv)
    t0 = np.zeros((n, dx + dv, m0))
    t0[:, :dx, :m0 - dv] = fm.position_tangents(x)
    t0[:, dx:, :] = _velocity_tangents(fm, n, dx, dv)
    tr = _forward(params, fm(x, v), t0)
    return tr.out_tangent[:, :dx], tr.out_tangent[:, dx:]


# closure(u, div, sl) -> (per-particle loss terms, dℓ/du, dℓ/ddiv or None)
LossClosure = Callable[[np.ndarray, np.ndarray, slice], tuple]

CHUNK = 512


def loss_gradient(params: MlpParams, fm: FeatureMap, x, v, closure: LossClosure,
                  constant: float = 0.0, chunk: int = CHUNK):
    """θ-gradient of ``mean_p ℓ_p(u_θ(z_p), ∇_v·u_θ(z_p)) + constant``.

    ``closure(u, div, sl)`` gets the outputs and divergences of the particles
    in ``sl`` and returns their loss terms ``ℓ_p`` with the partials of each
    term with respect to ``u_p`` and ``div_p``.  Particles are processed in
    fixed-size chunks (cache friendly) and accumulated in index order, so the
    result does not depend on threading.  Returns ``(loss, grad)``.
    """
    x, v = _check_shapes(params, fm, x, v)
    n, dx = x.shape
    dv = v.shape[1]
    need_div = params.arch.widths[-1] == dv
    z = fm(x, v)
    t_all = _velocity_tangents(fm, n, dx, dv) if need_div else None
    idx = np.arange(dv)
    total = 0.0
    grad = np.zeros(params.flat.size)
    for s in range(0, n, chunk):
        sl = slice(s, min(s + chunk, n))
        tr = _forward(params, z[sl], None if t_all is None else t_all[sl])
        div = tr.out_tangent[:, idx, idx].sum(axis=1) if need_div else None
        terms, g_u, g_div = closure(tr.out, div, sl)
        if not np.isfinite(terms).all():
            bad = s + first_nonfinite(np.asarray(terms)[:, None])
            raise NonFiniteError(f"non-finite loss term at particle {bad}", index=bad)
        total += float(np.sum(terms))
        g_tan = None
        if g_div is not None:
            g_tan = np.zeros_like(tr.out_tangent)
            g_tan[:, idx, idx] = np.asarray(g_div)[:, None]
        grad += _backward(params, tr, g_u, g_tan)
    grad /= n
    if not np.isfinite(grad).all():
        raise NonFiniteError("non-finite parameter gradient")
    return total / n + constant, grad


def mean_loss(closure: LossClosure, u, div, constant: float = 0.0) -> float:
    """Evaluate a per-particle closure on full batches."""
    return float(np.mean(closure(u, div, slice(None))[0]) + constant)


# ---------------------------------------------------------------------------
# Adam


@dataclass(frozen=True)
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    @classmethod
    def zeros(cls, n: int, learning_rate=1e-3, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, learning_rate, **kw)


def adam_step(state: AdamState, params: MlpParams, grad) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update; returns new objects, inputs untouched."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params.flat.shape:
        raise ValueError("gradient is not congruent to the parameters")
    if not np.isfinite(grad).all():
        raise NonFiniteError("non-finite gradient entries passed to Adam")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1 - state.beta1) * grad
    s = state.beta2 * state.second_moment + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1 ** t)
    s_hat = s / (1 - state.beta2 ** t)
    new = params.flat - state.learning_rate * m_hat / (np.sqrt(s_hat) + state.eps_hat)
    st = AdamState(m, s, t, state.learning_rate, state.beta1, state.beta2, state.eps_hat)
    return params.with_flat(new), st


# ---------------------------------------------------------------------------
# snapshots

_ACT_CODE = {"tanh": 0.0, "leaky_relu": 1.0, "none": 2.0}


def params_to_array(params: MlpParams, fm: FeatureMap) -> np.ndarray:
    """Flat snapshot: ``[L+1, widths..., activation, alpha, omega, W1, b1, ...]``.

    ``omega = 0`` tags the identity feature map.
    """
    a = params.arch
    header = [len(a.widths), *a.widths, _ACT_CODE[a.activation], a.alpha,
              0.0 if fm.omega is None else fm.omega]
    return np.concatenate([np.asarray(header, dtype=float), params.flat])


def params_from_array(arr) -> tuple[MlpParams, FeatureMap]:
    arr = np.asarray(arr, dtype=float)
    n = int(arr[0])
    widths = tuple(int(w) for w in arr[1:1 + n])
    code, alpha, omega = arr[1 + n:4 + n]
    act = {v: k for k, v in _ACT_CODE.items()}[float(code)]
    arch = MlpArchitecture(widths, act, float(alpha))
    fm = FeatureMap(None if omega == 0 else float(omega))
    return MlpParams(arch, arr[4 + n:]), fm

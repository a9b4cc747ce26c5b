"""1-D convolutional feature extractor with a gated recurrent aggregator.

Forward path, all float64:

    samples (L,)  --valid conv stack, ReLU-->  Z  (T, F_z)
    Z  --stacked GRU, h_0 = 0           -->  C  (T, H)

Per conv layer i with kernel k_i and stride s_i the frame count composes as
``T_i = (T_{i-1} - k_i) // s_i + 1`` (no padding), so the total stride is the
product of strides and ``C_t`` is a strictly causal function of ``Z_1..Z_t``.

GRU gate equations, per layer and time step (h_0 = 0):

    r_t = sigmoid(W_r x_t + U_r h_{t-1} + b_r)
    u_t = sigmoid(W_u x_t + U_u h_{t-1} + b_u)
    n_t = tanh(W_n x_t + U_n (r_t * h_{t-1}) + b_n)
    h_t = (1 - u_t) * n_t + u_t * h_{t-1}

``backward`` recomputes the forward pass and accumulates exact reverse-mode
gradients for every conv and recurrent tensor given upstream gradients on
(Z, C).  Gradients of the contrastive prediction heads and of the logits
layer are produced by the loss functions in :mod:`huclab.objective`, not
here; ``backward`` returns zeros in those slots so the result is shaped
like the parameters and can feed the optimizer directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import SignalSequence


class SignalTooShortError(ValueError):
    """Conv stack would yield zero output frames for this signal."""


@dataclass(frozen=True)
class EncoderArch:
    conv_layers: tuple[tuple[int, int, int], ...] = ((4, 4, 12), (3, 3, 16), (2, 2, 20))
    recurrent_layers: int = 2
    hidden_dim: int = 32
    activation: str = "relu"

    def __post_init__(self) -> None:
        if not self.conv_layers:
            raise ValueError("conv_layers must not be empty")
        object.__setattr__(self, "conv_layers", tuple(tuple(l) for l in self.conv_layers))
        for kernel, stride, channels in self.conv_layers:
            if kernel < 1 or stride < 1 or channels < 1:
                raise ValueError(f"conv layer entries must be >= 1, got {(kernel, stride, channels)}")
        if self.recurrent_layers < 1:
            raise ValueError("recurrent_layers must be >= 1")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def total_stride(self) -> int:
        r = 1
        for _, stride, _ in self.conv_layers:
            r *= stride
        return r

    @property
    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for kernel, stride, _ in self.conv_layers:
            rf += (kernel - 1) * jump
            jump *= stride
        return rf

    @property
    def feature_dim(self) -> int:
        return self.conv_layers[-1][2]

    def num_frames(self, num_samples: int) -> int:
        """Floor-composition of per-layer (len - kernel)//stride + 1."""
        length = num_samples
        for kernel, stride, _ in self.conv_layers:
            if length < kernel:
                return 0
            length = (length - kernel) // stride + 1
        return length


@dataclass
class ConvParams:
    w: np.ndarray  # (c_out, c_in, kernel)
    b: np.ndarray  # (c_out,)


@dataclass
class GruParams:
    w_r: np.ndarray
    u_r: np.ndarray
    b_r: np.ndarray
    w_u: np.ndarray
    u_u: np.ndarray
    b_u: np.ndarray
    w_n: np.ndarray
    u_n: np.ndarray
    b_n: np.ndarray


@dataclass
class EncoderParams:
    arch: EncoderArch
    conv: list[ConvParams]
    gru: list[GruParams]
    heads: list[np.ndarray]    # K matrices, each (F_z, H)
    logits_w: np.ndarray       # (num_classes, H)
    logits_b: np.ndarray       # (num_classes,)

    @property
    def future_steps(self) -> int:
        return len(self.heads)

    @property
    def num_classes(self) -> int:
        return int(self.logits_w.shape[0])


_GRU_FIELDS = ("w_r", "u_r", "b_r", "w_u", "u_u", "b_u", "w_n", "u_n", "b_n")


def param_arrays(params: EncoderParams) -> list[np.ndarray]:
    """All trainable tensors in declaration order (also the checkpoint order)."""
    arrays = []
    for layer in params.conv:
        arrays.extend([layer.w, layer.b])
    for layer in params.gru:
        arrays.extend(getattr(layer, name) for name in _GRU_FIELDS)
    arrays.extend(params.heads)
    arrays.extend([params.logits_w, params.logits_b])
    return arrays


def param_names(params: EncoderParams) -> list[str]:
    names = []
    for i in range(len(params.conv)):
        names.extend([f"conv{i}.w", f"conv{i}.b"])
    for i in range(len(params.gru)):
        names.extend(f"gru{i}.{f}" for f in _GRU_FIELDS)
    names.extend(f"head{k}" for k in range(len(params.heads)))
    names.extend(["logits.w", "logits.b"])
    return names


def replace_arrays(template: EncoderParams, arrays: list[np.ndarray]) -> EncoderParams:
    """Rebuild an EncoderParams with the same structure from a flat array list."""
    it = iter(arrays)
    conv = [ConvParams(w=next(it), b=next(it)) for _ in template.conv]
    gru = [GruParams(**{name: next(it) for name in _GRU_FIELDS}) for _ in template.gru]
    heads = [next(it) for _ in template.heads]
    logits_w = next(it)
    logits_b = next(it)
    return EncoderParams(
        arch=template.arch, conv=conv, gru=gru, heads=heads, logits_w=logits_w, logits_b=logits_b
    )


def zeros_like_params(params: EncoderParams) -> EncoderParams:
    return replace_arrays(params, [np.zeros_like(a) for a in param_arrays(params)])


def init_params(
    arch: EncoderArch, seed: int, *, future_steps: int, num_classes: int
) -> EncoderParams:
    """Seeded scaled-uniform initialization.

    Weights are U(-a, a) with a = 1/sqrt(fan_in); fan_in is c_in*kernel for
    conv weights, the input dim for GRU/logits input weights, and the hidden
    dim for GRU recurrent weights and the prediction heads.  All biases are
    zero.  Draw order: conv layers, GRU layers (r, u, n gates, input weight
    then recurrent weight), heads 1..K, logits.
    """
    if future_steps < 1:
        raise ValueError("future_steps must be >= 1")
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    rng = np.random.default_rng(seed)

    def uniform(shape: tuple[int, ...], fan_in: int) -> np.ndarray:
        a = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-a, a, size=shape)

    conv = []
    c_in = 1
    for kernel, _, c_out in arch.conv_layers:
        conv.append(ConvParams(w=uniform((c_out, c_in, kernel), c_in * kernel), b=np.zeros(c_out)))
        c_in = c_out

    h = arch.hidden_dim
    gru = []
    in_dim = arch.feature_dim
    for _ in range(arch.recurrent_layers):
        kwargs = {}
        for gate in ("r", "u", "n"):
            kwargs[f"w_{gate}"] = uniform((h, in_dim), in_dim)
            kwargs[f"u_{gate}"] = uniform((h, h), h)
            kwargs[f"b_{gate}"] = np.zeros(h)
        gru.append(GruParams(**kwargs))
        in_dim = h

    heads = [uniform((arch.feature_dim, h), h) for _ in range(future_steps)]
    logits_w = uniform((num_classes, h), h)
    logits_b = np.zeros(num_classes)
    return EncoderParams(arch=arch, conv=conv, gru=gru, heads=heads, logits_w=logits_w, logits_b=logits_b)


def num_params(params: EncoderParams) -> int:
    return sum(a.size for a in param_arrays(params))


# --- forward ----------------------------------------------------------------


def _as_samples(signal) -> np.ndarray:
    samples = signal.samples if isinstance(signal, SignalSequence) else signal
    return np.asarray(samples, dtype=np.float64)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -500.0, 500.0)))


@dataclass
class _ConvCache:
    x: np.ndarray        # layer input (c_in, L_in)
    pre: np.ndarray      # pre-activation (c_out, L_out)
    windows: np.ndarray  # (c_in, L_out, kernel) view of x


@dataclass
class _GruCache:
    x: np.ndarray   # (T, in_dim)
    h: np.ndarray   # (T + 1, H), h[0] = 0
    r: np.ndarray   # (T, H)
    u: np.ndarray   # (T, H)
    n: np.ndarray   # (T, H)


def _conv_forward(params: EncoderParams, samples: np.ndarray) -> tuple[np.ndarray, list[_ConvCache]]:
    x = samples[np.newaxis, :]  # (1, L)
    caches = []
    for (kernel, stride, _), layer in zip(params.arch.conv_layers, params.conv):
        if x.shape[1] < kernel:
            raise SignalTooShortError(
                f"signal too short: {len(samples)} samples yield zero frames "
                f"(receptive field {params.arch.receptive_field})"
            )
        windows = np.lib.stride_tricks.sliding_window_view(x, kernel, axis=1)[:, ::stride, :]
        pre = np.einsum("oik,itk->ot", layer.w, windows) + layer.b[:, np.newaxis]
        caches.append(_ConvCache(x=x, pre=pre, windows=windows))
        x = np.maximum(pre, 0.0)
    return x.T.copy(), caches  # Z: (T, F_z)


def _gru_forward(params: EncoderParams, z: np.ndarray) -> tuple[np.ndarray, list[_GruCache]]:
    x = z
    caches = []
    hdim = params.arch.hidden_dim
    for layer in params.gru:
        t_steps = x.shape[0]
        # input projections are time-independent; batch them up front
        xr = x @ layer.w_r.T + layer.b_r
        xu = x @ layer.w_u.T + layer.b_u
        xn = x @ layer.w_n.T + layer.b_n
        h = np.zeros((t_steps + 1, hdim))
        r = np.empty((t_steps, hdim))
        u = np.empty((t_steps, hdim))
        n = np.empty((t_steps, hdim))
        for t in range(t_steps):
            h_prev = h[t]
            r[t] = _sigmoid(xr[t] + layer.u_r @ h_prev)
            u[t] = _sigmoid(xu[t] + layer.u_u @ h_prev)
            n[t] = np.tanh(xn[t] + layer.u_n @ (r[t] * h_prev))
            h[t + 1] = (1.0 - u[t]) * n[t] + u[t] * h_prev
        caches.append(_GruCache(x=x, h=h, r=r, u=u, n=n))
        x = h[1:]
    return x.copy(), caches  # C: (T, H)


def encode(params: EncoderParams, signal) -> tuple[np.ndarray, np.ndarray]:
    """Run the full forward pass; returns (Z, C) with one row per frame."""
    samples = _as_samples(signal)
    z, _ = _conv_forward(params, samples)
    c, _ = _gru_forward(params, z)
    return z, c


# --- backward ---------------------------------------------------------------


def _conv_backward(
    params: EncoderParams, caches: list[_ConvCache], d_out: np.ndarray
) -> tuple[list[ConvParams], np.ndarray]:
    grads: list[ConvParams] = []
    for (kernel, stride, _), layer, cache in zip(
        reversed(params.arch.conv_layers), reversed(params.conv), reversed(caches)
    ):
        d_pre = d_out * (cache.pre > 0)
        d_w = np.einsum("ot,itk->oik", d_pre, cache.windows)
        d_b = d_pre.sum(axis=1)
        d_win = np.einsum("oik,ot->itk", layer.w, d_pre)
        d_x = np.zeros_like(cache.x)
        l_out = d_pre.shape[1]
        for j in range(kernel):
            d_x[:, j : j + stride * l_out : stride] += d_win[:, :, j]
        grads.append(ConvParams(w=d_w, b=d_b))
        d_out = d_x
    grads.reverse()
    return grads, d_out


def _gru_layer_backward(
    layer: GruParams, cache: _GruCache, d_h_seq: np.ndarray
) -> tuple[GruParams, np.ndarray]:
    t_steps, _ = cache.x.shape
    hdim = cache.h.shape[1]
    # time loop carries only the recurrent chain; per-gate pre-activation
    # gradients are collected and turned into parameter grads in one matmul
    drp = np.empty((t_steps, hdim))
    dup = np.empty((t_steps, hdim))
    dnp = np.empty((t_steps, hdim))
    d_h = np.zeros(hdim)
    for t in range(t_steps - 1, -1, -1):
        d_h = d_h + d_h_seq[t]
        h_prev, r, u, n = cache.h[t], cache.r[t], cache.u[t], cache.n[t]
        d_n_pre = d_h * (1.0 - u) * (1.0 - n * n)
        d_u_pre = d_h * (h_prev - n) * u * (1.0 - u)
        d_rh = layer.u_n.T @ d_n_pre
        d_r_pre = d_rh * h_prev * r * (1.0 - r)
        drp[t] = d_r_pre
        dup[t] = d_u_pre
        dnp[t] = d_n_pre
        d_h = (
            d_h * u
            + d_rh * r
            + layer.u_u.T @ d_u_pre
            + layer.u_r.T @ d_r_pre
        )
    h_prev_all = cache.h[:-1]
    rh_all = cache.r * h_prev_all
    g = GruParams(
        w_r=drp.T @ cache.x,
        u_r=drp.T @ h_prev_all,
        b_r=drp.sum(axis=0),
        w_u=dup.T @ cache.x,
        u_u=dup.T @ h_prev_all,
        b_u=dup.sum(axis=0),
        w_n=dnp.T @ cache.x,
        u_n=dnp.T @ rh_all,
        b_n=dnp.sum(axis=0),
    )
    d_x = drp @ layer.w_r + dup @ layer.w_u + dnp @ layer.w_n
    return g, d_x


def forward_with_cache(params: EncoderParams, signal):
    """(Z, C, caches) — lets a caller run backward without a second forward."""
    samples = _as_samples(signal)
    z, conv_caches = _conv_forward(params, samples)
    c, gru_caches = _gru_forward(params, z)
    return z, c, (conv_caches, gru_caches)


def backward_from_cache(
    params: EncoderParams, z: np.ndarray, caches, upstream_grad
) -> EncoderParams:
    conv_caches, gru_caches = caches
    d_z_ext, d_c = upstream_grad
    d_z_ext = np.asarray(d_z_ext, dtype=np.float64)
    d_c = np.asarray(d_c, dtype=np.float64)
    if d_z_ext.shape != z.shape or d_c.shape != (z.shape[0], params.arch.hidden_dim):
        raise ValueError(
            f"upstream gradient shapes {d_z_ext.shape}, {d_c.shape} do not match "
            f"encoder outputs {z.shape}, {(z.shape[0], params.arch.hidden_dim)}"
        )

    gru_grads: list[GruParams] = []
    d_top = d_c
    for layer, cache in zip(reversed(params.gru), reversed(gru_caches)):
        g, d_top = _gru_layer_backward(layer, cache, d_top)
        gru_grads.append(g)
    gru_grads.reverse()

    conv_grads, _ = _conv_backward(params, conv_caches, (d_z_ext + d_top).T)

    return EncoderParams(
        arch=params.arch,
        conv=conv_grads,
        gru=gru_grads,
        heads=[np.zeros_like(w) for w in params.heads],
        logits_w=np.zeros_like(params.logits_w),
        logits_b=np.zeros_like(params.logits_b),
    )


def backward(
    params: EncoderParams, signal, upstream_grad: tuple[np.ndarray, np.ndarray]
) -> EncoderParams:
    """Exact gradients of sum(dZ*Z) + sum(dC*C) w.r.t. conv and GRU tensors.

    ``upstream_grad`` is (dZ, dC) matching the shapes returned by ``encode``.
    Head and logits slots of the returned structure are zero.
    """
    z, _, caches = forward_with_cache(params, signal)
    return backward_from_cache(params, z, caches, upstream_grad)

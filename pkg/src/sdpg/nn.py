"""Small numpy function approximators with hand-written reverse-mode gradients.

Parameters always live in one flat float64 vector; the spec objects know how
to slice that vector into per-layer weights. Everything here is a pure
function of (params, inputs), so callers can hold as many parameter copies
as they like (actor, critic, target critic) against the same spec.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation

ACTIVATIONS = ("elu", "tanh", "identity")
LAYER_NORM_EPS = 1e-5


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "elu":
        return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name: str, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    # derivative expressed through pre-activation z and output h
    if name == "elu":
        return np.where(z > 0, 1.0, h + 1.0)
    if name == "tanh":
        return 1.0 - h * h
    return np.ones_like(z)


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MlpSpec:
    """Fully connected network; ``activation`` is applied to hidden layers only."""

    input_dim: int
    hidden_widths: tuple[int, ...]
    output_dim: int
    activation: str = "elu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        widths = (self.input_dim, *self.hidden_widths, self.output_dim)
        if any(int(w) <= 0 for w in widths):
            raise ContractViolation(f"all MLP widths must be positive, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ContractViolation(f"unknown activation {self.activation!r}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_widths, self.output_dim)

    @property
    def num_params(self) -> int:
        w = self.widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))

    def layers(self, params: np.ndarray):
        """Yield ``(W, b)`` views into ``params`` for every layer."""
        if params.shape != (self.num_params,):
            raise ContractViolation(
                f"parameter vector has shape {params.shape}, expected ({self.num_params},)"
            )
        w = self.widths
        offset = 0
        for i in range(len(w) - 1):
            n_in, n_out = w[i], w[i + 1]
            W = params[offset : offset + n_in * n_out].reshape(n_in, n_out)
            offset += n_in * n_out
            b = params[offset : offset + n_out]
            offset += n_out
            yield W, b

    def to_dict(self) -> dict:
        return {
            "kind": "mlp",
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "output_dim": self.output_dim,
            "activation": self.activation,
        }


def init_mlp(spec: MlpSpec, rng: np.random.Generator, final_scale: float = 1.0) -> np.ndarray:
    """Gaussian init with std 1/sqrt(fan_in); biases start at zero.

    ``final_scale`` shrinks the output layer (0.01 for the actor, so initial
    mean actions sit near zero where tanh is linear).
    """
    params = np.zeros(spec.num_params)
    layers = list(spec.layers(params))
    for i, (W, _) in enumerate(layers):
        scale = 1.0 / np.sqrt(W.shape[0])
        if i == len(layers) - 1:
            scale *= final_scale
        W[...] = rng.normal(0.0, scale, size=W.shape)
    return params


def _check_batch(x: np.ndarray, width: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != width:
        raise ContractViolation(f"{what} must have shape (batch, {width}), got {x.shape}")
    return x


def _mlp_forward_cached(params, spec: MlpSpec, x):
    x = _check_batch(x, spec.input_dim, "MLP input")
    layers = list(spec.layers(params))
    h = x
    cache = []
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        name = spec.activation if i < len(layers) - 1 else "identity"
        out = _act(name, z)
        cache.append((h, z, out, name))
        h = out
    return h, cache


def _mlp_backward_cached(params, spec: MlpSpec, cache, upstream):
    upstream = _check_batch(upstream, spec.output_dim, "upstream gradient")
    if upstream.shape[0] != cache[0][0].shape[0]:
        raise ContractViolation("upstream gradient batch size differs from input batch size")
    grad = np.zeros(spec.num_params)
    grad_layers = list(spec.layers(grad))
    layers = list(spec.layers(params))
    g = upstream
    for i in range(len(layers) - 1, -1, -1):
        h_in, z, out, name = cache[i]
        gz = g * _act_grad(name, z, out)
        gW, gb = grad_layers[i]
        gW[...] = h_in.T @ gz
        gb[...] = gz.sum(axis=0)
        g = gz @ layers[i][0].T
    return grad, g


def mlp_forward(params: np.ndarray, spec: MlpSpec, inputs: np.ndarray) -> np.ndarray:
    """Evaluate the MLP on a ``(batch, input_dim)`` array."""
    return _mlp_forward_cached(params, spec, inputs)[0]


def mlp_backward(params, spec: MlpSpec, inputs, upstream_grad):
    """Reverse-mode gradient of ``sum(upstream_grad * mlp_forward(...))``.

    Returns ``(param_grad, input_grad)``.
    """
    _, cache = _mlp_forward_cached(params, spec, inputs)
    return _mlp_backward_cached(params, spec, cache, upstream_grad)


# ---------------------------------------------------------------------------
# Convolutional encoder
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    """Valid (unpadded) strided convolutions, flatten, then a linear projection.

    ``layers`` holds ``(out_channels, kernel, stride)`` triples. Hidden conv
    layers use ``activation``; the projected features are optionally
    layer-normalised (zero mean, unit variance across features, no learned
    gain) and then go through ``feature_activation``.
    """

    input_shape: tuple[int, int, int]
    layers: tuple[tuple[int, int, int], ...] = ((8, 3, 2), (16, 3, 2))
    feature_dim: int = 32
    activation: str = "elu"
    feature_activation: str = "tanh"
    feature_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(tuple(int(v) for v in l) for l in self.layers))
        if self.feature_dim <= 0:
            raise ContractViolation("feature_dim must be positive")
        if self.activation not in ACTIVATIONS or self.feature_activation not in ACTIVATIONS:
            raise ContractViolation("unknown activation")
        self.shapes()  # validates spatial sizes

    def shapes(self) -> list[tuple[int, int, int]]:
        """Activation shapes, input first."""
        c, h, w = self.input_shape
        out = [(c, h, w)]
        for oc, k, s in self.layers:
            if k <= 0 or s <= 0 or oc <= 0:
                raise ContractViolation(f"bad conv layer {(oc, k, s)}")
            h = (h - k) // s + 1
            w = (w - k) // s + 1
            if h < 1 or w < 1:
                raise ContractViolation(f"conv stack shrinks {self.input_shape} below 1x1")
            c = oc
            out.append((c, h, w))
        return out

    @property
    def input_dim(self) -> int:
        c, h, w = self.input_shape
        return c * h * w

    @property
    def flat_dim(self) -> int:
        c, h, w = self.shapes()[-1]
        return c * h * w

    @property
    def output_dim(self) -> int:
        return self.feature_dim

    @property
    def num_params(self) -> int:
        n = 0
        shapes = self.shapes()
        for (oc, k, _), (ic, _, _) in zip(self.layers, shapes[:-1]):
            n += oc * ic * k * k + oc
        return n + self.flat_dim * self.feature_dim + self.feature_dim

    def unpack(self, params: np.ndarray):
        """Return ``([(kernel, bias), ...], (W_proj, b_proj))`` views."""
        if params.shape != (self.num_params,):
            raise ContractViolation(
                f"parameter vector has shape {params.shape}, expected ({self.num_params},)"
            )
        shapes = self.shapes()
        convs = []
        offset = 0
        for (oc, k, _), (ic, _, _) in zip(self.layers, shapes[:-1]):
            n = oc * ic * k * k
            K = params[offset : offset + n].reshape(oc, ic, k, k)
            offset += n
            b = params[offset : offset + oc]
            offset += oc
            convs.append((K, b))
        n = self.flat_dim * self.feature_dim
        W = params[offset : offset + n].reshape(self.flat_dim, self.feature_dim)
        offset += n
        b = params[offset : offset + self.feature_dim]
        return convs, (W, b)

    def to_dict(self) -> dict:
        return {
            "kind": "conv",
            "input_shape": list(self.input_shape),
            "layers": [list(l) for l in self.layers],
            "feature_dim": self.feature_dim,
            "activation": self.activation,
            "feature_activation": self.feature_activation,
            "feature_norm": self.feature_norm,
        }


def init_conv(spec: ConvSpec, rng: np.random.Generator) -> np.ndarray:
    params = np.zeros(spec.num_params)
    convs, (W, _) = spec.unpack(params)
    for K, _ in convs:
        fan_in = K.shape[1] * K.shape[2] * K.shape[3]
        K[...] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=K.shape)
    W[...] = rng.normal(0.0, 1.0 / np.sqrt(W.shape[0]), size=W.shape)
    return params


def _patches(x: np.ndarray, k: int, s: int) -> np.ndarray:
    # (B, C, H, W) -> (B, Ho, Wo, C*k*k)
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    B, C, Ho, Wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B, Ho, Wo, C * k * k)


def _images(spec: ConvSpec, images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    c, h, w = spec.input_shape
    if x.ndim == 2 and x.shape[1] == spec.input_dim:
        x = x.reshape(-1, c, h, w)
    if x.ndim != 4 or x.shape[1:] != (c, h, w):
        raise ContractViolation(f"images must have shape (batch, {c}, {h}, {w}), got {x.shape}")
    return x


def _conv_forward_cached(params, spec: ConvSpec, images):
    x = _images(spec, images)
    convs, (W, b) = spec.unpack(params)
    cache = []
    h = x
    for (K, kb), (oc, k, s) in zip(convs, spec.layers):
        P = _patches(h, k, s)
        z = P @ K.reshape(oc, -1).T + kb  # (B, Ho, Wo, oc)
        out = _act(spec.activation, z)
        cache.append((h.shape, P, z, out))
        h = out.transpose(0, 3, 1, 2)
    flat = h.reshape(h.shape[0], -1)
    z = flat @ W + b
    if spec.feature_norm:
        scale = np.sqrt(z.var(axis=1, keepdims=True) + LAYER_NORM_EPS)
        zn = (z - z.mean(axis=1, keepdims=True)) / scale
    else:
        scale, zn = None, z
    feats = _act(spec.feature_activation, zn)
    cache.append((flat, zn, scale, feats))
    return feats, cache


def _conv_backward_cached(params, spec: ConvSpec, cache, upstream):
    upstream = _check_batch(upstream, spec.feature_dim, "upstream gradient")
    convs, (W, _) = spec.unpack(params)
    grad = np.zeros(spec.num_params)
    gconvs, (gW, gb) = spec.unpack(grad)

    flat, zn, scale, feats = cache[-1]
    if upstream.shape[0] != flat.shape[0]:
        raise ContractViolation("upstream gradient batch size differs from input batch size")
    gz = upstream * _act_grad(spec.feature_activation, zn, feats)
    if scale is not None:
        gz = (gz - gz.mean(axis=1, keepdims=True) - zn * (gz * zn).mean(axis=1, keepdims=True)) / scale
    gW[...] = flat.T @ gz
    gb[...] = gz.sum(axis=0)
    g = (gz @ W.T).reshape(flat.shape[0], *spec.shapes()[-1])  # (B, C, H, W)

    for i in range(len(spec.layers) - 1, -1, -1):
        oc, k, s = spec.layers[i]
        in_shape, P, zc, out = cache[i]
        K = convs[i][0]
        gzc = g.transpose(0, 2, 3, 1) * _act_grad(spec.activation, zc, out)  # (B, Ho, Wo, oc)
        gK, gkb = gconvs[i]
        gK[...] = (gzc.reshape(-1, oc).T @ P.reshape(-1, P.shape[-1])).reshape(K.shape)
        gkb[...] = gzc.sum(axis=(0, 1, 2))
        gP = (gzc @ K.reshape(oc, -1)).reshape(*gzc.shape[:3], K.shape[1], k, k)
        B, Ho, Wo = gzc.shape[:3]
        gx = np.zeros(in_shape)
        for ki in range(k):
            for kj in range(k):
                gx[:, :, ki : ki + s * (Ho - 1) + 1 : s, kj : kj + s * (Wo - 1) + 1 : s] += (
                    gP[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
                )
        g = gx
    return grad, g


def conv_forward(params: np.ndarray, spec: ConvSpec, images) -> np.ndarray:
    """Encode ``(batch, C, H, W)`` images (or their flattened rows) into features."""
    return _conv_forward_cached(params, spec, images)[0]


def conv_backward(params, spec: ConvSpec, images, upstream_grad):
    """Returns ``(param_grad, image_grad)``; image_grad has shape ``(batch, C, H, W)``."""
    _, cache = _conv_forward_cached(params, spec, images)
    return _conv_backward_cached(params, spec, cache, upstream_grad)


# ---------------------------------------------------------------------------
# Network objects used by the trainer
# ---------------------------------------------------------------------------


class Mlp:
    """Thin object wrapper so the trainer can treat every approximator alike."""

    def __init__(self, spec: MlpSpec, final_scale: float = 1.0):
        self.spec = spec
        self.final_scale = final_scale
        self.input_dim = spec.input_dim
        self.output_dim = spec.output_dim
        self.num_params = spec.num_params

    def init(self, rng):
        return init_mlp(self.spec, rng, self.final_scale)

    def forward(self, params, x):
        return _mlp_forward_cached(params, self.spec, x)

    def backward(self, params, cache, upstream):
        return _mlp_backward_cached(params, self.spec, cache, upstream)

    def __call__(self, params, x):
        return self.forward(params, x)[0]

    def to_dict(self):
        return {"kind": "mlp_net", "spec": self.spec.to_dict(), "final_scale": self.final_scale}


@dataclass
class EncoderMlp:
    """Image encoder feeding an MLP head.

    Inputs are flat rows: the first ``conv.input_dim`` entries are the image
    stack, anything after that is a proprioceptive vector concatenated onto
    the conv features before the head.
    """

    conv: ConvSpec
    head: MlpSpec
    final_scale: float = 1.0
    proprio_dim: int = field(init=False)

    def __post_init__(self):
        self.proprio_dim = self.head.input_dim - self.conv.feature_dim
        if self.proprio_dim < 0:
            raise ContractViolation("head input narrower than conv features")

    @property
    def input_dim(self) -> int:
        return self.conv.input_dim + self.proprio_dim

    @property
    def output_dim(self) -> int:
        return self.head.output_dim

    @property
    def num_params(self) -> int:
        return self.conv.num_params + self.head.num_params

    def _split(self, params):
        n = self.conv.num_params
        return params[:n], params[n:]

    def init(self, rng):
        pc = init_conv(self.conv, rng)
        ph = init_mlp(self.head, rng, self.final_scale)
        return np.concatenate([pc, ph])

    def forward(self, params, x):
        x = _check_batch(x, self.input_dim, "encoder input")
        pc, ph = self._split(params)
        img, prop = x[:, : self.conv.input_dim], x[:, self.conv.input_dim :]
        feats, ccache = _conv_forward_cached(pc, self.conv, img)
        y, hcache = _mlp_forward_cached(ph, self.head, np.concatenate([feats, prop], axis=1))
        return y, (ccache, hcache, prop.shape)

    def backward(self, params, cache, upstream):
        ccache, hcache, prop_shape = cache
        pc, ph = self._split(params)
        gh, gin = _mlp_backward_cached(ph, self.head, hcache, upstream)
        gc, gimg = _conv_backward_cached(pc, self.conv, ccache, gin[:, : self.conv.feature_dim])
        gx = np.concatenate([gimg.reshape(gimg.shape[0], -1), gin[:, self.conv.feature_dim :]], axis=1)
        return np.concatenate([gc, gh]), gx

    def __call__(self, params, x):
        return self.forward(params, x)[0]

    def to_dict(self):
        return {
            "kind": "encoder_mlp",
            "conv": self.conv.to_dict(),
            "head": self.head.to_dict(),
            "final_scale": self.final_scale,
        }


def network_from_dict(d: dict):
    """Rebuild a network object from its ``to_dict`` description."""
    if d["kind"] == "mlp_net":
        s = d["spec"]
        spec = MlpSpec(s["input_dim"], tuple(s["hidden_widths"]), s["output_dim"], s["activation"])
        return Mlp(spec, d.get("final_scale", 1.0))
    if d["kind"] == "encoder_mlp":
        c, h = d["conv"], d["head"]
        conv = ConvSpec(
            tuple(c["input_shape"]),
            tuple(tuple(l) for l in c["layers"]),
            c["feature_dim"],
            c["activation"],
            c["feature_activation"],
            c.get("feature_norm", False),
        )
        head = MlpSpec(h["input_dim"], tuple(h["hidden_widths"]), h["output_dim"], h["activation"])
        return EncoderMlp(conv, head, d.get("final_scale", 1.0))
    raise ContractViolation(f"unknown network kind {d['kind']!r}")

"""Windowed feedforward encoder with factored softmax heads.

The heads realize the factored posteriors::

    left    p(phi_l | x)                    from the encoder output
    center  p(sigma_c | [phi_l,] x)          + left-context embedding (di, tri)
    right   p(phi_r | [phi_l, sigma_c,] x)   + left and center-state embeddings (tri)

With ``simplified_heads`` every head sees the encoder output only; that is
the variant used for full-sum training and for the monophone model.

Parameters live in a plain ``dict[str, np.ndarray]`` (float64) so that the
optimizer, checkpointing and finite-difference checks can treat them
uniformly. Gradients are computed by hand.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError
from .inventory import PhonemeInventory

ORDERS = ("mono", "di", "tri")
LEFT_EMBED_DIM = 10
CENTER_EMBED_DIM = 30


@dataclass
class EncoderConfig:
    input_dim: int
    context_window: int = 4
    hidden: tuple = (256, 256)
    nonlinearity: str = "relu"
    dropout: float = 0.1

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.input_dim < 1 or self.context_window < 0:
            raise DataError("input_dim must be >= 1 and context_window >= 0")
        if any(h < 1 for h in self.hidden):
            raise DataError("hidden widths must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise DataError("dropout must be in [0, 1)")
        if self.nonlinearity not in _ACTIVATIONS:
            raise DataError(f"unknown nonlinearity {self.nonlinearity!r}")

    @property
    def window_dim(self) -> int:
        return (2 * self.context_window + 1) * self.input_dim

    @property
    def output_dim(self) -> int:
        return self.hidden[-1] if self.hidden else self.window_dim


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z):
    return (z > 0).astype(z.dtype)


def _tanh_grad(z):
    return 1.0 - np.tanh(z) ** 2


_ACTIVATIONS = {
    "relu": (_relu, _relu_grad),
    "tanh": (np.tanh, _tanh_grad),
}


def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class PosteriorBatch:
    """Per-frame head log-posteriors; ``p_*`` are the probabilities."""

    logp_left: np.ndarray
    logp_center: np.ndarray
    logp_right: np.ndarray

    @property
    def p_left(self):
        return np.exp(self.logp_left)

    @property
    def p_center(self):
        return np.exp(self.logp_center)

    @property
    def p_right(self):
        return np.exp(self.logp_right)

    @property
    def num_frames(self):
        return self.logp_left.shape[0]

    def head(self, name):
        return getattr(self, "logp_" + name)


HEADS = ("left", "center", "right")


@dataclass
class FactoredModel:
    inventory: PhonemeInventory
    encoder: EncoderConfig
    context_order: str = "mono"
    simplified_heads: bool = False
    params: dict = field(default_factory=dict)
    feat_mean: np.ndarray | None = None
    feat_std: np.ndarray | None = None

    def __post_init__(self):
        if self.context_order not in ORDERS:
            raise DataError(f"unknown context order {self.context_order!r}")

    @property
    def num_left(self):
        return self.inventory.num_contexts

    @property
    def num_center(self):
        return self.inventory.num_center_states

    @property
    def center_uses_left(self) -> bool:
        return not self.simplified_heads and self.context_order in ("di", "tri")

    @property
    def right_uses_context(self) -> bool:
        return not self.simplified_heads and self.context_order == "tri"

    @property
    def needs_context(self) -> bool:
        return self.center_uses_left

    def param_names(self) -> list[str]:
        names = []
        for i in range(len(self.encoder.hidden)):
            names += [f"enc_W{i}", f"enc_b{i}"]
        names += ["left_W", "left_b", "center_W", "center_b", "right_W", "right_b"]
        if self.center_uses_left or self.right_uses_context:
            names += ["emb_left"]
        if self.center_uses_left:
            names += ["center_We"]
        if self.right_uses_context:
            names += ["emb_center", "right_Wl", "right_Wc"]
        return names

    def param_shapes(self) -> dict:
        shapes = {}
        d_in = self.encoder.window_dim
        for i, h in enumerate(self.encoder.hidden):
            shapes[f"enc_W{i}"] = (d_in, h)
            shapes[f"enc_b{i}"] = (h,)
            d_in = h
        H, L, C = self.encoder.output_dim, self.num_left, self.num_center
        shapes.update({
            "left_W": (H, L), "left_b": (L,),
            "center_W": (H, C), "center_b": (C,),
            "right_W": (H, L), "right_b": (L,),
            "emb_left": (L, LEFT_EMBED_DIM),
            "center_We": (LEFT_EMBED_DIM, C),
            "emb_center": (C, CENTER_EMBED_DIM),
            "right_Wl": (LEFT_EMBED_DIM, L),
            "right_Wc": (CENTER_EMBED_DIM, L),
        })
        return {n: shapes[n] for n in self.param_names()}

    def config_dict(self) -> dict:
        enc = asdict(self.encoder)
        enc["hidden"] = list(enc["hidden"])
        return {"encoder": enc, "context_order": self.context_order,
                "simplified_heads": self.simplified_heads}

    def copy(self) -> "FactoredModel":
        return FactoredModel(
            self.inventory, EncoderConfig(**asdict(self.encoder)), self.context_order,
            self.simplified_heads, {k: v.copy() for k, v in self.params.items()},
            None if self.feat_mean is None else self.feat_mean.copy(),
            None if self.feat_std is None else self.feat_std.copy(),
        )


def _glorot(rng, shape):
    fan_in, fan_out = (shape[0], shape[1]) if len(shape) == 2 else (shape[0], shape[0])
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_param(rng, name, shape):
    if name.endswith("_b") or name.startswith("enc_b"):
        return np.zeros(shape)
    return _glorot(rng, shape)


def init_model(inv: PhonemeInventory, encoder: EncoderConfig, context_order="mono",
               simplified_heads=False, seed=0) -> FactoredModel:
    model = FactoredModel(inv, encoder, context_order, simplified_heads)
    rng = np.random.default_rng(seed)
    model.params = {n: init_param(rng, n, s) for n, s in model.param_shapes().items()}
    return model


def set_feature_normalization(model: FactoredModel, features_list) -> None:
    stacked = np.concatenate([np.asarray(f, dtype=np.float64) for f in features_list])
    model.feat_mean = stacked.mean(axis=0)
    model.feat_std = np.maximum(stacked.std(axis=0), 1e-5)


def window_features(model: FactoredModel, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.encoder.input_dim:
        raise DataError(f"expected features of shape (T, {model.encoder.input_dim}), got {x.shape}")
    if model.feat_mean is not None:
        x = (x - model.feat_mean) / model.feat_std
    w = model.encoder.context_window
    if w == 0:
        return x
    padded = np.pad(x, ((w, w), (0, 0)), mode="edge")
    win = sliding_window_view(padded, 2 * w + 1, axis=0)  # (T, D, 2w+1)
    return win.transpose(0, 2, 1).reshape(x.shape[0], -1)


def encode(model: FactoredModel, features, train=False, rng=None):
    """Run the encoder; returns (output, cache)."""
    act, act_grad = _ACTIVATIONS[model.encoder.nonlinearity]
    a = window_features(model, features)
    cache = {"x": a, "layers": []}
    p_drop = model.encoder.dropout if train else 0.0
    for i in range(len(model.encoder.hidden)):
        z = a @ model.params[f"enc_W{i}"] + model.params[f"enc_b{i}"]
        h = act(z)
        mask = None
        if p_drop > 0.0:
            mask = (rng.random(h.shape) >= p_drop) / (1.0 - p_drop)
            h = h * mask
        cache["layers"].append((a, z, h, mask))
        a = h
    return a, cache


def _check_context(model, T, left, center):
    if model.center_uses_left and left is None:
        raise DataError(f"{model.context_order} model requires left-context inputs")
    if model.right_uses_context and center is None:
        raise DataError("triphone model requires center-state context inputs")
    out = []
    for arr, n in ((left, model.num_left), (center, model.num_center)):
        if arr is None:
            out.append(None)
            continue
        arr = np.broadcast_to(np.asarray(arr, dtype=np.int64), (T,))
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            raise DataError("context label out of range")
        out.append(arr)
    return out


def head_logits(model: FactoredModel, h, left=None, center=None):
    """Logits of the three heads given encoder output ``h`` (T, H)."""
    p = model.params
    T = h.shape[0]
    left, center = _check_context(model, T, left, center)
    logits = {"left": h @ p["left_W"] + p["left_b"]}
    zc = h @ p["center_W"] + p["center_b"]
    el = ec = None
    if model.center_uses_left:
        el = p["emb_left"][left]
        zc = zc + el @ p["center_We"]
    logits["center"] = zc
    zr = h @ p["right_W"] + p["right_b"]
    if model.right_uses_context:
        ec = p["emb_center"][center]
        zr = zr + el @ p["right_Wl"] + ec @ p["right_Wc"]
    logits["right"] = zr
    return logits, {"h": h, "left": left, "center": center, "el": el, "ec": ec}


def heads_logprobs(model: FactoredModel, h, left=None, center=None) -> PosteriorBatch:
    logits, _ = head_logits(model, h, left, center)
    return PosteriorBatch(*(log_softmax(logits[k]) for k in HEADS))


def forward(model: FactoredModel, features, context_inputs=None, train=False, rng=None):
    """Evaluate all heads. Returns ``(PosteriorBatch, cache)``.

    ``context_inputs`` is ``(left_labels, center_state_labels)`` per frame,
    required for di/tri models without simplified heads.
    """
    left = center = None
    if context_inputs is not None:
        left, center = context_inputs
    h, enc_cache = encode(model, features, train=train, rng=rng)
    logits, head_cache = head_logits(model, h, left, center)
    post = PosteriorBatch(*(log_softmax(logits[k]) for k in HEADS))
    return post, {"enc": enc_cache, "head": head_cache}


def backward(model: FactoredModel, cache, head_grads) -> dict:
    """Parameter gradients given per-head gradients w.r.t. the logits.

    ``head_grads`` maps head name to a (T, classes) array; absent heads are
    treated as zero.
    """
    p = model.params
    hc = cache["head"]
    h = hc["h"]
    T = h.shape[0]
    grads = {n: np.zeros_like(v) for n, v in p.items()}
    expected = {"left": model.num_left, "center": model.num_center, "right": model.num_left}
    dh = np.zeros_like(h)
    d_el = np.zeros((T, LEFT_EMBED_DIM)) if hc["el"] is not None else None
    for name in HEADS:
        g = head_grads.get(name)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != (T, expected[name]):
            raise DataError(f"gradient for head {name!r} has shape {g.shape}, expected {(T, expected[name])}")
        grads[f"{name}_W"] += h.T @ g
        grads[f"{name}_b"] += g.sum(axis=0)
        dh += g @ p[f"{name}_W"].T
        if name == "center" and model.center_uses_left:
            grads["center_We"] += hc["el"].T @ g
            d_el += g @ p["center_We"].T
        if name == "right" and model.right_uses_context:
            grads["right_Wl"] += hc["el"].T @ g
            grads["right_Wc"] += hc["ec"].T @ g
            d_el += g @ p["right_Wl"].T
            np.add.at(grads["emb_center"], hc["center"], g @ p["right_Wc"].T)
    if d_el is not None:
        np.add.at(grads["emb_left"], hc["left"], d_el)

    _, act_grad = _ACTIVATIONS[model.encoder.nonlinearity]
    da = dh
    for i in reversed(range(len(model.encoder.hidden))):
        a_in, z, _, mask = cache["enc"]["layers"][i]
        if mask is not None:
            da = da * mask
        dz = da * act_grad(z)
        grads[f"enc_W{i}"] += a_in.T @ dz
        grads[f"enc_b{i}"] += dz.sum(axis=0)
        if i > 0:
            da = dz @ p[f"enc_W{i}"].T
    return grads


def init_from_previous_stage(prev: FactoredModel, new_order: str, seed=0) -> FactoredModel:
    """Grow a model by one context order, copying every shared tensor.

    Tensors that only exist in the new wiring (context embeddings and their
    head input weights) are freshly initialized.
    """
    if new_order not in ORDERS:
        raise DataError(f"unknown context order {new_order!r}")
    if ORDERS.index(new_order) != ORDERS.index(prev.context_order) + 1:
        raise DataError(f"cannot grow {prev.context_order} model to {new_order}: non-adjacent step")
    new = FactoredModel(prev.inventory, EncoderConfig(**asdict(prev.encoder)), new_order, False)
    new.feat_mean = None if prev.feat_mean is None else prev.feat_mean.copy()
    new.feat_std = None if prev.feat_std is None else prev.feat_std.copy()
    rng = np.random.default_rng(seed)
    for name, shape in new.param_shapes().items():
        old = prev.params.get(name)
        if old is not None:
            if old.shape != shape:
                raise DataError(f"incompatible shape for {name}: {old.shape} vs {shape}")
            new.params[name] = old.copy()
        else:
            new.params[name] = init_param(rng, name, shape)
    return new


def num_parameters(model: FactoredModel) -> int:
    return sum(v.size for v in model.params.values())

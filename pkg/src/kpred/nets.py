"""Learnable blocks: point encoder, keypoint predictor, local pooling, attention, heads, decoder.

Parameters live in one :class:`~kpred.autodiff.ParamStore` keyed by dotted
names; the prefix says which block owns a tensor (``encoder.``,
``keypoint.``, ``deform_attn.`` ...). Freezing a block means flipping
``requires_grad`` on its prefix.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import default_n_ref, region_query

KEYPOINT_PREFIXES = ("encoder.", "keypoint.")
DEFORM_PREFIXES = ("encoder.", "keypoint.", "deform_attn.", "influence.")
RETRIEVAL_PREFIXES = ("ret_attn.", "token.", "token_global.", "decoder.")
PARTIAL_PREFIXES = ("part_encoder.", "part_keypoint.")


@dataclass
class Arch:
    n_keypoints: int = 12
    n_cage: int = 42
    cage_template: str = "icosphere1"
    n_points: int = 2048
    feat_dim: int = 128
    enc_hidden: tuple = (64, 128)
    token_dim: int = 32
    token_hidden: int = 64
    decoder_points: int = 128
    decoder_hidden: int = 256
    attn_layers: int = 2
    heads: int = 4
    radius: float = 0.3
    gsa: bool = True
    lgf: bool = True
    dtype: str = "float32"

    @property
    def n_ref(self):
        return default_n_ref(self.n_points, self.n_keypoints)

    def to_json(self):
        d = asdict(self)
        d["enc_hidden"] = list(self.enc_hidden)
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        d["enc_hidden"] = tuple(d.get("enc_hidden", (64, 128)))
        return cls(**d)


@dataclass
class NetBundle:
    arch: Arch
    store: ad.ParamStore
    meta: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return self.store.dtype

    def p(self, name):
        return self.store[name]

    def fingerprint(self) -> str:
        h = hashlib.sha256(json.dumps(self.arch.to_json(), sort_keys=True).encode())
        for name in sorted(self.store.params):
            t = self.store[name].data
            h.update(name.encode())
            h.update(np.ascontiguousarray(t).tobytes())
        return h.hexdigest()[:16]

    def astype(self, dtype):
        arch = Arch.from_json({**self.arch.to_json(), "dtype": np.dtype(dtype).name})
        return NetBundle(arch, self.store.astype(dtype), dict(self.meta))


# ------------------------------------------------------------------ init

def _linear(store, rng, name, fan_in, fan_out, zero=False):
    w = np.zeros((fan_in, fan_out)) if zero else ad.glorot(rng, fan_in, fan_out, np.float64)
    store.add(f"{name}.w", w)
    store.add(f"{name}.b", np.zeros(fan_out))


def _attn_params(store, rng, prefix, arch):
    d = arch.feat_dim
    for layer in range(arch.attn_layers):
        pre = f"{prefix}.{layer}"
        for proj in ("wq", "wk", "wv", "wo"):
            store.add(f"{pre}.{proj}", ad.glorot(rng, d, d, np.float64))
        store.add(f"{pre}.ln1.g", np.ones(d))
        store.add(f"{pre}.ln1.b", np.zeros(d))
        _linear(store, rng, f"{pre}.ff1", d, 2 * d)
        _linear(store, rng, f"{pre}.ff2", 2 * d, d)
        store.add(f"{pre}.ln2.g", np.ones(d))
        store.add(f"{pre}.ln2.b", np.zeros(d))


def _encoder_params(store, rng, prefix, arch):
    dims = (3, *arch.enc_hidden, arch.feat_dim)
    for i in range(len(dims) - 1):
        _linear(store, rng, f"{prefix}.l{i}", dims[i], dims[i + 1])


def _keypoint_params(store, rng, prefix, arch):
    _linear(store, rng, f"{prefix}.l0", arch.feat_dim, arch.feat_dim)
    store.add(f"{prefix}.query", ad.glorot(rng, arch.n_keypoints, arch.feat_dim, np.float64))


def init_bundle(arch: Arch | None = None, seed=0) -> NetBundle:
    """Fresh parameters; the influence head's last layer starts at zero (identity deformation)."""
    arch = arch or Arch()
    rng = np.random.default_rng(seed)
    store = ad.ParamStore(np.dtype(arch.dtype))
    d = arch.feat_dim
    _encoder_params(store, rng, "encoder", arch)
    _keypoint_params(store, rng, "keypoint", arch)
    _attn_params(store, rng, "deform_attn", arch)
    _linear(store, rng, "influence.l0", d, d)
    _linear(store, rng, "influence.l1", d, arch.n_cage, zero=True)
    _attn_params(store, rng, "ret_attn", arch)
    _linear(store, rng, "token.l0", d, arch.token_hidden)
    _linear(store, rng, "token.l1", arch.token_hidden, arch.token_dim)
    _linear(store, rng, "token_global.l0", d, arch.token_hidden)
    _linear(store, rng, "token_global.l1", arch.token_hidden, arch.token_dim)
    dec_in = arch.token_dim + 3 * arch.n_keypoints
    _linear(store, rng, "decoder.l0", dec_in, arch.decoder_hidden)
    _linear(store, rng, "decoder.l1", arch.decoder_hidden, arch.decoder_hidden)
    _linear(store, rng, "decoder.l2", arch.decoder_hidden, 3 * arch.decoder_points)
    _encoder_params(store, rng, "part_encoder", arch)
    _keypoint_params(store, rng, "part_keypoint", arch)
    return NetBundle(arch, store)


def copy_full_predictor_to_partial(bundle: NetBundle):
    """Warm-start the partial keypoint predictor from the full one."""
    for name in bundle.store.names("encoder.") + bundle.store.names("keypoint."):
        bundle.store[f"part_{name}"].data = bundle.store[name].data.copy()


# ------------------------------------------------------------------ blocks

def linear(x, bundle, name):
    return ad.add_bias(ad.matmul(x, bundle.p(f"{name}.w")), bundle.p(f"{name}.b"))


def _as_tensor(points, bundle):
    if isinstance(points, ad.Tensor):
        return points
    return ad.const(np.asarray(points, dtype=bundle.dtype))


def encode_points(points, bundle, prefix="encoder"):
    """Shared per-point MLP; row p depends on point p only."""
    x = _as_tensor(points, bundle)
    n_layers = len(bundle.arch.enc_hidden) + 1
    for i in range(n_layers):
        x = linear(x, bundle, f"{prefix}.l{i}")
        if i < n_layers - 1:
            x = ad.relu(x)
    return x


def keypoint_weights(features, bundle, prefix="keypoint"):
    """Per-keypoint softmax over points, shape (N_K, N)."""
    h = ad.relu(linear(features, bundle, f"{prefix}.l0"))
    scores = ad.matmul(bundle.p(f"{prefix}.query"), ad.transpose(h))
    return ad.softmax(scores)


def predict_keypoints(points, features, bundle, prefix="keypoint"):
    """Keypoints as softmax-weighted averages of the input points."""
    return ad.matmul(keypoint_weights(features, bundle, prefix), _as_tensor(points, bundle))


def support_regions(points, keypoints, bundle):
    """Ball regions around keypoints (non-differentiable), with an empty-region fallback.

    Returns the :class:`RegionAssignment` and an (N_K, R) padded index matrix
    for pooling; an empty region pools the single nearest point and is
    flagged in ``regions.meta["empty"]``.
    """
    pts = np.asarray(points, dtype=np.float64)
    kp = np.asarray(keypoints.data if isinstance(keypoints, ad.Tensor) else keypoints, dtype=np.float64)
    regions = region_query(pts, kp, bundle.arch.radius, bundle.arch.n_ref)
    empty = regions.counts == 0
    members = []
    for i, idx in enumerate(regions.indices):
        if len(idx) == 0:
            idx = np.array([int(np.argmin(np.sum((pts - kp[i]) ** 2, axis=1)))])
        members.append(idx)
    width = max(len(m) for m in members)
    padded = np.stack([np.concatenate([m, np.full(width - len(m), m[0])]) for m in members])
    regions.meta["empty"] = empty
    regions.meta["padded"] = padded
    return regions


def aggregate_local(features, regions):
    """Max-pool member features per region, (N_K, d)."""
    padded = regions.meta["padded"] if hasattr(regions, "meta") else np.asarray(regions)
    return ad.max_(ad.gather_rows(features, padded), axis=1)


def global_feature(features):
    return ad.max_(features, axis=0)


def attention_weights(x, bundle, pre):
    """Multi-head attention; returns per-head weights (H, N, N) and values (H, N, dh)."""
    n, d = x.shape
    h = bundle.arch.heads
    dh = d // h

    def split(t):
        return ad.transpose(ad.reshape(t, (n, h, dh)), (1, 0, 2))

    q = split(ad.matmul(x, bundle.p(f"{pre}.wq")))
    k = split(ad.matmul(x, bundle.p(f"{pre}.wk")))
    v = split(ad.matmul(x, bundle.p(f"{pre}.wv")))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
    return ad.softmax(scores), v


def attention_sublayer(x, bundle, pre):
    """``x + MHA(x)`` before normalisation."""
    n, d = x.shape
    attn, v = attention_weights(x, bundle, pre)
    mixed = ad.reshape(ad.transpose(ad.matmul(attn, v), (1, 0, 2)), (n, d))
    return ad.add(x, ad.matmul(mixed, bundle.p(f"{pre}.wo")))


def self_attention(local, bundle, prefix="deform_attn"):
    """Post-norm transformer encoder over the keypoint regions (no positional encoding)."""
    x = local
    for layer in range(bundle.arch.attn_layers):
        pre = f"{prefix}.{layer}"
        x = ad.layer_norm(attention_sublayer(x, bundle, pre),
                          bundle.p(f"{pre}.ln1.g"), bundle.p(f"{pre}.ln1.b"))
        ff = linear(ad.relu(linear(x, bundle, f"{pre}.ff1")), bundle, f"{pre}.ff2")
        x = ad.layer_norm(ad.add(x, ff), bundle.p(f"{pre}.ln2.g"), bundle.p(f"{pre}.ln2.b"))
    return x


def region_context(features, regions, bundle, prefix):
    """Per-keypoint features fed to the heads: pooled + attention, or the global feature when GSA is off."""
    if bundle.arch.gsa:
        return self_attention(aggregate_local(features, regions), bundle, prefix)
    g = ad.reshape(global_feature(features), (1, bundle.arch.feat_dim))
    ones = ad.const(np.ones((bundle.arch.n_keypoints, 1), dtype=bundle.dtype))
    return ad.matmul(ones, g)


def influence_head(context, bundle, mask):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (bundle.arch.n_keypoints, bundle.arch.n_cage):
        raise ValueError(f"influence mask shape {mask.shape} does not match the architecture")
    if not mask.any(axis=0).all():
        raise ValueError("influence mask leaves a cage vertex without any keypoint")
    raw = linear(ad.relu(linear(context, bundle, "influence.l0")), bundle, "influence.l1")
    return ad.mul(raw, ad.const(mask.astype(bundle.dtype)))


def token_head(context, bundle):
    """Per-region retrieval tokens (N_K, d_T)."""
    return linear(ad.relu(linear(context, bundle, "token.l0")), bundle, "token.l1")


def global_token_head(features, bundle):
    """Single token from the max-pooled global feature (LGF ablation)."""
    g = ad.reshape(global_feature(features), (1, bundle.arch.feat_dim))
    return linear(ad.relu(linear(g, bundle, "token_global.l0")), bundle, "token_global.l1")


def decode_region(tokens, keypoints, bundle):
    """Reconstruct M points per token, conditioned on a flattened keypoint set.

    ``tokens`` is (R, d_T) (or a single (d_T,) row) and ``keypoints`` (N_K, 3);
    the result is (R, M, 3).
    """
    tokens = ad.const(tokens)
    if tokens.ndim == 1:
        tokens = ad.reshape(tokens, (1, tokens.shape[0]))
    r = tokens.shape[0]
    kflat = ad.reshape(ad.const(keypoints), (1, 3 * bundle.arch.n_keypoints))
    cond = ad.matmul(ad.const(np.ones((r, 1), dtype=bundle.dtype)), kflat)
    x = ad.concat([tokens, cond], axis=1)
    x = ad.relu(linear(x, bundle, "decoder.l0"))
    x = ad.relu(linear(x, bundle, "decoder.l1"))
    x = linear(x, bundle, "decoder.l2")
    return ad.reshape(x, (r, bundle.arch.decoder_points, 3))


@dataclass
class Encoded:
    """Everything the heads need about one shape."""

    points: np.ndarray
    features: ad.Tensor
    keypoints: ad.Tensor
    regions: object


def encode_shape(points, bundle, partial=False) -> Encoded:
    """Features, keypoints and support regions of a shape.

    With ``partial`` the keypoints come from the partial predictor; features
    for pooling always come from the shared full encoder.
    """
    pts = np.asarray(points, dtype=np.float64)
    feats = encode_points(pts, bundle, "encoder")
    if partial:
        kfeats = encode_points(pts, bundle, "part_encoder")
        kp = predict_keypoints(pts, kfeats, bundle, "part_keypoint")
    else:
        kp = predict_keypoints(pts, feats, bundle, "keypoint")
    return Encoded(pts, feats, kp, support_regions(pts, kp, bundle))


def retrieval_tokens(enc: Encoded, bundle):
    """Region tokens (N_K, d_T), or one global token (1, d_T) with LGF off."""
    if not bundle.arch.lgf:
        return global_token_head(enc.features, bundle)
    return token_head(region_context(enc.features, enc.regions, bundle, "ret_attn"), bundle)

"""Compact BERT-style transformer encoder with adapter insertion points.

The backbone holds the frozen base weights. Each layer is post-LN: the
sublayer output is added to its residual input and normalized. Adapters
hook in at two points per layer, after the attention sublayer and after
the feed-forward sublayer, between the sublayer and its add-and-norm (or
after it, depending on the adapter's configuration).

The pooled representation is the first position's hidden state; prediction
heads own any further projection.
"""

import hashlib
from dataclasses import dataclass, field, fields

import numpy as np

from . import adapters as adp
from . import autodiff as ad
from .adapters import truncated_normal
from .errors import ShapeMismatchError


@dataclass(frozen=True)
class ModelConfig:
    """Architecture descriptor; two models are compatible iff all fields match."""

    model_type: str = "mini-bert"
    hidden_size: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ffn_size: int = 256
    vocab_size: int = 128
    max_seq_len: int = 32
    layer_norm_epsilon: float = 1e-12

    def __post_init__(self):
        for f in fields(self):
            if f.name in ("model_type",):
                continue
            if getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")
        if self.hidden_size % self.num_heads != 0:
            raise ValueError(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}"
            )

    def descriptor(self):
        lines = [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    def config_hash(self):
        return hashlib.sha256(self.descriptor().encode("utf-8")).hexdigest()

    @property
    def head_dim(self):
        return self.hidden_size // self.num_heads


def parse_model_descriptor(text):
    """Inverse of :meth:`ModelConfig.descriptor`."""
    values = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, raw = line.partition("=")
        values[key] = raw
    known = {f.name: f.type for f in fields(ModelConfig)}
    unknown = set(values) - set(known)
    if unknown:
        raise ValueError(f"unknown model descriptor keys: {sorted(unknown)}")
    kwargs = {}
    for name, raw in values.items():
        kwargs[name] = known[name](raw) if known[name] is not str else raw
    return ModelConfig(**kwargs)


@dataclass
class LayerWeights:
    """Base parameters of one transformer layer."""

    w_q: ad.Tensor
    b_q: ad.Tensor
    w_k: ad.Tensor
    b_k: ad.Tensor
    w_v: ad.Tensor
    b_v: ad.Tensor
    w_o: ad.Tensor
    b_o: ad.Tensor
    attn_ln_gamma: ad.Tensor
    attn_ln_beta: ad.Tensor
    w_ffn_in: ad.Tensor
    b_ffn_in: ad.Tensor
    w_ffn_out: ad.Tensor
    b_ffn_out: ad.Tensor
    ffn_ln_gamma: ad.Tensor
    ffn_ln_beta: ad.Tensor

    def named_tensors(self):
        for f in fields(self):
            yield f.name, getattr(self, f.name)


@dataclass
class BackboneWeights:
    """All base parameters: embeddings plus per-layer blocks."""

    token_embeddings: ad.Tensor
    position_embeddings: ad.Tensor
    emb_ln_gamma: ad.Tensor
    emb_ln_beta: ad.Tensor
    layers: list = field(default_factory=list)

    def named_tensors(self):
        yield "token_embeddings", self.token_embeddings
        yield "position_embeddings", self.position_embeddings
        yield "emb_ln_gamma", self.emb_ln_gamma
        yield "emb_ln_beta", self.emb_ln_beta
        for i, layer in enumerate(self.layers):
            for name, t in layer.named_tensors():
                yield f"layer{i}.{name}", t


def init_backbone(config, rng):
    """Deterministic random backbone: truncated-normal weights, zero biases, unit LNs."""
    h, f = config.hidden_size, config.ffn_size

    def w(shape):
        return ad.tensor(truncated_normal(rng, shape))

    def zeros(n):
        return ad.tensor(np.zeros(n))

    def ones(n):
        return ad.tensor(np.ones(n))

    layers = []
    for _ in range(config.num_layers):
        layers.append(LayerWeights(
            w_q=w((h, h)), b_q=zeros(h),
            w_k=w((h, h)), b_k=zeros(h),
            w_v=w((h, h)), b_v=zeros(h),
            w_o=w((h, h)), b_o=zeros(h),
            attn_ln_gamma=ones(h), attn_ln_beta=zeros(h),
            w_ffn_in=w((h, f)), b_ffn_in=zeros(f),
            w_ffn_out=w((f, h)), b_ffn_out=zeros(h),
            ffn_ln_gamma=ones(h), ffn_ln_beta=zeros(h),
        ))
    return BackboneWeights(
        token_embeddings=w((config.vocab_size, h)),
        position_embeddings=w((config.max_seq_len, h)),
        emb_ln_gamma=ones(h),
        emb_ln_beta=zeros(h),
        layers=layers,
    )


def count_backbone_params(config):
    """Exact base parameter count: embeddings, projections, biases, layer norms."""
    h, f = config.hidden_size, config.ffn_size
    emb = config.vocab_size * h + config.max_seq_len * h + 2 * h
    attn = 4 * (h * h + h) + 2 * h
    ffn = (h * f + f) + (f * h + h) + 2 * h
    return emb + config.num_layers * (attn + ffn)


@dataclass
class LayerTrace:
    """Hook-point signals of one layer (sequence-by-hidden arrays)."""

    attention_sublayer_output: np.ndarray
    attention_residual_input: np.ndarray
    post_attention_hidden: np.ndarray
    ffn_sublayer_output: np.ndarray
    ffn_residual_input: np.ndarray
    post_ffn_hidden: np.ndarray
    attention_probs: list  # one seq-by-seq array per head


@dataclass
class EncodeResult:
    hidden: ad.Tensor  # seq-by-hidden
    pooled: ad.Tensor  # hidden-size vector (first position)
    layer_traces: list | None = None


def _attention(config, lw, x):
    """Multi-head self-attention sublayer (pre-residual output)."""
    d = config.head_dim
    q = ad.add_bias(ad.matmul(x, lw.w_q), lw.b_q)
    k = ad.add_bias(ad.matmul(x, lw.w_k), lw.b_k)
    v = ad.add_bias(ad.matmul(x, lw.w_v), lw.b_v)
    contexts = []
    probs = []
    for head in range(config.num_heads):
        lo, hi = head * d, (head + 1) * d
        q_h = ad.slice_cols(q, lo, hi)
        k_h = ad.slice_cols(k, lo, hi)
        v_h = ad.slice_cols(v, lo, hi)
        scores = ad.scale(ad.matmul(q_h, ad.transpose(k_h)), 1.0 / np.sqrt(d))
        p = ad.softmax_rows(scores)
        probs.append(p)
        contexts.append(ad.matmul(p, v_h))
    ctx = ad.concat_cols(contexts)
    return ad.add_bias(ad.matmul(ctx, lw.w_o), lw.b_o), probs


def _ffn(config, lw, x):
    """Feed-forward sublayer (pre-residual output); gelu inner activation."""
    inner = ad.gelu(ad.add_bias(ad.matmul(x, lw.w_ffn_in), lw.b_ffn_in))
    return ad.add_bias(ad.matmul(inner, lw.w_ffn_out), lw.b_ffn_out)


def _through_insertion_point(x_in, sub_out, ln_gamma, ln_beta, eps, hooks):
    """Route one sublayer's output through its add-and-norm, with adapters.

    ``hooks`` is an ordered list of (weights, config) pairs for the adapters
    active at this point. The first adapter's configuration chooses the hook
    signal and the continuation wiring; each following adapter takes the
    previous adapter's output as both input and residual, which keeps
    identity-initialized adapters transparent anywhere in the stack.
    """

    def add_and_norm(a, b):
        return ad.layer_norm(ad.add(a, b), ln_gamma, ln_beta, eps)

    if not hooks:
        return add_and_norm(x_in, sub_out)

    first_cfg = hooks[0][1]
    if first_cfg.adapter_input == "sublayer_output":
        entry = sub_out
    else:  # after_original_ln: the original block completes first
        entry = add_and_norm(x_in, sub_out)
    residual = entry if first_cfg.residual_source == "adapter_input" else x_in

    cur = adp.adapter_forward(entry, residual, hooks[0][0], first_cfg, eps)
    for weights, cfg in hooks[1:]:
        cur = adp.adapter_forward(cur, cur, weights, cfg, eps)

    if first_cfg.adapter_input == "sublayer_output":
        if first_cfg.residual_source == "adapter_input":
            return add_and_norm(x_in, cur)
        # the adapter's skip already carried x_in; only normalize
        return ad.layer_norm(cur, ln_gamma, ln_beta, eps)
    return cur


def apply_layer(config, lw, x, attention_hooks=(), output_hooks=(), trace=None):
    """One full transformer layer on a seq-by-hidden tensor."""
    eps = config.layer_norm_epsilon
    attn_out, probs = _attention(config, lw, x)
    attn_hidden = _through_insertion_point(
        x, attn_out, lw.attn_ln_gamma, lw.attn_ln_beta, eps, list(attention_hooks))
    ffn_out = _ffn(config, lw, attn_hidden)
    ffn_hidden = _through_insertion_point(
        attn_hidden, ffn_out, lw.ffn_ln_gamma, lw.ffn_ln_beta, eps, list(output_hooks))
    if trace is not None:
        trace.append(LayerTrace(
            attention_sublayer_output=attn_out.data,
            attention_residual_input=x.data,
            post_attention_hidden=attn_hidden.data,
            ffn_sublayer_output=ffn_out.data,
            ffn_residual_input=attn_hidden.data,
            post_ffn_hidden=ffn_hidden.data,
            attention_probs=[p.data for p in probs],
        ))
    return ffn_hidden


def encode(config, weights, token_ids, layer_hooks=None, collect_traces=False):
    """Run the encoder over a token id sequence.

    ``layer_hooks``, when given, is a list with one entry per layer:
    ``(attention_hooks, output_hooks)`` as consumed by :func:`apply_layer`.
    Returns an :class:`EncodeResult` with the final hidden states and the
    first-position pooled vector.
    """
    ids = [int(t) for t in token_ids]
    if not ids:
        raise ShapeMismatchError("encode: empty token sequence")
    if len(ids) > config.max_seq_len:
        raise ShapeMismatchError(
            f"encode: sequence length {len(ids)} exceeds max_seq_len {config.max_seq_len}"
        )
    for t in ids:
        if t < 0 or t >= config.vocab_size:
            raise ShapeMismatchError(f"encode: token id {t} out of range [0, {config.vocab_size})")

    eps = config.layer_norm_epsilon
    tok = ad.embedding_lookup(weights.token_embeddings, ids)
    pos = ad.embedding_lookup(weights.position_embeddings, list(range(len(ids))))
    x = ad.layer_norm(ad.add(tok, pos), weights.emb_ln_gamma, weights.emb_ln_beta, eps)

    traces = [] if collect_traces else None
    for i, lw in enumerate(weights.layers):
        attn_hooks, out_hooks = ((), ())
        if layer_hooks is not None:
            attn_hooks, out_hooks = layer_hooks[i]
        x = apply_layer(config, lw, x, attn_hooks, out_hooks, traces)

    return EncodeResult(hidden=x, pooled=ad.mean_pool_first(x), layer_traces=traces)

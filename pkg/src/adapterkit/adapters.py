"""Bottleneck adapter configuration space, presets, weights and accounting.

An adapter is a down-projection, a non-linearity, and an up-projection with
a skip connection, inserted at up to two points inside every transformer
layer: after the attention sublayer (``mh_adapter``) and/or after the
feed-forward sublayer (``output_adapter``). The remaining knobs pick which
hook signal feeds the adapter, which signal its skip connection adds back,
and whether fresh LayerNorms wrap the projections.

Freshly initialized adapters are exact identities on their residual path
(the up-projection starts at zero), so stitching one into a model never
changes its output until training happens.
"""

import hashlib
import warnings
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .errors import ShapeMismatchError

ADAPTER_INPUT_CHOICES = ("sublayer_output", "after_original_ln")
RESIDUAL_SOURCE_CHOICES = ("adapter_input", "pre_sublayer")
NON_LINEARITIES = ("relu", "gelu", "swish", "tanh")

PRESET_NAMES = ("pfeiffer", "houlsby", "bapna")


class BottleneckClampWarning(UserWarning):
    """Hidden size not divisible by the reduction factor; bottleneck clamped."""


def resolve_bottleneck(hidden_size, reduction_factor):
    """Bottleneck width for a hidden size and compression rate.

    Exact division when possible; otherwise floor, clamped to at least 1,
    with a :class:`BottleneckClampWarning`.
    """
    if hidden_size <= 0 or reduction_factor <= 0:
        raise ValueError("hidden_size and reduction_factor must be positive")
    if hidden_size % reduction_factor == 0:
        return hidden_size // reduction_factor
    b = max(1, hidden_size // reduction_factor)
    warnings.warn(
        f"hidden size {hidden_size} not divisible by reduction factor "
        f"{reduction_factor}; bottleneck clamped to {b}",
        BottleneckClampWarning,
        stacklevel=2,
    )
    return b


@dataclass(frozen=True)
class AdapterConfig:
    """Architecture of one adapter; hashes to a stable identity."""

    reduction_factor: int = 16
    non_linearity: str = "relu"
    mh_adapter: bool = False
    output_adapter: bool = True
    new_ln_before: bool = False
    new_ln_after: bool = False
    adapter_input: str = "sublayer_output"
    residual_source: str = "adapter_input"

    def __post_init__(self):
        if self.reduction_factor < 1:
            raise ValueError("reduction_factor must be a positive int")
        if self.non_linearity not in NON_LINEARITIES:
            raise ValueError(f"non_linearity must be one of {NON_LINEARITIES}")
        if not (self.mh_adapter or self.output_adapter):
            raise ValueError("at least one of mh_adapter, output_adapter must be true")
        if self.adapter_input not in ADAPTER_INPUT_CHOICES:
            raise ValueError(f"adapter_input must be one of {ADAPTER_INPUT_CHOICES}")
        if self.residual_source not in RESIDUAL_SOURCE_CHOICES:
            raise ValueError(f"residual_source must be one of {RESIDUAL_SOURCE_CHOICES}")

    def descriptor(self):
        """Canonical flat key=value text; its hash identifies the architecture."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def config_hash(self):
        return hashlib.sha256(self.descriptor().encode("utf-8")).hexdigest()

    def insertion_points(self):
        points = []
        if self.mh_adapter:
            points.append("attention")
        if self.output_adapter:
            points.append("output")
        return points


def parse_config_descriptor(text):
    """Inverse of :meth:`AdapterConfig.descriptor`."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"bad descriptor line {lineno}: {line!r}")
        key, _, raw = line.partition("=")
        values[key] = raw
    known = {f.name: f.type for f in fields(AdapterConfig)}
    unknown = set(values) - set(known)
    if unknown:
        raise ValueError(f"unknown descriptor keys: {sorted(unknown)}")
    kwargs = {}
    for name, raw in values.items():
        if known[name] is int:
            kwargs[name] = int(raw)
        elif known[name] is bool:
            if raw not in ("true", "false"):
                raise ValueError(f"bad boolean for {name}: {raw!r}")
            kwargs[name] = raw == "true"
        else:
            kwargs[name] = raw
    return AdapterConfig(**kwargs)


_PRESETS = {
    # one adapter after the feed-forward sublayer, skip around the adapter
    "pfeiffer": AdapterConfig(
        non_linearity="relu",
        mh_adapter=False,
        output_adapter=True,
    ),
    # adapters after both sublayers
    "houlsby": AdapterConfig(
        non_linearity="swish",
        mh_adapter=True,
        output_adapter=True,
    ),
    # feed-forward-side adapter fed by the post-LN hidden, with a fresh LN
    # in front of the down-projection
    "bapna": AdapterConfig(
        non_linearity="relu",
        mh_adapter=False,
        output_adapter=True,
        new_ln_before=True,
        adapter_input="after_original_ln",
    ),
}


def preset(name, reduction_factor=None):
    """Resolve a named preset, optionally overriding the compression rate."""
    try:
        cfg = _PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; valid presets: {PRESET_NAMES}") from None
    if reduction_factor is not None:
        cfg = AdapterConfig(**{**_as_kwargs(cfg), "reduction_factor": int(reduction_factor)})
    return cfg


def _as_kwargs(cfg):
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def resolve_config(spec_or_name, reduction_factor=None):
    """Accept an AdapterConfig or a preset name; return an AdapterConfig."""
    if isinstance(spec_or_name, AdapterConfig):
        if reduction_factor is not None:
            return AdapterConfig(**{**_as_kwargs(spec_or_name), "reduction_factor": int(reduction_factor)})
        return spec_or_name
    return preset(spec_or_name, reduction_factor)


# ---------------------------------------------------------------------------
# weights


@dataclass
class AdapterLayerWeights:
    """Projection (and optional LN) parameters for one layer, one insertion point."""

    w_down: ad.Tensor
    b_down: ad.Tensor
    w_up: ad.Tensor
    b_up: ad.Tensor
    ln_before_gamma: ad.Tensor | None = None
    ln_before_beta: ad.Tensor | None = None
    ln_after_gamma: ad.Tensor | None = None
    ln_after_beta: ad.Tensor | None = None

    def named_tensors(self):
        for name in ("w_down", "b_down", "w_up", "b_up",
                     "ln_before_gamma", "ln_before_beta",
                     "ln_after_gamma", "ln_after_beta"):
            t = getattr(self, name)
            if t is not None:
                yield name, t


def truncated_normal(rng, shape, std=0.02, bound=2.0):
    """Normal(0, std) samples redrawn until they land within bound*std."""
    out = rng.normal(0.0, std, size=shape)
    limit = bound * std
    bad = np.abs(out) > limit
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > limit
    return out


def init_layer_weights(hidden_size, config, rng):
    """Identity-initialized weights: down-projection random, everything else zero."""
    b = resolve_bottleneck(hidden_size, config.reduction_factor)
    w = AdapterLayerWeights(
        w_down=ad.tensor(truncated_normal(rng, (hidden_size, b))),
        b_down=ad.tensor(np.zeros(b)),
        w_up=ad.tensor(np.zeros((b, hidden_size))),
        b_up=ad.tensor(np.zeros(hidden_size)),
    )
    if config.new_ln_before:
        w.ln_before_gamma = ad.tensor(np.ones(hidden_size))
        w.ln_before_beta = ad.tensor(np.zeros(hidden_size))
    if config.new_ln_after:
        w.ln_after_gamma = ad.tensor(np.ones(hidden_size))
        w.ln_after_beta = ad.tensor(np.zeros(hidden_size))
    return w


def adapter_forward(hidden, residual, weights, config, ln_epsilon=1e-12):
    """Bottleneck transform of ``hidden`` plus the chosen ``residual``.

    out = maybe_ln_after(residual + up(act(down(maybe_ln_before(hidden)))))
    """
    if hidden.shape != residual.shape:
        raise ShapeMismatchError(f"adapter_forward: hidden {hidden.shape} vs residual {residual.shape}")
    if hidden.data.ndim != 2 or hidden.shape[1] != weights.w_down.shape[0]:
        raise ShapeMismatchError(
            f"adapter_forward: hidden {hidden.shape} does not match w_down {weights.w_down.shape}"
        )
    x = hidden
    if config.new_ln_before:
        x = ad.layer_norm(x, weights.ln_before_gamma, weights.ln_before_beta, ln_epsilon)
    x = ad.add_bias(ad.matmul(x, weights.w_down), weights.b_down)
    x = ad.activation(config.non_linearity, x)
    x = ad.add_bias(ad.matmul(x, weights.w_up), weights.b_up)
    out = ad.add(residual, x)
    if config.new_ln_after:
        out = ad.layer_norm(out, weights.ln_after_gamma, weights.ln_after_beta, ln_epsilon)
    return out


# ---------------------------------------------------------------------------
# accounting


def count_point_params(hidden_size, config):
    """Parameters of one adapter instance (one layer, one insertion point)."""
    b = resolve_bottleneck(hidden_size, config.reduction_factor)
    n = hidden_size * b + b + b * hidden_size + hidden_size
    if config.new_ln_before:
        n += 2 * hidden_size
    if config.new_ln_after:
        n += 2 * hidden_size
    return n


def count_adapter_params(model_config, config):
    """Total new parameters an adapter of this config adds to the model."""
    per_layer = len(config.insertion_points()) * count_point_params(model_config.hidden_size, config)
    return model_config.num_layers * per_layer

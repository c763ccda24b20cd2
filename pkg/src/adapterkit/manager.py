"""Model orchestration: a frozen backbone plus named, swappable adapters.

An :class:`AdapterModel` owns one backbone and a registry of named adapters.
Any subset of adapters can be activated as an ordered stack; training mode
decides which tensors receive gradients. Prediction heads are small linear
layers over the pooled first-position vector, registered by name alongside
the adapters.
"""

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from .adapters import (AdapterConfig, AdapterLayerWeights, count_adapter_params,
                       init_layer_weights, resolve_config)
from .errors import CompatibilityError, ShapeMismatchError, UnknownAdapterError

ADAPTER_TYPES = ("text_task", "text_lang")


def _validate_name(name):
    if not name or not isinstance(name, str):
        raise ValueError("adapter name must be a non-empty string")
    if any(c.isspace() for c in name) or "/" in name or "\\" in name:
        raise ValueError(f"adapter name {name!r} may not contain whitespace or path separators")


@dataclass
class AdapterEntry:
    """One registered adapter: identity, architecture, per-layer weights."""

    name: str
    adapter_type: str
    config: AdapterConfig
    weights: list  # per layer: {insertion point: AdapterLayerWeights}
    trained: bool = False

    def named_tensors(self):
        for i, points in enumerate(self.weights):
            for point in self.config.insertion_points():
                for name, t in points[point].named_tensors():
                    yield f"layer{i}.{point}.{name}", t

    def set_requires_grad(self, flag):
        for _, t in self.named_tensors():
            t.requires_grad = bool(flag)


@dataclass
class PredictionHead:
    """Linear classifier over the pooled vector."""

    name: str
    num_labels: int
    w: ad.Tensor
    b: ad.Tensor

    def named_tensors(self):
        yield "w", self.w
        yield "b", self.b

    def set_requires_grad(self, flag):
        self.w.requires_grad = bool(flag)
        self.b.requires_grad = bool(flag)


def _digest(named_tensors):
    h = hashlib.sha256()
    for name, t in named_tensors:
        h.update(name.encode("utf-8"))
        h.update(str(t.shape).encode("ascii"))
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def new_adapter_entry(model_config, name, adapter_type, config, rng):
    """Build a freshly initialized adapter for a given backbone shape."""
    _validate_name(name)
    if adapter_type not in ADAPTER_TYPES:
        raise ValueError(f"adapter_type must be one of {ADAPTER_TYPES}, got {adapter_type!r}")
    weights = []
    for _ in range(model_config.num_layers):
        weights.append({point: init_layer_weights(model_config.hidden_size, config, rng)
                        for point in config.insertion_points()})
    return AdapterEntry(name=name, adapter_type=adapter_type, config=config, weights=weights)


def entry_from_package(pkg, name=None):
    """Reconstruct a registrable adapter from a decoded package."""
    cfg = pkg.adapter_config
    weights = []
    for i in range(pkg.model_config.num_layers):
        points = {}
        for point in cfg.insertion_points():
            prefix = f"layer{i}.{point}."
            lw = AdapterLayerWeights(
                w_down=ad.tensor(pkg.tensors[prefix + "w_down"]),
                b_down=ad.tensor(pkg.tensors[prefix + "b_down"]),
                w_up=ad.tensor(pkg.tensors[prefix + "w_up"]),
                b_up=ad.tensor(pkg.tensors[prefix + "b_up"]),
            )
            if cfg.new_ln_before:
                lw.ln_before_gamma = ad.tensor(pkg.tensors[prefix + "ln_before_gamma"])
                lw.ln_before_beta = ad.tensor(pkg.tensors[prefix + "ln_before_beta"])
            if cfg.new_ln_after:
                lw.ln_after_gamma = ad.tensor(pkg.tensors[prefix + "ln_after_gamma"])
                lw.ln_after_beta = ad.tensor(pkg.tensors[prefix + "ln_after_beta"])
            points[point] = lw
        weights.append(points)
    return AdapterEntry(name=name or pkg.name, adapter_type=pkg.adapter_type,
                        config=cfg, weights=weights, trained=pkg.trained)


class AdapterModel:
    """A backbone encoder with pluggable adapters and prediction heads."""

    def __init__(self, config, weights=None, seed=0):
        self.config = config
        self._seed_root = np.random.SeedSequence(seed)
        if weights is None:
            weights = bb.init_backbone(config, np.random.default_rng(self._seed_root.spawn(1)[0]))
        self.weights = weights
        self._adapters = {}
        self._heads = {}
        self.active_adapters = []
        self.active_head = None

    # -- registry ----------------------------------------------------------

    def add_adapter(self, name, adapter_type="text_task", config="pfeiffer",
                    reduction_factor=None, seed=None):
        """Register a freshly initialized adapter (transparent until trained)."""
        _validate_name(name)
        if name in self._adapters:
            raise ValueError(f"adapter {name!r} already registered")
        if adapter_type not in ADAPTER_TYPES:
            raise ValueError(f"adapter_type must be one of {ADAPTER_TYPES}, got {adapter_type!r}")
        cfg = resolve_config(config, reduction_factor)
        rng = np.random.default_rng(self._seed_root.spawn(1)[0] if seed is None else seed)
        entry = new_adapter_entry(self.config, name, adapter_type, cfg, rng)
        self._adapters[name] = entry
        return entry

    def install_adapter(self, entry, replace=False):
        """Register an already-built :class:`AdapterEntry` (e.g. from a package)."""
        _validate_name(entry.name)
        if entry.name in self._adapters and not replace:
            raise ValueError(f"adapter {entry.name!r} already registered")
        if entry.adapter_type not in ADAPTER_TYPES:
            raise ValueError(f"adapter_type must be one of {ADAPTER_TYPES}")
        self._adapters[entry.name] = entry
        return entry

    def get_adapter(self, name):
        try:
            return self._adapters[name]
        except KeyError:
            raise UnknownAdapterError(
                f"unknown adapter {name!r}; registered: {sorted(self._adapters)}") from None

    def delete_adapter(self, name):
        self.get_adapter(name)
        del self._adapters[name]
        if name in self.active_adapters:
            self.active_adapters = [n for n in self.active_adapters if n != name]

    def list_adapters(self):
        """Registered adapter names, in registration order."""
        return list(self._adapters)

    def adapter_param_count(self, name):
        entry = self.get_adapter(name)
        return count_adapter_params(self.config, entry.config)

    # -- heads ---------------------------------------------------------------

    def add_head(self, name, num_labels):
        """Attach a zero-initialized linear head (stable early training)."""
        _validate_name(name)
        if name in self._heads:
            raise ValueError(f"head {name!r} already registered")
        if num_labels < 2:
            raise ValueError("a prediction head needs at least 2 labels")
        head = PredictionHead(
            name=name,
            num_labels=int(num_labels),
            w=ad.tensor(np.zeros((self.config.hidden_size, int(num_labels)))),
            b=ad.tensor(np.zeros(int(num_labels))),
        )
        self._heads[name] = head
        if self.active_head is None:
            self.active_head = name
        return head

    def install_head(self, head, replace=False):
        if head.name in self._heads and not replace:
            raise ValueError(f"head {head.name!r} already registered")
        if head.w.shape != (self.config.hidden_size, head.num_labels):
            raise ShapeMismatchError(
                f"head weight shape {head.w.shape} does not fit hidden_size {self.config.hidden_size}")
        self._heads[head.name] = head
        if self.active_head is None:
            self.active_head = head.name
        return head

    def get_head(self, name=None):
        name = name if name is not None else self.active_head
        if name is None or name not in self._heads:
            raise UnknownAdapterError(
                f"unknown head {name!r}; registered: {sorted(self._heads)}")
        return self._heads[name]

    def list_heads(self):
        return list(self._heads)

    # -- activation and training modes --------------------------------------

    def set_active_adapters(self, names):
        """Choose the ordered adapter stack used by :meth:`encode` (may be empty)."""
        names = list(names)
        for n in names:
            self.get_adapter(n)
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate adapter in stack: {names}")
        self.active_adapters = names

    def train_adapter(self, names):
        """Freeze the backbone and train only the named adapters (plus heads).

        Also activates the named adapters as the current stack.
        """
        if isinstance(names, str):
            names = [names]
        self.set_active_adapters(names)
        for _, t in self.weights.named_tensors():
            t.requires_grad = False
        wanted = set(names)
        for entry in self._adapters.values():
            entry.set_requires_grad(entry.name in wanted)
        for head in self._heads.values():
            head.set_requires_grad(True)

    def train_full(self):
        """Mark every backbone and head tensor trainable; adapters stay frozen."""
        for _, t in self.weights.named_tensors():
            t.requires_grad = True
        for entry in self._adapters.values():
            entry.set_requires_grad(False)
        for head in self._heads.values():
            head.set_requires_grad(True)

    def freeze_all(self):
        for _, t, _ in self.named_parameters():
            t.requires_grad = False

    # -- parameter iteration --------------------------------------------------

    def named_parameters(self, trainable_only=False):
        """Yield (qualified name, tensor, owner) with owner base/adapter/head."""
        for name, t in self.weights.named_tensors():
            if not trainable_only or t.requires_grad:
                yield f"base.{name}", t, "base"
        for entry in self._adapters.values():
            for name, t in entry.named_tensors():
                if not trainable_only or t.requires_grad:
                    yield f"adapter.{entry.name}.{name}", t, "adapter"
        for head in self._heads.values():
            for name, t in head.named_tensors():
                if not trainable_only or t.requires_grad:
                    yield f"head.{head.name}.{name}", t, "head"

    def digest_base(self):
        """Order-sensitive sha256 over every backbone tensor's bytes."""
        return _digest(self.weights.named_tensors())

    def digest_adapter(self, name):
        return _digest(self.get_adapter(name).named_tensors())

    # -- forward ----------------------------------------------------------------

    def _layer_hooks(self):
        if not self.active_adapters:
            return None
        hooks = []
        for i in range(self.config.num_layers):
            attn, out = [], []
            for name in self.active_adapters:
                entry = self._adapters[name]
                if entry.config.mh_adapter:
                    attn.append((entry.weights[i]["attention"], entry.config))
                if entry.config.output_adapter:
                    out.append((entry.weights[i]["output"], entry.config))
            hooks.append((attn, out))
        return hooks

    def encode(self, token_ids, collect_traces=False):
        """Run the encoder with the active adapter stack spliced in."""
        return bb.encode(self.config, self.weights, token_ids,
                         self._layer_hooks(), collect_traces)

    def batch_logits(self, sequences, head=None):
        """Encode each sequence, pool, and classify with the chosen head."""
        head = self.get_head(head)
        pooled = [self.encode(seq).pooled for seq in sequences]
        stacked = ad.stack_rows(pooled)
        return ad.add_bias(ad.matmul(stacked, head.w), head.b)

    def predict(self, sequences, head=None):
        """Argmax labels for a batch of token id sequences (no tape needed)."""
        logits = self.batch_logits(sequences, head)
        return [int(i) for i in np.argmax(logits.data, axis=1)]

    # -- persistence -------------------------------------------------------------

    def save_adapter(self, name, path, with_head=None):
        """Write one adapter as a portable package; returns the file's sha256.

        ``with_head`` names a registered head to bundle for standalone use.
        """
        from . import package_io
        entry = self.get_adapter(name)
        head = self.get_head(with_head) if with_head is not None else None
        return package_io.save_adapter_package(path, self.config, entry, head)

    def load_adapter(self, source, rename=None, require_compatible=True):
        """Install an adapter from a package path (or decoded package).

        The package must have been extracted from a backbone with the same
        architecture; set ``require_compatible=False`` to skip that check.
        Any bundled head is registered too (replacing a same-named head).
        Returns the registered adapter name.
        """
        from . import package_io
        pkg = source
        if not isinstance(pkg, package_io.AdapterPackage):
            pkg = package_io.load_adapter_package(source)
        if require_compatible and pkg.model_config_hash != self.config.config_hash():
            raise CompatibilityError(
                f"adapter {pkg.name!r} was extracted from model hash "
                f"{pkg.model_config_hash[:12]}..., this model is "
                f"{self.config.config_hash()[:12]}...")
        entry = entry_from_package(pkg, rename)
        self.install_adapter(entry)
        if pkg.head is not None:
            head_name, num_labels, w, b = pkg.head
            self.install_head(PredictionHead(head_name, num_labels, ad.tensor(w), ad.tensor(b)),
                              replace=True)
        return entry.name

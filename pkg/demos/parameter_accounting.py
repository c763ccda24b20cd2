"""
Counting what you actually ship
===============================

Adapters earn their keep through size: a handful of bottleneck
projections per layer instead of a full model copy per task. This walks
the arithmetic at two published encoder shapes and shows how the
reduction factor and the preset trade capacity against footprint.
"""

import tempfile
from pathlib import Path

import numpy as np

from adapterkit import package_io
from adapterkit.adapters import count_adapter_params, preset, resolve_bottleneck
from adapterkit.backbone import ModelConfig, count_backbone_params
from adapterkit.manager import AdapterModel, new_adapter_entry

base = ModelConfig(model_type="bert-base", hidden_size=768, num_layers=12,
                   num_heads=12, ffn_size=3072, vocab_size=30522, max_seq_len=512)
large = ModelConfig(model_type="bert-large", hidden_size=1024, num_layers=24,
                    num_heads=16, ffn_size=4096, vocab_size=30522, max_seq_len=512)

############################################################
# One adapter instance: down-projection, bias, up-projection, bias


h = base.hidden_size
for rate in (64, 16, 2):
    b = resolve_bottleneck(h, rate)
    per_point = h * b + b + b * h + h
    total = count_adapter_params(base, preset("pfeiffer", rate))
    print(f"rate {rate:3d}: bottleneck {b:4d}, {per_point:7d} params/layer, "
          f"{total:10,d} across {base.num_layers} layers ({total / 1e6:.1f}M)")

############################################################
# The same story at the larger shape


print()
for rate in (64, 16, 2):
    total = count_adapter_params(large, preset("pfeiffer", rate))
    print(f"large, rate {rate:3d}: {total:10,d} params ({total / 1e6:.1f}M)")

############################################################
# Presets: hooking both sublayers doubles the bill exactly


one = count_adapter_params(base, preset("pfeiffer", 16))
two = count_adapter_params(base, preset("houlsby", 16))
print(f"\npfeiffer {one:,d} vs houlsby {two:,d} (exactly 2x: {two == 2 * one})")

backbone_total = count_backbone_params(base)
print(f"backbone itself: {backbone_total:,d} params "
      f"({count_adapter_params(base, preset('pfeiffer', 16)) / backbone_total:.1%} "
      "added by one rate-16 adapter)")

############################################################
# On disk the ratio is the same: four bytes per parameter


workdir = Path(tempfile.mkdtemp(prefix="adapterkit-demo-"))
entry = new_adapter_entry(base, "probe", "text_task", preset("pfeiffer", 64),
                          np.random.default_rng(0))
path = workdir / "probe.pkg"
package_io.save_adapter_package(path, base, entry)
report = package_io.verify_package(path)
print(f"\nrate-64 package: {report['blob_bytes']:,d} payload bytes = "
      f"4 x {report['param_count']:,d} params; file {path.stat().st_size / 1e6:.2f} MB")

############################################################
# Fresh adapters are free until trained: exact identity at init


model = AdapterModel(ModelConfig(), seed=3)
ids = list(np.random.default_rng(1).integers(0, 128, size=12))
before = model.encode([int(i) for i in ids]).hidden.data
model.add_adapter("new", reduction_factor=2)
model.set_active_adapters(["new"])
after = model.encode([int(i) for i in ids]).hidden.data
print("untrained adapter changes nothing, bitwise:", np.array_equal(before, after))

"""
Train, package, share, reuse
============================

The full life of one adapter: train it on a toy task with the backbone
frozen, save it as a portable package, publish it through a local hub
index, then install it into a completely fresh model and check the two
models agree on every dev example.
"""

import tempfile
from pathlib import Path

import numpy as np

from adapterkit import hub, package_io
from adapterkit.backbone import ModelConfig
from adapterkit.manager import AdapterModel
from adapterkit.training import TrainConfig, evaluate, generate_toy_task, run_training

workdir = Path(tempfile.mkdtemp(prefix="adapterkit-demo-"))
config = ModelConfig()  # desk-scale: 64 wide, 2 layers

############################################################
# Train an adapter with the backbone frozen


task = generate_toy_task("copy-first-label", seed=11)
train_seqs, train_labels, dev_seqs, dev_labels = task.datasets(256, 64)

model = AdapterModel(config, seed=0)
model.add_head("toy", num_labels=2)
model.add_adapter("copycat", reduction_factor=2)

base_digest = model.digest_base()
result = run_training(model, train_seqs, train_labels,
                      TrainConfig(mode="adapter_only", seed=0, max_steps=200),
                      adapter_name="copycat",
                      dev_sequences=dev_seqs, dev_labels=dev_labels)
print(f"trained 200 steps, final loss {result.final_loss:.4f}, "
      f"dev accuracy {result.dev_metrics['accuracy']:.3f}")
print("backbone untouched:", model.digest_base() == base_digest)

############################################################
# Save the adapter (plus its head) as one portable file
#
# The shared backbone goes into its own checkpoint once; every adapter
# trained on top of it ships separately at a tiny fraction of the size.


package_path = workdir / "copycat.pkg"
model.save_adapter("copycat", package_path, with_head="toy")
checkpoint_path = workdir / "backbone.ckpt"
package_io.save_backbone_checkpoint(checkpoint_path, config, model.weights)
report = package_io.verify_package(package_path)
print(f"package: {report['param_count']} params, {report['blob_bytes']} payload bytes, "
      f"{report['bytes_per_param']} bytes/param")
print(f"adapter file is {package_path.stat().st_size / checkpoint_path.stat().st_size:.1%} "
      "the size of the backbone checkpoint")

############################################################
# Publish: archive + metadata card + hub index


archive_path = workdir / "copycat.zip"
entry = model.get_adapter("copycat")
card = {
    "adapter_id": "copycat",
    "adapter_type": "text_task",
    "level2": "toy",
    "level3": "copy-first-label",
    "model_type": config.model_type,
    "model_config_hash": config.config_hash(),
    "adapter_config_hash": entry.config.config_hash(),
}
card["sha256"] = package_io.pack_archive(archive_path, package_path, card)
card["url"] = archive_path.as_uri()

entries = [hub.ingest_metadata(card)]
index_text = hub.build_index(entries)
print("index has", len(hub.parse_index(index_text)), "entry")

############################################################
# A fresh process restores the shared backbone and installs the adapter


ckpt_config, ckpt_weights = package_io.load_backbone_checkpoint(checkpoint_path)
consumer = AdapterModel(ckpt_config, weights=ckpt_weights)
name, resolved, downloaded = hub.install_from_hub(
    consumer, hub.parse_index(index_text), "copy", cache_dir=workdir / "cache")
print(f"installed {name!r} (downloaded={downloaded}) for backbone "
      f"{resolved.model_config_hash[:12]}...")

consumer.set_active_adapters([name])
metrics = evaluate(consumer, dev_seqs, dev_labels)
print(f"consumer dev accuracy {metrics['accuracy']:.3f}")

mine = model.predict(dev_seqs)
theirs = consumer.predict(dev_seqs)
print("predictions agree on all dev examples:", mine == theirs)

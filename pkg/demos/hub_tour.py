"""
Finding the right adapter
=========================

A hub is only useful if a short human query lands on exactly one
compatible artifact. This builds a small index by hand and walks the
resolution rules: hierarchy browsing, substring search, ambiguity,
and the compatibility filter that hides adapters built for a
different backbone.
"""

from adapterkit import hub
from adapterkit.backbone import ModelConfig
from adapterkit.errors import AmbiguousQueryError, HubLookupError

config = ModelConfig()
live = config.config_hash()

############################################################
# Four metadata cards: two tasks, one language, one foreign backbone


def card(adapter_id, adapter_type, level2, model_hash=live):
    return hub.ingest_metadata({
        "adapter_id": adapter_id,
        "adapter_type": adapter_type,
        "level2": level2,
        "level3": adapter_id,
        "model_type": config.model_type,
        "model_config_hash": model_hash,
        "adapter_config_hash": "c" * 64,
        "sha256": "a" * 64,
        "url": f"file:///share/{adapter_id}.zip",
    })


entries = [
    card("sst-2", "text_task", "sentiment"),
    card("sts-b", "text_task", "similarity"),
    card("en", "text_lang", "wikipedia"),
    card("sst-2", "text_task", "sentiment", model_hash="f" * 64),
]

############################################################
# The index is canonical: entry order never changes the bytes


index_text = hub.build_index(entries)
print("same bytes regardless of input order:",
      hub.build_index(entries[::-1]) == index_text)

############################################################
# Browse by type, category, dataset


print()
print(hub.format_explore_tree(hub.explore_tree(entries)))

############################################################
# Queries: substring match, with exact identifiers winning ties


hit = hub.resolve(entries, "sst", model_config_hash=live)
print(f"resolve('sst') -> {hit.adapter_id} for backbone {hit.model_config_hash[:12]}...")

try:
    hub.resolve(entries, "s", model_config_hash=live)
except AmbiguousQueryError as exc:
    print(f"resolve('s') is ambiguous: {exc}")

############################################################
# Compatibility: the foreign-backbone copy never resolves here


foreign_only = [e for e in entries if e.model_config_hash != live]
try:
    hub.resolve(foreign_only, "sst", model_config_hash=live)
except HubLookupError as exc:
    print(f"incompatible entries stay hidden: {exc}")

by_type = hub.resolve(entries, "en", model_config_hash=live, adapter_type="text_lang")
print(f"type filter: resolve('en', text_lang) -> {by_type.adapter_id}")

"""Portable binary containers for adapters and backbone checkpoints.

Container layout (all integers little-endian):

    magic   b"ADPK"
    u32     format version (currently 1)
    u64     header length, then that many bytes of utf-8 header text
    u64     manifest length, then that many bytes of utf-8 manifest text
    blob    tensor payloads back to back, row-major, in manifest order
    sha256  32 raw bytes over everything above

The header carries the package kind, identity fields, dtype, the full
embedded model (and adapter) configuration descriptors, and their hashes.
Each manifest line is ``name shape offset nbytes sha256`` for one tensor,
with offsets relative to the blob start, so any single flipped byte in the
file is caught either by the trailing digest or by a per-tensor digest.

Adapter payloads are stored as float32 (4 bytes per parameter, exactly);
backbone checkpoints keep float64 so training can resume bit-exactly.
"""

import hashlib
import io
import os
import struct
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import adapters as adp
from . import autodiff as ad
from . import backbone as bb
from .errors import ChecksumError, PackageFormatError

MAGIC = b"ADPK"
FORMAT_VERSION = 1

_DTYPES = {"f32": "<f4", "f64": "<f8"}
_MODEL_SECTION = "--model-config--"
_ADAPTER_SECTION = "--adapter-config--"

ARCHIVE_PACKAGE = "adapter.pkg"
ARCHIVE_CONFIG = "adapter_config.txt"
ARCHIVE_METADATA = "metadata.yaml"


def _atomic_write_bytes(path, data):
    """Write via a sibling temp file and rename, so readers never see a torn file."""
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp-{os.getpid()}")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# low-level container encode/decode


def _pack_tensors(named_arrays, dtype_key):
    np_dtype = _DTYPES[dtype_key]
    lines = []
    chunks = []
    offset = 0
    for name, arr in named_arrays:
        raw = np.ascontiguousarray(arr, dtype=np_dtype).tobytes()
        shape = ",".join(str(d) for d in arr.shape)
        digest = hashlib.sha256(raw).hexdigest()
        lines.append(f"{name} {shape} {offset} {len(raw)} {digest}")
        chunks.append(raw)
        offset += len(raw)
    return "\n".join(lines) + "\n", b"".join(chunks)


def _encode_container(header_text, manifest_text, blob):
    hb = header_text.encode("utf-8")
    mb = manifest_text.encode("utf-8")
    body = b"".join([
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<Q", len(hb)), hb,
        struct.pack("<Q", len(mb)), mb,
        blob,
    ])
    return body + hashlib.sha256(body).digest()


@dataclass
class ManifestEntry:
    name: str
    shape: tuple
    offset: int
    nbytes: int
    sha256: str


def _parse_manifest(text):
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(" ")
        if len(parts) != 5:
            raise PackageFormatError(f"manifest line {lineno}: expected 5 fields, got {len(parts)}")
        name, shape_s, offset_s, nbytes_s, digest = parts
        try:
            shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
            offset = int(offset_s)
            nbytes = int(nbytes_s)
        except ValueError:
            raise PackageFormatError(f"manifest line {lineno}: malformed numbers") from None
        entries.append(ManifestEntry(name, shape, offset, nbytes, digest))
    return entries


def _decode_container(data):
    """Split raw bytes into (header text, manifest entries, blob); verify digests."""
    if len(data) < 4 + 4 + 8:
        raise PackageFormatError("file too short to be a package")
    if data[:4] != MAGIC:
        raise PackageFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise PackageFormatError(f"unsupported format version {version}")
    if len(data) < 32 + 16:
        raise PackageFormatError("file truncated")
    body, trailer = data[:-32], data[-32:]
    actual = hashlib.sha256(body).digest()
    if actual != trailer:
        raise ChecksumError("package digest mismatch: file is corrupt or truncated")

    pos = 8
    (header_len,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    if pos + header_len > len(body):
        raise PackageFormatError("header length exceeds file size")
    header_text = body[pos:pos + header_len].decode("utf-8")
    pos += header_len
    if pos + 8 > len(body):
        raise PackageFormatError("file truncated before manifest")
    (manifest_len,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    if pos + manifest_len > len(body):
        raise PackageFormatError("manifest length exceeds file size")
    manifest_text = body[pos:pos + manifest_len].decode("utf-8")
    pos += manifest_len
    blob = body[pos:]

    entries = _parse_manifest(manifest_text)
    expect = 0
    for e in entries:
        if e.offset != expect:
            raise PackageFormatError(f"tensor {e.name}: offset {e.offset}, expected {expect}")
        expect += e.nbytes
    if expect != len(blob):
        raise PackageFormatError(f"blob is {len(blob)} bytes, manifest claims {expect}")
    for e in entries:
        raw = blob[e.offset:e.offset + e.nbytes]
        if hashlib.sha256(raw).hexdigest() != e.sha256:
            raise ChecksumError(f"tensor {e.name}: payload digest mismatch")
    return header_text, entries, blob


def _parse_header(text):
    """Header text -> (flat key/value dict, model descriptor, adapter descriptor)."""
    lines = text.splitlines()
    if not lines or lines[0] != "adapterkit-package":
        raise PackageFormatError("missing package header banner")
    fields = {}
    sections = {"": []}
    current = ""
    for line in lines[1:]:
        if line in (_MODEL_SECTION, _ADAPTER_SECTION):
            current = line
            sections[current] = []
            continue
        if current:
            sections[current].append(line)
        elif line.strip():
            key, sep, value = line.partition("=")
            if not sep:
                raise PackageFormatError(f"malformed header line: {line!r}")
            fields[key] = value
    model_text = "\n".join(sections.get(_MODEL_SECTION, [])) + "\n"
    adapter_text = "\n".join(sections.get(_ADAPTER_SECTION, [])) + "\n"
    return fields, model_text, adapter_text


def _tensors_from_blob(entries, blob, dtype_key):
    np_dtype = np.dtype(_DTYPES[dtype_key])
    out = {}
    for e in entries:
        count = int(np.prod(e.shape, dtype=np.int64)) if e.shape else 1
        if count * np_dtype.itemsize != e.nbytes:
            raise PackageFormatError(
                f"tensor {e.name}: shape {e.shape} needs {count * np_dtype.itemsize} bytes, "
                f"manifest says {e.nbytes}")
        raw = blob[e.offset:e.offset + e.nbytes]
        arr = np.frombuffer(raw, dtype=np_dtype).reshape(e.shape)
        out[e.name] = arr.astype(np.float64)
    return out


# ---------------------------------------------------------------------------
# adapter packages


def _bool_text(flag):
    return "true" if flag else "false"


def _parse_bool(raw, where):
    if raw == "true":
        return True
    if raw == "false":
        return False
    raise PackageFormatError(f"{where}: expected true/false, got {raw!r}")


def expected_adapter_tensors(model_config, adapter_config):
    """Ordered (name, shape) pairs an adapter payload must contain exactly."""
    h = model_config.hidden_size
    b = adp.resolve_bottleneck(h, adapter_config.reduction_factor)
    per_point = [("w_down", (h, b)), ("b_down", (b,)), ("w_up", (b, h)), ("b_up", (h,))]
    if adapter_config.new_ln_before:
        per_point += [("ln_before_gamma", (h,)), ("ln_before_beta", (h,))]
    if adapter_config.new_ln_after:
        per_point += [("ln_after_gamma", (h,)), ("ln_after_beta", (h,))]
    out = []
    for i in range(model_config.num_layers):
        for point in adapter_config.insertion_points():
            for field, shape in per_point:
                out.append((f"layer{i}.{point}.{field}", shape))
    return out


def save_adapter_package(path, model_config, entry, head=None):
    """Write one adapter (optionally with its prediction head) as a package.

    Returns the sha256 hex digest of the finished file.
    """
    header = [
        "adapterkit-package",
        f"version={FORMAT_VERSION}",
        "kind=adapter",
        f"name={entry.name}",
        f"adapter_type={entry.adapter_type}",
        f"trained={_bool_text(entry.trained)}",
        "dtype=f32",
        f"model_config_hash={model_config.config_hash()}",
        f"adapter_config_hash={entry.config.config_hash()}",
    ]
    if head is not None:
        header.append(f"head_name={head.name}")
        header.append(f"head_num_labels={head.num_labels}")
    header.append(_MODEL_SECTION)
    header.extend(model_config.descriptor().splitlines())
    header.append(_ADAPTER_SECTION)
    header.extend(entry.config.descriptor().splitlines())
    header_text = "\n".join(header) + "\n"

    named = [(name, t.data) for name, t in entry.named_tensors()]
    expected = expected_adapter_tensors(model_config, entry.config)
    got = [(n, a.shape) for n, a in named]
    if got != expected:
        raise PackageFormatError("adapter tensors do not match the declared configuration")
    if head is not None:
        named.append(("head.w", head.w.data))
        named.append(("head.b", head.b.data))

    manifest_text, blob = _pack_tensors(named, "f32")
    data = _encode_container(header_text, manifest_text, blob)
    _atomic_write_bytes(path, data)
    return hashlib.sha256(data).hexdigest()


@dataclass
class AdapterPackage:
    """Decoded adapter package: identity, configs, float64 views of the payload."""

    name: str
    adapter_type: str
    trained: bool
    model_config: bb.ModelConfig
    model_config_hash: str
    adapter_config: adp.AdapterConfig
    adapter_config_hash: str
    tensors: dict  # adapter tensor name -> np.ndarray (float64 view of stored f32)
    head: tuple | None  # (head name, num_labels, w, b) when a head is bundled
    adapter_blob_bytes: int
    adapter_param_count: int
    file_sha256: str


def parse_adapter_package(data):
    """Decode and fully validate adapter package bytes."""
    header_text, entries, blob = _decode_container(data)
    fields, model_text, adapter_text = _parse_header(header_text)
    if fields.get("kind") != "adapter":
        raise PackageFormatError(f"not an adapter package (kind={fields.get('kind')!r})")
    dtype = fields.get("dtype")
    if dtype != "f32":
        raise PackageFormatError(f"adapter packages must be f32, got {dtype!r}")
    for key in ("name", "adapter_type", "trained", "model_config_hash", "adapter_config_hash"):
        if key not in fields:
            raise PackageFormatError(f"header missing {key}")

    try:
        model_config = bb.parse_model_descriptor(model_text)
        adapter_config = adp.parse_config_descriptor(adapter_text)
    except ValueError as exc:
        raise PackageFormatError(f"bad embedded configuration: {exc}") from None
    if model_config.config_hash() != fields["model_config_hash"]:
        raise PackageFormatError("embedded model configuration does not match its hash")
    if adapter_config.config_hash() != fields["adapter_config_hash"]:
        raise PackageFormatError("embedded adapter configuration does not match its hash")

    expected = expected_adapter_tensors(model_config, adapter_config)
    adapter_entries = [e for e in entries if not e.name.startswith("head.")]
    got = [(e.name, e.shape) for e in adapter_entries]
    if got != expected:
        raise PackageFormatError("manifest tensors do not match the declared configuration")

    head_entries = {e.name: e for e in entries if e.name.startswith("head.")}
    head = None
    if "head_name" in fields:
        if set(head_entries) != {"head.w", "head.b"}:
            raise PackageFormatError("bundled head must ship exactly head.w and head.b")
        try:
            num_labels = int(fields.get("head_num_labels", ""))
        except ValueError:
            raise PackageFormatError("head_num_labels must be an integer") from None
        h = model_config.hidden_size
        if head_entries["head.w"].shape != (h, num_labels) or head_entries["head.b"].shape != (num_labels,):
            raise PackageFormatError("head tensor shapes do not match head_num_labels")
    elif head_entries:
        raise PackageFormatError("head tensors present but header declares no head")

    tensors = _tensors_from_blob(entries, blob, "f32")
    head_tensors = {k: tensors.pop(k) for k in list(tensors) if k.startswith("head.")}
    if "head_name" in fields:
        head = (fields["head_name"], int(fields["head_num_labels"]),
                head_tensors["head.w"], head_tensors["head.b"])

    return AdapterPackage(
        name=fields["name"],
        adapter_type=fields["adapter_type"],
        trained=_parse_bool(fields["trained"], "trained"),
        model_config=model_config,
        model_config_hash=fields["model_config_hash"],
        adapter_config=adapter_config,
        adapter_config_hash=fields["adapter_config_hash"],
        tensors=tensors,
        head=head,
        adapter_blob_bytes=sum(e.nbytes for e in adapter_entries),
        adapter_param_count=sum(int(np.prod(e.shape, dtype=np.int64)) for e in adapter_entries),
        file_sha256=hashlib.sha256(data).hexdigest(),
    )


def load_adapter_package(path):
    return parse_adapter_package(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# backbone checkpoints


def save_backbone_checkpoint(path, model_config, weights):
    """Write the full backbone at float64 so training resumes bit-exactly."""
    header = [
        "adapterkit-package",
        f"version={FORMAT_VERSION}",
        "kind=backbone",
        "name=backbone",
        "dtype=f64",
        f"model_config_hash={model_config.config_hash()}",
        _MODEL_SECTION,
    ]
    header.extend(model_config.descriptor().splitlines())
    header_text = "\n".join(header) + "\n"
    named = [(name, t.data) for name, t in weights.named_tensors()]
    manifest_text, blob = _pack_tensors(named, "f64")
    data = _encode_container(header_text, manifest_text, blob)
    _atomic_write_bytes(path, data)
    return hashlib.sha256(data).hexdigest()


def load_backbone_checkpoint(path):
    """Read a checkpoint back into (ModelConfig, BackboneWeights)."""
    header_text, entries, blob = _decode_container(Path(path).read_bytes())
    fields, model_text, _ = _parse_header(header_text)
    if fields.get("kind") != "backbone":
        raise PackageFormatError(f"not a backbone checkpoint (kind={fields.get('kind')!r})")
    if fields.get("dtype") != "f64":
        raise PackageFormatError("backbone checkpoints must be f64")
    try:
        config = bb.parse_model_descriptor(model_text)
    except ValueError as exc:
        raise PackageFormatError(f"bad embedded configuration: {exc}") from None
    if config.config_hash() != fields.get("model_config_hash"):
        raise PackageFormatError("embedded model configuration does not match its hash")

    tensors = _tensors_from_blob(entries, blob, "f64")

    def take(name, shape):
        if name not in tensors:
            raise PackageFormatError(f"checkpoint missing tensor {name}")
        arr = tensors.pop(name)
        if arr.shape != shape:
            raise PackageFormatError(f"tensor {name}: shape {arr.shape}, expected {shape}")
        return ad.tensor(arr)

    h, f = config.hidden_size, config.ffn_size
    layers = []
    for i in range(config.num_layers):
        p = f"layer{i}."
        layers.append(bb.LayerWeights(
            w_q=take(p + "w_q", (h, h)), b_q=take(p + "b_q", (h,)),
            w_k=take(p + "w_k", (h, h)), b_k=take(p + "b_k", (h,)),
            w_v=take(p + "w_v", (h, h)), b_v=take(p + "b_v", (h,)),
            w_o=take(p + "w_o", (h, h)), b_o=take(p + "b_o", (h,)),
            attn_ln_gamma=take(p + "attn_ln_gamma", (h,)),
            attn_ln_beta=take(p + "attn_ln_beta", (h,)),
            w_ffn_in=take(p + "w_ffn_in", (h, f)), b_ffn_in=take(p + "b_ffn_in", (f,)),
            w_ffn_out=take(p + "w_ffn_out", (f, h)), b_ffn_out=take(p + "b_ffn_out", (h,)),
            ffn_ln_gamma=take(p + "ffn_ln_gamma", (h,)),
            ffn_ln_beta=take(p + "ffn_ln_beta", (h,)),
        ))
    weights = bb.BackboneWeights(
        token_embeddings=take("token_embeddings", (config.vocab_size, h)),
        position_embeddings=take("position_embeddings", (config.max_seq_len, h)),
        emb_ln_gamma=take("emb_ln_gamma", (h,)),
        emb_ln_beta=take("emb_ln_beta", (h,)),
        layers=layers,
    )
    if tensors:
        raise PackageFormatError(f"checkpoint has unexpected tensors: {sorted(tensors)}")
    return config, weights


# ---------------------------------------------------------------------------
# zip archives (package + config text + metadata)


def pack_archive(zip_path, package_path, metadata):
    """Bundle a package file with its config text and metadata into a zip.

    The archive is deterministic: fixed entry order, fixed timestamps,
    stored (uncompressed) payloads.
    """
    package_bytes = Path(package_path).read_bytes()
    pkg = parse_adapter_package(package_bytes)
    files = [
        (ARCHIVE_PACKAGE, package_bytes),
        (ARCHIVE_CONFIG, pkg.adapter_config.descriptor().encode("utf-8")),
        (ARCHIVE_METADATA, yaml.safe_dump(metadata, sort_keys=True).encode("utf-8")),
    ]
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name, data in files:
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, data)
    _atomic_write_bytes(zip_path, buf.getvalue())
    return hashlib.sha256(buf.getvalue()).hexdigest()


def read_archive(zip_path):
    """Return (package bytes, config text, metadata dict) from an archive."""
    try:
        with zipfile.ZipFile(zip_path) as zf:
            names = set(zf.namelist())
            missing = {ARCHIVE_PACKAGE, ARCHIVE_CONFIG, ARCHIVE_METADATA} - names
            if missing:
                raise PackageFormatError(f"archive missing entries: {sorted(missing)}")
            package_bytes = zf.read(ARCHIVE_PACKAGE)
            config_text = zf.read(ARCHIVE_CONFIG).decode("utf-8")
            metadata = yaml.safe_load(zf.read(ARCHIVE_METADATA).decode("utf-8"))
    except zipfile.BadZipFile as exc:
        raise PackageFormatError(f"not a zip archive: {exc}") from None
    if not isinstance(metadata, dict):
        raise PackageFormatError("archive metadata must be a mapping")
    return package_bytes, config_text, metadata


def verify_package(path):
    """Fully validate a package file and report its accounting facts."""
    pkg = load_adapter_package(path)
    return {
        "kind": "adapter",
        "name": pkg.name,
        "adapter_type": pkg.adapter_type,
        "trained": pkg.trained,
        "model_type": pkg.model_config.model_type,
        "model_config_hash": pkg.model_config_hash,
        "adapter_config_hash": pkg.adapter_config_hash,
        "param_count": pkg.adapter_param_count,
        "blob_bytes": pkg.adapter_blob_bytes,
        "bytes_per_param": pkg.adapter_blob_bytes / pkg.adapter_param_count,
        "has_head": pkg.head is not None,
        "file_sha256": pkg.file_sha256,
    }

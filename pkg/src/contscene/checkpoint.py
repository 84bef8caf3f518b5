"""Sectioned binary checkpoint container.

Layout: magic ``CSG0``, version u32, section count u32, then for each
section a length-prefixed name, a length-prefixed payload and a 64-bit
FNV-1a digest of the payload.  All integers little-endian; all parameter
values little-endian float64.

Sections appear in stream order: ``registry`` and ``config`` (canonical
JSON), ``base`` (the first domain's parameters), then one
``delta:<domain>`` per continual step.  Continuing a stream splices the
new delta after the existing sections byte-for-byte, so earlier digests
are unchanged by construction.
"""

import json
import struct

import numpy as np

from .labels import LabelRegistry, ValidationError
from .network import Generator, ModelConfig

MAGIC = b"CSG0"
VERSION = 1

FNV_OFFSET = 0xcbf29ce484222325
FNV_PRIME = 0x100000001b3


class FormatError(ValueError):
    """Raised when a checkpoint file is malformed or corrupt."""


def fnv1a64(data):
    """64-bit FNV-1a hash of a byte string."""
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def _canonical_json(doc):
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def pack_params(params):
    """Serialize parameters sorted by name: count, then name/shape/f64 data."""
    out = [struct.pack("<I", len(params))]
    for p in sorted(params, key=lambda p: p.name):
        name = p.name.encode("utf-8")
        data = np.asarray(p.data, dtype="<f8")
        out.append(struct.pack("<I", len(name)))
        out.append(name)
        out.append(struct.pack("<B", data.ndim))
        out.append(struct.pack(f"<{data.ndim}I", *data.shape))
        out.append(data.tobytes())
    return b"".join(out)


def unpack_params(blob):
    """Inverse of pack_params; returns an ordered name -> array dict."""
    view = memoryview(blob)
    off = 0

    def take(n):
        nonlocal off
        piece = view[off:off + n]
        if len(piece) != n:
            raise FormatError("truncated parameter blob")
        off += n
        return piece

    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape)
        params[name] = data.astype(np.float64)
    if off != len(view):
        raise FormatError(f"parameter blob has {len(view) - off} trailing bytes")
    return params


class Checkpoint:
    """Ordered named sections with digest bookkeeping."""

    def __init__(self, sections):
        names = [n for n, _ in sections]
        if len(set(names)) != len(names):
            raise FormatError(f"duplicate checkpoint sections in {names}")
        self.sections = [(n, bytes(p)) for n, p in sections]

    # -- structure --------------------------------------------------------

    def section(self, name):
        for n, payload in self.sections:
            if n == name:
                return payload
        raise LookupError(f"checkpoint has no section {name!r}")

    def has_section(self, name):
        return any(n == name for n, _ in self.sections)

    def digest(self, name):
        return fnv1a64(self.section(name))

    def digests(self):
        return {n: fnv1a64(p) for n, p in self.sections}

    @property
    def delta_domains(self):
        return [n.split(":", 1)[1] for n, _ in self.sections if n.startswith("delta:")]

    @property
    def next_step(self):
        return 1 + len(self.delta_domains)

    def registry(self):
        return LabelRegistry.from_snapshot(json.loads(self.section("registry")))

    def config(self):
        return ModelConfig.from_dict(json.loads(self.section("config")))

    def with_delta(self, domain, params):
        """New checkpoint: existing sections byte-identical plus one delta."""
        return Checkpoint(self.sections + [(f"delta:{domain}", pack_params(params))])

    # -- io ----------------------------------------------------------------

    def to_bytes(self):
        out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(self.sections))]
        for name, payload in self.sections:
            nb = name.encode("utf-8")
            out.append(struct.pack("<I", len(nb)))
            out.append(nb)
            out.append(struct.pack("<Q", len(payload)))
            out.append(payload)
            out.append(struct.pack("<Q", fnv1a64(payload)))
        return b"".join(out)

    def save(self, path):
        blob = self.to_bytes()
        with open(path, "wb") as fh:
            fh.write(blob)
        return blob

    @classmethod
    def from_bytes(cls, blob):
        view = memoryview(blob)
        off = 0

        def take(n):
            nonlocal off
            piece = view[off:off + n]
            if len(piece) != n:
                raise FormatError("truncated checkpoint")
            off += n
            return piece

        if bytes(take(4)) != MAGIC:
            raise FormatError("not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", take(4))
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", take(4))
        sections = []
        for _ in range(count):
            (name_len,) = struct.unpack("<I", take(4))
            name = bytes(take(name_len)).decode("utf-8")
            (payload_len,) = struct.unpack("<Q", take(8))
            payload = bytes(take(payload_len))
            (digest,) = struct.unpack("<Q", take(8))
            if fnv1a64(payload) != digest:
                raise FormatError(f"section {name!r} digest mismatch (corrupt payload)")
            sections.append((name, payload))
        if off != len(view):
            raise FormatError(f"{len(view) - off} trailing bytes after sections")
        return cls(sections)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def build_base_checkpoint(generator):
    """Checkpoint of a freshly pretrained generator (base section only)."""
    base = [p for p in generator.parameters() if p.domain_tag == "BASE"]
    if len(base) != len(generator.parameters()):
        raise ValidationError("generator already carries continual deltas")
    sections = [
        ("registry", _canonical_json(generator.registry.snapshot())),
        ("config", _canonical_json(generator.config.to_dict())),
        ("base", pack_params(base)),
    ]
    return Checkpoint(sections)


def load_generator(ckpt, seed=0):
    """Rebuild the generator a checkpoint describes, fully frozen."""
    registry = ckpt.registry()
    config = ckpt.config()
    gen = Generator(config, registry, seed=seed)
    _load_section_into(gen, ckpt.section("base"), "BASE")
    gen.freeze_base()
    for i, domain in enumerate(ckpt.delta_domains, start=1):
        gen.extend_step(i, domain)
        _load_section_into(gen, ckpt.section(f"delta:{domain}"), domain)
    for p in gen.parameters():
        if p.trainable:
            p.freeze()
    return gen


def _load_section_into(gen, payload, domain_tag):
    stored = unpack_params(payload)
    live = {p.name: p for p in gen.parameters() if p.domain_tag == domain_tag}
    if set(stored) != set(live):
        missing = sorted(set(live) - set(stored))
        extra = sorted(set(stored) - set(live))
        raise FormatError(
            f"section for {domain_tag!r} does not match the model "
            f"(missing {missing[:3]}, extra {extra[:3]})")
    for name, value in stored.items():
        p = live[name]
        if p.data.shape != value.shape:
            raise FormatError(
                f"{name}: stored shape {value.shape} != model shape {p.data.shape}")
        p.data = value


def section_param_count(payload):
    return sum(v.size for v in unpack_params(payload).values())


def count_params(ckpt, step):
    """(new_params, total_params) through the given step, in value counts."""
    domains = ckpt.delta_domains
    if step < 0 or step > len(domains):
        raise LookupError(f"checkpoint has steps 0..{len(domains)}, asked for {step}")
    base = section_param_count(ckpt.section("base"))
    if step == 0:
        return base, base
    new = section_param_count(ckpt.section(f"delta:{domains[step - 1]}"))
    total = base + sum(
        section_param_count(ckpt.section(f"delta:{d}")) for d in domains[:step])
    return new, total

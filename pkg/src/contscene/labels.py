"""Continual label space: class remapping across a stream of domains.

Each domain in the stream declares rows (name, original id, continual id).
Classes already known from earlier domains keep their continual ids; ids
not seen before are the step's "new" classes and must extend the id range
contiguously.  Several original ids may map to the same continual id
inside one domain (union classes); an original id of -1 marks a class
that is registered for the domain but never appears in its data.
"""

import csv
import io
from dataclasses import dataclass

import numpy as np


class ValidationError(ValueError):
    """Raised for malformed mapping tables, maps or configs."""


@dataclass(frozen=True)
class ClassDef:
    name: str
    orig_id: int
    cont_id: int
    domain: str


@dataclass(frozen=True)
class StepInfo:
    index: int
    domain: str
    c_old: int
    c_new: int
    new_ids: tuple


@dataclass(frozen=True)
class SemanticMap:
    """H x W map of continual class ids."""
    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        if self.labels.ndim != 2:
            raise ValidationError(f"semantic map must be 2-d, got shape {self.labels.shape}")

    @property
    def height(self):
        return self.labels.shape[0]

    @property
    def width(self):
        return self.labels.shape[1]


@dataclass(frozen=True)
class OneHotSplit:
    """One-hot encoding split into old and new channel groups.

    old: [1, C_o, H, W]; new: [1, C_n, H, W]; new_mask: [1, 1, H, W].
    Pixels of old classes are all-zero in ``new`` and vice versa.
    """
    old: np.ndarray
    new: np.ndarray
    new_mask: np.ndarray


class LabelRegistry:
    """Immutable record of the domain stream and its class id layout."""

    def __init__(self, domains, defs, steps):
        self.domains = tuple(domains)
        self.defs = tuple(defs)
        self.steps = tuple(steps)
        self._step_by_domain = {s.domain: s.index for s in steps}
        self._remap = {}
        for d in defs:
            self._remap.setdefault((d.domain, d.orig_id), []).append(d.cont_id)
        self._classes_by_domain = {}
        for d in defs:
            self._classes_by_domain.setdefault(d.domain, set()).add(d.cont_id)

    def step_of_domain(self, domain):
        if domain not in self._step_by_domain:
            raise LookupError(f"unknown domain {domain!r}; stream is {list(self.domains)}")
        return self._step_by_domain[domain]

    def domain_of_step(self, step):
        if not 0 <= step < len(self.steps):
            raise LookupError(f"step {step} outside stream of {len(self.steps)} domains")
        return self.steps[step].domain

    def c_total(self, step):
        s = self.steps[step]
        return s.c_old + s.c_new

    def new_range(self, step):
        s = self.steps[step]
        return s.c_old, s.c_old + s.c_new

    def classes_of_domain(self, domain):
        return frozenset(self._classes_by_domain[domain])

    def snapshot(self):
        """JSON-serializable representation (canonical row order)."""
        return {
            "domains": list(self.domains),
            "defs": [[d.domain, d.name, d.orig_id, d.cont_id] for d in self.defs],
        }

    @classmethod
    def from_snapshot(cls, snap):
        rows = [(str(d), str(n), int(o), int(c)) for d, n, o, c in snap["defs"]]
        return _build_registry(rows)

    def truncated(self, step):
        """Registry covering only steps 0..step of the stream."""
        keep = set(self.domains[:step + 1])
        rows = [(d.domain, d.name, d.orig_id, d.cont_id) for d in self.defs
                if d.domain in keep]
        return _build_registry(rows)

    def collapsed(self, domain, step):
        """Single-domain registry exposing every class through ``step``.

        Used to train a from-scratch baseline that must accept the same
        masks as the continual model at that step.
        """
        c = self.c_total(step)
        rows = [(domain, f"class{i}", i, i) for i in range(c)]
        return _build_registry(rows)


def load_mapping(table_text):
    """Parse a mapping CSV (columns domain,name,orig_id,cont_id) into a registry."""
    reader = csv.reader(io.StringIO(table_text))
    try:
        header = next(reader)
    except StopIteration:
        raise ValidationError("mapping table is empty") from None
    if [h.strip() for h in header] != ["domain", "name", "orig_id", "cont_id"]:
        raise ValidationError(f"unexpected mapping header {header}")
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 4:
            raise ValidationError(f"row {lineno}: expected 4 columns, got {len(row)}")
        domain, name = row[0].strip(), row[1].strip()
        try:
            orig, cont = int(row[2]), int(row[3])
        except ValueError:
            raise ValidationError(f"row {lineno}: ids must be integers, got {row[2:]}") from None
        if cont < 0:
            raise ValidationError(f"row {lineno}: continual id must be non-negative")
        rows.append((domain, name, orig, cont, lineno))
    return _build_registry(rows)


def _build_registry(rows):
    domains = []
    grouped = {}
    for row in rows:
        domain = row[0]
        if domain not in grouped:
            if domains and domain in domains[:-1]:
                raise ValidationError(f"domain {domain!r} rows are not contiguous")
            domains.append(domain)
            grouped[domain] = []
        elif domain != domains[-1]:
            raise ValidationError(f"domain {domain!r} rows are not contiguous")
        grouped[domain].append(row)
    if not domains:
        raise ValidationError("mapping table has no rows")

    defs = []
    steps = []
    seen_ids = set()
    for index, domain in enumerate(domains):
        orig_to_cont = {}
        domain_ids = set()
        for row in grouped[domain]:
            _, name, orig, cont = row[:4]
            lineno = row[4] if len(row) > 4 else "?"
            if orig >= 0:
                if orig in orig_to_cont and orig_to_cont[orig] != cont:
                    raise ValidationError(
                        f"row {lineno}: conflicting continual id for ({domain}, {orig}): "
                        f"{orig_to_cont[orig]} vs {cont}")
                orig_to_cont[orig] = cont
            defs.append(ClassDef(name=name, orig_id=orig, cont_id=cont, domain=domain))
            domain_ids.add(cont)
        new_ids = sorted(domain_ids - seen_ids)
        c_old = len(seen_ids)
        expected = list(range(c_old, c_old + len(new_ids)))
        if new_ids != expected:
            raise ValidationError(
                f"domain {domain!r}: new continual ids {new_ids} do not extend the "
                f"range contiguously (expected {expected})")
        steps.append(StepInfo(index=index, domain=domain, c_old=c_old,
                              c_new=len(new_ids), new_ids=tuple(new_ids)))
        seen_ids |= set(new_ids)
    total = len(seen_ids)
    if seen_ids != set(range(total)):
        missing = sorted(set(range(max(seen_ids) + 1)) - seen_ids)
        raise ValidationError(f"gap in continual id range: missing {missing}")
    return LabelRegistry(domains, defs, steps)


def load_mapping_file(path):
    with open(path, "r", encoding="utf-8") as fh:
        return load_mapping(fh.read())


def remap(registry, domain, orig_id):
    """Continual id for (domain, orig_id); raises LookupError when unknown."""
    hits = registry._remap.get((domain, orig_id))
    if not hits:
        raise LookupError(f"({domain!r}, {orig_id}) is not a registered class")
    unique = sorted(set(hits))
    if len(unique) > 1:
        raise LookupError(
            f"({domain!r}, {orig_id}) is ambiguous: continual ids {unique}")
    return unique[0]


def one_hot(smap, n_classes):
    """[1, n_classes, H, W] float64 one-hot encoding of a semantic map."""
    labels = smap.labels
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValidationError(
            f"map ids span [{labels.min()}, {labels.max()}], valid range is "
            f"[0, {n_classes - 1}]")
    h, w = labels.shape
    out = np.zeros((1, n_classes, h, w))
    out[0, labels.ravel(), np.repeat(np.arange(h), w), np.tile(np.arange(w), h)] = 1.0
    return out


def encode_split(smap, registry, step):
    """Split one-hot encoding at the old/new channel boundary of ``step``."""
    if step < 1:
        raise ValidationError(f"encode_split needs a continual step (got step {step})")
    if step >= len(registry.steps):
        raise ValidationError(f"step {step} outside stream of {len(registry.steps)} domains")
    c_old, c_new = registry.steps[step].c_old, registry.steps[step].c_new
    c = c_old + c_new
    labels = smap.labels
    if labels.max() >= c:
        raise ValidationError(
            f"map contains id {labels.max()} from a step after {step} (limit {c - 1})")
    full = one_hot(smap, c)
    new_mask = (labels >= c_old).astype(np.float64)[None, None]
    return OneHotSplit(old=full[:, :c_old], new=full[:, c_old:], new_mask=new_mask)


def class_frequencies(maps, n_classes):
    """Inverse-frequency class weights over a dataset of semantic maps.

    weight_c = total_pixels / (n_classes * count_c); classes that never
    appear get weight 0 (they contribute no loss terms).
    """
    if not maps:
        raise ValidationError("class_frequencies needs a non-empty dataset")
    counts = np.zeros(n_classes)
    total = 0
    for m in maps:
        labels = m.labels
        if labels.max() >= n_classes:
            raise ValidationError(
                f"map id {labels.max()} outside the {n_classes}-class space")
        counts += np.bincount(labels.ravel(), minlength=n_classes)
        total += labels.size
    weights = np.zeros(n_classes)
    present = counts > 0
    weights[present] = total / (n_classes * counts[present])
    return weights

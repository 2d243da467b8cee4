"""Synthetic desk-scale tasks with known ground-truth relevance, plus file I/O.

Three generators mirror the three experiment families: a planted-patch image
classification task, a planted-keyword sequence classification task, and a
character-count regression task. Every example records exactly which input
positions carry signal, so mask quality is checkable against ground truth.

Datasets serialize as a directory of IDX tensors plus a key=value manifest.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

TASK_KINDS = ("planted_patch", "keyword_seq", "char_count")

# Keyword task vocabulary layout: ids 0-4 carry positive polarity, 5-9
# negative, everything above is neutral filler.
POSITIVE_TOKENS = tuple(range(0, 5))
NEGATIVE_TOKENS = tuple(range(5, 10))
_FILLER_LETTERS = "ABDEFGHIJKLMPQRSTUVWXYZ"  # skips C, N, O


@dataclass
class TaskSpec:
    """Parameters of one synthetic dataset; generation is pure in ``spec``."""

    kind: str
    n_examples: int
    seed: int = 0
    noise: float = 1.0
    image_size: int = 16
    channels: int = 1
    classes: int = 2
    patch: int = 3
    seq_len: int = 30
    vocab: int = 50
    alphabet: int = 12

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        for name in ("n_examples", "image_size", "channels", "classes", "patch", "seq_len", "vocab", "alphabet"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.noise <= 1.0:
            raise ConfigError(f"noise must be in [0, 1], got {self.noise}")

    def params(self) -> dict:
        keys = {
            "planted_patch": ("noise", "image_size", "channels", "classes", "patch"),
            "keyword_seq": ("seq_len", "vocab"),
            "char_count": ("noise", "seq_len", "alphabet"),
        }[self.kind]
        out = {"n": self.n_examples, "seed": self.seed}
        out.update({k: getattr(self, k) for k in keys})
        return out


@dataclass
class LabeledDataset:
    """Inputs, targets, and per-example ground-truth relevant index sets."""

    inputs: np.ndarray
    targets: np.ndarray
    relevance: list
    split: str = "train"
    task: str = "planted_patch"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.targets)
        if len(self.inputs) != n or len(self.relevance) != n:
            raise ConfigError("inputs, targets, and relevance must have equal counts")
        bound = int(np.prod(self.inputs.shape[2:])) if self.inputs.ndim > 2 else self.inputs.shape[1]
        for r in self.relevance:
            r = np.asarray(r)
            if r.size == 0:
                raise ConfigError("relevance sets must be nonempty")
            if r.min() < 0 or r.max() >= bound:
                raise ConfigError(f"relevance index out of bounds [0, {bound})")

    def __len__(self):
        return len(self.targets)

    @property
    def is_classification(self) -> bool:
        return np.issubdtype(self.targets.dtype, np.integer)


def split_dataset(ds: LabeledDataset, train_frac: float = 0.8):
    """Deterministic leading/trailing partition into train and test sets."""
    if not 0.0 < train_frac < 1.0:
        raise ConfigError("train_frac must be in (0, 1)")
    n = len(ds)
    k = int(round(n * train_frac))
    if k == 0 or k == n:
        raise ConfigError(f"split of {n} examples at {train_frac} leaves an empty side")

    def piece(sl, split):
        return LabeledDataset(
            inputs=ds.inputs[sl].copy(),
            targets=ds.targets[sl].copy(),
            relevance=[np.asarray(r).copy() for r in ds.relevance[sl]],
            split=split,
            task=ds.task,
            params=dict(ds.params),
        )

    return piece(slice(0, k), "train"), piece(slice(k, n), "test")


# ---------------------------------------------------------------------------
# Planted patch images


def class_templates(classes: int, patch: int = 3) -> list[np.ndarray]:
    """Fixed binary {0.1, 0.9} patch patterns, pairwise L2 distance >= 1."""
    g = np.random.default_rng(51966)  # template source is independent of data seed
    templates: list[np.ndarray] = []
    while len(templates) < classes:
        cand = np.where(g.random((patch, patch)) < 0.5, 0.1, 0.9)
        if all(np.linalg.norm(cand - t) >= 1.0 for t in templates):
            templates.append(cand)
    return templates


def gen_planted_patch(spec: TaskSpec) -> LabeledDataset:
    """Uniform-noise images with one class-coded patch at a random location.

    Background pixels are ``noise * U(0, 1)``; the patch replaces pixels on
    every channel. Relevance holds the patch's flat spatial indices. Labels
    are balanced.
    """
    if spec.kind != "planted_patch":
        raise ConfigError(f"spec kind {spec.kind!r} is not planted_patch")
    size, p = spec.image_size, spec.patch
    if p > size:
        raise ConfigError(f"patch {p} larger than image {size}")
    if spec.classes < 2:
        raise ConfigError("planted_patch needs at least 2 classes")
    rng = np.random.default_rng(spec.seed)
    n = spec.n_examples
    templates = class_templates(spec.classes, p)

    counts = [n // spec.classes] * spec.classes
    for c in range(n % spec.classes):
        counts[c] += 1
    labels = rng.permutation(np.repeat(np.arange(spec.classes), counts)).astype(np.int32)

    images = spec.noise * rng.random((n, spec.channels, size, size))
    relevance = []
    span = size - p + 1
    for i in range(n):
        r, c = rng.integers(0, span, size=2)
        images[i, :, r : r + p, c : c + p] = templates[labels[i]]
        rows, cols = np.mgrid[r : r + p, c : c + p]
        relevance.append((rows * size + cols).ravel().astype(np.int64))
    return LabeledDataset(images, labels, relevance, "train", "planted_patch", spec.params())


# ---------------------------------------------------------------------------
# Keyword sequences


def gen_keyword_seq(spec: TaskSpec) -> LabeledDataset:
    """Neutral filler sequences with 1-3 planted polarity tokens.

    The label is the majority polarity of the planted tokens; ties are
    regenerated. Relevance holds the planted positions.
    """
    if spec.kind != "keyword_seq":
        raise ConfigError(f"spec kind {spec.kind!r} is not keyword_seq")
    if spec.vocab < 11:
        raise ConfigError("vocab must be >= 11: 10 planted tokens plus neutral filler")
    if spec.seq_len < 8:
        raise ConfigError("seq_len must be >= 8")
    rng = np.random.default_rng(spec.seed)
    n, t = spec.n_examples, spec.seq_len
    seqs = np.empty((n, t), dtype=np.int32)
    labels = np.empty(n, dtype=np.int32)
    relevance = []
    for i in range(n):
        while True:
            k = int(rng.integers(1, 4))
            polarity = rng.integers(0, 2, size=k)
            pos_votes = int(polarity.sum())
            if 2 * pos_votes != k:
                break
        seq = rng.integers(10, spec.vocab, size=t).astype(np.int32)
        positions = np.sort(rng.choice(t, size=k, replace=False))
        for j, pol in zip(positions, polarity):
            pool = POSITIVE_TOKENS if pol == 1 else NEGATIVE_TOKENS
            seq[j] = pool[int(rng.integers(0, len(pool)))]
        seqs[i] = seq
        labels[i] = 1 if 2 * pos_votes > k else 0
        relevance.append(positions.astype(np.int64))
    return LabeledDataset(seqs, labels, relevance, "train", "keyword_seq", spec.params())


def token_names(vocab: int) -> list[str]:
    """Readable token strings: pos0-pos4, neg0-neg4, then w10, w11, ..."""
    names = [f"pos{i}" for i in range(5)] + [f"neg{i}" for i in range(5)]
    names += [f"w{i}" for i in range(10, vocab)]
    return names


# ---------------------------------------------------------------------------
# Character-count regression


def alphabet_chars(alphabet: int) -> str:
    """Characters by id: O, N, C carry signal, the rest are filler."""
    if alphabet < 6:
        raise ConfigError("alphabet must hold at least 6 characters")
    if alphabet > 3 + len(_FILLER_LETTERS):
        raise ConfigError(f"alphabet larger than {3 + len(_FILLER_LETTERS)} not supported")
    return "ONC" + _FILLER_LETTERS[: alphabet - 3]


def count_target(ids: np.ndarray) -> float:
    """#O + #N - #C for a sequence of character ids (noise-free target)."""
    ids = np.asarray(ids)
    return float(np.sum(ids == 0) + np.sum(ids == 1) - np.sum(ids == 2))


def gen_char_count(spec: TaskSpec) -> LabeledDataset:
    """Random character strings; target counts hydrophilic-style characters.

    y = (#O + #N) - #C + N(0, noise). Relevance holds the O/N/C positions;
    strings without any of them are redrawn so relevance is never empty.
    """
    if spec.kind != "char_count":
        raise ConfigError(f"spec kind {spec.kind!r} is not char_count")
    alphabet_chars(spec.alphabet)  # validates size
    rng = np.random.default_rng(spec.seed)
    n, t = spec.n_examples, spec.seq_len
    seqs = np.empty((n, t), dtype=np.int32)
    targets = np.empty(n, dtype=np.float64)
    relevance = []
    for i in range(n):
        while True:
            seq = rng.integers(0, spec.alphabet, size=t).astype(np.int32)
            rel = np.flatnonzero(seq <= 2)
            if rel.size:
                break
        seqs[i] = seq
        targets[i] = count_target(seq) + spec.noise * rng.standard_normal()
        relevance.append(rel.astype(np.int64))
    return LabeledDataset(seqs, targets, relevance, "train", "char_count", spec.params())


def generate(spec: TaskSpec) -> LabeledDataset:
    return {
        "planted_patch": gen_planted_patch,
        "keyword_seq": gen_keyword_seq,
        "char_count": gen_char_count,
    }[spec.kind](spec)


# ---------------------------------------------------------------------------
# IDX tensor files

IDX_MAGIC = b"\x00\x00"
IDX_FLOAT64 = 0x0D
IDX_INT32 = 0x0C


def write_idx(path, arr: np.ndarray):
    """Write a dense tensor in the IDX container used by this package.

    Layout: two zero magic bytes, a type byte (0x0D float64, 0x0C int32),
    a dimension-count byte, big-endian uint32 dimension sizes, then the
    big-endian payload.
    """
    arr = np.asarray(arr)
    if np.issubdtype(arr.dtype, np.floating):
        if not np.all(np.isfinite(arr)):
            raise FormatError("refusing to write non-finite values")
        type_byte, payload = IDX_FLOAT64, arr.astype(">f8").tobytes()
    elif np.issubdtype(arr.dtype, np.integer):
        if arr.size and (arr.min() < -(2**31) or arr.max() >= 2**31):
            raise FormatError("integer values exceed int32 range")
        type_byte, payload = IDX_INT32, arr.astype(">i4").tobytes()
    else:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("too many dimensions for IDX")
    header = IDX_MAGIC + bytes([type_byte, arr.ndim])
    header += b"".join(struct.pack(">I", d) for d in arr.shape)
    Path(path).write_bytes(header + payload)


def read_idx(path) -> np.ndarray:
    """Read an IDX tensor; raises FormatError with a byte offset on damage."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"truncated IDX header at byte offset {len(raw)} in {path}")
    if raw[:2] != IDX_MAGIC:
        raise FormatError(f"bad IDX magic at byte offset 0 in {path}")
    type_byte, ndim = raw[2], raw[3]
    if type_byte not in (IDX_FLOAT64, IDX_INT32):
        raise FormatError(f"unknown IDX type byte 0x{type_byte:02X} at byte offset 2 in {path}")
    need = 4 + 4 * ndim
    if len(raw) < need:
        raise FormatError(f"truncated IDX dimension block at byte offset {len(raw)} in {path}")
    dims = struct.unpack(f">{ndim}I", raw[4:need]) if ndim else ()
    count = int(np.prod(dims)) if dims else 1
    itemsize = 8 if type_byte == IDX_FLOAT64 else 4
    expected = need + count * itemsize
    if len(raw) != expected:
        raise FormatError(
            f"IDX payload ends at byte offset {len(raw)}, expected {expected} in {path}"
        )
    dtype = ">f8" if type_byte == IDX_FLOAT64 else ">i4"
    arr = np.frombuffer(raw, dtype=dtype, offset=need, count=count).reshape(dims)
    return arr.astype(np.float64 if type_byte == IDX_FLOAT64 else np.int32)


# ---------------------------------------------------------------------------
# Dataset directories

MANIFEST_NAME = "manifest.txt"
COMPONENT_FILES = ("inputs.idx", "targets.idx", "relevance.idx")


def pack_relevance(relevance) -> np.ndarray:
    """Pad index sets to a fixed-width int32 matrix with -1 sentinels."""
    width = max(len(r) for r in relevance)
    out = np.full((len(relevance), width), -1, dtype=np.int32)
    for i, r in enumerate(relevance):
        out[i, : len(r)] = r
    return out


def unpack_relevance(mat: np.ndarray) -> list:
    return [row[row >= 0].astype(np.int64) for row in mat]


def write_manifest(dirpath, ds: LabeledDataset):
    """Write the key=value manifest listing the dataset's component files."""
    lines = [f"task={ds.task}", f"split={ds.split}"]
    for k in sorted(ds.params):
        lines.append(f"{k}={ds.params[k]}")
    lines += [f"inputs={COMPONENT_FILES[0]}", f"targets={COMPONENT_FILES[1]}", f"relevance={COMPONENT_FILES[2]}"]
    (Path(dirpath) / MANIFEST_NAME).write_text("\n".join(lines) + "\n")


def read_manifest(dirpath) -> dict:
    path = Path(dirpath) / MANIFEST_NAME
    if not path.is_file():
        raise FormatError(f"missing manifest {path}")
    entries = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError(f"manifest line {lineno} is not key=value: {line!r}")
        k, v = line.split("=", 1)
        entries[k.strip()] = v.strip()
    return entries


def save_dataset(dirpath, ds: LabeledDataset):
    """Write inputs/targets/relevance IDX files plus the manifest."""
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    write_idx(d / COMPONENT_FILES[0], ds.inputs)
    write_idx(d / COMPONENT_FILES[1], ds.targets)
    write_idx(d / COMPONENT_FILES[2], pack_relevance(ds.relevance))
    write_manifest(d, ds)


def load_dataset(dirpath) -> LabeledDataset:
    """Load a dataset directory; missing component files are format errors."""
    d = Path(dirpath)
    meta = read_manifest(d)
    for key in ("inputs", "targets", "relevance"):
        if key not in meta:
            raise FormatError(f"manifest in {d} lacks the {key} entry")
        if not (d / meta[key]).is_file():
            raise FormatError(f"manifest references missing file {d / meta[key]}")
    inputs = read_idx(d / meta["inputs"])
    targets = read_idx(d / meta["targets"])
    relevance = unpack_relevance(read_idx(d / meta["relevance"]))
    params = {
        k: _coerce(v)
        for k, v in meta.items()
        if k not in ("task", "split", "inputs", "targets", "relevance")
    }
    return LabeledDataset(
        inputs=inputs,
        targets=targets,
        relevance=relevance,
        split=meta.get("split", "train"),
        task=meta.get("task", "planted_patch"),
        params=params,
    )


def _coerce(value: str):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            continue
    return value

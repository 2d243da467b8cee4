"""Model files and result exports (PGM heatmaps, token weights, metrics).

Model file layout, version 1, little-endian throughout:

    magic "MSKM" | version u16 | header_len u32 | header text (one layer
    per line: kind then key=value hyperparams) | entry count u32 | entries
    | crc32 u32 over all prior bytes

Each entry is: name_len u16, name utf8, trainable u8, ndim u8, dims u32
each, float64 payload. Entries cover parameters and buffers; loading
assigns by name and restores the trainable flag.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError, ShapeError, VersionError
from .evaluation import MetricsReport
from .layers import LayerSpec, ModelGraph, graph_from_specs

MODEL_MAGIC = b"MSKM"
MODEL_VERSION = 1


def _format_value(v) -> str:
    if isinstance(v, bool):
        raise FormatError("boolean hyperparams are not part of the format")
    if isinstance(v, (tuple, list)):
        return "x".join(str(int(s)) for s in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(key: str, raw: str):
    if key == "shape":
        return tuple(int(p) for p in raw.split("x"))
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


def _header_text(model: ModelGraph) -> str:
    lines = []
    for spec in model.specs():
        parts = [spec.kind] + [f"{k}={_format_value(v)}" for k, v in spec.hyperparams.items()]
        lines.append(" ".join(parts))
    return "\n".join(lines)


def _parse_header(text: str) -> list[LayerSpec]:
    specs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        kind, hyper = parts[0], {}
        for p in parts[1:]:
            if "=" not in p:
                raise FormatError(f"model header line {lineno}: bad token {p!r}")
            k, v = p.split("=", 1)
            hyper[k] = _parse_value(k, v)
        specs.append(LayerSpec(kind, hyper))
    return specs


def save_model(path, model: ModelGraph):
    """Serialize layer specs plus all parameters and buffers, CRC-sealed."""
    header = _header_text(model).encode("utf-8")
    blob = bytearray()
    blob += MODEL_MAGIC
    blob += struct.pack("<H", MODEL_VERSION)
    blob += struct.pack("<I", len(header))
    blob += header
    entries = [(n, t, model.trainable[n]) for n, t in model.params.items()]
    entries += [(n, t, False) for n, t in model.buffers.items()]
    blob += struct.pack("<I", len(entries))
    for name, tensor, trainable in entries:
        nb = name.encode("utf-8")
        blob += struct.pack("<H", len(nb))
        blob += nb
        blob += struct.pack("<B", 1 if trainable else 0)
        blob += struct.pack("<B", tensor.ndim)
        for d in tensor.shape:
            blob += struct.pack("<I", d)
        blob += tensor.data.astype("<f8").tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(blob))


def load_model(path, mode: str = "train") -> ModelGraph:
    """Rebuild a model from disk; layer specs and parameters round-trip bitwise."""
    raw = Path(path).read_bytes()
    if len(raw) < 14:
        raise FormatError(f"model file too short ({len(raw)} bytes): {path}")
    if raw[:4] != MODEL_MAGIC:
        raise FormatError(f"bad model magic in {path}")
    stored_crc = struct.unpack("<I", raw[-4:])[0]
    actual_crc = zlib.crc32(raw[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise CorruptionError(
            f"crc mismatch in {path}: stored 0x{stored_crc:08X}, computed 0x{actual_crc:08X}"
        )
    version = struct.unpack("<H", raw[4:6])[0]
    if version > MODEL_VERSION:
        raise VersionError(f"model version {version} is newer than supported {MODEL_VERSION}")
    off = 6
    (header_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    header = raw[off : off + header_len].decode("utf-8")
    off += header_len
    specs = _parse_header(header)
    model = graph_from_specs(specs, seed=None, mode=mode)

    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    seen = set()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        trainable, ndim = struct.unpack_from("<BB", raw, off)
        off += 2
        dims = struct.unpack_from(f"<{ndim}I", raw, off) if ndim else ()
        off += 4 * ndim
        n_vals = int(np.prod(dims)) if dims else 1
        payload = np.frombuffer(raw, dtype="<f8", offset=off, count=n_vals).reshape(dims)
        off += 8 * n_vals
        seen.add(name)
        if name in model.params:
            target = model.params[name]
            if target.shape != tuple(dims):
                raise FormatError(
                    f"parameter {name} has shape {tuple(dims)} on disk, expected {target.shape}"
                )
            target.data = payload.astype(np.float64)
            target.requires_grad = bool(trainable)
            target.grad = np.zeros_like(target.data) if trainable else None
            model.trainable[name] = bool(trainable)
        elif name in model.buffers:
            target = model.buffers[name]
            if target.shape != tuple(dims):
                raise FormatError(
                    f"buffer {name} has shape {tuple(dims)} on disk, expected {target.shape}"
                )
            target.data = payload.astype(np.float64)
        else:
            raise FormatError(f"unknown entry {name!r} in model file")
    missing = (set(model.params) | set(model.buffers)) - seen
    if missing:
        raise FormatError(f"model file lacks entries for {sorted(missing)}")
    if off != len(raw) - 4:
        raise FormatError(f"trailing bytes after entries at offset {off} in {path}")
    return model


# ---------------------------------------------------------------------------
# Exports


def export_pgm(mask, path):
    """Plain-text PGM (P2) of a [H, W] mask; values clamp to [0, 1].

    Pixels are round-half-away-from-zero of 255 * value.
    """
    arr = mask.data if hasattr(mask, "requires_grad") else np.asarray(mask, dtype=float)
    if arr.ndim != 2:
        raise ShapeError(f"pgm export expects a 2-d mask, got shape {arr.shape}")
    clamped = np.clip(arr, 0.0, 1.0)
    pixels = np.floor(255.0 * clamped + 0.5).astype(int)
    h, w = pixels.shape
    lines = [f"P2", f"{w} {h}", "255"]
    lines += [" ".join(str(v) for v in row) for row in pixels]
    Path(path).write_text("\n".join(lines) + "\n")


def export_token_weights(tokens, mask, path, label=None, polarity_names=("negative", "positive")):
    """TSV of token/weight rows; labeled sequences get a top-5 summary line."""
    arr = mask.data if hasattr(mask, "requires_grad") else np.asarray(mask, dtype=float)
    arr = arr.reshape(-1)
    if len(tokens) != arr.size:
        raise ShapeError(f"{len(tokens)} tokens but {arr.size} mask values")
    lines = ["token\tweight"]
    lines += [f"{tok}\t{w:.6f}" for tok, w in zip(tokens, arr)]
    if label is not None and len(tokens):
        top = top_tokens_by_mean_weight(tokens, arr, 5)
        lines.append(f"#top5_{polarity_names[int(label)]}\t" + ",".join(top))
    Path(path).write_text("\n".join(lines) + "\n")


def top_tokens_by_mean_weight(tokens, weights, top_n=5) -> list[str]:
    """Distinct tokens ranked by descending mean weight; ties break by token."""
    sums: dict[str, list] = {}
    for tok, w in zip(tokens, weights):
        entry = sums.setdefault(tok, [0.0, 0])
        entry[0] += float(w)
        entry[1] += 1
    ranked = sorted(sums.items(), key=lambda kv: (-(kv[1][0] / kv[1][1]), kv[0]))
    return [tok for tok, _ in ranked[:top_n]]


def export_token_summary(token_lists, masks, labels, path, top_n=5, polarity_names=("negative", "positive")):
    """Aggregate top tokens per polarity across many labeled sequences."""
    buckets = {0: ([], []), 1: ([], [])}
    for toks, m, lab in zip(token_lists, masks, labels):
        arr = m.data if hasattr(m, "requires_grad") else np.asarray(m, dtype=float)
        buckets[int(lab)][0].extend(toks)
        buckets[int(lab)][1].extend(arr.reshape(-1).tolist())
    lines = ["polarity\trank\ttoken"]
    for lab in (1, 0):
        toks, ws = buckets[lab]
        if not toks:
            continue
        for rank, tok in enumerate(top_tokens_by_mean_weight(toks, ws, top_n), start=1):
            lines.append(f"{polarity_names[lab]}\t{rank}\t{tok}")
    Path(path).write_text("\n".join(lines) + "\n")


def export_metrics(report: MetricsReport, path):
    """Fixed-key JSON serialization of a metrics report."""
    Path(path).write_text(report.to_json())

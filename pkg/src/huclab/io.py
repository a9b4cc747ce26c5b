"""Bit-exact on-disk formats.

Feature file   ("HUCF"): magic, version u16, rows u32, cols u32, then
                         row-major float64, all little-endian.
Checkpoint     ("HUCP"): magic, version u16, header length u32, JSON header
                         (arch + head/class counts), then every parameter
                         tensor in declaration order as raw float64.
Codebook       ("HUCC"): magic, version u16, k u32, F u32, centroids
                         row-major float64, then the training seed as u64.
Label file:    UTF-8 text, one utterance per line:
                         "utterance_id<TAB>space-separated integers".
Corpus layout: manifest.json (ids, speakers, relative signal paths),
               signals/<id>.hucf (samples as an Lx1 feature file) and
               phones.tsv (ground-truth frame phones in label-file format).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .cluster import Codebook
from .corpus import CorpusConfig, SignalSequence
from .encoder import ConvParams, EncoderArch, EncoderParams, GruParams, param_arrays

FORMAT_VERSION = 1


class FormatError(ValueError):
    """Base class for on-disk format violations."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class DimensionMismatchError(FormatError):
    pass


def _check_header(data: bytes, magic: bytes, path) -> None:
    if len(data) < 6:
        raise TruncatedPayloadError(f"{path}: file shorter than header")
    if data[:4] != magic:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}, expected {magic!r}")
    (version,) = struct.unpack("<H", data[4:6])
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported format version {version}")


# --- feature files -----------------------------------------------------------


def write_features(path, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    if not np.all(np.isfinite(matrix)):
        raise ValueError("refusing to write non-finite values")
    rows, cols = matrix.shape
    with open(path, "wb") as fh:
        fh.write(b"HUCF")
        fh.write(struct.pack("<HII", FORMAT_VERSION, rows, cols))
        fh.write(matrix.astype("<f8").tobytes(order="C"))


def read_features(path) -> np.ndarray:
    data = Path(path).read_bytes()
    _check_header(data, b"HUCF", path)
    if len(data) < 14:
        raise TruncatedPayloadError(f"{path}: missing dimension fields")
    rows, cols = struct.unpack("<II", data[6:14])
    expected = 14 + 8 * rows * cols
    if len(data) < expected:
        raise TruncatedPayloadError(f"{path}: payload has {len(data) - 14} bytes, header implies {expected - 14}")
    if len(data) > expected:
        raise DimensionMismatchError(f"{path}: {len(data) - expected} trailing bytes beyond {rows}x{cols} payload")
    values = np.frombuffer(data, dtype="<f8", offset=14)
    return values.reshape(rows, cols).astype(np.float64)


# --- label files ---------------------------------------------------------------


def write_labels(path, labels_by_utterance: dict[str, np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for utt_id in sorted(labels_by_utterance):
            values = " ".join(str(int(v)) for v in labels_by_utterance[utt_id])
            fh.write(f"{utt_id}\t{values}\n")


def read_labels(path) -> dict[str, np.ndarray]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        utt_id, _, rest = line.partition("\t")
        out[utt_id] = np.array([int(v) for v in rest.split()], dtype=np.int64)
    return out


# --- corpus --------------------------------------------------------------------


def save_corpus(directory, corpus: list[SignalSequence], config: CorpusConfig | None = None) -> None:
    directory = Path(directory)
    (directory / "signals").mkdir(parents=True, exist_ok=True)
    manifest = {"utterances": [], "phones_path": "phones.tsv"}
    if config is not None:
        manifest["config"] = {k: getattr(config, k) for k in config.__dataclass_fields__}
    phones = {}
    for sig in corpus:
        rel = f"signals/{sig.utterance_id}.hucf"
        write_features(directory / rel, sig.samples[:, np.newaxis])
        phones[sig.utterance_id] = sig.frame_phones
        manifest["utterances"].append(
            {"id": sig.utterance_id, "speaker": int(sig.speaker_id), "signal": rel}
        )
    write_labels(directory / "phones.tsv", phones)
    (directory / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2), encoding="utf-8"
    )


def load_corpus(directory) -> list[SignalSequence]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    phones = read_labels(directory / manifest["phones_path"])
    corpus = []
    for entry in manifest["utterances"]:
        samples = read_features(directory / entry["signal"])[:, 0]
        corpus.append(
            SignalSequence(
                utterance_id=entry["id"],
                speaker_id=entry["speaker"],
                samples=samples,
                frame_phones=phones[entry["id"]],
            )
        )
    return corpus


# --- checkpoints -----------------------------------------------------------------


def write_checkpoint(path, params: EncoderParams) -> None:
    header = {
        "arch": {
            "conv_layers": [list(l) for l in params.arch.conv_layers],
            "recurrent_layers": params.arch.recurrent_layers,
            "hidden_dim": params.arch.hidden_dim,
            "activation": params.arch.activation,
        },
        "future_steps": params.future_steps,
        "num_classes": params.num_classes,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(b"HUCP")
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for tensor in param_arrays(params):
            fh.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())


def read_checkpoint(path) -> EncoderParams:
    data = Path(path).read_bytes()
    _check_header(data, b"HUCP", path)
    if len(data) < 10:
        raise TruncatedPayloadError(f"{path}: missing header length")
    (header_len,) = struct.unpack("<I", data[6:10])
    if len(data) < 10 + header_len:
        raise TruncatedPayloadError(f"{path}: truncated header")
    header = json.loads(data[10 : 10 + header_len].decode("utf-8"))
    arch = EncoderArch(
        conv_layers=tuple(tuple(l) for l in header["arch"]["conv_layers"]),
        recurrent_layers=header["arch"]["recurrent_layers"],
        hidden_dim=header["arch"]["hidden_dim"],
        activation=header["arch"]["activation"],
    )

    shapes = []
    c_in = 1
    for kernel, _, c_out in arch.conv_layers:
        shapes.extend([(c_out, c_in, kernel), (c_out,)])
        c_in = c_out
    h = arch.hidden_dim
    in_dim = arch.feature_dim
    for _ in range(arch.recurrent_layers):
        for _gate in range(3):
            shapes.extend([(h, in_dim), (h, h), (h,)])
        in_dim = h
    shapes.extend([(arch.feature_dim, h)] * header["future_steps"])
    shapes.extend([(header["num_classes"], h), (header["num_classes"],)])

    offset = 10 + header_len
    total = sum(int(np.prod(s)) for s in shapes)
    if len(data) < offset + 8 * total:
        raise TruncatedPayloadError(f"{path}: parameter payload truncated")
    if len(data) > offset + 8 * total:
        raise DimensionMismatchError(f"{path}: trailing bytes beyond declared tensors")
    flat = np.frombuffer(data, dtype="<f8", offset=offset)
    tensors = []
    pos = 0
    for shape in shapes:
        size = int(np.prod(shape))
        tensors.append(flat[pos : pos + size].reshape(shape).astype(np.float64))
        pos += size

    it = iter(tensors)
    conv = [ConvParams(w=next(it), b=next(it)) for _ in arch.conv_layers]
    gru = []
    for _ in range(arch.recurrent_layers):
        kwargs = {}
        for gate in ("r", "u", "n"):
            kwargs[f"w_{gate}"] = next(it)
            kwargs[f"u_{gate}"] = next(it)
            kwargs[f"b_{gate}"] = next(it)
        gru.append(GruParams(**kwargs))
    heads = [next(it) for _ in range(header["future_steps"])]
    logits_w = next(it)
    logits_b = next(it)
    return EncoderParams(arch=arch, conv=conv, gru=gru, heads=heads, logits_w=logits_w, logits_b=logits_b)


# --- codebooks --------------------------------------------------------------------


def write_codebook(path, codebook: Codebook) -> None:
    cents = np.asarray(codebook.centroids, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(b"HUCC")
        fh.write(struct.pack("<HII", FORMAT_VERSION, cents.shape[0], cents.shape[1]))
        fh.write(cents.astype("<f8").tobytes(order="C"))
        fh.write(struct.pack("<Q", codebook.seed))


def read_codebook(path) -> Codebook:
    data = Path(path).read_bytes()
    _check_header(data, b"HUCC", path)
    if len(data) < 14:
        raise TruncatedPayloadError(f"{path}: missing dimension fields")
    k, cols = struct.unpack("<II", data[6:14])
    expected = 14 + 8 * k * cols + 8
    if len(data) < expected:
        raise TruncatedPayloadError(f"{path}: centroid payload truncated")
    if len(data) > expected:
        raise DimensionMismatchError(f"{path}: trailing bytes beyond {k}x{cols} centroids")
    cents = np.frombuffer(data, dtype="<f8", offset=14, count=k * cols).reshape(k, cols)
    (seed,) = struct.unpack("<Q", data[-8:])
    # inertia history is in-memory training metadata; the file does not carry it
    return Codebook(centroids=cents.astype(np.float64), inertia_history=[], seed=seed)

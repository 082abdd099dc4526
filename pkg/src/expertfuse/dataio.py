"""Feature files, dataset manifests, and synthetic data generation.

Feature matrices travel in a 16-byte-header binary format: 4 magic bytes,
row and column counts as unsigned 32-bit little-endian, 4 reserved zero
bytes, then the row-major little-endian payload.  Two magics share the
layout: ``CEF1`` carries single-precision features (promoted to double on
load) and ``CEF8`` carries double-precision state for checkpoints, where
bit-exact round trips of float64 are required.

A dataset is a directory holding one ``manifest.jsonl`` (one video per
line) plus the feature files it references by relative path.
"""

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .exceptions import ConfigError, DataIntegrityError, FormatError

_HEADER = struct.Struct("<4sII4s")
_MAGICS = {b"CEF1": ("<f4", 4), b"CEF8": ("<f8", 8)}

MANIFEST_NAME = "manifest.jsonl"
SPLITS = ("train", "val", "test")


def _write(path, array, magic):
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim != 2:
        raise DataIntegrityError(f"write_matrix: need a 2-D array, got shape {arr.shape}")
    if arr.size and not np.isfinite(arr).all():
        raise DataIntegrityError(f"write_matrix: non-finite values in {path}")
    dtype, _ = _MAGICS[magic]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, arr.shape[0], arr.shape[1], b"\x00" * 4))
        fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read(path, magic):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(blob)} bytes)", offset=len(blob))
    got_magic, rows, cols, reserved = _HEADER.unpack_from(blob)
    if got_magic != magic:
        raise FormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r}", offset=0)
    if reserved != b"\x00" * 4:
        raise FormatError(f"{path}: reserved bytes are not zero", offset=12)
    dtype, itemsize = _MAGICS[magic]
    expected = rows * cols * itemsize
    have = len(blob) - _HEADER.size
    if have < expected:
        raise FormatError(
            f"{path}: payload for {rows}x{cols} needs {expected} bytes, found {have}",
            offset=len(blob),
        )
    if have > expected:
        raise FormatError(
            f"{path}: {have - expected} trailing bytes after {rows}x{cols} payload",
            offset=_HEADER.size + expected,
        )
    data = np.frombuffer(blob, dtype=dtype, count=rows * cols, offset=_HEADER.size)
    return data.astype(np.float64).reshape(rows, cols)


def write_matrix(path, array):
    """Writes features in the single-precision interchange format."""
    _write(path, array, b"CEF1")


def read_matrix(path):
    """Reads an interchange file; values come back as float64."""
    return _read(path, b"CEF1")


def write_matrix_f64(path, array):
    """Writes double-precision state (checkpoints) without rounding."""
    _write(path, array, b"CEF8")


def read_matrix_f64(path):
    return _read(path, b"CEF8")


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    split: str
    experts: dict
    captions: tuple


def load_manifest(path):
    """Parses and structurally validates a manifest.

    Checks performed here need no file access: JSON per line, required
    fields, known split names, unique ids, at least one caption per
    video.  Path existence and dimensions are ``check_manifest``'s job.
    """
    entries = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataIntegrityError(f"{path}:{lineno}: not valid JSON: {exc}") from None
            for field in ("id", "split", "experts", "captions"):
                if field not in doc:
                    raise DataIntegrityError(f"{path}:{lineno}: missing field {field!r}")
            if doc["split"] not in SPLITS:
                raise DataIntegrityError(
                    f"{path}:{lineno}: unknown split {doc['split']!r}, expected one of {SPLITS}"
                )
            if doc["id"] in seen:
                raise DataIntegrityError(f"{path}:{lineno}: duplicate id {doc['id']!r}")
            seen.add(doc["id"])
            if not doc["captions"]:
                raise DataIntegrityError(f"{path}:{lineno}: video {doc['id']!r} has zero captions")
            entries.append(
                ManifestEntry(doc["id"], doc["split"], dict(doc["experts"]), tuple(doc["captions"]))
            )
    if not entries:
        raise DataIntegrityError(f"{path}: empty manifest")
    return entries


def check_manifest(entries, root, cfg: ModelConfig, allow_extra=False):
    """Verifies every referenced file exists and has the declared width.

    Only headers are read, so this stays cheap on large datasets.  Raises
    on the first problem, naming the video and file.  ``allow_extra``
    tolerates streams the model does not declare (expert-subset runs keep
    the full dataset on disk); the extra files are still required to exist.
    """
    names = {e.name: e.dim for e in cfg.experts}
    for entry in entries:
        unknown = set(entry.experts) - set(names)
        if unknown and not allow_extra:
            raise DataIntegrityError(
                f"video {entry.id!r}: experts {sorted(unknown)} not in the model config"
            )
        for name, rel in entry.experts.items():
            if rel is None:
                continue
            cols = _peek_cols(os.path.join(root, rel), entry.id, rel)
            if name in names and cols != names[name]:
                raise DataIntegrityError(
                    f"video {entry.id!r}: expert {name!r} file {rel} has width "
                    f"{cols}, config says {names[name]}"
                )
        for rel in entry.captions:
            cols = _peek_cols(os.path.join(root, rel), entry.id, rel)
            if cols != cfg.caption_dim:
                raise DataIntegrityError(
                    f"video {entry.id!r}: caption file {rel} has width {cols}, "
                    f"config says {cfg.caption_dim}"
                )


def _peek_cols(path, video_id, rel):
    if not os.path.exists(path):
        raise DataIntegrityError(f"video {video_id!r}: dangling path {rel}")
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(head)} bytes)", offset=len(head))
    magic, _, cols, _ = _HEADER.unpack(head)
    if magic not in _MAGICS:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    return cols


@dataclass(frozen=True)
class Record:
    """One loaded video: features per expert (None = missing) and captions."""

    id: str
    features: dict
    captions: tuple


def load_split(entries, root, cfg: ModelConfig, split):
    """Materializes one split; zero-row feature files become missing experts."""
    records = []
    for entry in entries:
        if entry.split != split:
            continue
        features = {}
        for e in cfg.experts:
            rel = entry.experts.get(e.name)
            if rel is None:
                features[e.name] = None
                continue
            seq = read_matrix(os.path.join(root, rel))
            features[e.name] = None if seq.shape[0] == 0 else seq
        captions = tuple(read_matrix(os.path.join(root, rel)) for rel in entry.captions)
        records.append(Record(entry.id, features, captions))
    if not records:
        raise DataIntegrityError(f"split {split!r} has no videos")
    return records


SYNTH_SPEC_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["seed", "n_videos"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "n_videos": {
            "type": "object",
            "additionalProperties": False,
            "minProperties": 1,
            "properties": {s: {"type": "integer", "minimum": 1} for s in SPLITS},
        },
        "captions_per_video": {"type": "integer", "minimum": 1},
        "latent_dim": {"type": "integer", "minimum": 1},
        "caption_dim": {"type": "integer", "minimum": 1},
        "noise_scale": {"type": "number", "minimum": 0},
        "min_len": {"type": "integer", "minimum": 1},
        "max_len": {"type": "integer", "minimum": 1},
        "experts": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["name", "dim"],
                "properties": {
                    "name": {"type": "string", "minLength": 1},
                    "dim": {"type": "integer", "minimum": 1},
                    "availability": {"type": "number", "minimum": 0, "maximum": 1},
                },
            },
        },
    },
}

# Default stream widths mirror commonly published extractor sizes for
# objects, faces, audio, and scenes.
DEFAULT_SYNTH_EXPERTS = (
    {"name": "object", "dim": 2048, "availability": 1.0},
    {"name": "face", "dim": 512, "availability": 1.0},
    {"name": "audio", "dim": 128, "availability": 1.0},
    {"name": "scene", "dim": 2208, "availability": 1.0},
)


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a planted-correspondence dataset.

    Each video gets a latent vector; its expert sequences and captions are
    noisy linear images of that shared latent, so retrieval is learnable
    by construction and perfect at noise zero.
    """

    seed: int
    n_videos: dict
    captions_per_video: int = 1
    latent_dim: int = 64
    caption_dim: int = 300
    noise_scale: float = 0.1
    min_len: int = 4
    max_len: int = 16
    experts: tuple = DEFAULT_SYNTH_EXPERTS

    def __post_init__(self):
        for expert in self.experts:
            p = expert.get("availability", 1.0)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(
                    f"expert {expert['name']!r}: availability {p} outside [0, 1]"
                )
        if self.min_len > self.max_len:
            raise ConfigError(f"min_len {self.min_len} > max_len {self.max_len}")
        if not self.n_videos:
            raise ConfigError("n_videos must name at least one split")


def resolve_synth_spec(doc) -> SyntheticSpec:
    """Validates a JSON document against the schema and fills defaults."""
    import jsonschema

    validator = jsonschema.Draft202012Validator(SYNTH_SPEC_SCHEMA)
    errors = sorted(
        f"{'/'.join(str(p) for p in err.absolute_path) or '<root>'}: {err.message}"
        for err in validator.iter_errors(doc)
    )
    if errors:
        raise ConfigError("invalid synthetic spec:\n  " + "\n  ".join(errors))
    doc = dict(doc)
    if "experts" in doc:
        doc["experts"] = tuple(
            {"name": e["name"], "dim": e["dim"], "availability": e.get("availability", 1.0)}
            for e in doc["experts"]
        )
    return SyntheticSpec(**doc)


def gen_synthetic(spec: SyntheticSpec, out_dir) -> str:
    """Writes a complete synthetic dataset and returns the manifest path.

    Deterministic for a fixed spec: the generator draws, in order, the
    per-expert mixing matrices and the caption mixing matrix, then per
    video its latent, availability (resampled whole until at least one
    expert survives), per-expert lengths and noise, and per-caption
    lengths and noise.  Files are single-precision interchange matrices.
    """
    rng = np.random.default_rng(spec.seed)
    mix = {
        e["name"]: rng.standard_normal((spec.latent_dim, e["dim"]))
        for e in spec.experts
    }
    cap_mix = rng.standard_normal((spec.latent_dim, spec.caption_dim))

    feat_dir = os.path.join(out_dir, "features")
    cap_dir = os.path.join(out_dir, "captions")
    os.makedirs(feat_dir, exist_ok=True)
    os.makedirs(cap_dir, exist_ok=True)

    lines = []
    for split in SPLITS:
        if split not in spec.n_videos:
            continue
        for i in range(spec.n_videos[split]):
            vid = f"{split}{i:05d}"
            z = rng.standard_normal(spec.latent_dim)
            probs = np.array([e.get("availability", 1.0) for e in spec.experts])
            while True:
                present = rng.uniform(size=len(spec.experts)) < probs
                if present.any():
                    break
            experts = {}
            for e, ok in zip(spec.experts, present):
                if not ok:
                    experts[e["name"]] = None
                    continue
                length = int(rng.integers(spec.min_len, spec.max_len + 1))
                seq = z @ mix[e["name"]] + spec.noise_scale * rng.standard_normal(
                    (length, e["dim"])
                )
                rel = f"features/{vid}.{e['name']}.cef1"
                write_matrix(os.path.join(out_dir, rel), seq)
                experts[e["name"]] = rel
            captions = []
            for j in range(spec.captions_per_video):
                length = int(rng.integers(spec.min_len, spec.max_len + 1))
                cap = z @ cap_mix + spec.noise_scale * rng.standard_normal(
                    (length, spec.caption_dim)
                )
                rel = f"captions/{vid}.cap{j}.cef1"
                write_matrix(os.path.join(out_dir, rel), cap)
                captions.append(rel)
            lines.append(
                json.dumps(
                    {"id": vid, "split": split, "experts": experts, "captions": captions},
                    sort_keys=True,
                    separators=(",", ":"),
                )
            )
    manifest = os.path.join(out_dir, MANIFEST_NAME)
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest

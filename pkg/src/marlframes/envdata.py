"""Frame-sequence data model, planted-saliency generator and the MFRS file format.

Randomness comes from numpy's PCG64 bit generator (PCG-XSL-RR 128/64),
whose output stream is fixed by its published definition and does not
depend on platform.  Class and background prototypes are drawn from
``PCG64(seed)``; per-video draws (positions, confuser classes, noise) come
from ``PCG64([seed, 1])`` for the train split and ``PCG64([seed, 2])`` for
val, always in the same order, so both splits share prototypes.

MFRS layout (all integers little-endian)::

    b"MFRS" | u32 F | u32 D | u8 has_saliency | F*D float32 row-major | [F bytes 0/1]

``manifest.tsv`` holds ``num_classes``/``split`` comment lines followed by one
``id<TAB>label<TAB>file`` line per sequence.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"MFRS"
_HEADER = struct.Struct("<4sIIB")


class DatasetFormatError(Exception):
    """Base class for dataset file problems."""


class BadMagicError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class LabelRangeError(DatasetFormatError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class FrameSequence:
    id: str
    label: int
    frames: np.ndarray  # F x D float64
    saliency: np.ndarray | None = None  # bool, length F; evaluation only

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise ValueError(f"frames must be F x D with F, D >= 1, got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValueError(f"sequence {self.id!r} has non-finite features")
        object.__setattr__(self, "frames", frames)
        if self.saliency is not None:
            sal = np.asarray(self.saliency, dtype=bool)
            if sal.shape != (frames.shape[0],):
                raise ValueError(f"saliency length {sal.shape} != F={frames.shape[0]}")
            object.__setattr__(self, "saliency", sal)
        if int(self.label) < 0:
            raise ValueError("label must be non-negative")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class Dataset:
    sequences: list[FrameSequence]
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.split not in ("train", "val"):
            raise ValueError(f"split must be 'train' or 'val', got {self.split!r}")
        dims = {s.dim for s in self.sequences}
        if len(dims) > 1:
            raise ValueError(f"sequences disagree on feature dimension: {sorted(dims)}")
        for s in self.sequences:
            if s.label >= self.num_classes:
                raise LabelRangeError(f"label {s.label} of {s.id!r} >= C={self.num_classes}")

    def __len__(self):
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    @property
    def dim(self) -> int:
        return self.sequences[0].dim

    @property
    def labels(self) -> list[int]:
        return [s.label for s in self.sequences]


@dataclass
class SyntheticSpec:
    num_classes: int = 4
    F: int = 24
    D: int = 16
    salient_fraction: float = 0.15
    confuser_fraction: float = 0.2
    noise_sigma: float = 0.3
    videos_per_class: int = 10
    seed: int = 0
    split: str = "train"

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.F < 1 or self.D < 1:
            raise ValueError("F and D must be >= 1")
        if not 0 < self.salient_fraction <= 1:
            raise ValueError("salient_fraction must lie in (0, 1]")
        if not 0 <= self.confuser_fraction < 1:
            raise ValueError("confuser_fraction must lie in [0, 1)")
        if self.salient_fraction + self.confuser_fraction > 1:
            raise ValueError("salient_fraction + confuser_fraction must not exceed 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.split not in _SPLIT_STREAM:
            raise ValueError(f"split must be one of {sorted(_SPLIT_STREAM)}")
        if self.videos_per_class < 1:
            raise ValueError("videos_per_class must be >= 1")
        n_sal = math.ceil(self.salient_fraction * self.F)
        n_conf = math.ceil(self.confuser_fraction * self.F)
        if n_sal + n_conf > self.F:
            raise ValueError(f"{n_sal} salient + {n_conf} confuser frames exceed F={self.F}")


_SPLIT_STREAM = {"train": 1, "val": 2}


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def class_prototypes(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """(C x D class prototypes, 1 x D background prototype), all unit norm."""
    rng = make_rng(spec.seed)
    protos = _unit_rows(rng, spec.num_classes + 1, spec.D)
    return protos[:-1], protos[-1:]


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    spec.validate()
    protos, background = class_prototypes(spec)
    # per-split video stream; prototypes depend on the seed alone so splits share classes
    rng = make_rng([spec.seed, _SPLIT_STREAM[spec.split]])
    C, F, D = spec.num_classes, spec.F, spec.D
    n_sal = math.ceil(spec.salient_fraction * F)
    n_conf = math.ceil(spec.confuser_fraction * F)
    sequences = []
    for c in range(C):
        for v in range(spec.videos_per_class):
            order = rng.permutation(F)
            sal_pos, conf_pos = order[:n_sal], order[n_sal:n_sal + n_conf]
            base = np.repeat(background, F, axis=0)
            base[sal_pos] = protos[c]
            if n_conf:
                # each confuser frame gets its own wrong class
                others = rng.integers(0, C - 1, size=n_conf)
                others = others + (others >= c)
                base[conf_pos] = protos[others]
            noise = rng.standard_normal((F, D)) * spec.noise_sigma
            saliency = np.zeros(F, dtype=bool)
            saliency[sal_pos] = True
            sequences.append(FrameSequence(f"{spec.split}-c{c:03d}-v{v:04d}", c,
                                           base + noise, saliency))
    return Dataset(sequences, C, spec.split)


def cyclic_pad(seq: FrameSequence, target: int) -> FrameSequence:
    if target < 1:
        raise ValueError("target length must be >= 1")
    F = seq.num_frames
    if F >= target:
        return seq
    idx = np.arange(target) % F
    sal = None if seq.saliency is None else seq.saliency[idx]
    return FrameSequence(seq.id, seq.label, seq.frames[idx], sal)


def pad_dataset(ds: Dataset, target: int) -> Dataset:
    return Dataset([cyclic_pad(s, target) for s in ds], ds.num_classes, ds.split)


# --- MFRS I/O ---------------------------------------------------------------

def encode_sequence(seq: FrameSequence) -> bytes:
    F, D = seq.frames.shape
    has_sal = seq.saliency is not None
    parts = [_HEADER.pack(MAGIC, F, D, int(has_sal)),
             seq.frames.astype("<f4").tobytes(order="C")]
    if has_sal:
        parts.append(seq.saliency.astype(np.uint8).tobytes())
    return b"".join(parts)


def decode_sequence(data: bytes, seq_id: str, label: int, source: str = "<bytes>") -> FrameSequence:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"{source}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < _HEADER.size:
        raise TruncatedFileError(f"{source}: header truncated")
    _, F, D, flag = _HEADER.unpack_from(data)
    if flag not in (0, 1):
        raise DatasetFormatError(f"{source}: saliency flag must be 0 or 1, got {flag}")
    need = _HEADER.size + 4 * F * D + (F if flag else 0)
    if len(data) < need:
        raise TruncatedFileError(f"{source}: {len(data)} bytes, expected {need}")
    if len(data) > need:
        raise DatasetFormatError(f"{source}: {len(data) - need} trailing bytes")
    frames = np.frombuffer(data, dtype="<f4", count=F * D, offset=_HEADER.size)
    frames = frames.astype(np.float64).reshape(F, D)
    sal = None
    if flag:
        raw = np.frombuffer(data, dtype=np.uint8, count=F, offset=_HEADER.size + 4 * F * D)
        if np.any(raw > 1):
            raise DatasetFormatError(f"{source}: saliency bytes must be 0 or 1")
        sal = raw.astype(bool)
    return FrameSequence(seq_id, label, frames, sal)


def write_dataset(ds: Dataset, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"# num_classes\t{ds.num_classes}", f"# split\t{ds.split}"]
    for seq in ds:
        if "\t" in seq.id or "\n" in seq.id:
            raise ValueError(f"sequence id {seq.id!r} contains tab or newline")
        fname = f"{seq.id}.mfrs"
        (directory / fname).write_bytes(encode_sequence(seq))
        lines.append(f"{seq.id}\t{seq.label}\t{fname}")
    (directory / "manifest.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_dataset(directory: str | Path, num_classes: int | None = None) -> Dataset:
    directory = Path(directory)
    manifest = directory / "manifest.tsv"
    meta = {}
    rows = []
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("\t")
            meta[key.strip()] = value.strip()
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise DatasetFormatError(f"{manifest}:{lineno}: expected 3 tab-separated fields")
        try:
            label = int(fields[1])
        except ValueError:
            raise DatasetFormatError(f"{manifest}:{lineno}: label {fields[1]!r} is not an integer") from None
        rows.append((fields[0], label, fields[2]))
    if num_classes is None:
        if "num_classes" in meta:
            num_classes = int(meta["num_classes"])
        else:
            num_classes = max(r[1] for r in rows) + 1
    sequences = []
    for seq_id, label, fname in rows:
        if not 0 <= label < num_classes:
            raise LabelRangeError(f"{seq_id}: label {label} outside [0, {num_classes})")
        path = directory / fname
        sequences.append(decode_sequence(path.read_bytes(), seq_id, label, str(path)))
    return Dataset(sequences, num_classes, meta.get("split", "train"))

"""Binary feature container (MHG1) and JSONL dataset manifest.

These two formats are the boundary between the core model and whatever
produced the embeddings.  An MHG1 file holds one video's per-segment
features for the three modalities; the manifest lists videos, labels and
feature paths, one JSON object per line.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MHG1"
VERSION = 1
DEFAULT_WIDTHS = (768, 40, 768)  # visual, audio, text

_HEADER = struct.Struct("<6I")  # version, n_segments, d_v, d_a, d_t, n_spans


class FeatureFormatError(ValueError):
    """A feature file or manifest failed structural validation."""


@dataclass
class SegmentFeatures:
    """Raw per-segment embeddings for one video, one row per segment."""

    visual: np.ndarray
    audio: np.ndarray
    text: np.ndarray
    sentence_spans: list[tuple[float, float]] | None = None

    @property
    def n_segments(self) -> int:
        return self.visual.shape[0]

    def validate(self) -> "SegmentFeatures":
        blocks = {"visual": self.visual, "audio": self.audio, "text": self.text}
        for name, arr in blocks.items():
            if arr.ndim != 2:
                raise FeatureFormatError(f"{name} features must be 2-D, got {arr.shape}")
            if arr.shape[0] < 1 or arr.shape[1] < 1:
                raise FeatureFormatError(f"{name} features are empty: shape {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise FeatureFormatError(f"{name} features contain non-finite values")
        counts = {arr.shape[0] for arr in blocks.values()}
        if len(counts) != 1:
            raise FeatureFormatError(
                "modalities disagree on segment count: "
                f"visual={self.visual.shape[0]} audio={self.audio.shape[0]} text={self.text.shape[0]}"
            )
        if self.sentence_spans is not None:
            for start, end in self.sentence_spans:
                if not (np.isfinite(start) and np.isfinite(end)):
                    raise FeatureFormatError("sentence span bounds must be finite")
        return self

    def check_widths(self, expected=DEFAULT_WIDTHS) -> "SegmentFeatures":
        names = ("visual", "audio", "text")
        arrays = (self.visual, self.audio, self.text)
        for name, arr, want in zip(names, arrays, expected):
            if arr.shape[1] != want:
                raise FeatureFormatError(
                    f"{name} feature width is {arr.shape[1]}, expected {want}"
                )
        return self


@dataclass(frozen=True)
class ManifestEntry:
    video_id: str
    label: int
    feature_path: str
    duration_s: float
    fold: int | None = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self._by_id = {e.video_id: e for e in self.entries}

    def __len__(self) -> int:
        return len(self.entries)

    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def entry(self, video_id: str) -> ManifestEntry:
        try:
            return self._by_id[video_id]
        except KeyError:
            raise FeatureFormatError(f"video_id {video_id!r} not in manifest") from None

    def resolve(self, entry: ManifestEntry) -> Path:
        return (self.root / entry.feature_path).resolve()


def load_manifest(path, check_paths: bool = True) -> DatasetManifest:
    """Parse and validate a JSONL manifest; entry order is file order."""
    path = Path(path)
    if not path.is_file():
        raise FeatureFormatError(f"manifest not found: {path}")
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FeatureFormatError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            entry = _parse_entry(obj, path, lineno)
            if entry.video_id in seen:
                raise FeatureFormatError(f"{path}:{lineno}: duplicate video_id {entry.video_id!r}")
            seen.add(entry.video_id)
            entries.append(entry)
    manifest = DatasetManifest(entries=entries, root=path.parent)
    if check_paths:
        for entry in entries:
            target = manifest.resolve(entry)
            if not target.is_file():
                raise FeatureFormatError(
                    f"feature file for {entry.video_id!r} missing: {target}"
                )
    return manifest


def _parse_entry(obj, path, lineno) -> ManifestEntry:
    if not isinstance(obj, dict):
        raise FeatureFormatError(f"{path}:{lineno}: entry must be a JSON object")
    required = {"video_id", "label", "feature_path", "duration_s"}
    missing = required - obj.keys()
    if missing:
        raise FeatureFormatError(f"{path}:{lineno}: missing fields {sorted(missing)}")
    label = obj["label"]
    if label not in (0, 1):
        raise FeatureFormatError(f"{path}:{lineno}: label must be 0 or 1, got {label!r}")
    duration = float(obj["duration_s"])
    if not duration > 0:
        raise FeatureFormatError(f"{path}:{lineno}: duration_s must be positive")
    fold = obj.get("fold")
    if fold is not None:
        fold = int(fold)
    return ManifestEntry(
        video_id=str(obj["video_id"]),
        label=int(label),
        feature_path=str(obj["feature_path"]),
        duration_s=duration,
        fold=fold,
    )


def write_manifest(entries, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for e in entries:
            obj = {
                "video_id": e.video_id,
                "label": e.label,
                "feature_path": e.feature_path,
                "duration_s": e.duration_s,
            }
            if e.fold is not None:
                obj["fold"] = e.fold
            fh.write(json.dumps(obj) + "\n")


def write_features(features: SegmentFeatures, path) -> None:
    """Serialize to the MHG1 container; output bytes are deterministic."""
    features.validate()
    spans = features.sentence_spans or []
    header = MAGIC + _HEADER.pack(
        VERSION,
        features.n_segments,
        features.visual.shape[1],
        features.audio.shape[1],
        features.text.shape[1],
        len(spans),
    )
    blobs = [header]
    for arr in (features.visual, features.audio, features.text):
        blobs.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    for start, end in spans:
        blobs.append(struct.pack("<2d", float(start), float(end)))
    path = Path(path)
    try:
        path.write_bytes(b"".join(blobs))
    except OSError as exc:
        raise FeatureFormatError(f"cannot write feature file {path}: {exc}") from exc


def read_features(path, expected_widths=DEFAULT_WIDTHS) -> SegmentFeatures:
    """Load and validate one MHG1 file.

    ``expected_widths`` guards against features from a different extractor;
    pass None to accept whatever widths the header declares.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FeatureFormatError(f"cannot read feature file {path}: {exc}") from exc
    if len(raw) < len(MAGIC) + _HEADER.size:
        raise FeatureFormatError(f"{path}: truncated header")
    if raw[: len(MAGIC)] != MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, n, d_v, d_a, d_t, n_spans = _HEADER.unpack_from(raw, len(MAGIC))
    if version != VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    if n < 1:
        raise FeatureFormatError(f"{path}: header declares {n} segments")
    if min(d_v, d_a, d_t) < 1:
        raise FeatureFormatError(f"{path}: header declares a zero feature width")
    expected_len = (
        len(MAGIC) + _HEADER.size + 4 * n * (d_v + d_a + d_t) + 16 * n_spans
    )
    if len(raw) != expected_len:
        raise FeatureFormatError(
            f"{path}: payload is {len(raw)} bytes, header implies {expected_len}"
        )
    offset = len(MAGIC) + _HEADER.size
    blocks = []
    for width in (d_v, d_a, d_t):
        count = n * width
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        blocks.append(arr.reshape(n, width).astype(np.float32))
        offset += 4 * count
    spans = None
    if n_spans:
        span_arr = np.frombuffer(raw, dtype="<f8", count=2 * n_spans, offset=offset)
        spans = [tuple(pair) for pair in span_arr.reshape(n_spans, 2)]
    features = SegmentFeatures(
        visual=blocks[0], audio=blocks[1], text=blocks[2], sentence_spans=spans
    ).validate()
    if expected_widths is not None:
        features.check_widths(expected_widths)
    return features


def load_video_features(
    manifest: DatasetManifest, video_id: str, expected_widths=DEFAULT_WIDTHS
) -> SegmentFeatures:
    """Look up a video in the manifest and load its validated features."""
    entry = manifest.entry(video_id)
    return read_features(manifest.resolve(entry), expected_widths=expected_widths)

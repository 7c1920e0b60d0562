"""Planted-signal synthetic datasets in the MHG1 container format.

Non-hateful videos are pure background noise.  Hateful videos get a fixed
per-modality signature direction added to every segment of a few randomly
chosen instances, so the label is decided by a small, localized portion of
the video.  The planted instance indices go to a sidecar file so that
explanation quality (argmax of the instance weights) can be scored against
ground truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .featureio import (
    DEFAULT_WIDTHS,
    ManifestEntry,
    SegmentFeatures,
    write_features,
    write_manifest,
)

SIDECAR_NAME = "ground_truth.jsonl"
MANIFEST_NAME = "manifest.jsonl"

MODALITY_WIDTHS = dict(zip(("visual", "audio", "text"), DEFAULT_WIDTHS))


@dataclass
class SynthSpec:
    n_videos: int = 200
    n_segments: int = 12
    n_instances: int = 4
    hate_ratio: float = 0.4
    hateful_instance_count: int = 1
    signal_strength: float = 2.0
    noise_std: float = 1.0
    modality_carriers: tuple[str, ...] = ("visual", "audio", "text")
    seed: int = 0
    segment_duration_s: float = 1.0

    def __post_init__(self):
        if self.n_videos < 2:
            raise ValueError("need at least 2 videos")
        if not 0.0 < self.hate_ratio < 1.0:
            raise ValueError("hate_ratio must be strictly between 0 and 1")
        if self.n_segments % self.n_instances != 0:
            raise ValueError("n_instances must divide n_segments")
        if not 1 <= self.hateful_instance_count <= self.n_instances:
            raise ValueError("hateful_instance_count must be in [1, n_instances]")
        if self.noise_std <= 0:
            raise ValueError("noise_std must be positive")
        unknown = set(self.modality_carriers) - set(MODALITY_WIDTHS)
        if unknown:
            raise ValueError(f"unknown carrier modalities {sorted(unknown)}")
        if not self.modality_carriers:
            raise ValueError("at least one carrier modality required")


@dataclass
class SynthDataset:
    manifest_path: Path
    sidecar_path: Path
    entries: list[ManifestEntry]
    planted: dict[str, list[int]] = field(repr=False)


def _signatures(spec: SynthSpec) -> dict[str, np.ndarray]:
    """One fixed unit-norm direction per modality for the whole dataset."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x516]))
    sigs = {}
    for modality, width in MODALITY_WIDTHS.items():
        v = rng.normal(size=width)
        sigs[modality] = v / np.linalg.norm(v)
    return sigs


def generate_video(spec: SynthSpec, index: int, label: int,
                   signatures: dict[str, np.ndarray]) -> tuple[SegmentFeatures, list[int]]:
    """Background noise, plus the hate signature on the planted instances."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x71D, index]))
    n = spec.n_segments
    blocks = {
        modality: rng.normal(0.0, spec.noise_std, size=(n, width))
        for modality, width in MODALITY_WIDTHS.items()
    }
    planted: list[int] = []
    if label == 1:
        planted = sorted(
            rng.choice(spec.n_instances, size=spec.hateful_instance_count,
                       replace=False).tolist()
        )
        per_instance = n // spec.n_instances
        for inst in planted:
            segs = slice(inst * per_instance, (inst + 1) * per_instance)
            for modality in spec.modality_carriers:
                blocks[modality][segs] += spec.signal_strength * signatures[modality]
    feats = SegmentFeatures(
        visual=blocks["visual"].astype(np.float32),
        audio=blocks["audio"].astype(np.float32),
        text=blocks["text"].astype(np.float32),
    )
    return feats, planted


def generate_dataset(spec: SynthSpec, out_dir) -> SynthDataset:
    """Write feature files, manifest and ground-truth sidecar under out_dir."""
    out = Path(out_dir)
    features_dir = out / "features"
    features_dir.mkdir(parents=True, exist_ok=True)

    n_hate = int(round(spec.n_videos * spec.hate_ratio))
    if not 0 < n_hate < spec.n_videos:
        raise ValueError("hate_ratio leaves a class empty for this n_videos")
    labels = np.array([1] * n_hate + [0] * (spec.n_videos - n_hate), dtype=np.int64)
    label_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x1AB]))
    label_rng.shuffle(labels)

    signatures = _signatures(spec)
    duration = spec.n_segments * spec.segment_duration_s
    entries: list[ManifestEntry] = []
    planted: dict[str, list[int]] = {}
    for i, label in enumerate(labels):
        video_id = f"synth_{i:04d}"
        feats, video_planted = generate_video(spec, i, int(label), signatures)
        rel_path = f"features/{video_id}.mhg1"
        write_features(feats, out / rel_path)
        entries.append(ManifestEntry(video_id=video_id, label=int(label),
                                     feature_path=rel_path, duration_s=duration))
        planted[video_id] = video_planted

    manifest_path = out / MANIFEST_NAME
    write_manifest(entries, manifest_path)
    sidecar_path = out / SIDECAR_NAME
    with sidecar_path.open("w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps({"video_id": entry.video_id,
                                 "planted_instances": planted[entry.video_id]}) + "\n")
    return SynthDataset(manifest_path=manifest_path, sidecar_path=sidecar_path,
                        entries=entries, planted=planted)


def load_sidecar(path) -> dict[str, list[int]]:
    planted = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            obj = json.loads(line)
            planted[obj["video_id"]] = list(obj["planted_instances"])
    return planted


def linear_probe_accuracy(records, fit_idx=None, eval_idx=None) -> float:
    """Mean-difference classifier on per-video mean features.

    A deliberately dumb baseline: project onto the difference of class means
    of segment-averaged features and threshold at the midpoint.  Used as a
    learnability floor before training the real model.
    """
    feats = np.stack([
        np.concatenate([
            r.features.visual.mean(axis=0),
            r.features.audio.mean(axis=0),
            r.features.text.mean(axis=0),
        ])
        for r in records
    ]).astype(np.float64)
    labels = np.array([r.label for r in records], dtype=np.int64)
    if fit_idx is None:
        fit_idx = np.arange(len(records))
    if eval_idx is None:
        eval_idx = np.arange(len(records))
    fit_idx = np.asarray(fit_idx)
    eval_idx = np.asarray(eval_idx)
    mu1 = feats[fit_idx][labels[fit_idx] == 1].mean(axis=0)
    mu0 = feats[fit_idx][labels[fit_idx] == 0].mean(axis=0)
    w = mu1 - mu0
    threshold = w @ (mu1 + mu0) / 2.0
    pred = (feats[eval_idx] @ w > threshold).astype(np.int64)
    return float(np.mean(pred == labels[eval_idx]))

import numpy as np
import pytest

from hategraph import synth
from hategraph.featureio import load_manifest
from hategraph.training import load_records


def small_spec(**over):
    base = dict(n_videos=20, n_segments=8, n_instances=4, hate_ratio=0.5,
                hateful_instance_count=1, signal_strength=2.0, noise_std=1.0,
                seed=123)
    base.update(over)
    return synth.SynthSpec(**base)


class TestSpecValidation:
    def test_bad_ratio(self):
        with pytest.raises(ValueError):
            small_spec(hate_ratio=0.0)
        with pytest.raises(ValueError):
            small_spec(hate_ratio=1.0)

    def test_bad_instance_count(self):
        with pytest.raises(ValueError):
            small_spec(hateful_instance_count=5)

    def test_bad_carrier(self):
        with pytest.raises(ValueError):
            small_spec(modality_carriers=("visual", "smell"))


class TestGeneration:
    def test_files_pass_featureio_validation(self, tmp_path):
        ds = synth.generate_dataset(small_spec(), tmp_path)
        manifest = load_manifest(ds.manifest_path)
        records = load_records(manifest)
        assert len(records) == 20
        labels = [r.label for r in records]
        assert sum(labels) == 10

    def test_byte_identical_regeneration(self, tmp_path):
        ds1 = synth.generate_dataset(small_spec(), tmp_path / "a")
        ds2 = synth.generate_dataset(small_spec(), tmp_path / "b")
        assert ds1.manifest_path.read_text() == ds2.manifest_path.read_text()
        assert ds1.sidecar_path.read_text() == ds2.sidecar_path.read_text()
        for entry in ds1.entries:
            a = (tmp_path / "a" / entry.feature_path).read_bytes()
            b = (tmp_path / "b" / entry.feature_path).read_bytes()
            assert a == b

    def test_different_seed_differs(self, tmp_path):
        ds1 = synth.generate_dataset(small_spec(seed=1), tmp_path / "a")
        ds2 = synth.generate_dataset(small_spec(seed=2), tmp_path / "b")
        first = ds1.entries[0].feature_path
        assert (tmp_path / "a" / first).read_bytes() != (tmp_path / "b" / first).read_bytes()

    def test_sidecar_indices_in_range(self, tmp_path):
        spec = small_spec(hateful_instance_count=2)
        ds = synth.generate_dataset(spec, tmp_path)
        planted = synth.load_sidecar(ds.sidecar_path)
        by_id = {e.video_id: e.label for e in ds.entries}
        for video_id, instances in planted.items():
            if by_id[video_id] == 1:
                assert len(instances) == 2
                assert all(0 <= i < spec.n_instances for i in instances)
            else:
                assert instances == []

    def test_hateful_videos_carry_signal_on_planted_instances(self, tmp_path):
        spec = small_spec(signal_strength=50.0, noise_std=0.5)
        ds = synth.generate_dataset(spec, tmp_path)
        manifest = load_manifest(ds.manifest_path)
        records = {r.video_id: r for r in load_records(manifest)}
        per_instance = spec.n_segments // spec.n_instances
        for entry in ds.entries:
            if entry.label != 1:
                continue
            feats = records[entry.video_id].features
            norms = np.linalg.norm(feats.visual, axis=1)
            planted_segments = {
                s for inst in ds.planted[entry.video_id]
                for s in range(inst * per_instance, (inst + 1) * per_instance)
            }
            loud = set(np.argsort(norms)[-len(planted_segments):].tolist())
            assert loud == planted_segments

    def test_all_instances_planted_degenerate_case(self, tmp_path):
        spec = small_spec(hateful_instance_count=4)
        ds = synth.generate_dataset(spec, tmp_path)
        for entry in ds.entries:
            if entry.label == 1:
                assert ds.planted[entry.video_id] == [0, 1, 2, 3]


class TestLinearProbe:
    def test_probe_separates_planted_signal(self, tmp_path):
        spec = synth.SynthSpec(n_videos=200, n_segments=12, n_instances=4,
                               hate_ratio=0.4, hateful_instance_count=1,
                               signal_strength=2.0, noise_std=1.0, seed=0)
        ds = synth.generate_dataset(spec, tmp_path)
        records = load_records(load_manifest(ds.manifest_path))
        acc = synth.linear_probe_accuracy(records)
        assert acc >= 0.9

    def test_probe_at_chance_without_signal(self, tmp_path):
        spec = small_spec(signal_strength=0.0, n_videos=40)
        ds = synth.generate_dataset(spec, tmp_path)
        records = load_records(load_manifest(ds.manifest_path))
        fit = np.arange(0, 20)
        hold = np.arange(20, 40)
        acc = synth.linear_probe_accuracy(records, fit_idx=fit, eval_idx=hold)
        assert 0.2 <= acc <= 0.8  # held-out accuracy near chance

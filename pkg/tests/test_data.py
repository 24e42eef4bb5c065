import hashlib
import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reportgen.data import (
    CLASSES,
    IMAGE_SIZE,
    anomaly_energy,
    case_seed,
    decode_image,
    encode_image,
    generate_case,
    generate_dataset,
    load_manifest,
    load_split,
    split_ids,
)
from reportgen.errors import CorruptDataError, DataError
from reportgen.metrics import FindingLabel, extract_findings


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    manifest = generate_dataset(100, 7, out)
    return out, manifest


def _file_digests(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


class TestGenerateCase:
    def test_deterministic(self):
        a, b = generate_case(123), generate_case(123)
        assert np.array_equal(a.image, b.image)
        assert (a.report, a.labels) == (b.report, b.labels)

    def test_shape_and_range(self):
        img = generate_case(5).image
        assert img.shape == (1, IMAGE_SIZE, IMAGE_SIZE)
        assert img.min() >= 0.0 and img.max() <= 1.0

    def test_normal_case(self):
        seed = next(s for s in range(1000) if generate_case(s).labels == {FindingLabel.NORMAL})
        case = generate_case(seed)
        assert extract_findings(case.report) == {FindingLabel.NORMAL}
        assert anomaly_energy(case) < 1e-9

    def test_hemorrhage_cases_carry_a_patch(self):
        cases = [generate_case(s) for s in range(60)]
        energies = [anomaly_energy(c) for c in cases if FindingLabel.NORMAL not in c.labels]
        assert energies and min(energies) > 1.0

    def test_class_frequencies_within_three_sigma(self):
        counts = Counter(next(iter(generate_case(case_seed(0, i)).labels)) for i in range(600))
        sigma = np.sqrt(600 * (1 / 6) * (5 / 6))
        assert set(counts) == set(CLASSES)
        for label in CLASSES:
            assert abs(counts[label] - 100) <= 3 * sigma

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_labeler_agrees_with_generator(self, seed):
        case = generate_case(seed)
        assert extract_findings(case.report) == set(case.labels)


class TestImageFormat:
    def test_round_trip_exact(self):
        img = generate_case(3).image
        blob = encode_image(img)
        assert len(blob) == 16 + 4 * IMAGE_SIZE * IMAGE_SIZE
        assert np.array_equal(decode_image(blob), img)

    def test_header_layout(self):
        blob = encode_image(generate_case(3).image)
        magic, version, h, w = np.frombuffer(blob[:16], dtype="<u4")
        assert (version, h, w) == (1, IMAGE_SIZE, IMAGE_SIZE)
        assert magic == int.from_bytes(b"SCAN", "little")

    def test_truncated(self):
        with pytest.raises(CorruptDataError):
            decode_image(encode_image(generate_case(3).image)[:-4])


class TestSplits:
    def test_sizes(self):
        parts = split_ids([f"case-{i:05d}" for i in range(100)])
        assert [len(parts[k]) for k in ("train", "val", "test")] == [80, 10, 10]

    @given(st.integers(10, 300))
    def test_disjoint_and_exhaustive(self, n):
        ids = [f"case-{i:05d}" for i in range(n)]
        parts = split_ids(ids)
        joined = parts["train"] + parts["val"] + parts["test"]
        assert sorted(joined) == ids and len(set(joined)) == n


class TestGenerateDataset:
    def test_layout(self, dataset):
        root, manifest = dataset
        assert {p.name for p in root.iterdir()} == {"images", "manifest.json", "reports.jsonl", "splits.json"}
        assert manifest["split_counts"] == {"train": 80, "val": 10, "test": 10}
        assert len(list((root / "images").glob("*.img"))) == 100

    def test_distribution_matches_recount(self, dataset):
        root, manifest = dataset
        recount = Counter()
        for line in (root / "reports.jsonl").read_text().splitlines():
            (label,) = json.loads(line)["labels"]
            recount[label] += 1
        assert {k: v for k, v in manifest["class_distribution"].items() if v} == dict(recount)
        assert sum(manifest["class_distribution"].values()) == 100

    def test_idempotent(self, dataset, tmp_path):
        root, _ = dataset
        before = _file_digests(root)
        written = []
        generate_dataset(100, 7, root, written=written)
        assert written == []
        assert _file_digests(root) == before

    def test_same_args_elsewhere_identical(self, dataset, tmp_path):
        root, _ = dataset
        generate_dataset(100, 7, tmp_path)
        assert _file_digests(tmp_path) == _file_digests(root)

    def test_too_small(self, tmp_path):
        with pytest.raises(DataError):
            generate_dataset(5, 0, tmp_path)

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            generate_dataset(10, 0, blocker / "sub")


class TestLoadSplit:
    def test_counts(self, dataset):
        root, manifest = dataset
        for split, n in manifest["split_counts"].items():
            assert len(load_split(root, split)) == n
        assert len(load_split(root, "all")) == 100

    def test_manifest_order_and_values(self, dataset):
        root, manifest = dataset
        cases = load_split(root, "all")
        assert [c.id for c in cases] == manifest["ids"]
        fresh = generate_case(case_seed(7, 4))
        assert np.array_equal(cases[4].image, fresh.image)
        assert cases[4].report == fresh.report

    def test_unknown_split(self, dataset):
        with pytest.raises(DataError):
            load_split(dataset[0], "holdout")

    def test_tampered_image(self, dataset, tmp_path):
        generate_dataset(10, 1, tmp_path)
        target = tmp_path / "images" / "case-00003.img"
        blob = bytearray(target.read_bytes())
        blob[100] ^= 0xFF
        target.write_bytes(bytes(blob))
        with pytest.raises(CorruptDataError, match="case-00003"):
            load_split(tmp_path, "all")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            load_manifest(tmp_path)

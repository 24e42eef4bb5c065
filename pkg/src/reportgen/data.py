"""Deterministic synthetic head-scan corpus.

Directory layout written by :func:`generate_dataset`::

    manifest.json        version, count, seed, class distribution, checksums
    splits.json          {"train": [ids], "val": [ids], "test": [ids]}
    reports.jsonl        {"id", "report", "labels"} per line, id order
    images/<id>.img      16-byte header (magic, version, H, W as uint32 LE)
                         + row-major float32 LE intensities
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptDataError, DataError
from .metrics import FindingLabel

IMAGE_SIZE = 64
IMAGE_MAGIC = 0x4E414353  # b"SCAN" little-endian
IMAGE_VERSION = 1
MANIFEST_VERSION = 1
MIN_CASES = 10
_HEADER = struct.Struct("<4I")

CLASSES = (
    FindingLabel.EPIDURAL,
    FindingLabel.SUBDURAL,
    FindingLabel.SUBARACHNOID,
    FindingLabel.INTRAPARENCHYMAL,
    FindingLabel.INTRAVENTRICULAR,
    FindingLabel.NORMAL,
)
SIDES = ("left", "right")
SIZES = ("small", "moderate", "large")
_SIZE_FACTOR = {"small": 0.7, "moderate": 1.0, "large": 1.4}

_FINDING_PHRASE = {
    FindingLabel.EPIDURAL: ("epidural hematoma", "in the {side} temporal region"),
    FindingLabel.SUBDURAL: ("subdural hematoma", "along the {side} convexity"),
    FindingLabel.SUBARACHNOID: ("subarachnoid hemorrhage", "within the {side} sylvian fissure"),
    FindingLabel.INTRAPARENCHYMAL: ("intraparenchymal hemorrhage", "in the {side} frontal lobe"),
    FindingLabel.INTRAVENTRICULAR: ("intraventricular hemorrhage", "in the {side} lateral ventricle"),
}
_SKELETONS = (
    "there is a {size} {finding} {location} .",
    "{size} {finding} {location} . no midline shift .",
    "findings are consistent with a {size} {finding} {location} . the remaining brain parenchyma is unremarkable .",
)
_NORMAL_SKELETONS = (
    "no evidence of intracranial hemorrhage .",
    "the brain parenchyma is unremarkable . no evidence of intracranial hemorrhage .",
    "no acute intracranial abnormality . the ventricles are normal in size .",
)


@dataclass
class SyntheticCase:
    id: str
    image: np.ndarray  # [1, 64, 64], float32-representable values in [0, 1]
    report: str
    labels: frozenset
    seed: int
    side: str | None = None
    size: str | None = None


def case_rngs(seed: int):
    """Independent streams: (case attributes, skull background, anomaly patch)."""
    return tuple(np.random.default_rng([seed, k]) for k in range(3))


def _grid():
    y, x = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64) + 0.5
    return y, x


def _smoothstep(d: np.ndarray, width: float = 1.0) -> np.ndarray:
    """1 inside (d < 0), 0 outside, linear over ``width`` pixels."""
    return np.clip(0.5 - d / width, 0.0, 1.0)


def render_background(rng: np.random.Generator) -> np.ndarray:
    y, x = _grid()
    cy = 32 + rng.uniform(-1.5, 1.5)
    cx = 32 + rng.uniform(-1.5, 1.5)
    ay, ax = 29.0 + rng.uniform(-1, 1), 26.0 + rng.uniform(-1, 1)
    r = np.sqrt(((y - cy) / ay) ** 2 + ((x - cx) / ax) ** 2)
    skull = _smoothstep((r - 1.0) * 28) - _smoothstep((r - 0.92) * 28)
    brain = _smoothstep((r - 0.92) * 28)
    ventricle = _smoothstep(np.sqrt(((y - cy) / 6.0) ** 2 + ((x - cx) / 3.5) ** 2) - 1.0, 0.3)
    img = 0.9 * skull + brain * (0.35 + 0.04 * np.sin(y / 5.0) * np.cos(x / 7.0)) - 0.15 * ventricle * brain
    img += rng.normal(0.0, 0.02, size=img.shape)
    return img


def render_anomaly(label: FindingLabel, side: str, size: str, rng: np.random.Generator) -> np.ndarray:
    """Additive bright patch for the hemorrhage class (zeros for normal)."""
    y, x = _grid()
    patch = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    if label is FindingLabel.NORMAL:
        return patch
    s = _SIZE_FACTOR[size]
    sign = -1.0 if side == "left" else 1.0
    jitter = rng.uniform(-1.5, 1.5, size=2)
    if label is FindingLabel.EPIDURAL:
        cy, cx = 32 + jitter[0], 32 + sign * 21.5
        d = np.sqrt(((y - cy) / (7.0 * s)) ** 2 + ((x - cx) / (2.5 * s)) ** 2) - 1.0
        patch = 0.55 * _smoothstep(d * 3)
    elif label is FindingLabel.SUBDURAL:
        r = np.sqrt(((y - 32) / 26.5) ** 2 + ((x - 32) / 23.5) ** 2)
        thickness = 0.06 * s
        band = _smoothstep((r - 1.0) * 25) - _smoothstep((r - (1.0 - thickness)) * 25)
        half = np.clip(sign * (x - 32) / 4.0, 0.0, 1.0)
        patch = 0.5 * band * half * _smoothstep((np.abs(y - 32 - jitter[0]) - 20.0) / 4.0)
    elif label is FindingLabel.SUBARACHNOID:
        count = int(round(8 * s))
        for _ in range(count):
            ang = rng.uniform(-0.9, 0.9)
            rad = rng.uniform(0.6, 0.85)
            py = 32 + 27 * rad * np.sin(ang)
            px = 32 + sign * 24 * rad * np.cos(ang)
            patch += 0.45 * np.exp(-(((y - py) ** 2 + (x - px) ** 2) / 1.2))
    elif label is FindingLabel.INTRAPARENCHYMAL:
        cy, cx = 22 + jitter[0], 32 + sign * (11 + jitter[1])
        patch = 0.55 * np.exp(-(((y - cy) ** 2 + (x - cx) ** 2) / (2 * (2.6 * s) ** 2)))
    elif label is FindingLabel.INTRAVENTRICULAR:
        cy, cx = 32 + 0.5 * jitter[0], 32 + sign * 2.2
        patch = 0.6 * np.exp(-(((y - cy) / (2.8 * s)) ** 2 + ((x - cx) / (1.6 * s)) ** 2))
    return patch


def _finish(img: np.ndarray) -> np.ndarray:
    # quantised to float32 so the on-disk round trip is exact
    return np.clip(img, 0.0, 1.0).astype(np.float32).astype(np.float64)[None]


def make_report(label: FindingLabel, side: str, size: str, skeleton: int) -> str:
    if label is FindingLabel.NORMAL:
        return _NORMAL_SKELETONS[skeleton]
    finding, location = _FINDING_PHRASE[label]
    return _SKELETONS[skeleton].format(size=size, finding=finding, location=location.format(side=side))


def generate_case(seed: int, case_id: str | None = None) -> SyntheticCase:
    attrs, bg_rng, patch_rng = case_rngs(seed)
    label = CLASSES[int(attrs.integers(len(CLASSES)))]
    side = SIDES[int(attrs.integers(2))]
    size = SIZES[int(attrs.integers(3))]
    skeleton = int(attrs.integers(3))
    image = _finish(render_background(bg_rng) + render_anomaly(label, side, size, patch_rng))
    if label is FindingLabel.NORMAL:
        side = size = None
    return SyntheticCase(
        id=case_id or f"seed-{seed}",
        image=image,
        report=make_report(label, side, size, skeleton),
        labels=frozenset({label}),
        seed=seed,
        side=side,
        size=size,
    )


def anomaly_energy(case: SyntheticCase) -> float:
    """Total intensity the case adds on top of its own anomaly-free background."""
    _, bg_rng, _ = case_rngs(case.seed)
    return float(np.abs(case.image - _finish(render_background(bg_rng))).sum())


def case_seed(dataset_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([dataset_seed, index]).generate_state(1)[0])


# -- on-disk formats -------------------------------------------------------------


def encode_image(image: np.ndarray) -> bytes:
    _, H, W = image.shape
    return _HEADER.pack(IMAGE_MAGIC, IMAGE_VERSION, H, W) + np.ascontiguousarray(image[0], dtype="<f4").tobytes()


def decode_image(blob: bytes, name: str = "<image>") -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise CorruptDataError(f"{name}: truncated header")
    magic, version, H, W = _HEADER.unpack_from(blob)
    if magic != IMAGE_MAGIC or version != IMAGE_VERSION:
        raise CorruptDataError(f"{name}: bad magic/version")
    payload = blob[_HEADER.size :]
    if len(payload) != 4 * H * W:
        raise CorruptDataError(f"{name}: expected {H}x{W} float32 payload, found {len(payload)} bytes")
    return np.frombuffer(payload, dtype="<f4").reshape(1, H, W).astype(np.float64)


def _sha256(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def _write_if_changed(path: Path, blob: bytes, written: list | None) -> None:
    if path.exists() and path.read_bytes() == blob:
        return
    path.write_bytes(blob)
    if written is not None:
        written.append(path)


def split_ids(ids: list[str]) -> dict[str, list[str]]:
    """80/10/10 by ascending SHA-256 of the id; lists returned in id order."""
    ranked = sorted(ids, key=lambda i: hashlib.sha256(i.encode()).hexdigest())
    n_train, n_val = int(0.8 * len(ids)), int(0.1 * len(ids))
    parts = {"train": ranked[:n_train], "val": ranked[n_train : n_train + n_val], "test": ranked[n_train + n_val :]}
    return {k: sorted(v) for k, v in parts.items()}


def _dumps(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def generate_dataset(n: int, seed: int, out_dir: str | Path, *, written: list | None = None) -> dict:
    """Write ``n`` cases and return the manifest; reruns are byte-identical.

    Files whose bytes actually changed are appended to ``written``.
    """
    if n < MIN_CASES:
        raise DataError(f"dataset needs at least {MIN_CASES} cases, got {n}")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc

    ids, checksums, lines = [], {}, []
    distribution = {label.value: 0 for label in CLASSES}
    for i in range(n):
        cid = f"case-{i:05d}"
        case = generate_case(case_seed(seed, i), cid)
        blob = encode_image(case.image)
        _write_if_changed(out / "images" / f"{cid}.img", blob, written)
        checksums[cid] = _sha256(blob)
        ids.append(cid)
        (label,) = case.labels
        distribution[label.value] += 1
        lines.append(json.dumps({"id": cid, "report": case.report, "labels": sorted(l.value for l in case.labels),
                                 "seed": case.seed}, sort_keys=True))
    splits = split_ids(ids)
    _write_if_changed(out / "reports.jsonl", ("\n".join(lines) + "\n").encode(), written)
    _write_if_changed(out / "splits.json", _dumps(splits), written)
    manifest = {
        "version": MANIFEST_VERSION,
        "count": n,
        "seed": seed,
        "image_shape": [1, IMAGE_SIZE, IMAGE_SIZE],
        "class_distribution": distribution,
        "split_counts": {k: len(v) for k, v in splits.items()},
        "ids": ids,
        "checksums": checksums,
    }
    _write_if_changed(out / "manifest.json", _dumps(manifest), written)
    return manifest


def load_manifest(data_dir: str | Path) -> dict:
    path = Path(data_dir) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"no manifest.json in {data_dir}") from None
    except json.JSONDecodeError:
        raise CorruptDataError(f"{path}: not valid JSON") from None
    if manifest.get("version") != MANIFEST_VERSION:
        raise DataError(f"{path}: unsupported manifest version {manifest.get('version')}")
    return manifest


def load_reports(path: str | Path) -> dict[str, dict]:
    records = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                records[rec["id"]] = rec
            except (json.JSONDecodeError, KeyError):
                raise CorruptDataError(f"{path}:{lineno}: malformed record") from None
    return records


def load_split(data_dir: str | Path, split: str) -> list[SyntheticCase]:
    """Cases of one split (or ``all``) in manifest order, validated on load."""
    root = Path(data_dir)
    manifest = load_manifest(root)
    if split == "all":
        wanted = manifest["ids"]
    else:
        splits = json.loads((root / "splits.json").read_text())
        if split not in splits:
            raise DataError(f"unknown split {split!r}; available: {sorted(splits)}")
        member = set(splits[split])
        wanted = [i for i in manifest["ids"] if i in member]
    reports = load_reports(root / "reports.jsonl")
    shape = tuple(manifest["image_shape"])
    cases = []
    for cid in wanted:
        path = root / "images" / f"{cid}.img"
        try:
            blob = path.read_bytes()
        except FileNotFoundError:
            raise CorruptDataError(f"{path}: missing image file") from None
        if _sha256(blob) != manifest["checksums"].get(cid):
            raise CorruptDataError(f"{path}: checksum mismatch")
        image = decode_image(blob, str(path))
        if image.shape != shape:
            raise CorruptDataError(f"{path}: shape {image.shape} != manifest {shape}")
        if not np.all(np.isfinite(image)) or image.min() < 0.0 or image.max() > 1.0:
            raise CorruptDataError(f"{path}: intensities outside [0, 1]")
        rec = reports.get(cid)
        if rec is None:
            raise CorruptDataError(f"{root / 'reports.jsonl'}: no report for {cid}")
        cases.append(SyntheticCase(cid, image, rec["report"], frozenset(FindingLabel(l) for l in rec["labels"]),
                                   rec.get("seed", -1)))
    return cases

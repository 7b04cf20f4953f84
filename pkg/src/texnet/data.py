"""Dataset ingestion, patient-wise fold planning and image loading."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

SUBTYPES = {
    # filename code -> (subtype, tumor class)
    "A": ("adenosis", "benign"),
    "F": ("fibroadenoma", "benign"),
    "PT": ("phyllodes", "benign"),
    "TA": ("tubular_adenoma", "benign"),
    "DC": ("ductal", "malignant"),
    "LC": ("lobular", "malignant"),
    "MC": ("mucinous", "malignant"),
    "PC": ("papillary", "malignant"),
}
SUBTYPE_CLASS = {name: cls for name, cls in SUBTYPES.values()}
CLASSES = ("benign", "malignant")
MAGNIFICATIONS = (40, 100, 200, 400)
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}
MANIFEST_HEADER = ["path", "patient_id", "class", "subtype", "magnification", "seq"]

# images and patients per subtype over all four magnifications
BREAKHIS_COUNTS = {
    "adenosis": (444, 4), "fibroadenoma": (1014, 10), "phyllodes": (453, 3),
    "tubular_adenoma": (569, 7), "ductal": (3451, 38), "lobular": (626, 5),
    "mucinous": (792, 9), "papillary": (560, 6),
}
# the benign total is the sum of its subtype rows; 2480 + 5429 = 7909 images
BREAKHIS_TOTALS = {"benign": (2480, 24), "malignant": (5429, 58)}

_NAME_RE = re.compile(
    r"^SOB_(?P<cls>[BM])_(?P<sub>[A-Z]+)-(?P<slide>[0-9]+-[0-9A-Z]+)-(?P<mag>[0-9]+)-(?P<seq>[0-9]+)\.(?P<ext>\w+)$"
)


class ManifestError(ValueError):
    pass


def seed_for(seed: int, label: str, *extra: int) -> int:
    """Derive an independent 64-bit sub-seed from a root seed and a label."""
    key = ":".join([str(int(seed)), label, *(str(int(e)) for e in extra)])
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little")


@dataclass(frozen=True)
class ImageRecord:
    path: str
    patient_id: str
    tumor_class: str
    subtype: str
    magnification: int
    seq: int = 0

    def __post_init__(self):
        if not self.patient_id:
            raise ManifestError(f"{self.path}: empty patient id")
        if self.tumor_class not in CLASSES:
            raise ManifestError(f"{self.path}: unknown class {self.tumor_class!r}")
        expected = SUBTYPE_CLASS.get(self.subtype)
        if expected is not None and expected != self.tumor_class:
            raise ManifestError(f"{self.path}: subtype {self.subtype} is {expected}, not {self.tumor_class}")

    @property
    def label(self) -> int:
        return CLASSES.index(self.tumor_class)

    @property
    def image_id(self) -> str:
        return Path(self.path).name


def parse_filename(name: str) -> dict:
    """Fields encoded in a BreakHis file name such as ``SOB_B_TA-14-4659-40-001.png``."""
    m = _NAME_RE.match(Path(name).name)
    if not m or m["sub"] not in SUBTYPES:
        raise ManifestError(f"file name does not follow the BreakHis convention: {name!r}")
    subtype, cls = SUBTYPES[m["sub"]]
    if cls[0].upper() != m["cls"]:
        raise ManifestError(f"{name!r}: class letter {m['cls']} contradicts subtype {m['sub']}")
    return {"patient_id": m["slide"], "tumor_class": cls, "subtype": subtype,
            "magnification": int(m["mag"]), "seq": int(m["seq"])}


@dataclass
class Manifest:
    records: list[ImageRecord]
    by_patient: dict[str, list[ImageRecord]] = field(init=False, repr=False)

    def __post_init__(self):
        self.by_patient = defaultdict(list)
        for r in self.records:
            self.by_patient[r.patient_id].append(r)
        self.by_patient = dict(self.by_patient)
        for pid, recs in self.by_patient.items():
            if len({r.tumor_class for r in recs}) > 1:
                raise ManifestError(f"patient {pid} has images of both classes")

    def __len__(self) -> int:
        return len(self.records)

    def patients(self) -> list[str]:
        return sorted(self.by_patient)

    def patient_class(self, pid: str) -> str:
        return self.by_patient[pid][0].tumor_class

    def select(self, patient_ids: Iterable[str]) -> list[ImageRecord]:
        wanted = set(patient_ids)
        return [r for r in self.records if r.patient_id in wanted]

    def counts(self) -> dict[str, tuple[int, int]]:
        """(images, patients) per subtype and per class."""
        out = {}
        for key in ("subtype", "tumor_class"):
            imgs = Counter(getattr(r, key) for r in self.records)
            pats = Counter(getattr(recs[0], key) for recs in self.by_patient.values())
            for name in imgs:
                out[name] = (imgs[name], pats[name])
        return out


def verify_breakhis_counts(manifest: Manifest) -> None:
    """Raise if subtype/class image and patient counts differ from the public release."""
    got = manifest.counts()
    wrong = [f"{name}: expected {exp}, found {got.get(name, (0, 0))}"
             for name, exp in {**BREAKHIS_COUNTS, **BREAKHIS_TOTALS}.items()
             if got.get(name, (0, 0)) != exp]
    if wrong:
        raise ManifestError("count verification failed; " + "; ".join(wrong))


def scan_directory(root, strict: bool = False) -> list[ImageRecord]:
    root = Path(root)
    if not root.is_dir():
        raise ManifestError(f"data directory not found: {root}")
    records = []
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        if not strict and path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        try:
            fields = parse_filename(path.name)
        except ManifestError:
            if strict:
                raise
            log.warning("skipping %s: not a BreakHis file name", path)
            continue
        records.append(ImageRecord(str(path), **fields))
    return records


def read_manifest_csv(path) -> list[ImageRecord]:
    path = Path(path)
    base = path.parent
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise ManifestError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
        records = []
        for row in reader:
            p = Path(row["path"])
            records.append(ImageRecord(str(p if p.is_absolute() else base / p), row["patient_id"],
                                       row["class"], row["subtype"], int(row["magnification"]),
                                       int(row["seq"] or 0)))
    return records


def write_manifest(manifest: Manifest, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_HEADER)
        for r in manifest.records:
            w.writerow([r.path, r.patient_id, r.tumor_class, r.subtype, r.magnification, r.seq])


def load_manifest(source, verify: bool = False, strict: bool = False,
                  check_files: bool = True) -> Manifest:
    """Build a manifest from a BreakHis directory tree or a manifest CSV."""
    source = Path(source)
    if source.is_dir():
        records = scan_directory(source, strict=strict)
    elif source.is_file():
        records = read_manifest_csv(source)
        if check_files:
            missing = [r.path for r in records if not Path(r.path).is_file()]
            if missing:
                raise ManifestError(f"{len(missing)} manifest entries point at missing files, e.g. {missing[0]}")
    else:
        raise ManifestError(f"cannot read data source {source}")
    manifest = Manifest(records)
    if verify:
        verify_breakhis_counts(manifest)
    return manifest


def filter_magnification(manifest: Manifest, factor: int) -> Manifest:
    if factor not in MAGNIFICATIONS:
        raise ValueError(f"magnification must be one of {MAGNIFICATIONS}")
    return Manifest([r for r in manifest.records if r.magnification == factor])


# -- patient-wise folds --------------------------------------------------------

@dataclass
class Fold:
    train: list[str]
    validation: list[str]
    test: list[str]

    def role_of(self) -> dict[str, str]:
        return {p: role for role in ("train", "validation", "test") for p in getattr(self, role)}


@dataclass
class FoldPlan:
    seed: int
    folds: list[Fold]
    test_fraction: float = 0.3
    validation_fraction: float = 0.15

    @property
    def n_folds(self) -> int:
        return len(self.folds)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "test_fraction": self.test_fraction,
                "validation_fraction": self.validation_fraction,
                "folds": [{"train": f.train, "validation": f.validation, "test": f.test}
                          for f in self.folds]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "FoldPlan":
        folds = [Fold(list(f["train"]), list(f["validation"]), list(f["test"])) for f in d["folds"]]
        return cls(int(d["seed"]), folds, d.get("test_fraction", 0.3), d.get("validation_fraction", 0.15))

    @classmethod
    def load(cls, path) -> "FoldPlan":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


def _split_count(n: int, fraction: float, keep: int) -> int:
    """round(n * fraction) clamped to [1, n - keep]."""
    return min(max(1, int(np.floor(n * fraction + 0.5))), n - keep)


def make_folds(manifest: Manifest, n_folds: int = 5, test_fraction: float = 0.3,
               validation_fraction: float = 0.15, seed: int = 0) -> FoldPlan:
    """Repeated stratified patient-wise hold-outs.

    For every tumor class independently, about ``test_fraction`` of its
    patients go to test and about ``validation_fraction`` of the rest go to
    validation; each role receives at least one patient of each class.
    """
    if n_folds < 1:
        raise ValueError("n_folds must be >= 1")
    by_class: dict[str, list[str]] = {c: [] for c in CLASSES}
    for pid in manifest.patients():
        by_class[manifest.patient_class(pid)].append(pid)
    for cls, pids in by_class.items():
        if len(pids) < 3:
            raise ValueError(f"class {cls} has {len(pids)} patients; need >= 3 to fill train/validation/test")

    folds = []
    for k in range(n_folds):
        rng = np.random.default_rng(seed_for(seed, "split", k))
        train, val, test = [], [], []
        for cls in CLASSES:
            pids = list(by_class[cls])
            rng.shuffle(pids)
            n_test = _split_count(len(pids), test_fraction, keep=2)
            rest = pids[n_test:]
            n_val = _split_count(len(rest), validation_fraction, keep=1)
            test += pids[:n_test]
            val += rest[:n_val]
            train += rest[n_val:]
        folds.append(Fold(sorted(train), sorted(val), sorted(test)))
    return FoldPlan(seed, folds, test_fraction, validation_fraction)


# -- image decoding and resizing -------------------------------------------------

SOURCE_SHAPE = (460, 700)  # height, width of BreakHis images


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centres and edge clamping.

    Halving an image averages each 2x2 block exactly.
    """
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        i0 = np.floor(pos).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, (pos - i0)

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    fx = fx.reshape((1, -1) + (1,) * (img.ndim - 2))
    fy = fy.reshape((-1, 1) + (1,) * (img.ndim - 2))
    # lerp as a + t*(b - a) keeps constant regions exactly constant
    top = img[y0][:, x0] + fx * (img[y0][:, x1] - img[y0][:, x0])
    bot = img[y1][:, x0] + fx * (img[y1][:, x1] - img[y1][:, x0])
    return top + fy * (bot - top)


def decode_image(path) -> np.ndarray:
    """RGB pixels as float64 in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc
    return arr / 255.0


def load_image(record, shape: tuple[int, int] = (230, 350), strict_source: bool = False,
               dtype=np.float32) -> np.ndarray:
    """Decode and resample to ``shape`` (height, width) -> array (H, W, 3) in [0, 1]."""
    path = record.path if hasattr(record, "path") else record
    arr = decode_image(path)
    if strict_source and arr.shape[:2] != SOURCE_SHAPE:
        raise ValueError(f"{path}: expected a {SOURCE_SHAPE[1]}x{SOURCE_SHAPE[0]} source, got "
                         f"{arr.shape[1]}x{arr.shape[0]}")
    out = resize_bilinear(arr, *shape)
    return np.clip(out, 0.0, 1.0).astype(dtype)


# -- in-memory and lazy datasets ---------------------------------------------------

@dataclass
class ArrayDataset:
    """Images held in memory as an (N, H, W, C) array."""

    images: np.ndarray
    labels: np.ndarray
    patient_ids: Sequence[str]
    image_ids: Optional[Sequence[str]] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.image_ids is None:
            self.image_ids = [str(i) for i in range(len(self.labels))]
        if not (len(self.images) == len(self.labels) == len(self.patient_ids) == len(self.image_ids)):
            raise ValueError("images, labels, patient ids and image ids must have equal length")

    def __len__(self) -> int:
        return len(self.labels)

    def get_batch(self, idx) -> np.ndarray:
        return self.images[idx]


class RecordDataset:
    """Images decoded on demand from records, optionally with affine variants.

    ``items`` holds ``(record, AffineParams | None)`` pairs; the pixels of a
    variant are regenerated identically on every access.
    """

    def __init__(self, items, shape=(230, 350), dtype=np.float32, cache: bool = True):
        self.items = list(items)
        self.shape = tuple(shape)
        self.dtype = dtype
        self.labels = np.array([r.label for r, _ in self.items], dtype=np.int64)
        self.patient_ids = [r.patient_id for r, _ in self.items]
        self.image_ids = [r.image_id if p is None else f"{r.image_id}#aug{i}"
                          for i, (r, p) in enumerate(self.items)]
        self._cache: Optional[dict] = {} if cache else None

    @classmethod
    def from_records(cls, records, **kw) -> "RecordDataset":
        return cls([(r, None) for r in records], **kw)

    def __len__(self) -> int:
        return len(self.items)

    def _base(self, record):
        if self._cache is None:
            return load_image(record, self.shape, dtype=self.dtype)
        if record.path not in self._cache:
            self._cache[record.path] = load_image(record, self.shape, dtype=self.dtype)
        return self._cache[record.path]

    def get_batch(self, idx) -> np.ndarray:
        from .augment import apply_affine

        out = np.empty((len(idx), *self.shape, 3), dtype=self.dtype)
        for j, i in enumerate(idx):
            record, params = self.items[i]
            img = self._base(record)
            out[j] = img if params is None else apply_affine(img, params)
        return out

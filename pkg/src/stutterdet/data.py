"""Segment manifests, podcast-grouped fold plans and class weights."""

import csv
import enum
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .exceptions import InfeasibleSplitError, ManifestError, MissingClassError

logger = logging.getLogger(__name__)

MANIFEST_FIELDS = ("id", "audio_path", "offset_s", "duration_s", "label", "podcast_id")


class Label(enum.IntEnum):
    """The five single-label classes. Integer values are model output indices."""

    Repetition = 0
    Prolongation = 1
    Block = 2
    Interjection = 3
    Fluent = 4

    @classmethod
    def parse(cls, text):
        key = text.strip().lower()
        for member in cls:
            if member.name.lower() == key:
                return member
        return _ALIASES.get(key)


_ALIASES = {
    "rep": Label.Repetition, "r": Label.Repetition,
    "wordrep": Label.Repetition, "soundrep": Label.Repetition,
    "prolong": Label.Prolongation, "p": Label.Prolongation,
    "b": Label.Block,
    "interj": Label.Interjection, "in": Label.Interjection,
    "f": Label.Fluent, "nodysfluency": Label.Fluent,
}

N_CLASSES = len(Label)
LABEL_NAMES = [label.name for label in Label]


class FluencyLabel(enum.IntEnum):
    """Targets of the two-way fluent/disfluent head."""

    Fluent = 0
    Disfluent = 1


def fluent_pseudo_label(record):
    label = record.label if isinstance(record, SegmentRecord) else Label(record)
    return FluencyLabel.Fluent if label == Label.Fluent else FluencyLabel.Disfluent


@dataclass(frozen=True)
class SegmentRecord:
    id: str
    audio_path: str
    offset_s: float
    duration_s: float
    label: Label
    podcast_id: str
    augmentation: str = "clean"

    def __post_init__(self):
        if not self.duration_s > 0:
            raise ValueError(f"record {self.id}: duration_s must be positive")
        if not isinstance(self.label, Label):
            object.__setattr__(self, "label", Label(self.label))


@dataclass
class Manifest:
    records: list = field(default_factory=list)
    source_name: str = ""
    excluded: int = 0

    def __post_init__(self):
        counts = Counter(r.id for r in self.records)
        dupes = sorted(k for k, v in counts.items() if v > 1)
        if dupes:
            raise ManifestError(f"duplicate record ids: {', '.join(dupes[:5])}")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __eq__(self, other):
        return isinstance(other, Manifest) and self.records == other.records

    @property
    def podcasts(self):
        return sorted({r.podcast_id for r in self.records})

    @property
    def labels(self):
        return np.array([int(r.label) for r in self.records], dtype=np.int64)

    def label_counts(self):
        counts = Counter(r.label for r in self.records)
        return {label: counts.get(label, 0) for label in Label}

    def subset(self, podcasts, name=None):
        podcasts = set(podcasts)
        return Manifest(
            [r for r in self.records if r.podcast_id in podcasts],
            source_name=name or self.source_name,
        )


def parse_manifest(path):
    """Read a CSV manifest, dropping rows whose label is outside the taxonomy.

    Rows such as ``NoSpeech`` or ``Music`` are skipped and counted in
    ``Manifest.excluded``. Relative audio paths resolve against the
    manifest's directory.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            logger.warning("manifest %s is empty", path)
            return Manifest([], source_name=path.stem)
        header = [h.strip() for h in header]
        missing = [f for f in MANIFEST_FIELDS if f not in header]
        if missing:
            raise ManifestError(f"header lacks columns {missing}", line=1)
        col = {name: header.index(name) for name in header}
        has_aug = "augmentation" in col
        records, seen, excluded = [], set(), 0
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ManifestError(
                    f"expected {len(header)} fields, found {len(row)}", line=lineno
                )
            label = Label.parse(row[col["label"]])
            if label is None:
                excluded += 1
                continue
            try:
                offset = float(row[col["offset_s"]])
                duration = float(row[col["duration_s"]])
            except ValueError as exc:
                raise ManifestError(str(exc), line=lineno) from None
            if not duration > 0 or offset < 0:
                raise ManifestError("offset_s must be >= 0 and duration_s > 0", line=lineno)
            rid = row[col["id"]].strip()
            if rid in seen:
                raise ManifestError(f"duplicate id {rid!r}", line=lineno)
            seen.add(rid)
            audio = row[col["audio_path"]].strip()
            if not Path(audio).is_absolute():
                audio = str((path.parent / audio).resolve())
            records.append(SegmentRecord(
                id=rid, audio_path=audio, offset_s=offset, duration_s=duration,
                label=label, podcast_id=row[col["podcast_id"]].strip(),
                augmentation=row[col["augmentation"]].strip() if has_aug else "clean",
            ))
    if excluded:
        logger.info("%s: excluded %d rows with out-of-taxonomy labels", path, excluded)
    if not records:
        logger.warning("manifest %s has no usable rows", path)
    return Manifest(records, source_name=path.stem, excluded=excluded)


def write_manifest(manifest, path, relative_to=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = Path(relative_to) if relative_to is not None else path.parent
    with_aug = any(r.augmentation != "clean" for r in manifest.records)
    fields = MANIFEST_FIELDS + (("augmentation",) if with_aug else ())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for r in manifest.records:
            audio = Path(r.audio_path)
            try:
                audio = audio.resolve().relative_to(base.resolve())
            except ValueError:
                pass
            row = [r.id, str(audio), repr(float(r.offset_s)), repr(float(r.duration_s)),
                   r.label.name, r.podcast_id]
            if with_aug:
                row.append(r.augmentation)
            writer.writerow(row)
    return path


@dataclass(frozen=True)
class Fold:
    train: frozenset
    valid: frozenset
    test: frozenset


@dataclass
class SplitPlan:
    folds: list

    def __len__(self):
        return len(self.folds)

    def to_json(self):
        return json.dumps(
            {"folds": [
                {"fold": i, "train": sorted(f.train), "valid": sorted(f.valid),
                 "test": sorted(f.test)}
                for i, f in enumerate(self.folds)
            ]},
            indent=2,
        )

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        return cls([
            Fold(frozenset(f["train"]), frozenset(f["valid"]), frozenset(f["test"]))
            for f in data["folds"]
        ])

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def make_split(manifest, n_folds=10, ratios=(0.8, 0.1, 0.1), seed=0):
    """Rotate podcasts through test/valid/train sets over ``n_folds`` folds.

    Podcasts are shuffled by ``seed`` and dealt into ``n_folds`` nearly
    equal groups. Fold k tests on group k and validates on group k+1
    (cyclically), training on the rest; with ten folds this gives the
    80/10/10 podcast split with every podcast tested exactly once. The
    train/valid/test ``ratios`` are honoured for other fold counts by
    drawing the validation groups from the ones following the test group.
    """
    podcasts = manifest.podcasts if isinstance(manifest, Manifest) else sorted(set(manifest))
    if n_folds < 2:
        raise InfeasibleSplitError("need at least 2 folds")
    if len(podcasts) < n_folds:
        raise InfeasibleSplitError(
            f"{len(podcasts)} podcasts cannot fill {n_folds} folds"
        )
    if not math.isclose(sum(ratios), 1.0, abs_tol=1e-9) or min(ratios) <= 0:
        raise InfeasibleSplitError("ratios must be positive and sum to 1")
    rng = np.random.default_rng(seed)
    order = [podcasts[i] for i in rng.permutation(len(podcasts))]
    groups = [order[k::n_folds] for k in range(n_folds)]
    n_valid_groups = max(1, int(round(ratios[1] / ratios[2])))
    if n_valid_groups >= n_folds - 1:
        raise InfeasibleSplitError("ratios leave no training podcasts")
    folds = []
    for k in range(n_folds):
        test = frozenset(groups[k])
        valid = frozenset(
            p for j in range(1, n_valid_groups + 1) for p in groups[(k + j) % n_folds]
        )
        train = frozenset(podcasts) - test - valid
        folds.append(Fold(train, valid, test))
    return SplitPlan(folds)


def class_weights(manifest_or_counts, n_classes=N_CLASSES):
    """Inverse-frequency weights w_i = N / (C * N_i).

    Accepts a :class:`Manifest`, a mapping label -> count, or a sequence of
    integer labels. Returns a float64 array indexed by class.
    """
    counts = _class_counts(manifest_or_counts, n_classes)
    for k, n_k in enumerate(counts):
        if n_k == 0:
            name = Label(k).name if n_classes == N_CLASSES else str(k)
            raise MissingClassError(name)
    total = counts.sum()
    return total / (n_classes * counts.astype(np.float64))


def _class_counts(source, n_classes):
    if isinstance(source, Manifest):
        source = source.labels
    if isinstance(source, dict):
        counts = np.zeros(n_classes, dtype=np.int64)
        for key, n in source.items():
            counts[int(key) if not isinstance(key, str) else int(Label[key])] = n
        return counts
    labels = np.asarray(source, dtype=np.int64)
    return np.bincount(labels, minlength=n_classes)[:n_classes]


def with_augmentation(record, new_id, audio_path, kind):
    return replace(record, id=new_id, audio_path=str(audio_path), offset_s=0.0, augmentation=kind)

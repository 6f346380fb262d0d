"""Ternary label model and the merged multi-dataset label database.

Every cell of the label grid is one of three states: displayed (1), not
displayed (0) or unknown (-1).  Studies annotate different subsets of
classes, so merging them leaves every class a study did not annotate as
unknown.  Unknown cells are never turned into 0 or 1 here.
"""

from __future__ import annotations

import csv
import json
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

DB_FORMAT = "aumask-db"
DB_VERSION = 1


class TernaryLabel(IntEnum):
    UNKNOWN = -1
    NOT_DISPLAYED = 0
    DISPLAYED = 1


UNKNOWN = int(TernaryLabel.UNKNOWN)
NOT_DISPLAYED = int(TernaryLabel.NOT_DISPLAYED)
DISPLAYED = int(TernaryLabel.DISPLAYED)


class LabelStoreError(ValueError):
    """Base class for label store failures."""


class ValidationError(LabelStoreError):
    pass


class DuplicateSampleError(ValidationError):
    def __init__(self, sample_id: str):
        super().__init__(f"duplicate sample_id: {sample_id!r}")
        self.sample_id = sample_id


class ParseError(LabelStoreError):
    def __init__(self, message: str, path: str | Path | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
        self.line = line


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def _check_class_names(class_names: Sequence[str]) -> tuple[str, ...]:
    names = tuple(class_names)
    if any(not isinstance(n, str) or not n for n in names):
        raise ValidationError("class names must be non-empty strings")
    if len(set(names)) != len(names):
        raise ValidationError("class names must be unique")
    return names


@dataclass(frozen=True)
class LabelMatrix:
    """Samples x classes grid of ternary codes (int8: -1, 0, 1)."""

    class_names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        names = _check_class_names(self.class_names)
        values = np.array(self.values, dtype=np.int8, copy=True)
        if values.ndim == 1 and values.size == 0:
            values = values.reshape(0, len(names))
        if values.ndim != 2 or values.shape[1] != len(names):
            raise ValidationError(
                f"label grid has shape {values.shape}, expected (n, {len(names)})"
            )
        if not np.isin(values, (UNKNOWN, NOT_DISPLAYED, DISPLAYED)).all():
            raise ValidationError("label codes must be in {-1, 0, 1}")
        object.__setattr__(self, "class_names", names)
        object.__setattr__(self, "values", _frozen(values))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __len__(self) -> int:
        return self.values.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.class_names.index(name)]

    def annotated_mask(self) -> np.ndarray:
        return self.values != UNKNOWN


@dataclass(frozen=True)
class PredictionMatrix:
    """Samples x classes grid of probabilities in [0, 1]."""

    class_names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        names = _check_class_names(self.class_names)
        values = np.array(self.values, dtype=np.float64, copy=True)
        if values.ndim == 1 and values.size == 0:
            values = values.reshape(0, len(names))
        if values.ndim != 2 or values.shape[1] != len(names):
            raise ValidationError(
                f"prediction grid has shape {values.shape}, expected (n, {len(names)})"
            )
        if not (np.all(values >= 0.0) and np.all(values <= 1.0)):
            raise ValidationError("probabilities must lie in [0, 1]")
        object.__setattr__(self, "class_names", names)
        object.__setattr__(self, "values", _frozen(values))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def check_pairs_with(self, labels: LabelMatrix) -> None:
        if self.class_names != labels.class_names:
            raise ValidationError("prediction and label class axes differ")
        if self.shape != labels.shape:
            raise ValidationError(f"shape mismatch: {self.shape} vs {labels.shape}")


@dataclass(frozen=True)
class DatasetDescriptor:
    name: str
    annotated_classes: frozenset[str]
    source_uri: str = ""
    notes: str = ""

    def __post_init__(self):
        if not self.name:
            raise ValidationError("dataset name must be non-empty")
        classes = frozenset(self.annotated_classes)
        if not classes:
            raise ValidationError(f"dataset {self.name!r} annotates no classes")
        _check_class_names(sorted(classes))
        object.__setattr__(self, "annotated_classes", classes)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "annotated_classes": sorted(self.annotated_classes),
            "source_uri": self.source_uri,
            "notes": self.notes,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> DatasetDescriptor:
        try:
            return cls(
                name=str(data["name"]),
                annotated_classes=frozenset(data["annotated_classes"]),
                source_uri=str(data.get("source_uri", "")),
                notes=str(data.get("notes", "")),
            )
        except KeyError as exc:
            raise ValidationError(f"descriptor is missing field {exc.args[0]!r}") from None
        except TypeError as exc:
            raise ValidationError(f"malformed descriptor: {exc}") from None


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    dataset: str
    media_ref: str
    labels: tuple[int, ...]


@dataclass(frozen=True)
class ClassHistogram:
    """Per-class displayed / not displayed / unknown counts."""

    class_names: tuple[str, ...]
    displayed: np.ndarray
    not_displayed: np.ndarray
    unknown: np.ndarray

    def rows(self) -> Iterator[tuple[str, int, int, int]]:
        for i, name in enumerate(self.class_names):
            yield name, int(self.displayed[i]), int(self.not_displayed[i]), int(self.unknown[i])

    def totals(self) -> tuple[int, int, int]:
        return int(self.displayed.sum()), int(self.not_displayed.sum()), int(self.unknown.sum())

    def as_dict(self) -> dict[str, tuple[int, int, int]]:
        return {name: (d, n, u) for name, d, n, u in self.rows()}


@dataclass(frozen=True)
class MergedDatabase:
    """Unified ternary label database.

    Records are stored column-wise: ``sample_ids``, ``datasets`` and
    ``media_refs`` are parallel tuples and ``labels`` holds the label grid in
    class-axis order.  Use :attr:`records` for a row view.
    """

    class_names: tuple[str, ...]
    descriptors: tuple[DatasetDescriptor, ...]
    sample_ids: tuple[str, ...]
    datasets: tuple[str, ...]
    media_refs: tuple[str, ...]
    labels: LabelMatrix = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "class_names", _check_class_names(self.class_names))
        for attr in ("descriptors", "sample_ids", "datasets", "media_refs"):
            object.__setattr__(self, attr, tuple(getattr(self, attr)))
        self.validate()

    def validate(self) -> None:
        n = len(self.sample_ids)
        if not (len(self.datasets) == len(self.media_refs) == n == len(self.labels)):
            raise ValidationError("record columns have inconsistent lengths")
        if self.labels.class_names != self.class_names:
            raise ValidationError("label grid class axis differs from database class axis")
        if list(self.class_names) != sorted(self.class_names):
            raise ValidationError("class axis must be sorted lexicographically")
        seen: set[str] = set()
        for sid in self.sample_ids:
            if sid in seen:
                raise DuplicateSampleError(sid)
            seen.add(sid)
        by_name: dict[str, DatasetDescriptor] = {}
        for desc in self.descriptors:
            if desc.name in by_name:
                raise ValidationError(f"duplicate dataset descriptor {desc.name!r}")
            extra = desc.annotated_classes - set(self.class_names)
            if extra:
                raise ValidationError(
                    f"dataset {desc.name!r} annotates classes outside the class axis: {sorted(extra)}"
                )
            by_name[desc.name] = desc
        outside = self._outside_masks(by_name)
        for name, rows in self._rows_by_dataset().items():
            if name not in by_name:
                raise ValidationError(f"record references unknown dataset {name!r}")
            block = self.labels.values[rows][:, outside[name]]
            if (block != UNKNOWN).any():
                r = rows[np.argwhere(block != UNKNOWN)[0][0]]
                raise ValidationError(
                    f"record {self.sample_ids[r]!r} carries a label for a class "
                    f"dataset {name!r} does not annotate"
                )

    def _outside_masks(self, by_name: Mapping[str, DatasetDescriptor]) -> dict[str, np.ndarray]:
        return {
            name: np.array([c not in d.annotated_classes for c in self.class_names], dtype=bool)
            for name, d in by_name.items()
        }

    def _rows_by_dataset(self) -> dict[str, np.ndarray]:
        groups: dict[str, list[int]] = {}
        for i, name in enumerate(self.datasets):
            groups.setdefault(name, []).append(i)
        return {k: np.array(v, dtype=np.intp) for k, v in groups.items()}

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def records(self) -> tuple[SampleRecord, ...]:
        return tuple(
            SampleRecord(sid, ds, ref, tuple(int(v) for v in row))
            for sid, ds, ref, row in zip(
                self.sample_ids, self.datasets, self.media_refs, self.labels.values
            )
        )

    def descriptor(self, name: str) -> DatasetDescriptor:
        for desc in self.descriptors:
            if desc.name == name:
                return desc
        raise KeyError(name)

    def class_indices(self, classes: Iterable[str]) -> np.ndarray:
        idx = []
        for c in classes:
            try:
                idx.append(self.class_names.index(c))
            except ValueError:
                raise ValidationError(f"unknown class {c!r}") from None
        return np.array(idx, dtype=np.intp)

    def displayed_counts(self) -> dict[str, int]:
        counts = (self.labels.values == DISPLAYED).sum(axis=0)
        return {c: int(n) for c, n in zip(self.class_names, counts)}

    def take(self, rows: Sequence[int] | np.ndarray) -> MergedDatabase:
        """Subset of records, in the given order, on the same class axis."""
        rows = np.asarray(rows, dtype=np.intp)
        return MergedDatabase(
            class_names=self.class_names,
            descriptors=self.descriptors,
            sample_ids=tuple(self.sample_ids[i] for i in rows),
            datasets=tuple(self.datasets[i] for i in rows),
            media_refs=tuple(self.media_refs[i] for i in rows),
            labels=LabelMatrix(self.class_names, self.labels.values[rows].reshape(-1, len(self.class_names))),
        )

    def select_classes(self, classes: Sequence[str]) -> MergedDatabase:
        """Restrict the class axis to ``classes``.

        Descriptors are intersected with the new axis; a descriptor left with
        nothing annotated is dropped when none of the records belong to it.
        """
        keep = sorted(set(classes))
        idx = self.class_indices(keep)
        used = set(self.datasets)
        descriptors = []
        for desc in self.descriptors:
            annotated = desc.annotated_classes & set(keep)
            if not annotated:
                if desc.name in used:
                    raise ValidationError(
                        f"dataset {desc.name!r} annotates none of the selected classes "
                        "but still has records"
                    )
                continue
            descriptors.append(
                DatasetDescriptor(desc.name, frozenset(annotated), desc.source_uri, desc.notes)
            )
        return MergedDatabase(
            class_names=tuple(keep),
            descriptors=tuple(descriptors),
            sample_ids=self.sample_ids,
            datasets=self.datasets,
            media_refs=self.media_refs,
            labels=LabelMatrix(tuple(keep), self.labels.values[:, idx]),
        )


LabelTable = Iterable[tuple[str, str, Mapping[str, int]]]


def merge(
    descriptors: Sequence[DatasetDescriptor],
    tables: Mapping[str, LabelTable],
) -> MergedDatabase:
    """Merge per-dataset label tables into one ternary database.

    ``tables`` maps a dataset name to rows of ``(sample_id, media_ref,
    labels)`` where ``labels`` maps class name to 0 or 1.  Any class the row
    omits is unknown, as is every class outside the dataset's declared
    annotated set.  Sample ids are namespaced as ``"<dataset>/<id>"``.
    """
    names = [d.name for d in descriptors]
    if len(set(names)) != len(names):
        raise ValidationError("dataset descriptor names must be unique")
    missing = set(tables) - set(names)
    if missing:
        raise ValidationError(f"tables given for undeclared datasets: {sorted(missing)}")

    class_names = tuple(sorted(set().union(*(d.annotated_classes for d in descriptors))))
    col = {c: i for i, c in enumerate(class_names)}

    sample_ids: list[str] = []
    datasets: list[str] = []
    media_refs: list[str] = []
    rows: list[np.ndarray] = []
    seen: set[str] = set()
    for desc in descriptors:
        for sample_id, media_ref, labels in tables.get(desc.name, ()):
            sid = f"{desc.name}/{sample_id}"
            if sid in seen:
                raise DuplicateSampleError(sid)
            seen.add(sid)
            row = np.full(len(class_names), UNKNOWN, dtype=np.int8)
            for cls, value in labels.items():
                if cls not in desc.annotated_classes:
                    raise ValidationError(
                        f"dataset {desc.name!r} labels class {cls!r} outside its annotated set"
                    )
                if isinstance(value, bool) or value not in (0, 1):
                    raise ValidationError(
                        f"label value {value!r} for {sid!r} class {cls!r} is not 0 or 1"
                    )
                row[col[cls]] = int(value)
            sample_ids.append(sid)
            datasets.append(desc.name)
            media_refs.append(str(media_ref))
            rows.append(row)

    grid = np.stack(rows) if rows else np.empty((0, len(class_names)), dtype=np.int8)
    return MergedDatabase(
        class_names=class_names,
        descriptors=tuple(descriptors),
        sample_ids=tuple(sample_ids),
        datasets=tuple(datasets),
        media_refs=tuple(media_refs),
        labels=LabelMatrix(class_names, grid),
    )


def missing_fraction(db: MergedDatabase) -> float:
    cells = db.labels.values.size
    if cells == 0:
        raise ValidationError("missing fraction of an empty database is undefined")
    return int((db.labels.values == UNKNOWN).sum()) / cells


def class_histogram(db: MergedDatabase) -> ClassHistogram:
    v = db.labels.values
    return ClassHistogram(
        class_names=db.class_names,
        displayed=_frozen((v == DISPLAYED).sum(axis=0).astype(np.int64)),
        not_displayed=_frozen((v == NOT_DISPLAYED).sum(axis=0).astype(np.int64)),
        unknown=_frozen((v == UNKNOWN).sum(axis=0).astype(np.int64)),
    )


# --------------------------------------------------------------------------
# persistence


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def dump_lines(db: MergedDatabase) -> list[str]:
    header = {
        "format": DB_FORMAT,
        "version": DB_VERSION,
        "class_names": list(db.class_names),
        "descriptors": [d.to_dict() for d in db.descriptors],
    }
    lines = [_dumps(header)]
    for sid, ds, ref, row in zip(db.sample_ids, db.datasets, db.media_refs, db.labels.values):
        lines.append(
            _dumps({"sample_id": sid, "dataset": ds, "media_ref": ref, "labels": [int(v) for v in row]})
        )
    return lines


def dumps(db: MergedDatabase) -> str:
    return "\n".join(dump_lines(db)) + "\n"


def save(db: MergedDatabase, path: str | Path) -> None:
    Path(path).write_text(dumps(db), encoding="utf-8")


def _parse_code(value, path, lineno) -> int:
    if value is None or value == "":
        return UNKNOWN
    if isinstance(value, bool) or value not in (-1, 0, 1):
        raise ParseError(f"ternary code {value!r} outside {{-1, 0, 1}}", path, lineno)
    return int(value)


def loads(text: str, path: str | Path | None = None) -> MergedDatabase:
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty database file", path, 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad header: {exc.msg}", path, 1) from None
    if not isinstance(header, dict) or header.get("format") != DB_FORMAT:
        raise ParseError(f"not an {DB_FORMAT} file", path, 1)
    if header.get("version") != DB_VERSION:
        raise ParseError(f"unsupported version {header.get('version')!r}", path, 1)
    try:
        class_names = tuple(header["class_names"])
        descriptors = tuple(DatasetDescriptor.from_dict(d) for d in header["descriptors"])
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed header: {exc}", path, 1) from None

    sample_ids, datasets, media_refs, rows = [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"bad record: {exc.msg}", path, lineno) from None
        try:
            labels = rec["labels"]
            sid, ds, ref = str(rec["sample_id"]), str(rec["dataset"]), str(rec.get("media_ref", ""))
        except (KeyError, TypeError):
            raise ParseError("record needs sample_id, dataset and labels", path, lineno) from None
        if not isinstance(labels, list) or len(labels) != len(class_names):
            raise ParseError(
                f"expected {len(class_names)} labels, got {labels!r}", path, lineno
            )
        rows.append([_parse_code(v, path, lineno) for v in labels])
        sample_ids.append(sid)
        datasets.append(ds)
        media_refs.append(ref)

    grid = np.array(rows, dtype=np.int8).reshape(len(rows), len(class_names))
    return MergedDatabase(
        class_names=class_names,
        descriptors=descriptors,
        sample_ids=tuple(sample_ids),
        datasets=tuple(datasets),
        media_refs=tuple(media_refs),
        labels=LabelMatrix(class_names, grid),
    )


def load(path: str | Path) -> MergedDatabase:
    return loads(Path(path).read_text(encoding="utf-8"), path=path)


def load_descriptor(path: str | Path) -> DatasetDescriptor:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad descriptor: {exc.msg}", path, exc.lineno) from None
    if not isinstance(data, dict):
        raise ParseError("descriptor must be a JSON object", path, 1)
    return DatasetDescriptor.from_dict(data)


def read_label_table(path: str | Path) -> list[tuple[str, str, dict[str, int]]]:
    """Read a delimited annotation table.

    The header is ``sample_id,media_ref,<class>,...``; cells hold 1, 0, -1 or
    nothing.  Unknown cells are left out of the returned label maps, so a
    column may be present for a class outside the dataset's annotated set as
    long as it carries no 0/1 values.
    """
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty annotation table", path, 1) from None
        if len(header) < 2 or header[0].strip() != "sample_id" or header[1].strip() != "media_ref":
            raise ParseError("header must start with sample_id,media_ref", path, 1)
        classes = [h.strip() for h in header[2:]]
        for lineno, cells in enumerate(reader, start=2):
            if not cells or all(not c.strip() for c in cells):
                continue
            if len(cells) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(cells)}", path, lineno)
            labels: dict[str, int] = {}
            for cls, raw in zip(classes, cells[2:]):
                raw = raw.strip()
                try:
                    code = UNKNOWN if raw == "" else int(raw)
                except ValueError:
                    raise ParseError(f"bad label {raw!r} for class {cls!r}", path, lineno) from None
                if code not in (UNKNOWN, NOT_DISPLAYED, DISPLAYED):
                    raise ParseError(f"label {code} for class {cls!r} outside {{1, 0, -1}}", path, lineno)
                if code != UNKNOWN:
                    labels[cls] = code
            rows.append((cells[0].strip(), cells[1].strip(), labels))
    return rows

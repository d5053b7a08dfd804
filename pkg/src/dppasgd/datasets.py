"""CSV ingestion, unit-ball normalisation and device partitioning."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ConfigurationError, ParseError
from .rng import Purpose, stream

SPLIT_FRACTIONS = (0.8, 0.1, 0.1)


@dataclass
class Table:
    """Encoded samples plus the raw string columns they came from.

    ``labels`` are in {-1, +1}; ``label_values`` maps them back as
    ``(negative, positive)``. ``attributes`` keeps every raw column so a
    partition can key on a column that is not a model feature.
    """

    features: np.ndarray
    labels: np.ndarray
    feature_names: list[str]
    attributes: dict[str, np.ndarray] = field(default_factory=dict)
    label_values: tuple[str, str] = ("-1", "+1")
    dropped_rows: int = 0

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "Table":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            features=self.features[idx],
            labels=self.labels[idx],
            attributes={k: v[idx] for k, v in self.attributes.items()},
        )


class Split(NamedTuple):
    X: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


def _empty_split(d: int) -> Split:
    return Split(np.empty((0, d)), np.empty(0))


@dataclass
class DeviceDataset:
    device_id: int
    train: Split
    val: Split
    test: Split
    batch_size: int | None = None

    @property
    def size(self) -> int:
        return len(self.train) + len(self.val) + len(self.test)

    @property
    def dim(self) -> int:
        return self.train.X.shape[1]


@dataclass(frozen=True)
class FederationSpec:
    M: int
    partition_mode: str = "iid"
    attribute: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.M < 1:
            raise ConfigurationError("device count M must be >= 1")
        if self.partition_mode not in ("iid", "attr"):
            raise ConfigurationError(f"unknown partition mode {self.partition_mode!r}")
        if self.partition_mode == "attr" and not self.attribute:
            raise ConfigurationError("attribute partition needs an attribute name")

    @classmethod
    def parse(cls, text: str, M: int, seed: int = 0) -> "FederationSpec":
        """Build from the CLI form ``iid`` or ``attr:<column>``."""
        if text == "iid":
            return cls(M, "iid", None, seed)
        if text.startswith("attr:"):
            return cls(M, "attr", text[5:], seed)
        raise ConfigurationError(f"partition must be 'iid' or 'attr:<name>', got {text!r}")


def load_csv(
    path: str | Path,
    label_column: str,
    categorical_columns: Iterable[str] = (),
    feature_columns: Sequence[str] | None = None,
    exclude_columns: Iterable[str] = (),
    na_values: Iterable[str] = ("",),
    positive_label: str | None = None,
) -> Table:
    """Read a headed CSV into an encoded :class:`Table`.

    Categorical columns are one-hot encoded with levels in sorted order, the
    rest are parsed as floats. Rows holding a value from ``na_values`` in any
    used column are dropped and counted in ``Table.dropped_rows``. When
    ``feature_columns`` is omitted every column except the label and
    ``exclude_columns`` becomes a feature. The positive class is
    ``positive_label`` or else the larger of the two label values in sort order.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file: missing header row", row=1) from None
        except csv.Error as exc:
            raise ParseError(str(exc), row=1) from None
        header = [h.strip() for h in header]
        rows = []
        try:
            for row in reader:
                if not row or (len(row) == 1 and not row[0].strip()):
                    continue
                if len(row) != len(header):
                    raise ParseError(
                        f"expected {len(header)} fields, found {len(row)}", row=reader.line_num
                    )
                rows.append((reader.line_num, [c.strip() for c in row]))
        except csv.Error as exc:
            raise ParseError(str(exc), row=reader.line_num) from None

    if label_column not in header:
        raise ConfigurationError(f"label column {label_column!r} not in header")
    categorical = set(categorical_columns)
    excluded = set(exclude_columns)
    for name in categorical | excluded:
        if name not in header:
            raise ConfigurationError(f"column {name!r} not in header")
    if feature_columns is None:
        feature_columns = [h for h in header if h != label_column and h not in excluded]
    else:
        for name in feature_columns:
            if name not in header:
                raise ConfigurationError(f"feature column {name!r} not in header")
    na = set(na_values)
    col = {h: i for i, h in enumerate(header)}
    used = [col[label_column]] + [col[f] for f in feature_columns]

    kept = [(line, r) for line, r in rows if not any(r[i] in na for i in used)]
    dropped = len(rows) - len(kept)
    if not kept:
        raise ParseError("no data rows")

    label_raw = [r[col[label_column]] for _, r in kept]
    levels = sorted(set(label_raw))
    if len(levels) != 2:
        raise ConfigurationError(
            f"label column {label_column!r} must have exactly 2 values, found {len(levels)}"
        )
    if positive_label is not None:
        if positive_label not in levels:
            raise ConfigurationError(f"positive label {positive_label!r} not among {levels}")
        negative = levels[0] if levels[1] == positive_label else levels[1]
        levels = [negative, positive_label]
    labels = np.array([1.0 if v == levels[1] else -1.0 for v in label_raw])

    blocks, names = [], []
    for name in feature_columns:
        i = col[name]
        if name in categorical:
            values = [r[i] for _, r in kept]
            cats = sorted(set(values))
            pos = {c: j for j, c in enumerate(cats)}
            onehot = np.zeros((len(kept), len(cats)))
            onehot[np.arange(len(kept)), [pos[v] for v in values]] = 1.0
            blocks.append(onehot)
            names.extend(f"{name}={c}" for c in cats)
        else:
            column = np.empty(len(kept))
            for j, (line, r) in enumerate(kept):
                try:
                    column[j] = float(r[i])
                except ValueError:
                    raise ParseError(f"column {name!r}: cannot parse {r[i]!r} as a number",
                                     row=line) from None
            blocks.append(column[:, None])
            names.append(name)
    features = np.hstack(blocks) if blocks else np.empty((len(kept), 0))
    attributes = {h: np.array([r[col[h]] for _, r in kept], dtype=object) for h in header}
    return Table(features, labels, names, attributes, (levels[0], levels[1]), dropped)


def normalize_unit_ball(table: Table) -> Table:
    """Scale rows with L2 norm above 1 back onto the unit sphere."""
    norms = np.linalg.norm(table.features, axis=1)
    scale = 1.0 / np.maximum(norms, 1.0)
    return replace(table, features=table.features * scale[:, None])


def partition(table: Table, spec: FederationSpec) -> list[DeviceDataset]:
    """Distribute rows over ``spec.M`` devices; all rows land in ``train``.

    ``iid`` shuffles with the seed and deals round-robin. ``attr`` gives each
    distinct value of the attribute (in sorted order) its own device.
    """
    n = len(table)
    d = table.features.shape[1]
    if spec.partition_mode == "iid":
        if spec.M > n:
            raise ConfigurationError(f"cannot spread {n} rows over {spec.M} devices")
        perm = stream(spec.seed, 0, 0, Purpose.PARTITION).permutation(n)
        groups = [perm[m::spec.M] for m in range(spec.M)]
    else:
        if spec.attribute not in table.attributes:
            raise ConfigurationError(f"partition attribute {spec.attribute!r} not in table")
        column = table.attributes[spec.attribute]
        values = sorted(set(column.tolist()))
        if len(values) != spec.M:
            raise ConfigurationError(
                f"attribute {spec.attribute!r} has {len(values)} distinct values "
                f"but M = {spec.M} devices were requested"
            )
        groups = [np.flatnonzero(column == v) for v in values]
    return [
        DeviceDataset(m, Split(table.features[g], table.labels[g]), _empty_split(d), _empty_split(d))
        for m, g in enumerate(groups)
    ]


def split_sizes(n: int) -> tuple[int, int, int]:
    """(train, val, test) counts; val and test take floor(n/10), train the rest.

    Devices under 10 samples still get one validation and one test sample
    when they have at least 3.
    """
    if n <= 0:
        raise ConfigurationError("device has no samples")
    held = n // 10
    if held == 0 and n >= 3:
        held = 1
    return n - 2 * held, held, held


def split_train_val_test(device: DeviceDataset, seed: int) -> DeviceDataset:
    X = np.vstack([device.train.X, device.val.X, device.test.X])
    y = np.concatenate([device.train.y, device.val.y, device.test.y])
    n_train, n_val, n_test = split_sizes(len(y))
    perm = stream(seed, device.device_id, 0, Purpose.SPLIT).permutation(len(y))
    test, val, train = perm[:n_test], perm[n_test:n_test + n_val], perm[n_test + n_val:]
    return replace(
        device,
        train=Split(X[train], y[train]),
        val=Split(X[val], y[val]),
        test=Split(X[test], y[test]),
    )


def with_batch_size(devices: Sequence[DeviceDataset], batch: int) -> list[DeviceDataset]:
    """Set X_m = min(batch, |train|) on every device."""
    if batch < 1:
        raise ConfigurationError("batch size must be >= 1")
    out = []
    for dev in devices:
        if len(dev.train) == 0:
            raise ConfigurationError(f"device {dev.device_id} has an empty training split")
        out.append(replace(dev, batch_size=min(batch, len(dev.train))))
    return out


def partition_manifest(devices: Sequence[DeviceDataset]) -> dict:
    sizes = [dev.size for dev in devices]
    return {
        "devices": [
            {
                "device_id": dev.device_id,
                "samples": dev.size,
                "train": len(dev.train),
                "val": len(dev.val),
                "test": len(dev.test),
                "batch_size": dev.batch_size,
            }
            for dev in devices
        ],
        "mean_size": float(np.mean(sizes)),
        "std_size": float(np.std(sizes, ddof=1)) if len(sizes) > 1 else 0.0,
        "total": int(sum(sizes)),
    }


def feature_norm_ok(X: np.ndarray, tol: float = 1e-9) -> bool:
    return bool(np.all(np.linalg.norm(X, axis=1) <= 1.0 + tol))


__all__ = [
    "DeviceDataset", "FederationSpec", "Split", "Table", "SPLIT_FRACTIONS",
    "load_csv", "normalize_unit_ball", "partition", "partition_manifest",
    "split_sizes", "split_train_val_test", "with_batch_size", "feature_norm_ok",
]

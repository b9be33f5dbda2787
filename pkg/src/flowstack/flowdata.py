"""Flow-log ingestion and dataset preparation.

Parses labeled Zeek conn.log text into typed records, encodes the 15
statistical flow features into fixed-width numeric vectors, and provides
the stratified split / k-fold / synthetic-data utilities the training
pipeline is built on. Everything here is a pure function of its inputs
plus an explicit seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

FEATURE_NAMES = (
    "id.orig_h",
    "id.orig_p",
    "id.resp_h",
    "id.resp_p",
    "proto",
    "service",
    "duration",
    "orig_bytes",
    "resp_bytes",
    "conn_state",
    "history",
    "orig_pkts",
    "orig_ip_bytes",
    "resp_pkts",
    "resp_ip_bytes",
)
NUM_FEATURES = len(FEATURE_NAMES)

# Features whose raw values are strings; everything else is numeric.
CATEGORICAL_FEATURES = (
    "id.orig_h",
    "id.resp_h",
    "proto",
    "service",
    "conn_state",
    "history",
)

MISSING_MARKERS = frozenset({"-", "(empty)"})

# Column layout of a labeled conn.log that carries no #fields header
# (the usual layout of conn.log.labeled exports).
DEFAULT_COLUMNS = (
    "ts",
    "uid",
    "id.orig_h",
    "id.orig_p",
    "id.resp_h",
    "id.resp_p",
    "proto",
    "service",
    "duration",
    "orig_bytes",
    "resp_bytes",
    "conn_state",
    "local_orig",
    "local_resp",
    "missed_bytes",
    "history",
    "orig_pkts",
    "orig_ip_bytes",
    "resp_pkts",
    "resp_ip_bytes",
    "tunnel_parents",
    "label",
    "detailed-label",
)

_ATTR_BY_FEATURE = {name: name.replace("id.", "id_").replace(".", "_") for name in FEATURE_NAMES}


@dataclass(frozen=True)
class FlowRecord:
    """One parsed flow: the 15 model features plus the raw label string.

    Optional fields hold None where the log used a missing-value marker.
    """

    id_orig_h: str
    id_orig_p: int
    id_resp_h: str
    id_resp_p: int
    proto: str | None
    service: str | None
    duration: float | None
    orig_bytes: int | None
    resp_bytes: int | None
    conn_state: str | None
    history: str | None
    orig_pkts: int | None
    orig_ip_bytes: int | None
    resp_pkts: int | None
    resp_ip_bytes: int | None
    label: str


@dataclass(frozen=True)
class ParseError:
    """One rejected input line; parsing continues past it."""

    line_no: int
    message: str


@dataclass(frozen=True)
class FeatureVector:
    """Encoded flow: 15 finite floats in FEATURE_NAMES order, binary label."""

    values: np.ndarray
    label: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (NUM_FEATURES,):
            raise DataError(f"feature vector must have {NUM_FEATURES} values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DataError("feature vector contains non-finite values")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "label", int(self.label))


@dataclass(frozen=True)
class Dataset:
    """Encoded dataset: X is (n, 15) float64, y is (n,) in {0, 1}."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.ascontiguousarray(np.asarray(self.X, dtype=np.float64))
        y = np.ascontiguousarray(np.asarray(self.y, dtype=np.int64))
        if X.ndim != 2 or X.shape[1] != NUM_FEATURES:
            raise DataError(f"X must be (n, {NUM_FEATURES}), got {X.shape}")
        if y.shape != (X.shape[0],):
            raise DataError(f"y must be ({X.shape[0]},), got {y.shape}")
        if not np.all(np.isfinite(X)):
            raise DataError("X contains non-finite values")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.X.shape[0]

    def class_counts(self) -> tuple[int, int]:
        return int(np.sum(self.y == 0)), int(np.sum(self.y == 1))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.X[idx], self.y[idx])


@dataclass(frozen=True)
class FoldPlan:
    """Stratified fold assignment: one fold index in [0, k) per example."""

    k: int
    assignments: np.ndarray
    seed: int

    def fold_indices(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        """Return (train_idx, held_out_idx) for one fold."""
        mask = self.assignments == fold
        return np.flatnonzero(~mask), np.flatnonzero(mask)

    def iter_folds(self):
        for fold in range(self.k):
            yield fold, *self.fold_indices(fold)


def _split_data_line(line: str, want: int) -> list[str] | None:
    fields = line.split("\t")
    if len(fields) == want:
        return fields
    # Some exports glue the trailing label columns with spaces inside the
    # last tab field; plain whitespace splitting recovers them.
    loose = line.split()
    if len(loose) == want:
        return loose
    return None


def _opt_str(value: str) -> str | None:
    return None if value in MISSING_MARKERS else value


def _req_port(value: str, name: str) -> int:
    if value in MISSING_MARKERS:
        raise ValueError(f"{name} is missing")
    try:
        port = int(value)
    except ValueError:
        raise ValueError(f"{name} is not an integer: {value!r}") from None
    if not 0 <= port <= 65535:
        raise ValueError(f"{name} out of range: {port}")
    return port


def _opt_count(value: str, name: str) -> int | None:
    if value in MISSING_MARKERS:
        return None
    try:
        count = int(value)
    except ValueError:
        raise ValueError(f"{name} is not an integer: {value!r}") from None
    if count < 0:
        raise ValueError(f"{name} is negative: {count}")
    return count


def _opt_duration(value: str) -> float | None:
    if value in MISSING_MARKERS:
        return None
    try:
        dur = float(value)
    except ValueError:
        raise ValueError(f"duration is not a number: {value!r}") from None
    if not np.isfinite(dur) or dur < 0:
        raise ValueError(f"duration must be a non-negative real, got {value!r}")
    return dur


def _record_from_fields(fields: dict[str, str]) -> FlowRecord:
    return FlowRecord(
        id_orig_h=fields["id.orig_h"],
        id_orig_p=_req_port(fields["id.orig_p"], "id.orig_p"),
        id_resp_h=fields["id.resp_h"],
        id_resp_p=_req_port(fields["id.resp_p"], "id.resp_p"),
        proto=_opt_str(fields["proto"]),
        service=_opt_str(fields["service"]),
        duration=_opt_duration(fields["duration"]),
        orig_bytes=_opt_count(fields["orig_bytes"], "orig_bytes"),
        resp_bytes=_opt_count(fields["resp_bytes"], "resp_bytes"),
        conn_state=_opt_str(fields["conn_state"]),
        history=_opt_str(fields["history"]),
        orig_pkts=_opt_count(fields["orig_pkts"], "orig_pkts"),
        orig_ip_bytes=_opt_count(fields["orig_ip_bytes"], "orig_ip_bytes"),
        resp_pkts=_opt_count(fields["resp_pkts"], "resp_pkts"),
        resp_ip_bytes=_opt_count(fields["resp_ip_bytes"], "resp_ip_bytes"),
        label=fields["label"],
    )


def parse_zeek_log(text: str, errors: list[ParseError] | None = None) -> list[FlowRecord]:
    """Parse labeled conn.log text into FlowRecords.

    '#'-prefixed lines are metadata; a '#fields' line, when present,
    overrides the default column layout. Missing-value markers ("-",
    "(empty)") are preserved as None. Malformed lines are reported into
    `errors` (line number + reason) and skipped; parsing continues.
    """
    sink = errors if errors is not None else []
    records: list[FlowRecord] = []
    columns = DEFAULT_COLUMNS
    checked_label = False
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip()
        if not line:
            continue
        if line.startswith("#"):
            if line.startswith("#fields"):
                parts = line.split("\t") if "\t" in line else line.split()
                columns = tuple(parts[1:])
                checked_label = False
            continue
        if not checked_label:
            if "label" not in columns:
                raise DataError("log has no 'label' column; only labeled conn logs are supported")
            checked_label = True
        fields = _split_data_line(line, len(columns))
        if fields is None:
            got = len(line.split("\t"))
            sink.append(ParseError(line_no, f"expected {len(columns)} columns, got {got}"))
            continue
        try:
            records.append(_record_from_fields(dict(zip(columns, fields))))
        except ValueError as exc:
            sink.append(ParseError(line_no, str(exc)))
    return records


def records_to_log_text(records: list[FlowRecord]) -> str:
    """Serialize records back to labeled conn.log text (default layout).

    Fields the record does not carry (ts, uid, ...) are written as '-'.
    parse_zeek_log of the output reproduces the records exactly.
    """
    lines = ["#fields\t" + "\t".join(DEFAULT_COLUMNS)]
    for rec in records:
        out = []
        for col in DEFAULT_COLUMNS:
            if col == "label":
                out.append(rec.label)
            elif col in _ATTR_BY_FEATURE:
                value = getattr(rec, _ATTR_BY_FEATURE[col])
                if value is None:
                    out.append("-")
                elif isinstance(value, float):
                    out.append(repr(value))
                else:
                    out.append(str(value))
            else:
                out.append("-")
        lines.append("\t".join(out))
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Encoder:
    """Per-feature category dictionaries; code 0 is reserved for unseen/missing."""

    mappings: dict[str, dict[str, int]]

    def code(self, feature: str, value: str | None) -> int:
        if value is None:
            return 0
        return self.mappings.get(feature, {}).get(value, 0)

    def to_dict(self) -> dict:
        return {feat: dict(table) for feat, table in self.mappings.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Encoder":
        return cls({feat: {str(k): int(v) for k, v in table.items()} for feat, table in d.items()})

    @classmethod
    def empty(cls) -> "Encoder":
        return cls({feat: {} for feat in CATEGORICAL_FEATURES})


def fit_encoder(records: list[FlowRecord]) -> Encoder:
    """Build category->code tables in first-seen order, codes starting at 1."""
    if not records:
        raise DataError("cannot fit an encoder on an empty record list")
    mappings: dict[str, dict[str, int]] = {feat: {} for feat in CATEGORICAL_FEATURES}
    for rec in records:
        for feat in CATEGORICAL_FEATURES:
            value = getattr(rec, _ATTR_BY_FEATURE[feat])
            if value is None:
                continue
            table = mappings[feat]
            if value not in table:
                table[value] = len(table) + 1
    return Encoder(mappings)


def label_to_class(label: str) -> int:
    """Binary label rule: exactly 'Benign' (case-insensitive) is 0, else 1."""
    return 0 if label.strip().casefold() == "benign" else 1


def encode(record: FlowRecord, encoder: Encoder) -> FeatureVector:
    """Encode one record: categoricals via dictionary codes, missing numerics as 0.0."""
    values = np.empty(NUM_FEATURES, dtype=np.float64)
    for i, feat in enumerate(FEATURE_NAMES):
        raw = getattr(record, _ATTR_BY_FEATURE[feat])
        if feat in CATEGORICAL_FEATURES:
            values[i] = float(encoder.code(feat, raw))
        else:
            values[i] = 0.0 if raw is None else float(raw)
    return FeatureVector(values=values, label=label_to_class(record.label))


def encode_dataset(records: list[FlowRecord], encoder: Encoder) -> Dataset:
    if not records:
        raise DataError("cannot encode an empty record list")
    vectors = [encode(rec, encoder) for rec in records]
    X = np.stack([fv.values for fv in vectors])
    y = np.array([fv.label for fv in vectors], dtype=np.int64)
    return Dataset(X, y)


def _class_indices(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    idx0 = np.flatnonzero(y == 0)
    idx1 = np.flatnonzero(y == 1)
    if len(idx0) == 0 or len(idx1) == 0:
        raise DataError("both classes must be present")
    return idx0, idx1


def stratified_split(data: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Split per class at train_fraction (rounded), shuffled by seed.

    The per-class train count is clamped to [1, n_c - 1] so neither side
    loses a class entirely. Union of the two sides is the input; they are
    disjoint.
    """
    if not 0.0 < train_fraction < 1.0:
        raise DataError(f"train_fraction must be in (0, 1), got {train_fraction}")
    idx0, idx1 = _class_indices(data.y)
    rng = np.random.default_rng(seed)
    train_parts, valid_parts = [], []
    for idx in (idx0, idx1):
        shuffled = rng.permutation(idx)
        n_train = int(round(len(idx) * train_fraction))
        n_train = min(max(n_train, 1), len(idx) - 1)
        train_parts.append(shuffled[:n_train])
        valid_parts.append(shuffled[n_train:])
    train_idx = rng.permutation(np.concatenate(train_parts))
    valid_idx = rng.permutation(np.concatenate(valid_parts))
    return data.subset(train_idx), data.subset(valid_idx)


def stratified_kfold(data: Dataset, k: int, seed: int) -> FoldPlan:
    """Assign every example to one of k folds, preserving class ratios.

    Each class is shuffled and dealt round-robin, so per-fold class counts
    differ from an even split by at most one example.
    """
    if k < 2:
        raise DataError(f"k must be >= 2, got {k}")
    idx0, idx1 = _class_indices(data.y)
    for idx, cls in ((idx0, 0), (idx1, 1)):
        if len(idx) < k:
            raise DataError(f"class {cls} has {len(idx)} examples, fewer than k={k}")
    rng = np.random.default_rng(seed)
    assignments = np.empty(len(data), dtype=np.int64)
    for idx in (idx0, idx1):
        shuffled = rng.permutation(idx)
        assignments[shuffled] = np.arange(len(shuffled)) % k
    return FoldPlan(k=k, assignments=assignments, seed=seed)


def synth_generate(n: int, class_balance: float = 0.5, seed: int = 0) -> Dataset:
    """Generate a synthetic desk-scale dataset of two separable flow populations.

    Class 1 mimics scan/C2-style traffic (low ports like telnet, short or
    absent responses, failed connection states); class 0 mimics ordinary
    client traffic (web/DNS ports, established connections, fuller
    payloads). A small fraction of each population is drawn to overlap the
    other so single-feature rules stay imperfect, while the joint
    distribution remains separable enough for a lone decision tree to
    clear 95% held-out accuracy. Values are produced directly in encoded
    (numeric) space; categorical columns hold small dictionary-style codes.
    """
    if n < 10:
        raise DataError(f"n must be >= 10, got {n}")
    if not 0.0 < class_balance < 1.0:
        raise DataError(f"class_balance must be in (0, 1), got {class_balance}")
    rng = np.random.default_rng(seed)
    n1 = int(round(n * class_balance))
    n0 = n - n1

    def benign(count: int) -> np.ndarray:
        cols = {
            "id.orig_h": 1 + rng.integers(0, 40, count),
            "id.orig_p": rng.integers(32768, 61000, count),
            "id.resp_h": 1 + rng.integers(0, 25, count),
            "id.resp_p": rng.choice([80, 443, 53, 123, 8080], count, p=[0.3, 0.35, 0.2, 0.05, 0.1]),
            "proto": rng.choice([1, 2], count, p=[0.75, 0.25]),
            "service": rng.choice([1, 2, 3, 4], count, p=[0.4, 0.3, 0.2, 0.1]),
            "duration": rng.lognormal(1.2, 1.0, count),
            "orig_bytes": np.round(rng.lognormal(6.2, 0.9, count)),
            "resp_bytes": np.round(rng.lognormal(7.0, 1.1, count)),
            "conn_state": rng.choice([1, 2, 3], count, p=[0.88, 0.08, 0.04]),
            "history": rng.choice([1, 2, 3, 4], count, p=[0.5, 0.25, 0.15, 0.1]),
            "orig_pkts": 2 + rng.poisson(9.0, count),
            "resp_pkts": 2 + rng.poisson(11.0, count),
        }
        # short/failed flows exist in benign traffic too: DNS probes,
        # keepalives, refused connections
        brief = rng.random(count) < 0.07
        cols["duration"] = np.where(brief, rng.lognormal(-1.5, 0.8, count), cols["duration"])
        cols["orig_pkts"] = np.where(brief, 1 + rng.poisson(1.0, count), cols["orig_pkts"])
        cols["resp_pkts"] = np.where(brief, rng.poisson(1.2, count), cols["resp_pkts"])
        cols["orig_bytes"] = np.where(brief, np.round(rng.lognormal(3.5, 0.8, count)), cols["orig_bytes"])
        cols["resp_bytes"] = np.where(brief & (rng.random(count) < 0.4), 0.0, cols["resp_bytes"])
        odd = rng.random(count) < 0.02
        cols["id.resp_p"] = np.where(odd, 8081, cols["id.resp_p"])
        return _assemble(cols)

    def malicious(count: int) -> np.ndarray:
        cols = {
            "id.orig_h": 31 + rng.integers(0, 20, count),
            "id.orig_p": rng.integers(1024, 65535, count),
            "id.resp_h": 10 + rng.integers(0, 60, count),
            "id.resp_p": rng.choice([23, 2323, 81, 8081, 5555], count, p=[0.35, 0.2, 0.15, 0.15, 0.15]),
            "proto": rng.choice([1, 2], count, p=[0.92, 0.08]),
            "service": rng.choice([0, 1], count, p=[0.8, 0.2]),
            "duration": rng.lognormal(-2.0, 0.8, count),
            "orig_bytes": np.round(rng.lognormal(3.0, 0.8, count)),
            "resp_bytes": np.where(rng.random(count) < 0.55, 0.0, np.round(rng.lognormal(2.2, 0.8, count))),
            "conn_state": rng.choice([3, 4, 1], count, p=[0.6, 0.27, 0.13]),
            "history": rng.choice([5, 6, 1], count, p=[0.6, 0.3, 0.1]),
            "orig_pkts": 1 + rng.poisson(1.5, count),
            "resp_pkts": rng.poisson(0.7, count),
        }
        # successful C2 sessions move real data over longer connections
        bulky = rng.random(count) < 0.07
        cols["duration"] = np.where(bulky, rng.lognormal(0.8, 1.0, count), cols["duration"])
        cols["orig_pkts"] = np.where(bulky, 2 + rng.poisson(8.0, count), cols["orig_pkts"])
        cols["resp_pkts"] = np.where(bulky, 2 + rng.poisson(9.0, count), cols["resp_pkts"])
        cols["orig_bytes"] = np.where(bulky, np.round(rng.lognormal(5.8, 0.9, count)), cols["orig_bytes"])
        cols["resp_bytes"] = np.where(bulky, np.round(rng.lognormal(6.3, 1.0, count)), cols["resp_bytes"])
        # a sliver of malware hides on ordinary web ports with clean states
        masked = rng.random(count) < 0.02
        cols["id.resp_p"] = np.where(masked, rng.choice([80, 443], count), cols["id.resp_p"])
        cols["conn_state"] = np.where(masked, 1, cols["conn_state"])
        return _assemble(cols)

    def mix(primary: np.ndarray, other: np.ndarray, rate: float) -> np.ndarray:
        # rows indistinguishable from the other class: irreducible label noise
        swap = rng.random(len(primary)) < rate
        return np.where(swap[:, None], other[: len(primary)], primary)

    def _assemble(cols: dict[str, np.ndarray]) -> np.ndarray:
        cols = {k: np.asarray(v, dtype=np.float64) for k, v in cols.items()}
        cols["orig_ip_bytes"] = cols["orig_bytes"] + 40.0 * cols["orig_pkts"]
        cols["resp_ip_bytes"] = cols["resp_bytes"] + 40.0 * cols["resp_pkts"]
        return np.column_stack([cols[name] for name in FEATURE_NAMES])

    X0 = mix(benign(n0), malicious(n0), 0.006)
    X1 = mix(malicious(n1), benign(n1), 0.012)
    X = np.vstack([X0, X1])
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    order = rng.permutation(n)
    return Dataset(X[order], y[order])


def save_dataset_csv(data: Dataset, path) -> None:
    """Write the encoded dataset as CSV: 15 numeric columns + label."""
    lines = [",".join(FEATURE_NAMES + ("label",))]
    for row, label in zip(data.X, data.y):
        lines.append(",".join(repr(float(v)) for v in row) + f",{int(label)}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset_csv(path) -> Dataset:
    """Load a CSV written by save_dataset_csv (header optional)."""
    rows, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != NUM_FEATURES + 1:
                raise DataError(f"{path}:{line_no}: expected {NUM_FEATURES + 1} columns, got {len(parts)}")
            try:
                rows.append([float(v) for v in parts[:-1]])
                labels.append(int(float(parts[-1])))
            except ValueError:
                if line_no == 1:
                    continue  # header line
                raise DataError(f"{path}:{line_no}: non-numeric value") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    return Dataset(np.array(rows), np.array(labels))

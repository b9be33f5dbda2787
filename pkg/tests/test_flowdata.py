import numpy as np
import pytest

from flowstack.errors import DataError
from flowstack.flowdata import (
    CATEGORICAL_FEATURES,
    FEATURE_NAMES,
    Dataset,
    Encoder,
    FlowRecord,
    ParseError,
    encode,
    encode_dataset,
    fit_encoder,
    label_to_class,
    load_dataset_csv,
    parse_zeek_log,
    records_to_log_text,
    save_dataset_csv,
    stratified_kfold,
    stratified_split,
    synth_generate,
)

from pathlib import Path

FIXTURE = Path(__file__).parent / "data" / "sample_conn.log.labeled"

HEADER = "#fields\t" + "\t".join(
    ["ts", "uid"] + list(FEATURE_NAMES[:4]) + ["proto", "service", "duration",
     "orig_bytes", "resp_bytes", "conn_state", "local_orig", "local_resp",
     "missed_bytes", "history", "orig_pkts", "orig_ip_bytes", "resp_pkts",
     "resp_ip_bytes", "tunnel_parents", "label", "detailed-label"]
)


def _line(**over):
    fields = {
        "ts": "1.0", "uid": "Cx", "id.orig_h": "10.0.0.1", "id.orig_p": "1234",
        "id.resp_h": "10.0.0.2", "id.resp_p": "80", "proto": "tcp", "service": "http",
        "duration": "1.5", "orig_bytes": "100", "resp_bytes": "200", "conn_state": "SF",
        "local_orig": "-", "local_resp": "-", "missed_bytes": "0", "history": "ShADad",
        "orig_pkts": "3", "orig_ip_bytes": "220", "resp_pkts": "2", "resp_ip_bytes": "280",
        "tunnel_parents": "-", "label": "Benign", "detailed-label": "-",
    }
    fields.update(over)
    order = HEADER.split("\t")[1:]
    return "\t".join(fields[c] for c in order)


def sample_records():
    return parse_zeek_log(FIXTURE.read_text())


# -- parsing ----------------------------------------------------------------

def test_missing_markers_preserved():
    text = HEADER + "\n" + _line(duration="-", label="Malicious")
    (rec,) = parse_zeek_log(text)
    assert rec.duration is None
    assert rec.proto == "tcp"
    assert rec.label == "Malicious"


def test_header_lines_contribute_zero_records():
    text = "#fields ts uid\n#types time string\n"
    assert parse_zeek_log("#separator \\x09\n" + text.replace(" ", "\t")) == []


def test_fixture_counts():
    records = sample_records()
    assert len(records) == 10
    assert sum(label_to_class(r.label) for r in records) == 7


def test_wrong_column_count_rejected_with_line_number():
    errors: list[ParseError] = []
    text = HEADER + "\n" + _line() + "\nonly\tthree\tcolumns\n" + _line(label="Malicious")
    records = parse_zeek_log(text, errors)
    assert len(records) == 2
    assert len(errors) == 1
    assert errors[0].line_no == 3
    assert "columns" in errors[0].message


def test_bad_port_reported_parsing_continues():
    errors: list[ParseError] = []
    text = HEADER + "\n" + _line(**{"id.orig_p": "99999"}) + "\n" + _line()
    records = parse_zeek_log(text, errors)
    assert len(records) == 1
    assert errors[0].line_no == 2
    assert "id.orig_p" in errors[0].message


def test_negative_count_rejected():
    errors: list[ParseError] = []
    parse_zeek_log(HEADER + "\n" + _line(orig_pkts="-4"), errors)
    assert len(errors) == 1 and "orig_pkts" in errors[0].message


def test_missing_label_column_raises():
    with pytest.raises(DataError, match="label"):
        parse_zeek_log("#fields\tts\tuid\n1.0\tC1\n")


def test_reparse_serialized_records_idempotent():
    records = sample_records()
    again = parse_zeek_log(records_to_log_text(records))
    assert again == records
    assert parse_zeek_log(records_to_log_text(again)) == again


# -- encoder ----------------------------------------------------------------

def test_encoder_first_seen_codes():
    text = HEADER + "\n" + _line(proto="tcp") + "\n" + _line(proto="udp") + "\n" + _line(proto="tcp")
    enc = fit_encoder(parse_zeek_log(text))
    assert enc.mappings["proto"] == {"tcp": 1, "udp": 2}


def test_encoder_skips_missing_values():
    enc = fit_encoder(parse_zeek_log(HEADER + "\n" + _line(service="-")))
    assert enc.mappings["service"] == {}


def test_encoder_refit_identical():
    records = sample_records()
    assert fit_encoder(records) == fit_encoder(records)


def test_encoder_empty_input_error():
    with pytest.raises(DataError):
        fit_encoder([])


def test_encoder_reserves_code_zero():
    enc = fit_encoder(sample_records())
    for feat in CATEGORICAL_FEATURES:
        codes = list(enc.mappings[feat].values())
        assert 0 not in codes
        assert len(set(codes)) == len(codes)


# -- encoding ---------------------------------------------------------------

def test_encode_missing_duration_is_zero():
    (rec,) = parse_zeek_log(HEADER + "\n" + _line(duration="-"))
    fv = encode(rec, fit_encoder([rec]))
    assert FEATURE_NAMES[6] == "duration"
    assert fv.values[6] == 0.0


def test_label_rule():
    assert label_to_class("Benign") == 0
    assert label_to_class("benign") == 0
    assert label_to_class("Malicious  C&C") == 1
    assert label_to_class("-") == 1


def test_encode_unseen_category_code_zero():
    seen = parse_zeek_log(HEADER + "\n" + _line(proto="tcp") + "\n" + _line(proto="udp"))
    enc = fit_encoder(seen)
    (icmp,) = parse_zeek_log(HEADER + "\n" + _line(proto="icmp"))
    assert encode(icmp, enc).values[4] == 0.0


def test_encode_parse_never_nonfinite():
    rng = np.random.default_rng(5)
    lines = [HEADER]
    for _ in range(200):
        lines.append(_line(
            duration="-" if rng.random() < 0.3 else repr(float(rng.lognormal(0, 2))),
            orig_bytes="-" if rng.random() < 0.3 else str(int(rng.integers(0, 1 << 40))),
            service=rng.choice(["-", "(empty)", "http", "dns"]),
            label=rng.choice(["Benign", "Malicious", "Malicious  Okiru"]),
        ))
    records = parse_zeek_log("\n".join(lines))
    data = encode_dataset(records, fit_encoder(records))
    assert np.all(np.isfinite(data.X))


# -- stratified split -------------------------------------------------------

def _dataset(n0: int, n1: int, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n0 + n1, len(FEATURE_NAMES)))
    y = np.concatenate([np.zeros(n0, int), np.ones(n1, int)])
    return Dataset(X, y)


def test_split_per_class_counts():
    data = _dataset(20, 80)
    train, valid = stratified_split(data, 0.8, seed=3)
    assert train.class_counts() == (16, 64)
    assert valid.class_counts() == (4, 16)


def test_split_paper_scale_counts():
    # 5,931 malicious + 2,645 benign flows at 8:2
    data = _dataset(2645, 5931)
    train, valid = stratified_split(data, 0.8, seed=0)
    assert train.class_counts() == (2116, 4745)
    assert valid.class_counts() == (529, 1186)


def test_split_deterministic():
    data = _dataset(30, 30)
    a = stratified_split(data, 0.8, seed=9)
    b = stratified_split(data, 0.8, seed=9)
    assert np.array_equal(a[0].X, b[0].X) and np.array_equal(a[1].X, b[1].X)


def test_split_union_disjoint():
    data = _dataset(37, 53, seed=2)
    train, valid = stratified_split(data, 0.7, seed=1)
    assert len(train) + len(valid) == len(data)
    merged = np.vstack([train.X, valid.X])
    assert np.array_equal(np.sort(merged, axis=0), np.sort(data.X, axis=0))
    seen = {tuple(row) for row in train.X}
    assert not any(tuple(row) in seen for row in valid.X)


def test_split_single_class_error():
    rng = np.random.default_rng(0)
    data = Dataset(rng.normal(size=(10, 15)), np.ones(10, int))
    with pytest.raises(DataError):
        stratified_split(data, 0.8, seed=0)


def test_split_fraction_bounds():
    with pytest.raises(DataError):
        stratified_split(_dataset(5, 5), 1.0, seed=0)


# -- stratified k-fold ------------------------------------------------------

def test_kfold_balanced_two_folds():
    plan = stratified_kfold(_dataset(4, 4), k=2, seed=0)
    data = _dataset(4, 4)
    for fold in range(2):
        _, held = plan.fold_indices(fold)
        labels = data.y[held]
        assert len(held) == 4
        assert np.sum(labels == 0) == 2 and np.sum(labels == 1) == 2


def test_kfold_9_vectors_k3():
    data = _dataset(3, 6)
    plan = stratified_kfold(data, k=3, seed=1)
    for fold in range(3):
        _, held = plan.fold_indices(fold)
        assert len(held) == 3
        assert np.sum(data.y[held] == 0) == 1


def test_kfold_class_smaller_than_k_error():
    with pytest.raises(DataError, match="fewer than k"):
        stratified_kfold(_dataset(2, 40), k=3, seed=0)


def test_kfold_partition_and_ratio_property():
    # |fold ratio - global ratio| <= 1/|fold| over 1,000 random datasets
    rng = np.random.default_rng(1234)
    for trial in range(1000):
        k = int(rng.integers(2, 6))
        n0 = int(rng.integers(k, 30))
        n1 = int(rng.integers(k, 30))
        data = _dataset(n0, n1, seed=trial)
        plan = stratified_kfold(data, k=k, seed=trial)
        assert np.all(np.sort(np.unique(plan.assignments)) == np.arange(k))
        global_ratio = n1 / (n0 + n1)
        counts = np.zeros(k, int)
        for fold in range(k):
            _, held = plan.fold_indices(fold)
            counts[fold] = len(held)
            ratio = float(np.mean(data.y[held]))
            assert abs(ratio - global_ratio) <= 1.0 / len(held) + 1e-12
        assert counts.sum() == n0 + n1


# -- synthetic generator ----------------------------------------------------

def test_synth_balance_counts():
    data = synth_generate(1000, 0.5, seed=7)
    assert data.class_counts() == (500, 500)


def test_synth_paper_mix_approximation():
    data = synth_generate(8576, 0.69, seed=0)
    n0, n1 = data.class_counts()
    assert n1 == round(8576 * 0.69)
    assert abs(n1 - 5931) < 30 and abs(n0 - 2645) < 30


def test_synth_deterministic():
    a = synth_generate(300, 0.4, seed=11)
    b = synth_generate(300, 0.4, seed=11)
    assert a.X.tobytes() == b.X.tobytes() and a.y.tobytes() == b.y.tobytes()


def test_synth_rejects_tiny_n():
    with pytest.raises(DataError):
        synth_generate(5, 0.5, seed=0)


def test_synth_tree_separability():
    # generator design requirement: seed 7 recorded
    from flowstack.learners import DecisionTreeClassifier

    data = synth_generate(1000, 0.5, seed=7)
    train, valid = stratified_split(data, 0.8, seed=1)
    tree = DecisionTreeClassifier().fit(train.X, train.y)
    acc = np.mean((tree.predict_proba(valid.X)[:, 1] > 0.5).astype(int) == valid.y)
    assert acc >= 0.95


# -- CSV round trip ----------------------------------------------------------

def test_csv_roundtrip(tmp_path):
    data = synth_generate(120, 0.5, seed=3)
    path = tmp_path / "flows.csv"
    save_dataset_csv(data, path)
    again = load_dataset_csv(path)
    assert np.array_equal(again.X, data.X)
    assert np.array_equal(again.y, data.y)


def test_csv_bad_column_count(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("1,2,3\n")
    with pytest.raises(DataError, match="columns"):
        load_dataset_csv(path)


def test_feature_vector_validation():
    from flowstack.flowdata import FeatureVector

    with pytest.raises(DataError):
        FeatureVector(values=np.zeros(4), label=0)
    with pytest.raises(DataError):
        FeatureVector(values=np.full(15, np.nan), label=1)

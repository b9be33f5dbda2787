import json
import re

import numpy as np
import pytest

from flowstack.codegen import (
    EmittedArtifact,
    chex,
    emit_logreg,
    emit_mlp,
    emit_super_learner,
    emit_tree,
    export_test_vectors,
    manifest_hash_matches,
)
from flowstack.errors import EmitError
from flowstack.flowdata import stratified_split, synth_generate
from flowstack.learners import DecisionTreeClassifier, LogisticRegression, MlpClassifier
from flowstack.stacker import ForestParams, MlpParams, StackConfig, derive_seed, save_model, train_super_learner


@pytest.fixture(scope="module")
def stack():
    data = synth_generate(400, 0.5, seed=7)
    train, valid = stratified_split(data, 0.8, derive_seed(0, "split"))
    cfg = StackConfig(forest=ForestParams(n_trees=4),
                      intermediate_mlp=MlpParams(hidden_sizes=(4, 3), epochs=30),
                      meta_mlp=MlpParams(hidden_sizes=(6, 6), epochs=30), seed=0)
    return train, valid, train_super_learner(train, cfg)


def _leaf_tree(c0, c1):
    tree = DecisionTreeClassifier()
    tree.n_features = 15
    tree.feature = np.array([-1], dtype=np.int32)
    tree.threshold = np.zeros(1)
    tree.left = np.array([-1], dtype=np.int32)
    tree.right = np.array([-1], dtype=np.int32)
    tree.counts = np.array([[c0, c1]], dtype=np.float64)
    return tree


def test_single_leaf_tree_emits_unconditional_constants():
    fragment = emit_tree(_leaf_tree(3, 1), "t")
    assert "if" not in fragment
    assert chex(0.75) in fragment and chex(0.25) in fragment


def test_depth_one_tree_has_exactly_one_comparison():
    tree = DecisionTreeClassifier().fit(np.array([[0.0], [1.0]]), np.array([0, 1]))
    fragment = emit_tree(tree, "t")
    assert fragment.count("if (") == 1
    assert f"x[0] < {chex(0.5)}" in fragment


def test_nested_depth_limit_error_advises_table_mode():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(300, 2))
    y = rng.integers(0, 2, 300)
    deep = DecisionTreeClassifier().fit(X, y)
    assert deep.depth > 3
    with pytest.raises(EmitError, match="table"):
        emit_tree(deep, "t", max_emit_depth=3)
    emit_tree(deep, "t", mode="table", max_emit_depth=3)  # table mode unaffected


def test_table_mode_arrays_mirror_model():
    data = synth_generate(150, 0.5, seed=1)
    tree = DecisionTreeClassifier(max_depth=3).fit(data.X, data.y)
    fragment = emit_tree(tree, "t", mode="table")
    feats = re.search(r"t_feat\[\d+\] = \{([^}]*)\}", fragment).group(1)
    assert [int(v) for v in feats.split(",")] == tree.feature.tolist()
    lefts = re.search(r"t_left\[\d+\] = \{([^}]*)\}", fragment).group(1)
    assert [int(v) for v in lefts.split(",")] == tree.left.tolist()
    thrs = re.search(r"t_thr\[\d+\] = \{([^}]*)\}", fragment).group(1)
    assert [float.fromhex(v.strip()) for v in thrs.split(",")] == tree.threshold.tolist()


def test_logreg_zero_weights_fragment():
    model = LogisticRegression()
    model.n_features = 15
    model.weights = np.zeros(15)
    model.bias = 0.0
    fragment = emit_logreg(model, "lr")
    assert f"double z = {chex(0.0)};" in fragment
    assert "p[1] = 1.0 / (1.0 + exp(-z));" in fragment
    assert "p[0] = 1.0 - p[1];" in fragment


def test_mlp_buffers_sized_to_max_layer_width(stack):
    _, _, model = stack
    fragment = emit_mlp(model.mlp_meta, "m")
    width = max(model.mlp_meta.layer_widths)
    assert f"double buf_a[{width}];" in fragment
    assert f"double buf_b[{width}];" in fragment
    assert "malloc" not in fragment


def test_emission_deterministic(stack):
    _, _, model = stack
    a = emit_super_learner(model)
    b = emit_super_learner(model)
    assert a.source_files == b.source_files
    assert a.manifest == b.manifest


def test_entry_point_chains_layers_in_order(stack):
    _, _, model = stack
    source = emit_super_learner(model).source_files["super_learner.c"]
    body = source[source.index("int sl_predict"):]
    calls = [body.index("sl_forest(feats"), body.index("sl_logreg(feats"),
             body.index("sl_dtree_mid(base"), body.index("sl_mlp_mid(base"),
             body.index("sl_mlp_meta(mid")]
    assert calls == sorted(calls)
    assert "return (out[1] > out[0]) ? 1 : 0;" in body


def test_emitted_source_is_freestanding(stack):
    _, _, model = stack
    artifact = emit_super_learner(model)
    source = artifact.source_files["super_learner.c"]
    includes = re.findall(r"#include\s+(\S+)", source)
    assert includes == ['"super_learner.h"', "<math.h>"]
    for banned in ("malloc", "calloc", "realloc", "free(", "printf"):
        assert banned not in source


def test_smaller_model_emits_smaller_artifact(stack):
    train, _, model = stack
    small_cfg = StackConfig(forest=ForestParams(n_trees=2),
                            intermediate_mlp=MlpParams(hidden_sizes=(2, 2), epochs=30),
                            meta_mlp=MlpParams(hidden_sizes=(3, 3), epochs=30), seed=0)
    small = train_super_learner(train, small_cfg)
    big_art = emit_super_learner(model)
    small_art = emit_super_learner(small)
    assert small_art.manifest["parameter_count"] < big_art.manifest["parameter_count"]
    assert small_art.manifest["source_bytes"] < big_art.manifest["source_bytes"]


def test_float32_mode_emits_single_precision(stack):
    _, _, model = stack
    art64 = emit_super_learner(model)
    art32 = emit_super_learner(model, float_width=32)
    source = art32.source_files["super_learner.c"]
    assert "typedef float sl_real;" in source
    assert "expf(" in source and " exp(" not in source
    assert art32.manifest["float_width"] == 32
    assert art32.manifest["static_data_bytes"] < art64.manifest["static_data_bytes"]
    # the public ABI stays double regardless of the internal width
    assert "int sl_predict(const double features[SL_NUM_FEATURES]" in source
    with pytest.raises(EmitError, match="float_width"):
        emit_super_learner(model, float_width=16)


def test_manifest_hash_ties_artifact_to_model_file(stack, tmp_path):
    _, _, model = stack
    artifact = emit_super_learner(model)
    path = tmp_path / "model.json"
    save_model(model, path)
    assert manifest_hash_matches(artifact.manifest, path)
    path.write_bytes(path.read_bytes() + b" ")
    assert not manifest_hash_matches(artifact.manifest, path)


def test_unfinalized_model_rejected(stack):
    _, _, model = stack
    import copy

    clone = copy.deepcopy(model)
    clone.finalized = False
    with pytest.raises(ValueError, match="finalized"):
        emit_super_learner(clone)


def test_artifact_write_and_manifest(stack, tmp_path):
    _, _, model = stack
    artifact = emit_super_learner(model)
    artifact.write(tmp_path)
    assert (tmp_path / "super_learner.c").exists()
    assert (tmp_path / "super_learner.h").exists()
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["entry_symbol"] == "sl_predict"
    assert manifest["parameter_count"] == model.n_parameters
    assert manifest["source_bytes"] == sum(
        len(text.encode()) for text in artifact.source_files.values())
    assert manifest["static_data_bytes"] > 0
    assert manifest["stack_depth_estimate"] > 0


def test_encoder_tables_emitted_with_escapes(stack):
    from flowstack.flowdata import Encoder

    _, _, model = stack
    import copy

    clone = copy.deepcopy(model)
    clone.encoder = Encoder({"proto": {"tcp": 1, 'we"ird': 2}, "service": {},
                             "conn_state": {"SF": 1}, "history": {},
                             "id.orig_h": {"10.0.0.1": 1}, "id.resp_h": {}})
    source = emit_super_learner(clone).source_files["super_learner.c"]
    assert '{"tcp", 1}' in source
    assert '{"we\\"ird", 2}' in source
    assert "sl_encode_category" in source


def test_export_vectors_hexfloat_roundtrip(stack, tmp_path):
    _, valid, model = stack
    path = tmp_path / "vectors.csv"
    export_test_vectors(model, valid, path)
    lines = path.read_text().splitlines()
    n, cols = (int(v) for v in lines[0].split())
    assert n == len(valid) and cols == 18
    proba = model.predict_proba(valid.X)
    row0 = lines[1].split(",")
    assert [float.fromhex(v) for v in row0[:15]] == valid.X[0].tolist()
    assert float.fromhex(row0[15]) == proba[0, 0]
    assert float.fromhex(row0[16]) == proba[0, 1]
    assert row0[17] in ("0", "1")

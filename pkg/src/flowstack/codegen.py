"""Transpile a finalized super learner into freestanding C99 source.

The emitted translation unit depends on nothing but exp() from the math
baseline: no heap, no recursion, no mutable globals, fixed-size buffers.
Entry point:

    int sl_predict(const double features[15], double proba_out[2]);

In the default 64-bit mode every floating-point constant is emitted as a
C99 hex-float literal and every dot product accumulates in the same order
as the reference engine, so emitted and reference probabilities agree to
the last bit rather than to a loose tolerance. An optional 32-bit mode
computes internally in float (half the constant data) behind the same
double ABI; it is meant for class-match acceptance with a relaxed 1e-4
tolerance. Emission is a pure function of the model: the same model file
always yields byte-identical source.

Trees become nested if/else chains by default (branch-predictor friendly,
mirroring how model-to-code converters usually lay them out); very deep
trees can be emitted as iterative node tables instead.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import EmitError
from .flowdata import CATEGORICAL_FEATURES, FEATURE_NAMES, Dataset
from .learners import DecisionTreeClassifier, LogisticRegression, MlpClassifier, RandomForestClassifier
from .stacker import SuperLearnerModel, model_hash

ENTRY_SYMBOL = "sl_predict"
SOURCE_NAME = "super_learner.c"
HEADER_NAME = "super_learner.h"
MANIFEST_NAME = "manifest.json"

_LEAF = -1


@dataclass(frozen=True)
class RealSpec:
    """Width of the emitted arithmetic: C type, literal suffix, exp routine."""

    bits: int
    ctype: str
    suffix: str
    exp_fn: str

    def lit(self, value: float) -> str:
        """Hex-float literal carrying the exact target-width bits."""
        if self.bits == 32:
            return float(np.float32(value)).hex() + self.suffix
        return float(value).hex()

    def dec(self, text: str) -> str:
        """Decimal literal like '0.0' or '40.0' in the target width."""
        return text + self.suffix


REAL64 = RealSpec(bits=64, ctype="double", suffix="", exp_fn="exp")
REAL32 = RealSpec(bits=32, ctype="float", suffix="f", exp_fn="expf")


def real_spec(float_width: int) -> RealSpec:
    if float_width == 64:
        return REAL64
    if float_width == 32:
        return REAL32
    raise EmitError(f"float_width must be 64 or 32, got {float_width}")


def chex(value: float) -> str:
    """C99 hex-float literal with exact float64 bits."""
    return float(value).hex()


def _c_string(value: str) -> str:
    out = ['"']
    for ch in value:
        if ch == "\\":
            out.append("\\\\")
        elif ch == '"':
            out.append('\\"')
        elif 32 <= ord(ch) < 127:
            out.append(ch)
        else:
            out.append(f"\\{ord(ch) & 0xFF:03o}")
    out.append('"')
    return "".join(out)


def _c_ident(name: str) -> str:
    return name.replace(".", "_").replace("-", "_")


@dataclass
class EmittedArtifact:
    source_files: dict[str, str]
    entry_symbol: str
    manifest: dict

    def write(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        for name, text in self.source_files.items():
            with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
                fh.write(text)
        with open(os.path.join(out_dir, MANIFEST_NAME), "w", encoding="utf-8") as fh:
            fh.write(json.dumps(self.manifest, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Per-learner fragments

def _leaf_probs(tree: DecisionTreeClassifier, node: int) -> tuple[float, float]:
    c0, c1 = tree.counts[node]
    total = c0 + c1
    return c0 / total, c1 / total


def emit_tree(tree: DecisionTreeClassifier, name: str, mode: str = "nested",
              max_emit_depth: int = 48, real: RealSpec = REAL64) -> str:
    """One tree as a `static void name(const sl_real *x, sl_real p[2])` fragment."""
    if mode == "nested":
        if tree.depth > max_emit_depth:
            raise EmitError(
                f"tree depth {tree.depth} exceeds nested-emit limit {max_emit_depth}; "
                "use node-table mode (tree_mode='table')"
            )
        return _emit_tree_nested(tree, name, real)
    if mode == "table":
        return _emit_tree_table(tree, name, real)
    raise EmitError(f"unknown tree emit mode {mode!r}")


def _emit_tree_nested(tree: DecisionTreeClassifier, name: str, real: RealSpec) -> str:
    lines = [f"static void {name}(const {real.ctype} *x, {real.ctype} p[2]) {{"]

    def walk(node: int, depth: int) -> None:
        pad = "    " * depth
        if tree.feature[node] == _LEAF:
            p0, p1 = _leaf_probs(tree, node)
            lines.append(f"{pad}p[0] = {real.lit(p0)};")
            lines.append(f"{pad}p[1] = {real.lit(p1)};")
            return
        lines.append(f"{pad}if (x[{int(tree.feature[node])}] < {real.lit(tree.threshold[node])}) {{")
        walk(int(tree.left[node]), depth + 1)
        lines.append(f"{pad}}} else {{")
        walk(int(tree.right[node]), depth + 1)
        lines.append(f"{pad}}}")

    walk(0, 1)
    lines.append("}")
    return "\n".join(lines)


def _emit_tree_table(tree: DecisionTreeClassifier, name: str, real: RealSpec) -> str:
    n = tree.n_nodes
    probs = np.zeros((n, 2), dtype=np.float64)
    for i in range(n):
        if tree.feature[i] == _LEAF:
            probs[i] = _leaf_probs(tree, i)

    def int_list(arr):
        return ", ".join(str(int(v)) for v in arr)

    def real_list(arr):
        return ", ".join(real.lit(v) for v in arr)

    return "\n".join([
        f"static const int {name}_feat[{n}] = {{{int_list(tree.feature)}}};",
        f"static const {real.ctype} {name}_thr[{n}] = {{{real_list(tree.threshold)}}};",
        f"static const int {name}_left[{n}] = {{{int_list(tree.left)}}};",
        f"static const int {name}_right[{n}] = {{{int_list(tree.right)}}};",
        f"static const {real.ctype} {name}_p0[{n}] = {{{real_list(probs[:, 0])}}};",
        f"static const {real.ctype} {name}_p1[{n}] = {{{real_list(probs[:, 1])}}};",
        f"static void {name}(const {real.ctype} *x, {real.ctype} p[2]) {{",
        "    int i = 0;",
        f"    while ({name}_feat[i] >= 0) {{",
        f"        i = (x[{name}_feat[i]] < {name}_thr[i]) ? {name}_left[i] : {name}_right[i];",
        "    }",
        f"    p[0] = {name}_p0[i];",
        f"    p[1] = {name}_p1[i];",
        "}",
    ])


def emit_forest(forest: RandomForestClassifier, name: str, mode: str = "nested",
                max_emit_depth: int = 48, real: RealSpec = REAL64) -> str:
    """All trees plus the averaging wrapper; mean accumulates in tree order."""
    parts = [emit_tree(tree, f"{name}_tree_{i}", mode, max_emit_depth, real)
             for i, tree in enumerate(forest.trees)]
    n = forest.n_trees
    pointers = ", ".join(f"{name}_tree_{i}" for i in range(n))
    parts.append("\n".join([
        f"static const sl_tree_fn {name}_trees[{n}] = {{{pointers}}};",
        f"static void {name}(const {real.ctype} *x, {real.ctype} p[2]) {{",
        f"    {real.ctype} acc0 = {real.dec('0.0')};",
        f"    {real.ctype} acc1 = {real.dec('0.0')};",
        f"    {real.ctype} tp[2];",
        "    int i;",
        f"    for (i = 0; i < {n}; i++) {{",
        f"        {name}_trees[i](x, tp);",
        "        acc0 += tp[0];",
        "        acc1 += tp[1];",
        "    }",
        f"    p[0] = acc0 / {real.dec(f'{n}.0')};",
        f"    p[1] = acc1 / {real.dec(f'{n}.0')};",
        "}",
    ]))
    return "\n\n".join(parts)


def emit_logreg(model: LogisticRegression, name: str, real: RealSpec = REAL64) -> str:
    d = len(model.weights)
    weights = ", ".join(real.lit(w) for w in model.weights)
    one = real.dec("1.0")
    return "\n".join([
        f"static const {real.ctype} {name}_w[{d}] = {{{weights}}};",
        f"static void {name}(const {real.ctype} *x, {real.ctype} p[2]) {{",
        f"    {real.ctype} z = {real.lit(model.bias)};",
        "    int i;",
        f"    for (i = 0; i < {d}; i++) {{",
        f"        z += {name}_w[i] * x[i];",
        "    }",
        f"    p[1] = {one} / ({one} + {real.exp_fn}(-z));",
        f"    p[0] = {one} - p[1];",
        "}",
    ])


def emit_mlp(model: MlpClassifier, name: str, real: RealSpec = REAL64) -> str:
    """Static weight arrays plus an unrolled-layer forward pass.

    Activation buffers are fixed-size locals (max layer width), so the
    fragment is reentrant and allocation-free.
    """
    lines: list[str] = []
    widths = model.layer_widths
    max_width = max(widths)
    for l, (W, b) in enumerate(zip(model.weights, model.biases)):
        flat = ", ".join(real.lit(v) for v in W.reshape(-1))
        lines.append(f"static const {real.ctype} {name}_w{l}[{W.size}] = {{{flat}}};")
        lines.append(f"static const {real.ctype} {name}_b{l}[{len(b)}] = "
                     f"{{{', '.join(real.lit(v) for v in b)}}};")
    zero = real.dec("0.0")
    lines.append(f"static void {name}(const {real.ctype} *x, {real.ctype} p[2]) {{")
    lines.append(f"    {real.ctype} buf_a[{max_width}];")
    lines.append(f"    {real.ctype} buf_b[{max_width}];")
    lines.append("    int u, v;")
    src = "x"
    dst = "buf_a"
    for l, W in enumerate(model.weights[:-1]):
        out_n, in_n = W.shape
        lines.extend([
            f"    /* layer {l}: {in_n} -> {out_n}, relu */",
            f"    for (v = 0; v < {out_n}; v++) {{",
            f"        {real.ctype} acc = {name}_b{l}[v];",
            f"        for (u = 0; u < {in_n}; u++) {{",
            f"            acc += {name}_w{l}[v * {in_n} + u] * {src}[u];",
            "        }",
            f"        {dst}[v] = (acc > {zero}) ? acc : {zero};",
            "    }",
        ])
        src = dst
        dst = "buf_b" if dst == "buf_a" else "buf_a"
    last = len(model.weights) - 1
    in_n = model.weights[last].shape[1]
    lines.extend([
        f"    /* output layer: {in_n} -> 2, softmax */",
        "    {",
        f"        {real.ctype} z0 = {name}_b{last}[0];",
        f"        {real.ctype} z1 = {name}_b{last}[1];",
        f"        {real.ctype} m, e0, e1, s;",
        f"        for (u = 0; u < {in_n}; u++) {{",
        f"            z0 += {name}_w{last}[u] * {src}[u];",
        "        }",
        f"        for (u = 0; u < {in_n}; u++) {{",
        f"            z1 += {name}_w{last}[{in_n} + u] * {src}[u];",
        "        }",
        "        m = (z0 > z1) ? z0 : z1;",
        f"        e0 = {real.exp_fn}(z0 - m);",
        f"        e1 = {real.exp_fn}(z1 - m);",
        "        s = e0 + e1;",
        "        p[0] = e0 / s;",
        "        p[1] = e1 / s;",
        "    }",
        "}",
    ])
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Encoder tables

def _emit_encoder(encoder) -> str:
    lines = [
        "typedef struct {",
        "    const char *value;",
        "    int code;",
        "} sl_code_entry;",
        "",
    ]
    idents = []
    for feat in CATEGORICAL_FEATURES:
        ident = f"sl_codes_{_c_ident(feat)}"
        idents.append(ident)
        table = encoder.mappings.get(feat, {})
        if table:
            rows = ", ".join(f"{{{_c_string(v)}, {code}}}" for v, code in table.items())
            lines.append(f"static const sl_code_entry {ident}[{len(table)}] = {{{rows}}};")
        else:
            lines.append(f"static const sl_code_entry {ident}[1] = {{{{0, 0}}}};")
        lines.append(f"static const int {ident}_n = {len(table)};")
    lines.extend([
        "",
        "static int sl_str_eq(const char *a, const char *b) {",
        "    while (*a != '\\0' && *a == *b) {",
        "        a++;",
        "        b++;",
        "    }",
        "    return *a == *b;",
        "}",
        "",
        "int sl_encode_category(int category, const char *value) {",
        "    const sl_code_entry *table;",
        "    int n, i;",
        "    switch (category) {",
    ])
    for i, ident in enumerate(idents):
        lines.append(f"    case {i}: table = {ident}; n = {ident}_n; break;")
    lines.extend([
        "    default: return 0;",
        "    }",
        "    if (value == 0) {",
        "        return 0;",
        "    }",
        "    for (i = 0; i < n; i++) {",
        "        if (sl_str_eq(table[i].value, value)) {",
        "            return table[i].code;",
        "        }",
        "    }",
        "    return 0;",
        "}",
    ])
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Whole-model emission

def _emit_header(model: SuperLearnerModel, model_digest: str) -> str:
    cat_enum = ",\n".join(
        f"    SL_CAT_{_c_ident(feat).upper()} = {i}" for i, feat in enumerate(CATEGORICAL_FEATURES)
    )
    feature_list = "\n".join(f" *   {i:2d}  {name}" for i, name in enumerate(FEATURE_NAMES))
    return f"""/* Generated flow-classifier model. Do not edit by hand. */
#ifndef FLOWSTACK_SUPER_LEARNER_H
#define FLOWSTACK_SUPER_LEARNER_H

#define SL_NUM_FEATURES 15
#define SL_NUM_CLASSES 2
#define SL_MODEL_HASH "{model_digest}"

/*
 * Feature order expected by sl_predict:
{feature_list}
 * Categorical features carry integer dictionary codes (see
 * sl_encode_category); missing numeric values are encoded as 0.0.
 */
enum {{
{cat_enum}
}};

/*
 * Classify one encoded flow. `features` holds SL_NUM_FEATURES doubles in
 * the order above; `proba_out` receives the two class probabilities.
 * Returns the predicted class index; an exact probability tie resolves
 * to class 0. Reentrant: no heap, no recursion, no mutable globals.
 */
int sl_predict(const double features[SL_NUM_FEATURES], double proba_out[SL_NUM_CLASSES]);

/* Dictionary code for a raw categorical value; 0 when unseen or missing. */
int sl_encode_category(int category, const char *value);

#endif /* FLOWSTACK_SUPER_LEARNER_H */
"""


def _static_data_bytes(model: SuperLearnerModel, tree_mode: str, real: RealSpec) -> int:
    """Estimated bytes of emitted constant data (ints 4, pointers 8)."""
    scalar = real.bits // 8
    total = 8 * model.forest.n_trees  # tree function-pointer table
    if tree_mode == "table":
        for tree in model.forest.trees:
            total += tree.n_nodes * (4 + scalar + 4 + 4 + scalar + scalar)
        total += model.tree.n_nodes * (4 + scalar + 4 + 4 + scalar + scalar)
    total += scalar * len(model.logreg.weights)
    for mlp in (model.mlp_mid, model.mlp_meta):
        total += scalar * sum(w.size + b.size for w, b in zip(mlp.weights, mlp.biases))
    for feat in CATEGORICAL_FEATURES:
        for value in model.encoder.mappings.get(feat, {}):
            total += 8 + 4 + len(value.encode("utf-8")) + 1
    return total


def _stack_depth_estimate(model: SuperLearnerModel, real: RealSpec) -> int:
    """Rough peak stack bytes along the deepest call chain."""
    scalar = real.bits // 8
    entry = scalar * (15 + 4 + 4 + 2 + 2) + 64
    mlp_frames = [scalar * (2 * max(m.layer_widths) + 8) for m in (model.mlp_mid, model.mlp_meta)]
    forest_frame = scalar * 6
    return entry + max(mlp_frames + [forest_frame]) + 128


def emit_super_learner(model: SuperLearnerModel, tree_mode: str = "nested",
                       max_emit_depth: int = 48, float_width: int = 64) -> EmittedArtifact:
    """Emit the whole stack as one C translation unit + header + manifest.

    The prediction chain mirrors the reference engine exactly: forest and
    logistic regression on the 15 raw features, their four probabilities
    into the intermediate tree and MLP, those four probabilities into the
    meta MLP.
    """
    if not model.finalized:
        raise ValueError("model is not finalized")
    real = real_spec(float_width)
    digest = model_hash(model)

    sections = [
        "/* Generated flow-classifier model. Do not edit by hand. */",
        f'#include "{HEADER_NAME}"',
        "",
        f"#include <math.h> /* {real.exp_fn}() is the only external dependency */",
        "",
        f"typedef {real.ctype} sl_real;",
        "typedef void (*sl_tree_fn)(const sl_real *, sl_real *);",
        "",
        emit_forest(model.forest, "sl_forest", tree_mode, max_emit_depth, real),
        "",
        emit_logreg(model.logreg, "sl_logreg", real),
        "",
        emit_tree(model.tree, "sl_dtree_mid", tree_mode, max_emit_depth, real),
        "",
        emit_mlp(model.mlp_mid, "sl_mlp_mid", real),
        "",
        emit_mlp(model.mlp_meta, "sl_mlp_meta", real),
        "",
        _emit_encoder(model.encoder),
        "",
        "\n".join([
            f"int {ENTRY_SYMBOL}(const double features[SL_NUM_FEATURES], double proba_out[SL_NUM_CLASSES]) {{",
            "    sl_real feats[SL_NUM_FEATURES];",
            "    sl_real base[4];",
            "    sl_real mid[4];",
            "    sl_real pp[2];",
            "    sl_real out[2];",
            "    int i;",
            "    for (i = 0; i < SL_NUM_FEATURES; i++) {",
            "        feats[i] = (sl_real)features[i];",
            "    }",
            "    sl_forest(feats, pp);",
            "    base[0] = pp[0];",
            "    base[1] = pp[1];",
            "    sl_logreg(feats, pp);",
            "    base[2] = pp[0];",
            "    base[3] = pp[1];",
            "    sl_dtree_mid(base, pp);",
            "    mid[0] = pp[0];",
            "    mid[1] = pp[1];",
            "    sl_mlp_mid(base, pp);",
            "    mid[2] = pp[0];",
            "    mid[3] = pp[1];",
            "    sl_mlp_meta(mid, out);",
            "    proba_out[0] = (double)out[0];",
            "    proba_out[1] = (double)out[1];",
            "    return (out[1] > out[0]) ? 1 : 0;",
            "}",
        ]),
        "",
    ]
    source = "\n".join(sections)
    header = _emit_header(model, digest)

    manifest = {
        "entry_symbol": ENTRY_SYMBOL,
        "parameter_count": model.n_parameters,
        "source_bytes": len(source.encode("utf-8")) + len(header.encode("utf-8")),
        "static_data_bytes": _static_data_bytes(model, tree_mode, real),
        "stack_depth_estimate": _stack_depth_estimate(model, real),
        "model_hash": digest,
        "tree_mode": tree_mode,
        "float_width": float_width,
        "files": [SOURCE_NAME, HEADER_NAME],
    }
    return EmittedArtifact(
        source_files={SOURCE_NAME: source, HEADER_NAME: header},
        entry_symbol=ENTRY_SYMBOL,
        manifest=manifest,
    )


# ---------------------------------------------------------------------------
# Test-vector export (consumed by the compiled harness)

def export_test_vectors(model: SuperLearnerModel, data: Dataset, path) -> None:
    """Write encoded features + reference predictions for the C harness.

    Format: one declaration line "ROWS COLS", then ROWS comma-separated
    lines of 15 features, p0, p1, class. Floats are hex literals so the
    harness computes on bit-identical inputs (C99 strtod parses them).
    """
    proba = model.predict_proba(data.X)
    classes = (proba[:, 1] > proba[:, 0]).astype(np.int64)
    n, d = data.X.shape
    lines = [f"{n} {d + 3}"]
    for i in range(n):
        cells = [chex(v) for v in data.X[i]]
        cells.append(chex(proba[i, 0]))
        cells.append(chex(proba[i, 1]))
        cells.append(str(int(classes[i])))
        lines.append(",".join(cells))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def manifest_hash_matches(manifest: dict, model_file_path) -> bool:
    """True iff the manifest's model_hash matches the model file bytes."""
    with open(model_file_path, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    return manifest.get("model_hash") == digest

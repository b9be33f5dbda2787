"""Secondary suite: compile the emitted model and certify it end to end.

Run explicitly (it is not part of the primary pytest path and needs a C
toolchain):

    pytest harness/test_harness.py -v

Builds the default and reduced models with the primary package, emits C,
compiles the harness against the reduced model, and checks reference vs
compiled predictions over the full validation set, the RAM budget, and
the negative controls.
"""

import json
import subprocess
from pathlib import Path

import pytest

from flowstack.cli import EXIT_EQUIVALENCE, EXIT_OK, main

HARNESS_DIR = Path(__file__).parent
TOLERANCE = 1e-12


def _run(binary, *args):
    return subprocess.run([str(binary), *[str(a) for a in args]],
                          capture_output=True, text=True)


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    root = tmp_path_factory.mktemp("secondary")
    csv = root / "flows.csv"
    model = root / "model.json"
    opt_model = root / "optimized.json"
    emit_dir = root / "emitted"
    build_dir = root / "build"
    assert main(["gen-data", "--n", "1000", "--seed", "7", "--out", str(csv)]) == EXIT_OK
    assert main(["train", "--data", str(csv), "--out-model", str(model),
                 "--seed", "0"]) == EXIT_OK
    assert main(["optimize", "--data", str(csv), "--model", str(model),
                 "--out-model", str(opt_model),
                 "--report", str(root / "reduction.json")]) == EXIT_OK
    assert main(["emit", "--model", str(opt_model), "--out-dir", str(emit_dir)]) == EXIT_OK
    make = subprocess.run(["make", "-C", str(HARNESS_DIR),
                           f"MODEL_DIR={emit_dir}", f"BUILD={build_dir}"],
                          capture_output=True, text=True)
    assert make.returncode == 0, make.stdout + make.stderr
    return {
        "root": root,
        "csv": csv,
        "model": model,
        "opt_model": opt_model,
        "emit_dir": emit_dir,
        "binary": build_dir / "harness",
        "model_object": build_dir / "model.o",
        "make_output": make.stdout,
    }


def test_full_validation_set_certification(built):
    out_dir = built["root"] / "roundtrip"
    code = main(["roundtrip", "--model", str(built["opt_model"]), "--data", str(built["csv"]),
                 "--harness", str(built["binary"]), "--out-dir", str(out_dir)])
    assert code == EXIT_OK
    summary = None
    for line in (out_dir / "harness_report.csv").read_text().splitlines():
        if line.startswith("summary,"):
            summary = line.split(",")
    rows, mismatches, max_dp = int(summary[1]), int(summary[2]), float(summary[3])
    assert rows == 200  # the 20% validation slice of 1,000 flows
    assert mismatches == 0
    assert max_dp <= TOLERANCE
    print(f"\n[PASS] roundtrip certification: {rows} rows, 0 mismatches, "
          f"max |dp| = {max_dp:.3e} (<= 1e-12)")


def test_model_object_fits_ram_budget(built):
    out = subprocess.run(["size", str(built["model_object"])],
                         capture_output=True, text=True)
    fields = out.stdout.splitlines()[1].split()
    text_bytes, data_bytes, bss_bytes = int(fields[0]), int(fields[1]), int(fields[2])
    assert data_bytes + bss_bytes <= 4 * 1024 * 1024
    assert "RAM budget" in built["make_output"]
    print(f"\n[PASS] model object RAM (data+bss) {data_bytes + bss_bytes} B, "
          f"flash (text) {text_bytes} B, within the 4 MB budget")


def test_model_object_imports_only_exp(built):
    out = subprocess.run(["nm", "-u", str(built["model_object"])],
                         capture_output=True, text=True)
    undefined = {line.split()[-1] for line in out.stdout.splitlines() if line.strip()}
    assert undefined == {"exp"}


def test_emitted_model_hash_matches_model_file(built):
    manifest = json.loads((built["emit_dir"] / "manifest.json").read_text())
    import hashlib

    digest = hashlib.sha256(built["opt_model"].read_bytes()).hexdigest()
    assert manifest["model_hash"] == digest


def test_ten_thousand_random_inputs_bit_level(built, tmp_path):
    from flowstack import load_model, synth_generate
    from flowstack.codegen import export_test_vectors

    model = load_model(built["opt_model"])
    probe = synth_generate(10000, 0.5, seed=321)
    vectors = tmp_path / "vectors_10k.csv"
    export_test_vectors(model, probe, vectors)
    report = tmp_path / "report_10k.csv"
    proc = _run(built["binary"], vectors, report)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    summary = [l for l in report.read_text().splitlines() if l.startswith("summary,")][0]
    _, rows, mismatches, max_dp, _ = summary.split(",")
    assert int(rows) == 10000 and int(mismatches) == 0
    assert float(max_dp) <= TOLERANCE
    print(f"\n[PASS] 10,000 random inputs: 0 mismatches, max |dp| = {float(max_dp):.3e}")


def test_float32_emission_within_relaxed_tolerance(built, tmp_path):
    emit32 = tmp_path / "emit32"
    build32 = tmp_path / "build32"
    assert main(["emit", "--model", str(built["opt_model"]), "--out-dir", str(emit32),
                 "--float-width", "32"]) == EXIT_OK
    make = subprocess.run(["make", "-C", str(HARNESS_DIR),
                           f"MODEL_DIR={emit32}", f"BUILD={build32}"],
                          capture_output=True, text=True)
    assert make.returncode == 0, make.stdout + make.stderr
    code = main(["roundtrip", "--model", str(built["opt_model"]), "--data", str(built["csv"]),
                 "--harness", str(build32 / "harness"), "--out-dir", str(tmp_path / "rt32"),
                 "--tolerance", "1e-4"])
    assert code == EXIT_OK  # class-match with relaxed probability tolerance
    summary = [l for l in (tmp_path / "rt32" / "harness_report.csv").read_text().splitlines()
               if l.startswith("summary,")][0]
    assert int(summary.split(",")[2]) == 0
    print(f"\n[PASS] float32 emission: 0 class mismatches, max |dp| = "
          f"{float(summary.split(',')[3]):.3e} (<= 1e-4)")


def test_empty_vectors_file(built, tmp_path):
    vectors = tmp_path / "empty.csv"
    vectors.write_text("0 18\n")
    report = tmp_path / "report.csv"
    proc = _run(built["binary"], vectors, report)
    assert proc.returncode == 0
    assert "summary,0,0," in report.read_text()


def test_corrupted_expected_column_detected(built, tmp_path):
    from flowstack import load_model, synth_generate, stratified_split
    from flowstack.codegen import export_test_vectors
    from flowstack.stacker import derive_seed

    model = load_model(built["opt_model"])
    data = synth_generate(1000, 0.5, seed=7)
    _, valid = stratified_split(data, 0.8, derive_seed(0, "split"))
    vectors = tmp_path / "vectors.csv"
    export_test_vectors(model, valid, vectors)

    lines = vectors.read_text().splitlines()
    cells = lines[1].split(",")
    cells[16] = "0.5" if float.fromhex(cells[16]) < 0.4 else "0.0"  # break reference p1
    cells[17] = "1" if cells[17] == "0" else "0"                    # and the class
    lines[1] = ",".join(cells)
    corrupted = tmp_path / "corrupted.csv"
    corrupted.write_text("\n".join(lines) + "\n")

    report = tmp_path / "report.csv"
    proc = _run(built["binary"], corrupted, report)
    assert proc.returncode == 1
    summary = [l for l in report.read_text().splitlines() if l.startswith("summary,")][0]
    assert int(summary.split(",")[2]) >= 1  # the class mismatch is counted

    code = main(["roundtrip", "--model", str(built["opt_model"]), "--data", str(built["csv"]),
                 "--harness", str(tmp_path / "definitely-missing")])
    assert code != EXIT_OK  # missing harness handled separately
    print("\n[PASS] negative control: corrupted expected column detected, nonzero exit")


def test_malformed_vectors_rejected(built, tmp_path):
    bad = tmp_path / "bad.csv"
    report = tmp_path / "report.csv"
    bad.write_text("not a header\n")
    assert _run(built["binary"], bad, report).returncode == 2
    bad.write_text("2 18\n1,2,3\n")
    assert _run(built["binary"], bad, report).returncode == 2
    bad.write_text("1 7\n1,2,3,4,5,6,7\n")
    assert _run(built["binary"], bad, report).returncode == 2
    assert _run(built["binary"], tmp_path / "missing.csv", report).returncode == 2


def test_oversized_tolerance_argument_validation(built, tmp_path):
    vectors = tmp_path / "v.csv"
    vectors.write_text("0 18\n")
    assert _run(built["binary"], vectors, tmp_path / "r.csv", "-1").returncode == 2
    assert _run(built["binary"], vectors).returncode == 2  # missing report arg

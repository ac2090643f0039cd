"""Corpus export to EMB1 and the export-embeddings CLI."""

import numpy as np
import pytest

from abuse_pipeline.features import load_embeddings

from encoder_exporter.cli import main
from encoder_exporter.encoder import (
    BadMaxLenError,
    BadPoolingError,
    EncoderUnavailableError,
    FrozenEncoder,
    build_demo_encoder,
)
from encoder_exporter.export import (
    ExportSpec,
    NonFiniteEmbeddingError,
    RowCountMismatchError,
    export_embeddings,
)

from corpus_io import DEMO_ROWS, vocab_from_rows, write_corpus


@pytest.fixture(scope="module")
def setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("export")
    corpus_path = write_corpus(root / "corpus.csv", DEMO_ROWS)
    encoder_path = build_demo_encoder(
        str(root / "enc"), vocab_from_rows(DEMO_ROWS), hidden_size=32, seed=11)
    return root, corpus_path, encoder_path


def test_export_round_trip(setup):
    root, corpus_path, encoder_path = setup
    out = str(root / "mean.emb")
    spec = ExportSpec(corpus_path, encoder_path, 64, "mean", out)
    matrix = export_embeddings(spec)
    assert matrix.values.shape == (len(DEMO_ROWS), 32)
    reloaded = load_embeddings(out, expected_rows=len(DEMO_ROWS))
    assert np.array_equal(matrix.values, reloaded.values)
    assert np.all(np.isfinite(matrix.values))


def test_export_rerun_byte_identical(setup):
    root, corpus_path, encoder_path = setup
    out = str(root / "rerun.emb")
    spec = ExportSpec(corpus_path, encoder_path, 64, "mean", out)
    export_embeddings(spec)
    first = open(out, "rb").read()
    export_embeddings(spec)
    assert open(out, "rb").read() == first


def test_export_rows_follow_corpus_order(setup, tmp_path):
    root, corpus_path, encoder_path = setup
    reversed_path = write_corpus(tmp_path / "reversed.csv", list(reversed(DEMO_ROWS)))

    fwd = export_embeddings(
        ExportSpec(corpus_path, encoder_path, 64, "mean", str(tmp_path / "f.emb")),
        batch_size=1)
    rev = export_embeddings(
        ExportSpec(reversed_path, encoder_path, 64, "mean", str(tmp_path / "r.emb")),
        batch_size=1)
    # per-row inference is identical arithmetic, so reversal is exact
    assert np.array_equal(fwd.values[::-1], rev.values)

    rev_batched = export_embeddings(
        ExportSpec(reversed_path, encoder_path, 64, "mean", str(tmp_path / "rb.emb")))
    assert float(np.max(np.abs(fwd.values[::-1] - rev_batched.values))) <= 1e-6


def test_export_batch_size_tolerance(setup, tmp_path):
    root, corpus_path, encoder_path = setup
    outs = {}
    for bs in (1, 3, 32):
        path = str(tmp_path / f"b{bs}.emb")
        export_embeddings(
            ExportSpec(corpus_path, encoder_path, 64, "mean", path), batch_size=bs)
        outs[bs] = load_embeddings(path, expected_rows=len(DEMO_ROWS)).values
    assert float(np.max(np.abs(outs[1] - outs[3]))) <= 1e-6
    assert float(np.max(np.abs(outs[1] - outs[32]))) <= 1e-6


def test_export_duplicate_texts_equal_rows(setup, tmp_path):
    root, _, encoder_path = setup
    rows = [
        ("d1", "namaste dost", "hi", 0, 0, "1"),
        ("d2", "chup kar", "hi", 0, 0, "0"),
        ("d3", "namaste dost", "hi", 9, 9, "0"),
    ]
    path = write_corpus(tmp_path / "dup.csv", rows)
    matrix = export_embeddings(
        ExportSpec(path, encoder_path, 64, "mean", str(tmp_path / "d.emb")),
        batch_size=1)
    assert np.array_equal(matrix.values[0], matrix.values[2])
    assert not np.array_equal(matrix.values[0], matrix.values[1])


def test_export_max_len_truncates(setup, tmp_path):
    root, _, encoder_path = setup
    rows = [("l1", "yaar tu bahut acha hai namaste dost chup kar", "hi", 0, 0, "1")]
    path = write_corpus(tmp_path / "long.csv", rows)
    short = export_embeddings(
        ExportSpec(path, encoder_path, 4, "mean", str(tmp_path / "s.emb")))
    full = export_embeddings(
        ExportSpec(path, encoder_path, 64, "mean", str(tmp_path / "l.emb")))
    assert not np.allclose(short.values, full.values)


def test_export_spec_validation(setup):
    root, corpus_path, encoder_path = setup
    with pytest.raises(BadMaxLenError):
        ExportSpec(corpus_path, encoder_path, 0, "mean", "x.emb")
    with pytest.raises(BadPoolingError):
        ExportSpec(corpus_path, encoder_path, 64, "cls", "x.emb")


def test_export_encoder_unavailable(setup, tmp_path):
    root, corpus_path, _ = setup
    spec = ExportSpec(corpus_path, "no-such-model", 64, "mean", str(tmp_path / "x.emb"))
    with pytest.raises(EncoderUnavailableError):
        export_embeddings(spec, cache_dir=str(tmp_path))


def test_export_row_count_mismatch(setup, tmp_path, monkeypatch):
    root, corpus_path, encoder_path = setup

    def drop_one(self, texts, max_len, pooling, batch_size=32):
        return np.zeros((len(texts) - 1, self.hidden_size))

    monkeypatch.setattr(FrozenEncoder, "encode", drop_one)
    spec = ExportSpec(corpus_path, encoder_path, 64, "mean", str(tmp_path / "x.emb"))
    with pytest.raises(RowCountMismatchError):
        export_embeddings(spec)


def test_export_non_finite_rejected(setup, tmp_path):
    root, corpus_path, _ = setup
    bad_path = build_demo_encoder(
        str(tmp_path / "bad"), vocab_from_rows(DEMO_ROWS), hidden_size=16,
        num_heads=2, seed=13)
    weights_path = tmp_path / "bad" / "weights.npz"
    with np.load(weights_path) as archive:
        weights = {k: archive[k] for k in archive.files}
    weights["tok_emb"][:, 0] = np.inf
    np.savez(weights_path, **weights)
    spec = ExportSpec(corpus_path, bad_path, 64, "mean", str(tmp_path / "x.emb"))
    # the poisoned weights push inf through layer norm on purpose
    with np.errstate(invalid="ignore"):
        with pytest.raises(NonFiniteEmbeddingError):
            export_embeddings(spec)
    assert not (tmp_path / "x.emb").exists()


def test_export_accepts_unlabeled_rows(setup, tmp_path):
    root, _, encoder_path = setup
    rows = [("u1", "namaste", "hi", 0, 0, ""), ("u2", "chup", "hi", 0, 0, "")]
    path = write_corpus(tmp_path / "unlabeled.csv", rows)
    matrix = export_embeddings(
        ExportSpec(path, encoder_path, 16, "pooled", str(tmp_path / "u.emb")))
    assert matrix.values.shape == (2, 32)


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def test_cli_success(setup, tmp_path, capsys):
    root, corpus_path, encoder_path = setup
    out = str(tmp_path / "cli.emb")
    assert main(["--corpus", corpus_path, "--encoder", encoder_path,
                 "--max-len", "64", "--pooling", "mean", "--out", out]) == 0
    assert f"{len(DEMO_ROWS)} rows, 32 dims" in capsys.readouterr().out
    load_embeddings(out, expected_rows=len(DEMO_ROWS))


def test_cli_rejects_unknown_pooling(setup, tmp_path):
    root, corpus_path, encoder_path = setup
    with pytest.raises(SystemExit):
        main(["--corpus", corpus_path, "--encoder", encoder_path,
              "--max-len", "64", "--pooling", "cls", "--out", str(tmp_path / "x.emb")])


def test_cli_reports_unavailable_encoder(setup, tmp_path, capsys, monkeypatch):
    root, corpus_path, _ = setup
    monkeypatch.setenv("ENCODER_EXPORTER_CACHE", str(tmp_path))
    assert main(["--corpus", corpus_path, "--encoder", "no-such-model",
                 "--max-len", "64", "--pooling", "mean",
                 "--out", str(tmp_path / "x.emb")]) == 1
    assert "EncoderUnavailableError" in capsys.readouterr().err


def test_cli_reports_bad_corpus(setup, tmp_path, capsys):
    root, _, encoder_path = setup
    bad = tmp_path / "bad.csv"
    bad.write_text("id,text\n1,x\n", encoding="utf-8")
    assert main(["--corpus", str(bad), "--encoder", encoder_path,
                 "--max-len", "64", "--pooling", "mean",
                 "--out", str(tmp_path / "x.emb")]) == 1
    assert "error" in capsys.readouterr().err


def test_cli_reports_bad_max_len(setup, tmp_path, capsys):
    root, corpus_path, encoder_path = setup
    assert main(["--corpus", corpus_path, "--encoder", encoder_path,
                 "--max-len", "0", "--pooling", "mean",
                 "--out", str(tmp_path / "x.emb")]) == 1
    assert "BadMaxLenError" in capsys.readouterr().err

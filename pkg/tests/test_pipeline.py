import filecmp
from dataclasses import replace

import numpy as np
import pytest

from dnkd import config as config_mod
from dnkd import corpus as cp
from dnkd import pipeline as pl
from dnkd import seq2seq as s2s
from dnkd.errors import ChecksumError, InvalidArgument, MissingInput

TINY = config_mod.parse(
    """
[experiment]
name = tiny
seeds = 1
[task]
num_train = 60
num_dev = 20
num_test = 20
max_len = 10
[model]
hidden_dim = 16
num_layers = 1
ffn_dim = 32
[train]
epochs = 2
batch_size = 16
"""
)


def build_run(root, cfg=TINY):
    paths = pl.RunPaths(root).ensure()
    paths.config.write_text(config_mod.dump(cfg))
    pl.gen_corpus(cfg, paths)
    pl.run_baseline(cfg, paths)
    pl.run_build_store(cfg, paths)
    pl.run_build_cache(cfg, paths)
    return paths


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    paths = build_run(tmp_path_factory.mktemp("run"))
    pl.run_student(TINY, paths, "dnkd")
    return paths


def test_layout(run):
    for p in (run.config, run.datastore, run.neighbors, run.baseline(1), run.student("dnkd", 1)):
        assert p.exists(), p
    assert (run.reports / "baseline.csv").exists()
    rows = pl.read_csv(run.reports / "student_dnkd.csv")
    assert [r["seed"] for r in rows] == ["1", "median"]


def test_datastore_size_is_target_token_count(run):
    store = pl.load_store(run)
    train = cp.read_pairs(run.split("train"))
    assert len(store) == sum(len(t) for _, t in train)


def test_rebuild_store_is_bitwise_identical(run, tmp_path):
    train = cp.read_pairs(run.split("train"))
    store = pl.build_store(run.baseline(1), train)
    store.save(tmp_path / "again.nkds")
    assert (tmp_path / "again.nkds").read_bytes() == run.datastore.read_bytes()


def test_empty_corpus_is_error(run):
    with pytest.raises(InvalidArgument):
        pl.build_store(run.baseline(1), [])


def test_full_pipeline_is_deterministic(run, tmp_path):
    again = build_run(tmp_path)
    pl.run_student(TINY, again, "dnkd")
    names = ["config", "datastore.nkds", "neighbors.nknc", "checkpoints/baseline_seed1.nkcp",
             "checkpoints/student_dnkd_seed1.nkcp", "reports/baseline.csv", "reports/student_dnkd.csv",
             "corpus/train.tsv"]
    for name in names:
        assert filecmp.cmp(run.root / name, again.root / name, shallow=False), name


def test_zero_epochs_returns_untrained_model(run):
    splits = pl.load_splits(run)
    cfg = replace(TINY, train=replace(TINY.train, epochs=0))
    model = s2s.init(pl.model_config(cfg, 1, pl.BASELINE_STREAM))
    fresh = pl.evaluate_model(s2s.init(pl.model_config(cfg, 1, pl.BASELINE_STREAM)), splits["test"])
    res = pl.train_model(model, splits["train"], splits["dev"], "ce", cfg.loss, cfg.train, 1)
    assert res.best_epoch == 0 and res.step_losses == []
    assert pl.evaluate_model(model, splits["test"]) == fresh


def test_lambda_one_student_matches_ce(run):
    splits = pl.load_splits(run)
    cache = pl.load_cache(run, pl.load_store(run), TINY.retrieval.k)
    cfg = TINY.with_loss(lam=1.0)
    m_ce, r_ce = pl.train_student(cfg, splits, None, "ce", 1)
    m_d, r_d = pl.train_student(cfg, splits, cache, "dnkd", 1)
    assert r_ce.step_losses == r_d.step_losses
    assert s2s.checkpoint_bytes(m_ce) == s2s.checkpoint_bytes(m_d)


def test_cache_from_other_store_is_rejected(run, tmp_path):
    other = pl.RunPaths(tmp_path).ensure()
    for name in ("train", "dev", "test"):
        other.corpus.mkdir(exist_ok=True)
        other.split(name).write_text(run.split(name).read_text())
    other.checkpoints.mkdir(exist_ok=True)
    other.baseline(1).write_bytes(run.baseline(1).read_bytes())
    store = pl.load_store(run)
    keys = store.keys.copy()
    keys[0, 0] += 1.0
    changed = type(store)(store.dim, store.vocab_size)
    changed.add_entries(keys, store.values, store.origins)
    changed.save(other.datastore)
    other.neighbors.write_bytes(run.neighbors.read_bytes())
    with pytest.raises(ChecksumError):
        pl.run_student(TINY, other, "dnkd")


def test_missing_cache(run, tmp_path):
    paths = pl.RunPaths(tmp_path).ensure()
    for name in ("train", "dev", "test"):
        paths.split(name).write_text(run.split(name).read_text())
    with pytest.raises(MissingInput, match="missing neighbor cache"):
        pl.run_student(TINY, paths, "dnkd")


def test_cache_smaller_than_k_is_rejected(run):
    with pytest.raises(InvalidArgument):
        pl.load_cache(run, pl.load_store(run), TINY.retrieval.k + 1)


def test_teacher_table_rows_follow_sentences(run):
    splits = pl.load_splits(run)
    cache = pl.load_cache(run, pl.load_store(run), 8)
    table = pl.TeacherTable(cache, splits["train"], 100.0)
    tok, prob = table.rows([2, 0])
    n2, n0 = len(splits["train"][2][1]), len(splits["train"][0][1])
    assert len(tok) == n2 + n0
    np.testing.assert_allclose(prob.sum(axis=1), 1.0, atol=1e-12)
    start = int(table.offsets[2])
    assert np.array_equal(tok[0], table.tokens[start])
    with pytest.raises(MissingInput):
        pl.TeacherTable(cache, splits["train"][:-1], 100.0)


def test_tau_sweep(run):
    before = run.neighbors.read_bytes()
    cells, summary = pl.sweep(TINY, run, "tau", [1, 100])
    assert run.neighbors.read_bytes() == before
    assert summary[1]["teacher_entropy"] > summary[0]["teacher_entropy"]
    assert all(c["status"] == "ok" for c in cells)
    assert (run.reports / "sweep_tau.png").stat().st_size > 0
    assert "sweep over tau" in (run.reports / "sweep_tau.txt").read_text()


def test_k_sweep_shape_and_header(run, tmp_path):
    _, summary = pl.sweep(TINY, run, "k", [1, 8])
    assert len(summary) == 2
    assert len(pl.read_csv(run.reports / "sweep_k_median.csv")) == 2
    assert "24.79" in (run.reports / "sweep_k.txt").read_text()


def test_sweep_needs_two_values(run):
    with pytest.raises(InvalidArgument):
        pl.sweep(TINY, run, "beta", [0.3])


def test_sweep_records_failures_and_continues(run):
    cells, summary = pl.sweep(TINY, run, "beta", [0.3, float("nan")])
    assert cells[0]["status"] == "ok"
    assert cells[1]["status"].startswith("error")
    assert len(summary) == 2


def test_gradient_report_regimes(run):
    splits = pl.load_splits(run)
    cache = pl.load_cache(run, pl.load_store(run), 8)
    model, _ = s2s.load_checkpoint(run.baseline(1))
    for beta in (0.3, 0.9):
        w = TINY.with_loss(beta=beta).loss
        rows = pl.gradient_report(model, splits["train"][:20], cache, w, per_regime=8)
        assert rows
        for r in rows:
            if r["is_target"] or r["nkd_nontarget_norm"] == 0:
                continue
            expect = beta / (1 - r["p_t_teacher"])
            assert abs(r["nontarget_ratio"] - expect) <= 1e-9 * max(1.0, expect)
            assert (r["nontarget_ratio"] >= 1) == (r["regime"] == "le_beta")


def test_run_gradient_report_writes_files(run):
    rows = pl.run_gradient_report(TINY, run, sentences=10)
    assert len(pl.read_csv(run.reports / "grad_norms.csv")) == len(rows)
    assert (run.reports / "grad_norms.png").exists()


def test_evaluate_writes_summary(run):
    rows = pl.run_evaluate(TINY, run)
    roles = {r["role"] for r in rows}
    assert {"baseline", "student_dnkd"} <= roles
    assert all(0 <= r["bleu"] <= 100 for r in rows)
    assert "median" in (run.reports / "summary.txt").read_text()


def test_random_bleu_is_low(run):
    assert pl.random_bleu(pl.load_splits(run)["dev"], TINY.task.vocab_size_tgt) < 5

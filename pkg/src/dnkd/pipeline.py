"""End-to-end workflow: corpus, baseline, datastore, neighbor cache, students.

Artifacts live under one run directory::

    runs/<name>/config
    runs/<name>/corpus/{train,dev,test}.tsv
    runs/<name>/checkpoints/*.nkcp
    runs/<name>/datastore.nkds
    runs/<name>/neighbors.nknc
    runs/<name>/reports/

The datastore is built from the baseline of the first seed and shared by
all student seeds.
"""

import copy
import csv
from dataclasses import asdict, dataclass, field
import logging
import math
from pathlib import Path
import statistics

import numpy as np
import torch

from . import config as config_mod
from . import corpus as cp
from . import datastore as ds
from . import distill as dl
from . import plotting
from . import seq2seq as s2s
from . import teacher as tc
from .errors import DnkdError, InvalidArgument, MissingInput, TrainingDiverged
from .metrics import bleu

log = logging.getLogger(__name__)

# Shown in sweep summaries next to the desk-scale numbers.
PUBLISHED_K_PEAK = "published en-de BLEU peaks at 24.79 with k=8 (full-scale speech model; not reproducible here)"


class RunPaths:
    def __init__(self, root):
        self.root = Path(root)

    config = property(lambda self: self.root / "config")
    corpus = property(lambda self: self.root / "corpus")
    checkpoints = property(lambda self: self.root / "checkpoints")
    reports = property(lambda self: self.root / "reports")
    datastore = property(lambda self: self.root / "datastore.nkds")
    neighbors = property(lambda self: self.root / "neighbors.nknc")

    def split(self, name):
        return self.corpus / f"{name}.tsv"

    def baseline(self, seed):
        return self.checkpoints / f"baseline_seed{seed}.nkcp"

    def student(self, mode, seed):
        return self.checkpoints / f"student_{mode}_seed{seed}.nkcp"

    def ensure(self):
        for d in (self.root, self.corpus, self.checkpoints, self.reports):
            d.mkdir(parents=True, exist_ok=True)
        return self


def derive_seed(seed, stream):
    return int(np.random.SeedSequence([int(seed), stream]).generate_state(1, np.uint64)[0])


def model_config(cfg, seed, stream):
    return s2s.ModelConfig(
        vocab_size_src=cfg.task.vocab_size_src,
        vocab_size_tgt=cfg.task.vocab_size_tgt,
        seed=derive_seed(seed, stream),
        **asdict(cfg.model),
    )


BASELINE_STREAM, STUDENT_STREAM, SHUFFLE_STREAM = 3, 4, 5


# -- evaluation -----------------------------------------------------------------


@dataclass
class EvalReport:
    bleu: float
    token_accuracy: float
    exact_match: float


def decode_limit(pairs):
    return max(len(t) for _, t in pairs) + 2


@torch.no_grad()
def evaluate_model(model, pairs, batch_size=256):
    hyps, correct, total = [], 0, 0
    limit = decode_limit(pairs)
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        srcs = [s for s, _ in chunk]
        hyps.extend(s2s.greedy_decode(model, srcs, limit))
        src, tgt_in, tgt_out, mask = s2s.make_batch(model, srcs, [t for _, t in chunk])
        _, logits = model(src, tgt_in)
        correct += int((logits.argmax(-1)[mask] == tgt_out[mask]).sum())
        total += int(mask.sum())
    refs = [t[:-1] for _, t in pairs]
    return EvalReport(
        bleu=bleu(hyps, refs),
        token_accuracy=correct / total,
        exact_match=float(np.mean([h == r for h, r in zip(hyps, refs)])),
    )


# -- training -------------------------------------------------------------------


class TeacherTable:
    """Teacher slot arrays for every training position at one temperature."""

    def __init__(self, cache, pairs, tau):
        expect = np.array([(i, j) for i, (_, t) in enumerate(pairs) for j in range(len(t))], dtype=np.int64)
        if len(expect) != len(cache) or not np.array_equal(expect.reshape(-1, 2), cache.origins.astype(np.int64)):
            raise MissingInput("neighbor cache does not cover the training corpus position by position")
        self.tokens, self.probs = tc.teacher_slots(cache.distances, cache.tokens, tau)
        lengths = np.array([len(t) for _, t in pairs])
        self.offsets = np.concatenate([[0], np.cumsum(lengths)])

    def rows(self, sentence_ids):
        idx = np.concatenate([np.arange(self.offsets[i], self.offsets[i + 1]) for i in sentence_ids])
        return self.tokens[idx], self.probs[idx]


@dataclass
class TrainResult:
    model: s2s.Seq2Seq
    step_losses: list = field(default_factory=list)
    dev_bleu: list = field(default_factory=list)
    best_epoch: int = 0


def train_model(model, train_pairs, dev_pairs, mode, weights, tcfg, seed, teacher=None):
    """Adam on the batch-mean loss; keeps the epoch with the best dev BLEU.

    Adam update per parameter with gradient g (lr from config, b1=0.9,
    b2=0.999, eps=1e-8, bias-corrected):
        m = b1 m + (1 - b1) g;  v = b2 v + (1 - b2) g^2
        theta -= lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
    Epoch 0 (no updates) is a candidate, so ``epochs = 0`` returns the
    untrained model.
    """
    if mode != "ce" and teacher is None:
        raise MissingInput(f"{mode} training needs a neighbor cache")
    torch.set_num_threads(tcfg.threads)
    opt = torch.optim.Adam(model.parameters(), lr=tcfg.lr, betas=(0.9, 0.999), eps=1e-8)
    rng = np.random.default_rng([int(seed), SHUFFLE_STREAM])
    result = TrainResult(model)
    best = evaluate_model(model, dev_pairs).bleu
    result.dev_bleu.append(best)
    best_state = copy.deepcopy(model.state_dict())
    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(len(train_pairs))
        for start in range(0, len(order), tcfg.batch_size):
            ids = order[start : start + tcfg.batch_size]
            t_in = teacher.rows(ids) if teacher is not None else None
            loss, _, _ = s2s.loss_and_grads(
                model, [train_pairs[i][0] for i in ids], [train_pairs[i][1] for i in ids], mode, weights, t_in
            )
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            opt.step()
            result.step_losses.append(loss)
        dev = evaluate_model(model, dev_pairs).bleu
        result.dev_bleu.append(dev)
        log.info("%s epoch %d loss %.4f dev BLEU %.2f", mode, epoch, result.step_losses[-1], dev)
        if dev > best:
            best, result.best_epoch = dev, epoch
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    return result


# -- reports ------------------------------------------------------------------------


def write_csv(path, rows, columns=None):
    rows = list(rows)
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(row.get(k)) for k in columns})


def _cell(v):
    return f"{v:.6f}" if isinstance(v, float) else v


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def median(values):
    values = [v for v in values if v is not None and not math.isnan(v)]
    return statistics.median(values) if values else float("nan")


# -- stages ---------------------------------------------------------------------------


def load_splits(paths):
    return {name: cp.read_pairs(paths.split(name)) for name in ("train", "dev", "test")}


def gen_corpus(cfg, paths):
    paths.ensure()
    corpus = cp.make_corpus(cfg.task)
    for name in ("train", "dev", "test"):
        cp.write_pairs(getattr(corpus, name), paths.split(name))
    return corpus


def run_baseline(cfg, paths):
    """CE training (label-smoothed) for every seed; returns seed -> EvalReport."""
    paths.ensure()
    splits = load_splits(paths)
    reports = {}
    rows = []
    for seed in cfg.seeds:
        model = s2s.init(model_config(cfg, seed, BASELINE_STREAM))
        res = train_model(model, splits["train"], splits["dev"], "ce", cfg.loss, cfg.train, seed)
        s2s.save_checkpoint(model, paths.baseline(seed), {"role": "baseline", "seed": seed, "best_epoch": res.best_epoch})
        rep = evaluate_model(model, splits["test"])
        reports[seed] = rep
        rows.append({"seed": seed, "best_epoch": res.best_epoch, "dev_bleu": max(res.dev_bleu), **asdict(rep)})
    write_csv(paths.reports / "baseline.csv", rows)
    return reports


def build_store(checkpoint_path, train_pairs):
    if not train_pairs:
        raise InvalidArgument("cannot build a datastore from an empty corpus")
    model, _ = s2s.load_checkpoint(checkpoint_path)
    keys, values, origins = s2s.extract_keys(model, train_pairs)
    store = ds.build(model.cfg.hidden_dim, model.cfg.vocab_size_tgt)
    store.add_entries(keys, values, origins)
    return store


def run_build_store(cfg, paths):
    splits = load_splits(paths)
    ckpt = paths.baseline(cfg.seeds[0])
    store = build_store(ckpt, splits["train"])
    store.save(paths.datastore)
    with open(paths.reports / "datastore.txt", "w") as fh:
        fh.write(f"entries {len(store)}\n")
        fh.write(f"target_tokens {cp.target_token_count(splits['train'])}\n")
        fh.write(f"dim {store.dim}\nvocab_size {store.vocab_size}\n")
        fh.write(f"source_checkpoint {ckpt.name} crc32 {crc_of(ckpt):08x}\n")
        fh.write(f"datastore_crc32 {store.checksum():08x}\n")
    return store


def crc_of(path):
    from .binfmt import crc32

    return crc32(Path(path).read_bytes())


def build_cache(store, checkpoint_path, train_pairs, k, self_exclude):
    model, _ = s2s.load_checkpoint(checkpoint_path)
    if model.cfg.hidden_dim != store.dim or model.cfg.vocab_size_tgt != store.vocab_size:
        raise InvalidArgument("checkpoint and datastore disagree on dim or vocabulary")
    keys, _, origins = s2s.extract_keys(model, train_pairs)
    return tc.precompute_neighbor_cache(store, keys, origins, k, self_exclude)


def run_build_cache(cfg, paths, k=None):
    splits = load_splits(paths)
    store = load_store(paths)
    cache = build_cache(store, paths.baseline(cfg.seeds[0]), splits["train"], k or cfg.retrieval.k, cfg.retrieval.self_exclude)
    cache.save(paths.neighbors)
    return cache


def load_store(paths):
    if not paths.datastore.exists():
        raise MissingInput(f"missing datastore: {paths.datastore}")
    return ds.Datastore.load(paths.datastore)


def load_cache(paths, store, k):
    if not paths.neighbors.exists():
        raise MissingInput(f"missing neighbor cache: {paths.neighbors}")
    cache = tc.NeighborCache.load(paths.neighbors)
    cache.require_store(store)
    if cache.k < k:
        raise InvalidArgument(f"neighbor cache holds k={cache.k} but k={k} was requested")
    return cache.truncate(k)


def train_student(cfg, splits, cache, mode, seed, paths=None):
    teacher = TeacherTable(cache, splits["train"], cfg.loss.tau) if mode != "ce" else None
    if cfg.student_init == "baseline" and paths is not None:
        model, _ = s2s.load_checkpoint(paths.baseline(seed))
    else:
        model = s2s.init(model_config(cfg, seed, STUDENT_STREAM))
    res = train_model(model, splits["train"], splits["dev"], mode, cfg.loss, cfg.train, seed, teacher)
    return model, res


def run_student(cfg, paths, mode):
    """Train one student per seed; returns seed -> EvalReport."""
    if mode not in dl.MODES:
        raise InvalidArgument(f"unknown mode {mode!r}")
    paths.ensure()
    splits = load_splits(paths)
    cache = None
    store_crc = cache_crc = None
    if mode != "ce":
        if not paths.neighbors.exists():
            raise MissingInput(f"missing neighbor cache: {paths.neighbors}")
        store = load_store(paths)
        cache = load_cache(paths, store, cfg.retrieval.k)
        store_crc, cache_crc = store.checksum(), crc_of(paths.neighbors)
    reports, rows = {}, []
    for seed in cfg.seeds:
        model, res = train_student(cfg, splits, cache, mode, seed, paths)
        meta = {
            "role": f"student_{mode}",
            "seed": seed,
            "best_epoch": res.best_epoch,
            "datastore_crc32": store_crc,
            "neighbors_crc32": cache_crc,
            "loss": asdict(cfg.loss),
            "k": cfg.retrieval.k,
        }
        s2s.save_checkpoint(model, paths.student(mode, seed), meta)
        rep = evaluate_model(model, splits["test"])
        reports[seed] = rep
        rows.append({"seed": seed, "best_epoch": res.best_epoch, "dev_bleu": max(res.dev_bleu), **asdict(rep)})
    rows.append({"seed": "median", "bleu": median([r.bleu for r in reports.values()])})
    write_csv(paths.reports / f"student_{mode}.csv", rows, ["seed", "best_epoch", "dev_bleu", "bleu", "token_accuracy", "exact_match"])
    return reports


def run_evaluate(cfg, paths):
    """Score every checkpoint in the run on the test split."""
    splits = load_splits(paths)
    ckpts = sorted(paths.checkpoints.glob("*.nkcp"))
    if not ckpts:
        raise MissingInput(f"no checkpoints under {paths.checkpoints}")
    rows = []
    for path in ckpts:
        model, meta = s2s.load_checkpoint(path)
        rep = evaluate_model(model, splits["test"])
        role = path.stem.rsplit("_seed", 1)[0]
        rows.append({"checkpoint": path.name, "role": role, "seed": meta.get("seed"), **asdict(rep)})
    write_csv(paths.reports / "eval.csv", rows)
    by_role = {}
    for row in rows:
        by_role.setdefault(row["role"], []).append(row["bleu"])
    lines = ["test BLEU by role (median over seeds; per-seed values in brackets)"]
    for role, vals in by_role.items():
        lines.append(f"{role:16s} median {median(vals):7.2f}  [" + ", ".join(f"{v:.2f}" for v in vals) + "]")
    (paths.reports / "summary.txt").write_text("\n".join(lines) + "\n")
    return rows


def _cell_config(cfg, axis, value):
    if axis == "k":
        if value != int(value) or value < 1:
            raise InvalidArgument(f"k must be a positive integer, got {value}")
        return cfg.with_retrieval(k=int(value))
    if axis == "beta":
        return cfg.with_loss(beta=float(value))
    return cfg.with_loss(tau=float(value))


def mean_teacher_entropy(cache, tau):
    _, probs = tc.teacher_slots(cache.distances, cache.tokens, tau)
    p = np.where(probs > 0, probs, 1.0)
    return float(np.mean(-(probs * np.log(p)).sum(axis=1)))


def sweep(cfg, paths, axis, values, mode="dnkd"):
    """One student run per (value, seed); returns (cell rows, summary rows)."""
    if axis not in ("k", "beta", "tau"):
        raise InvalidArgument(f"unknown sweep axis {axis!r}")
    values = list(values)
    if len(values) < 2:
        raise InvalidArgument("a sweep needs at least two values")
    paths.ensure()
    splits = load_splits(paths)
    store = load_store(paths)
    need_k = int(max(values)) if axis == "k" else cfg.retrieval.k
    try:
        full = load_cache(paths, store, need_k)
    except InvalidArgument:
        log.info("rebuilding neighbor cache with k=%d for the sweep", need_k)
        full = run_build_cache(cfg, paths, k=need_k)
    cells, summary = [], []
    for value in values:
        scores, entropy = [], float("nan")
        try:
            cell_cfg = _cell_config(cfg, axis, value)
            cache = full.truncate(cell_cfg.retrieval.k)
            entropy = mean_teacher_entropy(cache, cell_cfg.loss.tau)
        except DnkdError as exc:
            cells.extend({"axis": axis, "value": value, "seed": s, "status": f"error: {exc}"} for s in cfg.seeds)
            summary.append({"value": value, "median_bleu": float("nan"), "teacher_entropy": entropy, "runs": 0})
            continue
        for seed in cfg.seeds:
            row = {"axis": axis, "value": value, "seed": seed, "teacher_entropy": entropy}
            try:
                model, _ = train_student(cell_cfg, splits, cache, mode, seed)
                row.update(asdict(evaluate_model(model, splits["test"])), status="ok")
                scores.append(row["bleu"])
            except DnkdError as exc:
                row.update(status=f"error: {exc}")
            cells.append(row)
        summary.append({"value": value, "median_bleu": median(scores), "teacher_entropy": entropy, "runs": len(scores)})
    write_csv(paths.reports / f"sweep_{axis}.csv", cells, ["axis", "value", "seed", "bleu", "token_accuracy", "exact_match", "teacher_entropy", "status"])
    write_csv(paths.reports / f"sweep_{axis}_median.csv", summary)
    header = [f"sweep over {axis} ({mode}), median test BLEU over seeds {list(cfg.seeds)}"]
    if axis == "k":
        header.append(f"reference: {PUBLISHED_K_PEAK}")
    body = [f"{s['value']!s:>10}  BLEU {s['median_bleu']:7.2f}  teacher entropy {s['teacher_entropy']:.4f}" for s in summary]
    (paths.reports / f"sweep_{axis}.txt").write_text("\n".join(header + body) + "\n")
    plotting.plot_sweep(summary, axis, paths.reports / f"sweep_{axis}.png")
    return cells, summary


# -- gradient report --------------------------------------------------------------------


@torch.no_grad()
def position_logits(model, pairs):
    model = copy.deepcopy(model).double()
    src, tgt_in, tgt_out, mask = s2s.make_batch(model, [s for s, _ in pairs], [t for _, t in pairs])
    _, logits = model(src, tgt_in)
    return logits[mask].numpy(), tgt_out[mask].numpy()


def gradient_report(model, pairs, cache, weights, per_regime=32, top=8):
    """Top-``top`` per-token distillation gradient norms, coupled vs decoupled.

    ``cache`` must cover ``pairs`` (for instance the first sentences of the
    training corpus with a truncated cache). Positions are taken in corpus
    order, up to ``per_regime`` from each regime.
    """
    z, targets = position_logits(model, pairs)
    if len(cache) < len(targets):
        raise MissingInput("neighbor cache shorter than the requested positions")
    V = z.shape[1]
    rows, taken = [], {"le_beta": 0, "gt_beta": 0}
    for row in range(len(targets)):
        teacher = tc.teacher_distribution(cache.neighbor_set(row), weights.tau, V)
        rep = dl.grad_norm_report(teacher, z[row], int(targets[row]), weights)
        if taken[rep.regime] >= per_regime:
            continue
        taken[rep.regime] += 1
        origin = cache.origins[row]
        for rank, tok in enumerate(rep.top(top)):
            nt = rep.nkd_nontarget[tok]
            rows.append(
                {
                    "regime": rep.regime,
                    "sentence": int(origin[0]),
                    "position": int(origin[1]),
                    "p_t_teacher": rep.p_t_teacher,
                    "rank": rank,
                    "token": int(tok),
                    "is_target": int(tok == rep.target),
                    "nkd_norm": float(rep.nkd[tok]),
                    "dnkd_norm": float(rep.dnkd[tok]),
                    "nkd_nontarget_norm": float(nt),
                    "dnkd_nontarget_norm": float(rep.dnkd_nontarget[tok]),
                    "nontarget_ratio": float(rep.dnkd_nontarget[tok] / nt) if nt > 0 else float("nan"),
                }
            )
        if all(v >= per_regime for v in taken.values()):
            break
    return rows


def run_gradient_report(cfg, paths, checkpoint=None, sentences=64):
    splits = load_splits(paths)
    store = load_store(paths)
    cache = load_cache(paths, store, cfg.retrieval.k)
    ckpt = Path(checkpoint) if checkpoint else paths.baseline(cfg.seeds[0])
    model, _ = s2s.load_checkpoint(ckpt)
    pairs = splits["train"][:sentences]
    rows = gradient_report(model, pairs, cache, cfg.loss)
    write_csv(paths.reports / "grad_norms.csv", rows)
    plotting.plot_grad_norms(rows, cfg.loss.beta, paths.reports / "grad_norms.png")
    return rows


# -- everything ------------------------------------------------------------------------


def run_all(cfg, paths, modes=("nkd", "dnkd")):
    """gen-corpus through evaluate; returns {role: {seed: EvalReport}}."""
    paths.ensure()
    paths.config.write_text(config_mod.dump(cfg))
    gen_corpus(cfg, paths)
    out = {"baseline": run_baseline(cfg, paths)}
    run_build_store(cfg, paths)
    run_build_cache(cfg, paths)
    for mode in modes:
        out[mode] = run_student(cfg, paths, mode)
    run_evaluate(cfg, paths)
    return out


def random_bleu(pairs, vocab_size, seed=0):
    """BLEU of uniformly random content tokens with reference lengths."""
    rng = np.random.default_rng([int(seed), 6])
    refs = [t[:-1] for _, t in pairs]
    hyps = [rng.integers(cp.FIRST_CONTENT, vocab_size, len(r)).tolist() for r in refs]
    return bleu(hyps, refs)

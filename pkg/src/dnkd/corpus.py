"""Synthetic parallel corpus standing in for speech-translation pairs.

Target = substitution cipher of the source. A fraction of source types is
ambiguous: each has two target renderings, picked by the parity of the
preceding source token (the last token wraps around for position 0).
Optionally adjacent target pairs are swapped. Every target ends with EOS.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgument, MissingInput
from .seq2seq import EOS

FIRST_CONTENT = 3


@dataclass
class SyntheticTaskConfig:
    vocab_size_src: int = 33
    vocab_size_tgt: int = 40
    num_train: int = 2000
    num_dev: int = 200
    num_test: int = 200
    min_len: int = 6
    max_len: int = 16
    seed: int = 0
    ambiguity_rate: float = 0.2
    reorder: bool = True


@dataclass
class Cipher:
    primary: dict
    alternate: dict

    def render(self, src, reorder):
        out = []
        n = len(src)
        for i, s in enumerate(src):
            if s in self.alternate and src[i - 1 if i else n - 1] % 2:
                out.append(self.alternate[s])
            else:
                out.append(self.primary[s])
        if reorder:
            for i in range(0, n - 1, 2):
                out[i], out[i + 1] = out[i + 1], out[i]
        return out + [EOS]


@dataclass
class Corpus:
    train: list
    dev: list
    test: list
    cipher: Cipher


def make_cipher(cfg):
    n_src = cfg.vocab_size_src - FIRST_CONTENT
    if n_src < 2:
        raise InvalidArgument("source vocabulary needs at least 2 content tokens")
    if not 0.0 <= cfg.ambiguity_rate <= 1.0:
        raise InvalidArgument("ambiguity_rate must lie in [0, 1]")
    n_amb = int(round(cfg.ambiguity_rate * n_src))
    if n_src + n_amb > cfg.vocab_size_tgt - FIRST_CONTENT:
        raise InvalidArgument(
            f"target vocabulary {cfg.vocab_size_tgt} too small for {n_src} types "
            f"plus {n_amb} alternate renderings"
        )
    rng = np.random.default_rng([cfg.seed, 1])
    tgt_ids = rng.permutation(np.arange(FIRST_CONTENT, cfg.vocab_size_tgt))
    src_ids = list(range(FIRST_CONTENT, cfg.vocab_size_src))
    primary = {s: int(t) for s, t in zip(src_ids, tgt_ids)}
    ambiguous = sorted(int(s) for s in rng.choice(src_ids, size=n_amb, replace=False))
    alternate = {s: int(t) for s, t in zip(ambiguous, tgt_ids[n_src : n_src + n_amb])}
    return Cipher(primary, alternate)


def make_corpus(cfg):
    if not 1 <= cfg.min_len <= cfg.max_len:
        raise InvalidArgument("need 1 <= min_len <= max_len")
    cipher = make_cipher(cfg)
    rng = np.random.default_rng([cfg.seed, 2])
    total = cfg.num_train + cfg.num_dev + cfg.num_test
    seen = set()
    pairs = []
    attempts = 0
    while len(pairs) < total:
        attempts += 1
        if attempts > 50 * total + 1000:
            raise InvalidArgument("cannot draw enough distinct sentences for disjoint splits")
        n = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        src = tuple(int(x) for x in rng.integers(FIRST_CONTENT, cfg.vocab_size_src, n))
        if src in seen:
            continue
        seen.add(src)
        pairs.append((list(src), cipher.render(src, cfg.reorder)))
    a, b = cfg.num_train, cfg.num_train + cfg.num_dev
    return Corpus(pairs[:a], pairs[a:b], pairs[b:], cipher)


def ambiguous_fraction(pairs, cipher):
    toks = [s for src, _ in pairs for s in src]
    return sum(s in cipher.alternate for s in toks) / max(len(toks), 1)


def target_token_count(pairs):
    return sum(len(t) for _, t in pairs)


def write_pairs(pairs, path):
    with open(path, "w") as fh:
        for src, tgt in pairs:
            fh.write(" ".join(map(str, src)) + "\t" + " ".join(map(str, tgt)) + "\n")


def read_pairs(path):
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"missing corpus file: {path}")
    pairs = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        src, tgt = line.split("\t")
        pairs.append(([int(x) for x in src.split()], [int(x) for x in tgt.split()]))
    return pairs

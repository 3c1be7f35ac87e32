"""Corpus BLEU over token-id sequences."""

from collections import Counter
import math

from .errors import InvalidArgument


def _ngrams(seq, n):
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def bleu(hypotheses, references, max_order=4):
    """Corpus-level BLEU-4 in [0, 100] with brevity penalty.

    An order with zero clipped matches uses (0 + 1) / (total + 1) in place
    of its precision; orders with matches are unsmoothed.
    """
    if len(hypotheses) != len(references):
        raise InvalidArgument(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not references or any(len(r) == 0 for r in references):
        raise InvalidArgument("references must be non-empty")
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    for m, t in zip(matches, totals):
        log_p += math.log(m / t) if m > 0 else math.log(1.0 / (t + 1))
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p / max_order)

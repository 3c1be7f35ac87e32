"""Micro pre-LN Transformer encoder-decoder.

The decoder's final LayerNorm output is the context vector that feeds the
output projection; it doubles as the datastore key. Gradients over the
logits come from ``distill.batch_losses`` and are pushed through the
network with autograd.

Initialization (all draws from one ``torch.Generator`` seeded with
``config.seed``, in parameter-registration order): embeddings
U(-sqrt(3), sqrt(3)); linear weights U(-a, a) with
a = sqrt(6 / (fan_in + fan_out)); biases 0; LayerNorm gain 1, bias 0.
"""

from dataclasses import asdict, dataclass
import json
import math
import struct

import numpy as np
import torch
from torch import nn

from . import binfmt
from .distill import batch_losses
from .errors import InvalidArgument, MissingInput, TruncatedFile, VocabRangeError

PAD, BOS, EOS = 0, 1, 2

MAGIC = b"NKCP"
VERSION = 1


@dataclass
class ModelConfig:
    vocab_size_src: int
    vocab_size_tgt: int
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 2
    ffn_dim: int = 128
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size_src", "vocab_size_tgt", "hidden_dim", "num_layers", "num_heads", "ffn_dim"):
            if int(getattr(self, name)) < 1:
                raise InvalidArgument(f"{name} must be positive")
        if self.vocab_size_tgt < 3 or self.vocab_size_src < 3:
            raise InvalidArgument("vocabularies must hold the PAD/BOS/EOS specials")
        if self.hidden_dim % self.num_heads:
            raise InvalidArgument("hidden_dim must be divisible by num_heads")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidArgument("seed must be an unsigned 64-bit integer")


def parameter_count(cfg):
    """Closed-form parameter count of ``Seq2Seq(cfg)``."""
    d, f, L = cfg.hidden_dim, cfg.ffn_dim, cfg.num_layers
    attn = 4 * (d * d + d)
    ffn = d * f + f + f * d + d
    ln = 2 * d
    enc = attn + ffn + 2 * ln
    dec = 2 * attn + ffn + 3 * ln
    return (
        cfg.vocab_size_src * d
        + cfg.vocab_size_tgt * d
        + L * (enc + dec)
        + 2 * ln
        + d * cfg.vocab_size_tgt
        + cfg.vocab_size_tgt
    )


def sinusoid(length, dim):
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class Attention(nn.Module):
    def __init__(self, d, heads):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)

    def forward(self, x, mem, mask):
        B, T, d = x.shape
        S = mem.shape[1]
        h = self.heads
        q = self.q(x).view(B, T, h, d // h).transpose(1, 2)
        k = self.k(mem).view(B, S, h, d // h).transpose(1, 2)
        v = self.v(mem).view(B, S, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        scores = scores.masked_fill(~mask[:, None], float("-inf"))
        att = torch.softmax(scores, dim=-1)
        return self.o((att @ v).transpose(1, 2).reshape(B, T, d))


class FeedForward(nn.Module):
    def __init__(self, d, f):
        super().__init__()
        self.up = nn.Linear(d, f)
        self.down = nn.Linear(f, d)

    def forward(self, x):
        return self.down(torch.relu(self.up(x)))


class EncoderLayer(nn.Module):
    def __init__(self, d, heads, f):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = Attention(d, heads)
        self.ln2 = nn.LayerNorm(d)
        self.ffn = FeedForward(d, f)

    def forward(self, x, mask):
        h = self.ln1(x)
        x = x + self.attn(h, h, mask)
        return x + self.ffn(self.ln2(x))


class DecoderLayer(nn.Module):
    def __init__(self, d, heads, f):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.self_attn = Attention(d, heads)
        self.ln2 = nn.LayerNorm(d)
        self.cross_attn = Attention(d, heads)
        self.ln3 = nn.LayerNorm(d)
        self.ffn = FeedForward(d, f)

    def forward(self, y, mem, self_mask, cross_mask):
        h = self.ln1(y)
        y = y + self.self_attn(h, h, self_mask)
        y = y + self.cross_attn(self.ln2(y), mem, cross_mask)
        return y + self.ffn(self.ln3(y))


class Seq2Seq(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_dim
        self.src_embed = nn.Embedding(cfg.vocab_size_src, d)
        self.tgt_embed = nn.Embedding(cfg.vocab_size_tgt, d)
        self.encoder = nn.ModuleList(EncoderLayer(d, cfg.num_heads, cfg.ffn_dim) for _ in range(cfg.num_layers))
        self.enc_norm = nn.LayerNorm(d)
        self.decoder = nn.ModuleList(DecoderLayer(d, cfg.num_heads, cfg.ffn_dim) for _ in range(cfg.num_layers))
        self.dec_norm = nn.LayerNorm(d)
        self.output = nn.Linear(d, cfg.vocab_size_tgt)
        self._pe_cache = {}
        self.reset_parameters()

    @torch.no_grad()
    def reset_parameters(self):
        gen = torch.Generator().manual_seed(int(self.cfg.seed) & 0xFFFF_FFFF_FFFF_FFFF)
        for module in self.modules():
            if isinstance(module, nn.Embedding):
                b = math.sqrt(3.0)
                module.weight.copy_(torch.rand(module.weight.shape, generator=gen) * 2 * b - b)
            elif isinstance(module, nn.Linear):
                fan_out, fan_in = module.weight.shape
                a = math.sqrt(6.0 / (fan_in + fan_out))
                module.weight.copy_(torch.rand(module.weight.shape, generator=gen) * 2 * a - a)
                module.bias.zero_()
            elif isinstance(module, nn.LayerNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()

    def _pe(self, length, like):
        key = (length, like.dtype)
        if key not in self._pe_cache:
            self._pe_cache[key] = torch.tensor(sinusoid(length, self.cfg.hidden_dim), dtype=like.dtype)
        return self._pe_cache[key]

    def encode(self, src):
        mask = src != PAD
        x = self.src_embed(src)
        x = x + self._pe(src.shape[1], x)
        attn_mask = mask[:, None, :].expand(-1, src.shape[1], -1)
        for layer in self.encoder:
            x = layer(x, attn_mask)
        return self.enc_norm(x), mask

    def decode(self, tgt_in, mem, src_mask):
        T = tgt_in.shape[1]
        y = self.tgt_embed(tgt_in)
        y = y + self._pe(T, y)
        causal = torch.tril(torch.ones(T, T, dtype=torch.bool))
        self_mask = causal[None] & (tgt_in != PAD)[:, None, :]
        cross_mask = src_mask[:, None, :].expand(-1, T, -1)
        for layer in self.decoder:
            y = layer(y, mem, self_mask, cross_mask)
        context = self.dec_norm(y)
        return context, self.output(context)

    def forward(self, src, tgt_in):
        mem, src_mask = self.encode(src)
        return self.decode(tgt_in, mem, src_mask)


def init(cfg):
    return Seq2Seq(cfg)


# -- batching -----------------------------------------------------------------


def pad(seqs, value=PAD):
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), value, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return torch.from_numpy(out)


def make_batch(model, srcs, tgts):
    """Teacher-forced tensors; each target sequence already ends with EOS."""
    cfg = model.cfg
    for s in srcs:
        if len(s) == 0:
            raise InvalidArgument("empty source sequence")
        if min(s) < 0 or max(s) >= cfg.vocab_size_src:
            raise VocabRangeError("source token outside vocabulary")
    for t in tgts:
        if len(t) == 0:
            raise InvalidArgument("empty target sequence")
        if min(t) < 0 or max(t) >= cfg.vocab_size_tgt:
            raise VocabRangeError("target token outside vocabulary")
    src = pad(srcs)
    tgt_in = pad([[BOS] + list(t[:-1]) for t in tgts])
    tgt_out = pad(tgts)
    mask = torch.zeros(tgt_out.shape, dtype=torch.bool)
    for i, t in enumerate(tgts):
        mask[i, : len(t)] = True
    return src, tgt_in, tgt_out, mask


@dataclass
class ForwardTrace:
    context_vectors: np.ndarray
    logits: np.ndarray


@torch.no_grad()
def forward(model, src_tokens, tgt_prefix_tokens):
    """Trace for one sentence; the prefix must start with BOS."""
    if len(src_tokens) == 0:
        raise InvalidArgument("empty source sequence")
    if len(tgt_prefix_tokens) == 0 or tgt_prefix_tokens[0] != BOS:
        raise InvalidArgument("target prefix must begin with BOS")
    cfg = model.cfg
    if min(src_tokens) < 0 or max(src_tokens) >= cfg.vocab_size_src:
        raise VocabRangeError("source token outside vocabulary")
    if min(tgt_prefix_tokens) < 0 or max(tgt_prefix_tokens) >= cfg.vocab_size_tgt:
        raise VocabRangeError("target token outside vocabulary")
    ctx, logits = model(torch.tensor([list(src_tokens)]), torch.tensor([list(tgt_prefix_tokens)]))
    return ForwardTrace(ctx[0].numpy().copy(), logits[0].numpy().copy())


def loss_and_grads(model, srcs, tgts, mode, w, teacher=None):
    """Batch loss and parameter gradients.

    The batch loss is the mean over sentences of each sentence's mean
    position loss. ``teacher`` is ``(tokens, probs)`` slot arrays with one
    row per target position, sentences in batch order. Gradients are left
    in ``p.grad``; the returned dict holds clones.
    """
    if mode != "ce" and teacher is None:
        raise MissingInput(f"{mode} mode needs teacher inputs")
    src, tgt_in, tgt_out, mask = make_batch(model, srcs, tgts)
    model.zero_grad(set_to_none=True)
    _, logits = model(src, tgt_in)
    flat = logits[mask]
    targets = tgt_out[mask].numpy()
    t_tok, t_prob = teacher if teacher is not None else (None, None)
    if t_tok is not None and len(t_tok) != len(targets):
        raise InvalidArgument("teacher rows do not match batch positions")
    total, grad, parts = batch_losses(flat.detach().double().numpy(), targets, t_tok, t_prob, w, mode)
    lengths = np.array([len(t) for t in tgts], dtype=np.float64)
    weight = np.repeat(1.0 / (lengths * len(tgts)), lengths.astype(np.int64))
    loss = float(np.sum(weight * total))
    flat.backward(torch.from_numpy(grad * weight[:, None]).to(flat.dtype))
    grads = {name: p.grad.detach().clone() for name, p in model.named_parameters()}
    return loss, grads, parts


@torch.no_grad()
def greedy_decode(model, srcs, max_len):
    """Argmax decoding for a batch of sources; EOS is stripped."""
    single = len(srcs) > 0 and np.isscalar(srcs[0])
    if single:
        srcs = [srcs]
    src = pad([list(s) for s in srcs])
    mem, src_mask = model.encode(src)
    B = len(srcs)
    ys = torch.full((B, 1), BOS, dtype=torch.long)
    done = torch.zeros(B, dtype=torch.bool)
    for _ in range(max_len):
        _, logits = model.decode(ys, mem, src_mask)
        nxt = logits[:, -1].argmax(dim=-1)
        nxt = torch.where(done, torch.full_like(nxt, PAD), nxt)
        ys = torch.cat([ys, nxt[:, None]], dim=1)
        done |= nxt == EOS
        if bool(done.all()):
            break
    out = []
    for row in ys[:, 1:].tolist():
        seq = []
        for tok in row:
            if tok in (EOS, PAD):
                break
            seq.append(tok)
        out.append(seq)
    return out[0] if single else out


@torch.no_grad()
def extract_keys(model, corpus, batch_size=128):
    """Teacher-forced context vectors for every target position.

    ``corpus`` is a sequence of (src, tgt) pairs. Returns float32 keys,
    target tokens and (sentence, position) origins, in corpus order.
    """
    keys, values, origins = [], [], []
    for start in range(0, len(corpus), batch_size):
        chunk = corpus[start : start + batch_size]
        src, tgt_in, tgt_out, mask = make_batch(model, [s for s, _ in chunk], [t for _, t in chunk])
        ctx, _ = model(src, tgt_in)
        keys.append(ctx[mask].float().numpy())
        values.append(tgt_out[mask].numpy())
        for i, (_, t) in enumerate(chunk):
            origins.extend((start + i, j) for j in range(len(t)))
    return (
        np.concatenate(keys).astype(np.float32),
        np.concatenate(values),
        np.array(origins, dtype=np.int64).reshape(-1, 2),
    )


# -- checkpoints -------------------------------------------------------------------


def checkpoint_bytes(model, meta=None):
    block = json.dumps({"model": asdict(model.cfg), "meta": meta or {}}, sort_keys=True).encode()
    parts = [struct.pack("<4sII", MAGIC, VERSION, len(block)), block]
    named = list(model.state_dict().items())
    parts.append(struct.pack("<I", len(named)))
    for name, tensor in named:
        raw = name.encode()
        arr = tensor.detach().float().numpy().astype("<f4")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return binfmt.seal(b"".join(parts))


def save_checkpoint(model, path, meta=None):
    binfmt.write_atomic(path, checkpoint_bytes(model, meta))


def checkpoint_from_bytes(data):
    """Returns ``(model, meta)``; the model is float32."""
    binfmt.check_prefix(data, MAGIC, VERSION, 12)
    try:
        cfg, meta, state, end = _parse_checkpoint(data)
    except (struct.error, ValueError, KeyError, TypeError):
        raise TruncatedFile("checkpoint ends before its declared contents") from None
    binfmt.check_body(data, end)
    model = Seq2Seq(cfg)
    model.load_state_dict(state)
    return model, meta


def _parse_checkpoint(data):
    (block_len,) = struct.unpack_from("<I", data, 8)
    off = 12
    if off + block_len > len(data):
        raise ValueError("config block overruns file")
    block = json.loads(bytes(data[off : off + block_len]))
    off += block_len
    cfg = ModelConfig(**block["model"])
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = bytes(data[off : off + nlen]).decode()
        off += nlen
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        state[name] = torch.from_numpy(arr.copy())
    return cfg, block["meta"], state, off


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        raise MissingInput(f"missing checkpoint: {path}") from None
    return checkpoint_from_bytes(data)

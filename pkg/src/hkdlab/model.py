"""A small recurrent encoder-decoder with dot-product attention, written against
numpy with hand-derived gradients.

All parameters live in one flat float64 vector; named slices are reshaped views
into it, so optimizers and checkpoints only ever deal with a single array.

Forward pass (teacher forced)::

    h_t   = tanh(E_src[x_t] Wx + h_{t-1} Wh + b)              encoder
    s_0   = h_S ;  s_t = tanh(E_tgt[y_{t-1}] Ux + s_{t-1} Uh + c)
    a_t   = softmax_i(s_t . h_i)  ;  ctx_t = sum_i a_ti h_i
    o_t   = tanh([s_t, ctx_t] Wc + bc)
    logit = o_t Wo + bo
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import BOS, EOS, PAD, Pair
from .errors import DivergenceError, SpecError

NEG_INF = -1e30


@dataclass(frozen=True)
class ModelDims:
    vocab: int
    emb: int = 32
    hidden: int = 64

    def slices(self) -> list[tuple[str, tuple[int, ...]]]:
        V, E, H = self.vocab, self.emb, self.hidden
        return [
            ("src_emb", (V, E)),
            ("tgt_emb", (V, E)),
            ("enc_Wx", (E, H)),
            ("enc_Wh", (H, H)),
            ("enc_b", (H,)),
            ("dec_Wx", (E, H)),
            ("dec_Wh", (H, H)),
            ("dec_b", (H,)),
            ("comb_W", (2 * H, H)),
            ("comb_b", (H,)),
            ("out_W", (H, V)),
            ("out_b", (V,)),
        ]

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.slices())


def _views(flat: np.ndarray, dims: ModelDims) -> dict[str, np.ndarray]:
    out, off = {}, 0
    for name, shape in dims.slices():
        n = int(np.prod(shape))
        out[name] = flat[off : off + n].reshape(shape)
        off += n
    return out


def slice_of(dims: ModelDims, index: int) -> str:
    off = 0
    for name, shape in dims.slices():
        off += int(np.prod(shape))
        if index < off:
            return name
    raise IndexError(index)


class SequenceModel:
    def __init__(self, dims: ModelDims, theta: np.ndarray | None = None):
        self.dims = dims
        if theta is None:
            theta = np.zeros(dims.n_params)
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (dims.n_params,):
            raise SpecError("theta", f"expected {dims.n_params} parameters, got {theta.shape}")
        self.theta = theta
        self.p = _views(self.theta, dims)

    @classmethod
    def init(cls, dims: ModelDims, seed: int, scale: float = 0.15) -> "SequenceModel":
        rng = np.random.default_rng(seed)
        return cls(dims, rng.uniform(-scale, scale, size=dims.n_params))

    def copy(self) -> "SequenceModel":
        return SequenceModel(self.dims, self.theta.copy())

    def zeros_like_grad(self) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        g = np.zeros_like(self.theta)
        return g, _views(g, self.dims)


@dataclass
class Batch:
    """Padded, teacher-forced view of a list of pairs.

    ``tgt_in`` is ``<s> y_1 .. y_n`` and ``tgt_out`` is ``y_1 .. y_n </s>``.
    """

    src: np.ndarray
    src_mask: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    tgt_mask: np.ndarray
    lang: str | None = None

    @property
    def size(self) -> int:
        return self.src.shape[0]

    @property
    def n_tokens(self) -> int:
        return int(self.tgt_mask.sum())

    @classmethod
    def from_sequences(cls, sources: Sequence[Sequence[int]], gold: Sequence[Sequence[int]], lang=None) -> "Batch":
        """Build a batch whose decoder outputs are exactly ``gold`` (no </s> appended)."""
        if len(sources) == 0 or len(sources) != len(gold):
            raise SpecError("batch", "need a nonempty, equal number of sources and targets")
        B = len(sources)
        S = max(len(s) for s in sources)
        T = max(len(g) for g in gold)
        if min(len(s) for s in sources) < 1 or min(len(g) for g in gold) < 1:
            raise SpecError("batch", "empty source or target sequence")
        src = np.full((B, S), PAD, dtype=np.int64)
        smask = np.zeros((B, S))
        tin = np.full((B, T), PAD, dtype=np.int64)
        tout = np.full((B, T), PAD, dtype=np.int64)
        tmask = np.zeros((B, T))
        for b, (s, g) in enumerate(zip(sources, gold)):
            src[b, : len(s)] = s
            smask[b, : len(s)] = 1.0
            tout[b, : len(g)] = g
            tin[b, 0] = BOS
            tin[b, 1 : len(g)] = g[:-1]
            tmask[b, : len(g)] = 1.0
        return cls(src, smask, tin, tout, tmask, lang)

    @classmethod
    def from_pairs(cls, pairs: Sequence[Pair], tag: int | None = None, lang=None) -> "Batch":
        prefix = () if tag is None else (tag,)
        return cls.from_sequences(
            [prefix + tuple(x) for x, _ in pairs], [tuple(y) + (EOS,) for _, y in pairs], lang
        )


@dataclass
class StepDistributions:
    """Per-step output distributions of one batch.

    ``log_probs`` is ``[sentence, step, vocab]``; rows where ``mask`` is 0 lie
    past a sentence's end and are ignored by every loss.
    """

    log_probs: np.ndarray
    gold: np.ndarray
    mask: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    @property
    def n_tokens(self) -> int:
        return int(self.mask.sum())

    @classmethod
    def from_probs(cls, probs: np.ndarray, gold=None, mask=None) -> "StepDistributions":
        probs = np.asarray(probs, dtype=np.float64)
        if mask is None:
            mask = np.ones(probs.shape[:2])
        if gold is None:
            gold = np.zeros(probs.shape[:2], dtype=np.int64)
        with np.errstate(divide="ignore"):
            lp = np.log(probs)
        return cls(lp, np.asarray(gold), np.asarray(mask, dtype=np.float64))


@dataclass
class _Cache:
    batch: Batch
    H: np.ndarray
    hn: list
    h_prev: list
    S: np.ndarray
    s_prev: list
    att: np.ndarray
    ctx: np.ndarray
    cat: np.ndarray
    o: np.ndarray
    logits: np.ndarray
    log_probs: np.ndarray = field(default=None)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _flat(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def _scatter_rows(ids: np.ndarray, rows: np.ndarray, n: int) -> np.ndarray:
    """Sum ``rows`` into an ``[n, d]`` table at positions ``ids`` (one-hot matmul)."""
    onehot = np.zeros((ids.size, n))
    onehot[np.arange(ids.size), ids.ravel()] = 1.0
    return onehot.T @ rows


def _check_ids(model: SequenceModel, batch: Batch) -> None:
    V = model.dims.vocab
    for name in ("src", "tgt_in", "tgt_out"):
        a = getattr(batch, name)
        if a.size and (a.min() < 0 or a.max() >= V):
            raise SpecError(f"batch.{name}", f"token id out of range [0, {V})")


def _encode(p, batch: Batch):
    B, S = batch.src.shape
    Hd = p["enc_Wh"].shape[0]
    h = np.zeros((B, Hd))
    H = np.empty((B, S, Hd))
    hn_list, hprev_list = [], []
    xW = p["src_emb"][batch.src] @ p["enc_Wx"]
    for t in range(S):
        m = batch.src_mask[:, t : t + 1]
        hn = np.tanh(xW[:, t] + h @ p["enc_Wh"] + p["enc_b"])
        hprev_list.append(h)
        hn_list.append(hn)
        h = m * hn + (1.0 - m) * h
        H[:, t] = h
    return H, h, hn_list, hprev_list


def _attend(p, s: np.ndarray, H: np.ndarray, src_mask: np.ndarray):
    """``s`` is [B, T, H]; returns attention [B, T, S], ctx, cat, o, logits."""
    scores = s @ H.transpose(0, 2, 1)
    scores = np.where(src_mask[:, None, :] > 0, scores, NEG_INF)
    scores = scores - scores.max(axis=-1, keepdims=True)
    att = np.exp(scores)
    att /= att.sum(axis=-1, keepdims=True)
    ctx = att @ H
    cat = np.concatenate([s, ctx], axis=-1)
    o = np.tanh(cat @ p["comb_W"] + p["comb_b"])
    logits = o @ p["out_W"] + p["out_b"]
    return att, ctx, cat, o, logits


def _forward_cache(model: SequenceModel, batch: Batch) -> _Cache:
    _check_ids(model, batch)
    p = model.p
    H, h_last, hn_list, hprev_list = _encode(p, batch)
    B, T = batch.tgt_in.shape
    Hd = model.dims.hidden
    s = h_last
    S = np.empty((B, T, Hd))
    s_prev = []
    yW = p["tgt_emb"][batch.tgt_in] @ p["dec_Wx"]
    for t in range(T):
        s_prev.append(s)
        s = np.tanh(yW[:, t] + s @ p["dec_Wh"] + p["dec_b"])
        S[:, t] = s
    att, ctx, cat, o, logits = _attend(p, S, H, batch.src_mask)
    cache = _Cache(batch, H, hn_list, hprev_list, S, s_prev, att, ctx, cat, o, logits)
    cache.log_probs = _log_softmax(logits)
    return cache


def forward(model: SequenceModel, batch: Batch) -> StepDistributions:
    c = _forward_cache(model, batch)
    return StepDistributions(c.log_probs, batch.tgt_out, batch.tgt_mask)


def _backward(model: SequenceModel, c: _Cache, dlogits: np.ndarray) -> np.ndarray:
    """Gradient of the flat parameter vector given d(loss)/d(logits)."""
    p = model.p
    batch = c.batch
    grad, g = model.zeros_like_grad()
    Hd = model.dims.hidden

    g["out_W"] += _flat(c.o).T @ _flat(dlogits)
    g["out_b"] += dlogits.sum(axis=(0, 1))
    do = dlogits @ p["out_W"].T
    dpre = do * (1.0 - c.o**2)
    g["comb_W"] += _flat(c.cat).T @ _flat(dpre)
    g["comb_b"] += dpre.sum(axis=(0, 1))
    dcat = dpre @ p["comb_W"].T
    dS = dcat[..., :Hd].copy()
    dctx = dcat[..., Hd:]

    datt = dctx @ c.H.transpose(0, 2, 1)
    dH = c.att.transpose(0, 2, 1) @ dctx
    dscore = c.att * (datt - (c.att * datt).sum(axis=-1, keepdims=True))
    dS += dscore @ c.H
    dH += dscore.transpose(0, 2, 1) @ c.S

    B, T = batch.tgt_in.shape
    dz_all = np.empty((B, T, Hd))
    ds_next = np.zeros((B, Hd))
    WhT = p["dec_Wh"].T
    for t in range(T - 1, -1, -1):
        ds = dS[:, t] + ds_next
        dz = ds * (1.0 - c.S[:, t] ** 2)
        dz_all[:, t] = dz
        ds_next = dz @ WhT
    s_prev = np.stack(c.s_prev, axis=1)
    g["dec_Wh"] += _flat(s_prev).T @ _flat(dz_all)
    ey = p["tgt_emb"][batch.tgt_in]
    g["dec_Wx"] += _flat(ey).T @ _flat(dz_all)
    g["dec_b"] += dz_all.sum(axis=(0, 1))
    g["tgt_emb"] += _scatter_rows(batch.tgt_in, _flat(dz_all) @ p["dec_Wx"].T, model.dims.vocab)

    S = batch.src.shape[1]
    da_all = np.empty((B, S, Hd))
    dh_next = ds_next
    WhT = p["enc_Wh"].T
    for t in range(S - 1, -1, -1):
        m = batch.src_mask[:, t : t + 1]
        dh = dH[:, t] + dh_next
        hn = c.hn[t]
        da = m * dh * (1.0 - hn**2)
        da_all[:, t] = da
        dh_next = (1.0 - m) * dh + da @ WhT
    h_prev = np.stack(c.h_prev, axis=1)
    g["enc_Wh"] += _flat(h_prev).T @ _flat(da_all)
    ex = p["src_emb"][batch.src]
    g["enc_Wx"] += _flat(ex).T @ _flat(da_all)
    g["enc_b"] += da_all.sum(axis=(0, 1))
    g["src_emb"] += _scatter_rows(batch.src, _flat(da_all) @ p["enc_Wx"].T, model.dims.vocab)
    return grad


def forward_backward(model: SequenceModel, batch: Batch, dlogits_fn):
    """Run one forward pass, let ``dlogits_fn(dists)`` return ``(value, dlogits, extra)``,
    and backpropagate it.  Returns ``(value, grad, dists, extra)``."""
    c = _forward_cache(model, batch)
    dists = StepDistributions(c.log_probs, batch.tgt_out, batch.tgt_mask)
    value, dlogits, extra = dlogits_fn(dists)
    return value, _backward(model, c, dlogits), dists, extra


def nll_from_dists(d: StepDistributions) -> float:
    picked = np.take_along_axis(d.log_probs, d.gold[..., None], axis=-1)[..., 0]
    return float(-(picked * d.mask).sum())


def nll_dlogits(d: StepDistributions) -> np.ndarray:
    dl = np.exp(d.log_probs)
    B, T = d.gold.shape
    dl[np.arange(B)[:, None], np.arange(T)[None, :], d.gold] -= 1.0
    return dl * d.mask[..., None]


def nll_loss_and_grad(model: SequenceModel, batch: Batch) -> tuple[float, np.ndarray]:
    """Summed token negative log-likelihood and its gradient."""
    value, grad, _, _ = forward_backward(model, batch, lambda d: (nll_from_dists(d), nll_dlogits(d), None))
    return value, grad


def perplexity_from_dists(d: StepDistributions) -> float:
    return float(np.exp(nll_from_dists(d) / d.n_tokens))


def perplexity(model: SequenceModel, batch: Batch) -> float:
    return perplexity_from_dists(forward(model, batch))


def token_accuracy(model: SequenceModel, batch: Batch) -> float:
    d = forward(model, batch)
    hit = (d.log_probs.argmax(axis=-1) == d.gold) * d.mask
    return float(hit.sum() / d.mask.sum())


def greedy_decode_batch(model: SequenceModel, sources: Sequence[Sequence[int]], max_len: int) -> list[list[int]]:
    """Argmax decoding; ties go to the lowest id; stops at </s> or ``max_len`` tokens."""
    if max_len < 1:
        raise SpecError("max_len", "must be >= 1")
    if len(sources) == 0:
        return []
    p = model.p
    dummy = Batch.from_sequences(sources, [(EOS,)] * len(sources))
    _check_ids(model, dummy)
    H, s, _, _ = _encode(p, dummy)
    B = len(sources)
    prev = np.full(B, BOS, dtype=np.int64)
    out: list[list[int]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    for _ in range(max_len):
        s = np.tanh(p["tgt_emb"][prev] @ p["dec_Wx"] + s @ p["dec_Wh"] + p["dec_b"])
        _, _, _, _, logits = _attend(p, s[:, None, :], H, dummy.src_mask)
        tok = logits[:, 0].argmax(axis=-1)
        for b in np.flatnonzero(~done):
            if tok[b] == EOS:
                done[b] = True
            else:
                out[b].append(int(tok[b]))
        if done.all():
            break
        prev = tok
    return out


def greedy_decode(model: SequenceModel, source: Sequence[int], max_len: int) -> list[int]:
    return greedy_decode_batch(model, [source], max_len)[0]


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model: SequenceModel, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> "OptimizerState":
        n = model.theta.size
        return cls(np.zeros(n), np.zeros(n), 0, lr, beta1, beta2, eps)

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.m.copy(), self.v.copy(), self.step, self.lr, self.beta1, self.beta2, self.eps)


def check_finite(dims: ModelDims, grad: np.ndarray, what: str = "gradient") -> None:
    bad = ~np.isfinite(grad)
    if bad.any():
        names = sorted({slice_of(dims, int(i)) for i in np.flatnonzero(bad)[:1000]})
        raise DivergenceError(f"non-finite {what} in parameter slices: {', '.join(names)}")


def apply_update(model: SequenceModel, grad: np.ndarray, opt: OptimizerState) -> tuple[SequenceModel, OptimizerState]:
    """One Adam step with bias correction.  Returns new objects; inputs are untouched."""
    if grad.shape != model.theta.shape:
        raise SpecError("grad", f"shape {grad.shape} does not match parameters {model.theta.shape}")
    check_finite(model.dims, grad)
    t = opt.step + 1
    m = opt.beta1 * opt.m + (1.0 - opt.beta1) * grad
    v = opt.beta2 * opt.v + (1.0 - opt.beta2) * grad * grad
    mhat = m / (1.0 - opt.beta1**t)
    vhat = v / (1.0 - opt.beta2**t)
    theta = model.theta - opt.lr * mhat / (np.sqrt(vhat) + opt.eps)
    return SequenceModel(model.dims, theta), OptimizerState(m, v, t, opt.lr, opt.beta1, opt.beta2, opt.eps)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"HKDCKPT1"


def save_checkpoint(path, model: SequenceModel, opt: OptimizerState | None = None, extra: dict | None = None) -> None:
    """Write a self-describing binary checkpoint.

    Layout: magic, little-endian u64 header length, JSON header, then the raw
    float64 arrays (theta, and Adam moments when present).  The encoding is
    byte-stable, so identical states always produce identical files.
    """
    header = {
        "dims": {"vocab": model.dims.vocab, "emb": model.dims.emb, "hidden": model.dims.hidden},
        "slices": [[n, list(s)] for n, s in model.dims.slices()],
        "optimizer": None
        if opt is None
        else {"step": opt.step, "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps},
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    arrays = [model.theta] + ([] if opt is None else [opt.m, opt.v])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[SequenceModel, OptimizerState | None, dict]:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise SpecError("checkpoint", f"{path} is not an hkdlab checkpoint")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + n])
    dims = ModelDims(**header["dims"])
    P = dims.n_params
    body = np.frombuffer(data[16 + n :], dtype="<f8").astype(np.float64)
    model = SequenceModel(dims, body[:P].copy())
    opt = None
    if header["optimizer"] is not None:
        o = header["optimizer"]
        opt = OptimizerState(body[P : 2 * P].copy(), body[2 * P : 3 * P].copy(), o["step"], o["lr"], o["beta1"], o["beta2"], o["eps"])
    return model, opt, header["extra"]

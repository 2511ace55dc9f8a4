"""Two-pass streaming recognizer.

A shared stack of unidirectional LSTM layers with interleaved temporal
maxpools feeds two heads: a monotonic-chunkwise-attention decoder that can
run incrementally (first pass, streaming), and a single backward LSTM
extension whose output drives a full-attention decoder (second pass).
Each encoder also carries a CTC projection used only as a training loss.

Boundary convention for hard monotonic attention: boundaries live in
[0, T'], where 0 means "nothing consumed yet" and frame j covers the
encoder output at 0-based index j-1.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from asrkit import autodiff as ad
from asrkit.autodiff import Tensor
from asrkit.errors import DataError
from asrkit.frontend import FeatureSequence
from asrkit.params import ParamStore, init_uniform

INIT_SCALE = 0.05


@dataclass
class ModelConfig:
    vocab_size: int
    feat_dim: int = 40
    num_uni_layers: int = 6
    uni_cells: int = 64
    bi_cells: int = 64
    dec_cells: int = 64
    pool_factors: tuple[int, ...] = (2, 2, 1, 1, 1, 1)
    mocha_chunk: int = 4
    dropout: float = 0.3
    label_smoothing: float = 0.1
    mocha_noise_std: float = 1.0

    def __post_init__(self):
        self.pool_factors = tuple(int(f) for f in self.pool_factors)
        if len(self.pool_factors) != self.num_uni_layers:
            raise ValueError(
                f"need one pool factor per encoder layer "
                f"({len(self.pool_factors)} != {self.num_uni_layers})"
            )
        if any(f < 1 for f in self.pool_factors):
            raise ValueError("pool factors must be >= 1")
        if self.mocha_chunk < 1:
            raise ValueError("mocha_chunk must be >= 1")
        if self.vocab_size < 5:
            raise ValueError("vocab_size must cover the four specials plus content")

    @property
    def total_reduction(self) -> int:
        out = 1
        for f in self.pool_factors:
            out *= f
        return out

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["pool_factors"] = list(self.pool_factors)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["pool_factors"] = tuple(d["pool_factors"])
        return cls(**d)

    @classmethod
    def paper_scale(cls, vocab_size: int = 10000) -> "ModelConfig":
        """Full-size layer widths (not runnable at desk scale)."""
        return cls(vocab_size=vocab_size, uni_cells=1536, bi_cells=1536, dec_cells=1000)


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> ParamStore:
    """Seeded uniform(-0.05, 0.05) initialization in a fixed name order."""
    rng = np.random.default_rng(seed)
    store = ParamStore()

    def add(name, shape, group):
        t = init_uniform(shape, rng, INIT_SCALE, dtype=dtype)
        store.add(name, t, group)

    v = cfg.vocab_size
    for layer in range(cfg.num_uni_layers):
        d_in = cfg.feat_dim if layer == 0 else cfg.uni_cells
        add(f"uni.l{layer}.wx", (d_in, 4 * cfg.uni_cells), "uni_enc")
        add(f"uni.l{layer}.wh", (cfg.uni_cells, 4 * cfg.uni_cells), "uni_enc")
        add(f"uni.l{layer}.b", (4 * cfg.uni_cells,), "uni_enc")
    add("uni.ctc.w", (cfg.uni_cells, v + 1), "uni_enc")
    add("uni.ctc.b", (v + 1,), "uni_enc")

    add("bi.lstm.wx", (cfg.uni_cells, 4 * cfg.bi_cells), "bi_enc")
    add("bi.lstm.wh", (cfg.bi_cells, 4 * cfg.bi_cells), "bi_enc")
    add("bi.lstm.b", (4 * cfg.bi_cells,), "bi_enc")
    add("bi.comb.w", (cfg.uni_cells + cfg.bi_cells, cfg.bi_cells), "bi_enc")
    add("bi.comb.b", (cfg.bi_cells,), "bi_enc")
    add("bi.ctc.w", (cfg.bi_cells, v + 1), "bi_enc")
    add("bi.ctc.b", (v + 1,), "bi_enc")

    att = cfg.dec_cells
    add("mocha.embed", (v, cfg.dec_cells), "mocha_dec")
    add("mocha.lstm.wx", (cfg.dec_cells, 4 * cfg.dec_cells), "mocha_dec")
    add("mocha.lstm.wh", (cfg.dec_cells, 4 * cfg.dec_cells), "mocha_dec")
    add("mocha.lstm.b", (4 * cfg.dec_cells,), "mocha_dec")
    add("mocha.att.wq", (cfg.dec_cells, att), "mocha_dec")
    add("mocha.att.wk", (cfg.uni_cells, att), "mocha_dec")
    add("mocha.att.b", (att,), "mocha_dec")
    add("mocha.att.v", (att,), "mocha_dec")
    add("mocha.att.r", (1,), "mocha_dec")
    add("mocha.chunk.wq", (cfg.dec_cells, att), "mocha_dec")
    add("mocha.chunk.wk", (cfg.uni_cells, att), "mocha_dec")
    add("mocha.chunk.b", (att,), "mocha_dec")
    add("mocha.chunk.v", (att,), "mocha_dec")
    add("mocha.out.w", (cfg.dec_cells + cfg.uni_cells, v), "mocha_dec")
    add("mocha.out.b", (v,), "mocha_dec")

    add("bfa.embed", (v, cfg.dec_cells), "bfa_dec")
    add("bfa.lstm.wx", (cfg.dec_cells, 4 * cfg.dec_cells), "bfa_dec")
    add("bfa.lstm.wh", (cfg.dec_cells, 4 * cfg.dec_cells), "bfa_dec")
    add("bfa.lstm.b", (4 * cfg.dec_cells,), "bfa_dec")
    add("bfa.att.wq", (cfg.dec_cells, att), "bfa_dec")
    add("bfa.att.wk", (cfg.bi_cells, att), "bfa_dec")
    add("bfa.att.b", (att,), "bfa_dec")
    add("bfa.att.v", (att,), "bfa_dec")
    add("bfa.out.w", (cfg.dec_cells + cfg.bi_cells, v), "bfa_dec")
    add("bfa.out.b", (v,), "bfa_dec")
    return store


@dataclass
class Model:
    """Config plus parameters; the unit passed to decoding and training."""

    cfg: ModelConfig
    params: ParamStore


# ---------------------------------------------------------------------------
# encoders


def encode_shared(
    cfg: ModelConfig,
    params: ParamStore,
    feats: FeatureSequence | np.ndarray,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Stacked forward LSTM layers with maxpool-based temporal reduction."""
    frames = feats.frames if isinstance(feats, FeatureSequence) else np.asarray(feats)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise DataError("encoder input must be a non-empty (T, F) matrix")
    if frames.shape[1] != cfg.feat_dim:
        raise DataError(f"feature dim {frames.shape[1]} != configured {cfg.feat_dim}")
    dtype = params["uni.l0.wx"].data.dtype
    h = ad.constant(frames.astype(dtype, copy=False))
    for layer in range(cfg.num_uni_layers):
        h, _, _ = ad.lstm(
            h,
            params[f"uni.l{layer}.wx"],
            params[f"uni.l{layer}.wh"],
            params[f"uni.l{layer}.b"],
        )
        factor = cfg.pool_factors[layer]
        if factor > 1:
            h = ad.maxpool_time(h, factor)
        if train and cfg.dropout > 0.0:
            h = ad.dropout(h, cfg.dropout, rng)
    if h.data.shape[0] == 0:
        raise DataError("input too short: temporal reduction consumed every frame")
    return h


def encode_bi(
    cfg: ModelConfig,
    params: ParamStore,
    h_uni: Tensor,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Single backward LSTM over h_uni, combined by concat + projection."""
    bwd, _, _ = ad.lstm(
        h_uni,
        params["bi.lstm.wx"],
        params["bi.lstm.wh"],
        params["bi.lstm.b"],
        reverse=True,
    )
    h_bi = ad.affine(ad.concat([h_uni, bwd], axis=1), params["bi.comb.w"], params["bi.comb.b"])
    if train and cfg.dropout > 0.0:
        h_bi = ad.dropout(h_bi, cfg.dropout, rng)
    return h_bi


# ---------------------------------------------------------------------------
# attention


def _additive_energies(queries: Tensor, keys: Tensor, wq: Tensor, b: Tensor, v: Tensor) -> Tensor:
    """tanh(q W + k W_k + b) . v for every (query, key) pair -> (L, T)."""
    q = ad.affine(queries, wq, b)
    l_len = q.data.shape[0]
    t_len = keys.data.shape[0]
    att = q.data.shape[1]
    mix = ad.tanh(ad.add(ad.reshape(q, (l_len, 1, att)), ad.reshape(keys, (1, t_len, att))))
    return ad.reshape(ad.matmul(ad.reshape(mix, (l_len * t_len, att)), v), (l_len, t_len))


def _chunk_mask(t_len: int, chunk: int, dtype) -> np.ndarray:
    # mask[k, j] = 1 when frame j falls in the chunk window ending at k
    idx = np.arange(t_len)
    return ((idx[None, :] <= idx[:, None]) & (idx[None, :] > idx[:, None] - chunk)).astype(dtype)


def _chunk_spread(alpha: Tensor, chunk_energies: Tensor, chunk: int) -> Tensor:
    """Distribute each alpha mass over a softmax of its chunk window."""
    t_len = alpha.data.shape[0]
    dtype = alpha.data.dtype
    mask = ad.constant(_chunk_mask(t_len, chunk, dtype))
    eu = ad.exp(ad.add_const(chunk_energies, -float(chunk_energies.data.max())))
    denom = ad.matmul(mask, eu)
    ratio = ad.div(alpha, ad.add_const(denom, 1e-20))
    return ad.mul(ad.matmul(ad.reshape(ratio, (1, t_len)), mask), ad.reshape(eu, (1, t_len)))


def mocha_soft_attention(
    cfg: ModelConfig,
    params: ParamStore,
    h_uni: Tensor,
    decoder_state: Tensor,
    prev_alpha: Tensor | None,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Expected (training-time) monotonic chunkwise attention for one step.

    Returns (context, alpha, beta). ``prev_alpha=None`` marks the first
    output step, whose alignment mass flows in ahead of frame 0. Mass is
    conserved: sum(beta) == sum(alpha) <= 1.
    """
    queries = ad.reshape(decoder_state, (1, decoder_state.data.shape[0]))
    keys_m = ad.matmul(h_uni, params["mocha.att.wk"])
    e_mono = ad.add(
        _additive_energies(queries, keys_m, params["mocha.att.wq"], params["mocha.att.b"], params["mocha.att.v"]),
        params["mocha.att.r"],
    )
    t_len = h_uni.data.shape[0]
    e_mono = ad.reshape(e_mono, (t_len,))
    if train and cfg.mocha_noise_std > 0.0:
        noise = (rng.standard_normal(t_len) * cfg.mocha_noise_std).astype(e_mono.data.dtype)
        e_mono = ad.add(e_mono, ad.constant(noise))
    p = ad.sigmoid(e_mono)
    alpha = ad.monotonic_alignment(p, _alignment_inflow(prev_alpha, t_len, p.data.dtype))
    keys_c = ad.matmul(h_uni, params["mocha.chunk.wk"])
    e_chunk = ad.reshape(
        _additive_energies(queries, keys_c, params["mocha.chunk.wq"], params["mocha.chunk.b"], params["mocha.chunk.v"]),
        (t_len,),
    )
    beta_row = _chunk_spread(alpha, e_chunk, cfg.mocha_chunk)
    beta = ad.reshape(beta_row, (t_len,))
    context = ad.reshape(ad.matmul(beta_row, h_uni), (h_uni.data.shape[1],))
    return context, alpha, beta


def _alignment_inflow(prev_alpha: Tensor | None, t_len: int, dtype) -> Tensor:
    """Mass arriving at each frame: previous alpha shifted one frame ahead."""
    if prev_alpha is None:
        start = np.zeros(t_len, dtype=dtype)
        start[0] = 1.0
        return ad.constant(start)
    zero = ad.constant(np.zeros(1, dtype=dtype))
    return ad.concat([zero, ad.narrow(prev_alpha, 0, 0, t_len - 1)], axis=0)


def full_attention(
    params: ParamStore,
    h_bi: Tensor,
    decoder_state: Tensor,
) -> tuple[Tensor, Tensor]:
    """Additive-energy softmax over every frame; weights sum to 1."""
    queries = ad.reshape(decoder_state, (1, decoder_state.data.shape[0]))
    keys = ad.matmul(h_bi, params["bfa.att.wk"])
    e = _additive_energies(queries, keys, params["bfa.att.wq"], params["bfa.att.b"], params["bfa.att.v"])
    weights = ad.softmax(e, axis=-1)
    context = ad.reshape(ad.matmul(weights, h_bi), (h_bi.data.shape[1],))
    return context, ad.reshape(weights, (h_bi.data.shape[0],))


def mocha_hard_step(
    cfg: ModelConfig,
    params: ParamStore,
    h_uni_prefix: np.ndarray,
    decoder_state: np.ndarray,
    prev_boundary: int,
) -> tuple[np.ndarray, int] | None:
    """Streaming selection: first frame past the boundary with p >= 0.5.

    Scans 1-based frames j > prev_boundary in order and commits to the
    first selection regardless of later energies; attends with a softmax
    over the chunk window ending at the selected frame. Returns None at
    end of input (no frame selected).
    """
    t_len = h_uni_prefix.shape[0]
    if not 0 <= prev_boundary <= t_len:
        raise ValueError(f"prev_boundary {prev_boundary} outside [0, {t_len}]")
    wq = params["mocha.att.wq"].data
    wk = params["mocha.att.wk"].data
    b = params["mocha.att.b"].data
    v = params["mocha.att.v"].data
    r = params["mocha.att.r"].data[0]
    q = decoder_state @ wq + b
    boundary = None
    for j0 in range(prev_boundary, t_len):
        energy = np.tanh(q + h_uni_prefix[j0] @ wk) @ v + r
        if energy >= 0.0:  # sigmoid(e) >= 0.5
            boundary = j0 + 1
            break
    if boundary is None:
        return None
    lo = max(0, boundary - cfg.mocha_chunk)
    window = h_uni_prefix[lo:boundary]
    qc = decoder_state @ params["mocha.chunk.wq"].data + params["mocha.chunk.b"].data
    u = np.tanh(qc + window @ params["mocha.chunk.wk"].data) @ params["mocha.chunk.v"].data
    u = u - u.max()
    w = np.exp(u)
    w /= w.sum()
    return w @ window, boundary


# ---------------------------------------------------------------------------
# joint forward pass


def forward_joint(
    cfg: ModelConfig,
    params: ParamStore,
    feats: FeatureSequence | np.ndarray,
    labels: list[int],
    sos_id: int,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> dict:
    """All four heads in one pass sharing encoder work.

    Teacher forcing feeds [sos] + labels into both decoders, so the CE
    logits have len(labels) + 1 rows (one per predicted token including
    the end token). CTC heads project each encoder to vocab_size + 1
    columns with the blank in the last column.
    """
    if not labels:
        raise DataError("teacher forcing requires a non-empty label sequence")
    h_uni = encode_shared(cfg, params, feats, train=train, rng=rng)
    h_bi = encode_bi(cfg, params, h_uni, train=train, rng=rng)
    ctc_uni = ad.affine(h_uni, params["uni.ctc.w"], params["uni.ctc.b"])
    ctc_bi = ad.affine(h_bi, params["bi.ctc.w"], params["bi.ctc.b"])

    dec_inputs = [sos_id] + list(labels)
    t_len = h_uni.data.shape[0]

    # first-pass decoder: monotonic chunkwise attention over h_uni
    emb_m = ad.embedding(params["mocha.embed"], dec_inputs)
    hs_m, _, _ = ad.lstm(emb_m, params["mocha.lstm.wx"], params["mocha.lstm.wh"], params["mocha.lstm.b"])
    keys_m = ad.matmul(h_uni, params["mocha.att.wk"])
    e_mono = ad.add(
        _additive_energies(hs_m, keys_m, params["mocha.att.wq"], params["mocha.att.b"], params["mocha.att.v"]),
        params["mocha.att.r"],
    )
    if train and cfg.mocha_noise_std > 0.0:
        noise = (rng.standard_normal(e_mono.data.shape) * cfg.mocha_noise_std).astype(e_mono.data.dtype)
        e_mono = ad.add(e_mono, ad.constant(noise))
    p_all = ad.sigmoid(e_mono)
    keys_c = ad.matmul(h_uni, params["mocha.chunk.wk"])
    e_chunk = _additive_energies(hs_m, keys_c, params["mocha.chunk.wq"], params["mocha.chunk.b"], params["mocha.chunk.v"])

    contexts = []
    alphas: list[np.ndarray] = []
    betas: list[np.ndarray] = []
    prev_alpha: Tensor | None = None
    for i in range(len(dec_inputs)):
        p_i = ad.take_row(p_all, i)
        alpha = ad.monotonic_alignment(p_i, _alignment_inflow(prev_alpha, t_len, p_i.data.dtype))
        beta_row = _chunk_spread(alpha, ad.take_row(e_chunk, i), cfg.mocha_chunk)
        contexts.append(ad.matmul(beta_row, h_uni))
        alphas.append(alpha.data)
        betas.append(beta_row.data.reshape(-1))
        prev_alpha = alpha
    ctx_m = ad.concat(contexts, axis=0)
    ce_mocha = ad.affine(ad.concat([hs_m, ctx_m], axis=1), params["mocha.out.w"], params["mocha.out.b"])

    # second-pass decoder: full attention over h_bi
    emb_b = ad.embedding(params["bfa.embed"], dec_inputs)
    hs_b, _, _ = ad.lstm(emb_b, params["bfa.lstm.wx"], params["bfa.lstm.wh"], params["bfa.lstm.b"])
    keys_b = ad.matmul(h_bi, params["bfa.att.wk"])
    e_bfa = _additive_energies(hs_b, keys_b, params["bfa.att.wq"], params["bfa.att.b"], params["bfa.att.v"])
    w_bfa = ad.softmax(e_bfa, axis=-1)
    ctx_b = ad.matmul(w_bfa, h_bi)
    ce_bfa = ad.affine(ad.concat([hs_b, ctx_b], axis=1), params["bfa.out.w"], params["bfa.out.b"])

    return {
        "ctc_logits_uni": ctc_uni,
        "ctc_logits_bi": ctc_bi,
        "ce_logits_mocha": ce_mocha,
        "ce_logits_bfa": ce_bfa,
        "h_uni": h_uni,
        "h_bi": h_bi,
        "alphas": alphas,
        "betas": betas,
    }

"""Encoder-decoder over semantic tokens with the draft / reflect / correct template.

Decoder positions (0-based, ``T = 2L + K + 4`` in total)::

    0 .. L-1          draft level t          input: BOS1, d_1 .. d_{L-1}
    L                 EOF1                   input: d_L
    L+1 .. L+K+1      reflection slot j      input: BOS2 (all slots)
    L+K+2             EOF2                   input: EOF2 marker + sum of reflection-token embeddings
    L+K+3 .. 2L+K+2   correction level t     input: BOS3, c_1 .. c_{L-1}
    2L+K+3            EOF3                   input: c_L

Reflection slots read the same BOS2 input and may not see each other, so they
are predicted in one parallel pass.  The sampled reflection tokens enter the
stream only at the EOF2 position, which every correction position attends to.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation

DRAFT, EOF1, REFLECTION, EOF2, CORRECTION, EOF3 = "draft", "eof1", "reflection", "eof2", "correction", "eof3"


class PositionRole(NamedTuple):
    kind: str
    index: int = 0


@dataclass
class ModelConfig:
    vocab_sizes: list[int]
    n_attrs: int = 2
    attr_buckets: list[int] = field(default_factory=lambda: [1, 1])
    d_model: int = 32
    d_ff: int = 64
    n_heads: int = 2
    enc_layers: int = 1
    dec_layers: int = 2
    max_history: int = 20
    seed: int = 0

    @property
    def levels(self) -> int:
        return len(self.vocab_sizes)

    @property
    def reflection_vocab(self) -> list[int]:
        """Localisation slot has L+1 classes, each attribute slot 2."""
        return [self.levels + 1] + [2] * self.n_attrs

    @property
    def template_length(self) -> int:
        return 2 * self.levels + self.n_attrs + 4

    def to_dict(self) -> dict:
        return asdict(self)


class TemplateLayout:
    def __init__(self, L: int, K: int):
        self.L, self.K = L, K
        self.length = 2 * L + K + 4
        self.eof1 = L
        self.eof2 = L + K + 2
        self.eof3 = 2 * L + K + 3
        roles = [PositionRole(DRAFT, t) for t in range(L)] + [PositionRole(EOF1)]
        roles += [PositionRole(REFLECTION, j) for j in range(K + 1)] + [PositionRole(EOF2)]
        roles += [PositionRole(CORRECTION, t) for t in range(L)] + [PositionRole(EOF3)]
        self.roles = roles

    def position(self, role: PositionRole) -> int:
        kind, i = role
        if kind == DRAFT:
            return i
        if kind == REFLECTION:
            return self.L + 1 + i
        if kind == CORRECTION:
            return self.L + self.K + 3 + i
        return {EOF1: self.eof1, EOF2: self.eof2, EOF3: self.eof3}[kind]

    @property
    def reflection_positions(self) -> list[int]:
        return list(range(self.L + 1, self.L + self.K + 2))

    @property
    def correction_positions(self) -> list[int]:
        return list(range(self.L + self.K + 3, 2 * self.L + self.K + 3))

    def serialize(self, draft, reflection, correction, eof_tokens=("<EOF1>", "<EOF2>", "<EOF3>")) -> list:
        return [*draft, eof_tokens[0], *reflection, eof_tokens[1], *correction, eof_tokens[2]]

    def parse(self, seq) -> tuple[list, list, list]:
        if len(seq) != self.length:
            raise ContractViolation(f"template length {len(seq)} != {self.length}")
        L, K = self.L, self.K
        return list(seq[:L]), list(seq[L + 1:L + K + 2]), list(seq[L + K + 3:2 * L + K + 3])


def build_template_mask(L: int, K: int) -> np.ndarray:
    """Boolean (T, T) matrix; ``allowed[q, k]`` means position q may attend to k."""
    lay = TemplateLayout(L, K)
    allowed = np.tril(np.ones((lay.length, lay.length), dtype=bool))
    for q in lay.reflection_positions:
        allowed[q, :] = False
        allowed[q, : lay.eof1 + 1] = True
        allowed[q, q] = True
    return allowed


def sinusoidal(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(pos * rate)
    pe[:, 1::2] = np.cos(pos * rate[: d // 2])
    return pe


@dataclass
class EncoderOutput:
    hidden: Tensor  # (B, S, d)
    pad: np.ndarray  # (B, S) True where padded
    lengths: np.ndarray

    def __len__(self) -> int:
        return self.hidden.shape[0]

    def select(self, rows) -> "EncoderOutput":
        rows = np.asarray(rows)
        return EncoderOutput(self.hidden[rows], self.pad[rows], self.lengths[rows])


class GRCModel:
    """Parameters plus forward passes.  ``item_tokens`` / ``item_attrs`` are catalog features, not weights."""

    def __init__(self, config: ModelConfig, item_tokens: np.ndarray, item_attrs: np.ndarray,
                 params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.item_tokens = np.asarray(item_tokens, dtype=np.int64)
        self.item_attrs = np.asarray(item_attrs, dtype=np.int64)
        self.layout = TemplateLayout(config.levels, config.n_attrs)
        allowed = build_template_mask(config.levels, config.n_attrs)
        self._dec_mask = np.where(allowed, 0.0, ad.MASK_VALUE)
        self._pe = sinusoidal(max(config.max_history, self.layout.length) + 1, config.d_model)
        self._build_offsets()
        if params is None:
            params = self._init_params(np.random.default_rng(config.seed))
        self.params = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k) for k, v in params.items()}

    # ----------------------------------------------------------- parameters

    def _build_offsets(self) -> None:
        c = self.config
        off, o = [], 0
        for v in c.vocab_sizes:
            off.append(o)
            o += v
        self._tok_off = off
        self.BOS1, self.BOS2, self.BOS3, self.EOF2 = o, o + 1, o + 2, o + 3
        o += 4
        self._ref_off = []
        for v in c.reflection_vocab:
            self._ref_off.append(o)
            o += v
        self.ZERO = o
        self._table_rows = o

    def _init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        c = self.config
        d, f = c.d_model, c.d_ff
        p: dict[str, np.ndarray] = {}

        def lin(name, n_in, n_out, scale=1.0, bias=True):
            p[name + ".w"] = rng.normal(scale=scale / math.sqrt(n_in), size=(n_in, n_out))
            if bias:
                p[name + ".b"] = np.zeros(n_out)

        def norm(name):
            p[name + ".g"] = np.ones(d)
            p[name + ".b"] = np.zeros(d)

        def attn(name):
            for m in "qkvo":
                lin(f"{name}.{m}", d, d, bias=m == "o")

        for lvl, v in enumerate(c.vocab_sizes):
            p[f"enc.tok{lvl}"] = rng.normal(scale=0.5, size=(v, d))
        for a, n in enumerate(c.attr_buckets):
            p[f"enc.attr{a}"] = rng.normal(scale=0.5, size=(n, d))
        for i in range(c.enc_layers):
            pre = f"enc.l{i}"
            attn(pre + ".self")
            norm(pre + ".ln1")
            norm(pre + ".ln2")
            lin(pre + ".ff1", d, f)
            lin(pre + ".ff2", f, d)
        norm("enc.lnf")
        p["dec.table"] = rng.normal(scale=0.5, size=(self._table_rows, d))
        for i in range(c.dec_layers):
            pre = f"dec.l{i}"
            attn(pre + ".self")
            attn(pre + ".cross")
            for k in (1, 2, 3):
                norm(f"{pre}.ln{k}")
            lin(pre + ".ff1", d, f)
            lin(pre + ".ff2", f, d)
        norm("dec.lnf")
        for lvl, v in enumerate(c.vocab_sizes):
            lin(f"head.level{lvl}", d, v, scale=0.02)
        for j, v in enumerate(c.reflection_vocab):
            lin(f"head.ref{j}", d, v, scale=0.02)
        return p

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ContractViolation("parameter names do not match the model configuration")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ContractViolation(f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def clone(self) -> "GRCModel":
        return GRCModel(self.config, self.item_tokens, self.item_attrs, self.state_dict())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def save(self, path, extra_header: dict | None = None) -> None:
        header = {"model_config": self.config.to_dict(), **(extra_header or {})}
        ad.save_params(path, self.params, header)

    @classmethod
    def load(cls, path, item_tokens, item_attrs) -> tuple["GRCModel", dict]:
        state, header = ad.load_params(path)
        return cls(ModelConfig(**header["model_config"]), item_tokens, item_attrs, state), header

    # ------------------------------------------------------------- building blocks

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return ad.layer_norm(x, self.params[name + ".g"], self.params[name + ".b"])

    def _lin(self, x: Tensor, name: str) -> Tensor:
        y = x @ self.params[name + ".w"]
        b = self.params.get(name + ".b")
        return y + b if b is not None else y

    def _attention(self, xq: Tensor, xkv: Tensor, name: str, mask: np.ndarray) -> Tensor:
        B, nq, d = xq.shape
        nk = xkv.shape[1]
        h = self.config.n_heads
        dh = d // h
        q = (xq @ self.params[name + ".q.w"]).reshape(B, nq, h, dh).transpose(0, 2, 1, 3)
        k = (xkv @ self.params[name + ".k.w"]).reshape(B, nk, h, dh).transpose(0, 2, 3, 1)
        v = (xkv @ self.params[name + ".v.w"]).reshape(B, nk, h, dh).transpose(0, 2, 1, 3)
        scores = ad.masked_fill((q @ k) * (1.0 / math.sqrt(dh)), mask)
        ctx = (ad.softmax(scores) @ v).transpose(0, 2, 1, 3).reshape(B, nq, d)
        return self._lin(ctx, name + ".o")

    def _ff(self, x: Tensor, name: str) -> Tensor:
        return self._lin(ad.gelu(self._lin(x, name + ".ff1")), name + ".ff2")

    # ------------------------------------------------------------------ encoder

    def encode(self, histories: list[list[int]]) -> EncoderOutput:
        """Embed each history item (semantic tokens + attribute buckets + recency position) and encode."""
        if not histories or any(len(h) == 0 for h in histories):
            raise ContractViolation("encode: every history must be non-empty")
        c = self.config
        lengths = np.array([len(h) for h in histories])
        S = int(lengths.max())
        if S > len(self._pe):
            raise ContractViolation(f"history longer than supported ({S} > {len(self._pe)})")
        items = np.zeros((len(histories), S), dtype=np.int64)
        for b, h in enumerate(histories):
            items[b, : len(h)] = h
        pad = np.arange(S)[None, :] >= lengths[:, None]
        # distance from the most recent interaction
        recency = np.clip(lengths[:, None] - 1 - np.arange(S)[None, :], 0, None)
        x = Tensor(self._pe[recency])
        toks = self.item_tokens[items]
        for lvl in range(c.levels):
            x = x + ad.embedding(self.params[f"enc.tok{lvl}"], toks[..., lvl])
        attrs = self.item_attrs[items]
        for a in range(c.n_attrs):
            x = x + ad.embedding(self.params[f"enc.attr{a}"], attrs[..., a])
        key_mask = np.where(pad, ad.MASK_VALUE, 0.0)[:, None, None, :]
        for i in range(c.enc_layers):
            pre = f"enc.l{i}"
            hln = self._ln(x, pre + ".ln1")
            x = x + self._attention(hln, hln, pre + ".self", key_mask)
            x = x + self._ff(self._ln(x, pre + ".ln2"), pre)
        return EncoderOutput(self._ln(x, "enc.lnf"), pad, lengths)

    # ------------------------------------------------------------------ decoder

    def decoder_inputs(self, n: int, draft=None, reflection=None, correction=None, batch: int | None = None) -> np.ndarray:
        """(B, n, K+2) rows of the decoder embedding table summed per position.

        ``reflection`` holds class indices (localisation as 0..L, i.e. r_loc - 1).
        Tokens only need to be supplied for positions < n.
        """
        L, K = self.config.levels, self.config.n_attrs
        lay = self.layout
        B = next((len(a) for a in (draft, reflection, correction) if a is not None), batch)
        if B is None:
            raise ContractViolation("decoder_inputs: batch size unknown")
        ids = np.full((B, n, K + 2), self.ZERO, dtype=np.int64)

        def need(arr, count, what):
            if arr is None or np.asarray(arr).shape[1] < count:
                raise ContractViolation(f"prefix for {n} positions needs {count} {what} tokens")
            return np.asarray(arr, dtype=np.int64)

        for p in range(n):
            if p == 0:
                ids[:, p, 0] = self.BOS1
            elif p <= L:
                d = need(draft, p, "draft")
                ids[:, p, 0] = self._tok_off[p - 1] + d[:, p - 1]
            elif p < lay.eof2:
                ids[:, p, 0] = self.BOS2
            elif p == lay.eof2:
                r = need(reflection, K + 1, "reflection")
                ids[:, p, 0] = self.EOF2
                for j in range(K + 1):
                    ids[:, p, 1 + j] = self._ref_off[j] + r[:, j]
            elif p == lay.eof2 + 1:
                ids[:, p, 0] = self.BOS3
            else:
                t = p - lay.eof2 - 2  # correction token index feeding this position
                cr = need(correction, t + 1, "correction")
                ids[:, p, 0] = self._tok_off[t] + cr[:, t]
        return ids

    def decode_hidden(self, enc: EncoderOutput, ids: np.ndarray) -> Tensor:
        """Final decoder states for the first ``ids.shape[1]`` template positions."""
        c = self.config
        B, n, _ = ids.shape
        if len(enc) != B:
            raise ContractViolation(f"encoder batch {len(enc)} != decoder batch {B}")
        if n > self.layout.length:
            raise ContractViolation("decoder input longer than the template")
        table = ad.concat([self.params["dec.table"], Tensor(np.zeros((1, c.d_model)))], axis=0)
        x = ad.embedding(table, ids).sum(axis=2) + Tensor(self._pe[:n])
        self_mask = self._dec_mask[:n, :n]
        cross_mask = np.where(enc.pad, ad.MASK_VALUE, 0.0)[:, None, None, :]
        for i in range(c.dec_layers):
            pre = f"dec.l{i}"
            hln = self._ln(x, pre + ".ln1")
            x = x + self._attention(hln, hln, pre + ".self", self_mask)
            x = x + self._attention(self._ln(x, pre + ".ln2"), enc.hidden, pre + ".cross", cross_mask)
            x = x + self._ff(self._ln(x, pre + ".ln3"), pre)
        return self._ln(x, "dec.lnf")

    def _head(self, hidden: Tensor, role: PositionRole) -> Tensor:
        if role.kind in (DRAFT, CORRECTION):
            if not 0 <= role.index < self.config.levels:
                raise ContractViolation(f"no level {role.index}")
            return self._lin(hidden, f"head.level{role.index}")
        if role.kind == REFLECTION:
            if not 0 <= role.index <= self.config.n_attrs:
                raise ContractViolation(f"no reflection slot {role.index}")
            return self._lin(hidden, f"head.ref{role.index}")
        raise ContractViolation(f"delimiter position {role.kind} has no output vocabulary")

    def role_logprobs(self, hidden: Tensor, positions_roles: list[tuple[int, PositionRole]]) -> list[Tensor]:
        return [ad.log_softmax(self._head(hidden[:, p, :], role)) for p, role in positions_roles]

    def decode_step(self, enc: EncoderOutput, role: PositionRole, draft=None, reflection=None, correction=None) -> Tensor:
        """Logits at ``role``'s position given the template prefix before it."""
        pos = self.layout.position(role)
        if role.kind not in (DRAFT, REFLECTION, CORRECTION):
            raise ContractViolation(f"delimiter position {role.kind} has no output vocabulary")
        ids = self.decoder_inputs(pos + 1, draft, reflection, correction, batch=len(enc))
        hidden = self.decode_hidden(enc, ids)
        return self._head(hidden[:, pos, :], role)

    def reflection_logprobs(self, enc: EncoderOutput, draft) -> list[Tensor]:
        """All K+1 reflection distributions from one masked pass."""
        lay = self.layout
        ids = self.decoder_inputs(lay.eof2, draft)
        hidden = self.decode_hidden(enc, ids)
        roles = [(p, PositionRole(REFLECTION, j)) for j, p in enumerate(lay.reflection_positions)]
        return self.role_logprobs(hidden, roles)

    def forward_template(self, enc: EncoderOutput, draft, reflection, correction) -> dict[str, list[Tensor]]:
        """Teacher-forced log-probs for every predicted position in one pass.

        Returns ``{"draft": [L x (B, V_t)], "reflection": [(K+1) x ...], "correction": [L x ...]}``.
        """
        lay = self.layout
        ids = self.decoder_inputs(lay.length - 1, draft, reflection, correction)
        hidden = self.decode_hidden(enc, ids)
        L = self.config.levels
        out = {DRAFT: [], REFLECTION: [], CORRECTION: []}
        # one head application per level covers both its draft and correction position
        for t in range(L):
            pos = [t, lay.correction_positions[t]]
            lp = ad.log_softmax(self._head(hidden[:, pos, :], PositionRole(DRAFT, t)))
            out[DRAFT].append(lp[:, 0, :])
            out[CORRECTION].append(lp[:, 1, :])
        out[REFLECTION] = self.role_logprobs(
            hidden, [(p, PositionRole(REFLECTION, j)) for j, p in enumerate(lay.reflection_positions)]
        )
        return out

    def draft_logprobs(self, enc: EncoderOutput, targets) -> list[Tensor]:
        """Teacher-forced draft-segment log-probs only (the plain next-item model)."""
        L = self.config.levels
        ids = self.decoder_inputs(L, targets)
        hidden = self.decode_hidden(enc, ids)
        return [ad.log_softmax(self._head(hidden[:, t, :], PositionRole(DRAFT, t))) for t in range(L)]

    def pretrain_loss(self, histories: list[list[int]], targets: np.ndarray) -> Tensor:
        """Mean NLL per target token under teacher forcing."""
        targets = np.asarray(targets, dtype=np.int64)
        lps = self.draft_logprobs(self.encode(histories), targets)
        nll = [ad.take_last(lp, targets[:, t]) for t, lp in enumerate(lps)]
        total = nll[0]
        for x in nll[1:]:
            total = total + x
        return -(total.sum() * (1.0 / (targets.shape[0] * targets.shape[1])))

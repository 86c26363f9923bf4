"""Small encoder-decoder text model with event-embedding injection and LoRA.

The tokenizer is exact: tokens are whole words (letter runs) from a closed
vocabulary plus single characters (digits, punctuation, space), so
detokenizing is plain string concatenation and numbers are spelled digit by
digit. Connector outputs are spliced into the encoder's input embedding
stream between two trainable delimiter rows; the decoder generates answers
greedily. Low-rank adapters can be attached to the query and value
projections of every attention sublayer while the base weights stay frozen.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import ConfigError, DataError

PAD, BOS, EOS, SEQ_PREFIX, SEQ_SUFFIX = range(5)
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<seq>", "</seq>")

_WORD_RE = re.compile(r"[A-Za-z]+")
_PUNCTUATION = ".,;:?!'\"()-+/%"
_DIGITS = "0123456789"


class Tokenizer:
    """Whole-word plus single-character tokenizer over a closed alphabet."""

    def __init__(self, tokens: list[str]):
        if list(tokens[:5]) != list(SPECIAL_TOKENS):
            raise ConfigError("token list must start with the special tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ConfigError("duplicate tokens in vocabulary")
        for t in self.tokens[5:]:
            if len(t) > 1 and not t.isalpha():
                raise ConfigError(
                    f"multi-character token {t!r} must be alphabetic")
        self.yes_id = self.index.get("Yes")
        self.no_id = self.index.get("No")
        if self.yes_id is None or self.no_id is None:
            raise ConfigError(
                "vocabulary must contain single tokens 'Yes' and 'No'")

    @classmethod
    def build(cls, words) -> "Tokenizer":
        """Vocabulary from words plus digits, punctuation, and the space.

        The bare letter "e" is always present so scientific-notation numerals
        (repr of very small floats) stay spellable.
        """
        entries: set[str] = set(_DIGITS) | set(_PUNCTUATION) | {" ", "e"}
        for w in words:
            for run in _WORD_RE.findall(str(w)):
                entries.add(run)
            for ch in str(w):
                if not ch.isalpha():
                    entries.add(ch)
        entries.update({"Yes", "No"})
        return cls(list(SPECIAL_TOKENS) + sorted(entries))

    @property
    def size(self) -> int:
        return len(self.tokens)

    def tokenize(self, text: str) -> list[int]:
        out: list[int] = []
        pos = 0
        while pos < len(text):
            m = _WORD_RE.match(text, pos)
            if m:
                piece = m.group(0)
                idx = self.index.get(piece)
                if idx is None:
                    raise DataError(f"word {piece!r} not in the vocabulary")
                out.append(idx)
                pos = m.end()
                continue
            ch = text[pos]
            idx = self.index.get(ch)
            if idx is None:
                raise DataError(f"character {ch!r} not in the vocabulary")
            out.append(idx)
            pos += 1
        return out

    def detokenize(self, ids) -> str:
        parts = []
        for i in ids:
            if i < 5:
                raise DataError(
                    f"cannot detokenize special token id {int(i)}")
            parts.append(self.tokens[i])
        return "".join(parts)

    def to_json(self) -> list[str]:
        return list(self.tokens)

    @classmethod
    def from_json(cls, tokens: list[str]) -> "Tokenizer":
        return cls(list(tokens))


@dataclass
class ToyLmConfig:
    d_model: int = 48
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    d_ff: int = 96
    max_input_len: int = 128
    max_output_len: int = 24

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by heads {self.heads}")

    def to_json(self) -> dict:
        return {"d_model": self.d_model, "enc_layers": self.enc_layers,
                "dec_layers": self.dec_layers, "heads": self.heads,
                "d_ff": self.d_ff, "max_input_len": self.max_input_len,
                "max_output_len": self.max_output_len}

    @classmethod
    def from_json(cls, d: dict) -> "ToyLmConfig":
        return cls(**d)


@dataclass
class LoraConfig:
    rank: int = 16
    alpha: float = 32.0
    dropout: float = 0.05

    def to_json(self) -> dict:
        return {"rank": self.rank, "alpha": self.alpha, "dropout": self.dropout}

    @classmethod
    def from_json(cls, d: dict) -> "LoraConfig":
        return cls(**d)


@dataclass
class MultimodalInput:
    """Assembled encoder input: text, delimiters, and injected event rows."""

    prefix_ids: np.ndarray          # (B, P)
    body_ids: np.ndarray            # (B, T_body) padded with PAD
    body_valid: np.ndarray          # (B, T_body)
    injected: Tensor | None         # (B, q, d_model) or None for q = 0

    @property
    def batch(self) -> int:
        return self.prefix_ids.shape[0]

    @property
    def n_injected(self) -> int:
        return 0 if self.injected is None else self.injected.shape[1]

    @property
    def length(self) -> int:
        return (self.prefix_ids.shape[1] + 1 + self.n_injected + 1
                + self.body_ids.shape[1])


class _DecoderBlock(nn.Module):
    def __init__(self, d_model: int, heads: int, d_ff: int,
                 rng: np.random.Generator):
        super().__init__()
        self.ln_self = nn.LayerNorm(d_model)
        self.self_attn = nn.MultiHeadAttention(d_model, heads, rng)
        self.ln_cross = nn.LayerNorm(d_model)
        self.cross_attn = nn.MultiHeadAttention(d_model, heads, rng)
        self.ln_ff = nn.LayerNorm(d_model)
        self.ff = nn.FeedForward(d_model, d_ff, rng)

    def __call__(self, x: Tensor, enc_out: Tensor, self_mask: np.ndarray,
                 cross_mask: np.ndarray | None) -> Tensor:
        h = self.ln_self(x)
        x = ad.add(x, self.self_attn(h, h, mask=self_mask))
        x = ad.add(x, self.cross_attn(self.ln_cross(x), enc_out, mask=cross_mask))
        x = ad.add(x, self.ff(self.ln_ff(x)))
        return x


class ToyLm(nn.Module):
    """Encoder-decoder transformer over the closed answer vocabulary."""

    def __init__(self, tokenizer: Tokenizer, config: ToyLmConfig,
                 rng: np.random.Generator):
        super().__init__()
        self.tokenizer = tokenizer
        self.config = config
        d = config.d_model
        self.tok_emb = nn.Embedding(tokenizer.size, d, rng)
        self.pos_enc = nn.Embedding(config.max_input_len, d, rng)
        self.pos_dec = nn.Embedding(config.max_output_len, d, rng)
        # delimiter rows around the injected event segment; these stay
        # trainable after the base model is frozen
        self.inj_markers = nn.param(rng, (2, d), scale=0.1)
        self.enc_blocks = nn.ModuleList([
            nn.TransformerBlock(d, config.heads, config.d_ff, rng)
            for _ in range(config.enc_layers)])
        self.enc_ln = nn.LayerNorm(d)
        self.dec_blocks = nn.ModuleList([
            _DecoderBlock(d, config.heads, config.d_ff, rng)
            for _ in range(config.dec_layers)])
        self.dec_ln = nn.LayerNorm(d)
        self.lm_head = nn.Linear(d, tokenizer.size, rng)

    # ------------------------------------------------------------------
    # input assembly

    def inject(self, prefix: str, body: str,
               event_queries: Tensor | None) -> MultimodalInput:
        """Single-example stream [prefix][<seq>][q rows][</seq>][body]."""
        prefix_ids = np.array([self.tokenizer.tokenize(prefix)], dtype=np.int64)
        body_tok = self.tokenizer.tokenize(body)
        body_ids = np.array([body_tok], dtype=np.int64)
        injected = None
        if event_queries is not None and event_queries.shape[0] > 0:
            if event_queries.ndim != 2 or event_queries.shape[1] != self.config.d_model:
                raise ConfigError(
                    f"injected rows must be (q, {self.config.d_model}), "
                    f"got {event_queries.shape}")
            injected = ad.reshape(event_queries, (1,) + event_queries.shape)
        mm = MultimodalInput(prefix_ids, body_ids,
                             np.ones_like(body_ids, dtype=np.float64), injected)
        if mm.length > self.config.max_input_len:
            raise ConfigError(
                f"input stream of {mm.length} tokens (prefix "
                f"{prefix_ids.shape[1]} + 2 delimiters + {mm.n_injected} "
                f"injected + body {body_ids.shape[1]}) exceeds max input "
                f"length {self.config.max_input_len}")
        return mm

    def batch_inputs(self, prefix_ids: np.ndarray, body_ids: np.ndarray,
                     body_valid: np.ndarray,
                     injected: Tensor | None) -> MultimodalInput:
        mm = MultimodalInput(prefix_ids, body_ids, body_valid, injected)
        if mm.length > self.config.max_input_len:
            raise ConfigError(
                f"input stream of {mm.length} tokens exceeds max input "
                f"length {self.config.max_input_len}")
        return mm

    def _assemble(self, mm: MultimodalInput) -> tuple[Tensor, np.ndarray]:
        b = mm.batch
        parts = [self.tok_emb(mm.prefix_ids)]
        ones = Tensor(np.ones((b, 1, 1)))
        marker_open = ad.mul(ad.reshape(self.inj_markers[0:1, :], (1, 1, -1)), ones)
        marker_close = ad.mul(ad.reshape(self.inj_markers[1:2, :], (1, 1, -1)), ones)
        parts.append(marker_open)
        if mm.injected is not None:
            parts.append(mm.injected)
        parts.append(marker_close)
        parts.append(self.tok_emb(mm.body_ids))
        stream = ad.concat(parts, axis=1)
        valid = np.concatenate([
            np.ones((b, mm.prefix_ids.shape[1] + 1)),
            np.ones((b, mm.n_injected + 1)),
            mm.body_valid], axis=1)
        return stream, valid

    def encode(self, mm: MultimodalInput) -> tuple[Tensor, np.ndarray]:
        stream, valid = self._assemble(mm)
        length = stream.shape[1]
        x = ad.add(stream, self.pos_enc(np.arange(length)[None, :]))
        mask = nn.padding_mask(valid)
        for block in self.enc_blocks:
            x = block(x, mask=mask)
        return self.enc_ln(x), valid

    def decode(self, dec_ids: np.ndarray, enc_out: Tensor,
               enc_valid: np.ndarray) -> Tensor:
        """Teacher-forced decoder logits (B, T_dec, vocab)."""
        b, t = dec_ids.shape
        if t > self.config.max_output_len:
            raise ConfigError(
                f"decoder length {t} exceeds max output length "
                f"{self.config.max_output_len}")
        x = ad.add(self.tok_emb(dec_ids), self.pos_dec(np.arange(t)[None, :]))
        self_mask = nn.causal_mask(t)
        cross_mask = nn.padding_mask(enc_valid)
        for block in self.dec_blocks:
            x = block(x, enc_out, self_mask, cross_mask)
        return self.lm_head(self.dec_ln(x))

    def answer_loss(self, mm: MultimodalInput, answer_ids: np.ndarray,
                    answer_valid: np.ndarray) -> Tensor:
        """Cross-entropy of the answer tokens (teacher forcing).

        ``answer_ids`` is (B, T) padded with PAD; each row's real tokens end
        with EOS. Decoder input is the BOS-shifted sequence.
        """
        b, t = answer_ids.shape
        dec_in = np.concatenate(
            [np.full((b, 1), BOS, dtype=np.int64), answer_ids[:, :-1]], axis=1)
        enc_out, enc_valid = self.encode(mm)
        logits = self.decode(dec_in, enc_out, enc_valid)
        return ad.masked_cross_entropy(logits, answer_ids, answer_valid)

    # ------------------------------------------------------------------
    # generation

    def generate(self, mm: MultimodalInput,
                 max_new_tokens: int | None = None
                 ) -> tuple[list[str], list[np.ndarray]]:
        """Greedy decode. Returns per-row text plus the per-step next-token
        distributions, one (batch, vocab) array per step (step 0 first)."""
        limit = max_new_tokens or (self.config.max_output_len - 1)
        limit = min(limit, self.config.max_output_len - 1)
        b = mm.batch
        with ad.no_grad():
            enc_out, enc_valid = self.encode(mm)
            rows = np.full((b, 1), BOS, dtype=np.int64)
            done = np.zeros(b, dtype=bool)
            distributions: list[np.ndarray] = []
            for _ in range(limit):
                logits = self.decode(rows, enc_out, enc_valid)
                last = logits.data[:, -1, :]
                shifted = last - last.max(axis=-1, keepdims=True)
                probs = np.exp(shifted)
                probs /= probs.sum(axis=-1, keepdims=True)
                distributions.append(probs.copy())
                nxt = last.argmax(axis=-1)
                nxt[done] = PAD
                rows = np.concatenate([rows, nxt[:, None]], axis=1)
                done |= nxt == EOS
                if done.all():
                    break
        texts = []
        for r in range(b):
            ids = []
            for i in rows[r, 1:]:
                if i in (EOS, PAD):
                    break
                if i >= 5:  # drop stray specials an untrained model may emit
                    ids.append(int(i))
            texts.append(self.tokenizer.detokenize(ids) if ids else "")
        return texts, distributions

    def binary_score(self, mm: MultimodalInput) -> float:
        """p(Yes) - p(No) at the first decoding position, in [-1, 1]."""
        if self.tokenizer.yes_id is None or self.tokenizer.no_id is None:
            raise ConfigError("tokenizer lacks single Yes/No tokens")
        scores = self.binary_scores(mm)
        return float(scores[0])

    def binary_scores(self, mm: MultimodalInput) -> np.ndarray:
        with ad.no_grad():
            enc_out, enc_valid = self.encode(mm)
            dec_in = np.full((mm.batch, 1), BOS, dtype=np.int64)
            logits = self.decode(dec_in, enc_out, enc_valid).data[:, 0, :]
        shifted = logits - logits.max(axis=-1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=-1, keepdims=True)
        return probs[:, self.tokenizer.yes_id] - probs[:, self.tokenizer.no_id]


# ---------------------------------------------------------------------------
# LoRA application


def apply_lora(model: ToyLm, config: LoraConfig,
               rng: np.random.Generator) -> dict:
    """Attach adapters to every attention's query and value projections.

    All existing model parameters are frozen first; afterwards only the
    adapter matrices (and nothing in the base) require gradients. The
    injection delimiter rows are deliberately left trainable: they belong to
    the injection apparatus, not the frozen language backbone.

    Returns a report with the exact trainable-value census alongside the
    2 * layers * d_model * rank rule of thumb for comparison.
    """
    model.freeze()
    model.inj_markers.requires_grad = True

    adapted = []

    def visit(module: nn.Module, path: str):
        for name, child in list(module._modules.items()):
            child_path = f"{path}{name}."
            if isinstance(child, nn.MultiHeadAttention):
                for proj_name in ("wq", "wv"):
                    base = getattr(child, proj_name)
                    wrapped = nn.LoraLinear(base, config.rank, config.alpha,
                                            rng, dropout=config.dropout)
                    setattr(child, proj_name, wrapped)
                    adapted.append({
                        "matrix": f"{child_path}{proj_name}",
                        "d_in": base.d_in, "d_out": base.d_out,
                        "trainable": config.rank * (base.d_in + base.d_out)})
            visit(child, child_path)

    visit(model, "")
    census = sum(m["trainable"] for m in adapted)
    layers = model.config.enc_layers + model.config.dec_layers
    formula = 2 * layers * model.config.d_model * config.rank
    markers = model.inj_markers.size
    return {
        "adapted_matrices": adapted,
        "trainable_adapter_values": census,
        "trainable_marker_values": markers,
        "trainable_total": census + markers,
        "rule_of_thumb_2_L_d_r": formula,
        "rank": config.rank,
        "alpha": config.alpha,
    }


def set_lora_training(model: ToyLm, training: bool) -> None:
    """Toggle adapter dropout (training) vs deterministic eval behavior."""

    def visit(module: nn.Module):
        for child in module._modules.values():
            if isinstance(child, nn.LoraLinear):
                child.training = training
            visit(child)

    visit(model)

"""Caption vocabulary and the image-query / text-key-value fusion transformer."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, FormatError, InputError
from .nn import Embedding, LayerNorm, Linear, Module
from .tensor import Parameter, Tensor

PAD = 0
UNK = 1
RESERVED = 2


class Vocabulary:
    """Closed word list; ids 0 and 1 are PAD and UNK."""

    def __init__(self, tokens: Iterable[str]):
        self.tokens = []
        self.ids = {}
        for tok in tokens:
            tok = tok.strip().lower()
            if not tok or tok in self.ids:
                continue
            self.ids[tok] = RESERVED + len(self.tokens)
            self.tokens.append(tok)

    def __len__(self):
        return RESERVED + len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, word: str) -> int:
        return self.ids.get(word, UNK)

    def word(self, i: int) -> str:
        if i == PAD:
            return "<pad>"
        if i == UNK:
            return "<unk>"
        return self.tokens[i - RESERVED]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        try:
            lines = Path(path).read_text().splitlines()
        except (FileNotFoundError, UnicodeDecodeError) as exc:
            raise FormatError(f"cannot read vocabulary {path}") from exc
        return cls(lines)


def tokenize(caption: str, vocab: Vocabulary, max_len: int = 12) -> list[int]:
    """Lowercase, split on whitespace, map to ids, pad/truncate to ``max_len``."""
    words = caption.lower().split()
    if not words:
        raise InputError("caption is empty")
    ids = [vocab.id(w) for w in words[:max_len]]
    return ids + [PAD] * (max_len - len(ids))


@dataclass(frozen=True)
class FusionConfig:
    d_model: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    ff_width: int = 128
    max_len: int = 12
    d_pos: int = 16
    out_gain: float = 0.1


class CrossBlock(Module):
    """Pre-norm cross-attention (image queries, text keys/values) + feed-forward."""

    def __init__(self, d: int, n_heads: int, ff: int, rng):
        super().__init__()
        if d % n_heads:
            raise DimensionError(f"d_model {d} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.ln_q = LayerNorm(d)
        self.ln_kv = LayerNorm(d)
        self.wq = Linear(d, d, rng, bias=False)
        self.wk = Linear(d, d, rng, bias=False)
        self.wv = Linear(d, d, rng, bias=False)
        self.wo = Linear(d, d, rng)
        self.ln_ff = LayerNorm(d)
        self.ff1 = Linear(d, ff, rng)
        self.ff2 = Linear(ff, d, rng)

    def _heads(self, x: Tensor) -> Tensor:
        B, L, d = x.shape
        return T.transpose(x.reshape(B, L, self.n_heads, d // self.n_heads), (0, 2, 1, 3))

    def forward(self, img: Tensor, txt: Tensor, mask: np.ndarray) -> Tensor:
        B, Lq, d = img.shape
        kv = self.ln_kv(txt)
        q = self._heads(self.wq(self.ln_q(img)))
        k = self._heads(self.wk(kv))
        v = self._heads(self.wv(kv))
        att = T.scaled_dot_attention(q, k, v, mask[:, None, None, :])
        att = T.transpose(att, (0, 2, 1, 3)).reshape(B, Lq, d)
        img = img + self.wo(att)
        return img + self.ff2(T.silu(self.ff1(self.ln_ff(img))))


class Fusion(Module):
    """Fuse a latent grid with a caption into a grid of the same shape.

    ``forward`` returns ``z_e + fuse(...)``: the transformer output is a
    correction added to the encoder grid, so an untrained fusion starts near
    the plain image latent.
    """

    def __init__(self, vocab: Vocabulary, channels: int, grid: tuple, cfg: FusionConfig = FusionConfig(),
                 seed: int = 0):
        super().__init__()
        rng = np.random.default_rng([seed, 2])
        self.vocab = vocab
        self.cfg = cfg
        self.channels = channels
        self.grid = tuple(grid)
        h, w = self.grid
        d = cfg.d_model
        self.word_emb = Embedding(len(vocab), d, rng)
        self.text_pos = Parameter(rng.normal(0.0, 0.02, size=(cfg.max_len, d)))
        self.img_proj = Linear(channels, d, rng)
        self.row_emb = Parameter(rng.normal(0.0, 0.02, size=(h, cfg.d_pos)))
        self.col_emb = Parameter(rng.normal(0.0, 0.02, size=(w, cfg.d_pos)))
        self.pos_proj = Linear(2 * cfg.d_pos, d, rng)
        self.blocks = []
        for i in range(cfg.n_blocks):
            blk = CrossBlock(d, cfg.n_heads, cfg.ff_width, rng)
            setattr(self, f"block{i}", blk)
            self.blocks.append(blk)
        self.out_ln = LayerNorm(d)
        self.out_proj = Linear(d, channels, rng, gain=cfg.out_gain)

    def tokenize(self, captions: Sequence[str]) -> np.ndarray:
        return np.array([tokenize(c, self.vocab, self.cfg.max_len) for c in captions], dtype=np.int64)

    def embed_text(self, ids) -> tuple[Tensor, np.ndarray]:
        """Word + learned position embeddings, and the keep-mask (False at PAD)."""
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        if ids.shape[1] != self.cfg.max_len:
            raise ContractError(f"expected {self.cfg.max_len} token ids, got {ids.shape[1]}")
        if ids.min() < 0 or ids.max() >= len(self.vocab):
            raise ContractError("token id out of vocabulary range")
        tok = self.word_emb(ids) + self.text_pos
        return tok, ids != PAD

    def positional_2d(self) -> Tensor:
        h, w = self.grid
        rows = T.embedding(self.row_emb, np.repeat(np.arange(h), w))
        cols = T.embedding(self.col_emb, np.tile(np.arange(w), h))
        return self.pos_proj(T.concat([rows, cols], axis=1))  # (h*w, d)

    def embed_image_tokens(self, z_e) -> Tensor:
        """(B, c, h, w) grid -> (B, h*w, d) tokens, row-major over sites."""
        z_e = T.as_tensor(z_e)
        B, c, h, w = z_e.shape
        if c != self.channels or (h, w) != self.grid:
            raise DimensionError(f"latent grid {z_e.shape} does not match fusion ({self.channels}, {self.grid})")
        flat = T.transpose(z_e, (0, 2, 3, 1)).reshape(B, h * w, c)
        return self.img_proj(flat) + self.positional_2d()

    def fuse(self, image_tokens: Tensor, text_tokens: Tensor, mask: np.ndarray) -> Tensor:
        """Run the blocks and project back to a (B, c, h, w) grid."""
        mask = np.atleast_2d(np.asarray(mask, dtype=bool))
        if not mask.any(axis=1).all():
            raise InputError("caption has no non-PAD tokens to attend to")
        if image_tokens.shape[0] != text_tokens.shape[0]:
            raise DimensionError("image and text batch sizes differ")
        x = image_tokens
        for blk in self.blocks:
            x = blk(x, text_tokens, mask)
        B = x.shape[0]
        h, w = self.grid
        out = self.out_proj(self.out_ln(x))  # (B, h*w, c)
        return T.transpose(out.reshape(B, h, w, self.channels), (0, 3, 1, 2))

    def forward(self, z_e, ids) -> Tensor:
        txt, mask = self.embed_text(ids)
        img = self.embed_image_tokens(z_e)
        return z_e + self.fuse(img, txt, mask)

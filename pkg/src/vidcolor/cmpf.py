"""Caption embedding and cross-modality pre-fusion.

The pre-fusion stack refines caption embeddings against compressed luminance
features: each block runs self-attention over the words, masked
cross-attention from the words to the visual tokens (color words are held
out of the cross-modal update), and a feed-forward layer. The refined
embeddings re-enter through a zero-initialized projection, so a fresh stack
returns its input unchanged.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ValidationError
from .layers import MultiHeadAttention, sinusoidal_embedding
from .lexicon import COLOR_WORDS, SHAPE_KINDS
from .tda import TemporalDeformableAttention

PAD, OOV = "<pad>", "<oov>"
FUNCTION_WORDS = ("a", "an", "and", "the", "with")
_WORD = re.compile(r"[a-z0-9]+")


def tokenize(caption: str) -> list[str]:
    return _WORD.findall(caption.lower())


class Vocab:
    """Fixed word list: padding, out-of-vocabulary, function words, colors, shapes."""

    def __init__(self, color_words=COLOR_WORDS, extra_words=()):
        words = [PAD, OOV, *FUNCTION_WORDS, *color_words, *SHAPE_KINDS, *extra_words]
        self.words = list(dict.fromkeys(words))
        self.index = {w: i for i, w in enumerate(self.words)}
        self.color_words = frozenset(color_words)
        self.pad_id = self.index[PAD]
        self.oov_id = self.index[OOV]

    def __len__(self):
        return len(self.words)

    def encode(self, caption: str) -> list[int]:
        tokens = tokenize(caption)
        if not tokens:
            raise ValidationError("caption is empty")
        return [self.index.get(t, self.oov_id) for t in tokens]

    def color_mask(self, ids) -> list[bool]:
        return [self.words[i] in self.color_words for i in ids]

    def to_json(self) -> dict:
        return {"words": self.words, "color_words": sorted(self.color_words)}

    @classmethod
    def from_json(cls, data) -> Vocab:
        vocab = cls.__new__(cls)
        vocab.words = list(data["words"])
        vocab.index = {w: i for i, w in enumerate(vocab.words)}
        vocab.color_words = frozenset(data["color_words"])
        vocab.pad_id = vocab.index[PAD]
        vocab.oov_id = vocab.index[OOV]
        return vocab


@dataclass
class TokenSequence:
    """A batch of padded captions. Masks are (B, N); ``embeddings`` is (B, N, C)."""

    token_ids: torch.Tensor
    embeddings: torch.Tensor
    color_mask: torch.Tensor
    pad_mask: torch.Tensor

    def with_embeddings(self, embeddings: torch.Tensor) -> TokenSequence:
        return TokenSequence(self.token_ids, embeddings, self.color_mask, self.pad_mask)


class TextEmbedder(nn.Module):
    """Learnable word table plus a fixed sinusoidal position code."""

    def __init__(self, vocab: Vocab, dim: int = 64, max_len: int = 32):
        super().__init__()
        self.vocab = vocab
        self.dim = dim
        self.table = nn.Embedding(len(vocab), dim)
        self.register_buffer(
            "positions", sinusoidal_embedding(torch.arange(max_len), dim).float(), persistent=False
        )

    def token_batch(self, captions) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        encoded = [self.vocab.encode(c) for c in captions]
        n = max(len(e) for e in encoded)
        if n > self.positions.shape[0]:
            raise ValidationError(f"caption longer than {self.positions.shape[0]} tokens")
        ids = torch.full((len(encoded), n), self.vocab.pad_id, dtype=torch.long)
        color = torch.zeros(len(encoded), n, dtype=torch.bool)
        for i, e in enumerate(encoded):
            ids[i, : len(e)] = torch.tensor(e)
            color[i, : len(e)] = torch.tensor(self.vocab.color_mask(e))
        return ids, color, ids == self.vocab.pad_id

    def forward(self, captions) -> TokenSequence:
        if isinstance(captions, str):
            captions = [captions]
        ids, color, pad = self.token_batch(captions)
        emb = self.table(ids) + self.positions[: ids.shape[1]].to(self.table.weight.dtype)
        return TokenSequence(ids, emb, color, pad)


def embed_caption(caption: str, embedder: TextEmbedder) -> TokenSequence:
    """Embed a single caption; tensors keep a batch axis of 1."""
    return embedder(caption)


def compress_visual(y_lum: torch.Tensor, tda: TemporalDeformableAttention) -> torch.Tensor:
    """Deformable context tokens of the luminance features, (B, H'W'F', C)."""
    unbatched = y_lum.dim() == 4
    tokens = tda.context(y_lum.unsqueeze(0) if unbatched else y_lum)
    return tokens[0] if unbatched else tokens


class FusionBlock(nn.Module):
    def __init__(self, dim: int, visual_dim: int, heads: int = 4, ffn_mult: int = 2):
        super().__init__()
        self.msa = MultiHeadAttention(dim, heads=heads)
        self.mca = MultiHeadAttention(dim, visual_dim, heads=heads)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_mult * dim), nn.GELU(), nn.Linear(ffn_mult * dim, dim))
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)

    def cross(self, y, visual, color_mask):
        update = self.mca(y, visual)
        # color words neither query nor absorb visual context
        return self.norm2(update * (~color_mask).unsqueeze(-1).to(update.dtype) + y)

    def forward(self, y, visual, color_mask, pad_mask=None):
        y = self.norm1(self.msa(y, key_padding_mask=pad_mask) + y)
        y = self.cross(y, visual, color_mask)
        return self.norm3(self.ffn(y) + y)


class CrossModalityPreFusion(nn.Module):
    """``blocks`` fusion blocks plus the zero-initialized output projection."""

    def __init__(
        self,
        dim: int = 64,
        visual_dim: int = 32,
        blocks: int = 2,
        heads: int = 4,
        visual_heads: int = 4,
        alpha: float = 4.0,
        rate_spatial: int = 2,
        rate_temporal: int = 2,
    ):
        super().__init__()
        self.visual_tda = TemporalDeformableAttention(
            visual_dim, visual_heads, alpha, rate_spatial, rate_temporal
        )
        self.blocks = nn.ModuleList(FusionBlock(dim, visual_dim, heads) for _ in range(blocks))
        self.w_e = nn.Linear(dim, dim, bias=False)
        nn.init.zeros_(self.w_e.weight)

    def forward(self, tokens: TokenSequence, y_lum: torch.Tensor) -> torch.Tensor:
        y0 = tokens.embeddings
        visual = compress_visual(y_lum, self.visual_tda)
        y = y0
        for block in self.blocks:
            y = block(y, visual, tokens.color_mask, tokens.pad_mask)
        return F.linear(y, self.w_e.weight) + y0


def cmpf_forward(tokens: TokenSequence, y_lum: torch.Tensor, params: CrossModalityPreFusion) -> torch.Tensor:
    return params(tokens, y_lum)

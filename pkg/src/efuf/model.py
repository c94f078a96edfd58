"""Miniature differentiable captioner: image-feature projector + tiny decoder.

The projector maps an image feature vector to a fixed number of prefix token
embeddings; a small causal transformer decodes caption tokens conditioned on
that prefix. Two named parameter blocks ("image_projector", "decoder") carry
per-block trainable flags so finetuning can be restricted to the multimodal
mapping layer alone. Double precision by default so finite-difference checks
are meaningful.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ["<pad>", "<bos>", "<eos>", "<unk>"]

CHECKPOINT_FORMAT = "efuf-checkpoint/v1"


class ToyTokenizer:
    """Whitespace tokenizer over a fixed corpus vocabulary.

    decode(encode(t)) reproduces in-vocabulary text up to whitespace
    normalization; unknown tokens map to <unk>. Ids 0-3 are reserved for
    pad, begin-of-caption, end-of-caption, and unknown.
    """

    def __init__(self, vocabulary: list[str]):
        if vocabulary[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise ConfigurationError("vocabulary must start with the reserved special tokens")
        self.vocabulary = list(vocabulary)
        self._ids = {tok: i for i, tok in enumerate(self.vocabulary)}

    @classmethod
    def from_corpus(cls, texts) -> "ToyTokenizer":
        words = sorted({tok for text in texts for tok in text.split()})
        return cls(SPECIAL_TOKENS + words)

    @property
    def vocab_size(self) -> int:
        return len(self.vocabulary)

    def encode(self, text: str) -> list[int]:
        return [self._ids.get(tok, UNK) for tok in text.split()]

    def decode(self, ids) -> str:
        return " ".join(self.vocabulary[i] for i in ids if i >= len(SPECIAL_TOKENS))


@dataclass(frozen=True)
class ModelConfig:
    d_img: int = 16
    prefix_tokens: int = 4
    embed_dim: int = 32
    layers: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    max_len: int = 128
    dtype: str = "float64"

    def torch_dtype(self) -> torch.dtype:
        return {"float64": torch.float64, "float32": torch.float32}[self.dtype]


class _Block(nn.Module):
    """Pre-norm transformer block with causal self-attention."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        if dim % heads != 0:
            raise ConfigurationError(f"embed_dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        hd = d // self.heads
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        q = q.view(b, t, self.heads, hd).transpose(1, 2)
        k = k.view(b, t, self.heads, hd).transpose(1, 2)
        v = v.view(b, t, self.heads, hd).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        causal = torch.triu(torch.ones(t, t, dtype=torch.bool, device=x.device), diagonal=1)
        scores = scores.masked_fill(causal, float("-inf"))
        att = F.softmax(scores, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, t, d)
        x = x + self.proj(y)
        h = self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return x + h


class ToyMLLM(nn.Module):
    """Prefix-conditioned autoregressive captioner with named parameter blocks."""

    def __init__(self, config: ModelConfig, vocab_size: int, seed: int = 0):
        super().__init__()
        self.config = config
        self.vocab_size = vocab_size
        e = config.embed_dim
        self.image_projector = nn.Linear(config.d_img, config.prefix_tokens * e)
        self.tok_emb = nn.Embedding(vocab_size, e)
        self.pos_emb = nn.Embedding(config.max_len, e)
        self.blocks = nn.ModuleList(
            _Block(e, config.heads, config.mlp_ratio) for _ in range(config.layers)
        )
        self.ln_f = nn.LayerNorm(e)
        self.head = nn.Linear(e, vocab_size)
        self.to(config.torch_dtype())
        self._init_parameters(seed)

    def _init_parameters(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in sorted(self.named_parameters(), key=lambda kv: kv[0]):
                if name.endswith("bias") or ".ln" in name or name.startswith("ln_f"):
                    if name.endswith("weight"):  # layer-norm scale
                        p.fill_(1.0)
                    else:
                        p.zero_()
                else:
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.02)

    # -- parameter blocks ---------------------------------------------------

    def block_names(self) -> list[str]:
        return ["image_projector", "decoder"]

    def block_parameters(self, block: str) -> list[tuple[str, nn.Parameter]]:
        if block not in self.block_names():
            raise ConfigurationError(f"unknown parameter block {block!r}; have {self.block_names()}")
        pairs = list(self.named_parameters())
        if block == "image_projector":
            return [(n, p) for n, p in pairs if n.startswith("image_projector.")]
        return [(n, p) for n, p in pairs if not n.startswith("image_projector.")]

    # -- forward paths ------------------------------------------------------

    def _check_feature(self, image_feature: torch.Tensor) -> torch.Tensor:
        feat = torch.as_tensor(image_feature, dtype=self.config.torch_dtype())
        if feat.shape[-1] != self.config.d_img:
            raise ValueError(f"image feature dim {feat.shape[-1]} != configured d_img {self.config.d_img}")
        return feat.reshape(-1, self.config.d_img)

    def _logits(self, image_feature, token_ids: torch.Tensor) -> torch.Tensor:
        """Head logits over the full sequence [image prefix; tokens], shape (B, k+T, V)."""
        feat = self._check_feature(image_feature)
        ids = torch.as_tensor(token_ids, dtype=torch.long)
        if ids.ndim == 1:
            ids = ids.unsqueeze(0)
        if ids.shape[1] == 0:
            raise ValueError("token_ids must be nonempty")
        k = self.config.prefix_tokens
        if k + ids.shape[1] > self.config.max_len:
            raise ValueError(f"sequence length {k + ids.shape[1]} exceeds max_len {self.config.max_len}")
        if feat.shape[0] == 1 and ids.shape[0] > 1:
            feat = feat.expand(ids.shape[0], -1)
        prefix = self.image_projector(feat).view(feat.shape[0], k, self.config.embed_dim)
        x = torch.cat([prefix, self.tok_emb(ids)], dim=1)
        x = x + self.pos_emb(torch.arange(x.shape[1]))
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln_f(x))

    def log_probs(self, image_feature, token_ids) -> torch.Tensor:
        """Row i is log P(token_i | image prefix, tokens < i); shape (..., T, V)."""
        ids = torch.as_tensor(token_ids, dtype=torch.long)
        squeeze = ids.ndim == 1
        k = self.config.prefix_tokens
        t = ids.shape[-1]
        logits = self._logits(image_feature, ids)[:, k - 1 : k - 1 + t, :]
        out = F.log_softmax(logits, dim=-1)
        return out.squeeze(0) if squeeze else out

    def forward(self, image_feature, token_ids) -> torch.Tensor:
        """Per-position next-token probability distributions (each sums to 1)."""
        return self.log_probs(image_feature, token_ids).exp()

    def next_log_probs(self, image_feature, token_ids) -> torch.Tensor:
        """log P(next token | image prefix, all of token_ids); shape (V,)."""
        logits = self._logits(image_feature, token_ids)
        return F.log_softmax(logits[0, -1, :], dim=-1)


def select_trainable(model: ToyMLLM, blocks: list[str]) -> dict[str, bool]:
    """Freeze everything outside the listed blocks; returns the block mask."""
    for b in blocks:
        if b not in model.block_names():
            raise ConfigurationError(f"unknown parameter block {b!r}; have {model.block_names()}")
    mask = {b: b in blocks for b in model.block_names()}
    for b, trainable in mask.items():
        for _, p in model.block_parameters(b):
            p.requires_grad_(trainable)
    return mask


def trainable_parameters(model: ToyMLLM) -> list[nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


@torch.no_grad()
def greedy_caption(
    model: ToyMLLM,
    tokenizer: ToyTokenizer,
    image_feature,
    prompt: str,
    max_tokens: int = 48,
) -> str:
    """Greedy decode a caption for one image; deterministic."""
    ids = [BOS] + tokenizer.encode(prompt)
    generated: list[int] = []
    for _ in range(max_tokens):
        nxt = int(torch.argmax(model.next_log_probs(image_feature, ids + generated)))
        if nxt == EOS:
            break
        generated.append(nxt)
    return tokenizer.decode(generated)


def save_checkpoint(model: ToyMLLM, tokenizer: ToyTokenizer, path: Path | str, meta: dict | None = None):
    """Self-describing checkpoint: named blocks with shapes and flat values."""
    blocks = {}
    for block in model.block_names():
        blocks[block] = {
            name: {"shape": list(p.shape), "values": p.detach().reshape(-1).tolist()}
            for name, p in model.block_parameters(block)
        }
    payload = {
        "format": CHECKPOINT_FORMAT,
        "meta": meta or {},
        "model_config": asdict(model.config),
        "vocabulary": tokenizer.vocabulary,
        "blocks": blocks,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, ensure_ascii=False)
        f.write("\n")


def load_checkpoint(path: Path | str) -> tuple[ToyMLLM, ToyTokenizer, dict]:
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"unsupported checkpoint format {payload.get('format')!r}")
    config = ModelConfig(**payload["model_config"])
    tokenizer = ToyTokenizer(payload["vocabulary"])
    model = ToyMLLM(config, tokenizer.vocab_size)
    with torch.no_grad():
        for block, tensors in payload["blocks"].items():
            named = dict(model.block_parameters(block))
            for name, spec in tensors.items():
                p = named[name]
                p.copy_(torch.tensor(spec["values"], dtype=p.dtype).reshape(spec["shape"]))
    return model, tokenizer, payload.get("meta", {})

"""A small character-level decoder-only transformer with intervention hooks.

Each block is pre-norm: ``h = h + attn(ln(h)); h = h + mlp(ln(h))``.  The
residual-stream output of block ``l`` is the representation that
interventions rewrite before it is handed to block ``l + 1``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .interventions import InterventionSet, apply as apply_intervention
from .numerics import DTYPE, AdamWState, adamw_step

log = logging.getLogger(__name__)

END = "\n"
DEFAULT_CHARS = END + " " + "abcdefghijklmnopqrstuvwxyz" + "-.,:?'"


class Vocab:
    """Character <-> id bijection."""

    def __init__(self, chars: str = DEFAULT_CHARS):
        if len(set(chars)) != len(chars):
            raise ValueError("vocabulary characters must be unique")
        self.chars = chars
        self._ids = {ch: i for i, ch in enumerate(chars)}

    def __len__(self):
        return len(self.chars)

    def __contains__(self, ch):
        return ch in self._ids

    @property
    def end_id(self) -> int:
        return self._ids[END]

    def tokenize(self, text: str) -> list[int]:
        try:
            return [self._ids[ch] for ch in text]
        except KeyError as e:
            raise ValueError(f"character {e.args[0]!r} is not in the vocabulary") from None

    def detokenize(self, ids: Sequence[int]) -> str:
        n = len(self.chars)
        for i in ids:
            if not 0 <= int(i) < n:
                raise ValueError(f"invalid token id {i}")
        return "".join(self.chars[int(i)] for i in ids)


@dataclass
class ModelConfig:
    chars: str = DEFAULT_CHARS
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    context: int = 128
    mlp_mult: int = 4
    seed: int = 0


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(d, dtype=DTYPE)
        self.qkv = nn.Linear(d, 3 * d, dtype=DTYPE)
        self.proj = nn.Linear(d, d, dtype=DTYPE)
        self.ln2 = nn.LayerNorm(d, dtype=DTYPE)
        self.fc = nn.Linear(d, cfg.mlp_mult * d, dtype=DTYPE)
        self.out = nn.Linear(cfg.mlp_mult * d, d, dtype=DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, d = x.shape
        hd = d // self.n_heads
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        q = q.view(B, T, self.n_heads, hd).transpose(1, 2)
        k = k.view(B, T, self.n_heads, hd).transpose(1, 2)
        v = v.view(B, T, self.n_heads, hd).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        causal = torch.ones(T, T, dtype=torch.bool).tril()
        att = att.masked_fill(~causal, float("-inf")).softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, T, d)
        x = x + self.proj(y)
        return x + self.out(F.gelu(self.fc(self.ln2(x))))


@dataclass
class ForwardOutput:
    logits: torch.Tensor
    # pre-intervention residual-stream output per captured layer, (B, T, d)
    hidden: dict[int, torch.Tensor] = field(default_factory=dict)


class TinyModel(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        if cfg.d_model % cfg.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.cfg = cfg
        self.vocab = Vocab(cfg.chars)
        gen = torch.Generator().manual_seed(cfg.seed)
        V, d = len(self.vocab), cfg.d_model
        self.tok_emb = nn.Parameter(torch.randn(V, d, dtype=DTYPE, generator=gen) * 0.1)
        self.pos_emb = nn.Parameter(torch.randn(cfg.context, d, dtype=DTYPE, generator=gen) * 0.1)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(d, dtype=DTYPE)
        self.head = nn.Linear(d, V, bias=False, dtype=DTYPE)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if p.dim() == 2 and name not in ("tok_emb", "pos_emb"):
                    p.copy_(torch.randn(p.shape, dtype=DTYPE, generator=gen) / math.sqrt(p.shape[1]))
                elif name.endswith(".bias"):
                    p.zero_()

    @property
    def n_layers(self) -> int:
        return self.cfg.n_layers

    @property
    def d_model(self) -> int:
        return self.cfg.d_model

    def freeze(self) -> "TinyModel":
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def forward(
        self,
        tokens,
        interventions: InterventionSet | None = None,
        mask: torch.Tensor | None = None,
        capture: Sequence[int] = (),
    ) -> ForwardOutput:
        """Logits ``(B, T, V)`` for a batch of equal-length token rows.

        ``mask`` marks the intervened positions; it is required whenever
        ``interventions`` is given.  Layers in ``capture`` (and every
        intervened layer) report their pre-intervention outputs.
        """
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        if tokens.dim() == 1:
            tokens = tokens[None, :]
        B, T = tokens.shape
        if T > self.cfg.context:
            raise ValueError(f"sequence length {T} exceeds context {self.cfg.context}")
        layers = interventions.layers if interventions is not None else {}
        for l in list(layers) + list(capture):
            if not 0 <= l < self.n_layers:
                raise ValueError(f"layer index {l} out of range for {self.n_layers} layers")
        if layers and mask is None:
            raise ValueError("an intervention mask is required")
        if mask is not None:
            mask = torch.as_tensor(mask, dtype=torch.bool).reshape(B, T)
        want = set(capture) | set(layers)
        hidden = {}
        x = self.tok_emb[tokens] + self.pos_emb[:T]
        for l, block in enumerate(self.blocks):
            x = block(x)
            if l in want:
                hidden[l] = x
            if l in layers:
                x = torch.where(mask[..., None], apply_intervention(layers[l], x), x)
        return ForwardOutput(self.head(self.ln_f(x)), hidden)

    def next_token_probs(self, tokens) -> torch.Tensor:
        return self.forward(tokens).logits.softmax(-1)


def pad_batch(rows: Sequence[Sequence[int]], pad: int = 0) -> tuple[torch.Tensor, list[int]]:
    """Right-pad rows; causal attention keeps padding from affecting real positions."""
    lengths = [len(r) for r in rows]
    T = max(lengths)
    out = torch.full((len(rows), T), pad, dtype=torch.long)
    for i, r in enumerate(rows):
        out[i, : len(r)] = torch.as_tensor(list(r), dtype=torch.long)
    return out, lengths


@torch.no_grad()
def greedy_decode_batch(
    model: TinyModel,
    prompts: Sequence[Sequence[int]],
    max_new: int | Sequence[int],
    interventions: InterventionSet | None = None,
) -> list[list[int]]:
    """Greedy continuation of each prompt; stops at the end marker or ``max_new``.

    Ties go to the lowest token id.  The intervention positions are the
    last P prompt positions plus every generated position, recomputed at
    each step.  The end marker, if produced, is included in the output.
    """
    prompts = [list(p) for p in prompts]
    if any(len(p) == 0 for p in prompts):
        raise ValueError("prompt must be non-empty")
    limits = [max_new] * len(prompts) if isinstance(max_new, int) else list(max_new)
    for p, m in zip(prompts, limits):
        if len(p) + max(m - 1, 0) > model.cfg.context:
            raise ValueError("prompt plus continuation exceeds the model context")
    end = model.vocab.end_id
    seqs = [list(p) for p in prompts]
    outs: list[list[int]] = [[] for _ in prompts]
    active = [m > 0 for m in limits]
    prompt_lens = [len(p) for p in prompts]
    while any(active):
        idx = [i for i, a in enumerate(active) if a]
        toks, lengths = pad_batch([seqs[i] for i in idx])
        mask = None
        if interventions is not None:
            mask = interventions.position_mask([prompt_lens[i] for i in idx], toks.shape[1])
        logits = model(toks, interventions, mask).logits
        for j, i in enumerate(idx):
            nxt = int(torch.argmax(logits[j, lengths[j] - 1]))
            outs[i].append(nxt)
            seqs[i].append(nxt)
            if nxt == end or len(outs[i]) >= limits[i]:
                active[i] = False
    return outs


def greedy_decode(model, prompt, max_new: int, interventions=None) -> list[int]:
    return greedy_decode_batch(model, [prompt], max_new, interventions)[0]


@dataclass
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 3e-3
    min_lr: float = 1e-4
    warmup: int = 100
    weight_decay: float = 0.0
    seed: int = 0


def _lr_at(cfg: PretrainConfig, step: int) -> float:
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    frac = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1 + math.cos(math.pi * min(frac, 1.0)))


def lm_loss(model: TinyModel, rows: Sequence[Sequence[int]]) -> torch.Tensor:
    """Mean next-token cross-entropy over the non-padding positions."""
    toks, lengths = pad_batch(rows)
    logits = model(toks[:, :-1]).logits
    target = toks[:, 1:].clone()
    valid = torch.arange(target.shape[1])[None, :] < (torch.tensor(lengths)[:, None] - 1)
    target[~valid] = -100
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), target.reshape(-1), ignore_index=-100)


def pretrain(model: TinyModel, corpus: Sequence[str], cfg: PretrainConfig | None = None,
             log_every: int = 0) -> tuple[TinyModel, list[float]]:
    """Train ``model`` in place on ``corpus`` sentences; returns it and the loss curve."""
    cfg = cfg or PretrainConfig()
    if not corpus:
        raise ValueError("corpus is empty")
    rows = [model.vocab.tokenize(s) for s in corpus]
    gen = torch.Generator().manual_seed(cfg.seed)
    params = dict(model.named_parameters())
    state = AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay, beta2=0.99)
    curve: list[float] = []
    for step in range(cfg.steps):
        pick = torch.randint(len(rows), (cfg.batch_size,), generator=gen).tolist()
        loss = lm_loss(model, [rows[i] for i in pick])
        grads = torch.autograd.grad(loss, list(params.values()))
        state.lr = _lr_at(cfg, step)
        new, state = adamw_step(params, dict(zip(params, grads)), state)
        with torch.no_grad():
            for name, p in params.items():
                p.copy_(new[name])
        curve.append(loss.item())
        if log_every and (step + 1) % log_every == 0:
            log.info("pretrain step %d loss %.4f", step + 1, sum(curve[-log_every:]) / log_every)
    return model, curve


# --- checkpoint files -------------------------------------------------------
#
# Layout: ASCII header lines, then raw little-endian float64 arrays in the
# order the header lists them.
#
#   repedit-checkpoint 1
#   meta <one-line JSON>
#   tensor <name> <dim0,dim1,...>
#   ...
#   end

CKPT_MAGIC = "repedit-checkpoint"
CKPT_VERSION = 1


def save_tensors(path, tensors: dict[str, torch.Tensor], meta: dict | None = None):
    lines = [f"{CKPT_MAGIC} {CKPT_VERSION}", "meta " + json.dumps(meta or {}, sort_keys=True)]
    blobs = []
    for name, t in tensors.items():
        if any(ch.isspace() for ch in name):
            raise ValueError(f"tensor name {name!r} contains whitespace")
        shape = ",".join(str(s) for s in t.shape)
        lines.append(f"tensor {name} {shape}")
        blobs.append(t.detach().to(DTYPE).contiguous().numpy().astype("<f8").tobytes())
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for b in blobs:
            fh.write(b)


def load_tensors(path) -> tuple[dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    pos = 0
    header = []
    while True:
        nl = data.index(b"\n", pos)
        line = data[pos:nl].decode("ascii")
        pos = nl + 1
        header.append(line)
        if line == "end":
            break
    magic = header[0].split()
    if magic[0] != CKPT_MAGIC or int(magic[1]) != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint header {header[0]!r}")
    meta = json.loads(header[1][len("meta "):])
    tensors = {}
    for line in header[2:-1]:
        _, name, shape_s = line.split(" ")
        shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
        n = math.prod(shape)
        vals = np.frombuffer(data, dtype="<f8", count=n, offset=pos)
        pos += 8 * n
        tensors[name] = torch.from_numpy(vals.astype(np.float64)).reshape(shape)
    if pos != len(data):
        raise ValueError("trailing bytes after checkpoint payload")
    return tensors, meta


def save_model(model: TinyModel, path, extra: dict[str, torch.Tensor] | None = None):
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    for k, v in (extra or {}).items():
        tensors[k] = v
    save_tensors(path, tensors, {"model_config": asdict(model.cfg)})


def load_model(path) -> tuple[TinyModel, dict[str, torch.Tensor]]:
    """Returns the model and any non-model tensors stored alongside it."""
    tensors, meta = load_tensors(path)
    model = TinyModel(ModelConfig(**meta["model_config"]))
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(state)
    extra = {k: v for k, v in tensors.items() if not k.startswith("model.")}
    return model, extra

"""Hierarchical autoregressive score model.

A local encoder compresses each time step's token list into one vector (read
at a prepended [cls] slot), a global decoder runs causally over those step
vectors behind a learnable start embedding, and a local decoder expands each
contextual state back into tokens, with the state injected as the embedding
of the step's start slot. All three stacks use rotary positions; the global
decoder is the backbone that conditioning adapters attach to, so its forward
accepts per-layer LoRA and cross-attention hooks and can expose the normed
attention inputs of every layer.
"""

import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from . import numerics
from .errors import ConfigError, ParseError, ValidationError
from .score import (
    POLYPHONY_CAP,
    STEPS_PER_BAR,
    VOCAB,
    NoteEvent,
    Score,
    decode_note,
    sort_step,
    tokenize_score,
    tokenize_step,
    validate_score,
)

CHECKPOINT_MAGIC = b"FALM1"


@dataclass
class ModelConfig:
    global_layers: int = 2
    global_hidden: int = 128
    global_intermediate: int = 256
    global_heads: int = 4
    local_enc_layers: int = 1
    local_enc_hidden: int = 128
    local_enc_intermediate: int = 128
    local_enc_heads: int = 4
    local_dec_layers: int = 1
    local_dec_hidden: int = 128
    local_dec_intermediate: int = 128
    local_dec_heads: int = 4
    vocab_size: int = VOCAB.size
    max_steps: int = 192
    max_notes_per_step: int = POLYPHONY_CAP
    dropout: float = 0.1
    rope_base: float = 10000.0

    @property
    def max_tokens_per_step(self):
        # [cls]/[sos] slot + 16 instrument/note pairs + [eos]
        return 2 * self.max_notes_per_step + 2

    def validate(self):
        for name in ("global", "local_enc", "local_dec"):
            hidden = getattr(self, f"{name}_hidden")
            heads = getattr(self, f"{name}_heads")
            if hidden % heads != 0:
                raise ConfigError(f"{name} hidden {hidden} not divisible by {heads} heads")
            if (hidden // heads) % 2 != 0:
                raise ConfigError(f"{name} head dim must be even for rotary positions")
        if not (self.local_enc_hidden == self.global_hidden == self.local_dec_hidden):
            raise ConfigError("local and global hidden sizes must match")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if self.vocab_size != VOCAB.size:
            raise ConfigError(f"vocab size {self.vocab_size} does not match token layout")
        return self

    @classmethod
    def desk(cls, **overrides):
        """Small preset for tests and CPU experiments."""
        return cls(**overrides).validate()

    @classmethod
    def paper(cls, **overrides):
        """Full-scale preset."""
        base = dict(
            global_layers=12, global_hidden=768, global_intermediate=3072, global_heads=12,
            local_enc_layers=3, local_enc_hidden=768, local_enc_intermediate=768, local_enc_heads=8,
            local_dec_layers=3, local_dec_hidden=768, local_dec_intermediate=768, local_dec_heads=8,
            max_steps=384,
        )
        base.update(overrides)
        return cls(**base).validate()


class SelfAttention(nn.Module):
    """Multi-head rotary attention with optional additive LoRA deltas on the
    query and value projections."""

    def __init__(self, hidden, heads, dropout, rope_base):
        super().__init__()
        self.heads = heads
        self.head_dim = hidden // heads
        self.rope_base = rope_base
        self.wq = nn.Linear(hidden, hidden, bias=False)
        self.wk = nn.Linear(hidden, hidden, bias=False)
        self.wv = nn.Linear(hidden, hidden, bias=False)
        self.wo = nn.Linear(hidden, hidden, bias=False)
        self.drop = nn.Dropout(dropout)

    def _split(self, x):
        b, t, _ = x.shape
        return x.view(b, t, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x, positions, mask, lora_q=None, lora_v=None):
        q = self.wq(x)
        v = self.wv(x)
        if lora_q is not None:
            q = q + lora_q(x)
        if lora_v is not None:
            v = v + lora_v(x)
        k = self.wk(x)
        q, k, v = self._split(q), self._split(k), self._split(v)
        q = numerics.rope_apply(q, positions, self.rope_base)
        k = numerics.rope_apply(k, positions, self.rope_base)
        out = numerics.attention(q, k, v, mask)
        b, _, t, _ = out.shape
        out = out.transpose(1, 2).reshape(b, t, self.heads * self.head_dim)
        return self.drop(self.wo(out))


class FeedForward(nn.Module):
    def __init__(self, hidden, intermediate, dropout):
        super().__init__()
        self.w1 = nn.Linear(hidden, intermediate, bias=False)
        self.w2 = nn.Linear(intermediate, hidden, bias=False)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.drop(self.w2(torch.nn.functional.gelu(self.w1(x))))


class Block(nn.Module):
    """Pre-norm transformer block. ``cross_fn`` receives the normed attention
    input and returns an additive update to the attention sublayer output."""

    def __init__(self, hidden, heads, intermediate, dropout, rope_base):
        super().__init__()
        self.ln1 = nn.LayerNorm(hidden)
        self.attn = SelfAttention(hidden, heads, dropout, rope_base)
        self.ln2 = nn.LayerNorm(hidden)
        self.ff = FeedForward(hidden, intermediate, dropout)

    def forward(self, x, positions, mask, lora_q=None, lora_v=None, cross_fn=None, taps=None):
        a_in = self.ln1(x)
        if taps is not None:
            taps.append(a_in)
        h = self.attn(a_in, positions, mask, lora_q, lora_v)
        if cross_fn is not None:
            h = h + cross_fn(a_in)
        x = x + h
        x = x + self.ff(self.ln2(x))
        return x


class Stack(nn.Module):
    def __init__(self, layers, hidden, heads, intermediate, dropout, rope_base):
        super().__init__()
        self.blocks = nn.ModuleList(
            Block(hidden, heads, intermediate, dropout, rope_base) for _ in range(layers)
        )
        self.ln_f = nn.LayerNorm(hidden)

    def forward(self, x, positions, mask, lora=None, cross_ctx=None, collect_taps=False):
        """``lora``: layer index -> (lora_q, lora_v). ``cross_ctx``: layer
        index -> callable(normed attention input) -> additive update."""
        taps = [] if collect_taps else None
        for i, block in enumerate(self.blocks):
            lq, lv = lora[i] if lora is not None and i in lora else (None, None)
            cross_fn = cross_ctx.get(i) if cross_ctx is not None else None
            x = block(x, positions, mask, lora_q=lq, lora_v=lv, cross_fn=cross_fn, taps=taps)
        return self.ln_f(x), taps


class HierModel(nn.Module):
    def __init__(self, config):
        super().__init__()
        config.validate()
        self.config = config
        hidden = config.global_hidden
        self.tok_emb = nn.Embedding(config.vocab_size, hidden)
        self.e_sos = nn.Parameter(torch.zeros(hidden))
        self.local_enc = Stack(config.local_enc_layers, hidden, config.local_enc_heads,
                               config.local_enc_intermediate, config.dropout, config.rope_base)
        self.global_dec = Stack(config.global_layers, hidden, config.global_heads,
                                config.global_intermediate, config.dropout, config.rope_base)
        self.local_dec = Stack(config.local_dec_layers, hidden, config.local_dec_heads,
                               config.local_dec_intermediate, config.dropout, config.rope_base)
        self.out_proj = nn.Linear(hidden, config.vocab_size, bias=False)
        self._init_weights()
        self._legal_masks = None

    def _init_weights(self):
        depth = (self.config.global_layers + self.config.local_enc_layers
                 + self.config.local_dec_layers)
        residual_scale = 1.0 / (2 * depth) ** 0.5
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.normal_(module.weight, std=0.02)
            elif isinstance(module, nn.Embedding):
                nn.init.normal_(module.weight, std=0.02)
        for stack in (self.local_enc, self.global_dec, self.local_dec):
            for block in stack.blocks:
                nn.init.normal_(block.attn.wo.weight, std=0.02 * residual_scale)
                nn.init.normal_(block.ff.w2.weight, std=0.02 * residual_scale)
        nn.init.normal_(self.e_sos, std=0.02)

    @property
    def dtype(self):
        return self.tok_emb.weight.dtype

    @property
    def device(self):
        return self.tok_emb.weight.device

    # ----- local encoder ---------------------------------------------------

    def _check_step_tokens(self, token_lists):
        limit = self.config.max_tokens_per_step - 1  # [cls] added here
        for t, tokens in enumerate(token_lists):
            if not tokens or tokens[-1] != VOCAB.eos:
                raise ValidationError(f"step {t} tokens must end with the step terminator")
            if len(tokens) > limit:
                raise ValidationError(f"step {t} has {len(tokens)} tokens, cap is {limit}")

    def _pad_batch(self, rows, first_col):
        """Ids tensor [N, L] with ``first_col`` prepended, plus key-pad mask."""
        n = len(rows)
        width = 1 + max(len(r) for r in rows)
        ids = torch.full((n, width), VOCAB.pad, dtype=torch.long, device=self.device)
        ids[:, 0] = first_col
        for i, row in enumerate(rows):
            if row:
                ids[i, 1:1 + len(row)] = torch.tensor(row, dtype=torch.long, device=self.device)
        key_pad = ids.eq(VOCAB.pad)
        key_pad[:, 0] = False
        return ids, key_pad

    def _pad_mask(self, key_pad, causal):
        n, width = key_pad.shape
        mask = torch.zeros(n, 1, width, width, dtype=self.dtype, device=self.device)
        mask = mask.masked_fill(key_pad[:, None, None, :], numerics.NEG_INF)
        if causal:
            mask = mask + numerics.causal_mask(width, self.dtype, self.device)
        return mask

    def local_encode(self, token_lists):
        """Step embeddings: the [cls]-slot output of the local encoder, one
        row per step. Deterministic in eval mode."""
        if not token_lists:
            return torch.zeros(0, self.config.global_hidden, dtype=self.dtype, device=self.device)
        self._check_step_tokens(token_lists)
        ids, key_pad = self._pad_batch(token_lists, VOCAB.cls)
        x = self.tok_emb(ids)
        positions = torch.arange(ids.shape[1], device=self.device)
        out, _ = self.local_enc(x, positions, self._pad_mask(key_pad, causal=False))
        return out[:, 0, :]

    # ----- global decoder ----------------------------------------------------

    def global_forward(self, inputs, positions=None, lora=None, cross_ctx=None,
                       collect_taps=False):
        """Causal pass over prepared input vectors [S, hidden]; adapters feed
        custom inputs and position vectors through this entry point."""
        s = inputs.shape[0]
        if s > self.config.max_steps:
            raise ValidationError(f"global sequence length {s} exceeds max {self.config.max_steps}")
        if positions is None:
            positions = torch.arange(s, device=self.device)
        mask = numerics.causal_mask(s, self.dtype, self.device)
        out, taps = self.global_dec(inputs.unsqueeze(0), positions, mask,
                                    lora=lora, cross_ctx=cross_ctx, collect_taps=collect_taps)
        if taps is not None:
            taps = [t.squeeze(0) for t in taps]
        return out.squeeze(0), taps

    def global_inputs(self, step_embeddings):
        return torch.cat([self.e_sos.unsqueeze(0), step_embeddings], dim=0)

    def global_decode(self, step_embeddings, lora=None, cross_ctx=None, collect_taps=False):
        """States [t+1, hidden] from t step embeddings: state i is the
        context for predicting step i+1 and depends only on steps <= i."""
        out, taps = self.global_forward(self.global_inputs(step_embeddings),
                                        lora=lora, cross_ctx=cross_ctx,
                                        collect_taps=collect_taps)
        return (out, taps) if collect_taps else out

    # ----- local decoder -----------------------------------------------------

    def decode_step_logits(self, states, token_lists):
        """Teacher-forced logits [T, L, vocab] and targets [T, L] (pad id
        marks unused slots); row t's start slot embedding is states[t]."""
        self._check_step_tokens(token_lists)
        if states.shape[0] != len(token_lists):
            raise ValidationError("states/steps length mismatch")
        inputs = [tokens[:-1] for tokens in token_lists]
        ids, key_pad = self._pad_batch(inputs, VOCAB.pad)
        x = self.tok_emb(ids)
        x = torch.cat([states.unsqueeze(1), x[:, 1:, :]], dim=1)
        positions = torch.arange(ids.shape[1], device=self.device)
        out, _ = self.local_dec(x, positions, self._pad_mask(key_pad, causal=True))
        logits = self.out_proj(out)
        targets = torch.full(ids.shape, VOCAB.pad, dtype=torch.long, device=self.device)
        for t, tokens in enumerate(token_lists):
            targets[t, :len(tokens)] = torch.tensor(tokens, dtype=torch.long, device=self.device)
        return logits, targets

    def step_token_nll(self, states, token_lists):
        """Per-step summed token NLL and token counts."""
        logits, targets = self.decode_step_logits(states, token_lists)
        flat = numerics.cross_entropy(logits.reshape(-1, logits.shape[-1]),
                                      targets.reshape(-1),
                                      ignore_index=VOCAB.pad, reduction="none")
        per_token = flat.view(targets.shape)
        valid = targets.ne(VOCAB.pad)
        sums = (per_token * valid).sum(dim=1)
        counts = valid.sum(dim=1)
        return sums, counts

    def score_step_nll(self, score):
        """Teacher-forced per-step NLL sums/counts for a whole score."""
        validate_score(score, self.config.max_notes_per_step)
        if len(score) > self.config.max_steps:
            raise ValidationError(f"score length {len(score)} exceeds max {self.config.max_steps}")
        token_lists = tokenize_score(score)
        h = self.local_encode(token_lists)
        states = self.global_decode(h[:-1])
        return self.step_token_nll(states, token_lists)

    def nll_loss(self, score):
        """Mean negative log-likelihood per token, terminators included."""
        sums, counts = self.score_step_nll(score)
        return sums.sum() / counts.sum()

    def nll_loss_batch(self, scores):
        """Token-weighted mean over several scores."""
        total, count = None, 0
        for score in scores:
            sums, counts = self.score_step_nll(score)
            s = sums.sum()
            total = s if total is None else total + s
            count += int(counts.sum())
        return total / count

    def local_decode(self, state, partial_tokens):
        """Next-token distribution given a step state and a legal prefix
        (alternating instrument/note tokens, no terminator yet)."""
        for i, tok in enumerate(partial_tokens):
            want = "instrument" if i % 2 == 0 else "note"
            if VOCAB.kind(tok) != want:
                raise ValidationError(f"illegal step prefix at position {i}: expected {want}")
        ids = torch.tensor([partial_tokens], dtype=torch.long, device=self.device) \
            if partial_tokens else torch.zeros(1, 0, dtype=torch.long, device=self.device)
        x = torch.cat([state.view(1, 1, -1), self.tok_emb(ids)], dim=1)
        width = x.shape[1]
        positions = torch.arange(width, device=self.device)
        out, _ = self.local_dec(x, positions, numerics.causal_mask(width, self.dtype, self.device))
        logits = self.out_proj(out[0, -1])
        return torch.softmax(logits, dim=-1)

    # ----- sampling ----------------------------------------------------------

    def _legal_token_masks(self):
        if self._legal_masks is None or self._legal_masks[0].device != self.device:
            inst_or_eos = torch.zeros(self.config.vocab_size, dtype=torch.bool, device=self.device)
            inst_or_eos[:VOCAB.n_instruments] = True
            inst_or_eos[VOCAB.eos] = True
            note_only = torch.zeros_like(inst_or_eos)
            note_only[VOCAB.note_offset:VOCAB.note_offset + VOCAB.n_note_tokens] = True
            eos_only = torch.zeros_like(inst_or_eos)
            eos_only[VOCAB.eos] = True
            self._legal_masks = (inst_or_eos, note_only, eos_only)
        return self._legal_masks

    def _pick(self, logits, allowed, temperature, top_p, generator):
        logits = logits.masked_fill(~allowed, numerics.NEG_INF)
        if temperature <= 0:
            return int(logits.argmax())
        probs = torch.softmax(logits / temperature, dim=-1)
        if top_p < 1.0:
            sorted_probs, order = probs.sort(descending=True)
            keep = sorted_probs.cumsum(0) - sorted_probs < top_p
            keep[0] = True
            probs = torch.zeros_like(probs)
            probs[order[keep]] = sorted_probs[keep]
            probs = probs / probs.sum()
        return int(torch.multinomial(probs, 1, generator=generator))

    def sample_step_tokens(self, state, temperature, top_p, generator):
        """Sample one step's token list (terminator included). Alternation is
        enforced by masking; the note budget forces termination."""
        inst_or_eos, note_only, eos_only = self._legal_token_masks()
        budget = 2 * self.config.max_notes_per_step
        tokens = []
        while True:
            probs_needed_mask = (
                note_only if tokens and VOCAB.is_instrument(tokens[-1])
                else eos_only if len(tokens) >= budget
                else inst_or_eos
            )
            ids = torch.tensor([tokens], dtype=torch.long, device=self.device) \
                if tokens else torch.zeros(1, 0, dtype=torch.long, device=self.device)
            x = torch.cat([state.view(1, 1, -1), self.tok_emb(ids)], dim=1)
            width = x.shape[1]
            positions = torch.arange(width, device=self.device)
            out, _ = self.local_dec(x, positions,
                                    numerics.causal_mask(width, self.dtype, self.device))
            logits = self.out_proj(out[0, -1])
            tok = self._pick(logits, probs_needed_mask, temperature, top_p, generator)
            tokens.append(tok)
            if tok == VOCAB.eos:
                return tokens

    def _step_from_tokens(self, tokens):
        """Parse sampled tokens into a sorted step; returns (step, repaired)."""
        raw = []
        for i in range(0, len(tokens) - 1, 2):
            pitch, dur = decode_note(tokens[i + 1] - VOCAB.note_offset)
            raw.append(NoteEvent(tokens[i], pitch, dur))
        step = sort_step(raw, self.config.max_notes_per_step)
        return step, tuple(raw) != step.notes

    def sample(self, prompt=None, steps=16, temperature=1.0, top_p=0.98, seed=0,
               steps_per_bar=STEPS_PER_BAR, global_hook=None):
        """Autoregressive sampling of ``steps`` new steps after ``prompt``.

        ``global_hook(step_embeddings) -> states`` overrides the plain global
        pass so adapters can condition generation. Deterministic per seed.
        """
        was_training = self.training
        self.eval()
        try:
            generator = torch.Generator(device="cpu").manual_seed(seed)
            if prompt is not None:
                validate_score(prompt, self.config.max_notes_per_step)
                step_list = list(prompt.steps)
                bar = prompt.steps_per_bar
            else:
                step_list, bar = [], steps_per_bar
            if len(step_list) + steps > self.config.max_steps:
                raise ValidationError("prompt plus requested steps exceeds max length")
            repairs = 0
            n_tokens = 0
            with torch.no_grad():
                token_lists = [tokenize_step(s) for s in step_list]
                h = self.local_encode(token_lists)
                for _ in range(steps):
                    if global_hook is not None:
                        states = global_hook(h)
                    else:
                        states = self.global_decode(h)
                    tokens = self.sample_step_tokens(states[-1], temperature, top_p, generator)
                    n_tokens += len(tokens)
                    step, repaired = self._step_from_tokens(tokens)
                    repairs += int(repaired)
                    step_list.append(step)
                    h = torch.cat([h, self.local_encode([tokenize_step(step)])], dim=0)
            return SampleResult(Score(step_list, bar), repairs, n_tokens)
        finally:
            self.train(was_training)


@dataclass
class SampleResult:
    score: Score
    repairs: int
    tokens_generated: int


# ----- checkpoints -----------------------------------------------------------


def parameter_blob(module):
    """Parameters flattened to little-endian float32 bytes in declared order."""
    parts = [p.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes()
             for _, p in module.named_parameters()]
    return b"".join(parts)


def model_checksum(module):
    return hashlib.sha256(parameter_blob(module)).hexdigest()


def _atomic_write(path, data):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_blob_file(path, magic, header, blob):
    payload = json.dumps(header, sort_keys=True).encode()
    data = magic + len(payload).to_bytes(8, "little") + payload + blob
    _atomic_write(path, data)


def read_blob_file(path, magic):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:len(magic)] != magic:
        raise ParseError(f"bad checkpoint magic, expected {magic!r}", position=0)
    n = int.from_bytes(data[len(magic):len(magic) + 8], "little")
    start = len(magic) + 8
    header = json.loads(data[start:start + n].decode())
    return header, data[start + n:]


def load_blob_into(module, header, blob):
    declared = [[name, list(shape)] for name, shape in header["params"]]
    actual = [[name, list(p.shape)] for name, p in module.named_parameters()]
    if declared != actual:
        raise ParseError("checkpoint parameter manifest does not match model")
    offset = 0
    with torch.no_grad():
        for _, p in module.named_parameters():
            n_bytes = p.numel() * 4
            chunk = blob[offset:offset + n_bytes]
            if len(chunk) != n_bytes:
                raise ParseError("checkpoint blob truncated", position=offset)
            flat = torch.frombuffer(bytearray(chunk), dtype=torch.float32)
            p.copy_(flat.view(p.shape).to(p.dtype))
            offset += n_bytes
    if offset != len(blob):
        raise ParseError("checkpoint blob has trailing bytes", position=offset)


def save_checkpoint(model, path, step=0):
    header = {
        "config": asdict(model.config),
        "vocab_hash": VOCAB.layout_hash(),
        "step": step,
        "params": [(name, list(p.shape)) for name, p in model.named_parameters()],
    }
    write_blob_file(path, CHECKPOINT_MAGIC, header, parameter_blob(model))


def load_checkpoint(path):
    header, blob = read_blob_file(path, CHECKPOINT_MAGIC)
    if header["vocab_hash"] != VOCAB.layout_hash():
        raise ConfigError("checkpoint vocabulary layout differs from this build")
    model = HierModel(ModelConfig(**header["config"]))
    load_blob_into(model, header, blob)
    return model, header["step"]

"""Image-to-vertex-sequence transformer with a pairwise connection-score head.

Encoder: non-overlapping patches -> linear projection -> learned positions ->
pre-norm self-attention blocks. Decoder: token + position embeddings -> pre-norm
blocks (causal self-attention, cross-attention, MLP) -> final norm (the vertex
features) -> vocabulary projection.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .tokenizer import TokenSequence, Vocabulary, frame_tokens


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    encoder_layers: int = 3
    decoder_layers: int = 3
    heads: int = 4
    n_slots: int = 16
    n_bins: int = 64
    mlp_ratio: int = 4
    channels: int = 3
    init_std: float = 0.02
    normalize_perm_loss: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.n_bins)

    @property
    def vocab_size(self) -> int:
        return self.n_bins + 3

    @property
    def seq_len(self) -> int:
        return 2 * self.n_slots + 2

    @property
    def logit_len(self) -> int:
        return self.seq_len - 1

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


SINUSOID_BASE = 1000.0

PRESETS = {
    "tiny": ModelConfig(),
    # 224 px input, 8 px patches, d=256, 6x8-head decoder, 192 slots, 224 bins
    "full": ModelConfig(image_size=224, patch_size=8, embed_dim=256, encoder_layers=12,
                        decoder_layers=6, heads=8, n_slots=192, n_bins=224),
}


def sinusoid(values: np.ndarray, dim: int, base: float = SINUSOID_BASE) -> np.ndarray:
    """(n,) positions in pixels -> (n, dim) interleaved sin/cos at geometric frequencies 1 .. 1/base."""
    values = np.asarray(values, dtype=np.float64)
    freq = base ** (-np.arange(0, dim, 2) / dim)
    angle = values[:, None] * freq
    out = np.empty((len(values), 2 * len(freq)))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out[:, :dim]


def _grid_code(xs: np.ndarray, ys: np.ndarray, d: int) -> np.ndarray:
    """First half of the channels encodes x, second half y."""
    return np.concatenate([sinusoid(xs, d // 2), sinusoid(ys, d - d // 2)], axis=1)


def _init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, T.Tensor]:
    """Dense weights N(0, 1/(3 fan_in)), zero biases, unit-variance special-token rows;
    the vocabulary projection and decoder positions use ``init_std``.

    Patch positions and coordinate tokens start from the same pixel-unit
    sinusoids, so a coordinate value and the patch holding it are aligned from
    step one. Both stay ordinary learned parameters.
    """
    d, std = cfg.embed_dim, cfg.init_std
    hidden = cfg.mlp_ratio * d
    p: dict[str, np.ndarray] = {}

    def dense(name, n_in, n_out):
        p[f"{name}.w"] = rng.normal(0.0, 1.0 / math.sqrt(3 * n_in), (n_in, n_out))
        p[f"{name}.b"] = np.zeros(n_out)

    def norm(name):
        p[f"{name}.g"] = np.ones(d)
        p[f"{name}.b"] = np.zeros(d)

    def attn(name):
        for part in ("q", "k", "v", "o"):
            dense(f"{name}.{part}", d, d)

    def mlp(name):
        dense(f"{name}.fc1", d, hidden)
        dense(f"{name}.fc2", hidden, d)

    dense("enc.patch", cfg.channels * cfg.patch_size ** 2, d)
    g, ps = cfg.image_size // cfg.patch_size, cfg.patch_size
    rows, cols = np.divmod(np.arange(cfg.n_patches), g)
    p["enc.pos"] = _grid_code(cols * ps + (ps - 1) / 2, rows * ps + (ps - 1) / 2, d)
    for i in range(cfg.encoder_layers):
        norm(f"enc.{i}.ln1")
        attn(f"enc.{i}.attn")
        norm(f"enc.{i}.ln2")
        mlp(f"enc.{i}.mlp")
    norm("enc.ln")

    p["dec.tok"] = rng.normal(0.0, 1.0, (cfg.vocab_size, d))
    centres = (np.arange(cfg.n_bins) + 0.5) * cfg.image_size / cfg.n_bins
    p["dec.tok"][:cfg.n_bins] = _grid_code(centres, centres, d)
    p["dec.pos"] = rng.normal(0.0, std, (cfg.logit_len, d))
    for i in range(cfg.decoder_layers):
        norm(f"dec.{i}.ln1")
        attn(f"dec.{i}.self")
        norm(f"dec.{i}.ln2")
        attn(f"dec.{i}.cross")
        norm(f"dec.{i}.ln3")
        mlp(f"dec.{i}.mlp")
    norm("dec.ln")
    # small output weights keep untrained predictions near uniform
    p["dec.head.w"] = rng.normal(0.0, std, (d, cfg.vocab_size))
    p["dec.head.b"] = np.zeros(cfg.vocab_size)

    for head in ("clock", "count"):
        dense(f"match.{head}.fc1", 2 * d, d)
        dense(f"match.{head}.fc2", d, d)
        dense(f"match.{head}.fc3", d, 1)
    return {k: T.Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, H, W) -> (B, n_patches, C*patch*patch), patches in raster order."""
    b, c, h, w = images.shape
    x = images.reshape(b, c, h // patch, patch, w // patch, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, (h // patch) * (w // patch), c * patch * patch)


def causal_mask(n: int) -> np.ndarray:
    m = np.zeros((n, n))
    m[np.triu_indices(n, 1)] = -np.inf
    return m


class VertexSequenceModel:
    def __init__(self, config: ModelConfig, seed: int = 0, params: dict[str, T.Tensor] | None = None):
        self.config = config
        self.params = params if params is not None else _init_params(config, np.random.default_rng(seed))
        self.dropout: tuple[float, np.random.Generator] | None = None  # (rate, rng) while training


    # -- building blocks --------------------------------------------------

    def _linear(self, x, name):
        return T.linear(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _norm(self, x, name):
        return T.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _attention(self, x, ctx, name, mask=None):
        b, n, d = x.shape
        m = ctx.shape[1]
        h = self.config.heads
        dh = d // h
        q = T.transpose(T.reshape(self._linear(x, f"{name}.q"), (b, n, h, dh)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(self._linear(ctx, f"{name}.k"), (b, m, h, dh)), (0, 2, 3, 1))
        v = T.transpose(T.reshape(self._linear(ctx, f"{name}.v"), (b, m, h, dh)), (0, 2, 1, 3))
        scores = T.scale(T.matmul(q, k), 1.0 / math.sqrt(dh))
        if mask is not None:
            scores = T.add(scores, T.Tensor(mask))
        out = T.matmul(T.softmax(scores), v)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, n, d))
        return self._linear(out, f"{name}.o")

    def _mlp(self, x, name):
        return self._linear(T.gelu(self._linear(x, f"{name}.fc1")), f"{name}.fc2")

    def _drop(self, x):
        """Inverted dropout on a residual branch; identity unless ``self.dropout`` is set."""
        if self.dropout is None or self.dropout[0] == 0.0:
            return x
        rate, rng = self.dropout
        keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
        return T.mul(x, T.Tensor(keep))

    # -- encoder ----------------------------------------------------------

    def encode(self, images: np.ndarray) -> T.Tensor:
        """(B, C, H, W) or (C, H, W) images in [0, 1] -> latent grid (B, n_patches, d)."""
        cfg = self.config
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        expected = (cfg.channels, cfg.image_size, cfg.image_size)
        if images.shape[1:] != expected:
            raise T.ShapeError(f"encode: expected images of shape (B, {expected}), got {images.shape}")
        x = self._linear(T.Tensor(patchify(images, cfg.patch_size)), "enc.patch")
        x = T.add(x, self.params["enc.pos"])
        for i in range(cfg.encoder_layers):
            y = self._norm(x, f"enc.{i}.ln1")
            x = T.add(x, self._drop(self._attention(y, y, f"enc.{i}.attn")))
            x = T.add(x, self._drop(self._mlp(self._norm(x, f"enc.{i}.ln2"), f"enc.{i}.mlp")))
        return self._norm(x, "enc.ln")

    # -- decoder ----------------------------------------------------------

    def _decode(self, z: T.Tensor, inputs: np.ndarray) -> tuple[T.Tensor, T.Tensor]:
        cfg = self.config
        b, n = inputs.shape
        pos = self.params["dec.pos"] if n == cfg.logit_len else T.getitem(self.params["dec.pos"], slice(0, n))
        x = T.add(T.embedding(inputs, self.params["dec.tok"]), pos)
        mask = causal_mask(n)
        for i in range(cfg.decoder_layers):
            y = self._norm(x, f"dec.{i}.ln1")
            x = T.add(x, self._drop(self._attention(y, y, f"dec.{i}.self", mask)))
            x = T.add(x, self._drop(self._attention(self._norm(x, f"dec.{i}.ln2"), z, f"dec.{i}.cross")))
            x = T.add(x, self._drop(self._mlp(self._norm(x, f"dec.{i}.ln3"), f"dec.{i}.mlp")))
        features = self._norm(x, "dec.ln")
        return self._linear(features, "dec.head"), features

    def decode_teacher_forced(self, z: T.Tensor, tokens: np.ndarray) -> tuple[T.Tensor, T.Tensor]:
        """Logits (B, N_l, V) predicting ``tokens[:, 1:]`` and features (B, N_l, d)."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.shape[1] != self.config.seq_len:
            raise T.ShapeError(f"decode_teacher_forced: sequence length {tokens.shape[1]}, "
                               f"expected {self.config.seq_len}")
        if tokens.shape[0] != z.shape[0]:
            raise T.ShapeError(f"decode_teacher_forced: batch {tokens.shape[0]} vs latent batch {z.shape[0]}")
        return self._decode(z, tokens[:, :-1])

    def vertex_features(self, features: T.Tensor) -> T.Tensor:
        """Feature of vertex k = decoder output at the position predicting its y-token."""
        n = self.config.n_slots
        return T.getitem(features, (slice(None), slice(1, 2 * n, 2)))

    def decode_autoregressive(self, z: T.Tensor, stats: Counter | None = None):
        """Greedy decoding. Returns (framed token sequences, vertex features (B, N_v, d))."""
        cfg = self.config
        vocab = cfg.vocab
        stats = stats if stats is not None else Counter()
        b = z.shape[0]
        max_len = cfg.logit_len
        gen = np.full((b, 1), vocab.bos_id, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        for _ in range(max_len):
            logits, _ = self._decode(z, gen)
            nxt = logits.values[:, -1].argmax(axis=-1)
            nxt = np.where(done, vocab.pad_id, nxt)
            done |= nxt == vocab.eos_id
            gen = np.concatenate([gen, nxt[:, None]], axis=1)
            if done.all():
                break
        seqs = []
        for row in gen:
            body = row[1:].tolist()
            if vocab.eos_id in body:
                body = body[:body.index(vocab.eos_id)]
            else:
                stats["truncated"] += 1
            body = body[:2 * cfg.n_slots]
            seq = np.full(cfg.seq_len, vocab.pad_id, dtype=np.int64)
            seq[0] = vocab.bos_id
            seq[1:1 + len(body)] = body
            seq[1 + len(body)] = vocab.eos_id
            n_coord = sum(1 for t in body if vocab.is_coord(t))
            seqs.append(TokenSequence(seq, n_coord // 2))
        framed = np.stack([s.tokens for s in seqs])
        _, features = self._decode(z, framed[:, :-1])
        return seqs, self.vertex_features(features)

    # -- optimal matching heads ----------------------------------------------

    def _pair_mlp(self, pairs: T.Tensor, name: str) -> T.Tensor:
        x = T.gelu(self._linear(pairs, f"{name}.fc1"))
        x = T.gelu(self._linear(x, f"{name}.fc2"))
        return self._linear(x, f"{name}.fc3")

    def matching_scores(self, vfeat: T.Tensor) -> tuple[T.Tensor, T.Tensor, T.Tensor]:
        """(S_clock, S_count, S) with S = S_clock + S_count^T, each (B, N, N)."""
        if vfeat.ndim == 2:
            vfeat = T.reshape(vfeat, (1,) + vfeat.shape)
        b, n, d = vfeat.shape
        if d != self.config.embed_dim:
            raise T.ShapeError(f"matching_scores: feature dim {d}, expected {self.config.embed_dim}")
        rows = T.repeat(vfeat, 2, n)  # [b, i, j] = f_i
        cols = T.repeat(vfeat, 1, n)  # [b, i, j] = f_j
        pairs = T.concat([rows, cols], axis=-1)
        s_clock = T.reshape(self._pair_mlp(pairs, "match.clock"), (b, n, n))
        s_count = T.reshape(self._pair_mlp(pairs, "match.count"), (b, n, n))
        return s_clock, s_count, T.add(s_clock, T.transpose(s_count, (0, 2, 1)))


# -- losses ----------------------------------------------------------------

def detection_loss(logits: T.Tensor, tokens: np.ndarray) -> T.Tensor:
    """Mean cross-entropy of ``tokens[:, 1:]`` over every logit position (PAD included)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None]
    return T.cross_entropy(logits, tokens[:, 1:])


PERM_CLAMP = 1e-12


def permutation_loss(p_soft: T.Tensor, p_gt: np.ndarray, normalize: bool = True) -> T.Tensor:
    """-sum(P_gt * log P) per matrix, divided by N when ``normalize``; batch mean."""
    p_gt = np.asarray(p_gt, dtype=np.float64)
    if p_gt.ndim == 2:
        p_gt = p_gt[None]
    if p_soft.ndim == 2:
        p_soft = T.reshape(p_soft, (1,) + p_soft.shape)
    if p_soft.shape != p_gt.shape:
        raise T.ShapeError(f"permutation_loss: {p_soft.shape} vs {p_gt.shape}")
    b, n, _ = p_gt.shape
    logp = T.log(T.clamp_min(p_soft, PERM_CLAMP))
    total = T.sum(T.mul(logp, T.Tensor(p_gt)))
    return T.scale(total, -1.0 / (b * (n if normalize else 1)))


def total_loss(l_det: T.Tensor, l_perm: T.Tensor, lambda_s: float = 1.0,
               lambda_p: float = 10.0) -> T.Tensor:
    if not (np.isfinite(l_det.values).all() and np.isfinite(l_perm.values).all()):
        raise FloatingPointError(f"non-finite loss: detection={l_det.values}, permutation={l_perm.values}")
    return T.add(T.scale(l_det, lambda_s), T.scale(l_perm, lambda_p))


# -- checkpoints -------------------------------------------------------------

def save_model(path, model: VertexSequenceModel, optimizer: T.AdamW | None = None, extra: dict | None = None):
    meta = {"model_config": model.config.to_dict(), **(extra or {})}
    T.save_checkpoint(path, model.params, optimizer, meta)


def load_model(path) -> tuple[VertexSequenceModel, dict]:
    tables, header = T.load_checkpoint(path)
    cfg = ModelConfig.from_dict(header["meta"]["model_config"])
    params = {k: T.Tensor(v, requires_grad=True, name=k) for k, v in tables["param"].items()}
    model = VertexSequenceModel(cfg, params=params)
    header["tables"] = tables
    return model, header

"""A small frozen CLIP-style dual encoder.

The image branch is a pre-LN vision transformer whose per-layer input
sequence can be extended with prompt tokens; the text branch is a causal
pre-LN transformer pooled at the end-of-text marker.  Both branches end in
a linear projection into a shared unit-normalised embedding space.

Linear weights are stored ``(out_features, in_features)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from importlib import resources
import math

import numpy as np

from . import tensor as T
from .container import WEIGHTS_MAGIC, read_container, write_container
from .errors import ConfigError, ContractError, DimensionError, FormatError, PlanError, VocabularyError
from .tensor import Tensor

PAD, SOS, EOS, CONTEXT = "<pad>", "<sos>", "<eos>", "X"
TEMPLATE = "a photo of a {}"


@dataclass
class BackboneConfig:
    image_size: int = 32
    patch_size: int = 8
    d_visual: int = 64
    d_text: int = 64
    embed_dim: int = 64
    visual_layers: int = 4
    text_layers: int = 2
    heads: int = 4
    vocab_size: int = 52
    max_text_len: int = 20
    temperature: float = 0.01

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        for width in (self.d_visual, self.d_text):
            if width % self.heads:
                raise ConfigError(f"width {width} not divisible by {self.heads} heads")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if min(self.visual_layers, self.text_layers, self.vocab_size, self.max_text_len) < 1:
            raise ConfigError("layer counts, vocab_size and max_text_len must be positive")

    @property
    def num_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def grid(self):
        return self.image_size // self.patch_size

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in names})


# ---------------------------------------------------------------------------
# vocabulary and token sequences
# ---------------------------------------------------------------------------


class Vocabulary:
    """Whitespace tokenizer over a fixed word list."""

    def __init__(self, words):
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        for special in (PAD, SOS, EOS, CONTEXT):
            if special not in self.index:
                raise VocabularyError(f"vocabulary lacks the special token {special!r}")

    @classmethod
    def default(cls):
        text = resources.files("dmpt.resources").joinpath("vocab.txt").read_text(encoding="utf-8")
        return cls(text.split())

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(fh.read().split())

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word in self.index

    def id(self, word):
        try:
            return self.index[word]
        except KeyError:
            raise VocabularyError(f"{word!r} is not in the vocabulary") from None

    def encode(self, text):
        return [self.id(w) for w in text.split()]


@dataclass
class TokenSequence:
    token_ids: list
    class_token_position: int
    end_position: int
    context_positions: tuple = ()

    def validate(self, max_len):
        if len(self.token_ids) > max_len:
            raise DimensionError(f"sequence of {len(self.token_ids)} tokens exceeds max_text_len {max_len}")
        for pos in (self.class_token_position, self.end_position, *self.context_positions):
            if not 0 <= pos < len(self.token_ids):
                raise DimensionError(f"position {pos} outside sequence of length {len(self.token_ids)}")


def _pad(ids, vocab, max_len):
    if len(ids) > max_len:
        raise DimensionError(f"sequence of {len(ids)} tokens exceeds max_text_len {max_len}")
    return ids + [vocab.id(PAD)] * (max_len - len(ids))


def template_sequence(class_name, vocab, max_len, template=TEMPLATE):
    """Hand-crafted prompt, e.g. ``<sos> a photo of a red_square <eos>``."""
    words = template.format(class_name).split()
    ids = [vocab.id(SOS)] + [vocab.id(w) for w in words] + [vocab.id(EOS)]
    cls_pos = 1 + words.index(class_name)
    return TokenSequence(_pad(ids, vocab, max_len), cls_pos, len(ids) - 1, tuple(range(1, cls_pos)))


def context_sequence(class_name, n_context, vocab, max_len):
    """``<sos> X*M class <eos>`` with the M ``X`` slots meant to be overridden."""
    ids = [vocab.id(SOS)] + [vocab.id(CONTEXT)] * n_context + [vocab.id(class_name), vocab.id(EOS)]
    return TokenSequence(_pad(ids, vocab, max_len), n_context + 1, n_context + 2, tuple(range(1, n_context + 1)))


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------


def _layer_shapes(prefix, d):
    return {
        f"{prefix}.ln1.gain": (d,),
        f"{prefix}.ln1.bias": (d,),
        f"{prefix}.attn.wq": (d, d),
        f"{prefix}.attn.bq": (d,),
        f"{prefix}.attn.wk": (d, d),
        f"{prefix}.attn.bk": (d,),
        f"{prefix}.attn.wv": (d, d),
        f"{prefix}.attn.bv": (d,),
        f"{prefix}.attn.wo": (d, d),
        f"{prefix}.attn.bo": (d,),
        f"{prefix}.ln2.gain": (d,),
        f"{prefix}.ln2.bias": (d,),
        f"{prefix}.mlp.w1": (4 * d, d),
        f"{prefix}.mlp.b1": (4 * d,),
        f"{prefix}.mlp.w2": (d, 4 * d),
        f"{prefix}.mlp.b2": (d,),
    }


def weight_manifest(cfg):
    """Ordered mapping of tensor name to shape for ``cfg``."""
    d, dt, D = cfg.d_visual, cfg.d_text, cfg.embed_dim
    shapes = {
        "visual.patch_embed.weight": (d, 3 * cfg.patch_size**2),
        "visual.patch_embed.bias": (d,),
        "visual.class_token": (d,),
        "visual.pos_embed": (1 + cfg.num_patches, d),
    }
    for i in range(cfg.visual_layers):
        shapes.update(_layer_shapes(f"visual.layers.{i}", d))
    shapes.update({"visual.ln_post.gain": (d,), "visual.ln_post.bias": (d,), "visual.proj": (D, d)})
    shapes.update({"text.token_embed": (cfg.vocab_size, dt), "text.pos_embed": (cfg.max_text_len, dt)})
    for i in range(cfg.text_layers):
        shapes.update(_layer_shapes(f"text.layers.{i}", dt))
    shapes.update({"text.ln_final.gain": (dt,), "text.ln_final.bias": (dt,), "text.proj": (D, dt)})
    shapes["temperature"] = ()
    return shapes


class DualEncoderWeights:
    """Frozen named tensors plus the config that shaped them."""

    def __init__(self, config, tensors):
        self.config = config
        expected = weight_manifest(config)
        if list(tensors) != list(expected):
            missing = set(expected) ^ set(tensors)
            raise ConfigError(f"weight names do not match the config manifest: {sorted(missing)[:5]}")
        self.tensors = {}
        for name, arr in tensors.items():
            if tuple(arr.shape) != expected[name]:
                raise DimensionError(f"{name}: shape {tuple(arr.shape)} != expected {expected[name]}")
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"{name} contains non-finite values")
            self.tensors[name] = Tensor(arr, requires_grad=False)

    def __getitem__(self, name):
        return self.tensors[name]

    def layer(self, branch, index):
        prefix = f"{branch}.layers.{index}."
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    @property
    def temperature(self):
        return float(self.tensors["temperature"].data)

    def fingerprint(self):
        """Concatenated bytes of every buffer, for frozen-contract checks."""
        return b"".join(t.data.tobytes() for t in self.tensors.values())

    def all_frozen(self):
        return all(not t.requires_grad and t.grad is None for t in self.tensors.values())


def init_weights(config, seed=0):
    rng = np.random.Generator(np.random.PCG64(seed))
    tensors = {}
    for name, shape in weight_manifest(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "temperature":
            arr = np.array(config.temperature, dtype=np.float32)
        elif leaf == "gain":
            arr = np.ones(shape, np.float32)
        elif leaf == "bias" or (leaf.startswith("b") and len(leaf) == 2):
            arr = np.zeros(shape, np.float32)
        else:
            arr = (0.02 * rng.standard_normal(shape)).astype(np.float32)
        tensors[name] = arr
    return DualEncoderWeights(config, tensors)


def save_weights(weights, path):
    write_container(path, WEIGHTS_MAGIC, weights.config.to_dict(), {k: v.data for k, v in weights.tensors.items()})


def load_weights(path, config=None):
    header, tensors = read_container(path, WEIGHTS_MAGIC)
    try:
        stored = BackboneConfig.from_dict(header)
    except (TypeError, ConfigError) as exc:
        raise FormatError(f"invalid backbone config in header: {exc}", offset=12) from exc
    if config is not None and stored != config:
        diffs = {k: (v, getattr(config, k)) for k, v in stored.to_dict().items() if getattr(config, k) != v}
        raise ConfigError(f"weight file does not match the requested config: {diffs}")
    expected = weight_manifest(stored)
    if list(tensors) != list(expected) or any(tuple(tensors[k].shape) != s for k, s in expected.items()):
        raise FormatError("tensor manifest does not match the header config", offset=12)
    return DualEncoderWeights(stored, tensors)


def init_or_load_weights(config, path=None, seed=0):
    """Seeded random initialisation, or a bit-exact load when ``path`` is given."""
    if path is None:
        return init_weights(config, seed)
    return load_weights(path, config)


# ---------------------------------------------------------------------------
# transformer
# ---------------------------------------------------------------------------


def linear(x, weight, bias=None):
    out = T.matmul(x, weight.mT)
    return out if bias is None else out + bias


def transformer_layer_forward(x, lw, heads, mask=None):
    """One pre-LN block: ``x + MHA(LN(x))`` then ``x + MLP(LN(x))``.

    ``x`` is ``(B, n, d)``.  Returns the block output and the attention
    probabilities as a ``(B, heads, n, n)`` array.
    """
    batch, n, d = x.shape
    dh = d // heads
    h = T.layer_norm(x, lw["ln1.gain"], lw["ln1.bias"])

    def split(t):
        return t.reshape(batch, n, heads, dh).transpose(0, 2, 1, 3)

    q = split(linear(h, lw["attn.wq"], lw["attn.bq"]))
    k = split(linear(h, lw["attn.wk"], lw["attn.bk"]))
    v = split(linear(h, lw["attn.wv"], lw["attn.bv"]))
    attn = T.softmax(T.matmul(q, k.mT), temperature=math.sqrt(dh), mask=mask)
    ctx = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(batch, n, d)
    x = x + linear(ctx, lw["attn.wo"], lw["attn.bo"])
    h = T.layer_norm(x, lw["ln2.gain"], lw["ln2.bias"])
    h = T.gelu(linear(h, lw["mlp.w1"], lw["mlp.b1"]))
    x = x + linear(h, lw["mlp.w2"], lw["mlp.b2"])
    return x, attn.data


# ---------------------------------------------------------------------------
# image branch
# ---------------------------------------------------------------------------


def _as_batch(images, cfg):
    arr = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 3 or arr.shape[2] != cfg.image_size or arr.shape[3] != cfg.image_size:
        raise DimensionError(f"expected 3x{cfg.image_size}x{cfg.image_size} image(s), got {arr.shape}")
    return arr


def patchify(images, patch_size):
    """``(B, 3, H, W)`` -> ``(B, N_p, 3*p*p)``, patches in row-major grid order."""
    b, c, h, w = images.shape
    g_h, g_w = h // patch_size, w // patch_size
    x = images.reshape(b, c, g_h, patch_size, g_w, patch_size)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, g_h * g_w, c * patch_size * patch_size))


def embed_patches(images, w, positional=True):
    """Patch embeddings plus positional embeddings for the patch slots, ``(B, N_p, d)``."""
    cfg = w.config
    arr = _as_batch(images, cfg)
    patches = Tensor(patchify(arr, cfg.patch_size))
    out = linear(patches, w["visual.patch_embed.weight"], w["visual.patch_embed.bias"])
    if positional:
        out = out + w["visual.pos_embed"][1:]
    return out


def initial_class_token(w, batch):
    s0 = w["visual.class_token"] + w["visual.pos_embed"][0]
    return T.broadcast_to(s0.reshape(1, 1, -1), (batch, 1, w.config.d_visual))


def _prompts_for_layer(entry, s, e, layer_index, batch, d):
    if entry is None:
        return None
    if callable(entry):
        return entry(s, e, layer_index)
    if entry.ndim == 2:
        if entry.shape[1] != d:
            raise DimensionError(f"prompt width {entry.shape[1]} != {d}")
        return T.broadcast_to(entry.reshape(1, *entry.shape), (batch, *entry.shape))
    return entry


def image_encode(images, plan, w, return_tokens=False):
    """Encode a batch of images with a per-layer prompt injection plan.

    ``plan[l]`` supplies the prompts inserted in front of the patch tokens
    at the input of layer ``l + 1``: ``None``, a ``(P, d)`` tensor shared by
    the batch, a ``(B, P, d)`` tensor, or a callable
    ``provider(class_token, patch_tokens, layer_index) -> (B, P, d)``.
    Prompt outputs are dropped after every layer.

    Returns ``(features (B, D), cls_attention (B, heads, n))`` where the
    attention row is the final layer's class-token attention over its whole
    input sequence.
    """
    cfg = w.config
    plan = list(plan or [])
    if len(plan) > cfg.visual_layers:
        raise PlanError(f"plan covers {len(plan)} layers but the encoder has {cfg.visual_layers}")
    plan += [None] * (cfg.visual_layers - len(plan))

    e = embed_patches(images, w)
    batch = e.shape[0]
    s = initial_class_token(w, batch)
    attn = None
    n_prompts = []
    for index, entry in enumerate(plan):
        prompts = _prompts_for_layer(entry, s, e, index, batch, cfg.d_visual)
        parts = [s] if prompts is None else [s, prompts]
        p = 0 if prompts is None else prompts.shape[1]
        seq = T.concat(parts + [e], axis=1)
        out, attn = transformer_layer_forward(seq, w.layer("visual", index), cfg.heads)
        s = out[:, 0:1]
        e = out[:, 1 + p :]
        n_prompts.append(p)
    pooled = T.layer_norm(s.reshape(batch, cfg.d_visual), w["visual.ln_post.gain"], w["visual.ln_post.bias"])
    feature = T.l2_normalize(linear(pooled, w["visual.proj"]))
    cls_attn = attn[:, :, 0, :]
    if return_tokens:
        return feature, cls_attn, n_prompts
    return feature, cls_attn


# ---------------------------------------------------------------------------
# text branch
# ---------------------------------------------------------------------------


def embed_tokens(seqs, w, context_override=None):
    """Token embeddings ``(K, T, d_text)``, with context slots optionally replaced.

    ``context_override`` is an ``(M, d_text)`` tensor shared by every
    sequence; its rows take the places listed in ``context_positions``.
    """
    cfg = w.config
    table = w["text.token_embed"].data
    rows = []
    for seq in seqs:
        seq.validate(cfg.max_text_len)
        ids = np.asarray(seq.token_ids)
        if np.any(ids >= table.shape[0]):
            raise VocabularyError(f"token id {int(ids.max())} outside the embedding table")
        emb = table[ids]
        if context_override is None:
            rows.append(Tensor(emb[None]))
            continue
        pos = list(seq.context_positions)
        if len(pos) != context_override.shape[0]:
            raise DimensionError(f"{context_override.shape[0]} context vectors for {len(pos)} context slots")
        if pos != list(range(pos[0], pos[0] + len(pos))):
            raise DimensionError("context slots must be contiguous")
        lo, hi = pos[0], pos[-1] + 1
        pieces = [Tensor(emb[:lo]), context_override, Tensor(emb[hi:])]
        rows.append(T.concat(pieces, axis=0).reshape(1, len(ids), -1))
    return T.concat(rows, axis=0)


def _causal_mask(n, dtype):
    return np.triu(np.full((n, n), -np.inf, dtype=dtype), k=1)


def text_encode_embedded(emb, end_positions, w):
    """Run embedded sequences ``(K, T, d)`` through the text tower -> ``(K, D)``."""
    cfg = w.config
    k, length, d = emb.shape
    x = emb + w["text.pos_embed"][:length]
    mask = _causal_mask(length, x.data.dtype)
    for index in range(cfg.text_layers):
        x, _ = transformer_layer_forward(x, w.layer("text", index), cfg.heads, mask=mask)
    pooled = x[np.arange(k), np.asarray(end_positions)]
    pooled = T.layer_norm(pooled, w["text.ln_final.gain"], w["text.ln_final.bias"])
    return T.l2_normalize(linear(pooled, w["text.proj"]))


def text_encode(seqs, w, context_override=None):
    """Unit-norm text features for one sequence ``(D,)`` or a list ``(K, D)``."""
    single = isinstance(seqs, TokenSequence)
    seqs = [seqs] if single else list(seqs)
    emb = embed_tokens(seqs, w, context_override)
    out = text_encode_embedded(emb, [s.end_position for s in seqs], w)
    return out[0] if single else out


def zero_shot_logits(image_features, class_features, temperature):
    """``cos(x, w_i) / temperature`` for unit-norm inputs.

    ``image_features`` may be ``(D,)`` or ``(B, D)``.
    """
    x = image_features if isinstance(image_features, Tensor) else Tensor(image_features)
    wts = class_features if isinstance(class_features, Tensor) else Tensor(class_features)
    for name, t in (("image", x), ("class", wts)):
        norms = np.linalg.norm(t.data.astype(np.float64), axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-4):
            raise ContractError(f"{name} features must be unit-normalised (norms {norms.min():.6f}..{norms.max():.6f})")
    single = x.ndim == 1
    if single:
        x = x.reshape(1, -1)
    logits = T.matmul(x, wts.mT) * (1.0 / temperature)
    return logits[0] if single else logits


def handcrafted_class_features(class_names, vocab, w, template=TEMPLATE):
    seqs = [template_sequence(name, vocab, w.config.max_text_len, template) for name in class_names]
    with T.no_lineage():
        return text_encode(seqs, w)

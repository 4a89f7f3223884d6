"""Learnable prompt families and the class-aware visual prompt generator.

Three families are tuned while the dual encoder stays frozen:

* text context vectors shared by every class sentence,
* plain visual prompts inserted at the input of chosen image layers,
* a cross-attention generator that builds per-image prompts from the
  text features of the top-ranked classes (queries) and the current
  image layer's inputs (keys/values).

:class:`PromptedCLIP` wires them into the backbone for each supported
variant (``zeroshot``, ``coop``, ``vpt``, ``vlp``, ``dpt``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from . import backbone as bb
from . import tensor as T
from .container import PROMPTS_MAGIC, read_container, write_container
from .errors import ConfigError, ContractError, DimensionError, ParameterError, VocabularyError
from .tensor import Tensor

VARIANTS = ("zeroshot", "coop", "vpt", "vlp", "dpt")
TEXT_PROMPTED = {"coop", "vlp", "dpt"}
VISUAL_PROMPTED = {"vpt", "vlp", "dpt"}

_STREAM_CONTEXT, _STREAM_VISUAL, _STREAM_GENERATOR = 1, 2, 3


def _rng(seed, *stream):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *stream])))


# ---------------------------------------------------------------------------
# prompt families
# ---------------------------------------------------------------------------


@dataclass
class ClassSelection:
    """Top-ranked class ids for one image, best first."""

    indices: np.ndarray
    forced_ground_truth: int | None = None

    def __len__(self):
        return len(self.indices)

    def position_of(self, label):
        hits = np.flatnonzero(self.indices == label)
        if hits.size == 0:
            raise ContractError(f"label {label} is not among the selected classes {self.indices.tolist()}")
        return int(hits[0])


def rank_classes(scores):
    """Class ids by descending score; ties go to the lower id."""
    scores = np.asarray(scores)
    return np.argsort(-scores, kind="stable")


def topk_from_scores(scores, k_n, training_label=None):
    """Top ``k_n`` classes of ``scores``; optionally force ``training_label`` in.

    A missing training label replaces the lowest-ranked entry.
    """
    if k_n < 1:
        raise ParameterError(f"K_N must be at least 1, got {k_n}")
    order = rank_classes(scores)[: min(k_n, len(scores))].copy()
    forced = None
    if training_label is not None and training_label not in order:
        order[-1] = training_label
        forced = int(training_label)
    return ClassSelection(order, forced)


def select_topk_classes(image_feature, handcrafted_class_features, k_n, training_label=None, temperature=0.01):
    """Rank classes by zero-shot logits of the prompt-free feature of one image."""
    logits = bb.zero_shot_logits(image_feature, handcrafted_class_features, temperature)
    return topk_from_scores(logits.data, k_n, training_label)


@dataclass
class TextPromptContext:
    """Shared context vectors ``u_1..u_M`` and the class vocabulary."""

    context: Tensor
    class_names: list
    vocab: bb.Vocabulary

    @property
    def length(self):
        return self.context.shape[0]

    def class_token_embeddings(self, w):
        table = w["text.token_embed"].data
        return Tensor(table[[self.vocab.id(c) for c in self.class_names]])


def build_text_prompts(ctx, class_ids, w):
    """One ``<sos> u_1..u_M c_i <eos>`` sequence per class id.

    Returns the token sequences; the context rows are supplied to the
    text encoder as the override, so every sequence reads the same
    parameters.
    """
    seqs = []
    for cid in class_ids:
        if not 0 <= cid < len(ctx.class_names):
            raise VocabularyError(f"class id {cid} outside 0..{len(ctx.class_names) - 1}")
        seqs.append(bb.context_sequence(ctx.class_names[cid], ctx.length, ctx.vocab, w.config.max_text_len))
    return seqs


@dataclass
class VisualPromptStack:
    """Plain prompts per 1-based layer index, plus the CAVPT layer set."""

    prompts: dict
    cavpt_layers: frozenset = frozenset()

    def __post_init__(self):
        overlap = set(self.prompts) & set(self.cavpt_layers)
        if overlap:
            raise ConfigError(f"layers {sorted(overlap)} have both plain and class-aware prompts")


GENERATOR_NAMES = (
    "query_map.weight",
    "query_map.bias",
    "wq",
    "wk",
    "wv",
    "ln.gain",
    "ln.bias",
    "head.weight",
    "head.bias",
)


def init_generator(d, embed_dim, n_classes, rng, d_k=None):
    """Generator parameters; projections use ``1/sqrt(fan_in)`` normal init."""
    d_k = d_k or d

    def normal(shape, fan_in):
        return Tensor(rng.standard_normal(shape) / math.sqrt(fan_in), requires_grad=True, dtype=np.float32)

    return {
        "query_map.weight": normal((d, embed_dim), embed_dim),
        "query_map.bias": Tensor(np.zeros(d, np.float32), requires_grad=True),
        "wq": normal((d_k, d), d),
        "wk": normal((d_k, d), d),
        "wv": normal((d, d), d),
        "ln.gain": Tensor(np.ones(d, np.float32), requires_grad=True),
        "ln.bias": Tensor(np.zeros(d, np.float32), requires_grad=True),
        "head.weight": Tensor(0.02 * rng.standard_normal((n_classes, d)), requires_grad=True, dtype=np.float32),
        "head.bias": Tensor(np.zeros(n_classes, np.float32), requires_grad=True),
    }


def generate_cavpt(text_features, layer_inputs, params):
    """Class-aware prompts from cross-attention.

    ``text_features`` ``(B, K_N, D)`` are mapped to queries ``q``;
    ``layer_inputs`` ``(B, n, d)`` supply keys and values.  Returns
    ``(prompts, q, o, attention)`` with ``prompts = LN(o + q)``.
    """
    if text_features.ndim != 3 or layer_inputs.ndim != 3 or text_features.shape[0] != layer_inputs.shape[0]:
        raise DimensionError(f"generator inputs {text_features.shape} and {layer_inputs.shape} disagree")
    q = bb.linear(text_features, params["query_map.weight"], params["query_map.bias"])
    d_k = params["wq"].shape[0]
    qk = bb.linear(q, params["wq"])
    kk = bb.linear(layer_inputs, params["wk"])
    vv = bb.linear(layer_inputs, params["wv"])
    attn = T.softmax(T.matmul(qk, kk.mT), temperature=math.sqrt(d_k))
    o = T.matmul(attn, vv)
    prompts = T.layer_norm(o + q, params["ln.gain"], params["ln.bias"])
    return prompts, q, o, attn.data


def cavpt_aux_logits(attended, queries, selections, labels, params, ln_input="o_plus_q"):
    """K-way logits from the generator row of each image's ground-truth class.

    ``attended``/``queries`` are ``(B, K_N, d)``.  Only the row whose
    selected class equals the label is classified.
    """
    rows = np.array([sel.position_of(int(y)) for sel, y in zip(selections, labels)])
    batch = np.arange(len(rows))
    o = attended[batch, rows]
    if ln_input == "o_plus_q":
        o = o + queries[batch, rows]
    elif ln_input != "o":
        raise ConfigError(f"unknown ca_ln_input {ln_input!r}")
    h = T.layer_norm(o, params["ln.gain"], params["ln.bias"])
    return bb.linear(h, params["head.weight"], params["head.bias"])


def assemble_image_input(visual, n_layers, cavpt_provider=None, cavpt_length=None):
    """Per-layer injection plan (0-based list) for the image encoder.

    Plain prompts go to their layers; CAVPT layers get ``cavpt_provider``
    instead.  A CAVPT length of 0 leaves those layers without prompts.
    """
    plan = [None] * n_layers
    for layer, prompts in visual.prompts.items():
        if not 1 <= layer <= n_layers:
            raise ConfigError(f"visual prompt layer {layer} outside 1..{n_layers}")
        plan[layer - 1] = prompts
    for layer in visual.cavpt_layers:
        if not 1 <= layer <= n_layers:
            raise ConfigError(f"CAVPT layer {layer} outside 1..{n_layers}")
        if plan[layer - 1] is not None:
            raise ConfigError(f"layer {layer} already has plain prompts")
        if cavpt_length != 0:
            plan[layer - 1] = cavpt_provider
    return plan


# ---------------------------------------------------------------------------
# prompt set
# ---------------------------------------------------------------------------


@dataclass
class PromptSettings:
    """Shape knobs for a :class:`PromptSet`."""

    variant: str = "dpt"
    n_context: int = 16
    prompt_length: int = 10
    cavpt_length: int = 10
    cavpt_layers: tuple | None = None
    vpt_layers: tuple | None = None
    shared_generator: bool = True
    ca_ln_input: str = "o_plus_q"

    def resolve_layers(self, n_layers):
        """``(plain_layers, cavpt_layers)`` as sorted tuples of 1-based ids."""
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; valid: {', '.join(VARIANTS)}")
        cavpt = ()
        if self.variant == "dpt":
            cavpt = tuple(sorted(self.cavpt_layers if self.cavpt_layers is not None else (n_layers,)))
        plain = ()
        if self.variant in VISUAL_PROMPTED:
            if self.vpt_layers is not None:
                plain = tuple(sorted(self.vpt_layers))
            else:
                plain = tuple(l for l in range(1, n_layers + 1) if l not in cavpt)
        for layer in plain + cavpt:
            if not 1 <= layer <= n_layers:
                raise ConfigError(f"prompt layer {layer} outside 1..{n_layers}")
        if set(plain) & set(cavpt):
            raise ConfigError(f"layers {sorted(set(plain) & set(cavpt))} have both plain and class-aware prompts")
        return plain, cavpt


class PromptSet:
    """All learnable parameters of one experiment."""

    def __init__(self, settings, context, visual, generators):
        self.settings = settings
        self.context = context
        self.visual = visual
        self.generators = generators

    @classmethod
    def initialise(cls, settings, cfg, n_classes, seed):
        """Seeded init; every (family, layer) draws from its own stream."""
        plain, cavpt = settings.resolve_layers(cfg.visual_layers)
        context = None
        if settings.variant in TEXT_PROMPTED:
            if settings.n_context < 1:
                raise ConfigError("context length M must be at least 1")
            rng = _rng(seed, _STREAM_CONTEXT)
            context = Tensor(
                0.02 * rng.standard_normal((settings.n_context, cfg.d_text)), requires_grad=True, dtype=np.float32
            )
        if settings.prompt_length < 0:
            raise ConfigError("prompt length P must be non-negative")
        prompts = {}
        for layer in plain:
            rng = _rng(seed, _STREAM_VISUAL, layer)
            prompts[layer] = Tensor(
                0.02 * rng.standard_normal((settings.prompt_length, cfg.d_visual)),
                requires_grad=True,
                dtype=np.float32,
            )
        generators = {}
        if cavpt:
            if settings.shared_generator:
                shared = init_generator(cfg.d_visual, cfg.embed_dim, n_classes, _rng(seed, _STREAM_GENERATOR))
                generators = {layer: shared for layer in cavpt}
            else:
                generators = {
                    layer: init_generator(cfg.d_visual, cfg.embed_dim, n_classes, _rng(seed, _STREAM_GENERATOR, layer))
                    for layer in cavpt
                }
        visual = VisualPromptStack(prompts, frozenset(cavpt))
        return cls(settings, context, visual, generators)

    def named_parameters(self):
        out = {}
        if self.context is not None:
            out["context"] = self.context
        for layer, p in sorted(self.visual.prompts.items()):
            out[f"visual.{layer}"] = p
        seen = set()
        for layer, params in sorted(self.generators.items()):
            if id(params) in seen:
                continue
            seen.add(id(params))
            tag = "shared" if self.settings.shared_generator else str(layer)
            for name in GENERATOR_NAMES:
                out[f"generator.{tag}.{name}"] = params[name]
        return out

    def parameter_groups(self, include_generator=True):
        """Parameters keyed by optimiser group (``text``, ``visual``, ``generator``,
        ``generator_attn``, ``head``); empty groups are omitted."""
        groups = {}
        for name, p in self.named_parameters().items():
            if p.size == 0:
                continue
            if name == "context":
                key = "text"
            elif name.startswith("visual."):
                key = "visual"
            elif not include_generator:
                continue
            elif ".head." in name:
                key = "head"
            elif name.endswith((".wq", ".wk")):
                key = "generator_attn"
            else:
                key = "generator"
            groups.setdefault(key, []).append(p)
        return groups

    def text_parameters(self):
        return [self.context] if self.context is not None else []

    def visual_parameters(self, include_generator=True):
        params = [
            p for k, p in self.named_parameters().items()
            if k.startswith("visual.") or (include_generator and k.startswith("generator."))
        ]
        return [p for p in params if p.size > 0]

    def save(self, path):
        s = self.settings
        header = {
            "variant": s.variant,
            "n_context": s.n_context,
            "prompt_length": s.prompt_length,
            "cavpt_length": s.cavpt_length,
            "cavpt_layers": sorted(self.visual.cavpt_layers),
            "vpt_layers": sorted(self.visual.prompts),
            "shared_generator": s.shared_generator,
            "ca_ln_input": s.ca_ln_input,
        }
        write_container(path, PROMPTS_MAGIC, header, {k: v.data for k, v in self.named_parameters().items()})

    @classmethod
    def load(cls, path, cfg, n_classes):
        header, tensors = read_container(path, PROMPTS_MAGIC)
        settings = PromptSettings(
            variant=header["variant"],
            n_context=header["n_context"],
            prompt_length=header["prompt_length"],
            cavpt_length=header["cavpt_length"],
            cavpt_layers=tuple(header["cavpt_layers"]),
            vpt_layers=tuple(header["vpt_layers"]),
            shared_generator=header["shared_generator"],
            ca_ln_input=header["ca_ln_input"],
        )
        pack = cls.initialise(settings, cfg, n_classes, seed=0)
        params = pack.named_parameters()
        if set(params) != set(tensors):
            raise ConfigError(f"prompt pack tensors {sorted(tensors)} do not match {sorted(params)}")
        for name, p in params.items():
            if p.shape != tensors[name].shape:
                raise DimensionError(f"prompt pack {name}: {tensors[name].shape} != {p.shape}")
            p.data[...] = tensors[name]
        return pack


# ---------------------------------------------------------------------------
# full forward pass
# ---------------------------------------------------------------------------


@dataclass
class ForwardResult:
    logits: Tensor
    image_features: Tensor
    text_features: Tensor
    cls_attention: np.ndarray
    n_prompts: list
    selections: list = field(default_factory=list)
    aux_logits: list = field(default_factory=list)
    cavpt_outputs: list = field(default_factory=list)


class PromptedCLIP:
    """Frozen backbone plus a :class:`PromptSet`, for one class vocabulary."""

    def __init__(self, weights, vocab, class_names, prompts, template=bb.TEMPLATE):
        self.weights = weights
        self.vocab = vocab
        self.class_names = list(class_names)
        for name in self.class_names:
            if name not in vocab:
                raise VocabularyError(f"class name {name!r} is not a vocabulary entry")
        self.prompts = prompts
        self.template = template
        self.handcrafted = bb.handcrafted_class_features(self.class_names, vocab, weights, template)

    @property
    def variant(self):
        return self.prompts.settings.variant

    @property
    def temperature(self):
        return self.weights.temperature

    @property
    def n_classes(self):
        return len(self.class_names)

    @property
    def uses_cavpt(self):
        return bool(self.prompts.visual.cavpt_layers) and self.prompts.settings.cavpt_length > 0

    def learned_text_features(self):
        ctx = self.prompts.context
        if ctx is None:
            raise ContractError(f"variant {self.variant} has no text context")
        text_ctx = TextPromptContext(ctx, self.class_names, self.vocab)
        seqs = build_text_prompts(text_ctx, range(self.n_classes), self.weights)
        return bb.text_encode(seqs, self.weights, context_override=ctx)

    def classifier_features(self):
        """Class weights of the variant's prediction rule."""
        if self.variant in TEXT_PROMPTED:
            return self.learned_text_features()
        return self.handcrafted

    def logits(self, image_features, class_features):
        return bb.zero_shot_logits(image_features, class_features, self.temperature)

    def plain_features(self, images):
        """Prompt-free image features (the frozen model's own view)."""
        with T.no_lineage():
            feats, _ = bb.image_encode(images, [], self.weights)
        return feats

    def select(self, plain_features, labels=None):
        k_n = self.prompts.settings.cavpt_length
        z = self.logits(plain_features, self.handcrafted).data
        sels = []
        for i in range(z.shape[0]):
            label = None if labels is None else int(labels[i])
            sels.append(topk_from_scores(z[i], k_n, label))
        return sels

    def forward(self, images, labels=None, plain_features=None, text_features=None):
        """Prediction logits for a batch.

        ``labels`` switch on training behaviour: the ground truth is forced
        into each top-K_N selection and the auxiliary logits are computed.
        """
        w = self.weights
        cfg = w.config
        settings = self.prompts.settings
        if text_features is None:
            text_features = self.classifier_features()
        selections, aux, outputs = [], [], []
        provider = None
        if self.uses_cavpt:
            if plain_features is None:
                plain_features = self.plain_features(images)
            selections = self.select(plain_features, labels)
            learned = text_features if self.variant in TEXT_PROMPTED else self.learned_text_features()
            idx = np.stack([s.indices for s in selections])
            g = learned[idx]

            def provider(s, e, layer_index):
                params = self.prompts.generators[layer_index + 1]
                keys = T.concat([s, e], axis=1)
                prompts, q, o, attn = generate_cavpt(g, keys, params)
                outputs.append((layer_index + 1, prompts, q, o, attn))
                if labels is not None:
                    aux.append(cavpt_aux_logits(o, q, selections, labels, params, settings.ca_ln_input))
                return prompts

        plan = assemble_image_input(self.prompts.visual, cfg.visual_layers, provider, settings.cavpt_length)
        if self.variant not in VISUAL_PROMPTED:
            plan = []
        feats, attn, n_prompts = bb.image_encode(images, plan, w, return_tokens=True)
        logits = self.logits(feats, text_features)
        return ForwardResult(logits, feats, text_features, attn, n_prompts, selections, aux, outputs)

    def predict(self, images):
        with T.no_lineage():
            return np.argmax(self.forward(images).logits.data, axis=-1)

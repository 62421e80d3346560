"""End-to-end method implementations.

Base-stage training (classification for the classifier methods, episodic for
the metric methods) of a per-frame affine embedding, plus per-episode
adaptation and prediction for all five methods:

* ``meta-baseline``: cosine between mean-pooled embeddings and class
  prototypes.
* ``cmn-lite``: multi-saliency descriptors compared head-by-head.
* ``otam-lite``: negative alignment cost from hard-path dynamic time warping.
* ``baseline``: frozen embedding, fresh linear head trained on the support
  set.
* ``baseline-plus``: frozen embedding and base head, novel head imprinted
  from normalized support logits and then fine-tuned.

The embedding is a per-frame affine map so every gradient below is analytic
and finite-difference checkable.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, replace

import numpy as np

from .align import (
    SaliencyParams,
    cosine,
    dtw,
    frame_distance_matrix,
    multi_saliency,
    otam_similarity,
    saliency_attention,
    saliency_similarity,
)
from .core import (
    FormatError,
    LeakageError,
    Manifest,
    RngStream,
    ShapeError,
    ValidationError,
    as_generator,
)
from .heads import (
    AdamState,
    ImprintedHead,
    LinearHead,
    adam_step,
    imprint,
    init_head,
    linear_forward,
    softmax_xent,
    softmax_xent_batch,
    train_head,
)

METRIC_METHODS = ("meta-baseline", "cmn-lite", "otam-lite")
CLASSIFIER_METHODS = ("baseline", "baseline-plus")
METHODS = METRIC_METHODS + CLASSIFIER_METHODS

# stream_id offsets for the training stage
STREAM_TRAIN_EPISODE = 3 << 32
STREAM_VAL_EPISODE = 4 << 32
STREAM_INIT = 5 << 32
STREAM_BATCH = 6 << 32
STREAM_PRETRAIN = 7 << 32
STREAM_ADAPT = 10 << 32

FSVM_MAGIC = b"FSVM"
FSVM_VERSION = 1


@dataclass(frozen=True, eq=False)
class EmbeddingParams:
    """Per-frame affine feature extractor: each frame x maps to W x + b."""

    weight: np.ndarray  # (C, C_in)
    bias: np.ndarray  # (C,)

    def __post_init__(self) -> None:
        w = np.array(self.weight, dtype=np.float64)
        b = np.array(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[0]:
            raise ShapeError(
                f"embedding weight {w.shape} / bias {b.shape} mismatch"
            )
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValidationError("embedding parameters must be finite")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]


def init_embedding(
    rng: RngStream | np.random.Generator, out_dim: int, in_dim: int
) -> EmbeddingParams:
    gen = as_generator(rng)
    w = gen.standard_normal((out_dim, in_dim)) / np.sqrt(in_dim)
    return EmbeddingParams(w, np.zeros(out_dim))


def embed_frames(emb: EmbeddingParams, frames: np.ndarray) -> np.ndarray:
    """Apply the affine map to every frame; works on (..., T, C_in) batches."""
    return np.asarray(frames, dtype=np.float64) @ emb.weight.T + emb.bias


def pooled_embedding(emb: EmbeddingParams, frames: np.ndarray) -> np.ndarray:
    """Per-frame embed, then mean over time: (..., T, C_in) -> (..., C)."""
    return embed_frames(emb, frames).mean(axis=-2)


@dataclass(frozen=True)
class MethodConfig:
    """Everything needed to train and evaluate one method reproducibly.

    Learning-rate defaults when ``lr_base`` is None: 1e-3 from scratch, and
    with a pretrained embedding 1e-4 for the classifier methods or 1e-5 for
    the metric methods.
    """

    method: str
    n_way: int = 5
    k_shot: int = 1
    temperature: float = 10.0
    init: str = "scratch"  # "scratch" | "pretrained"
    lr_base: float | None = None
    lr_adapt: float = 1e-3
    iters_adapt: int = 100
    dropout_p: float = 0.5
    embed_dim: int = 16
    seed: int = 0
    dtw_normalize: bool = False
    saliency_heads: int = 4
    # training schedule
    batch_size: int = 32
    train_steps: int = 600
    val_every: int = 100
    episodes_per_epoch: int = 200
    max_epochs: int = 8
    patience: int = 3
    val_episodes: int = 100

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValidationError(
                f"unknown method {self.method!r}; expected one of {METHODS}"
            )
        if self.init not in ("scratch", "pretrained"):
            raise ValidationError(f"unknown init {self.init!r}")
        if self.n_way < 2 or self.k_shot < 1:
            raise ValidationError("need n_way >= 2 and k_shot >= 1")
        if self.temperature <= 0:
            raise ValidationError("temperature must be > 0")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValidationError("dropout_p must be in [0, 1)")
        if self.iters_adapt < 0:
            raise ValidationError("iters_adapt must be >= 0")
        if self.embed_dim < 1 or self.saliency_heads < 1:
            raise ValidationError("embed_dim and saliency_heads must be >= 1")
        if self.seed < 0:
            raise ValidationError("seed must be >= 0")

    def resolved_lr_base(self) -> float:
        if self.lr_base is not None:
            return self.lr_base
        if self.init == "scratch":
            return 1e-3
        return 1e-4 if self.method in CLASSIFIER_METHODS else 1e-5

    def canonical_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


@dataclass(frozen=True)
class TrainedModel:
    """Frozen training output: embedding plus method-dependent components."""

    embedding: EmbeddingParams
    base_head: LinearHead | None
    saliency: SaliencyParams | None
    config: MethodConfig

    def __post_init__(self) -> None:
        if self.config.method in CLASSIFIER_METHODS and self.base_head is None:
            raise ValidationError(f"{self.config.method} requires a base head")
        if self.config.method == "cmn-lite" and self.saliency is None:
            raise ValidationError("cmn-lite requires saliency parameters")

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint()

    def weight_digest(self) -> str:
        """Hash of all parameter bytes; adaptation must never change it."""
        h = hashlib.sha256()
        h.update(self.embedding.weight.tobytes())
        h.update(self.embedding.bias.tobytes())
        if self.base_head is not None:
            h.update(self.base_head.weight.tobytes())
            h.update(self.base_head.bias.tobytes())
        if self.saliency is not None:
            h.update(self.saliency.queries.tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class EpisodeArrays:
    """Episode contents as raw arrays: per-class support stacks plus query."""

    support: tuple[np.ndarray, ...]  # class c -> (k_c, T, C_in)
    query: np.ndarray  # (T, C_in)
    label: int


def episode_arrays(episode, n_way: int) -> EpisodeArrays:
    groups: list[list[np.ndarray]] = [[] for _ in range(n_way)]
    for seq, lab in episode.support:
        groups[lab].append(seq.frames)
    if any(not g for g in groups):
        raise ValidationError("episode does not cover all classes")
    return EpisodeArrays(
        support=tuple(np.stack(g) for g in groups),
        query=episode.query[0].frames,
        label=int(episode.query[1]),
    )


# ---------------------------------------------------------------------------
# losses with hand-derived gradients


def _cos_grads(
    u: np.ndarray, v: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    c = float(u @ v / (nu * nv))
    du = v / (nu * nv) - c * u / (nu * nu)
    dv = u / (nu * nv) - c * v / (nv * nv)
    return c, du, dv


def classification_loss_and_grads(
    emb: EmbeddingParams,
    head: LinearHead,
    frames: np.ndarray,
    labels: np.ndarray,
    mask: np.ndarray | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy of embed -> mean-pool -> (dropout) -> linear head.

    ``mask`` is an optional precomputed inverted-dropout mask of shape (N, C);
    evaluation passes None, which is the identity.
    """
    frames = np.asarray(frames, dtype=np.float64)
    embedded = embed_frames(emb, frames)  # (N, T, C)
    pooled = embedded.mean(axis=1)  # (N, C)
    h = pooled if mask is None else pooled * mask
    logits = h @ head.weight.T + head.bias
    loss, dlogits = softmax_xent_batch(logits, labels)

    dhead_w = dlogits.T @ h
    dhead_b = dlogits.sum(axis=0)
    dh = dlogits @ head.weight
    dpooled = dh if mask is None else dh * mask
    xbar = frames.mean(axis=1)  # (N, C_in); mean pool commutes with the affine map
    grads = {
        "embed_w": dpooled.T @ xbar,
        "embed_b": dpooled.sum(axis=0),
        "head_w": dhead_w,
        "head_b": dhead_b,
    }
    return loss, grads


def metabaseline_loss_and_grads(
    emb: EmbeddingParams, ep: EpisodeArrays, tau: float
) -> tuple[float, dict[str, np.ndarray]]:
    """Episode loss for cosine-to-prototype matching of pooled embeddings."""
    q = pooled_embedding(emb, ep.query)  # (C,)
    protos = [pooled_embedding(emb, frames).mean(axis=0) for frames in ep.support]
    scores = np.empty(len(protos))
    dcos_q = []
    dcos_p = []
    for c, p in enumerate(protos):
        s, dq, dp = _cos_grads(q, p)
        scores[c] = s
        dcos_q.append(dq)
        dcos_p.append(dp)
    loss, dscores = softmax_xent(tau * scores, ep.label)
    g = tau * dscores

    dq_total = np.zeros_like(q)
    dembed_w = np.zeros_like(emb.weight)
    dembed_b = np.zeros_like(emb.bias)
    for c in range(len(protos)):
        dq_total += g[c] * dcos_q[c]
        dp = g[c] * dcos_p[c]
        xbar_c = ep.support[c].mean(axis=(0, 1))  # mean over shots and time
        dembed_w += np.outer(dp, xbar_c)
        dembed_b += dp
    dembed_w += np.outer(dq_total, ep.query.mean(axis=0))
    dembed_b += dq_total
    return loss, {"embed_w": dembed_w, "embed_b": dembed_b}


def _saliency_backward(
    embedded: np.ndarray,
    att: np.ndarray,
    params: SaliencyParams,
    ddesc: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Backprop through descriptor = att.T @ E with att = softmax(scale E U.T)."""
    dE = att @ ddesc  # (T, C)
    datt = embedded @ ddesc.T  # (T, S)
    dz = att * (datt - (att * datt).sum(axis=0, keepdims=True))
    dq = params.scale * (dz.T @ embedded)  # (S, C)
    dE = dE + params.scale * (dz @ params.queries)
    return dE, dq


def cmn_loss_and_grads(
    emb: EmbeddingParams, sal: SaliencyParams, ep: EpisodeArrays, tau: float
) -> tuple[float, dict[str, np.ndarray]]:
    """Episode loss for multi-saliency descriptor matching."""
    n_heads = sal.n_heads
    q_emb = embed_frames(emb, ep.query)
    q_att = saliency_attention(q_emb, sal)
    q_desc = q_att.T @ q_emb  # (S, C)

    sup_emb: list[np.ndarray] = []  # flat per support video
    sup_att: list[np.ndarray] = []
    sup_frames: list[np.ndarray] = []
    class_desc: list[np.ndarray] = []
    class_members: list[list[int]] = []
    for frames_c in ep.support:
        members = []
        descs = []
        for frames in frames_c:
            e = embed_frames(emb, frames)
            a = saliency_attention(e, sal)
            members.append(len(sup_emb))
            sup_emb.append(e)
            sup_att.append(a)
            sup_frames.append(frames)
            descs.append(a.T @ e)
        class_desc.append(np.mean(descs, axis=0))
        class_members.append(members)

    scores = np.empty(len(class_desc))
    cos_grads = []
    for c, desc in enumerate(class_desc):
        per_head = [_cos_grads(q_desc[s], desc[s]) for s in range(n_heads)]
        scores[c] = np.mean([ch[0] for ch in per_head])
        cos_grads.append(per_head)
    loss, dscores = softmax_xent(tau * scores, ep.label)
    g = tau * dscores

    dq_desc = np.zeros_like(q_desc)
    ddesc_class = [np.zeros_like(q_desc) for _ in class_desc]
    for c in range(len(class_desc)):
        for s in range(n_heads):
            _, dqs, dps = cos_grads[c][s]
            dq_desc[s] += (g[c] / n_heads) * dqs
            ddesc_class[c][s] += (g[c] / n_heads) * dps

    dembed_w = np.zeros_like(emb.weight)
    dembed_b = np.zeros_like(emb.bias)
    dqueries = np.zeros_like(sal.queries)

    dE_q, dq_sal = _saliency_backward(q_emb, q_att, sal, dq_desc)
    dembed_w += dE_q.T @ ep.query
    dembed_b += dE_q.sum(axis=0)
    dqueries += dq_sal
    for c, members in enumerate(class_members):
        share = ddesc_class[c] / len(members)
        for idx in members:
            dE, dq_sal = _saliency_backward(sup_emb[idx], sup_att[idx], sal, share)
            dembed_w += dE.T @ sup_frames[idx]
            dembed_b += dE.sum(axis=0)
            dqueries += dq_sal
    return loss, {"embed_w": dembed_w, "embed_b": dembed_b, "sal_q": dqueries}


def otam_loss_and_grads(
    emb: EmbeddingParams,
    ep: EpisodeArrays,
    tau: float,
    normalize: bool = False,
    paths: list[list[list[tuple[int, int]]]] | None = None,
) -> tuple[float, dict[str, np.ndarray], list[list[list[tuple[int, int]]]]]:
    """Episode loss for alignment-based matching with hard paths.

    Alignment paths are treated as constants during the gradient step: when
    ``paths`` is None they are recomputed from the current embedding, and the
    used paths are returned so callers can freeze them (finite-difference
    checks perturb parameters under fixed paths).
    """
    q_emb = embed_frames(emb, ep.query)
    sup_emb = [embed_frames(emb, frames_c) for frames_c in ep.support]

    if paths is None:
        paths = [
            [dtw(frame_distance_matrix(q_emb, e))[1] for e in emb_c]
            for emb_c in sup_emb
        ]

    n_way = len(ep.support)
    scores = np.zeros(n_way)
    cos_cache: list[list[list[tuple]]] = []
    for c in range(n_way):
        sims = []
        class_cache = []
        for i, e in enumerate(sup_emb[c]):
            path = paths[c][i]
            steps = []
            total = 0.0
            for a, b in path:
                cval, du, dv = _cos_grads(q_emb[a], e[b])
                total += 1.0 - cval
                steps.append((a, b, du, dv))
            sim = -total / len(path) if normalize else -total
            sims.append(sim)
            class_cache.append(steps)
        scores[c] = np.mean(sims)
        cos_cache.append(class_cache)

    loss, dscores = softmax_xent(tau * scores, ep.label)
    g = tau * dscores

    dq_emb = np.zeros_like(q_emb)
    dembed_w = np.zeros_like(emb.weight)
    dembed_b = np.zeros_like(emb.bias)
    for c in range(n_way):
        k_c = len(sup_emb[c])
        for i, steps in enumerate(cos_cache[c]):
            # d loss / d cos at each path step
            coef = g[c] / k_c
            if normalize:
                coef /= len(paths[c][i])
            dE_s = np.zeros_like(sup_emb[c][i])
            for a, b, du, dv in steps:
                dq_emb[a] += coef * du
                dE_s[b] += coef * dv
            dembed_w += dE_s.T @ ep.support[c][i]
            dembed_b += dE_s.sum(axis=0)
    dembed_w += dq_emb.T @ ep.query
    dembed_b += dq_emb.sum(axis=0)
    return loss, {"embed_w": dembed_w, "embed_b": dembed_b}, paths


# ---------------------------------------------------------------------------
# scoring and adaptation


def method_scores(
    model: TrainedModel, ep: EpisodeArrays, cfg: MethodConfig
) -> np.ndarray:
    """Per-class scores for the metric methods (higher = more similar)."""
    emb = model.embedding
    if cfg.method == "meta-baseline":
        q = pooled_embedding(emb, ep.query)
        return np.array(
            [
                cosine(q, pooled_embedding(emb, frames).mean(axis=0))
                for frames in ep.support
            ]
        )
    if cfg.method == "cmn-lite":
        sal = model.saliency
        q_desc = multi_saliency(embed_frames(emb, ep.query), sal)
        scores = []
        for frames_c in ep.support:
            descs = [
                multi_saliency(embed_frames(emb, f), sal) for f in frames_c
            ]
            scores.append(saliency_similarity(q_desc, np.mean(descs, axis=0)))
        return np.array(scores)
    if cfg.method == "otam-lite":
        q_emb = embed_frames(emb, ep.query)
        scores = []
        for frames_c in ep.support:
            sims = [
                otam_similarity(
                    q_emb, embed_frames(emb, f), normalize=cfg.dtw_normalize
                )
                for f in frames_c
            ]
            scores.append(float(np.mean(sims)))
        return np.array(scores)
    raise ValidationError(f"{cfg.method!r} is not a metric method")


def adapt_and_predict(
    model: TrainedModel,
    episode,
    cfg: MethodConfig,
    rng: RngStream | np.random.Generator | None = None,
) -> int:
    """Predict the query label of one episode.

    The trained model is never mutated: metric methods just score, the
    classifier methods train a disposable head on (features derived from)
    the support set.
    """
    if model.config.method != cfg.method:
        raise ValidationError(
            f"model was trained for {model.config.method!r}, config says "
            f"{cfg.method!r}"
        )
    gen = as_generator(rng if rng is not None else RngStream(cfg.seed, STREAM_ADAPT))
    ep = episode_arrays(episode, cfg.n_way)

    if cfg.method in METRIC_METHODS:
        return int(np.argmax(method_scores(model, ep, cfg)))

    emb = model.embedding
    sup_feats = []
    sup_labels = []
    for c, frames_c in enumerate(ep.support):
        for pooled in pooled_embedding(emb, frames_c):
            sup_feats.append(pooled)
            sup_labels.append(c)
    q_feat = pooled_embedding(emb, ep.query)

    if cfg.method == "baseline":
        init = init_head(gen, cfg.n_way, emb.out_dim)
        head = train_head(
            list(zip(sup_feats, sup_labels)),
            init,
            cfg.iters_adapt,
            cfg.lr_adapt,
            0.0,
            gen,
        )
        return int(np.argmax(linear_forward(head, q_feat)))

    # baseline-plus: features are frozen base-head logits
    base = model.base_head
    sup_logits = [linear_forward(base, f) for f in sup_feats]
    q_logits = linear_forward(base, q_feat)
    novel = imprint(list(zip(sup_logits, sup_labels)), cfg.n_way)
    if cfg.iters_adapt > 0:
        novel = train_head(
            list(zip(sup_logits, sup_labels)),
            novel,
            cfg.iters_adapt,
            cfg.lr_adapt,
            0.0,
            gen,
        )
    stacked = ImprintedHead(base=base, novel=novel)
    return int(np.argmax(linear_forward(stacked.novel, q_logits)))


# ---------------------------------------------------------------------------
# training


def _split_to_arrays(split_data) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Stack a loaded split into (frames, contiguous labels, class id order)."""
    class_ids = list(split_data.class_ids)
    frames = []
    labels = []
    for local, cid in enumerate(class_ids):
        for seq in split_data.by_class[cid]:
            frames.append(seq.frames)
            labels.append(local)
    return np.stack(frames), np.array(labels, dtype=np.intp), class_ids


def _val_accuracy(model: TrainedModel, cfg: MethodConfig, val_data) -> float:
    from . import harness  # deferred; harness imports this module at top level

    correct = 0
    for i in range(cfg.val_episodes):
        gen = RngStream(cfg.seed, STREAM_VAL_EPISODE + i).generator()
        episode = harness.sample_episode(val_data, cfg.n_way, cfg.k_shot, gen)
        pred = adapt_and_predict(model, episode, cfg, rng=gen)
        correct += int(pred == episode.query[1])
    return correct / cfg.val_episodes


def train_classification(
    manifest: Manifest,
    cfg: MethodConfig,
    embedding_init: EmbeddingParams | None = None,
    select_by_val: bool = True,
    stream_base: int = 0,
) -> TrainedModel:
    """Joint Adam training of the embedding and a base linear head.

    Mini-batch cross-entropy over the train split; for baseline-plus an
    inverted-dropout mask sits between the pooled embedding and the head.
    The returned model is the checkpoint with the best validation-episode
    accuracy (falling back to the final step when selection is disabled).
    """
    from . import harness

    train_data = harness.load_split(manifest, "train")
    frames, labels, _ = _split_to_arrays(train_data)
    n_classes = len(train_data.class_ids)
    n_samples = frames.shape[0]

    emb = embedding_init or init_embedding(
        RngStream(cfg.seed, stream_base + STREAM_INIT),
        cfg.embed_dim,
        manifest.feature_dim,
    )
    head = init_head(
        RngStream(cfg.seed, stream_base + STREAM_INIT + 1), n_classes, cfg.embed_dim
    )
    params = {
        "embed_w": np.array(emb.weight),
        "embed_b": np.array(emb.bias),
        "head_w": np.array(head.weight),
        "head_b": np.array(head.bias),
    }
    state = AdamState.for_params(params, cfg.resolved_lr_base())
    gen = RngStream(cfg.seed, stream_base + STREAM_BATCH).generator()
    use_dropout = cfg.method == "baseline-plus" and cfg.dropout_p > 0.0

    def snapshot() -> TrainedModel:
        return TrainedModel(
            embedding=EmbeddingParams(params["embed_w"], params["embed_b"]),
            base_head=LinearHead(params["head_w"], params["head_b"]),
            saliency=None,
            config=cfg,
        )

    val_data = None
    if select_by_val:
        val_data = harness.load_split(manifest, "val")
        if not val_data.class_ids:
            val_data = None

    best: TrainedModel | None = None
    best_acc = -1.0
    batch = min(cfg.batch_size, n_samples)
    for step in range(1, cfg.train_steps + 1):
        idx = gen.choice(n_samples, size=batch, replace=False)
        mask = None
        if use_dropout:
            mask = (
                gen.random((batch, cfg.embed_dim)) >= cfg.dropout_p
            ) / (1.0 - cfg.dropout_p)
        emb_view = EmbeddingParams(params["embed_w"], params["embed_b"])
        head_view = LinearHead(params["head_w"], params["head_b"])
        _, grads = classification_loss_and_grads(
            emb_view, head_view, frames[idx], labels[idx], mask
        )
        params = adam_step(state, params, grads)
        if val_data is not None and (
            step % cfg.val_every == 0 or step == cfg.train_steps
        ):
            model = snapshot()
            acc = _val_accuracy(model, cfg, val_data)
            if acc > best_acc:
                best_acc = acc
                best = model
    return best if best is not None else snapshot()


def meta_train(
    manifest: Manifest,
    cfg: MethodConfig,
    embedding_init: EmbeddingParams | None = None,
) -> TrainedModel:
    """Episodic training of a metric method on the train split.

    Runs fixed-size epochs of sampled episodes, checks validation-episode
    accuracy after each, keeps the best checkpoint, and stops early when
    accuracy has not improved for ``patience`` epochs.
    """
    from . import harness

    if cfg.method not in METRIC_METHODS:
        raise ValidationError(f"meta_train expects a metric method, got {cfg.method!r}")
    train_data = harness.load_split(manifest, "train")
    if len(train_data.class_ids) < cfg.n_way:
        raise ValidationError(
            f"train split has {len(train_data.class_ids)} classes, "
            f"need at least {cfg.n_way}"
        )

    emb = embedding_init or init_embedding(
        RngStream(cfg.seed, STREAM_INIT), cfg.embed_dim, manifest.feature_dim
    )
    params = {"embed_w": np.array(emb.weight), "embed_b": np.array(emb.bias)}
    if cfg.method == "cmn-lite":
        sal = SaliencyParams.zeros(cfg.saliency_heads, cfg.embed_dim)
        params["sal_q"] = np.array(sal.queries)
    state = AdamState.for_params(params, cfg.resolved_lr_base())

    def snapshot() -> TrainedModel:
        saliency = None
        if cfg.method == "cmn-lite":
            saliency = SaliencyParams(
                params["sal_q"], 1.0 / np.sqrt(cfg.embed_dim)
            )
        return TrainedModel(
            embedding=EmbeddingParams(params["embed_w"], params["embed_b"]),
            base_head=None,
            saliency=saliency,
            config=cfg,
        )

    val_data = harness.load_split(manifest, "val")
    if not val_data.class_ids:
        val_data = None

    best: TrainedModel | None = None
    best_acc = -1.0
    stale = 0
    counter = 0
    for _ in range(cfg.max_epochs):
        for _ in range(cfg.episodes_per_epoch):
            gen = RngStream(cfg.seed, STREAM_TRAIN_EPISODE + counter).generator()
            counter += 1
            episode = harness.sample_episode(train_data, cfg.n_way, cfg.k_shot, gen)
            ep = episode_arrays(episode, cfg.n_way)
            emb_view = EmbeddingParams(params["embed_w"], params["embed_b"])
            if cfg.method == "meta-baseline":
                _, grads = metabaseline_loss_and_grads(emb_view, ep, cfg.temperature)
            elif cfg.method == "cmn-lite":
                sal_view = SaliencyParams(
                    params["sal_q"], 1.0 / np.sqrt(cfg.embed_dim)
                )
                _, grads = cmn_loss_and_grads(
                    emb_view, sal_view, ep, cfg.temperature
                )
            else:
                _, grads, _ = otam_loss_and_grads(
                    emb_view, ep, cfg.temperature, normalize=cfg.dtw_normalize
                )
            params = adam_step(state, params, grads)
        if val_data is None:
            continue
        model = snapshot()
        acc = _val_accuracy(model, cfg, val_data)
        if acc > best_acc:
            best_acc = acc
            best = model
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best if best is not None else snapshot()


def pretrain_embedding(
    pretrain_manifest: Manifest | None,
    cfg: MethodConfig,
    benchmark: Manifest | None = None,
    feature_dim: int | None = None,
) -> EmbeddingParams:
    """Train the embedding by classification on a disjoint pretraining set.

    With no pretraining data this degrades to the random initialization, so
    the knob is an identity when turned off.  Any class overlap with the
    benchmark manifest is an error: leakage would defeat the point of a
    novel-class evaluation.
    """
    if pretrain_manifest is None or not pretrain_manifest.videos:
        dim = feature_dim
        if dim is None and benchmark is not None:
            dim = benchmark.feature_dim
        if dim is None and pretrain_manifest is not None:
            dim = pretrain_manifest.feature_dim
        if dim is None:
            raise ValidationError(
                "feature_dim required when no pretraining data is given"
            )
        return init_embedding(RngStream(cfg.seed, STREAM_INIT), cfg.embed_dim, dim)
    if benchmark is not None:
        pre_ids = {cid for cid, _ in pretrain_manifest.classes}
        bench_ids = {cid for cid, _ in benchmark.classes}
        shared = sorted(pre_ids & bench_ids)
        if shared:
            raise LeakageError(
                f"pretraining classes {shared} also appear in the benchmark"
            )
    pcfg = replace(cfg, method="baseline", init="scratch", lr_base=None)
    model = train_classification(
        pretrain_manifest,
        pcfg,
        select_by_val=False,
        stream_base=STREAM_PRETRAIN,
    )
    return model.embedding


def train_model(
    manifest: Manifest,
    cfg: MethodConfig,
    pretrain_manifest: Manifest | None = None,
) -> TrainedModel:
    """Dispatch to classification or episodic training per the method."""
    embedding_init = None
    if cfg.init == "pretrained":
        embedding_init = pretrain_embedding(
            pretrain_manifest, cfg, benchmark=manifest
        )
    if cfg.method in CLASSIFIER_METHODS:
        return train_classification(manifest, cfg, embedding_init=embedding_init)
    return meta_train(manifest, cfg, embedding_init=embedding_init)


# ---------------------------------------------------------------------------
# checkpoints


def _model_blocks(model: TrainedModel) -> list[tuple[str, np.ndarray]]:
    blocks = [
        ("embed.weight", model.embedding.weight),
        ("embed.bias", model.embedding.bias.reshape(-1, 1)),
    ]
    if model.base_head is not None:
        blocks.append(("head.weight", model.base_head.weight))
        blocks.append(("head.bias", model.base_head.bias.reshape(-1, 1)))
    if model.saliency is not None:
        blocks.append(("saliency.queries", model.saliency.queries))
    return blocks


def save_checkpoint(model: TrainedModel, path) -> None:
    """Binary container: magic, version, config JSON, named f64 blocks."""
    config_bytes = model.config.canonical_json().encode()
    blocks = _model_blocks(model)
    parts = [
        FSVM_MAGIC,
        struct.pack("<II", FSVM_VERSION, len(config_bytes)),
        config_bytes,
        struct.pack("<I", len(blocks)),
    ]
    for name, arr in blocks:
        name_b = name.encode()
        rows, cols = arr.shape
        parts.append(struct.pack("<I", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<II", rows, cols))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> TrainedModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != FSVM_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {FSVM_MAGIC!r}")
    off = 4
    version, config_len = struct.unpack_from("<II", data, off)
    off += 8
    if version != FSVM_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    cfg = MethodConfig(**json.loads(data[off : off + config_len].decode()))
    off += config_len
    (n_blocks,) = struct.unpack_from("<I", data, off)
    off += 4
    blocks: dict[str, np.ndarray] = {}
    for _ in range(n_blocks):
        (name_len,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + name_len].decode()
        off += name_len
        rows, cols = struct.unpack_from("<II", data, off)
        off += 8
        count = rows * cols
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off)
        off += count * 8
        blocks[name] = arr.reshape(rows, cols).astype(np.float64)
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")

    embedding = EmbeddingParams(blocks["embed.weight"], blocks["embed.bias"][:, 0])
    base_head = None
    if "head.weight" in blocks:
        base_head = LinearHead(blocks["head.weight"], blocks["head.bias"][:, 0])
    saliency = None
    if "saliency.queries" in blocks:
        saliency = SaliencyParams(
            blocks["saliency.queries"], 1.0 / np.sqrt(cfg.embed_dim)
        )
    return TrainedModel(
        embedding=embedding, base_head=base_head, saliency=saliency, config=cfg
    )

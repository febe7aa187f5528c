"""Concept bottleneck over patch tokens.

For each concept the model attends over the token grid with one or more
learned queries (multi-scale spatial attention), optionally refines the
attended context with a per-channel sigmoid gate, projects activated and
inactivated embeddings, scores the concept probability from both, and
mixes the embeddings by that probability.  The task head sees only the
concatenated mixed embeddings, so every prediction routes through the
concept layer.

Training supervises three things jointly: the task label, each concept
probability, and each attention map against its ground-truth patch map
(cosine similarity).  See joint_loss for the exact composition.
"""

import numpy as np

from . import autodiff as ad
from .backbone import Backbone


def concept_mixture(store, pre, refined):
    """Shared concept-head form: activated/inactivated projections of a
    context vector, a probability scored from both, and their mixture.

    Returns (prob (B, 1), mixed (B, m), pos (B, m), neg (B, m)).
    """
    pos = ad.leaky_relu(ad.add(ad.matmul(refined, store[pre + "pos.w"]), store[pre + "pos.b"]))
    neg = ad.leaky_relu(ad.add(ad.matmul(refined, store[pre + "neg.w"]), store[pre + "neg.b"]))
    both = ad.concat([pos, neg], axis=1)
    p = ad.sigmoid(ad.add(ad.matmul(both, store[pre + "prob.w"]), store[pre + "prob.b"]))
    one_minus = ad.sub(ad.tensor(np.ones_like(p.values)), p)
    mixed = ad.add(ad.mul(p, pos), ad.mul(one_minus, neg))
    return p, mixed, pos, neg


def add_concept_head_params(store, init, pre, d_in, m):
    """Register one concept head's parameters under the given prefix."""
    add = store.add
    add(pre + "pos.w", init.draw((d_in, m)))
    add(pre + "pos.b", init.draw((m,), "zeros"))
    add(pre + "neg.w", init.draw((d_in, m)))
    add(pre + "neg.b", init.draw((m,), "zeros"))
    add(pre + "prob.w", init.draw((2 * m, 1)))
    add(pre + "prob.b", init.draw((1,), "zeros"))


class ConceptGenerator:
    """Concept attention + embedding stage; parameters under "acg."."""

    def __init__(self, cfg, store, init):
        self.cfg = cfg
        self.store = store
        d = cfg.d_model
        m = cfg.concept_embed_size
        heads = cfg.effective_heads()
        add = store.add
        for i in range(cfg.n_concepts):
            pre = f"acg.concept{i}."
            for h in range(heads):
                add(pre + f"query{h}", init.draw((d,)))
            if heads > 1:
                add(pre + "head_mix", init.draw((heads,), "zeros"))
            if cfg.use_cacm:
                add(pre + "gate.w1", init.draw((d, cfg.cacm_hidden)))
                add(pre + "gate.b1", init.draw((cfg.cacm_hidden,), "zeros"))
                add(pre + "gate.w2", init.draw((cfg.cacm_hidden, d)))
                add(pre + "gate.b2", init.draw((d,), "zeros"))
            add_concept_head_params(store, init, pre, d, m)
        add("acg.task.w", init.draw((cfg.n_concepts * m, cfg.task_width())))
        add("acg.task.b", init.draw((cfg.task_width(),), "zeros"))

    def msa_attend(self, tokens, i):
        """Spatial attention for concept i: per-head smoothed softmax maps
        combined by softmax-normalized learned weights.

        Returns (attn_map (B, n_tokens), context (B, d_model)).
        """
        cfg = self.cfg
        s = self.store
        b, n, d = tokens.shape
        pre = f"acg.concept{i}."
        scales = cfg.effective_scales()
        grid = cfg.num_patches()
        maps = []
        for h, win in enumerate(scales):
            q = ad.reshape(s[pre + f"query{h}"], (d, 1))
            sc = ad.scale(ad.reshape(ad.matmul(tokens, q), (b, n)), 1.0 / np.sqrt(d))
            if win > 1:
                sc = ad.window_mean(sc, grid, win)
            maps.append(ad.reshape(ad.softmax(sc), (b, 1, n)))
        if len(maps) == 1:
            amap = ad.reshape(maps[0], (b, n))
        else:
            stacked = ad.concat(maps, axis=1)
            w = ad.reshape(ad.softmax(s[pre + "head_mix"]), (1, len(maps), 1))
            amap = ad.tensor_sum(ad.mul(stacked, w), axis=1)
        ctx = ad.reshape(ad.matmul(ad.reshape(amap, (b, 1, n)), tokens), (b, d))
        return amap, ctx

    def cacm_refine(self, ctx, i):
        """Channel gate for concept i; identity when the toggle is off."""
        cfg = self.cfg
        if not cfg.use_cacm:
            return ctx
        s = self.store
        pre = f"acg.concept{i}.gate."
        h = ad.leaky_relu(ad.add(ad.matmul(ctx, s[pre + "w1"]), s[pre + "b1"]))
        g = ad.sigmoid(ad.add(ad.matmul(h, s[pre + "w2"]), s[pre + "b2"]))
        return ad.mul(g, ctx)

    def concept_head(self, refined, i):
        """Embeddings and probability for concept i.

        Returns (prob (B, 1), mixed (B, m), pos (B, m), neg (B, m)); the
        mixed embedding is the probability-weighted convex combination of
        the activated and inactivated embeddings.
        """
        return concept_mixture(self.store, f"acg.concept{i}.", refined)

    def task_predict(self, mixed_cat):
        """One-layer task head on the concatenated mixed embeddings."""
        s = self.store
        out = ad.add(ad.matmul(mixed_cat, s["acg.task.w"]), s["acg.task.b"])
        if self.cfg.task == "regression":
            b = out.shape[0]
            return ad.reshape(ad.sigmoid(out), (b,))
        return out

    def forward(self, tokens):
        cfg = self.cfg
        b = tokens.shape[0]
        probs, maps, mixed = [], [], []
        for i in range(cfg.n_concepts):
            amap, ctx = self.msa_attend(tokens, i)
            refined = self.cacm_refine(ctx, i)
            p, e, _, _ = self.concept_head(refined, i)
            probs.append(p)
            maps.append(ad.reshape(amap, (b, 1, cfg.n_tokens())))
            mixed.append(e)
        cat = ad.concat(mixed, axis=1)
        out = {
            "probs": ad.concat(probs, axis=1),          # (B, n_concepts)
            "maps": ad.concat(maps, axis=1),            # (B, n_concepts, n_tokens)
            "mixed": cat,                               # (B, n_concepts * m)
        }
        if cfg.task == "regression":
            out["pred"] = self.task_predict(cat)        # (B,)
        else:
            out["logits"] = self.task_predict(cat)      # (B, n_classes)
        return out


class VisualModel:
    """Backbone + concept stage with a shared parameter store."""

    def __init__(self, cfg, seed):
        self.cfg = cfg.validate()
        self.seed = int(seed)
        self.store = ad.ParamStore()
        init = ad.Initializer(seed)
        self.backbone = Backbone(cfg, self.store, init)
        self.acg = ConceptGenerator(cfg, self.store, init)

    def forward(self, x, train=False, rng=None):
        tokens = self.backbone.encode(x, train=train, rng=rng)
        out = self.acg.forward(tokens)
        out["tokens"] = tokens
        return out


def joint_loss(out, labels, concept_targets, map_targets, cfg):
    """Joint training objective.

    task term (cross-entropy for classification, mean squared error for
    regression) + lambda_c * sum_i BCE(prob_i, target_i) + lambda_m *
    sum_i (1 - cos(map_i, target_map_i)).  Samples whose ground-truth map
    for a concept is all zero contribute nothing to that concept's map
    term; the map term disappears entirely when the concept-map loss
    toggle is off.

    Returns (total: scalar DTensor, parts: {"task", "concept", "map"} floats).
    """
    if cfg.task == "regression":
        diff = ad.sub(out["pred"], ad.tensor(np.asarray(labels, dtype=np.float64)))
        task = ad.tensor_mean(ad.mul(diff, diff))
    else:
        task = ad.cross_entropy(out["logits"], labels)

    ct = np.asarray(concept_targets, dtype=np.float64)
    if ct.shape != out["probs"].shape:
        raise ad.ShapeError(f"joint_loss: concept targets {ct.shape} vs probs {out['probs'].shape}")
    concept = ad.tensor_sum(ad.tensor_mean(ad.bce(out["probs"], ad.tensor(ct)), axis=0))

    total = ad.add(task, ad.scale(concept, cfg.lambda_concept))
    parts = {"task": task.item(), "concept": concept.item(), "map": 0.0}

    if cfg.use_cml:
        mt = np.asarray(map_targets, dtype=np.float64)
        if mt.shape != out["maps"].shape:
            raise ad.ShapeError(f"joint_loss: map targets {mt.shape} vs maps {out['maps'].shape}")
        valid = (mt > 0).any(axis=-1).astype(np.float64)      # (B, n_concepts)
        sim = ad.cosine_sim(out["maps"], ad.tensor(mt))
        one_minus = ad.sub(ad.tensor(np.ones_like(valid)), sim)
        masked = ad.mul(one_minus, ad.tensor(valid))
        map_term = ad.tensor_sum(ad.tensor_mean(masked, axis=0))
        parts["map"] = map_term.item()
        total = ad.add(total, ad.scale(map_term, cfg.lambda_map))

    return total, parts

"""Concept-stage semantics: attention maps, gating, mixtures, joint loss,
and a full finite-difference pass over a micro model."""

import numpy as np
import pytest

from agcm import autodiff as ad
from agcm import kernels
from agcm.concept_model import VisualModel, joint_loss
from agcm.config import ModelConfig


def _cfg(**kw):
    base = dict(image_size=(32, 32), channels=1, patch_size=8, d_model=16,
                n_blocks=1, n_attn_heads=2, mlp_hidden=32, n_concepts=3,
                concept_embed_size=4, cacm_hidden=4, n_classes=3, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base).validate()


def _rng(seed):
    return np.random.Generator(np.random.Philox(key=seed))


def _random_batch(cfg, rng, b=4):
    imgs = rng.uniform(0, 1, size=(b, cfg.channels, *cfg.image_size))
    labels = rng.integers(0, cfg.n_classes, size=b)
    ct = rng.uniform(0, 1, size=(b, cfg.n_concepts))
    mt = rng.uniform(0, 1, size=(b, cfg.n_concepts, cfg.n_tokens()))
    return imgs, labels, ct, mt


def test_attention_maps_are_distributions():
    cfg = _cfg()
    model = VisualModel(cfg, seed=0)
    out = model.forward(_rng(1).uniform(0, 1, size=(5, 1, 32, 32)))
    maps = out["maps"].values
    assert maps.shape == (5, 3, 16)
    assert np.all(maps >= 0)
    assert np.allclose(maps.sum(axis=-1), 1.0, atol=1e-9)


def test_identical_tokens_give_uniform_map():
    cfg = _cfg(pos_embed=False)
    model = VisualModel(cfg, seed=0)
    out = model.forward(np.zeros((1, 1, 32, 32)))
    assert np.allclose(out["maps"].values, 1.0 / 16.0, atol=1e-12)


def test_head_mix_collapse_selects_single_head():
    cfg = _cfg()
    model = VisualModel(cfg, seed=2)
    # drive the mixing softmax to an exact one-hot on head 0
    mix = model.store["acg.concept0.head_mix"]
    mix.values[:] = [0.0, -2000.0, -2000.0]
    tokens = model.backbone.encode(_rng(3).uniform(0, 1, size=(2, 1, 32, 32)))
    amap, _ = model.acg.msa_attend(tokens, 0)

    # head-0 map recomputed independently: scale-1 window is the identity
    tv = tokens.values
    q = model.store["acg.concept0.query0"].values
    sc = tv @ q / np.sqrt(cfg.d_model)
    e = np.exp(sc - sc.max(axis=1, keepdims=True))
    head0 = e / e.sum(axis=1, keepdims=True)
    assert np.allclose(amap.values, head0, atol=1e-15)


def test_combined_map_matches_mixing_oracle():
    cfg = _cfg()
    model = VisualModel(cfg, seed=4)
    tokens = model.backbone.encode(_rng(5).uniform(0, 1, size=(3, 1, 32, 32)))
    amap, ctx = model.acg.msa_attend(tokens, 1)

    # independent re-evaluation of the documented mixing rule
    tv = tokens.values
    pre = "acg.concept1."
    mix = model.store[pre + "head_mix"].values
    w = np.exp(mix - mix.max())
    w = w / w.sum()
    combined = np.zeros((3, 16))
    for h, win in enumerate(cfg.effective_scales()):
        q = model.store[pre + f"query{h}"].values
        sc = tv @ q / np.sqrt(cfg.d_model)
        if win > 1:
            hp, wp = cfg.num_patches()
            sc = kernels.window_mean_fwd(sc, hp, wp, win)
        e = np.exp(sc - sc.max(axis=1, keepdims=True))
        combined += w[h] * (e / e.sum(axis=1, keepdims=True))
    assert np.allclose(amap.values, combined, atol=1e-12)
    # context is the map-weighted token sum
    expect_ctx = np.einsum("bn,bnd->bd", amap.values, tv)
    assert np.allclose(ctx.values, expect_ctx, atol=1e-12)


def test_cacm_identity_when_off_and_bounded_when_on():
    cfg_off = _cfg(use_cacm=False)
    model = VisualModel(cfg_off, seed=1)
    ctx = ad.tensor(_rng(6).standard_normal((2, cfg_off.d_model)))
    assert model.acg.cacm_refine(ctx, 0) is ctx

    cfg_on = _cfg()
    model = VisualModel(cfg_on, seed=1)
    refined = model.acg.cacm_refine(ctx, 0)
    ratio = refined.values / ctx.values
    assert np.all(ratio > 0) and np.all(ratio < 1)


def test_cacm_constant_gate():
    cfg = _cfg()
    model = VisualModel(cfg, seed=3)
    model.store["acg.concept0.gate.w2"].values[:] = 0.0
    model.store["acg.concept0.gate.b2"].values[:] = 1.0
    ctx = ad.tensor(_rng(7).standard_normal((2, cfg.d_model)))
    refined = model.acg.cacm_refine(ctx, 0)
    gate = 1.0 / (1.0 + np.exp(-1.0))
    assert np.allclose(refined.values, gate * ctx.values, atol=1e-15)


def test_mixture_endpoints_exact():
    cfg = _cfg()
    model = VisualModel(cfg, seed=5)
    refined = ad.tensor(_rng(8).standard_normal((3, cfg.d_model)))

    model.store["acg.concept0.prob.w"].values[:] = 0.0
    model.store["acg.concept0.prob.b"].values[:] = 800.0
    p, mixed, pos, neg = model.acg.concept_head(refined, 0)
    assert np.all(p.values == 1.0)
    assert np.array_equal(mixed.values, pos.values)

    model.store["acg.concept0.prob.b"].values[:] = -800.0
    p, mixed, pos, neg = model.acg.concept_head(refined, 0)
    assert np.all(p.values == 0.0)
    assert np.array_equal(mixed.values, neg.values)

    model.store["acg.concept0.prob.b"].values[:] = 0.0
    p, mixed, pos, neg = model.acg.concept_head(refined, 0)
    assert np.all(p.values == 0.5)
    assert np.allclose(mixed.values, (pos.values + neg.values) / 2.0, atol=1e-15)


def test_task_head_zeroed_and_oracle():
    cfg = _cfg()
    model = VisualModel(cfg, seed=6)
    model.store["acg.task.w"].values[:] = 0.0
    x = ad.tensor(_rng(9).standard_normal((2, cfg.n_concepts * cfg.concept_embed_size)))
    logits = model.acg.task_predict(x)
    soft = np.exp(logits.values)
    soft /= soft.sum(axis=1, keepdims=True)
    assert np.allclose(soft, 1.0 / cfg.n_classes, atol=1e-15)

    w = _rng(10).standard_normal(model.store["acg.task.w"].values.shape)
    model.store["acg.task.w"].values[:] = w
    logits = model.acg.task_predict(x)
    assert np.allclose(logits.values, x.values @ w, atol=1e-12)

    cfg_r = _cfg(task="regression")
    model_r = VisualModel(cfg_r, seed=6)
    model_r.store["acg.task.w"].values[:] = 0.0
    xr = ad.tensor(np.zeros((2, cfg_r.n_concepts * cfg_r.concept_embed_size)))
    pred = model_r.acg.task_predict(xr)
    assert pred.shape == (2,)
    assert np.all(pred.values == 0.5)


def test_joint_loss_matches_scalar_reimplementation():
    cfg = _cfg()
    model = VisualModel(cfg, seed=7)
    rng = _rng(11)
    imgs, labels, ct, mt = _random_batch(cfg, rng)
    mt[0, 1] = 0.0  # one all-zero ground-truth map: must contribute nothing
    out = model.forward(imgs)
    total, parts = joint_loss(out, labels, ct, mt, cfg)

    # independent scalar evaluation
    logits = out["logits"].values
    probs = out["probs"].values
    maps = out["maps"].values
    b = len(labels)
    lse = np.log(np.exp(logits - logits.max(axis=1, keepdims=True)).sum(axis=1)) \
        + logits.max(axis=1)
    ce = float(np.mean(lse - logits[np.arange(b), labels]))
    pc = np.clip(probs, 1e-7, 1 - 1e-7)
    bce = float(np.sum(np.mean(-(ct * np.log(pc) + (1 - ct) * np.log(1 - pc)), axis=0)))
    map_sum = 0.0
    for i in range(cfg.n_concepts):
        acc = 0.0
        for s in range(b):
            a = maps[s, i]
            t = mt[s, i]
            if not np.any(t > 0):
                continue
            acc += 1.0 - float(a @ t / (np.linalg.norm(a) * np.linalg.norm(t)))
        map_sum += acc / b
    expect = ce + cfg.lambda_concept * bce + cfg.lambda_map * map_sum
    assert abs(total.item() - expect) < 1e-10
    assert abs(parts["task"] - ce) < 1e-10
    assert abs(parts["concept"] - bce) < 1e-10
    assert abs(parts["map"] - map_sum) < 1e-10
    # decomposition: logged terms sum to the total
    recomposed = parts["task"] + cfg.lambda_concept * parts["concept"] \
        + cfg.lambda_map * parts["map"]
    assert abs(total.item() - recomposed) < 1e-10


def test_joint_loss_single_concept_worked_example():
    cfg = _cfg(n_concepts=1)
    model = VisualModel(cfg, seed=8)
    imgs = _rng(12).uniform(0, 1, size=(1, 1, 32, 32))
    out = model.forward(imgs)
    # force p = 0.5 via the prob head, target 1, and a perfectly aligned map
    a = out["maps"].values[0, 0]
    total, parts = joint_loss(out, np.array([0]), np.array([[1.0]]),
                              a.reshape(1, 1, -1), cfg)
    assert abs(parts["map"]) < 1e-12
    p = out["probs"].values[0, 0]
    assert abs(parts["concept"] - (-np.log(p))) < 1e-10
    assert abs(total.item() - (parts["task"] + parts["concept"])) < 1e-10


def test_joint_loss_perfect_prediction_near_zero():
    cfg = _cfg(n_concepts=2)
    model = VisualModel(cfg, seed=9)
    imgs = _rng(13).uniform(0, 1, size=(2, 1, 32, 32))
    out = model.forward(imgs)
    # saturate the task head toward the true labels and the prob heads
    # toward their binary targets, align maps exactly
    logits = np.full((2, cfg.n_classes), -1e4)
    labels = np.array([1, 2])
    logits[np.arange(2), labels] = 1e4
    out["logits"].values[:] = logits
    out["probs"].values[:] = np.round(out["probs"].values)
    ct = out["probs"].values.copy()
    mt = out["maps"].values.copy()
    total, _ = joint_loss(out, labels, ct, mt, cfg)
    assert total.item() < 1e-5


def test_cml_toggle_removes_map_term():
    cfg = _cfg(use_cml=False)
    model = VisualModel(cfg, seed=10)
    rng = _rng(14)
    imgs, labels, ct, mt = _random_batch(cfg, rng)
    out = model.forward(imgs)
    total, parts = joint_loss(out, labels, ct, mt, cfg)
    assert parts["map"] == 0.0
    assert abs(total.item() - (parts["task"] + parts["concept"])) < 1e-12


def test_joint_loss_rejects_shape_mismatch():
    cfg = _cfg()
    model = VisualModel(cfg, seed=11)
    rng = _rng(15)
    imgs, labels, ct, mt = _random_batch(cfg, rng)
    out = model.forward(imgs)
    with pytest.raises(ad.ShapeError):
        joint_loss(out, labels, ct[:, :2], mt, cfg)
    with pytest.raises(ad.ShapeError):
        joint_loss(out, labels, ct, mt[:, :, :5], cfg)


def test_map_term_within_unit_interval():
    cfg = _cfg()
    model = VisualModel(cfg, seed=12)
    rng = _rng(16)
    imgs, labels, ct, mt = _random_batch(cfg, rng)
    out = model.forward(imgs)
    _, parts = joint_loss(out, labels, ct, mt, cfg)
    # nonnegative maps: each concept's (1 - sim) lies in [0, 1]
    assert 0.0 <= parts["map"] <= cfg.n_concepts


def test_full_model_finite_difference():
    cfg = ModelConfig(image_size=(4, 4), channels=1, patch_size=2, d_model=8,
                      n_blocks=1, n_attn_heads=2, mlp_hidden=8, n_concepts=2,
                      concept_embed_size=4, cacm_hidden=4, n_classes=2,
                      dropout=0.0, use_mha=False).validate()
    model = VisualModel(cfg, seed=13)
    rng = _rng(17)
    imgs = rng.uniform(0, 1, size=(2, 1, 4, 4))
    labels = np.array([0, 1])
    ct = rng.uniform(0, 1, size=(2, 2))
    mt = rng.uniform(0, 1, size=(2, 2, 4))

    def forward():
        out = model.forward(imgs)
        total, _ = joint_loss(out, labels, ct, mt, cfg)
        return total

    model.store.zero_grad()
    with ad.Graph() as g:
        loss = forward()
    g.backward(loss)

    worst = 0.0
    for name, t in model.store.items():
        ana = t.grad
        num = ad.numeric_gradient(lambda: forward().item(), t.values, h=1e-5)
        err = np.abs(ana - num)
        tol = np.maximum(1e-6, 1e-4 * np.maximum(np.abs(ana), np.abs(num)))
        worst = max(worst, float(err.max(initial=0.0)))
        assert np.all(err <= tol), f"gradient mismatch in {name}: max err {err.max()}"
    assert worst < 1e-4

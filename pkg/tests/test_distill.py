import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccmd import autodiff as ad
from ccmd.backbone import LayerTrace, ModelConfig, as_consts, forward, init_params
from ccmd.distill import (
    DistillConfig, coordinating_weight, distill_objective, loss_all_tokens, loss_global, loss_local,
    loss_local_mean, supervised_l1, total_loss,
)
from ccmd.moldata import collate, gen_synthetic


def _trace(arrays, mask=None):
    mask = np.ones(arrays[0].shape[:2]) if mask is None else mask
    return LayerTrace([ad.const(a) for a in arrays], None, mask, (mask.sum(1) - 1).astype(int))


def _random_pair(seed, layers=3, b=2, t=6, d=5):
    r = np.random.default_rng(seed)
    mask = np.ones((b, t))
    mask[0, 4:] = 0.0
    s = [r.normal(size=(b, t, d)) * mask[..., None] for _ in range(layers)]
    te = [r.normal(size=(b, t, d)) * mask[..., None] for _ in range(layers)]
    return _trace(s, mask), _trace(te, mask), mask


def test_supervised_l1_examples():
    assert supervised_l1(ad.const([1.0, 2.0]), [1.0, 2.0]).value == 0.0
    assert supervised_l1(ad.const([1.0, -1.0]), [0.0, 0.0]).value == 1.0
    r = np.random.default_rng(0)
    p, y = r.normal(size=7), r.normal(size=7)
    assert supervised_l1(ad.const(p), y).value == pytest.approx(sum(abs(a - b) for a, b in zip(p, y)) / 7)


def test_supervised_l1_shape_checked():
    with pytest.raises(ad.ShapeError):
        supervised_l1(ad.const([1.0, 2.0]), [1.0])


def test_global_examples():
    s, t, _ = _random_pair(0, layers=4)
    assert loss_global(s, s).value == 0.0
    shifted = _trace([x.value + 1.0 for x in s.tokens])
    assert loss_global(shifted, _trace([x.value for x in s.tokens])).value == pytest.approx(4.0, abs=1e-12)


def test_global_vs_direct_sum():
    s, t, _ = _random_pair(1, layers=3)
    for scope, layers in (("all", range(3)), ("last", [2])):
        want = 0.0
        for l in layers:
            for b in range(2):
                want += np.mean(np.abs(s.tokens[l].value[b, 0] - t.tokens[l].value[b, 0])) / 2
        assert loss_global(s, t, scope).value == pytest.approx(want, rel=1e-12)


def test_local_mean_examples():
    for n in (2, 5, 9):
        mask = np.ones((1, n + 1))
        base = np.random.default_rng(n).normal(size=(1, n + 1, 3))
        s = _trace([base + 1.0] * 4, mask)
        t = _trace([base] * 4, mask)
        assert loss_local_mean(s, t, mask).value[0] == pytest.approx(4.0, abs=1e-12)
        assert loss_local_mean(t, t, mask).value[0] == 0.0


def test_local_vs_double_loop():
    s, t, mask = _random_pair(2)
    got_mean = loss_local(s, t, mask, reduction="mean").value
    got_sum = loss_local(s, t, mask, reduction="sum").value
    got_novirt = loss_local(s, t, mask, reduction="mean", include_virtual=False).value
    for b in range(2):
        n_tok = int(mask[b].sum())
        acc = acc_nv = 0.0
        for l in range(3):
            for i in range(n_tok):
                e = sum(abs(s.tokens[l].value[b, i, c] - t.tokens[l].value[b, i, c]) for c in range(5)) / 5
                acc += e
                if i > 0:
                    acc_nv += e
        assert got_sum[b] == pytest.approx(acc, rel=1e-12)
        assert got_mean[b] == pytest.approx(acc / n_tok, rel=1e-12)
        assert got_novirt[b] == pytest.approx(acc_nv / (n_tok - 1), rel=1e-12)


def test_all_tokens_vs_loop():
    s, t, mask = _random_pair(3)
    acc, cnt = 0.0, 0
    for b in range(2):
        for i in range(int(mask[b].sum())):
            acc += np.abs(s.tokens[-1].value[b, i] - t.tokens[-1].value[b, i]).mean()
            cnt += 1
    assert loss_all_tokens(s, t, mask).value == pytest.approx(acc / cnt, rel=1e-12)


def test_trace_mismatch_rejected():
    s, t, mask = _random_pair(4, layers=3)
    short = _trace([x.value for x in t.tokens[:2]], mask)
    with pytest.raises(ValueError, match="mismatch"):
        loss_global(s, short)
    wide = _trace([np.zeros((2, 6, 7))] * 3, mask)
    with pytest.raises(ad.ShapeError):
        loss_local_mean(s, wide, mask)


def test_coordinating_weight_examples():
    assert coordinating_weight(10, "transformer") == pytest.approx(0.1)
    assert coordinating_weight(1, "transformer") == 1.0
    assert coordinating_weight(50, "gin") == 1.0
    with pytest.raises(ValueError):
        coordinating_weight(0)


def test_total_loss_reductions():
    l2, lm, la = ad.const(0.7), ad.const(0.3), ad.const([0.5, 1.5])
    total, bd = total_loss(l2, lm, la, [4, 8], DistillConfig(mode="none"))
    assert total.value == 0.7 and bd.l_m == 0.0
    total, _ = total_loss(l2, lm, la, [4, 8], DistillConfig(weight_rule="manual", weight=0.0))
    assert total.value == pytest.approx(1.0, abs=1e-15)
    total, bd = total_loss(l2, lm, la, [4, 8], DistillConfig())
    assert total.value == pytest.approx(0.7 + 0.3 + (0.5 / 4 + 1.5 / 8) / 2, rel=1e-14)
    assert bd.weight_mean == pytest.approx((0.25 + 0.125) / 2)
    total, _ = total_loss(l2, lm, la, [4, 8], DistillConfig(arch="gin"))
    assert total.value == pytest.approx(0.7 + 0.3 + 1.0, rel=1e-14)


def test_coordinating_composition_from_oracles():
    s, t, mask = _random_pair(5)
    n_atoms = (mask.sum(1) - 1).astype(int)
    pred = ad.const([0.2, -0.4])
    labels = [0.0, 0.1]
    total, bd = distill_objective(pred, labels, s, t, mask, n_atoms, DistillConfig())
    want = supervised_l1(pred, labels).value + loss_global(s, t).value
    want += np.mean(loss_local_mean(s, t, mask).value / n_atoms)
    assert total.value == pytest.approx(want, rel=1e-13)
    assert bd.total == total.value


def test_config_rejects_unknown_values():
    for kw in ({"mode": "both"}, {"layer_scope": "first"}, {"weight_rule": "auto"},
               {"weight": -1.0}, {"local_reduction": "max"}):
        with pytest.raises(ValueError):
            DistillConfig(**kw)


def _student_teacher(seed, n_mols=3):
    cfg2, cfg3 = ModelConfig(layers=2, d_model=8, heads=2), ModelConfig(view="3d", layers=2, d_model=8, heads=2)
    batch = collate(gen_synthetic(n_mols, (3, 9), seed=seed).molecules)
    _, tt = forward(as_consts(init_params(cfg3, seed + 100)), batch, cfg3)
    return cfg2, init_params(cfg2, seed), batch, tt


@pytest.mark.parametrize("mode", ["global_only", "local_only", "global+local", "naive_all"])
def test_teacher_receives_no_gradient(mode):
    cfg, params, batch, teacher_trace = _student_teacher(1)
    tape = ad.Tape()
    P = tape.params(params)
    leaves = [tape.leaf(x.value) for x in teacher_trace.tokens]
    tt = LayerTrace(leaves, None, batch.mask, batch.atom_counts)
    pred, st_ = forward(P, batch, cfg)
    total, _ = distill_objective(pred, batch.labels, st_, tt, batch.mask, batch.atom_counts,
                                 DistillConfig(mode=mode))
    tape.backward(total)
    for leaf in leaves:
        assert (tape.grad(leaf) == 0).all()
    assert any(np.abs(tape.grad(P[k])).sum() > 0 for k in params if k.startswith("layer"))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["global_only", "local_only", "global+local", "naive_all"]))
def test_losses_nonnegative(seed, mode):
    s, t, mask = _random_pair(seed)
    n_atoms = (mask.sum(1) - 1).astype(int)
    total, bd = distill_objective(ad.const([0.0, 1.0]), [0.5, 0.5], s, t, mask, n_atoms,
                                  DistillConfig(mode=mode, weight_rule="manual", weight=0.3))
    assert total.value >= 0 and bd.l_m >= 0 and bd.l_a_mean >= 0


def test_missing_teacher_rejected():
    s, _, mask = _random_pair(0)
    with pytest.raises(ValueError, match="teacher"):
        distill_objective(ad.const([0.0, 0.0]), [0, 0], s, None, mask, [3, 5], DistillConfig())

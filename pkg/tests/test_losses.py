import math

import numpy as np
import pytest

from visaff import numcore as nc
from visaff.fusion import FusionParams, forward_batch
from visaff.losses import contrastive_term, loss_infonce, loss_supcon, loss_total

from conftest import SMALL_DIMS, random_features


def unit(x):
    # same 1e-12 stabiliser as the library normaliser
    return x / np.sqrt((x * x).sum(axis=1, keepdims=True) + 1e-12)


def infonce_oracle(a, b, tau):
    a, b = unit(a), unit(b)
    s = a @ b.T / tau
    total = 0.0
    for i in range(len(a)):
        total += -math.log(math.exp(s[i, i]) / sum(math.exp(v) for v in s[i]))
        total += -math.log(math.exp(s[i, i]) / sum(math.exp(v) for v in s[:, i]))
    return total / (2 * len(a))


def supcon_oracle(z, labels, tau):
    z = unit(z)
    n, terms = len(z), []
    for i in range(n):
        pos = [p for p in range(n) if p != i and labels[p] == labels[i]]
        if not pos:
            continue
        denom = sum(math.exp(z[i] @ z[a] / tau) for a in range(n) if a != i)
        terms.append(-sum(math.log(math.exp(z[i] @ z[p] / tau) / denom) for p in pos) / len(pos))
    return sum(terms) / len(terms)


def test_infonce_identical_is_log_batch():
    z = np.tile([0.3, -1.0, 2.0], (5, 1))
    assert loss_infonce(nc.constant(z), nc.constant(z), 0.07).item() == pytest.approx(math.log(5), abs=1e-12)


def test_infonce_separated_beats_chance():
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert loss_infonce(nc.constant(a), nc.constant(a), 0.5).item() < math.log(2)


def test_infonce_brute_force(rng):
    for _ in range(20):
        a, b = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        got = loss_infonce(nc.constant(a), nc.constant(b), 0.2).item()
        assert got == pytest.approx(infonce_oracle(a, b, 0.2), abs=1e-12)


def test_infonce_errors():
    with pytest.raises(ValueError):
        loss_infonce(nc.constant(np.ones((1, 2))), nc.constant(np.ones((1, 2))), 0.1)
    with pytest.raises(ValueError):
        loss_infonce(nc.constant(np.eye(2)), nc.constant(np.eye(2)), 0.0)


def test_supcon_two_point():
    z = np.array([[1.0, 2.0], [1.0, 2.0]])
    res = loss_supcon(nc.constant(z), [3, 3], 0.1)
    # the only non-anchor entry is the positive, so its softmax weight is 1
    assert res.loss.item() == pytest.approx(0.0, abs=1e-12)
    assert res.n_anchors == 2


def test_supcon_no_anchors():
    res = loss_supcon(nc.constant(np.eye(3)), [0, 1, 2], 0.1)
    assert res.no_anchors and res.loss.item() == 0.0


def test_supcon_brute_force(rng):
    for _ in range(20):
        z = rng.standard_normal((5, 3))
        labels = rng.integers(0, 3, 5)
        if len(set(labels.tolist())) == 5:
            continue
        got = loss_supcon(nc.constant(z), labels, 0.1).loss.item()
        assert got == pytest.approx(supcon_oracle(z, labels, 0.1), abs=1e-10)


def test_total_degenerate_weights(small_params, rng):
    out = forward_batch(random_features(rng, 6), [3, 3], small_params)
    labels = [0, 1, 2, 2, 1, 0]
    total, terms = loss_total(out, small_params, labels, 0.0, 0.0)
    assert total.item() == terms.cls
    assert terms.cl == 0.0


def test_aux_uniform_is_log_k(rng):
    params = FusionParams(SMALL_DIMS, hidden=4, n_classes=6, proj_dim=3, seed=3)
    params["aux.w"].data[...] = 0.0
    params["aux.b"].data[...] = 0.0
    out = forward_batch(random_features(rng, 4), [4], params)
    _, terms = loss_total(out, params, [0, 1, 5, 3], 0.0, 1.0)
    assert terms.aux == pytest.approx(math.log(6), abs=1e-12)
    assert terms.total - terms.cls == pytest.approx(math.log(6), abs=1e-12)


def test_total_recomposition(small_params, rng):
    for _ in range(10):
        out = forward_batch(random_features(rng, 7), [3, 4], small_params)
        labels = rng.integers(0, 3, 7)
        lc, la = rng.uniform(0, 1, 2)
        _, t = loss_total(out, small_params, labels, lc, la)
        assert t.total == pytest.approx(t.cls + lc * t.cl + la * t.aux, abs=1e-12)


def test_contrastive_term_composition(small_params, rng):
    out = forward_batch(random_features(rng, 6), [6], small_params)
    labels = np.array([0, 0, 1, 1, 2, 2])
    z = {m: (out.h[m].data @ small_params[f"proj.{m}.w"].data) for m in out.h}
    nce = 0.5 * (infonce_oracle(z["visual"], z["text"], 0.07) + infonce_oracle(z["visual"], z["audio"], 0.07))
    sc = np.mean([supcon_oracle(z[m], labels, 0.1) for m in ("visual", "text", "audio")])
    got = contrastive_term(out, small_params, labels, 0.07, 0.1).item()
    assert got == pytest.approx(nce + sc, abs=1e-9)


def test_negative_weight_rejected(small_params, rng):
    out = forward_batch(random_features(rng, 2), [2], small_params)
    with pytest.raises(ValueError):
        loss_total(out, small_params, [0, 1], -0.1, 0.5)

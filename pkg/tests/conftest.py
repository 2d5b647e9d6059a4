import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from visaff.datamodel import Conversation, Dataset, EmotionLabel, Utterance
from visaff.fusion import FusionParams

settings.register_profile("visaff", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("visaff")

SMALL_DIMS = {"visual": 5, "text": 4, "audio": 3}


def make_conversation(conv_id="c0", n=3, split="train", labels=None, speakers=("Ana", "Ben")):
    labels = labels if labels is not None else [i % 2 for i in range(n)]
    utts = tuple(Utterance(conv_id, i, speakers[i % len(speakers)], f"sentence {conv_id} {i}", labels[i])
                 for i in range(n))
    return Conversation(conv_id, utts, split)


def make_dataset(n_convs=3, length=4, k=3):
    labels = tuple(EmotionLabel(i, f"e{i}") for i in range(k))
    splits = ("train", "val", "test")
    convs = tuple(make_conversation(f"c{j}", length, splits[j % 3], [(j + i) % k for i in range(length)])
                  for j in range(n_convs))
    return Dataset(labels, convs, "toy")


def random_features(rng, n, dims=SMALL_DIMS):
    return {m: rng.standard_normal((n, d)) for m, d in dims.items()}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_params():
    return FusionParams(SMALL_DIMS, hidden=4, n_classes=3, proj_dim=3, seed=7)


def fusion_loss_fns(params, feats, lengths, labels, lambda_cl=0.1, lambda_aux=0.5):
    """Scalar closures ``(exact, surrogate, stopped)`` over the full head and loss.

    ``exact`` differentiates through the gate score. ``surrogate`` pins the
    gate score to its value at the current parameters; its true gradient is
    what the default stop-gradient backward pass (``stopped``) should produce.
    """
    from visaff import fusion
    from visaff import numcore as nc
    from visaff.losses import loss_total

    c0 = fusion.forward_batch(feats, lengths, params).c.data.copy()
    original = fusion.compute_reliability

    def exact():
        out = fusion.forward_batch(feats, lengths, params, fusion.FusionOptions(stop_grad_reliability=False))
        return loss_total(out, params, labels, lambda_cl, lambda_aux)[0]

    def pinned(h_v, p, stop_grad=True):
        _, aux_logits = original(h_v, p, stop_grad)
        return nc.constant(c0), aux_logits

    def surrogate():
        fusion.compute_reliability = pinned
        try:
            out = fusion.forward_batch(feats, lengths, params)
        finally:
            fusion.compute_reliability = original
        return loss_total(out, params, labels, lambda_cl, lambda_aux)[0]

    def stop_grad_backward():
        out = fusion.forward_batch(feats, lengths, params)
        return loss_total(out, params, labels, lambda_cl, lambda_aux)[0]

    return exact, surrogate, stop_grad_backward


ACCEPTANCE_LINES: list[str] = []


def record_criterion(name: str, ok: bool, detail: str) -> None:
    """Print one PASS/FAIL line for an acceptance criterion, then assert it."""
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import brute_force_events

from emgadapt import metrics as M
from emgadapt.datagen import Recording, make_set_timeline
from emgadapt.model import Model, ModelConfig, NormStats, init_params

# random streams often hold segments shorter than the buffer
pytestmark = pytest.mark.filterwarnings("ignore:reaction buffer")

STD = make_set_timeline("standard").labels()


def random_stream(rng, K=3, relax_ends=False):
    """Piecewise-constant truth plus a prediction with lag, flicker and dropouts."""
    n_seg = rng.integers(1, 12)
    cls = [0] if relax_ends else [int(rng.integers(K))]
    for _ in range(n_seg - 1):
        cls.append(int((cls[-1] + rng.integers(1, K)) % K))
    if relax_ends and cls[-1] != 0:
        cls.append(0)
    lens = rng.integers(1, 500, len(cls))
    truth = np.repeat(cls, lens)
    mode = rng.integers(4)
    if mode == 0:
        pred = rng.integers(0, K, truth.size)
    else:
        lag = int(rng.integers(0, 300))
        pred = np.concatenate([np.full(lag, truth[0]), truth])[:truth.size]
        flips = rng.random(truth.size) < [0, 0.0, 0.002, 0.02][mode]
        pred = np.where(flips, rng.integers(0, K, truth.size), pred)
    return truth, pred


def test_raw_accuracy_examples():
    assert M.raw_accuracy(STD, STD) == 1.0
    assert M.raw_accuracy(STD, (STD + 1) % 3) == 0.0
    assert M.raw_accuracy([0, 0, 1, 1], [0, 1, 1, 1]) == 0.75
    with pytest.raises(ValueError):
        M.raw_accuracy([0, 1], [0])


def test_extract_transitions_examples():
    assert M.extract_transitions([2, 2, 2]) == []
    assert M.extract_transitions([0, 1, 0]) == [(1, 0, 1), (2, 1, 0)]
    assert len(M.extract_transitions(STD)) == 12


def test_transition_examples():
    frac, events = M.transition_accuracy(STD, STD)
    assert frac == 1.0 and all(e.detection_index == e.index for e in events)
    delayed = np.concatenate([np.zeros(100, int), STD[:-100]])
    assert M.transition_accuracy(delayed, delayed)[0] == 1.0
    late = np.concatenate([np.zeros(100, int), STD])[:STD.size]   # half of a 1 s buffer
    assert M.transition_accuracy(STD, late)[0] == 1.0
    flicker = STD.copy()
    ev = M.extract_transitions(STD)[4]
    flicker[ev[0] + 300] = (flicker[ev[0] + 300] + 1) % 3
    frac, events = M.transition_accuracy(STD, flicker)
    assert frac == 11 / 12
    assert [e.passed for e in events].count(False) == 1 and not events[4].flicker_free


def test_constant_relax_scores():
    rep = M.score(STD, np.zeros_like(STD))
    assert abs(rep.raw_accuracy - 20 / 38) < 1e-12
    assert rep.transition_accuracy == 0.0


def test_no_events_is_undefined():
    frac, events = M.transition_accuracy([1, 1, 1], [0, 1, 1])
    assert frac is None and events == []
    rep = M.summarize([M.score([1, 1], [1, 1]), M.score(STD, STD)])
    assert rep.mean_transition == 1.0


def test_buffer_longer_than_segment_warns():
    with pytest.warns(UserWarning):
        M.transition_accuracy([0] * 10 + [1] * 10, [0] * 20, sample_rate_hz=10, buffer_s=2.0)


def test_buffer_truncated_at_next_transition():
    truth = np.array([0] * 5 + [1] * 3 + [2] * 10)
    pred = np.array([0] * 5 + [0] * 3 + [1] + [2] * 9)   # class 1 only appears after its segment
    _, events = M.transition_accuracy(truth, pred, sample_rate_hz=10, buffer_s=1.0)
    assert events[0].buffer_end == 8 and not events[0].detected


def test_oracle_equivalence_1000_streams():
    rng = np.random.default_rng(2024)
    total = 0
    for _ in range(1000):
        truth, pred = random_stream(rng)
        buffer_s = float(rng.choice([0.0, 0.05, 0.5, 1.0]))
        _, events = M.transition_accuracy(truth, pred, 200, buffer_s)
        expected = brute_force_events(truth, pred, 200, buffer_s)
        assert [e.passed for e in events] == expected
        total += len(events)
    assert total > 3000


def test_padding_invariance():
    rng = np.random.default_rng(5)
    for _ in range(100):
        truth, pred = random_stream(rng, relax_ends=True)
        pred = pred.copy()
        pred[0] = 0
        pred[-1] = 0
        pad = np.zeros(int(rng.integers(1, 300)), int)
        a = M.transition_accuracy(truth, pred)[0]
        b = M.transition_accuracy(np.concatenate([pad, truth, pad]), np.concatenate([pad, pred, pad]))[0]
        assert a == b


def test_single_flip_never_helps():
    rng = np.random.default_rng(6)
    for _ in range(200):
        truth, pred = random_stream(rng)
        frac, events = M.transition_accuracy(truth, pred)
        if not events:
            continue
        correct = np.flatnonzero(pred == truth)
        if correct.size == 0:
            continue
        i = int(rng.choice(correct))
        worse = pred.copy()
        worse[i] = (worse[i] + 1) % 3
        assert M.transition_accuracy(truth, worse)[0] <= frac


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.permutations([0, 1, 2]))
def test_relabel_covariance(seed, perm):
    truth, pred = random_stream(np.random.default_rng(seed))
    perm = np.array(perm)
    assert M.raw_accuracy(truth, truth) == 1.0
    assert M.raw_accuracy(perm[truth], perm[pred]) == M.raw_accuracy(truth, pred)
    a = [e.passed for e in M.transition_accuracy(truth, pred)[1]]
    b = [e.passed for e in M.transition_accuracy(perm[truth], perm[pred])[1]]
    assert a == b


def test_report_json():
    rep = M.score(STD, STD, set_kind="test_posture")
    d = rep.to_dict()
    assert d["metrics"]["n_events"] == 12 and d["config"]["buffer_s"] == 1.0
    assert sum(map(sum, d["confusion"])) == STD.size
    assert M.MetricsReport.to_json(rep) == rep.to_json()


def _relax_model():
    cfg = ModelConfig()
    params = init_params(cfg, 0)
    params["head_intent.weight"].data[:] = 0
    bias = np.full(cfg.num_classes, -50.0, np.float32)
    bias[0] = 50.0
    params["head_intent.bias"].data[:] = bias
    return Model(params, cfg, NormStats.identity(cfg.channels))


def test_evaluate_constant_relax_model():
    rec = Recording(np.random.default_rng(0).standard_normal((STD.size, 8)).astype(np.float32), STD)
    suite = M.evaluate_testsuite(_relax_model(), [rec])
    assert abs(suite.mean_raw - 20 / 38) < 1e-3 and suite.mean_transition == 0.0
    with pytest.raises(ValueError, match="channels"):
        M.evaluate_testsuite(_relax_model(), [Recording(rec.samples[:, :7], STD)])


def test_random_uniform_predictor():
    rng = np.random.default_rng(1)
    truth = np.tile(STD, 5)
    pred = rng.integers(0, 3, truth.size)
    rep = M.score(truth, pred)
    assert abs(rep.raw_accuracy - 1 / 3) < 0.02
    assert rep.transition_accuracy == 0.0

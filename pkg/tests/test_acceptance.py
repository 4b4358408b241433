"""End-to-end acceptance checks, one ``criterion`` marker per numbered criterion.

The synthetic co-training runs are shared through module fixtures; the whole
module takes roughly ten minutes on one CPU core.
"""
import copy
import json
import math
import random
import statistics
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

import oracles
from corewrite import cotrain as ct
from corewrite.cli import execute_run, load_run_config, main
from corewrite.contrastive import external_loss, in_batch_loss, internal_loss
from corewrite.core import Direction
from corewrite.genmodel import GeneratorModel, ModelConfig, TrainBatch, Vocab, generation_loss
from corewrite.metrics import METRIC_KEYS, bleu_n, evaluate_corpus, rouge_l
from corewrite.weaklabel import oracle_rewrite, synth_generate, synth_triples
from test_metrics import GOLDEN, GOLDEN_EXPECTED

ROOT = Path(__file__).resolve().parents[1]
SYNTH_CFG = ROOT / "configs" / "synthetic.yaml"
SMOKE_CFG = ROOT / "configs" / "smoke.yaml"
SEEDS = (0, 1, 2)


def t64(x):
    return torch.tensor(np.asarray(x, dtype=np.float64))


# ------------------------------------------------------------ shared runs

class Runs:
    """Lazily executed shipped-config runs keyed by (w, seed)."""

    def __init__(self, root):
        self.root = root
        self.cache = {}

    def config(self, w, seed):
        env = {"COTRAIN_W": str(w), "COTRAIN_SEED": str(seed),
               "COTRAIN_DATA_RUN_DIR": str(self.root / f"w{w}_seed{seed}")}
        return load_run_config(SYNTH_CFG, env=env)

    def get(self, w, seed):
        if (w, seed) not in self.cache:
            start = time.perf_counter()
            res = execute_run(self.config(w, seed))
            self.cache[w, seed] = (res, time.perf_counter() - start)
        return self.cache[w, seed]


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    return Runs(tmp_path_factory.mktemp("acceptance"))


@pytest.fixture(scope="module")
def split():
    rc = load_run_config(SYNTH_CFG, env={})
    d = rc.data
    return synth_generate(d.synth_sessions, d.synth_turns, d.synth_seed,
                          n_labeled=d.synth_labeled, n_test_sessions=d.synth_test_sessions)


def final_em(res):
    return res.reports[-1].test["em"] if res.reports else res.warmup["test"]["em"]


# ------------------------------------------------------------ 1

@pytest.mark.criterion(1, "contrastive losses match brute force on 200 random batches (1e-6, < 10 s)")
def test_c1_contrastive_oracle(record_property):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        n, m = int(rng.integers(1, 9)), int(rng.integers(1, 17))
        tau = float(rng.uniform(0.05, 1.0))
        q1, q2, t = (rng.normal(size=(n, m)) for _ in range(3))
        x = np.concatenate([q1, q2])
        pairs = [
            (in_batch_loss(t64(x), tau).item(), oracles.in_batch_loss(x, tau)),
            (internal_loss(t64(q1), t64(q2), tau).item(), oracles.internal_loss(q1, q2, tau)),
            (external_loss(t64(q1), t64(q2), t64(t), tau).item(), oracles.external_loss(q1, q2, t, tau)),
        ]
        worst = max(worst, *(abs(a - b) for a, b in pairs))
    elapsed = time.perf_counter() - start
    record_property("note", f"max |diff| {worst:.2e}, {elapsed:.1f} s")
    assert worst <= 1e-6
    assert elapsed < 10


# ------------------------------------------------------------ 2

TEXTS = ["what is the color of the moon ?", "what is the size of it ?", "what about the mass ?"]
EXAMPLES = [
    ((), "what is the color of the moon ?", "what is the color of the moon ?"),
    (("what is the color of the moon ?",), "what is the size of it ?", "what is the size of the moon ?"),
    (("what is the color of the moon ?",), "what about the mass ?", "what is the mass of the moon ?"),
]


@pytest.mark.criterion(2, "analytic gradients match central differences (rel err <= 1e-4)")
def test_c2_generation_loss_gradient(record_property):
    m = GeneratorModel(Vocab.build(TEXTS), ModelConfig(dim=6, enc_layers=1, dec_layers=1, dropout=0.0, seed=5),
                       dtype=torch.float64)
    batch = TrainBatch(EXAMPLES)
    params = list(m.net.parameters())
    m.net.zero_grad()
    generation_loss(m, batch, stochastic=False).backward()
    rng = np.random.default_rng(1)
    flat = [(pi, idx) for pi, p in enumerate(params) for idx in np.ndindex(tuple(p.shape))]
    num, ana = [], []
    eps = 1e-6
    with torch.no_grad():
        for k in rng.choice(len(flat), size=200, replace=False):
            pi, idx = flat[k]
            p = params[pi]
            old = p[idx].item()
            p[idx] = old + eps
            hi = generation_loss(m, batch, stochastic=False).item()
            p[idx] = old - eps
            lo = generation_loss(m, batch, stochastic=False).item()
            p[idx] = old
            num.append((hi - lo) / (2 * eps))
            ana.append(params[pi].grad[idx].item())
    num, ana = np.array(num), np.array(ana)
    rel = float(np.max(np.abs(num - ana)) / np.max(np.abs(num)))
    record_property("note", f"generation rel err {rel:.1e}")
    assert rel <= 1e-4


@pytest.mark.criterion(2, "analytic gradients match central differences (rel err <= 1e-4)")
@pytest.mark.parametrize("loss_name", ["internal", "external"])
def test_c2_contrastive_gradients(loss_name, record_property):
    rng = np.random.default_rng(11)
    q1, q2, t = (rng.normal(size=(4, 6)) for _ in range(3))
    tau = 0.3
    inputs = {"q1": q1, "q2": q2, "t": t}
    worst = 0.0
    for name in (("q1", "q2") if loss_name == "internal" else ("q1", "q2", "t")):
        def f(arr, name=name):
            args = {**inputs, name: arr}
            if loss_name == "internal":
                return oracles.internal_loss(args["q1"], args["q2"], tau)
            return oracles.external_loss(args["q1"], args["q2"], args["t"], tau)

        tensors = {k: t64(v) for k, v in inputs.items()}
        tensors[name].requires_grad_(True)
        if loss_name == "internal":
            loss = internal_loss(tensors["q1"], tensors["q2"], tau)
        else:
            loss = external_loss(tensors["q1"], tensors["q2"], tensors["t"], tau)
        loss.backward()
        numeric = oracles.central_diff(f, inputs[name])
        got = tensors[name].grad.numpy()
        worst = max(worst, float(np.max(np.abs(got - numeric)) / np.max(np.abs(numeric))))
    record_property("note", f"{loss_name} rel err {worst:.1e}")
    assert worst <= 1e-4


# ------------------------------------------------------------ 3

@pytest.mark.criterion(3, "hand-derived fixtures (0.55145, 0.22313, 2/3)")
def test_c3_hand_values():
    ortho = t64([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    assert in_batch_loss(ortho, 1.0).item() == pytest.approx(0.55145, abs=1e-4)
    assert bleu_n("what else", "what else can you tell", 1) == pytest.approx(0.22313, abs=1e-6)
    assert rouge_l("a b c", "a c d") == 2 / 3


# ------------------------------------------------------------ 4

@pytest.mark.criterion(4, "co-training invariants hold over a full synthetic run")
def test_c4_invariants(runs, split, record_property):
    res, _ = runs.get(0.03, 0)
    audit = res.audit
    assert audit.strict
    # pools never grow
    sizes = audit.pool_sizes
    assert sizes[0] == (len(split.us), len(split.ur))
    assert all(b[0] <= a[0] and b[1] <= a[1] for a, b in zip(sizes, sizes[1:]))
    # kept items beat their thresholds
    assert audit.kept and all(conf > thr for _, conf, thr in audit.kept)
    # each model only ever sees correctly oriented pseudo pairs
    pseudo = [(m, tags) for m, origin, tags in audit.batches if origin == "pseudo"]
    assert pseudo
    for model, tags in pseudo:
        want = Direction.SIMPLIFY.value if model == "rewriter" else Direction.REWRITE.value
        assert set(tags) == {want}
    # reinitialization matches a fresh model built from the same derived seed
    retrained = sum(r.retrained for r in res.reports)
    assert len(audit.reinit) == 2 * retrained and all(got == want for _, got, want in audit.reinit)
    # termination and conservation
    cfg = load_run_config(SYNTH_CFG, env={}).cotrain
    assert 1 <= len(res.reports) <= cfg.max_iterations
    kept_s = kept_r = 0
    for r in res.reports:
        kept_s, kept_r = kept_s + r.p_s, kept_r + r.p_r
        assert (r.u_s + kept_s, r.u_r + kept_r) == (len(split.us), len(split.ur))
    record_property("note", f"{len(res.reports)} iterations, pools {sizes[0]} -> {sizes[-1]}")


# ------------------------------------------------------------ 5

@pytest.mark.criterion(5, "co-training beats warm-up, warm-up beats untrained (EM, 3 seeds)")
def test_c5_cotraining_lifts_em(runs, split, record_property):
    finals, warms, untrained, times = [], [], [], []
    for seed in SEEDS:
        res, secs = runs.get(0.03, seed)
        assert len(res.reports) == 3
        finals.append(final_em(res))
        warms.append(res.warmup["test"]["em"])
        times.append(secs)
        cfg = runs.config(0.03, seed).cotrain
        _, _, _, fresh = ct.prepare(cfg, split.D, split.us, split.ur)
        untrained.append(ct.evaluate_model(fresh, split.test, cfg.max_gen_tokens)[0].em)
    f, w, u = statistics.fmean(finals), statistics.fmean(warms), statistics.fmean(untrained)
    record_property("note", f"EM final {f:.3f} / warm-up {w:.3f} / untrained {u:.3f}; "
                            f"slowest run {max(times):.0f} s")
    assert f > w
    assert w > u
    assert max(times) < 600


# ------------------------------------------------------------ 6

@pytest.mark.criterion(6, "contrastive term is non-inferior (mean EM w>0 >= w=0 - 0.01)")
def test_c6_contrastive_ablation(runs, record_property):
    with_cl = statistics.fmean(final_em(runs.get(0.03, s)[0]) for s in SEEDS)
    without = statistics.fmean(final_em(runs.get(0.0, s)[0]) for s in SEEDS)
    record_property("note", f"EM w=0.03 {with_cl:.3f} vs w=0 {without:.3f}")
    assert with_cl >= without - 0.01


# ------------------------------------------------------------ 7

@pytest.mark.criterion(7, "threshold sweep: kept sizes strictly decrease, +inf equals warm-up (1e-9)")
def test_c7_threshold_sweep(split, record_property):
    cfg = load_run_config(SYNTH_CFG, env={}).cotrain
    base = ct.warmup_baseline(cfg, split.D, split.us, split.ur, test=split.test)
    train, _ = ct.split_dev(split.D, cfg)
    conf_s = [p.confidence for p in ct.pseudo_label(base.simplifier, split.us, Direction.SIMPLIFY, cfg)]
    conf_r = [p.confidence for p in ct.pseudo_label(base.rewriter, split.ur, Direction.REWRITE, cfg)]
    points = [("-inf", -math.inf, -math.inf)]
    points += [(f"p{q}", float(np.percentile(conf_s, q)), float(np.percentile(conf_r, q))) for q in (40, 60, 80)]
    points += [("+inf", math.inf, math.inf)]
    kept, last = [], None
    for label, s_s, s_r in points:
        S, R = copy.deepcopy(base.simplifier), copy.deepcopy(base.rewriter)
        point_cfg = replace(cfg, s_s=s_s, s_r=s_r)
        *_, rep = ct.co_train_iteration(S, R, split.us.copy(), split.ur.copy(), train, point_cfg, 1,
                                        test=split.test, audit=ct.Audit())
        kept.append(rep.p_s + rep.p_r)
        last = rep
    record_property("note", "kept " + ", ".join(f"{p[0]}={k}" for p, k in zip(points, kept)))
    assert all(a > b for a, b in zip(kept, kept[1:]))
    assert not last.retrained
    want = base.warmup["test"]
    assert all(abs(last.test[k] - want[k]) <= 1e-9 for k in METRIC_KEYS)


# ------------------------------------------------------------ 8

def _random_pairs(n, seed):
    rng = random.Random(seed)
    words = "what is the a of moon size ? , it her tell me about color".split()
    sent = lambda: " ".join(rng.choice(words) for _ in range(rng.randint(0, 9)))  # noqa: E731
    return [(sent(), sent()) for _ in range(n)]


@pytest.mark.criterion(8, "metrics match the brute-force oracle (1e-9); identical corpus scores 1.0")
def test_c8_metrics_oracle():
    got = evaluate_corpus(GOLDEN).scores()
    assert got == pytest.approx(GOLDEN_EXPECTED, abs=1e-9)
    pairs = _random_pairs(100, 8)
    assert evaluate_corpus(pairs).scores() == pytest.approx(oracles.corpus(pairs), abs=1e-9)
    same = evaluate_corpus([(r, r) for _, r in GOLDEN]).scores()
    assert all(v == 1.0 for v in same.values())


# ------------------------------------------------------------ 9

@pytest.mark.criterion(9, "two cotrain executions of one config are identical")
def test_c9_determinism(tmp_path, monkeypatch):
    outs = []
    for name in ("a", "b"):
        monkeypatch.setenv("COTRAIN_DATA_RUN_DIR", str(tmp_path / name))
        assert main(["cotrain", str(SMOKE_CFG)]) == 0
        outs.append(tmp_path / name)
    a, b = outs
    reports = sorted(p.relative_to(a) for p in a.glob("iter_*/report.json"))
    assert reports
    for rel in reports:
        assert json.loads((a / rel).read_text()) == json.loads((b / rel).read_text())
    for name in ("final.json", "warmup.json", "iterations.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


# ------------------------------------------------------------ 10

@pytest.mark.criterion(10, "10,000 synthetic triples round-trip through the oracle")
def test_c10_oracle_round_trip():
    triples = list(synth_triples(10_000, 3, seed=10))
    assert len(triples) == 10_000
    failures = [t for t in triples if oracle_rewrite(t[0], t[1]) != t[2]]
    assert failures == []

"""Simplifier / Rewriter co-training loop.

One run is: warm up both models on the labeled set (the Simplifier on the
reversed pairs), then repeat until the iteration cap or an empty pool:
pseudo-label both pools, keep items above the confidence thresholds, drop
them from their pools, fuse the kept items into a synthetic set, reinitialize
both models and retrain them on gold + pseudo data with
``L_G(D) + lam * L_G(P) + w * (L_icl + L_ecl)``.
"""
from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
import random
import statistics
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import torch

from . import contrastive
from .core import (
    ContractViolation,
    DataPool,
    Direction,
    LabeledExample,
    PseudoExample,
    SyntheticDataset,
    fuse,
    remove_consumed,
    reverse,
    select,
)
from .dataio import write_jsonl
from .genmodel import (
    GeneratorModel,
    ModelConfig,
    Vocab,
    encode_batch,
    forward_batch,
    generate_batch,
    reinitialize,
    save_checkpoint,
    train_step,
)
from .metrics import evaluate_corpus

log = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    FEW_SHOT = "few_shot"
    ZERO_SHOT = "zero_shot"


class ConfigError(ValueError):
    """Invalid configuration value; the message names the field."""


class InvariantViolation(AssertionError):
    pass


@dataclass(frozen=True)
class CoTrainConfig:
    s_s: float = 0.0
    s_r: float = 0.0
    lam: float = 0.5
    w: float = 0.03
    tau: float = 0.1
    max_iterations: int = 3
    warmup_epochs: int = 5
    iter_epochs: int = 5
    batch_size: int = 4
    learning_rate: float = 5e-5
    seed: int = 0
    mode: Mode = Mode.FEW_SHOT
    dev_fraction: float = 0.1
    max_gen_tokens: int = 32
    accumulate_pseudo: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        for name in ("s_s", "s_r"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or math.isnan(v):
                raise ConfigError(f"{name} must be a real number or +/-inf, got {v!r}")
        for name in ("lam", "w"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be a finite non-negative real, got {v!r}")
        if not (isinstance(self.tau, (int, float)) and math.isfinite(self.tau) and self.tau > 0):
            raise ConfigError(f"tau must be a positive real, got {self.tau!r}")
        for name in ("max_iterations", "warmup_epochs", "iter_epochs", "batch_size", "max_gen_tokens"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {v!r}")
        if not (isinstance(self.learning_rate, (int, float)) and self.learning_rate > 0
                and math.isfinite(self.learning_rate)):
            raise ConfigError(f"learning_rate must be a positive real, got {self.learning_rate!r}")
        if not 0 <= self.dev_fraction < 1:
            raise ConfigError(f"dev_fraction must be in [0, 1), got {self.dev_fraction!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


def derived_seed(seed: int, *parts) -> int:
    h = hashlib.sha256(":".join(map(str, (seed, *parts))).encode()).digest()
    return int.from_bytes(h[:4], "little")


def total_loss(lg_gold: float, lg_pseudo: float, lc: float, lam: float, w: float):
    return lg_gold + lam * lg_pseudo + w * lc


# ------------------------------------------------------------------ audit

@dataclass
class Audit:
    """Instrumentation trail checked by tests; cheap enough to leave on."""

    pool_sizes: list[tuple[int, int]] = field(default_factory=list)
    kept: list[tuple[Direction, float, float]] = field(default_factory=list)
    batches: list[tuple[str, str, tuple[str, ...]]] = field(default_factory=list)
    reinit: list[tuple[str, str, str]] = field(default_factory=list)
    strict: bool = True

    def _fail(self, msg):
        if self.strict:
            raise InvariantViolation(msg)

    def record_pools(self, us: int, ur: int):
        if self.pool_sizes and (us > self.pool_sizes[-1][0] or ur > self.pool_sizes[-1][1]):
            self._fail(f"pool grew: {self.pool_sizes[-1]} -> {(us, ur)}")
        self.pool_sizes.append((us, ur))

    def record_kept(self, items: Sequence[PseudoExample], threshold: float):
        for p in items:
            if not p.confidence > threshold:
                self._fail(f"kept item with confidence {p.confidence} <= {threshold}")
            self.kept.append((p.direction, p.confidence, threshold))

    def record_batch(self, model: str, origin: str, examples: Sequence[LabeledExample]):
        tags = tuple(e.provenance for e in examples)
        allowed = {"rewriter": Direction.SIMPLIFY.value, "simplifier": Direction.REWRITE.value}
        if origin == "pseudo" and any(t != allowed[model] for t in tags):
            self._fail(f"{model} trained on mis-oriented pseudo pairs {tags}")
        self.batches.append((model, origin, tags))

    def record_reinit(self, model: str, got: str, expected: str):
        if got != expected:
            self._fail(f"{model} was not reinitialized ({got[:12]} != {expected[:12]})")
        self.reinit.append((model, got, expected))


# ---------------------------------------------------------------- training

def _batches(items: list, size: int, rng: random.Random):
    """Endless shuffled mini-batches over ``items``."""
    while True:
        order = items[:]
        rng.shuffle(order)
        for i in range(0, len(order), size):
            yield order[i:i + size]


def _triples(exs: Sequence[LabeledExample]):
    return [(e.history, e.source, e.target) for e in exs]


@dataclass
class LossLog:
    lg_gold: list[float] = field(default_factory=list)
    lg_pseudo: list[float] = field(default_factory=list)
    l_icl: list[float] = field(default_factory=list)
    l_ecl: list[float] = field(default_factory=list)
    l_all: list[float] = field(default_factory=list)
    epoch_means: list[float] = field(default_factory=list)

    def summary(self) -> dict:
        def m(xs):
            return math.fsum(xs) / len(xs) if xs else 0.0
        return {
            "L_G(D)": m(self.lg_gold), "L_G(P)": m(self.lg_pseudo),
            "L_icl": m(self.l_icl), "L_ecl": m(self.l_ecl), "L_all": m(self.l_all),
            "steps": len(self.l_all), "epoch_means": list(self.epoch_means),
        }


def train_model(model: GeneratorModel, gold: Sequence[LabeledExample], pseudo: Sequence[LabeledExample],
                cfg: CoTrainConfig, epochs: int, seed: int, *, contrastive_on: bool = True,
                audit: Optional[Audit] = None) -> LossLog:
    """Train ``model`` for ``epochs`` epochs over the larger of gold / pseudo."""
    gold, pseudo = list(gold), list(pseudo)
    if not gold and not pseudo:
        raise ContractViolation(f"{model.name}: nothing to train on")
    rng = random.Random(seed)
    torch.manual_seed(seed)
    bs = cfg.batch_size
    steps = math.ceil(max(len(gold), len(pseudo)) / bs)
    gold_it = _batches(gold, bs, rng) if gold else None
    pseudo_it = _batches(pseudo, bs, rng) if pseudo else None
    use_cl = contrastive_on and cfg.w > 0
    logbook = LossLog()
    for epoch in range(epochs):
        start = len(logbook.l_all)
        for step in range(steps):
            gb = next(gold_it) if gold_it is not None else []
            pb = next(pseudo_it) if pseudo_it is not None else []
            if audit:
                if gb:
                    audit.record_batch(model.name, "gold", gb)
                if pb:
                    audit.record_batch(model.name, "pseudo", pb)
            exs = gb + pb
            # one teacher-forced pass over gold and pseudo rows together
            nll, q1 = forward_batch(model, _triples(exs))
            zero = nll.new_zeros(())
            lg_d = nll[:len(gb)].mean() if gb else zero
            lg_p = nll[len(gb):].mean() if pb else zero
            l_icl = l_ecl = zero
            if use_cl and len(exs) >= 2:
                enc = encode_batch(model, [(e.history, e.source) for e in exs]
                                   + [(e.history, e.target) for e in exs], stochastic=True)
                q2, tgt = enc[:len(exs)], enc[len(exs):]
                l_icl = contrastive.internal_loss(q1, q2, cfg.tau)
                l_ecl = contrastive.external_loss(q1, q2, tgt, cfg.tau)
            # with no gold rows the pseudo loss stands alone
            lam = cfg.lam if gold_it is not None else 1.0
            loss = lg_d + lam * lg_p
            if use_cl:
                loss = loss + cfg.w * (l_icl + l_ecl)
            value = train_step(model, loss, context=f"epoch {epoch} step {step}")
            logbook.lg_gold.append(lg_d.item())
            logbook.lg_pseudo.append(lg_p.item())
            logbook.l_icl.append(l_icl.item())
            logbook.l_ecl.append(l_ecl.item())
            logbook.l_all.append(value)
        logbook.epoch_means.append(math.fsum(logbook.l_all[start:]) / steps)
    return logbook


def build_vocab(*texts_groups) -> Vocab:
    texts = []
    for group in texts_groups:
        texts.extend(group)
    return Vocab.build(texts)


def _example_texts(exs: Sequence[LabeledExample]):
    for e in exs:
        yield from e.history
        yield e.source
        yield e.target


def _pool_texts(pool: DataPool):
    for s in pool.sessions:
        yield from s.queries


def new_models(cfg: CoTrainConfig, vocab: Vocab):
    mk = lambda name, role: GeneratorModel(  # noqa: E731
        vocab, replace(cfg.model, seed=derived_seed(cfg.seed, "init", role)),
        learning_rate=cfg.learning_rate, name=name)
    return mk("simplifier", "S"), mk("rewriter", "R")


def warm_up(simplifier: GeneratorModel, rewriter: GeneratorModel, D: Sequence[LabeledExample],
            cfg: CoTrainConfig, audit: Optional[Audit] = None):
    """Rewriter on D, Simplifier on reversed D; generation loss only."""
    if not D:
        what = "weak warm-up set" if cfg.mode is Mode.ZERO_SHOT else "labeled set D"
        raise ContractViolation(f"{what} is empty")
    logs = {
        "rewriter": train_model(rewriter, D, [], cfg, cfg.warmup_epochs,
                                derived_seed(cfg.seed, "warmup", "R"), contrastive_on=False, audit=audit),
        "simplifier": train_model(simplifier, [reverse(e) for e in D], [], cfg, cfg.warmup_epochs,
                                  derived_seed(cfg.seed, "warmup", "S"), contrastive_on=False, audit=audit),
    }
    return simplifier, rewriter, logs


def pseudo_label(model: GeneratorModel, pool: DataPool, direction: Direction,
                 cfg: CoTrainConfig) -> list[PseudoExample]:
    items = list(pool.items())
    if not items:
        return []
    gens = generate_batch(model, [(it.history, it.query) for it in items], cfg.max_gen_tokens)
    return [
        PseudoExample(it.history, it.query, g.text, g.confidence, direction, key=it.key)
        for it, g in zip(items, gens)
    ]


def evaluate_model(model: GeneratorModel, examples: Sequence[LabeledExample], max_len: int = 32):
    gens = generate_batch(model, [(e.history, e.source) for e in examples], max_len)
    preds = [g.text for g in gens]
    return evaluate_corpus([(p, e.target) for p, e in zip(preds, examples)]), preds


def _mean(xs):
    return statistics.fmean(xs) if xs else None


@dataclass
class IterationReport:
    iteration: int
    p_s: int
    p_r: int
    u_s: int
    u_r: int
    mean_conf: dict
    losses: dict
    dev: Optional[dict]
    test: Optional[dict] = None
    pseudo_empty: bool = False
    retrained: bool = True
    synthetic: Optional[SyntheticDataset] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("synthetic")
        return d


@dataclass
class RunResult:
    simplifier: GeneratorModel
    rewriter: GeneratorModel
    reports: list[IterationReport]
    warmup: dict
    dev: list[LabeledExample]
    audit: Audit


def co_train_iteration(simplifier: GeneratorModel, rewriter: GeneratorModel, us: DataPool, ur: DataPool,
                       D: Sequence[LabeledExample], cfg: CoTrainConfig, iter_idx: int, *,
                       previous: Optional[SyntheticDataset] = None,
                       dev: Sequence[LabeledExample] = (), test: Sequence[LabeledExample] = (),
                       audit: Optional[Audit] = None, run_dir: Optional[Path] = None):
    """One pass of pseudo-label, select, shrink pools, fuse, reinitialize, retrain.

    With ``cfg.accumulate_pseudo`` the synthetic set grows across iterations
    (``previous`` plus this iteration's kept items). When the synthetic set is
    empty the models are left as they are and the report is flagged.
    """
    audit = audit if audit is not None else Audit()
    cand_s = pseudo_label(simplifier, us, Direction.SIMPLIFY, cfg)
    cand_r = pseudo_label(rewriter, ur, Direction.REWRITE, cfg)
    kept_s, rej_s = select(cand_s, cfg.s_s)
    kept_r, rej_r = select(cand_r, cfg.s_r)
    audit.record_kept(kept_s, cfg.s_s)
    audit.record_kept(kept_r, cfg.s_r)
    remove_consumed(us, kept_s)
    remove_consumed(ur, kept_r)
    audit.record_pools(len(us), len(ur))
    if run_dir is not None:
        write_jsonl((_pseudo_row(p) for p in (*kept_s, *kept_r)), run_dir / "pseudo" / f"iter_{iter_idx}.jsonl")
    if cfg.accumulate_pseudo and previous is not None:
        synthetic = fuse([*previous.simplified, *kept_s], [*previous.rewritten, *kept_r])
    else:
        synthetic = fuse(kept_s, kept_r)

    retrained = len(synthetic) > 0
    losses = {}
    if retrained:
        losses = _retrain(simplifier, rewriter, D, synthetic.for_simplifier(), synthetic.for_rewriter(),
                          cfg, iter_idx, audit)
    else:
        log.info("iteration %d: synthetic set is empty; models left unchanged", iter_idx)
    report = IterationReport(
        iteration=iter_idx, p_s=len(kept_s), p_r=len(kept_r), u_s=len(us), u_r=len(ur),
        mean_conf={
            "simplify_kept": _mean([p.confidence for p in kept_s]),
            "simplify_rejected": _mean([p.confidence for p in rej_s]),
            "rewrite_kept": _mean([p.confidence for p in kept_r]),
            "rewrite_rejected": _mean([p.confidence for p in rej_r]),
        },
        losses=losses,
        dev=evaluate_model(rewriter, dev, cfg.max_gen_tokens)[0].to_dict() if dev else None,
        test=evaluate_model(rewriter, test, cfg.max_gen_tokens)[0].to_dict() if test else None,
        pseudo_empty=not kept_s and not kept_r,
        retrained=retrained,
        synthetic=synthetic,
    )
    return simplifier, rewriter, us, ur, report


def _retrain(simplifier, rewriter, D, pseudo_for_s, pseudo_for_r, cfg, iter_idx, audit):
    out = {}
    for model, gold, pseudo, role in (
        (simplifier, [reverse(e) for e in D], pseudo_for_s, "S"),
        (rewriter, list(D), pseudo_for_r, "R"),
    ):
        init_seed = derived_seed(cfg.seed, "iter", iter_idx, "init", role)
        reinitialize(model, init_seed)
        reference = GeneratorModel(model.vocab, model.config, name="ref")
        reinitialize(reference, init_seed)
        audit.record_reinit(model.name, model.checksum(), reference.checksum())
        out[model.name] = train_model(model, gold, pseudo, cfg, cfg.iter_epochs,
                                      derived_seed(cfg.seed, "iter", iter_idx, "train", role),
                                      audit=audit).summary()
    return out


def _pseudo_row(p: PseudoExample) -> dict:
    return {
        "session_id": p.key[0], "turn": p.key[1], "history": list(p.history),
        "source": p.source, "generated": p.generated, "confidence": p.confidence,
        "direction": p.direction.value,
    }


def split_dev(D: Sequence[LabeledExample], cfg: CoTrainConfig):
    D = list(D)
    n_dev = int(len(D) * cfg.dev_fraction)
    if n_dev == 0 or len(D) - n_dev < 1:
        return D, []
    order = list(range(len(D)))
    random.Random(derived_seed(cfg.seed, "dev")).shuffle(order)
    dev_idx = set(order[:n_dev])
    return [e for i, e in enumerate(D) if i not in dev_idx], [e for i, e in enumerate(D) if i in dev_idx]


def prepare(cfg: CoTrainConfig, D: Sequence[LabeledExample], us: DataPool, ur: DataPool,
            extra_texts: Sequence[str] = ()):
    """Dev split, shared vocabulary and freshly initialized models."""
    train, dev = split_dev(D, cfg)
    vocab = build_vocab(_example_texts(D), _pool_texts(us), _pool_texts(ur), extra_texts)
    simplifier, rewriter = new_models(cfg, vocab)
    return train, dev, simplifier, rewriter


def run(cfg: CoTrainConfig, D: Sequence[LabeledExample], us: DataPool, ur: DataPool, *,
        test: Sequence[LabeledExample] = (), run_dir=None, audit: Optional[Audit] = None,
        on_report: Optional[Callable[[IterationReport], None]] = None) -> RunResult:
    """Warm up, then co-train until the iteration cap or an exhausted pool.

    ``D`` is the labeled set in FEW_SHOT mode and the rule-generated weak set
    in ZERO_SHOT mode. Pools are copied, never mutated in place.
    """
    audit = audit if audit is not None else Audit()
    run_dir = Path(run_dir) if run_dir is not None else None
    us, ur = us.copy(), ur.copy()
    train, dev, simplifier, rewriter = prepare(cfg, D, us, ur)
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    audit.record_pools(len(us), len(ur))

    simplifier, rewriter, wlogs = warm_up(simplifier, rewriter, train, cfg, audit)
    warm = {"losses": {k: v.summary() for k, v in wlogs.items()}}
    if dev:
        warm["dev"] = evaluate_model(rewriter, dev, cfg.max_gen_tokens)[0].to_dict()
    if test:
        warm["test"] = evaluate_model(rewriter, test, cfg.max_gen_tokens)[0].to_dict()

    reports: list[IterationReport] = []
    synthetic = None
    k = 0
    while k < cfg.max_iterations and len(us) > 0 and len(ur) > 0:
        k += 1
        idir = run_dir / f"iter_{k}" if run_dir is not None else None
        simplifier, rewriter, us, ur, rep = co_train_iteration(
            simplifier, rewriter, us, ur, train, cfg, k, previous=synthetic,
            dev=dev, test=test, audit=audit, run_dir=run_dir)
        synthetic = rep.synthetic
        reports.append(rep)
        if idir is not None:
            idir.mkdir(parents=True, exist_ok=True)
            (idir / "report.json").write_text(json.dumps(rep.to_dict(), indent=2) + "\n", encoding="utf-8")
            save_checkpoint(simplifier, idir / "simplifier.ckpt")
            save_checkpoint(rewriter, idir / "rewriter.ckpt")
        if on_report:
            on_report(rep)
        log.info("iteration %d: |P_S|=%d |P_R|=%d |U_S|=%d |U_R|=%d", k, rep.p_s, rep.p_r, rep.u_s, rep.u_r)
    return RunResult(simplifier, rewriter, reports, warm, dev, audit)


def warmup_baseline(cfg: CoTrainConfig, D: Sequence[LabeledExample], us: DataPool, ur: DataPool, *,
                    test: Sequence[LabeledExample] = ()) -> RunResult:
    """Warm-up only: the models a run starts co-training from."""
    us, ur = us.copy(), ur.copy()
    train, dev, simplifier, rewriter = prepare(cfg, D, us, ur)
    audit = Audit()
    simplifier, rewriter, wlogs = warm_up(simplifier, rewriter, train, cfg, audit)
    warm = {"losses": {k: v.summary() for k, v in wlogs.items()}}
    if dev:
        warm["dev"] = evaluate_model(rewriter, dev, cfg.max_gen_tokens)[0].to_dict()
    if test:
        warm["test"] = evaluate_model(rewriter, test, cfg.max_gen_tokens)[0].to_dict()
    return RunResult(simplifier, rewriter, [], warm, dev, audit)


def zero_shot_warmup_set(us: DataPool, lexicon: Optional[dict] = None) -> list[LabeledExample]:
    from .weaklabel import rule_simplify

    out = []
    for s in us.sessions:
        out.extend(rule_simplify(s, lexicon=lexicon))
    return out


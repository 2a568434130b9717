"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the verdict lines are
repeated in the terminal summary under "acceptance criteria".
"""

import contextlib
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import spearmanr

from dralign.autodiff import Tape, finite_difference, gradient
from dralign.data import CELLS, DatasetTable, load_adult, prepare, synth_biased
from dralign.harness import ExperimentConfig, run, ttest
from dralign.metrics import (SubgroupPredictions, average_precision, eop_ratio, hard_dp, hard_eo,
                             pp_diff)
from dralign.network import bind, predict
from dralign.rationale import loss_changes, taylor_importance
from dralign.training import TrainConfig, cell_loss, dp_loss, train, train_step_dp, train_step_eo

from conftest import random_batch, random_net

ADULT_DIR = Path(__file__).resolve().parents[1] / "data" / "adult"
REPORT: list[str] = []


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Record PASS/FAIL for a criterion; ``detail`` collects measured values."""
    detail: list[str] = []
    try:
        yield detail
    except BaseException as exc:
        if isinstance(exc, pytest.skip.Exception):
            line = f"criterion {number} SKIP  {title}: {exc}"
        else:
            line = f"criterion {number} FAIL  {title}: {'; '.join(detail)} -- {exc}"
        REPORT.append(line)
        print(line)
        raise
    line = f"criterion {number} PASS  {title}: {'; '.join(detail)}"
    REPORT.append(line)
    print(line)


def _rel(analytic, fd) -> float:
    return float(np.max(np.abs(analytic - fd)) / max(np.max(np.abs(fd)), 1e-12))


def _grad_pair(params, build):
    t = Tape()
    bound = bind(params, t)
    analytic = np.concatenate([g.value.reshape(-1) for g in gradient(t, build(bound), bound.nodes)])
    fd = finite_difference(lambda f: float(build(bind(params.with_flat(f), Tape())).value),
                           params.flat(), step=1e-6)
    return analytic, fd


# -- 1 ---------------------------------------------------------------------------


def test_criterion_1_gradient_correctness():
    with criterion(1, "gradients vs central differences on 20 random 2-4-1 nets") as detail:
        start = time.perf_counter()
        worst = {"cls": 0.0, "dp": 0.0, "eo": 0.0, "align": 0.0, "full": 0.0}
        for seed in range(20):
            params = random_net(seed)
            rng = np.random.default_rng(seed)
            b0, b1 = random_batch(rng, 8), random_batch(rng, 8)
            cells = {c: (rng.normal(size=(6, 2)), np.full(6, float(c[1]))) for c in CELLS}
            checks = {
                "cls": lambda bd: dp_loss(bd, b0, b1).cls,
                "dp": lambda bd: dp_loss(bd, b0, b1).fair,
                "eo": lambda bd: cell_loss(bd, cells, "eo").fair,
                "align": lambda bd: dp_loss(bd, b0, b1, with_alignment=True).alignment.loss,
                "full": lambda bd: dp_loss(bd, b0, b1, lam=0.5, beta=0.05).total,
            }
            for name, build in checks.items():
                worst[name] = max(worst[name], _rel(*_grad_pair(params, build)))
        elapsed = time.perf_counter() - start
        detail.append(", ".join(f"{k}={v:.1e}" for k, v in worst.items()))
        detail.append(f"{elapsed:.1f}s")
        assert worst["cls"] < 1e-4 and worst["dp"] < 1e-4 and worst["eo"] < 1e-4
        assert worst["align"] < 1e-3 and worst["full"] < 1e-3
        assert elapsed < 10.0


# -- 2 ---------------------------------------------------------------------------


def test_criterion_2_taylor_fidelity():
    with criterion(2, "Spearman(Taylor importance, exact ablation) >= 0.8 per subgroup") as detail:
        start = time.perf_counter()
        raw = synth_biased(2000, d=2, bias=0.8, seed=0)
        # drop the appended attribute column so the network is 2-8-1
        data = DatasetTable(raw.features[:, :2], raw.labels, raw.attrs)
        params, _ = train(data, TrainConfig(method="erm", hidden_dims=(8,), epochs=10, seed=0))
        rhos = []
        for a in (0, 1):
            X, y = data.features[data.attrs == a], data.labels[data.attrs == a]
            approx = np.concatenate([v.reshape(-1) for v in taylor_importance(params, X, y).values()])
            exact = loss_changes(params, (X, y))
            rhos.append(spearmanr(approx, exact).correlation)
        elapsed = time.perf_counter() - start
        detail.append(f"rho(a=0)={rhos[0]:.3f}, rho(a=1)={rhos[1]:.3f}, {elapsed:.1f}s")
        assert min(rhos) >= 0.8 and elapsed < 60.0


# -- 3 and 5 share one sweep -------------------------------------------------------


SWEEP_LAMS = (0.0, 0.2, 0.4, 0.6)


@pytest.fixture(scope="module")
def synthetic_sweep(tmp_path_factory):
    """FairReg(DP) lambda sweep plus DRAlign at lambda=0.4, 5 seeds, via the harness."""
    out = tmp_path_factory.mktemp("sweep")
    common = dict(dataset={"kind": "synth", "n": 10000, "bias": 0.8}, metrics=["dp"], hidden=[[32, 32]],
                  seeds=[0, 1, 2, 3, 4], epochs=20, batch_size=1000, learning_rate=1e-3)
    start = time.perf_counter()
    fair = run(ExperimentConfig.from_dict(dict(common, methods=["fairreg"], lams=list(SWEEP_LAMS),
                                               out=str(out / "fairreg"))))
    dra = run(ExperimentConfig.from_dict(dict(common, methods=["dralign"], lams=[0.4], betas=[0.04],
                                              out=str(out / "dralign"))))
    elapsed = time.perf_counter() - start
    assert all(r.status == "ok" for r in fair + dra)
    return fair, dra, elapsed


def _means(rows, lam, field):
    return float(np.mean([getattr(r, field) for r in rows if r.lam == lam]))


def test_criterion_3_fairreg_trend(synthetic_sweep):
    with criterion(3, "FairReg(DP) sweep: hard_dp down, d_F down, sum S up") as detail:
        fair, _, elapsed = synthetic_sweep
        dp = [_means(fair, lam, "hard_dp") for lam in SWEEP_LAMS]
        dF = [_means(fair, lam, "d_F") for lam in SWEEP_LAMS]
        S = [_means(fair, lam, "sum_S") for lam in SWEEP_LAMS]
        detail.append("hard_dp=" + "/".join(f"{v:.3f}" for v in dp))
        detail.append("d_F=" + "/".join(f"{v:.2e}" for v in dF))
        detail.append("sum_S=" + "/".join(f"{v:.3f}" for v in S))
        detail.append(f"sweep {elapsed:.0f}s")
        verdicts = {
            "hard_dp strictly decreasing": all(a > b for a, b in zip(dp, dp[1:])),
            "d_F decreasing": all(a >= b for a, b in zip(dF, dF[1:])),
            "sum_S increasing": all(a <= b for a, b in zip(S, S[1:])),
            "runtime < 10 min": elapsed < 600,
        }
        failed = [k for k, ok in verdicts.items() if not ok]
        assert not failed, "violated: " + ", ".join(failed)


# -- 4 ---------------------------------------------------------------------------


def test_criterion_4_alignment_maximum():
    with criterion(4, "identical subgroup batches give sum S = 3.0 (DP) and 6.0 (EO)") as detail:
        params = random_net(0, (3, 16, 16, 1))
        X, y = random_batch(np.random.default_rng(0), 32, 3)
        cfg_dp = TrainConfig(method="dralign", metric="dp", lam=0.4, beta=0.04, hidden_dims=(16, 16))
        _, rec_dp = train_step_dp(params, (X, y), (X, y), cfg_dp)
        Xc = np.random.default_rng(1).normal(size=(32, 3))
        cells = {c: (Xc, np.full(32, 1.0)) for c in CELLS}
        cfg_eo = TrainConfig(method="dralign", metric="eo", lam=0.4, beta=0.04, hidden_dims=(16, 16))
        _, rec_eo = train_step_eo(params, cells, cfg_eo)
        detail.append(f"DP {rec_dp.similarity_sum:.12f}, EO {rec_eo.similarity_sum:.12f}")
        assert abs(rec_dp.similarity_sum - 3.0) <= 1e-6
        assert abs(rec_eo.similarity_sum - 6.0) <= 1e-6


# -- 5 ---------------------------------------------------------------------------


def test_criterion_5_dralign_vs_fairreg(synthetic_sweep):
    with criterion(5, "DRAlign(lam=0.4, beta=0.04) vs FairReg(lam=0.4): higher sum S, hard_dp no worse") as detail:
        fair, dra, elapsed = synthetic_sweep
        s_f, s_d = _means(fair, 0.4, "sum_S"), _means(dra, 0.4, "sum_S")
        dp_f, dp_d = _means(fair, 0.4, "hard_dp"), _means(dra, 0.4, "hard_dp")
        t, p = ttest([r.sum_S for r in dra], [r.sum_S for r in fair if r.lam == 0.4])
        detail.append(f"sum_S {s_d:.3f} vs {s_f:.3f} (Welch t={t:.2f}, p={p:.3g})")
        detail.append(f"hard_dp {dp_d:.3f} vs {dp_f:.3f}")
        assert s_d > s_f and dp_d <= dp_f and elapsed < 600


# -- 6 ---------------------------------------------------------------------------


def test_criterion_6_adult_spot_check():
    with criterion(6, "Adult, hidden 200, lam=0: AP 0.784 +/- 0.03, hard_dp in [0.10, 0.22], < 60 s") as detail:
        if not (ADULT_DIR / "adult.data").exists():
            pytest.skip("Adult census files not present under data/adult")
        tr, va, te = prepare(load_adult(ADULT_DIR), seed=0)
        cfg = TrainConfig(method="fairreg", metric="dp", lam=0.0, hidden_dims=(200, 200), epochs=20,
                          batch_size=1000, learning_rate=1e-3, optimizer="adam", seed=0, selection="best_ap")
        start = time.perf_counter()
        params, _ = train(tr, cfg, val=va)
        elapsed = time.perf_counter() - start
        p = predict(params, te.features)
        ap = average_precision(p, te.labels)
        dp = hard_dp(SubgroupPredictions(p, te.labels, te.attrs))
        detail.append(f"AP={ap:.4f}, hard_dp={dp:.4f}, train {elapsed:.1f}s, {tr.n_features} inputs")
        assert abs(ap - 0.784) <= 0.03
        assert 0.10 <= dp <= 0.22
        assert elapsed < 60.0


# -- 7 ---------------------------------------------------------------------------


def _metric_examples() -> dict:
    P = SubgroupPredictions.from_cells
    return {
        "ap 5/6": (average_precision([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]), 5 / 6),
        "ap 5/12": (average_precision([0.9, 0.8, 0.7, 0.6], [0, 0, 1, 1]), 5 / 12),
        "ap perfect": (average_precision([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]), 1.0),
        "hard_dp 0.5": (hard_dp(P({0: ([0.9, 0.9, 0.9, 0.1], [1] * 4), 1: ([0.9, 0.1, 0.1, 0.1], [1] * 4)})), 0.5),
        "hard_dp same": (hard_dp(P({0: ([0.9, 0.1], [1, 0]), 1: ([0.9, 0.1], [1, 0])})), 0.0),
        "hard_dp below": (hard_dp(P({0: ([0.1], [1]), 1: ([0.2], [1])})), 0.0),
        "hard_eo 0.75": (hard_eo(P({(0, 0): [0.9, 0.1], (1, 0): [0.9, 0.1, 0.1, 0.1],
                                    (0, 1): [0.9, 0.9], (1, 1): [0.9, 0.1]})), 0.75),
        "eop 2.0": (eop_ratio(P({(0, 1): [0.9] * 4 + [0.1], (1, 1): [0.9] * 2 + [0.1] * 3})), 2.0),
        "eop perfect": (eop_ratio(P({(0, 1): [0.9], (1, 1): [0.8], (0, 0): [0.1], (1, 0): [0.1]})), 1.0),
        "pp 0.25": (pp_diff(P({0: ([0.9] * 4, [1, 1, 1, 0]), 1: ([0.9] * 4, [1, 1, 0, 0])})), 0.25),
        "ttest t": (ttest([1, 2, 3, 4, 5], [2, 3, 4, 5, 6])[0], -1.0),
        "ttest p": (ttest([1, 2, 3, 4, 5], [2, 3, 4, 5, 6])[1], 0.34659350708733416),
        "ttest equal": (ttest([1, 2, 3], [1, 2, 3])[1], 1.0),
    }


def test_criterion_7_metric_oracles_and_reductions():
    with criterion(7, "metric oracles to 1e-9 and trajectory-exact reductions") as detail:
        errors = {k: abs(got - want) for k, (got, want) in _metric_examples().items()}
        detail.append(f"{len(errors)} oracle values, max err {max(errors.values()):.1e}")
        bad = [k for k, e in errors.items() if e > 1e-9]
        assert not bad, f"oracle mismatch: {bad}"

        data = synth_biased(600, d=3, bias=0.8, seed=5)
        base = dict(hidden_dims=(6,), epochs=3, batch_size=100, seed=3)
        checks = {}
        for metric in ("dp", "eo"):
            a, ha = train(data, TrainConfig(method="dralign", metric=metric, lam=0.5, beta=0.0, **base))
            b, hb = train(data, TrainConfig(method="fairreg", metric=metric, lam=0.5, **base))
            checks[f"dralign(beta=0)==fairreg [{metric}]"] = (
                np.array_equal(a.flat(), b.flat()) and
                [r.train_loss for r in ha.records] == [r.train_loss for r in hb.records])
            c, _ = train(data, TrainConfig(method="fairreg", metric=metric, lam=0.0, **base))
            d, _ = train(data, TrainConfig(method="erm", metric=metric, batching="paired", **base))
            checks[f"fairreg(lam=0)==erm [{metric}]"] = np.array_equal(c.flat(), d.flat())
        detail.append(f"{sum(checks.values())}/{len(checks)} reductions bit-identical")
        bad = [k for k, ok in checks.items() if not ok]
        assert not bad, f"reduction mismatch: {bad}"

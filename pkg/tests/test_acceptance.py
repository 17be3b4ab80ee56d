"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s``. The ensemble experiment
(criteria 7/8) trains five LeNet members on 10k glyph images; the whole
module takes several minutes on one core.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from shiftmatch import covstats as cs
from shiftmatch import pipeline
from shiftmatch.covstats import CovKind
from shiftmatch.data import synth_digits
from shiftmatch.linalg import svd, sym_invsqrt, sym_sqrt
from shiftmatch.matching import (
    acquire_train_stats,
    categorical_nll,
    matched_forward,
    resolve_placement,
    second_moment,
    shiftempcov,
    shiftmatch_full,
)
from shiftmatch.netmodel import (
    forward,
    graph_from_layers,
    init_weights,
    load_weight_sample,
    loss_and_grads,
    softmax,
)
from shiftmatch.tensor import FeatureMatrix

pytestmark = pytest.mark.acceptance


def report(num: int, message: str) -> None:
    print(f"\n[criterion {num}] PASS - {message}", flush=True)


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    """Shared 5-member LeNet ensemble on 10k glyph images plus its eval grid."""
    tmp = tmp_path_factory.mktemp("acceptance")
    cfg = pipeline.ExperimentConfig(
        members=5, epochs=4, train_size=10000, test_size=2000,
        corruptions="blur:4",  # blur intensity 4 = sigma 2.0
        methods="plain,meanvar,shiftmatch,input-only",
        samples=str(tmp / "samples"), out=str(tmp / "out"), seed=0,
    )
    t0 = time.perf_counter()
    train_result = pipeline.run_train(cfg)
    pipeline.run_stats(cfg)
    eval_result = pipeline.run_eval(cfg)
    elapsed = time.perf_counter() - t0
    graph = pipeline.build_graph(cfg)
    member = load_weight_sample(train_result["weight_files"][0], graph)
    train_ds, _ = pipeline.load_datasets(cfg)
    return {
        "cfg": cfg, "graph": graph, "member": member, "train": train_ds,
        "rows": eval_result["rows"], "elapsed": elapsed,
        "clean_accuracy": train_result["clean_accuracy"],
    }


def _cell(rows, method, corruption):
    (row,) = [r for r in rows if r["method"] == method and r["corruption"] == corruption]
    return row


class TestCriterion1TrainingIdentity:
    def test_identity_across_specs_and_placements(self, experiment):
        """Matching the training data to its own statistics changes nothing:
        features at every site within 1e-4, training NLL within 1e-6."""
        graph, member = experiment["graph"], experiment["member"]
        x = experiment["train"].images
        labels = experiment["train"].labels
        t0 = time.perf_counter()

        combos = [(kind, "pre", "all") for kind in CovKind]
        combos += [(CovKind.KRON, "post", "all"), (CovKind.KRON, "pre", "input-only")]
        placements = {
            (timing, variant): resolve_placement(graph, timing, variant)
            for _, timing, variant in combos
        }
        all_edges = sorted({s.edge for p in placements.values() for s in p.sites})
        plain_logits, plain_feats = forward(graph, member, x, taps=all_edges)
        nll_plain = categorical_nll(softmax(plain_logits), labels)

        # eps -> 0 is the identity statement; 1e-12 keeps exactly-constant
        # directions finite while perturbing real ones by ~1e-6 at most
        worst_feat, worst_nll = 0.0, 0.0
        for kind, timing, variant in combos:
            placement = placements[(timing, variant)]
            stats = acquire_train_stats(graph, member, x, placement, kind)
            logits, tapped = matched_forward(graph, member, stats, x, eps=1e-12,
                                             return_sites=True)
            for site in stats.sites:
                dev = float(np.abs(tapped[site.name] - plain_feats[site.edge]).max())
                assert dev <= 1e-4, f"{kind.value}/{timing}/{variant} site {site.name}: {dev}"
                worst_feat = max(worst_feat, dev)
            nll_diff = abs(categorical_nll(softmax(logits), labels) - nll_plain)
            assert nll_diff <= 1e-6, f"{kind.value}/{timing}/{variant}: nll diff {nll_diff}"
            worst_nll = max(worst_nll, nll_diff)

        elapsed = time.perf_counter() - t0
        assert elapsed <= 120.0, f"identity suite took {elapsed:.0f}s (budget 120s)"
        report(1, f"max site deviation {worst_feat:.2e} (<=1e-4), "
                  f"max NLL diff {worst_nll:.2e} (<=1e-6), {elapsed:.0f}s")


class TestCriterion2CovarianceMatching:
    def test_full_spec_matches_training_covariance(self):
        """Matched output's empirical covariance equals the training covariance."""
        n = 48
        p_test = 20 * n
        rng = np.random.Generator(np.random.PCG64(2))
        train = FeatureMatrix((rng.standard_normal((1500, n)) * np.linspace(0.5, 3.0, n)
                               + 0.7).astype(np.float32))
        test = FeatureMatrix((rng.standard_normal((p_test, n)) * np.linspace(3.0, 0.5, n)
                              - 1.2).astype(np.float32))
        stats = cs.estimate(CovKind.FULL, train)
        out = shiftmatch_full(test, stats, eps=0.0)
        matched = cs.estimate(CovKind.FULL, out)
        resid = np.linalg.norm(matched.full - stats.full) / np.linalg.norm(stats.full)
        assert resid <= 1e-4
        report(2, f"covariance residual {resid:.2e} (<=1e-4) at N={n}, P_test={p_test}")


class TestCriterion3EmpCovEquivalence:
    def test_prior_and_transform_induce_equal_covariances(self):
        """Closed-form equality of the two function-space covariances."""
        p_tr, p_te, n = 50, 50, 16
        rng = np.random.Generator(np.random.PCG64(3))
        x_tr = FeatureMatrix(rng.standard_normal((p_tr, n)).astype(np.float32))
        x_te = FeatureMatrix(rng.standard_normal((p_te, n)).astype(np.float32))
        q = sym_sqrt(second_moment(x_tr))
        s = shiftempcov(x_te, q).data.astype(np.float64)
        cov_shift = s @ s.T / n
        xt = x_tr.data.astype(np.float64)
        xe = x_te.data.astype(np.float64)
        cov_prior = xe @ (xt.T @ xt) @ xe.T / (n * p_tr)
        resid = np.linalg.norm(cov_shift - cov_prior) / np.linalg.norm(cov_prior)
        assert resid <= 1e-5
        report(3, f"induced-covariance residual {resid:.2e} (<=1e-5) on 50x16 inputs")


class TestCriterion4ExactRemoval:
    def test_population_and_empirical_removal(self, tmp_path):
        """Stationary blur removal: population exact, empirical within 5%."""
        cfg = pipeline.ExperimentConfig(out=str(tmp_path), theory_samples=50000, seed=0)
        t0 = time.perf_counter()
        result = pipeline.run_theory(cfg)
        elapsed = time.perf_counter() - t0
        for row in result["rows"]:
            assert row["passed"], row
        assert elapsed <= 300.0
        pop = max(r["error"] for r in result["rows"] if r["mode"] == "population")
        emp = max(r["error"] for r in result["rows"] if r["mode"] == "empirical")
        report(4, f"population max error {pop:.2e} (<=1e-4), "
                  f"empirical max error {emp:.3f} (<=0.05) at P=50000, {elapsed:.0f}s")


class TestCriterion5LinalgCore:
    def test_random_instance_sweep(self):
        """100 random instances per operation, dimensions up to 64."""
        rng = np.random.Generator(np.random.PCG64(5))
        worst_sqrt = worst_sandwich = worst_svd = 0.0
        for i in range(100):
            n = int(rng.integers(2, 65))
            q, _ = np.linalg.qr(rng.standard_normal((n, n)))
            cond = 10 ** rng.uniform(0, 6)
            a = (q * np.geomspace(cond, 1.0, n)) @ q.T
            r = sym_sqrt(a)
            worst_sqrt = max(worst_sqrt, np.linalg.norm(r @ r - a) / np.linalg.norm(a))
            ri = sym_invsqrt(a, 0.0)
            worst_sandwich = max(worst_sandwich,
                                 np.linalg.norm(ri @ a @ ri - np.eye(n)) / np.sqrt(n))
            m = rng.standard_normal((int(rng.integers(2, 65)), n))
            u, sv, v = svd(m)
            worst_svd = max(worst_svd, np.linalg.norm((u * sv) @ v.T - m) / np.linalg.norm(m))
        assert worst_sqrt <= 1e-5
        assert worst_sandwich <= 1e-3
        assert worst_svd <= 1e-4
        report(5, f"sqrt {worst_sqrt:.2e} (<=1e-5), invsqrt sandwich {worst_sandwich:.2e} "
                  f"(<=1e-3), svd {worst_svd:.2e} (<=1e-4) over 100 instances")


class TestCriterion6GradientCheck:
    def test_backprop_vs_central_differences(self):
        g = graph_from_layers("toy", (1, 6, 6), 4,
                              "conv:3:3:1:1; frn; relu; avgpool:2; flatten; linear:4")
        sample = init_weights(g, 42)
        sample.params = {k: tuple(a.astype(np.float64) for a in v)
                         for k, v in sample.params.items()}
        rng = np.random.Generator(np.random.PCG64(6))
        x = rng.standard_normal((8, 1, 6, 6))
        labels = rng.integers(0, 4, 8)
        _, grads = loss_and_grads(g, sample, x, labels)
        hstep = 1e-5
        worst, nparams = 0.0, 0
        for name, arrs in sample.params.items():
            for ai, arr in enumerate(arrs):
                flat = arr.reshape(-1)
                for idx in range(flat.size):
                    keep = flat[idx]
                    flat[idx] = keep + hstep
                    up = loss_and_grads(g, sample, x, labels)[0]
                    flat[idx] = keep - hstep
                    down = loss_and_grads(g, sample, x, labels)[0]
                    flat[idx] = keep
                    fd = (up - down) / (2 * hstep)
                    an = float(grads[name][ai].reshape(-1)[idx])
                    rel = abs(fd - an) / max(abs(fd), abs(an), 1e-4)
                    worst = max(worst, rel)
                    nparams += 1
        assert nparams <= 200
        assert worst <= 1e-3
        report(6, f"max relative gradient error {worst:.2e} (<=1e-3) over {nparams} parameters")


class TestCriterion7DirectionalOod:
    def test_blur_margins(self, experiment):
        rows = experiment["rows"]
        plain = _cell(rows, "plain", "blur")["accuracy"]
        meanvar = _cell(rows, "meanvar", "blur")["accuracy"]
        shift = _cell(rows, "shiftmatch", "blur")["accuracy"]
        clean_plain = _cell(rows, "plain", "clean")["accuracy"]
        clean_shift = _cell(rows, "shiftmatch", "clean")["accuracy"]
        assert shift - plain >= 0.05, f"shiftmatch {shift} vs plain {plain}"
        assert shift - meanvar >= 0.01, f"shiftmatch {shift} vs meanvar {meanvar}"
        assert abs(clean_shift - clean_plain) <= 0.005
        assert experiment["elapsed"] <= 1800.0
        report(7, f"blur s=2: shiftmatch {shift:.3f} vs plain {plain:.3f} "
                  f"(+{100*(shift-plain):.1f}pts, need +5) vs meanvar {meanvar:.3f} "
                  f"(+{100*(shift-meanvar):.1f}pts, need +1); clean gap "
                  f"{100*abs(clean_shift-clean_plain):.2f}pts (<=0.5); "
                  f"pipeline {experiment['elapsed']:.0f}s (<=1800s)")


class TestCriterion8AblationDirection:
    def test_input_only_underperforms(self, experiment):
        rows = experiment["rows"]
        shift = _cell(rows, "shiftmatch", "blur")["accuracy"]
        input_only = _cell(rows, "input-only", "blur")["accuracy"]
        assert shift - input_only >= 0.02, f"input-only {input_only} vs shiftmatch {shift}"
        report(8, f"blur s=2: input-only {input_only:.3f} trails all-sites {shift:.3f} "
                  f"by {100*(shift-input_only):.1f}pts (need >=2)")


class TestCriterion9DeterminismAndFormats:
    def test_hash_stability_and_round_trips(self, tmp_path, experiment):
        cfg = pipeline.ExperimentConfig(
            graph="mlp-s", classes=4, members=1, epochs=1, train_size=160,
            test_size=60, batch=40, corruptions="blur:2", methods="plain,shiftmatch",
            samples=str(tmp_path / "a"), out=str(tmp_path / "oa"), seed=3,
        )
        from dataclasses import replace

        twin = replace(cfg, samples=str(tmp_path / "b"), out=str(tmp_path / "ob"))
        r1, r2 = pipeline.run_train(cfg), pipeline.run_train(twin)
        w1 = Path(r1["weight_files"][0]).read_bytes()
        w2 = Path(r2["weight_files"][0]).read_bytes()
        assert w1 == w2, "weight files differ across identical runs"

        s1, s2 = pipeline.run_stats(cfg), pipeline.run_stats(twin)
        b1 = Path(s1["stats_files"][0]).read_bytes()
        b2 = Path(s2["stats_files"][0]).read_bytes()
        assert b1 == b2, "statistics files differ across identical runs"

        e1, e2 = pipeline.run_eval(cfg), pipeline.run_eval(twin)
        h1 = pipeline.report_content_hash(e1["rows"])
        h2 = pipeline.report_content_hash(e2["rows"])
        assert h1 == h2, "report content differs across identical runs"

        # format round-trips are bit-exact
        from shiftmatch.data import load_idx_images, save_idx_images
        from shiftmatch.matching import load_train_stats, save_train_stats

        ds = synth_digits(12, seed=9)
        p1, p2 = tmp_path / "i1.idx", tmp_path / "i2.idx"
        save_idx_images(p1, ds.images)
        save_idx_images(p2, load_idx_images(p1))
        assert p1.read_bytes() == p2.read_bytes()

        ts = load_train_stats(s1["stats_files"][0])
        resaved = tmp_path / "resave.smts"
        save_train_stats(resaved, ts)
        assert resaved.read_bytes() == b1

        graph = pipeline.build_graph(cfg)
        member = load_weight_sample(r1["weight_files"][0], graph)
        from shiftmatch.netmodel import save_weight_sample

        rewrit = tmp_path / "resave.smwt"
        save_weight_sample(rewrit, graph, member)
        assert rewrit.read_bytes() == w1

        report(9, "train/stats/eval hash-stable under fixed seed; "
                  "SMWT/SMTS/SMST-in-SMTS/IDX round-trips bit-exact")

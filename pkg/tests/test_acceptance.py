"""Acceptance gate: one test per shipped guarantee, one verdict line each.

These pin the numbers the package promises (tolerances, budgets, exact
reproduction), end to end through the public surface.  Unit-level
coverage lives in the per-module test files; this file is the contract.
"""

import json
import time
from pathlib import Path

import numpy as np

from aitpr import autodiff as ad
from aitpr import cli, decoder as dec, metrics, scenes, tpr
from aitpr.training import teacher_forced_loss


def verdict(name: str, ok: bool, detail: str):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# TPR round trip: 100 seeded shapes, unbinding error <= 1e-8, under 5 s.
# ---------------------------------------------------------------------------

def test_acceptance_tpr_round_trip():
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst = 0.0
    for case in range(100):
        d_m = int(rng.integers(2, 65))
        n = int(rng.integers(1, min(32, d_m) + 1))
        d_n = int(rng.integers(2, 33))
        roles = tpr.generate_roles(n, d_m, seed=case)
        fillers = tpr.FillerSet(fillers=rng.standard_normal((n, d_n)))
        bound = tpr.bind(fillers, roles)
        for j in range(n):
            err = np.abs(tpr.unbind(bound, roles.roles[j]) - fillers.fillers[j]).max()
            worst = max(worst, err)
    elapsed = time.perf_counter() - t0
    verdict("tpr-round-trip", worst <= 1e-8 and elapsed < 5.0,
            f"max unbinding error {worst:.3e} (limit 1e-8), "
            f"{elapsed:.2f}s (limit 5s), 100 cases")


# ---------------------------------------------------------------------------
# Gradient suite: the gradcheck command over all six variant x fusion
# combinations at D=16, d=6, e=5, |V|=12, within 60 s.
# ---------------------------------------------------------------------------

def test_acceptance_gradient_suite():
    t0 = time.perf_counter()
    rc = cli.main(["gradcheck", "--dims", "D=16,d=6,e=5,V=12", "--seed", "0"])
    elapsed = time.perf_counter() - t0
    verdict("gradient-suite", rc == 0 and elapsed < 60.0,
            f"exit code {rc} over 6 combinations, "
            f"{elapsed:.1f}s (limit 60s), threshold 1e-4")


# ---------------------------------------------------------------------------
# Attention normalization: 1,000 random attend calls per fusion mode,
# every returned distribution sums to 1 within 1e-12.
# ---------------------------------------------------------------------------

def test_acceptance_attention_normalization():
    dims = dec.ModelDims(feat_dim=10, hidden=6, embed=5, att=4, vocab_size=12)
    params = dec.init_params(dims, seed=3)
    rng = np.random.default_rng(42)
    worst = 0.0
    counts = {dec.FusionMode.LATE: 0, dec.FusionMode.EARLY: 0}
    with ad.no_grad():
        for mode in (dec.FusionMode.LATE, dec.FusionMode.EARLY):
            for _ in range(1000):
                k1 = int(rng.integers(1, 7))
                k2 = int(rng.integers(0, 6))
                v = rng.standard_normal((k1, dims.feat_dim))
                vp = rng.standard_normal((k2, dims.feat_dim))
                feats = scenes.RegionFeatureSet(v=v, v_prime=vp,
                                                v_bar=v.mean(axis=0))
                h = ad.tensor(rng.standard_normal(dims.hidden))
                alpha, _ = dec.attend(h, feats, mode, params,
                                      allow_attribute_only=True)
                parts = alpha if isinstance(alpha, tuple) else (alpha,)
                for part in parts:
                    if part is None:
                        continue
                    worst = max(worst, abs(float(np.sum(part.data)) - 1.0))
                    counts[mode] += 1
    verdict("attention-normalization",
            worst <= 1e-12,
            f"max |sum(alpha) - 1| = {worst:.3e} (limit 1e-12) over "
            f"{counts[dec.FusionMode.LATE]} late / "
            f"{counts[dec.FusionMode.EARLY]} early distributions")


# ---------------------------------------------------------------------------
# Structural ablation fidelity, on one fixed seed:
#   (a) the variant-1 trace is bit-identical to a pipeline that never
#       touches the correction path at all;
#   (b) variants 2 and 3 share every pre-correction tensor and diverge
#       exactly at the word-context correction.
# ---------------------------------------------------------------------------

def _trace_variant(variant, feats, target, params, mode):
    flags = dec.VariantFlags.variant(variant)
    s = dec.compute_semantic_vector(feats, params)
    v_x = dec.compute_visual_context(feats, params)
    state = dec.init_state(feats.v_bar, params)
    trace = []
    with ad.no_grad():
        for prev in target.ids[:-1]:
            _logits, state = dec.step_logits(state, feats, s, v_x, prev, mode,
                                             flags, params, trace=trace)
    return trace


def _bit_equal(a, b):
    if a is None or b is None:
        return a is b
    if isinstance(a, tuple):
        return len(a) == len(b) and all(_bit_equal(x, y) for x, y in zip(a, b))
    return a.shape == b.shape and bool(np.all(a == b))


def test_acceptance_ablation_fidelity():
    dims = dec.ModelDims(feat_dim=12, hidden=6, embed=5, att=4, vocab_size=12)
    params = dec.init_params(dims, seed=5)
    rng = np.random.default_rng(5)
    v = rng.standard_normal((3, dims.feat_dim))
    vp = rng.standard_normal((2, dims.feat_dim))
    feats = scenes.RegionFeatureSet(v=v, v_prime=vp, v_bar=v.mean(axis=0))
    target = scenes.TokenSequence(ids=(scenes.BOS_ID, 4, 7, 9, scenes.EOS_ID))

    problems = []
    for mode in (dec.FusionMode.LATE, dec.FusionMode.EARLY):
        # (a) hand-rolled pipeline with no correction machinery anywhere
        v_x = dec.compute_visual_context(feats, params)
        state = dec.init_state(feats.v_bar, params)
        bypass = []
        with ad.no_grad():
            for prev in target.ids[:-1]:
                alpha, q = dec.attend(state.h, feats, mode, params)
                p = ad.row(params.w_embed, prev)
                T = dec.compute_tpr_gate(state, v_x, params)
                logits, state = dec.cell_step(p, q, T, state, params,
                                              consumed_token=prev)
                bypass.append({
                    "alpha": (tuple(np.array(x.data) if x is not None else None
                                    for x in alpha)
                              if isinstance(alpha, tuple) else np.array(alpha.data)),
                    "q": np.array(q.data), "p": np.array(p.data),
                    "T": np.array(T.data), "h": np.array(state.h.data),
                    "logits": np.array(logits.data),
                    "embed_sum": np.array(state.embed_sum.data),
                })
        trace1 = _trace_variant(1, feats, target, params, mode)
        for t, (got, want) in enumerate(zip(trace1, bypass)):
            for key in ("alpha", "q", "p", "T", "h", "logits", "embed_sum"):
                if not _bit_equal(got[key], want[key]):
                    problems.append(f"variant1/{mode.value} step {t} {key}")

    # (b) variant 3 vs variant 2, late fusion, same fixed inputs
    t2 = _trace_variant(2, feats, target, params, dec.FusionMode.LATE)
    t3 = _trace_variant(3, feats, target, params, dec.FusionMode.LATE)
    # step 0 inputs agree bit for bit up to and including the attended
    # correction; the word context is where they part ways
    for key in ("alpha", "q_raw", "q", "p_raw", "T", "embed_sum"):
        if not _bit_equal(t2[0][key], t3[0][key]):
            problems.append(f"variant2-vs-3 step 0 {key} should match")
    if _bit_equal(t2[0]["p"], t3[0]["p"]):
        problems.append("variant2-vs-3 step 0 p should differ")
    if _bit_equal(t2[0]["h"], t3[0]["h"]):
        problems.append("variant2-vs-3 step 0 h should differ downstream of p")
    # the raw-embedding sum is a pure function of the consumed tokens, so
    # it stays shared for the whole rollout even after states diverge
    for t in range(len(t2)):
        if not _bit_equal(t2[t]["embed_sum"], t3[t]["embed_sum"]):
            problems.append(f"variant2-vs-3 step {t} embed_sum")

    verdict("ablation-fidelity", not problems,
            "variant-1 trace bit-identical to correction-free pipeline in "
            "both modes; variant 2/3 diverge exactly at the word correction"
            if not problems else f"mismatches: {problems[:6]}")


# ---------------------------------------------------------------------------
# Overfit: 50 scenes, late fusion, variant 3, D=64, d=64: loss < 0.05,
# >= 90% exact caption reproduction, BLEU-4 >= 0.95, under 5 minutes.
# ---------------------------------------------------------------------------

def test_acceptance_overfit(tmp_path):
    data = tmp_path / "data"
    run = tmp_path / "run"
    t0 = time.perf_counter()
    assert cli.main(["synth", "--scenes", "50", "--seed", "7",
                     "--feat-dim", "64", "--out", str(data)]) == 0
    assert cli.main(["train", "--data", str(data), "--out", str(run / "model.ckpt"),
                     "--epochs", "80", "--hidden", "64", "--embed", "32",
                     "--att", "32", "--variant", "3", "--fusion", "late",
                     "--learning-rate", "0.01", "--seed", "1"]) == 0
    assert cli.main(["eval", "--ckpt", str(run / "model.ckpt"),
                     "--data", str(data),
                     "--report", str(run / "report.json")]) == 0
    elapsed = time.perf_counter() - t0

    final_loss = float((run / "model_loss.csv").read_text()
                       .splitlines()[-1].split(",")[1])
    report = json.loads((run / "report.json").read_text())

    decoded = dict(line.split("\t", 1) for line in
                   (run / "report_captions.txt").read_text().splitlines())
    exact = 0
    for fpath in sorted(Path(data).glob("scene_*.captions.txt")):
        stem = fpath.name[:-len(".captions.txt")]
        # first caption line is the trained target
        target = fpath.read_text().splitlines()[0]
        exact += decoded[stem] == target
    exact_rate = exact / 50

    ok = (final_loss < 0.05 and exact_rate >= 0.90
          and report["bleu4"] >= 0.95 and elapsed < 300.0)
    verdict("overfit", ok,
            f"final loss {final_loss:.4f} (<0.05), exact match "
            f"{exact_rate:.0%} (>=90%), BLEU-4 {report['bleu4']:.4f} "
            f"(>=0.95), {elapsed:.0f}s (<300s)")


# ---------------------------------------------------------------------------
# Metric oracles: three fixed micro-corpora against hand-computed values
# at 1e-6, plus exact identity behavior.
# ---------------------------------------------------------------------------

def test_acceptance_metric_oracles():
    failures = []

    # corpus 1: brevity-penalty BLEU (unigram precision 1, lengths 3 vs 4)
    got = metrics.bleu(["the cat sat"], [["the cat sat down"]], 1)
    if abs(got - 0.7165313105737893) > 1e-6:
        failures.append(f"bleu1 {got}")

    # corpus 2: LCS F-measure both ways around a dropped token
    got = metrics.rouge_l("a b c d", ["a c d"])
    if abs(got - 0.8798076923076923) > 1e-6:
        failures.append(f"rouge fwd {got}")
    got = metrics.rouge_l("a c d", ["a b c d"])
    if abs(got - 0.8356164383561644) > 1e-6:
        failures.append(f"rouge rev {got}")

    # corpus 3: three-image CIDEr-D with mixed reference counts
    cands = ["a red block", "a blue ball", "a green cone above a red block"]
    refs = [["a red block"],
            ["a blue ball beside a red block", "a blue ball"],
            ["a green cone above a red block"]]
    per_image = metrics.cider_d_scores(cands, refs)
    for got, want in zip(per_image, (0.0, 5.77546862589138, 10.0)):
        if abs(got - want) > 1e-6:
            failures.append(f"cider per-image {got} vs {want}")
    got = metrics.cider_d(cands, refs)
    if abs(got - 5.258489541963793) > 1e-6:
        failures.append(f"cider corpus {got}")

    # identity corpora
    idents = ["a red block beside a blue ball", "a green cone", "a gray tube"]
    if metrics.bleu(idents, [[c] for c in idents], 4) != 1.0:
        failures.append("identity bleu4 != 1.0")
    if any(metrics.rouge_l(c, [c]) != 1.0 for c in idents):
        failures.append("identity rouge != 1.0")

    verdict("metric-oracles", not failures,
            "BLEU/ROUGE-L/CIDEr-D match hand-computed values at 1e-6; "
            "identity corpora score exactly 1.0"
            if not failures else f"mismatches: {failures}")


# ---------------------------------------------------------------------------
# Determinism: two identically seeded train+eval pipelines produce
# byte-identical checkpoints and reports.
# ---------------------------------------------------------------------------

def test_acceptance_determinism(tmp_path):
    payloads = []
    for tag in ("one", "two"):
        base = tmp_path / tag
        assert cli.main(["synth", "--scenes", "6", "--seed", "13",
                         "--feat-dim", "16", "--out", str(base / "data")]) == 0
        assert cli.main(["train", "--data", str(base / "data"),
                         "--out", str(base / "model.ckpt"),
                         "--epochs", "5", "--hidden", "8", "--embed", "6",
                         "--att", "4", "--seed", "2"]) == 0
        assert cli.main(["eval", "--ckpt", str(base / "model.ckpt"),
                         "--data", str(base / "data"),
                         "--report", str(base / "report.json")]) == 0
        payloads.append({name: (base / name).read_bytes() for name in
                         ("model.ckpt", "model_loss.csv", "report.json",
                          "report_captions.txt")})
    same = [n for n in payloads[0] if payloads[0][n] == payloads[1][n]]
    ok = len(same) == len(payloads[0])
    verdict("determinism", ok,
            f"byte-identical across two seeded runs: {', '.join(same)}"
            if ok else f"only {same} matched")


# ---------------------------------------------------------------------------
# Relative ordering of the three variants on the synthetic benchmark.
# Logged, not asserted: toy-scale ordering need not transfer anywhere.
# ---------------------------------------------------------------------------

def test_acceptance_variant_ordering_note(tmp_path):
    data = tmp_path / "data"
    assert cli.main(["synth", "--scenes", "20", "--seed", "11",
                     "--feat-dim", "32", "--out", str(data)]) == 0
    scores = {}
    for variant in (1, 2, 3):
        run = tmp_path / f"v{variant}"
        assert cli.main(["train", "--data", str(data),
                         "--out", str(run / "model.ckpt"),
                         "--epochs", "40", "--hidden", "24", "--embed", "12",
                         "--att", "12", "--variant", str(variant),
                         "--fusion", "late", "--seed", "2"]) == 0
        assert cli.main(["eval", "--ckpt", str(run / "model.ckpt"),
                         "--data", str(data),
                         "--report", str(run / "report.json")]) == 0
        rep = json.loads((run / "report.json").read_text())
        scores[variant] = (rep["cider_d"], rep["bleu4"], rep["rouge_l"])
    order = sorted(scores, key=lambda v: scores[v], reverse=True)
    detail = "; ".join(
        f"variant {v}: CIDEr-D {scores[v][0]:.3f}, BLEU-4 {scores[v][1]:.3f}, "
        f"ROUGE-L {scores[v][2]:.3f}" for v in (1, 2, 3))
    # non-binding by design: report the ordering, pass either way
    verdict("variant-ordering-note", True,
            f"benchmark ordering {order} (non-binding); {detail}")

"""Exit criteria, one test each. Every test prints a single PASS/FAIL line
(collected again in the terminal summary) before asserting."""

import json
import math
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from conftest import ACCEPTANCE
from oracles import dsc_count, mhd_bruteforce, random_mask_pair, vs_count

from mdunet.cli import main
from mdunet.experiments import ToyExperiment, moving_average, run_toy
from mdunet.gradcheck import NETWORK_TOLERANCE, OP_CASES, OP_TOLERANCE, check_network_small, check_op
from mdunet.inception import InceptionSpec, parameter_count, spatial_kernel_params
from mdunet.metrics import dsc, mhd, vs
from mdunet.network import NetworkConfig, build_network, permutation, shape_table
from mdunet.tensor import Tensor, no_grad

GOLDEN = Path(__file__).parent / "golden"


def report(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    print(line)
    ACCEPTANCE.append(line)
    return ok


def test_shape_fidelity(tmp_path, capsys):
    details, ok = [], True
    for fusion in ("late", "hyperdense"):
        cfg = tmp_path / f"{fusion}.json"
        cfg.write_text(json.dumps({"network": {"num_streams": 4, "fusion": fusion}}))
        t0 = time.perf_counter()
        code = main(["inspect", "--config", str(cfg)])
        dt = time.perf_counter() - t0
        out = capsys.readouterr().out
        golden = (GOLDEN / f"layers_{fusion}.txt").read_text(encoding="utf-8")
        good = code == 0 and out.startswith(golden) and dt < 1.0
        ok &= good
        details.append(f"{fusion} {'match' if out.startswith(golden) else 'MISMATCH'} {dt:.2f}s")
    assert report("shape fidelity (golden table, < 1 s)", ok, "; ".join(details))


def test_gradient_suite():
    t0 = time.perf_counter()
    results = [check_op(name, instances=20, seed=0) for name in sorted(OP_CASES)]
    net = check_network_small(seed=0, fusion="hyperdense")
    dt = time.perf_counter() - t0
    worst_op = max(results, key=lambda r: r.max_rel_err)
    ok = all(r.passed and r.tolerance == OP_TOLERANCE == 1e-6 for r in results)
    ok &= net.passed and NETWORK_TOLERANCE == 1e-4 and dt < 120
    for r in results + [net]:
        print(r.line())
    detail = (
        f"{len(results)} ops worst {worst_op.name} {worst_op.max_rel_err:.2e} (tol 1e-6); "
        f"tiny hyperdense net {net.max_rel_err:.2e} (tol 1e-4); {dt:.1f}s"
    )
    assert report("gradient suite (< 2 min)", ok, detail)


def test_metrics_oracle_equivalence():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, exact, dominated = 0.0, True, True
    for _ in range(200):
        ref, auto = random_mask_pair(rng)
        d, v = dsc(ref, auto), vs(ref, auto)
        exact &= d == dsc_count(ref, auto)
        want_v = vs_count(ref, auto)
        exact &= v == want_v or (math.isnan(v) and math.isnan(want_v))
        if not math.isnan(v):
            dominated &= v >= d
        got, want = mhd(ref, auto), mhd_bruteforce(ref, auto)
        if math.isnan(got) or math.isnan(want):
            exact &= math.isnan(got) and math.isnan(want)
        else:
            worst = max(worst, abs(got - want))
    dt = time.perf_counter() - t0
    ok = exact and dominated and worst <= 1e-9 and dt < 30
    detail = f"200 pairs, DSC/VS exact={exact}, max MHD diff {worst:.1e} mm, VS>=DSC={dominated}, {dt:.1f}s"
    assert report("metrics oracle equivalence", ok, detail)


def test_permutation_property():
    ok = True
    for n in (1, 2, 3, 4):
        for l in (1, 2, 3, 4):
            rules = [permutation(s, l, n) for s in range(1, n + 1)]
            ok &= len({frozenset(Counter(r.order).items()) for r in rules}) == 1
            ok &= all(r.order[0] == (l - 1, r.stream) for r in rules)
    display = (
        permutation(1, 3, 2).labels() == ["x2^1", "x2^2", "x1^1", "x1^2", "x0^1", "x0^2"]
        and permutation(2, 3, 2).labels() == ["x2^2", "x2^1", "x1^2", "x1^1", "x0^2", "x0^1"]
    )
    ok &= display
    assert report("permutation property", ok, f"N 1..4 x l 1..4 multiset-equal, own-first; N=2 display={display}")


def test_factorization_economy():
    cfg = NetworkConfig()
    blocks = [(cfg.encoder_in_channels(l), cfg.width(l)) for l in range(cfg.depth)]
    blocks += [(cfg.bridge_in_channels(), cfg.width(cfg.depth))]
    blocks += [(cfg.width(k) // 2, cfg.width(k) // 2) for k in range(cfg.depth, 0, -1)]
    ok, ratios = True, set()
    for cin, cout in blocks:
        std, asym = InceptionSpec(cin, cout), InceptionSpec(cin, cout, "asymmetric")
        s, a = spatial_kernel_params(std), spatial_kernel_params(asym)
        for name, w, n, _ in std.branches():
            if n == 3:
                ok &= 3 * a[name] == 2 * s[name]
                ratios.add(a[name] / s[name])
        # whole-block cross-check: each factorised branch swaps w*w*(n*n) weights for
        # 2*w*w*n plus one extra BN pair
        saved = sum(w * w * (n * n - 2 * n) - 2 * w for _, w, n, _ in std.branches() if n > 1)
        ok &= parameter_count(std) - parameter_count(asym) == saved
    detail = f"{len(blocks)} default blocks, 3x3-branch ratios {sorted(ratios)}"
    assert report("factorization economy (2/3 per 3x3 branch)", ok, detail)


@pytest.fixture(scope="module")
def toy_logs():
    exp = ToyExperiment()
    return {f: run_toy(exp, f) for f in ("hyperdense", "early")}


def test_toy_end_to_end(toy_logs):
    log = toy_logs["hyperdense"]
    final = log.records[-1].val_dsc
    ma = moving_average(log.losses, 5)[:10]
    decreasing = all(b < a for a, b in zip(ma, ma[1:]))
    early = toy_logs["early"].records[-1].val_dsc
    ok = final >= 0.80 and decreasing
    detail = (
        f"hyperdense val DSC {final:.3f} (>= 0.80), 5-epoch MA loss strictly decreasing over epochs 1-10: {decreasing}; "
        f"directional, not gated: early fusion val DSC {early:.3f} ({'<=' if early <= final else '>'} hyperdense)"
    )
    assert report("toy end-to-end", ok, detail)


def test_degeneracy_single_stream():
    # Implemented as stated. Expected to fail: a single dense stream still
    # concatenates its own earlier layers, so its inputs widen (32, 96, 224, 480)
    # where the late-fusion stream stays chained (32, 64, 128, 256).
    kw = dict(num_streams=1, input_spatial=(32, 32), seed=5)
    hd, late = NetworkConfig(fusion="hyperdense", **kw), NetworkConfig(fusion="late", **kw)
    same_table = shape_table(hd).rows == shape_table(late).rows
    x = Tensor(np.random.default_rng(0).random((2, 1, 32, 32), dtype=np.float32))
    with no_grad():
        # batch statistics: fresh running stats in eval mode can zero a whole map
        a = build_network(hd)(x).data
        b = build_network(late)(x).data
    same_out = np.array_equal(a, b)
    diff = [(r1[0], r1[1][0], r2[1][0]) for r1, r2 in zip(shape_table(hd).rows, shape_table(late).rows) if r1 != r2]
    detail = f"shape tables equal={same_table}, outputs equal={same_out}; differing rows (name, dense in, late in): {diff}"
    assert report("degeneracy N=1 hyperdense == N=1 late", same_table and same_out, detail)


def test_reproducibility(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "d"), "--cases", "4", "--size", "32", "32", "--depth", "2"]) == 0
    manifest = {
        "network": {"num_streams": 2, "base_width": 4, "depth": 2, "input_spatial": [32, 32]},
        "train": {"epochs": 3, "decay_epoch": 2, "lr0": 0.001},
        "seed": 7,
    }
    cfg = tmp_path / "m.json"
    cfg.write_text(json.dumps(manifest))
    cols = []
    for run in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--data", str(tmp_path / "d"), "--out", str(tmp_path / run), "--quiet"]) == 0
        lines = (tmp_path / run / "log.csv").read_text().splitlines()
        cols.append([ln.split(",")[1] for ln in lines[1:]])
    ok = cols[0] == cols[1] and len(cols[0]) == 3
    assert report("reproducibility (bitwise loss column)", ok, f"run a {cols[0]} vs run b {cols[1]}")

"""Self-check suites covering the library's load-bearing invariants.

Each suite returns Check records; run_suites() bundles them into a
JSON-ready report.  The suites mirror what the test suite pins down, so a
deployed build can re-verify itself: factorized layers agree with their
dense matrices, identity disentanglers reduce a MERA layer to its tree,
gradients match finite differences, orthogonal initialization composes to
an orthogonal map, parameter accounting reproduces the published figures,
and multiply counts scale with the expected exponents.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .init import Rng, random_orthogonal
from .layers import (LayerSpec, build_layer, forward, init_graph,
                     multiply_count, to_dense, with_identity_disentanglers)
from .model import ModelConfig, build_model, toy_config

ORACLE_TOL = 1e-10
PRIMITIVE_TOL = 1e-5
MODEL_TOL = 1e-4
ORTHO_TOL = 1e-6
SLOPE_TOL = 0.1
GRAD_EPS = 1e-5


@dataclass
class Check:
    """One verified invariant: the measured metric against its tolerance."""

    name: str
    passed: bool
    metric: float
    tolerance: float
    detail: str
    seconds: float = 0.0


def _timed(fn):
    """Run a suite function and stamp elapsed seconds on its checks."""
    t0 = time.perf_counter()
    checks = fn()
    dt = time.perf_counter() - t0
    for c in checks:
        c.seconds = round(dt / max(len(checks), 1), 4)
    return checks


def _defect(q: np.ndarray) -> float:
    return float(np.abs(q.T @ q - np.eye(q.shape[1])).max())


# -- dense-matrix agreement ----------------------------------------------------------


def check_oracle_equivalence(seed: int = 0, cases: int = 100) -> list[Check]:
    """Random layers of every kind agree with their materialized matrix."""
    rng = np.random.default_rng(seed)
    kinds = ("mera", "tree", "tt")
    worst = {k: 0.0 for k in kinds}
    counts = {k: 0 for k in kinds}
    for _ in range(cases):
        kind = kinds[rng.integers(len(kinds))]
        d = int(rng.choice([2, 3]))
        big = int(rng.choice([1, 2, 3]))
        n = int(rng.choice([2, 4, 6, 8]))
        spec = LayerSpec(kind, n, mode_dim=d, bond_dim=big)
        g = init_graph(build_layer(spec), Rng(seed).split(counts[kind]),
                       scheme="gaussian")
        x = rng.standard_normal((3, spec.in_width))
        y = forward(g, x)
        ref = x @ to_dense(g).T
        scale = max(float(np.abs(ref).max()), 1e-30)
        worst[kind] = max(worst[kind], float(np.abs(y - ref).max()) / scale)
        counts[kind] += 1
    return [Check(name=f"{k}_oracle_equivalence",
                  passed=worst[k] <= ORACLE_TOL,
                  metric=worst[k], tolerance=ORACLE_TOL,
                  detail=f"max rel. error over {counts[k]} random layers")
            for k in kinds]


def check_identity_disentanglers(sizes=(4, 8, 12)) -> list[Check]:
    """MERA with identity disentanglers equals the plain tree exactly."""
    worst = 0.0
    for n in sizes:
        tree = init_graph(build_layer(LayerSpec("tree", n)), Rng(n),
                          scheme="gaussian")
        mera = build_layer(LayerSpec("mera", n))
        carried = [nd.node_id for nd in mera.nodes
                   if nd.role in ("tree", "final")]
        mera = mera.with_tensors(dict(zip(carried,
                                          (nd.tensor for nd in tree.nodes))))
        mera = with_identity_disentanglers(mera)
        diff = float(np.abs(to_dense(mera) - to_dense(tree)).max())
        worst = max(worst, diff)
    return [Check(name="identity_disentangler_reduction",
                  passed=worst == 0.0, metric=worst, tolerance=0.0,
                  detail=f"max abs. dense-matrix difference, n in {sizes}")]


# -- gradients -----------------------------------------------------------------------


def _primitive_cases() -> dict:
    """Scalar-loss builders for each differentiable primitive."""
    r = np.random.default_rng(11)
    x_im = r.standard_normal((2, 5, 5, 2))
    kern = r.standard_normal((3, 2, 3, 3))
    # distinct, well-separated entries keep maxpool argmaxes stable
    pool_in = (np.arange(32, dtype=np.float64).reshape(1, 4, 4, 2) ** 1.3
               + 0.05 * r.standard_normal((1, 4, 4, 2)))
    coef = r.standard_normal((1, 2, 2, 2))
    bn_x = r.standard_normal((3, 2, 2, 2))
    gamma, beta = r.standard_normal(2), r.standard_normal(2)
    mat_a, mat_b = r.standard_normal((3, 4)), r.standard_normal((4, 2))
    lr_x = np.where(np.abs(t := r.standard_normal((3, 4))) < 0.2,
                    t + 0.5, t)  # keep inputs away from the kink
    logits = r.standard_normal((4, 5))
    running = {"mean": np.zeros(2), "var": np.ones(2)}

    def scalar(v):
        return ad.vsum(ad.mul(v, v)) if v.value.ndim else v

    return {
        "matmul": ({"a": mat_a, "b": mat_b},
                   lambda t, v: ad.vsum(ad.mul(m := ad.matmul(v["a"],
                                           v["b"]), m))),
        "conv2d": ({"x": x_im, "w": kern},
                   lambda t, v: ad.vsum(ad.mul(c := nn.conv2d(v["x"],
                                           v["w"]), c))),
        "maxpool": ({"x": pool_in, "c": coef},
                    lambda t, v: ad.vsum(ad.mul(nn.maxpool(v["x"]),
                                                   v["c"]))),
        "batchnorm_train": ({"x": bn_x, "g": gamma, "b": beta},
                            lambda t, v: ad.vsum(ad.mul(
                                o := nn.batchnorm(v["x"], v["g"], v["b"],
                                                  dict(running), True), o))),
        "batchnorm_eval": ({"x": bn_x, "g": gamma, "b": beta},
                           lambda t, v: ad.vsum(ad.mul(
                               o := nn.batchnorm(v["x"], v["g"], v["b"],
                                                 dict(running), False), o))),
        "dropout": ({"x": x_im},
                    lambda t, v: ad.vsum(ad.mul(
                        o := nn.dropout(v["x"], 0.4, Rng(5), True), o))),
        "lrelu": ({"x": lr_x},
                  lambda t, v: ad.vsum(ad.mul(ad.lrelu(v["x"], 0.2),
                                                 v["x"]))),
        "softmax_xent": ({"z": logits},
                         lambda t, v: nn.softmax_xent(v["z"],
                                                      np.array([0, 3, 1, 4]))),
        "contract": ({"s": r.standard_normal((2, 3, 3)),
                      "n": r.standard_normal((3, 3, 4))},
                     lambda t, v: ad.vsum(ad.mul(
                         c := ad.contract(v["s"], [1, 2], v["n"], [0, 1]),
                         c))),
    }


def check_primitive_gradients() -> list[Check]:
    worst, worst_op = 0.0, "none"
    for op, (leaves, fn) in _primitive_cases().items():
        err = ad.gradcheck(fn, leaves, eps=GRAD_EPS)
        if err > worst:
            worst, worst_op = err, op
    return [Check(name="primitive_gradients",
                  passed=worst <= PRIMITIVE_TOL,
                  metric=worst, tolerance=PRIMITIVE_TOL,
                  detail=f"worst central-difference rel. error ({worst_op})")]


def _toy_model_gradient(head: str, seed: int) -> float:
    """Worst gradcheck ratio for one toy model.

    The default seed is pinned to a base point whose LReLU inputs sit
    well clear of the kink; finite differences graze a kink for some
    seeds and report errors around 1e-4 that say nothing about the
    adjoints.
    """
    cfg = toy_config(head)
    model = build_model(cfg)
    params = model.init_params(Rng(seed))
    running = model.fresh_running()
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, cfg.image_size, cfg.image_size,
                             cfg.in_channels))
    labels = np.array([0, 2])

    def fn(tape, v):
        lv = {k: v[k] for k in params}
        logits = model.forward(lv, v["__x__"], training=False,
                               running=running)
        return nn.softmax_xent(logits, labels)

    leaves = dict(params)
    leaves["__x__"] = x
    return ad.gradcheck(fn, leaves, eps=GRAD_EPS, seed=seed)


def check_model_gradients(heads=("fc1", "fc2", "mera", "tt"),
                          seed: int = 4) -> list[Check]:
    """End-to-end gradcheck of the eval-mode toy model for each head."""
    out = []
    for head in heads:
        err = _toy_model_gradient(head, seed)
        out.append(Check(name=f"{head}_model_gradient",
                         passed=err <= MODEL_TOL,
                         metric=err, tolerance=MODEL_TOL,
                         detail="central differences through the toy model"))
    return out


# -- initialization ------------------------------------------------------------------


def check_orthogonal_init(max_n: int = 64) -> list[Check]:
    rng = Rng(17)
    worst = max(_defect(random_orthogonal(n, rng.split(n)))
                for n in range(1, max_n + 1))
    head = build_model(ModelConfig(channels=(16,) * 5 + (64,), head="mera",
                                   dtype="float64"))
    g = head.head_graph_with(head.init_params(Rng(23)), layer=1)
    head_defect = _defect(to_dense(g))
    return [
        Check(name="random_orthogonal_defect",
              passed=worst <= ORTHO_TOL, metric=worst, tolerance=ORTHO_TOL,
              detail=f"max |Q^T Q - I| entry over n in 1..{max_n}"),
        Check(name="orthogonal_mera_head_dense",
              passed=head_defect <= ORTHO_TOL, metric=head_defect,
              tolerance=ORTHO_TOL,
              detail="square orthogonally-initialized head materializes "
                     "to an orthogonal matrix"),
    ]


# -- parameter accounting ------------------------------------------------------------

REFERENCE_FIGURES = (
    ("fc1", 10, "fc_layer", 17_040_000),
    ("fc2", 10, "fc_layer", 21_440),
    ("fc2", 10, "total", 318_080),
    ("fc1", 100, "fc_layer", 17_045_760),
    ("fc2", 100, "fc_layer", 48_000),
    ("fc2", 100, "total", 344_640),
)


def check_parameter_figures() -> list[Check]:
    reports = {(h, c): build_model(ModelConfig(head=h, classes=c)).param_report()
               for h in ("fc1", "fc2") for c in (10, 100)}
    misses = [f"{h}/{c} {key}: {reports[(h, c)][key]} != {want}"
              for h, c, key, want in REFERENCE_FIGURES
              if reports[(h, c)][key] != want]
    ratios = (reports[("fc1", 10)]["fc_layer"] / reports[("fc2", 10)]["fc_layer"],
              reports[("fc1", 100)]["fc_layer"] / reports[("fc2", 100)]["fc_layer"])
    sig3 = tuple(float(f"{r:.3g}") for r in ratios)
    mera = build_model(ModelConfig(head="mera")).param_report()["fc_layer"]
    tt = build_model(ModelConfig(head="tt")).param_report()["fc_layer"]
    ordered = mera < tt < reports[("fc2", 10)]["fc_layer"]
    return [
        Check(name="reference_param_figures", passed=not misses,
              metric=float(len(misses)), tolerance=0.0,
              detail="; ".join(misses) or "all six reference figures exact"),
        Check(name="compression_ratios", passed=sig3 == (795.0, 355.0),
              metric=sig3[0], tolerance=0.0,
              detail=f"dense/narrow layer ratios {sig3[0]:g} and {sig3[1]:g} "
                     f"(3 significant figures)"),
        Check(name="factorized_head_ordering", passed=ordered,
              metric=float(mera), tolerance=0.0,
              detail=f"mera {mera} < tt {tt} < fc2 "
                     f"{reports[('fc2', 10)]['fc_layer']}"),
    ]


# -- cost scaling --------------------------------------------------------------------


def _count_slope(kind: str, ns, **kw) -> tuple[float, list[int]]:
    counts = [multiply_count(build_layer(LayerSpec(kind, n, **kw)))
              for n in ns]
    slope = np.polyfit(list(ns), np.log2(counts), 1)[0]
    return float(slope), counts


def check_count_scaling() -> list[Check]:
    """Analytic multiply counts follow the expected log-log slopes."""
    spec = [("mera", range(4, 13, 2), {"mode_dim": 2, "bond_dim": 2}, 1.0),
            ("tt", range(4, 13), {"mode_dim": 2, "bond_dim": 3}, 1.0),
            ("dense", range(4, 13), {"mode_dim": 2}, 2.0)]
    out = []
    for kind, ns, kw, target in spec:
        slope, counts = _count_slope(kind, ns, **kw)
        out.append(Check(
            name=f"{kind}_count_slope",
            passed=abs(slope - target) <= SLOPE_TOL,
            metric=slope, tolerance=SLOPE_TOL,
            detail=f"target {target} +/- {SLOPE_TOL}; counts "
                   f"{counts[0]}..{counts[-1]} for widths 2^{ns[0]}..2^{ns[-1]}"))
    return out


# -- entry point ---------------------------------------------------------------------


def run_suites(seed: int = 0, quick: bool = False) -> dict:
    """Run every suite and bundle the results for serialization.

    quick=True trims the random-case counts so the whole run stays under
    a few seconds; the full run matches the acceptance-test workload.
    """
    cases = 24 if quick else 100
    heads = ("mera",) if quick else ("fc1", "fc2", "mera", "tt")
    max_n = 16 if quick else 64
    checks: list[Check] = []
    checks += _timed(lambda: check_oracle_equivalence(seed, cases))
    checks += _timed(check_identity_disentanglers)
    checks += _timed(check_primitive_gradients)
    checks += _timed(lambda: check_model_gradients(heads, seed=4))
    checks += _timed(lambda: check_orthogonal_init(max_n))
    checks += _timed(check_parameter_figures)
    checks += _timed(check_count_scaling)
    return {"passed": all(c.passed for c in checks),
            "seed": seed, "quick": quick,
            "checks": [asdict(c) for c in checks]}

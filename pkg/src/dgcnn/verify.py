"""Property suite: invariances, gradient checks and the k-NN oracle.

Each family returns one :class:`CheckResult` per check; ``run_suite`` runs
the requested families and ``format_table`` renders the pass/fail table the
CLI prints.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .edgeconv import Aggregation, EdgeConv, EdgeFunctionSpec, EdgeKind, asym_edge_feature, edgeconv_forward
from .graph import brute_force_order, knn_indices
from .models import ClassifierConfig, DGCNNClassifier
from .nn import DenseLayerParams
from .tensor import Tensor

FAMILIES = ("permutation", "translation", "pointnet", "gradient", "knn", "mlp")


@dataclass
class CheckResult:
    family: str
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _timed(family: str, name: str, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    t0 = time.perf_counter()
    ok, detail = fn()
    return CheckResult(family, name, bool(ok), detail, time.perf_counter() - t0)


def _randomize_bn(module, rng: np.random.Generator) -> None:
    """Give every batch-norm layer non-trivial statistics so eval mode is not the identity."""
    stack = [module]
    while stack:
        m = stack.pop()
        for v in vars(m).values():
            if isinstance(v, DenseLayerParams) and v.has_bn:
                C = v.bn_gamma.shape[0]
                v.bn_gamma.data = rng.uniform(0.5, 1.5, C) * rng.choice([-1.0, 1.0], C)
                v.bn_beta.data = rng.normal(0, 0.2, C)
                v.bn_running_mean.data = rng.normal(0, 0.3, C)
                v.bn_running_var.data = rng.uniform(0.5, 2.0, C)
            elif isinstance(v, list):
                stack.extend(c for c in v if hasattr(c, "named_tensors"))
            elif hasattr(v, "named_tensors"):
                stack.append(v)


# ----------------------------------------------------------------------------
# permutation


def permutation_checks(seed: int = 0, permutations: int = 100) -> list[CheckResult]:
    """Eval-mode logits must be bitwise identical under reordering of the input points."""
    rng = np.random.default_rng(seed)
    fixtures = {
        "dynamic": ClassifierConfig(k=8, edgeconv_widths=(16, 16, 32), embed_width=64, head_widths=(32,), num_classes=5),
        "static": ClassifierConfig(k=8, edgeconv_widths=(16, 32), embed_width=48, head_widths=(16,), num_classes=5,
                                   dynamic_graph=False),
        "transformer": ClassifierConfig(k=6, edgeconv_widths=(16, 16), embed_width=32, head_widths=(16,), num_classes=3,
                                        use_spatial_transformer=True),
    }
    out = []
    for label, cfg in fixtures.items():
        def check(cfg=cfg) -> tuple[bool, str]:
            with T.default_dtype(np.float64), T.strict_mode(True):
                model = DGCNNClassifier(cfg, rng)
                _randomize_bn(model, rng)
                if cfg.use_spatial_transformer:
                    model.transform.out.params.weight.data = rng.normal(0, 0.1, model.transform.out.params.weight.shape)
                pts = rng.normal(size=(48, 3))
                ref = model(pts).data
                for p in range(permutations):
                    perm = rng.permutation(pts.shape[0])
                    got = model(pts[perm]).data
                    if not np.array_equal(got, ref):
                        return False, f"permutation {p}: max |diff| {np.max(np.abs(got - ref)):.3e}"
            return True, f"{permutations} permutations bitwise equal"

        out.append(_timed("permutation", f"classifier logits ({label})", check))
    return out


# ----------------------------------------------------------------------------
# translation


def translation_checks(seed: int = 0, translations: int = 20, tol: float = 1e-9) -> list[CheckResult]:
    """With the absolute-position block zeroed, EdgeConv sees displacements only."""
    rng = np.random.default_rng(seed)
    out = []
    for depth in (1, 2):
        def check(depth=depth) -> tuple[bool, str]:
            with T.default_dtype(np.float64):
                F = 3
                conv = EdgeConv(F, [16] * depth, rng, EdgeFunctionSpec(EdgeKind.CENTRALIZED_ASYM), batch_norm=False)
                conv.mlp[0].params.weight.data[:F] = 0.0
                pts = rng.normal(size=(40, F))
                ref = conv(pts, knn_indices(pts, 8)).data
                worst = 0.0
                for _ in range(translations):
                    moved = pts + rng.uniform(-5, 5, size=F)
                    got = conv(moved, knn_indices(moved, 8)).data
                    worst = max(worst, float(np.max(np.abs(got - ref))))
            return worst <= tol, f"max |diff| {worst:.2e} over {translations} translations (tol {tol:g})"

        out.append(_timed("translation", f"centralized edge MLP, {depth} layer(s), absolute block zeroed", check))

    def control() -> tuple[bool, str]:
        # Sanity: with the absolute block active the output must move.
        with T.default_dtype(np.float64):
            conv = EdgeConv(3, [16], rng, EdgeFunctionSpec(EdgeKind.CENTRALIZED_ASYM), batch_norm=False)
            pts = rng.normal(size=(40, 3))
            moved = pts + 1.0
            diff = np.max(np.abs(conv(moved, knn_indices(moved, 8)).data - conv(pts, knn_indices(pts, 8)).data))
        return diff > 1e-6, f"max |diff| {diff:.2e} with the absolute block active"

    out.append(_timed("translation", "control: absolute block breaks invariance", control))
    return out


# ----------------------------------------------------------------------------
# point-independent reduction


def pointnet_checks(seed: int = 0, graphs: int = 10, tol: float = 1e-12) -> list[CheckResult]:
    """An edge function of ``x_i`` alone makes the output independent of the graph."""
    rng = np.random.default_rng(seed)
    out = []
    for agg in (Aggregation.MAX, Aggregation.SUM):
        def check(agg=agg) -> tuple[bool, str]:
            with T.default_dtype(np.float64):
                n, k, F = 30, 6, 5
                conv = EdgeConv(F, [12, 8], rng, EdgeFunctionSpec(EdgeKind.GLOBAL_ONLY), agg, batch_norm=False)
                x = rng.normal(size=(n, F))
                per_point = x
                for layer in conv.mlp:
                    per_point = layer(per_point).data
                expected = per_point if agg is Aggregation.MAX else k * per_point
                worst = 0.0
                for _ in range(graphs):
                    idx = rng.integers(0, n, size=(n, k))
                    got = conv(x, idx, materialize=True).data
                    worst = max(worst, float(np.max(np.abs(got - expected))))
            return worst <= tol, f"max |diff| {worst:.2e} across {graphs} random graphs (tol {tol:g})"

        out.append(_timed("pointnet", f"global-only edge function, {agg.value} aggregation", check))
    return out


# ----------------------------------------------------------------------------
# gradients


def _weighted_sum(y: Tensor, weights: np.ndarray) -> Tensor:
    z = T.mul(y, Tensor(weights, dtype=y.dtype))
    return T.sum_over_axis(T.reshape(z, (-1,)), axis=0)


def kink_free(f: Callable[[Tensor], Tensor], x: np.ndarray, step: float | Sequence[float]) -> bool:
    """True if moving any single coordinate by each of ``±step`` keeps every discrete choice of ``f``."""
    steps = [step] if np.isscalar(step) else list(step)
    def signature(v: np.ndarray):
        with T.Tape() as tape:
            f(Tensor(v, requires_grad=True, dtype=np.float64))
        return T.structure_signature(tape)

    base = signature(x)
    probe = np.array(x, dtype=np.float64)
    flat = probe.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        for delta in steps + [-s for s in steps]:
            flat[i] = orig + delta
            if not T.same_structure(signature(probe), base):
                return False
        flat[i] = orig
    return True


def _gap_ok(x: np.ndarray, axis: int, margin: float) -> bool:
    s = np.sort(x, axis=axis)
    return bool(np.all(np.diff(s, axis=axis) > margin))


@dataclass
class GradCase:
    name: str
    shape: tuple[int, ...]
    build: Callable[[np.random.Generator], Callable[[Tensor], Tensor]]
    sample: Callable[[np.random.Generator, tuple[int, ...]], np.ndarray] | None = None


def _coefficients(rng, shape):
    # Bounded away from zero so no output is weighted down to the difference noise floor.
    return rng.uniform(0.5, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _distinct(rng, shape, axis=-1, margin=1e-2):
    while True:
        x = rng.normal(size=shape)
        if _gap_ok(x, axis, margin):
            return x


def _bn_params(rng, C):
    p = DenseLayerParams.init(C, C, rng, bias=False, batch_norm=True)
    p.bn_gamma.data = rng.uniform(0.5, 1.5, C) * rng.choice([-1.0, 1.0], C)
    p.bn_beta.data = rng.normal(0, 0.5, C)
    p.bn_running_mean.data = rng.normal(0, 0.3, C)
    p.bn_running_var.data = rng.uniform(0.5, 2.0, C)
    return p


def _grad_cases() -> list[GradCase]:
    def weighted(apply, shape, rng):
        w = _coefficients(rng, apply(Tensor(np.zeros(shape), dtype=np.float64)).shape)
        return lambda x: _weighted_sum(apply(x), w)

    def unary(op, shape):
        return lambda rng: weighted(op, shape, rng)

    def binary(op, shape, other_shape, left=True):
        def build(rng):
            other = Tensor(rng.normal(size=other_shape), dtype=np.float64)
            return weighted((lambda x: op(x, other)) if left else (lambda x: op(other, x)), shape, rng)
        return build

    def bn(training):
        def build(rng):
            p = _bn_params(rng, 4)
            w = _coefficients(rng, (6, 4))
            return lambda x: _weighted_sum(T.batch_norm(x, p, training), w)
        return build

    def fused(training, slope):
        def build(rng):
            p = _bn_params(rng, 3)
            w = _coefficients(rng, (5, 3))
            return lambda x: _weighted_sum(T.edge_bn_act_max(x, p, slope, training), w)
        return build

    def gather(rng):
        idx = rng.integers(0, 6, size=(6, 3))
        w = _coefficients(rng, (6, 3, 2))
        return lambda x: _weighted_sum(T.gather_neighbors(x, idx), w)

    def dropout(rng):
        seed = int(rng.integers(1 << 30))
        w = _coefficients(rng, (4, 5))
        return lambda x: _weighted_sum(T.dropout(x, 0.6, True, np.random.default_rng(seed)), w)

    def xent(rng):
        labels = rng.integers(0, 5, size=4)
        return lambda x: T.softmax_cross_entropy(x, labels)

    def concat(rng):
        other = Tensor(rng.normal(size=(3, 2)), dtype=np.float64)
        w = _coefficients(rng, (3, 6))
        return lambda x: _weighted_sum(T.concat([x, other, x], axis=1), w)

    def edgeconv(kind):
        def build(rng):
            x0 = rng.normal(size=(10, 3))
            idx = knn_indices(x0, 4)
            conv = EdgeConv(3, [5, 4], rng, EdgeFunctionSpec(kind), batch_norm=True)
            w = _coefficients(rng, (10, 4))
            return lambda x: _weighted_sum(edgeconv_forward(x, idx, conv, training=True), w)
        return build

    def classifier(k, training):
        def build(rng):
            cfg = ClassifierConfig(k=k, edgeconv_widths=(16, 16), embed_width=16, head_widths=(8,), num_classes=3,
                                   dropout_keep=1.0)
            model = DGCNNClassifier(cfg, rng)
            if not training:
                _randomize_bn(model, rng)
            labels = rng.integers(0, 3, size=3 if training else 2)
            return lambda x: T.softmax_cross_entropy(model(x, training=training), labels)
        return build

    # Training mode, differentiated with respect to the first EdgeConv weights:
    # the gradient crosses every training-mode batch norm, the dynamic graph,
    # the global pool and the head.
    first_weights: list[np.ndarray] = []

    def classifier_weights(rng):
        cfg = ClassifierConfig(k=4, edgeconv_widths=(16, 16), embed_width=16, head_widths=(8,), num_classes=3,
                               dropout_keep=1.0)
        model = DGCNNClassifier(cfg, rng)
        params = model.convs[0].mlp[0].params
        points = rng.normal(size=(8, 8, 3))
        labels = rng.integers(0, 3, size=8)
        first_weights[:] = [params.weight.data.copy()]

        def f(w):
            saved = params.weight
            params.weight = w
            try:
                return T.softmax_cross_entropy(model(points, training=True), labels)
            finally:
                params.weight = saved
        return f

    return [
        GradCase("add (broadcast)", (3, 4), binary(T.add, (3, 4), (4,))),
        GradCase("sub", (3, 4), binary(T.sub, (3, 4), (3, 4), left=False)),
        GradCase("mul (broadcast)", (3, 4), binary(T.mul, (3, 4), (3, 1))),
        GradCase("scale", (3, 4), unary(lambda x: T.scale(x, -1.7), (3, 4))),
        GradCase("exp", (3, 4), unary(T.exp, (3, 4))),
        GradCase("matmul (left)", (2, 3, 4), binary(T.matmul, (2, 3, 4), (4, 5))),
        GradCase("matmul (right)", (4, 5), binary(T.matmul, (4, 5), (3, 4), left=False)),
        GradCase("matmul (batched)", (2, 3, 4), binary(T.matmul, (2, 3, 4), (2, 4, 2))),
        GradCase("leaky_relu", (4, 5), unary(lambda x: T.leaky_relu(x, 0.2), (4, 5)), _away_from_zero),
        GradCase("relu", (4, 5), unary(T.relu, (4, 5)), _away_from_zero),
        GradCase("batch_norm (train)", (6, 4), bn(True)),
        GradCase("batch_norm (eval)", (6, 4), bn(False)),
        GradCase("max_over_axis", (4, 6), unary(lambda x: T.max_over_axis(x, 1)[0], (4, 6)), _distinct),
        GradCase("sum_over_axis", (4, 6), unary(lambda x: T.sum_over_axis(x, 0), (4, 6))),
        GradCase("concat", (3, 2), concat),
        GradCase("slice_axis", (4, 6), unary(lambda x: T.slice_axis(x, 1, 4, axis=1), (4, 6))),
        GradCase("reshape", (4, 6), unary(lambda x: T.reshape(x, (2, 12)), (4, 6))),
        GradCase("expand", (4, 3), unary(lambda x: T.expand(x, 1, 5), (4, 3))),
        GradCase("gather_neighbors", (6, 2), gather),
        GradCase("dropout", (4, 5), dropout),
        GradCase("softmax_cross_entropy", (4, 5), xent),
        GradCase("edge_bn_act_max (train)", (5, 4, 3), fused(True, 0.2), lambda r, s: _distinct(r, s, axis=1)),
        GradCase("edge_bn_act_max (eval)", (5, 4, 3), fused(False, 0.2), lambda r, s: _distinct(r, s, axis=1)),
        GradCase("edgeconv (centralized)", (10, 3), edgeconv(EdgeKind.CENTRALIZED_ASYM)),
        GradCase("edgeconv (local only)", (10, 3), edgeconv(EdgeKind.LOCAL_ONLY)),
        GradCase("classifier loss (eval)", (2, 12, 3), classifier(4, False)),
        GradCase("classifier loss (train)", (6, 16), classifier_weights, lambda r, s: first_weights[0]),
    ]


def gradient_checks(seed: int = 0, seeds: int = 10, tol: float = 1e-6, step: float = 1e-5,
                    exclusion: float = 1e-4, floor: float = 1e-4, max_draws: int = 100) -> list[CheckResult]:
    """Tape gradients against central differences at ``seeds`` usable draws per case.

    A draw is usable when perturbing any coordinate by the finite difference
    step or by ``exclusion`` changes no max, tie or activation sign, and when
    every nonzero central difference is at least ``floor * max(|f|, 1)``.
    Rounding in ``f`` contributes roughly ``eps * |f| / step`` to each
    difference quotient; below the floor that alone exceeds ``tol`` relative
    error, so the quotient cannot serve as an oracle. The floor is tested on
    the numeric side only, so a wrong analytic gradient is never skipped.
    """
    out = []
    for case in _grad_cases():
        def check(case=case) -> tuple[bool, str]:
            rng = np.random.default_rng([seed, sum(map(ord, case.name))])
            worst, used, skipped, faint = 0.0, 0, 0, 0
            with T.default_dtype(np.float64):
                while used < seeds:
                    if used + skipped + faint >= max_draws:
                        return False, f"only {used} kink-free draws out of {max_draws}"
                    f = case.build(rng)
                    x = case.sample(rng, case.shape) if case.sample else rng.normal(size=case.shape)
                    if not kink_free(f, x, (step, exclusion / 2, exclusion)):
                        skipped += 1
                        continue
                    err, _, numeric = T.grad_check_detail(f, x, step)
                    magnitude = np.abs(numeric)
                    scale = max(abs(f(Tensor(x, dtype=np.float64)).item()), 1.0)
                    if np.any((magnitude > 0) & (magnitude < floor * scale)):
                        faint += 1
                        continue
                    worst = max(worst, err)
                    used += 1
            note = f", {skipped} draw(s) near a kink skipped" if skipped else ""
            note += f", {faint} draw(s) below the difference floor skipped" if faint else ""
            return worst < tol, f"max rel err {worst:.2e} over {used} seeds{note}"

        out.append(_timed("gradient", case.name, check))
    return out


# ----------------------------------------------------------------------------
# k-NN oracle


def _oracle_fixtures(rng: np.random.Generator, count: int, max_n: int) -> Iterable[tuple[str, np.ndarray]]:
    for s in range(count):
        n = s + 1 if s < max_n else int(rng.integers(1, max_n + 1))
        f = int(rng.choice([1, 2, 3, 5]))
        if s % 3 == 2:
            # Integer grid coordinates make exact distance ties common.
            yield f"grid n={n} f={f}", rng.integers(0, 4, size=(n, f)).astype(np.float64)
        else:
            yield f"gauss n={n} f={f}", rng.normal(size=(n, f))


def knn_checks(seed: int = 0, point_sets: int = 100, max_n: int = 64) -> list[CheckResult]:
    """Every valid ``k`` and both self-loop settings against a brute-force sort."""
    rng = np.random.default_rng(seed)

    def oracle() -> tuple[bool, str]:
        tables = 0
        for label, x in _oracle_fixtures(rng, point_sets, max_n):
            n = x.shape[0]
            for self_loop in (True, False):
                order = brute_force_order(x, self_loop)
                for k in range(1, (n if self_loop else n - 1) + 1):
                    got = knn_indices(x, k, self_loop)
                    tables += 1
                    if not np.array_equal(got, order[:, :k]):
                        row = int(np.flatnonzero((got != order[:, :k]).any(axis=1))[0])
                        return False, (f"{label}, k={k}, self_loop={self_loop}: row {row} "
                                       f"got {got[row].tolist()} expected {order[row, :k].tolist()}")
        return True, f"{tables} neighbor tables over {point_sets} point sets match"

    def batched() -> tuple[bool, str]:
        x = rng.normal(size=(4, 20, 3))
        together = knn_indices(x, 5)
        apart = np.stack([knn_indices(c, 5) for c in x])
        return np.array_equal(together, apart), "batched construction equals per-cloud construction"

    return [_timed("knn", "brute-force oracle, n <= %d" % max_n, oracle), _timed("knn", "batched", batched)]


# ----------------------------------------------------------------------------
# shared MLP vs per-edge reference


def mlp_checks(seed: int = 0, edges: int = 1000, tol: float = 1e-12) -> list[CheckResult]:
    """The shared-weight layer applied to an edge equals the per-channel reference formula."""
    rng = np.random.default_rng(seed)
    out = []
    for materialize in (False, True):
        def check(materialize=materialize) -> tuple[bool, str]:
            with T.default_dtype(np.float64):
                F, M = 4, 7
                conv = EdgeConv(F, [M], rng, EdgeFunctionSpec(EdgeKind.CENTRALIZED_ASYM), slope=0.0, batch_norm=False,
                                bias=False)
                w = conv.mlp[0].params.weight.data
                phi, theta = w[:F].T, w[F:].T
                x = rng.normal(size=(edges, F))
                # One neighbor per point turns the aggregation into the identity on edges.
                nbr = rng.integers(0, edges, size=(edges, 1))
                got = conv(x, nbr, materialize=materialize).data
                want = np.stack([asym_edge_feature(x[i], x[nbr[i, 0]], theta, phi) for i in range(edges)])
            err = float(np.max(np.abs(got - want)))
            return err <= tol, f"max |diff| {err:.2e} over {edges} edges (tol {tol:g})"

        label = "materialized edge inputs" if materialize else "factorized first layer"
        out.append(_timed("mlp", label, check))
    return out


# ----------------------------------------------------------------------------
# runner

_RUNNERS = {
    "permutation": permutation_checks,
    "translation": translation_checks,
    "pointnet": pointnet_checks,
    "gradient": gradient_checks,
    "knn": knn_checks,
    "mlp": mlp_checks,
}


def run_suite(families: Iterable[str] | None = None, seed: int = 0) -> list[CheckResult]:
    chosen = list(FAMILIES) if families is None else list(families)
    unknown = [f for f in chosen if f not in _RUNNERS]
    if unknown:
        raise ValueError(f"unknown famil{'y' if len(unknown) == 1 else 'ies'} {unknown}; known: {list(FAMILIES)}")
    results = []
    for fam in chosen:
        results.extend(_RUNNERS[fam](seed=seed))
    return results


def format_table(results: list[CheckResult]) -> str:
    rows = [("family", "check", "result", "seconds", "detail")]
    for r in results:
        rows.append((r.family, r.name, "PASS" if r.passed else "FAIL", f"{r.seconds:.2f}", r.detail))
    widths = [max(len(row[i]) for row in rows) for i in range(4)]
    lines = []
    for row in rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row[:4], widths)) + "  " + row[4])
    return "\n".join(lines)

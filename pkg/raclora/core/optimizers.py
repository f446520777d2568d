"""Chain-of-LoRA optimizers on a matrix parameter W.

``run_chain`` drives every method: the randomized asymmetric chain with GD,
Random Reshuffling or SGD inner solvers, plus the joint LoRA, COLA,
asymmetric LoRA and full-parameter baselines used for comparison. Each
chain step produces one :class:`TraceRecord` describing W^t before its update.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import DivergenceDetected, InvalidConfig, ShapeError, Unsupported
from .linalg import as_matrix, frobenius_inner, frobenius_norm_sq, pseudo_inverse
from .objectives import Objective, infimum, sample_infima
from .sketch import Projector, SketchSide, SketchSpec, build_projector, enum_member, sample_sketch

logger = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 1e6
DESCENT_TOL = 1e-9


class InnerSolver(str, Enum):
    GD = "gd"
    RR = "rr"
    SGD = "sgd"


class Method(str, Enum):
    RAC_LORA = "rac_lora"
    JOINT_LORA = "joint_lora"
    COLA = "cola"
    ASYMM_LORA = "asymm_lora"
    FPFT = "fpft"


@dataclass(frozen=True)
class ChainConfig:
    """Hyperparameters of one chain run."""

    chain_length: int
    step_gamma: float
    sketch: SketchSpec
    inner: InnerSolver = InnerSolver.GD
    seed: int = 0
    method: Method = Method.RAC_LORA
    inner_steps: int = 1
    sgd_sampler: str = "uniform"
    sgd_batch: int = 1

    def __post_init__(self):
        inner = enum_member(InnerSolver, self.inner, "inner solver", InvalidConfig)
        object.__setattr__(self, "inner", inner)
        method = enum_member(Method, self.method, "method", InvalidConfig)
        object.__setattr__(self, "method", method)
        if self.chain_length < 1:
            raise InvalidConfig(f"chain_length must be >= 1, got {self.chain_length}")
        if not self.step_gamma > 0:
            raise InvalidConfig(f"step_gamma must be positive, got {self.step_gamma}")
        if self.inner_steps < 1:
            raise InvalidConfig(f"inner_steps must be >= 1, got {self.inner_steps}")
        if self.sgd_batch < 1:
            raise InvalidConfig(f"sgd_batch must be >= 1, got {self.sgd_batch}")
        if self.sgd_sampler not in SAMPLERS:
            raise InvalidConfig(
                f"Unknown sgd_sampler '{self.sgd_sampler}', expected one of {sorted(SAMPLERS)}"
            )
        if not 0 <= self.seed < 2**64:
            raise InvalidConfig(f"seed must be a non-negative 64-bit integer, got {self.seed}")

    @property
    def eta(self) -> float:
        """Learning rate of the trainable factor: gamma = (alpha / r) * eta."""
        return self.step_gamma / self.sketch.scale

    @property
    def lambda_min(self) -> float:
        if self.method is Method.FPFT:
            return 1.0
        return self.sketch.closed_form_lambda_min


@dataclass
class ChainState:
    w: np.ndarray
    rng: np.random.Generator
    t: int = 0
    f_initial: float = 0.0
    a: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    # f at the current iterate (W + (alpha / r) B A with factors), once evaluated
    f_value: Optional[float] = None

    @classmethod
    def start(cls, obj: Objective, w0: np.ndarray, seed: int) -> "ChainState":
        w0 = as_matrix(w0, "W0")
        if w0.shape != obj.shape:
            raise ShapeError(f"W0 has shape {w0.shape}, objective expects {obj.shape}")
        f0 = obj.value(w0)
        return cls(w=w0.copy(), rng=np.random.default_rng(seed), f_initial=f0, f_value=f0)

    def composite(self, scale: float) -> np.ndarray:
        """W + (alpha / r) B A when LoRA factors are attached, else W."""
        if self.a is None or self.b is None:
            return self.w
        return self.w + scale * (self.b @ self.a)


@dataclass(frozen=True)
class AbcConstants:
    """E||g||^2 <= 2 A (f - f_inf) + B ||grad f||^2 + C."""

    a1: float
    b1: float
    c1: float

    def __post_init__(self):
        if min(self.a1, self.b1, self.c1) < 0:
            raise InvalidConfig(f"ABC constants must be non-negative, got {self}")


@dataclass(frozen=True)
class TraceRecord:
    t: int
    f_value: float
    grad_norm_sq: float
    gap: Optional[float]
    seed: int
    method: str
    proj_grad_norm_sq: Optional[float] = None
    diverged: bool = False


@dataclass
class ChainRun:
    records: List[TraceRecord]
    output_index: int
    final_w: np.ndarray
    diverged: bool
    method: Method
    seed: int

    @property
    def final(self) -> TraceRecord:
        return self.records[-1]


@dataclass(frozen=True)
class RateReport:
    lambda_min: float
    steps: int
    min_grad_norm_sq: float
    avg_grad_norm_sq: float
    grad_norm_bound: Optional[float]
    rate_bound: Optional[float]
    rate_fitted: Optional[float]
    gap_bound_violations: int
    descent_checked: int
    descent_violations: int
    notes: Tuple[str, ...] = field(default_factory=tuple)

    @property
    def grad_bound_holds(self) -> Optional[bool]:
        if self.grad_norm_bound is None:
            return None
        return self.min_grad_norm_sq <= self.grad_norm_bound

    @property
    def rate_holds(self) -> Optional[bool]:
        if self.rate_bound is None or self.rate_fitted is None:
            return None
        return self.rate_fitted <= self.rate_bound and self.gap_bound_violations == 0

    @property
    def descent_holds(self) -> bool:
        return self.descent_violations == 0


# -- stochastic gradient samplers ---------------------------------------------------

GradientSampler = Callable[[Objective, np.ndarray, np.random.Generator, int], np.ndarray]


def uniform_sampler(obj: Objective, w: np.ndarray, rng: np.random.Generator, batch: int = 1):
    """Average of ``batch`` uniformly drawn per-sample gradients."""
    if batch == 1:
        return obj.sample_gradient(w, int(rng.integers(obj.sample_count)))
    idx = rng.integers(obj.sample_count, size=batch)
    return np.mean([obj.sample_gradient(w, int(i)) for i in idx], axis=0)


def full_gradient_sampler(obj: Objective, w: np.ndarray, rng: np.random.Generator, batch: int = 1):
    return obj.gradient(w)


SAMPLERS: Dict[str, GradientSampler] = {
    "uniform": uniform_sampler,
    "full": full_gradient_sampler,
}


def uniform_sampling_abc(obj: Objective) -> AbcConstants:
    """ABC constants valid for single-sample uniform sampling.

    Uses ||grad f_i||^2 <= 2 L_i (f_i - f_i^*), giving A = L_max, B = 0 and
    C = 2 L_max (f^* - mean_i f_i^*).
    """
    if obj.sample_count == 1:
        return AbcConstants(0.0, 1.0, 0.0)
    l_max = obj.max_sample_smoothness()
    spread = max(infimum(obj) - float(np.mean(sample_infima(obj))), 0.0)
    return AbcConstants(l_max, 0.0, 2.0 * l_max * spread)


def abc_residual(
    obj: Objective, abc: AbcConstants, w: np.ndarray, sampler: str = "uniform"
) -> float:
    """RHS minus LHS of the expected-smoothness bound at ``w`` (>= 0 when it holds).

    The second moment is computed exactly by enumerating the samples.
    """
    if sampler == "full" or obj.sample_count == 1:
        second_moment = frobenius_norm_sq(obj.gradient(w))
    else:
        grads = obj.sample_gradients(w)
        second_moment = float(np.sum(grads * grads) / obj.sample_count)
    f_gap = obj.value(w) - infimum(obj)
    rhs = 2.0 * abc.a1 * f_gap + abc.b1 * frobenius_norm_sq(obj.gradient(w)) + abc.c1
    return rhs - second_moment


def sgd_step_bound(
    abc: AbcConstants,
    smoothness_l: float,
    lambda_min: float,
    lambda_max: float,
    pl_mu: Optional[float] = None,
    chain_length: Optional[int] = None,
) -> float:
    """Largest SGD step allowed by the non-convex (or, with ``pl_mu``, PL) theorem."""
    ratio = lambda_max / lambda_min
    bounds = []
    if abc.b1 > 0:
        bounds.append(1.0 / (smoothness_l * abc.b1 * ratio))
    if abc.a1 > 0:
        if pl_mu is not None:
            bounds.append(pl_mu / (2.0 * abc.a1 * smoothness_l * ratio))
        elif chain_length:
            bounds.append(1.0 / math.sqrt(smoothness_l * abc.a1 * lambda_max * chain_length))
    if not bounds:
        return 1.0 / smoothness_l
    return min(bounds)


def rr_rate_condition(lambda_min: float, lambda_max: float) -> float:
    """1 - lambda_max[E(I - H)] - lambda_max^H / 4; the RR PL rate needs it positive."""
    return 1.0 - (1.0 - lambda_min) - 0.25 * lambda_max


def default_step_size(
    obj: Objective,
    method: Method,
    inner: InnerSolver,
    sketch: SketchSpec,
    chain_length: Optional[int] = None,
) -> float:
    """1/L for GD-type methods, 1/(2LN) for RR, the SGD theorem bound for SGD."""
    if obj.smoothness_l is None:
        raise Unsupported(f"No smoothness constant known for {obj.kind} objective")
    method = enum_member(Method, method, "method", InvalidConfig)
    inner = enum_member(InnerSolver, inner, "inner solver", InvalidConfig)
    if method is Method.RAC_LORA and inner is InnerSolver.RR:
        return 1.0 / (2.0 * obj.smoothness_l * obj.sample_count)
    if method is Method.RAC_LORA and inner is InnerSolver.SGD:
        return sgd_step_bound(
            uniform_sampling_abc(obj),
            obj.smoothness_l,
            sketch.closed_form_lambda_min,
            sketch.closed_form_lambda_max,
            pl_mu=obj.pl_mu,
            chain_length=chain_length,
        )
    return 1.0 / obj.smoothness_l


# -- single steps -----------------------------------------------------------------


def permutation_stream(seed: int, block: int, client_id: int = 0) -> np.random.Generator:
    """Stream for the data permutation of one RR epoch."""
    return np.random.default_rng([seed, block, client_id])


def epoch_permutation(seed: int, block: int, n: int, client_id: int = 0) -> np.ndarray:
    return permutation_stream(seed, block, client_id).permutation(n)


def solve_subproblem_closed_form(sketch_matrix, grad, eta: float, side) -> np.ndarray:
    """Minimizer of the smoothness upper bound in the trainable factor.

    Left:  A_hat = -eta (B^T B)^+ B^T grad     (r x n)
    Right: B_hat = -eta grad A^T (A A^T)^+     (m x r)
    """
    side = enum_member(SketchSide, side, "sketch side")
    s = as_matrix(sketch_matrix, "sketch")
    g = np.asarray(grad, dtype=np.float64)
    if not eta > 0:
        raise InvalidConfig(f"eta must be positive, got {eta}")
    if side is SketchSide.LEFT:
        if s.shape[0] != g.shape[0]:
            raise ShapeError(f"Left sketch {s.shape} does not match gradient {g.shape}")
        return -eta * pseudo_inverse(s.T @ s) @ (s.T @ g)
    if s.shape[1] != g.shape[1]:
        raise ShapeError(f"Right sketch {s.shape} does not match gradient {g.shape}")
    return -eta * (g @ s.T) @ pseudo_inverse(s @ s.T)


def merge_factor(w: np.ndarray, sketch_matrix: np.ndarray, factor: np.ndarray, scale: float, side):
    """W + (alpha / r) B_S A_hat (Left) or W + (alpha / r) B_hat A_S (Right)."""
    if enum_member(SketchSide, side, "sketch side") is SketchSide.LEFT:
        return w + scale * (sketch_matrix @ factor)
    return w + scale * (factor @ sketch_matrix)


def _divergence_limit(f_initial: float) -> float:
    return DIVERGENCE_FACTOR * abs(f_initial) + DIVERGENCE_FACTOR


def check_divergence(obj: Objective, w: np.ndarray, t: int, f_initial: float) -> float:
    """f(W), or DivergenceDetected on non-finite W or f above 1e6 |f(W^0)| + 1e6."""
    if not np.all(np.isfinite(w)):
        raise DivergenceDetected(t, float("nan"))
    f_value = obj.value(w)
    if not math.isfinite(f_value) or f_value > _divergence_limit(f_initial):
        raise DivergenceDetected(t, f_value)
    return f_value


def _check_step(
    obj: Objective, w: np.ndarray, t: int, f_initial: float, record: TraceRecord
) -> float:
    try:
        return check_divergence(obj, w, t, f_initial)
    except DivergenceDetected as exc:
        exc.record = record
        raise


def _record(
    obj: Objective,
    w: np.ndarray,
    t: int,
    cfg: ChainConfig,
    grad: Optional[np.ndarray] = None,
    projector: Optional[Projector] = None,
    f_value: Optional[float] = None,
    projected: Optional[np.ndarray] = None,
) -> TraceRecord:
    """Record of W^t; ``projected`` is H grad f(W^t) when the caller has it."""
    if grad is None:
        grad = obj.gradient(w)
    if f_value is None:
        f_value = obj.value(w)
    if projected is None and projector is not None:
        projected = projector.apply(grad)
    proj = None if projected is None else frobenius_inner(grad, projected)
    return TraceRecord(
        t=t,
        f_value=f_value,
        grad_norm_sq=frobenius_norm_sq(grad),
        gap=None if obj.optimum_value is None else f_value - obj.optimum_value,
        seed=cfg.seed,
        method=cfg.method.value,
        proj_grad_norm_sq=proj,
    )


def _projected_gd_block(
    state: ChainState, obj: Objective, cfg: ChainConfig, projector: Projector
) -> Tuple[ChainState, TraceRecord]:
    grad = obj.gradient(state.w)
    projected = projector.apply(grad)
    record = _record(obj, state.w, state.t, cfg, grad=grad, f_value=state.f_value, projected=projected)
    w = state.w - cfg.step_gamma * projected
    for _ in range(cfg.inner_steps - 1):
        w = w - cfg.step_gamma * projector.apply(obj.gradient(w))
    f_value = _check_step(obj, w, state.t + 1, state.f_initial, record)
    return replace(state, w=w, t=state.t + 1, f_value=f_value), record


def rac_gd_step(state: ChainState, obj: Objective, cfg: ChainConfig) -> Tuple[ChainState, TraceRecord]:
    """Fresh sketch, then W <- W - gamma H grad f(W) (``inner_steps`` times)."""
    projector = build_projector(sample_sketch(cfg.sketch, state.rng), cfg.sketch.side)
    return _projected_gd_block(state, obj, cfg, projector)


def rac_rr_epoch(
    state: ChainState,
    obj: Objective,
    cfg: ChainConfig,
    permutation: Optional[Sequence[int]] = None,
) -> Tuple[ChainState, TraceRecord]:
    """One sketch, one pass over the samples in a uniformly shuffled order."""
    projector = build_projector(sample_sketch(cfg.sketch, state.rng), cfg.sketch.side)
    if permutation is None:
        permutation = epoch_permutation(cfg.seed, state.t, obj.sample_count)
    record = _record(obj, state.w, state.t, cfg, projector=projector, f_value=state.f_value)
    w = state.w
    for i in permutation:
        w = w - cfg.step_gamma * projector.apply(obj.sample_gradient(w, int(i)))
    f_value = _check_step(obj, w, state.t + 1, state.f_initial, record)
    return replace(state, w=w, t=state.t + 1, f_value=f_value), record


def rac_sgd_step(state: ChainState, obj: Objective, cfg: ChainConfig) -> Tuple[ChainState, TraceRecord]:
    """One sketch, ``inner_steps`` projected stochastic gradient steps."""
    projector = build_projector(sample_sketch(cfg.sketch, state.rng), cfg.sketch.side)
    sampler = SAMPLERS[cfg.sgd_sampler]
    record = _record(obj, state.w, state.t, cfg, projector=projector, f_value=state.f_value)
    w = state.w
    for _ in range(cfg.inner_steps):
        w = w - cfg.step_gamma * projector.apply(sampler(obj, w, state.rng, cfg.sgd_batch))
    f_value = _check_step(obj, w, state.t + 1, state.f_initial, record)
    return replace(state, w=w, t=state.t + 1, f_value=f_value), record


def fpft_step(state: ChainState, obj: Objective, cfg: ChainConfig) -> Tuple[ChainState, TraceRecord]:
    """Plain gradient descent on W."""
    grad = obj.gradient(state.w)
    record = _record(obj, state.w, state.t, cfg, grad=grad, f_value=state.f_value)
    record = replace(record, proj_grad_norm_sq=record.grad_norm_sq)
    w = state.w - cfg.step_gamma * grad
    f_value = _check_step(obj, w, state.t + 1, state.f_initial, record)
    return replace(state, w=w, t=state.t + 1, f_value=f_value), record


def joint_lora_step(
    state: ChainState, obj: Objective, eta: float, alpha: float, r: int
) -> ChainState:
    """Simultaneous update of both LoRA factors; W itself stays frozen."""
    if state.a is None or state.b is None:
        raise InvalidConfig("Joint LoRA step needs factor matrices A and B on the state")
    scale = alpha / r
    grad = obj.gradient(state.composite(scale))
    a = state.a - eta * scale * (state.b.T @ grad)
    b = state.b - eta * scale * (grad @ state.a.T)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise DivergenceDetected(state.t + 1, float("nan"))
    new_state = replace(state, a=a, b=b, t=state.t + 1)
    f_value = check_divergence(obj, new_state.composite(scale), new_state.t, state.f_initial)
    return replace(new_state, f_value=f_value)


def _init_factors(state: ChainState, spec: SketchSpec) -> ChainState:
    """Standard LoRA initialization: A Gaussian, B zero."""
    a = state.rng.standard_normal((spec.rank, spec.target_cols))
    b = np.zeros((spec.target_rows, spec.rank))
    return replace(state, a=a, b=b)


# -- chain driver -----------------------------------------------------------------


def _warn_step_size(obj: Objective, cfg: ChainConfig) -> None:
    if obj.smoothness_l is None:
        return
    limit = 1.0 / obj.smoothness_l
    if cfg.method is Method.RAC_LORA and cfg.inner is InnerSolver.RR:
        limit = 1.0 / (2.0 * obj.smoothness_l * obj.sample_count)
        condition = rr_rate_condition(cfg.lambda_min, cfg.sketch.closed_form_lambda_max)
        if condition <= 0:
            logger.debug(f"RR rate condition is {condition:.4g}; the PL rate bound does not apply")
    if cfg.step_gamma > limit * (1.0 + 1e-12):
        logger.warning(
            f"step_gamma={cfg.step_gamma:.4g} exceeds the theoretical limit {limit:.4g} "
            f"for {cfg.method.value}/{cfg.inner.value}"
        )


def _run_joint(state: ChainState, obj: Objective, cfg: ChainConfig, records: List[TraceRecord]):
    spec = cfg.sketch
    state = _init_factors(state, spec)
    try:
        for _ in range(cfg.chain_length):
            w = state.composite(spec.scale)
            records.append(_record(obj, w, state.t, cfg, f_value=state.f_value))
            state = joint_lora_step(state, obj, cfg.eta, spec.alpha, spec.rank)
    except DivergenceDetected as exc:
        exc.state = state
        raise
    return replace(state, w=state.composite(spec.scale), a=None, b=None)


def _run_cola(state: ChainState, obj: Objective, cfg: ChainConfig, records: List[TraceRecord]):
    spec = cfg.sketch
    try:
        for _ in range(cfg.chain_length):
            state = _init_factors(state, spec)
            for _ in range(cfg.inner_steps):
                w = state.composite(spec.scale)
                records.append(_record(obj, w, state.t, cfg, f_value=state.f_value))
                state = joint_lora_step(state, obj, cfg.eta, spec.alpha, spec.rank)
            state = replace(state, w=state.composite(spec.scale), a=None, b=None)
    except DivergenceDetected as exc:
        exc.state = state
        raise
    return state


def _run_asymm(state: ChainState, obj: Objective, cfg: ChainConfig, records: List[TraceRecord]):
    projector = build_projector(sample_sketch(cfg.sketch, state.rng), cfg.sketch.side)
    single = replace(cfg, inner_steps=1)
    try:
        for _ in range(cfg.chain_length):
            state, record = _projected_gd_block(state, obj, single, projector)
            records.append(record)
    except DivergenceDetected as exc:
        exc.state = state
        raise
    return state, projector


_CHAIN_STEPS = {
    InnerSolver.GD: rac_gd_step,
    InnerSolver.RR: rac_rr_epoch,
    InnerSolver.SGD: rac_sgd_step,
}


def run_chain(obj: Objective, cfg: ChainConfig, w0: np.ndarray) -> ChainRun:
    """Run ``cfg.method`` from ``w0`` and return the full trace.

    Divergence does not raise: the trace ends with a record flagged
    ``diverged``. The uniformly random output index is drawn from the run's
    own stream after the loop.
    """
    state = ChainState.start(obj, w0, cfg.seed)
    if cfg.sketch.target_rows != obj.param_rows or cfg.sketch.target_cols != obj.param_cols:
        raise InvalidConfig(
            f"Sketch targets {cfg.sketch.target_rows}x{cfg.sketch.target_cols}, "
            f"objective has shape {obj.shape}"
        )
    _warn_step_size(obj, cfg)
    logger.debug(
        f"Starting {cfg.method.value} (inner={cfg.inner.value}, T={cfg.chain_length}, "
        f"gamma={cfg.step_gamma:.4g}, r={cfg.sketch.rank}, seed={cfg.seed})"
    )
    records: List[TraceRecord] = []
    final_projector = None
    diverged = False
    try:
        if cfg.method is Method.JOINT_LORA:
            state = _run_joint(state, obj, cfg, records)
        elif cfg.method is Method.COLA:
            state = _run_cola(state, obj, cfg, records)
        elif cfg.method is Method.ASYMM_LORA:
            state, final_projector = _run_asymm(state, obj, cfg, records)
        else:
            step = fpft_step if cfg.method is Method.FPFT else _CHAIN_STEPS[cfg.inner]
            for _ in range(cfg.chain_length):
                state, record = step(state, obj, cfg)
                records.append(record)
        records.append(
            _record(obj, state.w, state.t, cfg, projector=final_projector, f_value=state.f_value)
        )
    except DivergenceDetected as exc:
        diverged = True
        if exc.state is not None:
            state = exc.state
        if exc.record is not None:
            records.append(exc.record)
        logger.info(f"{cfg.method.value} seed={cfg.seed} diverged at step {exc.t} (f={exc.f_value})")
        records.append(
            TraceRecord(
                t=exc.t,
                f_value=exc.f_value,
                grad_norm_sq=math.inf,
                gap=None,
                seed=cfg.seed,
                method=cfg.method.value,
                diverged=True,
            )
        )
    candidates = max(len(records) - 1, 1)
    output_index = int(state.rng.integers(candidates))
    logger.debug(
        f"Finished {cfg.method.value} seed={cfg.seed}: f={records[-1].f_value:.6g}, "
        f"||grad||^2={records[-1].grad_norm_sq:.3e}"
    )
    return ChainRun(
        records=records,
        output_index=output_index,
        final_w=state.composite(cfg.sketch.scale),
        diverged=diverged,
        method=cfg.method,
        seed=cfg.seed,
    )


# -- convergence diagnostics -----------------------------------------------------


def _fit_rate(gaps: np.ndarray, floor: float) -> Optional[float]:
    """Geometric rate of the gap sequence, fitted on entries above ``floor``."""
    usable = np.flatnonzero(gaps > floor)
    if usable.size < 2:
        return None
    last = usable[-1]
    # stop at the first time the gap reaches the floor
    below = np.flatnonzero(gaps[: last + 1] <= floor)
    if below.size:
        last = below[0] - 1
    if last < 1:
        return None
    ts = np.arange(last + 1)
    slope = np.polyfit(ts, np.log(gaps[: last + 1]), 1)[0]
    return float(np.exp(slope))


def theorem_rate_check(
    trace: Sequence[TraceRecord], obj: Objective, cfg: ChainConfig
) -> RateReport:
    """Compare a trace against the GD-chain theorems.

    (i) min ||grad||^2 against 2 (f(W^0) - f^*) / (lambda gamma T);
    (ii) geometric fit of the gap against (1 - gamma mu lambda)^t;
    (iii) per-step descent f(W^{t+1}) <= f(W^t) - gamma/2 <grad, H grad> + 1e-9.
    Violations are reported, never raised.
    """
    records = [r for r in trace if not r.diverged]
    steps = max(len(records) - 1, 0)
    lam = cfg.lambda_min
    gamma = cfg.step_gamma
    notes = []

    f_star = obj.optimum_value
    if f_star is None:
        try:
            f_star = infimum(obj)
        except Unsupported:
            notes.append("f* unavailable")

    grad_sq = np.array([r.grad_norm_sq for r in records[:steps]]) if steps else np.array([math.inf])
    grad_norm_bound = None
    if f_star is not None and steps:
        grad_norm_bound = 2.0 * (records[0].f_value - f_star) / (lam * gamma * steps)

    rate_bound = rate_fitted = None
    violations = 0
    if f_star is not None and obj.pl_mu is not None and records:
        rate_bound = 1.0 - gamma * obj.pl_mu * lam
        gaps = np.array([r.f_value - f_star for r in records])
        gap0 = gaps[0]
        rate_fitted = _fit_rate(gaps, floor=max(1e-12 * abs(gap0), 1e-14))
        bound = gap0 * rate_bound ** np.arange(len(gaps)) * (1.0 + 1e-9) + 1e-12
        violations = int(np.count_nonzero(gaps > bound))
    elif obj.pl_mu is None:
        notes.append("no PL constant; rate check skipped")

    checked = descent_violations = 0
    single_gd = cfg.inner is InnerSolver.GD and cfg.inner_steps == 1
    if cfg.method in (Method.FPFT, Method.RAC_LORA, Method.ASYMM_LORA) and (
        single_gd or cfg.method is not Method.RAC_LORA
    ):
        for cur, nxt in zip(records[:-1], records[1:]):
            if cur.proj_grad_norm_sq is None:
                continue
            checked += 1
            if nxt.f_value > cur.f_value - 0.5 * gamma * cur.proj_grad_norm_sq + DESCENT_TOL:
                descent_violations += 1
    else:
        notes.append("descent check applies to single-step GD chains only")

    return RateReport(
        lambda_min=lam,
        steps=steps,
        min_grad_norm_sq=float(grad_sq.min()),
        avg_grad_norm_sq=float(grad_sq.mean()),
        grad_norm_bound=grad_norm_bound,
        rate_bound=rate_bound,
        rate_fitted=rate_fitted,
        gap_bound_violations=violations,
        descent_checked=checked,
        descent_violations=descent_violations,
        notes=tuple(notes),
    )


def iterations_to_gap(records: Sequence[TraceRecord], threshold: float) -> Optional[int]:
    """First step whose gap is at or below ``threshold``."""
    for r in records:
        if r.gap is not None and not r.diverged and r.gap <= threshold:
            return r.t
    return None


def mean_gap_ratio(runs: Sequence[ChainRun], t: int) -> float:
    """Seed-averaged gap(t) / gap(0)."""
    return float(np.mean([run.records[t].gap / run.records[0].gap for run in runs]))


def mean_grad_norm_average(runs: Sequence[ChainRun], steps: int) -> float:
    """Seed-averaged (1/T) sum_{t<T} ||grad f(W^t)||^2."""
    return float(np.mean([np.mean([r.grad_norm_sq for r in run.records[:steps]]) for run in runs]))

"""Federated randomized asymmetric chain.

Each round the server samples a cohort, broadcasts (W^t, sketch) to it, every
cohort client runs one reshuffled pass over its own samples with the shared
projector and sends back its accumulated trainable factor, and the server
merges the averaged factor with stepsize beta. Clients are simulated in
process; :class:`Broadcast` and :class:`CommunicationLedger` make the
message boundary explicit.
"""
import hashlib
import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import DivergenceDetected, InvalidConfig, RacLoraError, ShapeError
from ..utils.parallel import map_ordered
from .linalg import as_matrix, frobenius_inner, frobenius_norm_sq
from .objectives import (
    LinearRegressionObjective,
    LogisticRegressionObjective,
    Objective,
    QuadraticObjective,
    QuadraticSpec,
    RegressionSpec,
    infimum,
    sample_infima,
)
from .optimizers import (
    TraceRecord,
    check_divergence,
    merge_factor,
    permutation_stream,
    solve_subproblem_closed_form,
)
from .sketch import Projector, SketchSide, SketchSpec, build_projector, sample_sketch

logger = logging.getLogger(__name__)

FED_METHOD = "fed_rac_lora"


@dataclass(frozen=True)
class FedConfig:
    num_clients: int
    cohort_size: int
    local_gamma: float
    server_beta: float
    chain_length: int
    sketch: SketchSpec
    seed: int = 0
    theorem_mode: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.num_clients < 1:
            raise InvalidConfig(f"num_clients must be >= 1, got {self.num_clients}")
        if not 1 <= self.cohort_size <= self.num_clients:
            raise InvalidConfig(
                f"cohort_size must lie in [1, {self.num_clients}], got {self.cohort_size}"
            )
        if not self.local_gamma > 0:
            raise InvalidConfig(f"local_gamma must be positive, got {self.local_gamma}")
        if not self.server_beta > 0:
            raise InvalidConfig(f"server_beta must be positive, got {self.server_beta}")
        if self.chain_length < 1:
            raise InvalidConfig(f"chain_length must be >= 1, got {self.chain_length}")
        if not 0 <= self.seed < 2**64:
            raise InvalidConfig(f"seed must be a non-negative 64-bit integer, got {self.seed}")

    def server_step(self, local_samples: int) -> float:
        """Effective server stepsize eta_tilde = beta * gamma * N."""
        return self.server_beta * self.local_gamma * local_samples


@dataclass(frozen=True)
class ClientData:
    client_id: int
    objective: Objective


@dataclass(frozen=True)
class DissimilarityReport:
    delta_star: float
    delta_star_m: Tuple[float, ...]
    f_star: float
    client_infima: Tuple[float, ...]


def _digest(w: np.ndarray, sketch_matrix: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(w).tobytes())
    h.update(np.ascontiguousarray(sketch_matrix).tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class Broadcast:
    """Server-to-client message of one round."""

    round: int
    w: np.ndarray
    sketch_matrix: np.ndarray
    digest: str

    @classmethod
    def create(cls, round_: int, w: np.ndarray, sketch_matrix: np.ndarray) -> "Broadcast":
        w = np.array(w, dtype=np.float64)
        sketch_matrix = np.array(sketch_matrix, dtype=np.float64)
        w.setflags(write=False)
        sketch_matrix.setflags(write=False)
        return cls(round_, w, sketch_matrix, _digest(w, sketch_matrix))

    def verify(self) -> None:
        if _digest(self.w, self.sketch_matrix) != self.digest:
            raise RacLoraError(f"Broadcast of round {self.round} does not match its digest")

    @property
    def nbytes(self) -> int:
        return int(self.w.nbytes + self.sketch_matrix.nbytes)


@dataclass
class CommunicationLedger:
    """Bytes moved per round and client, in both directions."""

    down: Dict[int, Dict[int, int]] = field(default_factory=lambda: defaultdict(dict))
    up: Dict[int, Dict[int, int]] = field(default_factory=lambda: defaultdict(dict))

    def record_broadcast(self, client_id: int, message: Broadcast) -> None:
        self.down[message.round][client_id] = message.nbytes

    def record_upload(self, round_: int, client_id: int, factor: np.ndarray) -> None:
        self.up[round_][client_id] = int(factor.nbytes)

    def uploads(self, round_: int) -> Dict[int, int]:
        return dict(self.up.get(round_, {}))

    @property
    def total_up(self) -> int:
        return sum(sum(per.values()) for per in self.up.values())

    @property
    def total_down(self) -> int:
        return sum(sum(per.values()) for per in self.down.values())


@dataclass
class FedRun:
    records: List[TraceRecord]
    final_w: np.ndarray
    diverged: bool
    ledger: CommunicationLedger
    digests: List[str]
    cohorts: List[Tuple[int, ...]]


# -- client population ---------------------------------------------------------------


class AveragedObjective(Objective):
    """Plain average of client objectives, for families that do not stack."""

    def __init__(self, parts: Sequence[Objective]):
        self.parts = list(parts)
        ls = [p.smoothness_l for p in self.parts]
        mus = [p.pl_mu for p in self.parts]
        super().__init__(
            shape=self.parts[0].shape,
            sample_count=1,
            smoothness_l=max(ls) if None not in ls else None,
            pl_mu=min(mus) if None not in mus else None,
            kind="average",
        )

    def value(self, w):
        return float(np.mean([p.value(w) for p in self.parts]))

    def gradient(self, w):
        return np.mean([p.gradient(w) for p in self.parts], axis=0)

    def sample_gradient(self, w, i):
        self._check_index(i)
        return self.gradient(w)

    def sample_smoothness(self, i):
        self._check_index(i)
        return self.smoothness_l

    def sample_objective(self, i):
        self._check_index(i)
        return self


def _check_clients(clients: Sequence[ClientData]) -> None:
    if not clients:
        raise InvalidConfig("At least one client is required")
    shapes = {c.objective.shape for c in clients}
    if len(shapes) != 1:
        raise ShapeError(f"Clients disagree on the parameter shape: {sorted(shapes)}")


def global_objective(clients: Sequence[ClientData]) -> Objective:
    """f = (1/M) sum_m f_m, in closed form whenever the family allows it."""
    _check_clients(clients)
    objs = [c.objective for c in clients]
    if len(objs) == 1:
        return objs[0]
    shape = objs[0].shape
    if all(isinstance(o, QuadraticObjective) for o in objs):
        spec = QuadraticSpec(
            m=np.mean([o.m for o in objs], axis=0), b=np.mean([o.b for o in objs], axis=0), shape=shape
        )
        return QuadraticObjective(spec)
    for family in (LinearRegressionObjective, LogisticRegressionObjective):
        if (
            all(type(o) is family for o in objs)
            and len({o.sample_count for o in objs}) == 1
            and len({o.reg_lambda for o in objs}) == 1
        ):
            # equal N per client: the stacked sample mean is the client mean
            spec = RegressionSpec(
                x=np.vstack([o.x for o in objs]),
                y=np.concatenate([o.y for o in objs]),
                reg_lambda=objs[0].reg_lambda,
                shape=shape,
            )
            return family(spec)
    return AveragedObjective(objs)


def theorem_stepsize_window(
    smoothness_l: float, lambda_min: float, local_gamma: float, local_samples: int
) -> Tuple[float, float]:
    """Admissible range [gamma N, (1 - lambda_min) / (4 L)] for eta_tilde."""
    return local_gamma * local_samples, (1.0 - lambda_min) / (4.0 * smoothness_l)


def check_theorem_stepsizes(clients: Sequence[ClientData], cfg: FedConfig) -> None:
    """Validate gamma N <= eta_tilde <= (1 - lambda_min) / (4 L).

    Raises InvalidConfig in theorem mode, logs a warning otherwise.
    """
    counts = {c.objective.sample_count for c in clients}
    smoothness = global_objective(clients).smoothness_l
    if len(counts) != 1 or smoothness is None:
        message = "stepsize window needs equal client sample counts and a known L"
        if cfg.theorem_mode:
            raise InvalidConfig(message)
        logger.warning(message)
        return
    n = counts.pop()
    low, high = theorem_stepsize_window(
        smoothness, cfg.sketch.closed_form_lambda_min, cfg.local_gamma, n
    )
    eta_tilde = cfg.server_step(n)
    if low <= eta_tilde * (1.0 + 1e-12) and eta_tilde <= high * (1.0 + 1e-12):
        return
    message = f"eta_tilde={eta_tilde:.4g} outside the window [{low:.4g}, {high:.4g}]"
    if cfg.theorem_mode:
        raise InvalidConfig(message)
    logger.warning(message)


def make_quadratic_clients(
    rng: np.random.Generator,
    num_clients: int,
    shape: Tuple[int, int] = (3, 3),
    heterogeneity: float = 1.0,
    eig_range: Tuple[float, float] = (1.0, 10.0),
) -> List[ClientData]:
    """Diagonal quadratic clients; ``heterogeneity`` spreads the linear terms."""
    d = shape[0] * shape[1]
    base = rng.standard_normal(d)
    clients = []
    for m in range(num_clients):
        diag = rng.uniform(eig_range[0], eig_range[1], size=d)
        b = base + heterogeneity * rng.standard_normal(d)
        spec = QuadraticSpec(m=np.diag(diag), b=b, shape=shape)
        clients.append(ClientData(m, QuadraticObjective(spec)))
    return clients


def make_regression_clients(
    rng: np.random.Generator,
    num_clients: int,
    samples_per_client: int = 50,
    shape: Tuple[int, int] = (4, 4),
    reg_lambda: float = 1e-2,
    heterogeneity: float = 0.5,
    noise: float = 0.01,
) -> List[ClientData]:
    """Linear regression clients whose ground truths are shifted copies of one model."""
    d = shape[0] * shape[1]
    w_true = rng.standard_normal(d)
    clients = []
    for m in range(num_clients):
        w_m = w_true + heterogeneity * rng.standard_normal(d)
        x = rng.standard_normal((samples_per_client, d))
        y = x @ w_m + noise * rng.standard_normal(samples_per_client)
        spec = RegressionSpec(x=x, y=y, reg_lambda=reg_lambda, shape=shape)
        clients.append(ClientData(m, LinearRegressionObjective(spec)))
    return clients


def split_clients(spec: RegressionSpec, num_clients: int, logistic: bool = False) -> List[ClientData]:
    """Partition a dataset into ``num_clients`` contiguous, equally sized shards."""
    n = spec.x.shape[0]
    if not 1 <= num_clients <= n:
        raise InvalidConfig(f"Cannot split {n} samples across {num_clients} clients")
    per = n // num_clients
    if per * num_clients != n:
        logger.warning(f"Dropping {n - per * num_clients} samples to keep client shards equal")
    family = LogisticRegressionObjective if logistic else LinearRegressionObjective
    clients = []
    for m in range(num_clients):
        rows = slice(m * per, (m + 1) * per)
        part = replace(spec, x=spec.x[rows], y=spec.y[rows])
        clients.append(ClientData(m, family(part)))
    return clients


# -- protocol ----------------------------------------------------------------------


def sample_cohort(m: int, c: int, rng: np.random.Generator) -> Tuple[int, ...]:
    """Uniform sample of ``c`` distinct client ids, sorted.

    A full cohort is returned without touching ``rng``.
    """
    if m < 1 or c < 1:
        raise InvalidConfig(f"Need m >= 1 and c >= 1, got m={m}, c={c}")
    if c > m:
        raise InvalidConfig(f"Cohort size {c} exceeds the number of clients {m}")
    if c == m:
        return tuple(range(m))
    return tuple(sorted(int(i) for i in rng.choice(m, size=c, replace=False)))


def client_local_update(
    client: ClientData,
    w: np.ndarray,
    sketch_matrix: np.ndarray,
    gamma: float,
    rng: np.random.Generator,
    sketch: SketchSpec,
    projector: Optional[Projector] = None,
) -> np.ndarray:
    """One reshuffled pass over the client's samples with the shared projector.

    Returns the trainable factor (r x n Left, m x r Right) whose merge with
    beta = 1 reproduces W_{m,N} - W. ``rng`` supplies the permutation.
    """
    obj = client.objective
    w = as_matrix(w, "W")
    if w.shape != obj.shape:
        raise ShapeError(f"W has shape {w.shape}, client {client.client_id} expects {obj.shape}")
    if projector is None:
        projector = build_projector(sketch_matrix, sketch.side)
    eta = gamma / sketch.scale
    factor = np.zeros(sketch.trainable_shape)
    local = w
    for i in rng.permutation(obj.sample_count):
        grad = obj.sample_gradient(local, int(i))
        factor = factor + solve_subproblem_closed_form(sketch_matrix, grad, eta, sketch.side)
        local = local - gamma * projector.apply(grad)
        if not np.all(np.isfinite(local)):
            raise DivergenceDetected(0, float("nan"), f"client {client.client_id} diverged")
    return factor


def factor_displacement(sketch_matrix: np.ndarray, factor: np.ndarray, sketch: SketchSpec) -> np.ndarray:
    """(alpha / r) B_S A_hat (Left) or (alpha / r) B_hat A_S (Right)."""
    rows, cols = sketch.target_rows, sketch.target_cols
    return merge_factor(np.zeros((rows, cols)), sketch_matrix, factor, sketch.scale, sketch.side)


def server_merge(
    w: np.ndarray,
    updates: Sequence[np.ndarray],
    sketch_matrix: np.ndarray,
    beta: float,
    alpha: float,
    r: int,
    side=SketchSide.LEFT,
) -> np.ndarray:
    """W + beta (alpha / r) B_S mean(A_hat_m), or the Right-side mirror."""
    if len(updates) == 0:
        raise InvalidConfig("server_merge needs at least one client update")
    shapes = {np.shape(u) for u in updates}
    if len(shapes) != 1:
        raise ShapeError(f"Client updates disagree on shape: {sorted(shapes)}")
    mean_factor = np.mean(np.stack(updates), axis=0)
    w = np.asarray(w, dtype=np.float64)
    return merge_factor(w, sketch_matrix, mean_factor, beta * alpha / r, side)


def _round_record(
    obj: Objective, w: np.ndarray, t: int, seed: int, projector: Optional[Projector] = None
) -> TraceRecord:
    grad = obj.gradient(w)
    f_value = obj.value(w)
    return TraceRecord(
        t=t,
        f_value=f_value,
        grad_norm_sq=frobenius_norm_sq(grad),
        gap=None if obj.optimum_value is None else f_value - obj.optimum_value,
        seed=seed,
        method=FED_METHOD,
        proj_grad_norm_sq=None if projector is None else frobenius_inner(grad, projector.apply(grad)),
    )


def run_fed_chain(
    clients: Sequence[ClientData], cfg: FedConfig, w0: Optional[np.ndarray] = None
) -> FedRun:
    """T rounds of cohort sampling, broadcast, local RR and server merge.

    The trace holds the global objective at W^0..W^T. Divergence ends the run
    with a flagged record instead of raising.
    """
    _check_clients(clients)
    if len(clients) != cfg.num_clients:
        raise InvalidConfig(f"FedConfig expects {cfg.num_clients} clients, got {len(clients)}")
    obj = global_objective(clients)
    check_theorem_stepsizes(clients, cfg)
    spec = cfg.sketch
    if (spec.target_rows, spec.target_cols) != obj.shape:
        raise InvalidConfig(
            f"Sketch targets {spec.target_rows}x{spec.target_cols}, "
            f"clients use {obj.shape}"
        )

    w = obj.zeros() if w0 is None else as_matrix(w0, "W0").copy()
    f_initial = obj.value(w)
    rng = np.random.default_rng(cfg.seed)
    ledger = CommunicationLedger()
    records: List[TraceRecord] = []
    digests: List[str] = []
    cohorts: List[Tuple[int, ...]] = []
    diverged = False
    logger.debug(
        f"Starting federated run: M={cfg.num_clients}, C={cfg.cohort_size}, T={cfg.chain_length}, "
        f"gamma={cfg.local_gamma:.4g}, beta={cfg.server_beta:.4g}, seed={cfg.seed}"
    )

    t = 0
    projector = None
    try:
        for t in range(cfg.chain_length):
            cohort = sample_cohort(cfg.num_clients, cfg.cohort_size, rng)
            sketch_matrix = sample_sketch(spec, rng)
            projector = build_projector(sketch_matrix, spec.side)
            message = Broadcast.create(t, w, sketch_matrix)
            records.append(_round_record(obj, w, t, cfg.seed, projector))
            cohorts.append(cohort)
            digests.append(message.digest)

            def local(client_id: int, message=message, projector=projector) -> np.ndarray:
                message.verify()
                return client_local_update(
                    clients[client_id],
                    message.w,
                    message.sketch_matrix,
                    cfg.local_gamma,
                    permutation_stream(cfg.seed, message.round, client_id),
                    spec,
                    projector=projector,
                )

            for client_id in cohort:
                ledger.record_broadcast(client_id, message)
            updates = map_ordered(local, cohort, workers=cfg.workers, logger=logger)
            for client_id, factor in zip(cohort, updates):
                ledger.record_upload(t, client_id, factor)

            w = server_merge(
                w,
                updates,
                sketch_matrix,
                cfg.server_beta,
                spec.alpha,
                spec.rank,
                spec.side,
            )
            check_divergence(obj, w, t + 1, f_initial)
        records.append(_round_record(obj, w, cfg.chain_length, cfg.seed))
    except DivergenceDetected as exc:
        diverged = True
        logger.info(f"Federated run seed={cfg.seed} diverged in round {t}")
        records.append(
            TraceRecord(
                t=t + 1,
                f_value=exc.f_value if exc.f_value is not None else float("nan"),
                grad_norm_sq=float("inf"),
                gap=None,
                seed=cfg.seed,
                method=FED_METHOD,
                diverged=True,
            )
        )
    return FedRun(
        records=records,
        final_w=w,
        diverged=diverged,
        ledger=ledger,
        digests=digests,
        cohorts=cohorts,
    )


def dissimilarity(clients: Sequence[ClientData], tol: float = 1e-9) -> DissimilarityReport:
    """Delta* = f* - mean_m f_m*,  Delta*_m = f* - mean_i f_{m,i}*."""
    _check_clients(clients)
    f_star = infimum(global_objective(clients), tol)
    client_infima = [infimum(c.objective, tol) for c in clients]
    per_client = [f_star - float(np.mean(sample_infima(c.objective, tol))) for c in clients]
    return DissimilarityReport(
        delta_star=f_star - float(np.mean(client_infima)),
        delta_star_m=tuple(per_client),
        f_star=f_star,
        client_infima=tuple(client_infima),
    )

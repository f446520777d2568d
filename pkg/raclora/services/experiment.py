import logging
import traceback
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..config import ExperimentConfig
from ..core.federated import (
    ClientData,
    FedConfig,
    dissimilarity,
    global_objective,
    make_quadratic_clients,
    make_regression_clients,
    run_fed_chain,
    split_clients,
)
from ..core.objectives import (
    Objective,
    counterexample_spec,
    infimum,
    make_linear_regression,
    make_logistic_regression,
    make_quadratic,
    synthetic_linear_regression,
    synthetic_logistic_regression,
)
from ..core.optimizers import ChainConfig, ChainRun, InnerSolver, Method, default_step_size, run_chain
from ..core.sketch import SketchSpec, estimate_expected_projector
from ..errors import InvalidConfig, IoError, RacLoraError
from ..utils.parallel import map_ordered
from .summary import format_table, summarize, to_csv
from .synthetic_data import DATASET_KINDS, gen_synthetic, load_dataset
from .traces import TraceFile

Result = Tuple[bool, str, Optional[Dict[str, Any]]]


@dataclass(frozen=True)
class Problem:
    objective: Objective
    w0: np.ndarray


@dataclass(frozen=True)
class ChainJob:
    label: str
    chain: ChainConfig


def _num(value) -> Optional[float]:
    return None if value is None else float(value)


def build_problem(cfg: ExperimentConfig) -> Problem:
    """Objective and starting point for a single-machine experiment."""
    if cfg.objective == 'counterexample':
        obj = make_quadratic(counterexample_spec())
        return Problem(obj, obj.zeros())

    if cfg.data:
        dataset = load_dataset(Path(cfg.data))
        if dataset.kind != cfg.objective:
            raise InvalidConfig(
                f"Dataset {cfg.data} holds {dataset.kind} data, "
                f"objective is {cfg.objective}"
            )
        fine, w0 = dataset.fine, dataset.w0
    else:
        rng = np.random.default_rng(cfg.data_seed)
        if cfg.objective == 'linreg':
            _, fine, w0 = synthetic_linear_regression(
                rng, cfg.n_pretrain, cfg.n_finetune, cfg.shape, cfg.reg_lambda, cfg.noise, cfg.shift
            )
        else:
            fine = synthetic_logistic_regression(rng, cfg.n_samples, cfg.shape, cfg.reg_lambda)
            w0 = np.zeros(cfg.shape)

    if cfg.objective == 'linreg':
        return Problem(make_linear_regression(fine), w0)
    obj = make_logistic_regression(fine)
    # no closed form: a numeric optimum makes gaps reportable
    obj.optimum_value = infimum(obj)
    return Problem(obj, w0)


def build_clients(cfg: ExperimentConfig) -> List[ClientData]:
    rng = np.random.default_rng(cfg.data_seed)
    if cfg.objective == 'fed_quadratic':
        return make_quadratic_clients(rng, cfg.num_clients, cfg.shape, cfg.heterogeneity)
    if cfg.data:
        dataset = load_dataset(Path(cfg.data))
        return split_clients(dataset.fine, cfg.num_clients, logistic=dataset.kind == 'logreg')
    return make_regression_clients(
        rng,
        cfg.num_clients,
        cfg.samples_per_client,
        cfg.shape,
        cfg.reg_lambda,
        cfg.heterogeneity,
        cfg.noise,
    )


def sketch_for(cfg: ExperimentConfig, obj: Objective, rank: int) -> SketchSpec:
    return SketchSpec(
        side=cfg.side,
        rank=rank,
        target_rows=obj.param_rows,
        target_cols=obj.param_cols,
        distribution=cfg.distribution,
        alpha=cfg.alpha,
    )


def chain_config_for(
    cfg: ExperimentConfig, method: Method, sketch: SketchSpec, gamma: float, seed: int
) -> ChainConfig:
    """Per-method chain settings: COLA spends ``cola_steps`` joint steps per block."""
    if method is Method.COLA:
        return ChainConfig(
            chain_length=max(cfg.chain_length // cfg.cola_steps, 1),
            step_gamma=gamma,
            sketch=sketch,
            seed=seed,
            method=method,
            inner_steps=cfg.cola_steps,
        )
    if method is Method.RAC_LORA:
        return ChainConfig(
            chain_length=cfg.chain_length,
            step_gamma=gamma,
            sketch=sketch,
            inner=InnerSolver(cfg.inner),
            seed=seed,
            method=method,
            inner_steps=cfg.inner_steps,
            sgd_sampler=cfg.sgd_sampler,
            sgd_batch=cfg.sgd_batch,
        )
    return ChainConfig(
        chain_length=cfg.chain_length,
        step_gamma=gamma,
        sketch=sketch,
        seed=seed,
        method=method,
    )


def chain_jobs(
    cfg: ExperimentConfig, obj: Objective, rank: int, methods: Sequence[str], rank_suffix: bool = False
) -> List[ChainJob]:
    """Every (method, step size, seed) run of one rank."""
    sketch = sketch_for(cfg, obj, rank)
    suffix = f"_r{rank}" if rank_suffix else ''
    jobs = []
    for name in methods:
        method = Method(name)
        if name in cfg.gamma_sweep_methods and cfg.gamma_factors:
            if obj.smoothness_l is None:
                raise InvalidConfig(f"A step-size sweep needs L, unknown for {obj.kind}")
            gammas = [
                (f"_g{factor:g}", float(factor) / obj.smoothness_l)
                for factor in cfg.gamma_factors
            ]
        elif cfg.gamma is not None:
            gammas = [('', float(cfg.gamma))]
        else:
            step = default_step_size(obj, method, InnerSolver(cfg.inner), sketch, cfg.chain_length)
            gammas = [('', step)]
        for tag, gamma in gammas:
            for seed in cfg.seeds:
                chain = chain_config_for(cfg, method, sketch, gamma, seed)
                label = name if method is Method.FPFT else f"{name}{suffix}{tag}"
                jobs.append(ChainJob(label=label, chain=chain))
    return jobs


def trace_header(cfg: ExperimentConfig, obj: Objective, job: ChainJob, run: ChainRun) -> Dict[str, Any]:
    chain = job.chain
    return {
        'method': chain.method.value,
        'label': job.label,
        'objective': cfg.objective,
        'gamma': float(chain.step_gamma),
        'rank': chain.sketch.rank,
        'alpha': float(chain.sketch.alpha),
        'side': chain.sketch.side.value,
        'distribution': chain.sketch.distribution.value,
        'inner': chain.inner.value,
        'inner_steps': chain.inner_steps,
        'chain_length': chain.chain_length,
        'lambda_min': float(chain.lambda_min),
        'mu': _num(obj.pl_mu),
        'L': _num(obj.smoothness_l),
        'f_star': _num(obj.optimum_value),
        'seed': chain.seed,
        'diverged': bool(run.diverged),
        'output_index': int(run.output_index),
    }


def default_local_gamma(clients: Sequence[ClientData], sketch: SketchSpec, beta: float) -> float:
    """Largest local step keeping eta_tilde = beta gamma N at (1 - lambda_min) / (4 L)."""
    smoothness = global_objective(clients).smoothness_l
    lam = sketch.closed_form_lambda_min
    if smoothness is None or lam >= 1.0:
        raise InvalidConfig("Cannot derive a local step size here; set local_gamma explicitly")
    n = max(c.objective.sample_count for c in clients)
    return (1.0 - lam) / (4.0 * smoothness * n * beta)


class ExperimentService:
    _instance = None
    _initialized = False

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super(ExperimentService, cls).__new__(cls)
        return cls._instance

    def __init__(self):
        if not self._initialized:
            self.logger = logging.getLogger(__name__)
            self._initialized = True

    def _failure(self, action: str, e: Exception) -> Result:
        self.logger.error(f"{action} failed: {e}")
        self.logger.error(traceback.format_exc())
        exit_code = e.exit_code if isinstance(e, RacLoraError) else 1
        return False, str(e), {'error': str(e), 'exit_code': exit_code}

    def _finish(self, cfg: ExperimentConfig, message: str, output: Dict[str, Any]) -> Result:
        """Attach the exit code; divergence fails the call only on request."""
        if cfg.fail_on_divergence and output.get('diverged', 0) > 0:
            output['exit_code'] = 3
            return False, f"{message}; {output['diverged']} run(s) diverged", output
        output['exit_code'] = 0
        return True, message, output

    def _run_jobs(
        self, cfg: ExperimentConfig, problem: Problem, jobs: List[ChainJob]
    ) -> List[Dict[str, Any]]:
        out_dir = Path(cfg.output_dir) / cfg.name

        def execute(job: ChainJob) -> Dict[str, Any]:
            run = run_chain(problem.objective, job.chain, problem.w0)
            header = trace_header(cfg, problem.objective, job, run)
            trace = TraceFile(header=header, records=run.records)
            path = trace.write(out_dir / f"{job.label}_seed{job.chain.seed}.csv")
            self.logger.debug(f"{job.label} seed={job.chain.seed}: final f={run.final.f_value:.6g}")
            return {
                'label': job.label,
                'seed': job.chain.seed,
                'path': str(path),
                'diverged': run.diverged,
                'final_gap': run.final.gap,
            }

        return map_ordered(execute, jobs, workers=cfg.workers, logger=self.logger)

    def run_experiment(self, cfg: ExperimentConfig) -> Result:
        """One trace file per (method, step size, seed) at ``cfg.rank``."""
        try:
            self.logger.info(
                f"Running {cfg.name}: {', '.join(cfg.methods)} on {cfg.objective}, "
                f"seeds {cfg.seeds}"
            )
            problem = build_problem(cfg)
            jobs = chain_jobs(cfg, problem.objective, cfg.rank, cfg.methods)
            runs = self._run_jobs(cfg, problem, jobs)
            diverged = sum(r['diverged'] for r in runs)
            output = {'traces': [r['path'] for r in runs], 'runs': runs, 'diverged': diverged}
            return self._finish(cfg, f"Wrote {len(runs)} traces", output)
        except Exception as e:
            return self._failure('Experiment', e)

    def run_sweep(self, cfg: ExperimentConfig) -> Result:
        """Rank sweep over ``cfg.ranks``; rank-free methods run once."""
        try:
            ranks = [int(r) for r in cfg.ranks] or [cfg.rank]
            self.logger.info(f"Running rank sweep {ranks} for {cfg.name}")
            problem = build_problem(cfg)
            ranked = [m for m in cfg.methods if Method(m) is not Method.FPFT]
            jobs = []
            for rank in ranks:
                jobs.extend(chain_jobs(cfg, problem.objective, rank, ranked, rank_suffix=True))
            if len(ranked) != len(cfg.methods):
                jobs.extend(chain_jobs(cfg, problem.objective, ranks[0], [Method.FPFT.value]))
            runs = self._run_jobs(cfg, problem, jobs)
            diverged = sum(r['diverged'] for r in runs)
            output = {'traces': [r['path'] for r in runs], 'runs': runs, 'diverged': diverged}
            success, message, summary = self.summarize_traces(output['traces'], cfg.gap_threshold)
            if success:
                output['table'] = summary['table']
                output['summary'] = summary['rows']
            return self._finish(cfg, f"Wrote {len(runs)} traces for ranks {ranks}", output)
        except Exception as e:
            return self._failure('Sweep', e)

    def run_counterexample(self, cfg: ExperimentConfig) -> Result:
        """Run the comparison on the counterexample and summarize it."""
        if cfg.objective != 'counterexample':
            return False, "The counterexample command needs objective=counterexample", {
                'error': 'wrong objective',
                'exit_code': 2,
            }
        success, message, output = self.run_experiment(cfg)
        if not success and output.get('exit_code') != 3:
            return success, message, output
        ok, _, summary = self.summarize_traces(output['traces'], cfg.gap_threshold)
        if ok:
            output['table'] = summary['table']
            output['summary'] = summary['rows']
        return success, message, output

    def run_federated(self, cfg: ExperimentConfig) -> Result:
        try:
            if not cfg.is_federated:
                raise InvalidConfig(f"Objective {cfg.objective} is not a federated scenario")
            clients = build_clients(cfg)
            obj = global_objective(clients)
            sketch = sketch_for(cfg, obj, cfg.rank)
            gamma = cfg.local_gamma or default_local_gamma(clients, sketch, cfg.server_beta)
            report = dissimilarity(clients)
            n = max(c.objective.sample_count for c in clients)
            self.logger.info(
                f"Federated {cfg.objective}: M={cfg.num_clients}, "
                f"C={cfg.cohort_size}, gamma={gamma:.4g}, "
                f"beta={cfg.server_beta}, delta*={report.delta_star:.4g}"
            )
            out_dir = Path(cfg.output_dir) / cfg.name

            def execute(seed: int) -> Dict[str, Any]:
                fed = FedConfig(
                    num_clients=cfg.num_clients,
                    cohort_size=cfg.cohort_size,
                    local_gamma=gamma,
                    server_beta=cfg.server_beta,
                    chain_length=cfg.chain_length,
                    sketch=sketch,
                    seed=seed,
                    theorem_mode=cfg.theorem_mode,
                )
                run = run_fed_chain(clients, fed)
                header = {
                    'method': 'fed_rac_lora',
                    'label': 'fed_rac_lora',
                    'objective': cfg.objective,
                    'gamma': float(gamma),
                    'beta': float(cfg.server_beta),
                    'eta_tilde': float(fed.server_step(n)),
                    'rank': sketch.rank,
                    'alpha': float(sketch.alpha),
                    'side': sketch.side.value,
                    'distribution': sketch.distribution.value,
                    'inner': 'rr',
                    'num_clients': cfg.num_clients,
                    'cohort_size': cfg.cohort_size,
                    'lambda_min': float(sketch.closed_form_lambda_min),
                    'mu': _num(obj.pl_mu),
                    'L': _num(obj.smoothness_l),
                    'f_star': _num(obj.optimum_value),
                    'delta_star': float(report.delta_star),
                    'seed': seed,
                    'diverged': bool(run.diverged),
                    'bytes_up': run.ledger.total_up,
                    'bytes_down': run.ledger.total_down,
                }
                trace = TraceFile(header=header, records=run.records)
                path = trace.write(out_dir / f"fed_rac_lora_seed{seed}.csv")
                return {
                    'seed': seed,
                    'path': str(path),
                    'diverged': run.diverged,
                    'final_f': run.records[-1].f_value,
                }

            runs = map_ordered(execute, cfg.seeds, workers=cfg.workers, logger=self.logger)
            output = {
                'traces': [r['path'] for r in runs],
                'runs': runs,
                'diverged': sum(r['diverged'] for r in runs),
                'local_gamma': gamma,
                'delta_star': report.delta_star,
                'delta_star_m': list(report.delta_star_m),
            }
            return self._finish(cfg, f"Wrote {len(runs)} federated traces", output)
        except Exception as e:
            return self._failure('Federated run', e)

    def estimate_lambda(self, cfg: ExperimentConfig) -> Result:
        """Monte Carlo lambda_min / lambda_max of E[H] next to the closed form."""
        try:
            rows, cols = cfg.shape
            spec = SketchSpec(cfg.side, cfg.rank, rows, cols, cfg.distribution, cfg.alpha)
            estimate = estimate_expected_projector(spec, cfg.mc_samples, np.random.default_rng(cfg.seed))
            output = {
                'lambda_min_hat': estimate.lambda_min_hat,
                'lambda_max_hat': estimate.lambda_max_hat,
                'std_err': estimate.std_err,
                'closed_form': spec.closed_form_lambda_min,
                'samples': estimate.samples,
                'exit_code': 0,
            }
            message = (
                f"lambda_min={estimate.lambda_min_hat:.5f} lambda_max={estimate.lambda_max_hat:.5f} "
                f"(std err {estimate.std_err:.2e}, closed form {spec.closed_form_lambda_min:.5f})"
            )
            return True, message, output
        except Exception as e:
            return self._failure('Lambda estimation', e)

    def summarize_traces(
        self, paths: Sequence[str], gap_threshold: float = 1e-6, out: Optional[Path] = None
    ) -> Result:
        try:
            files: List[Path] = []
            for p in map(Path, paths):
                files.extend(sorted(p.glob('*.csv')) if p.is_dir() else [p])
            traces = [TraceFile.read(f) for f in files]
            rows = summarize(traces, gap_threshold)
            table = format_table(rows)
            output = {'rows': [asdict(r) for r in rows], 'table': table, 'exit_code': 0}
            if out is not None:
                try:
                    Path(out).write_text(to_csv(rows))
                except OSError as e:
                    raise IoError(f"Cannot write summary {out}: {e}") from e
                output['summary_path'] = str(out)
            return True, f"Summarized {len(traces)} traces", output
        except Exception as e:
            return self._failure('Summary', e)

    def generate_data(self, cfg: ExperimentConfig) -> Result:
        try:
            if cfg.objective not in DATASET_KINDS:
                raise InvalidConfig(f"gen-data supports {', '.join(DATASET_KINDS)}, not {cfg.objective}")
            out_dir = Path(cfg.output_dir) / f"{cfg.objective}_seed{cfg.data_seed}"
            files = gen_synthetic(
                cfg.objective,
                out_dir,
                cfg.data_seed,
                shape=cfg.shape,
                reg_lambda=cfg.reg_lambda,
                n_pretrain=cfg.n_pretrain,
                n_finetune=cfg.n_finetune,
                n_samples=cfg.n_samples,
                noise=cfg.noise,
                shift=cfg.shift,
            )
            return True, f"Wrote dataset to {out_dir}", {
                'files': {k: str(v) for k, v in files.items()},
                'path': str(out_dir),
                'exit_code': 0,
            }
        except Exception as e:
            return self._failure('Data generation', e)

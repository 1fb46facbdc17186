"""Study orchestration: trials, references, metrics, summaries, exports.

A *study* is one benchmark likelihood evaluated over independent
measurement trials.  Every trial simulates a measurement, produces two
independent reference batches (exact conditioning for the linear studies,
component MCMC otherwise), runs each configured variant, and scores all of
them against the first reference with the four metrics.  The second
reference is scored the same way, giving the sampling-noise floor row.

Results land in a directory that can be regenerated byte-for-byte from its
embedded ``config.json``; wall-clock timings are kept in a separate
``timings.json`` that is not part of the replayable surface.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from .annealing import DenoiseApprox, MixtureScoreProvider, make_schedule
from .engine import (SampleBatch, VARIANT_LABELS, VariantConfig,
                     sample_posterior_batch)
from .gmm import benchmark_prior
from .metrics import (CmdConfig, MmdConfig, cmd, estimate_alpha,
                      estimate_base_bandwidth, mean_error, mmd,
                      variance_error)
from .problems import (KIND_LINEAR, Problem, make_inpainting,
                       make_phase_retrieval, make_xray)
from .reference import (ConvergenceError, ReferenceConfig,
                        exact_posterior_sample, reference_mcmc)
from .samplers import SamplerConfig
from .storage import read_json, save_batch, write_json

__all__ = [
    "STUDIES",
    "StudyConfig",
    "TrialReport",
    "StudySummary",
    "REFERENCE_METHOD",
    "worker_count",
    "build_problem",
    "build_variant",
    "run_study",
    "summarize",
    "rescore_study",
    "export_projection",
    "benchmark_runtime",
]

REFERENCE_METHOD = "Reference"
METRIC_NAMES = ("mean_error", "variance_error", "cmd", "mmd")

# Desk-scale defaults (trials, samples); the paper-scale protocol is 100
# trials x 10,000 samples, reachable through n_trials/n_samples or scale.
_DESK_SCALE = {
    "inpainting_low": (20, 5000),
    "inpainting_high": (20, 5000),
    "xray": (10, 2000),
    "phase_retrieval": (10, 1000),
}
STUDIES = tuple(_DESK_SCALE)

_STREAM_MEAS = 1
_STREAM_REF = 2
_STREAM_VARIANT = 4


def worker_count(default=None):
    """Worker pool size: DIFFANNEAL_WORKERS, else available cores."""
    env = os.environ.get("DIFFANNEAL_WORKERS")
    if env:
        return max(1, int(env))
    if default is not None:
        return default
    return os.cpu_count() or 1


@dataclass
class StudyConfig:
    """Everything needed to (re)run one study."""

    study: str
    variants: list = field(default_factory=lambda: list(VARIANT_LABELS))
    n_trials: int | None = None
    n_samples: int | None = None
    n_reference: int = 10_000
    seed: int = 0
    scale: float = 1.0
    output_dir: str | None = None

    def __post_init__(self):
        if self.study not in _DESK_SCALE:
            raise ValueError(f"unknown study {self.study!r}; "
                             f"choose from {sorted(_DESK_SCALE)}")
        bad = [v for v in self.variants if v not in VARIANT_LABELS]
        if bad:
            raise ValueError(f"unknown variant labels: {bad}")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")
        trials, samples = _DESK_SCALE[self.study]
        if self.n_trials is None:
            self.n_trials = max(1, round(trials * self.scale))
        if self.n_samples is None:
            self.n_samples = max(2, round(samples * self.scale))
        if self.n_trials < 1 or self.n_samples < 2:
            raise ValueError("need n_trials >= 1 and n_samples >= 2")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        known = {k: doc[k] for k in
                 ("study", "variants", "n_trials", "n_samples", "n_reference",
                  "seed", "scale", "output_dir") if k in doc}
        return cls(**known)


@dataclass
class TrialReport:
    """Metric quadruple for one (trial, method) pair."""

    trial_id: int
    method: str
    mean_error: float
    variance_error: float
    cmd: float
    mmd: float
    discard_count: int = 0
    runtime_seconds: float = 0.0


@dataclass
class StudySummary:
    """Per-method metric means and interdecile ranges across trials."""

    study: str
    n_trials: int
    n_samples: int
    seed: int
    methods: dict
    alpha: float = 0.0
    base_bandwidths: list = field(default_factory=list)
    failed_trials: list = field(default_factory=list)

    def metric(self, method, name, stat="mean"):
        return self.methods[method][name][stat]

    def to_dict(self):
        return asdict(self)


def build_problem(study: str) -> Problem:
    if study == "inpainting_low":
        return make_inpainting(0.1)
    if study == "inpainting_high":
        return make_inpainting(5.0)
    if study == "xray":
        return make_xray()
    return make_phase_retrieval()


def _default_sampler(study: str, kind: str) -> SamplerConfig:
    if kind != "lang":
        return SamplerConfig(kind=kind)
    if study in ("inpainting_low", "inpainting_high"):
        return SamplerConfig(kind="lang", lang_step=5e-5, lang_iters=100)
    if study == "xray":
        return SamplerConfig(kind="lang", lang_step=5e-5, lang_iters=1000)
    # unadjusted Langevin is unstable on phase retrieval; use adjusted +
    # preconditioned dynamics there
    return SamplerConfig(kind="lang", lang_step=0.2, lang_iters=1000,
                         metropolis=True)


def build_variant(study: str, label: str, schedule=None) -> VariantConfig:
    """Study-specific configuration of one of the nine variant labels."""
    if label not in VARIANT_LABELS:
        raise ValueError(f"unknown variant label {label!r}")
    sampler_name, denoise_name = label.split("-")
    kind = {"Lang": "lang", "MAP": "map", "RTO": "rto"}[sampler_name]
    variant = denoise_name.lower()
    schedule = schedule or make_schedule()
    return VariantConfig(DenoiseApprox(variant=variant),
                         _default_sampler(study, kind), schedule, label)


def _reference_batch(study, problem, prior, measurement, n, seed_tuple):
    if problem.kind == KIND_LINEAR:
        rng = np.random.default_rng(np.random.SeedSequence(seed_tuple))
        return exact_posterior_sample(prior, problem, measurement.y, n, rng)
    master = int(np.random.SeedSequence(seed_tuple).generate_state(1)[0])
    return reference_mcmc(prior, problem, measurement.y, n, master,
                          ReferenceConfig())


def _variant_seed(seed, trial, label):
    vi = VARIANT_LABELS.index(label)
    ss = np.random.SeedSequence((seed, _STREAM_VARIANT, trial, vi))
    return int(ss.generate_state(1)[0])


def _run_trial(cfg: StudyConfig, trial: int, out: Path | None):
    """Simulate, reference, and run every variant for one trial."""
    problem = build_problem(cfg.study)
    prior = benchmark_prior()
    provider = MixtureScoreProvider(prior)
    rng_meas = np.random.default_rng(
        np.random.SeedSequence((cfg.seed, _STREAM_MEAS, trial)))
    measurement = problem.simulate_measurement(prior, rng_meas, seed=trial)
    try:
        ref_a = _reference_batch(cfg.study, problem, prior, measurement,
                                 cfg.n_reference,
                                 (cfg.seed, _STREAM_REF, trial, 0))
        ref_b = _reference_batch(cfg.study, problem, prior, measurement,
                                 cfg.n_reference,
                                 (cfg.seed, _STREAM_REF, trial, 1))
    except ConvergenceError as err:
        return {"trial": trial, "error": str(err)}
    ref_a.trial = ref_b.trial = trial
    batches = {}
    for label in cfg.variants:
        variant = build_variant(cfg.study, label)
        master = _variant_seed(cfg.seed, trial, label)
        batches[label] = sample_posterior_batch(
            variant, problem, measurement.y, provider, cfg.n_samples, master,
            trial=trial)
    if out is not None:
        write_json(out / "measurements" / f"trial_{trial:03d}.json",
                   {"y": measurement.y.tolist(),
                    "m_true": measurement.m_true.tolist(),
                    "trial_seed": measurement.trial_seed})
        save_batch(ref_a, out / "reference" / f"trial_{trial:03d}.csv")
        save_batch(ref_b, out / "reference_b" / f"trial_{trial:03d}.csv")
        for label, batch in batches.items():
            save_batch(batch, out / "batches" / label / f"trial_{trial:03d}.csv")
    return {"trial": trial, "reference": ref_a, "reference_b": ref_b,
            "batches": batches}


def _score_trial(trial_data, alpha, subsample_cap):
    """Metric quadruples of every method in one trial (reference row first)."""
    ref = trial_data["reference"]
    trial = trial_data["trial"]
    eps_bar = estimate_base_bandwidth(ref.samples)
    mmd_cfg = MmdConfig(base_bandwidth=eps_bar, subsample=subsample_cap)
    cmd_cfg = CmdConfig(alpha=alpha)
    reports = []
    scored = [(REFERENCE_METHOD, trial_data["reference_b"])]
    scored += [(label, trial_data["batches"][label])
               for label in trial_data["batches"]]
    for method, batch in scored:
        reports.append(TrialReport(
            trial_id=trial, method=method,
            mean_error=mean_error(batch.samples, ref.samples),
            variance_error=variance_error(batch.samples, ref.samples),
            cmd=cmd(batch.samples, ref.samples, cmd_cfg),
            mmd=mmd(batch.samples, ref.samples, mmd_cfg),
            discard_count=batch.discarded,
            runtime_seconds=batch.runtime_seconds))
    return reports, eps_bar


def summarize(reports) -> dict:
    """Per-method mean and (10th, 90th) percentile of each metric.

    Values are sorted before reduction so the summary is invariant to the
    order of the incoming reports.
    """
    if not reports:
        raise ValueError("no reports to summarize")
    methods = {}
    for rep in reports:
        methods.setdefault(rep.method, []).append(rep)
    out = {}
    for method, reps in methods.items():
        entry = {}
        for name in METRIC_NAMES:
            vals = np.sort([getattr(r, name) for r in reps])
            entry[name] = {
                "mean": float(np.mean(vals)),
                "p10": float(np.percentile(vals, 10)),
                "p90": float(np.percentile(vals, 90)),
            }
        entry["discards"] = int(sum(r.discard_count for r in reps))
        out[method] = entry
    return out


def run_study(cfg: StudyConfig, n_workers=None) -> StudySummary:
    """Execute a full study and (optionally) persist all artifacts.

    Trials are the unit of parallelism.  The moment-discrepancy decay rate
    is calibrated once from all trials' first references, then every method
    within a trial is scored against that trial's first reference.
    """
    out = Path(cfg.output_dir) if cfg.output_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "config.json", cfg.to_dict())
    workers = n_workers if n_workers is not None else worker_count()
    trials = list(range(cfg.n_trials))
    if workers > 1 and cfg.n_trials > 1:
        trial_data = Parallel(n_jobs=workers)(
            delayed(_run_trial)(cfg, t, out) for t in trials)
    else:
        trial_data = [_run_trial(cfg, t, out) for t in trials]
    failed = [d for d in trial_data if "error" in d]
    good = [d for d in trial_data if "error" not in d]
    if not good:
        raise ConvergenceError("every trial failed its reference gate",
                               diagnostics={"failed": failed})
    alpha = estimate_alpha([d["reference"].samples for d in good])
    reports, eps_bars = [], []
    for data in good:
        trial_reports, eps_bar = _score_trial(data, alpha, subsample_cap=5000)
        reports.extend(trial_reports)
        eps_bars.append(eps_bar)
    summary = StudySummary(
        study=cfg.study, n_trials=cfg.n_trials, n_samples=cfg.n_samples,
        seed=cfg.seed, methods=summarize(reports), alpha=alpha,
        base_bandwidths=eps_bars,
        failed_trials=[{"trial": d["trial"], "reason": d["error"]}
                       for d in failed])
    if out is not None:
        _write_metrics_csv(out / "metrics.csv", reports)
        write_json(out / "summary.json", summary.to_dict())
        write_json(out / "timings.json", {
            "runtimes": [{"trial": r.trial_id, "method": r.method,
                          "seconds": r.runtime_seconds} for r in reports]})
    return summary


def _write_metrics_csv(path, reports):
    lines = ["trial,method,mean_error,variance_error,cmd,mmd,discards"]
    for r in reports:
        lines.append(f"{r.trial_id},{r.method},{r.mean_error:.17g},"
                     f"{r.variance_error:.17g},{r.cmd:.17g},{r.mmd:.17g},"
                     f"{r.discard_count}")
    path.write_text("\n".join(lines) + "\n")


def rescore_study(results_dir) -> StudySummary:
    """Recompute metrics and the summary from a results directory on disk."""
    from .storage import load_batch

    out = Path(results_dir)
    cfg = StudyConfig.from_dict(read_json(out / "config.json"))
    trial_data = []
    for t in range(cfg.n_trials):
        ref_path = out / "reference" / f"trial_{t:03d}.csv"
        if not ref_path.exists():
            continue
        data = {"trial": t, "reference": load_batch(ref_path),
                "reference_b": load_batch(out / "reference_b" / f"trial_{t:03d}.csv"),
                "batches": {}}
        for label in cfg.variants:
            data["batches"][label] = load_batch(
                out / "batches" / label / f"trial_{t:03d}.csv")
        trial_data.append(data)
    alpha = estimate_alpha([d["reference"].samples for d in trial_data])
    reports, eps_bars = [], []
    for data in trial_data:
        trial_reports, eps_bar = _score_trial(data, alpha, subsample_cap=5000)
        reports.extend(trial_reports)
        eps_bars.append(eps_bar)
    summary = StudySummary(
        study=cfg.study, n_trials=cfg.n_trials, n_samples=cfg.n_samples,
        seed=cfg.seed, methods=summarize(reports), alpha=alpha,
        base_bandwidths=eps_bars)
    _write_metrics_csv(out / "metrics.csv", reports)
    write_json(out / "summary.json", summary.to_dict())
    return summary


# ----------------------------------------------------------------------
# figure exports


def export_projection(batch: SampleBatch, reference_batch: SampleBatch,
                      problem: Problem, mode, out_dir, coords=(0, 1),
                      name=None):
    """Project both batches to 2-D, write CSVs, and render an overlay figure.

    ``coordinate_pair`` picks two raw coordinates; ``singular_pair``
    projects onto the right singular vectors of the forward operator with
    the largest and smallest singular values.  Returns the written paths.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    d = batch.dim
    if mode == "coordinate_pair":
        proj = np.zeros((d, 2))
        proj[coords[0], 0] = 1.0
        proj[coords[1], 1] = 1.0
        axis_names = (f"m[{coords[0]}]", f"m[{coords[1]}]")
    elif mode == "singular_pair":
        _, svals, vt = np.linalg.svd(problem.operator)
        proj = np.stack([vt[0], vt[len(svals) - 1]], axis=1)
        axis_names = ("largest singular direction", "smallest singular direction")
    else:
        raise ValueError(f"unknown projection mode {mode!r}")
    name = name or f"{batch.method}_trial{batch.trial:03d}_{mode}"
    meth2 = batch.samples @ proj
    ref2 = reference_batch.samples @ proj
    meth_csv = out_dir / f"{name}_method.csv"
    ref_csv = out_dir / f"{name}_reference.csv"
    np.savetxt(meth_csv, meth2, fmt="%.17g", delimiter=",")
    np.savetxt(ref_csv, ref2, fmt="%.17g", delimiter=",")
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.scatter(ref2[:, 0], ref2[:, 1], s=4, alpha=0.3, label="reference",
               color="tab:gray")
    ax.scatter(meth2[:, 0], meth2[:, 1], s=4, alpha=0.3, label=batch.method,
               color="tab:blue")
    ax.set_xlabel(axis_names[0])
    ax.set_ylabel(axis_names[1])
    ax.legend(loc="best")
    fig_path = out_dir / f"{name}.svg"
    fig.savefig(fig_path)
    plt.close(fig)
    return meth_csv, ref_csv, fig_path


def benchmark_runtime(cfg: StudyConfig) -> dict:
    """Wall-clock seconds per variant batch, mean and std across trials.

    Runs only the variant batches (no references, no metrics), timing each
    one; used for relative cost comparisons, since absolute numbers are
    hardware-bound.
    """
    problem = build_problem(cfg.study)
    prior = benchmark_prior()
    provider = MixtureScoreProvider(prior)
    times = {label: [] for label in cfg.variants}
    for trial in range(cfg.n_trials):
        rng_meas = np.random.default_rng(
            np.random.SeedSequence((cfg.seed, _STREAM_MEAS, trial)))
        measurement = problem.simulate_measurement(prior, rng_meas, seed=trial)
        for label in cfg.variants:
            variant = build_variant(cfg.study, label)
            master = _variant_seed(cfg.seed, trial, label)
            batch = sample_posterior_batch(variant, problem, measurement.y,
                                           provider, cfg.n_samples, master,
                                           trial=trial)
            times[label].append(batch.runtime_seconds)
    return {label: {"mean_seconds": float(np.mean(v)),
                    "std_seconds": float(np.std(v)),
                    "n_trials": len(v)}
            for label, v in times.items()}

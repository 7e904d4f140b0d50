"""Metrics and scripted experiments (estimation sweep, patch-sampling
ablation, conditional-vs-baseline denoising, blind prior path)."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import CondNoiseError, DataEmpty, ShapeMismatch, ZeroTruth
from .image_io import ColorImage, ImagePlane
from .lonpe import LonpeConfig, estimate
from .noise_model import NoisePrior, add_noise, make_rng

DEFAULT_SWEEP_PRIORS = (NoisePrior(0.05, 0.02), NoisePrior(0.10, 0.04), NoisePrior(0.15, 0.08))
ABLATION_PRIOR = NoisePrior(0.2, 0.01)
PAPER_BEST_MAPE = (0.029, 0.021)


@dataclass(frozen=True)
class Arm:
    patch_size: int
    select_ratio: float
    smoothness: bool = True

    @property
    def label(self) -> str:
        flag = "on" if self.smoothness else "off"
        return f"{self.patch_size}x{self.patch_size}/{round(self.select_ratio * 100)}%/lambda-{flag}"

    def config(self, seed: int = 0) -> LonpeConfig:
        return LonpeConfig(patch_size=self.patch_size, select_ratio=self.select_ratio,
                           use_smoothness_filter=self.smoothness, seed=seed)


DEFAULT_ARMS = (
    Arm(8, 0.05, False), Arm(8, 0.05, True), Arm(8, 0.10, True),
    Arm(16, 0.10, True), Arm(16, 0.20, True), Arm(32, 0.10, True),
)


def _as_array(x):
    if isinstance(x, (ImagePlane, ColorImage)):
        return x.data
    return np.asarray(x, dtype=np.float64)


def psnr_arrays(a, b) -> float:
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    return math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)


def psnr(a, b) -> float:
    """PSNR in dB for unit-range images; ``inf`` when identical."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"psnr: {a.shape} vs {b.shape}")
    return psnr_arrays(a, b)


def mape(estimates, truth: NoisePrior) -> tuple[float, float]:
    """Mean absolute percentage error per component (as fractions)."""
    if truth.sigma_s <= 0 or truth.sigma_r <= 0:
        raise ZeroTruth("MAPE needs positive true components")
    est = np.array([e.as_tuple() if isinstance(e, NoisePrior) else e for e in estimates], dtype=float)
    if est.size == 0:
        raise DataEmpty("no estimates")
    rel = np.abs(est - np.array(truth.as_tuple())) / np.array(truth.as_tuple())
    return float(rel[:, 0].mean()), float(rel[:, 1].mean())


def summarize(values) -> dict:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return {"n": 0}
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"n": int(v.size), "mean": float(v.mean()), "std": float(v.std()),
            "q1": float(q1), "median": float(med), "q3": float(q3)}


@dataclass
class ExperimentReport:
    name: str
    config: dict
    records: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    wall_time: float = 0.0
    notes: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), default=_json_default, **kw)

    def write(self, path) -> None:
        """JSON report at ``path`` plus a flat CSV of records next to it."""
        path = Path(path)
        path.write_text(self.to_json(indent=2))
        if self.records:
            keys = list(dict.fromkeys(k for r in self.records for k in r))
            with open(path.with_suffix(".csv"), "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=keys)
                w.writeheader()
                w.writerows(self.records)

    def write_dat(self, path, columns) -> None:
        """Whitespace-separated columns for gnuplot."""
        with open(path, "w") as fh:
            fh.write("# " + " ".join(columns) + "\n")
            for r in self.records:
                fh.write(" ".join(str(r.get(c, "nan")) for c in columns) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, NoisePrior):
        return list(o.as_tuple())
    raise TypeError(type(o).__name__)


def _noisy(plane_data, prior, seed):
    return ImagePlane(add_noise(plane_data, "poisson_gaussian", prior, make_rng(seed)))


def run_estimation_sweep(images, priors=DEFAULT_SWEEP_PRIORS, config: LonpeConfig | None = None,
                         seed: int = 0, names=None) -> ExperimentReport:
    """Synthesize unclipped heteroscedastic noise per (prior, image) and estimate it back."""
    if not images:
        raise DataEmpty("empty image set")
    if not priors:
        raise DataEmpty("no priors")
    config = config or LonpeConfig()
    names = names or [f"img{i:02d}" for i in range(len(images))]
    t0 = time.perf_counter()
    records = []
    for pi, prior in enumerate(priors):
        for ii, img in enumerate(images):
            cell_seed = seed * 1_000_003 + pi * 10_007 + ii
            est = estimate(_noisy(_as_array(img), prior, cell_seed), config)
            records.append({
                "prior_index": pi, "image": names[ii],
                "sigma_s": prior.sigma_s, "sigma_r": prior.sigma_r,
                "sigma_s_hat": est.prior.sigma_s, "sigma_r_hat": est.prior.sigma_r,
                "patches_used": est.patches_used, "clamped": est.clamped,
            })
    report = ExperimentReport(
        "estimation_sweep",
        {"lonpe": asdict(config), "priors": [p.as_tuple() for p in priors], "seed": seed,
         "noise": "poisson_gaussian, unclipped", "images": list(names)},
        records, sweep_aggregates(records), time.perf_counter() - t0,
        notes="unclipped synthesis",
    )
    return report


def sweep_aggregates(records) -> dict:
    out = {}
    for pi in sorted({r["prior_index"] for r in records}):
        rows = [r for r in records if r["prior_index"] == pi]
        s_hat = [r["sigma_s_hat"] for r in rows]
        r_hat = [r["sigma_r_hat"] for r in rows]
        s, r = rows[0]["sigma_s"], rows[0]["sigma_r"]
        out[str(pi)] = {
            "prior": [s, r],
            "sigma_s_hat": summarize(s_hat),
            "sigma_r_hat": summarize(r_hat),
            "mean_abs_err_s": float(np.mean(np.abs(np.array(s_hat) - s))),
            "mean_abs_err_r": float(np.mean(np.abs(np.array(r_hat) - r))),
        }
    return out


def run_ablation_lonpe(images, arms=DEFAULT_ARMS, seed: int = 0, prior: NoisePrior = ABLATION_PRIOR,
                       names=None) -> ExperimentReport:
    """MAPE of the estimator per patch-sampling arm on a fixed noisy image set."""
    if not images:
        raise DataEmpty("empty image set")
    names = names or [f"img{i:02d}" for i in range(len(images))]
    t0 = time.perf_counter()
    noisy = [_noisy(_as_array(img), prior, seed * 1_000_003 + i) for i, img in enumerate(images)]
    records, table = [], {}
    for arm in arms:
        estimates, failures = [], 0
        for i, plane in enumerate(noisy):
            try:
                est = estimate(plane, arm.config(seed + i)).prior
            except CondNoiseError as exc:
                failures += 1
                records.append({"arm": arm.label, "image": names[i], "error": type(exc).__name__})
                continue
            estimates.append(est)
            records.append({"arm": arm.label, "image": names[i],
                            "sigma_s_hat": est.sigma_s, "sigma_r_hat": est.sigma_r})
        ds, dr = mape(estimates, prior) if estimates else (math.nan, math.nan)
        table[arm.label] = {"mape_s": ds, "mape_r": dr, "failures": failures, "n": len(estimates)}
    report = ExperimentReport(
        "ablation_lonpe",
        {"prior": prior.as_tuple(), "arms": [asdict(a) for a in arms], "seed": seed,
         "noise": "poisson_gaussian, unclipped", "paper_best": PAPER_BEST_MAPE},
        records, {"table": table, "orderings": ablation_orderings(table)},
        time.perf_counter() - t0, notes="unclipped synthesis",
    )
    return report


def ablation_orderings(table) -> dict:
    def get(label, key="mape_s"):
        return table.get(label, {}).get(key, math.nan)

    out = {}
    on, off = "8x8/5%/lambda-on", "8x8/5%/lambda-off"
    if on in table and off in table:
        out["smoothness_helps_8x8_5"] = bool(get(on) < get(off))
    contenders = ["8x8/5%/lambda-on", "16x16/10%/lambda-on", "16x16/20%/lambda-on", "32x32/10%/lambda-on"]
    if all(c in table for c in contenders):
        best = min(get(c) for c in contenders)
        out["16x16_10_is_best"] = bool(get("16x16/10%/lambda-on") <= best)
        out["16x16_10_beats_8x8_5"] = bool(get("16x16/10%/lambda-on") <= get("8x8/5%/lambda-on"))
        out["16x16_10_beats_32x32_10"] = bool(get("16x16/10%/lambda-on") <= get("32x32/10%/lambda-on"))
    return out


# -- conditional denoising ablation ---------------------------------------------------

ARMS_CONDITIONAL = (
    ("no_condsa", False, "true"),
    ("condsa_zero_prior", True, "zero"),
    ("condsa_true_prior", True, "true"),
)


def run_conditional_ablation(train_images, eval_set, config=None, schedule=None, seed: int = 0,
                             checkpoint_dir=None, progress=None) -> ExperimentReport:
    """Train the three arms on identical data and compare held-out PSNR."""
    from dataclasses import replace

    from .condsa import CondformerConfig, PatchDataset, TrainSchedule, evaluate, train_denoiser

    config = config or CondformerConfig()
    schedule = schedule or TrainSchedule(seed=seed)
    dataset = PatchDataset(train_images, patch_size=schedule.patch_size)
    t0 = time.perf_counter()
    records, psnrs, models, curves = [], {}, {}, {}
    for name, conditional, mode in ARMS_CONDITIONAL:
        cfg = replace(config, conditional=conditional)
        sched = replace(schedule, prior_mode=mode, seed=seed)
        ckpt = Path(checkpoint_dir) / f"{name}.ckpt" if checkpoint_dir else None
        result = train_denoiser(dataset, cfg, sched, checkpoint=ckpt,
                                progress=(lambda s, l, n=name: progress(n, s, l)) if progress else None)
        scores = evaluate(result.model, eval_set, prior_mode=mode)
        psnrs[name] = float(np.mean(scores))
        models[name] = result.model
        curves[name] = result.losses
        for i, s in enumerate(scores):
            records.append({"arm": name, "item": i, "psnr": s})
    noisy_psnr = float(np.mean([psnr_arrays(n, c) for n, c, _ in eval_set]))
    agg = {
        "psnr": psnrs,
        "noisy_psnr": noisy_psnr,
        "gap_true_vs_zero": psnrs["condsa_true_prior"] - psnrs["condsa_zero_prior"],
        "gap_true_vs_none": psnrs["condsa_true_prior"] - psnrs["no_condsa"],
        "gap_zero_vs_none": psnrs["condsa_zero_prior"] - psnrs["no_condsa"],
        "final_loss": {k: float(np.mean(v[-50:])) for k, v in curves.items()},
    }
    report = ExperimentReport(
        "conditional_ablation",
        {"model": asdict(config), "schedule": asdict(schedule), "seed": seed,
         "noise": "poisson_gaussian, clipped", "eval_items": len(eval_set)},
        records, agg, time.perf_counter() - t0, notes="clipped synthesis",
    )
    report.models = models  # not serialised
    return report


def run_blind_path(model, eval_set, lonpe_config: LonpeConfig | None = None) -> ExperimentReport:
    """PSNR with the true prior vs. the prior estimated from each noisy input."""
    from .condsa import evaluate

    lonpe_config = lonpe_config or LonpeConfig()
    t0 = time.perf_counter()
    estimates = []

    def from_estimate(noisy):
        est = estimate(ColorImage(noisy), lonpe_config).prior
        estimates.append(est.as_tuple())
        return est.as_tuple()

    true_scores = evaluate(model, eval_set, "true")
    est_scores = evaluate(model, eval_set, prior_fn=from_estimate)
    records = [{"item": i, "sigma_s": p.sigma_s, "sigma_r": p.sigma_r,
                "sigma_s_hat": e[0], "sigma_r_hat": e[1], "psnr_true": t, "psnr_est": s}
               for i, ((_, _, p), e, t, s) in enumerate(zip(eval_set, estimates, true_scores, est_scores))]
    agg = {"psnr_true": float(np.mean(true_scores)), "psnr_est": float(np.mean(est_scores))}
    agg["gap"] = agg["psnr_true"] - agg["psnr_est"]
    return ExperimentReport("blind_path", {"lonpe": asdict(lonpe_config)}, records, agg,
                            time.perf_counter() - t0)

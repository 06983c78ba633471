"""Desk-scale phantom experiments: loss comparison, beta sweep, missing organs.

Every trial trains one network from scratch on a fixed set of phantoms and
scores it on held-out phantoms.  Scores per trial:

* ``dice``: per-organ Dice (empty vs empty counts as 1), mean over organs and cases
* ``fnr`` / ``fpr``: counts pooled over organs within a case, mean over cases
  (``fpr`` uses fp/(fn+tp); cases with no foreground at all are skipped)
* ``hd_mm``: mean over organ rows where both masks are non-empty
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import spearmanr

from .metrics import EmptyMaskError, confusion, dice_score, fnr, fpr, hausdorff
from .net import Network, NetworkConfig
from .synth import PhantomConfig, default_organs, generate_cases
from .training import Case, TrainConfig, train
from .infer import predict_volume

SCORE_KEYS = ("dice", "fnr", "fpr", "hd_mm")


@dataclass(frozen=True)
class Setup:
    phantom: PhantomConfig
    train: TrainConfig
    n_train: int = 4
    n_test: int = 3
    stride: Tuple[int, int, int] = (8, 8, 8)
    test_seed: int = 1000

    def cases(self) -> Tuple[List[Case], List[Case]]:
        tr = generate_cases(self.phantom, self.n_train)
        te = generate_cases(replace(self.phantom, seed=self.phantom.seed + self.test_seed), self.n_test)
        return tr, te


def desk_setup(dims=(48, 48, 48), n_organs: int = 3, presence_prob: float = 1.0, seed: int = 100,
               steps: int = 500, window=(16, 16, 16), widths=(8, 16), **train_kw) -> Setup:
    """Defaults used by the acceptance experiments: 48^3 phantoms with under
    1% foreground, 16^3 organ-targeted windows, batch 2, 500 ADADELTA steps."""
    organs = tuple(default_organs(dims, n_organs=n_organs, presence_prob=presence_prob))
    phantom = PhantomConfig(dims=tuple(dims), organs=organs, blur_sigma=1.0, noise_sigma=0.05, seed=seed)
    kw = dict(steps=steps, window=tuple(window), n_per_organ=4, n_background=4, batch_size=2)
    kw.update(train_kw)
    tcfg = TrainConfig(net=NetworkConfig(1, n_organs, tuple(widths), True, 0), **kw)
    stride = tuple(max(1, w // 2) for w in window)
    return Setup(phantom, tcfg, stride=stride)


def score(net: Network, cases: Sequence[Case], window, stride, threshold: float = 0.5,
          normalize_windows: bool = False) -> Dict[str, float]:
    dice, fn_rates, fp_rates, hds = [], [], [], []
    for vol, gt in cases:
        pred = predict_volume(net, vol, window, stride, threshold, normalize_windows)
        cc = confusion(pred, gt)
        dice.extend(np.atleast_1d(dice_score(cc)).tolist())
        pooled = cc.pooled()
        fn_rates.append(float(fnr(pooled)))
        fp_rates.append(float(fpr(pooled)))
        for c in range(gt.channels):
            try:
                hds.append(hausdorff(pred.bits[..., c], gt.bits[..., c], gt.spacing))
            except EmptyMaskError:
                pass

    def mean(v):
        v = [x for x in v if not math.isnan(x)]
        return float(np.mean(v)) if v else math.nan

    return {"dice": mean(dice), "fnr": mean(fn_rates), "fpr": mean(fp_rates), "hd_mm": mean(hds)}


@dataclass(frozen=True)
class Trial:
    loss: str
    params: Tuple[Tuple[str, float], ...]
    seed: int

    @classmethod
    def make(cls, loss: str, params: Mapping[str, float], seed: int) -> "Trial":
        return cls(loss, tuple(sorted(params.items())), seed)


def run_trial(setup: Setup, trial: Trial, data: Optional[Tuple[List[Case], List[Case]]] = None) -> Dict:
    """Train with the trial's loss and seed, then score on the test cases.

    The seed fixes both the initialization and the window stream, so trials
    that share a seed start from identical weights.
    """
    tr, te = data if data is not None else setup.cases()
    tcfg = replace(setup.train, loss=trial.loss, loss_params=dict(trial.params), seed=trial.seed,
                   net=replace(setup.train.net, seed=trial.seed))
    result = train(tcfg, tr)
    out = {"loss": trial.loss, "seed": trial.seed, **dict(trial.params)}
    out.update(score(result.net, te, tcfg.window, setup.stride, tcfg.threshold, tcfg.normalize_windows))
    out["final_loss"] = float(np.mean(result.losses[-20:])) if result.losses else math.nan
    return out


def _run_star(args):
    return run_trial(*args)


def run_trials(setup: Setup, trials: Sequence[Trial], jobs: int = 1,
               data: Optional[Tuple[List[Case], List[Case]]] = None) -> List[Dict]:
    """Results in trial order; ``jobs > 1`` fans out over worker processes."""
    data = data if data is not None else setup.cases()
    work = [(setup, t, data) for t in trials]
    if jobs <= 1 or len(work) <= 1:
        return [_run_star(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_star, work))


COMBO_DEFAULT = {"alpha": 0.5, "beta": 0.5, "smooth": 1.0}


def imbalance_experiment(setup: Setup, seeds: Sequence[int], jobs: int = 1) -> Dict[str, List[Dict]]:
    """Plain mean cross entropy against combo (alpha = beta = 0.5)."""
    trials = [Trial.make("ce", {}, s) for s in seeds] + [Trial.make("combo", COMBO_DEFAULT, s) for s in seeds]
    rows = run_trials(setup, trials, jobs)
    return {"ce": rows[:len(seeds)], "combo": rows[len(seeds):]}


def beta_sweep(setup: Setup, betas: Sequence[float], seeds: Sequence[int], alpha: float = 0.5,
               jobs: int = 1, done: Optional[Mapping[Tuple[float, int], Dict]] = None) -> List[Dict]:
    """One combo model per (beta, seed); rows ordered beta-major.

    ``done`` supplies already-computed rows keyed by ``(beta, seed)``.
    """
    if len(betas) < 2:
        raise ValueError("a beta sweep needs at least two beta values")
    done = dict(done or {})
    keys = [(float(b), int(s)) for b in betas for s in seeds]
    todo = [k for k in keys if k not in done]
    trials = [Trial.make("combo", {"alpha": alpha, "beta": b, "smooth": 1.0}, s) for b, s in todo]
    for k, row in zip(todo, run_trials(setup, trials, jobs)):
        done[k] = row
    return [done[k] for k in keys]


def beta_fnr_spearman(rows: Sequence[Dict]) -> float:
    """Spearman correlation between beta and the per-beta mean FNR."""
    betas = sorted({r["beta"] for r in rows})
    means = [np.nanmean([r["fnr"] for r in rows if r["beta"] == b]) for b in betas]
    return float(spearmanr(betas, means).statistic)


def missing_organ_experiment(setup: Setup, seeds: Sequence[int], betas=(0.4, 0.8),
                             jobs: int = 1) -> Dict[float, List[Dict]]:
    """Combo at two betas on phantoms whose organs may be absent; same seeds,
    hence the same initialization, for both betas."""
    rows = beta_sweep(setup, betas, seeds, jobs=jobs)
    return {float(b): [r for r in rows if r["beta"] == b] for b in betas}


def mean_of(rows: Sequence[Dict], key: str) -> float:
    return float(np.nanmean([r[key] for r in rows]))

"""White-box adversarial attacks against both model kinds.

Every attack minimizes a scalar objective of the input pixels:

* targeted distance model: the target class's distance (drive it small);
* untargeted distance model: minus the correct class's distance (drive the
  correct class's distance up);
* targeted softmax model: minus the target's log probability;
* untargeted softmax model: plus the correct class's log probability.

Candidates are always clamped to the [0, 1] pixel box.  Success is
rejection-aware: a candidate that the model rejects never counts as a
successful attack, and a targeted hit additionally requires the target's
distance to clear the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import autodiff as ad
from .models import DeepRbfModel
from .rbf import NEGATIVE


@dataclass
class AttackGoal:
    """Targeted (reach class ``target``) or untargeted (leave ``true_class``)."""
    mode: str
    true_class: int
    target: int | None = None

    def __post_init__(self):
        if self.mode not in ("targeted", "untargeted"):
            raise ValueError(f"unknown goal mode {self.mode!r}")
        if self.mode == "targeted":
            if self.target is None or self.target == self.true_class:
                raise ValueError("targeted goal needs a target != true class")


def _default_eps_grid():
    return np.concatenate([[0.0], np.geomspace(1e-4, 1.0, 1000)])


@dataclass
class AttackConfig:
    """Step budgets and sweep grids; every knob is config-exposed."""
    eps_grid: np.ndarray = field(default_factory=_default_eps_grid)
    igsa_steps: int = 10
    igsa_eps_grid: np.ndarray = field(
        default_factory=lambda: np.concatenate([[0.0], np.geomspace(1e-3, 1.0, 16)]))
    lbfgs_c_initial: float = 1e-2
    lbfgs_c_ratio: float = 10.0
    lbfgs_c_steps: int = 5
    lbfgs_max_iterations: int = 200


@dataclass
class AttackResult:
    original: np.ndarray
    adversarial: np.ndarray | None
    success: bool
    rejected: bool
    goal: AttackGoal
    chosen_class: int | None = None
    log_confidence_original: float | None = None
    log_confidence_adversarial: float | None = None
    rmsd: float | None = None
    mad: float | None = None
    linf: float | None = None


def attack_objective(model, x, goal):
    """Objective value and its gradient with respect to the input pixels."""
    xt = ad.Tensor(np.asarray(x, dtype=np.float64)[None], requires_grad=True)
    scores = model.scores_t(xt, mode="eval")
    if isinstance(model, DeepRbfModel):
        if goal.mode == "targeted":
            objective = ad.sum_(ad.take_per_row(scores, [goal.target]))
        else:
            objective = -ad.sum_(ad.take_per_row(scores, [goal.true_class]))
    else:
        logp = scores - ad.logsumexp(scores, axis=1, keepdims=True)
        picked = ad.sum_(ad.take_per_row(
            logp, [goal.target if goal.mode == "targeted" else goal.true_class]))
        objective = -picked if goal.mode == "targeted" else picked
    grads = ad.backward(objective)
    return objective.item(), grads[xt][0]


def goal_satisfied(model, goal, verdict):
    """Rejection-aware success predicate on a single verdict."""
    if verdict == NEGATIVE:
        return False
    if goal.mode == "targeted":
        return verdict == goal.target
    return verdict != goal.true_class


def _verdicts(model, candidates):
    return np.asarray(model.verdicts(candidates))


def _finish(model, goal, x, adversarial, rejected_flag):
    """Assemble the result record, measuring confidences and distortions."""
    success = adversarial is not None
    result = AttackResult(original=x, adversarial=adversarial, success=success,
                          rejected=bool(rejected_flag), goal=goal)
    logc = model.log_confidences(x[None])[0]
    result.log_confidence_original = float(logc[goal.true_class])
    if success:
        verdict = int(_verdicts(model, adversarial[None])[0])
        result.chosen_class = verdict
        adv_logc = model.log_confidences(adversarial[None])[0]
        result.log_confidence_adversarial = float(adv_logc[verdict])
        delta = adversarial - x
        result.rmsd = float(np.sqrt(np.mean(delta ** 2)))
        result.mad = float(np.mean(np.abs(delta)))
        result.linf = float(np.max(np.abs(delta)))
    return result


def _sweep(model, goal, x, candidates):
    """First successful candidate in order, else failure with the last
    candidate's rejection flag."""
    verdicts = _verdicts(model, candidates)
    hits = [i for i, v in enumerate(verdicts) if goal_satisfied(model, goal, v)]
    if hits:
        return _finish(model, goal, x, candidates[hits[0]], False)
    return _finish(model, goal, x, None, verdicts[-1] == NEGATIVE)


def fgsm(model, x, goal, config=None):
    """Single gradient-sign step, sweeping the step size upward and keeping
    the smallest successful one."""
    config = config or AttackConfig()
    x = np.asarray(x, dtype=np.float64)
    _, grad = attack_objective(model, x, goal)
    direction = np.sign(grad)
    eps = np.asarray(config.eps_grid).reshape((-1,) + (1,) * x.ndim)
    candidates = np.clip(x[None] - eps * direction[None], 0.0, 1.0)
    return _sweep(model, goal, x, candidates)


def igsa(model, x, goal, config=None):
    """Iterated gradient-sign steps with per-sweep step size eps/k, exiting
    on the first success; reduces to one FGSM candidate when k = 1."""
    config = config or AttackConfig()
    x = np.asarray(x, dtype=np.float64)
    last_rejected = False
    for eps in config.igsa_eps_grid:
        if eps == 0.0:
            candidates = x[None]
        else:
            alpha = eps / config.igsa_steps
            current = x
            candidates = []
            for _ in range(config.igsa_steps):
                _, grad = attack_objective(model, current, goal)
                current = np.clip(current - alpha * np.sign(grad), 0.0, 1.0)
                candidates.append(current)
            candidates = np.stack(candidates)
        verdicts = _verdicts(model, candidates)
        for i, v in enumerate(verdicts):
            if goal_satisfied(model, goal, v):
                return _finish(model, goal, x, candidates[i], False)
        last_rejected = verdicts[-1] == NEGATIVE
    return _finish(model, goal, x, None, last_rejected)


def gradient_attack(model, x, goal, config=None):
    """Steps along the raw normalized gradient, sweeping the length."""
    config = config or AttackConfig()
    x = np.asarray(x, dtype=np.float64)
    _, grad = attack_objective(model, x, goal)
    norm = np.linalg.norm(grad)
    if norm == 0.0:
        return _finish(model, goal, x, None, False)
    direction = grad / norm
    eps = np.asarray(config.eps_grid).reshape((-1,) + (1,) * x.ndim)
    candidates = np.clip(x[None] - eps * direction[None], 0.0, 1.0)
    return _sweep(model, goal, x, candidates)


def lbfgs_attack(model, x, goal, config=None):
    """Box-constrained quasi-Newton minimization of
    c * ||x' - x||^2 + objective(x') over the pixel box.

    The trade-off constant sweeps geometrically upward while the solves
    keep succeeding (each step weighs distortion more heavily); the first
    failing constant ends the sweep and the lowest-distortion success is
    returned.
    """
    config = config or AttackConfig()
    x = np.asarray(x, dtype=np.float64)
    if goal_satisfied(model, goal, int(_verdicts(model, x[None])[0])):
        return _finish(model, goal, x, x.copy(), False)

    flat0 = x.reshape(-1)
    bounds = [(0.0, 1.0)] * flat0.size

    best = None          # (rmsd, candidate)
    last_rejected = False
    c = config.lbfgs_c_initial
    for _ in range(config.lbfgs_c_steps):
        def fun(flat, c=c):
            cand = flat.reshape(x.shape)
            value, grad = attack_objective(model, cand, goal)
            diff = flat - flat0
            return (c * float(diff @ diff) + value,
                    2.0 * c * diff + grad.reshape(-1))

        res = minimize(fun, flat0, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": config.lbfgs_max_iterations})
        candidate = np.clip(res.x.reshape(x.shape), 0.0, 1.0)
        verdict = int(_verdicts(model, candidate[None])[0])
        if goal_satisfied(model, goal, verdict):
            rmsd = float(np.sqrt(np.mean((candidate - x) ** 2)))
            if best is None or rmsd < best[0]:
                best = (rmsd, candidate)
        else:
            last_rejected = verdict == NEGATIVE
            if best is not None:
                break
        c *= config.lbfgs_c_ratio
    if best is not None:
        return _finish(model, goal, x, best[1], False)
    return _finish(model, goal, x, None, last_rejected)


ATTACKS = {"fgsm": fgsm, "igsa": igsa, "ga": gradient_attack, "lbfgs": lbfgs_attack}


def run_attack(kind, model, x, goal, config=None):
    try:
        fn = ATTACKS[kind]
    except KeyError:
        raise ValueError(f"unknown attack kind {kind!r}") from None
    return fn(model, x, goal, config)

import numpy as np
import pytest

from deeprbf import attacks
from deeprbf.attacks import AttackConfig, AttackGoal, attack_objective
from deeprbf.layers import Dense, Extractor
from deeprbf.models import DeepRbfModel, SoftmaxModel
from deeprbf.rbf import NEGATIVE, RbfHead, RbfHeadConfig, RejectionPolicy


def identity_extractor(dim=2):
    """Dense layer pinned to the identity map, so features equal inputs."""
    ext = Extractor([Dense(dim)], (dim,), seed=0)
    ext.params["layer0.weight"].values[:] = np.eye(dim)
    ext.params["layer0.bias"].values[:] = 0.0
    return ext


def centers_model(centers, p=2, threshold=None, loss_kind="ml"):
    """Distance model whose class centers sit at the given 2-D points."""
    centers = np.asarray(centers, dtype=np.float64)
    head = RbfHead(RbfHeadConfig(classes=len(centers), feature_dim=2, p=p,
                                 mode="identity"))
    head.bias.values[:] = -centers
    policy = RejectionPolicy.fixed(threshold) if threshold else RejectionPolicy.none()
    return DeepRbfModel(identity_extractor(2), head, loss_kind=loss_kind,
                        train_margin=5.0, policy=policy)


def linear_softmax_model(w, b):
    """One-pixel two-class linear classifier: logits = x*w + b."""
    ext = Extractor([Dense(2)], (1,), seed=0)
    ext.params["layer0.weight"].values[:] = np.asarray(w).reshape(1, 2)
    ext.params["layer0.bias"].values[:] = np.asarray(b)
    return SoftmaxModel(ext)


class TestAttackObjective:
    def test_identity_p2_gradient_closed_form(self):
        mu = np.array([0.2, 0.7])
        model = centers_model([mu, (0.9, 0.9)])
        x = np.array([0.5, 0.4])
        value, grad = attack_objective(model, x, AttackGoal("targeted", 1, target=0))
        np.testing.assert_allclose(value, np.sum((x - mu) ** 2), rtol=1e-12)
        np.testing.assert_allclose(grad, 2 * (x - mu), rtol=1e-12)

    def test_untargeted_gradient_is_negated(self):
        mu = np.array([0.2, 0.7])
        model = centers_model([mu, (0.9, 0.9)])
        x = np.array([0.5, 0.4])
        _, grad = attack_objective(model, x, AttackGoal("untargeted", 0))
        np.testing.assert_allclose(grad, -2 * (x - mu), rtol=1e-12)

    def test_gradient_matches_finite_differences_through_nonlinear_extractor(self):
        rng = np.random.default_rng(0)
        ext = Extractor([Dense(8), {"type": "relu"}, Dense(3)], (4,), seed=3,
                        init_scale=0.7)
        head = RbfHead(RbfHeadConfig(classes=3, feature_dim=3, p=2, l=2), seed=4)
        model = DeepRbfModel(ext, head)
        x = rng.uniform(0.2, 0.8, size=4)
        goal = AttackGoal("targeted", 0, target=1)
        _, grad = attack_objective(model, x, goal)
        h = 1e-6
        fd = np.zeros_like(x)
        for i in range(4):
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            fd[i] = (attack_objective(model, xp, goal)[0]
                     - attack_objective(model, xm, goal)[0]) / (2 * h)
        np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-8)

    def test_objective_floor_at_target_center(self):
        mu = np.array([0.5, 0.5])
        model = centers_model([mu, (0.1, 0.9)])
        value, _ = attack_objective(model, mu, AttackGoal("targeted", 1, target=0))
        assert value == 0.0

    def test_softmax_gradient_closed_form(self):
        # logits = [w0 x + b0, w1 x + b1]; d/dx log p0 = p1 (w0 - w1)
        model = linear_softmax_model([3.0, -1.0], [0.0, 1.0])
        x = np.array([0.4])
        logits = model.logits(x[None])[0]
        p = np.exp(logits - np.logaddexp(logits[0], logits[1]))
        _, grad = attack_objective(model, x, AttackGoal("untargeted", 0))
        np.testing.assert_allclose(grad, [p[1] * (3.0 - (-1.0))], rtol=1e-10)


class TestFgsm:
    def test_zero_epsilon_returns_input_when_already_satisfying(self):
        model = centers_model([(0.2, 0.2), (0.8, 0.8)])
        x = np.array([0.75, 0.75])   # already classified class 1
        res = attacks.fgsm(model, x, AttackGoal("untargeted", 0),
                           AttackConfig(eps_grid=np.array([0.0, 0.5])))
        assert res.success
        np.testing.assert_array_equal(res.adversarial, x)
        assert res.rmsd == 0.0

    def test_linear_crossover_threshold(self):
        # decision flips exactly when eps exceeds the logit gap over the
        # weight gap; sweep a fine grid and confirm the first success
        w = np.array([4.0, -4.0])
        b = np.array([-1.6, 1.6])                  # boundary at x = 0.4
        model = linear_softmax_model(w, b)
        x = np.array([0.7123])   # crossover strictly between grid points
        crossover = x[0] - 0.4
        grid = np.linspace(0.0, 1.0, 2001)
        res = attacks.fgsm(model, x, AttackGoal("untargeted", 0),
                           AttackConfig(eps_grid=grid))
        assert res.success
        eps_used = np.abs(res.adversarial - x).max()
        first_crossing = grid[np.searchsorted(grid, crossover, side="right")]
        np.testing.assert_allclose(eps_used, first_crossing, atol=1e-12)

    def test_linf_bounded_by_swept_epsilon(self):
        model = centers_model([(0.2, 0.2), (0.8, 0.8)])
        res = attacks.fgsm(model, np.array([0.3, 0.3]),
                           AttackGoal("targeted", 0, target=1))
        assert res.success
        assert res.linf <= 1.0 + 1e-12
        assert np.all(res.adversarial >= 0) and np.all(res.adversarial <= 1)

    def test_failure_when_gradient_zero(self):
        # at the exact center the p=2 gradient vanishes, every candidate
        # equals x, and the goal stays unsatisfied
        model = centers_model([(0.5, 0.5), (30.0, 30.0)], threshold=0.25)
        res = attacks.fgsm(model, np.array([0.5, 0.5]),
                           AttackGoal("targeted", 0, target=1))
        assert not res.success and res.adversarial is None

    def test_deterministic(self):
        model = centers_model([(0.2, 0.2), (0.8, 0.8)])
        x = np.array([0.35, 0.3])
        goal = AttackGoal("targeted", 0, target=1)
        a = attacks.fgsm(model, x, goal)
        b = attacks.fgsm(model, x, goal)
        np.testing.assert_array_equal(a.adversarial, b.adversarial)
        assert a.rmsd == b.rmsd


class TestIgsa:
    def test_single_step_reduces_to_fgsm(self):
        model = centers_model([(0.2, 0.2), (0.8, 0.8)])
        x = np.array([0.3, 0.25])
        goal = AttackGoal("targeted", 0, target=1)
        grid = np.array([0.4])
        f = attacks.fgsm(model, x, goal, AttackConfig(eps_grid=grid))
        i = attacks.igsa(model, x, goal,
                         AttackConfig(igsa_eps_grid=grid, igsa_steps=1))
        np.testing.assert_array_equal(f.adversarial, i.adversarial)

    def test_linf_bounded_by_total_budget(self):
        model = centers_model([(0.2, 0.2), (0.8, 0.8)])
        cfg = AttackConfig(igsa_eps_grid=np.array([0.3]), igsa_steps=10)
        res = attacks.igsa(model, np.array([0.4, 0.4]),
                           AttackGoal("targeted", 0, target=1), cfg)
        if res.success:
            assert res.linf <= 0.3 + 1e-12

    def test_no_more_distortion_than_fgsm_on_linear_model(self):
        # with a shared coarse sweep the inner steps refine the crossing,
        # so the accepted perturbation is never larger than FGSM's
        model = linear_softmax_model([4.0, -4.0], [-1.6, 1.6])
        goal = AttackGoal("untargeted", 0)
        grid = np.array([0.05, 0.1, 0.2, 0.4, 0.8])
        cfg = AttackConfig(eps_grid=grid, igsa_eps_grid=grid, igsa_steps=10)
        for xv in (0.55, 0.7, 0.9):
            x = np.array([xv])
            f = attacks.fgsm(model, x, goal, cfg)
            i = attacks.igsa(model, x, goal, cfg)
            assert f.success and i.success
            assert i.rmsd <= f.rmsd + 1e-12


class TestGradientAttack:
    def test_single_pixel_gradient_moves_single_pixel(self):
        # weight only on pixel 0, so the normalized gradient is axis-aligned
        ext2 = Extractor([Dense(2)], (2,), seed=0)
        ext2.params["layer0.weight"].values[:] = np.array([[4.0, -4.0], [0.0, 0.0]])
        ext2.params["layer0.bias"].values[:] = np.array([-1.0, 1.0])
        model2 = SoftmaxModel(ext2)
        x = np.array([0.5, 0.5])
        res = attacks.gradient_attack(model2, x, AttackGoal("untargeted", 0))
        assert res.success
        assert res.adversarial[1] == x[1]
        assert res.adversarial[0] != x[0]

    def test_l2_step_bound_before_clamping(self):
        model = centers_model([(0.2, 0.2), (0.8, 0.8)])
        x = np.array([0.5, 0.5])
        _, grad = attack_objective(model, x, AttackGoal("targeted", 0, target=1))
        direction = grad / np.linalg.norm(grad)
        for eps in (0.05, 0.2, 0.7):
            step = eps * direction
            assert np.linalg.norm(step) <= eps + 1e-12

    def test_linear_crossover_at_margin_over_weight_norm(self):
        ext2 = Extractor([Dense(2)], (2,), seed=0)
        w = np.array([[3.0, -3.0], [1.0, -1.0]])
        b = np.array([-2.0, 2.0])
        ext2.params["layer0.weight"].values[:] = w
        ext2.params["layer0.bias"].values[:] = b
        model = SoftmaxModel(ext2)
        x = np.array([0.8, 0.6])
        gap_w = w[:, 0] - w[:, 1]                # direction of logit gap
        margin = float(x @ gap_w + (b[0] - b[1]))
        crossover = margin / np.linalg.norm(gap_w)
        grid = np.linspace(0.0, 1.0, 4001)
        res = attacks.gradient_attack(model, x, AttackGoal("untargeted", 0),
                                      AttackConfig(eps_grid=grid))
        assert res.success
        eps_used = np.linalg.norm(res.adversarial - x)
        assert abs(eps_used - crossover) < 2 * (grid[1] - grid[0])

    def test_zero_gradient_fails_cleanly(self):
        model = centers_model([(0.5, 0.5), (30.0, 30.0)])
        res = attacks.gradient_attack(model, np.array([0.5, 0.5]),
                                      AttackGoal("targeted", 0, target=1))
        assert not res.success and res.adversarial is None


class TestLbfgs:
    def test_trivial_optimum(self):
        model = centers_model([(0.2, 0.2), (0.8, 0.8)])
        x = np.array([0.78, 0.82])
        res = attacks.lbfgs_attack(model, x, AttackGoal("targeted", 0, target=1))
        assert res.success
        np.testing.assert_array_equal(res.adversarial, x)
        assert res.rmsd == 0.0

    def test_success_self_consistency(self):
        model = centers_model([(0.2, 0.2), (0.8, 0.8)], threshold=0.6)
        goal = AttackGoal("targeted", 0, target=1)
        res = attacks.lbfgs_attack(model, np.array([0.25, 0.2]), goal)
        assert res.success
        verdict = int(model.verdicts(res.adversarial[None])[0])
        assert verdict == 1
        assert np.all(res.adversarial >= 0) and np.all(res.adversarial <= 1)

    def test_distortion_no_worse_than_fgsm(self):
        # anisotropic geometry: the sign step wastes motion on the weakly
        # informative pixel, while the quadratic-penalty path heads almost
        # straight for the boundary
        model = centers_model([(0.2, 0.5), (0.9, 0.55)])
        goal_pairs = [(np.array([0.3, 0.5]), AttackGoal("targeted", 0, target=1)),
                      (np.array([0.25, 0.45]), AttackGoal("targeted", 0, target=1)),
                      (np.array([0.85, 0.6]), AttackGoal("targeted", 1, target=0))]
        for x, goal in goal_pairs:
            f = attacks.fgsm(model, x, goal)
            l = attacks.lbfgs_attack(model, x, goal)
            assert f.success and l.success
            assert l.rmsd <= f.rmsd + 1e-9


class TestRejectionSemantics:
    def test_untargeted_push_into_rejection_region(self):
        # the only other center is far outside the box, so driving the
        # correct class's distance up can only land in rejected territory
        model = centers_model([(0.5, 0.5), (30.0, 30.0)], threshold=0.1)
        res = attacks.fgsm(model, np.array([0.45, 0.5]), AttackGoal("untargeted", 0))
        assert not res.success
        assert res.rejected

    def test_targeted_needs_distance_under_threshold(self):
        # target center outside the box: argmin can reach the target class
        # only in rejected territory, so the targeted attack must fail
        model = centers_model([(0.5, 0.5), (1.6, 1.6)], threshold=0.05)
        res = attacks.fgsm(model, np.array([0.5, 0.5]),
                           AttackGoal("targeted", 0, target=1))
        assert not res.success

    def test_goal_validation(self):
        with pytest.raises(ValueError):
            AttackGoal("targeted", 3, target=3)
        with pytest.raises(ValueError):
            AttackGoal("sideways", 0)

    def test_unknown_attack_kind(self):
        with pytest.raises(ValueError):
            attacks.run_attack("pgd", None, None, None)

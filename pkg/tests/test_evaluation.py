import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ftdflow.data import DegradationConfig, generate_pairs
from ftdflow.distill import FtdContext
from ftdflow.errors import FormatError, ShapeMismatchError
from ftdflow.evaluation import (EvalReport, evaluate_run, gaussian_oracle_velocity, restoration_metrics, sliced_w2,
                                straightness)
from ftdflow.models import MlpField

from helpers import randomize


def test_sliced_w2_identical_multisets():
    x = torch.randn(50, 3)
    assert sliced_w2(x, x) == 0.0
    assert sliced_w2(x, x[torch.randperm(50)]) == 0.0


def test_sliced_w2_point_masses_1d():
    a = torch.full((10, 1), 0.0)
    b = torch.full((10, 1), 2.5)
    assert sliced_w2(a, b) == pytest.approx(2.5, abs=1e-12)


def test_sliced_w2_matches_brute_force():
    gen = torch.Generator().manual_seed(0)
    a, b = torch.randn(30, 2, generator=gen), torch.randn(30, 2, generator=gen) + 0.5
    dirs = torch.randn(2, 16, generator=torch.Generator().manual_seed(7), dtype=torch.float64)
    dirs = dirs / dirs.norm(dim=0)
    ref = []
    for k in range(16):
        pa = sorted((a.double() @ dirs[:, k]).tolist())
        pb = sorted((b.double() @ dirs[:, k]).tolist())
        ref.append(math.sqrt(sum((x - y) ** 2 for x, y in zip(pa, pb)) / 30))
    assert sliced_w2(a, b, 16, seed=7) == pytest.approx(sum(ref) / 16, rel=1e-12)


def test_sliced_w2_unequal_counts_and_lists():
    a = [torch.tensor([0.0]), torch.tensor([1.0])]
    b = torch.tensor([[0.0], [0.0], [1.0], [1.0]])
    assert sliced_w2(a, b) == pytest.approx(0.0, abs=1e-12)


def test_sliced_w2_dimension_mismatch():
    with pytest.raises(ShapeMismatchError):
        sliced_w2(torch.zeros(3, 2), torch.zeros(3, 3))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_sliced_w2_pseudometric(seed):
    gen = torch.Generator().manual_seed(seed)
    a, b, c = (torch.randn(20, 2, generator=gen) * s for s in (1.0, 2.0, 0.5))
    ab, ba = sliced_w2(a, b, 32, 1), sliced_w2(b, a, 32, 1)
    assert ab == pytest.approx(ba, rel=1e-12)
    assert ab <= sliced_w2(a, c, 32, 1) + sliced_w2(c, b, 32, 1) + 1e-12


def test_straightness_linear_is_zero():
    traj = [torch.tensor([[1.0, 2.0]]) * s for s in np.linspace(0, 1, 9)]
    assert straightness(traj) == pytest.approx(0.0, abs=1e-15)


def test_straightness_degenerate_chord():
    assert straightness([torch.tensor([0.0]), torch.tensor([1.0]), torch.tensor([0.0])]) == 0.0


def test_straightness_quarter_circle():
    ang = np.linspace(0, np.pi / 2, 17)
    traj = [torch.tensor([np.cos(a), np.sin(a)]) for a in ang]
    # distance from the arc point at angle a to the chord x + y = 1 is (cos a + sin a - 1)/sqrt(2)
    expected = np.mean((np.cos(ang[1:-1]) + np.sin(ang[1:-1]) - 1) / np.sqrt(2)) / np.sqrt(2)
    value = straightness(traj)
    assert value == pytest.approx(expected, rel=1e-12)
    assert value > 0.1


def test_straightness_needs_three_states():
    with pytest.raises(ValueError):
        straightness([torch.zeros(1), torch.ones(1)])


def test_oracle_standard_normal_data_has_zero_velocity():
    x = torch.randn(10, 2, dtype=torch.float64)
    assert torch.count_nonzero(gaussian_oracle_velocity([0.0, 0.0], 1.0, x, 0.5)) == 0


def test_oracle_delta_limit():
    mu = torch.tensor([0.5, -2.0], dtype=torch.float64)
    eps = torch.randn(6, 2, dtype=torch.float64)
    for t in (0.2, 0.6):
        x_t = (1 - t) * mu + t * eps
        v = gaussian_oracle_velocity(mu, 1e-6, x_t, t)
        assert torch.allclose(v, eps - mu, atol=1e-9)


def test_oracle_monte_carlo():
    """Self-normalized importance sampling of E[eps - x0 | x_t] with 10^6 draws."""
    mu, sigma = np.array([1.0, -1.0]), 0.5
    rng = np.random.default_rng(0)
    x0 = mu + sigma * rng.standard_normal((1_000_000, 2))
    for t, x_t in [(0.2, (0.9, -0.7)), (0.4, (0.2, -0.9)), (0.5, (0.5, -0.5)), (0.7, (0.0, 0.3)), (0.9, (-0.6, 0.8))]:
        x_t = np.array(x_t)
        eps = (x_t - (1 - t) * x0) / t
        logw = -0.5 * (eps**2).sum(1)
        w = np.exp(logw - logw.max())
        w /= w.sum()
        target = eps - x0
        est = (w[:, None] * target).sum(0)
        ess_var = (w[:, None] ** 2 * (target - est) ** 2).sum(0)
        se = np.sqrt(ess_var)
        v = gaussian_oracle_velocity(mu, sigma, torch.from_numpy(x_t[None]), t)[0].numpy()
        assert (np.abs(v - est) <= 3 * se + 1e-12).all(), (t, v, est, se)


def test_oracle_per_item_times():
    x = torch.randn(3, 2, dtype=torch.float64)
    t = torch.tensor([0.1, 0.5, 0.9], dtype=torch.float64)
    batched = gaussian_oracle_velocity([1.0, 0.0], 0.3, x, t)
    for i in range(3):
        assert torch.allclose(batched[i : i + 1], gaussian_oracle_velocity([1.0, 0.0], 0.3, x[i : i + 1], t[i].item()))


def test_restoration_metrics_examples():
    truth = torch.rand(4, 1, 8, 8)
    truth[0, 0, 0, 0], truth[0, 0, 0, 1] = 0.0, 1.0
    assert restoration_metrics(truth, truth).metrics["mse"] == 0
    rep = restoration_metrics(truth + 0.1, truth)
    assert rep.metrics["mse"] == pytest.approx(0.01, rel=1e-5)
    assert rep.metrics["mae"] == pytest.approx(0.1, rel=1e-5)
    assert rep.metrics["psnr"] == pytest.approx(20.0, abs=1e-3)
    assert rep.counts["mse"] == 4


def test_restoration_metrics_count_mismatch():
    with pytest.raises(ShapeMismatchError):
        restoration_metrics(torch.zeros(3, 2), torch.zeros(4, 2))


def test_report_text_and_csv_roundtrip(tmp_path):
    rep = EvalReport()
    rep.add("a", 0.1, 10, 3)
    rep.add("b", math.inf, 5)
    rep.save(tmp_path / "r.txt")
    back = EvalReport.load(tmp_path / "r.txt")
    assert back.metrics == rep.metrics and back.counts == rep.counts and back.seeds == rep.seeds
    rep.to_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[1] == "a,0.1,10,3"
    (tmp_path / "bad.txt").write_text("nonsense\n")
    with pytest.raises(FormatError):
        EvalReport.load(tmp_path / "bad.txt")


@pytest.fixture(scope="module")
def holdout():
    teacher = randomize(MlpField((2,), hidden=(8,)), scale=0.2)
    return teacher, generate_pairs(teacher, 64, 10, DegradationConfig(shrink=0.4, noise=0.05, seed=2))


def test_evaluate_run_oracle_student(holdout):
    teacher, ds = holdout
    ctx = FtdContext(0.25)
    table = {tuple(z.tolist()): (z - x) / ctx.t_lr for z, x in zip(ds.z_L, ds.z0)}

    def oracle(x, t):
        return torch.stack([table[tuple(row.tolist())] for row in x])

    rep = evaluate_run(oracle, teacher, ds, ctx)
    assert rep.metrics["mse"] <= 1e-12
    assert rep.metrics["sliced_w2_student_teacher"] <= 1e-6
    assert rep.metrics["teacher_straightness"] >= 0


def test_evaluate_run_identity_student(holdout):
    teacher, ds = holdout
    rep = evaluate_run(MlpField((2,)), None, ds, FtdContext())
    energy = (ds.x_L - ds.x0).double().pow(2).mean().item()
    assert rep.metrics["mse"] == pytest.approx(energy, rel=1e-6)
    assert rep.metrics["mse"] == rep.metrics["identity_mse"]
    assert "teacher_straightness" not in rep.metrics


def test_evaluate_run_reproducible(holdout):
    teacher, ds = holdout
    student = randomize(MlpField((2,), hidden=(8,)), scale=0.1, seed=3)
    a = evaluate_run(student, teacher, ds, FtdContext()).to_text()
    assert a == evaluate_run(student, teacher, ds, FtdContext()).to_text()

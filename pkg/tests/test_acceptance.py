"""Acceptance suite: one PASS/FAIL line per criterion.

Criteria 6 to 8 read artifacts written by ``scripts/desk_scale.py``; the
location defaults to ``<repo>/runs/desk`` and can be moved with
``OBAI_DESK_ROOT``. Missing artifacts count as failures.
"""
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn as tnn
from scipy.optimize import least_squares

from obai.env import EnvState, ObjectSpec, make_rng, object_action_from_field, render, sample_scene, step
from obai.inference import OBAI, BeliefSet, GradTape, InferenceConfig, Noise, run_inference
from obai.losses import composite_loss, elbo, enumerate_action_expectation, jensen_gap, sampled_action_loglik
from obai.model import ModelConfig
from obai.nn import ELU, float64_shadow, inv_softplus, same_conv_transpose, softplus
from obai.planner import greedy_action
from obai.preference import Preference, PreferenceSample, fit_preference
from obai.train import TrainConfig

from .gradcheck import finite_difference_check

DESK = Path(os.environ.get("OBAI_DESK_ROOT", Path(__file__).resolve().parents[1] / "runs" / "desk"))
SIGMA_PSI = 0.3


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


def test_criterion_1_environment_exactness(capsys):
    t0 = time.time()
    worst = 0.0
    for i in range(1000):
        s = sample_scene(make_rng(1000 + i), 3)
        p0 = np.stack([o.position for o in s.objects])
        v0 = np.stack([o.velocity for o in s.objects])
        # a zero field sums to zero on any mask, so one render per scene suffices
        mask = render(s)[1]
        zero = np.zeros((*s.frame_size, 2))
        for t in range(1, 11):
            s = step(s, zero, mask)
            pos = np.stack([o.position for o in s.objects])
            worst = max(worst, float(np.abs(pos - (p0 + t * v0)).max()))

    # constructed action sums, checked for exact equality
    mask = np.zeros((6, 6), int)
    mask[1:3, 1:4] = 1
    mask[4:, 4:] = 2
    field = np.zeros((6, 6, 2))
    field[1, 1] = (1.0, -2.0)
    field[2, 3] = (0.5, 0.25)
    field[4, 5] = (-3.0, 1.0)
    field[0, 0] = (7.0, 7.0)  # background
    sums_ok = (np.array_equal(object_action_from_field(field, mask, 0), [1.5, -1.75])
               and np.array_equal(object_action_from_field(field, mask, 1), [-3.0, 1.0]))
    obj = ObjectSpec("square", 10.0, (1.0, 0.0, 0.0), np.array([10.0, 10.0]), np.array([1.0, 0.5]), 0)
    s = EnvState([obj], 0.5, (32, 32))
    _, m = render(s)
    f = np.zeros((32, 32, 2))
    f[10, 10] = (2.0, -1.0)
    f[11, 9] = (0.25, 0.5)
    n = step(s, f, m)
    step_ok = (np.array_equal(n.objects[0].velocity, [3.25, 0.0])
               and np.array_equal(n.objects[0].position, [13.25, 10.0]))
    dt = time.time() - t0
    ok = worst <= 1e-5 and sums_ok and step_ok and dt < 60
    verdict(capsys, 1, ok, f"max |p - (p0 + t v0)| = {worst:.2e} px over 1000 scenes x 10 steps; "
                           f"action sums exact={sums_ok and step_ok}; {dt:.1f}s")


def _tiny_model():
    return OBAI(ModelConfig(latent_dim=4, n_slots=2, frame_size=(8, 8), decoder_channels=6, decoder_layers=2,
                            seed=3))


def test_criterion_2_gradient_suite(capsys):
    t0 = time.time()
    worst = {}
    with float64_shadow():
        torch.manual_seed(0)
        layers = {
            "conv": (tnn.Conv2d(2, 3, 5, stride=2, padding=2), (2, 2, 8, 8)),
            "conv_transpose": (same_conv_transpose(2, 3), (2, 2, 8, 8)),
            "linear": (tnn.Linear(4, 3), (5, 4)),
        }
        for name, (layer, shape) in layers.items():
            x = torch.randn(shape, requires_grad=True)
            worst[name] = finite_difference_check(lambda: torch.tanh(layer(x)).sum(), [x, *layer.parameters()],
                                                  eps=1e-6)
        cell = tnn.LSTMCell(4, 3)
        x = torch.randn(2, 4, requires_grad=True)

        def lstm():
            h, c = cell(x)
            h, c = cell(x, (h, c))
            return (h ** 2).sum() + c.sum()
        worst["lstm"] = finite_difference_check(lstm, [x, *cell.parameters()], eps=1e-6)
        z = torch.randn(3, 6, requires_grad=True)
        worst["elu_softplus_softmax"] = finite_difference_check(
            lambda: (ELU()(z) * torch.softmax(z, -1)).sum() + softplus(z).sum(), [z], eps=1e-6)

        model = _tiny_model()
        lat = torch.randn(1, 1, 2, 8, requires_grad=True)
        target = torch.rand(1, 1, 3, 8, 8)
        worst["decoder"] = finite_difference_check(
            lambda: ((model.decode(lat).reconstruction() - target) ** 2).sum(),
            [lat, *model.gen.parameters()], eps=1e-5, atol=1e-6, max_coords=10)

        g = torch.Generator().manual_seed(2)
        frames = torch.rand(1, 2, 3, 8, 8, generator=g)
        fields = torch.zeros(1, 2, 8, 8, 2)
        fields[:, 1, 2, 3] = torch.tensor([1.5, -0.5])
        fields[:, 1, 6, 6] = torch.tensor([-1.0, 2.0])
        bel = BeliefSet(*(torch.randn(1, 2, 2, n, generator=g, requires_grad=True) for n in (8, 8, 2, 2)))
        eps_s = torch.randn(1, 2, 2, 8, generator=g)
        eps_a = torch.randn(1, 2, 2, 2, generator=g)
        uni = torch.rand(1, 1, 2, 2, 8, 8, generator=g)

        def beta_elbo():
            s = bel.state_mean + bel.state_std * eps_s
            a = bel.act_mean + bel.act_std * eps_a
            return elbo(frames, fields, s, a, bel, model.decode(s), model.gen, 5.0, 0.5, uniform=uni).total
        worst["beta_elbo"] = finite_difference_check(beta_elbo, bel.tensors() + list(model.gen.parameters()),
                                                     eps=1e-5, atol=1e-6, max_coords=10)

        tape = GradTape()

        def composite():
            res = run_inference(model, frames, fields, InferenceConfig(iters_per_frame=2), tau=0.5,
                                noise=Noise(torch.Generator().manual_seed(0)), train=True, tape=tape)
            tape.replay = True
            return composite_loss(res.losses)
        composite()
        worst["composite"] = finite_difference_check(composite, list(model.parameters()), eps=1e-5, atol=1e-6,
                                                     max_coords=4)
    dt = time.time() - t0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(capsys, 2, max(worst.values()) < 1e-4 and dt < 600, f"worst rel-err per check: {detail}; {dt:.0f}s")


GUMBEL_CASES = [(4, 2), (6, 3), (8, 2), (12, 2), (5, 3)]


def test_criterion_3_gumbel_and_jensen(capsys):
    t0 = time.time()
    n_draws, tau = 100_000, 0.1
    rel = []
    for seed, (n_pixels, k) in enumerate(GUMBEL_CASES):
        g = torch.Generator().manual_seed(seed)
        logits = torch.randn(k, n_pixels, generator=g, dtype=torch.float64) * 1.5
        field = torch.randn(n_pixels, 2, generator=g, dtype=torch.float64)
        a_mean = torch.randn(k, 2, generator=g, dtype=torch.float64)
        a_std = 0.2 + torch.rand(k, 2, generator=g, dtype=torch.float64)
        exact = enumerate_action_expectation(a_mean, a_std ** 2, logits, field, SIGMA_PSI)
        est = sampled_action_loglik(a_mean.expand(n_draws, k, 2), inv_softplus(a_std).expand(n_draws, k, 2),
                                    logits[:, None].expand(n_draws, k, 1, n_pixels),
                                    field[None].expand(n_draws, 1, n_pixels, 2), SIGMA_PSI, tau,
                                    generator=g).mean(0)
        rel.append(float(((est - exact).abs() / exact.abs()).max()))

    g = torch.Generator().manual_seed(5)
    order_ok = True
    for _ in range(100):
        k = int(torch.randint(2, 4, (1,), generator=g))
        p = int(torch.randint(1, 6 if k == 3 else 9, (1,), generator=g))
        lhs, rhs = jensen_gap(torch.randn(k, 2, generator=g, dtype=torch.float64),
                              torch.randn(k, p, generator=g, dtype=torch.float64) * 2,
                              torch.randn(p, 2, generator=g, dtype=torch.float64) * 2, SIGMA_PSI)
        order_ok &= bool(torch.all(lhs <= rhs + 1e-12))
    owner = torch.randint(0, 3, (5,), generator=g)
    hard = torch.where(torch.nn.functional.one_hot(owner, 3).T.bool(), 1e6, -1e6).double()
    lhs, rhs = jensen_gap(torch.randn(3, 2, generator=g, dtype=torch.float64), hard,
                          torch.randn(5, 2, generator=g, dtype=torch.float64), SIGMA_PSI)
    eq_gap = float((lhs - rhs).abs().max())
    dt = time.time() - t0
    ok = max(rel) <= 0.01 and order_ok and eq_gap <= 1e-9 and dt < 300
    verdict(capsys, 3, ok, f"Gumbel tau=0.1 rel-err per instance {[round(r, 4) for r in rel]} (tol 0.01); "
                           f"Jensen lhs<=rhs on 100: {order_ok}; zero-entropy gap {eq_gap:.1e}; {dt:.0f}s")


def test_criterion_4_planner_oracle(capsys):
    t0 = time.time()
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        D = rng.normal(size=(16, 2))
        pref = Preference(rng.normal(size=16), rng.uniform(0.2, 3, size=16))
        mu = rng.normal(size=16) * 2
        a = greedy_action(mu, pref, D)
        sq = np.sqrt(pref.precision)
        res = least_squares(lambda x: sq * (pref.mean - (mu + D @ x)), np.zeros(2), xtol=1e-15, ftol=1e-15,
                            gtol=1e-15)
        worst = max(worst, float(np.abs(a - res.x).max() / np.abs(res.x).max()))
    ident = 0.0
    for _ in range(20):
        pref = Preference(rng.normal(size=2), np.ones(2))
        mu = rng.normal(size=2)
        ident = max(ident, float(np.abs(greedy_action(mu, pref, np.eye(2)) - (pref.mean - mu)).max()))
    dt = time.time() - t0
    ok = worst < 1e-4 and ident <= 1e-12 and dt < 60
    verdict(capsys, 4, ok, f"closed form vs least squares worst rel-err {worst:.1e} on 100; "
                           f"D=I,L=I max deviation {ident:.1e}; {dt:.1f}s")


def test_criterion_5_preference_fitting(capsys):
    t0 = time.time()
    rng = np.random.default_rng(3)
    worst_z = 0.0
    for _ in range(20):
        samples = [PreferenceSample(rng.normal(size=3) * 2, rng.uniform(0.1, 2.0, size=3), rng.uniform(0, 3))
                   for _ in range(5)]
        p = fit_preference(samples)
        u = np.array([s.weight for s in samples])
        comp = rng.choice(len(samples), size=1_000_000, p=u / u.sum())
        x = (np.stack([s.mu for s in samples])[comp]
             + np.stack([s.sigma for s in samples])[comp] * rng.normal(size=(1_000_000, 3)))
        n = len(x)
        c = x - x.mean(0)
        z_mean = np.abs(x.mean(0) - p.mean) / (x.std(0) / np.sqrt(n))
        z_var = np.abs(x.var(0) - p.std ** 2) / np.sqrt(((c ** 4).mean(0) - x.var(0) ** 2) / n)
        worst_z = max(worst_z, float(z_mean.max()), float(z_var.max()))
        scaled = fit_preference([PreferenceSample(s.mu, s.sigma, s.weight * 37.5) for s in samples])
        inv = max(float(np.abs(scaled.mean - p.mean).max()), float(np.abs(scaled.std - p.std).max()))
        assert inv <= 1e-12
    dt = time.time() - t0
    verdict(capsys, 5, worst_z < 3 and dt < 120,
            f"worst |MC - fit| = {worst_z:.2f} standard errors over 20 instances (tol 3); "
            f"weight-scale invariance holds; {dt:.0f}s")


def _load(path):
    return json.loads(Path(path).read_text())


def _require(capsys, n, *paths):
    missing = [str(p) for p in paths if not Path(p).exists()]
    if missing:
        verdict(capsys, n, False, f"missing artifacts: {', '.join(missing)}")


def test_criterion_6_desk_scale_learning(capsys):
    files = [DESK / "obai" / "eval" / "eval_report.json", DESK / "static" / "eval" / "eval_report.json",
             DESK / "obai" / "config.txt", DESK / "static" / "config.txt", DESK / "data" / "train" / "manifest.json",
             DESK / "obai" / "done.json", DESK / "static" / "done.json"]
    _require(capsys, 6, *files)
    full, static = _load(files[0]), _load(files[1])
    cfg = TrainConfig.from_text(files[2].read_text())
    scfg = TrainConfig.from_text(files[3].read_text())
    data = _load(files[4])["config"]
    setup_ok = (tuple(data["frame_size"]) == (32, 32) and data["n_objects"] == 2 and data["n_videos"] == 5000
                and cfg.n_slots == 3 and cfg.batch == 16 and cfg.epochs <= 30 and not cfg.static
                and scfg.static and scfg.n_slots == 3 and scfg.batch == 16 and scfg.epochs <= 30)
    hours = (_load(files[5])["seconds"] + _load(files[6])["seconds"]) / 3600
    ok = (setup_ok and full["fari"] >= 0.70 and full["mse"] <= 5e-3 and full["ari"] > static["ari"]
          and hours <= 4)
    verdict(capsys, 6, ok, f"FARI {full['fari']:.3f} (>=0.70), MSE {full['mse']:.2e} (<=5e-3), "
                           f"ARI {full['ari']:.3f} vs static {static['ari']:.3f}; setup ok={setup_ok} "
                           f"({cfg.epochs} epochs); training {hours:.2f} h (target 4 h)")


def test_criterion_7_prediction_beats_persistence(capsys):
    path = DESK / "obai" / "eval" / "eval_report.json"
    _require(capsys, 7, path)
    rows = _load(path)["per_video"]
    two = [r for r in rows if len(r.get("prediction_mse", [])) >= 2]
    if not two:
        verdict(capsys, 7, False, "no 2-step rollouts in the report")
    wins = [np.mean(r["prediction_mse"][:2]) < np.mean(r["baseline_mse"][:2]) for r in two]
    frac = float(np.mean(wins))
    verdict(capsys, 7, frac >= 0.80, f"2-step rollout beats persistence on {frac:.1%} of {len(two)} videos "
                                     f"(tol 80%)")


def test_criterion_8_goal_directed_imagination(capsys):
    rep_path, pref_path = DESK / "plan" / "plan_report.json", DESK / "pref" / "summary.json"
    _require(capsys, 8, rep_path, pref_path)
    rep, pref = _load(rep_path), _load(pref_path)
    frac = rep["fraction_closer"]
    n = len(rep["scenes"])
    ok = frac >= 0.90 and n == 200 and pref["n_samples"] + pref["dropped"] >= 2000
    verdict(capsys, 8, ok, f"centroids strictly closer to goal on {frac:.1%} of {n} scenes (tol 90%); "
                           f"preference from {pref['n_samples']} samples")

import warnings

import numpy as np
import pytest

from heatflow.cloud import ConfigurationError, PointCloud, SynthSpec, normalize_unit_sphere, synth_shape
from heatflow.diffusion import DiffusionSchedule, forward_diffuse
from heatflow.metrics import ContractError, chamfer, compare
from heatflow.nets import denoise_step
from heatflow.pipeline import (
    EvalCase,
    ResampleRequest,
    TrainConfig,
    TrainedModel,
    TrainSample,
    aggregate,
    evaluate,
    make_pair,
    prepare_pair,
    read_testset,
    resample,
    reverse_sample,
    sample_loss,
    seed_upsample,
    smoke_config,
    synthetic_testset,
    train,
    write_testset,
)
from heatflow.autodiff import Tape


def tiny_config(**kw):
    base = dict(epochs=2, batch_size=2, steps=3, k=8, width=8,
                dataset=[TrainSample(SynthSpec("sphere", 32, 0.02, 1)), TrainSample(SynthSpec("torus", 32, 0.01, 2))])
    base.update(kw)
    return TrainConfig(**base)


def test_pair_cardinalities():
    x_l, x_h = make_pair(SynthSpec("sphere", 256, 0.02, 0), "denoise")
    assert x_l.n == x_h.n == 256
    x_l, x_h = make_pair(SynthSpec("sphere", 256, 0.0, 0), "upsample", 4)
    assert (x_l.n, x_h.n) == (64, 256)
    x_l, x_h = make_pair(SynthSpec("sphere", 256, 0.0, 0), "upsample", 1)
    assert x_l == x_h


def test_pair_padding_warns():
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        x_l, x_h = make_pair(SynthSpec("sphere", 30, 0.0, 0), "upsample", 4)
    assert (x_l.n, x_h.n) == (8, 32) and w


def test_upsample_subset_of_dense():
    x_l, x_h = make_pair(SynthSpec("torus", 128, 0.0, 3), "upsample", 4)
    d = np.linalg.norm(x_l.points[:, None] - x_h.points[None], axis=2).min(axis=1)
    assert np.all(d == 0)


def test_seed_upsample():
    x = PointCloud(np.random.default_rng(0).standard_normal((64, 3)))
    assert seed_upsample(x, 1, 0.0) == x
    out = seed_upsample(x, 4, 0.01, seed=3)
    assert out.n == 256
    off = out.points - np.repeat(x.points, 4, axis=0)
    # Gaussian tail: about 0.27% of coordinates beyond 3 sigma, none near 6 sigma
    assert np.mean(np.abs(off) > 0.03) < 0.01 and np.max(np.abs(off)) < 0.06
    assert seed_upsample(x, 4, 0.01, seed=3) == out
    assert seed_upsample(x, 4, 0.01, seed=4) != out


def test_prepared_pair_frame():
    p = prepare_pair(TrainSample(SynthSpec("sphere", 64, 0.0, 1), "upsample", 4), 0.01, 0)
    assert p.x_l.shape == p.x_h.shape == (64, 3)
    assert np.max(np.linalg.norm(p.x_h, axis=1)) < 1.2


def test_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.epochs, c.batch_size, c.lr, c.delta) == (300, 16, 0.0002, 0.01)
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"epoch": 3})
    with pytest.raises(ConfigurationError):
        TrainConfig(lr=-1)
    c2 = TrainConfig.from_dict(tiny_config().to_dict())
    assert c2.to_dict() == tiny_config().to_dict()


def test_request_validation():
    x = PointCloud(np.zeros((4, 3)))
    with pytest.raises(ConfigurationError):
        ResampleRequest(x, "sharpen")
    with pytest.raises(ConfigurationError):
        ResampleRequest(x, "upsample", 3)
    with pytest.raises(ConfigurationError):
        ResampleRequest(x, "denoise", 4)


def test_identity_denoiser_returns_diffused_input():
    model = TrainedModel(tiny_config())
    x_l, _ = make_pair(SynthSpec("sphere", 40, 0.02, 5), "denoise")
    out = reverse_sample(model, x_l, delta=0.0)
    x, tf = normalize_unit_sphere(x_l)
    times = model.schedule.times(3).value
    t_max = float(model.schedule.t_max().value)
    traj = forward_diffuse(x, DiffusionSchedule(times, model.tau.value()), k=8,
                           scale_fn=lambda f, t: model.scale(f, t, t_max).value)
    np.testing.assert_allclose(out.points, tf.inverse(traj.final).points, atol=1e-10)


def test_contract_errors():
    model = TrainedModel(tiny_config())
    x = PointCloud(np.random.default_rng(0).standard_normal((20, 3)))
    with pytest.raises(ContractError):
        reverse_sample(model, x, steps=4)
    with pytest.raises(ContractError):
        reverse_sample(model, x, k=16)


def test_cardinality_contract():
    model = TrainedModel(tiny_config())
    x = PointCloud(np.random.default_rng(1).standard_normal((20, 3)))
    assert resample(model, ResampleRequest(x, "denoise")).n == 20
    assert resample(model, ResampleRequest(x, "upsample", 4)).n == 80
    assert resample(model, ResampleRequest(x, "upsample", 16)).n == 320


def test_sample_loss_has_gradients():
    model = TrainedModel(tiny_config())
    pair = prepare_pair(tiny_config().dataset[0], 0.01, 0)
    params = model.parameters()
    with Tape() as tape:
        terms = sample_loss(model, pair, np.random.default_rng(0))
    g = tape.backward(terms.total, list(params.values()))
    assert terms.total.item() > 0 and len(terms.per_step) == 2
    for name in ("tau.raw", "schedule.tmax_raw", "scale.b2", "denoiser.coef_b"):
        assert np.any(g[params[name]] != 0), name


def test_training_deterministic(tmp_path):
    a, b = train(tiny_config()), train(tiny_config())
    assert a.history == b.history and len(a.history) == 4
    assert a.dumps() == b.dumps()
    a.save(tmp_path / "m.ckpt")
    c = TrainedModel.load(tmp_path / "m.ckpt")
    x = PointCloud(np.random.default_rng(2).standard_normal((24, 3)))
    assert reverse_sample(a, x, seed=9) == reverse_sample(c, x, seed=9)
    assert c.history == a.history and c.epoch_losses == a.epoch_losses


def test_evaluate_and_aggregate():
    model = TrainedModel(tiny_config())
    cases = synthetic_testset(count=2, n=32)
    result = evaluate(model, cases)
    keys = list(result.cells)
    assert keys == [("denoise", "0.01"), ("denoise", "0.02"), ("denoise", "0.03"), ("upsample", "4"), ("upsample", "16")]
    rows = [r for c, r in result.rows if c.request.mode == "denoise" and c.param == 0.02]
    assert abs(result.cells[("denoise", "0.02")]["cd"] - np.mean([r.chamfer for r in rows])) < 1e-15
    lines = result.csv().splitlines()
    assert lines[0] == "sample,mode,param,cd,hd,emd" and len(lines) == 1 + len(cases)
    assert evaluate(model, cases, workers=2).csv() == result.csv()


def test_identical_prediction_zero_row():
    x = PointCloud(np.random.default_rng(3).standard_normal((10, 3)))
    r = compare(x, x)
    assert (r.chamfer, r.hausdorff, r.emd) == (0, 0, 0)
    rows = [(EvalCase("a", ResampleRequest(x), x, 0.01), r)]
    assert aggregate(rows)[("denoise", "0.01")]["cd"] == 0


def test_testset_round_trip(tmp_path):
    cases = synthetic_testset(count=1, n=32)
    write_testset(cases, tmp_path)
    back = read_testset(tmp_path)
    assert [c.name for c in back] == [c.name for c in cases]
    for a, b in zip(cases, back):
        assert a.request.mode == b.request.mode and a.param == b.param
        assert a.reference.allclose(b.reference) and a.request.cloud.allclose(b.request.cloud)


# -- measured on the desk-scale model -----------------------------------------


def test_smoke_training_progress(smoke_model):
    assert smoke_model.epoch_losses[-1] < smoke_model.epoch_losses[0]
    h = np.asarray(smoke_model.history)
    m = max(1, len(h) // 10)
    assert np.median(h[-m:]) < np.median(h[:m])


def test_trained_loss_halves_initial(smoke_model):
    model = smoke_model
    init = TrainedModel(model.config)
    pairs = [prepare_pair(s, model.config.jitter, np.random.default_rng([0, 7, i]))
             for i, s in enumerate(model.config.dataset)]

    def mean_loss(m):
        return np.mean([sample_loss(m, p, np.random.default_rng(i)).total.item() for i, p in enumerate(pairs)])

    assert mean_loss(model) <= 0.5 * mean_loss(init)


def test_one_step_reduces_chamfer(smoke_model):
    model = smoke_model
    x_l, x_h = make_pair(SynthSpec("sphere", 128, 0.02, 777), "denoise")
    x, tf = normalize_unit_sphere(x_l)
    ref = tf.apply(x_h)
    times = model.schedule.times(model.config.steps).value
    t_max = float(model.schedule.t_max().value)
    traj = forward_diffuse(ref, DiffusionSchedule(times, model.tau.value()), k=model.config.k,
                           scale_fn=lambda f, t: model.scale(f, t, t_max).value)
    z = traj.states[1]
    cond = model.denoiser.encode_condition(x)
    pred = denoise_step(model.denoiser, z, times[1], cond, t_max=t_max)
    assert chamfer(pred, ref) < chamfer(z, ref)


def test_sampling_concentrates(smoke_model):
    x_l, _ = make_pair(SynthSpec("sphere", 128, 0.02, 778), "denoise")
    a = reverse_sample(smoke_model, x_l, delta=0.01, seed=1)
    b = reverse_sample(smoke_model, x_l, delta=0.01, seed=2)
    assert a != b
    assert chamfer(a, b) < min(chamfer(a, x_l), chamfer(b, x_l))


def test_trained_sphere_denoise(smoke_model):
    x_l, x_h = make_pair(SynthSpec("sphere", 128, 0.02, 779), "denoise")
    x_o = reverse_sample(smoke_model, x_l, seed=0)
    assert chamfer(x_o, x_h) < chamfer(x_l, x_h)

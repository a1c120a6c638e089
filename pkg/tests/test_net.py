import numpy as np
import pytest

from crossreg import net
from crossreg.tdf import voxelize_tdf

from oracles import gradient_check, small_config, small_pool_config, toy_grids


@pytest.fixture(scope="module")
def desk():
    return net.NetWeights.init(net.desk_config(), 0)


def test_desk_and_full_configs_have_nine_convs_one_pool():
    for cfg in (net.desk_config(), net.full_config()):
        kinds = [layer.kind for layer in cfg.layers]
        assert kinds.count("conv3d") == 9 and kinds.count("maxpool3d") == 1
        assert min(cfg.spatial_dims()) > 0


def test_config_rejects_vanishing_grid():
    with pytest.raises(ValueError):
        net.NetConfig((net.conv(4), net.conv(4)), input_dim=4).spatial_dims()


def test_zero_grid_gives_zero_descriptor(desk):
    np.testing.assert_array_equal(net.forward(desk, np.zeros((16, 16, 16))), 0)


def test_forward_is_deterministic(desk):
    g = np.random.default_rng(0).uniform(size=(16, 16, 16))
    np.testing.assert_array_equal(net.forward(desk, g), net.forward(desk, g))


@pytest.mark.parametrize("channels", [(4, 5), (2, 8), (6, 3)])
def test_descriptor_length(channels):
    cfg = net.NetConfig((net.conv(channels[0]), net.pool(), net.conv(channels[1])), input_dim=8)
    w = net.NetWeights.init(cfg, 1)
    assert net.forward(w, np.ones((8, 8, 8))).shape == (channels[1],)
    assert cfg.descriptor_dim == channels[1]


def test_shape_mismatch(desk):
    with pytest.raises(net.ShapeError):
        net.forward(desk, np.zeros((8, 8, 8)))


def test_descriptor_distance():
    assert net.descriptor_distance([1, 2], [1, 2]) == 0
    assert net.descriptor_distance([3, 0, 0], [0, 4, 0]) == 5
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(2, 7))
    assert net.descriptor_distance(a, b) == net.descriptor_distance(b, a)
    with pytest.raises(net.ShapeError):
        net.descriptor_distance([1], [1, 2])


def test_contrastive_loss_cases():
    assert net.contrastive_loss(0.0, True) == (0.0, 0.0)
    assert net.contrastive_loss(1.5, False, 1.0) == (0.0, 0.0)
    assert net.contrastive_loss(1.0, False, 1.0) == (0.0, 0.0)
    assert net.contrastive_loss(0.0, False, 1.0) == (1.0, -2.0)
    assert net.contrastive_loss(0.5, True) == (0.25, 1.0)


def test_best_matches_ties_to_lowest_index():
    a = np.array([[0.0, 0.0]])
    b = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    assert net.best_matches(a, b).tolist() == [0]


@pytest.mark.parametrize("seed", range(4))
def test_gradient_check_two_conv(seed):
    assert gradient_check(small_config(), seed) < 1e-3


@pytest.mark.parametrize("seed", range(2))
def test_gradient_check_with_pool(seed):
    assert gradient_check(small_pool_config(), seed) < 1e-3


def test_zero_loss_gives_zero_gradients():
    w = net.NetWeights.init(small_config(), 0, np.float64)
    rng = np.random.default_rng(0)
    ga, gb = rng.uniform(size=(2, 4, 4, 4))
    loss, g = net.backward(w, ga, gb, False, margin=1e-9)
    assert loss == 0
    assert all(not np.any(p) for p in g.params())
    loss, g = net.backward(w, ga, ga, True)
    assert loss == 0
    assert all(not np.any(p) for p in g.params())


def test_toy_training_drops_loss_tenfold():
    ga, gb, pos = toy_grids(32)
    cfg = net.TrainConfig(learning_rate=0.05, epochs=50, batch_size=32, seed=0)
    _, hist = net.train(net.NetWeights.init(net.desk_config(), 0), ga, gb, pos, cfg)
    assert hist[-1].mean_loss < 0.1 * hist[0].mean_loss
    assert hist[-1].pos_mean_dist < hist[-1].neg_mean_dist


def test_zero_learning_rate_and_determinism():
    ga, gb, pos = toy_grids(8, seed=1, dim=8)
    cfg = net.NetConfig((net.conv(4), net.pool(), net.conv(4, padding=1)), input_dim=8)
    w0 = net.NetWeights.init(cfg, 3)
    w, hist = net.train(w0, ga, gb, pos, net.TrainConfig(learning_rate=0.0, epochs=3, batch_size=4))
    for p, q in zip(w.params(), w0.params()):
        np.testing.assert_array_equal(p, q)
    assert len({h.mean_loss for h in hist}) == 1
    run = lambda: net.train(w0, ga, gb, pos, net.TrainConfig(learning_rate=0.1, epochs=3, batch_size=4))[1]  # noqa: E731
    assert [h.mean_loss for h in run()] == [h.mean_loss for h in run()]


def test_unbalanced_dataset_rejected():
    ga, gb, pos = toy_grids(4, dim=8)
    pos[:] = True
    cfg = net.NetConfig((net.conv(2), net.conv(2)), input_dim=8)
    with pytest.raises(ValueError, match="unbalanced"):
        net.train(net.NetWeights.init(cfg), ga, gb, pos, net.TrainConfig(batch_size=2))


def test_odd_batch_rejected():
    with pytest.raises(ValueError):
        net.TrainConfig(batch_size=3)


def test_weights_roundtrip(tmp_path, desk):
    net.save_weights(desk, tmp_path / "w.bin")
    back = net.load_weights(tmp_path / "w.bin", expected=net.desk_config())
    grids = np.random.default_rng(4).uniform(size=(10, 16, 16, 16))
    np.testing.assert_array_equal(net.forward_batch(back, grids), net.forward_batch(desk, grids))
    assert (tmp_path / "w.bin").read_bytes()[:4] == b"XSDN"


def test_truncated_and_mismatched_weight_files(tmp_path, desk):
    net.save_weights(desk, tmp_path / "w.bin")
    raw = (tmp_path / "w.bin").read_bytes()
    (tmp_path / "cut.bin").write_bytes(raw[:-10])
    with pytest.raises(net.WeightFileError):
        net.load_weights(tmp_path / "cut.bin")
    with pytest.raises(net.WeightFileError):
        net.load_weights(tmp_path / "w.bin", expected=net.full_config())


def test_descriptor_translation_invariance(desk):
    pts = np.random.default_rng(5).normal(size=(120, 3))
    a = net.forward(desk, voxelize_tdf(pts))
    b = net.forward(desk.astype(np.float64), voxelize_tdf(pts + [7.0, -2.0, 30.0]))
    np.testing.assert_allclose(b, a, atol=1e-6)
    a64 = net.forward(desk.astype(np.float64), voxelize_tdf(pts))
    np.testing.assert_allclose(b, a64, atol=1e-9)


def test_history_csv(tmp_path):
    hist = [net.EpochStats(0, 0.5, 0.1, 0.9), net.EpochStats(1, 0.25, 0.05, 1.0)]
    net.save_history(hist, tmp_path / "loss.csv")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,mean_loss,pos_mean_dist,neg_mean_dist"
    assert lines[2] == "1,0.25,0.05,1.0"

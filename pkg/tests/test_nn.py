import numpy as np
import pytest

from hapt3d.autodiff import Var, backward as ad_backward, param
from hapt3d.cloud import LabeledCloud
from hapt3d.loss import (
    InstanceSpec,
    LossConfig,
    embeddings,
    instance_level_loss,
    total_loss,
    weighted_cross_entropy,
)
from hapt3d.nn import (
    ConvBlock,
    Head,
    Network,
    NetworkConfig,
    NormLayer,
    ParamStore,
    ResidualBlock,
    StateError,
    backward,
    batch_norm,
    build_network,
    load_checkpoint,
    normalize_scheme,
    save_checkpoint,
)
from hapt3d.sparse import SparseTensor, build_kernel_map

from helpers import fd_grad


def toy_cloud(rng, n=40, extent=0.8):
    pos = rng.uniform(0, extent, (n, 3))
    colors = rng.uniform(0, 1, (n, 3))
    sem = rng.integers(0, 5, n)
    tree = np.where(np.isin(sem, (1, 3)), rng.integers(0, 2, n), -1)
    inst = np.where(sem == 1, tree, np.where(sem == 3, tree + 2, -1))
    return LabeledCloud(pos, colors, sem, tree, inst)


def toy_config(**kw):
    kw.setdefault("encoder_channels", (4, 8, 8, 8))
    kw.setdefault("voxel_size", 0.02)
    kw.setdefault("seed", 3)
    return NetworkConfig(**kw)


def training_loss(net, cloud, out=None):
    out = net.forward(cloud) if out is None else out
    from hapt3d.cloud import class_frequencies
    from hapt3d.sparse import unique_coords

    w = class_frequencies([cloud])
    _, p2v = unique_coords(cloud.positions, cloud.colors, net.config.voxel_size)
    # per-voxel targets: label of the first point in each voxel (toy rule)
    m = out.semantic_logits.shape[0]
    sem = np.zeros(m, dtype=int)
    tree = np.full(m, -1)
    inst = np.full(m, -1)
    sem[p2v] = cloud.semantic
    tree[p2v] = cloud.tree_id
    inst[p2v] = cloud.instance_id
    centers = out.voxel_centers()
    cfg = LossConfig(eta_tree=0.05, eta_instance=0.02)
    l_sem = weighted_cross_entropy(out.semantic_logits, sem, w)
    l_tree, _ = instance_level_loss(
        embeddings(centers, out.tree_offsets), InstanceSpec.from_labels(tree), cfg.eta_tree
    )
    l_ins, _ = instance_level_loss(
        embeddings(centers, out.instance_offsets), InstanceSpec.from_labels(inst),
        cfg.eta_instance,
    )
    return total_loss(l_sem, l_tree, l_ins, cfg)


# -- layer primitives ----------------------------------------------------------


def test_relu_zeroes_negative_features():
    v = Var(np.array([[-1.0, -2.0], [-0.5, -3.0]]))
    np.testing.assert_array_equal(v.relu().data, 0.0)


def test_residual_block_with_zero_convs_is_identity():
    store = ParamStore(0)
    block = ResidualBlock(store, "res", 3)
    for name, v in store.params.items():
        if name.endswith("conv.w") or name.endswith("conv.b"):
            v.data[:] = 0.0
    rng = np.random.default_rng(1)
    coords = np.unique(rng.integers(0, 4, (30, 3)), axis=0)
    kmap = build_kernel_map(coords, coords, 3, 1, 1)
    x = Var(rng.normal(size=(len(coords), 3)))
    out = block(x, kmap, training=True)
    np.testing.assert_allclose(out.data, x.data, atol=1e-12)


def test_norm_layer_zero_mean_unit_variance_in_training():
    store = ParamStore(0)
    norm = NormLayer(store, "n", 4, eps=1e-5, momentum=0.9)
    rng = np.random.default_rng(2)
    x = Var(rng.normal(3.0, 2.5, size=(200, 4)))
    y = norm(x, training=True).data
    np.testing.assert_allclose(y.mean(axis=0), 0.0, atol=1e-6)
    np.testing.assert_allclose(y.var(axis=0), 1.0, atol=1e-2)


def test_norm_layer_eval_uses_running_stats():
    store = ParamStore(0)
    norm = NormLayer(store, "n", 2, eps=1e-5, momentum=0.0)  # running = last batch
    rng = np.random.default_rng(3)
    x = rng.normal(1.0, 2.0, size=(100, 2))
    norm(Var(x), training=True)
    y = norm(Var(x), training=False).data
    expect = (x - x.mean(axis=0)) / np.sqrt(x.var(axis=0) + 1e-5)
    np.testing.assert_allclose(y, expect, atol=1e-12)


@pytest.mark.parametrize("which", ["conv_w", "conv_b", "gamma", "beta"])
def test_conv_block_param_gradients_match_fd(which):
    rng = np.random.default_rng(4)
    coords = np.unique(rng.integers(0, 4, (25, 3)), axis=0)
    kmap = build_kernel_map(coords, coords, 3, 1, 1)
    x_data = rng.normal(size=(len(coords), 3))
    coeff = rng.normal(size=(len(coords), 4))

    def make():
        store = ParamStore(7)
        return store, ConvBlock(store, "cb", 3, 4)

    store, block = make()
    names = {"conv_w": "cb.conv.w", "conv_b": "cb.conv.b",
             "gamma": "cb.norm.gamma", "beta": "cb.norm.beta"}
    target = store.params[names[which]]
    out = (block(Var(x_data), kmap, training=True) * coeff).sum()
    ad_backward(out)
    ana = target.grad.copy()

    theta0 = target.data.copy()

    def f(arr):
        target.data = arr
        return (block(Var(x_data), kmap, training=True) * coeff).sum().item()

    num = fd_grad(f, theta0.copy(), h=1e-6)
    target.data = theta0
    np.testing.assert_allclose(ana, num, rtol=1e-5, atol=1e-8)


def test_conv_block_input_gradient_matches_fd():
    rng = np.random.default_rng(5)
    coords = np.unique(rng.integers(0, 3, (20, 3)), axis=0)
    kmap = build_kernel_map(coords, coords, 3, 1, 1)
    store = ParamStore(8)
    block = ConvBlock(store, "cb", 2, 3)
    coeff = rng.normal(size=(len(coords), 3))
    x0 = rng.normal(size=(len(coords), 2))

    v = param(x0)
    ad_backward((block(v, kmap, training=True) * coeff).sum())
    num = fd_grad(
        lambda a: (block(Var(a, requires=False), kmap, training=True) * coeff).sum().item(),
        x0.copy(), h=1e-6,
    )
    np.testing.assert_allclose(v.grad, num, rtol=1e-5, atol=1e-8)


def test_head_is_linear():
    store = ParamStore(1)
    head = Head(store, "h", 4, 2)
    rng = np.random.default_rng(6)
    x = rng.normal(size=(10, 4))
    out = head(Var(x)).data
    np.testing.assert_allclose(out, x @ store.params["h.w"].data[0] + store.params["h.b"].data)


# -- network wiring --------------------------------------------------------------


def test_scheme_normalization():
    assert normalize_scheme("A") == "None"
    assert normalize_scheme("d") == "EncoderDecoder"
    assert normalize_scheme("encoder") == "Encoder"
    with pytest.raises(ValueError):
        normalize_scheme("bogus")


def test_encoder_decoder_stage_input_channel_arithmetic():
    net = build_network(toy_config(skip_scheme="EncoderDecoder"))
    enc, dec = net.config.encoder_channels, net.config.decoder_channels
    for j in range(4):
        level = 3 - j
        enc_ch = enc[level - 1] if level >= 1 else enc[0]
        fuse_w = net.store.params[f"ins{j}.fuse.conv.w"]
        # upsample output + encoder skip + tree-decoder feature
        assert fuse_w.shape[1] == dec[j] + enc_ch + dec[j]


def test_scheme_none_has_no_skips_and_d_has_both():
    net_a = build_network(toy_config(skip_scheme="None"))
    assert all(
        not net_a.skip_sources(d, j) for d in ("sem", "tree", "ins") for j in range(4)
    )
    net_d = build_network(toy_config(skip_scheme="EncoderDecoder"))
    assert net_d.skip_sources("sem", 0) == [("encoder", 8)]
    assert [s for s, _ in net_d.skip_sources("tree", 1)] == ["encoder", "sem"]
    assert [s for s, _ in net_d.skip_sources("ins", 2)] == ["encoder", "tree"]


def test_scheme_decoder_only_semantic_gets_no_skip():
    net = build_network(toy_config(skip_scheme="Decoder"))
    assert net.skip_sources("sem", 2) == []
    assert [s for s, _ in net.skip_sources("tree", 0)] == ["sem"]
    assert [s for s, _ in net.skip_sources("ins", 3)] == ["tree"]


def test_schemes_differ_only_in_fuse_widths():
    params_a = set(build_network(toy_config(skip_scheme="None")).store.params)
    params_c = set(build_network(toy_config(skip_scheme="Encoder")).store.params)
    assert params_a == params_c  # same layers, only concat widths differ


@pytest.mark.parametrize("scheme", ["None", "Decoder", "Encoder", "EncoderDecoder"])
def test_output_shapes_all_schemes(scheme):
    rng = np.random.default_rng(7)
    cloud = toy_cloud(rng, 60)
    net = build_network(toy_config(skip_scheme=scheme))
    out = net.forward(cloud)
    m = len(out.coords)
    assert out.semantic_logits.shape == (m, 5)
    assert out.tree_offsets.shape == (m, 3)
    assert out.instance_offsets.shape == (m, 3)
    assert len(out.point_to_voxel) == len(cloud)


def test_forward_deterministic():
    rng = np.random.default_rng(8)
    cloud = toy_cloud(rng, 50)
    net = build_network(toy_config())
    net.eval_mode()
    a = net.forward(cloud)
    b = net.forward(cloud)
    np.testing.assert_array_equal(a.semantic_logits.data, b.semantic_logits.data)
    np.testing.assert_array_equal(a.tree_offsets.data, b.tree_offsets.data)


def test_forward_permutation_equivariance():
    rng = np.random.default_rng(9)
    cloud = toy_cloud(rng, 50)
    net = build_network(toy_config()).eval_mode()
    out1 = net.forward(cloud)
    perm = rng.permutation(len(cloud))
    out2 = net.forward(cloud.select(perm))
    # voxel rows are canonical, per-point readback follows the permutation
    np.testing.assert_array_equal(out1.semantic_logits.data, out2.semantic_logits.data)
    np.testing.assert_array_equal(out1.point_to_voxel[perm], out2.point_to_voxel)


def test_forward_rejects_empty_cloud():
    from hapt3d.cloud import empty_cloud

    net = build_network(toy_config())
    with pytest.raises(ValueError):
        net.forward(empty_cloud())


def test_k_classes_sets_logit_width():
    rng = np.random.default_rng(10)
    cloud = toy_cloud(rng, 30)
    net = build_network(toy_config(k_classes=5))
    assert net.forward(cloud).semantic_logits.shape[1] == 5


# -- backward and state ------------------------------------------------------------


def test_backward_before_forward_raises():
    net = build_network(toy_config())
    with pytest.raises(StateError):
        backward(net, Var(0.0, requires=True))


def test_double_backward_raises():
    rng = np.random.default_rng(11)
    cloud = toy_cloud(rng, 30)
    net = build_network(toy_config())
    out = net.forward(cloud)
    loss = out.semantic_logits.sum()
    backward(net, loss)
    with pytest.raises(StateError):
        backward(net, loss)


def test_zero_weights_head_bias_gradient_is_row_count():
    rng = np.random.default_rng(12)
    cloud = toy_cloud(rng, 40)
    net = build_network(toy_config())
    net.store.params["head.sem.w"].data[:] = 0.0
    out = net.forward(cloud)
    m = out.semantic_logits.shape[0]
    grads = backward(net, out.semantic_logits.sum())
    np.testing.assert_allclose(grads["head.sem.b"], m)


def test_every_parameter_receives_one_gradient():
    rng = np.random.default_rng(13)
    cloud = toy_cloud(rng, 40)
    net = build_network(toy_config(skip_scheme="EncoderDecoder"))
    loss = training_loss(net, cloud)
    grads = backward(net, loss)
    assert set(grads) == set(net.store.params)
    # with scheme D, every layer is on a gradient path
    n_nonzero = sum(np.any(g != 0) for g in grads.values())
    assert n_nonzero >= 0.9 * len(grads)


def test_instance_decoder_reachability_by_scheme():
    rng = np.random.default_rng(14)
    cloud = toy_cloud(rng, 40)
    sem_params = lambda net: [n for n in net.store.params if n.startswith("sem")]

    net_d = build_network(toy_config(skip_scheme="EncoderDecoder"))
    out = net_d.forward(cloud)
    grads = backward(net_d, out.instance_offsets.sum())
    assert any(np.any(grads[n] != 0) for n in sem_params(net_d))

    net_c = build_network(toy_config(skip_scheme="Encoder"))
    out = net_c.forward(cloud)
    grads = backward(net_c, out.instance_offsets.sum())
    assert all(np.all(grads[n] == 0) for n in sem_params(net_c))


def test_whole_network_gradient_check():
    rng = np.random.default_rng(15)
    cloud = toy_cloud(rng, 40)
    net = build_network(toy_config(skip_scheme="EncoderDecoder"))
    loss = training_loss(net, cloud)
    grads = backward(net, loss)

    names = sorted(net.store.params)
    flat = [(n, i) for n in names for i in range(net.store.params[n].data.size)]
    picks = rng.choice(len(flat), size=8, replace=False)
    for k in picks:
        name, idx = flat[k]
        target = net.store.params[name]
        orig = target.data.reshape(-1)[idx]
        h = 1e-6 * max(1.0, abs(orig))
        target.data.reshape(-1)[idx] = orig + h
        fp = training_loss(net, cloud).item()
        target.data.reshape(-1)[idx] = orig - h
        fm = training_loss(net, cloud).item()
        target.data.reshape(-1)[idx] = orig
        num = (fp - fm) / (2 * h)
        ana = grads[name].reshape(-1)[idx]
        err = abs(ana - num) / max(abs(ana), abs(num), 1e-6)
        assert err < 1e-4, f"{name}[{idx}]: ana={ana} num={num}"


# -- checkpoints ----------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(16)
    cloud = toy_cloud(rng, 40)
    net = build_network(toy_config(skip_scheme="Decoder"))
    net.forward(cloud)  # mutate running stats away from defaults
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, path)
    loaded = load_checkpoint(path)
    assert loaded.config == net.config
    for name, v in net.store.params.items():
        np.testing.assert_array_equal(v.data, loaded.store.params[name].data)
    for name, a in net.store.buffers.items():
        np.testing.assert_array_equal(a, loaded.store.buffers[name])
    # and evaluation is bit-identical
    net.eval_mode(), loaded.eval_mode()
    a = net.forward(cloud).semantic_logits.data
    b = loaded.forward(cloud).semantic_logits.data
    np.testing.assert_array_equal(a, b)


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "junk.ckpt"
    p.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(p)


def test_config_rejects_bad_channel_lists():
    with pytest.raises(ValueError):
        NetworkConfig(encoder_channels=(8, 16))
    with pytest.raises(ValueError):
        NetworkConfig(k_classes=1)

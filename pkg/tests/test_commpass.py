import numpy as np
import pytest

from prawn import tensor as T
from prawn.commpass import (
    BaseTrainConfig,
    CommError,
    EstimationError,
    MetaConfig,
    WeightMatrix,
    compute_fast_weights,
    estimate_weight_matrix,
    evaluate,
    listwise_gp_loss,
    pairwise_gp_loss,
    send_gradients,
    train_epoch,
)
from prawn.datakit import Batch, SyntheticSpec, batch_iter, draw_batch, gen_synthetic, split
from prawn.readops import EncoderSpec, MultiTaskModel, ReadOpKind
from prawn.registry import ParamMode, ParamRegistry
from prawn.tensor import Tensor, backward, finite_diff_check
from prawn.writeops import LossWeights, OptimizerState, step, task_loss


# ---------------------------------------------------------------------------
# scalar quadratic oracle: losses 0.5*(theta-a)^2 and 0.5*(theta-b)^2 give
# phi = (1-alpha)*theta + alpha*a and a closed-form communication loss


def quad_loss(t: Tensor, c: float) -> Tensor:
    d = T.sub(t, Tensor([c]))
    return T.smul(T.sum_all(T.mul(d, d)), 0.5)


def quadratic_gp(theta0: float, a: float, b: float, alpha: float, first_order: bool):
    reg = ParamRegistry()
    reg.register("theta", np.array([theta0]), ParamMode.SWR, "shared")
    theta = reg.get("theta").tensor
    grads = backward(quad_loss(theta, a), {"theta": theta}, retain_graph=not first_order)
    fw = compute_fast_weights(reg, grads, alpha, first_order)
    l_gp = quad_loss(fw.values["theta"], b)
    grad = backward(l_gp, {"theta": theta})["theta"].item()
    return l_gp.item(), grad


def closed_form(theta0, a, b, alpha):
    phi = (1 - alpha) * theta0 + alpha * a
    value = 0.5 * (phi - b) ** 2
    return value, (1 - alpha) * (phi - b), (phi - b)  # value, 2nd-order grad, 1st-order grad


def test_quadratic_oracle_reference_point():
    value, grad2 = quadratic_gp(1.0, 0.5, 0.0, 0.5, first_order=False)
    assert value == pytest.approx(0.28125, abs=1e-12)
    assert grad2 == pytest.approx(0.375, abs=1e-12)
    _, grad1 = quadratic_gp(1.0, 0.5, 0.0, 0.5, first_order=True)
    assert grad1 == pytest.approx(0.75, abs=1e-12)


@pytest.mark.parametrize("theta0,a,b,alpha", [(1.0, 2.0, 0.0, 0.5), (0.3, -1.0, 0.7, 0.2), (-2.0, 4.0, 1.0, 0.05)])
def test_quadratic_oracle_general(theta0, a, b, alpha):
    want_value, want_g2, want_g1 = closed_form(theta0, a, b, alpha)
    value, grad = quadratic_gp(theta0, a, b, alpha, first_order=False)
    assert value == pytest.approx(want_value, abs=1e-12)
    assert grad == pytest.approx(want_g2, abs=1e-12)
    value1, grad1 = quadratic_gp(theta0, a, b, alpha, first_order=True)
    assert value1 == pytest.approx(want_value, abs=1e-12)
    assert grad1 == pytest.approx(want_g1, abs=1e-12)


# ---------------------------------------------------------------------------
# fast weights


def test_fast_weights_alpha_zero_is_identity():
    reg = ParamRegistry()
    reg.register("w", np.array([1.5, -2.0]), ParamMode.SWR, "shared")
    theta = reg.get("w").tensor
    grads = backward(T.sum_all(T.mul(theta, theta)), {"w": theta}, retain_graph=True)
    fw = compute_fast_weights(reg, grads, alpha=0.0)
    assert fw.values["w"] is theta


def test_fast_weights_hand_arithmetic():
    reg = ParamRegistry()
    reg.register("w", np.array([1.0, 2.0]), ParamMode.SWR, "shared")
    g = {"w": Tensor([0.5, -1.0])}
    fw = compute_fast_weights(reg, g, alpha=0.1)
    assert np.allclose(fw.values["w"].data, [0.95, 2.1], atol=1e-12)


def test_fast_weight_sensitivity_is_one_minus_alpha():
    reg = ParamRegistry()
    reg.register("w", np.array([1.0]), ParamMode.SWR, "shared")
    theta = reg.get("w").tensor
    alpha = 0.3
    grads = backward(quad_loss(theta, 2.0), {"w": theta}, retain_graph=True)
    phi = compute_fast_weights(reg, grads, alpha).values["w"]
    dphi = backward(phi, {"w": theta})["w"].item()
    assert dphi == pytest.approx(1.0 - alpha, abs=1e-12)


def test_fast_weights_reject_non_shared_keys():
    reg = ParamRegistry()
    reg.register_task("t")
    reg.register("w", np.ones(1), ParamMode.SWR, "shared")
    reg.register("t.head", np.ones(1), ParamMode.PWR, "t")
    with pytest.raises(CommError, match="not a shared parameter"):
        compute_fast_weights(reg, {"t.head": Tensor([1.0])}, alpha=0.1)


def test_fast_weights_cover_all_shared_ids():
    reg = ParamRegistry()
    reg.register("w1", np.ones(2), ParamMode.SWR, "shared")
    reg.register("w2", np.ones(3), ParamMode.SWR, "shared")
    fw = compute_fast_weights(reg, {"w1": Tensor(np.ones(2))}, alpha=0.1)
    assert set(fw.values) == {"w1", "w2"}
    assert fw.values["w2"] is reg.get("w2").tensor  # unreachable: gradient zero


# ---------------------------------------------------------------------------
# model-level pairwise / listwise


def two_task_model(dim=3, d=4, classes=2, seed=0, kind=ReadOpKind.FLAT, tasks=("a", "b")):
    reg = ParamRegistry()
    private = EncoderSpec("mlp", (dim, 3)) if kind is not ReadOpKind.FLAT else None
    model = MultiTaskModel(reg, kind, {t: classes for t in tasks}, EncoderSpec("mlp", (dim, d)), private, init_seed=seed)
    return reg, model


def mk_batch(dim=3, n=4, seed=0, classes=2):
    r = np.random.default_rng(seed)
    return Batch(inputs=r.uniform(-1, 1, (n, dim)), labels=r.integers(0, classes, n), sample_ids=np.arange(n))


def test_pairwise_alpha_zero_equals_partner_plain_loss():
    _, model = two_task_model()
    ba, bb = mk_batch(seed=1), mk_batch(seed=2)
    for first_order in (False, True):
        gp = pairwise_gp_loss(model, "a", ba, "b", bb, alpha=0.0, first_order=first_order)
        plain = task_loss(model.read("b", bb.inputs), bb.labels)
        assert gp.data.tobytes() == plain.data.tobytes()


def test_first_and_second_order_gradients_agree_at_alpha_zero():
    _, model = two_task_model()
    ba, bb = mk_batch(seed=1), mk_batch(seed=2)
    grads = {}
    for first_order in (False, True):
        gp = pairwise_gp_loss(model, "a", ba, "b", bb, alpha=0.0, first_order=first_order)
        grads[first_order] = {k: v.data.tobytes() for k, v in backward(gp, model.shared_map()).items()}
    assert grads[False] == grads[True]


def test_pairwise_rejects_same_task_and_empty_batch():
    _, model = two_task_model()
    ba = mk_batch()
    with pytest.raises(CommError, match="distinct"):
        pairwise_gp_loss(model, "a", ba, "a", ba, alpha=0.1)
    empty = Batch(inputs=np.zeros((0, 3)), labels=np.zeros(0, dtype=int), sample_ids=np.zeros(0, dtype=int))
    with pytest.raises(CommError, match="empty"):
        pairwise_gp_loss(model, "a", ba, "b", empty, alpha=0.1)
    with pytest.raises(CommError, match="empty"):
        pairwise_gp_loss(model, "a", empty, "b", ba, alpha=0.1)


def test_second_order_meta_gradient_matches_finite_differences():
    _, model = two_task_model(dim=3, d=4)
    ba, bb = mk_batch(seed=3), mk_batch(seed=4)

    def loss():
        return pairwise_gp_loss(model, "a", ba, "b", bb, alpha=0.25, first_order=False)

    assert finite_diff_check(loss, model.shared_map()) < 1e-4


def test_gp_loss_never_reaches_sender_private_params():
    reg, model = two_task_model(kind=ReadOpKind.STAR)
    ba, bb = mk_batch(seed=5), mk_batch(seed=6)
    gp = pairwise_gp_loss(model, "a", ba, "b", bb, alpha=0.2, first_order=False)
    all_params = {pt.id: pt.tensor for pt in reg.params(include_aliases=False)}
    grads = backward(gp, all_params)
    assert not any(pid.startswith("task.a.") for pid in grads)
    assert any(pid.startswith("task.b.") for pid in grads)  # receiver side only
    assert any(pid.startswith("shared.") for pid in grads)


def test_listwise_one_hot_equals_pairwise_bitwise():
    _, model = two_task_model()
    ba, bb = mk_batch(seed=7), mk_batch(seed=8)
    pair = pairwise_gp_loss(model, "a", ba, "b", bb, alpha=0.15)
    lst = listwise_gp_loss(model, "a", ba, {"b": bb}, {"b": 1.0}, alpha=0.15)
    assert pair.data.tobytes() == lst.data.tobytes()
    gp_pair = backward(pair, model.shared_map())
    gp_lst = backward(lst, model.shared_map())
    assert {k: v.data.tobytes() for k, v in gp_pair.items()} == {k: v.data.tobytes() for k, v in gp_lst.items()}


def test_listwise_zero_row_gives_zero_loss_and_no_gradients():
    _, model = two_task_model(tasks=("a", "b", "c"))
    ba = mk_batch(seed=9)
    loss = listwise_gp_loss(model, "a", ba, {}, {"b": 0.0, "c": 0.0}, alpha=0.1)
    assert loss.item() == 0.0
    assert backward(loss, model.shared_map()) == {}


def test_listwise_missing_partner_batch_rejected():
    _, model = two_task_model(tasks=("a", "b", "c"))
    ba, bb = mk_batch(seed=9), mk_batch(seed=10)
    with pytest.raises(CommError, match="missing partner batch.*c"):
        listwise_gp_loss(model, "a", ba, {"b": bb}, {"b": 0.5, "c": 0.5}, alpha=0.1)


def test_listwise_three_quadratic_tasks_match_weighted_closed_forms():
    theta0, a, alpha = 1.0, 0.5, 0.4
    targets = {"b": -0.3, "c": 2.0}
    beta = {"b": 0.7, "c": 0.25}
    reg = ParamRegistry()
    reg.register("theta", np.array([theta0]), ParamMode.SWR, "shared")
    theta = reg.get("theta").tensor
    grads = backward(quad_loss(theta, a), {"theta": theta}, retain_graph=True)
    fw = compute_fast_weights(reg, grads, alpha)
    total = T.add(
        T.smul(quad_loss(fw.values["theta"], targets["b"]), beta["b"]),
        T.smul(quad_loss(fw.values["theta"], targets["c"]), beta["c"]),
    )
    want = sum(beta[j] * closed_form(theta0, a, targets[j], alpha)[0] for j in targets)
    want_grad = sum(beta[j] * closed_form(theta0, a, targets[j], alpha)[1] for j in targets)
    assert total.item() == pytest.approx(want, abs=1e-12)
    assert backward(total, {"theta": theta})["theta"].item() == pytest.approx(want_grad, abs=1e-12)


# ---------------------------------------------------------------------------
# relatedness weights


def test_weight_transform_reference_values():
    acc = np.array([[0.90, 0.72], [0.72, 0.90]])
    wm = WeightMatrix.from_cross_accuracy(acc, ["x", "y"], q_exp=2.0)
    assert wm.values[0, 0] == 1.0 and wm.values[1, 1] == 1.0
    assert wm.values[0, 1] == pytest.approx(0.894427, abs=1e-6)
    assert wm.values[1, 0] == pytest.approx(0.894427, abs=1e-6)


def test_weight_transform_clips_at_one():
    acc = np.array([[0.5, 0.95], [0.4, 0.9]])
    wm = WeightMatrix.from_cross_accuracy(acc, ["x", "y"], q_exp=2.0)
    assert wm.values[0, 1] == 1.0  # 0.95/0.9 clipped


def test_weight_transform_monotone_in_exponent():
    acc = np.array([[0.9, 0.72], [0.6, 0.9]])
    values = [WeightMatrix.from_cross_accuracy(acc, ["x", "y"], q).values[0, 1] for q in (1.0, 2.0, 4.0, 8.0)]
    assert all(a <= b for a, b in zip(values, values[1:]))


def test_weight_transform_degenerate_cases():
    with pytest.raises(EstimationError, match="degenerate diagonal"):
        WeightMatrix.from_cross_accuracy(np.array([[0.0, 0.5], [0.5, 0.9]]), ["x", "y"], 2.0)
    with pytest.raises(EstimationError, match="degenerate cross"):
        WeightMatrix.from_cross_accuracy(np.array([[0.9, 0.0], [0.5, 0.9]]), ["x", "y"], 2.0)


def test_weight_matrix_validation_and_row():
    with pytest.raises(EstimationError, match="diagonal"):
        WeightMatrix(("x", "y"), np.array([[0.9, 0.5], [0.5, 1.0]]), 2.0)
    with pytest.raises(EstimationError, match="off-diagonal"):
        WeightMatrix(("x", "y"), np.array([[1.0, 1.5], [0.5, 1.0]]), 2.0)
    wm = WeightMatrix(("x", "y", "z"), np.array([[1.0, 0.5, 0.25], [0.5, 1.0, 0.75], [0.1, 0.2, 1.0]]), 2.0)
    assert wm.row("y") == {"x": 0.5, "z": 0.75}


def test_weight_matrix_csv_round_trip(tmp_path):
    wm = WeightMatrix(("x", "y"), np.array([[1.0, 0.894427], [0.75, 1.0]]), 2.0)
    path = tmp_path / "beta.csv"
    wm.to_csv(path)
    text = path.read_text()
    assert "task_id,x,y" in text.splitlines()[0]
    assert "0.894427" in text
    back = WeightMatrix.from_csv(path, q_exp=2.0)
    assert back.task_ids == ("x", "y")
    assert np.allclose(back.values, wm.values, atol=1e-6)


def test_estimate_weight_matrix_on_synthetic_tasks():
    spec = SyntheticSpec(k_tasks=3, input_dim=6, private_scale=0.1, samples_per_task=120, seed=4)
    splits = {d.task_id: dict(zip(("train", "dev", "test"), split(d, seed=0))) for d in gen_synthetic(spec)}
    base = BaseTrainConfig(encoder=EncoderSpec("mlp", (6, 6)), epochs=3, lr=0.3, seed=1)
    wm = estimate_weight_matrix(splits, base, q_exp=2.0)
    assert wm.task_ids == ("synth0", "synth1", "synth2")
    assert np.all(np.diag(wm.values) == 1.0)
    off = wm.values[~np.eye(3, dtype=bool)]
    assert np.all(off > 0) and np.all(off <= 1.0)


def test_estimate_weight_matrix_needs_shared_label_space():
    spec = SyntheticSpec(k_tasks=1, input_dim=4, samples_per_task=60, seed=0)
    d0 = gen_synthetic(spec)[0]
    d1 = gen_synthetic(SyntheticSpec(k_tasks=1, input_dim=4, num_classes=3, rank=2, samples_per_task=60, seed=1))[0]
    splits = {
        "a": dict(zip(("train", "dev", "test"), split(d0, seed=0))),
        "b": dict(zip(("train", "dev", "test"), split(d1, seed=0))),
    }
    with pytest.raises(EstimationError, match="label space"):
        estimate_weight_matrix(splits, BaseTrainConfig(encoder=EncoderSpec("mlp", (4, 4))), q_exp=2.0)


# ---------------------------------------------------------------------------
# training loop


def synth_splits(k=2, dim=4, n=96, seed=0, scale=0.1):
    spec = SyntheticSpec(k_tasks=k, input_dim=dim, private_scale=scale, samples_per_task=n, seed=seed)
    return {d.task_id: dict(zip(("train", "dev", "test"), split(d, seed=seed))) for d in gen_synthetic(spec)}


def joint_model(splits, dim=4, d=4, seed=0):
    reg = ParamRegistry()
    model = MultiTaskModel(reg, ReadOpKind.FLAT, {t: 2 for t in splits}, EncoderSpec("mlp", (dim, d)), init_seed=seed)
    return reg, model


def mean_train_loss(model, splits):
    return float(np.mean([evaluate(model, t, s["train"])[0] for t, s in splits.items()]))


def test_identical_tasks_descend_after_one_epoch():
    base = synth_splits(k=1, n=120, scale=0.0)["synth0"]
    # same data and labels under two task agents
    twin = {
        tid: {name: ds.subset(np.arange(len(ds)), split=name) for name, ds in s.items()}
        for tid, s in (("t1", base), ("t2", base))
    }
    reg, model = joint_model(twin)
    opt = OptimizerState(rule="sgd", lr=0.05)
    meta = MetaConfig(alpha=0.05, communication="pairwise", partner_seed=3)
    before = mean_train_loss(model, twin)
    train_epoch(meta, reg, model, {t: s["train"] for t, s in twin.items()}, opt, LossWeights(), epoch=0, data_seed=0)
    after = mean_train_loss(model, twin)
    assert after <= before


def test_train_epoch_deterministic_under_seed():
    def run():
        splits = synth_splits(seed=2)
        reg, model = joint_model(splits, seed=2)
        opt = OptimizerState(rule="adadelta", lr=1.0)
        meta = MetaConfig(alpha=0.1, communication="pairwise", partner_seed=1)
        rng = np.random.default_rng(1)
        out = []
        for epoch in range(2):
            out.append(
                train_epoch(meta, reg, model, {t: s["train"] for t, s in splits.items()}, opt, LossWeights(), epoch=epoch, data_seed=2, partner_rng=rng)
            )
        values = {pt.id: pt.tensor.data.tobytes() for pt in reg.params(include_aliases=False)}
        return out, values

    (m1, v1), (m2, v2) = run(), run()
    assert m1 == m2
    assert v1 == v2


def test_alpha_zero_gp_only_equals_partner_plain_loss_training():
    splits = synth_splits(seed=5)
    train_sets = {t: s["train"] for t, s in splits.items()}
    task_ids = sorted(train_sets)

    reg_a, model_a = joint_model(splits, seed=7)
    opt_a = OptimizerState(rule="sgd", lr=0.1)
    meta = MetaConfig(alpha=0.0, communication="pairwise", shared_update="gp-only", partner_seed=11)
    train_epoch(meta, reg_a, model_a, train_sets, opt_a, LossWeights(), epoch=0, data_seed=5)

    # explicit construction: private step on own loss, shared step on the
    # partner's plain task loss, identical scheduling streams
    reg_b, model_b = joint_model(splits, seed=7)
    opt_b = OptimizerState(rule="sgd", lr=0.1)
    partner_rng = np.random.default_rng([11, 0])
    schedule = []
    for idx, tid in enumerate(task_ids):
        for batch in batch_iter(train_sets[tid], 8, seed=5 + idx, epoch=0):
            schedule.append((tid, batch))
    order = np.random.default_rng([5, 0, 977]).permutation(len(schedule))
    for pos in order:
        tid, batch = schedule[pos]
        l_task = T.smul(task_loss(model_b.read(tid, batch.inputs), batch.labels), 1.0)
        private_grads = backward(l_task, model_b.private_map(tid), retain_graph=True)
        partners = [t for t in task_ids if t != tid]
        pj = partners[0] if len(partners) == 1 else partners[int(partner_rng.integers(len(partners)))]
        bj = draw_batch(train_sets[pj], 8, partner_rng)
        plain_partner = T.smul(task_loss(model_b.read(pj, bj.inputs), bj.labels), 1.0)
        shared_grads = backward(plain_partner, model_b.shared_map())
        step(opt_b, reg_b, tid, private_grads)
        step(opt_b, reg_b, tid, shared_grads)

    va = {pt.id: pt.tensor.data.tobytes() for pt in reg_a.params(include_aliases=False)}
    vb = {pt.id: pt.tensor.data.tobytes() for pt in reg_b.params(include_aliases=False)}
    assert va == vb


def test_gradient_passing_requires_two_tasks():
    splits = synth_splits(k=1)
    reg, model = joint_model(splits)
    meta = MetaConfig(alpha=0.1, communication="pairwise")
    with pytest.raises(CommError, match="2 tasks"):
        train_epoch(meta, reg, model, {t: s["train"] for t, s in splits.items()}, OptimizerState(), LossWeights(), epoch=0, data_seed=0)


def test_listwise_training_needs_weight_matrix():
    splits = synth_splits()
    reg, model = joint_model(splits)
    meta = MetaConfig(alpha=0.1, communication="listwise")
    with pytest.raises(CommError, match="weight matrix"):
        train_epoch(meta, reg, model, {t: s["train"] for t, s in splits.items()}, OptimizerState(), LossWeights(), epoch=0, data_seed=0)


def test_meta_config_validation():
    with pytest.raises(CommError, match="alpha"):
        MetaConfig(alpha=-0.1)
    with pytest.raises(CommError, match="communication"):
        MetaConfig(communication="broadcast")
    with pytest.raises(CommError, match="policy"):
        MetaConfig(shared_update="both")

"""Analytic-vs-finite-difference gradient checks for every parameter group.

The full path (graph -> gated propagation with 2 layers -> last pool -> catalog
scores -> cross-entropy) runs at 64-bit on a <=12-node graph; each trainable
tensor is perturbed entry-wise with central differences.
"""

import numpy as np
import pytest
import torch

from mmsr.model import MMSRRecommender, xent_loss
from mmsr.propagation import GraphBatch, gat_layer, gcn_layer, sync_layer

from .conftest import tiny_codebooks, tiny_split

EPS = 1e-6
RTOL = 1e-4
ATOL = 1e-8


def build_model(aggregator="han"):
    split = tiny_split(n_items=8, n_users=2, seq_len=4, seed=3)
    books = tiny_codebooks(d=4, c=3, seed=1, items=list(split.catalog), image_missing=("i2",))
    model = MMSRRecommender(
        d=4, layers=2, aggregator=aggregator, c=3, k=1, m_max=8,
        dtype="float64", seed=5,
    )
    model.build(split, books)
    point = split.train[2]
    arrays, targets = model._encode_points([point])
    assert arrays[0].n_nodes <= 12
    batch = GraphBatch.from_graphs(arrays)
    target = torch.from_numpy(targets)
    return model, batch, target


def full_loss(model, batch, target):
    logits = model._forward(batch, training=False)
    return xent_loss(logits, target)


def central_difference(model, batch, target, param, loss_fn):
    flat = param.detach().reshape(-1)
    grad = np.zeros(flat.shape[0])
    for i in range(flat.shape[0]):
        for sign in (1.0, -1.0):
            with torch.no_grad():
                flat[i] += sign * EPS
            grad[i] += sign * float(loss_fn(model, batch, target).detach())
            with torch.no_grad():
                flat[i] -= sign * EPS
    return grad / (2 * EPS)


def check_all_groups(model, batch, target, loss_fn, names):
    for p in model._parameters():
        if p.grad is not None:
            p.grad = None
    loss = loss_fn(model, batch, target)
    loss.backward()
    checked = set()
    for name, param in list(model.tables_.named_parameters()) + list(
        model.params_.named_parameters()
    ):
        if name not in names:
            continue
        assert param.grad is not None, f"{name} got no gradient"
        analytic = param.grad.detach().reshape(-1).numpy()
        fd = central_difference(model, batch, target, param, loss_fn)
        np.testing.assert_allclose(analytic, fd, rtol=RTOL, atol=ATOL, err_msg=name)
        checked.add(name)
    assert checked == set(names), f"missing groups: {set(names) - checked}"


HAN_PATH_GROUPS = [
    "item_table",
    "image_code_table",
    "text_code_table",
    "type_table",
    "position_table",
    "merge_weight",
    "W_Q",
    "W_K",
    "W_V",
    "a_rel",
    "gate_w1",
    "gate_b1",
    "gate_w2",
    "gate_b2",
]


def test_every_group_through_full_han_forward():
    model, batch, target = build_model("han")
    check_all_groups(model, batch, target, full_loss, HAN_PATH_GROUPS)


def test_groups_through_sync_forward():
    model, batch, target = build_model("sync")
    check_all_groups(
        model, batch, target, full_loss,
        ["item_table", "W_V", "a_rel", "W_Q", "W_K", "sync_w", "sync_b", "merge_weight"],
    )


def test_groups_through_gcn_and_gat_forward():
    for aggregator, names in (("gcn", ["W", "item_table", "merge_weight"]),
                              ("gat", ["W", "gat_a", "item_table"])):
        model, batch, target = build_model(aggregator)
        check_all_groups(model, batch, target, full_loss, names)


def layer_loss_fn(layer):
    def fn(model, batch, target):
        h0 = torch.tensor(
            np.random.default_rng(0).standard_normal((batch.n_nodes, 4)),
            dtype=torch.float64,
        )
        out = layer(batch, h0, model.params_, 0)
        return (out * out).sum()

    return fn


@pytest.mark.parametrize(
    "layer,names",
    [
        (gcn_layer, ["W"]),
        (gat_layer, ["W", "gat_a"]),
        (sync_layer, ["W_Q", "W_K", "W_V", "a_rel", "sync_w", "sync_b"]),
    ],
)
def test_single_layer_ops_differentiable(layer, names):
    model, batch, target = build_model("han")
    loss_fn = layer_loss_fn(layer)
    for p in model._parameters():
        p.grad = None
    loss_fn(model, batch, target).backward()
    for name, param in model.params_.named_parameters():
        if name not in names:
            continue
        analytic = param.grad.detach().reshape(-1).numpy()
        fd = central_difference(model, batch, target, param, loss_fn)
        np.testing.assert_allclose(analytic, fd, rtol=RTOL, atol=ATOL, err_msg=name)


def test_phased_variants_differentiable_end_to_end():
    for aggregator in ("ni_hohe", "ni_heho", "hohe", "heho", "ho", "he"):
        model, batch, target = build_model(aggregator)
        for p in model._parameters():
            p.grad = None
        full_loss(model, batch, target).backward()
        for name, param in model.params_.named_parameters():
            if name == "W_V":
                assert param.grad is not None and float(param.grad.abs().sum()) > 0, aggregator

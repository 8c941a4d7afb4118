"""Central-difference verification of every differentiable operation.

Each primitive is probed at several random points (sampled away from the
relu/clamp kinks); the end-to-end check runs the full two-stream training
loss on a small seeded model and compares the analytic gradient of every
trainable parameter element against central differences.  The suite
passes when every relative error is below TOLERANCE.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Tensor, backward, central_difference, max_relative_error
from .data import AttributeSchema, generate_catalog, make_triplets, render
from .model import TwoStreamModel

TOLERANCE = 1e-4
STEP = 1e-5
POINTS = 5


def _away_from_zero(rng, shape, low=0.05, high=1.5):
    signs = rng.choice([-1.0, 1.0], size=shape)
    return rng.uniform(low, high, size=shape) * signs


def _probe(op_builder, arrays):
    """Max relative error of d(sum(op * R))/d(input) for every input array."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = op_builder(*tensors)
    rng = np.random.default_rng([13, out.data.size])
    weights = rng.uniform(0.5, 1.5, size=out.shape)

    def build_loss():
        result = op_builder(*tensors)
        return ad.reduce_sum(ad.mul(result, Tensor(weights)))

    loss = build_loss()
    for t in tensors:
        t.zero_grad()
    backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        with ad.no_grad():
            numeric = central_difference(lambda: build_loss().item(), t.data, STEP)
        worst = max(worst, max_relative_error(analytic, numeric))
    return worst


def check_primitives(seed=0):
    """Gradient-check every primitive at POINTS random instances."""
    report = {}

    def run(name, builder, make_arrays):
        worst = 0.0
        name_key = sum(ord(c) for c in name)
        for point in range(POINTS):
            rng = np.random.default_rng([seed, name_key, point])
            worst = max(worst, _probe(builder, make_arrays(rng)))
        report[name] = worst

    run("add", lambda a, b: ad.add(a, b), lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))])
    run("add_broadcast", lambda a, b: ad.add(a, b), lambda r: [r.normal(size=(3, 4)), r.normal(size=(1, 4))])
    run("sub", lambda a, b: ad.sub(a, b), lambda r: [r.normal(size=(2, 5)), r.normal(size=(2, 5))])
    run("hadamard", lambda a, b: ad.mul(a, b), lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))])
    run("hadamard_broadcast", lambda a, b: ad.mul(a, b), lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(2, 1, 4))])
    run("scale", lambda a: ad.scale(a, -1.7), lambda r: [r.normal(size=(4, 2))])
    run("sigmoid", ad.sigmoid, lambda r: [r.normal(size=(3, 3))])
    run("tanh", ad.tanh, lambda r: [r.normal(size=(3, 3))])
    run("relu", ad.relu, lambda r: [_away_from_zero(r, (4, 4))])
    run("exp", ad.exp, lambda r: [r.normal(size=(3, 3))])
    run("log", ad.log, lambda r: [r.uniform(0.2, 3.0, size=(3, 3))])
    run(
        "clamp_min",
        lambda a: ad.clamp_min(a, 0.5),
        lambda r: [0.5 + _away_from_zero(r, (4, 3), low=0.01, high=1.0)],
    )
    run("pow_scalar", lambda a: ad.pow_scalar(a, 2.7), lambda r: [r.uniform(0.2, 2.0, size=(3, 3))])
    run("matmul", lambda a, b: ad.matmul(a, b), lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))])
    run("transpose", lambda a: ad.transpose(a, (2, 0, 1)), lambda r: [r.normal(size=(2, 3, 4))])
    run("reshape", lambda a: ad.reshape(a, (6, 2)), lambda r: [r.normal(size=(3, 4))])
    run("concat", lambda a, b: ad.concat([a, b], axis=1), lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 2))])
    run(
        "gather_rows",
        lambda a: ad.gather_rows(a, [0, 2, 2, 1]),
        lambda r: [r.normal(size=(3, 4))],
    )
    run("reduce_sum_all", lambda a: ad.reduce_sum(a), lambda r: [r.normal(size=(3, 4))])
    run("reduce_sum_axis", lambda a: ad.reduce_sum(a, axis=1), lambda r: [r.normal(size=(2, 3, 4))])
    run("softmax", lambda a: ad.softmax(a, axis=1), lambda r: [r.normal(size=(3, 5))])
    run(
        "conv1x1",
        lambda x, w, b: ad.conv1x1(x, w, b),
        lambda r: [r.normal(size=(3, 6)), r.normal(size=(4, 3)), r.normal(size=(4,))],
    )
    run(
        "conv3x3_stride2",
        lambda x, w, b: ad.conv3x3_stride2(x, w, b),
        lambda r: [r.normal(size=(2, 5, 6)), r.normal(size=(3, 2, 3, 3)), r.normal(size=(3,))],
    )
    run(
        "conv3x3_stride2_batch",
        lambda x, w, b: ad.conv3x3_stride2_batch(x, w, b),
        lambda r: [r.normal(size=(2, 2, 4, 4)), r.normal(size=(3, 2, 3, 3)), r.normal(size=(3,))],
    )
    run("gem_pool_p3", lambda x: ad.gem_pool(x, 3.0), lambda r: [r.uniform(0.1, 2.0, size=(4, 6))])
    run("gem_pool_batch", lambda x: ad.gem_pool(x, 2.5), lambda r: [r.uniform(0.1, 2.0, size=(2, 3, 5))])
    return report


def _toy_setup(seed, dim, batch):
    schema = AttributeSchema.default(4, 4, 2)
    catalog = generate_catalog(schema, seed)
    triplets = make_triplets(catalog, schema, batch, 0.5, seed)
    model = TwoStreamModel(schema, dim=dim, gem_p=3.0, seed=seed)
    # perturb the editor away from the zero init so its gradients are generic
    rng = np.random.default_rng([seed, 99])
    for p in {**model.editor.named_parameters(), **model.vector_editor.named_parameters()}.values():
        p.data = p.data + rng.uniform(-0.3, 0.3, size=p.data.shape)
    q_imgs = np.stack([render(catalog[t.query_id], schema, seed) for t in triplets])
    t_imgs = np.stack([render(catalog[t.target_id], schema, seed) for t in triplets])
    tokens = [t.tokens for t in triplets]
    return model, q_imgs, t_imgs, tokens


def check_model(seed=0, dim=8, batch=4, tau=1.0, lam=0.8):
    """End-to-end loss gradient check for every trainable parameter element.

    Labels and the teacher distribution are computed once and held fixed,
    matching their constant (detached) role in the analytic gradient.
    """
    model, q_imgs, t_imgs, tokens = _toy_setup(seed, dim, batch)

    with ad.no_grad():
        base = model.forward_trainable(q_imgs, tokens, t_imgs)
        labels_t = losses.soft_label_matrix(base.targets.data, tau)
        frozen_ref = model.frozen_image_vectors(q_imgs)
        frozen_txt = model.frozen_text_vectors(tokens)
        frozen_tgt = model.frozen_image_vectors(t_imgs)
        frozen_fwd = model.forward_frozen(frozen_ref, frozen_txt, frozen_tgt)
        labels_f = losses.soft_label_matrix(frozen_fwd.targets.data, tau)
        teacher_for_trainable = losses.similarity_probs(frozen_fwd.combined, frozen_fwd.targets, tau).data
        teacher_for_frozen = losses.similarity_probs(base.combined, base.targets, tau).data

    def trainable_loss():
        fwd = model.forward_trainable(q_imgs, tokens, t_imgs)
        probs = losses.similarity_probs(fwd.combined, fwd.targets, tau)
        return losses.total_loss(
            losses.contrastive_loss(probs, labels_t, lam),
            losses.distillation_loss(teacher_for_trainable, probs),
        )

    def frozen_loss():
        fwd = model.forward_frozen(frozen_ref, frozen_txt, frozen_tgt)
        probs = losses.similarity_probs(fwd.combined, fwd.targets, tau)
        return losses.total_loss(
            losses.contrastive_loss(probs, labels_f, lam),
            losses.distillation_loss(teacher_for_frozen, probs),
        )

    report = {}
    for loss_fn, params in (
        (trainable_loss, model.trainable_stream_parameters()),
        (frozen_loss, model.frozen_head_parameters()),
    ):
        for p in params.values():
            p.zero_grad()
        backward(loss_fn())
        for name, p in params.items():
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
            with ad.no_grad():
                numeric = central_difference(lambda: loss_fn().item(), p.data, STEP)
            report[name] = max_relative_error(analytic, numeric)
            p.zero_grad()
    return report


def run_suite(seed=0):
    """Run everything; returns (all_passed, report lines)."""
    lines = []
    passed = True
    prim = check_primitives(seed)
    for name, err in prim.items():
        ok = err < TOLERANCE
        passed &= ok
        lines.append(f"{'PASS' if ok else 'FAIL'} primitive {name}: max rel err {err:.3e}")
    full = check_model(seed)
    for name, err in full.items():
        ok = err < TOLERANCE
        passed &= ok
        lines.append(f"{'PASS' if ok else 'FAIL'} end-to-end {name}: max rel err {err:.3e}")
    return passed, lines

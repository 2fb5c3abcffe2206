"""Finite-difference gradient oracle for the stop-gradient loss.

Backprop through the symmetric loss treats the target projections as
constants. The independent oracle is therefore central finite differences of
a surrogate objective whose targets are frozen at the unperturbed weights:
if stop-gradient is wired correctly the two gradients agree; differences of
the full (target-following) objective would not.

The model runs in float64 and in train mode. Batch-norm outputs in train
mode depend only on parameters and inputs, but running statistics are still
mutated on every forward, so buffers are restored after each evaluation to
keep the probing side-effect free.
"""

import torch

from rssl.models import batched_negative_cosine, symmetric_loss


def _clone_buffers(model):
    return {n: b.detach().clone() for n, b in model.named_buffers()}


def _restore_buffers(model, snapshot):
    with torch.no_grad():
        for n, b in model.named_buffers():
            b.copy_(snapshot[n])


def fd_gradient_check(model, view1, view2, h=1e-6, rel_tol=1e-3, abs_floor=1e-6):
    """Compare backprop gradients of the stop-gradient loss against finite
    differences of the frozen-target surrogate, for every parameter entry.

    Returns (checked, failures); failures hold (name, index, backprop, fd).
    A comparison fails when |backprop - fd| > max(abs_floor, rel_tol * |fd|).
    """
    model = model.double()
    view1 = view1.double()
    view2 = view2.double()
    model.train()
    buffers = _clone_buffers(model)

    for p in model.parameters():
        p.grad = None
    loss = symmetric_loss(model(view1, view2))
    loss.backward()
    grads = {n: p.grad.detach().clone() for n, p in model.named_parameters()}
    _restore_buffers(model, buffers)

    with torch.no_grad():
        frozen = model(view1, view2)
        z1_star = frozen.z1.detach().clone()
        z2_star = frozen.z2.detach().clone()
    _restore_buffers(model, buffers)

    @torch.no_grad()
    def surrogate() -> float:
        fwd = model(view1, view2)
        value = (
            0.5 * batched_negative_cosine(fwd.p1, z2_star).mean()
            + 0.5 * batched_negative_cosine(fwd.p2, z1_star).mean()
        )
        _restore_buffers(model, buffers)
        return float(value)

    checked = 0
    failures = []
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            gflat = grads[name].view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = surrogate()
                flat[i] = orig - h
                down = surrogate()
                flat[i] = orig
                g_fd = (up - down) / (2.0 * h)
                g_bp = gflat[i].item()
                if abs(g_bp - g_fd) > max(abs_floor, rel_tol * abs(g_fd)):
                    failures.append((name, i, g_bp, g_fd))
                checked += 1
    return checked, failures

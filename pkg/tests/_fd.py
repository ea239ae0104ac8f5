"""Central finite-difference helpers shared by the gradient tests."""

import numpy as np

from ctseg import engine, segnet

H = 1e-5


def rel_err(a, n, floor=1e-6):
    return abs(a - n) / max(abs(a), abs(n), floor)


def fd_coords(f, arr, coords, h=H):
    """Central differences of scalar ``f()`` w.r.t. ``arr`` at ``coords`` (mutates then restores)."""
    out = []
    for idx in coords:
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def pick(rng, shape, k):
    flat = rng.choice(int(np.prod(shape)), size=min(k, int(np.prod(shape))), replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def max_rel_err(f, arr, grad, rng, k=8):
    coords = pick(rng, arr.shape, k)
    num = fd_coords(f, arr, coords)
    return max(rel_err(grad[c], n) for c, n in zip(coords, num))


def network_max_rel_err(rng, config, n_coords, dtype=np.float64):
    """Worst relative error over random parameter coordinates of net + Dice_NS."""
    p = segnet.build(config, dtype)
    x = rng.random((1, 1, 9, 9)).astype(dtype)
    lab = rng.random((1, 9, 9)) < 0.4
    target = np.stack([~lab, lab], axis=1).astype(dtype)
    probs, cache = segnet.forward(p, x, mode="train", return_cache=True)
    grads = segnet.backward(p, cache, engine.dice_ns_grad(probs, target))
    tensors = {k: v.copy() for k, v in p.trainable().items()}
    names = sorted(tensors)
    errs = []
    for _ in range(n_coords):
        name = names[rng.integers(len(names))]
        arr = tensors[name]
        idx = np.unravel_index(rng.integers(arr.size), arr.shape)

        def loss():
            return engine.dice_ns_loss(segnet.forward(p.replace(tensors), x, mode="train"), target)

        (num,) = fd_coords(loss, arr, [idx])
        errs.append(rel_err(grads[name][idx], num))
    return max(errs)

"""AdamW and a finite-difference gradient checker."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .layers import ParamStore
from .tensor import Tensor


def adamw_step(
    store: ParamStore,
    grads: dict[str, np.ndarray],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> ParamStore:
    """One AdamW update, in place.  Decay is applied to the weights directly."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    b1, b2 = betas
    store.step += 1
    t = store.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in store.items():
        g = grads.get(name)
        if g is None:
            continue
        g = g.astype(store.dtype, copy=False)
        m = store.m.get(name)
        if m is None:
            m = store.m[name] = np.zeros_like(p.data)
            store.v[name] = np.zeros_like(p.data)
        v = store.v[name]
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    h: float = 1e-5,
    coords: Iterable[int] | None = None,
) -> float:
    """Max over coordinates of |autodiff - central difference| / max(1, |central difference|).

    ``coords`` restricts the check to a subset of flat indices.
    """
    data = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(data.copy(), requires_grad=True)
    out = f(xt)
    if not np.isfinite(out.data).all():
        raise FloatingPointError("function value is not finite")
    out.backward()
    auto = np.zeros_like(data) if xt.grad is None else xt.grad
    flat = data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(data.copy())).data)
        flat[i] = orig - h
        fm = float(f(Tensor(data.copy())).data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite value while perturbing coordinate {i}")
        num = (fp - fm) / (2 * h)
        err = abs(auto.reshape(-1)[i] - num) / max(1.0, abs(num))
        worst = max(worst, err)
    return worst


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    store: ParamStore,
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Run the finite-difference check against every parameter of ``store``.

    ``loss_fn`` reads the parameters from the store.  With ``max_coords`` only
    that many randomly drawn coordinates per tensor are perturbed.
    """
    store.zero_grad()
    loss_fn().backward()
    auto = store.grads()
    rng = rng or np.random.default_rng(0)
    report = {}
    for name, p in store.items():
        flat = p.data.reshape(-1)
        if max_coords is None or flat.size <= max_coords:
            idx = range(flat.size)
        else:
            idx = rng.choice(flat.size, max_coords, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(loss_fn().data)
            flat[i] = orig - h
            fm = float(loss_fn().data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite loss perturbing {name}[{i}]")
            num = (fp - fm) / (2 * h)
            worst = max(worst, abs(auto[name].reshape(-1)[i] - num) / max(1.0, abs(num)))
        report[name] = worst
    store.zero_grad()
    return report

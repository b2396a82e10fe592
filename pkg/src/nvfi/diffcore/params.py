"""Named parameter storage, Adam, and the learning-rate schedule."""
from __future__ import annotations

import contextlib
import math

import numpy as np

from .tape import Var, backward


class ParamStore:
    """Named arrays, each tagged with a learning-rate group.

    ``var(name)`` hands out a fresh leaf for the current graph; gradients are
    accumulated by name, so the same entry may be used any number of times.
    Entries whose name starts with a frozen prefix are handed out as constants.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.arrays = {}
        self.groups = {}
        self._frozen = ()

    def add(self, name, array, group):
        if name in self.arrays:
            raise KeyError(f"parameter {name!r} already exists")
        self.arrays[name] = np.array(array, dtype=self.dtype)
        self.groups[name] = group
        return self.arrays[name]

    def remove(self, name):
        del self.arrays[name]
        del self.groups[name]

    def replace(self, name, array):
        """Swap in a new array (possibly of a new shape) keeping the group."""
        group = self.groups[name]
        self.remove(name)
        return self.add(name, array, group)

    def set(self, name, array):
        array = np.asarray(array, dtype=self.dtype)
        if array.shape != self.arrays[name].shape:
            raise ValueError(f"shape mismatch for {name!r}: {array.shape} vs {self.arrays[name].shape}")
        self.arrays[name] = array.copy()

    def __contains__(self, name):
        return name in self.arrays

    def __getitem__(self, name):
        return self.arrays[name]

    def names(self, prefix=""):
        return [n for n in self.arrays if n.startswith(prefix)]

    def var(self, name):
        if self._frozen and name.startswith(self._frozen):
            return Var(self.arrays[name], op="frozen")
        return Var(self.arrays[name], name=name)

    @contextlib.contextmanager
    def freeze(self, *prefixes):
        prev = self._frozen
        self._frozen = tuple(prev) + tuple(prefixes)
        try:
            yield self
        finally:
            self._frozen = prev

    def count(self, prefix=""):
        return int(sum(a.size for n, a in self.arrays.items() if n.startswith(prefix)))

    def copy(self):
        out = ParamStore(self.dtype)
        for name, arr in self.arrays.items():
            out.add(name, arr, self.groups[name])
        return out

    def astype(self, dtype):
        out = ParamStore(dtype)
        for name, arr in self.arrays.items():
            out.add(name, arr, self.groups[name])
        return out


def gradient_of(loss, params):
    """d(loss)/d(entry) for every entry in ``params``; unreachable entries get zeros."""
    named = backward(loss)
    return {name: named[name] if name in named else np.zeros_like(arr)
            for name, arr in params.arrays.items()}


def finite_diff_check(loss_fn, params, h=1e-5, seed=0, max_coords=2048, names=None, coords=None):
    """Max relative error between tape gradients and central differences.

    ``loss_fn(params)`` must rebuild the scalar loss from the current arrays.
    At most ``max_coords`` coordinates are probed, drawn uniformly at random
    across the selected entries (or from ``coords``, a list of (name, flat index)).
    """
    if params.dtype != np.float64:
        raise TypeError("finite_diff_check needs a float64 ParamStore")
    names = list(names or params.arrays)
    grads = gradient_of(loss_fn(params), params)
    if coords is None:
        coords = [(n, i) for n in names for i in range(params.arrays[n].size)]
    coords = list(coords)
    rng = np.random.default_rng(seed)
    if len(coords) > max_coords:
        coords = [coords[i] for i in sorted(rng.choice(len(coords), max_coords, replace=False))]
    worst = 0.0
    for name, i in coords:
        flat = params.arrays[name].reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        up = float(loss_fn(params).data)
        flat[i] = orig - h
        down = float(loss_fn(params).data)
        flat[i] = orig
        g_fd = (up - down) / (2 * h)
        g_ad = float(grads[name].reshape(-1)[i])
        err = abs(g_ad - g_fd) / max(1e-12, abs(g_ad) + abs(g_fd))
        worst = max(worst, err)
    return worst


def lr_schedule(iteration, total_iters, lr0):
    """Exponential decay reaching lr0 / 10 at the final iteration."""
    if total_iters <= 0:
        raise ValueError("total_iters must be positive")
    if not 0 <= iteration <= total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {total_iters}]")
    return lr0 * 0.1 ** (iteration / total_iters)


class Adam:
    def __init__(self, beta1=0.9, beta2=0.99, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.steps = {}

    def reset(self, names):
        for n in names:
            self.m.pop(n, None)
            self.v.pop(n, None)
            self.steps.pop(n, None)

    def update(self, params, grads, lr_per_group):
        """One bias-corrected Adam step on every entry present in ``grads``."""
        for name, g in grads.items():
            if name not in params:
                continue
            p = params.arrays[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match {name!r} {p.shape}")
            lr = lr_per_group[params.groups[name]]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            t = self.steps.get(name, 0) + 1
            self.steps[name] = t
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            p -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype, copy=False)


def decay_factor(iteration, total_iters):
    return math.pow(0.1, iteration / total_iters) if total_iters else 1.0

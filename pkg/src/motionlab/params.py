"""Named parameter collections, the Adam optimizer, and checkpoint io."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .mt1 import load_mt1, save_mt1


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    trainable: bool = True


class ParamSet:
    """Ordered map from name to (value, grad, trainable flag).

    Gradients always share dims and dtype with their values; callers
    accumulate into ``grad`` buffers and the optimizer zeroes them after
    each step.
    """

    def __init__(self):
        self._entries: dict[str, Param] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> np.ndarray:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        value = np.asarray(value)
        self._entries[name] = Param(value, np.zeros_like(value), trainable)
        return value

    def __contains__(self, name):
        return name in self._entries

    def __getitem__(self, name) -> Param:
        return self._entries[name]

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def value(self, name) -> np.ndarray:
        return self._entries[name].value

    def accumulate(self, name, grad) -> None:
        p = self._entries[name]
        if grad.shape != p.grad.shape:
            raise ValueError(f"gradient shape {grad.shape} does not match {name!r} {p.grad.shape}")
        p.grad += grad

    def zero_grads(self) -> None:
        for p in self._entries.values():
            p.grad[...] = 0

    def set_trainable(self, names, trainable: bool = True) -> None:
        for name in names:
            self._entries[name].trainable = trainable

    def trainable_names(self):
        return [n for n, p in self._entries.items() if p.trainable]

    def copy(self) -> "ParamSet":
        other = ParamSet()
        for name, p in self._entries.items():
            other._entries[name] = Param(p.value.copy(), p.grad.copy(), p.trainable)
        return other


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params: ParamSet, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {name: np.zeros_like(p.value) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.value) for name, p in params.items()}


def adam_step(params: ParamSet, state: AdamState) -> None:
    """One bias-corrected Adam update over the trainable entries.

    Non-trainable entries are untouched; all gradients are zeroed at the
    end of the step.
    """
    if state is None:
        raise ValueError("adam_step requires an initialized AdamState")
    for name, p in params.items():
        if name not in state.m or state.m[name].shape != p.value.shape:
            raise ValueError(f"optimizer state does not match parameter {name!r}")
    state.step += 1
    t = state.step
    for name, p in params.items():
        if not p.trainable:
            continue
        g = p.grad
        state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        m_hat = state.m[name] / (1 - state.beta1 ** t)
        v_hat = state.v[name] / (1 - state.beta2 ** t)
        p.value -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.value.dtype)
    params.zero_grads()


# ----------------------------------------------------------- persistence

def _tensor_filename(name: str) -> str:
    return name.replace("/", "_") + ".mt1"


def save_paramset(params: ParamSet, directory, meta: dict | None = None) -> None:
    """Write a ParamSet as a directory of MT1 tensors plus manifest.json."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for name, p in params.items():
        fname = _tensor_filename(name)
        save_mt1(os.path.join(directory, fname), p.value)
        entries.append({
            "name": name,
            "file": fname,
            "dims": list(p.value.shape),
            "trainable": bool(p.trainable),
        })
    manifest = {"entries": entries, "meta": meta or {}}
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_paramset(directory) -> tuple[ParamSet, dict]:
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    params = ParamSet()
    for entry in manifest["entries"]:
        value = load_mt1(os.path.join(directory, entry["file"]))
        if list(value.shape) != entry["dims"]:
            raise ValueError(f"{entry['name']}: manifest dims {entry['dims']} "
                             f"do not match file dims {list(value.shape)}")
        params.add(entry["name"], value, trainable=entry["trainable"])
    return params, manifest.get("meta", {})

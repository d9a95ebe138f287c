"""Key-value memory with shared keys and per-domain values.

Slots are tagged either with a structure class name or with ``GLOBAL``.  Keys
(``N x C``) are addressed by content-code pixels; every domain owns its own
``N x C_a`` value table.  The bank is never trained by backpropagation: it
changes only through the momentum rule in :func:`update`.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import ConfigError

GLOBAL = "GLOBAL"


@dataclass
class MemoryBank:
    keys: torch.Tensor              # (N, C), unit rows
    values: torch.Tensor            # (K, N, C_a), unit rows
    slot_categories: tuple[str, ...]
    slot_classes: torch.Tensor      # (N,) class id per slot, -1 for GLOBAL
    alpha_p: float = 0.01

    @property
    def num_slots(self) -> int:
        return self.keys.shape[0]

    @property
    def num_domains(self) -> int:
        return self.values.shape[0]

    def slot_names(self) -> list[str]:
        seen: dict[str, int] = {}
        names = []
        for cat in self.slot_categories:
            names.append(f"{cat}_{seen.get(cat, 0)}")
            seen[cat] = seen.get(cat, 0) + 1
        return names

    def clone(self) -> "MemoryBank":
        return MemoryBank(self.keys.clone(), self.values.clone(), self.slot_categories,
                          self.slot_classes.clone(), self.alpha_p)

    def to_arrays(self, prefix: str = "bank.") -> dict[str, np.ndarray]:
        return {
            prefix + "keys": self.keys.numpy().copy(),
            prefix + "values": self.values.numpy().copy(),
            prefix + "slot_classes": self.slot_classes.numpy().copy(),
            prefix + "slot_categories": np.array(self.slot_categories),
            prefix + "alpha_p": np.array(self.alpha_p),
        }

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], prefix: str = "bank.") -> "MemoryBank":
        return cls(
            keys=torch.from_numpy(np.array(arrays[prefix + "keys"])),
            values=torch.from_numpy(np.array(arrays[prefix + "values"])),
            slot_categories=tuple(str(s) for s in arrays[prefix + "slot_categories"]),
            slot_classes=torch.from_numpy(np.array(arrays[prefix + "slot_classes"])),
            alpha_p=float(arrays[prefix + "alpha_p"]),
        )


def build_bank(
    layout: Mapping[str, int],
    C: int,
    C_a: int,
    seed: int,
    num_domains: int = 2,
    class_names: Sequence[str] | None = None,
    alpha_p: float = 0.01,
    structural: bool = True,
) -> MemoryBank:
    """Allocate a bank from a ``category -> slot count`` layout.

    The structural slots must add up to the number of ``GLOBAL`` slots.  With
    ``structural=False`` the same number of slots is allocated but every slot
    is global (no class gating on update).
    """
    if any(int(n) < 1 for n in layout.values()):
        raise ConfigError("every slot count must be at least 1")
    n_global = int(layout.get(GLOBAL, 0))
    n_struct = sum(int(n) for cat, n in layout.items() if cat != GLOBAL)
    if n_global != n_struct:
        raise ConfigError(f"asymmetric bank layout: {n_struct} structural vs {n_global} global slots")
    if not 0.0 < alpha_p <= 1.0:
        raise ConfigError("alpha_p must lie in (0, 1]")
    struct_cats = [cat for cat in layout if cat != GLOBAL]
    if class_names is None:
        class_names = struct_cats
    categories: list[str] = []
    classes: list[int] = []
    for cat, n in layout.items():
        for _ in range(int(n)):
            if cat == GLOBAL or not structural:
                categories.append(GLOBAL)
                classes.append(-1)
            else:
                if cat not in class_names:
                    raise ConfigError(f"slot category {cat!r} is not one of the label classes {list(class_names)}")
                categories.append(cat)
                classes.append(list(class_names).index(cat))
    n = len(categories)
    gen = torch.Generator().manual_seed(int(seed))
    keys = F.normalize(torch.randn(n, C, generator=gen), dim=-1)
    values = F.normalize(torch.randn(num_domains, n, C_a, generator=gen), dim=-1)
    return MemoryBank(keys, values, tuple(categories), torch.tensor(classes, dtype=torch.long), alpha_p)


def cosine_sim(a, b) -> float:
    """Cosine similarity of two vectors; zero vectors give 0 with a warning."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        warnings.warn("cosine similarity of a zero vector is defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _as_tensor(x, dtype=None):
    t = x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x))
    return t if dtype is None else t.to(dtype)


def affinities(queries, bank: MemoryBank, temperature: float = 1.0) -> torch.Tensor:
    """Softmax over slots of query/key cosine similarity; shape ``(..., N)``."""
    q = _as_tensor(queries, bank.keys.dtype)
    if q.shape[-1] != bank.keys.shape[1]:
        raise ValueError(f"query dim {q.shape[-1]} does not match key dim {bank.keys.shape[1]}")
    sim = F.normalize(q, dim=-1) @ F.normalize(bank.keys, dim=-1).T
    return torch.softmax(sim / temperature, dim=-1)


def read(queries, bank: MemoryBank, target_domain: int, attribute=None, mode: str = "values"):
    """Return ``(enhanced, affinity)`` for every query.

    In the default mode the enhanced vector is the affinity-weighted sum of
    the target domain's value rows.  ``mode="literal"`` weights the supplied
    ``attribute`` code instead (it must broadcast against the queries).
    """
    if not 0 <= target_domain < bank.num_domains:
        raise ValueError(f"unknown domain {target_domain}")
    w = affinities(queries, bank)
    if mode == "values":
        return w @ bank.values[target_domain], w
    if mode == "literal":
        if attribute is None:
            raise ValueError("literal read needs the attribute code")
        a = _as_tensor(attribute, w.dtype)
        return w.sum(dim=-1, keepdim=True) * a, w
    raise ValueError(f"unknown read mode {mode!r}")


def read_map(content: torch.Tensor, bank: MemoryBank, target_domain: int, attribute=None, mode="values"):
    """:func:`read` on ``(B, C, H, W)`` content codes; returns a ``(B, C_a, H, W)`` map."""
    b, c, h, w = content.shape
    q = content.permute(0, 2, 3, 1).reshape(b, h * w, c)
    if attribute is not None:
        attribute = attribute[:, None, :]
    z, aff = read(q, bank, target_domain, attribute, mode)
    return z.reshape(b, h, w, -1).permute(0, 3, 1, 2), aff


def combine(z_a: torch.Tensor, z_tilde: torch.Tensor) -> torch.Tensor:
    """Channel concatenation ``[z_a, z_tilde]``; a vector ``z_a`` is broadcast spatially."""
    if z_a.dim() == 2 and z_tilde.dim() == 4:
        z_a = z_a[:, :, None, None].expand(-1, -1, *z_tilde.shape[2:])
    if z_a.dim() != z_tilde.dim() or z_a.shape[0] != z_tilde.shape[0] or z_a.shape[2:] != z_tilde.shape[2:]:
        raise ValueError(f"cannot combine attribute {tuple(z_a.shape)} with {tuple(z_tilde.shape)}")
    return torch.cat([z_a, z_tilde], dim=1)


@torch.no_grad()
def update(
    bank: MemoryBank,
    queries_i,
    queries_j,
    enhanced_i,
    enhanced_j,
    labels=None,
    domains: tuple[int, int] = (0, 1),
    mode: str = "assigned",
) -> MemoryBank:
    """Momentum update of keys and values; returns a new bank.

    ``queries_i``/``queries_j`` are spatially aligned ``(N_q, C)`` query sets
    summed into the key update, ``enhanced_i``/``enhanced_j`` are the
    ``(N_q, C_a)`` enhanced attributes written to the values of
    ``domains[0]``/``domains[1]``.  A query is assigned to its highest-affinity
    slot; for structural slots it must also carry that slot's label.  Update
    weights are a softmax of cosine similarity over each slot's assigned
    queries (``mode="assigned"``) or the raw affinity scores
    (``mode="literal"``).  Slots nobody is assigned to are left untouched.
    """
    dtype = bank.keys.dtype
    qi = _as_tensor(queries_i, dtype).detach().reshape(-1, bank.keys.shape[1])
    qj = _as_tensor(queries_j, dtype).detach().reshape(qi.shape)
    ei = _as_tensor(enhanced_i, dtype).detach().reshape(qi.shape[0], -1)
    ej = _as_tensor(enhanced_j, dtype).detach().reshape(ei.shape)
    new = bank.clone()
    alpha = float(bank.alpha_p)
    if qi.shape[0] == 0 or alpha >= 1.0:
        return new

    sim = F.normalize(qi, dim=-1) @ F.normalize(bank.keys, dim=-1).T   # (N_q, N)
    aff = torch.softmax(sim, dim=-1)
    assign = F.one_hot(aff.argmax(dim=-1), bank.num_slots).bool()
    if labels is not None:
        lab = _as_tensor(labels).reshape(-1).long()
        if lab.shape[0] != qi.shape[0]:
            raise ValueError("labels do not match the number of queries")
        structural = bank.slot_classes >= 0
        match = lab[:, None] == bank.slot_classes[None, :]
        assign &= match | ~structural[None, :]

    occupied = assign.any(dim=0)
    if mode == "assigned":
        logits = sim.masked_fill(~assign, float("-inf"))
        u = torch.softmax(logits, dim=0)
        u = torch.nan_to_num(u, nan=0.0)
    elif mode == "literal":
        u = aff * assign
    else:
        raise ValueError(f"unknown update mode {mode!r}")

    def step(old, delta):
        moved = F.normalize(alpha * old + (1.0 - alpha) * delta, dim=-1)
        return torch.where(occupied[:, None], moved, old)

    new.keys = step(bank.keys, u.T @ (qi + qj))
    new.values[domains[0]] = step(bank.values[domains[0]], u.T @ ei)
    new.values[domains[1]] = step(bank.values[domains[1]], u.T @ ej)
    return new


def export_affinity_csv(affinity, labels, path, bank: MemoryBank) -> None:
    """Write one row per query: id, label class, score per slot."""
    aff = _as_tensor(affinity).reshape(-1, bank.num_slots).detach().cpu().numpy()
    lab = None if labels is None else np.asarray(labels).reshape(-1)
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_id", "label"] + bank.slot_names())
        for n, row in enumerate(aff):
            label = -1 if lab is None else int(lab[n])
            writer.writerow([n, label] + [f"{v:.8f}" for v in row])


def load_affinity_csv(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Inverse of :func:`export_affinity_csv`: ``(slot names, labels, scores)``."""
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    labels = np.array([int(r[1]) for r in body], dtype=int)
    scores = np.array([[float(v) for v in r[2:]] for r in body], dtype=np.float64).reshape(len(body), -1)
    return header[2:], labels, scores

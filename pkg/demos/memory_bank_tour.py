"""A short tour of the memory bank: allocation, reads, updates and affinities.

Run with ``python3 demos/memory_bank_tour.py``; nothing is written to disk.
"""
import torch

from hgd.config import IXI_LAYOUT, RunConfig
from hgd.memory_bank import affinities, build_bank, read, update

classes = RunConfig().class_names
bank = build_bank(IXI_LAYOUT, C=16, C_a=8, seed=0, class_names=classes)
print(f"{bank.num_slots} slots over {bank.num_domains} domains")
for name, cat in zip(bank.slot_names(), bank.slot_categories):
    print(f"  {name:14s} {cat}")

g = torch.Generator().manual_seed(1)
queries = torch.randn(6, 16, generator=g)
enhanced, aff = read(queries, bank, target_domain=1)
print("\naffinity rows sum to", [round(float(s), 6) for s in aff.sum(-1)])
print("enhanced attribute norms (never above 1):", [round(float(n), 3) for n in enhanced.norm(dim=-1)])

# queries sitting between slot 3's key and a new direction drag that key along
direction = torch.nn.functional.normalize(torch.randn(16, generator=g), dim=0)
near = bank.keys[3] + 0.6 * direction + 0.02 * torch.randn(32, 16, generator=g)
labels = torch.full((32,), classes.index(bank.slot_categories[3]))
print(f"\nslot 3 wins {int((affinities(near, bank).argmax(-1) == 3).sum())}/32 queries")
moved = bank
for _ in range(200):
    moved = update(moved, near, near, torch.randn(32, 8, generator=g), torch.randn(32, 8, generator=g), labels)
drift = (moved.keys - bank.keys).norm(dim=-1)
print("slots whose key moved after 200 updates:", [n for n, d in zip(bank.slot_names(), drift) if d > 0])
print("cosine of slot 3 to the new direction: %.3f -> %.3f"
      % (float(bank.keys[3] @ direction), float(moved.keys[3] @ direction)))

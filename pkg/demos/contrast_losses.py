"""How the three contrast terms react when a translation deforms the content.

A content map is compared with a copy of itself and with progressively
noisier copies.  Every loss grows with the damage; the structure term also
shows how the deformation ranking reweights the positives.
"""
import torch

from hgd import losses as L

g = torch.Generator().manual_seed(0)
z = torch.randn(8, 8, 8, generator=g, dtype=torch.float64)
other = torch.randn(8, 8, 8, generator=g, dtype=torch.float64)
labels = torch.zeros(8, 8, dtype=torch.long)
labels[2:6, 2:6] = 1
labels[3:5, 3:5] = 2

print(f"{'noise':>6} {'pixel':>8} {'structure':>10} {'global':>8}")
for noise in (0.0, 0.25, 0.5, 1.0, 2.0):
    t = z + noise * torch.randn(z.shape, generator=g, dtype=z.dtype)
    pgd = L.pgd_loss(z, t, [other], 0.5, None)
    sgd = L.sgd_loss(z, t, labels, [(other, labels)], 0.5, 0.5)
    ggd = L.ggd_loss(z, t, [other], 0.5)
    print(f"{noise:6.2f} {float(pgd):8.3f} {float(sgd):10.3f} {float(ggd):8.3f}")

# damage only the inner structure: it gets the largest deformation and weight 1
t = z.clone()
t[:, 3:5, 3:5] += 3.0
d = [float(L.deformation(L.mask_structure(z, labels, s), L.mask_structure(t, labels, s))) for s in range(3)]
print("\nper-structure deformation:", [round(v, 2) for v in d])
print("rank weights:", [round(float(w), 3) for w in L.rank_weights(d, 0.5)])

"""
How the self-supervised objectives react to good and bad embeddings
====================================================================

Three toy situations for a batch of 32 pairs in 16 dimensions:
aligned views (the goal), unrelated views, and a collapsed batch.
"""
import numpy as np

from sslsv import losses as L

rng = np.random.default_rng(0)
z = rng.normal(size=(32, 16))

cases = {
    "aligned": (z, z + 0.05 * rng.normal(size=z.shape)),
    "unrelated": (z, rng.normal(size=z.shape)),
    "collapsed": (np.ones((32, 16)) + 1e-3 * rng.normal(size=z.shape),
                  np.ones((32, 16)) + 1e-3 * rng.normal(size=z.shape)),
}

print(f"{'case':<10} {'InfoNCE':>9} {'Barlow':>9} {'VICReg':>9}   invariance  variance  covariance")
for name, (a, b) in cases.items():
    v = L.vicreg(a, b)
    d = v.diagnostics
    print(f"{name:<10} {L.info_nce(a, b).value:9.3f} {L.barlow_twins(a, b).value:9.3f} {v.value:9.3f}"
          f"   {d['invariance']:10.4f} {d['variance']:9.4f} {d['covariance']:11.4f}")

# the collapsed batch has near-zero invariance, yet VICReg stays high because
# the variance hinge is fully active; without it (mu = 0) collapse looks optimal
a, b = cases["collapsed"]
print("\nVICReg on the collapsed batch, mu=1:", round(L.vicreg(a, b).value, 4),
      " mu=0:", round(L.vicreg(a, b, L.VicregWeights(mu=0.0)).value, 6))

# composites mix objectives at the representation (Y) and embedding (Z) stages
y, y2 = rng.normal(size=(2, 32, 8))
out = L.comp2(y, y2, *cases["aligned"])
print("\ncomp2 terms:", {k: round(v, 4) for k, v in out.diagnostics["terms"].items()})
print("sum of terms equals total:", np.isclose(sum(out.diagnostics["terms"].values()), out.value))

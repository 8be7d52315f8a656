"""Average, max and generalized-mean pooling of a feature map."""
import numpy as np

from dgtl.pooling import PoolingMethod, pool_backward, pool_forward

fmap = np.arange(1.0, 5.0).reshape(2, 2, 1)
for method in (PoolingMethod("avg"), PoolingMethod("max"), PoolingMethod("gem", 3.0)):
    print(f"{method.kind.value:>3}:", pool_forward(fmap, method))

# GeM climbs from the mean toward the max as p grows.
for p in (1, 3, 16, 64, 1024):
    print(f"GeM p={p:<5}", float(pool_forward(fmap, PoolingMethod("gem", p))[0]))

# Max routes the whole upstream gradient to the winning cell.
print(pool_backward(fmap, PoolingMethod("max"), np.ones(1))[..., 0])

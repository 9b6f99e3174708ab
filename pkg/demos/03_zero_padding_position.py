# Why a 3x3 conv with zero padding knows where a token sits.
import numpy as np

from vbb.attention import ConvParams, conv_branch
from vbb.tensor import Tensor

H = W = 6
C = 3
x = np.ones((1, H * W, C))            # the same token everywhere
eye = Tensor(np.eye(C))
kernel = Tensor(np.ones((3, 3, C)) / 9)
params = ConvParams(eye, kernel, Tensor(np.ones(C)), Tensor(np.zeros(C)), eye)

out = conv_branch(Tensor(x), params, H, W, test_mode=True).data[0, :, 0].reshape(H, W)
np.set_printoptions(precision=3)
print(out)
# Interior cells see nine ones, edges six, corners four. Attention on identical
# tokens would give one value everywhere; the padding alone breaks the symmetry.

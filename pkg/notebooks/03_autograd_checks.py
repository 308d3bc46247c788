"""
Checking the hand-written gradients
===================================

Every layer of the meta-model has its own backward pass. Central finite
differences give an independent estimate to compare against.
"""

import numpy as np

from stackqa import autograd as ag
from stackqa.cli import grad_check_suite

# a quadratic has an exact central difference
w = ag.Tensor(np.array([3.0]), requires_grad=True)
print(ag.grad_check(lambda: (w * w).sum(), [w]))

# all layers plus a tiny end-to-end model
for name, rep in grad_check_suite(seed=0).items():
    print(f"{name:22} {rep}")

###############################################################################
# The two KL directions

log_pred = ag.Tensor(np.log([0.25, 0.75]))
target = np.array([0.5, 0.5])
print("KL(y || y_hat)", float(ag.kl_div_loss(log_pred, target).data))  # 0.143841
print("KL(y_hat || y)", float(ag.kl_div_loss(log_pred, target, ag.LITERAL).data))

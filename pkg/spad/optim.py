#
# python-spad: structured pruning adapters.
#
# This program is free software: you can redistribute it and/or modify it under
# the terms of the GNU Lesser General Public License as published by the Free
# Software Foundation, either version 3 of the License, or (at your option) any
# later version.
#
# This program is distributed in the hope that it will be useful, but WITHOUT
# ANY WARRANTY; without even the implied warranty of MERCHANTABILITY or FITNESS
# FOR A PARTICULAR PURPOSE.  See the GNU Lesser General Public License for more
# details.
#
# You should have received a copy of the GNU General Public License along with
# this program.  If not, see <http://www.gnu.org/licenses/>.
#

"""
Stochastic gradient descent with momentum and weight decay, and the
learning-rate policies the training driver uses.

>>> from spad.tensor import Tensor
>>> from spad.optim import OptimizerState, sgd_step
>>> p = Tensor([0.0], requires_grad=True, name="p")
>>> state = OptimizerState(lr=0.1, momentum=0.9)
>>> for _ in range(2):
...     p.grad = [1.0]
...     sgd_step([p], state)
>>> round(p.item(), 10)
-0.29
>>> p.grad is None
True

The learning rate is scaled linearly with the batch size, then reduced 5x
at each quarter of a training block:

>>> from spad.optim import linear_scaled_lr, step_lr
>>> linear_scaled_lr(0.01, 64)
0.0025
>>> [round(step_lr(0.01, e, 20), 8) for e in (0, 5, 10, 15)]
[0.01, 0.002, 0.0004, 8e-05]

"""

import numpy as np

from .tensor import check_finite


class MissingGradError(ValueError):
    """Raised by sgd_step when a parameter has no gradient."""


class OptimizerState(object):
    """
    Hyperparameters and momentum buffers for :func:`sgd_step`. Buffers are
    created on first use, one per parameter, with the parameter's shape.

    """
    def __init__(self, lr, momentum=0.9, weight_decay=0.0):
        if lr <= 0:
            raise ValueError("learning rate must be positive, got %r" % lr)
        if not 0 <= momentum < 1:
            raise ValueError("momentum must lie in [0, 1), got %r" % momentum)
        if weight_decay < 0:
            raise ValueError("weight decay must be nonnegative, got %r" % weight_decay)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {}

    def __repr__(self):
        return "<OptimizerState lr %g momentum %g decay %g, %u buffers>" % (
            self.lr, self.momentum, self.weight_decay, len(self.buffers))

    def buffer(self, param):
        buf = self.buffers.get(id(param))
        if buf is None:
            buf = self.buffers[id(param)] = np.zeros_like(param.data)
        return buf


def sgd_step(params, state):
    """
    Apply one update ``v = momentum*v + grad + decay*p; p -= lr*v`` to each
    parameter in place, then clear its gradient.

    :raises: MissingGradError, NonFiniteError

    """
    params = list(params)
    for p in params:
        if p.grad is None:
            raise MissingGradError("parameter %s has no gradient" %
                                   (p.name or "of shape " + str(p.shape)))
        check_finite(p.grad, "gradient of " + (p.name or "parameter"))

    for p in params:
        buf = state.buffer(p)
        buf *= state.momentum
        buf += np.asarray(p.grad, dtype=np.float64)
        if state.weight_decay:
            buf += state.weight_decay * p.data
        p.data -= state.lr * buf
        p.grad = None


def linear_scaled_lr(lr, batch_size, base_batch_size=256):
    """Scale a learning rate quoted for base_batch_size to batch_size."""
    return lr * batch_size / base_batch_size


def step_lr(base, epoch, block_epochs, factor=5, steps=4):
    """
    Learning rate for an epoch inside a block of block_epochs epochs: the
    block is split into *steps* equal parts and the rate drops by *factor*
    at each boundary.

    """
    if block_epochs <= 0:
        raise ValueError("block must have at least one epoch")
    stage = min(steps - 1, (steps * epoch) // block_epochs)
    return base / factor ** stage

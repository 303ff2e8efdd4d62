"""compo_flow - rectified flow matching for compo

Training pairs clean latents Z_0 with Gaussian noise along the straight
line Z_t = (1 - t) Z_0 + t eps, one t shared by every component of a scene,
and regresses the velocity eps - Z_0.  Sampling integrates the learned
field from pure noise (t = 1) to data (t = 0) with Euler steps and
classifier-free guidance.


Requirements
------------
numpy : noise and interpolation.
compo_numerics : the loss.
compo_tokens : ID draws.
compo_globals : debugger.
compo_errors : NumericsError, SamplingError.

Classes
-------
FlowBatch : one training example on the flow path.

Functions
---------
make_flow_batch(Z0, rng, t=None) : FlowBatch.
fm_loss(pred, target) : mean squared error.
sample(model, N, steps, cond, cfg_scale, rng) : guided Euler sampler.
"""

import numpy as np
import compo_numerics as cn
import compo_tokens
from compo_globals import debugger
from compo_errors import NumericsError, SamplingError


class FlowBatch(object):
    def __init__(self, Z0, eps, t, condition=None, dropped=False):
        Z0 = np.asarray(Z0, dtype=np.float64)
        eps = np.asarray(eps, dtype=np.float64)
        if Z0.shape != eps.shape:
            raise NumericsError("noise shape {} does not match latents {}".
                                format(eps.shape, Z0.shape))
        self.Z0 = Z0
        self.eps = eps
        self.t = float(t)  # one level for every component
        self.Z_t = (1.0 - self.t) * Z0 + self.t * eps
        self.target = eps - Z0
        self.condition = condition
        self.dropped = dropped


def make_flow_batch(Z0, rng, t=None, condition=None):
    Z0 = np.asarray(Z0, dtype=np.float64)
    if not np.all(np.isfinite(Z0)):
        raise NumericsError("non-finite clean latents")
    eps = rng.standard_normal(Z0.shape)
    if t is None:
        t = rng.uniform(0.0, 1.0)
    if not 0.0 <= t <= 1.0:
        raise NumericsError("t must lie in [0, 1], got {}".format(t))
    return FlowBatch(Z0, eps, t, condition)


def fm_loss(pred, target):
    pred, target = cn.as_tensor(pred), cn.as_tensor(target)
    if pred.shape != target.shape:
        raise NumericsError("loss shape mismatch: {} vs {}".format(
            pred.shape, target.shape))
    diff = cn.sub(pred, target)
    return cn.mean(cn.mul(diff, diff))


def guided_velocity(model, Z, t, cond, cfg_scale, ids):
    """v_uncond + cfg_scale * (v_cond - v_uncond), routing shared by both
    branches (decided by the conditional one)."""
    v_cond, routings = model.forward_routed(Z, t, cond, ids=ids)
    if cfg_scale == 1.0 or cond.null:
        return v_cond.value
    v_uncond, _ = model.forward_routed(Z, t, model.null_condition(),
                                       routings=routings, ids=ids)
    return v_uncond.value + cfg_scale * (v_cond.value - v_uncond.value)


def sample(model, N, steps, cond, cfg_scale, rng, L=None, ids=None,
           velocity=None):
    """Euler from t = 1 to t = 0: Z <- Z - dt * v, dt = 1 / steps.

    Routing is deterministic.  IDs are drawn once per scene from rng unless
    given.  velocity(Z, t) replaces the model's guided field when given."""
    if steps < 1:
        raise SamplingError("steps must be >= 1")
    L = L if L is not None else model.cfg.points
    Z = rng.standard_normal((N, L, model.cfg.latent_dim))
    if ids is None:
        ids = compo_tokens.assign_id_embeddings(N, model.cfg.codebook_size,
                                                rng)
    debugger.message("FLOW", "Sampling {} components, {} steps, cfg {}".
                     format(N, steps, cfg_scale))
    dt = 1.0 / steps
    for step in range(steps):
        t = 1.0 - step * dt
        try:
            if velocity is not None:
                v = velocity(Z, t)
            else:
                v = guided_velocity(model, Z, t, cond, cfg_scale, ids)
        except NumericsError as e:
            raise SamplingError("step {}: {}".format(step, e), step=step)
        Z = Z - dt * v
        if not np.all(np.isfinite(Z)):
            raise SamplingError("non-finite state at step {}".format(step),
                                step=step)
    debugger.log_stat("Samples drawn", 1)
    debugger.report_stat("Samples drawn", mod=10)
    return Z

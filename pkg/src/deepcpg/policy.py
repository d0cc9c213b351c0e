"""The actor -> unpack -> CPG rollout -> critic chain and its gradient."""

from __future__ import annotations

import numpy as np

from .cpg import CpgState, Modulation, unpack_params
from .cpg_grad import backward, rollout_with_tape


def action_window(ys: np.ndarray) -> np.ndarray:
    """(steps, batch, n) joint goals -> (batch, steps * n), time-major per sample."""
    return np.moveaxis(ys, 0, -2).reshape(ys.shape[1], -1)


def unflatten_action_window(flat: np.ndarray, steps: int, n: int) -> np.ndarray:
    return np.moveaxis(flat.reshape(flat.shape[0], steps, n), 1, 0)


def actor_cpg_forward(actor, x, state: CpgState, mod: Modulation, steps: int):
    """Joint goals (steps, batch, n) produced by the actor's CPG goals."""
    heads, cache = actor.forward(x)
    params = unpack_params(heads, actor.n)
    _, ys, tape = rollout_with_tape(params, mod, state, steps)
    return ys, (cache, tape)


def actor_objective_and_grad(actor, critic, x, state: CpgState, mod: Modulation, steps: int,
                             critic_x=None, action_slice=None):
    """Mean Q over the batch and its gradient w.r.t. every actor parameter.

    By default the critic reads [x, own action window]. For a centralized
    critic pass ``critic_x`` (the full critic input with any placeholder in
    the own-action columns) and ``action_slice`` locating those columns.
    """
    x = np.atleast_2d(x)
    ys, (cache, tape) = actor_cpg_forward(actor, x, state, mod, steps)
    own = action_window(ys)
    batch = x.shape[0]
    if critic_x is None:
        inp = np.concatenate([x, own], axis=-1)
        action_slice = slice(x.shape[1], inp.shape[1])
    else:
        inp = np.array(critic_x, dtype=np.float64)
        inp[:, action_slice] = own
    q, ccache = critic.forward(inp)
    _, g_in = critic.backward(ccache, np.full(batch, 1.0 / batch))
    g_ys = unflatten_action_window(g_in[:, action_slice], steps, actor.n)
    cpg_grads = backward(tape, g_ys)
    grads = actor.backward(cache, cpg_grads.raw_head_gradients())
    return float(q.mean()), grads


def feedforward_objective_and_grad(actor, critic, x, critic_x=None, action_slice=None):
    """Mean Q and actor gradient for the baseline actor (one joint-goal vector)."""
    x = np.atleast_2d(x)
    g_j, cache = actor.forward(x)
    batch = x.shape[0]
    if critic_x is None:
        inp = np.concatenate([x, g_j], axis=-1)
        action_slice = slice(x.shape[1], inp.shape[1])
    else:
        inp = np.array(critic_x, dtype=np.float64)
        inp[:, action_slice] = g_j
    q, ccache = critic.forward(inp)
    _, g_in = critic.backward(ccache, np.full(batch, 1.0 / batch))
    grads = actor.backward(cache, g_in[:, action_slice])
    return float(q.mean()), grads

"""Finite-difference oracle for the routed training objective.

Each parameter belongs to one layer l and one group (an expert or the gate).
Its routed objective is

    beta * L_oc(full forward)
    + expert term of (l, k)           if the parameter belongs to expert k
    + alpha * gating term of layer l  if the parameter belongs to the gate

with the layer-l input held at its unperturbed value (the stop point).
"""

import numpy as np

from camera.model import PARAM_GROUPS, EXPERTS, moe_layer_forward, model_forward


def _layer_input(model, graph, h0, l):
    return model_forward(model, graph, h0).layers[l].inputs if l else h0


def routed_objective(model, graph, h0, name, alpha, beta, eps=1e-8, h_in=None):
    _, l, field = name.split(".")
    l = int(l)
    group = PARAM_GROUPS[field]
    n = h0.shape[0]
    total = 0.0
    if beta:
        out = model_forward(model, graph, h0).output
        norms = np.sqrt((out**2).sum(axis=1))
        total += beta * np.mean(np.log1p(np.exp(norms)))
    _, lt = moe_layer_forward(model.layers[l], graph, h_in, model.mode, model.gating_mode, model.expert_mask)
    if group in EXPERTS:
        e = lt.residuals[EXPERTS.index(group)]
        if e is not None:
            total += (e**2).sum() / n
    elif alpha and model.gating_mode.value != "uniform":
        g = lt.gates
        total += alpha * (-(g * np.log(g + eps)).sum() / n)
    return total


def fd_gradients(model, graph, h0, alpha, beta, step=1e-5):
    grads = {}
    inputs = [_layer_input(model, graph, h0, l) for l in range(model.num_layers)]
    for name, p in model.parameters().items():
        h_in = inputs[int(name.split(".")[1])]
        fd = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            up = routed_objective(model, graph, h0, name, alpha, beta, h_in=h_in)
            p[idx] = orig - step
            down = routed_objective(model, graph, h0, name, alpha, beta, h_in=h_in)
            p[idx] = orig
            fd[idx] = (up - down) / (2 * step)
        grads[name] = fd
    return grads

"""Instance builders shared by the unit and acceptance tests."""
import numpy as np

from fedbens import curvature as cv
from fedbens.oracles import blr_local_posterior
from fedbens.posterior import ClientPosterior, GlobalObjective, LaplaceComponent

from conftest import random_net


def blr_instance(seed, d=20, C=5, n_c=30, var=0.1):
    """Conjugate linear-regression clients; ``var`` is both the noise and the prior variance."""
    rng = np.random.default_rng(seed)
    prior = cv.PriorSpec(var)
    w_true = rng.normal(0.0, np.sqrt(var), d)
    data = []
    for _ in range(C):
        X = rng.standard_normal((n_c, d))
        data.append((X, X @ w_true + rng.normal(0.0, np.sqrt(var), n_c)))
    locals_ = [blr_local_posterior(X, y, var, prior) for X, y in data]
    return prior, data, locals_


def structured_objective(rng, kind, M, C, dims=(3, 4, 3), prior=cv.PriorSpec(0.1), T=0.5):
    """C clients with M components each, precisions fitted from random nets and data."""
    clients = []
    for c in range(C):
        comps = []
        for _ in range(M):
            spec, params, x, _ = random_net(rng, dims, "tanh", n=10)
            prec = cv.fit_precision(kind, params, spec, x, T, prior)
            comps.append(LaplaceComponent(params, prec))
        clients.append(ClientPosterior(comps, client_id=c))
    return spec, GlobalObjective(clients, prior)


def central_diff(f, w, h=1e-5):
    g = np.empty_like(w)
    for j in range(len(w)):
        e = np.zeros_like(w)
        e[j] = h
        g[j] = (f(w + e) - f(w - e)) / (2 * h)
    return g

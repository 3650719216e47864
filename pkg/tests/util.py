import numpy as np

from starforest.harness import RunConfig, run_ranks

SAMPLE = [
    (3, [0, 1, 2, 3], [(1, 2), (1, 0), (1, 0), (0, 2)]),
    (4, [0, 1, 3], [(2, 0), (0, 0), (2, 1)]),
    (2, [0, 1, 2], [(0, 0), (1, 0), (1, 3)]),
]


def run(nranks, body, *args, **config):
    return run_ranks(RunConfig(nranks=nranks, **config), body, *args)


def sample_sf(comm, algorithm=None):
    from starforest import StarForest

    nroots, local, remote = SAMPLE[comm.rank]
    sf = StarForest(comm)
    sf.set_graph(nroots, len(local), local, remote)
    sf.setup(algorithm)
    return sf


def i64(values):
    return np.array(values, dtype=np.int64)

import numpy as np

# Named sub-streams of the master seed.  Changing how one stage consumes
# randomness never perturbs another stage.
STREAMS = {
    "datagen": 0,
    "init": 1,
    "sgd": 2,
    "participation": 3,
    "split": 4,
    "ood": 5,
}


def stream(seed, name, *keys):
    """Generator for sub-stream ``name`` of ``seed``, further keyed by ints."""
    entropy = [int(seed), STREAMS[name], *(int(k) for k in keys)]
    return np.random.default_rng(np.random.SeedSequence(entropy))

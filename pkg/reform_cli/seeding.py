import zlib

import numpy as np

# Named sub-streams derived from the root seed
SPLIT = "split"
INIT = "init"
NEGATIVES = "negatives"
KEYS = "keys"
NOISE = "noise"
PROFILE = "profile"
SYNTH = "synth"


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for (seed, name, *keys).

    Example::
        >>> a = substream(7, "keys", 0, 3).integers(1 << 30)
        >>> b = substream(7, "keys", 0, 3).integers(1 << 30)
        >>> bool(a == b)
        True
    """
    tag = zlib.crc32(name.encode("utf8"))
    spawn_key = (tag, *(int(k) for k in keys))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=spawn_key))
